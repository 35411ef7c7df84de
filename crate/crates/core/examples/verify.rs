//! Invariant suite: gradient checks, schedule identities, zero-conv identity, checkpoint integrity.
//!
//! ```text
//! cargo run --release --example verify
//! ```

use sonodiff::verify;

fn main() -> sonodiff::Result<()> {
    let checks = verify::run_suite(true, 0)?;
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
