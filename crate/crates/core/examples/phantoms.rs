//! Procedural phantom dataset: generate, split, save, and a BUSI-layout round trip.
//!
//! ```text
//! cargo run --release --example phantoms -- /tmp/phantoms
//! ```

use std::path::PathBuf;

use sonodiff::data::{busi_mix, ingest_busi, synth_generate, write_busi_layout, Dataset, Split, CLASS_NAMES};

fn main() -> sonodiff::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("sonodiff-phantoms"));

    let mut ds = synth_generate(120, busi_mix(), 42)?;
    ds.split([0.7, 0.15, 0.15], 42)?;
    for (c, n) in ds.counts().iter().enumerate() {
        println!("{:>9}: {n}", CLASS_NAMES[c]);
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:?}: {}", ds.subset(split).len());
    }

    let manifest = ds.save(&out.join("dataset"))?;
    println!("manifest with {} entries at {}", manifest.entries.len(), out.join("dataset").display());
    let back = Dataset::load(&out.join("dataset"))?;
    assert_eq!(back.counts(), ds.counts());

    // Same images in the directory layout of the public BUSI release.
    let busi = out.join("busi");
    write_busi_layout(&ds, &busi)?;
    let report = ingest_busi(&busi)?;
    println!("re-ingested {} images, {} skipped, counts {:?}", report.dataset.len(), report.errors.len(), report.dataset.counts());
    Ok(())
}
