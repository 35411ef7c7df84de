//! The HTTP generation API on an ephemeral port, exercised with plain HTTP/1.1 requests.
//!
//! ```text
//! SONODIFF_RUN=runs/smoke cargo run --release --example http_service
//! ```
//!
//! `sonodiff serve --config configs/smoke/serve.toml` runs the same router on port 8733.

mod common;

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};

use base64::Engine as _;

use sonodiff::generate::Models;
use sonodiff::service::Service;

fn request(addr: SocketAddr, method: &str, path: &str, body: &str) -> std::io::Result<String> {
    let mut s = TcpStream::connect(addr)?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut out = String::new();
    s.read_to_string(&mut out)?;
    Ok(out)
}

fn summarize(resp: &str) -> String {
    let status = resp.lines().next().unwrap_or_default().to_string();
    let body = resp.split("\r\n\r\n").nth(1).unwrap_or_default();
    let short: String = body.chars().take(160).collect();
    format!("{status}\n  {short}{}", if body.len() > 160 { "…" } else { "" })
}

fn main() -> sonodiff::Result<()> {
    let s = common::stack(false)?;
    let svc = Service::ready(Models::from_checkpoints(&s.codec, &s.diffusion, None)?, 2);
    let router = svc.router();

    let rt = tokio::runtime::Runtime::new().map_err(|e| sonodiff::Error::io("runtime", e))?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).map_err(|e| sonodiff::Error::io("bind", e))?;
    let addr = listener.local_addr().map_err(|e| sonodiff::Error::io("bind", e))?;
    rt.spawn(async move { axum::serve(listener, router).await });
    println!("serving on http://{addr}");

    let mut disc = image::GrayImage::new(64, 64);
    for (x, y, px) in disc.enumerate_pixels_mut() {
        let (dx, dy) = (x as f64 - 32.0, y as f64 - 36.0);
        px.0[0] = if dx * dx + dy * dy < 100.0 { 255 } else { 0 };
    }
    let mask = base64::engine::general_purpose::STANDARD.encode(sonodiff::imaging::encode_png(&disc)?);
    let masked = format!(r#"{{"class_id":1,"steps":10,"mask":"{mask}"}}"#);

    let calls = [
        ("GET", "/health", ""),
        ("GET", "/meta", ""),
        ("POST", "/generate", r#"{"prompt":"malignant breast lesion","steps":20,"count":2,"seed":3}"#),
        ("POST", "/generate", r#"{"class_id":1,"colour":"red"}"#),
        ("POST", "/generate", masked.as_str()),
    ];
    for (method, path, body) in calls {
        let resp = request(addr, method, path, body).map_err(|e| sonodiff::Error::io(path, e))?;
        println!("{method} {path} -> {}", summarize(&resp));
    }
    Ok(())
}
