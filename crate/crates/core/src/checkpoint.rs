//! Versioned named-tensor checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "SDCK"
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! blob_count   u32
//! blob × blob_count:
//!     name_len u32, name (UTF-8)
//!     ndim u32, dims u64 × ndim
//!     data f32 × prod(dims)
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Model tensors keep their parameter names (`codec.…`, `unet.…`,
//! `control.…`, `classifier.…`). Optimizer moments are stored as
//! `optim.m/<name>` and `optim.v/<name>`. The content hash of a checkpoint is
//! the hex digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, RngState, Tensor};

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const FORMAT_VERSION: u32 = 1;
const OPTIM_M: &str = "optim.m/";
const OPTIM_V: &str = "optim.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Codec,
    Diffusion,
    Control,
    Classifier,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Diffusion => "diffusion",
            Stage::Control => "control",
            Stage::Classifier => "classifier",
        }
    }

    /// Parameter prefix owned by the stage.
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Diffusion => "unet",
            Stage::Control => "control",
            Stage::Classifier => "classifier",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codec" => Ok(Stage::Codec),
            "diffusion" => Ok(Stage::Diffusion),
            "control" => Ok(Stage::Control),
            "classifier" => Ok(Stage::Classifier),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub stage: Stage,
    /// Echo of the configuration that produced the weights.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    #[serde(default)]
    pub parent_hash: Option<String>,
    #[serde(default)]
    pub latent_scale: Option<f64>,
    #[serde(default)]
    pub rng: Option<RngState>,
    #[serde(default)]
    pub adam: Option<AdamMeta>,
    /// Content hashes of the training images, for leakage checks.
    #[serde(default)]
    pub data_fingerprints: Vec<String>,
}

impl CheckpointHeader {
    pub fn new(stage: Stage, config: serde_json::Value, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            stage,
            config,
            seed,
            step: 0,
            parent_hash: None,
            latent_scale: None,
            rng: None,
            adam: None,
            data_fingerprints: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("{what} length {v} exceeds file size")))
    }
}

fn put_blob(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, params: ParamStore) -> Self {
        Self { header, params, optimizer: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.adam = self.optimizer.as_ref().map(|a| AdamMeta {
            step_count: a.step_count,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps_hat: a.eps_hat,
        });
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(&json);
        let moments = self.optimizer.as_ref().map_or(0, |a| a.m.len() + a.v.len());
        out.extend(((self.params.len() + moments) as u32).to_le_bytes());
        for p in self.params.iter() {
            put_blob(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
        }
        if let Some(a) = &self.optimizer {
            for (prefix, map) in [(OPTIM_M, &a.m), (OPTIM_V, &a.v)] {
                for (name, v) in map {
                    put_blob(&mut out, &format!("{prefix}{name}"), &[v.len()], v);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        Ok(out)
    }

    /// Parses and verifies a checkpoint; returns it with its content hash.
    pub fn from_bytes(buf: &[u8]) -> Result<(Self, String)> {
        if buf.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Checkpoint("truncated checkpoint: file too short".into()));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let computed = Sha256::digest(body);
        if computed.as_slice() != digest {
            return Err(Error::HashMismatch(format!(
                "checkpoint digest {} does not match content {}",
                hex::encode(digest),
                hex::encode(computed)
            )));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let hlen = r.len("header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut optim = header.adam.as_ref().map(|a| AdamState {
            m: Default::default(),
            v: Default::default(),
            step_count: a.step_count,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps_hat: a.eps_hat,
        });
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<usize>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| Error::Checkpoint(format!("blob `{name}` shape {shape:?} is too large")))?;
            let data: Vec<f32> =
                r.take(numel * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
            if let Some(rest) = name.strip_prefix(OPTIM_M) {
                optim.as_mut().ok_or_else(|| Error::Checkpoint("optimizer blob without optimizer header".into()))?.m.insert(rest.to_string(), data);
            } else if let Some(rest) = name.strip_prefix(OPTIM_V) {
                optim.as_mut().ok_or_else(|| Error::Checkpoint("optimizer blob without optimizer header".into()))?.v.insert(rest.to_string(), data);
            } else {
                params.insert(name, Tensor::new(shape, data)?)?;
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after blobs", body.len() - r.pos)));
        }
        Ok((Self { header, params, optimizer: optim }, hex::encode(digest)))
    }

    /// Hex SHA-256 digest the serialized checkpoint ends with.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            Error::HashMismatch(m) => Error::HashMismatch(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks that every tensor `reference` expects is present with the same
    /// shape and that no unexpected tensor is present. The error names the
    /// first offending blob.
    pub fn validate_shapes(&self, reference: &ParamStore) -> Result<()> {
        for r in reference.iter() {
            match self.params.get(&r.name) {
                None => return Err(Error::Checkpoint(format!("blob `{}` missing from checkpoint", r.name))),
                Some(p) if p.tensor.shape() != r.tensor.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "blob `{}` has shape {:?}, config implies {:?}",
                        r.name,
                        p.tensor.shape(),
                        r.tensor.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.iter().find(|p| !reference.contains(&p.name)) {
            return Err(Error::Checkpoint(format!("unexpected blob `{}` for this config", extra.name)));
        }
        Ok(())
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.header.stage != stage {
            return Err(Error::StageMismatch { expected: stage.name().into(), found: self.header.stage.name().into() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_unet, UNetConfig};
    use crate::numerics::{adam_step, PortableRng};

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::new([2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap()).unwrap();
        p.insert("a.b", Tensor::scalar(7.25)).unwrap();
        let mut h = CheckpointHeader::new(Stage::Codec, serde_json::json!({"k": 1}), 9);
        h.rng = Some(PortableRng::new(3).state());
        h.latent_scale = Some(0.83);
        h.parent_hash = Some("ab".repeat(32));
        let mut c = Checkpoint::new(h, p);
        for q in c.params.iter_mut() {
            q.grad = Some(q.tensor.map(|v| v * 0.5 + 1.0));
        }
        let mut adam = AdamState::new(1e-3);
        adam_step(&mut c.params, &mut adam).unwrap();
        c.optimizer = Some(adam);
        c
    }

    #[test]
    fn round_trip_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let (back, hash) = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(hash, hex::encode(&bytes[bytes.len() - 32..]));
        assert_eq!(back.params.hash(""), c.params.hash(""));
        for (a, b) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(a.tensor.to_le_bytes(), b.tensor.to_le_bytes());
        }
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.header.rng, c.header.rng);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::HashMismatch(_) | Error::Checkpoint(_)));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::HashMismatch(_))));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        let n = bytes.len();
        let digest = Sha256::digest(&bytes[..n - 32]);
        bytes[n - 32..].copy_from_slice(&digest);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        let path = dir.path().join("x/c.sdck");
        let h = c.save(&path).unwrap();
        let (back, h2) = Checkpoint::load(&path).unwrap();
        assert_eq!(h, h2);
        assert_eq!(back.header, {
            let mut e = c.header.clone();
            e.adam = back.header.adam.clone();
            e
        });
    }

    #[test]
    fn shape_validation_names_first_offender() {
        let a = UNetConfig { base_channels: 8, time_embed_dim: 16, ..UNetConfig::default() };
        let b = UNetConfig { base_channels: 16, ..a.clone() };
        let ck = Checkpoint::new(CheckpointHeader::new(Stage::Diffusion, serde_json::Value::Null, 0), init_unet(&a, 0).unwrap());
        assert!(ck.validate_shapes(&init_unet(&a, 1).unwrap()).is_ok());
        let err = ck.validate_shapes(&init_unet(&b, 0).unwrap()).unwrap_err().to_string();
        assert!(err.contains("`unet.conv_in.weight`"), "{err}");
        let c = UNetConfig { attention_at_bottleneck: false, ..a.clone() };
        let err = ck.validate_shapes(&init_unet(&c, 0).unwrap()).unwrap_err().to_string();
        assert!(err.contains("unexpected blob `unet.mid.attn"), "{err}");
    }

    #[test]
    fn stage_checks() {
        let c = sample();
        assert!(c.expect_stage(Stage::Codec).is_ok());
        assert!(matches!(c.expect_stage(Stage::Diffusion), Err(Error::StageMismatch { .. })));
        assert_eq!("control".parse::<Stage>().unwrap(), Stage::Control);
        assert!("vae".parse::<Stage>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn reload_keeps_content_hash(scale in 1e-6f64..1e3, lr in 1e-8f64..1.0) {
            let mut c = sample();
            c.header.latent_scale = Some(scale);
            c.header.config = serde_json::json!({ "lr": lr, "scale": scale });
            let bytes = c.to_bytes().unwrap();
            let (back, hash) = Checkpoint::from_bytes(&bytes).unwrap();
            proptest::prop_assert_eq!(back.content_hash().unwrap(), hash);
        }
    }
}
