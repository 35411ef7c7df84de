//! Datasets: procedural phantoms, BUSI ingestion, manifests and splits.

pub mod busi;
pub mod phantom;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging;
use crate::numerics::{PortableRng, Tensor};

pub use busi::{ingest_busi, write_busi_layout, IngestReport};
pub use phantom::boundary_roughness;

pub const CLASS_NAMES: [&str; 3] = ["normal", "benign", "malignant"];
/// BUSI class proportions: 133 normal, 437 benign, 210 malignant of 780.
pub const BUSI_COUNTS: [usize; 3] = [133, 437, 210];
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

pub fn busi_mix() -> [f64; 3] {
    let total: usize = BUSI_COUNTS.iter().sum();
    BUSI_COUNTS.map(|c| c as f64 / total as f64)
}

pub fn prompt_templates() -> Vec<String> {
    CLASS_NAMES.iter().map(|c| format!("Ultrasound image of a {c} breast")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Ingested,
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub class_id: usize,
    /// `[1, 64, 64]` in `[−1, 1]`.
    pub image: Tensor,
    /// `[1, 64, 64]` in `{0, 1}`.
    pub mask: Tensor,
    pub source: Source,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub class_id: usize,
    pub split: Split,
    pub source: Source,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

/// Persisted description of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub counts: [usize; 3],
    pub entries: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Integer counts proportional to `weights` summing to `n` (largest
/// remainder, ties to the lower index).
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn check_fractions(f: &[f64], what: &str) -> Result<()> {
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} {f:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// `n` phantoms with class proportions `class_mix`, all in the train split.
/// Sample `i` draws from its own derived stream, so the result does not
/// depend on generation order.
pub fn synth_generate(n: usize, class_mix: [f64; 3], seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synth_generate: n must be ≥ 1".into()));
    }
    check_fractions(&class_mix, "class mix")?;
    let counts = apportion(n, &class_mix);
    let mut classes: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    PortableRng::derive(seed, 0xDA7A).shuffle(&mut classes);
    let samples = classes
        .into_iter()
        .enumerate()
        .map(|(i, class_id)| {
            let p = phantom::generate(class_id, &mut PortableRng::derive(seed, 1 + i as u64));
            Sample {
                id: format!("synth-{i:05}"),
                class_id,
                image: p.image,
                mask: p.mask,
                source: Source::Synthetic,
                split: Split::Train,
            }
        })
        .collect();
    Ok(Dataset { seed, samples })
}

/// Maps a free-text prompt to a class by case-insensitive whole-word match.
/// Exactly one of `normal`, `benign`, `malignant` must occur.
pub fn prompt_to_class(prompt: &str) -> Result<usize> {
    let lower = prompt.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).collect();
    let hits: Vec<usize> = (0..3).filter(|&c| words.contains(&CLASS_NAMES[c])).collect();
    match hits.as_slice() {
        [c] => Ok(*c),
        _ => Err(Error::AmbiguousPrompt { prompt: prompt.to_string(), templates: prompt_templates().join(" | ") }),
    }
}

/// Stacks `[1, H, W]` planes into `[N, 1, H, W]`.
pub fn stack_planes<'a>(planes: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<Vec<usize>> = None;
    let mut n = 0;
    for p in planes {
        match &dims {
            None => dims = Some(p.shape().to_vec()),
            Some(d) if d.as_slice() != p.shape() => {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", d, p.shape())))
            }
            Some(_) => {}
        }
        data.extend_from_slice(p.data());
        n += 1;
    }
    let d = dims.ok_or_else(|| Error::Shape("cannot stack zero planes".into()))?;
    if d.len() != 3 || d[0] != 1 {
        return Err(Error::Shape(format!("expected [1, H, W] planes, got {d:?}")));
    }
    Tensor::new([n, 1, d[1], d[2]], data)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.samples {
            c[s.class_id] += 1;
        }
        c
    }

    pub fn subset(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Stratified split: each class is shuffled with its own stream and cut by
    /// [`apportion`] into train/val/test.
    pub fn split(&mut self, fractions: [f64; 3], seed: u64) -> Result<()> {
        check_fractions(&fractions, "split fractions")?;
        let parts = fractions.iter().filter(|&&f| f > 0.0).count();
        for c in 0..3 {
            let mut idx: Vec<usize> = (0..self.samples.len()).filter(|&i| self.samples[i].class_id == c).collect();
            if idx.is_empty() {
                continue;
            }
            if idx.len() < parts {
                return Err(Error::Dataset(format!(
                    "class {} has {} samples, fewer than the {parts} requested splits",
                    CLASS_NAMES[c],
                    idx.len()
                )));
            }
            PortableRng::derive(seed, 0x5917 + c as u64).shuffle(&mut idx);
            let k = apportion(idx.len(), &fractions);
            for (j, &i) in idx.iter().enumerate() {
                self.samples[i].split = if j < k[0] {
                    Split::Train
                } else if j < k[0] + k[1] {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        Ok(())
    }

    /// Images `[N,1,H,W]`, masks `[N,1,H,W]` and class ids of `samples`.
    pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        Ok((
            stack_planes(samples.iter().map(|s| &s.image))?,
            stack_planes(samples.iter().map(|s| &s.mask))?,
            samples.iter().map(|s| s.class_id).collect(),
        ))
    }

    /// Writes PNGs under `images/` and `masks/` plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
            let image = format!("images/{}.png", s.id);
            let mask = format!("masks/{}.png", s.id);
            let ib = imaging::write_png(&dir.join(&image), &imaging::to_gray(&s.image, h, w)?)?;
            let mb = imaging::write_png(&dir.join(&mask), &imaging::mask_to_gray(&s.mask, h, w)?)?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                class_id: s.class_id,
                split: s.split,
                source: s.source,
                image,
                mask,
                image_sha256: sha256_hex(&ib),
                mask_sha256: sha256_hex(&mb),
            });
        }
        let m = DatasetManifest { version: MANIFEST_VERSION, seed: self.seed, counts: self.counts(), entries };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }

    /// Loads a dataset from a manifest file (or a directory containing one),
    /// verifying every file hash.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        let mut samples = Vec::with_capacity(m.entries.len());
        for e in &m.entries {
            if e.class_id > 2 {
                return Err(Error::Dataset(format!("{}: class id {} out of range", e.id, e.class_id)));
            }
            let read = |rel: &str, want: &str| -> Result<Vec<u8>> {
                let p = dir.join(rel);
                let bytes = std::fs::read(&p).map_err(|err| Error::io(&p, err))?;
                let got = sha256_hex(&bytes);
                if got != want {
                    return Err(Error::HashMismatch(format!("{}: expected {want}, found {got}", p.display())));
                }
                Ok(bytes)
            };
            let image = imaging::from_gray(&imaging::decode_gray(&read(&e.image, &e.image_sha256)?)?);
            let mask = imaging::mask_from_gray(&imaging::decode_gray(&read(&e.mask, &e.mask_sha256)?)?);
            samples.push(Sample { id: e.id.clone(), class_id: e.class_id, image, mask, source: e.source, split: e.split });
        }
        let ds = Dataset { seed: m.seed, samples };
        if ds.counts() != m.counts {
            return Err(Error::Dataset(format!("manifest counts {:?} disagree with entries {:?}", m.counts, ds.counts())));
        }
        Ok(ds)
    }
}
