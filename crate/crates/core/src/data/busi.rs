//! Reading and writing the BUSI directory layout:
//! `normal/`, `benign/`, `malignant/` holding `<class> (<k>).png` with masks
//! `<class> (<k>)_mask.png`, `<class> (<k>)_mask_1.png`, ….

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::GrayImage;

use super::{Dataset, Sample, Source, Split, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::imaging;
use crate::numerics::Tensor;

pub const TARGET_SIZE: u32 = 64;

/// Ingested dataset plus the files that were skipped and why.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub dataset: Dataset,
    pub errors: Vec<(PathBuf, String)>,
}

/// Splits `benign (12)_mask_1` into (`benign (12)`, true).
fn stem_of(name: &str) -> Option<(String, bool)> {
    let stem = name.strip_suffix(".png").or_else(|| name.strip_suffix(".PNG"))?;
    match stem.find("_mask") {
        Some(i) => {
            let tail = &stem[i + 5..];
            (tail.is_empty() || tail.strip_prefix('_').is_some_and(|d| d.chars().all(|c| c.is_ascii_digit())))
                .then(|| (stem[..i].to_string(), true))
        }
        None => Some((stem.to_string(), false)),
    }
}

/// Numeric index inside `(k)` for natural ordering; unparseable names sort last.
fn index_of(stem: &str) -> u64 {
    stem.rsplit_once('(')
        .and_then(|(_, r)| r.strip_suffix(')'))
        .and_then(|k| k.trim().parse().ok())
        .unwrap_or(u64::MAX)
}

fn prepare_image(img: &GrayImage) -> Tensor {
    let sq = imaging::letterbox(img, None);
    imaging::from_gray(&imageops::resize(&sq, TARGET_SIZE, TARGET_SIZE, FilterType::Triangle))
}

/// Letterbox with zero fill, resize, binarize at 0.5.
fn prepare_mask(img: &GrayImage) -> Tensor {
    let sq = imaging::letterbox(img, Some(0));
    let small = imageops::resize(&sq, TARGET_SIZE, TARGET_SIZE, FilterType::Triangle);
    let data = small.pixels().map(|p| if p.0[0] as f32 / 255.0 >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new([1, TARGET_SIZE as usize, TARGET_SIZE as usize], data).expect("mask dims")
}

fn load_pair(image: &Path, masks: &[PathBuf]) -> Result<(Tensor, Tensor)> {
    let img = imaging::read_gray(image)?;
    let mut merged: Option<GrayImage> = None;
    for m in masks {
        let mi = imaging::read_gray(m)?;
        if mi.dimensions() != img.dimensions() {
            return Err(Error::Dataset(format!(
                "mask {} is {:?} but image is {:?}",
                m.display(),
                mi.dimensions(),
                img.dimensions()
            )));
        }
        merged = Some(match merged {
            None => mi,
            Some(acc) => GrayImage::from_fn(acc.width(), acc.height(), |x, y| {
                image::Luma([acc.get_pixel(x, y).0[0].max(mi.get_pixel(x, y).0[0])])
            }),
        });
    }
    let mask = match merged {
        Some(m) => prepare_mask(&m),
        None => Tensor::zeros([1, TARGET_SIZE as usize, TARGET_SIZE as usize]),
    };
    Ok((prepare_image(&img), mask))
}

/// Ingests a BUSI-layout directory. Images are letterboxed to square with
/// edge padding, resized to 64×64 and rescaled to `[−1, 1]`; masks from all
/// `_mask*` files of an image are merged by pixelwise max and binarized.
/// Unreadable or inconsistent files are reported and skipped.
pub fn ingest_busi(dir: &Path) -> Result<IngestReport> {
    let present: Vec<(usize, PathBuf)> =
        CLASS_NAMES.iter().enumerate().map(|(c, n)| (c, dir.join(n))).filter(|(_, p)| p.is_dir()).collect();
    if present.is_empty() {
        return Err(Error::Dataset(format!("no class folders found in {}", dir.display())));
    }
    if present.len() < CLASS_NAMES.len() {
        let missing: Vec<&str> =
            (0..3).filter(|c| !present.iter().any(|(p, _)| p == c)).map(|c| CLASS_NAMES[c]).collect();
        return Err(Error::Dataset(format!("missing class folders in {}: {}", dir.display(), missing.join(", "))));
    }
    let mut report = IngestReport::default();
    for (class_id, folder) in present {
        let mut groups: BTreeMap<String, (Option<PathBuf>, Vec<PathBuf>)> = BTreeMap::new();
        let entries = std::fs::read_dir(&folder).map_err(|e| Error::io(&folder, e))?;
        for entry in entries {
            let path = match entry {
                Ok(e) => e.path(),
                Err(e) => {
                    report.errors.push((folder.clone(), e.to_string()));
                    continue;
                }
            };
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some((stem, is_mask)) = stem_of(name) else { continue };
            let slot = groups.entry(stem).or_default();
            if is_mask {
                slot.1.push(path);
            } else {
                slot.0 = Some(path);
            }
        }
        let mut stems: Vec<(String, (Option<PathBuf>, Vec<PathBuf>))> = groups.into_iter().collect();
        stems.sort_by(|a, b| index_of(&a.0).cmp(&index_of(&b.0)).then(a.0.cmp(&b.0)));
        for (stem, (image, mut masks)) in stems {
            let Some(image) = image else {
                report.errors.push((masks[0].clone(), "mask without a matching image".into()));
                continue;
            };
            masks.sort();
            match load_pair(&image, &masks) {
                Ok((img, mask)) => report.dataset.samples.push(Sample {
                    id: format!("{}/{stem}", CLASS_NAMES[class_id]),
                    class_id,
                    image: img,
                    mask,
                    source: Source::Ingested,
                    split: Split::Train,
                }),
                Err(e) => report.errors.push((image, e.to_string())),
            }
        }
    }
    Ok(report)
}

/// Writes `ds` in BUSI layout (one `_mask` file per image).
pub fn write_busi_layout(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut next = [1usize; 3];
    for s in &ds.samples {
        let class = CLASS_NAMES[s.class_id];
        let k = next[s.class_id];
        next[s.class_id] += 1;
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let folder = dir.join(class);
        imaging::write_png(&folder.join(format!("{class} ({k}).png")), &imaging::to_gray(&s.image, h, w)?)?;
        imaging::write_png(&folder.join(format!("{class} ({k})_mask.png")), &imaging::mask_to_gray(&s.mask, h, w)?)?;
    }
    for class in CLASS_NAMES {
        let folder = dir.join(class);
        std::fs::create_dir_all(&folder).map_err(|e| Error::io(&folder, e))?;
    }
    Ok(())
}
