//! Samples, dataset directories, splits and batching.
//!
//! A dataset directory holds `images/<id>.ppm` and `masks/<id>.pgm` with
//! matching stems. JPEG or PNG datasets must be converted to PPM/PGM first.

mod augment;
pub mod pnm;
mod synth;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

pub use augment::{augment, hflip, rot90, vflip, AugmentPlan, BRIGHTNESS_RANGE};
pub use synth::{synth_dataset, synth_dataset_with_shapes, synth_id, Ellipse};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::resize_planes;
use crate::rng;
use crate::tensor::Tensor;
use pnm::{image_to_tensor, read_pnm, tensor_to_image, write_pnm};

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";
/// Binarisation threshold for 8-bit mask pixels.
pub const MASK_THRESHOLD: u8 = 128;

/// An image `[3×H×W]` in `[0,1]` with its binary mask `[1×H×W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor, id: String) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(shape_err!("sample {id}: image {is:?} and mask {ms:?} do not pair up"));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample {id}: mask is not binary")));
        }
        Ok(Self { image, mask, id })
    }

    /// `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// Stacks samples into `([B×3×H×W], [B×1×H×W])`.
pub fn stack_batch(samples: &[Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Nearest-neighbour resize of `[C×H×W]` planes, sampling at pixel centres.
pub fn resize_nearest(data: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let planes = data.len() / (h * w);
    let src = |i: usize, n_in: usize, n_out: usize| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        for y in 0..out_h {
            let row = &data[(p * h + src(y, h, out_h)) * w..][..w];
            out.extend((0..out_w).map(|x| row[src(x, w, out_w)]));
        }
    }
    out
}

/// Reads an image/mask pair, resizes both to `target` (bilinear for the
/// image, nearest for the mask) and binarises the mask at 128.
pub fn load_sample(image_path: &Path, mask_path: &Path, target: (usize, usize)) -> Result<Sample> {
    let img = read_pnm(image_path)?;
    let msk = read_pnm(mask_path)?;
    if img.channels != 3 || msk.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected a P6 image and a P5 mask",
            image_path.display()
        )));
    }
    if (img.width, img.height) != (msk.width, msk.height) {
        return Err(Error::Data(format!(
            "{}: image is {}x{}, mask is {}x{}",
            image_path.display(),
            img.width,
            img.height,
            msk.width,
            msk.height
        )));
    }
    let (h, w) = (img.height, img.width);
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(contract_err!("target size must be positive"));
    }
    let mut image = image_to_tensor(&img);
    if (h, w) != target {
        image = Tensor::new(vec![3, th, tw], resize_planes(image.data(), h, w, th, tw))?;
    }
    let bits: Vec<f32> = msk.data.iter().map(|&b| (b >= MASK_THRESHOLD) as u8 as f32).collect();
    let bits = if (h, w) != target { resize_nearest(&bits, h, w, th, tw) } else { bits };
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(image, Tensor::new(vec![1, th, tw], bits)?, id)
}

/// Reads a P6 image as `[3×H×W]` in `[0,1]`, bilinearly resized to `target`.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<Tensor> {
    let img = read_pnm(path)?;
    if img.channels != 3 {
        return Err(Error::Format(format!("{}: expected a P6 image", path.display())));
    }
    let t = image_to_tensor(&img);
    if (img.height, img.width) == target {
        return Ok(t);
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(contract_err!("target size must be positive"));
    }
    Tensor::new(
        vec![3, target.0, target.1],
        resize_planes(t.data(), img.height, img.width, target.0, target.1),
    )
}

/// Writes `images/<id>.ppm` and `masks/<id>.pgm` under `dir`.
pub fn save_sample(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    fs::create_dir_all(dir.join(MASK_DIR))?;
    write_pnm(&dir.join(IMAGE_DIR).join(format!("{}.ppm", s.id)), &tensor_to_image(&s.image)?)?;
    write_pnm(&dir.join(MASK_DIR).join(format!("{}.pgm", s.id)), &tensor_to_image(&s.mask)?)?;
    Ok(())
}

/// Sorted ids of every `images/*.ppm` in a dataset directory.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let idir = dir.join(IMAGE_DIR);
    let entries = fs::read_dir(&idir).map_err(|e| Error::Data(format!("cannot list {}: {e}", idir.display())))?;
    let mut ids = Vec::new();
    for entry in entries {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = p.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads the given ids from a dataset directory.
pub fn load_ids(dir: &Path, ids: &[String], target: (usize, usize)) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            let mask = dir.join(MASK_DIR).join(format!("{id}.pgm"));
            if !mask.exists() {
                return Err(Error::Data(format!("no mask for {id} at {}", mask.display())));
            }
            load_sample(&dir.join(IMAGE_DIR).join(format!("{id}.ppm")), &mask, target)
        })
        .collect()
}

/// Loads every sample of a dataset directory, in id order.
pub fn load_dir(dir: &Path, target: (usize, usize)) -> Result<Vec<Sample>> {
    let ids = list_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::Data(format!("{} holds no images", dir.display())));
    }
    load_ids(dir, &ids, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_n: usize,
    pub val_n: usize,
    pub test_n: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// `train_n` for training; the rest halved between validation and test
    /// (the odd one out goes to test).
    pub fn with_remainder_halved(total: usize, train_n: usize, seed: u64) -> Result<Self> {
        if train_n > total {
            return Err(contract_err!("train_n {train_n} exceeds dataset size {total}"));
        }
        let rest = total - train_n;
        Ok(Self {
            train_n,
            val_n: rest / 2,
            test_n: rest - rest / 2,
            seed,
        })
    }

    pub fn total(&self) -> usize {
        self.train_n + self.val_n + self.test_n
    }
}

/// Shuffles with the spec's seed and partitions in order into
/// `(train, val, test)`.
pub fn split_dataset<T>(items: Vec<T>, spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if spec.total() != items.len() {
        return Err(contract_err!(
            "split {}+{}+{} does not sum to {}",
            spec.train_n,
            spec.val_n,
            spec.test_n,
            items.len()
        ));
    }
    let mut items = items;
    items.shuffle(&mut rng::seeded(spec.seed));
    let test = items.split_off(spec.train_n + spec.val_n);
    let val = items.split_off(spec.train_n);
    Ok((items, val, test))
}

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

/// Writes `train.txt`, `val.txt` and `test.txt`, one id per line.
pub fn write_split_manifest(dir: &Path, parts: [&[String]; 3]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, ids) in SPLIT_FILES.iter().zip(parts) {
        let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
        fs::write(dir.join(name), text)?;
    }
    Ok(())
}

/// Reads one split file (`train.txt` etc.) if present.
pub fn read_split(dir: &Path, name: &str) -> Result<Option<Vec<String>>> {
    let p = dir.join(name);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(p)?;
    Ok(Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pnm::Image8;

    #[test]
    fn mask_boundary_and_gray_image() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("a.ppm");
        let mp = dir.path().join("a.pgm");
        write_pnm(&ip, &Image8 { width: 2, height: 1, channels: 3, data: vec![51; 6] }).unwrap();
        write_pnm(&mp, &Image8 { width: 2, height: 1, channels: 1, data: vec![128, 127] }).unwrap();
        let s = load_sample(&ip, &mp, (1, 2)).unwrap();
        assert_eq!(s.mask.data(), &[1.0, 0.0]);
        assert!(s.image.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        assert_eq!(s.id, "a");
        write_pnm(&mp, &Image8 { width: 1, height: 1, channels: 1, data: vec![0] }).unwrap();
        assert!(matches!(load_sample(&ip, &mp, (1, 2)), Err(Error::Data(_))));
    }

    #[test]
    fn resize_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("b.ppm");
        let mp = dir.path().join("b.pgm");
        write_pnm(&ip, &Image8 { width: 4, height: 4, channels: 3, data: (0..48).map(|i| i as u8 * 5).collect() }).unwrap();
        let bits: Vec<u8> = (0..16).map(|i| if i % 4 < 2 { 255 } else { 0 }).collect();
        write_pnm(&mp, &Image8 { width: 4, height: 4, channels: 1, data: bits }).unwrap();
        let s = load_sample(&ip, &mp, (8, 8)).unwrap();
        assert_eq!(s.size(), (8, 8));
        for y in 0..8 {
            assert_eq!(&s.mask.data()[y * 8..y * 8 + 8], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn directory_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(3, 16, 2).unwrap();
        for s in &samples {
            save_sample(dir.path(), s).unwrap();
        }
        assert_eq!(load_dir(dir.path(), (16, 16)).unwrap(), samples);
    }

    #[test]
    fn split_partitions_deterministically() {
        let items: Vec<usize> = (0..1000).collect();
        let spec = SplitSpec::with_remainder_halved(1000, 880, 3).unwrap();
        assert_eq!((spec.val_n, spec.test_n), (60, 60));
        let (a, b, c) = split_dataset(items.clone(), &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (880, 60, 60));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_dataset(items.clone(), &spec).unwrap().0, a);
        let bad = SplitSpec { train_n: 1, val_n: 1, test_n: 1, seed: 0 };
        assert!(matches!(split_dataset(items, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn nearest_resize_keeps_binarity() {
        let d = [0.0, 1.0, 1.0, 0.0];
        let out = resize_nearest(&d, 2, 2, 3, 5);
        assert_eq!(out.len(), 15);
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(resize_nearest(&d, 2, 2, 2, 2), d);
    }
}
