//! Dataset representation, directory layout and train/test splitting.
//!
//! On disk a dataset is one directory per class, each holding numbered
//! netpbm files:
//!
//! ```text
//! root/
//!   class_000/
//!     sample_000.ppm        color image
//!     sample_000.mask.pgm   binary mask, optional per sample
//!     sample_001.ppm
//!     ...
//!   class_001/
//!     ...
//! ```
//!
//! Class labels come from the sorted order of the class directories, so a
//! reloaded dataset keeps stable labels no matter how the filesystem
//! enumerates entries. Masks are optional: a sample without a sibling
//! `.mask.pgm` simply loads with `mask: None`, and whether that is
//! acceptable is decided by the consumer (mask-supervised training rejects
//! it, plain training and evaluation do not care).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netpbm::{self, PnmImage};
use crate::tensor::Tensor;

const SPLIT_STREAM: u64 = 0x7370_6c69;

/// One labeled image with an optional aligned binary mask.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Channels x height x width, values in [0, 1].
    pub image: Tensor,
    /// Height x width, values exactly 0 or 1; aligned with the image.
    pub mask: Option<Tensor>,
    pub label: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Writes samples to `root` in the directory layout above. Samples are
/// grouped by label; label k becomes directory `class_k` zero-padded to
/// three digits.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut per_class_counter: BTreeMap<usize, usize> = BTreeMap::new();
    for sample in samples {
        let class_dir = root.join(format!("class_{:03}", sample.label));
        fs::create_dir_all(&class_dir)?;
        let index = per_class_counter.entry(sample.label).or_insert(0);
        let stem = format!("sample_{:03}", index);
        *index += 1;

        let (h, w) = (sample.height(), sample.width());
        let pixels = image_to_bytes(&sample.image)?;
        netpbm::write_ppm(&class_dir.join(format!("{stem}.ppm")), w, h, &pixels)?;
        if let Some(mask) = &sample.mask {
            let bytes = mask_to_bytes(mask)?;
            netpbm::write_pgm(&class_dir.join(format!("{stem}.mask.pgm")), w, h, &bytes)?;
        }
    }
    Ok(())
}

/// Loads a dataset directory back into memory. Labels are assigned from the
/// sorted class-directory names; within a class, samples follow sorted file
/// names. A `.ppm` that exists but cannot be parsed is an error naming the
/// offending file, as is a malformed sibling mask.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::data(format!(
            "dataset root {} contains no class directories",
            root.display()
        )));
    }

    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut image_paths: Vec<PathBuf> = fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |e| e == "ppm"))
            .collect();
        image_paths.sort();
        if image_paths.is_empty() {
            return Err(Error::data(format!(
                "class directory {} holds no .ppm images",
                dir.display()
            )));
        }
        for path in image_paths {
            let pnm = netpbm::read_pnm(&path)?;
            let image = image_from_pnm(&pnm, &path)?;
            let mask_path = mask_path_for(&path);
            let mask = if mask_path.exists() {
                let pnm = netpbm::read_pnm(&mask_path)?;
                Some(mask_from_pnm(&pnm, &mask_path, &image)?)
            } else {
                None
            };
            samples.push(Sample {
                image,
                mask,
                label,
            });
        }
    }
    Ok(samples)
}

/// `sample_007.ppm` pairs with `sample_007.mask.pgm` alongside it.
fn mask_path_for(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}.mask.pgm"))
}

fn image_from_pnm(pnm: &PnmImage, path: &Path) -> Result<Tensor> {
    if pnm.channels != 3 {
        return Err(Error::data(format!(
            "{}: expected a 3-channel color image, found {} channel(s)",
            path.display(),
            pnm.channels
        )));
    }
    let (h, w) = (pnm.height, pnm.width);
    // Interleaved RGB bytes to planar channels, scaled into [0, 1].
    let mut data = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = pnm.pixels[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn mask_from_pnm(pnm: &PnmImage, path: &Path, image: &Tensor) -> Result<Tensor> {
    if pnm.channels != 1 {
        return Err(Error::data(format!(
            "{}: masks must be grayscale, found {} channel(s)",
            path.display(),
            pnm.channels
        )));
    }
    if pnm.height != image.shape()[1] || pnm.width != image.shape()[2] {
        return Err(Error::data(format!(
            "{}: mask is {}x{} but its image is {}x{}",
            path.display(),
            pnm.height,
            pnm.width,
            image.shape()[1],
            image.shape()[2]
        )));
    }
    let data = pnm
        .pixels
        .iter()
        .map(|&b| if b >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[pnm.height, pnm.width], data)
}

fn image_to_bytes(image: &Tensor) -> Result<Vec<u8>> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "expected a 3xHxW image, got shape {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[(c * h + y) * w + x];
                bytes[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(bytes)
}

fn mask_to_bytes(mask: &Tensor) -> Result<Vec<u8>> {
    if mask.shape().len() != 2 {
        return Err(Error::shape(format!(
            "expected an HxW mask, got shape {:?}",
            mask.shape()
        )));
    }
    Ok(mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect())
}

/// Splits per class at the ratio `train:test`, shuffling each class with a
/// seeded permutation first. Every sample lands in exactly one side. The
/// train count per class is `round(n * train / (train + test))`.
pub fn split_dataset(
    samples: Vec<Sample>,
    train_ratio: u32,
    test_ratio: u32,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if train_ratio == 0 || test_ratio == 0 {
        return Err(Error::config(format!(
            "split ratio must have positive parts, got {train_ratio}:{test_ratio}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, sample) in samples.iter().enumerate() {
        by_class.entry(sample.label).or_default().push(i);
    }

    let mut is_train = vec![false; samples.len()];
    for (&class, indices) in &by_class {
        let mut shuffled = indices.clone();
        let class_seed = crate::mix_seed(crate::mix_seed(seed, SPLIT_STREAM), class as u64);
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed));
        let n = shuffled.len() as f64;
        let take = (n * train_ratio as f64 / (train_ratio + test_ratio) as f64).round() as usize;
        for &i in shuffled.iter().take(take.min(indices.len())) {
            is_train[i] = true;
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (sample, goes_to_train) in samples.into_iter().zip(is_train) {
        if goes_to_train {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthSpec;

    fn tiny_samples() -> Vec<Sample> {
        let spec = SynthSpec {
            classes: 2,
            samples_per_class: 3,
            image_size: 16,
            ..SynthSpec::default()
        };
        crate::synth::generate(&spec).unwrap()
    }

    #[test]
    fn save_load_roundtrip_preserves_content() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image.shape(), b.image.shape());
            // Bytes quantize to 1/255 steps, so compare within half a step.
            let max_err = a
                .image
                .data()
                .iter()
                .zip(b.image.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-12, "max_err {max_err}");
            // Masks are binary and must survive exactly.
            assert_eq!(
                a.mask.as_ref().unwrap().data(),
                b.mask.as_ref().unwrap().data()
            );
        }
    }

    #[test]
    fn missing_mask_loads_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples();
        save_dataset(dir.path(), &samples).unwrap();
        let victim = dir.path().join("class_000/sample_001.mask.pgm");
        fs::remove_file(&victim).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let missing: Vec<bool> = loaded.iter().map(|s| s.mask.is_none()).collect();
        assert_eq!(missing.iter().filter(|&&m| m).count(), 1);
        assert!(loaded[1].mask.is_none());
    }

    #[test]
    fn corrupt_image_is_reported_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &tiny_samples()).unwrap();
        let victim = dir.path().join("class_001/sample_002.ppm");
        fs::write(&victim, b"P6\n16 16\n255\nshort").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(
            err.to_string().contains("sample_002.ppm"),
            "error should name the file: {err}"
        );
    }

    #[test]
    fn empty_root_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        assert!(load_dataset(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn labels_come_from_sorted_directories() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples();
        save_dataset(dir.path(), &samples).unwrap();
        // Rename class_000 so it sorts last; its samples must get label 1.
        fs::rename(dir.path().join("class_000"), dir.path().join("zzz")).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded[0].label, 0); // former class_001
        assert_eq!(loaded.last().unwrap().label, 1); // former class_000
    }

    #[test]
    fn split_counts_follow_rounding() {
        // 6 samples at 2:1 -> 4 train, 5 at 3:2 -> 3 train, 20 at 2:1 -> 13.
        for (n, a, b, want_train) in [(6, 2, 1, 4), (5, 3, 2, 3), (20, 2, 1, 13)] {
            let spec = SynthSpec {
                classes: 1,
                samples_per_class: n,
                image_size: 16,
                ..SynthSpec::default()
            };
            let samples = crate::synth::generate(&spec).unwrap();
            let (train, test) = split_dataset(samples, a, b, 7).unwrap();
            assert_eq!(train.len(), want_train, "n={n} ratio {a}:{b}");
            assert_eq!(train.len() + test.len(), n);
        }
    }

    #[test]
    fn split_is_seeded_and_partitions_each_class() {
        let samples = tiny_samples();
        let (tr1, te1) = split_dataset(samples.clone(), 2, 1, 11).unwrap();
        let (tr2, te2) = split_dataset(samples.clone(), 2, 1, 11).unwrap();
        let key = |s: &Sample| (s.label, s.image.data().to_vec());
        assert_eq!(
            tr1.iter().map(key).collect::<Vec<_>>(),
            tr2.iter().map(key).collect::<Vec<_>>()
        );
        assert_eq!(te1.len(), te2.len());
        // Per class: 3 samples at 2:1 -> 2 train, 1 test.
        for class in 0..2 {
            assert_eq!(tr1.iter().filter(|s| s.label == class).count(), 2);
            assert_eq!(te1.iter().filter(|s| s.label == class).count(), 1);
        }
    }

    #[test]
    fn zero_ratio_rejected() {
        assert!(split_dataset(tiny_samples(), 0, 1, 0).is_err());
        assert!(split_dataset(tiny_samples(), 1, 0, 0).is_err());
    }
}
