//! Datasets: synthetic class prototypes, CIFAR-10 binary batches and
//! class-folder image trees, plus batching with crop/flip augmentation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-memory labeled image set, `f32` NCHW, already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let il = self.image_len();
        let mut images = Vec::with_capacity(idx.len() * il);
        for &i in idx {
            images.extend_from_slice(&self.images[i * il..(i + 1) * il]);
        }
        Dataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
        }
    }

    /// Stacks the images at `idx`. With `augment`, applies a random crop from
    /// the zero-padded (4 px) image and a random horizontal flip.
    pub fn batch(&self, idx: &[usize], augment: Option<&mut ChaCha8Rng>) -> (Tensor, Vec<usize>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let il = self.image_len();
        let mut out = vec![0.0f32; idx.len() * il];
        match augment {
            None => {
                for (b, &i) in idx.iter().enumerate() {
                    out[b * il..(b + 1) * il].copy_from_slice(&self.images[i * il..(i + 1) * il]);
                }
            }
            Some(rng) => {
                const PAD: i64 = 4;
                for (b, &i) in idx.iter().enumerate() {
                    let dy = rng.random_range(-PAD..=PAD);
                    let dx = rng.random_range(-PAD..=PAD);
                    let flip = rng.random_bool(0.5);
                    let src = &self.images[i * il..(i + 1) * il];
                    let dst = &mut out[b * il..(b + 1) * il];
                    for ch in 0..c {
                        for y in 0..h {
                            let sy = y as i64 + dy;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            for x in 0..w {
                                let xx = if flip { w - 1 - x } else { x };
                                let sx = xx as i64 + dx;
                                if sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&[idx.len(), c, h, w], out).unwrap(), labels)
    }

    /// Index lists of consecutive batches over `order`; the last partial
    /// batch is kept only if `keep_last`.
    pub fn batches(order: &[usize], batch_size: usize, keep_last: bool) -> Vec<Vec<usize>> {
        order
            .chunks(batch_size.max(1))
            .filter(|b| keep_last || b.len() == batch_size)
            .map(|b| b.to_vec())
            .collect()
    }
}

/// Deterministic permutation of `0..n` for an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Learnable synthetic images: each class has a smooth random prototype
/// (a 4x4 grid upsampled to the resolution), each image adds Gaussian-like
/// noise. Label of image `i` is `i % classes`.
pub fn synthetic(n: usize, classes: usize, resolution: usize, noise: f32, seed: u64) -> Dataset {
    let channels = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = 4;
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let cells: Vec<f32> = (0..channels * grid * grid)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mut img = vec![0.0; channels * resolution * resolution];
            for ch in 0..channels {
                for y in 0..resolution {
                    for x in 0..resolution {
                        let gy = y * grid / resolution;
                        let gx = x * grid / resolution;
                        img[(ch * resolution + y) * resolution + x] = cells[(ch * grid + gy) * grid + gx];
                    }
                }
            }
            img
        })
        .collect();
    let il = channels * resolution * resolution;
    let mut images = Vec::with_capacity(n * il);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for v in &protos[c] {
            // Sum of three uniforms: cheap bell-shaped noise with unit variance.
            let z: f32 = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).sum();
            images.push(v + noise * z);
        }
        labels.push(c);
    }
    Dataset {
        images,
        labels,
        channels,
        height: resolution,
        width: resolution,
        classes,
    }
}

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
pub const CIFAR_MD5: &str = "c32a1d4ab5d03f1284b67883e8d87530";
const CIFAR_DIR: &str = "cifar-10-batches-bin";

fn normalize_u8(bytes: &[u8], channels: usize, mean: &[f32], std: &[f32]) -> Vec<f32> {
    let plane = bytes.len() / channels;
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let ch = i / plane;
            (b as f32 / 255.0 - mean[ch]) / std[ch]
        })
        .collect()
}

/// Parses CIFAR-10 binary records (`label byte + 3072 pixel bytes`).
pub fn parse_cifar_records(bytes: &[u8]) -> Result<Dataset> {
    const REC: usize = 1 + 3 * 32 * 32;
    if !bytes.len().is_multiple_of(REC) {
        return Err(Error::Data(format!(
            "CIFAR batch length {} is not a multiple of {REC}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / REC * (REC - 1));
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(REC) {
        if rec[0] >= 10 {
            return Err(Error::Data(format!("CIFAR label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(normalize_u8(&rec[1..], 3, &CIFAR_MEAN, &CIFAR_STD));
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: 32,
        width: 32,
        classes: 10,
    })
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut it = parts.into_iter();
    let mut first = it.next().expect("at least one part");
    for p in it {
        first.images.extend(p.images);
        first.labels.extend(p.labels);
    }
    first
}

/// Loads `(train, test)` from `root/cifar-10-batches-bin`, downloading and
/// verifying the archive first when it is missing and `download` is set.
pub fn load_cifar10(root: &Path, download: bool) -> Result<(Dataset, Dataset)> {
    let dir = root.join(CIFAR_DIR);
    if !dir.join("test_batch.bin").exists() {
        if !download {
            return Err(Error::Data(format!("CIFAR-10 not found under {}", dir.display())));
        }
        fetch_cifar10(root)?;
    }
    let read = |name: &str| -> Result<Dataset> {
        let p = dir.join(name);
        parse_cifar_records(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)
    };
    let train = concat(
        (1..=5)
            .map(|i| read(&format!("data_batch_{i}.bin")))
            .collect::<Result<_>>()?,
    );
    let test = read("test_batch.bin")?;
    Ok((train, test))
}

/// Hex MD5 of a file.
#[cfg(feature = "download")]
pub fn md5_file(path: &Path) -> Result<String> {
    use md5::{Digest, Md5};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Md5::digest(&bytes)))
}

#[cfg(feature = "download")]
pub fn verify_checksum(path: &Path, expected: &str) -> Result<()> {
    let got = md5_file(path)?;
    if got != expected {
        return Err(Error::Data(format!(
            "checksum mismatch for {}: expected {expected}, got {got}",
            path.display()
        )));
    }
    Ok(())
}

#[cfg(feature = "download")]
fn fetch_cifar10(root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let archive = root.join("cifar-10-binary.tar.gz");
    if !archive.exists() {
        log::info!("downloading {CIFAR_URL}");
        let resp = ureq::get(CIFAR_URL)
            .call()
            .map_err(|e| Error::Data(format!("download of {CIFAR_URL} failed: {e}")))?;
        let mut reader = resp.into_body().into_reader();
        let mut f = std::fs::File::create(&archive).map_err(|e| Error::io(&archive, e))?;
        std::io::copy(&mut reader, &mut f).map_err(|e| Error::io(&archive, e))?;
    }
    verify_checksum(&archive, CIFAR_MD5)?;
    let f = std::fs::File::open(&archive).map_err(|e| Error::io(&archive, e))?;
    tar::Archive::new(flate2::read::GzDecoder::new(f))
        .unpack(root)
        .map_err(|e| Error::io(root, e))
}

#[cfg(not(feature = "download"))]
fn fetch_cifar10(root: &Path) -> Result<()> {
    Err(Error::Data(format!(
        "CIFAR-10 missing under {} and the download feature is disabled",
        root.display()
    )))
}

/// Class-folder layout: `root/<class>/<image>`; classes sorted by name,
/// images resized to `resolution` and normalized to zero mean, unit range.
pub fn load_folder(root: &Path, resolution: usize) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read dataset directory {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let half = [0.5f32; 3];
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class `{}` has no images",
                dir.file_name().unwrap_or_default().to_string_lossy()
            )));
        }
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Data(format!("cannot decode {}: {e}", f.display())))?
                .resize_exact(
                    resolution as u32,
                    resolution as u32,
                    image::imageops::FilterType::Triangle,
                )
                .to_rgb8();
            // HWC -> CHW
            let raw = img.into_raw();
            let mut chw = vec![0u8; raw.len()];
            let plane = resolution * resolution;
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    chw[ch * plane + i] = px[ch];
                }
            }
            images.extend(normalize_u8(&chw, 3, &half, &half));
            labels.push(label);
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: resolution,
        width: resolution,
        classes: classes.len(),
    })
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        train: usize,
        test: usize,
        classes: usize,
        resolution: usize,
        noise: f32,
        seed: u64,
    },
    /// `root` defaults to `$NASBNN_DATA_DIR` (or `./data`).
    Cifar10 {
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default = "yes")]
        download: bool,
    },
    Folder {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        resolution: usize,
    },
}

fn yes() -> bool {
    true
}

pub fn data_root() -> PathBuf {
    std::env::var_os("NASBNN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

impl DatasetSpec {
    /// `(train, test)`; `test` may be empty for folder layouts without one.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Synthetic {
                train,
                test,
                classes,
                resolution,
                noise,
                seed,
            } => {
                let all = synthetic(train + test, *classes, *resolution, *noise, *seed);
                let tr: Vec<usize> = (0..*train).collect();
                let te: Vec<usize> = (*train..train + test).collect();
                Ok((all.subset(&tr), all.subset(&te)))
            }
            DatasetSpec::Cifar10 { root, download } => load_cifar10(&root.clone().unwrap_or_else(data_root), *download),
            DatasetSpec::Folder {
                train,
                test,
                resolution,
            } => {
                let tr = load_folder(train, *resolution)?;
                let te = match test {
                    Some(p) => load_folder(p, *resolution)?,
                    None => tr.subset(&[]),
                };
                Ok((tr, te))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(64, 4, 8, 0.5, 1);
        let b = synthetic(64, 4, 8, 0.5, 1);
        assert_eq!(a, b);
        assert_eq!(a.labels[5], 1);
        assert_ne!(a, synthetic(64, 4, 8, 0.5, 2));
    }

    #[test]
    fn cifar_record_parsing() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        bytes.push(7);
        bytes.extend(std::iter::repeat_n(0u8, 3072));
        let d = parse_cifar_records(&bytes).unwrap();
        assert_eq!(d.labels, vec![3, 7]);
        assert!((d.images[0] - (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-6);
        assert!(parse_cifar_records(&bytes[..100]).is_err());
    }

    #[test]
    fn cifar_missing_without_download_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_cifar10(dir.path(), false).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[cfg(feature = "download")]
    #[test]
    fn checksum_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(md5_file(&p).unwrap(), "900150983cd24fb0d6963f7d28e17f72");
        assert!(matches!(verify_checksum(&p, CIFAR_MD5), Err(Error::Data(_))));
    }

    #[test]
    fn folder_layout_and_empty_class() {
        let dir = tempfile::tempdir().unwrap();
        for (cls, n) in [("cat", 2), ("dog", 1)] {
            let d = dir.path().join(cls);
            std::fs::create_dir(&d).unwrap();
            for i in 0..n {
                image::RgbImage::from_pixel(5, 7, image::Rgb([255, 0, 128]))
                    .save(d.join(format!("{i}.png")))
                    .unwrap();
            }
        }
        let ds = load_folder(dir.path(), 4).unwrap();
        assert_eq!(ds.labels, vec![0, 0, 1]);
        assert_eq!(ds.classes, 2);
        assert!((ds.images[0] - 1.0).abs() < 1e-6);
        std::fs::create_dir(dir.path().join("emu")).unwrap();
        let e = load_folder(dir.path(), 4).unwrap_err().to_string();
        assert!(e.contains("emu"), "{e}");
    }

    #[test]
    fn augmentation_keeps_shape_and_is_seeded() {
        let d = synthetic(8, 2, 8, 0.1, 3);
        let idx: Vec<usize> = (0..8).collect();
        let (a, _) = d.batch(&idx, Some(&mut ChaCha8Rng::seed_from_u64(1)));
        let (b, _) = d.batch(&idx, Some(&mut ChaCha8Rng::seed_from_u64(1)));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[8, 3, 8, 8]);
        let (plain, labels) = d.batch(&idx, None);
        assert_eq!(plain.data(), &d.images[..]);
        assert_eq!(labels, d.labels);
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let mut o = epoch_order(100, 5, 2);
        assert_eq!(o, epoch_order(100, 5, 2));
        assert_ne!(o, epoch_order(100, 5, 3));
        o.sort();
        assert_eq!(o, (0..100).collect::<Vec<_>>());
    }
}
