use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Real, Tensor};

/// One label byte followed by 32·32·3 channel-major pixels.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn pixel<T: Real>(byte: u8, max: f64) -> T {
    T::c(f64::from(byte) / max)
}

/// CIFAR-10 binary batches; `limit` keeps the first records only.
pub fn load_cifar10<T: Real>(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset<T>> {
    for f in CIFAR_TRAIN_FILES.iter().chain(std::iter::once(&CIFAR_TEST_FILE)) {
        let p = dir.join(f);
        if !p.exists() {
            return Err(Error::FileMissing(p));
        }
    }
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR_TEST_FILE],
    };
    let cap = limit.unwrap_or(usize::MAX);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        if labels.len() >= cap {
            break;
        }
        let path = dir.join(f);
        let bytes = read(&path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::CorruptRecord {
                path,
                detail: format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if labels.len() >= cap {
                break;
            }
            let label = usize::from(rec[0]);
            if label >= 10 {
                return Err(Error::CorruptRecord {
                    path: path.clone(),
                    detail: format!("label byte {label}"),
                });
            }
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| pixel::<T>(b, 255.0)));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new([n, 3, 32, 32], pixels)?, labels, 10, split)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::CorruptRecord {
            path: path.to_path_buf(),
            detail: "truncated header".into(),
        })
}

/// MNIST-style IDX pair (`train-*` or `t10k-*`) as `1×28×28` images.
pub fn load_mnist_idx<T: Real>(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset<T>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let img = read(&img_path)?;
    let lbl = read(&lbl_path)?;
    let magic = be_u32(&img, 0, &img_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: img_path,
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = be_u32(&lbl, 0, &lbl_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: lbl_path,
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(&img, 4, &img_path)? as usize;
    let rows = be_u32(&img, 8, &img_path)? as usize;
    let cols = be_u32(&img, 12, &img_path)? as usize;
    let n_labels = be_u32(&lbl, 4, &lbl_path)? as usize;
    if n != n_labels {
        return Err(Error::DimensionMismatch(format!("{n} images but {n_labels} labels")));
    }
    let plane = rows * cols;
    if img.len() != 16 + n * plane {
        return Err(Error::DimensionMismatch(format!(
            "{} image bytes for {n} images of {rows}x{cols}",
            img.len() - 16
        )));
    }
    if lbl.len() != 8 + n {
        return Err(Error::DimensionMismatch(format!(
            "{} label bytes for {n} labels",
            lbl.len() - 8
        )));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    let labels: Vec<usize> = lbl[8..8 + keep].iter().map(|&b| usize::from(b)).collect();
    if let Some(&label) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::CorruptRecord {
            path: lbl_path,
            detail: format!("label {label}"),
        });
    }
    let pixels = img[16..16 + keep * plane]
        .iter()
        .map(|&b| pixel::<T>(b, 255.0))
        .collect();
    Dataset::new(Tensor::new([keep, 1, rows, cols], pixels)?, labels, 10, split)
}

struct Netpbm {
    channels: usize,
    width: usize,
    height: usize,
    values: Vec<f64>,
}

fn parse_netpbm(bytes: &[u8], path: &Path) -> Result<Netpbm> {
    let corrupt = |detail: &str| Error::CorruptRecord {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token().ok_or_else(|| corrupt("empty file"))?;
    let (channels, ascii) = match magic.as_str() {
        "P2" => (1, true),
        "P3" => (3, true),
        "P5" => (1, false),
        "P6" => (3, false),
        _ => return Err(corrupt(&format!("unsupported netpbm magic {magic:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| corrupt(&format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(corrupt("bad header values"));
    }
    let count = width * height * channels;
    let max = maxval as f64;
    let mut interleaved = Vec::with_capacity(count);
    if ascii {
        for _ in 0..count {
            let v = num("sample")?;
            if v > maxval {
                return Err(corrupt("sample above maxval"));
            }
            interleaved.push(v as f64 / max);
        }
    } else {
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| corrupt("truncated raster"))?;
        if wide {
            interleaved.extend(
                raster
                    .chunks_exact(2)
                    .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / max),
            );
        } else {
            interleaved.extend(raster.iter().map(|&b| f64::from(b) / max));
        }
    }
    let plane = width * height;
    let mut values = vec![0.0; count];
    for (i, v) in interleaved.into_iter().enumerate() {
        let (p, ch) = (i / channels, i % channels);
        values[ch * plane + p] = v;
    }
    Ok(Netpbm {
        channels,
        width,
        height,
        values,
    })
}

/// Class-per-directory image folder of PGM/PPM files. Classes are the
/// sub-directory names in sorted order; every image must share extents.
pub fn load_image_folder<T: Real>(dir: &Path, split: Split) -> Result<(Dataset<T>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(Error::FileMissing(dir.to_path_buf()));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let names: Vec<String> = class_dirs
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let mut shape: Option<[usize; 3]> = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, cdir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(cdir)
            .map_err(|e| Error::io(cdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm"))
            })
            .collect();
        files.sort();
        for f in files {
            let img = parse_netpbm(&read(&f)?, &f)?;
            let s = [img.channels, img.height, img.width];
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::DimensionMismatch(format!(
                        "{} is {s:?}, earlier images are {prev:?}",
                        f.display()
                    )))
                }
                Some(_) => {}
            }
            pixels.extend(img.values.into_iter().map(T::c));
            labels.push(label);
        }
    }
    let [c, h, w] = shape.ok_or(Error::EmptyDataset)?;
    let n = labels.len();
    let ds = Dataset::new(Tensor::new([n, c, h, w], pixels)?, labels, names.len(), split)?;
    Ok((ds, names))
}

/// Class templates drawn once from `seed` plus per-sample Gaussian noise of
/// standard deviation `noise`, clamped to `[0, 1]`. Templates depend on the
/// seed only; the noise also depends on the split. Samples cycle through
/// the classes.
pub fn synthetic_blobs<T: Real>(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset<T>> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "synthetic data needs at least 2 classes, got {classes}"
        )));
    }
    if shape.contains(&0) || noise < 0.0 || !noise.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "synthetic shape {shape:?}, noise {noise}"
        )));
    }
    let numel: usize = shape.iter().product();
    let mut trng = rng::stream(seed, Stream::Data);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..numel)
                .map(|_| (0.5 + 0.25 * trng.sample::<f64, _>(rand_distr::StandardNormal)).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    let split_index = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut nrng = rng::indexed(seed, ((Stream::Data as u64) << 32) | (split_index + 1));
    let n = classes * per_class;
    let mut pixels = Vec::with_capacity(n * numel);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for &t in &templates[k] {
            let v = if noise > 0.0 {
                t + noise * nrng.sample::<f64, _>(rand_distr::StandardNormal)
            } else {
                t
            };
            pixels.push(T::c(v.clamp(0.0, 1.0)));
        }
    }
    Dataset::new(
        Tensor::new([n, shape[0], shape[1], shape[2]], pixels)?,
        labels,
        classes,
        split,
    )
}
