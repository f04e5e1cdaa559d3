//! Image datasets: seeded synthetic generation and a raw binary directory
//! format (`labels.csv` plus one little-endian f32 file per sample).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LABELS_FILE: &str = "labels.csv";

/// Labelled `[channels, size, size]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub channels: usize,
    pub size: usize,
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(channels: usize, size: usize) -> Self {
        Dataset {
            channels,
            size,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, image: Tensor<T>, label: usize) -> Result<()> {
        let want = [self.channels, self.size, self.size];
        if image.shape() != want {
            return Err(Error::dim("dataset", &want, image.shape()));
        }
        self.images.push(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            channels: self.channels,
            size: self.size,
            images: self.images.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
        }
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset<T>, Dataset<T>) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            channels: self.channels,
            size: self.size,
            images: self.images[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
        };
        (part(0..n), part(n..self.len()))
    }
}

/// Pixel rectangle `(y0, x0, h, w)` of the class pattern.
pub fn class_rect(class: usize, classes: usize, size: usize) -> (usize, usize, usize, usize) {
    let grid = (classes as f64).sqrt().ceil() as usize;
    let cell = (size / grid).max(1);
    let (gy, gx) = (class / grid, class % grid);
    let h = (cell / 2).max(1);
    let y0 = (gy * cell + (cell - h) / 2).min(size - h);
    let x0 = (gx * cell + (cell - h) / 2).min(size - h);
    (y0, x0, h, h)
}

/// Balanced synthetic set: sample `i` has label `i mod classes`; each
/// image is uniform noise in [0, 0.5) with the class rectangle raised by
/// 1.0 on every channel.
pub fn synth_dataset(
    classes: usize,
    samples: usize,
    seed: u64,
    channels: usize,
    size: usize,
) -> Result<Dataset<f32>> {
    if classes < 2 {
        return Err(Error::config(format!(
            "classes must be at least 2, got {classes}"
        )));
    }
    if samples == 0 {
        return Err(Error::config("samples must be positive"));
    }
    if channels == 0 || size == 0 {
        return Err(Error::config("image channels and size must be positive"));
    }
    if (classes as f64).sqrt().ceil() as usize > size {
        return Err(Error::config(format!(
            "{classes} classes do not fit a {size}x{size} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(channels, size);
    for i in 0..samples {
        let label = i % classes;
        let (y0, x0, h, w) = class_rect(label, classes, size);
        let mut px: Vec<f32> = (0..channels * size * size)
            .map(|_| rng.gen_range(0.0..0.5))
            .collect();
        for ch in 0..channels {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    px[(ch * size + y) * size + x] += 1.0;
                }
            }
        }
        ds.push(Tensor::new(vec![channels, size, size], px)?, label)?;
    }
    Ok(ds)
}

/// Uniform noise in [-1, 1), for tests and benchmarks.
pub fn noise_image<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:06}.bin")
}

/// Writes `labels.csv` and one `.bin` file per sample.
pub fn save_raw_dir<T: Scalar>(ds: &Dataset<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(dir.join(LABELS_FILE))
        .map_err(|e| Error::Load {
            path: dir.join(LABELS_FILE),
            msg: e.to_string(),
        })?;
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = sample_name(i);
        let bytes: Vec<u8> = img
            .data()
            .iter()
            .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
            .collect();
        fs::write(dir.join(&name), bytes)?;
        labels
            .write_record([name, label.to_string()])
            .map_err(|e| Error::Load {
                path: dir.join(LABELS_FILE),
                msg: e.to_string(),
            })?;
    }
    labels.flush()?;
    Ok(())
}

/// Reads a directory written by [`save_raw_dir`] (or by hand), in the
/// order listed in `labels.csv`.
pub fn load_raw_dir(dir: &Path, channels: usize, size: usize) -> Result<Dataset<f32>> {
    let labels_path = dir.join(LABELS_FILE);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&labels_path)
        .map_err(|e| Error::Load {
            path: labels_path.clone(),
            msg: e.to_string(),
        })?;
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: labels_path.clone(),
        line,
        msg,
    };
    let expected = channels * size * size * 4;
    let mut ds = Dataset::new(channels, size);
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != 2 {
            return Err(parse_err(
                line,
                format!("expected 2 fields (filename,label), got {}", rec.len()),
            ));
        }
        let (file, label) = (rec[0].trim(), rec[1].trim());
        let label: usize = label.parse().map_err(|_| {
            parse_err(
                line,
                format!("label {label:?} is not a non-negative integer"),
            )
        })?;
        let path: PathBuf = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::Load {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if bytes.len() != expected {
            return Err(Error::Load {
                path,
                msg: format!(
                    "expected {expected} bytes ({channels}x{size}x{size} f32), found {}",
                    bytes.len()
                ),
            });
        }
        let px = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        ds.push(Tensor::new(vec![channels, size, size], px)?, label)?;
    }
    Ok(ds)
}
