//! IDX-format image data: parsing, writing, splitting, and a
//! deterministic synthetic digit fixture for machines without the real
//! dataset.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::EvalError;
use crate::util::derive_seed;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// One split: `n` images of 784 pixels in `[0,1]`, with a label each.
#[derive(Debug, Clone, Default)]
pub struct DataSplit {
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    fn take(&self, indices: &[usize]) -> DataSplit {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        DataSplit { images, labels }
    }
}

/// Disjoint train/validation/test splits of 28x28 greyscale digits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DataSplit,
    pub validation: DataSplit,
    pub test: DataSplit,
}

impl Dataset {
    /// Loads IDX files from `dir` and carves the training file into
    /// disjoint train/validation splits of the requested sizes using a
    /// seeded shuffle.
    pub fn load(
        dir: &Path,
        train_size: usize,
        val_size: usize,
        shuffle_seed: u64,
    ) -> Result<Dataset, EvalError> {
        let images = load_idx_images(&find_file(dir, "train-images")?)?;
        let labels = load_idx_labels(&find_file(dir, "train-labels")?)?;
        if images.len() / IMAGE_PIXELS != labels.len() {
            return Err(EvalError::CountMismatch {
                images: images.len() / IMAGE_PIXELS,
                labels: labels.len(),
            });
        }
        let pool = DataSplit { images, labels };
        if pool.len() < train_size + val_size {
            return Err(EvalError::InsufficientSamples {
                need: train_size + val_size,
                have: pool.len(),
            });
        }
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        shuffle(&mut indices, derive_seed(shuffle_seed, &["dataset-split"]));
        let train = pool.take(&indices[..train_size]);
        let validation = pool.take(&indices[train_size..train_size + val_size]);

        let test = match (find_file(dir, "t10k-images"), find_file(dir, "t10k-labels")) {
            (Ok(ip), Ok(lp)) => {
                let images = load_idx_images(&ip)?;
                let labels = load_idx_labels(&lp)?;
                if images.len() / IMAGE_PIXELS != labels.len() {
                    return Err(EvalError::CountMismatch {
                        images: images.len() / IMAGE_PIXELS,
                        labels: labels.len(),
                    });
                }
                DataSplit { images, labels }
            }
            _ => DataSplit::default(),
        };
        Ok(Dataset { train, validation, test })
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf, EvalError> {
    let kind = if stem.contains("images") { "idx3" } else { "idx1" };
    for name in [
        format!("{stem}-{kind}-ubyte"),
        format!("{stem}.{kind}-ubyte"),
    ] {
        let p = dir.join(&name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(EvalError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no {stem} IDX file under {}", dir.display()),
    )))
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, EvalError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| EvalError::Truncated { path: path.display().to_string() })
}

/// Parses a big-endian IDX image file (magic 2051) into row-major pixel
/// values scaled by 1/255.
pub fn load_idx_images(path: &Path) -> Result<Vec<f64>, EvalError> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(EvalError::WrongMagic {
            path: path.display().to_string(),
            want: IMAGE_MAGIC,
            got: magic,
        });
    }
    let count = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let want = 16 + count * rows * cols;
    if bytes.len() < want {
        return Err(EvalError::Truncated { path: path.display().to_string() });
    }
    Ok(bytes[16..want].iter().map(|&b| b as f64 / 255.0).collect())
}

/// Parses a big-endian IDX label file (magic 2049).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, EvalError> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(EvalError::WrongMagic {
            path: path.display().to_string(),
            want: LABEL_MAGIC,
            got: magic,
        });
    }
    let count = read_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + count {
        return Err(EvalError::Truncated { path: path.display().to_string() });
    }
    Ok(bytes[8..8 + count].to_vec())
}

fn write_idx_images(path: &Path, pixels: &[u8], count: usize) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    f.write_all(&(count as u32).to_be_bytes())?;
    f.write_all(&(IMAGE_SIDE as u32).to_be_bytes())?;
    f.write_all(&(IMAGE_SIDE as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    Ok(())
}

fn write_idx_labels(path: &Path, labels: &[u8]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&LABEL_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

fn shuffle(indices: &mut [usize], seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..indices.len()).rev() {
        indices.swap(i, rng.gen_range(0..=i));
    }
}

// 7x5 glyph bitmaps for the synthetic digits.
const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

fn render_digit(rng: &mut ChaCha12Rng, digit: usize, out: &mut [u8]) {
    debug_assert_eq!(out.len(), IMAGE_PIXELS);
    let scale = 3; // 7x5 glyph -> 21x15 strokes
    let dy = rng.gen_range(-2i32..=2);
    let dx = rng.gen_range(-2i32..=2);
    let base_y = 3 + dy;
    let base_x = 6 + dx;
    let intensity = 0.65 + 0.35 * rng.gen::<f64>();
    let mut img = [0.0f64; IMAGE_PIXELS];
    for (gy, row) in GLYPHS[digit].iter().enumerate() {
        for (gx, ch) in row.bytes().enumerate() {
            if ch != b'1' {
                continue;
            }
            // stroke-level dropout keeps templates from being exact
            let keep = rng.gen::<f64>() > 0.04;
            for sy in 0..scale {
                for sx in 0..scale {
                    let y = base_y + (gy * scale + sy) as i32;
                    let x = base_x + (gx * scale + sx) as i32;
                    if (0..IMAGE_SIDE as i32).contains(&y) && (0..IMAGE_SIDE as i32).contains(&x) {
                        img[y as usize * IMAGE_SIDE + x as usize] =
                            if keep { intensity } else { intensity * 0.3 };
                    }
                }
            }
        }
    }
    for (o, v) in out.iter_mut().zip(img) {
        let noisy = v + 0.10 * crate::util::gaussian(rng);
        *o = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
}


/// Writes a deterministic synthetic digit dataset in IDX format:
/// `train-images/labels` with `train_pool` samples and `t10k-images/labels`
/// with `test` samples. Meant for smoke testing on machines without the
/// real dataset; the files load through the normal IDX path.
pub fn generate_fixture(
    dir: &Path,
    train_pool: usize,
    test: usize,
    seed: u64,
) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &["fixture"]));
    for (stem_img, stem_lbl, count) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", train_pool),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test),
    ] {
        let mut pixels = vec![0u8; count * IMAGE_PIXELS];
        let mut labels = vec![0u8; count];
        for i in 0..count {
            let digit = rng.gen_range(0..10usize);
            labels[i] = digit as u8;
            render_digit(&mut rng, digit, &mut pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]);
        }
        write_idx_images(&dir.join(stem_img), &pixels, count)?;
        write_idx_labels(&dir.join(stem_lbl), &labels)?;
    }
    Ok(())
}
