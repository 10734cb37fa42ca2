//! Colored-digit dataset with controlled label-color correlation.
//!
//! Raw digits come from IDX files (big-endian magic + dims, then raw bytes).
//! Digits 0 and 1 form the in-distribution classes; each sample gets a
//! background color drawn from a table parameterized by the correlation
//! strength r ∈ [0, 0.5]: P(red|y=0) = P(purple|y=0) = P(green|y=1) =
//! P(pink|y=1) = r and 0.5−r for the cross pairs. r = 0.25 means color and
//! label are independent; r = 0.45 ties them tightly.
//!
//! OOD splits use digits 5-9: the spurious set keeps the training colors
//! (red, green), the non-spurious sets use held-out colors (blue, yellow)
//! or uniform noise.

use crate::numerics::Rng;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const IMAGE_SIDE: usize = 28;
pub const GRAY_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const RGB_PIXELS: usize = GRAY_PIXELS * 3;

/// Grayscale ≥ this value is digit foreground and keeps its intensity.
pub const FOREGROUND_THRESHOLD: u8 = 64;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CMN_MAGIC: &[u8; 4] = b"CMN1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("truncated file: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    DimMismatch { images: usize, labels: usize },
    #[error("no samples for the requested classes")]
    EmptyClass,
    #[error("correlation r must lie in [0, 0.5], got {0}")]
    BadCorrelation(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

// ---------------------------------------------------------------------------
// IDX parsing
// ---------------------------------------------------------------------------

/// Paired grayscale digit images and labels.
#[derive(Debug, Clone)]
pub struct IdxImages {
    images: Vec<u8>,
    labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated { expected: end, got: bytes.len() });
    }
    Ok(u32::from_be_bytes(bytes[off..end].try_into().unwrap()))
}

/// Parse an IDX image file (magic 0x803, dims n×28×28).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, got: bytes.len() });
    }
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DataError::Truncated { expected: IMAGE_SIDE, got: rows });
    }
    Ok((n, bytes[16..expected].to_vec()))
}

/// Parse an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<(usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, got: bytes.len() });
    }
    Ok((n, bytes[8..expected].to_vec()))
}

impl IdxImages {
    pub fn load(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let (ni, images) = parse_idx_images(&fs::read(images_path)?)?;
        let (nl, labels) = parse_idx_labels(&fs::read(labels_path)?)?;
        if ni != nl {
            return Err(DataError::DimMismatch { images: ni, labels: nl });
        }
        Ok(IdxImages { images, labels })
    }

    pub fn from_parts(images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * GRAY_PIXELS {
            return Err(DataError::DimMismatch {
                images: images.len() / GRAY_PIXELS,
                labels: labels.len(),
            });
        }
        Ok(IdxImages { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * GRAY_PIXELS..(i + 1) * GRAY_PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> IdxImages {
        let mut images = Vec::with_capacity(indices.len() * GRAY_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        IdxImages { images, labels }
    }

    /// Indices of samples whose digit is in `digits`.
    pub fn indices_of(&self, digits: &[u8]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| digits.contains(&self.labels[i]))
            .collect()
    }

    /// Serialize back to the IDX wire format (tests and fixtures).
    pub fn write_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        let n = self.len() as u32;
        let mut img = Vec::with_capacity(16 + self.images.len());
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
        img.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
        img.extend_from_slice(&self.images);
        fs::write(images_path, img)?;
        let mut lab = Vec::with_capacity(8 + self.labels.len());
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend_from_slice(&self.labels);
        fs::write(labels_path, lab)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct CorrelationSpec {
    r: f64,
}

impl CorrelationSpec {
    pub fn new(r: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&r) {
            return Err(DataError::BadCorrelation(r));
        }
        Ok(CorrelationSpec { r })
    }

    pub fn r(&self) -> f64 {
        self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rgb(pub u8, pub u8, pub u8);

/// Background colors. Indices 0-3 are the training environments, 4-5 are
/// held out for non-spurious OOD, 6 marks noise images.
#[derive(Debug, Clone)]
pub struct Palette {
    pub red: Rgb,
    pub green: Rgb,
    pub purple: Rgb,
    pub pink: Rgb,
    pub blue: Rgb,
    pub yellow: Rgb,
}

pub const ENV_RED: u8 = 0;
pub const ENV_GREEN: u8 = 1;
pub const ENV_PURPLE: u8 = 2;
pub const ENV_PINK: u8 = 3;
pub const ENV_BLUE: u8 = 4;
pub const ENV_YELLOW: u8 = 5;
pub const ENV_NOISE: u8 = 6;
/// Number of training environments.
pub const TRAIN_ENVS: usize = 4;

/// Label value for OOD samples with no in-distribution digit (noise).
pub const LABEL_NONE: u8 = 255;

impl Default for Palette {
    fn default() -> Self {
        Palette {
            red: Rgb(220, 60, 60),
            green: Rgb(60, 180, 60),
            purple: Rgb(150, 60, 200),
            pink: Rgb(240, 130, 180),
            blue: Rgb(60, 90, 220),
            yellow: Rgb(230, 210, 60),
        }
    }
}

impl Palette {
    pub fn color(&self, env: u8) -> Rgb {
        match env {
            ENV_RED => self.red,
            ENV_GREEN => self.green,
            ENV_PURPLE => self.purple,
            ENV_PINK => self.pink,
            ENV_BLUE => self.blue,
            ENV_YELLOW => self.yellow,
            _ => panic!("env {env} has no color"),
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "red={:?} green={:?} purple={:?} pink={:?} blue={:?} yellow={:?}",
            self.red, self.green, self.purple, self.pink, self.blue, self.yellow
        )
    }
}

/// Labeled, group-annotated RGB image batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredDataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub envs: Vec<u8>,
    pub split: String,
}

impl ColoredDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * RGB_PIXELS..(i + 1) * RGB_PIXELS]
    }

    /// Take the rows at `indices` into a new dataset with the given split tag.
    pub fn subset(&self, indices: &[usize], split: &str) -> ColoredDataset {
        let mut out = ColoredDataset {
            images: Vec::with_capacity(indices.len() * RGB_PIXELS),
            labels: Vec::with_capacity(indices.len()),
            envs: Vec::with_capacity(indices.len()),
            split: split.to_string(),
        };
        for &i in indices {
            out.images.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
            out.envs.push(self.envs[i]);
        }
        out
    }

    /// Flat binary persistence: `CMN1` magic, counts, dims, images, labels,
    /// env indices.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.images.len() + 2 * self.len());
        buf.extend_from_slice(CMN_MAGIC);
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(IMAGE_SIDE as u32).to_le_bytes());
        buf.extend_from_slice(&(IMAGE_SIDE as u32).to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        buf.extend_from_slice(&self.images);
        buf.extend_from_slice(&self.labels);
        buf.extend_from_slice(&self.envs);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ColoredDataset> {
        let bytes = fs::read(path)?;
        if bytes.len() < 20 || &bytes[0..4] != CMN_MAGIC {
            let got = be_u32(&bytes, 0).unwrap_or(0);
            return Err(DataError::BadMagic(got));
        }
        let le = |off: usize| {
            u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
        };
        let n = le(4);
        let expected = 20 + n * RGB_PIXELS + 2 * n;
        if bytes.len() < expected {
            return Err(DataError::Truncated { expected, got: bytes.len() });
        }
        let images = bytes[20..20 + n * RGB_PIXELS].to_vec();
        let labels = bytes[20 + n * RGB_PIXELS..20 + n * RGB_PIXELS + n].to_vec();
        let envs = bytes[20 + n * RGB_PIXELS + n..expected].to_vec();
        Ok(ColoredDataset { images, labels, envs, split: String::new() })
    }
}

/// Human-readable manifest alongside a persisted dataset.
pub fn write_manifest(
    path: &Path,
    r: f64,
    seed: u64,
    palette: &Palette,
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "r = {r}")?;
    writeln!(f, "seed = {seed}")?;
    writeln!(f, "palette = {}", palette.describe())?;
    Ok(())
}

fn colorize(gray: &[u8], color: Rgb, out: &mut Vec<u8>) {
    for &g in gray {
        if g >= FOREGROUND_THRESHOLD {
            out.extend_from_slice(&[g, g, g]);
        } else {
            out.extend_from_slice(&[color.0, color.1, color.2]);
        }
    }
}

/// Background color table for an ID label under correlation r:
/// cumulative probabilities over envs (red, green, purple, pink).
fn draw_env(y: u8, r: f64, rng: &mut Rng) -> u8 {
    let probs = if y == 0 {
        [r, 0.5 - r, r, 0.5 - r] // red, green, purple, pink
    } else {
        [0.5 - r, r, 0.5 - r, r]
    };
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (env, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return env as u8;
        }
    }
    (TRAIN_ENVS - 1) as u8
}

/// Compose the in-distribution pool: digits 0 and 1 with backgrounds drawn
/// from the r-table.
pub fn compose(
    idx: &IdxImages,
    spec: CorrelationSpec,
    palette: &Palette,
    rng: &mut Rng,
) -> Result<ColoredDataset> {
    let keep = idx.indices_of(&[0, 1]);
    if keep.is_empty() {
        return Err(DataError::EmptyClass);
    }
    let mut out = ColoredDataset {
        images: Vec::with_capacity(keep.len() * RGB_PIXELS),
        labels: Vec::with_capacity(keep.len()),
        envs: Vec::with_capacity(keep.len()),
        split: "id".to_string(),
    };
    for &i in &keep {
        let y = idx.label(i);
        let env = draw_env(y, spec.r(), rng);
        colorize(idx.image(i), palette.color(env), &mut out.images);
        out.labels.push(y);
        out.envs.push(env);
    }
    Ok(out)
}

/// The OOD test suite: one spurious set and the named non-spurious sets.
#[derive(Debug, Clone)]
pub struct OodSuite {
    pub spurious: ColoredDataset,
    /// (set name, dataset) pairs; currently `heldout_color` and `noise`.
    pub nonspurious: Vec<(String, ColoredDataset)>,
}

/// Build the OOD splits from digits 5-9: `n` spurious samples in training
/// colors (red/green, split evenly), `n` non-spurious samples in held-out
/// colors (blue/yellow) and `n` uniform-noise images.
pub fn ood_splits(
    idx: &IdxImages,
    n: usize,
    palette: &Palette,
    rng: &mut Rng,
) -> Result<OodSuite> {
    let pool = idx.indices_of(&[5, 6, 7, 8, 9]);
    if pool.is_empty() {
        return Err(DataError::EmptyClass);
    }
    let perm = rng.permutation(pool.len());

    let take = |count: usize, offset: usize| -> Vec<usize> {
        (0..count).map(|k| pool[perm[(offset + k) % pool.len()]]).collect()
    };
    let sp_idx = take(n, 0);
    let nsp_idx = take(n, n);

    let build = |indices: &[usize],
                 envs: [u8; 2],
                 split: &str,
                 rng: &mut Rng|
     -> ColoredDataset {
        let mut out = ColoredDataset {
            images: Vec::with_capacity(indices.len() * RGB_PIXELS),
            labels: Vec::with_capacity(indices.len()),
            envs: Vec::with_capacity(indices.len()),
            split: split.to_string(),
        };
        for (k, &i) in indices.iter().enumerate() {
            let env = envs[k % 2];
            colorize(idx.image(i), palette.color(env), &mut out.images);
            out.labels.push(idx.label(i));
            out.envs.push(env);
        }
        let _ = rng;
        out
    };

    let spurious = build(&sp_idx, [ENV_RED, ENV_GREEN], "ood_spurious", rng);
    let heldout =
        build(&nsp_idx, [ENV_BLUE, ENV_YELLOW], "ood_heldout_color", rng);

    let mut noise = ColoredDataset {
        images: Vec::with_capacity(n * RGB_PIXELS),
        labels: vec![LABEL_NONE; n],
        envs: vec![ENV_NOISE; n],
        split: "ood_noise".to_string(),
    };
    for _ in 0..n * RGB_PIXELS {
        noise.images.push((rng.next_f64() * 256.0) as u8);
    }

    Ok(OodSuite {
        spurious,
        nonspurious: vec![
            ("heldout_color".to_string(), heldout),
            ("noise".to_string(), noise),
        ],
    })
}
