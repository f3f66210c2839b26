//! Datasets: image-folder and raw-file loading, dihedral augmentation,
//! synthetic generation and shuffled minibatches.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{stack, Tensor};

pub const RAW_MAGIC: &[u8; 4] = b"ATND";
pub const RAW_VERSION: u32 = 1;
pub const MIN_SYNTHETIC_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(3, S, S)`, values in [0, 1].
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Spatial size of the first image.
    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[2])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    /// Every sample as one `(N, 3, S, S)` batch.
    pub fn stacked(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let imgs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((stack(&imgs)?, labels))
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Decode one image file into a `(3, size, size)` tensor in [0, 1], resizing
/// bilinearly when needed. Grayscale is replicated to three channels.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Format(format!("cannot decode {}: {e}", path.display())))?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, image::imageops::FilterType::Triangle);
    }
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + i] = f32::from(px.0[c]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, size, size], data)?)
}

/// Load `root/<class>/<file>.{png,jpg,jpeg}`. Classes are indexed by the
/// byte order of their directory names; files are read in name order.
pub fn load_image_dataset(root: &Path, size: usize, expected_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| io_at(root, e))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().into_string().map_err(|n| {
                Error::Format(format!("class directory name {n:?} is not UTF-8"))
            })?;
            dirs.push((name, entry.path()));
        }
    }
    dirs.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    if dirs.is_empty() {
        return Err(Error::Format(format!("{} has no class subdirectories", root.display())));
    }
    if let Some(k) = expected_classes {
        if k != dirs.len() {
            return Err(Error::Usage(format!(
                "expected {k} classes, {} has {} class directories",
                root.display(),
                dirs.len()
            )));
        }
    }
    let mut samples = Vec::new();
    for (label, (name, dir)) in dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_at(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Format(format!("class directory `{name}` ({}) contains no images", dir.display())));
        }
        for f in files {
            samples.push(Sample { image: load_image(&f, size)?, label });
        }
    }
    Ok(Dataset { samples, class_names: dirs.into_iter().map(|(n, _)| n).collect(), split })
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Encode in the raw `.atnd` format.
pub fn raw_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.class_names.len() as u32).to_le_bytes());
    for n in &ds.class_names {
        out.extend_from_slice(&(n.len() as u32).to_le_bytes());
        out.extend_from_slice(n.as_bytes());
    }
    out.extend_from_slice(&(ds.samples.len() as u64).to_le_bytes());
    for s in &ds.samples {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for &d in s.image.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("raw dataset truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn raw_from_bytes(bytes: &[u8], split: Split) -> Result<Dataset> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4).ok() != Some(RAW_MAGIC.as_slice()) {
        return Err(Error::Format("not a raw dataset (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != RAW_VERSION {
        return Err(Error::Format(format!("unsupported raw dataset version {version}")));
    }
    let k = c.u32()? as usize;
    let mut class_names = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| Error::Format("class name is not UTF-8".into()))?;
        class_names.push(name.to_string());
    }
    let count = c.u64()?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let label = c.u32()? as usize;
        if label >= k {
            return Err(Error::Format(format!("sample label {label} out of range for {k} classes")));
        }
        let dims = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let raw = c.take(len.and_then(|l| l.checked_mul(4)).ok_or_else(|| Error::Format("sample too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        samples.push(Sample { image: Tensor::new(dims.to_vec(), data)?, label });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "raw dataset declares {count} samples but has {} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(Dataset { samples, class_names, split })
}

pub fn save_raw_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_at(path, e))?;
    f.write_all(&raw_to_bytes(ds))?;
    Ok(())
}

pub fn load_raw_dataset(path: &Path, split: Split) -> Result<Dataset> {
    raw_from_bytes(&fs::read(path).map_err(|e| io_at(path, e))?, split)
}

fn check_square(img: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Usage(format!("rotation needs a square (C, S, S) image, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Counter-clockwise rotation by `90 * times` degrees of a `(C, S, S)` image.
pub fn rotate90(img: &Tensor<f32>, times: usize) -> Result<Tensor<f32>> {
    let (c, n) = check_square(img)?;
    let mut cur = img.clone();
    for _ in 0..times % 4 {
        let src = cur.data();
        let mut out = vec![0f32; src.len()];
        for ch in 0..c {
            let base = ch * n * n;
            for i in 0..n {
                for j in 0..n {
                    // out[i][j] = in[j][n-1-i]
                    out[base + i * n + j] = src[base + j * n + (n - 1 - i)];
                }
            }
        }
        cur = Tensor::new(img.shape().to_vec(), out)?;
    }
    Ok(cur)
}

/// Mirror across the vertical axis of a `(C, H, W)` image.
pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let w = s[s.len() - 1];
    let src = img.data();
    let mut out = vec![0f32; src.len()];
    for row in 0..src.len() / w {
        for j in 0..w {
            out[row * w + j] = src[row * w + (w - 1 - j)];
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    None,
    Dihedral8,
    RandomRotFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub mode: AugmentMode,
    /// Splits the policy applies to; others pass through unchanged.
    pub train_only: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { mode: AugmentMode::None, train_only: true }
    }
}

/// Apply an augmentation policy. Dihedral8 replaces each sample by its eight
/// rotations and flips; RandomRotFlip appends one rotated-then-flipped copy
/// per sample.
pub fn augment(ds: &Dataset, policy: AugmentPolicy, seed: u64) -> Result<Dataset> {
    if policy.mode == AugmentMode::None || (policy.train_only && ds.split != Split::Train) {
        return Ok(ds.clone());
    }
    let mut samples = Vec::new();
    match policy.mode {
        AugmentMode::None => unreachable!(),
        AugmentMode::Dihedral8 => {
            for s in &ds.samples {
                for r in 0..4 {
                    let rot = rotate90(&s.image, r)?;
                    samples.push(Sample { image: hflip(&rot), label: s.label });
                    samples.push(Sample { image: rot, label: s.label });
                }
            }
        }
        AugmentMode::RandomRotFlip => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            samples.extend(ds.samples.iter().cloned());
            for s in &ds.samples {
                let r = rng.gen_range(1..=3);
                samples.push(Sample { image: hflip(&rotate90(&s.image, r)?), label: s.label });
            }
        }
    }
    Ok(Dataset { samples, class_names: ds.class_names.clone(), split: ds.split })
}

/// Class names of the synthetic task: blob quadrant × dominant colour.
pub const SYNTHETIC_CLASSES: [&str; 4] = ["tl_red", "tl_green", "br_red", "br_green"];

fn smooth_field(rng: &mut ChaCha8Rng, s: usize) -> Vec<f32> {
    // a few random low-frequency cosines
    let mut f = vec![0f32; s * s];
    let two_pi = std::f32::consts::TAU;
    for _ in 0..4 {
        let fx: f32 = rng.gen_range(-3.0..3.0);
        let fy: f32 = rng.gen_range(-3.0..3.0);
        let phase: f32 = rng.gen_range(0.0..two_pi);
        let amp: f32 = rng.gen_range(0.08..0.2);
        for y in 0..s {
            for x in 0..s {
                let u = (fx * x as f32 + fy * y as f32) / s as f32;
                f[y * s + x] += amp * (two_pi * u + phase).cos();
            }
        }
    }
    f
}

fn synthetic_image(rng: &mut ChaCha8Rng, s: usize, label: usize) -> Tensor<f32> {
    let plane = s * s;
    let mut data = vec![0f32; 3 * plane];
    for c in 0..3 {
        let base: f32 = rng.gen_range(0.2..0.6);
        let field = smooth_field(rng, s);
        for i in 0..plane {
            data[c * plane + i] = (base + field[i]).clamp(0.1, 0.7);
        }
    }
    let (bottom_right, green) = (label / 2 == 1, label % 2 == 1);
    let half = s as f32 / 2.0;
    let radius: f32 = rng.gen_range(0.08..0.12) * s as f32;
    let lo = radius + 0.5;
    let hi = half - radius - 0.5;
    let mut cx: f32 = rng.gen_range(lo..hi);
    let mut cy: f32 = rng.gen_range(lo..hi);
    if bottom_right {
        cx += half;
        cy += half;
    }
    let dominant = if green { 1 } else { 0 };
    let strength: f32 = rng.gen_range(0.9..1.0);
    for y in 0..s {
        for x in 0..s {
            let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
            if d2 <= radius * radius {
                let i = y * s + x;
                for c in 0..3 {
                    data[c * plane + i] = if c == dominant { strength } else { 0.0 };
                }
            }
        }
    }
    let noise = Normal::new(0.0f32, 0.1).expect("valid sigma");
    for v in &mut data {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, s, s], data).expect("sized")
}

/// Four-class synthetic task. Each image has a smooth random background and a
/// small red- or green-dominant disc somewhere in the top-left or
/// bottom-right quadrant. Every class is split 80/20 into train and test.
pub fn gen_synthetic(n_per_class: usize, size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if size < MIN_SYNTHETIC_SIZE {
        return Err(Error::Usage(format!("synthetic image size must be at least {MIN_SYNTHETIC_SIZE}, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = n_per_class * 4 / 5;
    let mut train = Vec::new();
    let mut test = Vec::new();
    // interleave classes so both splits are ordered class-round-robin
    let mut per_class: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); 4];
    for _ in 0..n_per_class {
        for (label, bucket) in per_class.iter_mut().enumerate() {
            bucket.push(synthetic_image(&mut rng, size, label));
        }
    }
    for i in 0..n_per_class {
        for (label, bucket) in per_class.iter().enumerate() {
            let s = Sample { image: bucket[i].clone(), label };
            if i < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    let names: Vec<String> = SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect();
    Ok((
        Dataset { samples: train, class_names: names.clone(), split: Split::Train },
        Dataset { samples: test, class_names: names, split: Split::Test },
    ))
}

/// Sample order for one epoch: a permutation drawn from a stream keyed by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Shuffled minibatches; the final partial batch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<(Tensor<f32>, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.ds.stacked(idx))
    }
}

pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    Ok(Batches { ds, order: epoch_order(ds.len(), seed, epoch), batch_size, pos: 0 })
}

/// In-order minibatches for evaluation.
pub fn sequential_batches(ds: &Dataset, batch_size: usize) -> Batches<'_> {
    Batches { ds, order: (0..ds.len()).collect(), batch_size: batch_size.max(1), pos: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img2(v: [f32; 4]) -> Tensor<f32> {
        Tensor::new(vec![1, 2, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn rotation_and_flip_examples() {
        let a = img2([1., 2., 3., 4.]);
        assert_eq!(rotate90(&a, 1).unwrap().data(), &[2., 4., 1., 3.]);
        assert_eq!(rotate90(&a, 4).unwrap(), a);
        assert_eq!(hflip(&a).data(), &[2., 1., 4., 3.]);
        let flipped_both = Tensor::new(vec![1, 2, 2], vec![4., 3., 2., 1.]).unwrap();
        assert_eq!(rotate90(&a, 2).unwrap(), flipped_both);
        assert!(rotate90(&Tensor::zeros([1, 2, 3]), 1).is_err());
    }

    #[test]
    fn synthetic_split_sizes() {
        let (tr, te) = gen_synthetic(100, 16, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (320, 80));
        assert_eq!(tr.class_counts(), vec![80; 4]);
        assert_eq!(te.class_counts(), vec![20; 4]);
        assert!(gen_synthetic(2, 8, 0).is_err());
        for s in &tr.samples {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn batch_sizes_keep_remainder() {
        let (tr, _) = gen_synthetic(25, 16, 0).unwrap();
        assert_eq!(tr.len(), 80);
        let sizes: Vec<usize> = batches(&tr, 32, 0, 0).unwrap().map(|b| b.unwrap().1.len()).collect();
        assert_eq!(sizes, vec![32, 32, 16]);
        assert_ne!(epoch_order(100, 0, 0), epoch_order(100, 0, 1));
        assert_eq!(epoch_order(100, 5, 2), epoch_order(100, 5, 2));
    }

    #[test]
    fn raw_rejects_bad_input() {
        let (tr, _) = gen_synthetic(5, 16, 0).unwrap();
        let bytes = raw_to_bytes(&tr);
        assert_eq!(raw_from_bytes(&bytes, Split::Train).unwrap(), tr);
        assert!(raw_from_bytes(&bytes[..bytes.len() - 3], Split::Train).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(raw_from_bytes(&bad, Split::Train).is_err());
    }
}
