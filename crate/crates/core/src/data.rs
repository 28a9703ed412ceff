//! Dataset loading, splits, label sampling and batch assembly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nets::Real;
use crate::rng::{gaussian, substream, Rng, Stream};
use crate::types::{ImageShape, LabeledImage};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Idx,
    PngDir,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(Format::Idx),
            "png-dir" | "png" => Ok(Format::PngDir),
            other => Err(Error::Data(format!("unknown dataset format {other:?} (expected idx or png-dir)"))),
        }
    }
}

/// Which part of the protocol an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Database,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub query: usize,
    pub database: usize,
}

/// Item ids per split. Items in none of the three are unused.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub database: Vec<usize>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Database => &self.database,
        }
    }
}

/// Images stored contiguously as `(N, C*H*W)` in `[-1, 1]`, each with a label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pixels: Vec<f32>,
    labels: Vec<Vec<usize>>,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(shape: ImageShape, pixels: Vec<f32>, labels: Vec<Vec<usize>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::NoItems);
        }
        if pixels.len() != labels.len() * shape.len() {
            return Err(Error::Shape(format!("{} pixels for {} images of {:?}", pixels.len(), labels.len(), shape)));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [-1, 1]")));
        }
        if let Some(i) = labels.iter().position(|l| l.is_empty()) {
            return Err(Error::Data(format!("item {i} has no label")));
        }
        Ok(Dataset { shape, pixels, labels, splits: Splits::default() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `1 + ` the largest label present.
    pub fn classes(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let d = self.shape.len();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn labels(&self, i: usize) -> &[usize] {
        &self.labels[i]
    }

    pub fn item(&self, i: usize, classes: usize) -> Result<LabeledImage> {
        LabeledImage::new(self.shape, self.pixels(i).to_vec(), self.labels[i].clone(), classes)
    }

    /// Checks every label against a configured class count.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().flatten().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Stacks the given items into a `(B, C*H*W)` matrix.
    pub fn images<F: Real>(&self, ids: &[usize]) -> Array2<F> {
        let d = self.shape.len();
        let mut out = Array2::zeros((ids.len(), d));
        for (mut row, &i) in out.rows_mut().into_iter().zip(ids) {
            for (o, &v) in row.iter_mut().zip(self.pixels(i)) {
                *o = F::of(v as f64);
            }
        }
        out
    }

    /// One conditioning label per item: the label itself, or for a label set
    /// a uniform draw from the set.
    pub fn conditioning_labels(&self, ids: &[usize], rng: &mut Rng) -> Vec<usize> {
        ids.iter()
            .map(|&i| {
                let set = &self.labels[i];
                if set.len() == 1 {
                    set[0]
                } else {
                    set[rng.random_range(0..set.len())]
                }
            })
            .collect()
    }

    /// Keeps only the listed items, in that order.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        let d = self.shape.len();
        let mut pixels = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            pixels.extend_from_slice(self.pixels(i));
        }
        Dataset {
            shape: self.shape,
            pixels,
            labels: ids.iter().map(|&i| self.labels[i].clone()).collect(),
            splits: Splits::default(),
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{}: truncated IDX header", path.display())))
}

/// Rescales a raw byte to `[-1, 1]`.
pub fn rescale(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// Parses an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::Data(format!("{}: bad IDX image magic {magic:#010x}", path.display())));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "{}: header promises {n}x{rows}x{cols} pixels, file holds {}",
            path.display(),
            body.len()
        )));
    }
    Ok((n, rows, cols, body.iter().map(|&b| rescale(b)).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::Data(format!("{}: bad IDX label magic {magic:#010x}", path.display())));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!("{}: header promises {n} labels, file holds {}", path.display(), body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn idx_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("images-idx3-ubyte") || n.ends_with("images.idx3-ubyte")))
        .collect();
    images.sort();
    Ok(images
        .into_iter()
        .map(|img| {
            let name = img.file_name().unwrap().to_str().unwrap().replace("images", "labels").replace("idx3", "idx1");
            let labels = img.with_file_name(name);
            (img, labels)
        })
        .collect())
}

/// Loads IDX data. `path` is either a directory holding `*images-idx3-ubyte`
/// files (each paired with its `*labels-idx1-ubyte`, concatenated in file-name
/// order) or a single image file.
pub fn load_idx(path: &Path) -> Result<Dataset> {
    let pairs = if path.is_dir() {
        idx_pairs(path)?
    } else if path.exists() {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().replace("images", "labels").replace("idx3", "idx1");
        vec![(path.to_path_buf(), path.with_file_name(name))]
    } else {
        return Err(Error::MissingFile(path.to_path_buf()));
    };
    if pairs.is_empty() {
        return Err(Error::NoItems);
    }
    let mut shape = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (img_path, lbl_path) in pairs {
        let (n, rows, cols, px) = parse_idx_images(&read_file(&img_path)?, &img_path)?;
        let lbl = parse_idx_labels(&read_file(&lbl_path)?, &lbl_path)?;
        if lbl.len() != n {
            return Err(Error::Data(format!(
                "{} has {n} images but {} has {} labels",
                img_path.display(),
                lbl_path.display(),
                lbl.len()
            )));
        }
        let s = ImageShape::new(1, rows, cols);
        if *shape.get_or_insert(s) != s {
            return Err(Error::Shape(format!("{} has {rows}x{cols} images", img_path.display())));
        }
        pixels.extend(px);
        labels.extend(lbl.into_iter().map(|l| vec![l]));
    }
    Dataset::new(shape.ok_or(Error::NoItems)?, pixels, labels)
}

fn parse_label_set(field: &str, line: usize) -> Result<Vec<usize>> {
    let set: std::result::Result<Vec<usize>, _> = field.split(';').map(|s| s.trim().parse::<usize>()).collect();
    match set {
        Ok(s) if !s.is_empty() => Ok(s),
        _ => Err(Error::Data(format!("labels.csv line {line}: bad label {field:?}"))),
    }
}

/// Loads a directory of PNGs described by `labels.csv` (`filename,label`, with
/// `;`-separated labels for multi-label items). Grayscale images load with one
/// channel, anything else as RGB.
pub fn load_png_dir(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let csv_path = dir.join("labels.csv");
    if !csv_path.exists() {
        if fs::read_dir(dir)?.next().is_none() {
            return Err(Error::NoItems);
        }
        return Err(Error::MissingFile(csv_path));
    }
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::Data(format!("labels.csv: {e}")))?;
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("labels.csv: {e}")))?;
        let (name, label) = match (record.get(0), record.get(1)) {
            (Some(n), Some(l)) => (n.trim().to_string(), parse_label_set(l, i + 2)?),
            _ => return Err(Error::Data(format!("labels.csv line {}: expected filename,label", i + 2))),
        };
        entries.push((name, label));
    }
    if entries.is_empty() {
        return Err(Error::NoItems);
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let mut shape: Option<ImageShape> = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (name, label) in entries {
        let path = dir.join(&name);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let img = image::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let channels = if img.color().has_color() { 3 } else { 1 };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let s = ImageShape::new(channels, h, w);
        if *shape.get_or_insert(s) != s {
            return Err(Error::Shape(format!("{name} is {channels}x{h}x{w}, expected {:?}", shape.unwrap())));
        }
        let raw = if channels == 1 { img.to_luma8().into_raw() } else { img.to_rgb8().into_raw() };
        // interleaved HWC to planar CHW
        for c in 0..channels {
            pixels.extend((0..h * w).map(|p| rescale(raw[p * channels + c])));
        }
        labels.push(label);
    }
    Dataset::new(shape.unwrap(), pixels, labels)
}

/// Parameters of the synthetic blob dataset, written `blobs:CLASSES:SIDE:PER_CLASS:NOISE:SEED`
/// (trailing fields optional).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub side: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec { classes: 2, side: 8, per_class: 600, noise: 0.3, seed: 0 }
    }
}

impl FromStr for BlobSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.strip_prefix("blobs").ok_or_else(|| Error::Data(format!("not a blob spec: {s}")))?;
        let body = body.strip_prefix(':').unwrap_or(body);
        let mut spec = BlobSpec::default();
        let bad = |f: &str| Error::Data(format!("blob spec {s:?}: bad field {f:?}"));
        for (i, f) in body.split(':').filter(|f| !f.is_empty()).enumerate() {
            match i {
                0 => spec.classes = f.parse().map_err(|_| bad(f))?,
                1 => spec.side = f.parse().map_err(|_| bad(f))?,
                2 => spec.per_class = f.parse().map_err(|_| bad(f))?,
                3 => spec.noise = f.parse().map_err(|_| bad(f))?,
                4 => spec.seed = f.parse().map_err(|_| bad(f))?,
                _ => return Err(bad(f)),
            }
        }
        Ok(spec)
    }
}

/// Single-channel `side×side` images: each class has a fixed random pattern,
/// items add Gaussian noise and are clipped to `[-1, 1]`. Items are
/// interleaved by class.
pub fn blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.side == 0 {
        return Err(Error::NoItems);
    }
    let d = spec.side * spec.side;
    let mut rng = substream(spec.seed, Stream::Synthetic, 0);
    let patterns: Vec<Vec<f64>> =
        (0..spec.classes).map(|_| (0..d).map(|_| rng.random_range(-0.8..0.8)).collect()).collect();
    let n = spec.classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        pixels.extend(patterns[c].iter().map(|&p| (p + spec.noise * gaussian::<f64>(&mut rng)).clamp(-1.0, 1.0) as f32));
        labels.push(vec![c]);
    }
    Dataset::new(ImageShape::new(1, spec.side, spec.side), pixels, labels)
}

/// Loads a dataset from a path, or builds the synthetic blobs for a
/// `blobs:...` source.
pub fn load_dataset(source: &str, format: Option<Format>) -> Result<Dataset> {
    if source.starts_with("blobs") {
        return blobs(&source.parse()?);
    }
    let path = Path::new(source);
    let format = match format {
        Some(f) => f,
        None if path.is_dir() && path.join("labels.csv").exists() => Format::PngDir,
        None => Format::Idx,
    };
    match format {
        Format::Idx => load_idx(path),
        Format::PngDir => load_png_dir(path),
    }
}

/// Seeded shuffle, then a class-stratified train split (quotas by largest
/// remainder on the first label), then query and database from the remaining
/// items in shuffled order.
pub fn make_splits(dataset: &Dataset, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
    let n = dataset.len();
    let total = sizes.train + sizes.query + sizes.database;
    if total > n {
        return Err(Error::Data(format!(
            "split sizes {}+{}+{} exceed {n} items",
            sizes.train, sizes.query, sizes.database
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Stream::Split, 0));

    let classes = dataset.classes();
    let mut counts = vec![0usize; classes];
    for &i in &order {
        counts[dataset.labels(i)[0]] += 1;
    }
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * sizes.train / n).collect();
    let mut left = sizes.train - quota.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..classes).collect();
    by_remainder.sort_by_key(|&c| (std::cmp::Reverse(counts[c] * sizes.train % n), c));
    for &c in by_remainder.iter().cycle().take(classes * 2) {
        if left == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            left -= 1;
        }
    }

    let mut train = Vec::with_capacity(sizes.train);
    let mut rest = Vec::with_capacity(n - sizes.train);
    for &i in &order {
        let c = dataset.labels(i)[0];
        if quota[c] > 0 {
            quota[c] -= 1;
            train.push(i);
        } else {
            rest.push(i);
        }
    }
    let query = rest[..sizes.query].to_vec();
    let database = rest[sizes.query..sizes.query + sizes.database].to_vec();
    let mut out = dataset.clone();
    out.splits = Splits { train, query, database };
    Ok(out)
}

/// Empirical label distribution `p_data(c)` as integer counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSampler {
    counts: Vec<u64>,
}

impl LabelSampler {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::NoItems);
        }
        Ok(LabelSampler { counts })
    }

    /// Histogram of the first label of each listed item.
    pub fn from_dataset(dataset: &Dataset, ids: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![0u64; classes.max(dataset.classes())];
        for &i in ids {
            for &l in dataset.labels(i) {
                counts[l] += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&c| self.counts[c] > 0).collect()
    }

    fn draw(&self, exclude: Option<usize>, rng: &mut Rng) -> Result<usize> {
        let weight = |c: usize| if Some(c) == exclude { 0 } else { self.counts[c] };
        let total: u64 = (0..self.counts.len()).map(weight).sum();
        if total == 0 {
            return Err(Error::SingleLabel(format!("no label other than {exclude:?} to draw")));
        }
        let mut r = rng.random_range(0..total);
        for c in 0..self.counts.len() {
            let w = weight(c);
            if r < w {
                return Ok(c);
            }
            r -= w;
        }
        unreachable!("draw below total weight")
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        self.draw(None, rng).expect("non-empty histogram")
    }
}

/// Draws from the histogram renormalized without `exclude`.
pub fn sample_negative_label(sampler: &LabelSampler, exclude: usize, rng: &mut Rng) -> Result<usize> {
    if sampler.support().len() < 2 {
        return Err(Error::SingleLabel(format!("label support {:?}", sampler.support())));
    }
    sampler.draw(Some(exclude), rng)
}

/// Real-real triplets for anchors in a batch: a positive sharing the anchor's
/// label and a negative without it, both drawn from the listed pool.
pub fn real_triplet_ids(
    dataset: &Dataset,
    pool: &[usize],
    anchor_labels: &[usize],
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pos = Vec::with_capacity(anchor_labels.len());
    let mut neg = Vec::with_capacity(anchor_labels.len());
    for &c in anchor_labels {
        let has = |i: &usize| dataset.labels(*i).contains(&c);
        let same: Vec<usize> = pool.iter().copied().filter(has).collect();
        let other: Vec<usize> = pool.iter().copied().filter(|i| !has(i)).collect();
        if same.is_empty() || other.is_empty() {
            return Err(Error::SingleLabel(format!("no positive/negative for label {c} in the pool")));
        }
        pos.push(same[rng.random_range(0..same.len())]);
        neg.push(other[rng.random_range(0..other.len())]);
    }
    Ok((pos, neg))
}

/// A batch of distinct training ids, uniform without replacement.
pub fn sample_batch(pool: &[usize], size: usize, rng: &mut Rng) -> Vec<usize> {
    let size = size.min(pool.len());
    rand::seq::index::sample(rng, pool.len(), size).into_iter().map(|i| pool[i]).collect()
}

/// Label sets must be disjoint across splits.
pub fn splits_disjoint(splits: &Splits) -> bool {
    let mut seen = HashSet::new();
    splits.train.iter().chain(&splits.query).chain(&splits.database).all(|&i| seen.insert(i))
}
