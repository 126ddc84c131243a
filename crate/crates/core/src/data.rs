//! Datasets, synthetic generation, label splits, imbalanced subsampling and
//! the labeled/unlabeled batch stream.
//!
//! Batches are a pure function of the step index: per-epoch permutations are
//! derived from the stream seed, and the shorter labeled stream cycles. That
//! makes any position reproducible after a checkpoint resume without
//! replaying the stream.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

/// Sample storage for either modality.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// Row-major [N, d].
    Vectors(Tensor),
    Images(Vec<Image>),
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Vectors(t) => t.rows(),
            Inputs::Images(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    inputs: Inputs,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Inputs,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Dataset> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("a dataset needs at least one class"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} labels", inputs.len()),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::shape(
                "Dataset::new",
                format!("labels < {num_classes}"),
                format!("{bad}"),
            ));
        }
        if let Inputs::Images(imgs) = &inputs {
            if let Some(first) = imgs.first() {
                let shape = (first.height(), first.width(), first.channels());
                for img in imgs {
                    if (img.height(), img.width(), img.channels()) != shape {
                        return Err(Error::shape(
                            "Dataset::new",
                            format!("{shape:?}"),
                            format!("{:?}", (img.height(), img.width(), img.channels())),
                        ));
                    }
                }
            }
        }
        Ok(Dataset { name: name.into(), inputs, labels, num_classes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn inputs(&self) -> &Inputs {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattened feature width seen by a vector model.
    pub fn input_dim(&self) -> usize {
        match &self.inputs {
            Inputs::Vectors(t) => t.cols(),
            Inputs::Images(v) => {
                v.first().map(|i| i.height() * i.width() * i.channels()).unwrap_or(0)
            }
        }
    }

    /// Copy of sample `i` as a flat vector (images in row-major HWC order).
    pub fn flat_input(&self, i: usize) -> Vec<f64> {
        match &self.inputs {
            Inputs::Vectors(t) => t.row(i).to_vec(),
            Inputs::Images(v) => v[i].to_flat(),
        }
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// All samples as one `[N, input_dim]` matrix of flat inputs.
    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.inputs {
            Inputs::Vectors(t) => Ok(t.clone()),
            Inputs::Images(v) => {
                let d = self.input_dim();
                let mut data = Vec::with_capacity(v.len() * d);
                for img in v {
                    data.extend_from_slice(img.data());
                }
                Tensor::new(vec![v.len(), d], data)
            }
        }
    }

    /// One-hot labels as an `[N, C]` matrix.
    pub fn one_hot_labels(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.len(), self.num_classes]);
        for (i, &l) in self.labels.iter().enumerate() {
            t.row_mut(i)[l] = 1.0;
        }
        t
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::shape(
                "Dataset::subset",
                format!("indices < {}", self.len()),
                format!("{bad}"),
            ));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let inputs = match &self.inputs {
            Inputs::Vectors(t) => {
                let mut data = Vec::with_capacity(idx.len() * t.cols());
                for &i in idx {
                    data.extend_from_slice(t.row(i));
                }
                Inputs::Vectors(Tensor::new(vec![idx.len(), t.cols()], data)?)
            }
            Inputs::Images(v) => Inputs::Images(idx.iter().map(|&i| v[i].clone()).collect()),
        };
        Dataset::new(name, inputs, labels, self.num_classes)
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Two interleaved half-circles, `n/2` points each, with isotropic Gaussian
/// jitter of the given standard deviation. Class 0 is the upper arc, class 1
/// the lower shifted arc.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidArgument("two-moons size must be positive and even"));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be finite and >= 0"));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "two-moons", 0));
    let mut rows = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let angle = |i: usize| {
        if half == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        }
    };
    let jitter = |v: f64, rng: &mut ChaCha8Rng| {
        let z: f64 = StandardNormal.sample(rng);
        v + noise * z
    };
    for i in 0..half {
        let t = angle(i);
        rows.push(jitter(t.cos(), &mut rng));
        rows.push(jitter(t.sin(), &mut rng));
        labels.push(0);
    }
    for i in 0..half {
        let t = angle(i);
        rows.push(jitter(1.0 - t.cos(), &mut rng));
        rows.push(jitter(0.5 - t.sin(), &mut rng));
        labels.push(1);
    }
    let inputs = Inputs::Vectors(Tensor::new(vec![n, 2], rows)?);
    Dataset::new("two-moons", inputs, labels, 2)
}

// ---------------------------------------------------------------------------
// Imbalance
// ---------------------------------------------------------------------------

/// Geometric class-size profile: class 1 keeps `n_max` samples and class C
/// keeps `n_max / lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    pub n_max: usize,
    pub lambda: f64,
    pub num_classes: usize,
}

/// Per-class sample counts N_k = round(n_max · lambda^{-(k-1)/(C-1)}),
/// rounded half up.
pub fn class_counts(spec: &ImbalanceSpec) -> Result<Vec<usize>> {
    if !spec.lambda.is_finite() || spec.lambda < 1.0 {
        return Err(Error::InvalidLambda(spec.lambda));
    }
    if spec.num_classes == 0 {
        return Err(Error::InvalidArgument("imbalance spec needs at least one class"));
    }
    if spec.num_classes == 1 {
        return Ok(vec![spec.n_max]);
    }
    let c = spec.num_classes;
    let counts: Vec<usize> = (0..c)
        .map(|k| {
            let expo = -(k as f64) / (c as f64 - 1.0);
            let v = spec.n_max as f64 * spec.lambda.powf(expo);
            (v + 0.5).floor() as usize
        })
        .collect();
    debug_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    Ok(counts)
}

/// Keeps a deterministic per-class subsample following the profile. Classes
/// are matched by id: class k keeps N_{k+1} samples.
pub fn imbalanced_subsample(ds: &Dataset, spec: &ImbalanceSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes != ds.num_classes() {
        return Err(Error::shape(
            "imbalanced_subsample",
            format!("{} classes", ds.num_classes()),
            format!("{}", spec.num_classes),
        ));
    }
    let counts = class_counts(spec)?;
    let by_class = ds.class_indices();
    let mut keep = Vec::new();
    for (k, want) in counts.iter().enumerate() {
        let mut idx = by_class[k].clone();
        if idx.len() < *want {
            return Err(Error::InfeasibleSplit(format!(
                "class {k} has {} samples, imbalance profile wants {want}",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "imbalance", k as u64));
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..*want]);
    }
    keep.sort_unstable();
    ds.subset(&keep, format!("{}/imbalanced", ds.name()))
}

// ---------------------------------------------------------------------------
// Label split
// ---------------------------------------------------------------------------

/// Class-balanced labeled/unlabeled split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub labels_per_class: usize,
    pub seed: u64,
}

/// Picks exactly `labels_per_class` samples of every class for the labeled
/// set; the complement becomes the unlabeled set (which keeps its labels for
/// diagnostics only).
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let by_class = ds.class_indices();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (k, idx) in by_class.iter().enumerate() {
        if idx.len() < spec.labels_per_class {
            return Err(Error::InfeasibleSplit(format!(
                "class {k} has {} samples, split wants {}",
                idx.len(),
                spec.labels_per_class
            )));
        }
        let mut idx = idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "split", k as u64));
        idx.shuffle(&mut rng);
        labeled.extend_from_slice(&idx[..spec.labels_per_class]);
        unlabeled.extend_from_slice(&idx[spec.labels_per_class..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((
        ds.subset(&labeled, format!("{}/labeled", ds.name()))?,
        ds.subset(&unlabeled, format!("{}/unlabeled", ds.name()))?,
    ))
}

// ---------------------------------------------------------------------------
// Batch stream
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    /// Weak views, one row per sample.
    pub x: Tensor,
    /// One-hot targets [B, C].
    pub y: Tensor,
    pub idx: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    pub weak: Tensor,
    pub strong: Tensor,
    /// Second independent strong view for graph-based objectives.
    pub strong2: Tensor,
    pub idx: Vec<usize>,
    /// Ground-truth labels carried for pseudo-label diagnostics only; they
    /// never reach a loss.
    pub truth: Vec<usize>,
}

/// Infinite stream of (labeled B, unlabeled μB) batches with augmented views.
pub struct BatchStream<'a> {
    labeled: &'a Dataset,
    unlabeled: &'a Dataset,
    batch: usize,
    mu: usize,
    seed: u64,
    policy: AugmentPolicy,
    step: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        labeled: &'a Dataset,
        unlabeled: &'a Dataset,
        batch: usize,
        mu: usize,
        seed: u64,
        policy: AugmentPolicy,
    ) -> Result<BatchStream<'a>> {
        if batch == 0 || mu == 0 {
            return Err(Error::InvalidArgument("batch size and mu must be >= 1"));
        }
        if labeled.is_empty() {
            return Err(Error::EmptySet("labeled"));
        }
        if unlabeled.is_empty() {
            return Err(Error::EmptySet("unlabeled"));
        }
        if labeled.input_dim() != unlabeled.input_dim() {
            return Err(Error::shape(
                "BatchStream::new",
                format!("input dim {}", labeled.input_dim()),
                format!("{}", unlabeled.input_dim()),
            ));
        }
        policy.validate()?;
        let modality_ok = matches!(
            (&policy, labeled.inputs(), unlabeled.inputs()),
            (AugmentPolicy::Vector(_), Inputs::Vectors(_), Inputs::Vectors(_))
                | (AugmentPolicy::Image(_), Inputs::Images(_), Inputs::Images(_))
        );
        if !modality_ok {
            return Err(Error::InvalidConfig(
                "augmentation policy does not match the input modality".into(),
            ));
        }
        Ok(BatchStream { labeled, unlabeled, batch, mu, seed, policy, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Repositions the stream, e.g. after a checkpoint resume.
    pub fn seek(&mut self, step: u64) {
        self.step = step;
    }

    pub fn next_batch(&mut self) -> Result<(LabeledBatch, UnlabeledBatch)> {
        let out = self.at(self.step)?;
        self.step += 1;
        Ok(out)
    }

    /// The batch at step `k`, independent of stream position.
    pub fn at(&self, k: u64) -> Result<(LabeledBatch, UnlabeledBatch)> {
        let idx_l = stream_indices(self.labeled.len(), self.batch, k, self.seed, "labeled-order");
        let idx_u = stream_indices(
            self.unlabeled.len(),
            self.batch * self.mu,
            k,
            self.seed,
            "unlabeled-order",
        );
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "augment", k));

        let mut x_rows = Vec::with_capacity(idx_l.len());
        for &i in &idx_l {
            x_rows.push(self.view(self.labeled, i, View::Weak, &mut rng));
        }
        let y = one_hot(&idx_l.iter().map(|&i| self.labeled.label(i)).collect::<Vec<_>>(),
            self.labeled.num_classes())?;
        let x = tensor_from_owned_rows(x_rows)?;

        let mut weak = Vec::with_capacity(idx_u.len());
        let mut strong = Vec::with_capacity(idx_u.len());
        let mut strong2 = Vec::with_capacity(idx_u.len());
        for &i in &idx_u {
            weak.push(self.view(self.unlabeled, i, View::Weak, &mut rng));
            strong.push(self.view(self.unlabeled, i, View::Strong, &mut rng));
            strong2.push(self.view(self.unlabeled, i, View::Strong, &mut rng));
        }
        let truth = idx_u.iter().map(|&i| self.unlabeled.label(i)).collect();
        Ok((
            LabeledBatch { x, y, idx: idx_l },
            UnlabeledBatch {
                weak: tensor_from_owned_rows(weak)?,
                strong: tensor_from_owned_rows(strong)?,
                strong2: tensor_from_owned_rows(strong2)?,
                idx: idx_u,
                truth,
            },
        ))
    }

    fn view<R: Rng>(&self, ds: &Dataset, i: usize, which: View, rng: &mut R) -> Vec<f64> {
        match (&self.policy, ds.inputs()) {
            (AugmentPolicy::Vector(p), Inputs::Vectors(t)) => match which {
                View::Weak => p.weak(t.row(i), rng),
                View::Strong => p.strong(t.row(i), rng),
            },
            (AugmentPolicy::Image(p), Inputs::Images(v)) => match which {
                View::Weak => p.weak(&v[i], rng).to_flat(),
                View::Strong => p.strong(&v[i], rng).to_flat(),
            },
            // Modality checked at construction.
            _ => unreachable!("policy/input modality mismatch"),
        }
    }
}

#[derive(Clone, Copy)]
enum View {
    Weak,
    Strong,
}

/// Sample indices for positions k·b .. k·b+b of a per-epoch-shuffled stream
/// over `n` samples, cycling across epochs.
fn stream_indices(n: usize, b: usize, k: u64, seed: u64, tag: &str) -> Vec<usize> {
    let mut perms: HashMap<u64, Vec<usize>> = HashMap::new();
    let start = k * b as u64;
    (0..b as u64)
        .map(|j| {
            let g = start + j;
            let epoch = g / n as u64;
            let offset = (g % n as u64) as usize;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, epoch));
                p.shuffle(&mut rng);
                p
            });
            perm[offset]
        })
        .collect()
}

fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![labels.len(), num_classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::shape("one_hot", format!("label < {num_classes}"), format!("{l}")));
        }
        t.row_mut(i)[l] = 1.0;
    }
    Ok(t)
}

fn tensor_from_owned_rows(rows: Vec<Vec<f64>>) -> Result<Tensor> {
    Tensor::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// File ingestion
// ---------------------------------------------------------------------------

/// Parses delimiter-separated vector data: one sample per line, comma- or
/// whitespace-separated features, final field the integer class label. Blank
/// lines and lines starting with `#` are skipped.
pub fn parse_vectors_csv(text: &str, name: &str) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "{name}: line {}: need at least one feature and a label",
                lineno + 1
            )));
        }
        let (feat, label) = fields.split_at(fields.len() - 1);
        let mut row = Vec::with_capacity(feat.len());
        for f in feat {
            row.push(f.parse::<f64>().map_err(|_| {
                Error::InvalidConfig(format!("{name}: line {}: bad number {f:?}", lineno + 1))
            })?);
        }
        let l = label[0].parse::<usize>().map_err(|_| {
            Error::InvalidConfig(format!("{name}: line {}: bad label {:?}", lineno + 1, label[0]))
        })?;
        if let Some(prev) = rows.last() {
            if prev.len() != row.len() {
                return Err(Error::InvalidConfig(format!(
                    "{name}: line {}: expected {} features, got {}",
                    lineno + 1,
                    prev.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
        labels.push(l);
    }
    if rows.is_empty() {
        return Err(Error::EmptySet("vector file"));
    }
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(name, Inputs::Vectors(Tensor::from_rows(&rows)?), labels, num_classes)
}

pub fn load_vectors_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("vectors");
    parse_vectors_csv(&text, name)
}

/// Renders vector data in the format `parse_vectors_csv` reads: one sample
/// per line, comma-separated features, label last. Floats use the shortest
/// representation that round-trips, so save and load are lossless. The class
/// count is inferred on load as the highest label plus one, so classes with
/// no samples do not survive a round trip.
pub fn write_vectors_csv(ds: &Dataset) -> Result<String> {
    let Inputs::Vectors(x) = ds.inputs() else {
        return Err(Error::InvalidArgument("vector CSV export needs vector inputs"));
    };
    let mut out = String::new();
    for i in 0..ds.len() {
        for v in x.row(i) {
            out.push_str(&v.to_string());
            out.push(',');
        }
        out.push_str(&ds.label(i).to_string());
        out.push('\n');
    }
    Ok(out)
}

pub fn save_vectors_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_vectors_csv(ds)?)?;
    Ok(())
}

pub const RASTER_MAGIC: &[u8; 8] = b"EPRASTR1";

/// Parses the raster container: magic, five u32 little-endian header fields
/// (count, height, width, channels, num_classes), `count` u8 labels, then
/// `count` images of height·width·channels u8 pixels scaled to [0, 1].
pub fn parse_raster(bytes: &[u8], name: &str) -> Result<Dataset> {
    let fail = |msg: &str| Error::InvalidConfig(format!("{name}: {msg}"));
    if bytes.len() < 8 + 20 {
        return Err(fail("file too short for header"));
    }
    if &bytes[..8] != RASTER_MAGIC {
        return Err(fail("bad magic"));
    }
    let field = |i: usize| {
        let off = 8 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let (count, h, w, c, num_classes) = (field(0), field(1), field(2), field(3), field(4));
    if c != 1 && c != 3 {
        return Err(fail("channels must be 1 or 3"));
    }
    let pixel_bytes = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| fail("image dimensions overflow"))?;
    let expect = 28 + count + count * pixel_bytes;
    if bytes.len() != expect {
        return Err(fail(&format!("expected {expect} bytes, file has {}", bytes.len())));
    }
    let labels: Vec<usize> = bytes[28..28 + count].iter().map(|&b| b as usize).collect();
    let mut images = Vec::with_capacity(count);
    let mut off = 28 + count;
    for _ in 0..count {
        let data: Vec<f64> =
            bytes[off..off + pixel_bytes].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(h, w, c, data)?);
        off += pixel_bytes;
    }
    Dataset::new(name, Inputs::Images(images), labels, num_classes)
}

pub fn load_raster(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("raster");
    parse_raster(&bytes, name)
}

/// Serializes an image dataset into the raster container layout.
pub fn write_raster(ds: &Dataset) -> Result<Vec<u8>> {
    let imgs = match ds.inputs() {
        Inputs::Images(v) => v,
        Inputs::Vectors(_) => {
            return Err(Error::InvalidArgument("raster container holds image datasets"))
        }
    };
    if ds.num_classes() > 256 {
        return Err(Error::InvalidArgument("raster labels are single bytes"));
    }
    let (h, w, c) = match imgs.first() {
        Some(i) => (i.height(), i.width(), i.channels()),
        None => return Err(Error::EmptySet("raster dataset")),
    };
    let mut out = Vec::new();
    out.extend_from_slice(RASTER_MAGIC);
    for v in [imgs.len(), h, w, c, ds.num_classes()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(ds.labels().iter().map(|&l| l as u8));
    for img in imgs {
        out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::VectorAugment;

    fn vector_policy() -> AugmentPolicy {
        AugmentPolicy::Vector(VectorAugment::from_weak(0.05))
    }

    #[test]
    fn two_moons_shapes_and_balance() {
        let ds = gen_two_moons(100, 0.1, 7).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.input_dim(), 2);
        let counts = ds.class_indices().iter().map(|v| v.len()).collect::<Vec<_>>();
        assert_eq!(counts, vec![50, 50]);
        assert!(gen_two_moons(101, 0.1, 7).is_err());
        assert!(gen_two_moons(0, 0.1, 7).is_err());
    }

    #[test]
    fn two_moons_noiseless_points_sit_on_arcs() {
        let ds = gen_two_moons(40, 0.0, 3).unwrap();
        let x = match ds.inputs() {
            Inputs::Vectors(t) => t,
            _ => unreachable!(),
        };
        for i in 0..ds.len() {
            let p = x.row(i);
            let r2 = if ds.label(i) == 0 {
                p[0] * p[0] + p[1] * p[1]
            } else {
                (p[0] - 1.0).powi(2) + (p[1] - 0.5).powi(2)
            };
            assert!((r2 - 1.0).abs() < 1e-12, "sample {i} off arc: {r2}");
        }
    }

    #[test]
    fn two_moons_seed_determinism() {
        let a = gen_two_moons(60, 0.1, 9).unwrap();
        let b = gen_two_moons(60, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_two_moons(60, 0.1, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_counts_examples() {
        let spec = ImbalanceSpec { n_max: 1500, lambda: 50.0, num_classes: 10 };
        let counts = class_counts(&spec).unwrap();
        assert_eq!(counts[0], 1500);
        assert_eq!(counts[9], 30);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));

        let flat = ImbalanceSpec { n_max: 200, lambda: 1.0, num_classes: 4 };
        assert_eq!(class_counts(&flat).unwrap(), vec![200; 4]);

        let bad = ImbalanceSpec { n_max: 10, lambda: 0.5, num_classes: 3 };
        assert!(matches!(class_counts(&bad), Err(Error::InvalidLambda(_))));
    }

    #[test]
    fn class_counts_last_is_n_max_over_lambda() {
        for lambda in [2.0, 10.0, 100.0] {
            let spec = ImbalanceSpec { n_max: 1000, lambda, num_classes: 6 };
            let counts = class_counts(&spec).unwrap();
            let want = (1000.0 / lambda + 0.5).floor() as usize;
            assert_eq!(counts[5], want);
        }
    }

    #[test]
    fn imbalanced_subsample_matches_profile() {
        let ds = gen_two_moons(400, 0.1, 1).unwrap();
        let spec = ImbalanceSpec { n_max: 150, lambda: 5.0, num_classes: 2 };
        let sub = imbalanced_subsample(&ds, &spec, 11).unwrap();
        let counts: Vec<usize> = sub.class_indices().iter().map(|v| v.len()).collect();
        assert_eq!(counts, vec![150, 30]);

        let greedy = ImbalanceSpec { n_max: 500, lambda: 5.0, num_classes: 2 };
        assert!(matches!(
            imbalanced_subsample(&ds, &greedy, 11),
            Err(Error::InfeasibleSplit(_))
        ));
    }

    #[test]
    fn split_is_balanced_disjoint_and_deterministic() {
        let ds = gen_two_moons(100, 0.1, 5).unwrap();
        let spec = SplitSpec { labels_per_class: 4, seed: 21 };
        let (l, u) = split(&ds, &spec).unwrap();
        assert_eq!(l.len(), 8);
        assert_eq!(u.len(), 92);
        for idx in l.class_indices() {
            assert_eq!(idx.len(), 4);
        }
        let (l2, u2) = split(&ds, &spec).unwrap();
        assert_eq!(l, l2);
        assert_eq!(u, u2);

        let infeasible = SplitSpec { labels_per_class: 51, seed: 21 };
        assert!(matches!(split(&ds, &infeasible), Err(Error::InfeasibleSplit(_))));
    }

    #[test]
    fn split_can_consume_everything() {
        let ds = gen_two_moons(20, 0.1, 5).unwrap();
        let (l, u) = split(&ds, &SplitSpec { labels_per_class: 10, seed: 1 }).unwrap();
        assert_eq!(l.len(), 20);
        assert!(u.is_empty());
    }

    #[test]
    fn batch_shapes_follow_mu() {
        let ds = gen_two_moons(200, 0.1, 2).unwrap();
        let (l, u) = split(&ds, &SplitSpec { labels_per_class: 10, seed: 3 }).unwrap();
        let stream = BatchStream::new(&l, &u, 64, 7, 17, vector_policy()).unwrap();
        let (lb, ub) = stream.at(0).unwrap();
        assert_eq!(lb.x.shape(), &[64, 2]);
        assert_eq!(lb.y.shape(), &[64, 2]);
        assert_eq!(ub.weak.shape(), &[448, 2]);
        assert_eq!(ub.strong.shape(), &[448, 2]);
        assert_eq!(ub.strong2.shape(), &[448, 2]);
        assert_eq!(ub.idx.len(), 448);
        assert_eq!(ub.truth.len(), 448);

        let stream = BatchStream::new(&l, &u, 16, 1, 17, vector_policy()).unwrap();
        let (lb, ub) = stream.at(0).unwrap();
        assert_eq!(lb.x.rows(), ub.weak.rows());
    }

    #[test]
    fn streams_with_same_seed_are_identical() {
        let ds = gen_two_moons(80, 0.1, 4).unwrap();
        let (l, u) = split(&ds, &SplitSpec { labels_per_class: 6, seed: 3 }).unwrap();
        let mut a = BatchStream::new(&l, &u, 8, 2, 33, vector_policy()).unwrap();
        let mut b = BatchStream::new(&l, &u, 8, 2, 33, vector_policy()).unwrap();
        for _ in 0..3 {
            let (la, ua) = a.next_batch().unwrap();
            let (lb, ub) = b.next_batch().unwrap();
            assert_eq!(la.x, lb.x);
            assert_eq!(la.y, lb.y);
            assert_eq!(la.idx, lb.idx);
            assert_eq!(ua.weak, ub.weak);
            assert_eq!(ua.strong, ub.strong);
            assert_eq!(ua.strong2, ub.strong2);
        }
        // strong and strong2 are independent draws.
        let (_, ua) = a.at(0).unwrap();
        assert_ne!(ua.strong, ua.strong2);
    }

    #[test]
    fn at_matches_sequential_iteration() {
        let ds = gen_two_moons(60, 0.05, 8).unwrap();
        let (l, u) = split(&ds, &SplitSpec { labels_per_class: 5, seed: 2 }).unwrap();
        let mut seq = BatchStream::new(&l, &u, 4, 3, 99, vector_policy()).unwrap();
        let direct = BatchStream::new(&l, &u, 4, 3, 99, vector_policy()).unwrap();
        for k in 0..4 {
            let (ls, us) = seq.next_batch().unwrap();
            let (ld, ud) = direct.at(k).unwrap();
            assert_eq!(ls.x, ld.x);
            assert_eq!(us.strong, ud.strong);
        }
        assert_eq!(seq.step(), 4);
        seq.seek(1);
        let (ls, _) = seq.next_batch().unwrap();
        let (ld, _) = direct.at(1).unwrap();
        assert_eq!(ls.x, ld.x);
    }

    #[test]
    fn labeled_stream_cycles_with_full_coverage() {
        let ds = gen_two_moons(40, 0.1, 6).unwrap();
        let (l, u) = split(&ds, &SplitSpec { labels_per_class: 4, seed: 5 }).unwrap();
        assert_eq!(l.len(), 8);
        // A batch of 16 spans exactly two epochs of the 8 labeled samples.
        let stream = BatchStream::new(&l, &u, 16, 1, 13, vector_policy()).unwrap();
        let (lb, _) = stream.at(0).unwrap();
        let mut counts = vec![0usize; 8];
        for &i in &lb.idx {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2), "{counts:?}");
    }

    #[test]
    fn one_hot_targets_match_labels() {
        let ds = gen_two_moons(40, 0.1, 6).unwrap();
        let (l, u) = split(&ds, &SplitSpec { labels_per_class: 4, seed: 5 }).unwrap();
        let stream = BatchStream::new(&l, &u, 8, 1, 13, vector_policy()).unwrap();
        let (lb, _) = stream.at(2).unwrap();
        for (r, &i) in lb.idx.iter().enumerate() {
            let row = lb.y.row(r);
            assert_eq!(row[l.label(i)], 1.0);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn stream_rejects_bad_configs() {
        let ds = gen_two_moons(40, 0.1, 6).unwrap();
        let (l, u) = split(&ds, &SplitSpec { labels_per_class: 4, seed: 5 }).unwrap();
        assert!(BatchStream::new(&l, &u, 0, 1, 1, vector_policy()).is_err());
        assert!(BatchStream::new(&l, &u, 4, 0, 1, vector_policy()).is_err());
        let empty = l.subset(&[], "empty").unwrap();
        assert!(matches!(
            BatchStream::new(&empty, &u, 4, 1, 1, vector_policy()),
            Err(Error::EmptySet("labeled"))
        ));
        let image_policy = AugmentPolicy::Image(crate::augment::ImageAugment::default());
        assert!(matches!(
            BatchStream::new(&l, &u, 4, 1, 1, image_policy),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let text = "# toy\n0.5, 1.25, 0\n-0.5 2.5 1\n\n1.0,0.0,1\n";
        let ds = parse_vectors_csv(text, "toy").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.labels(), &[0, 1, 1]);
        assert_eq!(ds.num_classes(), 2);
        assert!(parse_vectors_csv("1.0,oops,0\n", "bad").is_err());
        assert!(parse_vectors_csv("1.0,2.0,0\n1.0,1\n", "ragged").is_err());
        assert!(parse_vectors_csv("", "empty").is_err());
    }

    #[test]
    fn csv_export_is_lossless() {
        let ds = gen_two_moons(40, 0.08, 3).unwrap();
        let text = write_vectors_csv(&ds).unwrap();
        let back = parse_vectors_csv(&text, "two_moons").unwrap();
        assert_eq!(back.labels(), ds.labels());
        let (Inputs::Vectors(a), Inputs::Vectors(b)) = (ds.inputs(), back.inputs()) else {
            panic!("vector inputs expected");
        };
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let imgs = vec![Image::new(2, 2, 1, vec![0.0, 0.5, 0.5, 1.0]).unwrap()];
        let raster = Dataset::new("img", Inputs::Images(imgs), vec![0], 1).unwrap();
        assert!(write_vectors_csv(&raster).is_err());
    }

    #[test]
    fn raster_round_trip() {
        let imgs = vec![
            Image::new(2, 2, 1, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap(),
            Image::new(2, 2, 1, vec![1.0, 0.5, 0.25, 0.0]).unwrap(),
        ];
        let ds = Dataset::new("toy", Inputs::Images(imgs), vec![0, 1], 2).unwrap();
        let bytes = write_raster(&ds).unwrap();
        let back = parse_raster(&bytes, "toy").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.labels(), ds.labels());
        // Pixels survive 8-bit quantization within half a level.
        for i in 0..2 {
            for (a, b) in back.flat_input(i).iter().zip(ds.flat_input(i)) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(parse_raster(&corrupt, "toy").is_err());
        corrupt = bytes.clone();
        corrupt.pop();
        assert!(parse_raster(&corrupt, "toy").is_err());
    }

    #[test]
    fn dataset_invariants() {
        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(Dataset::new("d", Inputs::Vectors(t.clone()), vec![0], 2).is_err());
        assert!(Dataset::new("d", Inputs::Vectors(t.clone()), vec![0, 5], 2).is_err());
        let ok = Dataset::new("d", Inputs::Vectors(t), vec![0, 1], 2).unwrap();
        let sub = ok.subset(&[1], "s").unwrap();
        assert_eq!(sub.labels(), &[1]);
        assert!(ok.subset(&[7], "s").is_err());
    }
}
