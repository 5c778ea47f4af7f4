//! Class-incremental streams: datasets, the splitter, the online minibatch
//! cursor, vector augmentations and the i.i.d. epoch schedule.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DATASET_MAGIC: &[u8; 8] = b"CLADSET1";
pub const HOLDOUT_FRACTION: f64 = 0.1;

/// Labeled vectors. Labels are used only to build splits and to probe.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let inputs = inputs.as_matrix();
        if inputs.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} rows but {} labels", inputs.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if labels.len() < class_count {
            return Err(Error::InvalidArgument(format!(
                "{} samples cannot cover {class_count} classes",
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn rows(&self, indices: &[usize]) -> Tensor {
        self.inputs.select_rows(indices)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Layout: magic, then `N`, `d`, `class_count` as u64, the `N×d` inputs
    /// as f64 and the `N` labels as u64 (all little-endian), then a CRC-32
    /// of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(8 + 24 + 8 * n * (self.dim() + 1) + 4);
        out.extend_from_slice(DATASET_MAGIC);
        for v in [n, self.dim(), self.class_count] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for x in self.inputs.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 24 + 4 {
            return Err(Error::Format(
                "dataset file truncated before header end".into(),
            ));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let (n, d, classes) = (word(8) as usize, word(16) as usize, word(24) as usize);
        let payload = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(n))
            .and_then(|w| w.checked_mul(8))
            .ok_or_else(|| Error::Format("dataset header sizes overflow".into()))?;
        let expected = 32 + payload + 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "dataset file has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
        if crc32fast::hash(&bytes[..expected - 4]) != stored {
            return Err(Error::Format("dataset checksum mismatch".into()));
        }
        let inputs: Vec<f64> = (0..n * d)
            .map(|i| f64::from_le_bytes(bytes[32 + 8 * i..40 + 8 * i].try_into().unwrap()))
            .collect();
        let base = 32 + 8 * n * d;
        let labels: Vec<usize> = (0..n).map(|i| word(base + 8 * i) as usize).collect();
        Dataset::new(Tensor::new(vec![n, d], inputs)?, labels, classes)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

/// Parameters of the Gaussian-cluster benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub d: usize,
    pub sep: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            per_class: 100,
            d: 32,
            sep: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        make_synthetic(self.classes, self.per_class, self.d, self.sep, self.seed)
    }

    pub fn descriptor(&self) -> String {
        format!(
            "synthetic:classes={},per_class={},d={},sep={},seed={}",
            self.classes, self.per_class, self.d, self.sep, self.seed
        )
    }
}

/// Where a dataset comes from: a generated benchmark or a file.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    File(std::path::PathBuf),
}

impl DatasetSource {
    /// `synthetic:classes=20,per_class=100,d=32,sep=6,seed=0` (any subset of
    /// keys, the rest defaulted) or a path to a dataset file.
    pub fn parse(descriptor: &str) -> Result<Self> {
        let Some(rest) = descriptor
            .strip_prefix("synthetic:")
            .or_else(|| (descriptor == "synthetic").then_some(""))
        else {
            return Ok(DatasetSource::File(descriptor.into()));
        };
        let mut spec = SyntheticSpec::default();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::config("dataset", format!("expected key=value, got `{part}`"))
            })?;
            let bad =
                |_| Error::config(format!("dataset.{key}"), format!("cannot parse `{value}`"));
            match key {
                "classes" => spec.classes = value.parse().map_err(bad)?,
                "per_class" => spec.per_class = value.parse().map_err(bad)?,
                "d" => spec.d = value.parse().map_err(bad)?,
                "seed" => spec.seed = value.parse().map_err(bad)?,
                "sep" => {
                    spec.sep = value.parse().map_err(|_| {
                        Error::config("dataset.sep", format!("cannot parse `{value}`"))
                    })?
                }
                other => {
                    return Err(Error::config(
                        format!("dataset.{other}"),
                        "unknown synthetic key",
                    ))
                }
            }
        }
        Ok(DatasetSource::Synthetic(spec))
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(s) => s.generate(),
            DatasetSource::File(p) => Dataset::load(p),
        }
    }
}

/// Gaussian clusters with unit within-class variance. Class means sit at
/// `(sep/√2)·q_i` for orthonormal `q_i`, so every pair is `sep` apart.
pub fn make_synthetic(
    class_count: usize,
    per_class: usize,
    d: usize,
    cluster_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count == 0 || per_class == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs classes and samples".into(),
        ));
    }
    if d < class_count {
        return Err(Error::InvalidArgument(format!(
            "d = {d} cannot hold {class_count} orthonormal class directions"
        )));
    }
    if !(cluster_sep >= 0.0) || !cluster_sep.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cluster separation {cluster_sep} must be non-negative"
        )));
    }
    let mut rng = rng::derive(seed, "synthetic");
    let frame = orthonormal_frame(class_count, d, &mut rng);
    let radius = cluster_sep / std::f64::consts::SQRT_2;
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, q) in frame.iter().enumerate() {
        for _ in 0..per_class {
            for &qk in q {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(radius * qk + e);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, class_count)
}

/// The class means [`make_synthetic`] uses for a given seed.
pub fn synthetic_means(class_count: usize, d: usize, cluster_sep: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::derive(seed, "synthetic");
    let radius = cluster_sep / std::f64::consts::SQRT_2;
    orthonormal_frame(class_count, d, &mut rng)
        .into_iter()
        .map(|q| q.into_iter().map(|v| v * radius).collect())
        .collect()
}

fn orthonormal_frame(k: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        // two Gram-Schmidt sweeps for numerical orthogonality
        for _ in 0..2 {
            for q in &frame {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            frame.push(v);
        }
    }
    frame
}

/// One class-partition of the training split, in stream order.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub classes: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Experiences plus the per-class stratified holdout used for probing.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassIncrementalSplit {
    pub experiences: Vec<Experience>,
    pub holdout: Vec<usize>,
}

impl ClassIncrementalSplit {
    /// Training-split indices in stream order.
    pub fn train_indices(&self) -> Vec<usize> {
        self.experiences
            .iter()
            .flat_map(|e| e.indices.iter().copied())
            .collect()
    }

    pub fn train_len(&self) -> usize {
        self.experiences.iter().map(|e| e.indices.len()).sum()
    }
}

/// Partitions the classes into `t` shuffled groups (sizes differ by at most
/// one) and holds out 10% of each class.
pub fn split_class_incremental(
    dataset: &Dataset,
    t: usize,
    seed: u64,
) -> Result<ClassIncrementalSplit> {
    let classes = dataset.class_count();
    if t == 0 || classes < t {
        return Err(Error::InvalidArgument(format!(
            "cannot split {classes} classes into {t} experiences"
        )));
    }
    let mut rng = rng::derive(seed, "split");
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut holdout = Vec::new();
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let keep_out = (members.len() as f64 * HOLDOUT_FRACTION).round() as usize;
        holdout.extend(members.drain(..keep_out.min(members.len())));
    }
    holdout.sort_unstable();

    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    let (base, extra) = (classes / t, classes % t);
    let mut experiences = Vec::with_capacity(t);
    let mut at = 0;
    for e in 0..t {
        let size = base + usize::from(e < extra);
        let mut group: Vec<usize> = order[at..at + size].to_vec();
        at += size;
        group.sort_unstable();
        let mut indices: Vec<usize> = group
            .iter()
            .flat_map(|&c| by_class[c].iter().copied())
            .collect();
        indices.shuffle(&mut rng);
        experiences.push(Experience {
            classes: group,
            indices,
        });
    }
    Ok(ClassIncrementalSplit {
        experiences,
        holdout,
    })
}

/// Online schedule over a split.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPlan {
    pub experiences: Vec<Experience>,
    pub b_s: usize,
    pub n_p: usize,
    pub boundaries_visible: bool,
}

impl StreamPlan {
    pub fn new(
        split: &ClassIncrementalSplit,
        b_s: usize,
        n_p: usize,
        boundaries_visible: bool,
    ) -> Result<Self> {
        if b_s == 0 || n_p == 0 {
            return Err(Error::InvalidArgument(
                "b_s and n_p must be positive".into(),
            ));
        }
        Ok(Self {
            experiences: split.experiences.clone(),
            b_s,
            n_p,
            boundaries_visible,
        })
    }

    pub fn train_len(&self) -> usize {
        self.experiences.iter().map(|e| e.indices.len()).sum()
    }

    pub fn cursor(&self) -> StreamCursor<'_> {
        StreamCursor {
            plan: self,
            experience: 0,
            offset: 0,
        }
    }

    /// Stream minibatches in the whole plan.
    pub fn minibatch_count(&self) -> usize {
        self.experiences
            .iter()
            .map(|e| e.indices.len().div_ceil(self.b_s))
            .sum()
    }
}

/// One stream minibatch. `experience` is for the harness (logging and
/// probing); strategies only ever receive `x`.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub x: Tensor,
    pub indices: Vec<usize>,
    pub experience: usize,
    pub closes_experience: bool,
}

/// Proof that the stream exposes boundaries; required by boundary-aware
/// strategies to take snapshots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryToken {
    pub experience: usize,
}

#[derive(Clone, Debug)]
pub struct StreamCursor<'a> {
    plan: &'a StreamPlan,
    experience: usize,
    offset: usize,
}

impl StreamCursor<'_> {
    pub fn position(&self) -> (usize, usize) {
        (self.experience, self.offset)
    }

    /// Repositions the cursor, e.g. after restoring a checkpoint.
    pub fn seek(&mut self, experience: usize, offset: usize) -> Result<()> {
        let valid = experience < self.plan.experiences.len()
            && offset <= self.plan.experiences[experience].indices.len()
            || experience == self.plan.experiences.len() && offset == 0;
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "cursor position ({experience}, {offset}) out of range"
            )));
        }
        self.experience = experience;
        self.offset = offset;
        Ok(())
    }

    pub fn is_exhausted(&self) -> bool {
        self.experience >= self.plan.experiences.len()
    }

    pub fn next_minibatch(&mut self, dataset: &Dataset) -> Result<Minibatch> {
        while self.experience < self.plan.experiences.len()
            && self.offset >= self.plan.experiences[self.experience].indices.len()
        {
            self.experience += 1;
            self.offset = 0;
        }
        let Some(exp) = self.plan.experiences.get(self.experience) else {
            return Err(Error::EndOfStream);
        };
        let end = (self.offset + self.plan.b_s).min(exp.indices.len());
        let indices = exp.indices[self.offset..end].to_vec();
        let experience = self.experience;
        self.offset = end;
        let closes_experience = end == exp.indices.len();
        if closes_experience {
            self.experience += 1;
            self.offset = 0;
        }
        Ok(Minibatch {
            x: dataset.rows(&indices),
            indices,
            experience,
            closes_experience,
        })
    }

    /// Boundary information, available only on boundary-visible plans.
    pub fn boundary_token(&self, closed: &Minibatch) -> Result<Option<BoundaryToken>> {
        if !self.plan.boundaries_visible {
            return Err(Error::Protocol(
                "task boundaries are hidden on this stream".into(),
            ));
        }
        Ok(closed.closes_experience.then_some(BoundaryToken {
            experience: closed.experience,
        }))
    }
}

/// Vector augmentations: per-sample scale jitter, element masking and
/// additive Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub noise_sigma: f64,
    pub mask_fraction: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            mask_fraction: 0.2,
            scale_min: 0.8,
            scale_max: 1.2,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_fraction: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma >= 0.0
            && (0.0..1.0).contains(&self.mask_fraction)
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.scale_max.is_finite()
            && self.noise_sigma.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid augmentation policy {self:?}"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor, rng: &mut Rng) -> Tensor {
        let mut out = x.as_matrix();
        let d = out.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            if self.scale_min != 1.0 || self.scale_max != 1.0 {
                let s = if self.scale_min == self.scale_max {
                    self.scale_min
                } else {
                    rng.random_range(self.scale_min..self.scale_max)
                };
                row.iter_mut().for_each(|v| *v *= s);
            }
            if self.mask_fraction > 0.0 {
                for v in row.iter_mut() {
                    if rng.random::<f64>() < self.mask_fraction {
                        *v = 0.0;
                    }
                }
            }
            if self.noise_sigma > 0.0 {
                for v in row.iter_mut().take(d) {
                    let e: f64 = StandardNormal.sample(rng);
                    *v += self.noise_sigma * e;
                }
            }
        }
        out
    }
}

/// Two independent augmented views of `x`.
pub fn make_views(x: &Tensor, policy: &AugmentationPolicy, rng: &mut Rng) -> (Tensor, Tensor) {
    let a = policy.apply(x, rng);
    let b = policy.apply(x, rng);
    (a, b)
}

/// Epoch-reshuffled minibatches of exactly `b` indices; the incomplete final
/// batch of each epoch is dropped. Unbounded when `n_epochs` is `None`.
#[derive(Clone, Debug)]
pub struct IidSchedule {
    n: usize,
    b: usize,
    n_epochs: Option<usize>,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl IidSchedule {
    pub fn new(n: usize, b: usize, n_epochs: Option<usize>, rng: Rng) -> Result<Self> {
        if b == 0 || b > n {
            return Err(Error::InvalidArgument(format!(
                "i.i.d. batch {b} must be in 1..={n}"
            )));
        }
        Ok(Self {
            n,
            b,
            n_epochs,
            epoch: 0,
            order: Vec::new(),
            pos: usize::MAX,
            rng,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.b
    }
}

impl Iterator for IidSchedule {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos == usize::MAX || self.pos + self.b > self.n {
            if self.pos != usize::MAX {
                self.epoch += 1;
            }
            if self.n_epochs.is_some_and(|e| self.epoch >= e) {
                return None;
            }
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + self.b].to_vec();
        self.pos += self.b;
        Some(batch)
    }
}

pub fn iid_schedule(n: usize, b: usize, n_epochs: usize, rng: Rng) -> Result<IidSchedule> {
    IidSchedule::new(n, b, Some(n_epochs), rng)
}
