//! Turning raw irregular subjects into padded, causal, interpolated datasets.
//!
//! Per subject: standardise, impute context with 0, count observations,
//! concatenate `(x, o, t)`, apply the causal transform, pad, then fit the
//! control signal once.

mod transform;

pub use transform::{copy_expand, recti_expand, StepRow};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::interp::{build_control_signal, ChannelRole, ControlSignal, InterpError, Scheme};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("empty dataset")]
    Empty,
    #[error("subject {0} has no rows")]
    EmptySubject(String),
    #[error("subject {id}: times must be strictly increasing (row {row})")]
    UnsortedTimes { id: String, row: usize },
    #[error("subject {id}: expected {expected} features, found {found}")]
    Width {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("target length {target} is shorter than subject length {len}")]
    PadTooShort { target: usize, len: usize },
    #[error("feature column {0} is never observed")]
    AllMissingFeature(usize),
    #[error("copy expansion would produce {rows} rows, above the cap of {cap}")]
    CapExceeded { rows: usize, cap: usize },
    #[error("scheme {scheme} is incompatible with causal mode {mode:?}")]
    SchemeMode { scheme: Scheme, mode: CausalMode },
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error(transparent)]
    Interp(#[from] InterpError),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// One timestamped observation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub t: f64,
    pub features: Vec<Option<f64>>,
    pub label: Option<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSubject {
    pub id: String,
    pub context: Vec<Option<f64>>,
    pub rows: Vec<Row>,
}

impl RawSubject {
    pub fn n_features(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(PreprocessError::EmptySubject(self.id.clone()));
        }
        let f = self.n_features();
        for (i, r) in self.rows.iter().enumerate() {
            if r.features.len() != f {
                return Err(PreprocessError::Width {
                    id: self.id.clone(),
                    expected: f,
                    found: r.features.len(),
                });
            }
            if i > 0 && !(r.t > self.rows[i - 1].t) {
                return Err(PreprocessError::UnsortedTimes {
                    id: self.id.clone(),
                    row: i,
                });
            }
        }
        Ok(())
    }
}

/// Per-column mean and standard deviation over observed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub context_mean: Vec<f64>,
    pub context_std: Vec<f64>,
}

fn column_stats(cols: usize, values: impl Iterator<Item = (usize, f64)>) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // Welford, in input order, so the fit is deterministic
    let mut n = vec![0usize; cols];
    let mut mean = vec![0.0; cols];
    let mut m2 = vec![0.0; cols];
    for (j, v) in values {
        n[j] += 1;
        let d = v - mean[j];
        mean[j] += d / n[j] as f64;
        m2[j] += d * (v - mean[j]);
    }
    let std = (0..cols)
        .map(|j| {
            if n[j] < 2 {
                return 1.0;
            }
            let s = (m2[j] / n[j] as f64).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std, n)
}

impl Standardizer {
    pub fn identity(n_features: usize, n_context: usize) -> Self {
        Self {
            feature_mean: vec![0.0; n_features],
            feature_std: vec![1.0; n_features],
            context_mean: vec![0.0; n_context],
            context_std: vec![1.0; n_context],
        }
    }

    /// Population statistics over the observed entries of `train`.
    pub fn fit(train: &[RawSubject]) -> Result<Self> {
        let first = train.first().ok_or(PreprocessError::Empty)?;
        let nf = first.n_features();
        let nc = first.context.len();
        let feats = train.iter().flat_map(|s| {
            s.rows.iter().flat_map(|r| {
                r.features
                    .iter()
                    .enumerate()
                    .filter_map(|(j, v)| v.map(|x| (j, x)))
            })
        });
        let (feature_mean, feature_std, fn_) = column_stats(nf, feats);
        let ctx = train.iter().flat_map(|s| {
            s.context
                .iter()
                .enumerate()
                .filter_map(|(j, v)| v.map(|x| (j, x)))
        });
        let (context_mean, context_std, cn) = column_stats(nc, ctx);
        for (j, &n) in fn_.iter().enumerate() {
            if n == 0 {
                warn!("feature {j} is never observed in the training split; using mean 0, std 1");
            }
        }
        for (j, &n) in cn.iter().enumerate() {
            if n == 0 {
                warn!("context {j} is never observed in the training split; using mean 0, std 1");
            }
        }
        Ok(Self {
            feature_mean,
            feature_std,
            context_mean,
            context_std,
        })
    }

    /// Standardises observed values; missing markers are kept. Context is
    /// left missing here and imputed by [`impute_context`].
    pub fn apply(&self, s: &RawSubject) -> RawSubject {
        let z = |v: Option<f64>, m: f64, sd: f64| v.map(|x| (x - m) / sd);
        RawSubject {
            id: s.id.clone(),
            context: s
                .context
                .iter()
                .enumerate()
                .map(|(j, &v)| z(v, self.context_mean[j], self.context_std[j]))
                .collect(),
            rows: s
                .rows
                .iter()
                .map(|r| Row {
                    t: r.t,
                    features: r
                        .features
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| z(v, self.feature_mean[j], self.feature_std[j]))
                        .collect(),
                    label: r.label,
                    weight: r.weight,
                })
                .collect(),
        }
    }
}

/// Missing context entries become 0 (the standardised mean).
pub fn impute_context(context: &[Option<f64>]) -> Vec<f64> {
    context.iter().map(|v| v.unwrap_or(0.0)).collect()
}

/// Per-feature cumulative observation counts.
pub fn observation_counts(rows: &[Row]) -> Vec<Vec<f64>> {
    let nf = rows.first().map_or(0, |r| r.features.len());
    let mut acc = vec![0.0; nf];
    rows.iter()
        .map(|r| {
            for (a, v) in acc.iter_mut().zip(&r.features) {
                if v.is_some() {
                    *a += 1.0;
                }
            }
            acc.clone()
        })
        .collect()
}

/// Builds the concatenated `(x, o, t)` step rows of a standardised subject.
pub fn to_step_rows(s: &RawSubject) -> Vec<StepRow> {
    let counts = observation_counts(&s.rows);
    s.rows
        .iter()
        .zip(counts)
        .map(|(r, o)| {
            let (label, weight) = match r.label {
                Some(y) => (y, r.weight),
                None => (0.0, 0.0),
            };
            StepRow {
                x: r.features.clone(),
                o,
                t: r.t,
                label,
                weight,
            }
        })
        .collect()
}

/// Pads to `target` rows: features missing, counts and time held at their
/// last values, labels and weights 0. Returns the padded rows and the
/// update mask (1 on real rows).
pub fn pad_and_count(rows: &[StepRow], target: usize) -> Result<(Vec<StepRow>, Vec<f64>)> {
    let len = rows.len();
    if target < len {
        return Err(PreprocessError::PadTooShort { target, len });
    }
    let last = rows.last().ok_or(PreprocessError::Empty)?;
    let fill = StepRow {
        x: vec![None; last.x.len()],
        o: last.o.clone(),
        t: last.t,
        label: 0.0,
        weight: 0.0,
    };
    let mut out = rows.to_vec();
    out.resize(target, fill);
    let mut mask = vec![1.0; len];
    mask.resize(target, 0.0);
    Ok((out, mask))
}

/// `u_i = 1` on the first `real_len` steps and 0 on padding.
pub fn build_update_mask(real_len: usize, padded_len: usize) -> Vec<f64> {
    (0..padded_len)
        .map(|i| if i < real_len { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalMode {
    /// One copy per timestep with the future frozen.
    Copy,
    /// Length `2n - 1` fill-forward series.
    Recti,
    /// No transform; only for models that are causal by construction.
    None,
}

impl CausalMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(CausalMode::Copy),
            "recti" => Some(CausalMode::Recti),
            "none" => Some(CausalMode::None),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CausalMode::Copy => "copy",
            CausalMode::Recti => "recti",
            CausalMode::None => "none",
        }
    }
}

/// How missing feature values are filled before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impute {
    Interpolate,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub scheme: Scheme,
    pub causal: CausalMode,
    pub standardize: bool,
    pub impute: Impute,
    /// Upper bound on `copies * padded_length` under copy expansion.
    pub max_rows: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Hermite,
            causal: CausalMode::Copy,
            standardize: true,
            impute: Impute::Interpolate,
            max_rows: 1_000_000,
        }
    }
}

impl PreprocessConfig {
    /// The recti schemes go with the recti transform and nothing else.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.causal {
            CausalMode::Recti => self.scheme.is_recti(),
            CausalMode::Copy | CausalMode::None => !self.scheme.is_recti(),
        };
        if ok {
            Ok(())
        } else {
            Err(PreprocessError::SchemeMode {
                scheme: self.scheme,
                mode: self.causal,
            })
        }
    }
}

/// A model-ready sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedSubject {
    pub id: String,
    /// Which timestep this copy was made for (copy expansion only).
    pub copy_of: Option<usize>,
    pub signal: ControlSignal,
    pub context: Vec<f64>,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
    pub mask: Vec<f64>,
    /// Per-step `(x with missing as 0, t)` for the discrete baseline.
    pub discrete: Vec<Vec<f64>>,
}

impl ProcessedSubject {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<ProcessedSubject>,
    pub n_features: usize,
    pub n_context: usize,
    pub seq_len: usize,
}

impl Dataset {
    /// Number of control-signal channels: features, counts, time.
    pub fn n_channels(&self) -> usize {
        2 * self.n_features + 1
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn signals(&self) -> Vec<ControlSignal> {
        self.subjects.iter().map(|s| s.signal.clone()).collect()
    }
}

pub fn channel_roles(n_features: usize) -> Vec<ChannelRole> {
    let mut roles = vec![ChannelRole::Feature; n_features];
    roles.extend(std::iter::repeat(ChannelRole::Count).take(n_features));
    roles.push(ChannelRole::Time);
    roles
}

fn fit_rows(rows: &[StepRow], scheme: Scheme) -> Result<ControlSignal> {
    let nf = rows[0].x.len();
    let mut channels: Vec<Vec<Option<f64>>> = Vec::with_capacity(2 * nf + 1);
    for j in 0..nf {
        channels.push(rows.iter().map(|r| r.x[j]).collect());
    }
    for j in 0..nf {
        channels.push(rows.iter().map(|r| Some(r.o[j])).collect());
    }
    channels.push(rows.iter().map(|r| Some(r.t)).collect());
    Ok(build_control_signal(&channels, &channel_roles(nf), scheme)?)
}

/// Standardised and context-imputed subject, ready for the causal transform.
fn prepare_subject(s: &RawSubject, st: &Standardizer, cfg: &PreprocessConfig) -> (Vec<StepRow>, Vec<f64>) {
    let s = st.apply(s);
    let context = impute_context(&s.context);
    let mut rows = to_step_rows(&s);
    if cfg.impute == Impute::Zero {
        for r in &mut rows {
            for v in &mut r.x {
                v.get_or_insert(0.0);
            }
        }
    }
    (rows, context)
}

/// Runs the full pipeline on `raw` with an already fitted standardiser.
///
/// `target_len` forces a padded length; by default it is the longest
/// sequence after the causal transform.
pub fn assemble(
    raw: &[RawSubject],
    st: &Standardizer,
    cfg: &PreprocessConfig,
    target_len: Option<usize>,
) -> Result<Dataset> {
    cfg.validate()?;
    let first = raw.first().ok_or(PreprocessError::Empty)?;
    for s in raw {
        s.validate()?;
    }
    let n_features = first.n_features();
    let n_context = first.context.len();

    struct Item {
        id: String,
        copy_of: Option<usize>,
        rows: Vec<StepRow>,
        context: Vec<f64>,
    }
    let mut items = Vec::new();
    for s in raw {
        let (rows, context) = prepare_subject(s, st, cfg);
        match cfg.causal {
            CausalMode::Copy => {
                for (i, c) in copy_expand(&rows).into_iter().enumerate() {
                    items.push(Item {
                        id: s.id.clone(),
                        copy_of: Some(i),
                        rows: c,
                        context: context.clone(),
                    });
                }
            }
            CausalMode::Recti => items.push(Item {
                id: s.id.clone(),
                copy_of: None,
                rows: recti_expand(&rows),
                context,
            }),
            CausalMode::None => items.push(Item {
                id: s.id.clone(),
                copy_of: None,
                rows,
                context,
            }),
        }
    }
    let longest = items.iter().map(|it| it.rows.len()).max().unwrap_or(0);
    let seq_len = target_len.unwrap_or(longest);
    if cfg.causal == CausalMode::Copy && items.len().saturating_mul(seq_len) > cfg.max_rows {
        return Err(PreprocessError::CapExceeded {
            rows: items.len() * seq_len,
            cap: cfg.max_rows,
        });
    }

    let mut subjects = Vec::with_capacity(items.len());
    for it in items {
        let (rows, mask) = pad_and_count(&it.rows, seq_len)?;
        let signal = fit_rows(&rows, cfg.scheme)?;
        let discrete = rows
            .iter()
            .map(|r| {
                let mut v: Vec<f64> = r.x.iter().map(|x| x.unwrap_or(0.0)).collect();
                v.push(r.t);
                v
            })
            .collect();
        subjects.push(ProcessedSubject {
            id: it.id,
            copy_of: it.copy_of,
            signal,
            context: it.context,
            labels: rows.iter().map(|r| r.label).collect(),
            weights: rows.iter().map(|r| r.weight).collect(),
            mask,
            discrete,
        });
    }
    Ok(Dataset {
        subjects,
        n_features,
        n_context,
        seq_len,
    })
}

/// Seeded subject-level split; returns `(train, test)` indices.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_test = n_test.min(n.saturating_sub(1));
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

/// Fits the standardiser on `train` (or uses the identity when
/// standardisation is off) and assembles both splits.
pub fn prepare(
    train: &[RawSubject],
    test: &[RawSubject],
    cfg: &PreprocessConfig,
) -> Result<(Standardizer, Dataset, Option<Dataset>)> {
    let first = train.first().ok_or(PreprocessError::Empty)?;
    let st = if cfg.standardize {
        Standardizer::fit(train)?
    } else {
        Standardizer::identity(first.n_features(), first.context.len())
    };
    check_observed(train)?;
    let tr = assemble(train, &st, cfg, None)?;
    let te = if test.is_empty() {
        None
    } else {
        Some(assemble(test, &st, cfg, None)?)
    };
    Ok((st, tr, te))
}

/// Errors when some feature column has no observation anywhere.
pub fn check_observed(subjects: &[RawSubject]) -> Result<()> {
    let nf = subjects.first().map_or(0, RawSubject::n_features);
    for j in 0..nf {
        let seen = subjects
            .iter()
            .any(|s| s.rows.iter().any(|r| r.features[j].is_some()));
        if !seen {
            return Err(PreprocessError::AllMissingFeature(j));
        }
    }
    Ok(())
}

/// A minibatch: borrowed subjects sharing one padded length.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub subjects: Vec<&'a ProcessedSubject>,
    pub seq_len: usize,
    pub n_features: usize,
    pub n_context: usize,
}

impl<'a> Batch<'a> {
    pub fn new(ds: &'a Dataset, idx: &[usize]) -> Self {
        Self {
            subjects: idx.iter().map(|&i| &ds.subjects[i]).collect(),
            seq_len: ds.seq_len,
            n_features: ds.n_features,
            n_context: ds.n_context,
        }
    }

    pub fn all(ds: &'a Dataset) -> Self {
        Self::new(ds, &(0..ds.len()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        2 * self.n_features + 1
    }

    /// `[B, n_context]`.
    pub fn context(&self) -> Tensor {
        let data = self.subjects.iter().flat_map(|s| s.context.iter().copied()).collect();
        Tensor::new(vec![self.len(), self.n_context], data).expect("context widths agree")
    }

    /// Update mask at `step` as a `[B, 1]` column.
    pub fn mask_column(&self, step: usize) -> Tensor {
        let data = self.subjects.iter().map(|s| s.mask[step]).collect();
        Tensor::new(vec![self.len(), 1], data).expect("one mask per subject")
    }

    /// Weights flattened step-major (`[L * B]`), matching concatenated
    /// per-step predictions.
    pub fn weights_step_major(&self) -> Tensor {
        let data = (0..self.seq_len)
            .flat_map(|t| self.subjects.iter().map(move |s| s.weights[t]))
            .collect();
        Tensor::vector(data)
    }

    pub fn labels_step_major(&self) -> Vec<f64> {
        (0..self.seq_len)
            .flat_map(|t| self.subjects.iter().map(move |s| s.labels[t]))
            .collect()
    }
}

/// Shuffled partition of `0..n` into batches; the last may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(PreprocessError::BatchSize);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
