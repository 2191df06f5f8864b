//! Subject-level cross-validation and grid search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::mean_std;
use super::train::{evaluate, train, Evaluation, History, MetricKind, TrainConfig};
use super::{HarnessError, Result};
use crate::interp::Scheme;
use crate::models::{Model, ModelConfig, ModelKind, TaskSpec};
use crate::preprocess::{prepare, CausalMode, Impute, PreprocessConfig, RawSubject, Standardizer};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.validate()?;
        self.model.check_preprocess(&self.preprocess)?;
        self.task.validate()?;
        if self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return Err(HarnessError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one train/evaluate cycle.
pub struct RunOutcome {
    pub model: Model,
    pub standardizer: Standardizer,
    pub history: History,
    pub evaluation: Option<Evaluation>,
}

/// Preprocesses with statistics from `train_raw`, trains, and evaluates on
/// `test_raw` when it is non-empty.
pub fn train_and_evaluate(train_raw: &[RawSubject], test_raw: &[RawSubject], run: &RunConfig) -> Result<RunOutcome> {
    run.validate()?;
    let (standardizer, tr, te) = prepare(train_raw, test_raw, &run.preprocess)?;
    let (model, history) = train(run.model, run.task, &tr, te.as_ref(), &run.train)?;
    let evaluation = te
        .as_ref()
        .map(|te| evaluate(&model, te, run.train.eval_batch_size))
        .transpose()?;
    Ok(RunOutcome {
        model,
        standardizer,
        history,
        evaluation,
    })
}

/// Seeded partition of `0..n` into `k` held-out folds of near-equal size.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(HarnessError::Folds { subjects: n, folds: k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: MetricKind,
    pub folds: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
}

impl MetricsReport {
    pub fn from_folds(metric: MetricKind, folds: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&folds);
        Self {
            metric,
            folds,
            mean,
            std,
        }
    }
}

/// Trains on `k - 1` folds and scores the held-out one, for every fold.
/// Fold `f` initialises its model with `seed + f`.
pub fn cross_validate(raw: &[RawSubject], run: &RunConfig, folds: usize, seed: u64) -> Result<MetricsReport> {
    run.validate()?;
    let parts = kfold(raw.len(), folds, seed)?;
    let values = parts
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let mut is_test = vec![false; raw.len()];
            for &i in held {
                is_test[i] = true;
            }
            let (test, train_set): (Vec<_>, Vec<_>) = raw.iter().cloned().enumerate().partition(|(i, _)| is_test[*i]);
            let test: Vec<RawSubject> = test.into_iter().map(|(_, s)| s).collect();
            let train_set: Vec<RawSubject> = train_set.into_iter().map(|(_, s)| s).collect();
            let mut r = run.clone();
            r.train.seed = seed.wrapping_add(f as u64);
            let out = train_and_evaluate(&train_set, &test, &r)?;
            Ok(out.evaluation.expect("held-out fold is non-empty").value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MetricsReport::from_folds(MetricKind::for_task(run.task), values))
}

/// One point of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub kind: ModelKind,
    pub latent: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_head: f64,
    pub scheme: Scheme,
    pub causal: CausalMode,
    pub standardize: bool,
    pub impute: Impute,
}

impl GridCell {
    fn of(run: &RunConfig) -> Self {
        Self {
            kind: run.model.kind,
            latent: run.model.latent,
            hidden: run.model.hidden,
            batch_size: run.train.batch_size,
            lr: run.train.adam.lr_dynamics,
            lr_head: run.train.adam.lr_head,
            scheme: run.preprocess.scheme,
            causal: run.preprocess.causal,
            standardize: run.preprocess.standardize,
            impute: run.preprocess.impute,
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut r = base.clone();
        r.model.kind = self.kind;
        r.model.latent = self.latent;
        r.model.hidden = self.hidden;
        r.train.batch_size = self.batch_size;
        let a = &mut r.train.adam;
        a.lr_embedding = self.lr;
        a.lr_update = self.lr;
        a.lr_dynamics = self.lr;
        a.lr_decoder = self.lr;
        a.lr_head = self.lr_head;
        r.preprocess.scheme = self.scheme;
        r.preprocess.causal = self.causal;
        r.preprocess.standardize = self.standardize;
        r.preprocess.impute = self.impute;
        r
    }
}

/// Candidate values per axis; an absent axis keeps the base value. Recti
/// schemes always run with the recti transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub schema_version: u32,
    pub base: RunConfig,
    pub folds: usize,
    pub seed: u64,
    pub kind: Option<Vec<ModelKind>>,
    pub latent: Option<Vec<usize>>,
    pub hidden: Option<Vec<usize>>,
    pub batch_size: Option<Vec<usize>>,
    pub lr: Option<Vec<f64>>,
    pub lr_head: Option<Vec<f64>>,
    pub scheme: Option<Vec<Scheme>>,
    pub causal: Option<Vec<CausalMode>>,
    pub standardize: Option<Vec<bool>>,
    pub impute: Option<Vec<Impute>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            base: RunConfig::default(),
            folds: 10,
            seed: 0,
            kind: None,
            latent: None,
            hidden: None,
            batch_size: None,
            lr: None,
            lr_head: None,
            scheme: None,
            causal: None,
            standardize: None,
            impute: None,
        }
    }
}

fn axis<T: Copy>(name: &str, v: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
    match v {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(HarnessError::EmptyGrid(name.to_string())),
        Some(v) => Ok(v.clone()),
    }
}

impl GridConfig {
    /// Cartesian product of the axes in a fixed order.
    pub fn cells(&self) -> Result<Vec<GridCell>> {
        let b = GridCell::of(&self.base);
        let kinds = axis("kind", &self.kind, b.kind)?;
        let latents = axis("latent", &self.latent, b.latent)?;
        let hiddens = axis("hidden", &self.hidden, b.hidden)?;
        let batch_sizes = axis("batch_size", &self.batch_size, b.batch_size)?;
        let lrs = axis("lr", &self.lr, b.lr)?;
        let lr_heads = axis("lr_head", &self.lr_head, b.lr_head)?;
        let schemes = axis("scheme", &self.scheme, b.scheme)?;
        let causals = axis("causal", &self.causal, b.causal)?;
        let stds = axis("standardize", &self.standardize, b.standardize)?;
        let imputes = axis("impute", &self.impute, b.impute)?;
        let mut cells = Vec::new();
        for &kind in &kinds {
            for &latent in &latents {
                for &hidden in &hiddens {
                    for &batch_size in &batch_sizes {
                        for &lr in &lrs {
                            for &lr_head in &lr_heads {
                                for &scheme in &schemes {
                                    for &causal in &causals {
                                        for &standardize in &stds {
                                            for &impute in &imputes {
                                                let causal = if scheme.is_recti() { CausalMode::Recti } else { causal };
                                                cells.push(GridCell {
                                                    kind,
                                                    latent,
                                                    hidden,
                                                    batch_size,
                                                    lr,
                                                    lr_head,
                                                    scheme,
                                                    causal,
                                                    standardize,
                                                    impute,
                                                });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// 1-based rank; failed cells are unranked.
    pub rank: Option<usize>,
    pub cell: GridCell,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub schema_version: u32,
    pub metric: MetricKind,
    pub folds: usize,
    pub seed: u64,
    pub rows: Vec<GridRow>,
}

/// Cross-validates every cell. A failing cell is reported with its error
/// instead of aborting the search. Rows are sorted best first (ascending
/// for RMSE, descending otherwise), failed cells last.
pub fn grid_search(raw: &[RawSubject], grid: &GridConfig) -> Result<GridReport> {
    let cells = grid.cells()?;
    let metric = MetricKind::for_task(grid.base.task);
    let mut rows: Vec<GridRow> = cells
        .par_iter()
        .map(|cell| match cross_validate(raw, &cell.apply(&grid.base), grid.folds, grid.seed) {
            Ok(r) => GridRow {
                rank: None,
                cell: *cell,
                report: Some(r),
                error: None,
            },
            Err(e) => GridRow {
                rank: None,
                cell: *cell,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let key = |r: &GridRow| -> f64 {
        match &r.report {
            Some(rep) if rep.mean.is_finite() => {
                if metric.lower_is_better() {
                    rep.mean
                } else {
                    -rep.mean
                }
            }
            _ => f64::INFINITY,
        }
    };
    rows.sort_by(|a, b| key(a).total_cmp(&key(b)));
    let mut rank = 0;
    for r in &mut rows {
        if r.report.is_some() {
            rank += 1;
            r.rank = Some(rank);
        }
    }
    Ok(GridReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metric,
        folds: grid.folds,
        seed: grid.seed,
        rows,
    })
}

/// Markdown table of the axes that vary across rows plus `mean ± std`.
pub fn render_table(report: &GridReport) -> String {
    type Col = (&'static str, fn(&GridCell) -> String);
    let cols: [Col; 10] = [
        ("model", |c| c.kind.to_string()),
        ("latent", |c| c.latent.to_string()),
        ("hidden", |c| c.hidden.to_string()),
        ("batch", |c| c.batch_size.to_string()),
        ("lr", |c| c.lr.to_string()),
        ("lr_head", |c| c.lr_head.to_string()),
        ("scheme", |c| c.scheme.to_string()),
        ("causal", |c| c.causal.as_str().to_string()),
        ("standardize", |c| c.standardize.to_string()),
        ("impute", |c| format!("{:?}", c.impute).to_lowercase()),
    ];
    let shown: Vec<&Col> = cols
        .iter()
        .filter(|(name, f)| {
            *name == "model" || report.rows.iter().any(|r| f(&r.cell) != f(&report.rows[0].cell))
        })
        .collect();
    let mut out = String::from("| rank |");
    for (name, _) in &shown {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str(&format!(" {} (mean ± std, {} folds) |\n|---|", report.metric.as_str(), report.folds));
    out.push_str(&"---|".repeat(shown.len() + 1));
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!("| {} |", r.rank.map_or("-".to_string(), |k| k.to_string())));
        for (_, f) in &shown {
            out.push_str(&format!(" {} |", f(&r.cell)));
        }
        match (&r.report, &r.error) {
            (Some(rep), _) => out.push_str(&format!(" {:.4} ± {:.4} |\n", rep.mean, rep.std)),
            (None, Some(e)) => out.push_str(&format!(" failed: {e} |\n")),
            (None, None) => out.push_str(" - |\n"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kfold_partitions() {
        let folds = kfold(10, 5, 3).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 2));
        assert_eq!(folds, kfold(10, 5, 3).unwrap());
        assert!(matches!(kfold(3, 5, 0), Err(HarnessError::Folds { .. })));
        assert!(kfold(5, 1, 0).is_err());
    }

    #[test]
    fn grid_cells_product_and_recti_pairing() {
        let g = GridConfig {
            scheme: Some(Scheme::ALL.to_vec()),
            standardize: Some(vec![true, false]),
            ..GridConfig::default()
        };
        let cells = g.cells().unwrap();
        assert_eq!(cells.len(), 12);
        for c in &cells {
            assert_eq!(c.scheme.is_recti(), c.causal == CausalMode::Recti);
        }
        let bad = GridConfig {
            latent: Some(vec![]),
            ..GridConfig::default()
        };
        assert!(matches!(bad.cells(), Err(HarnessError::EmptyGrid(_))));
    }
}
