mod common;

use common::{dense_solve, random_subjects, rng};
use contseq::harness::{
    auprc, cross_validate, dataset_loss, dims_of, gen_synthetic, grid_search, kfold, train_model, GridConfig,
    HarnessError, MetricKind, RunConfig, SyntheticSpec, TrainConfig,
};
use contseq::interp::Scheme;
use contseq::models::{Model, ModelConfig, ModelKind, TaskSpec};
use contseq::preprocess::{prepare, Batch, CausalMode, PreprocessConfig, RawSubject, Row};
use contseq::tensor::{ParamGroup, Tape};

fn small_run(kind: ModelKind) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = ModelConfig::new(kind, 3, 4);
    run.train.epochs = 2;
    run.train.batch_size = 4;
    run
}

fn dataset(seed: u64, n: usize) -> Vec<RawSubject> {
    random_subjects(&mut rng(seed), n, 2, 1, 2..=4, 0.2)
}

#[test]
fn zero_epochs_leave_initialisation() {
    let raw = dataset(1, 6);
    let (_, ds, _) = prepare(&raw, &[], &PreprocessConfig::default()).unwrap();
    let tc = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let mut model = Model::new(ModelConfig::new(ModelKind::OdeRnn, 3, 4), TaskSpec::Binary, dims_of(&ds), 0).unwrap();
    let before = model.params().clone();
    let hist = train_model(&mut model, &ds, None, &tc).unwrap();
    assert_eq!(model.params(), &before);
    assert_eq!(hist.records.len(), 1);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let raw = dataset(2, 6);
    let (_, ds, _) = prepare(&raw, &[], &PreprocessConfig::default()).unwrap();
    let mut tc = TrainConfig {
        epochs: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let a = &mut tc.adam;
    a.lr_embedding = 0.0;
    a.lr_update = 0.0;
    a.lr_dynamics = 0.0;
    a.lr_decoder = 0.0;
    a.lr_head = 0.0;
    for kind in ModelKind::ALL {
        let mut model = Model::new(ModelConfig::new(kind, 3, 4), TaskSpec::Binary, dims_of(&ds), 0).unwrap();
        let before = model.params().clone();
        train_model(&mut model, &ds, None, &tc).unwrap();
        assert_eq!(model.params(), &before, "{kind}");
    }
}

/// With a vanishing vector field and frozen embedding, the NCDE reduces to
/// a linear regression of the labels on the initial hidden state.
#[test]
fn frozen_ncde_matches_least_squares() {
    let mut r = rng(3);
    let mut raw = random_subjects(&mut r, 5, 1, 1, 3..=3, 0.0);
    for (i, s) in raw.iter_mut().enumerate() {
        for (k, row) in s.rows.iter_mut().enumerate() {
            row.label = Some(((i * 3 + k) as f64 * 0.37).sin() * 2.0);
        }
    }
    let pre = PreprocessConfig::default();
    let (_, ds, _) = prepare(&raw, &[], &pre).unwrap();
    let latent = 2;
    let mut model = Model::new(ModelConfig::new(ModelKind::Ncde, latent, 4), TaskSpec::Regression, dims_of(&ds), 7).unwrap();
    for e in model.params().entries().iter().map(|e| e.name.clone()).collect::<Vec<_>>() {
        if e.starts_with("dynamics.") && e.contains("layer2") {
            let id = model.params().find(&e).unwrap();
            model.params_mut().get_mut(id).data_mut().fill(0.0);
        }
    }
    assert!(model.params().entries().iter().any(|e| e.group == ParamGroup::Dynamics));

    // Initial hidden states, one per sequence.
    let idx: Vec<usize> = (0..ds.len()).collect();
    let batch = Batch::new(&ds, &idx);
    let tape = Tape::new();
    let out = model.forward(&model.params().bind(&tape), &batch).unwrap();
    let h0 = out.hidden[0].value();

    // Normal equations over the weighted rows.
    let p = latent + 1;
    let mut ata = vec![vec![0.0; p]; p];
    let mut atb = vec![0.0; p];
    let mut rows = Vec::new();
    for (b, s) in ds.subjects.iter().enumerate() {
        for step in 0..ds.seq_len {
            let w = s.weights[step];
            if w > 0.0 {
                let mut z = h0.row(b).to_vec();
                z.push(1.0);
                for i in 0..p {
                    atb[i] += w * z[i] * s.labels[step];
                    for j in 0..p {
                        ata[i][j] += w * z[i] * z[j];
                    }
                }
                rows.push((z, s.labels[step], w));
            }
        }
    }
    let beta = dense_solve(ata, atb);
    let (num, den) = rows.iter().fold((0.0, 0.0), |(n, d), (z, y, w)| {
        let pred: f64 = z.iter().zip(&beta).map(|(a, b)| a * b).sum();
        (n + w * (pred - y).powi(2), d + w)
    });
    let optimum = num / den;

    let mut tc = TrainConfig {
        epochs: 3000,
        batch_size: ds.len(),
        ..TrainConfig::default()
    };
    tc.adam.lr_embedding = 0.0;
    tc.adam.lr_dynamics = 0.0;
    tc.adam.lr_head = 0.05;
    let start = dataset_loss(&model, &ds, 256).unwrap();
    train_model(&mut model, &ds, None, &tc).unwrap();
    let end = dataset_loss(&model, &ds, 256).unwrap();
    assert!(start - optimum > 1e-2, "start {start} optimum {optimum}");
    assert!((end - optimum).abs() < 1e-3, "end {end} optimum {optimum}");
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let raw = dataset(4, 6);
    let (_, ds, _) = prepare(&raw, &[], &PreprocessConfig::default()).unwrap();
    let mut model = Model::new(ModelConfig::new(ModelKind::Rnn, 3, 4), TaskSpec::Regression, dims_of(&ds), 0).unwrap();
    let id = model.params().find("head.head.layer0.bias").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let err = train_model(&mut model, &ds, None, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, HarnessError::Divergence { epoch: 1, batch: 0 }), "{err}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let raw = dataset(5, 8);
    let run = small_run(ModelKind::GruOde);
    let a = contseq::harness::train_and_evaluate(&raw[..6], &raw[6..], &run).unwrap();
    let b = contseq::harness::train_and_evaluate(&raw[..6], &raw[6..], &run).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.history, b.history);
}

#[test]
fn kfold_ten_subjects_five_folds() {
    let parts = kfold(10, 5, 3).unwrap();
    assert_eq!(parts.len(), 5);
    let mut seen: Vec<usize> = parts.iter().flatten().copied().collect();
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert!(parts.iter().all(|p| p.len() == 2));
    assert!(matches!(kfold(3, 5, 0), Err(HarnessError::Folds { subjects: 3, folds: 5 })));
    assert!(kfold(10, 1, 0).is_err());
}

#[test]
fn cross_validation_is_reproducible() {
    let raw = dataset(6, 9);
    let run = small_run(ModelKind::Rnn);
    let a = cross_validate(&raw, &run, 3, 11).unwrap();
    let b = cross_validate(&raw, &run, 3, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.folds.len(), 3);
    assert!(cross_validate(&raw[..2], &run, 3, 11).is_err());
}

/// Single-row subjects with identical inputs receive identical predictions,
/// so each fold's AUPRC is the held-out weighted prevalence.
#[test]
fn constant_predictor_fold_metrics_are_prevalence() {
    let labels = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let raw: Vec<RawSubject> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| RawSubject {
            id: format!("c{i}"),
            context: vec![],
            rows: vec![Row {
                t: 0.0,
                features: vec![Some(1.0)],
                label: Some(y),
                weight: 1.0 + (i % 3) as f64,
            }],
        })
        .collect();
    let mut run = small_run(ModelKind::Ncde);
    run.preprocess.standardize = false;
    let folds = 4;
    let seed = (0..)
        .find(|&s| {
            kfold(raw.len(), folds, s)
                .unwrap()
                .iter()
                .all(|held| held.iter().any(|&i| labels[i] == 1.0))
        })
        .unwrap();
    let report = cross_validate(&raw, &run, folds, seed).unwrap();
    let parts = kfold(raw.len(), folds, seed).unwrap();
    for (f, held) in parts.iter().enumerate() {
        let w: Vec<f64> = held.iter().map(|&i| raw[i].rows[0].weight).collect();
        let y: Vec<f64> = held.iter().map(|&i| labels[i]).collect();
        let prevalence = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
        assert!((report.folds[f] - prevalence).abs() < 1e-12, "fold {f}: {} vs {prevalence}", report.folds[f]);
        assert!((auprc(&vec![0.3; y.len()], &y, &w).unwrap() - prevalence).abs() < 1e-12);
    }
}

fn tiny_grid() -> GridConfig {
    let mut base = small_run(ModelKind::Rnn);
    base.train.epochs = 1;
    GridConfig {
        base,
        folds: 3,
        seed: 2,
        ..GridConfig::default()
    }
}

#[test]
fn one_cell_grid_equals_cross_validation() {
    let raw = dataset(7, 9);
    let grid = tiny_grid();
    let report = grid_search(&raw, &grid).unwrap();
    assert_eq!(report.rows.len(), 1);
    let cv = cross_validate(&raw, &grid.base, grid.folds, grid.seed).unwrap();
    assert_eq!(report.rows[0].report.as_ref().unwrap(), &cv);
}

#[test]
fn duplicate_cells_agree_and_ranking_is_oriented() {
    let raw = dataset(8, 9);
    let mut grid = tiny_grid();
    grid.hidden = Some(vec![4, 4, 6]);
    let report = grid_search(&raw, &grid).unwrap();
    let same: Vec<_> = report.rows.iter().filter(|r| r.cell.hidden == 4).collect();
    assert_eq!(same.len(), 2);
    assert_eq!(same[0].report, same[1].report);
    let means: Vec<f64> = report.rows.iter().map(|r| r.report.as_ref().unwrap().mean).collect();
    assert!(means.windows(2).all(|w| w[0] >= w[1]), "AUPRC descending: {means:?}");
    assert_eq!(report.metric, MetricKind::Auprc);

    grid.base.task = TaskSpec::Regression;
    let report = grid_search(&raw, &grid).unwrap();
    let means: Vec<f64> = report.rows.iter().map(|r| r.report.as_ref().unwrap().mean).collect();
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "RMSE ascending: {means:?}");
}

#[test]
fn failed_cells_are_marked_not_fatal() {
    let raw = dataset(9, 9);
    let mut grid = tiny_grid();
    grid.base.model.kind = ModelKind::LatentOde;
    grid.causal = Some(vec![CausalMode::Copy, CausalMode::None]);
    let report = grid_search(&raw, &grid).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows[0].error.is_none());
    assert!(report.rows[1].error.is_some() && report.rows[1].report.is_none());
    assert!(grid_search(
        &raw,
        &GridConfig {
            scheme: Some(vec![]),
            ..tiny_grid()
        }
    )
    .is_err());
}

#[test]
fn grid_report_json_is_byte_identical() {
    let raw = dataset(10, 9);
    let mut grid = tiny_grid();
    grid.scheme = Some(vec![Scheme::Linear, Scheme::Rectilinear]);
    let a = serde_json::to_string(&grid_search(&raw, &grid).unwrap()).unwrap();
    let b = serde_json::to_string(&grid_search(&raw, &grid).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn synthetic_generator_contracts() {
    let spec = SyntheticSpec {
        subjects: 40,
        missingness: 0.0,
        seed: 9,
        ..SyntheticSpec::default()
    };
    let (a, ma) = gen_synthetic(&spec).unwrap();
    let (b, mb) = gen_synthetic(&spec).unwrap();
    assert_eq!(a.subjects, b.subjects);
    assert_eq!(ma.subjects.len(), mb.subjects.len());
    assert!(a.subjects.iter().all(|s| s.rows.iter().all(|r| r.features.iter().all(Option::is_some))));
    assert!(a.subjects.iter().all(|s| !s.rows.is_empty()));
}

/// Thresholding the true window-mean norm is a near-perfect classifier.
#[test]
fn synthetic_labels_are_separable_by_ground_truth() {
    let spec = SyntheticSpec::default();
    let (data, manifest) = gen_synthetic(&spec).unwrap();
    let (mut scores, mut labels, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (s, truth) in data.subjects.iter().zip(&manifest.subjects) {
        assert_eq!(s.id, truth.id);
        for (row, &m) in s.rows.iter().zip(&truth.window_mean) {
            if let Some(y) = row.label {
                scores.push(m);
                labels.push(y);
                weights.push(row.weight);
            }
        }
    }
    let ap = auprc(&scores, &labels, &weights).unwrap();
    assert!(ap > 0.95, "oracle AUPRC {ap}");
}

#[test]
fn epoch_zero_history_and_final_validation() {
    let raw = dataset(12, 10);
    let run = small_run(ModelKind::OdeRnn);
    let out = contseq::harness::train_and_evaluate(&raw[..7], &raw[7..], &run).unwrap();
    let recs = &out.history.records;
    assert_eq!(recs.len(), run.train.epochs + 1);
    assert!(recs[0].val_metric.is_some() && recs.last().unwrap().val_metric.is_some());
    assert_eq!(recs.last().unwrap().val_metric, out.evaluation.map(|e| e.value));
}
