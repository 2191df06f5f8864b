mod common;

use common::{random_subjects, rng};
use contseq::harness::{evaluate, read_dataset, HarnessError};
use contseq::interp::{read_cache, write_cache, Scheme};
use contseq::models::{Model, ModelConfig, ModelKind, TaskSpec};
use contseq::preprocess::{assemble, prepare, CausalMode, PreprocessConfig, Standardizer};

const OBS: &str = "subject_id,t,feat_a,feat_b,label,weight
s1,0.0,1.0,,0,1
s2,1.5,2.0,3.0,1,1
s1,2.0,,4.0,1,1
s1,1.0,0.5,0.25,,0
s2,0.5,1.0,1.0,0,1
";

const CTX: &str = "subject_id,ctx_age
s1,40
s2,
";

fn no_ctx() -> Option<&'static [u8]> {
    None
}

#[test]
fn loads_grouped_sorted_subjects() {
    let d = read_dataset(OBS.as_bytes(), Some(CTX.as_bytes())).unwrap();
    assert_eq!(d.feature_names, vec!["a", "b"]);
    assert_eq!(d.context_names, vec!["age"]);
    let lens: Vec<usize> = d.subjects.iter().map(|s| s.rows.len()).collect();
    assert_eq!(lens, vec![3, 2]);
    let s1 = &d.subjects[0];
    assert_eq!(s1.rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
    assert_eq!(s1.rows[0].features, vec![Some(1.0), None]);
    assert_eq!(s1.rows[1].label, None);
    assert_eq!(s1.context, vec![Some(40.0)]);
    assert_eq!(d.subjects[1].context, vec![None]);
}

#[test]
fn rejects_bad_input_with_line_numbers() {
    let dup = "subject_id,t,feat_a,label,weight\ns1,0,1,0,1\ns1,0,2,0,1\n";
    match read_dataset(dup.as_bytes(), no_ctx()) {
        Err(HarnessError::DuplicateTime { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let bad = "subject_id,t,feat_a,label,weight\ns1,0,1,0,1\ns1,x,2,0,1\n";
    match read_dataset(bad.as_bytes(), no_ctx()) {
        Err(HarnessError::Csv { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let unknown = "subject_id,t,feat_a,colour,label,weight\n";
    assert!(matches!(read_dataset(unknown.as_bytes(), no_ctx()), Err(HarnessError::UnknownColumn(c)) if c == "colour"));
}

#[test]
fn coefficient_cache_round_trips_a_dataset() {
    let raw = random_subjects(&mut rng(21), 4, 2, 1, 1..=6, 0.3);
    for scheme in Scheme::ALL {
        let causal = if scheme.is_recti() { CausalMode::Recti } else { CausalMode::Copy };
        let cfg = PreprocessConfig {
            scheme,
            causal,
            ..PreprocessConfig::default()
        };
        let (_, ds, _) = prepare(&raw, &[], &cfg).unwrap();
        let mut buf = Vec::new();
        write_cache(&ds.signals(), &mut buf).unwrap();
        assert_eq!(read_cache(buf.as_slice()).unwrap(), ds.signals());
    }
}

#[test]
fn copy_expansion_multiplies_sequences() {
    let raw = random_subjects(&mut rng(22), 3, 1, 0, 2..=5, 0.0);
    let cfg = PreprocessConfig::default();
    let ds = assemble(&raw, &Standardizer::identity(1, 0), &cfg, None).unwrap();
    let total: usize = raw.iter().map(|s| s.rows.len()).sum();
    assert_eq!(ds.len(), total);
    for s in &ds.subjects {
        assert_eq!(s.weights.iter().filter(|&&w| w > 0.0).count(), 1);
    }
    let recti = PreprocessConfig {
        scheme: Scheme::Rectilinear,
        causal: CausalMode::Recti,
        ..cfg
    };
    let ds = assemble(&raw, &Standardizer::identity(1, 0), &recti, None).unwrap();
    let longest = raw.iter().map(|s| s.rows.len()).max().unwrap();
    assert_eq!(ds.len(), raw.len());
    assert_eq!(ds.seq_len, 2 * longest - 1);
}

#[test]
fn scheme_and_mode_must_match() {
    let raw = random_subjects(&mut rng(23), 2, 1, 0, 2..=3, 0.0);
    let bad = PreprocessConfig {
        scheme: Scheme::Natural,
        causal: CausalMode::Recti,
        ..PreprocessConfig::default()
    };
    assert!(prepare(&raw, &[], &bad).is_err());
    assert!(ModelConfig::new(ModelKind::Ncde, 2, 2)
        .check_preprocess(&PreprocessConfig {
            causal: CausalMode::None,
            ..PreprocessConfig::default()
        })
        .is_err());
    assert!(ModelConfig::new(ModelKind::Rnn, 2, 2)
        .check_preprocess(&PreprocessConfig {
            causal: CausalMode::None,
            ..PreprocessConfig::default()
        })
        .is_ok());
}

/// Under copy expansion evaluation gathers exactly one prediction per real
/// observation, and repeats exactly.
#[test]
fn evaluation_gathers_one_prediction_per_observation() {
    let raw = random_subjects(&mut rng(24), 3, 2, 1, 3..=5, 0.2);
    let cfg = PreprocessConfig::default();
    let (_, ds, _) = prepare(&raw, &[], &cfg).unwrap();
    let model = Model::new(ModelConfig::new(ModelKind::Ncde, 3, 6), TaskSpec::Binary, contseq::harness::dims_of(&ds), 4).unwrap();
    let a = evaluate(&model, &ds, 1).unwrap();
    let b = evaluate(&model, &ds, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels.len(), raw.iter().map(|s| s.rows.len()).sum::<usize>());
}
