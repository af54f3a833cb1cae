use std::collections::BTreeMap;

use otcsurv::data::{balance_train, split, SplitFractions};
use otcsurv::synthetic::{generate_synthetic, SyntheticSpec};
use otcsurv::train::{train, TrainSchedule};
use otcsurv::{Model, ModelConfig, OntologyDag};

fn schedule(warmup: usize, contrast: usize) -> TrainSchedule {
    TrainSchedule {
        warmup_epochs: warmup,
        contrast_epochs: contrast,
        ..TrainSchedule::default()
    }
}

#[test]
fn validation_ctd_improves_over_the_first_epoch() {
    let dag = OntologyDag::toy();
    let cfg = ModelConfig::default();
    let spec = SyntheticSpec {
        n_patients: 600,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &dag, &cfg.limits()).unwrap();
    let s = split(&data.records, &SplitFractions::default(), 0).unwrap();
    let mut model = Model::new(&cfg, dag, 1).unwrap();
    let report = train(&mut model, &balance_train(&s.train).unwrap(), &s.val, &schedule(8, 2)).unwrap();
    let first = report.log[0].val_ctd.unwrap();
    let best = report.best_val_ctd.unwrap();
    assert!(best > first, "best {best} vs first {first}");
    let best_epoch = report.best_epoch.unwrap();
    assert_eq!(report.log[best_epoch - 1].val_ctd, Some(best));
    assert!(report.log.iter().all(|m| m.val_ctd.unwrap() <= best));
}

#[test]
fn rare_leaf_leans_on_its_ancestors() {
    let dag = OntologyDag::toy();
    let cfg = ModelConfig::default();
    let spec = SyntheticSpec {
        n_patients: 300,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &dag, &cfg.limits()).unwrap();
    let mut counts: BTreeMap<&str, usize> = dag.leaves().map(|l| (l, 0)).collect();
    for r in &data.records {
        for code in r.visits.iter().flatten() {
            *counts.get_mut(code.as_str()).unwrap() += 1;
        }
    }
    let rare = counts
        .iter()
        .filter(|(code, n)| **n > 0 && dag.ancestor_closure(code).unwrap().len() > 1)
        .min_by_key(|(_, n)| **n)
        .map(|(code, _)| code.to_string())
        .unwrap();
    let s = split(&data.records, &SplitFractions::default(), 0).unwrap();
    let mut model = Model::new(&cfg, dag.clone(), 4).unwrap();
    train(&mut model, &balance_train(&s.train).unwrap(), &s.val, &schedule(4, 1)).unwrap();
    let weights = model.code_attention(&rare).unwrap();
    assert_eq!(weights[0].0, rare);
    let own = weights[0].1;
    let ancestors: f64 = weights[1..].iter().map(|(_, w)| w).sum();
    assert!(ancestors > own, "{rare}: own {own}, ancestors {ancestors}");
}
