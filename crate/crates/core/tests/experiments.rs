use iotlm::checkpoint::frozen_digest;
use iotlm::dataset::RatioLevel;
use iotlm::experiments::{
    ablate_modality_ratio, ablate_task_ratio, fewshot_eval, fewshot_source, scaling_run, task_count, task_order,
    ExperimentConfig, ExperimentResult, STAGE_ADAPT, STAGE_PRETRAIN, STAGE_TUNE,
};
use iotlm::lm::LmPreset;
use iotlm::train::TrainConfig;
use iotlm::Error;

fn small(seeds: &[u64]) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        samples_per_task: 10,
        lr: 1e-3,
        experiment: ExperimentConfig {
            seeds: seeds.to_vec(),
            modality_tasks: vec!["gaze".into()],
            ..ExperimentConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn levels() -> Vec<RatioLevel> {
    ["single", "0.5", "1"].iter().map(|s| RatioLevel::parse(s).unwrap()).collect()
}

#[test]
fn modality_grid_has_one_cell_per_level_and_seed() {
    let cfg = small(&[0, 1]);
    let r = ablate_modality_ratio(&cfg, &levels()).unwrap();
    assert_eq!(r.cells.len(), 3 * 2);
    assert_eq!(r.axis, vec!["single", "0.5", "1"]);
    for seed in [0, 1] {
        let cells: Vec<_> = r.cells.iter().filter(|c| c.seed == seed).collect();
        assert!(cells.windows(2).all(|w| w[0].dataset_digests == w[1].dataset_digests));
    }
    let d0 = &r.cells.iter().find(|c| c.seed == 0).unwrap().dataset_digests;
    let d1 = &r.cells.iter().find(|c| c.seed == 1).unwrap().dataset_digests;
    assert_ne!(d0, d1);
    assert!(r.cells.iter().all(|c| c.stage == STAGE_PRETRAIN && c.reports.len() == 1));
    assert!(r.mean_error(STAGE_PRETRAIN, "1", "gaze").is_some());

    let back = ExperimentResult::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert!(r.table().lines().count() >= 4);
}

#[test]
fn tuned_stage_is_added_on_request() {
    let mut cfg = small(&[0]);
    cfg.experiment.evaluate_tuned = true;
    let r = ablate_modality_ratio(&cfg, &levels()[1..]).unwrap();
    assert_eq!(r.cells.len(), 4);
    assert_eq!(r.default_stage(), STAGE_TUNE);
}

#[test]
fn task_subsets_are_nested_and_start_with_the_probe() {
    let order = task_order("gaze", 3).unwrap();
    assert_eq!(order[0].name, "gaze");
    assert_eq!(order.len(), 8);
    assert_eq!(order, task_order("gaze", 3).unwrap());
    assert_eq!(task_count(RatioLevel::Single, 8), 1);
    assert_eq!(task_count(RatioLevel::Fraction(0.25), 8), 2);
    assert_eq!(task_count(RatioLevel::Fraction(1.0), 8), 8);

    let cfg = TrainConfig {
        samples_per_task: 5,
        split: [0.6, 0.2, 0.2],
        ..small(&[0])
    };
    let r = ablate_task_ratio(&cfg, &levels()).unwrap();
    assert_eq!(r.cells.len(), 3);
    let sizes: Vec<usize> = r.cells.iter().map(|c| c.tasks.len()).collect();
    assert_eq!(sizes, vec![1, 4, 8]);
    for w in r.cells.windows(2) {
        assert_eq!(w[1].tasks[..w[0].tasks.len()], w[0].tasks[..]);
        assert!(w[0].dataset_digests.iter().all(|(k, v)| w[1].dataset_digests.get(k) == Some(v)));
    }
    assert!(r.cells.iter().all(|c| c.reports.len() == 1 && c.reports[0].task == "gaze"));
}

#[test]
fn ablations_need_two_levels_and_a_seed() {
    let one = &levels()[..1];
    assert!(matches!(ablate_modality_ratio(&small(&[0]), one), Err(Error::Config(_))));
    assert!(matches!(ablate_task_ratio(&small(&[]), &levels()), Err(Error::Config(_))));
}

#[test]
fn fewshot_adapts_without_touching_the_source() {
    let mut cfg = small(&[0, 1]);
    cfg.tasks = vec!["gesture".into(), "gaze".into(), "touch".into()];
    cfg.experiment.fewshot_k = vec![0, 2];
    cfg.experiment.adapt_steps = 3;
    let source = fewshot_source(&cfg, 0).unwrap();
    let names: Vec<&str> = source.header.tasks.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, vec!["gesture"]);
    let bytes = source.to_bytes();

    let (r, kept) = fewshot_eval(&source, &cfg).unwrap();
    assert_eq!(source.to_bytes(), bytes);
    assert_eq!(r.cells.len(), 2 * 2 * 2);
    assert!(r.cells.iter().all(|c| c.stage == STAGE_ADAPT));
    assert!(r.cells.iter().all(|c| c.dataset_digests.contains_key(&format!("fewshot/{}", c.tasks[0]))));
    assert_eq!(kept.len(), 2);
    for m in kept.values() {
        assert_eq!(frozen_digest(&m.params), source.header.frozen_digest);
    }

    let mut leak = cfg.clone();
    leak.experiment.fewshot_targets = vec!["gesture".into()];
    assert!(matches!(fewshot_eval(&source, &leak), Err(Error::Config(_))));
}

#[test]
fn scaling_counts_grow_with_the_preset() {
    let cfg = TrainConfig {
        samples_per_task: 5,
        split: [0.6, 0.2, 0.2],
        ..small(&[0])
    };
    let presets = [LmPreset::Tiny, LmPreset::Small, LmPreset::Medium];
    let r = scaling_run(&cfg, &presets).unwrap();
    assert_eq!(r.cells.len(), 3);
    let totals: Vec<f64> = presets
        .iter()
        .map(|p| r.mean_extra(STAGE_PRETRAIN, p.name(), "params_total").unwrap())
        .collect();
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
    assert!(r.cells.iter().all(|c| c.reports.len() == 8 && c.extra["val_loss"].is_finite()));
    assert!(scaling_run(&cfg, &[LmPreset::Small, LmPreset::Tiny]).is_err());
}
