use camixer::config::RunConfig;
use camixer::model::{CAMixerModel, Variant};
use camixer::pipeline;
use camixer::preclassify::SampleSet;
use camixer::trainer::{batch_loss, predict_map, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed,
        blocks: 1,
        channels: 5,
        patch_radius: 2,
        ..TrainConfig::default()
    }
}

/// Changed patches are bright in the difference channel, unchanged ones dark.
fn toy_samples(n: usize, seed: u64) -> SampleSet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (radius, channels) = (2, 3);
    let len = channels * 25;
    let mut patches = Vec::with_capacity(n * len);
    let mut labels = Vec::new();
    for i in 0..n {
        let label = (i % 2) as u8;
        for c in 0..channels {
            for _ in 0..25 {
                let base = if c == 2 { 0.2 + 0.6 * label as f64 } else { 0.5 };
                patches.push(base + r.random_range(-0.1..0.1));
            }
        }
        labels.push(label);
    }
    SampleSet { radius, channels, patches, labels, centers: (0..n).map(|i| (i, 0)).collect() }
}

fn all(s: &SampleSet) -> Vec<usize> {
    (0..s.len()).collect()
}

#[test]
fn memorizes_a_single_sample() {
    let mut s = toy_samples(2, 1);
    s.patches.truncate(s.patch_len());
    s.labels.truncate(1);
    s.centers.truncate(1);
    let trained = train(&s, &small(30, 0)).unwrap();
    let loss = batch_loss(&trained.model, &s, &[0]).unwrap();
    assert!(loss < 0.01, "loss {loss}");
}

#[test]
fn toy_problem_converges_within_fifty_epochs() {
    let s = toy_samples(64, 2);
    let trained = train(&s, &small(50, 0)).unwrap();
    assert_eq!(trained.losses.len(), 50);
    let loss = batch_loss(&trained.model, &s, &all(&s)).unwrap();
    assert!(loss < 0.1, "loss {loss}");
}

#[test]
fn seeds_change_parameters_but_both_converge() {
    let s = toy_samples(64, 3);
    let a = train(&s, &small(40, 1)).unwrap();
    let b = train(&s, &small(40, 2)).unwrap();
    assert_ne!(a.model.params(), b.model.params());
    for t in [&a, &b] {
        assert!(batch_loss(&t.model, &s, &all(&s)).unwrap() < 0.1);
    }
    let again = train(&s, &small(40, 1)).unwrap();
    assert_eq!(again.model, a.model);
    assert_eq!(again.losses, a.losses);
}

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("scene.height", "48"),
        ("scene.width", "48"),
        ("train.epochs", "3"),
        ("model.blocks", "1"),
        ("model.channels", "5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn prediction_does_not_depend_on_tile_size() {
    let cfg = small_run_config();
    let (pair, _) = pipeline::synthetic_scene(&cfg).unwrap();
    let mut model = CAMixerModel::new(cfg.train_config().model_config()).unwrap();
    // nonzero head so decisions are not trivially constant
    for (i, w) in model.head.weight.data_mut().iter_mut().enumerate() {
        *w = ((i * 37 % 11) as f64 - 5.0) * 0.1;
    }
    let one = predict_map(&model, &pair, 1).unwrap();
    let many = predict_map(&model, &pair, 64).unwrap();
    let whole = predict_map(&model, &pair, 48 * 48).unwrap();
    assert_eq!(one, many);
    assert_eq!(one, whole);
    assert!(predict_map(&model, &pair, 0).is_err());
}

#[test]
fn huge_unchanged_bias_marks_nothing_changed() {
    let cfg = small_run_config();
    let (pair, _) = pipeline::synthetic_scene(&cfg).unwrap();
    let mut model = CAMixerModel::new(cfg.train_config().model_config()).unwrap();
    model.head.bias.data_mut()[0] = f64::INFINITY;
    let map = predict_map(&model, &pair, 64).unwrap();
    assert_eq!(map.decisions.count_ones(), 0);
}

#[test]
fn basic_variant_with_no_blocks_runs_end_to_end() {
    let mut cfg = small_run_config();
    cfg.set("model.variant", "basic").unwrap();
    cfg.set("model.blocks", "0").unwrap();
    assert_eq!(cfg.train_config().variant, Variant::Basic);
    let (pair, truth) = pipeline::synthetic_scene(&cfg).unwrap();
    let run = pipeline::run(&pair, Some(&truth), &cfg).unwrap();
    assert!(run.trained.model.blocks.is_empty());
    let report = run.map.report.unwrap();
    assert_eq!(report.tp + report.tn + report.fp + report.fn_, 48 * 48);
}
