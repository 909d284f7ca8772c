use conceptvae::dataset::{DataSet, Image28, LabeledSample, PIXELS};
use conceptvae::model::{init_params, ArchitectureConfig, Checkpoint, ModelParams};
use conceptvae::training::{evaluate_mse, train, EpochMetrics, LossConfig, TrainConfig, TrainObserver};
use conceptvae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bars and blobs with labels 0-9, plus a few concept-labelled crops.
fn synthetic(n: usize, seed: u64) -> DataSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let label = (i % 10) as u8;
            let mut px = vec![0.0f32; PIXELS];
            let (r0, c0) = (rng.random_range(4..10), rng.random_range(4..10));
            let (h, w) = (8 + label as usize, 4 + (label as usize % 5) * 2);
            for r in r0..(r0 + h).min(27) {
                for c in c0..(c0 + w).min(27) {
                    px[r * 28 + c] = rng.random_range(0.6..1.0);
                }
            }
            let label = if i % 7 == 6 {
                for v in px.iter_mut().take(14 * 28) {
                    *v = 0.0;
                }
                10 + label
            } else {
                label
            };
            LabeledSample::new(Image28::from_pixels(&px).unwrap(), label).unwrap()
        })
        .collect();
    DataSet::new(samples)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 32,
        learning_rate: 2e-3,
        seed: 7,
        checkpoint_every: 2,
    }
}

#[derive(Default)]
struct Recorder {
    lines: Vec<String>,
    checkpoints: Vec<usize>,
}

impl TrainObserver for Recorder {
    fn on_epoch(&mut self, metrics: &EpochMetrics, checkpoint: Option<&Checkpoint>) -> Result<()> {
        self.lines.push(metrics.to_json_line());
        if checkpoint.is_some() {
            self.checkpoints.push(metrics.epoch);
        }
        Ok(())
    }
}

fn params() -> ModelParams<f32> {
    init_params(&ArchitectureConfig::tiny(8), 3).unwrap()
}

#[test]
fn loss_falls_over_five_epochs() {
    let data = synthetic(512, 1);
    let val = synthetic(64, 2);
    let mut rec = Recorder::default();
    let (trained, history) = train(params(), &data, &val, &LossConfig::default(), &small_config(), "smoke", &mut rec).unwrap();
    assert_eq!(history.len(), 5);
    assert!(history.iter().all(EpochMetrics::is_finite));
    let first = history[0].train_bce + history[0].kl;
    let last = history[4].train_bce + history[4].kl;
    assert!(last <= 0.8 * first, "first {first} last {last}");
    assert!(history[4].val_mse < history[0].val_mse);
    assert!(trained.is_finite());
    assert_eq!(rec.checkpoints, vec![2, 4, 5]);
    for line in &rec.lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "train_bce", "train_mse", "val_mse", "kl", "concept_loss", "lr", "seconds"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

#[test]
fn one_epoch_on_64_samples() {
    let data = synthetic(64, 3);
    let cfg = TrainConfig { epochs: 1, ..small_config() };
    let (p, h) = train(params(), &data, &data, &LossConfig::default(), &cfg, "one", &mut ()).unwrap();
    assert!(p.is_finite());
    assert!(h[0].is_finite());
    assert!(h[0].concept_loss > 0.0);
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = synthetic(96, 4);
    let cfg = TrainConfig { epochs: 2, ..small_config() };
    let run = || train(params(), &data, &data, &LossConfig::default(), &cfg, "det", &mut ()).unwrap();
    let (pa, ha) = run();
    let (pb, hb) = run();
    assert_eq!(pa, pb);
    let strip = |h: &[EpochMetrics]| h.iter().map(|m| EpochMetrics { seconds: 0.0, ..m.clone() }).collect::<Vec<_>>();
    assert_eq!(strip(&ha), strip(&hb));
}

#[test]
fn different_seed_gives_different_weights() {
    let data = synthetic(64, 5);
    let cfg = TrainConfig { epochs: 1, ..small_config() };
    let (pa, _) = train(params(), &data, &data, &LossConfig::default(), &cfg, "a", &mut ()).unwrap();
    let (pb, _) = train(params(), &data, &data, &LossConfig::default(), &TrainConfig { seed: 8, ..cfg }, "b", &mut ()).unwrap();
    assert_ne!(pa, pb);
}

#[test]
fn zero_model_mse_oracle() {
    // All-zero parameters decode every input to 0.5, so the pixel-summed
    // squared error is computable directly from the data.
    let data = synthetic(40, 6);
    let zero = ModelParams::<f32>::zeros(&ArchitectureConfig::default()).unwrap();
    let expected: f64 = data
        .iter()
        .map(|s| s.image().pixels().iter().map(|&t| (0.5 - t as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / data.len() as f64;
    let got = evaluate_mse(&zero, &data).unwrap();
    assert!((got - expected).abs() < 1e-6 * expected, "{got} vs {expected}");
}

#[test]
fn empty_training_set_is_rejected() {
    let empty = DataSet::new(vec![]);
    assert!(train(params(), &empty, &empty, &LossConfig::default(), &small_config(), "e", &mut ()).is_err());
}
