use conceptvae::dataset::{Image28, LabeledSample, PIXELS};
use conceptvae::model::{self, init_params, ArchitectureConfig, ModelParams};
use conceptvae::nn::Tensor;
use conceptvae::training::{loss_and_gradients, LossConfig, ReconMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blob_image(rng: &mut ChaCha8Rng) -> Image28 {
    let (cy, cx) = (rng.random_range(8.0..20.0f32), rng.random_range(8.0..20.0f32));
    let px: Vec<f32> = (0..PIXELS)
        .map(|i| {
            let (y, x) = ((i / 28) as f32, (i % 28) as f32);
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            (-d2 / 18.0).exp() * rng.random_range(0.7..1.0f32)
        })
        .collect();
    Image28::from_pixels(&px).unwrap()
}

fn perturbed_params(seed: u64) -> ModelParams<f64> {
    let mut p = init_params::<f64>(&ArchitectureConfig::tiny(2), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for layer in &mut p.layers {
        for b in &mut layer.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    p
}

fn loss(p: &ModelParams<f64>, samples: &[&LabeledSample], noise: &Tensor<f64>, cfg: &LossConfig) -> f64 {
    loss_and_gradients(p, samples, Some(noise.clone()), cfg).unwrap().0.total
}

fn check(cfg: LossConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples = [
        LabeledSample::new(blob_image(&mut rng), 3).unwrap(),
        LabeledSample::new(blob_image(&mut rng), 14).unwrap(),
    ];
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    let params = perturbed_params(9);
    let l = params.config.latent_channels;
    let noise = Tensor::from_vec([l, 2, 7, 7], (0..l * 2 * 49).map(|_| rng.sample(rand_distr::StandardNormal)).collect());
    let (_, grads) = loss_and_gradients(&params, &refs, Some(noise.clone()), &cfg).unwrap();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (li, layer) in params.layers.iter().enumerate() {
        let mut picks: Vec<(bool, usize)> = (0..4).map(|_| (false, rng.random_range(0..layer.weight.len()))).collect();
        picks.extend((0..2).map(|_| (true, rng.random_range(0..layer.bias.len()))));
        for (is_bias, idx) in picks {
            let eval = |delta: f64| {
                let mut q = params.clone();
                let slot = if is_bias { &mut q.layers[li].bias[idx] } else { &mut q.layers[li].weight[idx] };
                *slot += delta;
                loss(&q, &refs, &noise, &cfg)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = if is_bias { grads.layers[li].bias[idx] } else { grads.layers[li].weight[idx] };
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-2);
            worst = worst.max(rel);
            checked += 1;
            assert!(rel < 1e-4, "layer {li} {} {idx}: numeric {numeric} analytic {analytic}", if is_bias { "bias" } else { "weight" });
        }
    }
    assert_eq!(checked, 60);
    assert!(worst < 1e-4);
}

#[test]
fn total_loss_gradient_matches_finite_differences_bce() {
    check(LossConfig::default());
}

#[test]
fn total_loss_gradient_matches_finite_differences_mse_weighted() {
    check(LossConfig {
        recon_mode: ReconMode::Mse,
        kl_weight: 0.5,
        concept_weight: 2.0,
        ..LossConfig::default()
    });
}

#[test]
fn shifted_input_shifts_output() {
    let params = init_params::<f64>(&ArchitectureConfig::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let small: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let place = |oy: usize, ox: usize| {
        let mut px = vec![0.0f32; PIXELS];
        for y in 0..8 {
            for x in 0..8 {
                px[(oy + y) * 28 + ox + x] = small[y * 8 + x];
            }
        }
        Image28::from_pixels(&px).unwrap()
    };
    let (a, b) = (place(8, 8), place(12, 12));
    let x = model::images_to_tensor::<f64>(&[&a, &b]);
    let pass = model::forward_eval(&params, &x).unwrap();
    let out = pass.trace.output();
    let (pa, pb) = (out.plane_of(0, 0), out.plane_of(0, 1));
    // The encoder's receptive field spans the whole canvas, so covariance
    // holds only approximately; compare the interior with and without the
    // compensating shift.
    let corr = |s: usize| {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for y in 4..22 {
            for x in 4..22 {
                xs.push(pa[y * 28 + x] as f32);
                ys.push(pb[(y + s) * 28 + x + s] as f32);
            }
        }
        conceptvae::analysis::zncc(&xs, &ys)
    };
    let (aligned, unaligned) = (corr(4), corr(0));
    assert!(aligned > 0.9, "aligned correlation {aligned}");
    assert!(aligned > unaligned + 0.2, "aligned {aligned} unaligned {unaligned}");
}

#[test]
fn one_hot_peak_follows_the_shift() {
    let params = init_params::<f64>(&ArchitectureConfig::default(), 5).unwrap();
    let peak = |y: usize, x: usize| {
        let mut px = vec![0.0f32; PIXELS];
        px[y * 28 + x] = 1.0;
        let img = Image28::from_pixels(&px).unwrap();
        let pass = model::forward_eval(&params, &model::images_to_tensor::<f64>(&[&img])).unwrap();
        let map = pass.trace.channel_mean(3, 0);
        let i = (0..PIXELS).fold(0, |b, i| if map[i].abs() > map[b].abs() { i } else { b });
        ((i / 28) as isize, (i % 28) as isize)
    };
    let (y0, x0) = peak(10, 10);
    // Shifts are multiples of the total encoder stride (4); others alias.
    for (dy, dx) in [(4, 4), (4, 0), (0, 8), (8, 4)] {
        let (y1, x1) = peak(10 + dy, 10 + dx);
        assert!((y1 - y0 - dy as isize).abs() <= 1 && (x1 - x0 - dx as isize).abs() <= 1, "shift ({dy},{dx}): peak ({y0},{x0}) -> ({y1},{x1})");
    }
}
