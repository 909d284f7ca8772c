//! The fully-convolutional VAE.
//!
//! Five convolutional encoder layers end in a layer with `2L` channels that
//! is split into mean and log-variance maps of a convolutional latent image.
//! Five decoder layers map a sampled latent image back to a 28x28 sigmoid
//! reconstruction. Every decoder output is kept in a [`DecoderTrace`] so that
//! hidden layers (layer 3 by default) can carry their own loss.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Image28, PIXELS, SIDE};
use crate::nn::{self, ConvGeom, Scalar, Tensor};
use crate::{Error, Result};

pub const ENCODER_LAYERS: usize = 5;
pub const DECODER_LAYERS: usize = 5;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn conv(in_channels: usize, out_channels: usize, stride: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            activation,
        }
    }

    pub const fn deconv(in_channels: usize, out_channels: usize, stride: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Deconv,
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            activation,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    /// Output spatial size for a square input of side `n` ("same" padding).
    pub fn output_side(&self, n: usize) -> usize {
        match self.kind {
            LayerKind::Conv => n.div_ceil(self.stride),
            LayerKind::Deconv => n * self.stride,
        }
    }

    fn geometry(&self, in_h: usize, in_w: usize) -> ConvGeom {
        match self.kind {
            LayerKind::Conv => ConvGeom::same(in_h, in_w, self.kernel, self.stride),
            LayerKind::Deconv => ConvGeom::same(in_h * self.stride, in_w * self.stride, self.kernel, self.stride),
        }
    }

    /// Effective number of inputs feeding one output unit.
    fn fan_in(&self) -> f64 {
        let k2 = (self.kernel * self.kernel) as f64;
        match self.kind {
            LayerKind::Conv => self.in_channels as f64 * k2,
            LayerKind::Deconv => self.in_channels as f64 * k2 / (self.stride * self.stride) as f64,
        }
    }
}

/// Layer stack of the VAE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub encoder: Vec<LayerSpec>,
    pub latent_channels: usize,
    pub decoder: Vec<LayerSpec>,
}

impl Default for ArchitectureConfig {
    /// 28 -> 28 -> 14 -> 7 -> 7 -> 7 (x 2L) encoder, 7 -> 7 -> 14 -> 28 (layer 3)
    /// -> 28 -> 28 decoder with `L = 4`.
    fn default() -> Self {
        use Activation::*;
        let l = 4;
        Self {
            encoder: vec![
                LayerSpec::conv(1, 32, 1, Relu),
                LayerSpec::conv(32, 32, 2, Relu),
                LayerSpec::conv(32, 64, 2, Relu),
                LayerSpec::conv(64, 64, 1, Relu),
                LayerSpec::conv(64, 2 * l, 1, Identity),
            ],
            latent_channels: l,
            decoder: vec![
                LayerSpec::deconv(l, 64, 1, Relu),
                LayerSpec::deconv(64, 32, 2, Relu),
                LayerSpec::deconv(32, 8, 2, Relu),
                LayerSpec::conv(8, 16, 1, Relu),
                LayerSpec::conv(16, 1, 1, Sigmoid),
            ],
        }
    }
}

/// Spatial sides produced by a validated architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeLadder {
    pub encoder: [usize; ENCODER_LAYERS],
    pub decoder: [usize; DECODER_LAYERS],
}

impl ShapeLadder {
    pub fn latent_side(&self) -> usize {
        self.encoder[ENCODER_LAYERS - 1]
    }
}

impl ArchitectureConfig {
    /// Same ladder as the default with `width` channels in every hidden layer
    /// and a single latent channel pair. Used for gradient checks.
    pub fn tiny(width: usize) -> Self {
        use Activation::*;
        let l = width / 2;
        let l = l.max(1);
        Self {
            encoder: vec![
                LayerSpec::conv(1, width, 1, Relu),
                LayerSpec::conv(width, width, 2, Relu),
                LayerSpec::conv(width, width, 2, Relu),
                LayerSpec::conv(width, width, 1, Relu),
                LayerSpec::conv(width, 2 * l, 1, Identity),
            ],
            latent_channels: l,
            decoder: vec![
                LayerSpec::deconv(l, width, 1, Relu),
                LayerSpec::deconv(width, width, 2, Relu),
                LayerSpec::deconv(width, width, 2, Relu),
                LayerSpec::conv(width, width, 1, Relu),
                LayerSpec::conv(width, 1, 1, Sigmoid),
            ],
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    /// Checks layer counts, channel chaining, activations and the spatial
    /// ladder (decoder layer 3 and the output must be 28x28).
    pub fn validate(&self) -> Result<ShapeLadder> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.encoder.len() != ENCODER_LAYERS || self.decoder.len() != DECODER_LAYERS {
            return bad(format!(
                "need {ENCODER_LAYERS} encoder and {DECODER_LAYERS} decoder layers, got {} and {}",
                self.encoder.len(),
                self.decoder.len()
            ));
        }
        if self.latent_channels == 0 {
            return bad("latent_channels must be positive".into());
        }
        for (i, l) in self.layers().enumerate() {
            if l.kernel % 2 == 0 || l.stride == 0 || l.in_channels == 0 || l.out_channels == 0 {
                return bad(format!("layer {i}: kernel must be odd, stride and channels positive"));
            }
        }
        if self.encoder.iter().any(|l| l.kind != LayerKind::Conv) {
            return bad("encoder layers must be convolutions".into());
        }
        let chain = |layers: &[LayerSpec], first_in: usize, last_out: usize, what: &str| -> Result<()> {
            let mut c = first_in;
            for (i, l) in layers.iter().enumerate() {
                if l.in_channels != c {
                    return Err(Error::InvalidConfig(format!(
                        "{what} layer {}: expects {} input channels, previous produces {c}",
                        i + 1,
                        l.in_channels
                    )));
                }
                c = l.out_channels;
            }
            if c != last_out {
                return Err(Error::InvalidConfig(format!("{what} must end with {last_out} channels, got {c}")));
            }
            Ok(())
        };
        chain(&self.encoder, 1, 2 * self.latent_channels, "encoder")?;
        chain(&self.decoder, self.latent_channels, 1, "decoder")?;
        if self.encoder[ENCODER_LAYERS - 1].activation != Activation::Identity {
            return bad("the latent layer must have identity activation".into());
        }
        if self.decoder[DECODER_LAYERS - 1].activation != Activation::Sigmoid {
            return bad("the final decoder layer must use sigmoid".into());
        }
        if self.layers().take(ENCODER_LAYERS + DECODER_LAYERS - 1).any(|l| l.activation == Activation::Sigmoid) {
            return bad("sigmoid is reserved for the output layer".into());
        }
        let mut enc = [0; ENCODER_LAYERS];
        let mut side = SIDE;
        for (i, l) in self.encoder.iter().enumerate() {
            side = l.output_side(side);
            enc[i] = side;
        }
        let mut dec = [0; DECODER_LAYERS];
        for (i, l) in self.decoder.iter().enumerate() {
            side = l.output_side(side);
            dec[i] = side;
        }
        if dec[2] != SIDE || dec[4] != SIDE {
            return bad(format!("decoder ladder {dec:?}: layers 3 and 5 must be {SIDE}x{SIDE}"));
        }
        Ok(ShapeLadder { encoder: enc, decoder: dec })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// `[out, in, k, k]` for convolutions, `[in, out, k, k]` for deconvolutions.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Kernels and biases for all ten layers, encoder first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ArchitectureConfig,
    pub layers: Vec<LayerParams<T>>,
    pub seed: Option<u64>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ArchitectureConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            layers: config
                .layers()
                .map(|l| LayerParams {
                    weight: vec![T::zero(); l.weight_len()],
                    bias: vec![T::zero(); l.out_channels],
                })
                .collect(),
            seed: None,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: vec![T::zero(); l.weight.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
            seed: None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `(name, shape)` for every tensor in storage order.
    pub fn tensor_names(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, spec) in self.config.layers().enumerate() {
            let name = layer_name(i);
            let (a, b) = match spec.kind {
                LayerKind::Conv => (spec.out_channels, spec.in_channels),
                LayerKind::Deconv => (spec.in_channels, spec.out_channels),
            };
            out.push((format!("{name}.weight"), vec![a, b, spec.kernel, spec.kernel]));
            out.push((format!("{name}.bias"), vec![spec.out_channels]));
        }
        out
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
        ModelParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
            seed: self.seed,
        }
    }
}

fn layer_name(i: usize) -> String {
    if i < ENCODER_LAYERS {
        format!("encoder.{}", i + 1)
    } else {
        format!("decoder.{}", i - ENCODER_LAYERS + 1)
    }
}

/// Gaussian weights with variance `gain / fan_in` (gain 2 ahead of ReLU, 1
/// otherwise); zero biases.
pub fn init_params<T: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (spec, layer) in config.layers().zip(params.layers.iter_mut()) {
        let gain = if spec.activation == Activation::Relu { 2.0 } else { 1.0 };
        let std = (gain / spec.fan_in()).sqrt();
        for w in layer.weight.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *w = T::lit(e * std);
        }
    }
    params.seed = Some(seed);
    Ok(params)
}

/// Mean and clamped log-variance maps, `[L, batch, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

/// A latent image `z` together with the standard-normal noise that produced
/// it (absent when `z` is the mean).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage<T> {
    pub z: Tensor<T>,
    pub noise: Option<Tensor<T>>,
}

/// Post-activation outputs of all five decoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace<T> {
    pub layers: Vec<Tensor<T>>,
    /// Final pre-sigmoid values, kept for numerically stable losses.
    pub logits: Tensor<T>,
}

impl<T: Scalar> DecoderTrace<T> {
    /// Output of decoder layer `index` (1-based).
    pub fn layer(&self, index: usize) -> &Tensor<T> {
        &self.layers[index - 1]
    }

    /// Reconstruction, strictly inside (0, 1).
    pub fn output(&self) -> &Tensor<T> {
        &self.layers[DECODER_LAYERS - 1]
    }

    pub fn output_image(&self, n: usize) -> Image28 {
        let px: Vec<f32> = self.output().plane_of(0, n).iter().map(|v| v.to_f32().unwrap_or(0.0)).collect();
        Image28::from_pixels_clamped(&px).expect("output is 28x28")
    }

    /// Channel-mean of a decoder layer for sample `n`, as plain floats.
    pub fn channel_mean(&self, layer: usize, n: usize) -> Vec<f32> {
        let t = self.layer(layer);
        let mut acc = vec![0.0f64; t.plane()];
        for c in 0..t.channels() {
            for (a, v) in acc.iter_mut().zip(t.plane_of(c, n)) {
                *a += v.to_f64().unwrap_or(f64::NAN);
            }
        }
        acc.iter().map(|a| (a / t.channels() as f64) as f32).collect()
    }
}

pub fn images_to_tensor<T: Scalar>(images: &[&Image28]) -> Tensor<T> {
    let mut t = Tensor::zeros(1, images.len(), SIDE, SIDE);
    for (n, img) in images.iter().enumerate() {
        for (d, &p) in t.plane_of_mut(0, n).iter_mut().zip(img.pixels().iter()) {
            *d = T::lit(p as f64);
        }
    }
    t
}

fn layer_forward<T: Scalar>(spec: &LayerSpec, p: &LayerParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.channels() != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "layer expects {} channels, input has {}",
            spec.in_channels,
            x.channels()
        )));
    }
    let g = spec.geometry(x.height(), x.width());
    Ok(match spec.kind {
        LayerKind::Conv => nn::conv_forward(x, &p.weight, &p.bias, spec.out_channels, &g),
        LayerKind::Deconv => nn::deconv_forward(x, &p.weight, &p.bias, spec.out_channels, &g),
    })
}

fn activate<T: Scalar>(act: Activation, t: &mut Tensor<T>) {
    match act {
        Activation::Relu => t.data.iter_mut().for_each(|v| *v = v.max(T::zero())),
        Activation::Sigmoid => {
            let eps = T::epsilon();
            t.data.iter_mut().for_each(|v| *v = nn::sigmoid(*v).max(eps).min(T::one() - eps));
        }
        Activation::Identity => {}
    }
}

/// Everything the backward pass needs from one training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// Inputs to the five encoder layers (the image first).
    pub encoder_inputs: Vec<Tensor<T>>,
    /// Raw (unclamped) output of the latent layer, `[2L, n, h, w]`.
    pub latent_raw: Tensor<T>,
    pub dist: LatentDistribution<T>,
    pub latent: LatentImage<T>,
    pub trace: DecoderTrace<T>,
}

fn check_input<T: Scalar>(x: &Tensor<T>) -> Result<()> {
    if x.channels() != 1 || x.height() != SIDE || x.width() != SIDE {
        return Err(Error::ShapeMismatch(format!("expected [1, n, 28, 28] input, got {:?}", x.shape)));
    }
    Ok(())
}

fn encode_tracked<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>, LatentDistribution<T>)> {
    check_input(x)?;
    let mut inputs = Vec::with_capacity(ENCODER_LAYERS);
    let mut h = x.clone();
    for (spec, p) in params.config.encoder.iter().zip(&params.layers) {
        let mut out = layer_forward(spec, p, &h)?;
        activate(spec.activation, &mut out);
        inputs.push(std::mem::replace(&mut h, out));
    }
    let l = params.config.latent_channels;
    let mu = h.channel_range(0, l);
    let mut logvar = h.channel_range(l, 2 * l);
    let (lo, hi) = (T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
    logvar.data.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
    Ok((inputs, h, LatentDistribution { mu, logvar }))
}

/// Encodes a `[1, n, 28, 28]` batch.
pub fn encode_batch<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<LatentDistribution<T>> {
    Ok(encode_tracked(params, x)?.2)
}

pub fn encode<T: Scalar>(params: &ModelParams<T>, image: &Image28) -> Result<LatentDistribution<T>> {
    encode_batch(params, &images_to_tensor(&[image]))
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<T: Scalar, R: Rng>(dist: &LatentDistribution<T>, rng: &mut R) -> LatentImage<T> {
    let mut noise = Tensor::zeros(dist.mu.channels(), dist.mu.batch(), dist.mu.height(), dist.mu.width());
    for e in noise.data.iter_mut() {
        let v: f64 = rng.sample(StandardNormal);
        *e = T::lit(v);
    }
    reparameterize_with(dist, noise)
}

/// Reparameterization with caller-supplied noise.
pub fn reparameterize_with<T: Scalar>(dist: &LatentDistribution<T>, noise: Tensor<T>) -> LatentImage<T> {
    assert_eq!(noise.shape, dist.mu.shape, "noise shape");
    let half = T::lit(0.5);
    let z = dist
        .mu
        .data
        .iter()
        .zip(&dist.logvar.data)
        .zip(&noise.data)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect();
    LatentImage {
        z: Tensor::from_vec(dist.mu.shape, z),
        noise: Some(noise),
    }
}

/// Deterministic decode of a `[L, n, h, w]` latent batch.
pub fn decode<T: Scalar>(params: &ModelParams<T>, z: &Tensor<T>) -> Result<DecoderTrace<T>> {
    let ladder = params.config.validate()?;
    let side = ladder.latent_side();
    if z.channels() != params.config.latent_channels || z.height() != side || z.width() != side {
        return Err(Error::ShapeMismatch(format!(
            "latent must be [{}, n, {side}, {side}], got {:?}",
            params.config.latent_channels, z.shape
        )));
    }
    let mut layers = Vec::with_capacity(DECODER_LAYERS);
    let mut logits = None;
    let mut h = z.clone();
    for (spec, p) in params.config.decoder.iter().zip(&params.layers[ENCODER_LAYERS..]) {
        let mut out = layer_forward(spec, p, &h)?;
        if spec.activation == Activation::Sigmoid {
            logits = Some(out.clone());
        }
        activate(spec.activation, &mut out);
        layers.push(out.clone());
        h = out;
    }
    Ok(DecoderTrace {
        layers,
        logits: logits.expect("validated config ends in sigmoid"),
    })
}

/// Encode, sample once, decode.
pub fn forward<T: Scalar, R: Rng>(params: &ModelParams<T>, x: &Tensor<T>, rng: &mut R) -> Result<ForwardPass<T>> {
    let (encoder_inputs, latent_raw, dist) = encode_tracked(params, x)?;
    let latent = reparameterize(&dist, rng);
    let trace = decode(params, &latent.z)?;
    Ok(ForwardPass {
        encoder_inputs,
        latent_raw,
        dist,
        latent,
        trace,
    })
}

/// Forward pass with explicit noise (`None` decodes the mean).
pub fn forward_with_noise<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>, noise: Option<Tensor<T>>) -> Result<ForwardPass<T>> {
    let (encoder_inputs, latent_raw, dist) = encode_tracked(params, x)?;
    let latent = match noise {
        Some(n) => reparameterize_with(&dist, n),
        None => LatentImage {
            z: dist.mu.clone(),
            noise: None,
        },
    };
    let trace = decode(params, &latent.z)?;
    Ok(ForwardPass {
        encoder_inputs,
        latent_raw,
        dist,
        latent,
        trace,
    })
}

/// Evaluation mode: `z = mu`, no sampling.
pub fn forward_eval<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<ForwardPass<T>> {
    forward_with_noise(params, x, None)
}

/// Loss gradients handed to [`backward`].
pub struct LossGrads<T> {
    /// d loss / d final logits, `[1, n, 28, 28]`.
    pub logits: Tensor<T>,
    /// d loss / d post-activation output of a hidden decoder layer (1-based).
    pub hidden: Vec<(usize, Tensor<T>)>,
    /// Direct gradients w.r.t. the (clamped) mean and log-variance.
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

fn relu_mask<T: Scalar>(grad: &mut Tensor<T>, post: &Tensor<T>) {
    for (g, &y) in grad.data.iter_mut().zip(&post.data) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

fn layer_backward<T: Scalar>(spec: &LayerSpec, p: &LayerParams<T>, x: &Tensor<T>, dy: &Tensor<T>, out: &mut LayerParams<T>) -> Tensor<T> {
    let g = spec.geometry(x.height(), x.width());
    let grads = match spec.kind {
        LayerKind::Conv => nn::conv_backward(x, dy, &p.weight, &g),
        LayerKind::Deconv => nn::deconv_backward(x, dy, &p.weight, &g),
    };
    for (o, v) in out.weight.iter_mut().zip(&grads.weight) {
        *o = *o + *v;
    }
    for (o, v) in out.bias.iter_mut().zip(&grads.bias) {
        *o = *o + *v;
    }
    grads.input
}

/// Backpropagates loss gradients through one [`ForwardPass`], returning
/// parameter gradients.
pub fn backward<T: Scalar>(params: &ModelParams<T>, pass: &ForwardPass<T>, grads: &LossGrads<T>) -> ModelParams<T> {
    let mut out = params.zeros_like();
    let dec_specs = &params.config.decoder;
    let dec_params = &params.layers[ENCODER_LAYERS..];

    // Decoder, last layer first. `dpost` is the gradient w.r.t. the current
    // layer's post-activation output.
    let mut dpost: Option<Tensor<T>> = None;
    for i in (0..DECODER_LAYERS).rev() {
        let spec = &dec_specs[i];
        let post = &pass.trace.layers[i];
        let mut dpre = match spec.activation {
            Activation::Sigmoid => {
                let mut d = grads.logits.clone();
                if let Some(dp) = &dpost {
                    for ((g, &dy), &y) in d.data.iter_mut().zip(&dp.data).zip(&post.data) {
                        *g = *g + dy * y * (T::one() - y);
                    }
                }
                d
            }
            act => {
                let mut d = dpost.take().unwrap_or_else(|| Tensor::zeros(post.channels(), post.batch(), post.height(), post.width()));
                if act == Activation::Relu {
                    relu_mask(&mut d, post);
                }
                d
            }
        };
        // Hidden losses attach to this layer's post-activation output.
        for (layer, g) in &grads.hidden {
            if *layer == i + 1 && spec.activation != Activation::Sigmoid {
                let mut g = g.clone();
                if spec.activation == Activation::Relu {
                    relu_mask(&mut g, post);
                }
                for (d, v) in dpre.data.iter_mut().zip(&g.data) {
                    *d = *d + *v;
                }
            } else if *layer == i + 1 {
                for ((d, &v), &y) in dpre.data.iter_mut().zip(&g.data).zip(&post.data) {
                    *d = *d + v * y * (T::one() - y);
                }
            }
        }
        let input = if i == 0 { &pass.latent.z } else { &pass.trace.layers[i - 1] };
        let dx = layer_backward(spec, &dec_params[i], input, &dpre, &mut out.layers[ENCODER_LAYERS + i]);
        dpost = Some(dx);
    }
    let dz = dpost.expect("decoder has layers");

    // Reparameterization and logvar clamp.
    let mut dmu = grads.mu.clone();
    let mut dlogvar = grads.logvar.clone();
    for (d, g) in dmu.data.iter_mut().zip(&dz.data) {
        *d = *d + *g;
    }
    if let Some(noise) = &pass.latent.noise {
        let half = T::lit(0.5);
        for (((d, &g), &e), &lv) in dlogvar.data.iter_mut().zip(&dz.data).zip(&noise.data).zip(&pass.dist.logvar.data) {
            *d = *d + g * e * half * (half * lv).exp();
        }
    }
    let l = params.config.latent_channels;
    let raw_lv = pass.latent_raw.channel_range(l, 2 * l);
    let (lo, hi) = (T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
    for (d, &r) in dlogvar.data.iter_mut().zip(&raw_lv.data) {
        if r < lo || r > hi {
            *d = T::zero();
        }
    }
    let mut dh = Tensor::concat_channels(&[&dmu, &dlogvar]);

    for i in (0..ENCODER_LAYERS).rev() {
        let spec = &params.config.encoder[i];
        if spec.activation == Activation::Relu {
            let post = if i + 1 < ENCODER_LAYERS { &pass.encoder_inputs[i + 1] } else { &pass.latent_raw };
            relu_mask(&mut dh, post);
        }
        dh = layer_backward(spec, &params.layers[i], &pass.encoder_inputs[i], &dh, &mut out.layers[i]);
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoint files.
//
// Little-endian throughout:
//   "CVAE" | u32 version | str tag | str config-json | u32 count | tensor*
//   | u8 has-optimizer [ | u64 step | u32 count | tensor* ]
// where str = u32 len + utf8 and tensor = str name | u32 ndim | u32 dim*
// | f32 data (row-major).
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVAE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerBlob {
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerBlob>,
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &NamedTensor) {
    put_str(w, &t.name);
    w.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        w.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::BadCheckpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0; 4];
        b.copy_from_slice(self.take(4)?);
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(b))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::BadCheckpoint(e.to_string()))
    }
    fn tensor(&mut self) -> Result<NamedTensor> {
        let name = self.str()?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::BadCheckpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(NamedTensor { name, shape, data })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut w, &self.tag);
        put_str(&mut w, &serde_json::to_string(&self.params.config).expect("config serializes"));
        let names = self.params.tensor_names();
        w.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for ((name, shape), data) in names.into_iter().zip(self.params.tensors()) {
            put_tensor(&mut w, &NamedTensor { name, shape, data: data.clone() });
        }
        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                w.extend_from_slice(&opt.step.to_le_bytes());
                w.extend_from_slice(&(opt.tensors.len() as u32).to_le_bytes());
                for t in &opt.tensors {
                    put_tensor(&mut w, t);
                }
            }
        }
        w
    }

    /// Parses a checkpoint and validates every tensor against the echoed
    /// architecture.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadCheckpoint("missing CVAE magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let tag = r.str()?;
        let config: ArchitectureConfig = serde_json::from_str(&r.str()?).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        let mut params = ModelParams::<f32>::zeros(&config)?;
        let expected = params.tensor_names();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::BadCheckpoint(format!("expected {} tensors, found {count}", expected.len())));
        }
        for ((name, shape), slot) in expected.into_iter().zip(params.tensors_mut()) {
            let t = r.tensor()?;
            if t.name != name || t.shape != shape {
                return Err(Error::BadCheckpoint(format!(
                    "tensor {} {:?} does not match architecture ({name} {shape:?})",
                    t.name, t.shape
                )));
            }
            *slot = t.data;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let n = r.u32()? as usize;
                let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(OptimizerBlob { step, tensors })
            }
            f => return Err(Error::BadCheckpoint(format!("bad optimizer flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::BadCheckpoint("trailing bytes".into()));
        }
        Ok(Self { tag, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Deterministic reconstruction (`z = mu`) of a batch of images.
pub fn reconstruct(params: &ModelParams<f32>, images: &[&Image28]) -> Result<Vec<Image28>> {
    let pass = forward_eval(params, &images_to_tensor(images))?;
    Ok((0..images.len()).map(|n| pass.trace.output_image(n)).collect())
}

/// Flattened `mu` map of one sample in `[L, h, w]` order.
pub fn flatten_latent<T: Scalar>(dist: &LatentDistribution<T>, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dist.mu.channels() * dist.mu.plane());
    for c in 0..dist.mu.channels() {
        out.extend(dist.mu.plane_of(c, n).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
    }
    out
}

/// Inverse of [`flatten_latent`] for a batch of flattened vectors.
pub fn unflatten_latents<T: Scalar>(config: &ArchitectureConfig, vectors: &[Vec<f32>]) -> Result<Tensor<T>> {
    let side = config.validate()?.latent_side();
    let l = config.latent_channels;
    let plane = side * side;
    let mut t = Tensor::zeros(l, vectors.len(), side, side);
    for (n, v) in vectors.iter().enumerate() {
        if v.len() != l * plane {
            return Err(Error::ShapeMismatch(format!("latent vector of length {}, expected {}", v.len(), l * plane)));
        }
        for c in 0..l {
            for (d, &s) in t.plane_of_mut(c, n).iter_mut().zip(&v[c * plane..(c + 1) * plane]) {
                *d = T::lit(s as f64);
            }
        }
    }
    Ok(t)
}

const _: () = assert!(PIXELS == SIDE * SIDE);
