//! The hyperprior autoencoder: analysis/synthesis transforms, quantization,
//! entropy-parameter prediction and the causal context model for the
//! hyper-latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Var};
use crate::entropy::{EntropyError, RESIDUAL_MAX, SCALE_MIN};
use crate::image::PAD_MULTIPLE;
use crate::laplace;
use crate::losses::LossKind;
use crate::lsmnet::LsmHead;
use crate::nn::{Binder, Conv, Module};
use crate::tensor::Tensor;

/// Lower bound on every predicted Laplace scale.
pub const SCALE_BOUND: f64 = SCALE_MIN;
/// Spatial downsampling of the latent relative to the image.
pub const LATENT_STRIDE: usize = 16;
/// Spatial downsampling of the hyper-latent relative to the image.
pub const HYPER_STRIDE: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum NcnError {
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("input {height}x{width} is not padded to a multiple of {PAD_MULTIPLE}")]
    NotPadded { height: usize, width: usize },
    #[error("scale {0} below the lower bound {SCALE_BOUND}")]
    ScaleBelowBound(f64),
    #[error("bitstream declares N={found_n}, N_h={found_nh}; model has N={n}, N_h={nh}")]
    ModelMismatch { n: usize, nh: usize, found_n: usize, found_nh: usize },
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NcnConfig {
    /// Latent channels `N`.
    pub channels: usize,
    /// Hyper-latent channels `N_h`.
    pub hyper_channels: usize,
    /// Width of the intermediate transform layers.
    pub hidden: usize,
    pub kernel: usize,
    pub context_hidden: usize,
}

impl Default for NcnConfig {
    fn default() -> Self {
        Self {
            channels: 192,
            hyper_channels: 192,
            hidden: 192,
            kernel: 5,
            context_hidden: 192,
        }
    }
}

impl NcnConfig {
    /// Narrow configuration for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            channels: 32,
            hyper_channels: 16,
            hidden: 32,
            kernel: 5,
            context_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub loss_kind: LossKind,
    pub lambda: f64,
    /// Index of `lambda` within its sweep; written into bitstream headers.
    pub lambda_id: u8,
    pub dataset_id: String,
    pub epoch: u32,
    pub seed: u64,
    pub config_hash: String,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Hvs,
            lambda: 0.0,
            lambda_id: 0,
            dataset_id: String::new(),
            epoch: 0,
            seed: 0,
            config_hash: String::new(),
        }
    }
}

/// Masked 5x5 convolution followed by two pointwise layers, producing
/// `(mean, scale)` for every hyper-latent element from earlier raster
/// positions only.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextModel {
    pub masked: Conv,
    pub hidden: Conv,
    pub out: Conv,
}

impl ContextModel {
    fn new(rng: &mut impl Rng, channels: usize, hidden: usize, kernel: usize) -> Self {
        Self {
            masked: Conv::new(rng, channels, hidden, kernel, 1),
            hidden: Conv::pointwise(rng, hidden, hidden),
            out: Conv::pointwise(rng, hidden, 2 * channels),
        }
    }

    /// True for kernel taps strictly before the centre in raster order.
    pub fn is_causal_tap(kernel: usize, ky: usize, kx: usize) -> bool {
        let c = kernel / 2;
        ky < c || (ky == c && kx < c)
    }

    fn causal_mask(&self) -> Tensor {
        let [o, i, k, _] = self.masked.weight.shape();
        let mut m = Tensor::zeros([o, i, k, k]);
        for oc in 0..o {
            for ic in 0..i {
                for ky in 0..k {
                    for kx in 0..k {
                        if Self::is_causal_tap(k, ky, kx) {
                            let idx = m.index(oc, ic, ky, kx);
                            m.data_mut()[idx] = 1.0;
                        }
                    }
                }
            }
        }
        m
    }

    /// Differentiable pass over a whole (possibly noisy) hyper-latent.
    pub fn forward(&self, b: &mut Binder<'_>, zhat: Var) -> (Var, Var) {
        let tape = b.tape();
        let w = b.param(&self.masked.weight);
        let mask = tape.constant(self.causal_mask());
        let wm = tape.mul(w, mask);
        let h = tape.relu(self.masked.forward_with_weight(b, zhat, wm));
        let h = tape.relu(self.hidden.forward(b, h));
        let out = self.out.forward(b, h);
        split_mean_scale(tape, out)
    }

    /// Parameters at one position, reading only causal neighbours of
    /// `zhat` (`[1, C, H, W]`). Encoder and decoder both go through here, so
    /// their arithmetic is identical.
    pub fn params_at(&self, zhat: &Tensor, y: usize, x: usize) -> (Vec<f64>, Vec<f64>) {
        let [_, c, h, w] = zhat.shape();
        let k = self.masked.kernel();
        let half = k / 2;
        let hid = self.masked.out_channels();
        let mut h1 = self.masked.bias.data().to_vec();
        for (o, acc) in h1.iter_mut().enumerate() {
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        if !Self::is_causal_tap(k, ky, kx) {
                            continue;
                        }
                        let (sy, sx) = (y as isize + ky as isize - half as isize, x as isize + kx as isize - half as isize);
                        if sy < 0 || sx < 0 || sy as usize >= h || sx as usize >= w {
                            continue;
                        }
                        *acc += self.masked.weight.at(o, ic, ky, kx) * zhat.at(0, ic, sy as usize, sx as usize);
                    }
                }
            }
        }
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let h2 = pointwise(&self.hidden, &h1, hid, true);
        let out = pointwise(&self.out, &h2, self.hidden.out_channels(), false);
        let mean = out[..c].to_vec();
        let scale = out[c..].iter().map(|&r| SCALE_BOUND + softplus(r)).collect();
        (mean, scale)
    }

    /// Parameters of the first scanned element (empty causal context).
    pub fn initial_params(&self, channels: usize) -> (Vec<f64>, Vec<f64>) {
        self.params_at(&Tensor::zeros([1, channels, 1, 1]), 0, 0)
    }
}

fn pointwise(conv: &Conv, input: &[f64], cin: usize, relu: bool) -> Vec<f64> {
    let cout = conv.out_channels();
    (0..cout)
        .map(|o| {
            let mut acc = conv.bias.data()[o];
            for (i, v) in input.iter().enumerate().take(cin) {
                acc += conv.weight.data()[o * cin + i] * v;
            }
            if relu {
                acc.max(0.0)
            } else {
                acc
            }
        })
        .collect()
}

/// First half of the channels is the mean, second half the raw scale,
/// mapped to `SCALE_BOUND + softplus(raw)`.
fn split_mean_scale(tape: &Tape, out: Var) -> (Var, Var) {
    let c = tape.shape(out)[1] / 2;
    let mean = tape.slice_channels(out, 0, c);
    let raw = tape.slice_channels(out, c, c);
    let scale = tape.add_scalar(tape.softplus(raw), SCALE_BOUND);
    (mean, scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NcnWeights {
    pub config: NcnConfig,
    pub g_enc: Vec<Conv>,
    pub g_dec: Vec<Conv>,
    pub h_enc: Vec<Conv>,
    pub h_dec: Vec<Conv>,
    pub context: ContextModel,
    pub meta: TrainingMeta,
    /// Optional latent-masking head; `None` means masking is unavailable.
    pub lsm: Option<LsmHead>,
}

impl NcnWeights {
    pub fn new(config: NcnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, nh, c, k) = (config.channels, config.hyper_channels, config.hidden, config.kernel);
        let g_enc = vec![
            Conv::new(&mut rng, 3, c, k, 2),
            Conv::new(&mut rng, c, c, k, 2),
            Conv::new(&mut rng, c, c, k, 2),
            Conv::new(&mut rng, c, n, k, 2),
        ];
        let g_dec = vec![
            Conv::transposed(&mut rng, n, c, k, 2),
            Conv::transposed(&mut rng, c, c, k, 2),
            Conv::transposed(&mut rng, c, c, k, 2),
            Conv::transposed(&mut rng, c, 3, k, 2),
        ];
        let h_enc = vec![Conv::new(&mut rng, n, nh, k, 2), Conv::new(&mut rng, nh, nh, k, 2)];
        let h_dec = vec![Conv::transposed(&mut rng, nh, nh, k, 2), Conv::transposed(&mut rng, nh, 2 * n, k, 2)];
        let context = ContextModel::new(&mut rng, nh, config.context_hidden, k);
        let mut w = Self {
            config,
            g_enc,
            g_dec,
            h_enc,
            h_dec,
            context,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
            lsm: None,
        };
        // Start decoding near mid-grey and with moderate scales.
        w.g_dec[3].bias.data_mut().fill(0.5);
        w.g_dec[3].weight.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        w.h_dec[1].bias.data_mut()[n..].fill(1.0);
        w
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn hyper_channels(&self) -> usize {
        self.config.hyper_channels
    }

    pub fn analysis(&self, b: &mut Binder<'_>, x: Var) -> Var {
        stack(b, &self.g_enc, x)
    }

    pub fn synthesis(&self, b: &mut Binder<'_>, y: Var) -> Var {
        stack(b, &self.g_dec, y)
    }

    pub fn hyper_analysis(&self, b: &mut Binder<'_>, y: Var) -> Var {
        stack(b, &self.h_enc, y)
    }

    pub fn hyper_synthesis(&self, b: &mut Binder<'_>, zhat: Var) -> (Var, Var) {
        let out = stack(b, &self.h_dec, zhat);
        split_mean_scale(b.tape(), out)
    }

    /// Training-mode pass with the additive-noise surrogate. `alpha`, when
    /// given, soft-masks the latent toward the predicted mean.
    pub fn train_forward(&self, b: &mut Binder<'_>, x: Var, noise: &mut UniformNoise, alpha: Option<Var>) -> TrainForward {
        let tape = b.tape();
        let y = self.analysis(b, x);
        let z = self.hyper_analysis(b, y);
        let z_noisy = tape.add(z, tape.constant(noise.sample(tape.shape(z))));
        let (mean, scale) = self.hyper_synthesis(b, z_noisy);
        let y_masked = match alpha {
            Some(a) => tape.sub(y, tape.mul(a, tape.sub(y, mean))),
            None => y,
        };
        let y_noisy = tape.add(y_masked, tape.constant(noise.sample(tape.shape(y))));
        let bits_latent = tape.sum(tape.laplace_bits(tape.sub(y_noisy, mean), scale));
        let (zmean, zscale) = self.context.forward(b, z_noisy);
        let bits_hyper = tape.sum(tape.laplace_bits(tape.sub(z_noisy, zmean), zscale));
        let x_hat = self.synthesis(b, y_noisy);
        TrainForward {
            x_hat,
            bits_latent,
            bits_hyper,
        }
    }
}

pub struct TrainForward {
    pub x_hat: Var,
    /// Estimated latent bits summed over the batch.
    pub bits_latent: Var,
    pub bits_hyper: Var,
}

fn stack(b: &mut Binder<'_>, layers: &[Conv], mut x: Var) -> Var {
    for (i, layer) in layers.iter().enumerate() {
        x = layer.forward(b, x);
        if i + 1 < layers.len() {
            x = b.tape().relu(x);
        }
    }
    x
}

impl NcnWeights {
    /// Codec parameters with an `ncn.` prefix followed by the masking head's
    /// with an `lsm.` prefix, so one optimizer can own both.
    pub fn all_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = core_params_mut(&mut self.g_enc, &mut self.g_dec, &mut self.h_enc, &mut self.h_dec, &mut self.context)
            .into_iter()
            .map(|(n, t)| (format!("ncn.{n}"), t))
            .collect();
        if let Some(head) = self.lsm.as_mut() {
            out.extend(head.params_mut().into_iter().map(|(n, t)| (format!("lsm.{n}"), t)));
        }
        out
    }
}

fn core_params_mut<'a>(
    g_enc: &'a mut [Conv],
    g_dec: &'a mut [Conv],
    h_enc: &'a mut [Conv],
    h_dec: &'a mut [Conv],
    context: &'a mut ContextModel,
) -> Vec<(String, &'a mut Tensor)> {
    let mut out = Vec::new();
    for (group, layers) in [("g_enc", g_enc), ("g_dec", g_dec), ("h_enc", h_enc), ("h_dec", h_dec)] {
        for (i, l) in layers.iter_mut().enumerate() {
            l.push_params_mut(&format!("{group}.{i}"), &mut out);
        }
    }
    context.masked.push_params_mut("context.masked", &mut out);
    context.hidden.push_params_mut("context.hidden", &mut out);
    context.out.push_params_mut("context.out", &mut out);
    out
}

impl Module for NcnWeights {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (group, layers) in [("g_enc", &self.g_enc), ("g_dec", &self.g_dec), ("h_enc", &self.h_enc), ("h_dec", &self.h_dec)] {
            for (i, l) in layers.iter().enumerate() {
                l.push_params(&format!("{group}.{i}"), &mut out);
            }
        }
        self.context.masked.push_params("context.masked", &mut out);
        self.context.hidden.push_params("context.hidden", &mut out);
        self.context.out.push_params("context.out", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        core_params_mut(&mut self.g_enc, &mut self.g_dec, &mut self.h_enc, &mut self.h_dec, &mut self.context)
    }
}

/// Elementwise `Uniform(-0.5, 0.5)` source for the training surrogate.
pub struct UniformNoise {
    rng: ChaCha8Rng,
}

impl UniformNoise {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, shape: [usize; 4]) -> Tensor {
        let n = crate::tensor::numel(shape);
        Tensor::from_vec(shape, (0..n).map(|_| self.rng.gen::<f64>() - 0.5).collect())
    }
}

pub enum QuantMode<'a> {
    Infer,
    Train(&'a mut UniformNoise),
}

/// Latent `y`, `[1, N, H/16, W/16]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor(pub Tensor);

/// Hyper-latent `z`; integer-valued once quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperLatent(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyParams {
    pub mean: Tensor,
    pub scale: Tensor,
}

/// Integer residuals `r = round(y - mean)`; `y_hat = r + mean`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedResidual {
    pub shape: [usize; 4],
    pub values: Vec<i32>,
}

impl QuantizedResidual {
    pub fn reconstruct(&self, mean: &Tensor) -> Result<LatentTensor, NcnError> {
        if mean.shape() != self.shape {
            return Err(NcnError::ShapeMismatch(mean.shape(), self.shape));
        }
        let data = self.values.iter().zip(mean.data()).map(|(&r, &m)| r as f64 + m).collect();
        Ok(LatentTensor(Tensor::from_vec(self.shape, data)))
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }
}

pub enum Quantized {
    Residual(QuantizedResidual),
    Noisy(LatentTensor),
}

fn check_input(x: &Tensor) -> Result<(), NcnError> {
    if x.c() != 3 {
        return Err(NcnError::ChannelMismatch { expected: 3, found: x.c() });
    }
    if !x.is_finite() {
        return Err(NcnError::NonFinite("input image"));
    }
    if x.h() % PAD_MULTIPLE != 0 || x.w() % PAD_MULTIPLE != 0 || x.h() == 0 || x.w() == 0 {
        return Err(NcnError::NotPadded { height: x.h(), width: x.w() });
    }
    Ok(())
}

/// Runs `g_enc` on an already padded `[1, 3, H, W]` image.
pub fn encode_latent(x: &Tensor, w: &NcnWeights) -> Result<LatentTensor, NcnError> {
    check_input(x)?;
    let tape = Tape::inference();
    let mut b = Binder::frozen(&tape);
    let xv = tape.constant(x.clone());
    let y = w.analysis(&mut b, xv);
    Ok(LatentTensor((*tape.value(y)).clone()))
}

/// Hyper branch: `z = h_enc(y)`, quantized by rounding (infer) or additive
/// noise (train), then `(mean, scale) = h_dec(z_hat)`.
pub fn hyper_forward(y: &LatentTensor, w: &NcnWeights, mode: QuantMode<'_>) -> Result<(HyperLatent, EntropyParams), NcnError> {
    check_latent(&y.0, w)?;
    let tape = Tape::inference();
    let mut b = Binder::frozen(&tape);
    let yv = tape.constant(y.0.clone());
    let z = tape.value(w.hyper_analysis(&mut b, yv));
    let zhat = match mode {
        QuantMode::Infer => z.map(|v| v.round().clamp(-(RESIDUAL_MAX as f64), RESIDUAL_MAX as f64)),
        QuantMode::Train(noise) => z.zip_map(&noise.sample(z.shape()), |a, u| a + u),
    };
    let zhat = HyperLatent(zhat);
    let params = hyper_decode(&zhat, w);
    Ok((zhat, params))
}

/// `(mean, scale) = h_dec(z_hat)`; the decoder's entry into the hyper branch.
pub fn hyper_decode(zhat: &HyperLatent, w: &NcnWeights) -> EntropyParams {
    let tape = Tape::inference();
    let mut b = Binder::frozen(&tape);
    let zv = tape.constant(zhat.0.clone());
    let (mean, scale) = w.hyper_synthesis(&mut b, zv);
    EntropyParams {
        mean: (*tape.value(mean)).clone(),
        scale: (*tape.value(scale)).clone(),
    }
}

fn check_latent(y: &Tensor, w: &NcnWeights) -> Result<(), NcnError> {
    if y.c() != w.channels() {
        return Err(NcnError::ChannelMismatch {
            expected: w.channels(),
            found: y.c(),
        });
    }
    if !y.is_finite() {
        return Err(NcnError::NonFinite("latent"));
    }
    Ok(())
}

/// Infer: integer residual against `mean`. Train: `y + u`.
pub fn quantize(y: &LatentTensor, mean: &Tensor, mode: QuantMode<'_>) -> Result<Quantized, NcnError> {
    if y.0.shape() != mean.shape() {
        return Err(NcnError::ShapeMismatch(y.0.shape(), mean.shape()));
    }
    Ok(match mode {
        QuantMode::Infer => Quantized::Residual(residualize(&y.0, mean)),
        QuantMode::Train(noise) => Quantized::Noisy(LatentTensor(y.0.zip_map(&noise.sample(y.0.shape()), |a, u| a + u))),
    })
}

pub(crate) fn residualize(y: &Tensor, mean: &Tensor) -> QuantizedResidual {
    let values = y
        .data()
        .iter()
        .zip(mean.data())
        .map(|(&v, &m)| ((v - m).round() as i64).clamp(-(RESIDUAL_MAX as i64), RESIDUAL_MAX as i64) as i32)
        .collect();
    QuantizedResidual { shape: y.shape(), values }
}

/// Runs `g_dec`; output clamped to `[0, 1]`, 16x the latent size.
pub fn decode_latent(yhat: &LatentTensor, w: &NcnWeights) -> Result<Tensor, NcnError> {
    check_latent(&yhat.0, w)?;
    let tape = Tape::inference();
    let mut b = Binder::frozen(&tape);
    let yv = tape.constant(yhat.0.clone());
    let out = tape.value(w.synthesis(&mut b, yv));
    Ok(out.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
}

/// Ideal bits of `r` under zero-mean Laplace bins with per-element `scale`.
pub fn estimate_rate(r: &QuantizedResidual, scale: &Tensor) -> Result<f64, NcnError> {
    if scale.shape() != r.shape {
        return Err(NcnError::ShapeMismatch(scale.shape(), r.shape));
    }
    let mut bits = 0.0;
    for (&v, &s) in r.values.iter().zip(scale.data()) {
        if !(s >= SCALE_BOUND) {
            return Err(NcnError::ScaleBelowBound(s));
        }
        bits += laplace::bin_bits(v as f64, s);
    }
    Ok(bits)
}

/// Context-model parameters for every hyper-latent element, in raster order.
pub fn context_model_forward(zhat: &HyperLatent, w: &NcnWeights) -> EntropyParams {
    let [_, c, h, wd] = zhat.0.shape();
    let mut mean = Tensor::zeros([1, c, h, wd]);
    let mut scale = Tensor::zeros([1, c, h, wd]);
    for y in 0..h {
        for x in 0..wd {
            let (m, s) = w.context.params_at(&zhat.0, y, x);
            for ch in 0..c {
                let idx = mean.index(0, ch, y, x);
                mean.data_mut()[idx] = m[ch];
                scale.data_mut()[idx] = s[ch];
            }
        }
    }
    EntropyParams { mean, scale }
}
