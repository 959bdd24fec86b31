//! Latent-space soft masking: a pointwise head on stride-16 analysis features
//! predicts `alpha`, which pulls each latent toward its predicted mean before
//! quantization. The decoder never sees the mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{AnalysisAdapter, AnalysisError, FeatureStage};
use crate::autodiff::{Tape, Var};
use crate::ncn::{LatentTensor, NcnError};
use crate::nn::{Binder, Conv, Module};
use crate::tensor::Tensor;

/// Default bias of a freshly attached head: `sigmoid(-4) ~ 0.018`.
pub const DEFAULT_INIT_BIAS: f64 = -4.0;

#[derive(Debug, thiserror::Error)]
pub enum LsmError {
    #[error("model has no masking head")]
    NoHead,
    #[error("a masking head is already attached")]
    AlreadyAttached,
    #[error("masking needs stride-16 features: {0}")]
    FeaturesUnavailable(AnalysisError),
    #[error("feature grid {features:?} does not match latent grid {latent:?}")]
    SpatialMismatch { features: [usize; 2], latent: [usize; 2] },
    #[error("head expects {expected} feature channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("mask values must be finite and within [0, 1]")]
    OutOfRange,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error(transparent)]
    Ncn(#[from] NcnError),
}

/// `alpha` per latent element, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor(Tensor);

impl MaskTensor {
    pub fn new(alpha: Tensor) -> Result<Self, LsmError> {
        if alpha.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(LsmError::OutOfRange);
        }
        Ok(Self(alpha))
    }

    /// The same `alpha` everywhere.
    pub fn uniform(shape: [usize; 4], alpha: f64) -> Result<Self, LsmError> {
        Self::new(Tensor::full(shape, alpha))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.sum() / self.0.len() as f64
    }
}

/// Pointwise projection from analysis features to one logit per latent
/// channel, followed by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct LsmHead {
    pub projection: Conv,
    pub stage: FeatureStage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LsmInit {
    /// Zero weights and a constant bias.
    Constant { bias: f64 },
    /// He-uniform weights scaled by `gain`, plus a constant bias.
    Random { seed: u64, gain: f64, bias: f64 },
}

impl Default for LsmInit {
    fn default() -> Self {
        LsmInit::Constant { bias: DEFAULT_INIT_BIAS }
    }
}

impl LsmHead {
    pub fn new(feature_channels: usize, latent_channels: usize, init: LsmInit) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(match init {
            LsmInit::Random { seed, .. } => seed,
            LsmInit::Constant { .. } => 0,
        });
        let mut projection = Conv::pointwise(&mut rng, feature_channels, latent_channels);
        let bias = match init {
            LsmInit::Constant { bias } => {
                projection.weight.data_mut().fill(0.0);
                bias
            }
            LsmInit::Random { gain, bias, .. } => {
                projection.weight.data_mut().iter_mut().for_each(|v| *v *= gain);
                bias
            }
        };
        projection.bias.data_mut().fill(bias);
        Self {
            projection,
            stage: FeatureStage::C16,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.projection.in_channels()
    }

    pub fn latent_channels(&self) -> usize {
        self.projection.out_channels()
    }

    /// `sigmoid(W f + b)` on a differentiable feature map.
    pub fn forward(&self, b: &mut Binder<'_>, features: Var) -> Var {
        let logits = self.projection.forward(b, features);
        b.tape().sigmoid(logits)
    }

    /// Differentiable `alpha` for the image batch `x` (features are frozen
    /// and detached from `x`).
    pub fn alpha(&self, b: &mut Binder<'_>, x: Var, analysis: &dyn AnalysisAdapter) -> Result<Var, LsmError> {
        let tape = b.tape();
        let xd = tape.detach(x);
        let f = analysis.features(tape, xd, self.stage).map_err(LsmError::FeaturesUnavailable)?;
        let f = tape.detach(f);
        let c = tape.shape(f)[1];
        if c != self.feature_channels() {
            return Err(LsmError::ChannelMismatch {
                expected: self.feature_channels(),
                found: c,
            });
        }
        Ok(self.forward(b, f))
    }
}

impl Module for LsmHead {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.projection.push_params("projection", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.projection.push_params_mut("projection", &mut out);
        out
    }
}

/// `alpha` for one padded image `x` (`[1, 3, H, W]`); the result has the
/// latent grid `H/16 x W/16`.
pub fn compute_mask(x: &Tensor, analysis: &dyn AnalysisAdapter, head: &LsmHead) -> Result<MaskTensor, LsmError> {
    let tape = Tape::inference();
    let mut b = Binder::frozen(&tape);
    let xv = tape.constant(x.clone());
    let a = head.alpha(&mut b, xv, analysis)?;
    let alpha = (*tape.value(a)).clone();
    let latent = [x.h() / crate::ncn::LATENT_STRIDE, x.w() / crate::ncn::LATENT_STRIDE];
    if [alpha.h(), alpha.w()] != latent {
        return Err(LsmError::SpatialMismatch {
            features: [alpha.h(), alpha.w()],
            latent,
        });
    }
    MaskTensor::new(alpha)
}

/// `y' = y - alpha * (y - mean)`.
pub fn apply_mask(y: &LatentTensor, mean: &Tensor, alpha: &MaskTensor) -> Result<LatentTensor, LsmError> {
    if y.0.shape() != mean.shape() {
        return Err(LsmError::ShapeMismatch(y.0.shape(), mean.shape()));
    }
    if y.0.shape() != alpha.0.shape() {
        return Err(LsmError::ShapeMismatch(y.0.shape(), alpha.0.shape()));
    }
    let mut out = y.0.clone();
    for ((v, &m), &a) in out.data_mut().iter_mut().zip(mean.data()).zip(alpha.0.data()) {
        *v -= a * (*v - m);
    }
    Ok(LatentTensor(out))
}
