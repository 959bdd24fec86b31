//! Distortion terms and the Lagrangian rate-distortion objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisAdapter, AnalysisError, FeatureStage, ImageAnnotation};
use crate::autodiff::{Tape, Var};

/// Distortion family a codec was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hvs,
    Task,
    Feature,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Hvs, LossKind::Task, LossKind::Feature];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hvs" => Some(Self::Hvs),
            "task" => Some(Self::Task),
            "feature" => Some(Self::Feature),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hvs => "hvs",
            Self::Task => "task",
            Self::Feature => "feature",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{0} loss needs an analysis network")]
    MissingAnalysis(LossKind),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub const DEFAULT_SSIM_WEIGHT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda: f64,
    #[serde(default = "default_ssim_weight")]
    pub ssim_weight: f64,
    #[serde(default = "default_feature_stage")]
    pub feature_stage: FeatureStage,
}

fn default_ssim_weight() -> f64 {
    DEFAULT_SSIM_WEIGHT
}

fn default_feature_stage() -> FeatureStage {
    FeatureStage::P4
}

impl LossConfig {
    pub fn new(kind: LossKind, lambda: f64) -> Result<Self, LossError> {
        let cfg = Self {
            kind,
            lambda,
            ssim_weight: DEFAULT_SSIM_WEIGHT,
            feature_stage: default_feature_stage(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(LossError::InvalidLambda(self.lambda));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub distortion: f64,
    pub rate_latent_bits: f64,
    pub rate_hyper_bits: f64,
    pub pixels: f64,
    pub total: f64,
}

impl LossReport {
    pub fn bpp(&self) -> f64 {
        (self.rate_latent_bits + self.rate_hyper_bits) / self.pixels
    }
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Smallest side length that still gets its own scale.
const MIN_SCALE_SIDE: usize = 4;

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Window length used at a scale whose shorter side is `side`.
pub fn window_for(side: usize) -> usize {
    let k = SSIM_WINDOW.min(side);
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

/// Scales evaluated for an image with shorter side `side`, at most five.
pub fn scale_count(side: usize) -> usize {
    let mut m = 1;
    let mut s = side;
    while m < MS_SSIM_WEIGHTS.len() && s.div_ceil(2) >= MIN_SCALE_SIDE {
        s = s.div_ceil(2);
        m += 1;
    }
    m
}

/// Differentiable MS-SSIM of two `[B, C, H, W]` batches, averaged over
/// batch and channels. Small inputs use fewer scales with renormalized
/// weights.
pub fn ms_ssim(tape: &Tape, x: Var, y: Var) -> Var {
    let [_, _, h, w] = tape.shape(x);
    let m = scale_count(h.min(w));
    let wsum: f64 = MS_SSIM_WEIGHTS[..m].iter().sum();
    let (mut a, mut b) = (x, y);
    let mut log_acc: Option<Var> = None;
    for j in 0..m {
        let [_, _, sh, sw] = tape.shape(a);
        let win = Rc::new(gaussian_window(window_for(sh.min(sw)), SSIM_SIGMA));
        let (ssim_v, cs_v) = ssim_terms(tape, a, b, win);
        let term = if j + 1 == m { ssim_v } else { cs_v };
        let lg = tape.scale(tape.ln(tape.clamp_min(term, 1e-12)), MS_SSIM_WEIGHTS[j] / wsum);
        log_acc = Some(match log_acc {
            Some(acc) => tape.add(acc, lg),
            None => lg,
        });
        if j + 1 < m {
            a = tape.avg_pool2(a);
            b = tape.avg_pool2(b);
        }
    }
    tape.mean(tape.exp(log_acc.expect("at least one scale")))
}

/// Per-(batch, channel) mean SSIM and contrast-structure terms.
fn ssim_terms(tape: &Tape, x: Var, y: Var, win: Rc<Vec<f64>>) -> (Var, Var) {
    let f = |v: Var| tape.filter_valid(v, Rc::clone(&win));
    let mu_x = f(x);
    let mu_y = f(y);
    let mu_xx = tape.mul(mu_x, mu_x);
    let mu_yy = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let s_xx = tape.sub(f(tape.mul(x, x)), mu_xx);
    let s_yy = tape.sub(f(tape.mul(y, y)), mu_yy);
    let s_xy = tape.sub(f(tape.mul(x, y)), mu_xy);
    let cs_map = tape.div(
        tape.add_scalar(tape.scale(s_xy, 2.0), C2),
        tape.add_scalar(tape.add(s_xx, s_yy), C2),
    );
    let lum = tape.div(
        tape.add_scalar(tape.scale(mu_xy, 2.0), C1),
        tape.add_scalar(tape.add(mu_xx, mu_yy), C1),
    );
    let ssim_map = tape.mul(lum, cs_map);
    (tape.mean_hw(ssim_map), tape.mean_hw(cs_map))
}

fn check_same(tape: &Tape, a: Var, b: Var) -> Result<(), LossError> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(LossError::ShapeMismatch(sa, sb));
    }
    Ok(())
}

/// `MSE + ssim_weight * (1 - MS-SSIM)`.
pub fn d_hvs(tape: &Tape, x: Var, x_hat: Var, ssim_weight: f64) -> Result<Var, LossError> {
    check_same(tape, x, x_hat)?;
    let mse = tape.mean(tape.square(tape.sub(x_hat, x)));
    let ms = ms_ssim(tape, x, x_hat);
    Ok(tape.add(mse, tape.add_scalar(tape.scale(ms, -ssim_weight), ssim_weight)))
}

/// Sum of squared differences between `stage` features of `x` and `x_hat`,
/// divided by the batch size. Gradients reach `x_hat` only.
pub fn d_feature(tape: &Tape, x: Var, x_hat: Var, analysis: &dyn AnalysisAdapter, stage: FeatureStage) -> Result<Var, LossError> {
    check_same(tape, x, x_hat)?;
    let n = tape.shape(x)[0] as f64;
    let xd = tape.detach(x);
    let fx = tape.detach(analysis.features(tape, xd, stage)?);
    let fy = analysis.features(tape, x_hat, stage)?;
    Ok(tape.scale(tape.sum(tape.square(tape.sub(fy, fx))), 1.0 / n))
}

/// The frozen analysis network's own loss on the reconstruction.
pub fn task_loss(tape: &Tape, x_hat: Var, gt: &[ImageAnnotation], analysis: &dyn AnalysisAdapter) -> Result<Var, LossError> {
    Ok(analysis.loss(tape, x_hat, gt)?)
}

/// Estimated bits of a batch, summed over images.
#[derive(Clone, Copy, Debug)]
pub struct RateTerms {
    pub latent_bits: Var,
    pub hyper_bits: Var,
    /// Pixel count of the whole batch.
    pub pixels: f64,
}

/// Optional inputs that only some loss kinds need.
#[derive(Clone, Copy, Default)]
pub struct LossContext<'a> {
    pub analysis: Option<&'a dyn AnalysisAdapter>,
    pub annotations: Option<&'a [ImageAnnotation]>,
}

/// Distortion of the configured kind, chosen without any HVS regularizer for
/// the machine-oriented kinds.
pub fn distortion(tape: &Tape, x: Var, x_hat: Var, cfg: &LossConfig, ctx: LossContext<'_>) -> Result<Var, LossError> {
    match cfg.kind {
        LossKind::Hvs => d_hvs(tape, x, x_hat, cfg.ssim_weight),
        LossKind::Feature => {
            let a = ctx.analysis.ok_or(LossError::MissingAnalysis(cfg.kind))?;
            d_feature(tape, x, x_hat, a, cfg.feature_stage)
        }
        LossKind::Task => {
            let a = ctx.analysis.ok_or(LossError::MissingAnalysis(cfg.kind))?;
            let n = tape.shape(x_hat)[0];
            let gt = ctx.annotations.ok_or(AnalysisError::MissingAnnotations { images: n, annotations: 0 })?;
            task_loss(tape, x_hat, gt, a)
        }
    }
}

/// `distortion + lambda * (R_latent + R_hyper) / pixels`.
pub fn total_loss(tape: &Tape, distortion: Var, rate: RateTerms, cfg: &LossConfig) -> Result<(Var, LossReport), LossError> {
    cfg.validate()?;
    assemble(tape, distortion, rate, cfg.lambda)
}

/// As [`total_loss`] but accepting any non-negative `lambda`, including 0.
pub fn assemble(tape: &Tape, distortion: Var, rate: RateTerms, lambda: f64) -> Result<(Var, LossReport), LossError> {
    let d = tape.item(distortion);
    let rl = tape.item(rate.latent_bits);
    let rh = tape.item(rate.hyper_bits);
    for (v, name) in [(d, "distortion"), (rl, "latent rate"), (rh, "hyper rate")] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let r = tape.add(rate.latent_bits, rate.hyper_bits);
    let total = tape.add(distortion, tape.scale(r, lambda / rate.pixels));
    let report = LossReport {
        distortion: d,
        rate_latent_bits: rl,
        rate_hyper_bits: rh,
        pixels: rate.pixels,
        total: tape.item(total),
    };
    Ok((total, report))
}
