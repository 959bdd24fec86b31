//! Training orchestration: phased plans, lambda sweeps, masking-head
//! attachment, resumable checkpoints and per-epoch logs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{AnalysisAdapter, AnalysisError, FeatureStage, ImageAnnotation, ObjectAnnotation, Sample};
use crate::autodiff::Tape;
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::codec::{self, CodecError};
use crate::image::{ImageTensor, PAD_MULTIPLE};
use crate::losses::{self, LossConfig, LossContext, LossError, LossKind, RateTerms, DEFAULT_SSIM_WEIGHT};
use crate::lsmnet::{LsmError, LsmHead, LsmInit};
use crate::metrics::{self, MetricError, QualityKind, RdCurve, RdPoint};
use crate::ncn::{NcnConfig, NcnWeights, UniformNoise};
use crate::nn::{Adam, Binder, Module};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("plan parse error: {0}")]
    PlanParse(#[from] toml::de::Error),
    #[error("dataset `{0}` is empty or missing")]
    EmptyDataset(String),
    #[error("image {height}x{width} smaller than crop {crop}")]
    ImageTooSmall { height: usize, width: usize, crop: usize },
    #[error("non-finite loss in phase `{phase}` epoch {epoch}; last good checkpoint kept")]
    NumericFailure { phase: String, epoch: u32, last_good: Box<Checkpoint> },
    #[error("freeze contract violated: {0} changed")]
    FreezeViolation(&'static str),
    #[error("LSMnet is already attached")]
    AlreadyAttached,
    #[error("phase `{0}` trains the masking head but none is attached")]
    NoHead(String),
    #[error("at least two lambda values are required for a sweep")]
    TooFewLambdas,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Mask(#[from] LsmError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeFlags {
    pub ncn: bool,
    pub lsm_head: bool,
    pub analysis: bool,
}

impl Default for FreezeFlags {
    fn default() -> Self {
        Self {
            ncn: false,
            lsm_head: false,
            analysis: true,
        }
    }
}

fn default_batch() -> usize {
    4
}
fn default_crop() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_ssim() -> f64 {
    DEFAULT_SSIM_WEIGHT
}
fn default_stage() -> FeatureStage {
    FeatureStage::P4
}
fn default_gain() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub loss: LossKind,
    pub dataset: String,
    pub epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Learning rate of the masking head, when it should differ from the codec's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_learning_rate: Option<f64>,
    /// One entry per trained model; later phases may leave this empty to
    /// keep each model's current lambda.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    /// Optional rate targets, one per lambda. When set, lambda is adapted
    /// during training so the estimated rate tracks the target.
    #[serde(default)]
    pub target_bpp: Vec<f64>,
    /// Step size of the multiplicative lambda update.
    #[serde(default = "default_gain")]
    pub rate_gain: f64,
    #[serde(default)]
    pub freeze: FreezeFlags,
    /// Attach a fresh masking head before this phase starts.
    #[serde(default)]
    pub attach_lsmnet: bool,
    #[serde(default = "default_ssim")]
    pub ssim_weight: f64,
    #[serde(default = "default_stage")]
    pub feature_stage: FeatureStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub seed: u64,
    #[serde(default = "NcnConfig::desk")]
    pub model: NcnConfig,
    pub phases: Vec<PhaseSpec>,
}

impl TrainPlan {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let plan: TrainPlan = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    /// Short SHA-256 of the canonical serialization.
    pub fn config_hash(&self) -> String {
        config_hash(&self.to_toml())
    }

    pub fn num_models(&self) -> usize {
        self.phases.first().map_or(0, |p| p.lambdas.len())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidPlan(m));
        let Some(first) = self.phases.first() else {
            return bad("no phases".into());
        };
        if first.lambdas.is_empty() {
            return bad("the first phase needs at least one lambda".into());
        }
        let n = first.lambdas.len();
        for p in &self.phases {
            if !p.freeze.analysis {
                return bad(format!("phase `{}`: the analysis network is always frozen", p.name));
            }
            if p.crop == 0 || p.crop % PAD_MULTIPLE != 0 {
                return bad(format!("phase `{}`: crop {} not a multiple of {PAD_MULTIPLE}", p.name, p.crop));
            }
            if p.batch_size == 0 {
                return bad(format!("phase `{}`: batch size 0", p.name));
            }
            if !(p.learning_rate > 0.0) || p.head_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
                return bad(format!("phase `{}`: learning rate must be positive", p.name));
            }
            if !p.lambdas.is_empty() && p.lambdas.len() != n {
                return bad(format!("phase `{}`: {} lambdas, expected {n}", p.name, p.lambdas.len()));
            }
            if p.lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                return bad(format!("phase `{}`: lambdas must be positive", p.name));
            }
            if !p.target_bpp.is_empty() && p.target_bpp.len() != n {
                return bad(format!("phase `{}`: {} rate targets, expected {n}", p.name, p.target_bpp.len()));
            }
            if p.freeze.ncn && p.freeze.lsm_head {
                return bad(format!("phase `{}` freezes everything", p.name));
            }
        }
        Ok(())
    }
}

pub fn config_hash(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// One line of the per-epoch CSV log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub model: usize,
    pub phase: String,
    pub loss: LossKind,
    pub epoch: u32,
    pub lambda: f64,
    pub total: f64,
    pub distortion: f64,
    pub bpp: f64,
    pub seconds: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `model_<i>.ncnw` checkpoints and `log_<i>.csv`.
    pub out_dir: Option<PathBuf>,
    /// Continue from checkpoints found in `out_dir`.
    pub resume: bool,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
    /// Starting models, one per lambda, instead of fresh initializations.
    pub init: Option<Vec<Checkpoint>>,
}

pub struct Datasets<'a> {
    pub sets: HashMap<String, &'a [Sample]>,
}

impl<'a> Datasets<'a> {
    pub fn single(name: &str, samples: &'a [Sample]) -> Self {
        let mut sets = HashMap::new();
        sets.insert(name.to_string(), samples);
        Self { sets }
    }

    fn get(&self, name: &str) -> Result<&'a [Sample], TrainError> {
        match self.sets.get(name) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(TrainError::EmptyDataset(name.to_string())),
        }
    }
}

fn derived_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Trains one model per lambda of the first phase, running every phase in
/// order for each.
pub fn train(
    plan: &TrainPlan,
    data: &Datasets<'_>,
    analysis: Option<&dyn AnalysisAdapter>,
    mut opts: TrainOptions<'_>,
) -> Result<Vec<Checkpoint>, TrainError> {
    plan.validate()?;
    let hash = plan.config_hash();
    if let Some(init) = &opts.init {
        if init.len() != plan.num_models() {
            return Err(TrainError::InvalidPlan(format!("{} initial models for {} lambdas", init.len(), plan.num_models())));
        }
    }
    let mut out = Vec::new();
    for model in 0..plan.num_models() {
        let path = opts.out_dir.as_ref().map(|d| d.join(format!("model_{model}.ncnw")));
        let mut ckpt = match &path {
            Some(p) if opts.resume && p.exists() => checkpoint::load(p)?,
            _ if opts.init.is_some() => {
                let mut c = opts.init.as_ref().expect("checked")[model].clone();
                c.epoch = 0;
                c.optimizer = None;
                c.weights.meta.lambda_id = model as u8;
                c.weights.meta.config_hash = hash.clone();
                c.notes.insert("phase".into(), "0".into());
                c
            }
            _ => {
                let mut w = NcnWeights::new(plan.model, derived_seed(&[plan.seed, model as u64]));
                w.meta.seed = plan.seed;
                w.meta.lambda_id = model as u8;
                w.meta.lambda = plan.phases[0].lambdas[model];
                w.meta.config_hash = hash.clone();
                let mut c = Checkpoint::new(w);
                c.notes.insert("phase".into(), "0".into());
                c
            }
        };
        let log_path = opts.out_dir.as_ref().map(|d| d.join(format!("log_{model}.csv")));
        let mut log = match &log_path {
            Some(p) => Some(EpochLog::open(p, &hash, opts.resume)?),
            None => None,
        };
        let start_phase: usize = ckpt.notes.get("phase").and_then(|v| v.parse().ok()).unwrap_or(0);
        for (pi, phase) in plan.phases.iter().enumerate().skip(start_phase) {
            if pi != start_phase || ckpt.notes.get("phase").map(String::as_str) != Some(&pi.to_string()) {
                ckpt.epoch = 0;
                ckpt.optimizer = None;
                ckpt.notes.insert("phase".into(), pi.to_string());
            }
            let mut sink = |rec: &EpochRecord| -> Result<(), TrainError> {
                if let Some(l) = log.as_mut() {
                    l.append(rec)?;
                }
                if let Some(cb) = opts.on_epoch.as_mut() {
                    cb(rec);
                }
                Ok(())
            };
            let save = |c: &Checkpoint| -> Result<(), TrainError> {
                if let Some(p) = &path {
                    checkpoint::save(p, c)?;
                }
                Ok(())
            };
            run_phase(&mut ckpt, plan, pi, model, data.get(&phase.dataset)?, analysis, &mut sink, &save)?;
        }
        if let Some(p) = &path {
            checkpoint::save(p, &ckpt)?;
        }
        out.push(ckpt);
    }
    Ok(out)
}

/// Square crop of a sample. Boxes are shifted into crop coordinates and
/// clipped; objects whose centre leaves the crop are dropped.
fn random_crop(rng: &mut ChaCha8Rng, s: &Sample, crop: usize) -> Result<(Tensor, ImageAnnotation), TrainError> {
    let (h, w) = (s.image.height(), s.image.width());
    if h < crop || w < crop {
        return Err(TrainError::ImageTooSmall { height: h, width: w, crop });
    }
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    let (fx, fy, c) = (x0 as f64, y0 as f64, crop as f64);
    let objects = s
        .annotation
        .objects
        .iter()
        .filter_map(|o| {
            let [x1, y1, x2, y2] = o.bbox;
            let (cx, cy) = ((x1 + x2) / 2.0 - fx, (y1 + y2) / 2.0 - fy);
            if !(0.0..c).contains(&cx) || !(0.0..c).contains(&cy) {
                return None;
            }
            let bbox = [(x1 - fx).max(0.0), (y1 - fy).max(0.0), (x2 - fx).min(c), (y2 - fy).min(c)];
            Some(ObjectAnnotation { class: o.class, bbox })
        })
        .collect();
    let ann = ImageAnnotation {
        image: s.annotation.image.clone(),
        objects,
    };
    Ok((s.image.crop(y0, x0, crop, crop).into_tensor(), ann))
}

/// Runs one phase for one model, resuming at `ckpt.epoch`.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    ckpt: &mut Checkpoint,
    plan: &TrainPlan,
    phase_idx: usize,
    model: usize,
    data: &[Sample],
    analysis: Option<&dyn AnalysisAdapter>,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<(), TrainError>,
    save: &dyn Fn(&Checkpoint) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    let phase = &plan.phases[phase_idx];
    if phase.attach_lsmnet && ckpt.epoch == 0 && ckpt.weights.lsm.is_none() {
        let a = analysis.ok_or_else(|| LsmError::FeaturesUnavailable(AnalysisError::EmptyDataset))?;
        *ckpt = attach_lsmnet(ckpt, a, LsmInit::default())?;
    }
    if !phase.freeze.lsm_head && ckpt.weights.lsm.is_none() && phase.freeze.ncn {
        return Err(TrainError::NoHead(phase.name.clone()));
    }
    if ckpt.epoch == 0 {
        if let Some(&l) = phase.lambdas.get(model) {
            ckpt.weights.meta.lambda = l;
        }
        ckpt.weights.meta.loss_kind = phase.loss;
        ckpt.weights.meta.dataset_id = phase.dataset.clone();
    }
    let target = phase.target_bpp.get(model).copied();
    let loss_cfg = LossConfig {
        kind: phase.loss,
        lambda: ckpt.weights.meta.lambda,
        ssim_weight: phase.ssim_weight,
        feature_stage: phase.feature_stage,
    };
    loss_cfg.validate()?;
    let ncn_sum = ckpt.weights.checksum();
    let analysis_sum = analysis.and_then(|a| a.parameter_checksum());
    let mut opt = ckpt.optimizer.take().unwrap_or_else(|| Adam::new(phase.learning_rate));
    let masked = ckpt.weights.lsm.is_some();
    while ckpt.epoch < phase.epochs {
        let started = Instant::now();
        let last_good = ckpt.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(&[plan.seed, model as u64, phase_idx as u64, ckpt.epoch as u64]));
        let mut noise = UniformNoise::new(rng.gen());
        // Each epoch's order depends only on its seed, so a resumed run sees the same batches.
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_d, mut sum_bpp, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(phase.batch_size) {
            let (crops, gt): (Vec<Tensor>, Vec<ImageAnnotation>) = chunk
                .iter()
                .map(|&i| random_crop(&mut rng, &data[i], phase.crop))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .unzip();
            let x = Tensor::stack(&crops);
            let pixels = (x.n() * x.h() * x.w()) as f64;
            let lambda = ckpt.weights.meta.lambda;
            let (report, ncn_grads, lsm_grads) = {
                let tape = Tape::new();
                let w = &ckpt.weights;
                let mut b_ncn = Binder::new(&tape, !phase.freeze.ncn);
                let mut b_lsm = Binder::new(&tape, !phase.freeze.lsm_head);
                let xv = tape.constant(x);
                let alpha = match (&w.lsm, masked) {
                    (Some(head), true) => {
                        let a = analysis.ok_or_else(|| LsmError::FeaturesUnavailable(AnalysisError::EmptyDataset))?;
                        Some(head.alpha(&mut b_lsm, xv, a)?)
                    }
                    _ => None,
                };
                let fwd = w.train_forward(&mut b_ncn, xv, &mut noise, alpha);
                let ctx = LossContext {
                    analysis,
                    annotations: Some(&gt),
                };
                let d = losses::distortion(&tape, xv, fwd.x_hat, &loss_cfg, ctx)?;
                let rate = RateTerms {
                    latent_bits: fwd.bits_latent,
                    hyper_bits: fwd.bits_hyper,
                    pixels,
                };
                let (total, report) = match losses::assemble(&tape, d, rate, lambda) {
                    Ok(v) => v,
                    Err(LossError::NonFinite(_)) => {
                        *ckpt = last_good;
                        save(ckpt)?;
                        return Err(TrainError::NumericFailure {
                            phase: phase.name.clone(),
                            epoch: ckpt.epoch,
                            last_good: Box::new(ckpt.clone()),
                        });
                    }
                    Err(e) => return Err(e.into()),
                };
                let mut grads = tape.backward(total);
                (report, b_ncn.collect(&mut grads), b_lsm.collect(&mut grads))
            };
            let mut grads = ncn_grads;
            grads.merge(lsm_grads);
            if !grads.global_norm().is_finite() {
                *ckpt = last_good;
                save(ckpt)?;
                return Err(TrainError::NumericFailure {
                    phase: phase.name.clone(),
                    epoch: ckpt.epoch,
                    last_good: Box::new(ckpt.clone()),
                });
            }
            let head_lr = phase.head_learning_rate.unwrap_or(phase.learning_rate);
            opt.update_with(ckpt.weights.all_params_mut(), &grads, |name| {
                if name.starts_with("lsm.") {
                    head_lr
                } else {
                    phase.learning_rate
                }
            });
            if let Some(t) = target {
                let step = phase.rate_gain * ((report.bpp() - t) / t).clamp(-1.0, 1.0);
                ckpt.weights.meta.lambda = (lambda * step.exp()).clamp(1e-9, 1e9);
            }
            sum_total += report.total;
            sum_d += report.distortion;
            sum_bpp += report.bpp();
            batches += 1;
        }
        ckpt.epoch += 1;
        ckpt.weights.meta.epoch += 1;
        let n = batches.max(1) as f64;
        ckpt.loss_history.push(sum_total / n);
        ckpt.optimizer = Some(opt.clone());
        let rec = EpochRecord {
            model,
            phase: phase.name.clone(),
            loss: phase.loss,
            epoch: ckpt.epoch,
            lambda: ckpt.weights.meta.lambda,
            total: sum_total / n,
            distortion: sum_d / n,
            bpp: sum_bpp / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        save(ckpt)?;
        sink(&rec)?;
    }
    ckpt.optimizer = Some(opt);
    if phase.freeze.ncn && ckpt.weights.checksum() != ncn_sum {
        return Err(TrainError::FreezeViolation("codec weights"));
    }
    if analysis.and_then(|a| a.parameter_checksum()) != analysis_sum {
        return Err(TrainError::FreezeViolation("analysis weights"));
    }
    Ok(())
}

/// Appends epoch records to a CSV file whose first line carries the config
/// hash as a `#` comment.
pub struct EpochLog {
    file: std::fs::File,
}

impl EpochLog {
    pub const HEADER: &'static str = "model,phase,loss,epoch,lambda,total,distortion,bpp,seconds";

    pub fn open(path: &Path, config_hash: &str, append: bool) -> Result<Self, TrainError> {
        use std::io::Write;
        let exists = path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)?;
        if !append || !exists {
            writeln!(file, "# config_hash={config_hash}")?;
            writeln!(file, "{}", Self::HEADER)?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, r: &EpochRecord) -> Result<(), TrainError> {
        use std::io::Write;
        writeln!(
            self.file,
            "{},{},{},{},{},{},{},{},{:.3}",
            r.model, r.phase, r.loss, r.epoch, r.lambda, r.total, r.distortion, r.bpp, r.seconds
        )?;
        Ok(())
    }
}

/// Adds a masking head fed by `analysis`'s stride-16 features. Codec
/// weights are untouched.
pub fn attach_lsmnet(ckpt: &Checkpoint, analysis: &dyn AnalysisAdapter, init: LsmInit) -> Result<Checkpoint, TrainError> {
    if ckpt.weights.lsm.is_some() {
        return Err(TrainError::AlreadyAttached);
    }
    let tape = Tape::inference();
    let probe = tape.constant(Tensor::zeros([1, 3, PAD_MULTIPLE, PAD_MULTIPLE]));
    let f = analysis
        .features(&tape, probe, FeatureStage::C16)
        .map_err(LsmError::FeaturesUnavailable)?;
    let channels = tape.shape(f)[1];
    let mut out = ckpt.clone();
    out.weights.lsm = Some(LsmHead::new(channels, ckpt.weights.channels(), init));
    Ok(out)
}

/// Removes the masking head and its optimizer state.
pub fn detach_lsmnet(ckpt: &Checkpoint) -> Checkpoint {
    let mut out = ckpt.clone();
    out.weights.lsm = None;
    if let Some(opt) = out.optimizer.as_mut() {
        opt.state.retain(|k, _| !k.starts_with("lsm."));
    }
    out
}

/// Real-bitstream evaluation of one model on a labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub wap: Option<f64>,
    pub images: usize,
}

impl EvalReport {
    pub fn quality(&self, kind: QualityKind) -> Option<f64> {
        match kind {
            QualityKind::Psnr => Some(self.psnr),
            QualityKind::MsSsim => Some(self.ms_ssim),
            QualityKind::Wap => self.wap,
        }
    }
}

/// Encodes every image to a real bitstream, decodes it with the plain
/// decoder and scores the reconstructions. With `use_mask`, the model's
/// masking head drives the encoder.
pub fn evaluate(
    w: &NcnWeights,
    samples: &[Sample],
    analysis: Option<&dyn AnalysisAdapter>,
    num_classes: usize,
    use_mask: bool,
) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation".into()));
    }
    let (mut bits, mut pixels, mut psnr, mut ssim) = (0.0, 0.0, 0.0, 0.0);
    let mut decoded = Vec::with_capacity(samples.len());
    for s in samples {
        let enc = if use_mask {
            let a = analysis.ok_or(LsmError::NoHead)?;
            codec::masked_encode(&s.image, w, a)?
        } else {
            codec::encode_image(&s.image, w, None)?
        };
        let bytes = enc.bytes();
        let img = codec::decode_bitstream(&bytes, w)?;
        bits += bytes.len() as f64 * 8.0;
        pixels += s.image.num_pixels() as f64;
        psnr += metrics::psnr(s.image.tensor(), img.tensor())?;
        ssim += metrics::ms_ssim(s.image.tensor(), img.tensor())?;
        decoded.push(img);
    }
    let n = samples.len() as f64;
    let wap = match analysis {
        Some(a) if num_classes > 0 => {
            let refs: Vec<&ImageTensor> = decoded.iter().collect();
            Some(crate::analysis::evaluate_wap_on(a, &refs, samples, num_classes)?)
        }
        _ => None,
    };
    Ok(EvalReport {
        bpp: bits / pixels,
        psnr: psnr / n,
        ms_ssim: ssim / n,
        wap,
        images: samples.len(),
    })
}

/// Trains one model per lambda, evaluates each on `val`, and returns the
/// RD curve of every available quality kind.
pub fn sweep(
    plan: &TrainPlan,
    lambdas: &[f64],
    data: &Datasets<'_>,
    val: &[Sample],
    analysis: Option<&dyn AnalysisAdapter>,
    num_classes: usize,
    opts: TrainOptions<'_>,
) -> Result<(Vec<Checkpoint>, Vec<RdCurve>), TrainError> {
    if lambdas.len() < 2 {
        return Err(TrainError::TooFewLambdas);
    }
    let mut plan = plan.clone();
    plan.phases[0].lambdas = lambdas.to_vec();
    for p in plan.phases.iter_mut().skip(1) {
        if !p.lambdas.is_empty() {
            p.lambdas = lambdas.to_vec();
        }
    }
    let models = train(&plan, data, analysis, opts)?;
    let use_mask = models.iter().all(|c| c.weights.lsm.is_some());
    let reports = models
        .iter()
        .map(|c| evaluate(&c.weights, val, analysis, num_classes, use_mask))
        .collect::<Result<Vec<_>, _>>()?;
    let label = plan.phases.last().map(|p| p.loss.to_string()).unwrap_or_default();
    let mut curves = Vec::new();
    for kind in [QualityKind::Psnr, QualityKind::MsSsim, QualityKind::Wap] {
        let mut points: Vec<RdPoint> = Vec::new();
        for r in &reports {
            if let Some(q) = r.quality(kind) {
                if !points.iter().any(|p| p.bpp == r.bpp) {
                    points.push(RdPoint { bpp: r.bpp, quality: q });
                }
            }
        }
        if !points.is_empty() {
            curves.push(RdCurve::new(label.clone(), kind, points)?);
        }
    }
    Ok((models, curves))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}
