//! Analysis networks: the adapter interface the codec trains against, and a
//! small bundled detector for synthetic-shape images.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::image::ImageTensor;
use crate::metrics;
use crate::nn::{Adam, Binder, Conv, Module};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("adapter `{adapter}` does not provide {capability}")]
    Unsupported { adapter: String, capability: String },
    #[error("stage {0} is not declared by this adapter")]
    UnknownStage(FeatureStage),
    #[error("task loss needs annotations for every image in the batch ({images} images, {annotations} annotations)")]
    MissingAnnotations { images: usize, annotations: usize },
    #[error("class id {class} outside vocabulary of {classes}")]
    UnknownClass { class: usize, classes: usize },
    #[error("invalid box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("training did not converge: validation score {score:.4} below {required:.4}")]
    NotConverged { score: f64, required: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("annotation line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
}

/// Named feature maps. `C*` are backbone stages, `P*` pyramid levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureStage {
    C4,
    C8,
    C16,
    C32,
    P4,
    P8,
    P16,
    P32,
}

impl FeatureStage {
    pub const ALL: [FeatureStage; 8] = [
        FeatureStage::C4,
        FeatureStage::C8,
        FeatureStage::C16,
        FeatureStage::C32,
        FeatureStage::P4,
        FeatureStage::P8,
        FeatureStage::P16,
        FeatureStage::P32,
    ];

    pub fn stride(self) -> usize {
        match self {
            FeatureStage::C4 | FeatureStage::P4 => 4,
            FeatureStage::C8 | FeatureStage::P8 => 8,
            FeatureStage::C16 | FeatureStage::P16 => 16,
            FeatureStage::C32 | FeatureStage::P32 => 32,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.to_string() == s.to_ascii_lowercase())
    }
}

impl fmt::Display for FeatureStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureStage::C4 => "c4",
            FeatureStage::C8 => "c8",
            FeatureStage::C16 => "c16",
            FeatureStage::C32 => "c32",
            FeatureStage::P4 => "p4",
            FeatureStage::P8 => "p8",
            FeatureStage::P16 => "p16",
            FeatureStage::P32 => "p32",
        };
        f.write_str(s)
    }
}

/// Boxes are `[x1, y1, x2, y2]` in pixel units, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub detections: Vec<Detection>,
}

impl Predictions {
    pub fn sort_by_score(&mut self) {
        self.detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class: usize,
    pub bbox: [f64; 4],
}

/// One JSON-lines record: `{"image": path, "objects": [{"class", "bbox"}]}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image: String,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthSet {
    pub classes: Vec<String>,
    pub images: Vec<ImageAnnotation>,
}

impl GroundTruthSet {
    pub fn new(classes: Vec<String>, images: Vec<ImageAnnotation>) -> Result<Self, AnalysisError> {
        let set = Self { classes, images };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        for obj in self.images.iter().flat_map(|im| &im.objects) {
            if obj.class >= self.classes.len() {
                return Err(AnalysisError::UnknownClass {
                    class: obj.class,
                    classes: self.classes.len(),
                });
            }
            let [x1, y1, x2, y2] = obj.bbox;
            if !(x1 < x2 && y1 < y2) || obj.bbox.iter().any(|v| !v.is_finite()) {
                return Err(AnalysisError::InvalidBox(obj.bbox));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<ImageAnnotation>, AnalysisError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| AnalysisError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[ImageAnnotation]) -> Result<(), AnalysisError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|source| AnalysisError::Json { line: 0, source })?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// The codec's view of an analysis network. Implementations must be
/// immutable after construction; codec training only ever reads them.
pub trait AnalysisAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, x: &ImageTensor) -> Result<Predictions, AnalysisError>;

    /// Stages `features` can produce.
    fn stages(&self) -> Vec<FeatureStage> {
        Vec::new()
    }

    /// Differentiable feature map of `x` (`[B, 3, H, W]` on `tape`).
    fn features(&self, tape: &Tape, x: Var, stage: FeatureStage) -> Result<Var, AnalysisError> {
        let _ = (tape, x);
        Err(self.unsupported(&format!("features at stage {stage}")))
    }

    /// Differentiable training loss of the batch `x` against `gt`.
    fn loss(&self, tape: &Tape, x: Var, gt: &[ImageAnnotation]) -> Result<Var, AnalysisError> {
        let _ = (tape, x, gt);
        Err(self.unsupported("a task loss"))
    }

    /// Fingerprint of the weights, when the adapter has any.
    fn parameter_checksum(&self) -> Option<String> {
        None
    }

    fn supports_stage(&self, stage: FeatureStage) -> bool {
        self.stages().contains(&stage)
    }

    fn unsupported(&self, capability: &str) -> AnalysisError {
        AnalysisError::Unsupported {
            adapter: self.name().to_string(),
            capability: capability.to_string(),
        }
    }
}

/// Element-wise `lateral + up2x(coarser)`, the top-down merge of a pyramid.
pub fn top_down_merge(tape: &Tape, lateral: Var, coarser: Var) -> Var {
    let [_, _, h, w] = tape.shape(lateral);
    let up = tape.upsample2x(coarser, h, w);
    tape.add(lateral, up)
}

pub const PYRAMID_CHANNELS: usize = 64;
/// Detection grid stride (the P8 level).
pub const HEAD_STRIDE: usize = 8;
/// Reference box size for the log-size regression targets.
const ANCHOR: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyAnalysis {
    pub num_classes: usize,
    /// Stem at stride 2, then one stage per stride 4..32.
    pub stem: Conv,
    pub stages: Vec<[Conv; 2]>,
    /// Pointwise laterals for c4, c8, c16, c32.
    pub laterals: Vec<Conv>,
    pub head_hidden: Conv,
    pub head_out: Conv,
}

pub struct ToyPyramid {
    pub c: [Var; 4],
    pub p: [Var; 4],
}

/// Per-head task losses of a batch, each averaged over images.
pub struct HeadLosses {
    pub objectness: Var,
    pub classification: Var,
    pub boxes: Var,
}

impl HeadLosses {
    pub fn total(&self, tape: &Tape) -> Var {
        tape.add(tape.add(self.objectness, self.classification), self.boxes)
    }
}

impl ToyAnalysis {
    pub const CHANNELS: [usize; 4] = [32, 64, 128, 256];

    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv::new(&mut rng, 3, 16, 3, 2);
        let mut stages = Vec::new();
        let mut cin = 16;
        for &c in &Self::CHANNELS {
            stages.push([Conv::new(&mut rng, cin, c, 3, 2), Conv::new(&mut rng, c, c, 3, 1)]);
            cin = c;
        }
        let laterals = Self::CHANNELS.iter().map(|&c| Conv::pointwise(&mut rng, c, PYRAMID_CHANNELS)).collect();
        let head_hidden = Conv::new(&mut rng, PYRAMID_CHANNELS, PYRAMID_CHANNELS, 3, 1);
        let mut head_out = Conv::pointwise(&mut rng, PYRAMID_CHANNELS, 5 + num_classes);
        head_out.weight.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        head_out.bias.data_mut()[0] = -3.0;
        Self {
            num_classes,
            stem,
            stages,
            laterals,
            head_hidden,
            head_out,
        }
    }

    /// Backbone stages up to and including `last` (0 = c4 .. 3 = c32).
    fn backbone(&self, b: &mut Binder<'_>, x: Var, last: usize) -> Vec<Var> {
        let tape = b.tape();
        let mut h = tape.relu(self.stem.forward(b, x));
        let mut out = Vec::new();
        for stage in &self.stages[..=last] {
            h = tape.relu(stage[0].forward(b, h));
            h = tape.relu(stage[1].forward(b, h));
            out.push(h);
        }
        out
    }

    pub fn pyramid(&self, b: &mut Binder<'_>, x: Var) -> ToyPyramid {
        let tape = b.tape();
        let c = self.backbone(b, x, 3);
        let lat: Vec<Var> = (0..4).map(|i| self.laterals[i].forward(b, c[i])).collect();
        let p32 = lat[3];
        let p16 = top_down_merge(tape, lat[2], p32);
        let p8 = top_down_merge(tape, lat[1], p16);
        let p4 = top_down_merge(tape, lat[0], p8);
        ToyPyramid {
            c: [c[0], c[1], c[2], c[3]],
            p: [p4, p8, p16, p32],
        }
    }

    pub fn stage(&self, b: &mut Binder<'_>, x: Var, stage: FeatureStage) -> Var {
        match stage {
            FeatureStage::C4 => self.backbone(b, x, 0)[0],
            FeatureStage::C8 => self.backbone(b, x, 1)[1],
            FeatureStage::C16 => self.backbone(b, x, 2)[2],
            FeatureStage::C32 => self.backbone(b, x, 3)[3],
            FeatureStage::P4 => self.pyramid(b, x).p[0],
            FeatureStage::P8 => self.pyramid(b, x).p[1],
            FeatureStage::P16 => self.pyramid(b, x).p[2],
            FeatureStage::P32 => self.pyramid(b, x).p[3],
        }
    }

    /// Raw head output `[B, 5 + K, H/8, W/8]`: objectness logit, class
    /// logits, then `tx, ty, tw, th`.
    pub fn head(&self, b: &mut Binder<'_>, x: Var) -> Var {
        let pyr = self.pyramid(b, x);
        let h = b.tape().relu(self.head_hidden.forward(b, pyr.p[1]));
        self.head_out.forward(b, h)
    }

    pub fn head_losses(&self, b: &mut Binder<'_>, x: Var, gt: &[ImageAnnotation]) -> Result<HeadLosses, AnalysisError> {
        let n = b.tape().shape(x)[0];
        if gt.len() != n {
            return Err(AnalysisError::MissingAnnotations {
                images: n,
                annotations: gt.len(),
            });
        }
        let head = self.head(b, x);
        Ok(detection_losses(b.tape(), head, gt, self.num_classes))
    }

    pub fn predict(&self, x: &ImageTensor) -> Predictions {
        let tape = Tape::inference();
        let mut b = Binder::frozen(&tape);
        let xv = tape.constant(x.tensor().clone());
        let head = self.head(&mut b, xv);
        let out = tape.value(head);
        decode_head(&out, 0, self.num_classes, x.height(), x.width())
    }
}

impl Module for ToyAnalysis {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.stem.push_params("stem", &mut out);
        for (i, [a, c]) in self.stages.iter().enumerate() {
            a.push_params(&format!("stage{i}.0"), &mut out);
            c.push_params(&format!("stage{i}.1"), &mut out);
        }
        for (i, l) in self.laterals.iter().enumerate() {
            l.push_params(&format!("lateral{i}"), &mut out);
        }
        self.head_hidden.push_params("head.hidden", &mut out);
        self.head_out.push_params("head.out", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.stem.push_params_mut("stem", &mut out);
        for (i, [a, c]) in self.stages.iter_mut().enumerate() {
            a.push_params_mut(&format!("stage{i}.0"), &mut out);
            c.push_params_mut(&format!("stage{i}.1"), &mut out);
        }
        for (i, l) in self.laterals.iter_mut().enumerate() {
            l.push_params_mut(&format!("lateral{i}"), &mut out);
        }
        self.head_hidden.push_params_mut("head.hidden", &mut out);
        self.head_out.push_params_mut("head.out", &mut out);
        out
    }
}

impl AnalysisAdapter for ToyAnalysis {
    fn name(&self) -> &str {
        "toy-shapes"
    }

    fn forward(&self, x: &ImageTensor) -> Result<Predictions, AnalysisError> {
        Ok(self.predict(x))
    }

    fn stages(&self) -> Vec<FeatureStage> {
        FeatureStage::ALL.to_vec()
    }

    fn features(&self, tape: &Tape, x: Var, stage: FeatureStage) -> Result<Var, AnalysisError> {
        let mut b = Binder::frozen(tape);
        Ok(self.stage(&mut b, x, stage))
    }

    fn loss(&self, tape: &Tape, x: Var, gt: &[ImageAnnotation]) -> Result<Var, AnalysisError> {
        let mut b = Binder::frozen(tape);
        let losses = self.head_losses(&mut b, x, gt)?;
        Ok(losses.total(tape))
    }

    fn parameter_checksum(&self) -> Option<String> {
        Some(self.checksum())
    }
}

/// Regression and classification targets of one positive grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub gy: usize,
    pub gx: usize,
    pub class: usize,
    pub regress: [f64; 4],
}

/// Assigns each object to the grid cell containing its box centre.
pub fn cell_targets(objects: &[ObjectAnnotation], grid_h: usize, grid_w: usize) -> Vec<CellTarget> {
    let s = HEAD_STRIDE as f64;
    let mut out: Vec<CellTarget> = Vec::new();
    for o in objects {
        let [x1, y1, x2, y2] = o.bbox;
        let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
        let gx = ((cx / s).floor().max(0.0) as usize).min(grid_w - 1);
        let gy = ((cy / s).floor().max(0.0) as usize).min(grid_h - 1);
        if out.iter().any(|t| t.gx == gx && t.gy == gy) {
            continue;
        }
        out.push(CellTarget {
            gy,
            gx,
            class: o.class,
            regress: [cx / s - gx as f64, cy / s - gy as f64, ((x2 - x1) / ANCHOR).ln(), ((y2 - y1) / ANCHOR).ln()],
        });
    }
    out
}

const BOX_BETA: f64 = 0.1;

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < BOX_BETA {
        (0.5 * d * d / BOX_BETA, d / BOX_BETA)
    } else {
        (d.abs() - 0.5 * BOX_BETA, d.signum())
    }
}

/// Focal-free YOLO-style losses: objectness BCE over all cells, class
/// cross-entropy and smooth-L1 box regression on positive cells. Each term is
/// normalized by the number of objects in its image, then averaged over the
/// batch.
pub fn detection_losses(tape: &Tape, head: Var, gt: &[ImageAnnotation], num_classes: usize) -> HeadLosses {
    let hv = tape.value(head);
    let [n, ch, gh, gw] = hv.shape();
    assert_eq!(ch, 5 + num_classes, "head channel count");
    let mut vals = [0.0; 3];
    let mut grads = [Tensor::zeros(hv.shape()), Tensor::zeros(hv.shape())];
    let mut gbox = Tensor::zeros(hv.shape());
    for (i, ann) in gt.iter().enumerate().take(n) {
        let targets = cell_targets(&ann.objects, gh, gw);
        let norm = 1.0 / (targets.len().max(1) as f64 * n as f64);
        for y in 0..gh {
            for x in 0..gw {
                let t = if targets.iter().any(|t| t.gy == y && t.gx == x) { 1.0 } else { 0.0 };
                let l = hv.at(i, 0, y, x);
                vals[0] += norm * (crate::autodiff::softplus(l) - t * l);
                let idx = hv.index(i, 0, y, x);
                grads[0].data_mut()[idx] = norm * (sigmoid(l) - t);
            }
        }
        for t in &targets {
            let logits: Vec<f64> = (0..num_classes).map(|k| hv.at(i, 1 + k, t.gy, t.gx)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            vals[1] += norm * (m + z.ln() - logits[t.class]);
            for k in 0..num_classes {
                let p = (logits[k] - m).exp() / z;
                let idx = hv.index(i, 1 + k, t.gy, t.gx);
                grads[1].data_mut()[idx] = norm * (p - if k == t.class { 1.0 } else { 0.0 });
            }
            for j in 0..4 {
                let c = 1 + num_classes + j;
                let (v, g) = smooth_l1(hv.at(i, c, t.gy, t.gx) - t.regress[j]);
                vals[2] += norm * v;
                let idx = hv.index(i, c, t.gy, t.gx);
                gbox.data_mut()[idx] = norm * g;
            }
        }
    }
    let [g_obj, g_cls] = grads;
    let scalar_op = |value: f64, grad: Tensor| {
        tape.custom(Tensor::scalar(value), &[head], move |g, _| vec![Some(grad.map(|v| v * g.data()[0]))])
    };
    HeadLosses {
        objectness: scalar_op(vals[0], g_obj),
        classification: scalar_op(vals[1], g_cls),
        boxes: scalar_op(vals[2], gbox),
    }
}

pub const SCORE_THRESHOLD: f64 = 0.01;
pub const NMS_IOU: f64 = 0.5;
const MAX_DETECTIONS: usize = 50;

/// Converts image `i` of a head output into scored, NMS-filtered boxes.
pub fn decode_head(out: &Tensor, i: usize, num_classes: usize, height: usize, width: usize) -> Predictions {
    let [_, _, gh, gw] = out.shape();
    let s = HEAD_STRIDE as f64;
    let mut dets = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let obj = sigmoid(out.at(i, 0, gy, gx));
            let logits: Vec<f64> = (0..num_classes).map(|k| out.at(i, 1 + k, gy, gx)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let (class, _) = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("at least one class");
            let score = obj / z;
            if score < SCORE_THRESHOLD {
                continue;
            }
            let r = |j: usize| out.at(i, 1 + num_classes + j, gy, gx);
            let cx = (gx as f64 + r(0)) * s;
            let cy = (gy as f64 + r(1)) * s;
            let bw = ANCHOR * r(2).clamp(-4.0, 4.0).exp();
            let bh = ANCHOR * r(3).clamp(-4.0, 4.0).exp();
            let bbox = [
                (cx - bw / 2.0).clamp(0.0, width as f64 - 1.0),
                (cy - bh / 2.0).clamp(0.0, height as f64 - 1.0),
                (cx + bw / 2.0).clamp(1.0, width as f64),
                (cy + bh / 2.0).clamp(1.0, height as f64),
            ];
            if bbox[0] >= bbox[2] || bbox[1] >= bbox[3] {
                continue;
            }
            dets.push(Detection {
                class,
                score,
                bbox,
                mask: None,
            });
        }
    }
    let mut preds = Predictions { detections: nms(dets, NMS_IOU) };
    preds.detections.truncate(MAX_DETECTIONS);
    preds
}

/// Per-class greedy non-maximum suppression; output sorted by score.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep
            .iter()
            .all(|k| k.class != d.class || metrics::iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            keep.push(d);
        }
    }
    keep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fail with [`AnalysisError::NotConverged`] below this validation wAP.
    pub min_score: Option<f64>,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            min_score: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTrainReport {
    pub epoch_losses: Vec<f64>,
    pub validation_wap: f64,
}

/// A labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub annotation: ImageAnnotation,
}

fn flip_horizontal(s: &Sample) -> Sample {
    let t = s.image.tensor();
    let [_, c, h, w] = t.shape();
    let mut out = Tensor::zeros([1, c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let idx = out.index(0, ch, y, x);
                out.data_mut()[idx] = t.at(0, ch, y, w - 1 - x);
            }
        }
    }
    let objects = s
        .annotation
        .objects
        .iter()
        .map(|o| ObjectAnnotation {
            class: o.class,
            bbox: [w as f64 - o.bbox[2], o.bbox[1], w as f64 - o.bbox[0], o.bbox[3]],
        })
        .collect();
    Sample {
        image: ImageTensor::new(out).expect("flip preserves range"),
        annotation: ImageAnnotation {
            image: s.annotation.image.clone(),
            objects,
        },
    }
}

/// Trains the bundled detector with Adam and random horizontal flips, then
/// scores it on `val`.
pub fn train_toy_analysis(
    train: &[Sample],
    val: &[Sample],
    num_classes: usize,
    cfg: &ToyTrainConfig,
) -> Result<(ToyAnalysis, ToyTrainReport), AnalysisError> {
    if train.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let mut model = ToyAnalysis::new(num_classes, cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // Cosine decay to a tenth of the base rate.
        let progress = epoch as f64 / cfg.epochs.max(1) as f64;
        opt.lr = cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if rand::Rng::gen_bool(&mut rng, 0.5) {
                        flip_horizontal(&train[i])
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let x = Tensor::stack(&batch.iter().map(|s| s.image.tensor().clone()).collect::<Vec<_>>());
            let gt: Vec<ImageAnnotation> = batch.iter().map(|s| s.annotation.clone()).collect();
            let tape = Tape::new();
            let mut b = Binder::new(&tape, true);
            let xv = tape.constant(x);
            let losses = model.head_losses(&mut b, xv, &gt)?;
            let loss = losses.total(&tape);
            total += tape.item(loss);
            batches += 1;
            let mut grads = tape.backward(loss);
            let pg = b.collect(&mut grads);
            drop(b);
            opt.update(model.params_mut(), &pg);
        }
        epoch_losses.push(total / batches as f64);
    }
    let validation_wap = if val.is_empty() { 0.0 } else { evaluate_wap(&model, val, num_classes)? };
    if let Some(required) = cfg.min_score {
        if validation_wap < required {
            return Err(AnalysisError::NotConverged {
                score: validation_wap,
                required,
            });
        }
    }
    Ok((
        model,
        ToyTrainReport {
            epoch_losses,
            validation_wap,
        },
    ))
}

/// Box wAP at IoU 0.5 of `adapter` over labelled samples.
pub fn evaluate_wap(adapter: &dyn AnalysisAdapter, samples: &[Sample], num_classes: usize) -> Result<f64, AnalysisError> {
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
    evaluate_wap_on(adapter, &images, samples, num_classes)
}

/// Like [`evaluate_wap`] but runs the adapter on substitute images, e.g.
/// decoded reconstructions of `samples`.
pub fn evaluate_wap_on(
    adapter: &dyn AnalysisAdapter,
    images: &[&ImageTensor],
    samples: &[Sample],
    num_classes: usize,
) -> Result<f64, AnalysisError> {
    let preds = images.iter().map(|im| adapter.forward(im)).collect::<Result<Vec<_>, _>>()?;
    let gts: Vec<Vec<ObjectAnnotation>> = samples.iter().map(|s| s.annotation.objects.clone()).collect();
    Ok(metrics::weighted_ap(&preds, &gts, num_classes, &[0.5])?)
}

type ForwardFn = dyn Fn(&ImageTensor) -> Result<Predictions, AnalysisError> + Send + Sync;
type FeatureFn = dyn Fn(&Tape, Var, FeatureStage) -> Result<Var, AnalysisError> + Send + Sync;
type LossFn = dyn Fn(&Tape, Var, &[ImageAnnotation]) -> Result<Var, AnalysisError> + Send + Sync;

/// Adapter assembled from closures, for plugging in networks defined
/// outside this crate. Capabilities not supplied report `Unsupported`.
pub struct ExternalAdapter {
    name: String,
    forward: Box<ForwardFn>,
    features: Option<(Vec<FeatureStage>, Box<FeatureFn>)>,
    loss: Option<Box<LossFn>>,
    checksum: Option<String>,
}

impl ExternalAdapter {
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&ImageTensor) -> Result<Predictions, AnalysisError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            forward: Box::new(forward),
            features: None,
            loss: None,
            checksum: None,
        }
    }

    pub fn with_features(
        mut self,
        stages: Vec<FeatureStage>,
        f: impl Fn(&Tape, Var, FeatureStage) -> Result<Var, AnalysisError> + Send + Sync + 'static,
    ) -> Self {
        self.features = Some((stages, Box::new(f)));
        self
    }

    pub fn with_loss(mut self, f: impl Fn(&Tape, Var, &[ImageAnnotation]) -> Result<Var, AnalysisError> + Send + Sync + 'static) -> Self {
        self.loss = Some(Box::new(f));
        self
    }

    pub fn with_checksum(mut self, checksum: impl Into<String>) -> Self {
        self.checksum = Some(checksum.into());
        self
    }
}

impl AnalysisAdapter for ExternalAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, x: &ImageTensor) -> Result<Predictions, AnalysisError> {
        (self.forward)(x)
    }

    fn stages(&self) -> Vec<FeatureStage> {
        self.features.as_ref().map(|(s, _)| s.clone()).unwrap_or_default()
    }

    fn features(&self, tape: &Tape, x: Var, stage: FeatureStage) -> Result<Var, AnalysisError> {
        match &self.features {
            Some((stages, f)) if stages.contains(&stage) => f(tape, x, stage),
            Some(_) => Err(AnalysisError::UnknownStage(stage)),
            None => Err(self.unsupported(&format!("features at stage {stage}"))),
        }
    }

    fn loss(&self, tape: &Tape, x: Var, gt: &[ImageAnnotation]) -> Result<Var, AnalysisError> {
        match &self.loss {
            Some(f) => f(tape, x, gt),
            None => Err(self.unsupported("a task loss")),
        }
    }

    fn parameter_checksum(&self) -> Option<String> {
        self.checksum.clone()
    }
}
