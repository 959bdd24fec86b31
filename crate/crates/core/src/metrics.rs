//! Image quality, detection accuracy and Bjøntegaard-delta metrics.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{ObjectAnnotation, Predictions};
use crate::autodiff::Tape;
use crate::losses;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("no ground-truth instances in any class")]
    NoGroundTruth,
    #[error("{0} predictions for {1} ground-truth images")]
    ImageCountMismatch(usize, usize),
    #[error("curve `{label}` needs at least {min} points, has {found}")]
    TooFewPoints { label: String, min: usize, found: usize },
    #[error("curve `{0}` is not strictly monotone in the interpolation variable")]
    NotMonotone(String),
    #[error("curves do not overlap in {0}")]
    NoOverlap(&'static str),
    #[error("curves mix quality kinds {0} and {1}")]
    KindMismatch(QualityKind, QualityKind),
    #[error("invalid RD point: bpp {bpp}, quality {quality}")]
    InvalidPoint { bpp: f64, quality: f64 },
    #[error("unknown quality kind `{0}`")]
    UnknownKind(String),
    #[error("no curve labelled `{0}`")]
    UnknownLabel(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    check_shapes(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.len() as f64)
}

/// Peak signal-to-noise ratio for unit peak; identical inputs give
/// [`PSNR_CAP`].
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// Multi-scale SSIM averaged over channels and batch.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    check_shapes(x, y)?;
    let tape = Tape::inference();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    Ok(tape.item(losses::ms_ssim(&tape, xv, yv)))
}

/// Full-range BT.601 RGB to YCbCr, all planes in `[0, 1]`.
pub fn rgb_to_ycbcr(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert_eq!(c, 3, "rgb_to_ycbcr expects three channels");
    let mut out = Tensor::zeros(x.shape());
    let hw = h * w;
    for i in 0..n {
        let base = i * 3 * hw;
        for p in 0..hw {
            let (r, g, b) = (x.data()[base + p], x.data()[base + hw + p], x.data()[base + 2 * hw + p]);
            let o = out.data_mut();
            o[base + p] = 0.299 * r + 0.587 * g + 0.114 * b;
            o[base + hw + p] = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b;
            o[base + 2 * hw + p] = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
    }
    out
}

/// PSNR of the luma plane only.
pub fn psnr_y(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    check_shapes(x, y)?;
    let luma = |t: &Tensor| {
        let ycc = rgb_to_ycbcr(t);
        let [n, _, h, w] = t.shape();
        let mut out = Vec::with_capacity(n * h * w);
        for i in 0..n {
            out.extend_from_slice(&ycc.data()[i * 3 * h * w..i * 3 * h * w + h * w]);
        }
        Tensor::from_vec([n, 1, h, w], out)
    };
    psnr(&luma(x), &luma(y))
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-class AP with greedy, score-ordered, one-to-one matching, and its
/// ground-truth count. Ties in score keep image order.
pub fn class_ap(preds: &[Predictions], gts: &[Vec<ObjectAnnotation>], class: usize, iou_threshold: f64) -> (f64, usize) {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|o| o.class == class).count()).sum();
    if n_gt == 0 {
        return (0.0, 0);
    }
    let mut dets: Vec<(usize, usize)> = Vec::new();
    for (img, p) in preds.iter().enumerate() {
        for (j, d) in p.detections.iter().enumerate() {
            if d.class == class {
                dets.push((img, j));
            }
        }
    }
    dets.sort_by(|a, b| preds[b.0].detections[b.1].score.total_cmp(&preds[a.0].detections[a.1].score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &(img, j) in &dets {
        let d = &preds[img].detections[j];
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts[img].iter().enumerate() {
            if g.class != class || used[img][k] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        match best {
            Some((k, _)) => {
                used[img][k] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    (average_precision(&tp, n_gt), n_gt)
}

/// All-point interpolated area under the precision-recall curve of a ranked
/// TP/FP list.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Class-frequency weighted AP, averaged over `iou_thresholds`.
pub fn weighted_ap(
    preds: &[Predictions],
    gts: &[Vec<ObjectAnnotation>],
    num_classes: usize,
    iou_thresholds: &[f64],
) -> Result<f64, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::ImageCountMismatch(preds.len(), gts.len()));
    }
    let thresholds = if iou_thresholds.is_empty() { &[0.5][..] } else { iou_thresholds };
    let mut acc = 0.0;
    for &t in thresholds {
        let (mut num, mut den) = (0.0, 0usize);
        for c in 0..num_classes {
            let (ap, n) = class_ap(preds, gts, c, t);
            num += n as f64 * ap;
            den += n;
        }
        if den == 0 {
            return Err(MetricError::NoGroundTruth);
        }
        acc += num / den as f64;
    }
    Ok(acc / thresholds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityKind {
    Psnr,
    MsSsim,
    Wap,
}

impl QualityKind {
    pub fn parse(s: &str) -> Result<Self, MetricError> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(Self::Psnr),
            "msssim" | "ms-ssim" | "ms_ssim" => Ok(Self::MsSsim),
            "wap" => Ok(Self::Wap),
            other => Err(MetricError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for QualityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Psnr => "psnr",
            Self::MsSsim => "msssim",
            Self::Wap => "wap",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub kind: QualityKind,
    points: Vec<RdPoint>,
}

pub const MIN_CURVE_POINTS: usize = 4;

impl RdCurve {
    /// Points are sorted by rate; duplicates in rate are rejected.
    pub fn new(label: impl Into<String>, kind: QualityKind, mut points: Vec<RdPoint>) -> Result<Self, MetricError> {
        let label = label.into();
        for p in &points {
            if !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.quality.is_finite() {
                return Err(MetricError::InvalidPoint {
                    bpp: p.bpp,
                    quality: p.quality,
                });
            }
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(MetricError::NotMonotone(label));
        }
        Ok(Self { label, kind, points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn check_len(&self) -> Result<(), MetricError> {
        if self.points.len() < MIN_CURVE_POINTS {
            return Err(MetricError::TooFewPoints {
                label: self.label.clone(),
                min: MIN_CURVE_POINTS,
                found: self.points.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    label: String,
    quality_kind: String,
    bpp: f64,
    quality: f64,
}

/// Writes curves as `label,quality_kind,bpp,quality` rows. Lines in
/// `comments` are emitted first, prefixed with `# `.
pub fn write_curves_csv(path: &Path, curves: &[RdCurve], comments: &[String]) -> Result<(), MetricError> {
    let mut text = String::new();
    for c in comments {
        text.push_str("# ");
        text.push_str(c);
        text.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in curves {
        for p in c.points() {
            w.serialize(CsvRow {
                label: c.label.clone(),
                quality_kind: c.kind.to_string(),
                bpp: p.bpp,
                quality: p.quality,
            })?;
        }
    }
    let body = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    text.push_str(&String::from_utf8_lossy(&body));
    std::fs::write(path, text).map_err(csv::Error::from)?;
    Ok(())
}

/// Reads curves grouped by label and quality kind, in order of first appearance.
pub fn read_curves_csv(path: &Path) -> Result<Vec<RdCurve>, MetricError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let mut groups: Vec<(String, QualityKind, Vec<RdPoint>)> = Vec::new();
    for row in r.deserialize() {
        let row: CsvRow = row?;
        let kind = QualityKind::parse(&row.quality_kind)?;
        let point = RdPoint {
            bpp: row.bpp,
            quality: row.quality,
        };
        match groups.iter_mut().find(|g| g.0 == row.label && g.1 == kind) {
            Some(g) => g.2.push(point),
            None => groups.push((row.label, kind, vec![point])),
        }
    }
    groups.into_iter().map(|(l, k, p)| RdCurve::new(l, k, p)).collect()
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson slopes).
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing with at least two knots.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len(), "pchip needs matching knots");
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            d[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { x, y, d }
    }

    fn locate(&self, t: f64) -> usize {
        let n = self.x.len();
        self.x[1..n - 1].partition_point(|&xk| xk <= t)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.locate(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.y[k]
            + (s3 - 2.0 * s2 + s) * h * self.d[k]
            + (-2.0 * s3 + 3.0 * s2) * self.y[k + 1]
            + (s3 - s2) * h * self.d[k + 1]
    }

    /// Exact integral over `[a, b]` within the knot range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        if a > b {
            return -self.integrate(b, a);
        }
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[k], self.x[k + 1]);
            let lo = a.max(x0);
            let hi = b.min(x1);
            if hi <= lo {
                continue;
            }
            let h = x1 - x0;
            let (sa, sb) = ((lo - x0) / h, (hi - x0) / h);
            let anti = |s: f64| {
                let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
                self.y[k] * (s4 / 2.0 - s3 + s)
                    + h * self.d[k] * (s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0)
                    + self.y[k + 1] * (-s4 / 2.0 + s3)
                    + h * self.d[k + 1] * (s4 / 4.0 - s3 / 3.0)
            };
            total += h * (anti(sb) - anti(sa));
        }
        total
    }
}

/// One-sided three-point slope, limited to preserve monotonicity.
fn edge_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

fn interpolant(curve: &RdCurve, quality_axis: bool) -> Result<(Pchip, f64, f64), MetricError> {
    curve.check_len()?;
    let mut pts: Vec<(f64, f64)> = curve
        .points()
        .iter()
        .map(|p| if quality_axis { (p.quality, p.bpp.log10()) } else { (p.bpp.log10(), p.quality) })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(MetricError::NotMonotone(curve.label.clone()));
    }
    let (lo, hi) = (pts[0].0, pts[pts.len() - 1].0);
    let (x, y) = pts.into_iter().unzip();
    Ok((Pchip::new(x, y), lo, hi))
}

fn average_gap(test: &RdCurve, anchor: &RdCurve, quality_axis: bool) -> Result<f64, MetricError> {
    if test.kind != anchor.kind {
        return Err(MetricError::KindMismatch(test.kind, anchor.kind));
    }
    let (pt, tlo, thi) = interpolant(test, quality_axis)?;
    let (pa, alo, ahi) = interpolant(anchor, quality_axis)?;
    let (lo, hi) = (tlo.max(alo), thi.min(ahi));
    if hi <= lo {
        return Err(MetricError::NoOverlap(if quality_axis { "quality" } else { "rate" }));
    }
    Ok((pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo))
}

/// Average rate change of `test` relative to `anchor` at equal quality, in
/// percent (negative means `test` needs fewer bits).
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64, MetricError> {
    Ok((10f64.powf(average_gap(test, anchor, true)?) - 1.0) * 100.0)
}

/// Average quality difference of `test` minus `anchor` at equal rate.
pub fn bd_quality(test: &RdCurve, anchor: &RdCurve) -> Result<f64, MetricError> {
    average_gap(test, anchor, false)
}
