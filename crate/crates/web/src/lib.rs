//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function takes plain numbers or text and returns JSON, so
//! the page needs no generated TypeScript types. The same logic is available
//! natively through the `*_report` functions.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ncn_core::entropy::{cdf_bank, decode_symbols, encode_symbols, ideal_bits, scale_level, scale_level_value, CdfTable};
use ncn_core::laplace;
use ncn_core::metrics::{self, QualityKind, RdCurve, RdPoint};

#[derive(Debug, thiserror::Error)]
pub enum WebError {
    #[error("line {line}: expected `bpp, quality`")]
    Parse { line: usize },
    #[error("values must be finite, scales positive and alpha within [0, 1]")]
    Domain,
    #[error("mean, scale and latent lists differ in length")]
    Length,
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Entropy(#[from] ncn_core::entropy::EntropyError),
}

fn to_js<T: Serialize>(r: Result<T, WebError>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("report serializes"))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

fn parse_list(text: &str) -> Result<Vec<f64>, WebError> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, s)| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(WebError::Parse { line: i + 1 }))
        .collect()
}

#[derive(Debug, PartialEq, Serialize)]
pub struct MaskedElement {
    pub y: f64,
    pub masked: f64,
    pub residual: i32,
    pub bits: f64,
    pub bits_unmasked: f64,
}

#[derive(Debug, PartialEq, Serialize)]
pub struct MaskReport {
    pub alpha: f64,
    pub elements: Vec<MaskedElement>,
    pub total_bits: f64,
    pub total_bits_unmasked: f64,
}

/// Soft-masks each latent toward its mean, quantizes the residual and prices
/// it under the discretized Laplace model.
pub fn mask_report(latents: &[f64], means: &[f64], scales: &[f64], alpha: f64) -> Result<MaskReport, WebError> {
    if latents.len() != means.len() || latents.len() != scales.len() {
        return Err(WebError::Length);
    }
    if !(0.0..=1.0).contains(&alpha) || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(WebError::Domain);
    }
    let bank = cdf_bank();
    let mut elements = Vec::with_capacity(latents.len());
    for ((&y, &mu), &s) in latents.iter().zip(means).zip(scales) {
        let masked = y - alpha * (y - mu);
        let r = (masked - mu).round() as i32;
        let r0 = (y - mu).round() as i32;
        let table = bank.for_scale(s);
        elements.push(MaskedElement {
            y,
            masked,
            residual: r,
            bits: table.cost_bits(r),
            bits_unmasked: table.cost_bits(r0),
        });
    }
    Ok(MaskReport {
        alpha,
        total_bits: elements.iter().map(|e| e.bits).sum(),
        total_bits_unmasked: elements.iter().map(|e| e.bits_unmasked).sum(),
        elements,
    })
}

#[derive(Debug, PartialEq, Serialize)]
pub struct BinReport {
    pub scale: f64,
    /// Scale of the table the coder would use.
    pub level_scale: f64,
    pub values: Vec<i32>,
    /// Continuous-model bit cost per value.
    pub model_bits: Vec<f64>,
    /// Cost under the 16-bit integer table.
    pub table_bits: Vec<f64>,
}

pub fn bin_report(scale: f64, radius: i32) -> Result<BinReport, WebError> {
    if !(scale > 0.0 && scale.is_finite()) || !(0..=64).contains(&radius) {
        return Err(WebError::Domain);
    }
    let table = cdf_bank().for_scale(scale);
    let values: Vec<i32> = (-radius..=radius).collect();
    Ok(BinReport {
        scale,
        level_scale: scale_level_value(scale_level(scale)),
        model_bits: values.iter().map(|&v| laplace::bin_bits(v as f64, scale)).collect(),
        table_bits: values.iter().map(|&v| table.cost_bits(v)).collect(),
        values,
    })
}

/// Reads `bpp, quality` lines; `#` starts a comment.
pub fn parse_curve(label: &str, kind: QualityKind, text: &str) -> Result<RdCurve, WebError> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v = parse_list(line).map_err(|_| WebError::Parse { line: i + 1 })?;
        if v.len() != 2 {
            return Err(WebError::Parse { line: i + 1 });
        }
        pts.push(RdPoint { bpp: v[0], quality: v[1] });
    }
    Ok(RdCurve::new(label, kind, pts)?)
}

#[derive(Debug, PartialEq, Serialize)]
pub struct BdReport {
    pub bd_rate_percent: f64,
    pub bd_quality: f64,
}

pub fn bd_report(test: &str, anchor: &str, kind: &str) -> Result<BdReport, WebError> {
    let kind = QualityKind::parse(kind)?;
    let t = parse_curve("test", kind, test)?;
    let a = parse_curve("anchor", kind, anchor)?;
    Ok(BdReport {
        bd_rate_percent: metrics::bd_rate(&t, &a)?,
        bd_quality: metrics::bd_quality(&t, &a)?,
    })
}

#[derive(Debug, PartialEq, Serialize)]
pub struct CoderReport {
    pub symbols: usize,
    pub bytes: usize,
    pub ideal_bits: f64,
    pub round_trip: bool,
    pub hex: String,
}

pub fn coder_report(symbols_text: &str, scale: f64) -> Result<CoderReport, WebError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(WebError::Domain);
    }
    let values = parse_list(symbols_text)?;
    if values.iter().any(|v| v.fract() != 0.0) {
        return Err(WebError::Domain);
    }
    let symbols: Vec<i32> = values.iter().map(|&v| v as i32).collect();
    let table: &CdfTable = cdf_bank().for_scale(scale);
    let tables = vec![table; symbols.len()];
    let bytes = encode_symbols(&symbols, &tables)?;
    let back = decode_symbols(&bytes, &tables, symbols.len())?;
    Ok(CoderReport {
        symbols: symbols.len(),
        bytes: bytes.len(),
        ideal_bits: ideal_bits(&symbols, &tables),
        round_trip: back == symbols,
        hex: bytes.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

#[wasm_bindgen]
pub fn mask_explorer(latents: &str, means: &str, scales: &str, alpha: f64) -> Result<String, JsValue> {
    to_js((|| mask_report(&parse_list(latents)?, &parse_list(means)?, &parse_list(scales)?, alpha))())
}

#[wasm_bindgen]
pub fn laplace_bins(scale: f64, radius: i32) -> Result<String, JsValue> {
    to_js(bin_report(scale, radius))
}

#[wasm_bindgen]
pub fn bd_calculator(test: &str, anchor: &str, kind: &str) -> Result<String, JsValue> {
    to_js(bd_report(test, anchor, kind))
}

#[wasm_bindgen]
pub fn range_code(symbols: &str, scale: f64) -> Result<String, JsValue> {
    to_js(coder_report(symbols, scale))
}
