//! Image-level encoding and decoding: padding, the hyper stream `b2` coded
//! with the causal context model, and the latent residual stream `b1`.

use crate::analysis::AnalysisAdapter;
use crate::entropy::{
    cdf_bank, pack_bitstream, unpack_bitstream, BitstreamFile, BitstreamHeader, EntropyError, RangeDecoder, RangeEncoder,
};
use crate::image::{ImageTensor, PAD_MULTIPLE};
use crate::lsmnet::{self, LsmError, MaskTensor};
use crate::ncn::{self, EntropyParams, HyperLatent, LatentTensor, NcnError, NcnWeights, QuantMode, QuantizedResidual};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error(transparent)]
    Ncn(#[from] NcnError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Mask(#[from] LsmError),
    #[error("image of {height}x{width} exceeds the header limits")]
    TooLarge { height: usize, width: usize },
}

/// Everything the encoder knows after coding one image.
#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub file: BitstreamFile,
    pub residual: QuantizedResidual,
    pub zhat: HyperLatent,
    pub params: EntropyParams,
    /// `estimate_rate` of the residual under the continuous scales.
    pub estimated_latent_bits: f64,
}

impl EncodeOutput {
    pub fn bytes(&self) -> Vec<u8> {
        self.file.to_bytes()
    }

    pub fn bpp(&self) -> f64 {
        self.file.bpp()
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub image: ImageTensor,
    pub residual: QuantizedResidual,
    pub zhat: HyperLatent,
}

fn padded_grid(height: usize, width: usize) -> (usize, usize) {
    (height.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, width.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE)
}

/// Encodes `x`, optionally soft-masking the latent with `mask` (which must
/// match the padded latent grid). Mean and scale always come from the
/// unmasked latent, so `b2` does not depend on the mask.
pub fn encode_image(x: &ImageTensor, w: &NcnWeights, mask: Option<&MaskTensor>) -> Result<EncodeOutput, CodecError> {
    let (height, width) = (x.height(), x.width());
    if height > u32::MAX as usize || width > u32::MAX as usize {
        return Err(CodecError::TooLarge { height, width });
    }
    let padded = x.pad_to_multiple(PAD_MULTIPLE);
    let y = ncn::encode_latent(padded.tensor(), w)?;
    let (zhat, params) = ncn::hyper_forward(&y, w, QuantMode::Infer)?;
    let y_coded = match mask {
        Some(alpha) => lsmnet::apply_mask(&y, &params.mean, alpha)?,
        None => y,
    };
    let residual = ncn::residualize(&y_coded.0, &params.mean);
    let estimated_latent_bits = ncn::estimate_rate(&residual, &params.scale)?;
    let b2 = encode_hyper(&zhat, w)?;
    let b1 = encode_latent_stream(&residual, &params.scale)?;
    let header = BitstreamHeader {
        height: height as u32,
        width: width as u32,
        channels: w.channels() as u16,
        hyper_channels: w.hyper_channels() as u16,
        lambda_id: w.meta.lambda_id,
    };
    let file = unpack_bitstream(&pack_bitstream(&header, &b1, &b2))?;
    Ok(EncodeOutput {
        file,
        residual,
        zhat,
        params,
        estimated_latent_bits,
    })
}

/// Encodes with the model's own masking head, driven by `analysis`.
pub fn masked_encode(x: &ImageTensor, w: &NcnWeights, analysis: &dyn AnalysisAdapter) -> Result<EncodeOutput, CodecError> {
    let head = w.lsm.as_ref().ok_or(LsmError::NoHead)?;
    let padded = x.pad_to_multiple(PAD_MULTIPLE);
    let alpha = lsmnet::compute_mask(padded.tensor(), analysis, head)?;
    encode_image(x, w, Some(&alpha))
}

/// Hyper-latent symbols are `z_hat - round(mean)` in raster order over
/// positions, channels innermost, each under the table of its context scale.
fn encode_hyper(zhat: &HyperLatent, w: &NcnWeights) -> Result<Vec<u8>, CodecError> {
    let [_, c, h, wd] = zhat.0.shape();
    let bank = cdf_bank();
    let mut enc = RangeEncoder::new();
    for y in 0..h {
        for x in 0..wd {
            let (mean, scale) = w.context.params_at(&zhat.0, y, x);
            for ch in 0..c {
                let sym = zhat.0.at(0, ch, y, x) - mean[ch].round();
                enc.encode_residual(sym as i32, bank.for_scale(scale[ch]))?;
            }
        }
    }
    Ok(enc.finish())
}

fn decode_hyper(bytes: &[u8], w: &NcnWeights, h: usize, wd: usize) -> Result<HyperLatent, CodecError> {
    let c = w.hyper_channels();
    let bank = cdf_bank();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut z = Tensor::zeros([1, c, h, wd]);
    for y in 0..h {
        for x in 0..wd {
            let (mean, scale) = w.context.params_at(&z, y, x);
            for ch in 0..c {
                let sym = dec.decode_residual(bank.for_scale(scale[ch]))?;
                let idx = z.index(0, ch, y, x);
                z.data_mut()[idx] = sym as f64 + mean[ch].round();
            }
        }
    }
    if !dec.is_exhausted() {
        return Err(EntropyError::Corrupt("trailing bytes in hyper stream").into());
    }
    Ok(HyperLatent(z))
}

fn encode_latent_stream(r: &QuantizedResidual, scale: &Tensor) -> Result<Vec<u8>, CodecError> {
    let bank = cdf_bank();
    let mut enc = RangeEncoder::new();
    for (&v, &s) in r.values.iter().zip(scale.data()) {
        enc.encode_residual(v, bank.for_scale(s))?;
    }
    Ok(enc.finish())
}

fn decode_latent_stream(bytes: &[u8], scale: &Tensor) -> Result<QuantizedResidual, CodecError> {
    let bank = cdf_bank();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut values = Vec::with_capacity(scale.len());
    for &s in scale.data() {
        values.push(dec.decode_residual(bank.for_scale(s))?);
    }
    if !dec.is_exhausted() {
        return Err(EntropyError::Corrupt("trailing bytes in latent stream").into());
    }
    Ok(QuantizedResidual {
        shape: scale.shape(),
        values,
    })
}

/// The only decoder. It has no notion of masking.
pub fn decode_file(file: &BitstreamFile, w: &NcnWeights) -> Result<DecodeOutput, CodecError> {
    let hdr = &file.header;
    if hdr.channels as usize != w.channels() || hdr.hyper_channels as usize != w.hyper_channels() {
        return Err(NcnError::ModelMismatch {
            n: w.channels(),
            nh: w.hyper_channels(),
            found_n: hdr.channels as usize,
            found_nh: hdr.hyper_channels as usize,
        }
        .into());
    }
    let (height, width) = (hdr.height as usize, hdr.width as usize);
    if height == 0 || width == 0 {
        return Err(EntropyError::Corrupt("zero image dimension").into());
    }
    let (ph, pw) = padded_grid(height, width);
    let zhat = decode_hyper(&file.b2, w, ph / ncn::HYPER_STRIDE, pw / ncn::HYPER_STRIDE)?;
    let params = ncn::hyper_decode(&zhat, w);
    let residual = decode_latent_stream(&file.b1, &params.scale)?;
    let yhat: LatentTensor = residual.reconstruct(&params.mean)?;
    let full = ncn::decode_latent(&yhat, w)?;
    let image = ImageTensor::from_tensor_clamped(full)
        .expect("decoder output is clamped")
        .crop(0, 0, height, width);
    Ok(DecodeOutput { image, residual, zhat })
}

pub fn decode_bitstream(bytes: &[u8], w: &NcnWeights) -> Result<ImageTensor, CodecError> {
    let file = unpack_bitstream(bytes)?;
    Ok(decode_file(&file, w)?.image)
}

/// Reconstruction the encoder predicts for its own stream, without going
/// through the entropy decoder.
pub fn local_reconstruction(enc: &EncodeOutput, w: &NcnWeights) -> Result<ImageTensor, CodecError> {
    let yhat = enc.residual.reconstruct(&enc.params.mean)?;
    let full = ncn::decode_latent(&yhat, w)?;
    let h = enc.file.header.height as usize;
    let wd = enc.file.header.width as usize;
    Ok(ImageTensor::from_tensor_clamped(full).expect("decoder output is clamped").crop(0, 0, h, wd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ncn::NcnConfig;

    fn model() -> NcnWeights {
        NcnWeights::new(
            NcnConfig {
                channels: 8,
                hyper_channels: 4,
                hidden: 8,
                kernel: 5,
                context_hidden: 8,
            },
            2,
        )
    }

    fn test_image(h: usize, w: usize) -> ImageTensor {
        let mut t = Tensor::zeros([1, 3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let idx = t.index(0, c, y, x);
                    t.data_mut()[idx] = (0.5 + 0.4 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos())).clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor::new(t).unwrap()
    }

    #[test]
    fn round_trip_restores_original_size() {
        let w = model();
        let x = test_image(50, 70);
        let enc = encode_image(&x, &w, None).unwrap();
        assert_eq!(enc.residual.shape, [1, 8, 4, 8]);
        let bytes = enc.bytes();
        let file = unpack_bitstream(&bytes).unwrap();
        let dec = decode_file(&file, &w).unwrap();
        assert_eq!((dec.image.height(), dec.image.width()), (50, 70));
        assert_eq!(dec.residual, enc.residual);
        assert_eq!(dec.zhat, enc.zhat);
        assert_eq!(dec.image, local_reconstruction(&enc, &w).unwrap());
        assert_eq!(decode_bitstream(&bytes, &w).unwrap(), dec.image);
    }

    #[test]
    fn masking_identities() {
        let w = model();
        let x = test_image(64, 64);
        let plain = encode_image(&x, &w, None).unwrap();
        let shape = plain.residual.shape;
        let zero = encode_image(&x, &w, Some(&MaskTensor::uniform(shape, 0.0).unwrap())).unwrap();
        assert_eq!(zero.bytes(), plain.bytes());
        let one = encode_image(&x, &w, Some(&MaskTensor::uniform(shape, 1.0).unwrap())).unwrap();
        assert!(one.residual.is_all_zero());
        assert_eq!(one.file.b2, plain.file.b2);
        assert!(one.file.b1.len() <= plain.file.b1.len());
        decode_bitstream(&one.bytes(), &w).unwrap();
    }

    #[test]
    fn rejects_foreign_and_corrupt_streams() {
        let w = model();
        let enc = encode_image(&test_image(64, 64), &w, None).unwrap();
        let other = NcnWeights::new(NcnConfig::desk(), 0);
        assert!(matches!(decode_bitstream(&enc.bytes(), &other), Err(CodecError::Ncn(NcnError::ModelMismatch { .. }))));
        let mut bytes = enc.bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(decode_bitstream(&bytes, &w).is_err());
    }

    #[test]
    fn masked_encode_requires_head() {
        let w = model();
        let analysis = crate::analysis::ToyAnalysis::new(2, 0);
        let err = masked_encode(&test_image(64, 64), &w, &analysis).unwrap_err();
        assert!(matches!(err, CodecError::Mask(LsmError::NoHead)));
    }
}
