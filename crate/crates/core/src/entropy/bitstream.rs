//! Container layout (little-endian):
//! `magic(4) | version(u16) | H(u32) | W(u32) | N(u16) | N_h(u16) |
//! lambda_id(u8) | len_b2(u32) | len_b1(u32) | b2 | b1`.

use super::EntropyError;

pub const BITSTREAM_MAGIC: [u8; 4] = *b"NCNB";
pub const BITSTREAM_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 2 + 2 + 1 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub height: u32,
    pub width: u32,
    pub channels: u16,
    pub hyper_channels: u16,
    pub lambda_id: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamFile {
    pub header: BitstreamHeader,
    /// Hyper-latent stream.
    pub b2: Vec<u8>,
    /// Latent residual stream.
    pub b1: Vec<u8>,
}

impl BitstreamFile {
    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.b1.len() + self.b2.len()
    }

    /// Bits per pixel of the original image, counting the whole file.
    pub fn bpp(&self) -> f64 {
        self.total_bytes() as f64 * 8.0 / (self.header.height as f64 * self.header.width as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        pack_bitstream(&self.header, &self.b1, &self.b2)
    }
}

pub fn pack_bitstream(header: &BitstreamHeader, b1: &[u8], b2: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + b1.len() + b2.len());
    out.extend_from_slice(&BITSTREAM_MAGIC);
    out.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&header.height.to_le_bytes());
    out.extend_from_slice(&header.width.to_le_bytes());
    out.extend_from_slice(&header.channels.to_le_bytes());
    out.extend_from_slice(&header.hyper_channels.to_le_bytes());
    out.push(header.lambda_id);
    out.extend_from_slice(&(b2.len() as u32).to_le_bytes());
    out.extend_from_slice(&(b1.len() as u32).to_le_bytes());
    out.extend_from_slice(b2);
    out.extend_from_slice(b1);
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EntropyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or(EntropyError::Truncated(self.data.len()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, EntropyError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EntropyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn unpack_bitstream(bytes: &[u8]) -> Result<BitstreamFile, EntropyError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if bytes.len() < 4 || r.take(4)? != BITSTREAM_MAGIC {
        return Err(EntropyError::BadMagic);
    }
    let version = r.u16()?;
    if version != BITSTREAM_VERSION {
        return Err(EntropyError::UnsupportedVersion(version));
    }
    let header = BitstreamHeader {
        height: r.u32()?,
        width: r.u32()?,
        channels: r.u16()?,
        hyper_channels: r.u16()?,
        lambda_id: r.take(1)?[0],
    };
    if header.height == 0 || header.width == 0 {
        return Err(EntropyError::Corrupt("zero image dimension"));
    }
    let len_b2 = r.u32()? as usize;
    let len_b1 = r.u32()? as usize;
    let payload = bytes.len() - HEADER_LEN;
    if payload != len_b1 + len_b2 {
        return Err(EntropyError::LengthMismatch {
            expected: len_b1 + len_b2,
            found: payload,
        });
    }
    let b2 = r.take(len_b2)?.to_vec();
    let b1 = r.take(len_b1)?.to_vec();
    Ok(BitstreamFile { header, b2, b1 })
}
