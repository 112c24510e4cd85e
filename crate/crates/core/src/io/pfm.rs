//! Single-channel portable float maps ("Pf"). Rows are stored bottom to
//! top; a negative scale marks little-endian samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::regression::DisparityMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub values: Vec<f32>,
}

impl Pfm {
    /// Non-finite samples (e.g. `inf` for unknown disparity) become invalid.
    pub fn into_disparity(self) -> Result<DisparityMap> {
        let valid = self.values.iter().map(|v| v.is_finite()).collect();
        let values = self.values.into_iter().map(|v| if v.is_finite() { v } else { 0.0 }).collect();
        DisparityMap::with_mask(self.width, self.height, values, valid)
    }
}

impl From<&DisparityMap> for Pfm {
    fn from(d: &DisparityMap) -> Self {
        Pfm {
            width: d.width,
            height: d.height,
            values: d.values.clone(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<&str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected {what}, found end of file")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::parse(start, format!("{what} is not ASCII")))
    }

    fn number<N: std::str::FromStr>(&mut self, what: &str) -> Result<N> {
        let start = {
            self.skip_ws();
            self.pos
        };
        let tok = self.token(what)?;
        tok.parse().map_err(|_| Error::parse(start, format!("invalid {what} '{tok}'")))
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Pfm> {
    let mut cur = Cursor { bytes, pos: 0 };
    match cur.token("magic")? {
        "Pf" => {}
        "PF" => return Err(Error::UnsupportedFormat("color PFM ('PF'); only single-channel 'Pf' is supported".into())),
        other => return Err(Error::parse(0, format!("bad magic '{other}', expected 'Pf'"))),
    }
    let width: usize = cur.number("width")?;
    let height: usize = cur.number("height")?;
    let scale: f64 = cur.number("scale")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(cur.pos, format!("empty image {width}x{height}")));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(cur.pos, format!("invalid scale {scale}")));
    }
    // exactly one whitespace byte separates the header from the samples
    if cur.pos >= bytes.len() {
        return Err(Error::parse(cur.pos, "missing sample data"));
    }
    let data = &bytes[cur.pos + 1..];
    let need = width * height * 4;
    if data.len() < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated: {width}x{height} needs {need} data bytes, found {}", data.len()),
        ));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0f32; width * height];
    for (i, chunk) in data[..need].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / width, i % width);
        values[(height - 1 - row) * width + col] = v;
    }
    Ok(Pfm { width, height, values })
}

/// Always little-endian with scale −1.
pub fn encode_pfm(pfm: &Pfm) -> Result<Vec<u8>> {
    if pfm.values.len() != pfm.width * pfm.height || pfm.values.is_empty() {
        return Err(Error::config(format!(
            "pfm: {}x{} image with {} values",
            pfm.width,
            pfm.height,
            pfm.values.len()
        )));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    out.reserve(pfm.values.len() * 4);
    for row in pfm.values.chunks_exact(pfm.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Pfm> {
    let path = path.as_ref();
    decode_pfm(&super::read_file(path)?).map_err(|e| e.at_path(path))
}

pub fn write_pfm(path: impl AsRef<Path>, pfm: &Pfm) -> Result<()> {
    super::write_file(path.as_ref(), &encode_pfm(pfm)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_bytes() {
        let bytes = encode_pfm(&Pfm { width: 1, height: 1, values: vec![3.25] }).unwrap();
        let mut want = b"Pf\n1 1\n-1.0\n".to_vec();
        want.extend_from_slice(&[0x00, 0x00, 0x50, 0x40]);
        assert_eq!(bytes, want);
    }

    #[test]
    fn rows_are_flipped_on_disk() {
        let p = Pfm { width: 2, height: 2, values: vec![1.0, 2.0, 3.0, 4.0] };
        let bytes = encode_pfm(&p).unwrap();
        let body = &bytes[bytes.len() - 16..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 3.0);
        assert_eq!(decode_pfm(&bytes).unwrap(), p);
    }

    #[test]
    fn big_endian_input() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&7.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().values, [7.5]);
    }

    #[test]
    fn color_is_unsupported() {
        let r = decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0");
        assert!(matches!(r, Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn errors_carry_offsets() {
        assert!(matches!(decode_pfm(b"P5\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_pfm(b"Pf\n2 x\n-1.0\n"), Err(Error::Parse { offset: 5, .. })));
        let r = decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0");
        assert!(matches!(r, Err(Error::Parse { offset: 16, .. })), "{r:?}");
    }

    #[test]
    fn infinite_samples_become_invalid() {
        let d = Pfm { width: 2, height: 1, values: vec![f32::INFINITY, 2.0] }.into_disparity().unwrap();
        assert_eq!(d.valid, [false, true]);
    }
}
