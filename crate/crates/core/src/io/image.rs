//! Stereo image input (binary PPM/PGM and PNG), network-side normalization,
//! reflect padding to /32 multiples and false-color disparity output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::regression::DisparityMap;
use crate::tensor::{Shape, Tensor};

pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

fn netpbm_header(bytes: &[u8]) -> Result<(bool, usize, usize, usize, usize)> {
    let color = match bytes.get(..2) {
        Some(b"P6") => true,
        Some(b"P5") => false,
        _ => return Err(Error::parse(0, "expected binary PPM/PGM magic 'P6' or 'P5'")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, what) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'#') {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        fields[i] = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::parse(start, format!("invalid {what}")))?;
    }
    if fields[2] > 65535 {
        return Err(Error::parse(pos, format!("maxval {} exceeds 65535", fields[2])));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::parse(pos, "expected whitespace after header"));
    }
    Ok((color, fields[0], fields[1], fields[2], pos + 1))
}

fn decode_netpbm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (color, w, h, maxval, start) = netpbm_header(bytes)?;
    let ch = if color { 3 } else { 1 };
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * ch * bps;
    let data = &bytes[start..];
    if data.len() < need {
        return Err(Error::parse(bytes.len(), format!("truncated: need {need} sample bytes, found {}", data.len())));
    }
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 { data[i] as usize } else { u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as usize };
        v.min(maxval) as f32 / maxval as f32
    };
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        sample((y * w + x) * ch + if color { c } else { 0 })
    }))
}

fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::UnsupportedFormat(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::UnsupportedFormat(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let ch = info.color_type.samples();
    let gray = matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let k = if gray { 0 } else { c };
        buf[y * info.line_size + x * ch + k] as f32 / 255.0
    }))
}

/// RGB image in [0, 1] as a `(1, 3, H, W)` tensor. Gray inputs are
/// replicated across channels. The format is detected from the content.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_netpbm(bytes)
    } else {
        Err(Error::UnsupportedFormat("image is neither PNG nor binary PPM/PGM".into()))
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_image(&super::read_file(path)?).map_err(|e| e.at_path(path))
}

/// 8-bit binary PPM of the first batch item, values clamped to [0, 1].
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::config(format!("ppm: expected 3 channels, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((img.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    super::write_file(path.as_ref(), &encode_ppm(img)?)
}

/// Per-channel standardization with ImageNet statistics.
pub fn normalize(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let mut out = img.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, sd) = (MEAN[c % 3], STD[c % 3]);
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
    }
    out
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads bottom and right by mirror reflection (edge not repeated) up to the
/// next multiple of `multiple`.
pub fn reflect_pad(img: &Tensor<f32>, multiple: usize) -> Tensor<f32> {
    let s = img.shape();
    let up = |v: usize| v.div_ceil(multiple) * multiple;
    Tensor::from_fn(Shape::new(s.n, s.c, up(s.h), up(s.w)), |n, c, y, x| {
        img.at(n, c, reflect(y, s.h), reflect(x, s.w))
    })
}

/// Top-left `width × height` window of a map.
pub fn crop_disparity(map: &DisparityMap, width: usize, height: usize) -> Result<DisparityMap> {
    if width > map.width || height > map.height {
        return Err(Error::config(format!(
            "crop {width}x{height} exceeds map {}x{}",
            map.width, map.height
        )));
    }
    let mut values = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for y in 0..height {
        let row = y * map.width;
        values.extend_from_slice(&map.values[row..row + width]);
        valid.extend_from_slice(&map.valid[row..row + width]);
    }
    DisparityMap::with_mask(width, height, values, valid)
}

/// Jet-style colormap: `t = d / (D − 1)` runs blue → cyan → yellow → red;
/// invalid pixels are black.
pub fn false_color(map: &DisparityMap, max_disparity: usize) -> Vec<u8> {
    let span = max_disparity.saturating_sub(1).max(1) as f32;
    let ch = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut rgb = Vec::with_capacity(map.values.len() * 3);
    for (&d, &ok) in map.values.iter().zip(&map.valid) {
        if !ok {
            rgb.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let t = (d / span).clamp(0.0, 1.0);
        rgb.push(ch(1.5 - (4.0 * t - 3.0).abs()));
        rgb.push(ch(1.5 - (4.0 * t - 2.0).abs()));
        rgb.push(ch(1.5 - (4.0 * t - 1.0).abs()));
    }
    rgb
}

pub fn write_false_color_png(path: impl AsRef<Path>, map: &DisparityMap, max_disparity: usize) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width as u32, map.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(&false_color(map, max_disparity))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    super::write_file(path.as_ref(), &out)
}
