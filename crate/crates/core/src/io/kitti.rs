//! KITTI disparity PNGs: 16-bit grayscale, disparity = value / 256, 0 marks
//! pixels without ground truth.

use std::path::Path;

use crate::error::{Error, Result};
use crate::regression::DisparityMap;

pub fn decode_kitti_disparity(bytes: &[u8]) -> Result<DisparityMap> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::UnsupportedFormat(format!("png: {e}")))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat(format!(
            "KITTI disparity must be 16-bit single-channel PNG, got {color:?} with {depth:?} bits"
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::UnsupportedFormat(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut values = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..2 * w].chunks_exact(2) {
            let v = u16::from_be_bytes([px[0], px[1]]);
            values.push(v as f32 / 256.0);
            valid.push(v != 0);
        }
    }
    DisparityMap::with_mask(w, h, values, valid)
}

/// Valid pixels are rounded to the nearest 1/256 and clamped to [1, 65535];
/// invalid ones are written as 0.
pub fn encode_kitti_disparity(map: &DisparityMap) -> Result<Vec<u8>> {
    let mut pixels = Vec::with_capacity(map.values.len() * 2);
    for (&v, &ok) in map.values.iter().zip(&map.valid) {
        let q = if ok { (v as f64 * 256.0).round().clamp(1.0, 65535.0) as u16 } else { 0 };
        pixels.extend_from_slice(&q.to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width as u32, map.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

pub fn read_kitti_disparity(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let path = path.as_ref();
    decode_kitti_disparity(&super::read_file(path)?).map_err(|e| e.at_path(path))
}

pub fn write_kitti_disparity(path: impl AsRef<Path>, map: &DisparityMap) -> Result<()> {
    super::write_file(path.as_ref(), &encode_kitti_disparity(map)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_bytes(color: png::ColorType, depth: png::BitDepth, data: &[u8], w: u32, h: u32) -> Vec<u8> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.write_header().unwrap().write_image_data(data).unwrap();
        out
    }

    #[test]
    fn pixel_values_map_to_disparity() {
        let raw = [512u16, 0, 256, 65535];
        let data: Vec<u8> = raw.iter().flat_map(|v| v.to_be_bytes()).collect();
        let d = decode_kitti_disparity(&png_bytes(png::ColorType::Grayscale, png::BitDepth::Sixteen, &data, 2, 2)).unwrap();
        assert_eq!(d.values, [2.0, 0.0, 1.0, 65535.0 / 256.0]);
        assert_eq!(d.valid, [true, false, true, true]);
    }

    #[test]
    fn eight_bit_and_rgb_are_rejected() {
        let gray8 = png_bytes(png::ColorType::Grayscale, png::BitDepth::Eight, &[1, 2, 3, 4], 2, 2);
        assert!(matches!(decode_kitti_disparity(&gray8), Err(Error::UnsupportedFormat(_))));
        let rgb16 = png_bytes(png::ColorType::Rgb, png::BitDepth::Sixteen, &[0; 6], 1, 1);
        assert!(matches!(decode_kitti_disparity(&rgb16), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn roundtrip_within_quantization() {
        let values: Vec<f32> = (0..12).map(|i| i as f32 * 7.31 + 0.004).collect();
        let mut valid = vec![true; 12];
        valid[3] = false;
        let map = DisparityMap::with_mask(4, 3, values.clone(), valid.clone()).unwrap();
        let back = decode_kitti_disparity(&encode_kitti_disparity(&map).unwrap()).unwrap();
        assert_eq!(back.valid, valid);
        for i in (0..12).filter(|&i| valid[i]) {
            assert!((back.values[i] - values[i]).abs() <= 1.0 / 512.0);
        }
    }

    #[test]
    fn tiny_valid_values_stay_valid() {
        let map = DisparityMap::new(1, 1, vec![0.0]).unwrap();
        let back = decode_kitti_disparity(&encode_kitti_disparity(&map).unwrap()).unwrap();
        assert!(back.valid[0]);
    }
}
