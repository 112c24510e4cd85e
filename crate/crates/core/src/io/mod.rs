//! File formats: PFM and KITTI disparity maps, PPM/PGM/PNG images and the
//! weight checkpoint container.

pub mod checkpoint;
pub mod image;
pub mod kitti;
pub mod pfm;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use image::{crop_disparity, false_color, normalize, read_image, reflect_pad, write_false_color_png, write_ppm};
pub use kitti::{decode_kitti_disparity, encode_kitti_disparity, read_kitti_disparity, write_kitti_disparity};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm, Pfm};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::from(e).at_path(path))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::from(e).at_path(path))
}
