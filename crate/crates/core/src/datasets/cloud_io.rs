//! `CPC1` point-cloud files: the magic, a little-endian `u32` point count,
//! then `x y z r g b` per point as little-endian `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ColoredPointCloud;

pub const CLOUD_MAGIC: &[u8; 4] = b"CPC1";

pub fn encode_cloud(cloud: &ColoredPointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 24);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for v in p.iter().chain(c) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<ColoredPointCloud> {
    if bytes.get(..4) != Some(CLOUD_MAGIC.as_slice()) {
        return Err(Error::format(path, "missing CPC1 magic"));
    }
    let n = bytes
        .get(4..8)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| Error::format(path, "truncated point count"))?;
    let body = &bytes[8..];
    if body.len() != n * 24 {
        return Err(Error::format(
            path,
            format!("{n} points need {} bytes, found {}", n * 24, body.len()),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let points = values.chunks_exact(6).map(|r| [r[0], r[1], r[2]]).collect();
    let colors = values.chunks_exact(6).map(|r| [r[3], r[4], r[5]]).collect();
    ColoredPointCloud::new(points, colors).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_cloud(cloud: &ColoredPointCloud, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_cloud(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &Path) -> Result<ColoredPointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cloud(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let cloud = ColoredPointCloud::new(vec![[1.0, -0.5, 0.25]], vec![[0.0, 0.5, 1.0]]).unwrap();
        let bytes = encode_cloud(&cloud);
        let mut expected = b"CPC1".to_vec();
        expected.extend(1u32.to_le_bytes());
        for v in [1.0f32, -0.5, 0.25, 0.0, 0.5, 1.0] {
            expected.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        let back = decode_cloud(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, cloud);
        assert_eq!(encode_cloud(&back), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let cloud = ColoredPointCloud::new(vec![[1.0, 0.0, 0.0]; 2], vec![[0.0; 3]; 2]).unwrap();
        let bytes = encode_cloud(&cloud);
        assert!(decode_cloud(&bytes[..bytes.len() - 2], Path::new("mem")).is_err());
        assert!(decode_cloud(b"CPC2\0\0\0\0", Path::new("mem")).is_err());
        assert!(decode_cloud(b"CPC1\x01", Path::new("mem")).is_err());
    }
}
