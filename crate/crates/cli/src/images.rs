//! Binary PPM/PGM writers for the demo subcommand.

use std::io::Write;
use std::path::Path;

use tfanet_core::error::Result;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 pixmap from a row-major [3, h, w] plane image with values in [0, 1].
pub fn write_ppm(path: &Path, planes: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(planes.len(), 3 * h * w);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            buf.push(to_byte(planes[c * h * w + i]));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// P5 graymap from a binary mask.
pub fn write_pgm(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    assert_eq!(mask.len(), h * w);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_interleaves_planes() {
        let dir = std::env::temp_dir().join("tfanet_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.ppm");
        // 1x2 image: left pixel red, right pixel blue
        let planes = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        write_ppm(&p, &planes, 1, 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn pgm_maps_true_to_white() {
        let dir = std::env::temp_dir().join("tfanet_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.pgm");
        write_pgm(&p, &[true, false, false, true], 2, 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 0, 0, 255]);
    }
}
