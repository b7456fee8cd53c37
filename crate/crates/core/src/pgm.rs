//! Binary PGM (P5) output for cluster overlays.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serialize a `[1, H, W]` or `[H, W]` image in [0, 1] as binary PGM with
/// maxval 255.
pub fn to_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        s => {
            return Err(Error::dimension(
                "to_pgm",
                format!("expected [H, W] or [1, H, W], got {s:?}"),
            ))
        }
    };
    let mut out = Vec::with_capacity(h * w + 32);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_pgm(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, to_pgm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_layout() {
        let img = Tensor::from_vec(&[1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        let bytes = to_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let payload = &bytes[bytes.len() - 6..];
        assert_eq!(payload, &[0, 128, 255, 64, 191, 255]);
    }

    #[test]
    fn pixel_bytes_round_trip_through_unit_scale() {
        // bytes scaled to [0,1] and back hit the same byte for all 256 values
        for b in 0u8..=255 {
            let v = b as f64 / 255.0;
            assert_eq!((v * 255.0).round() as u8, b);
        }
    }

    #[test]
    fn rejects_multichannel() {
        let img = Tensor::zeros(&[3, 2, 2]);
        assert!(to_pgm(&img).is_err());
    }
}
