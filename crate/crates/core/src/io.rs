//! File formats: the FMAP feature-map container, PGM map renders, and CSV
//! helpers.
//!
//! FMAP layout, all little-endian:
//!
//! ```text
//! offset 0   magic  "FMAP" (4 bytes)
//! offset 4   u32    version, currently 1
//! offset 8   u32    height
//! offset 12  u32    width
//! offset 16  u32    channels
//! offset 20  f64 x  height * width * channels, row-major pixel-major
//! ```
//!
//! Round-trips are bit-exact. Parse errors report the exact byte offset at
//! which the input stopped making sense.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionMap, FeatureMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;

/// Serializes a feature map to FMAP bytes.
pub fn fmap_to_bytes(fm: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + fm.values().len() * 8);
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(fm.height() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.width() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.channels() as u32).to_le_bytes());
    for v in fm.values().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], offset: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *offset + n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "truncated while reading {what}: need bytes {}..{}, file ends at {}",
                *offset,
                *offset + n,
                bytes.len()
            ),
        });
    }
    let slice = &bytes[*offset..*offset + n];
    *offset += n;
    Ok(slice)
}

fn read_u32(bytes: &[u8], offset: &mut usize, what: &str) -> Result<u32> {
    let s = take(bytes, offset, 4, what)?;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

/// Parses FMAP bytes back into a feature map.
pub fn fmap_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let mut offset = 0usize;
    let magic = take(bytes, &mut offset, 4, "magic")?;
    if magic != FMAP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {FMAP_MAGIC:?}"),
        });
    }
    let version = read_u32(bytes, &mut offset, "version")?;
    if version != FMAP_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {FMAP_VERSION}"),
        });
    }
    let dim_at = offset;
    let height = read_u32(bytes, &mut offset, "height")? as usize;
    let width = read_u32(bytes, &mut offset, "width")? as usize;
    let channels = read_u32(bytes, &mut offset, "channels")? as usize;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Format {
            offset: dim_at as u64,
            message: format!("dimensions must be positive, got {height}x{width}x{channels}"),
        });
    }
    // Validate the declared size against the file length before allocating,
    // so corrupt headers cannot request absurd buffers.
    let count = (height as u64)
        .checked_mul(width as u64)
        .and_then(|v| v.checked_mul(channels as u64))
        .filter(|&v| v <= ((usize::MAX - 20) / 8) as u64)
        .ok_or_else(|| Error::Format {
            offset: dim_at as u64,
            message: format!("dimensions {height}x{width}x{channels} overflow"),
        })? as usize;
    let expected_len = 20 + count * 8;
    if bytes.len() < expected_len {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "truncated while reading sample data: need {expected_len} bytes, file ends at {}",
                bytes.len()
            ),
        });
    }
    if bytes.len() > expected_len {
        return Err(Error::Format {
            offset: expected_len as u64,
            message: format!("{} trailing bytes", bytes.len() - expected_len),
        });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let at = offset;
        let s = take(bytes, &mut offset, 8, "sample data")?;
        let v = f64::from_le_bytes([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]);
        if !v.is_finite() {
            return Err(Error::Format {
                offset: at as u64,
                message: format!("non-finite value {v} at element {i}"),
            });
        }
        data.push(v);
    }
    let values = Tensor::new(vec![height * width, channels], data)?;
    FeatureMap::new(height, width, channels, values)
}

pub fn write_fmap(path: &Path, fm: &FeatureMap) -> Result<()> {
    fs::write(path, fmap_to_bytes(fm))?;
    Ok(())
}

pub fn read_fmap(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path)?;
    fmap_from_bytes(&bytes)
}

/// Renders an attention map as binary PGM (P5, 8-bit).
///
/// Softmax maps are scaled by `HW * 255` and clipped, so the uniform map is
/// full brightness; scaled maps are min-max normalized per map. The header
/// comment records which encoding was used.
pub fn map_to_pgm(map: &AttentionMap) -> Vec<u8> {
    let hw = map.side();
    let values = map.values().data();
    let (encoding, pixels): (String, Vec<u8>) = if map.normalized() {
        let factor = hw as f64 * 255.0;
        (
            format!("source=softmax_probabilities encoding=softmax factor=HW*255 hw={hw}"),
            values
                .iter()
                .map(|v| (v * factor).round().clamp(0.0, 255.0) as u8)
                .collect(),
        )
    } else {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let px = if span == 0.0 {
            vec![0u8; values.len()]
        } else {
            values
                .iter()
                .map(|v| ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect()
        };
        (
            format!("source=scaled_logits encoding=minmax min={min} max={max}"),
            px,
        )
    };
    let mut out = Vec::with_capacity(pixels.len() + 64);
    out.extend_from_slice(format!("P5\n# {encoding}\n{hw} {hw}\n255\n").as_bytes());
    out.extend_from_slice(&pixels);
    out
}

pub fn write_map_pgm(path: &Path, map: &AttentionMap) -> Result<()> {
    fs::write(path, map_to_pgm(map))?;
    Ok(())
}

/// CSV of a matrix: one line per row, `.` decimals, LF endings.
pub fn matrix_to_csv(t: &Tensor) -> String {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = String::new();
    for i in 0..m {
        for j in 0..n {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", t.at(i, j)));
        }
        out.push('\n');
    }
    out
}

pub fn write_map_csv(path: &Path, map: &AttentionMap) -> Result<()> {
    fs::write(path, matrix_to_csv(map.values()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn fmap_round_trip_is_bitwise() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let h = 1 + rng.below(5);
            let w = 1 + rng.below(5);
            let c = 1 + rng.below(6);
            let fm = FeatureMap::random(h, w, c, &mut rng).unwrap();
            let bytes = fmap_to_bytes(&fm);
            let back = fmap_from_bytes(&bytes).unwrap();
            assert_eq!(back.height(), h);
            assert_eq!(back.width(), w);
            assert_eq!(back.channels(), c);
            for (a, b) in fm.values().data().iter().zip(back.values().data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn single_value_file_is_28_bytes() {
        let fm = FeatureMap::new(1, 1, 1, Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let bytes = fmap_to_bytes(&fm);
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn truncation_reports_exact_offset() {
        let mut rng = Rng::new(2);
        let fm = FeatureMap::random(2, 2, 2, &mut rng).unwrap();
        let bytes = fmap_to_bytes(&fm);
        for cut in [0, 3, 4, 7, 11, 19, 20, bytes.len() - 1] {
            match fmap_from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => {
                    assert_eq!(offset, cut as u64, "cut at {cut}");
                }
                other => panic!("cut {cut}: expected Format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version_report_their_offsets() {
        let mut rng = Rng::new(3);
        let fm = FeatureMap::random(1, 2, 1, &mut rng).unwrap();
        let mut bytes = fmap_to_bytes(&fm);
        bytes[0] = b'X';
        match fmap_from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected Format error, got {other:?}"),
        }
        let mut bytes = fmap_to_bytes(&fm);
        bytes[4] = 9;
        match fmap_from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut rng = Rng::new(4);
        let fm = FeatureMap::random(1, 1, 1, &mut rng).unwrap();
        let mut bytes = fmap_to_bytes(&fm);
        bytes.push(0);
        match fmap_from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 28),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn uniform_softmax_map_renders_constant_pgm() {
        let map = AttentionMap::new(Tensor::new(vec![4, 4], vec![0.25; 16]).unwrap(), true).unwrap();
        let pgm = map_to_pgm(&map);
        let header_end = pgm
            .windows(4)
            .position(|w| w == b"255\n")
            .map(|p| p + 4)
            .unwrap();
        let body = &pgm[header_end..];
        assert_eq!(body.len(), 16);
        assert!(body.iter().all(|&b| b == body[0]));
        assert!(pgm.starts_with(b"P5\n"));
    }

    #[test]
    fn minmax_pgm_spans_full_range() {
        let map = AttentionMap::new(
            Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.25]]).unwrap(),
            false,
        )
        .unwrap();
        let pgm = map_to_pgm(&map);
        let header_end = pgm
            .windows(4)
            .position(|w| w == b"255\n")
            .map(|p| p + 4)
            .unwrap();
        let body = &pgm[header_end..];
        assert_eq!(body.iter().min(), Some(&0));
        assert_eq!(body.iter().max(), Some(&255));
    }

    #[test]
    fn matrix_csv_uses_lf_and_dot() {
        let t = Tensor::from_rows(&[vec![1.5, 2.0], vec![-0.25, 3.0]]).unwrap();
        assert_eq!(matrix_to_csv(&t), "1.5,2\n-0.25,3\n");
    }
}
