//! On-disk artifacts: `.attr` maps, PGM/PPM images and CSV tables.

use std::path::Path;

use aprop_core::checkpoint::write_atomic;

use crate::CliError;

pub const ATTR_MAGIC: &[u8; 4] = b"ATTR";
pub const ATTR_VERSION: u16 = 1;

/// `"ATTR"`, version `u16`, rank `u8`, dims `u32`, values `f64`, all
/// little-endian.
pub fn encode_attr(shape: &[usize], values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + 4 * shape.len() + 8 * values.len());
    out.extend_from_slice(ATTR_MAGIC);
    out.extend_from_slice(&ATTR_VERSION.to_le_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_attr(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>), CliError> {
    let bad = |m: &str| CliError::Format(format!("attribution file: {m}"));
    if bytes.len() < 7 || &bytes[..4] != ATTR_MAGIC {
        return Err(bad("magic mismatch"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != ATTR_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = bytes[6] as usize;
    let body = &bytes[7..];
    if body.len() < 4 * rank {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = body[..4 * rank]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = &body[4 * rank..];
    let n: usize = shape.iter().product();
    if payload.len() != 8 * n {
        return Err(bad(&format!("expected {n} values, found {} bytes", payload.len())));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

/// Scientific notation with 17 significant digits, which round-trips any f64.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV file atomically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Format(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Format(format!("csv: {e}")))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// 8-bit grayscale, binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// 8-bit RGB, binary PPM.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Min-max scaled grayscale of an H×W map; a constant map renders mid-gray.
pub fn heatmap(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    values
        .iter()
        .map(|&v| to_byte(if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }))
        .collect()
}

/// RGB overlay of a signed H×W map on a grayscale image in [0, 1]: positive
/// values blend towards red, negative towards blue, by `|a| / max|a|`.
pub fn overlay(gray: &[f64], values: &[f64]) -> Vec<u8> {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = Vec::with_capacity(3 * gray.len());
    for (&g, &a) in gray.iter().zip(values) {
        let w = if peak > 0.0 { a.abs() / peak } else { 0.0 };
        let base = (1.0 - w) * g;
        let (r, b) = if a > 0.0 { (base + w, base) } else { (base, base + w) };
        out.extend_from_slice(&[to_byte(r), to_byte(base), to_byte(b)]);
    }
    out
}

/// Two masks side by side, `M^p` left of `M^n`.
pub fn mask_pair(width: usize, positive: &[f64], negative: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 * positive.len());
    for (p, n) in positive.chunks(width).zip(negative.chunks(width)) {
        out.extend(p.iter().map(|&v| to_byte(v)));
        out.extend(n.iter().map(|&v| to_byte(v)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attr_round_trip_and_layout() {
        let bytes = encode_attr(&[1, 2, 2], &[0.5, -1.0, 2.0, 0.0]);
        assert_eq!(&bytes[..7], &[b'A', b'T', b'T', b'R', 1, 0, 3]);
        assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 7 + 12 + 32);
        assert_eq!(decode_attr(&bytes).unwrap(), (vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]));
        assert!(decode_attr(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_attr(b"ATTX\x01\x00\x00").is_err());
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            assert_eq!(float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn heatmap_scaling() {
        assert_eq!(heatmap(&[-2.0, 0.0, 2.0]), vec![0, 128, 255]);
        assert_eq!(heatmap(&[3.0; 4]), vec![128; 4]);
    }

    #[test]
    fn zero_overlay_is_gray() {
        let gray = [0.0, 0.5, 1.0];
        let rgb = overlay(&gray, &[0.0; 3]);
        assert_eq!(rgb, vec![0, 0, 0, 128, 128, 128, 255, 255, 255]);
        let signed = overlay(&[0.0, 0.0], &[1.0, -1.0]);
        assert_eq!(signed, vec![255, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn mask_pair_layout() {
        let px = mask_pair(2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(px, vec![255, 0, 0, 0, 0, 255, 255, 255]);
    }
}
