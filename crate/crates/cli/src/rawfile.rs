//! Unquantized single-plane tensors (`FINNZ1`): the magic line, `u32` height
//! and width, then row-major little-endian `f64` values.

use std::fs;
use std::path::Path;

use fusioninn::Tensor;

use crate::CliError;

pub const MAGIC: &[u8] = b"FINNZ1\n";

pub fn encode(t: &Tensor<f64>) -> Result<Vec<u8>, CliError> {
    let (h, w) = plane_dims(t.shape())
        .ok_or_else(|| CliError::Input(format!("expected a single plane, got shape {:?}", t.shape())))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + 8 * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Tensor<f64>, CliError> {
    let bad = |m: &str| CliError::Input(format!("{origin}: {m}"));
    let body = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a FINNZ1 tensor file"))?;
    if body.len() < 8 {
        return Err(bad("truncated header"));
    }
    let h = u32::from_le_bytes(body[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let data = &body[8..];
    if h == 0 || w == 0 || data.len() != 8 * h * w {
        return Err(bad(&format!("{h}x{w} header does not match {} data bytes", data.len())));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![h, w], values).map_err(|e| bad(&e.to_string()))
}

pub fn save(t: &Tensor<f64>, path: &Path) -> Result<(), CliError> {
    fs::write(path, encode(t)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Tensor<f64>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    decode(&bytes, &path.display().to_string())
}

/// Whether the file starts with the raw-tensor magic.
pub fn is_raw(path: &Path) -> bool {
    fs::read(path).map(|b| b.starts_with(MAGIC)).unwrap_or(false)
}

fn plane_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [h, w] => Some((*h, *w)),
        [1, h, w] | [1, 1, h, w] => Some((*h, *w)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let t = Tensor::from_fn(&[3, 4], |i| (i as f64).sin() * 1e-7 - 0.3);
        let back = decode(&encode(&t).unwrap(), "mem").unwrap();
        assert_eq!(back, t);
        let four = t.reshape(&[1, 1, 3, 4]).unwrap();
        assert_eq!(encode(&four).unwrap(), encode(&t).unwrap());
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut b = encode(&Tensor::zeros(&[2, 2])).unwrap();
        b.pop();
        assert!(decode(&b, "mem").is_err());
        assert!(decode(b"P5\n", "mem").is_err());
        assert!(encode(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
