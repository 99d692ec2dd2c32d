//! Binary checkpoint container.
//!
//! Layout (integers little-endian): `"APCK"`, version `u16`, a `u32`
//! length-prefixed UTF-8 block of `key=value` lines describing the model and
//! its normalization, then per tensor: name length `u16`, name, rank `u8`,
//! dims as `u32`, payload as `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model, ModelSpec};

pub const MAGIC: &[u8; 4] = b"APCK";
pub const VERSION: u16 = 1;

fn join<T: ToString>(values: &[T], sep: &str) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn header_text(model: &Model) -> String {
    let spec = &model.spec;
    let mut s = String::new();
    s.push_str(&format!("name={}\n", spec.name));
    s.push_str(&format!("input_shape={}\n", join(&spec.input_shape, ",")));
    s.push_str(&format!("num_classes={}\n", spec.num_classes));
    s.push_str(&format!("layers={}\n", join(&spec.layers, ";")));
    s.push_str(&format!("mean={}\n", floats(&model.norm.mean)));
    s.push_str(&format!("std={}\n", floats(&model.norm.std)));
    s.push_str(&format!("init_seed={}\n", model.params.init_seed));
    s.push_str(&format!("tensors={}\n", model.params.named_arrays().len()));
    s
}

/// Size in bytes of everything except the tensor payloads.
pub fn header_len(model: &Model) -> usize {
    let text = header_text(model).len();
    let tables: usize = model
        .params
        .named_arrays()
        .iter()
        .map(|(name, a)| 2 + name.len() + 1 + 4 * a.shape.len())
        .sum();
    4 + 2 + 4 + text + tables
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let text = header_text(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, array) in model.params.named_arrays() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(array.shape.len() as u8);
        for &d in &array.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in array.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

fn parse_list<T: std::str::FromStr>(s: &str, sep: char, key: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep)
        .map(|v| v.trim().parse::<T>().map_err(|_| bad(format!("bad value '{v}' for {key}"))))
        .collect()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| bad("missing magic"))? != MAGIC {
        return Err(bad("magic mismatch"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad("header is not UTF-8"))?;
    let mut fields = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line '{line}'")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing header key '{k}'")));
    let shape: Vec<usize> = parse_list(get("input_shape")?, ',', "input_shape")?;
    let input_shape: [usize; 3] = shape.try_into().map_err(|_| bad("input_shape must have 3 entries"))?;
    let layers: Vec<LayerSpec> = parse_list(get("layers")?, ';', "layers")?;
    let spec = ModelSpec {
        name: get("name")?.to_string(),
        layers,
        input_shape,
        num_classes: get("num_classes")?.parse().map_err(|_| bad("bad num_classes"))?,
    };
    let norm = Normalization {
        mean: parse_list(get("mean")?, ',', "mean")?,
        std: parse_list(get("std")?, ',', "std")?,
    };
    let init_seed: u64 = get("init_seed")?.parse().map_err(|_| bad("bad init_seed"))?;
    let count: usize = get("tensors")?.parse().map_err(|_| bad("bad tensor count"))?;
    spec.validate()?;

    let template = crate::model::build_model(&spec, 0)?;
    let expected = template.named_arrays();
    if expected.len() != count {
        return Err(bad(format!("spec needs {} tensors, header lists {count}", expected.len())));
    }
    let mut values = Vec::with_capacity(count);
    for (want_name, want) in &expected {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        if name != want_name {
            return Err(bad(format!("expected tensor '{want_name}', found '{name}'")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != want.shape {
            return Err(bad(format!("tensor '{name}' has shape {dims:?}, spec needs {:?}", want.shape)));
        }
        let n: usize = dims.iter().product();
        let payload = r.take(8 * n)?;
        let v: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("tensor '{name}' holds non-finite values")));
        }
        values.push(v);
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut params = template.with_values(values)?;
    params.init_seed = init_seed;
    Model::new(spec, params, norm)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn model() -> Model {
        let spec = ModelSpec::mnist_cnn2();
        let params = build_model(&spec, 9).unwrap();
        let norm = Normalization {
            mean: vec![0.1306604762738429],
            std: vec![0.30810779333110395],
        };
        Model::new(spec, params, norm).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.apck");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn size_is_header_plus_payload() {
        let m = model();
        let payload: usize = m.params.named_arrays().iter().map(|(_, a)| 8 * a.numel()).sum();
        // 16·25 + 16 + 32·16·25 + 32 + 10·512 + 10 values
        assert_eq!(payload, 8 * (400 + 16 + 12800 + 32 + 5120 + 10));
        assert_eq!(to_bytes(&m).len(), header_len(&m) + payload);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&model());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(from_bytes(&wrong_magic).unwrap_err().to_string().contains("magic"));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
