//! Binary checkpoint: a text manifest, the named parameter arrays in
//! little-endian `f64`, and the token tables. Adam moments are not stored.
//!
//! ```text
//! "NALP1" | u32 len | manifest (key=value lines)
//! u32 n_arrays | { u32 len | name | u64 rows | u64 cols | f64 * rows*cols }
//! u64 n_roles | { u32 len | token } | u64 n_values | { u32 len | token }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{parse_aggregator, Dims, Model, ModelConfig};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::math::Matrix;

const MAGIC: &[u8] = b"NALP1";

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_matrix(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) {
    put_str(out, name);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn manifest(model: &Model) -> String {
    let d = &model.dims;
    let c = &model.config;
    [
        ("mode", c.mode.token().to_string()),
        ("pair_encoder", c.pair_encoder.token().to_string()),
        ("aggregator", c.aggregator.name().to_string()),
        ("type_pairing", c.type_pairing.token().to_string()),
        ("n_roles", d.n_roles.to_string()),
        ("n_values", d.n_values.to_string()),
        ("k", d.k.to_string()),
        ("n_filters", d.n_filters.to_string()),
        ("n_gfcn", d.n_gfcn.to_string()),
        ("k_type", d.k_type.to_string()),
        ("n_tfcn", d.n_tfcn.to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{k}={v}\n"))
    .collect()
}

/// Serializes a model together with the vocabulary it was trained on.
pub fn to_bytes(model: &Model, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if vocab.n_roles() != model.dims.n_roles || vocab.n_values() != model.dims.n_values {
        return Err(Error::Dimension(format!(
            "vocabulary has {} roles / {} values, model expects {} / {}",
            vocab.n_roles(),
            vocab.n_values(),
            model.dims.n_roles,
            model.dims.n_values
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_str(&mut out, &manifest(model));

    let tensors = model.tensors();
    let bn = &model.nalp.bn;
    out.extend_from_slice(&((tensors.len() + 2) as u32).to_le_bytes());
    for (name, t) in &tensors {
        let (r, c) = t.shape();
        put_matrix(&mut out, name, r, c, t.value.data());
    }
    put_matrix(&mut out, "bn_running_mean", 1, bn.running_mean.len(), &bn.running_mean);
    put_matrix(&mut out, "bn_running_var", 1, bn.running_var.len(), &bn.running_var);

    out.extend_from_slice(&(vocab.n_roles() as u64).to_le_bytes());
    for r in vocab.roles() {
        put_str(&mut out, r);
    }
    out.extend_from_slice(&(vocab.n_values() as u64).to_le_bytes());
    for v in vocab.values() {
        put_str(&mut out, v);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn parse_manifest(text: &str) -> Result<(ModelConfig, Dims)> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| -> Result<&str> {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("manifest lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest field {k} is not a number")))
    };
    let fmt_err = |e: Error| Error::Format(e.to_string());
    let config = ModelConfig {
        mode: get("mode")?.parse().map_err(fmt_err)?,
        pair_encoder: get("pair_encoder")?.parse().map_err(fmt_err)?,
        aggregator: parse_aggregator(get("aggregator")?).map_err(fmt_err)?,
        type_pairing: get("type_pairing")?.parse().map_err(fmt_err)?,
    };
    let dims = Dims {
        n_roles: num("n_roles")?,
        n_values: num("n_values")?,
        k: num("k")?,
        n_filters: num("n_filters")?,
        n_gfcn: num("n_gfcn")?,
        k_type: num("k_type")?,
        n_tfcn: num("n_tfcn")?,
    };
    Ok((config, dims))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Vocabulary)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (config, dims) = parse_manifest(&r.string()?)?;
    let mut model = Model::zeros(dims, config).map_err(|e| Error::Format(e.to_string()))?;

    let n_arrays = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..n_arrays {
        let name = r.string()?;
        let rows = r.len()?;
        let cols = r.len()?;
        let data = r.f64s(rows.checked_mul(cols).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        arrays.insert(name, (rows, cols, data));
    }
    let mut take = |name: &str, shape: (usize, usize)| -> Result<Vec<f64>> {
        let (rows, cols, data) = arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        if (rows, cols) != shape {
            return Err(Error::Format(format!(
                "array {name} is {rows}x{cols}, manifest implies {}x{}",
                shape.0, shape.1
            )));
        }
        Ok(data)
    };
    for (name, t) in model.tensors_mut() {
        let (rows, cols) = t.shape();
        t.value = Matrix::new(rows, cols, take(name, (rows, cols))?)?;
    }
    let nf = dims.n_filters;
    model.nalp.bn.running_mean = take("bn_running_mean", (1, nf))?;
    model.nalp.bn.running_var = take("bn_running_var", (1, nf))?;
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Format(format!("unexpected array {extra}")));
    }

    let n_roles = r.len()?;
    let roles = (0..n_roles).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let n_values = r.len()?;
    let values = (0..n_values).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    if n_roles != dims.n_roles || n_values != dims.n_values {
        return Err(Error::Dimension(format!(
            "token tables hold {n_roles} roles / {n_values} values, manifest says {} / {}",
            dims.n_roles, dims.n_values
        )));
    }
    let vocab = Vocabulary::from_tokens(roles, values).map_err(|e| Error::Format(e.to_string()))?;
    Ok((model, vocab))
}

pub fn save(path: &Path, model: &Model, vocab: &Vocabulary) -> Result<()> {
    let bytes = to_bytes(model, vocab)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Vocabulary)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Ensures a dataset's vocabulary indexes tokens exactly like the one stored
/// with a checkpoint.
pub fn check_vocabulary(stored: &Vocabulary, data: &Vocabulary) -> Result<()> {
    if stored.n_roles() != data.n_roles() || stored.n_values() != data.n_values() {
        return Err(Error::Dimension(format!(
            "checkpoint vocabulary has {} roles / {} values, dataset has {} / {}",
            stored.n_roles(),
            stored.n_values(),
            data.n_roles(),
            data.n_values()
        )));
    }
    if !stored.roles().eq(data.roles()) || !stored.values().eq(data.values()) {
        return Err(Error::Dimension(
            "checkpoint and dataset vocabularies index tokens differently".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ParamTensor;
    use crate::model::{Mode, PairEncoder};

    fn filled(cfg: ModelConfig) -> Model {
        let dims = Dims {
            n_roles: 3,
            n_values: 5,
            k: 2,
            n_filters: if cfg.pair_encoder == PairEncoder::Conv { 3 } else { 2 },
            n_gfcn: 4,
            k_type: 2,
            n_tfcn: 3,
        };
        let mut m = Model::zeros(dims, cfg).unwrap();
        let mut x = 0.25;
        for (_, t) in m.tensors_mut() {
            for v in t.value.data_mut() {
                x = (x * 7.3 + 0.1) % 1.9 - 0.6;
                *v = x;
            }
        }
        m.nalp.bn.running_mean = vec![0.5; dims.n_filters];
        m.nalp.bn.running_var = vec![2.5; dims.n_filters];
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let vocab = Vocabulary::synthetic(3, 5);
        for cfg in [
            ModelConfig::default(),
            ModelConfig::typed(),
            ModelConfig {
                pair_encoder: PairEncoder::Mul,
                ..ModelConfig::default()
            },
        ] {
            let m = filled(cfg);
            let bytes = to_bytes(&m, &vocab).unwrap();
            let (back, v2) = from_bytes(&bytes).unwrap();
            let strip = |m: &Model| -> Vec<Vec<u64>> {
                m.tensors()
                    .iter()
                    .map(|(_, t)| t.value.data().iter().map(|x| x.to_bits()).collect())
                    .collect()
            };
            assert_eq!(strip(&m), strip(&back));
            assert_eq!(m.nalp.bn.running_var, back.nalp.bn.running_var);
            assert_eq!(m.config, back.config);
            assert_eq!(m.dims, back.dims);
            assert_eq!(v2, vocab);
            assert_eq!(to_bytes(&back, &v2).unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("model.ckpt");
        let m = filled(ModelConfig::typed());
        let vocab = Vocabulary::synthetic(3, 5);
        save(&path, &m, &vocab).unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back.config.mode, Mode::TNalp);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let vocab = Vocabulary::synthetic(3, 5);
        let bytes = to_bytes(&filled(ModelConfig::default()), &vocab).unwrap();
        assert!(matches!(from_bytes(b"XXXX1"), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(from_bytes(&longer), Err(Error::Format(_))));
        assert!(to_bytes(&filled(ModelConfig::default()), &Vocabulary::synthetic(3, 6)).is_err());
    }

    #[test]
    fn manifest_vocabulary_size_mismatch_is_dimension_error() {
        let vocab = Vocabulary::synthetic(3, 5);
        let bytes = to_bytes(&filled(ModelConfig::default()), &vocab).unwrap();
        // rewrite the value table with one extra token
        let tail = 8 + vocab.values().map(|v| 4 + v.len()).sum::<usize>();
        let mut edited = bytes[..bytes.len() - tail].to_vec();
        edited.extend_from_slice(&6u64.to_le_bytes());
        for v in vocab.values().chain(["extra"]) {
            put_str(&mut edited, v);
        }
        assert!(matches!(from_bytes(&edited), Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let vocab = Vocabulary::synthetic(3, 5);
        let mut m = filled(ModelConfig::default());
        m.nalp.g_bias = ParamTensor::zeros(1, 7);
        assert!(matches!(from_bytes(&to_bytes(&m, &vocab).unwrap()), Err(Error::Format(_))));
    }

    #[test]
    fn vocabulary_check() {
        let a = Vocabulary::synthetic(3, 5);
        let b = Vocabulary::from_tokens(["r0", "r2", "r1"], ["v0", "v1", "v2", "v3", "v4"]).unwrap();
        assert!(check_vocabulary(&a, &a).is_ok());
        assert!(check_vocabulary(&a, &b).is_err());
        assert!(check_vocabulary(&a, &Vocabulary::synthetic(3, 4)).is_err());
    }
}
