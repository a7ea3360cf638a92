//! Parameter bundles on disk.
//!
//! A bundle is a directory holding `manifest.txt` (one `name:d1,d2,...`
//! line per tensor) and `tensors/<name>.trup`, one TRUP1 file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{join_dims, ParamStore};
use crate::tensor::{io, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const TENSOR_DIR: &str = "tensors";

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses manifest text into `(name, shape)` pairs, in file order.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, Vec<usize>)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (name, dims) = line
                .rsplit_once(':')
                .ok_or_else(|| ckpt_err(format!("manifest line without ':': {line}")))?;
            let shape = if dims.trim().is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| ckpt_err(format!("bad dims in manifest line: {line}")))?
            };
            Ok((name.to_string(), shape))
        })
        .collect()
}

/// Writes tensors plus manifest under `dir`.
pub fn save_tensors<'a>(dir: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let tdir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tdir)?;
    let mut manifest = String::new();
    for (name, t) in tensors {
        manifest.push_str(&format!("{name}:{}\n", join_dims(t.shape())));
        io::save(t, tdir.join(format!("{name}.trup")))?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads every tensor listed in the manifest under `dir`, checking each
/// file against its manifest shape.
pub fn load_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| ckpt_err(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let mut out = BTreeMap::new();
    for (name, shape) in parse_manifest(&text)? {
        let t = io::load(dir.join(TENSOR_DIR).join(format!("{name}.trup")))?;
        if t.shape() != shape.as_slice() {
            return Err(ckpt_err(format!(
                "{name}: manifest says {shape:?}, file holds {:?}",
                t.shape()
            )));
        }
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save_params(params: &ParamStore, dir: &Path) -> Result<()> {
    save_tensors(dir, params.ids().map(|id| (params.name(id), params.get(id))))
}

/// Loads a bundle into `params`. The bundle must list exactly the same
/// names and shapes as the store.
pub fn load_params(params: &mut ParamStore, dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| ckpt_err(format!("cannot read manifest: {e}")))?;
    if text != params.manifest() {
        return Err(ckpt_err("manifest does not match the model's parameter layout"));
    }
    let mut loaded = load_tensors(dir)?;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let t = loaded.remove(params.name(id)).expect("manifest matched");
        params.set(id, t)?;
    }
    Ok(())
}

/// Loads only entries whose names start with `prefix`; each must be present
/// in the bundle with the same shape. Returns how many were loaded.
pub fn load_params_with_prefix(params: &mut ParamStore, dir: &Path, prefix: &str) -> Result<usize> {
    let mut loaded = load_tensors(dir)?;
    let ids: Vec<_> = params.ids().filter(|&id| params.name(id).starts_with(prefix)).collect();
    // check everything before mutating anything
    for &id in &ids {
        let name = params.name(id);
        let t = loaded
            .get(name)
            .ok_or_else(|| ckpt_err(format!("checkpoint has no tensor {name}")))?;
        if t.shape() != params.get(id).shape() {
            return Err(ckpt_err(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
    }
    for &id in &ids {
        let t = loaded.remove(params.name(id)).expect("checked");
        params.set(id, t)?;
    }
    Ok(ids.len())
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected key=value, got {line}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parse() {
        let m = parse_manifest("a.w:2,3\nb:\n\nc.bias:4\n").unwrap();
        assert_eq!(m[0], ("a.w".to_string(), vec![2, 3]));
        assert_eq!(m[1], ("b".to_string(), vec![]));
        assert_eq!(m[2].1, vec![4]);
        assert!(parse_manifest("nocolon").is_err());
        assert!(parse_manifest("a:x,2").is_err());
    }

    #[test]
    fn params_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        let mut rng = crate::rng::seeded(1);
        s.add("x.weight", Tensor::randn(&[3, 2], &mut rng), true);
        s.add("x.running_var", Tensor::randn(&[5], &mut rng), false);
        save_params(&s, dir.path()).unwrap();
        let mut t = s.clone();
        for id in t.ids().collect::<Vec<_>>() {
            let z = Tensor::zeros(t.get(id).shape());
            t.set(id, z).unwrap();
        }
        load_params(&mut t, dir.path()).unwrap();
        for id in s.ids() {
            assert_eq!(s.get(id), t.get(id));
        }
    }

    #[test]
    fn mismatched_manifest_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("w", Tensor::ones(&[3]), true);
        save_params(&s, dir.path()).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Tensor::ones(&[4]), true);
        assert!(matches!(load_params(&mut other, dir.path()), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load_params_with_prefix(&mut other, dir.path(), "w"),
            Err(Error::Checkpoint(_))
        ));
    }
}
