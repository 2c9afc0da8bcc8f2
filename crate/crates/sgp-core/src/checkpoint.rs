//! Checkpoints: a directory of SGT files, one per named parameter, plus
//! a manifest mapping name → file → shape.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::sgt;

/// Manifest line: `<name> <relative-file> <extent[x extent]...>`.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "checkpoint manifest line {}: expected 3 fields",
                lineno + 1
            )));
        }
        let name = fields[0].to_string();
        let file = fields[1].to_string();
        if file.starts_with('/') || file.contains("..") {
            return Err(Error::Format(format!(
                "checkpoint manifest line {}: file must be a plain relative path",
                lineno + 1
            )));
        }
        let dims: Vec<usize> = fields[2]
            .split('x')
            .map(|p| {
                p.parse::<usize>().map_err(|_| {
                    Error::Format(format!("checkpoint manifest line {}: bad shape", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if dims.is_empty() || out.iter().any(|(n, _, _): &(String, _, _)| *n == name) {
            return Err(Error::Format(format!(
                "checkpoint manifest line {}: empty shape or duplicate name",
                lineno + 1
            )));
        }
        out.push((name, file, dims));
    }
    if out.is_empty() {
        return Err(Error::Format("checkpoint manifest: no parameters".into()));
    }
    Ok(out)
}

pub fn save(dir: &Path, params: &ParamSet) -> Result<()> {
    let mut manifest = String::new();
    for (name, t) in params.all() {
        let rel = format!("params/{name}.sgt");
        sgt::write_file(&dir.join(&rel), t.dims(), &t.data())?;
        let shape = t
            .dims()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("{name} {rel} {shape}\n"));
    }
    sgt::write_bytes_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Restore every parameter in place. The checkpoint must cover exactly
/// the model's parameter set with matching shapes.
pub fn load(dir: &Path, params: &ParamSet) -> Result<()> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries = parse_manifest(&text)?;
    if entries.len() != params.all().len() {
        return Err(Error::Format(format!(
            "checkpoint at {} holds {} parameters, model has {}",
            dir.display(),
            entries.len(),
            params.all().len()
        )));
    }
    for (name, file, dims) in &entries {
        let t = params.get(name).ok_or_else(|| {
            Error::Format(format!("checkpoint names unknown parameter {name}"))
        })?;
        if t.dims() != dims.as_slice() {
            return Err(Error::Shape(format!(
                "checkpoint parameter {name}: stored {dims:?}, model expects {:?}",
                t.dims()
            )));
        }
        let (fdims, data) = sgt::read_file(&dir.join(file))?;
        if fdims != *dims {
            return Err(Error::Format(format!(
                "checkpoint file for {name} disagrees with its manifest shape"
            )));
        }
        t.set_data(&data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let p = std::env::temp_dir().join(format!("sgp-ckpt-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&p);
        p
    }

    #[test]
    fn save_load_roundtrip_bitwise() {
        let dir = tmpdir("rt");
        let cfg = ModelConfig { dim: 8, blocks: 1, patch: 2, ..ModelConfig::default() };
        let a = Model::new(cfg.clone(), 1).unwrap();
        save(&dir, &a.params).unwrap();
        let b = Model::new(cfg, 2).unwrap(); // different init
        load(&dir, &b.params).unwrap();
        for ((na, ta), (nb, tb)) in a.params.all().iter().zip(b.params.all()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na}");
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tmpdir("shape");
        let a = Model::new(
            ModelConfig { dim: 8, blocks: 1, patch: 2, ..ModelConfig::default() },
            1,
        )
        .unwrap();
        save(&dir, &a.params).unwrap();
        let b = Model::new(
            ModelConfig { dim: 16, blocks: 1, patch: 2, ..ModelConfig::default() },
            1,
        )
        .unwrap();
        assert!(load(&dir, &b.params).is_err());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn manifest_parser_rejects_malformed() {
        assert!(parse_manifest("").is_err());
        assert!(parse_manifest("a b").is_err());
        assert!(parse_manifest("a /abs/p.sgt 2x2").is_err());
        assert!(parse_manifest("a ../p.sgt 2x2").is_err());
        assert!(parse_manifest("a p.sgt 2xq").is_err());
        assert!(parse_manifest("a p.sgt 2x2\na q.sgt 2x2").is_err()); // dup
        assert!(parse_manifest("w params/w.sgt 4x4\nb params/b.sgt 4\n").is_ok());
    }
}
