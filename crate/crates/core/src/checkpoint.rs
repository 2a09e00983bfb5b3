//! Checkpoint directories.
//!
//! ```text
//! weights.leld   one f64 LELD container per named tensor, concatenated
//! manifest.tsv   name <TAB> shape <TAB> dtype <TAB> constraint <TAB> byte offset
//! model.cfg      architecture and budget (key = value)
//! train.cfg      training configuration echo (optional)
//! metrics.json   final metrics (optional)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::config::{render, KvConfig};
use crate::container::{Container, DType};
use crate::ensemble::{Model, ModelConfig};
use crate::error::{LelError, Result};
use crate::params::Constraint;

pub const WEIGHTS_FILE: &str = "weights.leld";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const TRAIN_CONFIG_FILE: &str = "train.cfg";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub constraint: Constraint,
    pub offset: usize,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let bad = |n: usize, m: &str| LelError::Format(format!("manifest line {n}: {m}"));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, line)| {
            let n = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            let [name, shape, dtype, constraint, offset] = f.as_slice() else {
                return Err(bad(n, "expected 5 tab-separated fields"));
            };
            let shape = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(n, "bad shape")))
                    .collect::<Result<_>>()?
            };
            let dtype = match *dtype {
                "f32" => DType::F32,
                "f64" => DType::F64,
                _ => return Err(bad(n, "bad dtype")),
            };
            Ok(ManifestEntry {
                name: name.to_string(),
                shape,
                dtype,
                constraint: Constraint::parse(constraint).ok_or_else(|| bad(n, "bad constraint"))?,
                offset: offset.parse().map_err(|_| bad(n, "bad offset"))?,
            })
        })
        .collect()
}

/// Encodes every parameter; returns the weights blob and manifest text.
pub fn encode_weights(model: &Model) -> Result<(Vec<u8>, String)> {
    let mut blob = Vec::new();
    let mut manifest = String::from("# name\tshape\tdtype\tconstraint\toffset\n");
    for (_, p) in model.store.iter() {
        let offset = blob.len();
        let cont = Container {
            dtype: DType::F64,
            shape: p.value.shape().to_vec(),
            data: p.value.iter().copied().collect(),
            metadata: format!("name\t{}\nconstraint\t{}\n", p.name, p.constraint.tag()),
        };
        blob.extend(cont.encode()?);
        manifest.push_str(&format!(
            "{}\t{}\tf64\t{}\t{offset}\n",
            p.name,
            shape_str(p.value.shape()),
            p.constraint.tag()
        ));
    }
    Ok((blob, manifest))
}

/// Writes `model` (and the optional echoes) into `dir`, creating it.
pub fn save(dir: &Path, model: &Model, train_cfg: Option<&str>, metrics_json: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LelError::io(dir, e))?;
    let (blob, manifest) = encode_weights(model)?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| LelError::io(p, e))
    };
    write(WEIGHTS_FILE, &blob)?;
    write(MANIFEST_FILE, manifest.as_bytes())?;
    write(MODEL_CONFIG_FILE, render(&model.config.to_pairs()).as_bytes())?;
    if let Some(t) = train_cfg {
        write(TRAIN_CONFIG_FILE, t.as_bytes())?;
    }
    if let Some(m) = metrics_json {
        write(METRICS_FILE, m.as_bytes())?;
    }
    Ok(())
}

/// Rebuilds the model from `model.cfg` and fills every parameter by name.
/// Zero-norm LGCN gains are reset to ones; the names reset are returned.
pub fn load(dir: &Path) -> Result<(Model, Vec<String>)> {
    let cfg_path = dir.join(MODEL_CONFIG_FILE);
    let mut kv = KvConfig::load(&cfg_path)?;
    let config = ModelConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let mp = dir.join(MANIFEST_FILE);
    let manifest = parse_manifest(&fs::read_to_string(&mp).map_err(|e| LelError::io(&mp, e))?)?;
    let wp = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wp).map_err(|e| LelError::io(&wp, e))?;
    let mut model = Model::new(config)?;
    decode_weights(&mut model, &manifest, &blob)?;
    let reset = model.sanitize();
    Ok((model, reset))
}

pub fn decode_weights(model: &mut Model, manifest: &[ManifestEntry], blob: &[u8]) -> Result<()> {
    if manifest.len() != model.store.len() {
        return Err(LelError::Format(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.len(),
            model.store.len()
        )));
    }
    for e in manifest {
        let id = model
            .store
            .find(&e.name)
            .ok_or_else(|| LelError::Format(format!("unknown tensor {:?}", e.name)))?;
        let bytes = blob
            .get(e.offset..)
            .ok_or_else(|| LelError::Format(format!("offset {} of {:?} is past the end", e.offset, e.name)))?;
        let (cont, _) = Container::decode(bytes)?;
        let p = model.store.get_mut(id);
        if cont.shape != e.shape || cont.shape != p.value.shape() {
            return Err(LelError::Format(format!(
                "{:?}: stored shape {:?}, manifest {:?}, architecture {:?}",
                e.name,
                cont.shape,
                e.shape,
                p.value.shape()
            )));
        }
        if e.constraint != p.constraint {
            return Err(LelError::Format(format!(
                "{:?}: constraint {} in manifest, {} in architecture",
                e.name,
                e.constraint.tag(),
                p.constraint.tag()
            )));
        }
        p.value = ArrayD::from_shape_vec(IxDyn(&cont.shape), cont.data).map_err(|e| LelError::Format(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        let mut c = ModelConfig::new(2, 64, 3, 128.0);
        c.embed_dim = 8;
        c.hidden = 8;
        c.heads = 2;
        c.seed = 11;
        Model::new(c).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small();
        let a = m.alpha;
        m.store.value_mut(a)[1] = 0.625;
        save(dir.path(), &m, Some("seed = 1\n"), None).unwrap();
        let (back, reset) = load(dir.path()).unwrap();
        assert!(reset.is_empty());
        for ((_, p), (_, q)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn manifest_offsets_point_at_containers() {
        let m = small();
        let (blob, text) = encode_weights(&m).unwrap();
        let entries = parse_manifest(&text).unwrap();
        assert_eq!(entries.len(), m.store.len());
        for e in entries {
            assert_eq!(&blob[e.offset..e.offset + 4], b"LELD");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = small();
        let (blob, text) = encode_weights(&m).unwrap();
        let mut entries = parse_manifest(&text).unwrap();
        entries[0].shape.push(1);
        let mut other = small();
        assert!(decode_weights(&mut other, &entries, &blob).is_err());
    }
}
