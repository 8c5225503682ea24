//! Checkpoint files: one for the backbone, one per task.
//!
//! Layout: magic, format version (u32 LE), canonical JSON meta (u64 length
//! prefix), tensor count (u64), then `name length, name, tensor` records,
//! and a SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vlm_tensor::serialize::{read_tensor, read_u64, write_tensor};
use vlm_tensor::Tensor;

use crate::adapter::{AdapterLayer, AdapterStack};
use crate::backbone::{backbone_shapes, BackboneWeights};
use crate::json::{canonical, canonical_hash};
use crate::model::Vlm;
use crate::task::{TaskParams, TaskWeights};
use crate::{ModelConfig, Result, VlmError};

const MAGIC: &[u8; 8] = b"VLMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Backbone,
    Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: Kind,
    pub config: ModelConfig,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
    #[serde(default)]
    pub no_task_emb: bool,
}

pub fn config_hash(cfg: &ModelConfig) -> Result<String> {
    canonical_hash(cfg)
}

fn err(path: &Path, reason: impl Into<String>) -> VlmError {
    VlmError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn encode(meta: &Meta, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = canonical(meta)?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, *t)?;
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

type Records = BTreeMap<String, Tensor<f32>>;

fn decode(path: &Path, bytes: &[u8]) -> Result<(Meta, Records)> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(err(path, "not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(err(path, "checksum mismatch (file is corrupt)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(err(path, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let mut r = Cursor::new(&body[12..]);
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta: Meta = serde_json::from_slice(&meta)?;
    let n = read_u64(&mut r)?;
    let mut records = BTreeMap::new();
    for _ in 0..n {
        let len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| err(path, "tensor name is not UTF-8"))?;
        let t = read_tensor(&mut r)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(err(path, format!("duplicate tensor {name}")));
        }
    }
    if r.position() as usize != body.len() - 12 {
        return Err(err(path, "trailing bytes after tensor records"));
    }
    Ok((meta, records))
}

fn read(path: &Path) -> Result<(Meta, Records)> {
    let bytes = std::fs::read(path).map_err(|e| err(path, e.to_string()))?;
    decode(path, &bytes)
}

fn check_hash(path: &Path, meta: &Meta, expected: Option<&ModelConfig>, force: bool) -> Result<()> {
    let actual = config_hash(&meta.config)?;
    if actual != meta.config_hash {
        return Err(err(path, "stored config hash does not match its config"));
    }
    if let Some(cfg) = expected {
        if config_hash(cfg)? != meta.config_hash && !force {
            return Err(err(
                path,
                "config hash differs from the expected model config (use force to load anyway)",
            ));
        }
    }
    Ok(())
}

fn take(path: &Path, records: &mut Records, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = records
        .remove(name)
        .ok_or_else(|| err(path, format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(err(path, format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

pub fn backbone_bytes(cfg: &ModelConfig, w: &BackboneWeights) -> Result<Vec<u8>> {
    let meta = Meta {
        kind: Kind::Backbone,
        config: cfg.clone(),
        config_hash: config_hash(cfg)?,
        task: None,
        bottleneck: None,
        no_task_emb: false,
    };
    encode(&meta, &w.entries(""))
}

pub fn save_backbone(path: &Path, cfg: &ModelConfig, w: &BackboneWeights) -> Result<()> {
    write_atomic(path, &backbone_bytes(cfg, w)?)
}

/// Loads a backbone; with `expected`, refuses a different config unless `force`.
pub fn load_backbone(path: &Path, expected: Option<&ModelConfig>, force: bool) -> Result<(ModelConfig, BackboneWeights)> {
    let (meta, mut records) = read(path)?;
    if meta.kind != Kind::Backbone {
        return Err(err(path, "not a backbone checkpoint"));
    }
    check_hash(path, &meta, expected, force)?;
    let cfg = meta.config;
    let w = backbone_shapes(&cfg).try_map("", &mut |name, shape| take(path, &mut records, name, shape))?;
    if let Some(extra) = records.keys().next() {
        return Err(err(path, format!("unexpected tensor {extra}")));
    }
    Ok((cfg, w))
}

pub fn task_bytes(cfg: &ModelConfig, p: &TaskParams) -> Result<Vec<u8>> {
    let meta = Meta {
        kind: Kind::Task,
        config: cfg.clone(),
        config_hash: config_hash(cfg)?,
        task: Some(p.task.clone()),
        bottleneck: Some(p.bottleneck),
        no_task_emb: p.no_task_emb,
    };
    encode(&meta, &p.weights.entries(""))
}

pub fn save_task(path: &Path, cfg: &ModelConfig, p: &TaskParams) -> Result<()> {
    write_atomic(path, &task_bytes(cfg, p)?)
}

pub fn load_task(path: &Path, expected: &ModelConfig, force: bool) -> Result<TaskParams> {
    let (meta, mut records) = read(path)?;
    if meta.kind != Kind::Task {
        return Err(err(path, "not a task checkpoint"));
    }
    check_hash(path, &meta, Some(expected), force)?;
    let task = meta.task.ok_or_else(|| err(path, "task name missing"))?;
    let bottleneck = meta.bottleneck.ok_or_else(|| err(path, "bottleneck missing"))?;
    let cfg = expected;
    let d = cfg.d_model;

    let segments = match records.get("segments") {
        Some(t) if t.rank() == 2 && t.shape()[1] == d => records.remove("segments"),
        Some(t) => return Err(err(path, format!("segment table has shape {:?}", t.shape()))),
        None => None,
    };
    let lm_head = match records.contains_key("lm_head") {
        true => Some(take(path, &mut records, "lm_head", &[cfg.vocab_size, d])?),
        false => None,
    };
    let adapters = if records.keys().any(|k| k.starts_with("adapter.")) {
        let template = AdapterLayer {
            ln_g: vec![d],
            ln_b: vec![d],
            w_e: vec![d, bottleneck],
            w_d: vec![bottleneck, d],
        };
        let layers = (0..cfg.n_layers)
            .map(|i| template.try_map(&format!("adapter.{i}."), &mut |name, shape| take(path, &mut records, name, shape)))
            .collect::<Result<Vec<_>>>()?;
        Some(AdapterStack { bottleneck, layers })
    } else {
        None
    };
    if let Some(extra) = records.keys().next() {
        return Err(err(path, format!("unexpected tensor {extra}")));
    }
    Ok(TaskParams {
        task,
        bottleneck,
        no_task_emb: meta.no_task_emb,
        weights: TaskWeights {
            segments,
            adapters,
            lm_head,
        },
    })
}

pub fn backbone_path(dir: &Path) -> PathBuf {
    dir.join("backbone.ckpt")
}

pub fn task_path(dir: &Path, task: &str) -> PathBuf {
    dir.join("tasks").join(format!("{task}.ckpt"))
}

/// Writes the backbone and every task to separate files under `dir`.
pub fn save_model(dir: &Path, model: &Vlm) -> Result<()> {
    save_backbone(&backbone_path(dir), &model.config, &model.backbone)?;
    for p in model.tasks.values() {
        save_task(&task_path(dir, &p.task), &model.config, p)?;
    }
    Ok(())
}

/// Loads the backbone and the listed tasks (all task files when `tasks` is `None`).
pub fn load_model(dir: &Path, tasks: Option<&[&str]>, force: bool) -> Result<Vlm> {
    let (cfg, backbone) = load_backbone(&backbone_path(dir), None, force)?;
    let mut model = Vlm::new(cfg, backbone);
    let names: Vec<String> = match tasks {
        Some(t) => t.iter().map(|s| s.to_string()).collect(),
        None => {
            let mut v = Vec::new();
            let tdir = dir.join("tasks");
            if tdir.is_dir() {
                for e in std::fs::read_dir(&tdir)? {
                    let p = e?.path();
                    if p.extension().is_some_and(|x| x == "ckpt") {
                        if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                            v.push(stem.to_string());
                        }
                    }
                }
            }
            v.sort();
            v
        }
    };
    for name in names {
        let p = load_task(&task_path(dir, &name), &model.config, force)?;
        model.tasks.insert(p.task.clone(), p);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{TaskLayout, TaskSpec};

    fn model() -> Vlm {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 16,
            max_context: 8,
            ..ModelConfig::toy()
        };
        let mut m = Vlm::init(cfg, 4).unwrap();
        for (name, layout) in [
            ("a", TaskLayout { segments: true, adapters: true, lm_head: false }),
            ("b", TaskLayout { segments: false, adapters: false, lm_head: true }),
        ] {
            let spec = TaskSpec {
                name: name.into(),
                segments: vec!["x".into(), "y".into(), "z".into()],
                targets: vec!["z".into()],
                bottleneck: 3,
                max_len: Default::default(),
                separators: false,
            };
            let p = TaskParams::init(&spec, &m.config, layout, &m.backbone.wte, 1).unwrap();
            m.tasks.insert(name.into(), p);
        }
        m
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_model(dir.path(), &m).unwrap();
        let back = load_model(dir.path(), None, false).unwrap();
        assert_eq!(back, m);
        let first = std::fs::read(backbone_path(dir.path())).unwrap();
        let first_task = std::fs::read(task_path(dir.path(), "a")).unwrap();
        save_model(dir.path(), &back).unwrap();
        assert_eq!(first, std::fs::read(backbone_path(dir.path())).unwrap());
        assert_eq!(first_task, std::fs::read(task_path(dir.path(), "a")).unwrap());
    }

    #[test]
    fn tasks_are_independent_files() {
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model()).unwrap();
        std::fs::remove_file(task_path(dir.path(), "b")).unwrap();
        let m = load_model(dir.path(), None, false).unwrap();
        assert_eq!(m.tasks.keys().collect::<Vec<_>>(), ["a"]);
    }

    #[test]
    fn corruption_and_mismatch_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_model(dir.path(), &m).unwrap();
        let p = backbone_path(dir.path());
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        let e = load_backbone(&p, None, false).unwrap_err().to_string();
        assert!(e.contains("checksum"), "{e}");

        let mut other = m.config.clone();
        other.dropout = 0.0;
        let tp = task_path(dir.path(), "a");
        assert!(load_task(&tp, &other, false).is_err());
        assert!(load_task(&tp, &other, true).is_ok());
    }

    #[test]
    fn version_is_checked() {
        let m = model();
        let mut bytes = backbone_bytes(&m.config, &m.backbone).unwrap();
        bytes[8] = 9;
        let body = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body]);
        bytes[body..].copy_from_slice(&digest);
        let e = decode(Path::new("x"), &bytes).unwrap_err().to_string();
        assert!(e.contains("format version 9"), "{e}");
    }
}
