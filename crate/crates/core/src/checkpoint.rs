//! Versioned binary checkpoints for CVAE and MAHGNN parameters.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "MAHGCKPT"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "rows", "cols"}]}
//! data     f64 values of every tensor, row-major, in header order
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cvae::{CvaeConfig, ElboTerms, TripletCvae};
use crate::error::{Error, Result};
use crate::features::Standardizer;
use crate::heig::TripletRelation;
use crate::model::{MahgnnParams, ModelConfig};
use crate::params::ParamStore;
use crate::trainer::{EvalReport, TrainConfig};

pub const MAGIC: &[u8; 8] = b"MAHGCKPT";
pub const VERSION: u32 = 1;

pub const CVAE_KIND: &str = "cvae";
pub const MODEL_KIND: &str = "mahgnn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents before interpretation.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

pub fn encode_container(kind: &str, meta: serde_json::Value, tensors: &[(String, &Array2<f64>)]) -> Vec<u8> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), rows: t.nrows(), cols: t.ncols() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let scalars: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_container(path: &Path, bytes: &[u8]) -> Result<Container> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(corrupt(path, format!("truncated {what}")));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(8, "magic")? != MAGIC {
        return Err(corrupt(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let hlen = u64::from_le_bytes(take(8, "header length")?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| corrupt(path, "header length overflows"))?;
    let header: Header =
        serde_json::from_slice(take(hlen, "header")?).map_err(|e| corrupt(path, format!("header: {e}")))?;
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let n = entry.rows.checked_mul(entry.cols).ok_or_else(|| corrupt(path, "tensor size overflows"))?;
        let raw = take(n * 8, &format!("tensor `{}`", entry.name))?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Array2::from_shape_vec((entry.rows, entry.cols), values).expect("length checked");
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(corrupt(path, format!("duplicate tensor `{}`", entry.name)));
        }
    }
    if !cursor.is_empty() {
        return Err(corrupt(path, format!("{} trailing bytes", cursor.len())));
    }
    Ok(Container { kind: header.kind, meta: header.meta, tensors })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    if !path.exists() {
        return Err(Error::MissingUpstream(path.display().to_string()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_container(path, &bytes)
}

fn expect_kind(path: &Path, c: &Container, kind: &str) -> Result<()> {
    if c.kind != kind {
        return Err(corrupt(path, format!("expected a {kind} checkpoint, found {}", c.kind)));
    }
    Ok(())
}

fn named<'a>(prefix: &str, store: &'a ParamStore) -> impl Iterator<Item = (String, &'a Array2<f64>)> + 'a {
    let prefix = prefix.to_string();
    store.iter().map(move |(name, t)| (format!("{prefix}{name}"), t))
}

fn fill(path: &Path, store: &mut ParamStore, prefix: &str, tensors: &BTreeMap<String, Array2<f64>>) -> Result<()> {
    store
        .load(|name| tensors.get(&format!("{prefix}{name}")))
        .map_err(|m| corrupt(path, m))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CvaeMeta {
    relation: TripletRelation,
    config: CvaeConfig,
    history: Vec<ElboTerms>,
}

fn cvae_meta(m: &TripletCvae) -> CvaeMeta {
    CvaeMeta { relation: m.relation, config: m.config.clone(), history: m.history.clone() }
}

fn rebuild_cvae(path: &Path, meta: CvaeMeta, prefix: &str, tensors: &BTreeMap<String, Array2<f64>>) -> Result<TripletCvae> {
    let mut m = TripletCvae::new(meta.relation, meta.config)?;
    fill(path, m.params_mut(), prefix, tensors)?;
    m.history = meta.history;
    Ok(m)
}

pub fn encode_cvae(model: &TripletCvae) -> Vec<u8> {
    let meta = serde_json::to_value(cvae_meta(model)).expect("meta serializes");
    let tensors: Vec<_> = named("", model.params()).collect();
    encode_container(CVAE_KIND, meta, &tensors)
}

pub fn save_cvae(path: &Path, model: &TripletCvae) -> Result<()> {
    write_bytes(path, &encode_cvae(model))
}

pub fn load_cvae(path: &Path) -> Result<TripletCvae> {
    let c = read_container(path)?;
    expect_kind(path, &c, CVAE_KIND)?;
    let meta: CvaeMeta = serde_json::from_value(c.meta).map_err(|e| corrupt(path, e.to_string()))?;
    rebuild_cvae(path, meta, "", &c.tensors)
}

/// How the augmented views were drawn, so they can be regenerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationMeta {
    pub views: usize,
    pub seed: u64,
}

/// Everything needed to evaluate trained models on a graph.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub train: TrainConfig,
    pub report: EvalReport,
    pub standardizer: Standardizer,
    /// `None` for backbone-only models.
    pub augmentation: Option<AugmentationMeta>,
    pub cvaes: BTreeMap<TripletRelation, TripletCvae>,
    /// One model per run, in run order.
    pub models: Vec<MahgnnParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    train: TrainConfig,
    report: EvalReport,
    standardizer: Standardizer,
    augmentation: Option<AugmentationMeta>,
    cvaes: Vec<CvaeMeta>,
    models: Vec<ModelConfig>,
}

impl ModelCheckpoint {
    pub fn encode(&self) -> Vec<u8> {
        let meta = ModelMeta {
            train: self.train.clone(),
            report: self.report.clone(),
            standardizer: self.standardizer.clone(),
            augmentation: self.augmentation,
            cvaes: self.cvaes.values().map(cvae_meta).collect(),
            models: self.models.iter().map(|m| m.config.clone()).collect(),
        };
        let mut tensors = Vec::new();
        for (r, m) in &self.cvaes {
            tensors.extend(named(&format!("cvae/{r}/"), m.params()));
        }
        for (i, m) in self.models.iter().enumerate() {
            tensors.extend(named(&format!("run{i}/"), m.params()));
        }
        encode_container(MODEL_KIND, serde_json::to_value(meta).expect("meta serializes"), &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        expect_kind(path, &c, MODEL_KIND)?;
        let meta: ModelMeta = serde_json::from_value(c.meta).map_err(|e| corrupt(path, e.to_string()))?;
        let mut cvaes = BTreeMap::new();
        for cm in meta.cvaes {
            let r = cm.relation;
            cvaes.insert(r, rebuild_cvae(path, cm, &format!("cvae/{r}/"), &c.tensors)?);
        }
        let mut models = Vec::with_capacity(meta.models.len());
        for (i, config) in meta.models.into_iter().enumerate() {
            let mut m = MahgnnParams::init(config)?;
            fill(path, m.params_mut(), &format!("run{i}/"), &c.tensors)?;
            models.push(m);
        }
        Ok(ModelCheckpoint {
            train: meta.train,
            report: meta.report,
            standardizer: meta.standardizer,
            augmentation: meta.augmentation,
            cvaes,
            models,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cvae() -> TripletCvae {
        let cfg = CvaeConfig { latent_dim: 3, hidden: vec![5], seed: 4, ..CvaeConfig::default() };
        let mut m = TripletCvae::new(TripletRelation::RccT, cfg).unwrap();
        m.history.push(ElboTerms { total: 3.0, kl: 1.0, reconstruction: 2.0 });
        m
    }

    #[test]
    fn cvae_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let m = cvae();
        save_cvae(&path, &m).unwrap();
        let back = load_cvae(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.history, m.history);
        assert_eq!(back.config, m.config);
        assert_eq!(std::fs::read(&path).unwrap(), encode_cvae(&back));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_cvae(&cvae());
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        assert_eq!(header["kind"], CVAE_KIND);
        let scalars: usize = header["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["rows"].as_u64().unwrap() as usize * t["cols"].as_u64().unwrap() as usize)
            .sum();
        assert_eq!(bytes.len(), 20 + hlen + 8 * scalars);
    }

    #[test]
    fn rejects_damage() {
        let p = Path::new("x");
        let bytes = encode_cvae(&cvae());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(p, &bad), Err(Error::Checkpoint { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_container(p, &bad), Err(Error::Checkpoint { .. })));
        assert!(matches!(decode_container(p, &bytes[..bytes.len() - 3]), Err(Error::Checkpoint { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_container(p, &long), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn missing_file_is_missing_upstream() {
        assert!(matches!(load_cvae(Path::new("/nonexistent/c.ckpt")), Err(Error::MissingUpstream(_))));
    }

    #[test]
    fn kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_cvae(&path, &cvae()).unwrap();
        assert!(matches!(ModelCheckpoint::load(&path), Err(Error::Checkpoint { .. })));
    }
}
