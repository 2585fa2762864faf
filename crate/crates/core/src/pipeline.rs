//! Stage runner behind the command-line interface.
//!
//! Each stage reads the outputs of earlier stages from the work directory
//! (`<workdir>/<stage>/`), writes its own outputs next to a `manifest.json`
//! listing the SHA-256 of every file read and written, and is a pure
//! function of its inputs and configuration section.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    augment_features, augment_file_name, initial_file_name, pretrain_relations, read_groups, relations_for, write_groups,
    FeatureGroupSet,
};
use crate::checkpoint::{load_cvae, save_cvae, AugmentationMeta, ModelCheckpoint};
use crate::cvae::{CvaeConfig, GaussianLatents, TripletCvae};
use crate::error::{Error, Result};
use crate::features::{feature_matrix, Standardizer};
use crate::heig::{relation_stats, AccountType, Heig, RelationStats, TripletRelation};
use crate::ingest::{assemble_dataset, parse_records, write_records, DatasetSpec};
use crate::io::{
    read_account_kinds, read_feature_matrix, read_graph, read_labels, write_accounts, write_feature_matrix,
    write_graph, write_labels, ACCOUNTS_FILE, EDGES_FILE, LABELS_FILE, RECORDS_FILE,
};
use crate::synthgen::{generate, SynthSpec};
use crate::trainer::{evaluate, fit, format_table, mean_std, EvalReport, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const AUGMENTATION_FILE: &str = "augmentation.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.txt";
pub const STATS_FILE: &str = "stats.tsv";
pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    BuildGraph,
    Features,
    PretrainCvae,
    Augment,
    Train,
    Eval,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::BuildGraph,
        Stage::Features,
        Stage::PretrainCvae,
        Stage::Augment,
        Stage::Train,
        Stage::Eval,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildGraph => "build-graph",
            Stage::Features => "features",
            Stage::PretrainCvae => "pretrain-cvae",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Stats => "stats",
        }
    }

    /// Output directory name under the work directory.
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::BuildGraph => "graph",
            Stage::PretrainCvae => "cvae",
            other => other.name(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub workdir: PathBuf,
    /// Interaction records; defaults to the synth stage output.
    pub records: Option<PathBuf>,
    /// `id,label` seed labels; defaults to the synth stage output.
    pub labels: Option<PathBuf>,
    /// Optional `id,kind[,label]` account-type declarations.
    pub accounts: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { workdir: PathBuf::from("work"), records: None, labels: None, accounts: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub negatives: usize,
    pub k: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { negatives: 191, k: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Views to generate; 0 means the largest view count of the train grid.
    pub views: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { views: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Replaces every section's seed when set.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub synth: Option<SynthSpec>,
    pub dataset: DatasetConfig,
    pub cvae: CvaeConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The configuration with the global seed pushed into every section.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if let Some(seed) = self.seed {
            if let Some(s) = out.synth.as_mut() {
                s.seed = seed;
            }
            out.dataset.seed = seed;
            out.cvae.seed = seed;
            out.augment.seed = seed;
            out.train.seed = seed;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if !(self.dataset.k > 0.0 && self.dataset.k <= 1.0) {
            return Err(Error::InvalidK(self.dataset.k));
        }
        self.cvae.validate()?;
        self.train.validate()
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.paths.workdir.join(stage.dir_name())
    }

    /// Number of augmented views the augment stage produces.
    pub fn view_count(&self) -> usize {
        if !self.train.augmented {
            0
        } else if self.augment.views > 0 {
            self.augment.views
        } else {
            self.train.views.iter().copied().max().unwrap_or(1)
        }
    }
}

/// Explicit locations that replace the work-directory defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub records: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub accounts: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub cvae: Option<PathBuf>,
    pub augment: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Hex SHA-256 of the stage's configuration section (canonical JSON).
    pub config_hash: String,
    /// `<directory>/<file>` of each input, with its hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file names relative to the stage directory, with their hashes.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hash_json<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("config serializes")))
}

/// Inputs and outputs of one stage run.
struct Record {
    inputs: BTreeMap<String, String>,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Record {
    fn new(out: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Record { inputs: BTreeMap::new(), out, outputs: Vec::new() })
    }

    /// Checks that `path` exists and records its hash.
    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Error::MissingUpstream(path.display().to_string()));
        }
        let parent = path.parent().and_then(Path::file_name).map(|p| p.to_string_lossy().into_owned());
        let name = path.file_name().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        let key = match parent {
            Some(p) => format!("{p}/{name}"),
            None => name,
        };
        self.inputs.insert(key, sha256_file(path)?);
        Ok(path.to_path_buf())
    }

    fn output(&mut self, name: impl Into<String>) -> PathBuf {
        let name = name.into();
        let path = self.out.join(&name);
        self.outputs.push(name);
        path
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.output(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn finish<T: Serialize>(self, stage: Stage, seed: Option<u64>, section: &T) -> Result<Manifest> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), sha256_file(&self.out.join(name))?);
        }
        let manifest = Manifest {
            stage: stage.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: hash_json(section),
            inputs: self.inputs,
            outputs,
        };
        let path = self.out.join(MANIFEST_FILE);
        std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn graph_inputs(rec: &mut Record, dir: &Path) -> Result<Heig> {
    rec.input(&dir.join(ACCOUNTS_FILE))?;
    rec.input(&dir.join(EDGES_FILE))?;
    read_graph(dir)
}

fn cvae_file(r: TripletRelation) -> String {
    format!("{r}.ckpt")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(rec: &mut Record, name: &str, value: &T) -> Result<()> {
    rec.write_text(name, &serde_json::to_string_pretty(value).expect("value serializes"))
}

/// Standardized feature matrices computed from the graph with a stored
/// standardizer.
pub fn standardized_features(g: &Heig, standardizer: &Standardizer) -> [Array2<f64>; 2] {
    AccountType::ALL.map(|k| standardizer.apply(k, &feature_matrix(g, k)))
}

/// Regenerates the feature groups a checkpoint was trained on.
pub fn checkpoint_groups(g: &Heig, ckpt: &ModelCheckpoint) -> Result<FeatureGroupSet> {
    let initial = standardized_features(g, &ckpt.standardizer);
    match ckpt.augmentation {
        None => Ok(FeatureGroupSet::initial_only(initial)),
        Some(aug) => {
            let mut latents = GaussianLatents(ChaCha8Rng::seed_from_u64(aug.seed));
            augment_features(initial, &ckpt.cvaes, aug.views, &mut latents)
        }
    }
}

fn stage_synth(cfg: &PipelineConfig, out: PathBuf) -> Result<Manifest> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("the synth stage needs a [synth] section".into()))?;
    let data = generate(spec)?;
    let mut rec = Record::new(out)?;
    write_records(&rec.output(RECORDS_FILE), &data.records)?;
    write_labels(&rec.output(LABELS_FILE), &data.labels)?;
    write_accounts(&rec.output(ACCOUNTS_FILE), &data.accounts)?;
    write_json(&mut rec, LEDGER_FILE, &data.ledger)?;
    rec.finish(Stage::Synth, Some(spec.seed), spec)
}

fn stage_build_graph(cfg: &PipelineConfig, ov: &Overrides, out: PathBuf) -> Result<Manifest> {
    let synth = cfg.stage_dir(Stage::Synth);
    let records = ov.records.clone().or(cfg.paths.records.clone()).unwrap_or_else(|| synth.join(RECORDS_FILE));
    let labels = ov.labels.clone().or(cfg.paths.labels.clone()).unwrap_or_else(|| synth.join(LABELS_FILE));
    let accounts = ov.accounts.clone().or(cfg.paths.accounts.clone()).or_else(|| {
        let p = synth.join(ACCOUNTS_FILE);
        (ov.records.is_none() && cfg.paths.records.is_none() && p.is_file()).then_some(p)
    });
    let mut rec = Record::new(out)?;
    let records = parse_records(&rec.input(&records)?)?;
    let labels = read_labels(&rec.input(&labels)?)?;
    let declared = match accounts {
        Some(p) => read_account_kinds(&rec.input(&p)?)?,
        None => BTreeMap::new(),
    };
    let spec = DatasetSpec { labels, negatives: cfg.dataset.negatives, k: cfg.dataset.k, seed: cfg.dataset.seed };
    let g = assemble_dataset(&records, &spec, &declared)?;
    write_graph(&rec.out, &g)?;
    rec.output(ACCOUNTS_FILE);
    rec.output(EDGES_FILE);
    write_stats(&mut rec, &g)?;
    rec.finish(Stage::BuildGraph, Some(cfg.dataset.seed), &cfg.dataset)
}

fn write_stats(rec: &mut Record, g: &Heig) -> Result<()> {
    let stats: RelationStats = relation_stats(g);
    rec.write_text(STATS_FILE, &format!("{}\n{}\n", RelationStats::header(), stats.row()))
}

fn feature_file(kind: AccountType) -> String {
    format!("features_{kind}.csv")
}

fn stage_features(cfg: &PipelineConfig, ov: &Overrides, out: PathBuf) -> Result<Manifest> {
    let graph = ov.graph.clone().unwrap_or_else(|| cfg.stage_dir(Stage::BuildGraph));
    let mut rec = Record::new(out)?;
    let g = graph_inputs(&mut rec, &graph)?;
    let raw = AccountType::ALL.map(|k| feature_matrix(&g, k));
    for kind in AccountType::ALL {
        write_feature_matrix(&rec.output(feature_file(kind)), g.ids(kind), &raw[kind.index()])?;
    }
    write_json(&mut rec, STANDARDIZER_FILE, &Standardizer::fit(&raw))?;
    rec.finish(Stage::Features, None, &())
}

/// Reads the exported raw features and applies the stored standardizer.
fn load_features(rec: &mut Record, dir: &Path, g: &Heig) -> Result<(Standardizer, [Array2<f64>; 2])> {
    let standardizer: Standardizer = read_json(&rec.input(&dir.join(STANDARDIZER_FILE))?)?;
    let mut out = Vec::with_capacity(2);
    for kind in AccountType::ALL {
        let path = rec.input(&dir.join(feature_file(kind)))?;
        let (ids, m) = read_feature_matrix(&path)?;
        if ids != g.ids(kind) {
            return Err(Error::Config(format!("{}: account ids do not match the graph", path.display())));
        }
        out.push(standardizer.apply(kind, &m));
    }
    let eoa = out.pop().expect("two types");
    let ca = out.pop().expect("two types");
    Ok((standardizer, [ca, eoa]))
}

fn stage_pretrain_cvae(cfg: &PipelineConfig, ov: &Overrides, out: PathBuf) -> Result<Manifest> {
    let graph = ov.graph.clone().unwrap_or_else(|| cfg.stage_dir(Stage::BuildGraph));
    let features = ov.features.clone().unwrap_or_else(|| cfg.stage_dir(Stage::Features));
    let mut rec = Record::new(out)?;
    let g = graph_inputs(&mut rec, &graph)?;
    let (_, x) = load_features(&mut rec, &features, &g)?;
    let models = pretrain_relations(&g, &x, &cfg.cvae)?;
    for (r, m) in &models {
        save_cvae(&rec.output(cvae_file(*r)), m)?;
    }
    rec.finish(Stage::PretrainCvae, Some(cfg.cvae.seed), &cfg.cvae)
}

fn load_cvaes(rec: &mut Record, dir: &Path) -> Result<BTreeMap<TripletRelation, TripletCvae>> {
    let mut out = BTreeMap::new();
    for kind in AccountType::ALL {
        for r in relations_for(kind) {
            let m = load_cvae(&rec.input(&dir.join(cvae_file(r)))?)?;
            if m.relation != r {
                return Err(Error::Config(format!("{}: holds relation {}", cvae_file(r), m.relation)));
            }
            out.insert(r, m);
        }
    }
    Ok(out)
}

fn stage_augment(cfg: &PipelineConfig, ov: &Overrides, out: PathBuf) -> Result<Manifest> {
    let graph = ov.graph.clone().unwrap_or_else(|| cfg.stage_dir(Stage::BuildGraph));
    let features = ov.features.clone().unwrap_or_else(|| cfg.stage_dir(Stage::Features));
    let cvae = ov.cvae.clone().unwrap_or_else(|| cfg.stage_dir(Stage::PretrainCvae));
    let mut rec = Record::new(out)?;
    let g = graph_inputs(&mut rec, &graph)?;
    let (_, x) = load_features(&mut rec, &features, &g)?;
    let views = cfg.view_count();
    let groups = if views == 0 {
        FeatureGroupSet::initial_only(x)
    } else {
        let models = load_cvaes(&mut rec, &cvae)?;
        let mut latents = GaussianLatents(ChaCha8Rng::seed_from_u64(cfg.augment.seed));
        augment_features(x, &models, views, &mut latents)?
    };
    for name in write_groups(&rec.out, &g, &groups)? {
        rec.output(name);
    }
    let meta = AugmentationMeta { views, seed: cfg.augment.seed };
    write_json(&mut rec, AUGMENTATION_FILE, &meta)?;
    let section = (&cfg.augment, views);
    rec.finish(Stage::Augment, Some(cfg.augment.seed), &section)
}

fn write_report(rec: &mut Record, report: &EvalReport) -> Result<()> {
    rec.write_text(REPORT_FILE, &report.to_json())?;
    let method = if report.augmented { "MAHGNN" } else { "Backbone" };
    rec.write_text(TABLE_FILE, &format_table(&[(method, report)]))
}

fn stage_train(cfg: &PipelineConfig, ov: &Overrides, out: PathBuf) -> Result<Manifest> {
    let graph = ov.graph.clone().unwrap_or_else(|| cfg.stage_dir(Stage::BuildGraph));
    let features = ov.features.clone().unwrap_or_else(|| cfg.stage_dir(Stage::Features));
    let cvae = ov.cvae.clone().unwrap_or_else(|| cfg.stage_dir(Stage::PretrainCvae));
    let augment = ov.augment.clone().unwrap_or_else(|| cfg.stage_dir(Stage::Augment));
    let mut rec = Record::new(out)?;
    let g = graph_inputs(&mut rec, &graph)?;
    let (standardizer, _) = load_features(&mut rec, &features, &g)?;
    let cvaes = if cfg.train.augmented { load_cvaes(&mut rec, &cvae)? } else { BTreeMap::new() };
    let meta: AugmentationMeta = read_json(&rec.input(&augment.join(AUGMENTATION_FILE))?)?;
    let groups = read_groups(&augment, &g, meta.views)?;
    for kind in AccountType::ALL {
        rec.input(&augment.join(initial_file_name(kind)))?;
        for v in 0..meta.views {
            for r in relations_for(kind) {
                rec.input(&augment.join(augment_file_name(kind, r, v)))?;
            }
        }
    }
    let fitted = fit(&g, &groups, &cfg.train)?;
    let ckpt = ModelCheckpoint {
        train: cfg.train.clone(),
        report: fitted.report.clone(),
        standardizer,
        augmentation: cfg.train.augmented.then_some(meta),
        cvaes,
        models: fitted.models,
    };
    ckpt.save(&rec.output(CHECKPOINT_FILE))?;
    write_report(&mut rec, &fitted.report)?;
    rec.finish(Stage::Train, Some(cfg.train.seed), &cfg.train)
}

/// Re-evaluates every run of a checkpoint on a graph.
pub fn evaluate_checkpoint(g: &Heig, ckpt: &ModelCheckpoint) -> Result<EvalReport> {
    let groups = checkpoint_groups(g, ckpt)?;
    let test_f1 = evaluate(g, &groups, &ckpt.train, &ckpt.models)?;
    let (mean, std) = mean_std(&test_f1);
    let mut report = ckpt.report.clone();
    for (run, f1) in report.runs.iter_mut().zip(&test_f1) {
        run.test_f1 = *f1;
    }
    report.test_f1 = test_f1;
    report.mean = mean;
    report.std = std;
    Ok(report)
}

fn stage_eval(cfg: &PipelineConfig, ov: &Overrides, out: PathBuf) -> Result<Manifest> {
    let graph = ov.graph.clone().unwrap_or_else(|| cfg.stage_dir(Stage::BuildGraph));
    let checkpoint = ov.checkpoint.clone().unwrap_or_else(|| cfg.stage_dir(Stage::Train).join(CHECKPOINT_FILE));
    let mut rec = Record::new(out)?;
    let g = graph_inputs(&mut rec, &graph)?;
    let ckpt = ModelCheckpoint::load(&rec.input(&checkpoint)?)?;
    let report = evaluate_checkpoint(&g, &ckpt)?;
    write_report(&mut rec, &report)?;
    rec.finish(Stage::Eval, Some(ckpt.train.seed), &())
}

fn stage_stats(cfg: &PipelineConfig, ov: &Overrides, out: PathBuf) -> Result<Manifest> {
    let graph = ov.graph.clone().unwrap_or_else(|| cfg.stage_dir(Stage::BuildGraph));
    let mut rec = Record::new(out)?;
    let g = graph_inputs(&mut rec, &graph)?;
    write_stats(&mut rec, &g)?;
    rec.finish(Stage::Stats, None, &())
}

/// Runs one stage and writes its manifest.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, ov: &Overrides) -> Result<Manifest> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = ov.out.clone().unwrap_or_else(|| cfg.stage_dir(stage));
    match stage {
        Stage::Synth => stage_synth(&cfg, out),
        Stage::BuildGraph => stage_build_graph(&cfg, ov, out),
        Stage::Features => stage_features(&cfg, ov, out),
        Stage::PretrainCvae => stage_pretrain_cvae(&cfg, ov, out),
        Stage::Augment => stage_augment(&cfg, ov, out),
        Stage::Train => stage_train(&cfg, ov, out),
        Stage::Eval => stage_eval(&cfg, ov, out),
        Stage::Stats => stage_stats(&cfg, ov, out),
    }
}

/// Stages in dependency order; `synth` is included when configured.
pub fn pipeline_stages(cfg: &PipelineConfig) -> Vec<Stage> {
    Stage::ALL.into_iter().filter(|s| *s != Stage::Synth || cfg.synth.is_some()).collect()
}

pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<Manifest>> {
    pipeline_stages(cfg).into_iter().map(|s| run_stage(s, cfg, &Overrides::default())).collect()
}
