//! Experiment configuration, the regime × combination × seed sweep, and its
//! CSV and PNG outputs.
//!
//! Every cell `(regime, combination, seed)` draws its randomness from streams
//! keyed by `(global_seed, regime, combination_id, seed)`, so rows do not
//! depend on the worker count or on which other cells are in the sweep.
//!
//! Seed `s` of an experiment re-derives the model initialisation, the task
//! data, the fine-tuning stream and the channel draw from `s`; fine-tuned
//! checkpoints are cached under `<out>/checkpoints/seed-<s>/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversary::{self, AdversaryError, NoiseDesignRecord, NoiseKind};
use crate::analysis::{self, AnalysisError};
use crate::channel::{self, ChannelError, ChannelState, LinkMetrics};
use crate::checkpoint::{self, CheckpointError};
use crate::defense::{self, DefenseConfig, DefenseError, DefenseMode};
use crate::fusion::{self, FusionError, NormalizedAccuracy, TaskEval, TransportConfig};
use crate::params::{self, GroupTag, ParameterSet, ParamsError, TaskVector};
use crate::seeds;
use crate::taskbench::{self, TaskData, TaskError, TaskSpec};
use crate::tinyvit::{self, ModelConfig, ModelError, TaskView, TrainSpec};

pub const CONFIG_VERSION: u32 = 1;
/// Overrides `output_dir` when set.
pub const OUT_ENV: &str = "TASKFUSE_OUT";
/// Few-shot sizes of the ablation grid.
pub const ABLATION_SIZES: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("png: {0}")]
    Image(#[from] image::ImageError),
    #[error("no rows to write")]
    NoRows,
    #[error("task index {0} was not prepared for this seed")]
    MissingTask(usize),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub n_rx: usize,
    /// Number of users; equals the number of tasks.
    pub q: usize,
    /// Per-user transmit power cap in W.
    pub p_max: f64,
    /// Isotropic thermal floor in W, present in every regime.
    pub noise_power: f64,
    /// Adversarial budget in W on top of the floor, worst-case regimes only.
    pub jammer_power: f64,
    pub delta_reg: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { n_rx: 16, q: 8, p_max: 1e-4, noise_power: 2e-7, jammer_power: 5e-6, delta_reg: 1e-3, tol: 1e-12, seed: 0 }
    }
}

/// Settings of the logit-ratio hypothesis test.
///
/// The threshold of a cell is fixed by the clean merge and the ideal-regime
/// MMSEs at `kappa_ref`, so it does not move with the transport `kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypothesisConfig {
    pub kappa_ref: f64,
    /// Random directions averaged in the sensitivity estimate.
    pub directions: usize,
    /// Central-difference step along each direction.
    pub step: f64,
    /// Test images per class and task scored by the test.
    pub samples_per_class: usize,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self { kappa_ref: 1.0, directions: 2, step: 1e-4, samples_per_class: 10 }
    }
}

/// Which task subsets of each size are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Combinations {
    All,
    /// At most `k` subsets per size, drawn without replacement.
    Sample(usize),
}

impl fmt::Display for Combinations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Combinations::All => f.write_str("all"),
            Combinations::Sample(k) => write!(f, "sample:{k}"),
        }
    }
}

impl FromStr for Combinations {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(Combinations::All);
        }
        match s.strip_prefix("sample:").map(str::parse::<usize>) {
            Some(Ok(k)) if k > 0 => Ok(Combinations::Sample(k)),
            _ => Err(format!("combinations must be `all` or `sample:<k>` with k >= 1, got `{s}`")),
        }
    }
}

impl TryFrom<String> for Combinations {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Combinations> for String {
    fn from(c: Combinations) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub global_seed: u64,
    pub model: ModelConfig,
    /// Per-user fine-tuning schedule.
    pub train: TrainSpec,
    pub tasks: Vec<TaskSpec>,
    pub channel: ChannelConfig,
    pub transport: TransportConfig,
    pub defense: DefenseConfig,
    pub hypothesis: HypothesisConfig,
    pub regimes: Vec<NoiseKind>,
    pub defense_modes: Vec<DefenseMode>,
    pub task_counts: Vec<usize>,
    pub combinations: Combinations,
    pub seeds: Vec<u64>,
    pub beta: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            config_version: CONFIG_VERSION,
            global_seed: 0,
            tasks: TaskSpec::default_suite(model.num_classes, 0),
            model,
            train: TrainSpec::default(),
            channel: ChannelConfig::default(),
            transport: TransportConfig::default(),
            defense: DefenseConfig::default(),
            hypothesis: HypothesisConfig::default(),
            regimes: NoiseKind::ALL.to_vec(),
            defense_modes: DefenseMode::ALL.to_vec(),
            task_counts: (2..=8).collect(),
            combinations: Combinations::All,
            seeds: vec![0],
            beta: 0.05,
            output_dir: PathBuf::from("results"),
        }
    }
}

/// A validation failure, tied to the config key it concerns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub key: &'static str,
    pub message: String,
}

fn issue(key: &'static str, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue { key, message: message.into() }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigIssue> {
        if self.config_version != CONFIG_VERSION {
            return Err(issue(
                "config_version",
                format!("unsupported config_version {} (expected {CONFIG_VERSION})", self.config_version),
            ));
        }
        self.model.validate().map_err(|e| issue("model", e.to_string()))?;
        if self.train.learning_rate <= 0.0 || self.train.batch_size == 0 {
            return Err(issue("train", "train needs a positive learning_rate and batch_size"));
        }
        let q = self.channel.q;
        if self.tasks.len() != q {
            return Err(issue("tasks", format!("{} tasks but channel.q = {q}; every user holds one task", self.tasks.len())));
        }
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            t.validate().map_err(|e| issue("tasks", e.to_string()))?;
            if t.num_classes != self.model.num_classes {
                return Err(issue(
                    "num_classes",
                    format!("task `{}` has {} classes, model has {}", t.task_id, t.num_classes, self.model.num_classes),
                ));
            }
            if !ids.insert(t.task_id.as_str()) {
                return Err(issue("task_id", format!("duplicate task id `{}`", t.task_id)));
            }
            if self.defense.enabled_realign && self.defense.fewshot_per_class > t.samples_fewshot_per_class {
                return Err(issue(
                    "fewshot_per_class",
                    format!(
                        "defense.fewshot_per_class {} exceeds the {} few-shot samples per class of task `{}`",
                        self.defense.fewshot_per_class, t.samples_fewshot_per_class, t.task_id
                    ),
                ));
            }
        }
        let c = &self.channel;
        if c.n_rx == 0 || q == 0 {
            return Err(issue("n_rx", "channel.n_rx and channel.q must be positive"));
        }
        for (key, v) in [("p_max", c.p_max), ("noise_power", c.noise_power), ("tol", c.tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(issue(key, format!("channel.{key} must be positive, got {v}")));
            }
        }
        if !(c.jammer_power >= 0.0 && c.jammer_power.is_finite()) {
            return Err(issue("jammer_power", format!("channel.jammer_power must be nonnegative, got {}", c.jammer_power)));
        }
        if !(0.0..=1.0).contains(&c.delta_reg) {
            return Err(issue("delta_reg", format!("channel.delta_reg {} outside [0, 1]", c.delta_reg)));
        }
        self.transport.validate().map_err(|e| issue("transport", e.to_string()))?;
        self.defense.validate().map_err(|e| issue("defense", e.to_string()))?;
        let h = &self.hypothesis;
        if !(h.kappa_ref > 0.0) || h.directions == 0 || !(h.step > 0.0) || h.samples_per_class == 0 {
            return Err(issue("hypothesis", "hypothesis needs positive kappa_ref, directions, step and samples_per_class"));
        }
        if self.regimes.is_empty() {
            return Err(issue("regimes", "at least one regime is required"));
        }
        if self.task_counts.is_empty() {
            return Err(issue("task_counts", "at least one task count is required"));
        }
        for &n in &self.task_counts {
            if !(2..=q).contains(&n) {
                return Err(issue("task_counts", format!("task count {n} outside [2, {q}]")));
            }
            self.transport.lambda(n).map_err(|e| issue("lambda_table", e.to_string()))?;
        }
        self.transport.lambda(1).map_err(|e| issue("lambda_table", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(issue("seeds", "at least one seed is required"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(issue("beta", format!("beta {} outside (0, 1)", self.beta)));
        }
        Ok(())
    }

    /// Model configuration of experiment seed `s`.
    pub fn model_for(&self, s: u64) -> ModelConfig {
        ModelConfig { seed: seeds::derive(self.model.seed, &["seed", &s.to_string()]), ..self.model.clone() }
    }

    pub fn task_spec_for(&self, i: usize, s: u64) -> TaskSpec {
        let t = &self.tasks[i];
        TaskSpec { seed: seeds::derive(t.seed, &["seed", &s.to_string()]), ..t.clone() }
    }

    pub fn train_for(&self, task_id: &str, s: u64) -> TrainSpec {
        TrainSpec { seed: seeds::derive(self.train.seed, &["finetune", task_id, &s.to_string()]), ..self.train.clone() }
    }

    pub fn task_index(&self, task_id: &str) -> Result<usize, HarnessError> {
        self.tasks.iter().position(|t| t.task_id == task_id).ok_or_else(|| HarnessError::UnknownTask(task_id.into()))
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// First line assigning `key` or opening a `[key]` table.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start();
        let header = t.trim_start_matches('[').trim_end().trim_end_matches(']');
        let assigns = t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='));
        assigns || (t.starts_with('[') && (header == key || header.ends_with(&format!(".{key}"))))
    })
    .map(|i| i + 1)
}

/// Parse and validate a TOML config; messages carry the offending line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of_offset(text, s.start));
        let msg = e.message().trim().to_string();
        HarnessError::Config(match line {
            Some(l) => format!("line {l}: {msg}"),
            None => msg,
        })
    })?;
    cfg.validate().map_err(|i| {
        HarnessError::Config(match line_of_key(text, i.key) {
            Some(l) => format!("line {l}: {}", i.message),
            None => i.message,
        })
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text).map_err(|e| match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `--out`, then `TASKFUSE_OUT`, then `output_dir`.
pub fn resolve_output_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_dir.clone(),
    }
}

// ---------------------------------------------------------------------------
// Combinations and seeds

/// Sorted index subsets of `0..q` of size `n`, lexicographic.
pub fn subsets(q: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if n > q {
        return out;
    }
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..n).rev().find(|&i| cur[i] < q - n + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..n {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Every evaluated subset, grouped by `task_counts` in ascending order.
pub fn enumerate_combinations(cfg: &ExperimentConfig) -> Vec<Vec<usize>> {
    let counts: BTreeSet<usize> = cfg.task_counts.iter().copied().collect();
    let mut out = Vec::new();
    for n in counts {
        let all = subsets(cfg.channel.q, n);
        match cfg.combinations {
            Combinations::All => out.extend(all),
            Combinations::Sample(k) if k >= all.len() => out.extend(all),
            Combinations::Sample(k) => {
                let mut rng = seeds::rng_for(cfg.global_seed, &["combinations", &n.to_string()]);
                let mut picked = index::sample(&mut rng, all.len(), k).into_vec();
                picked.sort_unstable();
                out.extend(picked.into_iter().map(|i| all[i].clone()));
            }
        }
    }
    out
}

/// Sorted task ids joined by `+`.
pub fn combination_id(cfg: &ExperimentConfig, members: &[usize]) -> String {
    let mut ids: Vec<&str> = members.iter().map(|&i| cfg.tasks[i].task_id.as_str()).collect();
    ids.sort_unstable();
    ids.join("+")
}

pub fn cell_seed(cfg: &ExperimentConfig, regime: NoiseKind, combination_id: &str, s: u64) -> u64 {
    seeds::derive(cfg.global_seed, &[regime.as_str(), combination_id, &s.to_string()])
}

// ---------------------------------------------------------------------------
// Per-seed assets

/// One user's data, head and fine-tuning result.
#[derive(Debug, Clone)]
pub struct TaskAsset {
    pub data: TaskData,
    pub head: Vec<f64>,
    pub vector: TaskVector,
    /// Accuracy of the fine-tuned model on its own test split.
    pub reference: f64,
}

#[derive(Debug, Clone)]
pub struct SeedAssets {
    pub seed: u64,
    pub model: ModelConfig,
    pub base: ParameterSet,
    /// Indexed like `ExperimentConfig::tasks`; `None` when not requested.
    pub tasks: Vec<Option<TaskAsset>>,
}

impl SeedAssets {
    pub fn task(&self, i: usize) -> Result<&TaskAsset, HarnessError> {
        self.tasks.get(i).and_then(Option::as_ref).ok_or(HarnessError::MissingTask(i))
    }
}

fn digest_hex<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialise");
    let d = Sha256::digest(&bytes);
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn seed_cache_dir(cache: &Path, s: u64) -> PathBuf {
    cache.join(format!("seed-{s}"))
}

/// Fine-tuned checkpoint file of task `i`, keyed by everything that shapes it.
pub fn checkpoint_path(cfg: &ExperimentConfig, cache: &Path, i: usize, s: u64) -> PathBuf {
    let spec = cfg.task_spec_for(i, s);
    let key = digest_hex(&(cfg.model_for(s), &spec, cfg.train_for(&spec.task_id, s)));
    seed_cache_dir(cache, s).join(format!("{}-{key}.ckpt", spec.task_id))
}

fn prepare_task(
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    base: &ParameterSet,
    i: usize,
    s: u64,
    cache: Option<&Path>,
) -> Result<TaskAsset, HarnessError> {
    let spec = cfg.task_spec_for(i, s);
    let data = taskbench::generate_task(&spec, model)?;
    let head = tinyvit::task_head(model, &spec.task_id);
    let start = tinyvit::with_head(base, &head)?;
    let path = cache.map(|c| checkpoint_path(cfg, c, i, s));
    let cached = match &path {
        Some(p) if p.exists() => {
            let ft = checkpoint::read_params(p)?;
            ft.check_compatible(&start).ok().map(|_| ft)
        }
        _ => None,
    };
    let fine = match cached {
        Some(ft) => ft,
        None => {
            let freeze: BTreeSet<GroupTag> = [GroupTag::Head].into_iter().collect();
            let ft = tinyvit::finetune(&start, model, &data.train, &cfg.train_for(&spec.task_id, s), &freeze)?;
            if let Some(p) = &path {
                let dir = p.parent().expect("checkpoint paths have a parent");
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                checkpoint::write_params(p, &ft)?;
            }
            ft
        }
    };
    let reference = tinyvit::evaluate(&fine, model, &data.test)?;
    let vector = params::compute_task_vector(&fine, &start, &spec.task_id, i + 1)?;
    Ok(TaskAsset { data, head, vector, reference })
}

/// Base model and the requested users' fine-tunes for seed `s`.
pub fn prepare_seed(
    cfg: &ExperimentConfig,
    s: u64,
    members: &BTreeSet<usize>,
    cache: Option<&Path>,
) -> Result<SeedAssets, HarnessError> {
    let model = cfg.model_for(s);
    let base = tinyvit::init_model(&model)?;
    if let Some(&i) = members.iter().find(|&&i| i >= cfg.tasks.len()) {
        return Err(HarnessError::MissingTask(i));
    }
    let built: Vec<(usize, TaskAsset)> = members
        .par_iter()
        .map(|&i| prepare_task(cfg, &model, &base, i, s, cache).map(|a| (i, a)))
        .collect::<Result<_, _>>()?;
    let mut tasks = vec![None; cfg.tasks.len()];
    for (i, a) in built {
        tasks[i] = Some(a);
    }
    Ok(SeedAssets { seed: s, model, base, tasks })
}

// ---------------------------------------------------------------------------
// Channel

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeLink {
    pub regime: NoiseKind,
    pub design: NoiseDesignRecord,
    pub metrics: LinkMetrics,
}

/// Channel draw of seed `s` under one regime.
pub fn channel_state(cfg: &ExperimentConfig, s: u64, regime: NoiseKind) -> Result<(ChannelState, NoiseDesignRecord), HarnessError> {
    let c = &cfg.channel;
    let seed = seeds::derive(c.seed, &["channel", &s.to_string()]);
    let positions = channel::sample_positions(c.q, seed);
    let h = channel::sample_channels(c.q, c.n_rx, &positions, seed)?;
    let caps = vec![c.p_max; c.q];
    let design = adversary::regime_design(regime, &h, &caps, c.noise_power, c.jammer_power, c.delta_reg, c.tol)?;
    let budget = match regime {
        NoiseKind::Ideal => c.noise_power,
        _ => c.noise_power + c.jammer_power,
    };
    let state = ChannelState::new(h, caps.clone(), caps, design.cov.clone(), budget, positions)?;
    Ok((state, design.record()))
}

/// Links of seed `s` under every regime, whether or not it is swept.
pub fn seed_links(cfg: &ExperimentConfig, s: u64) -> Result<BTreeMap<NoiseKind, RegimeLink>, HarnessError> {
    NoiseKind::ALL
        .into_iter()
        .map(|regime| {
            let (state, design) = channel_state(cfg, s, regime)?;
            let metrics = channel::link_metrics(&state)?;
            Ok((regime, RegimeLink { regime, design, metrics }))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cells

/// Per-cell quantities that do not depend on the defense mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAnalysis {
    pub snr_db: f64,
    pub mean_mu: f64,
    pub xi: f64,
    pub reject_rate: f64,
    pub mean_offdiag_cosine: f64,
    pub max_offdiag_cosine: f64,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub regime: NoiseKind,
    pub members: Vec<usize>,
    pub combination_id: String,
    pub seed: u64,
    pub analysis: CellAnalysis,
    pub accuracy: Vec<(DefenseMode, NormalizedAccuracy)>,
    pub transported: Vec<TaskVector>,
}

/// What a cell computes beyond accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellDepth {
    /// Accuracies, link quality and cosine only.
    Accuracy,
    /// Also the disentanglement error and the hypothesis test.
    Full,
}

/// Transport the members' vectors over `regime`'s link and fuse them.
pub fn transport_members(
    cfg: &ExperimentConfig,
    assets: &SeedAssets,
    link: &LinkMetrics,
    members: &[usize],
    seed: u64,
) -> Result<Vec<TaskVector>, HarnessError> {
    let tcfg = TransportConfig { seed, ..cfg.transport.clone() };
    members
        .iter()
        .map(|&i| Ok(fusion::transmit_task_vector(&assets.task(i)?.vector, link.mse[i], &tcfg)?))
        .collect()
}

/// Evaluate one `(regime, combination, seed)` cell under `modes`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cell(
    cfg: &ExperimentConfig,
    assets: &SeedAssets,
    links: &BTreeMap<NoiseKind, RegimeLink>,
    regime: NoiseKind,
    members: &[usize],
    modes: &[DefenseMode],
    dcfg: &DefenseConfig,
    depth: CellDepth,
) -> Result<CellOutcome, HarnessError> {
    let s = assets.seed;
    let model = &assets.model;
    let combo = combination_id(cfg, members);
    let cseed = cell_seed(cfg, regime, &combo, s);
    let link = &links[&regime].metrics;
    let sent = transport_members(cfg, assets, link, members, cseed)?;
    let merged = fusion::fuse(&assets.base, &sent, &cfg.transport)?;

    let owned: Vec<&TaskAsset> = members.iter().map(|&i| assets.task(i)).collect::<Result<_, _>>()?;
    let evals: Vec<TaskEval> = owned
        .iter()
        .map(|a| TaskEval { task_id: &a.data.spec.task_id, head: &a.head, data: &a.data.test, reference_accuracy: a.reference })
        .collect();
    let fewshot: Vec<TaskView> = owned.iter().map(|a| TaskView { data: &a.data.fewshot, head: &a.head }).collect();
    let dseed = seeds::derive(cseed, &["defense"]);
    let mut accuracy = Vec::with_capacity(modes.len());
    for &mode in modes {
        let d = DefenseConfig { seed: dseed, ..dcfg.with_mode(mode) };
        let theta = defense::apply_defense(&merged, &assets.base, model, &fewshot, &d)?;
        accuracy.push((mode, fusion::normalized_accuracy(&theta, model, &evals)?));
    }

    let m = analysis::cosine_matrix(&sent)?;
    let (mean_cos, max_cos) = analysis::offdiag_stats(&m);
    let mean_mu = members.iter().map(|&i| link.mse[i]).sum::<f64>() / members.len() as f64;
    let (xi, reject_rate) = match depth {
        CellDepth::Accuracy => (f64::NAN, f64::NAN),
        CellDepth::Full => {
            let tests: Vec<TaskView> = owned.iter().map(|a| TaskView { data: &a.data.test, head: &a.head }).collect();
            let singles = vec![cfg.transport.lambda(1)?; members.len()];
            let xi = analysis::wde(&assets.base, &sent, &singles, cfg.transport.lambda(members.len())?, &tests, model)?.xi;
            let reject = reject_rate(cfg, assets, links, members, &combo, &merged)?;
            (xi, reject)
        }
    };
    Ok(CellOutcome {
        regime,
        members: members.to_vec(),
        combination_id: combo,
        seed: s,
        analysis: CellAnalysis {
            snr_db: link.snr_db,
            mean_mu,
            xi,
            reject_rate,
            mean_offdiag_cosine: mean_cos,
            max_offdiag_cosine: max_cos,
        },
        accuracy,
        transported: sent,
    })
}

/// Fraction of scored images whose logit ratio against the clean merge falls
/// outside the cell's fixed threshold.
fn reject_rate(
    cfg: &ExperimentConfig,
    assets: &SeedAssets,
    links: &BTreeMap<NoiseKind, RegimeLink>,
    members: &[usize],
    combo: &str,
    disturbed: &ParameterSet,
) -> Result<f64, HarnessError> {
    let h = &cfg.hypothesis;
    let owned: Vec<&TaskAsset> = members.iter().map(|&i| assets.task(i)).collect::<Result<_, _>>()?;
    let pools: Vec<_> = owned.iter().map(|a| a.data.test.take_per_class(h.samples_per_class)).collect();
    let views: Vec<TaskView> = pools.iter().zip(&owned).map(|(p, a)| TaskView { data: p, head: &a.head }).collect();
    let clean_vectors: Vec<TaskVector> = owned.iter().map(|a| a.vector.clone()).collect();
    let clean = fusion::fuse(&assets.base, &clean_vectors, &cfg.transport)?;

    let sseed = seeds::derive(cfg.global_seed, &["sensitivity", combo, &assets.seed.to_string()]);
    let sensitivity = analysis::ratio_sensitivity(&assets.model, &clean, &views, h.directions, h.step, sseed)?;
    let lambda = cfg.transport.lambda(members.len())?;
    let d = assets.base.total_dim() as f64;
    let energy = clean_vectors.iter().map(|v| v.delta.squared_norm() / d).sum::<f64>() / members.len() as f64;
    let ideal = &links[&NoiseKind::Ideal].metrics;
    let sum_mu: f64 = members.iter().map(|&i| ideal.mse[i]).sum();
    let variance = analysis::variance_of_ratio(sensitivity * lambda * lambda * h.kappa_ref * energy, sum_mu);
    let t = analysis::threshold(cfg.beta, variance)?;
    let samples = analysis::ratio_samples(&assets.model, &clean, disturbed, &views)?;
    if samples.ratios.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(analysis::run_hypothesis_test(samples.ratios, &t)?.reject_rate)
}

// ---------------------------------------------------------------------------
// Rows

/// Semicolon-separated list of floats in member order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FloatList(pub Vec<f64>);

impl fmt::Display for FloatList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(";"))
    }
}

impl TryFrom<String> for FloatList {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s.is_empty() {
            return Ok(FloatList(Vec::new()));
        }
        s.split(';').map(|p| p.parse::<f64>().map_err(|e| format!("`{p}`: {e}"))).collect::<Result<_, _>>().map(FloatList)
    }
}

impl From<FloatList> for String {
    fn from(l: FloatList) -> String {
        l.to_string()
    }
}

/// One line of `results.csv`; field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub regime: NoiseKind,
    pub defense_mode: DefenseMode,
    pub n_tasks: usize,
    pub combination_id: String,
    pub seed: u64,
    pub raw_accuracy: FloatList,
    pub normalized_accuracy: FloatList,
    pub mean_normalized_accuracy: f64,
    pub snr_db: f64,
    pub mean_mu: f64,
    pub xi: f64,
    pub reject_rate: f64,
    pub mean_offdiag_cosine: f64,
    pub max_offdiag_cosine: f64,
}

pub const RESULT_COLUMNS: [&str; 14] = [
    "regime",
    "defense_mode",
    "n_tasks",
    "combination_id",
    "seed",
    "raw_accuracy",
    "normalized_accuracy",
    "mean_normalized_accuracy",
    "snr_db",
    "mean_mu",
    "xi",
    "reject_rate",
    "mean_offdiag_cosine",
    "max_offdiag_cosine",
];

impl ResultRow {
    fn sort_key(&self) -> (NoiseKind, DefenseMode, usize, &str, u64) {
        (self.regime, self.defense_mode, self.n_tasks, &self.combination_id, self.seed)
    }
}

impl CellOutcome {
    pub fn rows(&self) -> Vec<ResultRow> {
        let a = &self.analysis;
        self.accuracy
            .iter()
            .map(|(mode, acc)| ResultRow {
                regime: self.regime,
                defense_mode: *mode,
                n_tasks: self.members.len(),
                combination_id: self.combination_id.clone(),
                seed: self.seed,
                raw_accuracy: FloatList(acc.raw.clone()),
                normalized_accuracy: FloatList(acc.normalized.clone()),
                mean_normalized_accuracy: acc.mean,
                snr_db: a.snr_db,
                mean_mu: a.mean_mu,
                xi: a.xi,
                reject_rate: a.reject_rate,
                mean_offdiag_cosine: a.mean_offdiag_cosine,
                max_offdiag_cosine: a.max_offdiag_cosine,
            })
            .collect()
    }

    pub fn mean_accuracy(&self, mode: DefenseMode) -> Option<f64> {
        self.accuracy.iter().find(|(m, _)| *m == mode).map(|(_, a)| a.mean)
    }
}

/// Canonical row order: regime, mode, N, combination, seed.
pub fn canonical_sort(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).expect("keys are totally ordered"));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub regime: NoiseKind,
    pub combination_id: String,
    pub seed: u64,
    pub error: String,
}

/// Cosine similarities of all transported task vectors of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrix {
    pub regime: NoiseKind,
    pub seed: u64,
    pub task_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub cosine: Vec<CosineMatrix>,
    pub failures: Vec<CellFailure>,
}

fn all_members(combos: &[Vec<usize>]) -> BTreeSet<usize> {
    combos.iter().flatten().copied().collect()
}

fn seed_cosine(
    cfg: &ExperimentConfig,
    assets: &SeedAssets,
    links: &BTreeMap<NoiseKind, RegimeLink>,
    regime: NoiseKind,
    members: &[usize],
) -> Result<CosineMatrix, HarnessError> {
    let seed = seeds::derive(cfg.global_seed, &[regime.as_str(), "all", &assets.seed.to_string()]);
    let sent = transport_members(cfg, assets, &links[&regime].metrics, members, seed)?;
    Ok(CosineMatrix {
        regime,
        seed: assets.seed,
        task_ids: members.iter().map(|&i| cfg.tasks[i].task_id.clone()).collect(),
        values: analysis::cosine_matrix(&sent)?,
    })
}

struct SeedContext {
    assets: SeedAssets,
    links: BTreeMap<NoiseKind, RegimeLink>,
}

fn seed_contexts(
    cfg: &ExperimentConfig,
    members: &BTreeSet<usize>,
    cache: Option<&Path>,
) -> Vec<(u64, Result<SeedContext, HarnessError>)> {
    let seeds_: Vec<u64> = cfg.seeds.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    seeds_
        .par_iter()
        .map(|&s| {
            let ctx = prepare_seed(cfg, s, members, cache).and_then(|assets| Ok(SeedContext { links: seed_links(cfg, s)?, assets }));
            (s, ctx)
        })
        .collect()
}

/// Run every `(regime, combination, seed)` cell of `cfg`.
///
/// Failed cells are logged, recorded in `failures` and skipped.
pub fn run_sweep(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<SweepOutput, HarnessError> {
    cfg.validate().map_err(|i| HarnessError::Config(i.message))?;
    let combos = enumerate_combinations(cfg);
    let members = all_members(&combos);
    let regimes: Vec<NoiseKind> = cfg.regimes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let contexts = seed_contexts(cfg, &members, cache);
    let mut out = SweepOutput::default();

    let mut jobs = Vec::new();
    for (s, ctx) in &contexts {
        match ctx {
            Ok(c) => {
                for &regime in &regimes {
                    for combo in &combos {
                        jobs.push((c, regime, combo));
                    }
                }
            }
            Err(e) => {
                log::warn!("seed {s} failed: {e}");
                for &regime in &regimes {
                    for combo in &combos {
                        out.failures.push(CellFailure {
                            regime,
                            combination_id: combination_id(cfg, combo),
                            seed: *s,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    log::info!("{} cells over {} seeds", jobs.len(), contexts.len());
    let results: Vec<Result<CellOutcome, CellFailure>> = jobs
        .par_iter()
        .map(|(c, regime, combo)| {
            evaluate_cell(cfg, &c.assets, &c.links, *regime, combo, &cfg.defense_modes, &cfg.defense, CellDepth::Full).map_err(|e| {
                CellFailure { regime: *regime, combination_id: combination_id(cfg, combo), seed: c.assets.seed, error: e.to_string() }
            })
        })
        .collect();
    for r in results {
        match r {
            Ok(cell) => out.rows.extend(cell.rows()),
            Err(f) => {
                log::warn!("cell {} {} seed {} failed: {}", f.regime, f.combination_id, f.seed, f.error);
                out.failures.push(f);
            }
        }
    }

    let member_list: Vec<usize> = members.into_iter().collect();
    if member_list.len() >= 2 {
        for (_, ctx) in &contexts {
            let Ok(c) = ctx else { continue };
            for &regime in &regimes {
                match seed_cosine(cfg, &c.assets, &c.links, regime, &member_list) {
                    Ok(m) => out.cosine.push(m),
                    Err(e) => log::warn!("cosine matrix {regime} seed {} failed: {e}", c.assets.seed),
                }
            }
        }
    }
    canonical_sort(&mut out.rows);
    if !out.failures.is_empty() {
        log::warn!("{} cells failed and were skipped", out.failures.len());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation and lambda sweep

/// One line of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub regime: NoiseKind,
    pub defense_mode: DefenseMode,
    pub fewshot_per_class: usize,
    pub n_tasks: usize,
    pub combination_id: String,
    pub seed: u64,
    pub mean_normalized_accuracy: f64,
}

/// Defense mode × few-shot size grid over every cell of `cfg`.
pub fn run_ablation(cfg: &ExperimentConfig, sizes: &[usize], cache: Option<&Path>) -> Result<(Vec<AblationRow>, Vec<CellFailure>), HarnessError> {
    cfg.validate().map_err(|i| HarnessError::Config(i.message))?;
    let combos = enumerate_combinations(cfg);
    let members = all_members(&combos);
    let contexts = seed_contexts(cfg, &members, cache);
    let mut jobs = Vec::new();
    let mut failures = Vec::new();
    for (s, ctx) in &contexts {
        match ctx {
            Ok(c) => {
                for &regime in &cfg.regimes {
                    for combo in &combos {
                        for &size in sizes {
                            jobs.push((c, regime, combo, size));
                        }
                    }
                }
            }
            Err(e) => failures.push(CellFailure { regime: cfg.regimes[0], combination_id: "*".into(), seed: *s, error: e.to_string() }),
        }
    }
    let results: Vec<Result<Vec<AblationRow>, CellFailure>> = jobs
        .par_iter()
        .map(|(c, regime, combo, size)| {
            let dcfg = DefenseConfig { fewshot_per_class: *size, ..cfg.defense.clone() };
            evaluate_cell(cfg, &c.assets, &c.links, *regime, combo, &cfg.defense_modes, &dcfg, CellDepth::Accuracy)
                .map(|cell| {
                    cell.accuracy
                        .iter()
                        .map(|(mode, acc)| AblationRow {
                            regime: *regime,
                            defense_mode: *mode,
                            fewshot_per_class: *size,
                            n_tasks: combo.len(),
                            combination_id: cell.combination_id.clone(),
                            seed: c.assets.seed,
                            mean_normalized_accuracy: acc.mean,
                        })
                        .collect()
                })
                .map_err(|e| CellFailure { regime: *regime, combination_id: combination_id(cfg, combo), seed: c.assets.seed, error: e.to_string() })
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        match r {
            Ok(v) => rows.extend(v),
            Err(f) => {
                log::warn!("ablation cell {} {} seed {} failed: {}", f.regime, f.combination_id, f.seed, f.error);
                failures.push(f);
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.regime, a.defense_mode, a.fewshot_per_class, a.n_tasks, &a.combination_id, a.seed)
            .cmp(&(b.regime, b.defense_mode, b.fewshot_per_class, b.n_tasks, &b.combination_id, b.seed))
    });
    Ok((rows, failures))
}

/// One line of `lambda_sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub n_tasks: usize,
    pub combination_id: String,
    pub seed: u64,
    pub lambda: f64,
    pub mean_normalized_accuracy: f64,
}

/// Clean merges of every combination over the lambda grid.
pub fn run_lambda_sweep(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<Vec<LambdaRow>, HarnessError> {
    cfg.validate().map_err(|i| HarnessError::Config(i.message))?;
    let combos = enumerate_combinations(cfg);
    let members = all_members(&combos);
    let grid = fusion::lambda_grid();
    let mut rows = Vec::new();
    for (_, ctx) in seed_contexts(cfg, &members, cache) {
        let c = ctx?;
        let per: Vec<Vec<LambdaRow>> = combos
            .par_iter()
            .map(|combo| -> Result<Vec<LambdaRow>, HarnessError> {
                let owned: Vec<&TaskAsset> = combo.iter().map(|&i| c.assets.task(i)).collect::<Result<_, _>>()?;
                let vectors: Vec<TaskVector> = owned.iter().map(|a| a.vector.clone()).collect();
                let evals: Vec<TaskEval> = owned
                    .iter()
                    .map(|a| TaskEval { task_id: &a.data.spec.task_id, head: &a.head, data: &a.data.test, reference_accuracy: a.reference })
                    .collect();
                let sweep = fusion::lambda_sweep(&c.assets.base, &vectors, &c.assets.model, &evals, &grid)?;
                let id = combination_id(cfg, combo);
                Ok(sweep
                    .scores
                    .into_iter()
                    .map(|(lambda, score)| LambdaRow {
                        n_tasks: combo.len(),
                        combination_id: id.clone(),
                        seed: c.assets.seed,
                        lambda,
                        mean_normalized_accuracy: score,
                    })
                    .collect())
            })
            .collect::<Result<_, _>>()?;
        rows.extend(per.into_iter().flatten());
    }
    Ok(rows)
}

/// Lambda with the best mean score for each `N`, first on ties.
pub fn best_lambdas(rows: &[LambdaRow]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<(usize, u64), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.n_tasks, (r.lambda * 1e6).round() as u64)).or_default();
        e.0 += r.mean_normalized_accuracy;
        e.1 += 1;
    }
    let mut best: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for ((n, l), (sum, count)) in acc {
        let mean = sum / count as f64;
        let e = best.entry(n).or_insert((l as f64 / 1e6, f64::NEG_INFINITY));
        if mean > e.1 {
            *e = (l as f64 / 1e6, mean);
        }
    }
    best.into_iter().map(|(n, (l, _))| (n, l)).collect()
}

// ---------------------------------------------------------------------------
// Aggregation

/// Mean and sample variance (`NaN` below two values).
pub fn mean_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

/// One line of `summary.csv`. `seed` is `all` for the pooled statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: NoiseKind,
    pub defense_mode: DefenseMode,
    pub n_tasks: usize,
    pub seed: String,
    pub cells: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Mean normalized accuracy per regime × mode × N, pooled over seeds and per
/// seed, with the variance across combinations.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(NoiseKind, DefenseMode, usize, Option<u64>), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.regime, r.defense_mode, r.n_tasks);
        groups.entry((key.0, key.1, key.2, None)).or_default().push(r.mean_normalized_accuracy);
        groups.entry((key.0, key.1, key.2, Some(r.seed))).or_default().push(r.mean_normalized_accuracy);
    }
    groups
        .into_iter()
        .map(|((regime, defense_mode, n_tasks, seed), v)| {
            let (mean, variance) = mean_variance(&v);
            SummaryRow {
                regime,
                defense_mode,
                n_tasks,
                seed: seed.map_or_else(|| "all".to_string(), |s| s.to_string()),
                cells: v.len(),
                mean,
                variance,
            }
        })
        .collect()
}

/// Long-format accuracy-vs-N aggregate with a one-standard-deviation band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub regime: NoiseKind,
    pub defense_mode: DefenseMode,
    pub n_tasks: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn plot_rows(summary: &[SummaryRow]) -> Vec<PlotRow> {
    summary
        .iter()
        .filter(|s| s.seed == "all")
        .map(|s| {
            let sd = if s.variance.is_nan() { 0.0 } else { s.variance.sqrt() };
            PlotRow { regime: s.regime, defense_mode: s.defense_mode, n_tasks: s.n_tasks, mean: s.mean, lower: s.mean - sd, upper: s.mean + sd }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub regime: NoiseKind,
    pub defense_mode: DefenseMode,
    pub fewshot_per_class: usize,
    pub cells: usize,
    pub mean: f64,
    pub variance: f64,
}

pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummaryRow> {
    let mut groups: BTreeMap<(NoiseKind, DefenseMode, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.regime, r.defense_mode, r.fewshot_per_class)).or_default().push(r.mean_normalized_accuracy);
    }
    groups
        .into_iter()
        .map(|((regime, defense_mode, fewshot_per_class), v)| {
            let (mean, variance) = mean_variance(&v);
            AblationSummaryRow { regime, defense_mode, fewshot_per_class, cells: v.len(), mean, variance }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Files

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// `results.csv` with its header even when `rows` is empty.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), HarnessError> {
    if rows.is_empty() {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(RESULT_COLUMNS)?;
        w.flush().map_err(io_err(path))?;
        return Ok(());
    }
    write_csv(path, rows)
}

/// `cosine_<regime>.csv`: `seed,task,<id>...`, one matrix row per line.
pub fn write_cosine(path: &Path, matrices: &[&CosineMatrix]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = matrices.first() {
        let mut header = vec!["seed".to_string(), "task".to_string()];
        header.extend(first.task_ids.iter().cloned());
        w.write_record(&header)?;
    }
    for m in matrices {
        for (id, row) in m.task_ids.iter().zip(&m.values) {
            let mut rec = vec![m.seed.to_string(), id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Read a `cosine_<regime>.csv` back into per-seed matrices.
pub fn read_cosine(path: &Path, regime: NoiseKind) -> Result<Vec<CosineMatrix>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let ids: Vec<String> = r.headers()?.iter().skip(2).map(str::to_string).collect();
    let mut out: Vec<CosineMatrix> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let seed: u64 = rec[0].parse().map_err(|_| HarnessError::Config(format!("{}: bad seed `{}`", path.display(), &rec[0])))?;
        let row: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|v| v.parse().map_err(|_| HarnessError::Config(format!("{}: bad value `{v}`", path.display()))))
            .collect::<Result<_, _>>()?;
        match out.last_mut() {
            Some(m) if m.seed == seed && m.values.len() < ids.len() => m.values.push(row),
            _ => out.push(CosineMatrix { regime, seed, task_ids: ids.clone(), values: vec![row] }),
        }
    }
    Ok(out)
}

/// Write every sweep artifact into `dir`.
pub fn emit_outputs(dir: &Path, out: &SweepOutput) -> Result<(), HarnessError> {
    if out.rows.is_empty() {
        return Err(HarnessError::NoRows);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rows = out.rows.clone();
    canonical_sort(&mut rows);
    write_results(&dir.join("results.csv"), &rows)?;
    let summary = summarize(&rows);
    write_csv(&dir.join("summary.csv"), &summary)?;
    let plot = plot_rows(&summary);
    write_csv(&dir.join("plot_accuracy.csv"), &plot)?;
    render_accuracy_plots(dir, &plot)?;
    let regimes: BTreeSet<NoiseKind> = out.cosine.iter().map(|m| m.regime).collect();
    for regime in regimes {
        let ms: Vec<&CosineMatrix> = out.cosine.iter().filter(|m| m.regime == regime).collect();
        write_cosine(&dir.join(format!("cosine_{regime}.csv")), &ms)?;
        render_heatmap(&dir.join(format!("cosine_{regime}.png")), &mean_matrix(&ms))?;
    }
    let failures = dir.join("failures.csv");
    if out.failures.is_empty() {
        if failures.exists() {
            fs::remove_file(&failures).map_err(io_err(&failures))?;
        }
    } else {
        write_csv(&failures, &out.failures)?;
    }
    Ok(())
}

/// Rebuild the aggregates and images from an existing `results.csv`.
pub fn replot(dir: &Path) -> Result<usize, HarnessError> {
    let rows: Vec<ResultRow> = read_csv(&dir.join("results.csv"))?;
    if rows.is_empty() {
        return Err(HarnessError::NoRows);
    }
    let summary = summarize(&rows);
    write_csv(&dir.join("summary.csv"), &summary)?;
    let plot = plot_rows(&summary);
    write_csv(&dir.join("plot_accuracy.csv"), &plot)?;
    let mut images = render_accuracy_plots(dir, &plot)?;
    for regime in NoiseKind::ALL {
        let path = dir.join(format!("cosine_{regime}.csv"));
        if path.exists() {
            let ms = read_cosine(&path, regime)?;
            let refs: Vec<&CosineMatrix> = ms.iter().collect();
            render_heatmap(&dir.join(format!("cosine_{regime}.png")), &mean_matrix(&refs))?;
            images += 1;
        }
    }
    Ok(images)
}

fn mean_matrix(ms: &[&CosineMatrix]) -> Vec<Vec<f64>> {
    let Some(first) = ms.first() else { return Vec::new() };
    let n = first.values.len();
    let mut out = vec![vec![0.0; n]; n];
    for m in ms {
        for (o, r) in out.iter_mut().zip(&m.values) {
            for (x, v) in o.iter_mut().zip(r) {
                *x += v / ms.len() as f64;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Images

const MODE_COLORS: [[u8; 3]; 4] = [[200, 40, 40], [230, 150, 30], [40, 110, 200], [30, 150, 60]];
const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 32;

fn mode_color(mode: DefenseMode) -> [u8; 3] {
    MODE_COLORS[DefenseMode::ALL.iter().position(|m| *m == mode).unwrap_or(0)]
}

fn blend(img: &mut image::RgbImage, x: i64, y: i64, c: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    let p = img.get_pixel_mut(x as u32, y as u32);
    for k in 0..3 {
        p.0[k] = (p.0[k] as f64 * (1.0 - alpha) + c[k] as f64 * alpha).round() as u8;
    }
}

fn line(img: &mut image::RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=steps {
        let x = x0 + (x1 - x0) * i / steps;
        let y = y0 + (y1 - y0) * i / steps;
        for (dx, dy) in [(0, 0), (0, 1), (1, 0)] {
            blend(img, x + dx, y + dy, c, 1.0);
        }
    }
}

/// `accuracy_<regime>.png`: one curve per defense mode over N, with its band,
/// y from 0 to 1.2. Returns the number of images written.
pub fn render_accuracy_plots(dir: &Path, rows: &[PlotRow]) -> Result<usize, HarnessError> {
    let regimes: BTreeSet<NoiseKind> = rows.iter().map(|r| r.regime).collect();
    let (n_min, n_max) = rows.iter().fold((usize::MAX, 0), |(lo, hi), r| (lo.min(r.n_tasks), hi.max(r.n_tasks)));
    let span = (n_max.saturating_sub(n_min)).max(1) as f64;
    let (w, h, m) = (WIDTH as f64, HEIGHT as f64, MARGIN as f64);
    let px = |n: usize| (m + (n - n_min) as f64 / span * (w - 2.0 * m)).round() as i64;
    let py = |v: f64| (h - m - v.clamp(0.0, 1.2) / 1.2 * (h - 2.0 * m)).round() as i64;
    for &regime in &regimes {
        let mut img = image::RgbImage::from_pixel(WIDTH, HEIGHT, image::Rgb([255, 255, 255]));
        line(&mut img, (px(n_min), py(0.0)), (px(n_max), py(0.0)), [0, 0, 0]);
        line(&mut img, (px(n_min), py(0.0)), (px(n_min), py(1.2)), [0, 0, 0]);
        for v in [0.25, 0.5, 0.75, 1.0] {
            line(&mut img, (px(n_min), py(v)), (px(n_max), py(v)), [225, 225, 225]);
        }
        for mode in DefenseMode::ALL {
            let mut pts: Vec<&PlotRow> = rows.iter().filter(|r| r.regime == regime && r.defense_mode == mode).collect();
            pts.sort_by_key(|r| r.n_tasks);
            let c = mode_color(mode);
            for pair in pts.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                for x in px(a.n_tasks)..=px(b.n_tasks) {
                    let t = (x - px(a.n_tasks)) as f64 / (px(b.n_tasks) - px(a.n_tasks)).max(1) as f64;
                    let lo = a.lower + t * (b.lower - a.lower);
                    let hi = a.upper + t * (b.upper - a.upper);
                    for y in py(hi)..=py(lo) {
                        blend(&mut img, x, y, c, 0.12);
                    }
                }
            }
            for pair in pts.windows(2) {
                line(&mut img, (px(pair[0].n_tasks), py(pair[0].mean)), (px(pair[1].n_tasks), py(pair[1].mean)), c);
            }
            for p in &pts {
                for dx in -2..=2 {
                    for dy in -2..=2 {
                        blend(&mut img, px(p.n_tasks) + dx, py(p.mean) + dy, c, 1.0);
                    }
                }
            }
        }
        img.save(dir.join(format!("accuracy_{regime}.png")))?;
    }
    Ok(regimes.len())
}

/// Diverging blue-white-red map over `[-1, 1]`, 32 px per entry.
pub fn render_heatmap(path: &Path, m: &[Vec<f64>]) -> Result<(), HarnessError> {
    const CELL: u32 = 32;
    let n = m.len().max(1) as u32;
    let mut img = image::RgbImage::from_pixel(n * CELL, n * CELL, image::Rgb([255, 255, 255]));
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
            let c = if v >= 0.0 {
                [255, (255.0 * (1.0 - v)) as u8, (255.0 * (1.0 - v)) as u8]
            } else {
                [(255.0 * (1.0 + v)) as u8, (255.0 * (1.0 + v)) as u8, 255]
            };
            for y in 0..CELL {
                for x in 0..CELL {
                    img.put_pixel(j as u32 * CELL + x, i as u32 * CELL + y, image::Rgb(c));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Smaller subcommands

/// One line of `channel.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub regime: NoiseKind,
    pub seed: u64,
    pub snr_db: f64,
    pub mean_mu: f64,
    pub sum_rate: f64,
    pub achieved_objective: f64,
    pub rates: FloatList,
    pub mse: FloatList,
}

pub fn channel_rows(cfg: &ExperimentConfig) -> Result<Vec<ChannelRow>, HarnessError> {
    let mut rows = Vec::new();
    for &s in &cfg.seeds {
        let links = seed_links(cfg, s)?;
        for &regime in &cfg.regimes {
            let l = &links[&regime];
            rows.push(ChannelRow {
                regime,
                seed: s,
                snr_db: l.metrics.snr_db,
                mean_mu: l.metrics.mean_mse(),
                sum_rate: l.metrics.sum_rate,
                achieved_objective: l.design.achieved_objective,
                rates: FloatList(l.metrics.rates.clone()),
                mse: FloatList(l.metrics.mse.clone()),
            });
        }
    }
    rows.sort_by(|a, b| (a.regime, a.seed).cmp(&(b.regime, b.seed)));
    Ok(rows)
}

/// Write every task of every seed under `<dir>/seed-<s>/`.
pub fn generate_tasks(cfg: &ExperimentConfig, dir: &Path) -> Result<usize, HarnessError> {
    let mut count = 0;
    for &s in &cfg.seeds {
        let model = cfg.model_for(s);
        let target = seed_cache_dir(dir, s);
        for i in 0..cfg.tasks.len() {
            let data = taskbench::generate_task(&cfg.task_spec_for(i, s), &model)?;
            taskbench::save_task(&target, &data)?;
            count += 1;
        }
    }
    Ok(count)
}

/// Fine-tune every user of every seed and write the task vectors next to the
/// cached checkpoints.
pub fn finetune_all(cfg: &ExperimentConfig, cache: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let all: BTreeSet<usize> = (0..cfg.tasks.len()).collect();
    let mut written = Vec::new();
    for &s in &cfg.seeds {
        let assets = prepare_seed(cfg, s, &all, Some(cache))?;
        for a in assets.tasks.iter().flatten() {
            let p = seed_cache_dir(cache, s).join(format!("{}.tv", a.vector.task_id));
            checkpoint::write_task_vector(&p, &a.vector)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// A single cell, all configured defense modes.
pub fn fuse_one(
    cfg: &ExperimentConfig,
    regime: NoiseKind,
    s: u64,
    members: &[usize],
    cache: Option<&Path>,
) -> Result<Vec<ResultRow>, HarnessError> {
    cfg.validate().map_err(|i| HarnessError::Config(i.message))?;
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(HarnessError::Config("a fusion cell needs at least two distinct tasks".into()));
    }
    cfg.transport.lambda(sorted.len()).map_err(HarnessError::Fusion)?;
    let set: BTreeSet<usize> = sorted.iter().copied().collect();
    let assets = prepare_seed(cfg, s, &set, cache)?;
    let links = seed_links(cfg, s)?;
    let cell = evaluate_cell(cfg, &assets, &links, regime, &sorted, &cfg.defense_modes, &cfg.defense, CellDepth::Full)?;
    Ok(cell.rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_count_and_order() {
        assert_eq!(subsets(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(subsets(8, 8), vec![(0..8).collect::<Vec<_>>()]);
        assert!(subsets(3, 4).is_empty());
        assert_eq!(subsets(5, 0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn combinations_parse() {
        assert_eq!("all".parse::<Combinations>().unwrap(), Combinations::All);
        assert_eq!("sample:3".parse::<Combinations>().unwrap(), Combinations::Sample(3));
        for bad in ["sample:0", "sample:", "some", "sample:x"] {
            assert!(bad.parse::<Combinations>().is_err(), "{bad}");
        }
        assert_eq!(Combinations::Sample(7).to_string(), "sample:7");
    }

    #[test]
    fn sampled_combinations_are_a_stable_subset() {
        let cfg = ExperimentConfig { task_counts: vec![3], combinations: Combinations::Sample(5), ..ExperimentConfig::default() };
        let picked = enumerate_combinations(&cfg);
        assert_eq!(picked.len(), 5);
        let all = subsets(8, 3);
        assert!(picked.iter().all(|c| all.contains(c)));
        assert_eq!(picked, enumerate_combinations(&cfg));
        let many = ExperimentConfig { combinations: Combinations::Sample(1000), ..cfg };
        assert_eq!(enumerate_combinations(&many), all);
    }

    #[test]
    fn combination_ids_sort_task_ids() {
        let cfg = ExperimentConfig::default();
        let a = combination_id(&cfg, &[0, 3]);
        let mut ids = vec![cfg.tasks[0].task_id.clone(), cfg.tasks[3].task_id.clone()];
        ids.sort();
        assert_eq!(a, ids.join("+"));
        assert_eq!(combination_id(&cfg, &[3, 0]), a);
    }

    #[test]
    fn float_list_round_trip() {
        let l = FloatList(vec![0.1, 1.0 / 3.0, -2.5e-9, f64::NAN]);
        let s: String = l.clone().into();
        let back = FloatList::try_from(s).unwrap();
        assert_eq!(back.0.len(), 4);
        for (a, b) in l.0.iter().zip(&back.0) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
        assert_eq!(FloatList::try_from(String::new()).unwrap(), FloatList(vec![]));
        assert!(FloatList::try_from("1;x".to_string()).is_err());
    }

    #[test]
    fn mean_variance_cases() {
        assert!(mean_variance(&[]).0.is_nan());
        let (m, v) = mean_variance(&[2.0]);
        assert_eq!(m, 2.0);
        assert!(v.is_nan());
        assert_eq!(mean_variance(&[1.0, 2.0, 3.0, 4.0]), (2.5, 5.0 / 3.0));
    }

    #[test]
    fn line_lookup() {
        let text = "config_version = 1\n\n[channel]\nq = 4\n\n[[tasks]]\ntask_id = \"a\"\n";
        assert_eq!(line_of_key(text, "q"), Some(4));
        assert_eq!(line_of_key(text, "channel"), Some(3));
        assert_eq!(line_of_key(text, "tasks"), Some(6));
        assert_eq!(line_of_key(text, "seeds"), None);
        assert_eq!(line_of_offset(text, 0), 1);
        assert_eq!(line_of_offset(text, text.find("q =").unwrap()), 4);
    }

    #[test]
    fn output_dir_precedence() {
        let cfg = ExperimentConfig { output_dir: "from-config".into(), ..ExperimentConfig::default() };
        assert_eq!(resolve_output_dir(&cfg, Some(Path::new("flag"))), PathBuf::from("flag"));
    }

    #[test]
    fn best_lambda_picks_the_highest_mean() {
        let row = |n, l, v| LambdaRow { n_tasks: n, combination_id: "c".into(), seed: 0, lambda: l, mean_normalized_accuracy: v };
        let rows = [row(2, 0.5, 0.8), row(2, 0.5, 0.94), row(2, 0.7, 0.86), row(2, 0.9, 0.85), row(3, 0.3, 0.5), row(3, 0.4, 0.5)];
        let best = best_lambdas(&rows);
        assert_eq!(best[&2], 0.5);
        assert_eq!(best[&3], 0.3);
    }
}
