//! Post-fusion defense: restore embedding groups from the base model, then
//! realign the merged backbone on a small pooled few-shot set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{GroupTag, ParameterSet, ParamsError};
use crate::taskbench::Dataset;
use crate::tinyvit::{self, ModelConfig, ModelError, Optimizer, TaskView, TrainSpec};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("fewshot_per_class must be at least 1 when realignment is enabled")]
    FewshotSize,
    #[error("realign_lr must be positive, got {0}")]
    LearningRate(f64),
    #[error("empty few-shot pool")]
    EmptyPool,
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub freeze_tags: BTreeSet<GroupTag>,
    pub fewshot_per_class: usize,
    pub realign_steps: usize,
    pub realign_lr: f64,
    pub enabled_freeze: bool,
    pub enabled_realign: bool,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            freeze_tags: GroupTag::embeddings(),
            fewshot_per_class: 10,
            realign_steps: 50,
            realign_lr: 5e-4,
            enabled_freeze: true,
            enabled_realign: true,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.enabled_realign && self.fewshot_per_class == 0 {
            return Err(DefenseError::FewshotSize);
        }
        if !(self.realign_lr > 0.0) {
            return Err(DefenseError::LearningRate(self.realign_lr));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: DefenseMode) -> DefenseConfig {
        let (f, r) = mode.flags();
        DefenseConfig { enabled_freeze: f, enabled_realign: r, ..self.clone() }
    }
}

/// Which defense components run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    None,
    FreezeOnly,
    RealignOnly,
    Full,
}

impl DefenseMode {
    pub const ALL: [DefenseMode; 4] = [DefenseMode::None, DefenseMode::FreezeOnly, DefenseMode::RealignOnly, DefenseMode::Full];

    /// `(freeze, realign)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            DefenseMode::None => (false, false),
            DefenseMode::FreezeOnly => (true, false),
            DefenseMode::RealignOnly => (false, true),
            DefenseMode::Full => (true, true),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DefenseMode::None => "none",
            DefenseMode::FreezeOnly => "freeze_only",
            DefenseMode::RealignOnly => "realign_only",
            DefenseMode::Full => "full",
        }
    }
}

impl std::fmt::Display for DefenseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DefenseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DefenseMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown defense mode `{s}` (expected none, freeze_only, realign_only or full)"))
    }
}

/// Groups tagged in `freeze_tags` copied bit for bit from `theta_base`.
pub fn restore_frozen(
    theta_mtllm: &ParameterSet,
    theta_base: &ParameterSet,
    dcfg: &DefenseConfig,
) -> Result<ParameterSet, DefenseError> {
    theta_mtllm.check_compatible(theta_base)?;
    let mut out = theta_mtllm.clone();
    for (g, b) in out.groups_mut().iter_mut().zip(theta_base.groups()) {
        if dcfg.freeze_tags.contains(&g.tag) {
            g.values.copy_from_slice(&b.values);
        }
    }
    Ok(out)
}

/// Full-batch few-shot training on the pooled per-task splits, keeping
/// `freeze_tags` (and the heads) fixed throughout.
///
/// Each task contributes its first `fewshot_per_class` samples per class.
pub fn realign(
    theta: &ParameterSet,
    cfg: &ModelConfig,
    fewshot: &[TaskView<'_>],
    dcfg: &DefenseConfig,
) -> Result<ParameterSet, DefenseError> {
    dcfg.validate()?;
    let pools: Vec<Dataset> = fewshot.iter().map(|t| t.data.take_per_class(dcfg.fewshot_per_class)).collect();
    if pools.iter().all(|p| p.is_empty()) {
        return Err(DefenseError::EmptyPool);
    }
    let total: usize = pools.iter().map(|p| p.len()).sum();
    let spec = TrainSpec {
        iterations: dcfg.realign_steps,
        batch_size: total,
        learning_rate: dcfg.realign_lr,
        optimizer: Optimizer::Adam,
        seed: dcfg.seed,
    };
    let tasks: Vec<(&Dataset, &[f64])> = pools.iter().zip(fewshot).map(|(p, t)| (p, t.head)).collect();
    Ok(tinyvit::finetune_multihead(theta, cfg, &tasks, &spec, &dcfg.freeze_tags)?)
}

/// Restore, then realign, each gated by its flag.
///
/// `enabled_freeze` governs both the restore and the freeze mask during
/// realignment, so realign-only trains the embeddings too.
pub fn apply_defense(
    theta_mtllm: &ParameterSet,
    theta_base: &ParameterSet,
    cfg: &ModelConfig,
    fewshot: &[TaskView<'_>],
    dcfg: &DefenseConfig,
) -> Result<ParameterSet, DefenseError> {
    dcfg.validate()?;
    let mut theta = if dcfg.enabled_freeze {
        restore_frozen(theta_mtllm, theta_base, dcfg)?
    } else {
        theta_mtllm.check_compatible(theta_base)?;
        theta_mtllm.clone()
    };
    if dcfg.enabled_realign {
        // Without the freeze component nothing but the heads is held fixed.
        let mask = if dcfg.enabled_freeze {
            dcfg.clone()
        } else {
            DefenseConfig { freeze_tags: BTreeSet::new(), ..dcfg.clone() }
        };
        theta = realign(&theta, cfg, fewshot, &mask)?;
    }
    Ok(theta)
}
