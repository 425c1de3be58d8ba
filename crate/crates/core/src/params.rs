//! Parameter containers and task-vector arithmetic.
//!
//! A [`ParameterSet`] is an ordered list of named, tagged groups of `f64`
//! weights. Group tags are the unit of freezing: the defense restores whole
//! tagged groups, never individual weights. Two sets can be combined only if
//! their layouts (group names, lengths, tags) and architecture hash agree.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("incompatible parameter sets: {0}")]
    Incompatible(String),
    #[error("unknown group tag `{0}`")]
    UnknownTag(String),
    #[error("empty task-vector list")]
    EmptyVectors,
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("degenerate input: task vector `{0}` has zero norm")]
    ZeroNorm(String),
    #[error("flat buffer has {got} values, layout expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("duplicate group name `{0}`")]
    DuplicateGroup(String),
    #[error("source user {0} must be >= 1")]
    InvalidUser(usize),
}

/// Architectural role of a parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTag {
    PatchEmbed,
    PosEmbed,
    ClassEmbed,
    Attention,
    Mlp,
    Norm,
    Head,
}

impl GroupTag {
    pub const ALL: [GroupTag; 7] = [
        GroupTag::PatchEmbed,
        GroupTag::PosEmbed,
        GroupTag::ClassEmbed,
        GroupTag::Attention,
        GroupTag::Mlp,
        GroupTag::Norm,
        GroupTag::Head,
    ];

    /// The three embedding tags frozen by default.
    pub fn embeddings() -> BTreeSet<GroupTag> {
        [GroupTag::PatchEmbed, GroupTag::PosEmbed, GroupTag::ClassEmbed]
            .into_iter()
            .collect()
    }

    pub fn all() -> BTreeSet<GroupTag> {
        Self::ALL.into_iter().collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupTag::PatchEmbed => "patch_embed",
            GroupTag::PosEmbed => "pos_embed",
            GroupTag::ClassEmbed => "class_embed",
            GroupTag::Attention => "attention",
            GroupTag::Mlp => "mlp",
            GroupTag::Norm => "norm",
            GroupTag::Head => "head",
        }
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupTag {
    type Err = ParamsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ParamsError::UnknownTag(s.to_string()))
    }
}

/// Parse a comma separated tag list such as `"patch_embed,pos_embed"`.
pub fn parse_tags(list: &str) -> Result<BTreeSet<GroupTag>, ParamsError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(GroupTag::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub tag: GroupTag,
    pub values: Vec<f64>,
}

/// All weights of one model, grouped and tagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    groups: Vec<ParamGroup>,
    config_hash: String,
}

impl ParameterSet {
    pub fn new(groups: Vec<ParamGroup>, config_hash: impl Into<String>) -> Result<Self, ParamsError> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            if !seen.insert(g.name.as_str()) {
                return Err(ParamsError::DuplicateGroup(g.name.clone()));
            }
        }
        Ok(Self { groups, config_hash: config_hash.into() })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn total_dim(&self) -> usize {
        self.groups.iter().map(|g| g.values.len()).sum()
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Same layout with every value set to zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup { name: g.name.clone(), tag: g.tag, values: vec![0.0; g.values.len()] })
                .collect(),
            config_hash: self.config_hash.clone(),
        }
    }

    /// Checks arithmetic compatibility, naming the first mismatched group.
    pub fn check_compatible(&self, other: &ParameterSet) -> Result<(), ParamsError> {
        if self.config_hash != other.config_hash {
            return Err(ParamsError::Incompatible(format!(
                "model_config_hash `{}` vs `{}`",
                self.config_hash, other.config_hash
            )));
        }
        for (i, a) in self.groups.iter().enumerate() {
            let Some(b) = other.groups.get(i) else {
                return Err(ParamsError::Incompatible(format!("group `{}` missing on the right", a.name)));
            };
            if a.name != b.name || a.tag != b.tag || a.values.len() != b.values.len() {
                return Err(ParamsError::Incompatible(format!(
                    "group `{}` ({}, len {}) vs `{}` ({}, len {})",
                    a.name,
                    a.tag,
                    a.values.len(),
                    b.name,
                    b.tag,
                    b.values.len()
                )));
            }
        }
        if let Some(extra) = other.groups.get(self.groups.len()) {
            return Err(ParamsError::Incompatible(format!("group `{}` missing on the left", extra.name)));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for g in &self.groups {
            out.extend_from_slice(&g.values);
        }
        out
    }

    /// Rebuild a set with this layout from a flat buffer.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParameterSet, ParamsError> {
        let expected = self.total_dim();
        if flat.len() != expected {
            return Err(ParamsError::LengthMismatch { expected, got: flat.len() });
        }
        let mut offset = 0;
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let n = g.values.len();
                let values = flat[offset..offset + n].to_vec();
                offset += n;
                ParamGroup { name: g.name.clone(), tag: g.tag, values }
            })
            .collect();
        Ok(ParameterSet { groups, config_hash: self.config_hash.clone() })
    }

    /// Overwrite all values from a flat buffer in layout order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), ParamsError> {
        let expected = self.total_dim();
        if flat.len() != expected {
            return Err(ParamsError::LengthMismatch { expected, got: flat.len() });
        }
        let mut offset = 0;
        for g in &mut self.groups {
            let n = g.values.len();
            g.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Subset of groups whose tag is in `tags`, original order preserved.
    pub fn group_select(&self, tags: &BTreeSet<GroupTag>) -> ParameterSet {
        ParameterSet {
            groups: self.groups.iter().filter(|g| tags.contains(&g.tag)).cloned().collect(),
            config_hash: self.config_hash.clone(),
        }
    }

    /// Like [`group_select`](Self::group_select) but tags are given as strings.
    pub fn group_select_named(&self, tags: &[&str]) -> Result<ParameterSet, ParamsError> {
        let tags = tags.iter().map(|t| t.parse()).collect::<Result<BTreeSet<_>, _>>()?;
        Ok(self.group_select(&tags))
    }

    /// Per-element mask over the flattened layout: true where the group tag is in `tags`.
    pub fn tag_mask(&self, tags: &BTreeSet<GroupTag>) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.total_dim());
        for g in &self.groups {
            mask.extend(std::iter::repeat_n(tags.contains(&g.tag), g.values.len()));
        }
        mask
    }

    pub fn squared_norm(&self) -> f64 {
        self.groups.iter().flat_map(|g| g.values.iter()).map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.groups.iter().flat_map(|g| g.values.iter()).all(|v| v.is_finite())
    }
}

/// A fine-tuning delta together with its identity and transport metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: ParameterSet,
    pub task_id: String,
    /// 1-based user index; also fixes summation order during fusion.
    pub source_user: usize,
    pub is_perturbed: bool,
    /// Per-element noise variance applied in transport, 0 when clean.
    pub noise_variance_used: f64,
}

impl TaskVector {
    pub fn clean(delta: ParameterSet, task_id: impl Into<String>, source_user: usize) -> Result<Self, ParamsError> {
        if source_user == 0 {
            return Err(ParamsError::InvalidUser(source_user));
        }
        Ok(Self { delta, task_id: task_id.into(), source_user, is_perturbed: false, noise_variance_used: 0.0 })
    }

    pub fn norm(&self) -> f64 {
        self.delta.squared_norm().sqrt()
    }
}

/// `fine - base`, elementwise.
pub fn compute_task_vector(
    fine: &ParameterSet,
    base: &ParameterSet,
    task_id: &str,
    source_user: usize,
) -> Result<TaskVector, ParamsError> {
    fine.check_compatible(base)?;
    let mut delta = fine.clone();
    for (d, b) in delta.groups.iter_mut().zip(&base.groups) {
        for (x, y) in d.values.iter_mut().zip(&b.values) {
            *x -= *y;
        }
    }
    TaskVector::clean(delta, task_id, source_user)
}

/// `base + lambda * sum(delta_q)`.
///
/// Deltas are accumulated left to right in ascending `source_user` order so
/// the result does not depend on the order of `vectors`.
pub fn add_scaled(base: &ParameterSet, vectors: &[TaskVector], lambda: f64) -> Result<ParameterSet, ParamsError> {
    if vectors.is_empty() {
        return Err(ParamsError::EmptyVectors);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ParamsError::LambdaOutOfRange(lambda));
    }
    for v in vectors {
        base.check_compatible(&v.delta)?;
    }
    let mut ordered: Vec<&TaskVector> = vectors.iter().collect();
    ordered.sort_by_key(|v| v.source_user);

    let mut out = base.clone();
    for (gi, g) in out.groups.iter_mut().enumerate() {
        for (k, x) in g.values.iter_mut().enumerate() {
            let mut acc = 0.0;
            for v in &ordered {
                acc += v.delta.groups[gi].values[k];
            }
            *x += lambda * acc;
        }
    }
    Ok(out)
}

pub fn dot(a: &ParameterSet, b: &ParameterSet) -> Result<f64, ParamsError> {
    a.check_compatible(b)?;
    Ok(a.groups
        .iter()
        .zip(&b.groups)
        .flat_map(|(x, y)| x.values.iter().zip(&y.values))
        .map(|(x, y)| x * y)
        .sum())
}

/// Cosine of the flattened deltas, clamped to [-1, 1].
pub fn cosine_similarity(a: &TaskVector, b: &TaskVector) -> Result<f64, ParamsError> {
    let ab = dot(&a.delta, &b.delta)?;
    let na = a.delta.squared_norm().sqrt();
    let nb = b.delta.squared_norm().sqrt();
    if na == 0.0 {
        return Err(ParamsError::ZeroNorm(a.task_id.clone()));
    }
    if nb == 0.0 {
        return Err(ParamsError::ZeroNorm(b.task_id.clone()));
    }
    Ok((ab / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn set(values: &[&[f64]]) -> ParameterSet {
        let tags = [GroupTag::Attention, GroupTag::Mlp, GroupTag::Norm, GroupTag::Head];
        let groups = values
            .iter()
            .enumerate()
            .map(|(i, v)| ParamGroup { name: format!("g{i}"), tag: tags[i % tags.len()], values: v.to_vec() })
            .collect();
        ParameterSet::new(groups, "test").unwrap()
    }

    fn tv(values: &[&[f64]], user: usize) -> TaskVector {
        TaskVector::clean(set(values), format!("t{user}"), user).unwrap()
    }

    #[test]
    fn task_vector_is_elementwise_difference() {
        let fine = set(&[&[1.5, -2.0]]);
        let base = set(&[&[0.5, 1.0]]);
        let tau = compute_task_vector(&fine, &base, "a", 1).unwrap();
        assert_eq!(tau.delta.flatten(), vec![1.0, -3.0]);
        assert!(!tau.is_perturbed);
        assert_eq!(tau.noise_variance_used, 0.0);

        let same = compute_task_vector(&base, &base, "a", 1).unwrap();
        assert!(same.delta.flatten().iter().all(|&x| x == 0.0));

        let zero = base.zeros_like();
        assert_eq!(compute_task_vector(&fine, &zero, "a", 1).unwrap().delta.flatten(), fine.flatten());
    }

    #[test]
    fn incompatible_sets_name_the_group() {
        let a = set(&[&[1.0], &[1.0, 2.0]]);
        let b = set(&[&[1.0], &[1.0]]);
        let err = compute_task_vector(&a, &b, "x", 1).unwrap_err();
        assert!(err.to_string().contains("g1"), "{err}");

        let c = ParameterSet::new(a.groups().to_vec(), "other").unwrap();
        assert!(matches!(a.check_compatible(&c), Err(ParamsError::Incompatible(_))));
    }

    #[test]
    fn add_scaled_examples() {
        let base = set(&[&[0.0, 0.0]]);
        let out = add_scaled(&base, &[tv(&[&[1.0, 0.0]], 1), tv(&[&[0.0, 2.0]], 2)], 0.5).unwrap();
        assert_eq!(out.flatten(), vec![0.5, 1.0]);

        let base = set(&[&[0.3, -7.0]]);
        let v = tv(&[&[1.0, 4.0]], 1);
        assert_eq!(add_scaled(&base, std::slice::from_ref(&v), 0.0).unwrap(), base);
        let z = tv(&[&[0.0, 0.0]], 1);
        assert_eq!(add_scaled(&base, &[z], 1.0).unwrap(), base);

        assert_eq!(add_scaled(&base, &[], 0.5), Err(ParamsError::EmptyVectors));
        assert_eq!(add_scaled(&base, std::slice::from_ref(&v), 1.5), Err(ParamsError::LambdaOutOfRange(1.5)));
    }

    #[test]
    fn add_scaled_is_order_independent_bitwise() {
        let base = set(&[&[0.1, 0.2, 0.3]]);
        let a = tv(&[&[1e16, 1.0, 0.1]], 1);
        let b = tv(&[&[1.0, 1e-3, 0.2]], 2);
        let c = tv(&[&[-1e16, 3.0, 0.3]], 3);
        let x = add_scaled(&base, &[a.clone(), b.clone(), c.clone()], 0.7).unwrap();
        let y = add_scaled(&base, &[c, a, b], 0.7).unwrap();
        assert_eq!(x.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   y.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn cosine_examples() {
        let a = tv(&[&[1.0, 0.0]], 1);
        let b = tv(&[&[0.0, 1.0]], 2);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        let c = tv(&[&[1.0, 1.0]], 1);
        let d = tv(&[&[1.0, -1.0]], 2);
        assert_eq!(cosine_similarity(&c, &d).unwrap(), 0.0);
        let z = tv(&[&[0.0, 0.0]], 3);
        assert_eq!(cosine_similarity(&a, &z), Err(ParamsError::ZeroNorm("t3".into())));
    }

    #[test]
    fn group_select_and_tags() {
        let p = set(&[&[1.0], &[2.0, 3.0]]);
        assert_eq!(p.group_select(&BTreeSet::new()).groups().len(), 0);
        let only = p.group_select(&[GroupTag::Attention].into_iter().collect());
        assert_eq!(only.groups().len(), 1);
        assert_eq!(only.groups()[0].name, "g0");
        assert!(matches!(p.group_select_named(&["bogus"]), Err(ParamsError::UnknownTag(_))));
        assert_eq!(parse_tags("patch_embed, pos_embed").unwrap(), [GroupTag::PatchEmbed, GroupTag::PosEmbed].into_iter().collect());
        assert_eq!(p.tag_mask(&[GroupTag::Mlp].into_iter().collect()), vec![false, true, true]);
    }

    #[test]
    fn flatten_roundtrip() {
        let p = set(&[&[1.0, f64::MIN_POSITIVE], &[-0.0, 3.5e300]]);
        let back = p.unflatten_like(&p.flatten()).unwrap();
        assert_eq!(back, p);
        assert!(back.groups()[1].values[0].is_sign_negative());
        assert!(matches!(p.unflatten_like(&[1.0]), Err(ParamsError::LengthMismatch { expected: 4, got: 1 })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let g = ParamGroup { name: "a".into(), tag: GroupTag::Head, values: vec![1.0] };
        assert!(ParameterSet::new(vec![g.clone(), g], "h").is_err());
    }
}
