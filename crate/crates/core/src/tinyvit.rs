//! A small pre-norm vision transformer with hand-written backpropagation.
//!
//! Architecture: non-overlapping patches are linearly embedded, a learned
//! class token is prepended, learned position embeddings are added, then
//! `num_layers` blocks of `x + Attn(LN(x))`, `x + MLP(LN(x))` follow. The
//! class token goes through a final layer norm and a linear head.
//!
//! Parameter groups, in order:
//!
//! | group              | tag           | layout                              |
//! |--------------------|---------------|-------------------------------------|
//! | `patch_embed`      | `patch_embed` | `W[D, P]`, `b[D]`                   |
//! | `pos_embed`        | `pos_embed`   | `E[T, D]` (row 0 is the class slot) |
//! | `class_embed`      | `class_embed` | `c[D]`                              |
//! | `layers.{l}.norm1` | `norm`        | `gamma[D]`, `beta[D]`               |
//! | `layers.{l}.attn`  | `attention`   | `Wqkv[3D, D]`, `bqkv[3D]`, `Wo[D, D]`, `bo[D]` |
//! | `layers.{l}.norm2` | `norm`        | `gamma[D]`, `beta[D]`               |
//! | `layers.{l}.mlp`   | `mlp`         | `W1[M, D]`, `b1[M]`, `W2[D, M]`, `b2[D]` |
//! | `norm`             | `norm`        | `gamma[D]`, `beta[D]`               |
//! | `head`             | `head`        | `W[C, D]`, `b[C]`                   |
//!
//! Matrices are row-major `[out, in]`; a linear layer computes `x W^T + b`.
//! GELU uses the tanh approximation.

use std::collections::BTreeSet;

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{GroupTag, ParamGroup, ParameterSet, ParamsError};
use crate::seeds;
use crate::taskbench::Dataset;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch shape mismatch: expected {expected} values per image, buffer has {got} for {n} images")]
    Shape { expected: usize, got: usize, n: usize },
    #[error("parameters do not match the model layout: {0}")]
    Layout(String),
    #[error("non-finite parameter in group `{0}`")]
    NonFiniteParam(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("invalid train spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 128,
            num_classes: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Architecture fingerprint; the seed is excluded so differently seeded
    /// models stay arithmetic-compatible.
    pub fn config_hash(&self) -> String {
        let key = format!(
            "tinyvit-v1:{}:{}:{}:{}:{}:{}:{}:{}",
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.mlp_dim,
            self.num_classes
        );
        format!("{:016x}", seeds::derive(0, &[&key]))
    }

    /// `(name, tag, len)` for every group, in layout order.
    pub fn layout(&self) -> Vec<(String, GroupTag, usize)> {
        let (d, m, c, t, p) = (self.embed_dim, self.mlp_dim, self.num_classes, self.tokens(), self.patch_dim());
        let mut out = vec![
            ("patch_embed".to_string(), GroupTag::PatchEmbed, d * p + d),
            ("pos_embed".to_string(), GroupTag::PosEmbed, t * d),
            ("class_embed".to_string(), GroupTag::ClassEmbed, d),
        ];
        for l in 0..self.num_layers {
            out.push((format!("layers.{l}.norm1"), GroupTag::Norm, 2 * d));
            out.push((format!("layers.{l}.attn"), GroupTag::Attention, 3 * d * d + 3 * d + d * d + d));
            out.push((format!("layers.{l}.norm2"), GroupTag::Norm, 2 * d));
            out.push((format!("layers.{l}.mlp"), GroupTag::Mlp, m * d + m + d * m + d));
        }
        out.push(("norm".to_string(), GroupTag::Norm, 2 * d));
        out.push(("head".to_string(), GroupTag::Head, c * d + c));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    /// Zero is accepted and leaves the parameters untouched.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { iterations: 300, batch_size: 32, learning_rate: 1e-3, optimizer: Optimizer::Adam, seed: 0 }
    }
}

/// Seeded initial parameters.
pub fn init_model(cfg: &ModelConfig) -> Result<ParameterSet, ModelError> {
    cfg.validate()?;
    let mut rng = seeds::rng_for(cfg.seed, &["init"]);
    let mut normal = |n: usize, sd: f64| -> Vec<f64> {
        let dist = Normal::new(0.0, sd).unwrap();
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let (d, m, c, t, p) = (cfg.embed_dim, cfg.mlp_dim, cfg.num_classes, cfg.tokens(), cfg.patch_dim());
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let norm = || [vec![1.0; d], vec![0.0; d]].concat();
    let mut groups = Vec::new();
    let mut push = |name: &str, tag: GroupTag, values: Vec<f64>| {
        groups.push(ParamGroup { name: name.to_string(), tag, values });
    };
    push("patch_embed", GroupTag::PatchEmbed, [normal(d * p, fan(p)), vec![0.0; d]].concat());
    push("pos_embed", GroupTag::PosEmbed, normal(t * d, 1.0));
    push("class_embed", GroupTag::ClassEmbed, normal(d, 0.1));
    for l in 0..cfg.num_layers {
        push(&format!("layers.{l}.norm1"), GroupTag::Norm, norm());
        push(
            &format!("layers.{l}.attn"),
            GroupTag::Attention,
            [normal(3 * d * d, fan(d)), vec![0.0; 3 * d], normal(d * d, fan(d)), vec![0.0; d]].concat(),
        );
        push(&format!("layers.{l}.norm2"), GroupTag::Norm, norm());
        push(
            &format!("layers.{l}.mlp"),
            GroupTag::Mlp,
            [normal(m * d, fan(d)), vec![0.0; m], normal(d * m, fan(m)), vec![0.0; d]].concat(),
        );
    }
    push("norm", GroupTag::Norm, norm());
    push("head", GroupTag::Head, [normal(c * d, fan(d)), vec![0.0; c]].concat());
    Ok(ParameterSet::new(groups, cfg.config_hash())?)
}

/// Scale of a task head's weights, in units of `1 / sqrt(D)`.
pub const TASK_HEAD_SCALE: f64 = 3.0;

/// Fixed classifier of one task: `W[C, D]` with entries drawn from
/// `N(0, (TASK_HEAD_SCALE / sqrt(D))^2)` and a zero bias.
///
/// Task heads are swapped into the `head` group and held frozen, so task
/// vectors never touch the head and tasks sharing a label space do not
/// compete for it after merging.
pub fn task_head(cfg: &ModelConfig, task_id: &str) -> Vec<f64> {
    let (d, c) = (cfg.embed_dim, cfg.num_classes);
    let mut rng = seeds::rng_for(cfg.seed, &["head", task_id]);
    let dist = Normal::new(0.0, TASK_HEAD_SCALE / (d as f64).sqrt()).unwrap();
    let mut w: Vec<f64> = (0..c * d).map(|_| dist.sample(&mut rng)).collect();
    w.extend(std::iter::repeat_n(0.0, c));
    w
}

/// One task's data together with the head that scores it.
#[derive(Debug, Clone, Copy)]
pub struct TaskView<'a> {
    pub data: &'a Dataset,
    pub head: &'a [f64],
}

/// Copy of `params` with the `head` group replaced.
pub fn with_head(params: &ParameterSet, head: &[f64]) -> Result<ParameterSet, ModelError> {
    let mut out = params.clone();
    let g = out
        .groups_mut()
        .iter_mut()
        .find(|g| g.tag == GroupTag::Head)
        .ok_or_else(|| ModelError::Layout("no head group".into()))?;
    if g.values.len() != head.len() {
        return Err(ModelError::Layout(format!("head has {} values, expected {}", head.len(), g.values.len())));
    }
    g.values.copy_from_slice(head);
    Ok(out)
}

/// Split `v` into consecutive pieces of the given lengths.
fn pieces<'a>(v: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    let mut rest = v;
    for &n in lens {
        let (a, b) = rest.split_at(n);
        out.push(a);
        rest = b;
    }
    out
}

fn pieces_mut<'a>(v: &'a mut [f64], lens: &[usize]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    let mut rest = v;
    for &n in lens {
        let (a, b) = rest.split_at_mut(n);
        out.push(a);
        rest = b;
    }
    out
}

fn mat(v: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), v).unwrap()
}

fn mat_mut(v: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), v).unwrap()
}

struct Linear<'a> {
    w: ArrayView2<'a, f64>,
    b: ArrayView1<'a, f64>,
}

impl<'a> Linear<'a> {
    fn new(w: &'a [f64], b: &'a [f64], out: usize, inp: usize) -> Self {
        Self { w: mat(w, out, inp), b: ArrayView1::from(b) }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, mut dw: ArrayViewMut2<f64>, mut db: ArrayViewMut1<f64>) -> Array2<f64> {
        dw += &dy.t().dot(x);
        db += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

struct Norm<'a> {
    gamma: ArrayView1<'a, f64>,
    beta: ArrayView1<'a, f64>,
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

impl<'a> Norm<'a> {
    fn new(v: &'a [f64], d: usize) -> Self {
        Self { gamma: ArrayView1::from(&v[..d]), beta: ArrayView1::from(&v[d..]) }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row *= r;
            rstd.push(r);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, rstd })
    }

    fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let d = dy.ncols();
        let (dg, db) = grad.split_at_mut(d);
        let mut dg = ArrayViewMut1::from(dg);
        let mut db = ArrayViewMut1::from(db);
        dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        db += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        let n = d as f64;
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mg = g.sum() / n;
            let mgx = g.dot(&xh) / n;
            let r = cache.rstd[i];
            for j in 0..d {
                row[j] = r * (g[j] - mg - xh[j] * mgx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Borrowed view of one parameter set laid out for `cfg`.
struct Net<'a> {
    cfg: &'a ModelConfig,
    patch: Linear<'a>,
    pos: ArrayView2<'a, f64>,
    cls: ArrayView1<'a, f64>,
    blocks: Vec<Block<'a>>,
    norm: Norm<'a>,
    head: Linear<'a>,
}

struct Block<'a> {
    norm1: Norm<'a>,
    qkv: Linear<'a>,
    proj: Linear<'a>,
    norm2: Norm<'a>,
    fc1: Linear<'a>,
    fc2: Linear<'a>,
}

struct BlockCache {
    n1: NormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    /// Attention probabilities per (sample, head), `T x T` each.
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    n2: NormCache,
    b: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
}

struct Cache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    nf: NormCache,
    cls_out: Array2<f64>,
}

fn check_layout(params: &ParameterSet, cfg: &ModelConfig) -> Result<(), ModelError> {
    cfg.validate()?;
    if params.config_hash() != cfg.config_hash() {
        return Err(ModelError::Layout(format!(
            "config hash {} != {}",
            params.config_hash(),
            cfg.config_hash()
        )));
    }
    let layout = cfg.layout();
    if layout.len() != params.groups().len() {
        return Err(ModelError::Layout(format!("{} groups, expected {}", params.groups().len(), layout.len())));
    }
    for ((name, tag, len), g) in layout.iter().zip(params.groups()) {
        if &g.name != name || g.tag != *tag || g.values.len() != *len {
            return Err(ModelError::Layout(format!("group `{}` does not match `{name}`", g.name)));
        }
    }
    Ok(())
}

impl<'a> Net<'a> {
    fn new(params: &'a ParameterSet, cfg: &'a ModelConfig) -> Result<Self, ModelError> {
        check_layout(params, cfg)?;
        for g in params.groups() {
            if g.values.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteParam(g.name.clone()));
            }
        }
        let (d, m, c, t, p) = (cfg.embed_dim, cfg.mlp_dim, cfg.num_classes, cfg.tokens(), cfg.patch_dim());
        let g = params.groups();
        let pe = pieces(&g[0].values, &[d * p, d]);
        let mut blocks = Vec::new();
        for l in 0..cfg.num_layers {
            let base = 3 + 4 * l;
            let at = pieces(&g[base + 1].values, &[3 * d * d, 3 * d, d * d, d]);
            let ml = pieces(&g[base + 3].values, &[m * d, m, d * m, d]);
            blocks.push(Block {
                norm1: Norm::new(&g[base].values, d),
                qkv: Linear::new(at[0], at[1], 3 * d, d),
                proj: Linear::new(at[2], at[3], d, d),
                norm2: Norm::new(&g[base + 2].values, d),
                fc1: Linear::new(ml[0], ml[1], m, d),
                fc2: Linear::new(ml[2], ml[3], d, m),
            });
        }
        let nl = 3 + 4 * cfg.num_layers;
        let hd = pieces(&g[nl + 1].values, &[c * d, c]);
        Ok(Self {
            cfg,
            patch: Linear::new(pe[0], pe[1], d, p),
            pos: mat(&g[1].values, t, d),
            cls: ArrayView1::from(&g[2].values[..]),
            blocks,
            norm: Norm::new(&g[nl].values, d),
            head: Linear::new(hd[0], hd[1], c, d),
        })
    }

    /// `(n * num_patches, patch_dim)`, patches in raster order, pixels within
    /// a patch in `(row, col, channel)` order.
    fn patchify(&self, pixels: &[f64], n: usize) -> Array2<f64> {
        let cfg = self.cfg;
        let (s, ps, ch) = (cfg.image_size, cfg.patch_size, cfg.channels);
        let g = s / ps;
        let np = cfg.num_patches();
        let mut out = Array2::zeros((n * np, cfg.patch_dim()));
        for i in 0..n {
            let img = &pixels[i * cfg.pixels()..(i + 1) * cfg.pixels()];
            for py in 0..g {
                for px in 0..g {
                    let mut row = out.row_mut(i * np + py * g + px);
                    let mut k = 0;
                    for y in 0..ps {
                        for x in 0..ps {
                            for c in 0..ch {
                                row[k] = img[((py * ps + y) * s + px * ps + x) * ch + c];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn forward(&self, pixels: &[f64], n: usize) -> (Array2<f64>, Cache) {
        let cfg = self.cfg;
        let (d, t, np) = (cfg.embed_dim, cfg.tokens(), cfg.num_patches());
        let patches = self.patchify(pixels, n);
        let emb = self.patch.forward(&patches);
        let mut z = Array2::zeros((n * t, d));
        for i in 0..n {
            let mut tok = z.slice_mut(s![i * t..(i + 1) * t, ..]);
            tok.row_mut(0).assign(&self.cls);
            tok.slice_mut(s![1.., ..]).assign(&emb.slice(s![i * np..(i + 1) * np, ..]));
            tok += &self.pos;
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (a, n1) = blk.norm1.forward(&z);
            let qkv = blk.qkv.forward(&a);
            let (o, probs) = self.attention(&qkv, n);
            z = z + blk.proj.forward(&o);
            let (b, n2) = blk.norm2.forward(&z);
            let h1 = blk.fc1.forward(&b);
            let g = h1.mapv(gelu);
            z = z + blk.fc2.forward(&g);
            caches.push(BlockCache { n1, a, qkv, probs, o, n2, b, h1, g });
        }
        let cls_rows: Array2<f64> = z.select(Axis(0), &(0..n).map(|i| i * t).collect::<Vec<_>>());
        let (cls_out, nf) = self.norm.forward(&cls_rows);
        let logits = self.head.forward(&cls_out);
        (logits, Cache { patches, blocks: caches, nf, cls_out })
    }

    fn attention(&self, qkv: &Array2<f64>, n: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
        let cfg = self.cfg;
        let (d, t, h, dh) = (cfg.embed_dim, cfg.tokens(), cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Array2::zeros((n * t, d));
        let mut probs = Vec::with_capacity(n * h);
        for i in 0..n {
            let rows = s![i * t..(i + 1) * t, ..];
            let blk = qkv.slice(rows);
            for hh in 0..h {
                let q = blk.slice(s![.., hh * dh..(hh + 1) * dh]);
                let k = blk.slice(s![.., d + hh * dh..d + (hh + 1) * dh]);
                let v = blk.slice(s![.., 2 * d + hh * dh..2 * d + (hh + 1) * dh]);
                let mut sc = q.dot(&k.t()) * scale;
                for mut row in sc.rows_mut() {
                    let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|x| (x - mx).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                o.slice_mut(s![i * t..(i + 1) * t, hh * dh..(hh + 1) * dh]).assign(&sc.dot(&v));
                probs.push(sc);
            }
        }
        (o, probs)
    }

    fn attention_backward(&self, qkv: &Array2<f64>, probs: &[Array2<f64>], d_o: &Array2<f64>, n: usize) -> Array2<f64> {
        let cfg = self.cfg;
        let (d, t, h, dh) = (cfg.embed_dim, cfg.tokens(), cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = Array2::zeros(qkv.raw_dim());
        for i in 0..n {
            let blk = qkv.slice(s![i * t..(i + 1) * t, ..]);
            for hh in 0..h {
                let p = &probs[i * h + hh];
                let q = blk.slice(s![.., hh * dh..(hh + 1) * dh]);
                let k = blk.slice(s![.., d + hh * dh..d + (hh + 1) * dh]);
                let v = blk.slice(s![.., 2 * d + hh * dh..2 * d + (hh + 1) * dh]);
                let dout = d_o.slice(s![i * t..(i + 1) * t, hh * dh..(hh + 1) * dh]);
                let dv = p.t().dot(&dout);
                let dp = dout.dot(&v.t());
                let mut ds = &dp * p;
                for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let tot = row.sum();
                    let pr = p.row(r);
                    for j in 0..t {
                        row[j] -= pr[j] * tot;
                    }
                }
                ds *= scale;
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                let mut out = dqkv.slice_mut(s![i * t..(i + 1) * t, ..]);
                out.slice_mut(s![.., hh * dh..(hh + 1) * dh]).assign(&dq);
                out.slice_mut(s![.., d + hh * dh..d + (hh + 1) * dh]).assign(&dk);
                out.slice_mut(s![.., 2 * d + hh * dh..2 * d + (hh + 1) * dh]).assign(&dv);
            }
        }
        dqkv
    }

    /// Gradient of the loss with respect to every parameter, given `dlogits`.
    fn backward(&self, cache: &Cache, dlogits: &Array2<f64>, n: usize, grads: &mut [Vec<f64>]) {
        let cfg = self.cfg;
        let (d, m, c, t, np, p) = (cfg.embed_dim, cfg.mlp_dim, cfg.num_classes, cfg.tokens(), cfg.num_patches(), cfg.patch_dim());
        let nl = 3 + 4 * cfg.num_layers;

        let dcls = {
            let hg = pieces_mut(&mut grads[nl + 1], &[c * d, c]);
            let mut it = hg.into_iter();
            let (gw, gb) = (it.next().unwrap(), it.next().unwrap());
            self.head.backward(&cache.cls_out, dlogits, mat_mut(gw, c, d), ArrayViewMut1::from(gb))
        };
        let dcls = self.norm.backward(&cache.nf, &dcls, &mut grads[nl]);
        let mut dz = Array2::zeros((n * t, d));
        for i in 0..n {
            dz.row_mut(i * t).assign(&dcls.row(i));
        }

        for (l, (blk, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let base = 3 + 4 * l;
            // MLP branch.
            let dg = {
                let mg = pieces_mut(&mut grads[base + 3], &[m * d, m, d * m, d]);
                let mut it = mg.into_iter();
                let (w1, b1, w2, b2) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                let dg = blk.fc2.backward(&bc.g, &dz, mat_mut(w2, d, m), ArrayViewMut1::from(b2));
                let dh1 = dg * &bc.h1.mapv(gelu_grad);
                blk.fc1.backward(&bc.b, &dh1, mat_mut(w1, m, d), ArrayViewMut1::from(b1))
            };
            dz += &blk.norm2.backward(&bc.n2, &dg, &mut grads[base + 2]);
            // Attention branch.
            let da = {
                let ag = pieces_mut(&mut grads[base + 1], &[3 * d * d, 3 * d, d * d, d]);
                let mut it = ag.into_iter();
                let (wq, bq, wo, bo) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                let d_o = blk.proj.backward(&bc.o, &dz, mat_mut(wo, d, d), ArrayViewMut1::from(bo));
                let dqkv = self.attention_backward(&bc.qkv, &bc.probs, &d_o, n);
                blk.qkv.backward(&bc.a, &dqkv, mat_mut(wq, 3 * d, d), ArrayViewMut1::from(bq))
            };
            dz += &blk.norm1.backward(&bc.n1, &da, &mut grads[base]);
        }

        {
            let mut gpos = mat_mut(&mut grads[1], t, d);
            for i in 0..n {
                gpos += &dz.slice(s![i * t..(i + 1) * t, ..]);
            }
        }
        {
            let mut gcls = ArrayViewMut1::from(&mut grads[2][..]);
            for i in 0..n {
                gcls += &dz.row(i * t);
            }
        }
        let mut demb = Array2::zeros((n * np, d));
        for i in 0..n {
            demb.slice_mut(s![i * np..(i + 1) * np, ..]).assign(&dz.slice(s![i * t + 1..(i + 1) * t, ..]));
        }
        let pg = pieces_mut(&mut grads[0], &[d * p, d]);
        let mut it = pg.into_iter();
        let (gw, gb) = (it.next().unwrap(), it.next().unwrap());
        self.patch.backward(&cache.patches, &demb, mat_mut(gw, d, p), ArrayViewMut1::from(gb));
    }
}

fn check_batch(cfg: &ModelConfig, pixels: &[f64], n: usize) -> Result<(), ModelError> {
    if pixels.len() != n * cfg.pixels() {
        return Err(ModelError::Shape { expected: cfg.pixels(), got: pixels.len(), n });
    }
    Ok(())
}

/// Logits for `n` images stored as `(n, size, size, channels)`.
pub fn forward(params: &ParameterSet, cfg: &ModelConfig, pixels: &[f64], n: usize) -> Result<Array2<f64>, ModelError> {
    check_batch(cfg, pixels, n)?;
    let net = Net::new(params, cfg)?;
    Ok(net.forward(pixels, n).0)
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad(
    params: &ParameterSet,
    cfg: &ModelConfig,
    pixels: &[f64],
    labels: &[usize],
) -> Result<(f64, ParameterSet), ModelError> {
    let n = labels.len();
    check_batch(cfg, pixels, n)?;
    if let Some(&label) = labels.iter().find(|&&y| y >= cfg.num_classes) {
        return Err(ModelError::Label { label, classes: cfg.num_classes });
    }
    let net = Net::new(params, cfg)?;
    let (logits, cache) = net.forward(pixels, n);
    let (loss, dlogits) = cross_entropy(&logits, labels);
    let mut grads: Vec<Vec<f64>> = params.groups().iter().map(|g| vec![0.0; g.values.len()]).collect();
    net.backward(&cache, &dlogits, n, &mut grads);
    let mut out = params.zeros_like();
    for (g, v) in out.groups_mut().iter_mut().zip(grads) {
        g.values = v;
    }
    Ok((loss, out))
}

fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut d = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in d.rows_mut().into_iter().zip(labels) {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - mx).exp());
        let sum = row.sum();
        row /= sum;
        loss -= row[y].ln();
        row[y] -= 1.0;
    }
    d /= n;
    (loss / n, d)
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predict(params: &ParameterSet, cfg: &ModelConfig, data: &Dataset) -> Result<Vec<usize>, ModelError> {
    const CHUNK: usize = 256;
    let net = Net::new(params, cfg)?;
    check_batch(cfg, &data.images, data.len())?;
    let mut out = Vec::with_capacity(data.len());
    let per = cfg.pixels();
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let (logits, _) = net.forward(&data.images[start * per..end * per], end - start);
        out.extend(logits.rows().into_iter().map(argmax));
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions (ties resolved by [`argmax`]).
pub fn evaluate(params: &ParameterSet, cfg: &ModelConfig, data: &Dataset) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let pred = predict(params, cfg, data)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

struct Stepper {
    spec: TrainSpec,
    trainable: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Stepper {
    fn new(theta: &ParameterSet, spec: &TrainSpec, freeze: &BTreeSet<GroupTag>) -> Self {
        let m: Vec<Vec<f64>> = theta.groups().iter().map(|g| vec![0.0; g.values.len()]).collect();
        Self {
            spec: spec.clone(),
            trainable: theta.groups().iter().map(|g| !freeze.contains(&g.tag)).collect(),
            v: m.clone(),
            m,
            step: 0,
        }
    }

    fn any_trainable(&self) -> bool {
        self.trainable.iter().any(|&t| t)
    }

    fn apply(&mut self, theta: &mut ParameterSet, grad: &ParameterSet) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let lr = self.spec.learning_rate;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for (gi, (g, dg)) in theta.groups_mut().iter_mut().zip(grad.groups()).enumerate() {
            if !self.trainable[gi] {
                continue;
            }
            match self.spec.optimizer {
                Optimizer::Sgd => {
                    for (x, d) in g.values.iter_mut().zip(&dg.values) {
                        *x -= lr * d;
                    }
                }
                Optimizer::Adam => {
                    let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
                    for (k, (x, d)) in g.values.iter_mut().zip(&dg.values).enumerate() {
                        m[k] = B1 * m[k] + (1.0 - B1) * d;
                        v[k] = B2 * v[k] + (1.0 - B2) * d * d;
                        *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

fn check_spec(spec: &TrainSpec) -> Result<(), ModelError> {
    if spec.batch_size == 0 || !(spec.learning_rate > 0.0) {
        return Err(ModelError::Spec("batch_size and learning_rate must be positive".into()));
    }
    Ok(())
}

/// Train on `data`; groups whose tag is in `freeze` are never updated.
///
/// Mini-batches walk seeded permutations of the dataset; a batch larger than
/// the dataset uses the whole dataset every step.
pub fn finetune(
    params: &ParameterSet,
    cfg: &ModelConfig,
    data: &Dataset,
    spec: &TrainSpec,
    freeze: &BTreeSet<GroupTag>,
) -> Result<ParameterSet, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    check_spec(spec)?;
    check_layout(params, cfg)?;
    let mut theta = params.clone();
    let mut stepper = Stepper::new(&theta, spec, freeze);
    if spec.iterations == 0 || !stepper.any_trainable() {
        return Ok(theta);
    }
    let mut rng = seeds::rng_for(spec.seed, &["finetune"]);
    let bs = spec.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let per = cfg.pixels();
    let mut pixels = Vec::with_capacity(bs * per);
    let mut labels = Vec::with_capacity(bs);
    for it in 0..spec.iterations {
        pixels.clear();
        labels.clear();
        for _ in 0..bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            pixels.extend_from_slice(data.image(i));
            labels.push(data.labels[i]);
        }
        let (loss, grad) = loss_and_grad(&theta, cfg, &pixels, &labels)?;
        if !loss.is_finite() {
            return Err(ModelError::Diverged { iteration: it, loss });
        }
        stepper.apply(&mut theta, &grad);
        if !theta.all_finite() {
            return Err(ModelError::Diverged { iteration: it, loss: f64::NAN });
        }
    }
    Ok(theta)
}

/// Full-batch training on several tasks at once, each scored through its own
/// head.
///
/// The loss is the sample-weighted mean cross-entropy over the pooled
/// datasets. Every step sees every sample, so the result does not depend on
/// `spec.batch_size` or `spec.seed`. The `head` group is always held frozen.
pub fn finetune_multihead(
    params: &ParameterSet,
    cfg: &ModelConfig,
    tasks: &[(&Dataset, &[f64])],
    spec: &TrainSpec,
    freeze: &BTreeSet<GroupTag>,
) -> Result<ParameterSet, ModelError> {
    let total: usize = tasks.iter().map(|(d, _)| d.len()).sum();
    if total == 0 {
        return Err(ModelError::EmptyDataset);
    }
    check_spec(spec)?;
    check_layout(params, cfg)?;
    let mut frozen = freeze.clone();
    frozen.insert(GroupTag::Head);
    let mut theta = params.clone();
    let mut stepper = Stepper::new(&theta, spec, &frozen);
    if spec.iterations == 0 || !stepper.any_trainable() {
        return Ok(theta);
    }
    for it in 0..spec.iterations {
        let mut loss = 0.0;
        let mut grad = theta.zeros_like();
        for (data, head) in tasks.iter().filter(|(d, _)| !d.is_empty()) {
            let model = with_head(&theta, head)?;
            let (l, g) = loss_and_grad(&model, cfg, &data.images, &data.labels)?;
            let w = data.len() as f64 / total as f64;
            loss += w * l;
            for (acc, part) in grad.groups_mut().iter_mut().zip(g.groups()) {
                for (a, p) in acc.values.iter_mut().zip(&part.values) {
                    *a += w * p;
                }
            }
        }
        if !loss.is_finite() {
            return Err(ModelError::Diverged { iteration: it, loss });
        }
        stepper.apply(&mut theta, &grad);
        if !theta.all_finite() {
            return Err(ModelError::Diverged { iteration: it, loss: f64::NAN });
        }
    }
    Ok(theta)
}
