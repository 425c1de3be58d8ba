//! Procedural image-classification tasks.
//!
//! Each task renders grayscale images from one of eight generator families,
//! with the class controlling one visual factor (orientation, position,
//! scale, ...). Every sample is rendered from its own seeded stream, so a
//! dataset is a pure function of its [`TaskSpec`] and image geometry.
//!
//! Splits are carved from one index range: train first, then few-shot, then
//! test. Labels cycle through the classes inside each split, which keeps
//! every split exactly balanced.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;
use crate::tinyvit::ModelConfig;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task `{task}`: {what} = {count} is not divisible by {classes} classes")]
    Unbalanced { task: String, what: &'static str, count: usize, classes: usize },
    #[error("task `{0}`: sample counts and class count must be positive")]
    Empty(String),
    #[error("task `{task}`: label noise {value} outside [0, 0.5)")]
    LabelNoise { task: String, value: f64 },
    #[error("overlap {0} outside [0, 1]")]
    Overlap(f64),
    #[error("unknown generator kind `{0}`")]
    UnknownKind(String),
    #[error("task `{0}`: image geometry must be positive")]
    Geometry(String),
    #[error("dataset cache: {0}")]
    Io(#[from] io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset cache `{0}` is inconsistent with its manifest")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Stripes,
    Blobs,
    Checker,
    Ring,
    Gradient,
    Corner,
    Diag,
    NoiseTexture,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 8] = [
        GeneratorKind::Stripes,
        GeneratorKind::Blobs,
        GeneratorKind::Checker,
        GeneratorKind::Ring,
        GeneratorKind::Gradient,
        GeneratorKind::Corner,
        GeneratorKind::Diag,
        GeneratorKind::NoiseTexture,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::Stripes => "stripes",
            GeneratorKind::Blobs => "blobs",
            GeneratorKind::Checker => "checker",
            GeneratorKind::Ring => "ring",
            GeneratorKind::Gradient => "gradient",
            GeneratorKind::Corner => "corner",
            GeneratorKind::Diag => "diag",
            GeneratorKind::NoiseTexture => "noise-texture",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GeneratorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TaskError::UnknownKind(s.to_string()))
    }
}

/// Samples borrowed from another task's stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixing {
    pub kind: GeneratorKind,
    pub seed: u64,
    /// Probability that a sample is taken from the other stream.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub generator_kind: GeneratorKind,
    pub num_classes: usize,
    pub samples_train: usize,
    pub samples_test: usize,
    pub samples_fewshot_per_class: usize,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<Mixing>,
}

impl TaskSpec {
    /// Default-sized task for one generator kind.
    pub fn new(kind: GeneratorKind, num_classes: usize, seed: u64) -> Self {
        Self {
            task_id: kind.as_str().to_string(),
            generator_kind: kind,
            num_classes,
            samples_train: 512,
            samples_test: 200,
            samples_fewshot_per_class: 20,
            label_noise: 0.0,
            seed,
            mix: None,
        }
    }

    /// One default task per generator kind, seeds derived from `seed`.
    pub fn default_suite(num_classes: usize, seed: u64) -> Vec<TaskSpec> {
        GeneratorKind::ALL
            .into_iter()
            .map(|k| TaskSpec::new(k, num_classes, seeds::derive(seed, &["task", k.as_str()])))
            .collect()
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let k = self.num_classes;
        if k == 0 || self.samples_train == 0 || self.samples_test == 0 || self.samples_fewshot_per_class == 0 {
            return Err(TaskError::Empty(self.task_id.clone()));
        }
        for (what, count) in [("samples_train", self.samples_train), ("samples_test", self.samples_test)] {
            if count % k != 0 {
                return Err(TaskError::Unbalanced { task: self.task_id.clone(), what, count, classes: k });
            }
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(TaskError::LabelNoise { task: self.task_id.clone(), value: self.label_noise });
        }
        if let Some(m) = &self.mix {
            if !(0.0..=1.0).contains(&m.overlap) {
                return Err(TaskError::Overlap(m.overlap));
            }
        }
        Ok(())
    }

    pub fn fewshot_total(&self) -> usize {
        self.num_classes * self.samples_fewshot_per_class
    }
}

/// Labelled images, `(n, size, size, channels)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    /// Position of each sample in the task's global sample stream.
    pub sample_ids: Vec<usize>,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn empty(image_size: usize, channels: usize, num_classes: usize) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), sample_ids: Vec::new(), image_size, channels, num_classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.image_size, self.channels, self.num_classes);
        for &i in indices {
            out.images.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
            out.sample_ids.push(self.sample_ids[i]);
        }
        out
    }

    /// First `per_class` samples of every class.
    pub fn take_per_class(&self, per_class: usize) -> Dataset {
        let mut counts = vec![0usize; self.num_classes];
        let mut keep = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if counts[y] < per_class {
                counts[y] += 1;
                keep.push(i);
            }
        }
        self.subset(&keep)
    }

    /// Concatenation; sample ids are kept as-is.
    pub fn concat(parts: &[&Dataset]) -> Dataset {
        let first = parts.first().expect("at least one dataset");
        let mut out = Dataset::empty(first.image_size, first.channels, first.num_classes);
        for d in parts {
            out.images.extend_from_slice(&d.images);
            out.labels.extend_from_slice(&d.labels);
            out.sample_ids.extend_from_slice(&d.sample_ids);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub fewshot: Dataset,
    pub test: Dataset,
}

/// Render the train, few-shot and test splits of a task.
pub fn generate_task(spec: &TaskSpec, cfg: &ModelConfig) -> Result<TaskData, TaskError> {
    spec.validate()?;
    if cfg.image_size == 0 || cfg.channels == 0 {
        return Err(TaskError::Geometry(spec.task_id.clone()));
    }
    let n_train = spec.samples_train;
    let n_few = spec.fewshot_total();
    let train = render_split(spec, cfg, 0, n_train, true);
    let fewshot = render_split(spec, cfg, n_train, n_few, true);
    let test = render_split(spec, cfg, n_train + n_few, spec.samples_test, false);
    Ok(TaskData { spec: spec.clone(), train, fewshot, test })
}

fn render_split(spec: &TaskSpec, cfg: &ModelConfig, start: usize, count: usize, noisy_labels: bool) -> Dataset {
    let k = spec.num_classes;
    let mut out = Dataset::empty(cfg.image_size, cfg.channels, k);
    for j in 0..count {
        let id = start + j;
        let label = j % k;
        let mut rng = seeds::rng_for(spec.seed, &["sample", &id.to_string()]);
        let mut class = label;
        if noisy_labels && spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise && k > 1 {
            class = (label + rng.random_range(1..k)) % k;
        }
        let borrowed = spec.mix.as_ref().filter(|m| rng.random::<f64>() < m.overlap);
        let img = match borrowed {
            Some(m) => {
                let mut other = seeds::rng_for(m.seed, &["sample", &id.to_string()]);
                let mut c = label;
                if noisy_labels && spec.label_noise > 0.0 && other.random::<f64>() < spec.label_noise && k > 1 {
                    c = (label + other.random_range(1..k)) % k;
                }
                render(m.kind, c, k, cfg.image_size, &mut other)
            }
            None => render(spec.generator_kind, class, k, cfg.image_size, &mut rng),
        };
        for px in img {
            for _ in 0..cfg.channels {
                out.images.push(px);
            }
        }
        out.labels.push(label);
        out.sample_ids.push(id);
    }
    out
}

/// Move task B towards task A.
///
/// `overlap = 0` leaves B untouched, `overlap = 1` makes B a copy of A under
/// B's id, and in between each B sample is drawn from A's stream with
/// probability `overlap`.
pub fn task_similarity_knob(spec_a: &TaskSpec, spec_b: &TaskSpec, overlap: f64) -> Result<(TaskSpec, TaskSpec), TaskError> {
    if !(0.0..=1.0).contains(&overlap) {
        return Err(TaskError::Overlap(overlap));
    }
    let a = spec_a.clone();
    let mut b = spec_b.clone();
    if overlap == 0.0 {
        b.mix = None;
    } else if overlap == 1.0 {
        b = TaskSpec { task_id: spec_b.task_id.clone(), ..spec_a.clone() };
    } else {
        b.mix = Some(Mixing { kind: spec_a.generator_kind, seed: spec_a.seed, overlap });
    }
    Ok((a, b))
}

const PIXEL_NOISE: f64 = 0.15;

/// Draw one `size x size` image of class `c` out of `k`.
pub fn render(kind: GeneratorKind, c: usize, k: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let frac = c as f64 / k as f64;
    let amp = rng.random_range(0.7..1.3);
    let mut img = vec![0.0; size * size];
    let at = |img: &mut Vec<f64>, f: &dyn Fn(f64, f64) -> f64| {
        for y in 0..size {
            for x in 0..size {
                img[y * size + x] = f(x as f64, y as f64);
            }
        }
    };
    match kind {
        GeneratorKind::Stripes => {
            let theta = PI * frac + rng.random_range(-0.08..0.08);
            let freq = 2.0 * PI / rng.random_range(3.5..5.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (ct, st) = (theta.cos(), theta.sin());
            at(&mut img, &|x, y| (freq * (x * ct + y * st) + phase).sin());
        }
        GeneratorKind::Blobs => {
            let a = 2.0 * PI * frac + rng.random_range(-0.2..0.2);
            let r = s * rng.random_range(0.22..0.3);
            let (cx, cy) = (mid + r * a.cos(), mid + r * a.sin());
            let w = s * rng.random_range(0.09..0.13);
            at(&mut img, &|x, y| 2.0 * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp() - 0.3);
        }
        GeneratorKind::Checker => {
            let cell = (c + 1) as f64;
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            at(&mut img, &|x, y| {
                let i = ((x + ox) / cell).floor() as i64 + ((y + oy) / cell).floor() as i64;
                if i.rem_euclid(2) == 0 { 1.0 } else { -1.0 }
            });
        }
        GeneratorKind::Ring => {
            let span = if k > 1 { c as f64 / (k - 1) as f64 } else { 0.5 };
            let r = s * (0.12 + 0.3 * span) + rng.random_range(-0.4..0.4);
            let (cx, cy) = (mid + rng.random_range(-1.0..1.0), mid + rng.random_range(-1.0..1.0));
            at(&mut img, &|x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r;
                2.0 * (-d * d / 1.2).exp() - 0.3
            });
        }
        GeneratorKind::Gradient => {
            let a = 2.0 * PI * frac + rng.random_range(-0.25..0.25);
            let (ca, sa) = (a.cos(), a.sin());
            at(&mut img, &|x, y| 2.0 * ((x - mid) * ca + (y - mid) * sa) / s);
        }
        GeneratorKind::Corner => {
            let a = 2.0 * PI * frac + PI / 4.0;
            let r = s * 0.3;
            let (cx, cy) = (mid + r * a.cos() + rng.random_range(-1.0..1.0), mid + r * a.sin() + rng.random_range(-1.0..1.0));
            let half = s * rng.random_range(0.12..0.18);
            at(&mut img, &|x, y| if (x - cx).abs() <= half && (y - cy).abs() <= half { 1.5 } else { -0.3 });
        }
        GeneratorKind::Diag => {
            let anti = c % 2 == 1;
            let slots = k.div_ceil(2).max(1);
            let slot = (c / 2) as f64 - (slots as f64 - 1.0) / 2.0;
            let off = slot * s * 0.45 + rng.random_range(-0.7..0.7);
            at(&mut img, &|x, y| {
                let d = if anti { (x + y - 2.0 * mid) / 2f64.sqrt() } else { (x - y) / 2f64.sqrt() } - off;
                2.0 * (-d * d / 1.0).exp() - 0.3
            });
        }
        GeneratorKind::NoiseTexture => {
            let raw: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let radius = (c + c / 3) as i64;
            let n = size as i64;
            let mut smooth = vec![0.0; size * size];
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for dy in -radius..=radius {
                        for dx in -radius..=radius {
                            let (xx, yy) = ((x + dx).rem_euclid(n), (y + dy).rem_euclid(n));
                            acc += raw[(yy * n + xx) as usize];
                        }
                    }
                    smooth[(y * n + x) as usize] = acc;
                }
            }
            let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
            let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64).sqrt();
            for (o, v) in img.iter_mut().zip(&smooth) {
                *o = (v - mean) / sd.max(1e-12);
            }
        }
    }
    for px in img.iter_mut() {
        let noise: f64 = StandardNormal.sample(&mut *rng);
        *px = amp * *px + PIXEL_NOISE * noise;
    }
    img
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheManifest {
    spec: TaskSpec,
    image_size: usize,
    channels: usize,
    splits: Vec<SplitEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitEntry {
    name: String,
    file: String,
    count: usize,
    labels: Vec<usize>,
    sample_ids: Vec<usize>,
}

/// Write `<dir>/<task_id>.json` plus one little-endian `f64` pixel file per split.
pub fn save_task(dir: &Path, data: &TaskData) -> Result<(), TaskError> {
    fs::create_dir_all(dir)?;
    let id = &data.spec.task_id;
    let mut splits = Vec::new();
    for (name, d) in [("train", &data.train), ("fewshot", &data.fewshot), ("test", &data.test)] {
        let file = format!("{id}.{name}.bin");
        let bytes: Vec<u8> = d.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        splits.push(SplitEntry {
            name: name.to_string(),
            file,
            count: d.len(),
            labels: d.labels.clone(),
            sample_ids: d.sample_ids.clone(),
        });
    }
    let manifest = CacheManifest {
        spec: data.spec.clone(),
        image_size: data.train.image_size,
        channels: data.train.channels,
        splits,
    };
    fs::write(dir.join(format!("{id}.json")), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_task(dir: &Path, task_id: &str) -> Result<TaskData, TaskError> {
    let manifest: CacheManifest = serde_json::from_slice(&fs::read(dir.join(format!("{task_id}.json")))?)?;
    let mut parts = Vec::new();
    for e in &manifest.splits {
        let bytes = fs::read(dir.join(&e.file))?;
        let per = manifest.image_size * manifest.image_size * manifest.channels;
        if bytes.len() != 8 * per * e.count || e.labels.len() != e.count || e.sample_ids.len() != e.count {
            return Err(TaskError::Corrupt(e.file.clone()));
        }
        let images = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        parts.push(Dataset {
            images,
            labels: e.labels.clone(),
            sample_ids: e.sample_ids.clone(),
            image_size: manifest.image_size,
            channels: manifest.channels,
            num_classes: manifest.spec.num_classes,
        });
    }
    if parts.len() != 3 {
        return Err(TaskError::Corrupt(task_id.to_string()));
    }
    let test = parts.pop().unwrap();
    let fewshot = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(TaskData { spec: manifest.spec, train, fewshot, test })
}
