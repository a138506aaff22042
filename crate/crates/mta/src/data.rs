//! Synthetic multi-task data suites.
//!
//! Two families cover the attack scenarios:
//!
//! * **shared-label**: M classification tasks over the same label alphabet.
//!   Class-conditional Gaussian clusters are rendered into the input shape;
//!   each task applies its own signed partial permutation of the
//!   coordinates (an orthogonal mixing), so tasks share geometry but differ
//!   in input distribution. Distances between class centers survive the
//!   mixing untouched, which keeps every task linearly separable.
//!
//! * **shared-input**: one set of images serves three dense tasks
//!   (4-class segmentation, nonnegative depth, unit surface normals). Each
//!   scene is two perpendicular lines through a random center splitting the
//!   image into four regions, with a per-region depth plane. All targets
//!   are deterministic functions of the scene parameters; only the rendered
//!   inputs carry noise.
//!
//! Inputs always live in `[0, 1]`. Labels are 1-based.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{MtaError, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    SharedLabel,
    SharedInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    DenseClassification,
    DenseRegression,
    DenseUnitVector,
}

impl TaskKind {
    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification | TaskKind::DenseClassification)
    }
}

/// Generative knobs for the shared-label suite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharedLabelParams {
    /// Largest per-pixel excursion of a class center from the 0.5 gray
    /// level. Controls the ring radius of the center layout, and with it
    /// both the victims' margin and the attack surface.
    pub center_spread: f64,
    /// Standard deviation of the per-pixel Gaussian noise around a center.
    pub noise_std: f64,
    /// Fraction of coordinates the per-task mixing permutes and sign-flips.
    pub mix_fraction: f64,
}

impl Default for SharedLabelParams {
    fn default() -> Self {
        SharedLabelParams { center_spread: 0.1, noise_std: 0.08, mix_fraction: 0.5 }
    }
}

/// Generative knobs for the shared-input suite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharedInputParams {
    /// Standard deviation of the noise added to rendered input channels.
    pub input_noise: f64,
}

impl Default for SharedInputParams {
    fn default() -> Self {
        SharedInputParams { input_noise: 0.02 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SuiteParams {
    SharedLabel(SharedLabelParams),
    SharedInput(SharedInputParams),
}

/// One task's identity within a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based task number.
    pub id: usize,
    pub kind: TaskKind,
    /// Number of classes; 0 for regression-style tasks.
    pub classes: usize,
    /// Input shape as (channels, height, width).
    pub input_shape: (usize, usize, usize),
    pub params: SuiteParams,
}

/// A full multi-task dataset with train/test splits.
#[derive(Debug, Clone)]
pub struct MultiTaskDataset {
    pub suite: SuiteKind,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
    train_idx: Vec<Vec<usize>>,
    test_idx: Vec<Vec<usize>>,
}

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

impl MultiTaskDataset {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_samples(&self, task: usize) -> usize {
        self.inputs[task].shape()[0]
    }

    /// Full input tensor `[n, C, H, W]` for a task. In the shared-input
    /// suite every task returns the same storage.
    pub fn inputs(&self, task: usize) -> &Tensor {
        &self.inputs[task]
    }

    pub fn targets(&self, task: usize) -> &Tensor {
        &self.targets[task]
    }

    pub fn train_indices(&self, task: usize) -> &[usize] {
        &self.train_idx[task]
    }

    pub fn test_indices(&self, task: usize) -> &[usize] {
        &self.test_idx[task]
    }

    pub fn input_shape(&self, task: usize) -> (usize, usize, usize) {
        self.tasks[task].input_shape
    }

    /// Random training batch: `size` indices drawn without replacement from
    /// the train split (with replacement only if the split is smaller).
    pub fn train_batch(&self, task: usize, size: usize, rng: &mut DetRng) -> Result<(Tensor, Tensor)> {
        let split = &self.train_idx[task];
        let picks: Vec<usize> = if split.len() >= size {
            rng.sample_indices(split.len(), size).into_iter().map(|i| split[i]).collect()
        } else {
            (0..size).map(|_| split[rng.index(split.len())]).collect()
        };
        Ok((self.inputs[task].gather_rows(&picks)?, self.targets[task].gather_rows(&picks)?))
    }

    /// All test samples of a task, in split order.
    pub fn test_set(&self, task: usize) -> Result<(Tensor, Tensor)> {
        let idx = &self.test_idx[task];
        Ok((self.inputs[task].gather_rows(idx)?, self.targets[task].gather_rows(idx)?))
    }

    /// Re-split deterministically. Classification tasks are stratified per
    /// class (per-class test counts stay within one sample of exact
    /// proportionality); dense tasks share a single split because their
    /// inputs are the same tensors.
    pub fn split_train_test(mut self, test_fraction: f64) -> Result<MultiTaskDataset> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(MtaError::Config(format!(
                "test_fraction {test_fraction} must be strictly between 0 and 1"
            )));
        }
        let mut rng = DetRng::from_seed(self.seed).derive("split");
        match self.suite {
            SuiteKind::SharedLabel => {
                for t in 0..self.num_tasks() {
                    let labels = self.targets[t].data();
                    let classes = self.tasks[t].classes;
                    let (train, test) =
                        stratified_split(labels, classes, test_fraction, &mut rng.derive_idx("task", t as u64))?;
                    self.train_idx[t] = train;
                    self.test_idx[t] = test;
                }
            }
            SuiteKind::SharedInput => {
                let n = self.n_samples(0);
                let (train, test) = plain_split(n, test_fraction, &mut rng);
                for t in 0..self.num_tasks() {
                    self.train_idx[t] = train.clone();
                    self.test_idx[t] = test.clone();
                }
            }
        }
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::json!({
            "format": "dataset",
            "suite": self.suite,
            "seed": self.seed,
            "tasks": self.tasks,
        });
        let mut a = Archive::new(manifest.to_string());
        match self.suite {
            SuiteKind::SharedLabel => {
                for t in 0..self.num_tasks() {
                    a.insert(format!("task{}/x", t + 1), &self.inputs[t]);
                }
            }
            SuiteKind::SharedInput => {
                a.insert("shared/x", &self.inputs[0]);
            }
        }
        for t in 0..self.num_tasks() {
            a.insert(format!("task{}/y", t + 1), &self.targets[t]);
            a.insert(format!("task{}/train", t + 1), &indices_tensor(&self.train_idx[t]));
            a.insert(format!("task{}/test", t + 1), &indices_tensor(&self.test_idx[t]));
        }
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<MultiTaskDataset> {
        let origin = path.display().to_string();
        let a = Archive::load(path)?;
        let manifest: serde_json::Value = serde_json::from_str(&a.manifest)
            .map_err(|e| MtaError::format(&origin, format!("manifest is not valid JSON: {e}")))?;
        if manifest["format"] != "dataset" {
            return Err(MtaError::format(&origin, "manifest format is not \"dataset\""));
        }
        let suite: SuiteKind = serde_json::from_value(manifest["suite"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad suite: {e}")))?;
        let seed = manifest["seed"]
            .as_u64()
            .ok_or_else(|| MtaError::format(&origin, "manifest is missing the seed"))?;
        let tasks: Vec<TaskSpec> = serde_json::from_value(manifest["tasks"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad task list: {e}")))?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        let shared_x = match suite {
            SuiteKind::SharedInput => Some(a.require("shared/x", &origin)?),
            SuiteKind::SharedLabel => None,
        };
        for t in 0..tasks.len() {
            let x = match &shared_x {
                Some(x) => x.clone(),
                None => a.require(&format!("task{}/x", t + 1), &origin)?,
            };
            inputs.push(x);
            targets.push(a.require(&format!("task{}/y", t + 1), &origin)?);
            train_idx.push(tensor_indices(&a.require(&format!("task{}/train", t + 1), &origin)?));
            test_idx.push(tensor_indices(&a.require(&format!("task{}/test", t + 1), &origin)?));
        }
        Ok(MultiTaskDataset { suite, seed, tasks, inputs, targets, train_idx, test_idx })
    }
}

fn indices_tensor(idx: &[usize]) -> Tensor {
    Tensor::from_vec(idx.iter().map(|&i| i as f64).collect(), &[idx.len()]).expect("indices tensor")
}

fn tensor_indices(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

fn plain_split(n: usize, test_fraction: f64, rng: &mut DetRng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let k = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut test: Vec<usize> = order[..k].to_vec();
    let mut train: Vec<usize> = order[k..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

fn stratified_split(
    labels: &[f64],
    classes: usize,
    test_fraction: f64,
    rng: &mut DetRng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        let c = l as usize;
        if c < 1 || c > classes {
            return Err(MtaError::Config(format!(
                "label {l} at sample {i} outside 1..={classes}"
            )));
        }
        per_class[c - 1].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for bucket in &mut per_class {
        rng.shuffle(bucket);
        let k = ((test_fraction * bucket.len() as f64).round() as usize).clamp(1, bucket.len().saturating_sub(1).max(1));
        test.extend_from_slice(&bucket[..k.min(bucket.len())]);
        train.extend_from_slice(&bucket[k.min(bucket.len())..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// shared-label suite
// ---------------------------------------------------------------------------

/// M classification tasks over the same `classes`-way label alphabet.
/// Labels come out balanced (class counts differ by at most one) and the
/// result carries a default 80/20 stratified split.
pub fn make_shared_label_suite(
    seed: u64,
    num_tasks: usize,
    classes: usize,
    n_per_task: usize,
    input_shape: (usize, usize, usize),
) -> Result<MultiTaskDataset> {
    make_shared_label_suite_with(seed, num_tasks, classes, n_per_task, input_shape, SharedLabelParams::default())
}

pub fn make_shared_label_suite_with(
    seed: u64,
    num_tasks: usize,
    classes: usize,
    n_per_task: usize,
    input_shape: (usize, usize, usize),
    params: SharedLabelParams,
) -> Result<MultiTaskDataset> {
    if num_tasks == 0 || classes < 2 || n_per_task < 2 * classes {
        return Err(MtaError::Config(format!(
            "shared-label suite needs tasks >= 1, classes >= 2, n >= 2*classes (got {num_tasks}, {classes}, {n_per_task})"
        )));
    }
    let (ci, h, w) = input_shape;
    let d = ci * h * w;
    let root = DetRng::from_seed(seed);

    // Base class centers, shared geometry for every task. The centers sit
    // on a ring inside a plane spanned by two orthogonal full-contrast sign
    // patterns. Concentrating the class signal in a two-dimensional
    // subspace keeps the victims' job easy (large margins along the ring)
    // while leaving them exposed to small shared shifts inside that plane,
    // which is the regime perturbation training needs. The patterns are
    // constant over small pixel blocks so that strided conv stacks, which
    // see the image at exactly those scales, can both read and write them.
    let bedge = [4usize, 2, 1].into_iter().find(|b| h % b == 0 && w % b == 0).unwrap();
    let (bh, bw) = (h / bedge, w / bedge);
    let nb = ci * bh * bw;
    let mut centers_rng = root.derive("centers");
    let p1: Vec<f64> =
        (0..nb).map(|_| if centers_rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
    let mut flip: Vec<usize> = (0..nb).collect();
    centers_rng.shuffle(&mut flip);
    let mut p2 = p1.clone();
    for &i in flip.iter().take(nb / 2) {
        p2[i] = -p2[i];
    }
    // `spread / sqrt(2)` bounds each pixel of a center to 0.5 +- spread.
    let amp = params.center_spread / std::f64::consts::SQRT_2;
    let block_centers: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            let (s, c) = theta.sin_cos();
            (0..nb).map(|i| 0.5 + amp * (c * p1[i] + s * p2[i])).collect()
        })
        .collect();
    let render = |bc: &[f64]| -> Vec<f64> {
        let mut px = Vec::with_capacity(d);
        for ch in 0..ci {
            for y in 0..h {
                for x in 0..w {
                    px.push(bc[(ch * bh + y / bedge) * bw + x / bedge]);
                }
            }
        }
        px
    };

    let mut tasks = Vec::new();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in 0..num_tasks {
        let mixed_blocks =
            mix_centers(&block_centers, nb, params.mix_fraction, &mut root.derive_idx("mix", t as u64));
        let mixed: Vec<Vec<f64>> = mixed_blocks.iter().map(|bc| render(bc)).collect();

        // Balanced label sequence, then shuffled sample order.
        let mut labels: Vec<usize> = (0..n_per_task).map(|i| (i % classes) + 1).collect();
        let mut order_rng = root.derive_idx("order", t as u64);
        order_rng.shuffle(&mut labels);

        let mut sample_rng = root.derive_idx("samples", t as u64);
        let mut x = Vec::with_capacity(n_per_task * d);
        for &label in &labels {
            let center = &mixed[label - 1];
            for &cv in center.iter() {
                x.push((cv + params.noise_std * sample_rng.normal()).clamp(0.0, 1.0));
            }
        }
        inputs.push(Tensor::from_vec(x, &[n_per_task, ci, h, w])?);
        targets.push(Tensor::from_vec(labels.iter().map(|&l| l as f64).collect(), &[n_per_task])?);
        tasks.push(TaskSpec {
            id: t + 1,
            kind: TaskKind::Classification,
            classes,
            input_shape,
            params: SuiteParams::SharedLabel(params),
        });
    }

    let n_tasks = tasks.len();
    MultiTaskDataset {
        suite: SuiteKind::SharedLabel,
        seed,
        tasks,
        inputs,
        targets,
        train_idx: vec![Vec::new(); n_tasks],
        test_idx: vec![Vec::new(); n_tasks],
    }
    .split_train_test(DEFAULT_TEST_FRACTION)
}

/// Signed partial permutation of the center coordinates: a random fraction
/// of coordinate pairs is swapped and mirrored around 0.5. Orthogonal on the
/// centered coordinates, so pairwise center distances are preserved exactly.
fn mix_centers(centers: &[Vec<f64>], d: usize, fraction: f64, rng: &mut DetRng) -> Vec<Vec<f64>> {
    let mut perm: Vec<usize> = (0..d).collect();
    let swaps = ((d as f64 * fraction) / 2.0).round() as usize;
    for _ in 0..swaps {
        let i = rng.index(d);
        let j = rng.index(d);
        perm.swap(i, j);
    }
    let signs: Vec<f64> = (0..d)
        .map(|_| if rng.uniform() < fraction { -1.0 } else { 1.0 })
        .collect();
    centers
        .iter()
        .map(|c| {
            (0..d)
                .map(|i| 0.5 + signs[i] * (c[perm[i]] - 0.5))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// shared-input suite
// ---------------------------------------------------------------------------

/// Three dense tasks over one set of `resolution` x `resolution` RGB-like
/// images: 4-class segmentation, positive depth, unit normals. All three
/// task entries share the same input tensor storage.
pub fn make_shared_input_suite(seed: u64, n: usize, resolution: usize) -> Result<MultiTaskDataset> {
    make_shared_input_suite_with(seed, n, resolution, SharedInputParams::default())
}

pub fn make_shared_input_suite_with(
    seed: u64,
    n: usize,
    resolution: usize,
    params: SharedInputParams,
) -> Result<MultiTaskDataset> {
    if n < 5 || resolution < 8 {
        return Err(MtaError::Config(format!(
            "shared-input suite needs n >= 5 and resolution >= 8 (got {n}, {resolution})"
        )));
    }
    let r = resolution;
    let root = DetRng::from_seed(seed);
    let mut scene_rng = root.derive("scenes");
    let mut noise_rng = root.derive("input-noise");

    let mut x = Vec::with_capacity(n * 3 * r * r);
    let mut seg = Vec::with_capacity(n * r * r);
    let mut depth = Vec::with_capacity(n * r * r);
    let mut normal = Vec::with_capacity(n * 3 * r * r);

    const DEPTH_MIN: f64 = 0.1;
    const DEPTH_MAX: f64 = 2.2;

    for _ in 0..n {
        // Scene: two perpendicular lines through (cx, cy) at angle theta
        // carve four regions; each region has a depth plane and an albedo.
        let cx = scene_rng.range(0.3, 0.7) * (r - 1) as f64;
        let cy = scene_rng.range(0.3, 0.7) * (r - 1) as f64;
        let theta = scene_rng.range(0.0, std::f64::consts::FRAC_PI_2);
        let (sin_t, cos_t) = theta.sin_cos();
        let mut plane_a = [0.0; 4];
        let mut plane_b = [0.0; 4];
        let mut plane_c = [0.0; 4];
        for k in 0..4 {
            plane_a[k] = scene_rng.range(0.8, 1.5);
            plane_b[k] = scene_rng.range(-0.35, 0.35);
            plane_c[k] = scene_rng.range(-0.35, 0.35);
        }
        let mut albedo = [0.2, 0.4, 0.6, 0.8];
        scene_rng.shuffle(&mut albedo);

        // Per-region unit normal of the plane z = a + b*u + c*v.
        let mut nx = [0.0; 4];
        let mut ny = [0.0; 4];
        let mut nz = [0.0; 4];
        for k in 0..4 {
            let len = (plane_b[k] * plane_b[k] + plane_c[k] * plane_c[k] + 1.0).sqrt();
            nx[k] = -plane_b[k] / len;
            ny[k] = -plane_c[k] / len;
            nz[k] = 1.0 / len;
        }

        let base = x.len();
        x.resize(base + 3 * r * r, 0.0);
        let nbase = normal.len();
        normal.resize(nbase + 3 * r * r, 0.0);
        for py in 0..r {
            for px in 0..r {
                let dx = px as f64 - cx;
                let dy = py as f64 - cy;
                let u = cos_t * dx + sin_t * dy;
                let v = -sin_t * dx + cos_t * dy;
                let k = (u >= 0.0) as usize + 2 * ((v >= 0.0) as usize);
                let un = px as f64 / (r - 1) as f64;
                let vn = py as f64 / (r - 1) as f64;
                let d = plane_a[k] + plane_b[k] * un + plane_c[k] * vn;
                let p = py * r + px;

                seg.push((k + 1) as f64);
                depth.push(d);
                normal[nbase + p] = nx[k];
                normal[nbase + r * r + p] = ny[k];
                normal[nbase + 2 * r * r + p] = nz[k];

                let depth_vis = (d - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN);
                let normal_vis = 0.5 + 0.5 * (nx[k] + ny[k]);
                x[base + p] = albedo[k];
                x[base + r * r + p] = depth_vis;
                x[base + 2 * r * r + p] = normal_vis;
            }
        }
        for slot in &mut x[base..base + 3 * r * r] {
            *slot = (*slot + params.input_noise * noise_rng.normal()).clamp(0.0, 1.0);
        }
    }

    let input = Tensor::from_vec(x, &[n, 3, r, r])?;
    let shape = (3, r, r);
    let tasks = vec![
        TaskSpec {
            id: 1,
            kind: TaskKind::DenseClassification,
            classes: 4,
            input_shape: shape,
            params: SuiteParams::SharedInput(params),
        },
        TaskSpec {
            id: 2,
            kind: TaskKind::DenseRegression,
            classes: 0,
            input_shape: shape,
            params: SuiteParams::SharedInput(params),
        },
        TaskSpec {
            id: 3,
            kind: TaskKind::DenseUnitVector,
            classes: 0,
            input_shape: shape,
            params: SuiteParams::SharedInput(params),
        },
    ];
    MultiTaskDataset {
        suite: SuiteKind::SharedInput,
        seed,
        tasks,
        inputs: vec![input.clone(), input.clone(), input],
        targets: vec![
            Tensor::from_vec(seg, &[n, r, r])?,
            Tensor::from_vec(depth, &[n, 1, r, r])?,
            Tensor::from_vec(normal, &[n, 3, r, r])?,
        ],
        train_idx: vec![Vec::new(); 3],
        test_idx: vec![Vec::new(); 3],
    }
    .split_train_test(DEFAULT_TEST_FRACTION)
}

// ---------------------------------------------------------------------------
// target encodings
// ---------------------------------------------------------------------------

/// One-hot encode 1-based labels `[B] -> [B, classes]`.
pub fn onehot(labels: &Tensor, classes: usize) -> Result<Tensor> {
    let b = labels.numel();
    let mut data = vec![0.0; b * classes];
    for (i, &l) in labels.data().iter().enumerate() {
        let c = l as usize;
        if c < 1 || c > classes {
            return Err(MtaError::Config(format!("label {l} outside 1..={classes}")));
        }
        data[i * classes + (c - 1)] = 1.0;
    }
    Tensor::from_vec(data, &[b, classes])
}

/// One-hot encode a 1-based label map `[B, H, W] -> [B, classes, H, W]`.
pub fn onehot_dense(labels: &Tensor, classes: usize) -> Result<Tensor> {
    if labels.rank() != 3 {
        return Err(MtaError::shape(
            "onehot_dense",
            format!("expected [B,H,W], got {:?}", labels.shape()),
        ));
    }
    let (b, h, w) = (labels.shape()[0], labels.shape()[1], labels.shape()[2]);
    let plane = h * w;
    let mut data = vec![0.0; b * classes * plane];
    for i in 0..b {
        for p in 0..plane {
            let l = labels.data()[i * plane + p];
            let c = l as usize;
            if c < 1 || c > classes {
                return Err(MtaError::Config(format!("label {l} outside 1..={classes}")));
            }
            data[(i * classes + (c - 1)) * plane + p] = 1.0;
        }
    }
    Tensor::from_vec(data, &[b, classes, h, w])
}
