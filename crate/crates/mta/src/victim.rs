//! Victim models: small convolutional networks the attacks are aimed at.
//!
//! Two layouts exist. [`VictimModel`] owns a full network for one task, so a
//! family of them shares nothing. [`SharedEncoderFamily`] holds one encoder
//! plus per-task heads and is trained jointly; it is the transfer target for
//! perturbations built against an independent family.
//!
//! Attacks require gradients of the victim's output with respect to its
//! *input* while the weights stay fixed, so a trained model is frozen by
//! detaching its parameters. The graph still flows through them, but no
//! gradient is ever accumulated into a frozen weight.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::data::{MultiTaskDataset, TaskKind};
use crate::error::{MtaError, Result};
use crate::loss::{encode_target, task_loss};
use crate::nn::{Activation, Feat, LayerSpec, Stack};
use crate::rng::DetRng;
use crate::tensor::{backward, AdamConfig, AdamState, ParamSet, Tensor};

/// Minimum clean test accuracy before a model is considered attackable.
pub const COMPETENCE_THRESHOLD: f64 = 0.85;

/// Uniform view of anything that maps inputs to task predictions:
/// probabilities for classification kinds, a depth map, or unit normals.
pub trait Predictor: Sync {
    fn kind(&self) -> TaskKind;
    fn classes(&self) -> usize;
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

/// Turn a raw head output into the task's prediction.
fn finalize(kind: TaskKind, raw: &Tensor) -> Result<Tensor> {
    match kind {
        TaskKind::Classification => raw.softmax(),
        TaskKind::DenseClassification => raw.softmax_axis(1),
        TaskKind::DenseRegression => Ok(raw.clone()),
        TaskKind::DenseUnitVector => normalize_channels(raw),
    }
}

/// Scale each pixel's channel vector to unit length.
fn normalize_channels(x: &Tensor) -> Result<Tensor> {
    let sumsq = x.mul(x)?.sum_axis(1, true)?;
    x.div(&sumsq.clamp_min(1e-12).sqrt()?)
}

fn expected_out(kind: TaskKind, classes: usize, input_shape: (usize, usize, usize)) -> Feat {
    let (_, h, w) = input_shape;
    match kind {
        TaskKind::Classification => Feat::Flat(classes),
        TaskKind::DenseClassification => Feat::Chw(classes, h, w),
        TaskKind::DenseRegression => Feat::Chw(1, h, w),
        TaskKind::DenseUnitVector => Feat::Chw(3, h, w),
    }
}

/// Stock classifier: two stride-2 convs and a linear readout.
pub fn default_classifier_arch(classes: usize) -> Stack {
    Stack::new(vec![
        LayerSpec::Conv { out_ch: 16, k: 3, stride: 2, pad: 1, act: Activation::Relu },
        LayerSpec::Conv { out_ch: 32, k: 3, stride: 2, pad: 1, act: Activation::Relu },
        LayerSpec::Flatten,
        LayerSpec::Dense { out_dim: classes, act: Activation::None },
    ])
}

/// Stock dense net: downsample once, refine, upsample back to input
/// resolution with a task-sized output head.
pub fn default_dense_arch(kind: TaskKind, classes: usize) -> Result<Stack> {
    let out_ch = match kind {
        TaskKind::DenseClassification => classes,
        TaskKind::DenseRegression => 1,
        TaskKind::DenseUnitVector => 3,
        TaskKind::Classification => {
            return Err(MtaError::Config("classification is not a dense task".into()))
        }
    };
    Ok(Stack::new(vec![
        LayerSpec::Conv { out_ch: 8, k: 3, stride: 1, pad: 1, act: Activation::Relu },
        LayerSpec::Conv { out_ch: 16, k: 3, stride: 2, pad: 1, act: Activation::Relu },
        LayerSpec::Residual { k: 3 },
        LayerSpec::Upsample2x,
        LayerSpec::Conv { out_ch, k: 3, stride: 1, pad: 1, act: Activation::None },
    ]))
}

pub fn default_victim_arch(kind: TaskKind, classes: usize) -> Result<Stack> {
    match kind {
        TaskKind::Classification => Ok(default_classifier_arch(classes)),
        _ => default_dense_arch(kind, classes),
    }
}

/// A standalone single-task network.
#[derive(Debug, Clone)]
pub struct VictimModel {
    pub kind: TaskKind,
    pub classes: usize,
    pub input_shape: (usize, usize, usize),
    pub arch: Stack,
    pub params: ParamSet,
}

impl VictimModel {
    pub fn new(
        kind: TaskKind,
        classes: usize,
        input_shape: (usize, usize, usize),
        arch: Stack,
        seed: u64,
    ) -> Result<VictimModel> {
        let (c, h, w) = input_shape;
        let mut params = ParamSet::new();
        let mut rng = DetRng::from_seed(seed).derive("victim-init");
        let out = arch.init_params(Feat::Chw(c, h, w), "", &mut params, &mut rng)?;
        let want = expected_out(kind, classes, input_shape);
        if out != want {
            return Err(MtaError::Config(format!(
                "architecture produces {out:?} but a {kind:?} task with {classes} classes needs {want:?}"
            )));
        }
        Ok(VictimModel { kind, classes, input_shape, arch, params })
    }

    /// Raw head output (pre-softmax logits for classification kinds).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.arch.forward(&self.params, "", x)
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn param_count(&self) -> usize {
        self.params.total_params()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::json!({
            "format": "victim",
            "kind": self.kind,
            "classes": self.classes,
            "input_shape": [self.input_shape.0, self.input_shape.1, self.input_shape.2],
            "arch": self.arch,
        });
        let mut a = Archive::new(manifest.to_string());
        for (name, t) in self.params.iter() {
            a.insert(name.clone(), t);
        }
        a.save(path)
    }

    /// Load a checkpoint. The result comes back frozen; attacks can use it
    /// directly, retraining needs a fresh model.
    pub fn load(path: &Path) -> Result<VictimModel> {
        let origin = path.display().to_string();
        let a = Archive::load(path)?;
        let m: serde_json::Value = serde_json::from_str(&a.manifest)
            .map_err(|e| MtaError::format(&origin, format!("manifest is not valid JSON: {e}")))?;
        if m["format"] != "victim" {
            return Err(MtaError::format(&origin, "manifest format is not \"victim\""));
        }
        let kind: TaskKind = serde_json::from_value(m["kind"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad kind: {e}")))?;
        let classes = m["classes"].as_u64().unwrap_or(0) as usize;
        let shape = m["input_shape"]
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| MtaError::format(&origin, "input_shape must be a 3-element array"))?;
        let input_shape = (
            shape[0].as_u64().unwrap_or(0) as usize,
            shape[1].as_u64().unwrap_or(0) as usize,
            shape[2].as_u64().unwrap_or(0) as usize,
        );
        let arch: Stack = serde_json::from_value(m["arch"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad arch: {e}")))?;
        let mut params = ParamSet::new();
        for name in a.names() {
            params.insert(name.clone(), a.require(name, &origin)?);
        }
        Ok(VictimModel { kind, classes, input_shape, arch, params })
    }
}

impl Predictor for VictimModel {
    fn kind(&self) -> TaskKind {
        self.kind
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        finalize(self.kind, &self.forward(x)?)
    }
}

/// One encoder feeding a small head per task, trained jointly with uniform
/// task weights.
#[derive(Debug, Clone)]
pub struct SharedEncoderFamily {
    pub input_shape: (usize, usize, usize),
    pub encoder: Stack,
    pub heads: Vec<Stack>,
    pub kinds: Vec<TaskKind>,
    pub classes: Vec<usize>,
    pub params: ParamSet,
}

impl SharedEncoderFamily {
    pub fn new(
        input_shape: (usize, usize, usize),
        encoder: Stack,
        heads: Vec<Stack>,
        kinds: Vec<TaskKind>,
        classes: Vec<usize>,
        seed: u64,
    ) -> Result<SharedEncoderFamily> {
        if heads.len() != kinds.len() || kinds.len() != classes.len() || heads.is_empty() {
            return Err(MtaError::Config("family needs one head, kind and class count per task".into()));
        }
        let (c, h, w) = input_shape;
        let mut params = ParamSet::new();
        let mut rng = DetRng::from_seed(seed).derive("family-init");
        let feat = encoder.init_params(Feat::Chw(c, h, w), "enc/", &mut params, &mut rng)?;
        for (t, head) in heads.iter().enumerate() {
            let out = head.init_params(feat, &format!("head{}/", t + 1), &mut params, &mut rng)?;
            let want = expected_out(kinds[t], classes[t], input_shape);
            if out != want {
                return Err(MtaError::Config(format!(
                    "head {} produces {out:?} but needs {want:?}",
                    t + 1
                )));
            }
        }
        Ok(SharedEncoderFamily { input_shape, encoder, heads, kinds, classes, params })
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn predict(&self, task: usize, x: &Tensor) -> Result<Tensor> {
        let feat = self.encoder.forward(&self.params, "enc/", x)?;
        let raw = self.heads[task].forward(&self.params, &format!("head{}/", task + 1), &feat)?;
        finalize(self.kinds[task], &raw)
    }

    pub fn task(&self, task: usize) -> FamilyTask<'_> {
        FamilyTask { family: self, task }
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::json!({
            "format": "victim_family",
            "input_shape": [self.input_shape.0, self.input_shape.1, self.input_shape.2],
            "encoder": self.encoder,
            "heads": self.heads,
            "kinds": self.kinds,
            "classes": self.classes,
        });
        let mut a = Archive::new(manifest.to_string());
        for (name, t) in self.params.iter() {
            a.insert(name.clone(), t);
        }
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<SharedEncoderFamily> {
        let origin = path.display().to_string();
        let a = Archive::load(path)?;
        let m: serde_json::Value = serde_json::from_str(&a.manifest)
            .map_err(|e| MtaError::format(&origin, format!("manifest is not valid JSON: {e}")))?;
        if m["format"] != "victim_family" {
            return Err(MtaError::format(&origin, "manifest format is not \"victim_family\""));
        }
        let shape = m["input_shape"]
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| MtaError::format(&origin, "input_shape must be a 3-element array"))?;
        let input_shape = (
            shape[0].as_u64().unwrap_or(0) as usize,
            shape[1].as_u64().unwrap_or(0) as usize,
            shape[2].as_u64().unwrap_or(0) as usize,
        );
        let encoder: Stack = serde_json::from_value(m["encoder"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad encoder: {e}")))?;
        let heads: Vec<Stack> = serde_json::from_value(m["heads"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad heads: {e}")))?;
        let kinds: Vec<TaskKind> = serde_json::from_value(m["kinds"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad kinds: {e}")))?;
        let classes: Vec<usize> = serde_json::from_value(m["classes"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad classes: {e}")))?;
        let mut params = ParamSet::new();
        for name in a.names() {
            params.insert(name.clone(), a.require(name, &origin)?);
        }
        Ok(SharedEncoderFamily { input_shape, encoder, heads, kinds, classes, params })
    }
}

/// Borrowed single-task view of a [`SharedEncoderFamily`].
#[derive(Clone, Copy)]
pub struct FamilyTask<'a> {
    pub family: &'a SharedEncoderFamily,
    pub task: usize,
}

impl Predictor for FamilyTask<'_> {
    fn kind(&self) -> TaskKind {
        self.family.kinds[self.task]
    }

    fn classes(&self) -> usize {
        self.family.classes[self.task]
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.family.predict(self.task, x)
    }
}

/// Victim training hyperparameters. One optimizer step per epoch on a fresh
/// batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { epochs: 400, batch: 32, lr: 1e-3 }
    }
}

fn check_finite(loss: f64, params: &ParamSet, epoch: usize) -> Result<()> {
    if loss.is_finite() && params.iter().all(|(_, t)| t.is_finite()) {
        Ok(())
    } else {
        Err(MtaError::Divergence { epoch })
    }
}

/// Train one victim on one task of the dataset. Returns the model and the
/// per-epoch loss history.
pub fn train_victim(
    ds: &MultiTaskDataset,
    task: usize,
    arch: Stack,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(VictimModel, Vec<f64>)> {
    let spec = &ds.tasks[task];
    let mut model = VictimModel::new(spec.kind, spec.classes, spec.input_shape, arch, seed)?;
    let mut rng = DetRng::from_seed(seed).derive("victim-batches");
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (x, y) = ds.train_batch(task, cfg.batch, &mut rng)?;
        let target = encode_target(spec.kind, spec.classes, &y)?;
        let loss = task_loss(spec.kind, &model.predict(&x)?, &target)?;
        let val = loss.item();
        check_finite(val, &model.params, epoch)?;
        history.push(val);
        model.params.zero_grads();
        backward(&loss)?;
        adam.step(&mut model.params)?;
    }
    Ok((model, history))
}

/// Train one independent victim per task, each with the stock architecture
/// and its own derived seed.
pub fn train_independent_family(
    ds: &MultiTaskDataset,
    cfg: &FitConfig,
    seed: u64,
) -> Result<Vec<VictimModel>> {
    let mut models = Vec::with_capacity(ds.num_tasks());
    for t in 0..ds.num_tasks() {
        let spec = &ds.tasks[t];
        let arch = default_victim_arch(spec.kind, spec.classes)?;
        let task_seed = DetRng::from_seed(seed).derive_idx("victim", t as u64).next_u64();
        let (model, _) = train_victim(ds, t, arch, cfg, task_seed)?;
        models.push(model);
    }
    Ok(models)
}

/// Train a shared-encoder family jointly: each epoch takes one batch per
/// task and steps on the uniform average of the task losses.
pub fn train_shared_family(
    ds: &MultiTaskDataset,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(SharedEncoderFamily, Vec<f64>)> {
    let kinds: Vec<TaskKind> = ds.tasks.iter().map(|t| t.kind).collect();
    let classes: Vec<usize> = ds.tasks.iter().map(|t| t.classes).collect();
    let encoder = Stack::new(vec![
        LayerSpec::Conv { out_ch: 8, k: 3, stride: 2, pad: 1, act: Activation::Relu },
        LayerSpec::Conv { out_ch: 16, k: 3, stride: 2, pad: 1, act: Activation::Relu },
    ]);
    let heads: Vec<Stack> = ds
        .tasks
        .iter()
        .map(|t| {
            if t.kind != TaskKind::Classification {
                return Err(MtaError::Config(
                    "the stock shared-encoder family only covers classification tasks".into(),
                ));
            }
            Ok(Stack::new(vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: t.classes, act: Activation::None },
            ]))
        })
        .collect::<Result<_>>()?;
    let mut family =
        SharedEncoderFamily::new(ds.tasks[0].input_shape, encoder, heads, kinds, classes, seed)?;
    let mut rng = DetRng::from_seed(seed).derive("family-batches");
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &family.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let m = ds.num_tasks() as f64;
    for epoch in 0..cfg.epochs {
        let mut total: Option<Tensor> = None;
        for t in 0..ds.num_tasks() {
            let (x, y) = ds.train_batch(t, cfg.batch, &mut rng)?;
            let target = encode_target(family.kinds[t], family.classes[t], &y)?;
            let lt = task_loss(family.kinds[t], &family.predict(t, &x)?, &target)?.scale(1.0 / m);
            total = Some(match total {
                Some(acc) => acc.add(&lt)?,
                None => lt,
            });
        }
        let loss = total.expect("family has at least one task");
        let val = loss.item();
        check_finite(val, &family.params, epoch)?;
        history.push(val);
        family.params.zero_grads();
        backward(&loss)?;
        adam.step(&mut family.params)?;
    }
    Ok((family, history))
}

/// Gate used by attack training: refuse victims that cannot even solve the
/// clean task.
pub fn ensure_competent(accuracy: f64, what: &str) -> Result<()> {
    if accuracy >= COMPETENCE_THRESHOLD {
        Ok(())
    } else {
        Err(MtaError::IncompetentVictim(format!(
            "{what}: clean accuracy {accuracy:.3} below the {COMPETENCE_THRESHOLD} floor"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_shared_input_suite, make_shared_label_suite};

    fn argmax_accuracy(probs: &Tensor, labels: &Tensor) -> f64 {
        let pred = probs.argmax_axis(probs.rank() - 1);
        let hits = pred
            .iter()
            .zip(labels.data())
            .filter(|(p, l)| (*p + 1) as f64 == **l)
            .count();
        hits as f64 / pred.len() as f64
    }

    #[test]
    fn classifier_trains_to_high_accuracy() {
        let ds = make_shared_label_suite(3, 1, 3, 120, (1, 8, 8)).unwrap();
        let arch = default_classifier_arch(3);
        let cfg = FitConfig { epochs: 200, batch: 24, lr: 1e-3 };
        let (model, history) = train_victim(&ds, 0, arch, &cfg, 42).unwrap();
        assert!(history[0] > *history.last().unwrap());
        let (x, y) = ds.test_set(0).unwrap();
        let acc = argmax_accuracy(&model.predict(&x).unwrap(), &y);
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    #[test]
    fn prediction_shapes_and_invariants_per_kind() {
        let ds = make_shared_input_suite(2, 8, 16).unwrap();
        for (t, kind) in [
            TaskKind::DenseClassification,
            TaskKind::DenseRegression,
            TaskKind::DenseUnitVector,
        ]
        .into_iter()
        .enumerate()
        {
            let spec = &ds.tasks[t];
            let arch = default_dense_arch(kind, spec.classes).unwrap();
            let model = VictimModel::new(kind, spec.classes, spec.input_shape, arch, 7).unwrap();
            let (x, _) = ds.test_set(t).unwrap();
            let pred = model.predict(&x).unwrap();
            match kind {
                TaskKind::DenseClassification => {
                    assert_eq!(pred.shape(), &[x.shape()[0], 4, 16, 16]);
                    // channel softmax sums to one per pixel
                    let sums = pred.sum_axis(1, false).unwrap();
                    assert!(sums.data().iter().all(|&s| (s - 1.0).abs() < 1e-9));
                }
                TaskKind::DenseRegression => {
                    assert_eq!(pred.shape(), &[x.shape()[0], 1, 16, 16]);
                }
                TaskKind::DenseUnitVector => {
                    let plane = 16 * 16;
                    let d = pred.data();
                    for i in 0..x.shape()[0] {
                        for p in 0..plane {
                            let n: f64 = (0..3)
                                .map(|c| d[(i * 3 + c) * plane + p])
                                .map(|v| v * v)
                                .sum();
                            assert!(n.sqrt() <= 1.0 + 1e-9);
                        }
                    }
                }
                TaskKind::Classification => unreachable!(),
            }
        }
    }

    #[test]
    fn save_load_preserves_predictions_and_freezes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_shared_label_suite(5, 1, 3, 60, (1, 8, 8)).unwrap();
        let cfg = FitConfig { epochs: 30, batch: 16, lr: 1e-3 };
        let (model, _) = train_victim(&ds, 0, default_classifier_arch(3), &cfg, 1).unwrap();
        let path = dir.path().join("victim.nta");
        model.save(&path).unwrap();
        let back = VictimModel::load(&path).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.param_count(), model.param_count());
        let (x, _) = ds.test_set(0).unwrap();
        assert_eq!(model.predict(&x).unwrap().data(), back.predict(&x).unwrap().data());
    }

    #[test]
    fn family_trains_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_shared_label_suite(6, 2, 3, 120, (1, 8, 8)).unwrap();
        let cfg = FitConfig { epochs: 150, batch: 24, lr: 1e-3 };
        let (family, history) = train_shared_family(&ds, &cfg, 9).unwrap();
        assert!(history[0] > *history.last().unwrap());
        for t in 0..2 {
            let (x, y) = ds.test_set(t).unwrap();
            let acc = argmax_accuracy(&family.predict(t, &x).unwrap(), &y);
            assert!(acc >= 0.85, "task {t} accuracy {acc}");
        }
        let path = dir.path().join("family.nta");
        family.save(&path).unwrap();
        let back = SharedEncoderFamily::load(&path).unwrap();
        let (x, _) = ds.test_set(0).unwrap();
        assert_eq!(
            family.predict(0, &x).unwrap().data(),
            back.predict(0, &x).unwrap().data()
        );
        // encoder weights are shared across task views
        assert!(back.params.params_with_prefix("enc/") > 0);
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let ds = make_shared_input_suite(4, 8, 16).unwrap();
        let arch = default_dense_arch(TaskKind::DenseRegression, 0).unwrap();
        let cfg = FitConfig { epochs: 10, batch: 4, lr: 1e200 };
        match train_victim(&ds, 1, arch, &cfg, 3) {
            Err(MtaError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn architecture_output_shape_is_validated() {
        let err = VictimModel::new(
            TaskKind::Classification,
            5,
            (1, 8, 8),
            default_classifier_arch(3), // wrong class count
            1,
        )
        .unwrap_err();
        assert!(matches!(err, MtaError::Config(_)));
    }

    #[test]
    fn competence_gate() {
        assert!(ensure_competent(0.9, "t1").is_ok());
        assert!(matches!(
            ensure_competent(0.5, "t1"),
            Err(MtaError::IncompetentVictim(_))
        ));
    }
}
