//! Generator training against frozen victims.
//!
//! A fooling objective never touches victim weights: gradients flow through
//! the frozen networks into the generator only. Non-targeted runs push the
//! victim's own per-sample loss up through `-log`, targeted runs pull the
//! cross entropy against a chosen class down through `log`, and multiple
//! tasks combine as a fixed convex sum. The baseline trainer fits one
//! single-task generator per victim with the same batch streams, so a
//! joint-versus-independent comparison differs only in weight sharing.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{onehot, MultiTaskDataset, TaskKind};
use crate::error::{MtaError, Result};
use crate::eval::{fooling_from, target_accuracy_from};
use crate::generator::{apply_perturbation, AttackMode, GeneratorConfig, MultiTaskGenerator};
use crate::loss::{encode_target, task_loss, task_loss_per_sample};
use crate::rng::DetRng;
use crate::tensor::{
    backward, cross_entropy_per_sample, AdamConfig, AdamState, ParamSet, Tensor, CE_DELTA,
};
use crate::victim::{Predictor, VictimModel};

/// Held-out samples per task used to track attack progress during training.
const PROBE_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackGoal {
    NonTargeted,
    Targeted,
}

impl std::fmt::Display for AttackGoal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackGoal::NonTargeted => write!(f, "non_targeted"),
            AttackGoal::Targeted => write!(f, "targeted"),
        }
    }
}

/// Attack training hyperparameters. Weights default to uniform; targets are
/// 1-based class indices and only make sense for targeted runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub goal: AttackGoal,
    pub weights: Option<Vec<f64>>,
    pub targets: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            goal: AttackGoal::NonTargeted,
            weights: None,
            targets: None,
            epochs: 400,
            batch: 10,
            lr: 2e-4,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Per-task weights: the stored vector checked for validity, or 1/M.
    pub fn resolved_weights(&self, num_tasks: usize) -> Result<Vec<f64>> {
        match &self.weights {
            None => Ok(vec![1.0 / num_tasks as f64; num_tasks]),
            Some(w) => {
                if w.len() != num_tasks {
                    return Err(MtaError::Config(format!(
                        "{} weights for {num_tasks} tasks",
                        w.len()
                    )));
                }
                if w.iter().any(|&a| !(a > 0.0)) {
                    return Err(MtaError::Config("task weights must be positive".into()));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(MtaError::Config(format!("task weights sum to {sum}, not 1")));
                }
                Ok(w.clone())
            }
        }
    }
}

/// `mean(-log(max(h, delta)))` over per-sample victim losses: minimized by
/// making the victim as wrong as possible.
pub fn wrap_nontargeted(per_sample: &Tensor) -> Result<Tensor> {
    Ok(per_sample.clamp_min(CE_DELTA).log()?.scale(-1.0).mean())
}

/// `mean(log(max(h, delta)))` over per-sample cross entropies against the
/// target class: minimized by making the victim confidently pick it.
pub fn wrap_targeted(per_sample: &Tensor) -> Result<Tensor> {
    Ok(per_sample.clamp_min(CE_DELTA).log()?.mean())
}

/// Non-targeted fooling loss for one task. `y` holds the raw stored targets
/// (1-based labels for classification kinds).
pub fn fooling_loss_nontargeted(
    victim: &dyn Predictor,
    x: &Tensor,
    y: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    let xhat = apply_perturbation(x, v, None)?;
    let probs = victim.predict(&xhat)?;
    let target = encode_target(victim.kind(), victim.classes(), y)?;
    let h = task_loss_per_sample(victim.kind(), &probs, &target)?;
    wrap_nontargeted(&h)
}

/// Targeted fooling loss: drive every sample toward `target_class`.
pub fn fooling_loss_targeted(
    victim: &dyn Predictor,
    x: &Tensor,
    target_class: usize,
    v: &Tensor,
) -> Result<Tensor> {
    if victim.kind() != TaskKind::Classification {
        return Err(MtaError::InvalidCall(format!(
            "targeted attacks need a flat classification victim, got {:?}",
            victim.kind()
        )));
    }
    let classes = victim.classes();
    if target_class < 1 || target_class > classes {
        return Err(MtaError::Config(format!(
            "target class {target_class} outside 1..={classes}"
        )));
    }
    let xhat = apply_perturbation(x, v, None)?;
    let probs = victim.predict(&xhat)?;
    let b = x.shape()[0];
    let labels = Tensor::full(&[b], target_class as f64);
    let h = cross_entropy_per_sample(&probs, &onehot(&labels, classes)?, CE_DELTA)?;
    wrap_targeted(&h)
}

/// Convex combination of per-task losses.
pub fn multi_task_objective(losses: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if losses.is_empty() || losses.len() != weights.len() {
        return Err(MtaError::InvalidCall(format!(
            "{} losses with {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let mut total = losses[0].scale(weights[0]);
    for (l, &a) in losses.iter().zip(weights).skip(1) {
        total = total.add(&l.scale(a))?;
    }
    Ok(total)
}

/// Per-epoch training history. `per_task` and `probe` are indexed
/// `[task][epoch]`; probe values are fooling ratios for classification
/// kinds, target accuracy for targeted runs, and the victim's mean task
/// loss on the perturbed probe batch for regression-like kinds.
#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub total: Vec<f64>,
    pub per_task: Vec<Vec<f64>>,
    pub probe: Vec<Vec<f64>>,
    pub seconds: Vec<f64>,
}

impl TrainingLog {
    pub fn epochs(&self) -> usize {
        self.total.len()
    }

    /// Every series has one finite entry per epoch.
    pub fn check_complete(&self, epochs: usize) -> Result<()> {
        let lens_ok = self.total.len() == epochs
            && self.seconds.len() == epochs
            && self.per_task.iter().all(|s| s.len() == epochs)
            && self.probe.iter().all(|s| s.len() == epochs);
        if !lens_ok {
            return Err(MtaError::InvalidCall("training log is incomplete".into()));
        }
        let all_finite = self.total.iter().chain(&self.seconds).all(|v| v.is_finite())
            && self.per_task.iter().flatten().all(|v| v.is_finite())
            && self.probe.iter().flatten().all(|v| v.is_finite());
        if !all_finite {
            return Err(MtaError::InvalidCall("training log holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let m = self.per_task.len();
        let mut s = String::from("epoch,total");
        for t in 1..=m {
            s.push_str(&format!(",loss_{t}"));
        }
        for t in 1..=m {
            s.push_str(&format!(",probe_{t}"));
        }
        s.push_str(",seconds\n");
        for e in 0..self.total.len() {
            s.push_str(&format!("{},{}", e + 1, self.total[e]));
            for t in 0..m {
                s.push_str(&format!(",{}", self.per_task[t][e]));
            }
            for t in 0..m {
                s.push_str(&format!(",{}", self.probe[t][e]));
            }
            s.push_str(&format!(",{}\n", self.seconds[e]));
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn check_finite(loss: f64, params: &ParamSet, epoch: usize) -> Result<()> {
    if loss.is_finite() && params.iter().all(|(_, t)| t.is_finite()) {
        Ok(())
    } else {
        Err(MtaError::Divergence { epoch })
    }
}

struct Probe {
    x: Tensor,
    target_enc: Tensor,
    clean_probs: Option<Tensor>,
}

fn build_probe(ds: &MultiTaskDataset, task: usize, victim: &VictimModel) -> Result<Probe> {
    let (x_full, y_full) = ds.test_set(task)?;
    let idx: Vec<usize> = (0..x_full.shape()[0].min(PROBE_SIZE)).collect();
    let x = x_full.gather_rows(&idx)?;
    let y = y_full.gather_rows(&idx)?;
    let target_enc = encode_target(victim.kind, victim.classes, &y)?;
    let clean_probs = if victim.kind.is_classification() {
        Some(victim.predict(&x)?)
    } else {
        None
    };
    Ok(Probe { x, target_enc, clean_probs })
}

fn probe_value(
    gen: &MultiTaskGenerator,
    slot: usize,
    victim: &VictimModel,
    probe: &Probe,
    target: Option<usize>,
) -> Result<f64> {
    let v = match gen.cfg.mode {
        AttackMode::Universal => gen.generate_universal(slot)?,
        AttackMode::PerInstance => gen.generate_per_instance(slot, &probe.x)?,
    };
    let xhat = apply_perturbation(&probe.x, &v, None)?.detached();
    let probs = victim.predict(&xhat)?;
    if let Some(t) = target {
        return target_accuracy_from(&probs, t);
    }
    match &probe.clean_probs {
        Some(clean) => fooling_from(victim.kind, clean, &probs),
        None => Ok(task_loss(victim.kind, &probs, &probe.target_enc)?.item()),
    }
}

fn validate_setup(
    gen: &MultiTaskGenerator,
    victims: &[VictimModel],
    ds: &MultiTaskDataset,
    cfg: &AttackConfig,
) -> Result<()> {
    if victims.len() != ds.num_tasks() {
        return Err(MtaError::Config(format!(
            "{} victims for a {}-task dataset",
            victims.len(),
            ds.num_tasks()
        )));
    }
    if gen.input_shape != ds.input_shape(0) {
        return Err(MtaError::Config(format!(
            "generator built for {:?} inputs, dataset provides {:?}",
            gen.input_shape,
            ds.input_shape(0)
        )));
    }
    for (t, (v, spec)) in victims.iter().zip(&ds.tasks).enumerate() {
        if !v.is_frozen() {
            return Err(MtaError::InvalidCall(format!(
                "victim {} must be frozen before attack training",
                t + 1
            )));
        }
        if v.kind != spec.kind || v.classes != spec.classes {
            return Err(MtaError::Config(format!(
                "victim {} is {:?}/{} but task {} is {:?}/{}",
                t + 1,
                v.kind,
                v.classes,
                t + 1,
                spec.kind,
                spec.classes
            )));
        }
    }
    if cfg.goal == AttackGoal::Targeted {
        let targets = cfg
            .targets
            .as_ref()
            .ok_or_else(|| MtaError::Config("targeted attack without target classes".into()))?;
        if targets.len() != ds.num_tasks() {
            return Err(MtaError::Config(format!(
                "{} targets for {} tasks",
                targets.len(),
                ds.num_tasks()
            )));
        }
        for (t, (&tc, v)) in targets.iter().zip(victims).enumerate() {
            if v.kind != TaskKind::Classification {
                return Err(MtaError::Config(format!(
                    "task {} is {:?}; targeted attacks cover flat classification only",
                    t + 1,
                    v.kind
                )));
            }
            if tc < 1 || tc > v.classes {
                return Err(MtaError::Config(format!(
                    "target {tc} for task {} outside 1..={}",
                    t + 1,
                    v.classes
                )));
            }
        }
    } else if cfg.targets.is_some() {
        return Err(MtaError::Config("target classes given for a non-targeted run".into()));
    }
    Ok(())
}

/// The shared loop behind the joint and the baseline trainers. `task_ids`
/// maps each generator slot to its dataset task, so batch streams and
/// targets line up between a joint run and per-task baseline runs.
fn train_generator(
    gen: &mut MultiTaskGenerator,
    victims: &[VictimModel],
    task_ids: &[usize],
    ds: &MultiTaskDataset,
    cfg: &AttackConfig,
    weights: &[f64],
) -> Result<TrainingLog> {
    let slots = task_ids.len();
    if gen.num_tasks() != slots {
        return Err(MtaError::InvalidCall(format!(
            "generator covers {} tasks, asked to train on {}",
            gen.num_tasks(),
            slots
        )));
    }
    let victim_sums: Vec<u64> = victims.iter().map(|v| v.params.checksum()).collect();
    let root = DetRng::from_seed(cfg.seed);
    let mut streams: Vec<DetRng> =
        task_ids.iter().map(|&t| root.derive_idx("batches", t as u64)).collect();
    let probes: Vec<Probe> = task_ids
        .iter()
        .map(|&t| build_probe(ds, t, &victims[t]))
        .collect::<Result<_>>()?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &gen.params);
    let mut log = TrainingLog {
        total: Vec::with_capacity(cfg.epochs),
        per_task: vec![Vec::with_capacity(cfg.epochs); slots],
        probe: vec![Vec::with_capacity(cfg.epochs); slots],
        seconds: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut losses = Vec::with_capacity(slots);
        for (slot, &t) in task_ids.iter().enumerate() {
            let (x, y) = ds.train_batch(t, cfg.batch, &mut streams[slot])?;
            let v = match gen.cfg.mode {
                AttackMode::Universal => gen.generate_universal(slot)?,
                AttackMode::PerInstance => gen.generate_per_instance(slot, &x)?,
            };
            let l = match cfg.goal {
                AttackGoal::NonTargeted => fooling_loss_nontargeted(&victims[t], &x, &y, &v)?,
                AttackGoal::Targeted => {
                    let target = cfg.targets.as_ref().expect("validated")[t];
                    fooling_loss_targeted(&victims[t], &x, target, &v)?
                }
            };
            log.per_task[slot].push(l.item());
            losses.push(l);
        }
        let total = multi_task_objective(&losses, weights)?;
        let val = total.item();
        check_finite(val, &gen.params, epoch)?;
        log.total.push(val);
        gen.params.zero_grads();
        backward(&total)?;
        adam.step(&mut gen.params)?;
        for (slot, &t) in task_ids.iter().enumerate() {
            let target = match cfg.goal {
                AttackGoal::Targeted => Some(cfg.targets.as_ref().expect("validated")[t]),
                AttackGoal::NonTargeted => None,
            };
            log.probe[slot].push(probe_value(gen, slot, &victims[t], &probes[slot], target)?);
        }
        log.seconds.push(started.elapsed().as_secs_f64());
    }
    let after: Vec<u64> = victims.iter().map(|v| v.params.checksum()).collect();
    if after != victim_sums {
        return Err(MtaError::Graph("victim parameters changed during attack training".into()));
    }
    log.check_complete(cfg.epochs)?;
    Ok(log)
}

/// Train a joint generator (shared encoder, one decoder per task) against
/// one frozen victim per dataset task.
pub fn train_mta(
    gen: &mut MultiTaskGenerator,
    victims: &[VictimModel],
    ds: &MultiTaskDataset,
    cfg: &AttackConfig,
) -> Result<TrainingLog> {
    validate_setup(gen, victims, ds, cfg)?;
    if gen.num_tasks() != ds.num_tasks() {
        return Err(MtaError::Config(format!(
            "generator covers {} tasks, dataset has {}",
            gen.num_tasks(),
            ds.num_tasks()
        )));
    }
    let weights = cfg.resolved_weights(ds.num_tasks())?;
    let task_ids: Vec<usize> = (0..ds.num_tasks()).collect();
    train_generator(gen, victims, &task_ids, ds, cfg, &weights)
}

/// Train one independent single-task generator per victim. Architecture,
/// optimizer, batch streams, and epochs match the joint trainer; only the
/// weight sharing differs.
pub fn train_gap_baseline(
    victims: &[VictimModel],
    ds: &MultiTaskDataset,
    proto: &GeneratorConfig,
    cfg: &AttackConfig,
) -> Result<(Vec<MultiTaskGenerator>, Vec<TrainingLog>)> {
    let seeder = DetRng::from_seed(proto.seed);
    let mut gens = Vec::with_capacity(ds.num_tasks());
    let mut logs = Vec::with_capacity(ds.num_tasks());
    for t in 0..ds.num_tasks() {
        let mut gcfg = *proto;
        gcfg.num_tasks = 1;
        gcfg.seed = seeder.derive_idx("baseline-init", t as u64).next_u64();
        let mut gen = MultiTaskGenerator::new(gcfg, ds.input_shape(0))?;
        validate_setup(&gen, victims, ds, cfg)?;
        let log = train_generator(&mut gen, victims, &[t], ds, cfg, &[1.0])?;
        gens.push(gen);
        logs.push(log);
    }
    Ok((gens, logs))
}

/// One-step gradient-sign perturbation per sample: `eps * sign(dCE/dx)`,
/// with `sign(0) = 0`. Classification victims only.
pub fn fgsm_perturb(victim: &dyn Predictor, x: &Tensor, y: &Tensor, eps: f64) -> Result<Tensor> {
    if victim.kind() != TaskKind::Classification {
        return Err(MtaError::InvalidCall(format!(
            "gradient-sign baseline needs a flat classification victim, got {:?}",
            victim.kind()
        )));
    }
    if eps <= 0.0 {
        return Err(MtaError::Config(format!("eps {eps} must be > 0")));
    }
    let xp = Tensor::param(x.data().to_vec(), x.shape())?;
    let probs = victim.predict(&xp)?;
    let target = onehot(y, victim.classes())?;
    let ce = cross_entropy_per_sample(&probs, &target, CE_DELTA)?.mean();
    backward(&ce)?;
    let grad = xp
        .grad()
        .ok_or_else(|| MtaError::Graph("no input gradient from the victim pass".into()))?;
    let data = grad
        .iter()
        .map(|&g| {
            if g > 0.0 {
                eps
            } else if g < 0.0 {
                -eps
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(data, x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_shared_label_suite;
    use crate::tensor::NormKind;
    use crate::victim::{train_independent_family, FitConfig};
    use proptest::prelude::*;

    fn tiny_setup(
        seed: u64,
        mode: AttackMode,
    ) -> (MultiTaskDataset, Vec<VictimModel>, MultiTaskGenerator) {
        let ds = make_shared_label_suite(seed, 2, 3, 90, (1, 8, 8)).unwrap();
        let fit = FitConfig { epochs: 60, batch: 16, lr: 1e-3 };
        let mut victims = train_independent_family(&ds, &fit, seed).unwrap();
        for v in &mut victims {
            v.freeze();
        }
        let gen =
            MultiTaskGenerator::new(GeneratorConfig::new(2, mode, 0.1, seed), (1, 8, 8)).unwrap();
        (ds, victims, gen)
    }

    #[test]
    fn nontargeted_wrap_hits_known_values() {
        let h = Tensor::from_vec(vec![1.0, std::f64::consts::E], &[2]).unwrap();
        assert!((wrap_nontargeted(&h).unwrap().item() + 0.5).abs() < 1e-12);
        let tiny = Tensor::from_vec(vec![1e-20], &[1]).unwrap();
        let clamped = wrap_nontargeted(&tiny).unwrap().item();
        assert!((clamped - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn targeted_wrap_hits_known_value() {
        let h = Tensor::from_vec(vec![std::f64::consts::E], &[1]).unwrap();
        assert!((wrap_targeted(&h).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_is_the_weighted_sum() {
        let ls: Vec<Tensor> = [1.0, 2.0, 3.0].iter().map(|&v| Tensor::scalar(v)).collect();
        let total = multi_task_objective(&ls, &[0.2, 0.3, 0.5]).unwrap();
        assert!((total.item() - 2.3).abs() < 1e-12);
        assert!(multi_task_objective(&ls, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn weight_resolution() {
        let mut cfg = AttackConfig::default();
        assert_eq!(cfg.resolved_weights(4).unwrap(), vec![0.25; 4]);
        cfg.weights = Some(vec![0.2, 0.3, 0.5]);
        assert_eq!(cfg.resolved_weights(3).unwrap(), vec![0.2, 0.3, 0.5]);
        cfg.weights = Some(vec![0.5, 0.6]);
        assert!(cfg.resolved_weights(2).is_err());
        cfg.weights = Some(vec![1.0, 0.0]);
        assert!(cfg.resolved_weights(2).is_err());
    }

    #[test]
    fn targeted_loss_rejects_bad_targets() {
        let (ds, victims, _) = tiny_setup(11, AttackMode::Universal);
        let (x, _) = ds.test_set(0).unwrap();
        let zero = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(fooling_loss_targeted(&victims[0], &x, 0, &zero).is_err());
        assert!(fooling_loss_targeted(&victims[0], &x, 4, &zero).is_err());
        assert!(fooling_loss_targeted(&victims[0], &x, 2, &zero).is_ok());
    }

    #[test]
    fn training_leaves_victims_alone_and_moves_the_generator() {
        let (ds, victims, mut gen) = tiny_setup(12, AttackMode::Universal);
        let before_victims: Vec<u64> = victims.iter().map(|v| v.params.checksum()).collect();
        let before_gen = gen.checksum();
        let cfg = AttackConfig { epochs: 4, batch: 8, seed: 12, ..AttackConfig::default() };
        let log = train_mta(&mut gen, &victims, &ds, &cfg).unwrap();
        log.check_complete(4).unwrap();
        assert_eq!(log.per_task.len(), 2);
        assert_ne!(gen.checksum(), before_gen);
        assert_eq!(
            victims.iter().map(|v| v.params.checksum()).collect::<Vec<u64>>(),
            before_victims
        );
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,total,loss_1,loss_2,probe_1,probe_2,seconds\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn training_requires_frozen_victims() {
        let (ds, mut victims, mut gen) = tiny_setup(13, AttackMode::Universal);
        victims[1] = VictimModel::new(
            victims[1].kind,
            victims[1].classes,
            victims[1].input_shape,
            crate::victim::default_classifier_arch(3),
            99,
        )
        .unwrap();
        let cfg = AttackConfig { epochs: 1, seed: 13, ..AttackConfig::default() };
        let err = train_mta(&mut gen, &victims, &ds, &cfg).unwrap_err();
        assert!(matches!(err, MtaError::InvalidCall(_)), "{err}");
    }

    #[test]
    fn per_instance_training_smoke() {
        let (ds, victims, mut gen) = tiny_setup(14, AttackMode::PerInstance);
        let cfg = AttackConfig { epochs: 3, batch: 6, seed: 14, ..AttackConfig::default() };
        train_mta(&mut gen, &victims, &ds, &cfg).unwrap();
        let (x, _) = ds.test_set(0).unwrap();
        let v = gen.generate_per_instance(0, &x).unwrap();
        let plane: usize = v.shape()[1..].iter().product();
        for i in 0..v.shape()[0] {
            let row = &v.data()[i * plane..(i + 1) * plane];
            let linf = row.iter().fold(0.0f64, |m, &a| m.max(a.abs()));
            assert!(linf <= 0.1 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn baseline_trains_one_generator_per_task() {
        let (ds, victims, _) = tiny_setup(15, AttackMode::Universal);
        let proto = GeneratorConfig::new(2, AttackMode::Universal, 0.1, 15);
        let cfg = AttackConfig { epochs: 2, batch: 6, seed: 15, ..AttackConfig::default() };
        let (gens, logs) = train_gap_baseline(&victims, &ds, &proto, &cfg).unwrap();
        assert_eq!(gens.len(), 2);
        assert!(gens.iter().all(|g| g.num_tasks() == 1));
        assert_ne!(gens[0].checksum(), gens[1].checksum());
        for log in &logs {
            log.check_complete(2).unwrap();
            assert_eq!(log.per_task.len(), 1);
        }
    }

    #[test]
    fn targeted_training_needs_targets() {
        let (ds, victims, mut gen) = tiny_setup(16, AttackMode::Universal);
        let cfg = AttackConfig {
            goal: AttackGoal::Targeted,
            epochs: 1,
            seed: 16,
            ..AttackConfig::default()
        };
        assert!(matches!(
            train_mta(&mut gen, &victims, &ds, &cfg).unwrap_err(),
            MtaError::Config(_)
        ));
        let ok = AttackConfig { targets: Some(vec![2, 3]), ..cfg.clone() };
        train_mta(&mut gen, &victims, &ds, &ok).unwrap();
        let stray = AttackConfig {
            goal: AttackGoal::NonTargeted,
            targets: Some(vec![2, 3]),
            ..AttackConfig::default()
        };
        assert!(train_mta(&mut gen, &victims, &ds, &stray).is_err());
    }

    #[test]
    fn gradient_sign_step_raises_victim_loss() {
        let (ds, victims, _) = tiny_setup(17, AttackMode::Universal);
        let (x, y) = ds.test_set(0).unwrap();
        let v = fgsm_perturb(&victims[0], &x, &y, 0.1).unwrap();
        assert!(v.data().iter().all(|&a| a == 0.1 || a == -0.1 || a == 0.0));
        let target = onehot(&y, 3).unwrap();
        let before = cross_entropy_per_sample(&victims[0].predict(&x).unwrap(), &target, CE_DELTA)
            .unwrap()
            .mean()
            .item();
        let xhat = apply_perturbation(&x, &v, None).unwrap();
        let after = cross_entropy_per_sample(&victims[0].predict(&xhat).unwrap(), &target, CE_DELTA)
            .unwrap()
            .mean()
            .item();
        assert!(after > before, "{after} vs {before}");
    }

    proptest! {
        #[test]
        fn nontargeted_wrap_is_monotone_decreasing(a in 1e-12f64..10.0, gap in 1e-6f64..10.0) {
            let la = wrap_nontargeted(&Tensor::scalar(a)).unwrap().item();
            let lb = wrap_nontargeted(&Tensor::scalar(a + gap)).unwrap().item();
            prop_assert!(lb < la);
        }

        #[test]
        fn targeted_wrap_is_monotone_increasing(a in 1e-12f64..10.0, gap in 1e-6f64..10.0) {
            let la = wrap_targeted(&Tensor::scalar(a)).unwrap().item();
            let lb = wrap_targeted(&Tensor::scalar(a + gap)).unwrap().item();
            prop_assert!(lb > la);
        }

        #[test]
        fn log_compresses_differences_above_one(c2 in 1.0f64..50.0, gap in 0.0f64..50.0) {
            let c1 = c2 + gap;
            prop_assert!((c1.ln() - c2.ln()).abs() <= (c1 - c2).abs() + 1e-12);
        }

        #[test]
        fn objective_is_linear_in_the_losses(
            l in proptest::collection::vec(-5.0f64..5.0, 1..5),
            scale in 0.1f64..2.0,
        ) {
            let w = vec![1.0 / l.len() as f64; l.len()];
            let ts: Vec<Tensor> = l.iter().map(|&v| Tensor::scalar(v)).collect();
            let scaled: Vec<Tensor> = l.iter().map(|&v| Tensor::scalar(scale * v)).collect();
            let base = multi_task_objective(&ts, &w).unwrap().item();
            let out = multi_task_objective(&scaled, &w).unwrap().item();
            prop_assert!((out - scale * base).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_sign_output_is_a_projection_fixed_point() {
        let (ds, victims, _) = tiny_setup(18, AttackMode::Universal);
        let (x_full, y_full) = ds.test_set(0).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        let x = x_full.gather_rows(&idx).unwrap();
        let y = y_full.gather_rows(&idx).unwrap();
        let v = fgsm_perturb(&victims[0], &x, &y, 0.1).unwrap();
        let projected = v.project_norm_batch(0.1, NormKind::LInf).unwrap();
        assert_eq!(projected.data(), v.data());
    }
}
