//! Metrics and reports: fooling ratios, accuracies, dense-prediction
//! quality, generation timing, and the serialized evaluation tables.
//!
//! Everything here is read-only with respect to models and generators.
//! Batched work is sharded into fixed-size chunks evaluated in parallel;
//! because the chunk boundaries never depend on the worker count and
//! partial results are reduced in chunk order, reports are bit-identical
//! for any thread configuration.

use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::data::{MultiTaskDataset, SuiteKind, TaskKind};
use crate::error::{MtaError, Result};
use crate::generator::{apply_perturbation, AttackMode, MultiTaskGenerator};
use crate::tensor::Tensor;
use crate::victim::{Predictor, SharedEncoderFamily, VictimModel};

/// Relative depth error uses this floor in the denominator so ground-truth
/// zeros cannot blow up the metric.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Rows per parallel evaluation chunk. Fixed so that results never depend
/// on how many workers happen to run.
const EVAL_CHUNK: usize = 16;

/// Run a predictor over a batch in parallel chunks, preserving row order.
pub fn predict_chunked(p: &dyn Predictor, x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    if b <= EVAL_CHUNK {
        return p.predict(x);
    }
    let ranges: Vec<(usize, usize)> =
        (0..b).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(b))).collect();
    let parts: Vec<Tensor> = ranges
        .par_iter()
        .map(|&(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            p.predict(&x.gather_rows(&idx)?)
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&parts, 0)
}

fn argmax_labels(kind: TaskKind, probs: &Tensor) -> Result<Vec<usize>> {
    match kind {
        TaskKind::Classification | TaskKind::DenseClassification => Ok(probs.argmax_axis(1)),
        _ => Err(MtaError::InvalidCall(format!(
            "{kind:?} has no argmax prediction; fooling/accuracy need a classification kind"
        ))),
    }
}

/// Fraction of predictions that change between the clean and the perturbed
/// batch. Per sample for flat classification, per pixel for dense.
pub fn fooling_from(kind: TaskKind, clean: &Tensor, adv: &Tensor) -> Result<f64> {
    if clean.shape() != adv.shape() {
        return Err(MtaError::shape(
            "fooling_ratio",
            format!("clean {:?} vs adversarial {:?}", clean.shape(), adv.shape()),
        ));
    }
    let a = argmax_labels(kind, clean)?;
    let b = argmax_labels(kind, adv)?;
    let changed = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    Ok(changed as f64 / a.len() as f64)
}

/// Argmax accuracy against 1-based labels (`[B]` flat, `[B,H,W]` dense).
pub fn accuracy_from(kind: TaskKind, probs: &Tensor, labels: &Tensor) -> Result<f64> {
    let pred = argmax_labels(kind, probs)?;
    if pred.len() != labels.numel() {
        return Err(MtaError::shape(
            "accuracy",
            format!("{} predictions vs {} labels", pred.len(), labels.numel()),
        ));
    }
    let hits = pred
        .iter()
        .zip(labels.data())
        .filter(|(p, l)| (**p + 1) as f64 == **l)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of samples classified as the 1-based target class.
pub fn target_accuracy_from(probs: &Tensor, target: usize) -> Result<f64> {
    if probs.rank() != 2 {
        return Err(MtaError::shape(
            "target_accuracy",
            format!("expected [B,C], got {:?}", probs.shape()),
        ));
    }
    let classes = probs.shape()[1];
    if target < 1 || target > classes {
        return Err(MtaError::Config(format!("target {target} outside 1..={classes}")));
    }
    let pred = probs.argmax_axis(1);
    let hits = pred.iter().filter(|&&p| p + 1 == target).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn fooling_ratio(p: &dyn Predictor, x_clean: &Tensor, x_adv: &Tensor) -> Result<f64> {
    if x_clean.shape() != x_adv.shape() {
        return Err(MtaError::shape(
            "fooling_ratio",
            format!("clean {:?} vs adversarial {:?}", x_clean.shape(), x_adv.shape()),
        ));
    }
    fooling_from(p.kind(), &predict_chunked(p, x_clean)?, &predict_chunked(p, x_adv)?)
}

pub fn accuracy(p: &dyn Predictor, x: &Tensor, labels: &Tensor) -> Result<f64> {
    accuracy_from(p.kind(), &predict_chunked(p, x)?, labels)
}

pub fn top1_target_accuracy(p: &dyn Predictor, x_adv: &Tensor, target: usize) -> Result<f64> {
    target_accuracy_from(&predict_chunked(p, x_adv)?, target)
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Quality metrics for dense predictions, keyed by metric name.
///
/// * dense_classification: `miou` (per-image mean IoU over classes present
///   in prediction or target, averaged over images) and `pix_acc`.
/// * dense_regression: `abs_err` and `rel_err` (denominator floored).
/// * dense_unit_vector: angle statistics in degrees (`angle_mean_deg`,
///   `angle_median_deg`) and `within_11_25` / `within_22_5` / `within_30`.
pub fn dense_metrics(
    kind: TaskKind,
    predictions: &Tensor,
    targets: &Tensor,
) -> Result<IndexMap<String, f64>> {
    let mut out = IndexMap::new();
    match kind {
        TaskKind::DenseClassification => {
            let (b, c) = (predictions.shape()[0], predictions.shape()[1]);
            let plane = predictions.shape()[2] * predictions.shape()[3];
            if targets.numel() != b * plane {
                return Err(MtaError::shape(
                    "dense_metrics",
                    format!("{:?} targets vs {:?} predictions", targets.shape(), predictions.shape()),
                ));
            }
            let pred = predictions.argmax_axis(1);
            let td = targets.data();
            let mut hits = 0usize;
            let mut miou_sum = 0.0;
            for i in 0..b {
                let mut inter = vec![0usize; c];
                let mut union = vec![0usize; c];
                for p in 0..plane {
                    let want = td[i * plane + p] as usize - 1;
                    let got = pred[i * plane + p];
                    if want == got {
                        hits += 1;
                        inter[want] += 1;
                        union[want] += 1;
                    } else {
                        union[want] += 1;
                        union[got] += 1;
                    }
                }
                let (mut total, mut classes_present) = (0.0, 0usize);
                for k in 0..c {
                    if union[k] > 0 {
                        total += inter[k] as f64 / union[k] as f64;
                        classes_present += 1;
                    }
                }
                miou_sum += total / classes_present as f64;
            }
            out.insert("miou".to_string(), miou_sum / b as f64);
            out.insert("pix_acc".to_string(), hits as f64 / (b * plane) as f64);
        }
        TaskKind::DenseRegression => {
            if predictions.shape() != targets.shape() {
                return Err(MtaError::shape(
                    "dense_metrics",
                    format!("{:?} vs {:?}", predictions.shape(), targets.shape()),
                ));
            }
            let (pd, td) = (predictions.data(), targets.data());
            let n = pd.len() as f64;
            let abs: f64 = pd.iter().zip(td).map(|(&a, &b)| (a - b).abs()).sum();
            let rel: f64 = pd
                .iter()
                .zip(td)
                .map(|(&a, &b)| (a - b).abs() / b.max(REL_ERR_FLOOR))
                .sum();
            out.insert("abs_err".to_string(), abs / n);
            out.insert("rel_err".to_string(), rel / n);
        }
        TaskKind::DenseUnitVector => {
            if predictions.shape() != targets.shape() || predictions.shape()[1] != 3 {
                return Err(MtaError::shape(
                    "dense_metrics",
                    format!("{:?} vs {:?}, want matching [B,3,H,W]", predictions.shape(), targets.shape()),
                ));
            }
            let (b, plane) = (predictions.shape()[0], predictions.shape()[2] * predictions.shape()[3]);
            let (pd, td) = (predictions.data(), targets.data());
            let mut angles = Vec::with_capacity(b * plane);
            for i in 0..b {
                for p in 0..plane {
                    let dot: f64 = (0..3)
                        .map(|ch| pd[(i * 3 + ch) * plane + p] * td[(i * 3 + ch) * plane + p])
                        .sum();
                    angles.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
                }
            }
            let n = angles.len() as f64;
            let mean = angles.iter().sum::<f64>() / n;
            let within = |t: f64| angles.iter().filter(|&&a| a <= t).count() as f64 / n;
            out.insert("angle_mean_deg".to_string(), mean);
            out.insert("angle_median_deg".to_string(), median_of(angles.clone()));
            out.insert("within_11_25".to_string(), within(11.25));
            out.insert("within_22_5".to_string(), within(22.5));
            out.insert("within_30".to_string(), within(30.0));
        }
        TaskKind::Classification => {
            return Err(MtaError::InvalidCall(
                "dense_metrics called on a flat classification task".into(),
            ));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// timing
// ---------------------------------------------------------------------------

/// Median wall time (seconds) to produce all perturbations for one input
/// batch, two ways: through the shared encoding (one encoder pass, M
/// decoders) and through M independent full passes. Repetitions alternate
/// between the two paths so clock drift hits both equally; a few warmup
/// rounds are discarded.
pub fn time_generation_paths(
    gen: &MultiTaskGenerator,
    x: &Tensor,
    repetitions: usize,
) -> Result<(f64, f64)> {
    if gen.cfg.mode != AttackMode::PerInstance {
        return Err(MtaError::InvalidCall(
            "timing compares per-instance generation paths".into(),
        ));
    }
    if repetitions == 0 {
        return Err(MtaError::Config("timing needs at least one repetition".into()));
    }
    let m = gen.num_tasks();
    let shared_pass = || -> Result<()> {
        let latent = gen.shared_encoding_path(x)?;
        for t in 0..m {
            gen.decode(t, &latent)?;
        }
        Ok(())
    };
    let full_pass = || -> Result<()> {
        for t in 0..m {
            gen.generate_per_instance(t, x)?;
        }
        Ok(())
    };
    for _ in 0..3 {
        shared_pass()?;
        full_pass()?;
    }
    let mut shared = Vec::with_capacity(repetitions);
    let mut full = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        shared_pass()?;
        shared.push(t0.elapsed().as_secs_f64());
        let t1 = Instant::now();
        full_pass()?;
        full.push(t1.elapsed().as_secs_f64());
    }
    Ok((median_of(shared), median_of(full)))
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

/// One evaluation: clean and attacked metric maps per task, plus scalar
/// extras (parameter counts, timing). Extras whose name starts with `time_`
/// are understood to vary between identical runs; everything else is
/// reproducible bit-for-bit under a fixed seed.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: String,
    pub goal: String,
    pub mode: String,
    pub eps: f64,
    pub norm: String,
    pub victim_family: String,
    pub seed: u64,
    pub clean: Vec<IndexMap<String, f64>>,
    pub attacked: Vec<IndexMap<String, f64>>,
    pub extras: IndexMap<String, f64>,
}

impl EvalReport {
    /// Exact arithmetic mean of one metric across the tasks that carry it.
    pub fn average(&self, attacked: bool, metric: &str) -> Option<f64> {
        let rows = if attacked { &self.attacked } else { &self.clean };
        let vals: Vec<f64> = rows.iter().filter_map(|m| m.get(metric)).copied().collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Long-format CSV: `section,task,metric,value`. Task 0 rows under the
    /// `avg` label hold cross-task means; extras go under section `extra`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,task,metric,value\n");
        s.push_str(&format!("header,,method,{}\n", self.method));
        s.push_str(&format!("header,,goal,{}\n", self.goal));
        s.push_str(&format!("header,,mode,{}\n", self.mode));
        s.push_str(&format!("header,,eps,{}\n", self.eps));
        s.push_str(&format!("header,,norm,{}\n", self.norm));
        s.push_str(&format!("header,,victim_family,{}\n", self.victim_family));
        s.push_str(&format!("header,,seed,{}\n", self.seed));
        for (section, rows) in [("clean", &self.clean), ("attacked", &self.attacked)] {
            let mut metric_names: Vec<String> = Vec::new();
            for (t, metrics) in rows.iter().enumerate() {
                for (k, v) in metrics {
                    s.push_str(&format!("{section},{},{k},{v}\n", t + 1));
                    if !metric_names.contains(k) {
                        metric_names.push(k.clone());
                    }
                }
            }
            for k in metric_names {
                if let Some(avg) = self.average(section == "attacked", &k) {
                    s.push_str(&format!("{section},avg,{k},{avg}\n"));
                }
            }
        }
        for (k, v) in &self.extras {
            s.push_str(&format!("extra,,{k},{v}\n"));
        }
        s
    }

    /// The CSV with volatile (timing) rows removed; two runs with the same
    /// seed produce identical filtered text.
    pub fn to_csv_stable(&self) -> String {
        self.to_csv()
            .lines()
            .filter(|l| !l.starts_with("extra,,time_") && !l.contains(",seconds,"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    /// Markdown table in the fooling-ratio-with-accuracy layout when every
    /// task is flat classification, otherwise a metric-per-row table.
    pub fn to_markdown(&self) -> String {
        let m = self.clean.len();
        let classification_style =
            (0..m).all(|t| self.attacked.get(t).map_or(false, |r| r.contains_key("fooling")));
        let mut s = format!(
            "### {} ({}, {}, eps={}, {})\n\n",
            self.method, self.goal, self.mode, self.eps, self.norm
        );
        if classification_style {
            s.push_str("| condition |");
            for t in 0..m {
                s.push_str(&format!(" task {} |", t + 1));
            }
            s.push_str(" avg |\n|---|");
            s.push_str(&"---|".repeat(m + 1));
            s.push('\n');
            let pct = |v: f64| format!("{:.2}", 100.0 * v);
            s.push_str("| clean |");
            for row in &self.clean {
                s.push_str(&format!(" - ({}) |", pct(row["accuracy"])));
            }
            s.push_str(&format!(" - ({}) |\n", pct(self.average(false, "accuracy").unwrap())));
            s.push_str(&format!("| {} |", self.method));
            for row in &self.attacked {
                s.push_str(&format!(" {} ({}) |", pct(row["fooling"]), pct(row["accuracy"])));
            }
            s.push_str(&format!(
                " {} ({}) |\n",
                pct(self.average(true, "fooling").unwrap()),
                pct(self.average(true, "accuracy").unwrap())
            ));
        } else {
            s.push_str("| task | metric | clean | attacked |\n|---|---|---|---|\n");
            for t in 0..m {
                for (k, v) in &self.clean[t] {
                    let adv = self.attacked[t]
                        .get(k)
                        .map(|a| format!("{a:.4}"))
                        .unwrap_or_else(|| "-".to_string());
                    s.push_str(&format!("| {} | {k} | {v:.4} | {adv} |\n", t + 1));
                }
            }
        }
        if !self.extras.is_empty() {
            s.push('\n');
            for (k, v) in &self.extras {
                s.push_str(&format!("- {k}: {v}\n"));
            }
        }
        s
    }
}

fn task_metrics(
    p: &dyn Predictor,
    x: &Tensor,
    labels: &Tensor,
    clean_probs: Option<&Tensor>,
    target: Option<usize>,
) -> Result<IndexMap<String, f64>> {
    let probs = predict_chunked(p, x)?;
    let mut row = IndexMap::new();
    match p.kind() {
        TaskKind::Classification => {
            if let Some(clean) = clean_probs {
                row.insert("fooling".to_string(), fooling_from(p.kind(), clean, &probs)?);
            }
            row.insert("accuracy".to_string(), accuracy_from(p.kind(), &probs, labels)?);
            if let Some(t) = target {
                row.insert("target_accuracy".to_string(), target_accuracy_from(&probs, t)?);
            }
        }
        TaskKind::DenseClassification => {
            if let Some(clean) = clean_probs {
                row.insert("fooling".to_string(), fooling_from(p.kind(), clean, &probs)?);
            }
            row.extend(dense_metrics(p.kind(), &probs, labels)?);
        }
        TaskKind::DenseRegression | TaskKind::DenseUnitVector => {
            row.extend(dense_metrics(p.kind(), &probs, labels)?);
        }
    }
    Ok(row)
}

/// Produce per-task perturbations for a test batch with a frozen generator.
pub fn perturb_test_batch(gen: &MultiTaskGenerator, task: usize, x: &Tensor) -> Result<Tensor> {
    match gen.cfg.mode {
        AttackMode::Universal => gen.generate_universal(task),
        AttackMode::PerInstance => gen.generate_per_instance(task, x),
    }
}

/// Evaluate a trained generator against a set of victims on the test split:
/// one clean row and one attacked row per task.
pub fn evaluate(
    gen: &MultiTaskGenerator,
    victims: &[VictimModel],
    ds: &MultiTaskDataset,
    method: &str,
    goal: &str,
    targets: Option<&[usize]>,
    seed: u64,
) -> Result<EvalReport> {
    if victims.len() != ds.num_tasks() || gen.num_tasks() != ds.num_tasks() {
        return Err(MtaError::Config(format!(
            "{} victims / {} generator tasks for a {}-task dataset",
            victims.len(),
            gen.num_tasks(),
            ds.num_tasks()
        )));
    }
    let mut clean = Vec::new();
    let mut attacked = Vec::new();
    for t in 0..ds.num_tasks() {
        let (x, y) = ds.test_set(t)?;
        let victim: &dyn Predictor = &victims[t];
        let clean_probs = predict_chunked(victim, &x)?;
        clean.push(task_metrics(victim, &x, &y, None, None)?);
        let v = perturb_test_batch(gen, t, &x)?;
        let xhat = apply_perturbation(&x, &v, None)?.detached();
        attacked.push(task_metrics(
            victim,
            &xhat,
            &y,
            Some(&clean_probs),
            targets.map(|ts| ts[t]),
        )?);
    }
    let mut extras = IndexMap::new();
    extras.insert("generator_params".to_string(), gen.param_count() as f64);
    Ok(EvalReport {
        method: method.to_string(),
        goal: goal.to_string(),
        mode: gen.cfg.mode.to_string(),
        eps: gen.cfg.eps,
        norm: gen.cfg.p.to_string(),
        victim_family: "independent".to_string(),
        seed,
        clean,
        attacked,
        extras,
    })
}

/// Apply perturbations trained against family A to shared-encoder family B.
pub fn transfer_eval(
    gen: &MultiTaskGenerator,
    family_b: &SharedEncoderFamily,
    ds: &MultiTaskDataset,
    seed: u64,
) -> Result<EvalReport> {
    if family_b.num_tasks() != ds.num_tasks() || gen.num_tasks() != ds.num_tasks() {
        return Err(MtaError::Config(format!(
            "family has {} tasks, generator {}, dataset {}",
            family_b.num_tasks(),
            gen.num_tasks(),
            ds.num_tasks()
        )));
    }
    let mut clean = Vec::new();
    let mut attacked = Vec::new();
    for t in 0..ds.num_tasks() {
        let (x, y) = ds.test_set(t)?;
        let view = family_b.task(t);
        let victim: &dyn Predictor = &view;
        let clean_probs = predict_chunked(victim, &x)?;
        clean.push(task_metrics(victim, &x, &y, None, None)?);
        let v = perturb_test_batch(gen, t, &x)?;
        let xhat = apply_perturbation(&x, &v, None)?.detached();
        attacked.push(task_metrics(victim, &xhat, &y, Some(&clean_probs), None)?);
    }
    Ok(EvalReport {
        method: "transfer".to_string(),
        goal: "non_targeted".to_string(),
        mode: gen.cfg.mode.to_string(),
        eps: gen.cfg.eps,
        norm: gen.cfg.p.to_string(),
        victim_family: "shared_encoder".to_string(),
        seed,
        clean,
        attacked,
        extras: IndexMap::new(),
    })
}

/// Markdown comparison table: one row per report, Table-1 layout
/// (fooling with accuracy in parentheses, per task plus the average).
pub fn compare_markdown(reports: &[EvalReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| MtaError::Config("nothing to compare".into()))?;
    let m = first.clean.len();
    if reports.iter().any(|r| r.clean.len() != m) {
        return Err(MtaError::Config("reports cover different task counts".into()));
    }
    let mut s = String::from("| method |");
    for t in 0..m {
        s.push_str(&format!(" task {} |", t + 1));
    }
    s.push_str(" avg |\n|---|");
    s.push_str(&"---|".repeat(m + 1));
    s.push('\n');
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    for r in reports {
        s.push_str(&format!("| {} (eps={}) |", r.method, r.eps));
        for t in 0..m {
            let fool = r.attacked[t].get("fooling");
            let acc = r.attacked[t].get("accuracy").or_else(|| r.attacked[t].get("pix_acc"));
            match (fool, acc) {
                (Some(f), Some(a)) => s.push_str(&format!(" {} ({}) |", pct(*f), pct(*a))),
                (Some(f), None) => s.push_str(&format!(" {} |", pct(*f))),
                _ => s.push_str(" - |"),
            }
        }
        match (r.average(true, "fooling"), r.average(true, "accuracy")) {
            (Some(f), Some(a)) => s.push_str(&format!(" {} ({}) |\n", pct(f), pct(a))),
            (Some(f), None) => s.push_str(&format!(" {} |\n", pct(f))),
            _ => s.push_str(" - |\n"),
        }
    }
    Ok(s)
}

/// Suites must match for a transfer comparison to mean anything.
pub fn check_same_suite(a: SuiteKind, b: SuiteKind) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(MtaError::Config(format!("suite mismatch: {a:?} vs {b:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_shared_label_suite;
    use crate::generator::GeneratorConfig;
    use crate::victim::default_classifier_arch;

    #[test]
    fn fooling_counts_changed_argmax() {
        let clean = Tensor::from_vec(vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4], &[3, 2]).unwrap();
        let adv = Tensor::from_vec(vec![0.1, 0.9, 0.2, 0.8, 0.6, 0.4], &[3, 2]).unwrap();
        let r = fooling_from(TaskKind::Classification, &clean, &adv).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(fooling_from(TaskKind::Classification, &clean, &clean).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_and_target_accuracy() {
        let probs = Tensor::from_vec(vec![0.9, 0.1, 0.2, 0.8], &[2, 2]).unwrap();
        let y = Tensor::from_vec(vec![1.0, 1.0], &[2]).unwrap();
        assert_eq!(accuracy_from(TaskKind::Classification, &probs, &y).unwrap(), 0.5);
        assert_eq!(target_accuracy_from(&probs, 2).unwrap(), 0.5);
        assert!(target_accuracy_from(&probs, 3).is_err());
    }

    #[test]
    fn dense_metrics_perfect_prediction() {
        // segmentation: prediction equals target everywhere
        let labels = Tensor::from_vec(vec![1.0, 2.0, 2.0, 1.0], &[1, 2, 2]).unwrap();
        let probs = crate::data::onehot_dense(&labels, 3).unwrap();
        let m = dense_metrics(TaskKind::DenseClassification, &probs, &labels).unwrap();
        assert_eq!(m["miou"], 1.0);
        assert_eq!(m["pix_acc"], 1.0);

        let d = Tensor::from_vec(vec![1.0, 2.0], &[1, 1, 1, 2]).unwrap();
        let md = dense_metrics(TaskKind::DenseRegression, &d, &d).unwrap();
        assert_eq!(md["abs_err"], 0.0);
        assert_eq!(md["rel_err"], 0.0);

        let mut v = vec![0.0; 3 * 2];
        v[4] = 1.0;
        v[5] = 1.0; // z-up normals
        let n = Tensor::from_vec(v, &[1, 3, 1, 2]).unwrap();
        let mn = dense_metrics(TaskKind::DenseUnitVector, &n, &n).unwrap();
        assert_eq!(mn["angle_mean_deg"], 0.0);
        assert_eq!(mn["within_11_25"], 1.0);
    }

    #[test]
    fn dense_metrics_antipodal_normals() {
        let mut v = vec![0.0; 3 * 4];
        for p in 0..4 {
            v[2 * 4 + p] = 1.0;
        }
        let n = Tensor::from_vec(v, &[1, 3, 2, 2]).unwrap();
        let m = dense_metrics(TaskKind::DenseUnitVector, &n.scale(-1.0), &n).unwrap();
        assert!((m["angle_mean_deg"] - 180.0).abs() < 1e-9);
        assert_eq!(m["within_30"], 0.0);
        assert!(m["within_11_25"] <= m["within_22_5"] && m["within_22_5"] <= m["within_30"]);
    }

    #[test]
    fn miou_excludes_absent_classes() {
        // target uses class 1 only, prediction says class 1 for half the
        // pixels and class 2 for the rest; class 3 absent everywhere.
        let labels = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0], &[1, 2, 2]).unwrap();
        let pred_labels = Tensor::from_vec(vec![1.0, 1.0, 2.0, 2.0], &[1, 2, 2]).unwrap();
        let probs = crate::data::onehot_dense(&pred_labels, 3).unwrap();
        let m = dense_metrics(TaskKind::DenseClassification, &probs, &labels).unwrap();
        // IoU class1 = 2/4, class2 = 0/2, class3 skipped -> mean 0.25
        assert!((m["miou"] - 0.25).abs() < 1e-12);
        assert_eq!(m["pix_acc"], 0.5);
    }

    #[test]
    fn chunked_prediction_matches_single_pass() {
        let ds = make_shared_label_suite(1, 1, 3, 120, (1, 8, 8)).unwrap();
        let model = crate::victim::VictimModel::new(
            TaskKind::Classification,
            3,
            (1, 8, 8),
            default_classifier_arch(3),
            5,
        )
        .unwrap();
        let (x, _) = ds.test_set(0).unwrap();
        assert!(x.shape()[0] > EVAL_CHUNK);
        let chunked = predict_chunked(&model, &x).unwrap();
        let direct = model.predict(&x).unwrap();
        assert_eq!(chunked.data(), direct.data());
    }

    #[test]
    fn zero_perturbation_changes_nothing() {
        let ds = make_shared_label_suite(2, 1, 3, 60, (1, 8, 8)).unwrap();
        let model = crate::victim::VictimModel::new(
            TaskKind::Classification,
            3,
            (1, 8, 8),
            default_classifier_arch(3),
            6,
        )
        .unwrap();
        let (x, y) = ds.test_set(0).unwrap();
        let zero = Tensor::zeros(&[1, 1, 8, 8]);
        let xhat = apply_perturbation(&x, &zero, None).unwrap();
        assert_eq!(fooling_ratio(&model, &x, &xhat).unwrap(), 0.0);
        assert_eq!(
            accuracy(&model, &x, &y).unwrap(),
            accuracy(&model, &xhat, &y).unwrap()
        );
    }

    #[test]
    fn report_csv_and_averages() {
        let mut clean1 = IndexMap::new();
        clean1.insert("accuracy".to_string(), 0.9);
        let mut clean2 = IndexMap::new();
        clean2.insert("accuracy".to_string(), 0.7);
        let mut adv1 = IndexMap::new();
        adv1.insert("fooling".to_string(), 0.8);
        adv1.insert("accuracy".to_string(), 0.2);
        let mut adv2 = IndexMap::new();
        adv2.insert("fooling".to_string(), 0.6);
        adv2.insert("accuracy".to_string(), 0.4);
        let mut extras = IndexMap::new();
        extras.insert("generator_params".to_string(), 123.0);
        extras.insert("time_shared_s".to_string(), 0.01);
        let r = EvalReport {
            method: "mta".to_string(),
            goal: "non_targeted".to_string(),
            mode: "universal".to_string(),
            eps: 0.1,
            norm: "inf".to_string(),
            victim_family: "independent".to_string(),
            seed: 1,
            clean: vec![clean1, clean2],
            attacked: vec![adv1, adv2],
            extras,
        };
        assert!((r.average(true, "fooling").unwrap() - 0.7).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.contains("attacked,avg,fooling,0.7"));
        assert!(csv.contains("extra,,time_shared_s,"));
        let stable = r.to_csv_stable();
        assert!(!stable.contains("time_shared_s"));
        assert!(stable.contains("generator_params"));
        let md = r.to_markdown();
        assert!(md.contains("| clean |"));
        assert!(md.contains("80.00 (20.00)"));
        let cmp = compare_markdown(std::slice::from_ref(&r)).unwrap();
        assert!(cmp.contains("| mta (eps=0.1) |"));
    }

    #[test]
    fn evaluation_leaves_checksums_untouched() {
        let ds = make_shared_label_suite(3, 2, 3, 60, (1, 16, 16)).unwrap();
        let victims: Vec<_> = (0..2)
            .map(|t| {
                let mut v = crate::victim::VictimModel::new(
                    TaskKind::Classification,
                    3,
                    (1, 16, 16),
                    default_classifier_arch(3),
                    t as u64,
                )
                .unwrap();
                v.freeze();
                v
            })
            .collect();
        let mut gen = MultiTaskGenerator::new(
            GeneratorConfig::new(2, AttackMode::Universal, 0.1, 8),
            (1, 16, 16),
        )
        .unwrap();
        gen.freeze();
        let gsum = gen.checksum();
        let vsums: Vec<u64> = victims.iter().map(|v| v.params.checksum()).collect();
        let report = evaluate(&gen, &victims, &ds, "mta", "non_targeted", None, 3).unwrap();
        assert_eq!(gen.checksum(), gsum);
        assert_eq!(
            victims.iter().map(|v| v.params.checksum()).collect::<Vec<_>>(),
            vsums
        );
        assert_eq!(report.clean.len(), 2);
        assert!(report.attacked[0].contains_key("fooling"));
        // untrained generator at small scale: metrics exist and are ratios
        for row in report.attacked.iter().chain(report.clean.iter()) {
            for (k, v) in row {
                assert!((0.0..=1.0).contains(v), "{k}={v}");
            }
        }
    }

    #[test]
    fn timing_needs_per_instance_mode() {
        let gen = MultiTaskGenerator::new(
            GeneratorConfig::new(2, AttackMode::Universal, 0.1, 8),
            (1, 16, 16),
        )
        .unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(time_generation_paths(&gen, &x, 5).is_err());
    }

    #[test]
    fn suite_check() {
        assert!(check_same_suite(SuiteKind::SharedLabel, SuiteKind::SharedLabel).is_ok());
        assert!(check_same_suite(SuiteKind::SharedLabel, SuiteKind::SharedInput).is_err());
    }
}
