//! The perturbation generator: one shared encoder, one decoder per task.
//!
//! In universal mode each task owns a fixed random pattern that is sampled
//! once at construction; the perturbation is a pure function of the weights
//! and that pattern, so it can be added to any input. In per-instance mode
//! the generator maps each input to its own perturbation, and because all
//! dense tasks read the same input, the encoding can be computed once and
//! decoded by every task.
//!
//! Raw decoder output passes through tanh (bounding early magnitudes) and
//! is then scaled into the eps-ball per sample.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{MtaError, Result};
use crate::nn::{Activation, Feat, LayerSpec, Stack};
use crate::rng::DetRng;
use crate::tensor::{NormKind, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Universal,
    PerInstance,
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackMode::Universal => write!(f, "universal"),
            AttackMode::PerInstance => write!(f, "per_instance"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_tasks: usize,
    pub mode: AttackMode,
    pub eps: f64,
    pub p: NormKind,
    /// Residual blocks in the encoder.
    pub blocks: usize,
    /// Channel widths: first downsampling conv, then the latent width.
    pub widths: (usize, usize),
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(num_tasks: usize, mode: AttackMode, eps: f64, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_tasks,
            mode,
            eps,
            p: NormKind::LInf,
            blocks: 2,
            widths: (8, 16),
            seed,
        }
    }

    fn validate(&self, input_shape: (usize, usize, usize)) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(MtaError::Config("generator needs at least one task".into()));
        }
        if self.eps <= 0.0 {
            return Err(MtaError::Config(format!("eps {} must be > 0", self.eps)));
        }
        if self.blocks == 0 {
            return Err(MtaError::Config("encoder needs at least one residual block".into()));
        }
        if self.widths.0 == 0 || self.widths.1 == 0 {
            return Err(MtaError::Config("channel widths must be positive".into()));
        }
        let (_, h, w) = input_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(MtaError::Config(format!(
                "input {h}x{w} must be divisible by 4 so two downsamples round-trip"
            )));
        }
        Ok(())
    }
}

fn encoder_stack(cfg: &GeneratorConfig) -> Stack {
    let (w1, w2) = cfg.widths;
    let mut layers = vec![
        LayerSpec::Conv { out_ch: w1, k: 3, stride: 2, pad: 1, act: Activation::Relu },
        LayerSpec::Conv { out_ch: w2, k: 3, stride: 2, pad: 1, act: Activation::Relu },
    ];
    layers.extend((0..cfg.blocks).map(|_| LayerSpec::Residual { k: 3 }));
    Stack::new(layers)
}

fn decoder_stack(cfg: &GeneratorConfig, out_ch: usize) -> Stack {
    let (w1, _) = cfg.widths;
    Stack::new(vec![
        LayerSpec::Upsample2x,
        LayerSpec::Conv { out_ch: w1, k: 3, stride: 1, pad: 1, act: Activation::Relu },
        LayerSpec::Upsample2x,
        LayerSpec::Conv { out_ch, k: 3, stride: 1, pad: 1, act: Activation::Tanh },
    ])
}

#[derive(Debug)]
pub struct MultiTaskGenerator {
    pub cfg: GeneratorConfig,
    pub input_shape: (usize, usize, usize),
    pub encoder: Stack,
    pub decoders: Vec<Stack>,
    pub params: ParamSet,
    /// Fixed random patterns, one per task; empty in per-instance mode.
    pub z: Vec<Tensor>,
    encoder_calls: AtomicU64,
}

impl MultiTaskGenerator {
    pub fn new(cfg: GeneratorConfig, input_shape: (usize, usize, usize)) -> Result<MultiTaskGenerator> {
        cfg.validate(input_shape)?;
        let (c, h, w) = input_shape;
        let encoder = encoder_stack(&cfg);
        let mut params = ParamSet::new();
        let root = DetRng::from_seed(cfg.seed);
        let mut init_rng = root.derive("generator-init");
        let latent = encoder.init_params(Feat::Chw(c, h, w), "enc/", &mut params, &mut init_rng)?;
        let mut decoders = Vec::with_capacity(cfg.num_tasks);
        for t in 0..cfg.num_tasks {
            let dec = decoder_stack(&cfg, c);
            let out = dec.init_params(latent, &format!("dec{}/", t + 1), &mut params, &mut init_rng)?;
            if out != Feat::Chw(c, h, w) {
                return Err(MtaError::Config(format!(
                    "decoder {} produces {out:?}, expected the input shape back",
                    t + 1
                )));
            }
            decoders.push(dec);
        }
        let z = match cfg.mode {
            AttackMode::Universal => (0..cfg.num_tasks)
                .map(|t| {
                    let mut zr = root.derive_idx("z", t as u64);
                    Tensor::rand_uniform(&mut zr, &[1, c, h, w])
                })
                .collect(),
            AttackMode::PerInstance => Vec::new(),
        };
        Ok(MultiTaskGenerator {
            cfg,
            input_shape,
            encoder,
            decoders,
            params,
            z,
            encoder_calls: AtomicU64::new(0),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.decoders.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.total_params()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.params_with_prefix("enc/")
    }

    pub fn decoder_param_count(&self, task: usize) -> usize {
        self.params.params_with_prefix(&format!("dec{}/", task + 1))
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    /// How many times the encoder ran since construction or the last reset.
    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_encoder_calls(&self) {
        self.encoder_calls.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, x: &Tensor, what: &'static str) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if x.rank() != 4 || x.shape()[1] != c || x.shape()[2] != h || x.shape()[3] != w {
            return Err(MtaError::shape(
                what,
                format!("expected [B,{c},{h},{w}], got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Run the shared encoder. Every path through the generator funnels
    /// through here, which is what makes the call counter trustworthy.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, "encode")?;
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        self.encoder.forward(&self.params, "enc/", x)
    }

    /// Decode a latent with task `t`'s decoder and scale each sample into
    /// the eps-ball.
    pub fn decode(&self, task: usize, latent: &Tensor) -> Result<Tensor> {
        if task >= self.num_tasks() {
            return Err(MtaError::InvalidCall(format!(
                "task {task} out of range (generator has {})",
                self.num_tasks()
            )));
        }
        let raw = self.decoders[task].forward(&self.params, &format!("dec{}/", task + 1), latent)?;
        raw.project_norm_batch(self.cfg.eps, self.cfg.p)
    }

    /// Universal perturbation for one task: a pure function of the weights
    /// and the stored pattern, shaped `[1, C, H, W]`.
    pub fn generate_universal(&self, task: usize) -> Result<Tensor> {
        if self.cfg.mode != AttackMode::Universal {
            return Err(MtaError::InvalidCall(
                "generate_universal called on a per-instance generator".into(),
            ));
        }
        let latent = self.encode(&self.z[task])?;
        self.decode(task, &latent)
    }

    /// Per-instance perturbations for a batch, one per sample, each inside
    /// its own eps-ball.
    pub fn generate_per_instance(&self, task: usize, x: &Tensor) -> Result<Tensor> {
        if self.cfg.mode != AttackMode::PerInstance {
            return Err(MtaError::InvalidCall(
                "generate_per_instance called on a universal generator".into(),
            ));
        }
        self.check_input(x, "generate_per_instance")?;
        let latent = self.encode(x)?;
        self.decode(task, &latent)
    }

    /// Encode once for all tasks. Decoding the result with each task equals
    /// [`Self::generate_per_instance`] bit-exactly; only the encoder work is
    /// shared.
    pub fn shared_encoding_path(&self, x: &Tensor) -> Result<Tensor> {
        if self.cfg.mode != AttackMode::PerInstance {
            return Err(MtaError::InvalidCall(
                "the shared encoding path needs a per-instance generator".into(),
            ));
        }
        self.encode(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::json!({
            "format": "generator",
            "config": self.cfg,
            "input_shape": [self.input_shape.0, self.input_shape.1, self.input_shape.2],
        });
        let mut a = Archive::new(manifest.to_string());
        for (name, t) in self.params.iter() {
            a.insert(name.clone(), t);
        }
        for (t, z) in self.z.iter().enumerate() {
            a.insert(format!("z{}", t + 1), z);
        }
        a.save(path)
    }

    /// Load a checkpoint; the result comes back frozen.
    pub fn load(path: &Path) -> Result<MultiTaskGenerator> {
        let origin = path.display().to_string();
        let a = Archive::load(path)?;
        let m: serde_json::Value = serde_json::from_str(&a.manifest)
            .map_err(|e| MtaError::format(&origin, format!("manifest is not valid JSON: {e}")))?;
        if m["format"] != "generator" {
            return Err(MtaError::format(&origin, "manifest format is not \"generator\""));
        }
        let cfg: GeneratorConfig = serde_json::from_value(m["config"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad config: {e}")))?;
        let shape = m["input_shape"]
            .as_array()
            .filter(|s| s.len() == 3)
            .ok_or_else(|| MtaError::format(&origin, "input_shape must be a 3-element array"))?;
        let input_shape = (
            shape[0].as_u64().unwrap_or(0) as usize,
            shape[1].as_u64().unwrap_or(0) as usize,
            shape[2].as_u64().unwrap_or(0) as usize,
        );
        let encoder = encoder_stack(&cfg);
        let decoders: Vec<Stack> =
            (0..cfg.num_tasks).map(|_| decoder_stack(&cfg, input_shape.0)).collect();
        let mut params = ParamSet::new();
        let mut z = Vec::new();
        for name in a.names() {
            let t = a.require(name, &origin)?;
            if name.starts_with('z') && name[1..].chars().all(|c| c.is_ascii_digit()) {
                z.push(t);
            } else {
                params.insert(name.clone(), t);
            }
        }
        if cfg.mode == AttackMode::Universal && z.len() != cfg.num_tasks {
            return Err(MtaError::format(
                &origin,
                format!("expected {} stored patterns, found {}", cfg.num_tasks, z.len()),
            ));
        }
        Ok(MultiTaskGenerator {
            cfg,
            input_shape,
            encoder,
            decoders,
            params,
            z,
            encoder_calls: AtomicU64::new(0),
        })
    }
}

/// `x̂ = x + v`. Accepts equal shapes, or a single-sample `v` broadcast over
/// the batch (the universal case). `clamp_range` clips the result
/// elementwise when set; the default leaves `x + v` untouched.
pub fn apply_perturbation(x: &Tensor, v: &Tensor, clamp_range: Option<(f64, f64)>) -> Result<Tensor> {
    let compatible = x.shape() == v.shape()
        || (x.rank() == v.rank() && v.shape()[0] == 1 && x.shape()[1..] == v.shape()[1..]);
    if !compatible {
        return Err(MtaError::shape(
            "apply_perturbation",
            format!("x {:?} vs v {:?}", x.shape(), v.shape()),
        ));
    }
    let sum = x.add(v)?;
    match clamp_range {
        None => Ok(sum),
        Some((lo, hi)) => {
            if lo >= hi {
                return Err(MtaError::domain(
                    "apply_perturbation",
                    format!("empty clamp range [{lo}, {hi}]"),
                ));
            }
            Ok(sum.clamp_min(lo).scale(-1.0).clamp_min(-hi).scale(-1.0))
        }
    }
}

/// A finished set of per-task perturbations plus the provenance needed to
/// interpret them.
#[derive(Debug, Clone)]
pub struct PerturbationBundle {
    pub mode: AttackMode,
    pub eps: f64,
    pub p: NormKind,
    pub generator_checksum: u64,
    pub seed: u64,
    pub perturbations: Vec<Tensor>,
}

impl PerturbationBundle {
    /// Wrap per-task perturbations, checking the norm bound per sample.
    pub fn new(
        mode: AttackMode,
        eps: f64,
        p: NormKind,
        generator_checksum: u64,
        seed: u64,
        perturbations: Vec<Tensor>,
    ) -> Result<PerturbationBundle> {
        let limit = eps * (1.0 + 1e-9);
        for (t, v) in perturbations.iter().enumerate() {
            let b = v.shape()[0];
            let row = v.numel() / b;
            let data = v.data();
            for i in 0..b {
                let nrm = match p {
                    NormKind::LInf => data[i * row..(i + 1) * row]
                        .iter()
                        .fold(0.0f64, |m, &x| m.max(x.abs())),
                    NormKind::L2 => data[i * row..(i + 1) * row]
                        .iter()
                        .map(|&x| x * x)
                        .sum::<f64>()
                        .sqrt(),
                };
                if nrm > limit {
                    return Err(MtaError::domain(
                        "perturbation_bundle",
                        format!("task {} sample {i} has norm {nrm} > {limit}", t + 1),
                    ));
                }
            }
        }
        Ok(PerturbationBundle { mode, eps, p, generator_checksum, seed, perturbations })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::json!({
            "format": "perturbations",
            "mode": self.mode,
            "eps": self.eps,
            "p": self.p,
            "generator_checksum": self.generator_checksum.to_string(),
            "seed": self.seed,
        });
        let mut a = Archive::new(manifest.to_string());
        for (t, v) in self.perturbations.iter().enumerate() {
            a.insert(format!("v{}", t + 1), v);
        }
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<PerturbationBundle> {
        let origin = path.display().to_string();
        let a = Archive::load(path)?;
        let m: serde_json::Value = serde_json::from_str(&a.manifest)
            .map_err(|e| MtaError::format(&origin, format!("manifest is not valid JSON: {e}")))?;
        if m["format"] != "perturbations" {
            return Err(MtaError::format(&origin, "manifest format is not \"perturbations\""));
        }
        let mode: AttackMode = serde_json::from_value(m["mode"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad mode: {e}")))?;
        let p: NormKind = serde_json::from_value(m["p"].clone())
            .map_err(|e| MtaError::format(&origin, format!("bad norm: {e}")))?;
        let eps = m["eps"]
            .as_f64()
            .ok_or_else(|| MtaError::format(&origin, "eps missing"))?;
        let checksum = m["generator_checksum"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MtaError::format(&origin, "generator_checksum missing"))?;
        let seed = m["seed"]
            .as_u64()
            .ok_or_else(|| MtaError::format(&origin, "seed missing"))?;
        let mut perturbations = Vec::new();
        let mut t = 1;
        while let Some(v) = a.get(&format!("v{t}")) {
            perturbations.push(v.clone());
            t += 1;
        }
        if perturbations.is_empty() {
            return Err(MtaError::format(&origin, "no perturbation tensors found"));
        }
        PerturbationBundle::new(mode, eps, p, checksum, seed, perturbations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: AttackMode) -> GeneratorConfig {
        GeneratorConfig::new(3, mode, 0.1, 17)
    }

    #[test]
    fn construction_is_deterministic_and_patterns_differ() {
        let a = MultiTaskGenerator::new(cfg(AttackMode::Universal), (1, 16, 16)).unwrap();
        let b = MultiTaskGenerator::new(cfg(AttackMode::Universal), (1, 16, 16)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.z.len(), 3);
        assert_ne!(a.z[0].data(), a.z[1].data());
        assert_ne!(a.z[1].data(), a.z[2].data());
        assert_eq!(a.z[0].data(), b.z[0].data());
        assert!(a.z.iter().all(|z| z.data().iter().all(|&v| (0.0..1.0).contains(&v))));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let g = MultiTaskGenerator::new(cfg(AttackMode::Universal), (1, 16, 16)).unwrap();
        let (w1, w2) = (8usize, 16usize);
        let conv = |co: usize, ci: usize| co * ci * 9 + co;
        let enc = conv(w1, 1) + conv(w2, w1) + 2 * (2 * conv(w2, w2));
        let dec = conv(w1, w2) + conv(1, w1);
        assert_eq!(g.encoder_param_count(), enc);
        assert_eq!(g.decoder_param_count(0), dec);
        assert_eq!(g.param_count(), enc + 3 * dec);
    }

    #[test]
    fn universal_outputs_are_stable_and_bounded() {
        let g = MultiTaskGenerator::new(cfg(AttackMode::Universal), (1, 16, 16)).unwrap();
        let v1 = g.generate_universal(0).unwrap();
        let v2 = g.generate_universal(0).unwrap();
        assert_eq!(v1.data(), v2.data());
        assert_eq!(v1.shape(), &[1, 1, 16, 16]);
        assert!(v1.norm(NormKind::LInf) <= 0.1 * (1.0 + 1e-9));
        assert!(g.generate_per_instance(0, &v1).is_err());
    }

    #[test]
    fn per_instance_projects_every_sample() {
        let mut c = cfg(AttackMode::PerInstance);
        c.eps = 0.05;
        let g = MultiTaskGenerator::new(c, (1, 16, 16)).unwrap();
        let mut rng = DetRng::from_seed(4);
        let x = Tensor::rand_uniform(&mut rng, &[5, 1, 16, 16]);
        let v = g.generate_per_instance(1, &x).unwrap();
        assert_eq!(v.shape(), x.shape());
        let row = 16 * 16;
        for i in 0..5 {
            let nrm = v.data()[i * row..(i + 1) * row]
                .iter()
                .fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(nrm <= 0.05 * (1.0 + 1e-9));
        }
        assert!(g.generate_universal(0).is_err());
    }

    #[test]
    fn shared_path_matches_per_task_generation_bit_exact() {
        let g = MultiTaskGenerator::new(cfg(AttackMode::PerInstance), (3, 16, 16)).unwrap();
        let mut rng = DetRng::from_seed(9);
        let x = Tensor::rand_uniform(&mut rng, &[2, 3, 16, 16]);
        g.reset_encoder_calls();
        let latent = g.shared_encoding_path(&x).unwrap();
        let shared: Vec<Tensor> = (0..3).map(|t| g.decode(t, &latent).unwrap()).collect();
        assert_eq!(g.encoder_calls(), 1);
        for t in 0..3 {
            let direct = g.generate_per_instance(t, &x).unwrap();
            assert_eq!(shared[t].data(), direct.data());
        }
        assert_eq!(g.encoder_calls(), 4);
    }

    #[test]
    fn apply_perturbation_broadcasts_and_clamps() {
        let x = Tensor::from_vec(vec![0.5, 0.99, 0.1, 0.2], &[2, 1, 1, 2]).unwrap();
        let v = Tensor::from_vec(vec![0.04, 0.04], &[1, 1, 1, 2]).unwrap();
        let plain = apply_perturbation(&x, &v, None).unwrap();
        assert!((plain.data()[1] - 1.03).abs() < 1e-15);
        let clamped = apply_perturbation(&x, &v, Some((0.0, 1.0))).unwrap();
        assert_eq!(clamped.data()[1], 1.0);
        assert!((clamped.data()[0] - 0.54).abs() < 1e-15);
        let bad = Tensor::from_vec(vec![0.0; 3], &[3]).unwrap();
        assert!(apply_perturbation(&x, &bad, None).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let g = MultiTaskGenerator::new(cfg(AttackMode::Universal), (1, 16, 16)).unwrap();
        let path = dir.path().join("gen.nta");
        g.save(&path).unwrap();
        let back = MultiTaskGenerator::load(&path).unwrap();
        assert_eq!(back.checksum(), g.checksum());
        for t in 0..3 {
            assert_eq!(back.z[t].data(), g.z[t].data());
            assert_eq!(
                back.generate_universal(t).unwrap().data(),
                g.generate_universal(t).unwrap().data()
            );
        }
    }

    #[test]
    fn bundle_rejects_norm_violations_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let good = Tensor::from_vec(vec![0.1, -0.1], &[1, 1, 1, 2]).unwrap();
        let bundle = PerturbationBundle::new(
            AttackMode::Universal,
            0.1,
            NormKind::LInf,
            42,
            7,
            vec![good.clone(), good.clone()],
        )
        .unwrap();
        let path = dir.path().join("vs.nta");
        bundle.save(&path).unwrap();
        let back = PerturbationBundle::load(&path).unwrap();
        assert_eq!(back.perturbations.len(), 2);
        assert_eq!(back.generator_checksum, 42);
        assert_eq!(back.perturbations[0].data(), good.data());

        let bad = Tensor::from_vec(vec![0.2, 0.0], &[1, 1, 1, 2]).unwrap();
        assert!(PerturbationBundle::new(
            AttackMode::Universal,
            0.1,
            NormKind::LInf,
            0,
            0,
            vec![bad]
        )
        .is_err());
    }

    #[test]
    fn odd_resolutions_are_rejected() {
        assert!(MultiTaskGenerator::new(cfg(AttackMode::Universal), (1, 15, 16)).is_err());
        assert!(MultiTaskGenerator::new(cfg(AttackMode::Universal), (1, 16, 18)).is_err());
    }
}
