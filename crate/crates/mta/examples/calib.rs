use std::time::Instant;

use mta::attack::{train_gap_baseline, train_mta, AttackConfig};
use mta::data::{make_shared_label_suite_with, SharedLabelParams, SuiteParams};

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn suite(seed: u64) -> mta::data::MultiTaskDataset {
    let params = SharedLabelParams {
        center_spread: envf("SPREAD", 0.08),
        noise_std: envf("NOISE", 0.2),
        mix_fraction: envf("MIX", 0.5),
    };
    let ds = make_shared_label_suite_with(
        seed,
        3,
        envf("C", 5.0) as usize,
        envf("N", 500.0) as usize,
        (1, 16, 16),
        params,
    )
    .unwrap();
    match std::env::var("TESTF").ok().and_then(|s| s.parse::<f64>().ok()) {
        Some(f) => ds.split_train_test(f).unwrap(),
        None => ds,
    }
}
use mta::eval::{accuracy, evaluate};
use mta::generator::{AttackMode, GeneratorConfig, MultiTaskGenerator};
use mta::victim::{train_independent_family, FitConfig, VictimModel};

fn victims_for(
    ds: &mta::data::MultiTaskDataset,
    seed: u64,
    epochs: usize,
) -> (Vec<VictimModel>, Vec<f64>, f64) {
    let t0 = Instant::now();
    let fit = FitConfig { epochs, batch: 32, lr: envf("VLR", 1e-3) };
    let mut victims = train_independent_family(ds, &fit, seed).unwrap();
    let mut accs = Vec::new();
    for (t, v) in victims.iter_mut().enumerate() {
        v.freeze();
        let (x, y) = ds.test_set(t).unwrap();
        accs.push(accuracy(v, &x, &y).unwrap());
    }
    (victims, accs, t0.elapsed().as_secs_f64())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).map(String::as_str).unwrap_or("victims");
    match stage {
        "victims" => {
            for seed in [1u64, 2, 3] {
                for epochs in [1600usize, 3200] {
                    let ds = suite(seed);
                    let (_, accs, secs) = victims_for(&ds, seed, epochs);
                    println!("seed={seed} epochs={epochs} accs={accs:?} secs={secs:.1}");
                }
            }
        }
        "potency" => {
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
            for seed in [1u64, 2, 3] {
                let ds = suite(seed);
                let (victims, accs, vsecs) = victims_for(&ds, seed, envf("VEP", 800.0) as usize);
                let mut gen = MultiTaskGenerator::new(
                    GeneratorConfig::new(3, AttackMode::Universal, 0.1, seed),
                    (1, 16, 16),
                )
                .unwrap();
                let cfg = AttackConfig { epochs, seed, lr: envf("ALR", 2e-4), ..AttackConfig::default() };
                let t0 = Instant::now();
                train_mta(&mut gen, &victims, &ds, &cfg).unwrap();
                let asecs = t0.elapsed().as_secs_f64();
                gen.freeze();
                let rep = evaluate(&gen, &victims, &ds, "mta", "non_targeted", None, seed).unwrap();
                let fool = rep.average(true, "fooling").unwrap();
                let per: Vec<f64> =
                    rep.attacked.iter().map(|r| r["fooling"]).collect();
                println!(
                    "seed={seed} vacc={accs:?} ({vsecs:.0}s) fooling avg={fool:.3} per={per:?} attack={asecs:.0}s"
                );
            }
        }
        "directional" => {
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
            let eps: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.02);
            let total = Instant::now();
            for seed in [1u64, 2, 3] {
                let ds = suite(seed);
                let (victims, vaccs, _) = victims_for(&ds, seed, envf("VEP", 800.0) as usize);
                let mode = match std::env::var("MODE").as_deref() {
                    Ok("per_instance") => AttackMode::PerInstance,
                    _ => AttackMode::Universal,
                };
                let mut proto = GeneratorConfig::new(3, mode, eps, seed);
                proto.widths = (envf("GW1", 8.0) as usize, envf("GW2", 16.0) as usize);
                proto.blocks = envf("BLOCKS", 2.0) as usize;
                let cfg = AttackConfig {
                    epochs,
                    seed,
                    lr: envf("ALR", 2e-4),
                    batch: envf("BATCH", 10.0) as usize,
                    ..AttackConfig::default()
                };

                let mut gen = MultiTaskGenerator::new(proto, (1, 16, 16)).unwrap();
                let t0 = Instant::now();
                train_mta(&mut gen, &victims, &ds, &cfg).unwrap();
                let mta_secs = t0.elapsed().as_secs_f64();
                gen.freeze();
                let mta_rep = evaluate(&gen, &victims, &ds, "mta", "non_targeted", None, seed).unwrap();
                let mta_fool = mta_rep.average(true, "fooling").unwrap();
                let mta_per: Vec<f64> = mta_rep.attacked.iter().map(|r| r["fooling"]).collect();

                let t1 = Instant::now();
                let (mut gens, _) = train_gap_baseline(&victims, &ds, &proto, &cfg).unwrap();
                let gap_secs = t1.elapsed().as_secs_f64();
                let mut gap_fools = Vec::new();
                for (t, g) in gens.iter_mut().enumerate() {
                    g.freeze();
                    let (x, _) = ds.test_set(t).unwrap();
                    let v = match mode {
                        AttackMode::Universal => g.generate_universal(0).unwrap(),
                        AttackMode::PerInstance => g.generate_per_instance(0, &x).unwrap(),
                    };
                    let xhat = mta::generator::apply_perturbation(&x, &v, None).unwrap();
                    gap_fools.push(mta::eval::fooling_ratio(&victims[t], &x, &xhat).unwrap());
                }
                let gap_fool = gap_fools.iter().sum::<f64>() / gap_fools.len() as f64;
                println!(
                    "seed={seed} eps={eps} vacc={vaccs:?} mta={mta_fool:.4} per={mta_per:?} ({mta_secs:.0}s) gap={gap_fool:.4} per={gap_fools:?} ({gap_secs:.0}s) diff={:+.4}",
                    mta_fool - gap_fool
                );
            }
            println!("total={:.0}s", total.elapsed().as_secs_f64());
        }
        "ringoracle" => {
            let eps = envf("EPS", 0.1);
            for seed in [1u64, 2, 3] {
                let ds = suite(seed);
                let (victims, accs, _) = victims_for(&ds, seed, 800);
                let mut per_task_best = Vec::new();
                for t in 0..3 {
                    let (x, y) = ds.test_set(t).unwrap();
                    let n = x.shape()[0];
                    let d: usize = x.shape()[1..].iter().product();
                    // estimate class centers from the test samples themselves
                    let classes = ds.tasks[t].classes;
                    let mut centers = vec![vec![0.0f64; d]; classes];
                    let mut counts = vec![0usize; classes];
                    for i in 0..n {
                        let c = y.data()[i] as usize - 1;
                        counts[c] += 1;
                        for j in 0..d {
                            centers[c][j] += x.data()[i * d + j];
                        }
                    }
                    for c in 0..classes {
                        for j in 0..d {
                            centers[c][j] /= counts[c] as f64;
                        }
                    }
                    // push along the direction from the grand mean toward each center
                    let mut grand = vec![0.0f64; d];
                    for c in 0..classes {
                        for j in 0..d {
                            grand[j] += centers[c][j] / classes as f64;
                        }
                    }
                    let mut best = 0.0f64;
                    for c in 0..classes {
                        let v: Vec<f64> = (0..d)
                            .map(|j| {
                                let g = centers[c][j] - grand[j];
                                if g > 0.0 { eps } else if g < 0.0 { -eps } else { 0.0 }
                            })
                            .collect();
                        let vt = mta::tensor::Tensor::from_vec(v, &[1, 1, 16, 16]).unwrap();
                        let xhat = mta::generator::apply_perturbation(&x, &vt, None).unwrap();
                        let f = mta::eval::fooling_ratio(&victims[t], &x, &xhat).unwrap();
                        best = best.max(f);
                    }
                    per_task_best.push(best);
                }
                let avg = per_task_best.iter().sum::<f64>() / 3.0;
                println!("seed={seed} eps={eps} vacc={accs:?} ring_oracle avg={avg:.3} per={per_task_best:?}");
            }
        }
        "oracle" => {
            let eps = envf("EPS", 0.1);
            for seed in [1u64, 2, 3] {
                let ds = suite(seed);
                let (victims, accs, _) = victims_for(&ds, seed, 400);
                let mut fools = Vec::new();
                for t in 0..3 {
                    let (x, y) = ds.test_set(t).unwrap();
                    // universal direction: sign of the average input gradient
                    let per = mta::attack::fgsm_perturb(&victims[t], &x, &y, 1.0).unwrap();
                    let b = per.shape()[0];
                    let plane: usize = per.shape()[1..].iter().product();
                    let mut acc = vec![0.0f64; plane];
                    for i in 0..b {
                        for j in 0..plane {
                            acc[j] += per.data()[i * plane + j];
                        }
                    }
                    let v: Vec<f64> = acc
                        .iter()
                        .map(|&g| if g > 0.0 { eps } else if g < 0.0 { -eps } else { 0.0 })
                        .collect();
                    let vt = mta::tensor::Tensor::from_vec(v, &[1, 1, 16, 16]).unwrap();
                    let xhat = mta::generator::apply_perturbation(&x, &vt, None).unwrap();
                    fools.push(mta::eval::fooling_ratio(&victims[t], &x, &xhat).unwrap());
                }
                let avg = fools.iter().sum::<f64>() / 3.0;
                println!("seed={seed} eps={eps} vacc={accs:?} oracle_fooling avg={avg:.3} per={fools:?}");
            }
        }
        other => eprintln!("unknown stage {other}"),
    }
}
