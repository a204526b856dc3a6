//! Acceptance criteria. Each test prints one PASS/FAIL line to stderr (not
//! captured by the harness) and then asserts the verdict. The tests share a
//! lock so that the timed ones run alone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use metashift_cli::artifacts::Layout;
use metashift_cli::commands::shift::ShiftState;
use metashift_core::eval::{
    aggregate, best_accuracy, finetune_and_eval, qq_pairs, FinetuneResult, FinetuneSettings,
};
use metashift_core::meta::{
    fomaml_meta_gradient, run_ensemble, Algorithm, Episode, MetaConfig, MetaSplit, Target,
};
use metashift_core::nn::{
    gradient_check, init_params, sgd_step, value_and_grad, ArchName, ArchitectureSpec, ConvSpec,
    GradCheckOptions, LinearSpec, ParameterSet,
};
use metashift_core::seed::{derive, derive_path, rng, rng_at, stream};
use metashift_core::shift::{
    center_columns, compute_pu, diversity_weights, linear_cka, mean_weighted_similarity,
    select_validation_uniform, similarity_to_distance, submatrix, uniform_weights, ward_cluster,
    DMatrix,
};
use metashift_core::stats::{chi_square_gof, ks_uniform, normal_quantile};
use metashift_core::taskgen::signal::{onset_range, DT, WAVELET_HALF};
use metashift_core::taskgen::{
    generate_taskset, place_onset, render_signal, surrogate_propagate, wavelet, Design,
    FactorLevels, Frequency, Source, TaskSet, Velocity, FACTORIAL_SNR,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, title: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {n:>2} {} {title} ({:.1} s): {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn gaussian(rows: usize, cols: usize, g: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(g))
}

fn random_orthogonal(p: usize, g: &mut impl Rng) -> DMatrix<f64> {
    gaussian(p, p, g).qr().q()
}

#[test]
fn c01_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let samples = 64;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for (arch, cap) in [
        (ArchName::Mini, None),
        (ArchName::Small, Some(64)),
        (ArchName::Big, Some(24)),
        (ArchName::Huge, Some(8)),
    ] {
        let spec = ArchitectureSpec::build(arch);
        let opts = GradCheckOptions {
            eps: 1e-3,
            max_per_tensor: cap,
        };
        let mut arch_worst: f64 = 0.0;
        let mut skipped = 0;
        for seed in 0..5u64 {
            let mut g = rng_at(seed, &[stream::SIGNAL, arch as u64]);
            let xs: Vec<Vec<f64>> = (0..8)
                .map(|_| {
                    (0..2 * samples)
                        .map(|_| StandardNormal.sample(&mut g))
                        .collect()
                })
                .collect();
            let mut ys: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
            ys.shuffle(&mut g);
            let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
            let r = gradient_check(&spec, seed, &refs, &ys, &opts).unwrap();
            arch_worst = arch_worst.max(r.max_relative_error);
            skipped += r.skipped_kinks;
        }
        worst = worst.max(arch_worst);
        notes.push(format!("{arch} {arch_worst:.1e} ({skipped} kinks skipped)"));
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(120);
    verdict(
        1,
        "gradient correctness",
        pass,
        elapsed,
        &format!(
            "max relative error {worst:.2e} < 1e-4; {}",
            notes.join(", ")
        ),
    );
}

#[test]
fn c02_cka_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut g = rng(202);
    let (mut self_err, mut sym_err, mut inv_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..5 {
        let mut x = gaussian(60, 10, &mut g);
        let mut y = &x * gaussian(10, 7, &mut g) + gaussian(60, 7, &mut g);
        center_columns(&mut x);
        center_columns(&mut y);
        let s = linear_cka(&x, &y).unwrap();
        self_err = self_err.max((linear_cka(&x, &x).unwrap() - 100.0).abs());
        sym_err = sym_err.max((linear_cka(&y, &x).unwrap() - s).abs());
        for _ in 0..50 {
            let c = 10f64.powf(g.random_range(-2.0..2.0));
            let xq = &x * random_orthogonal(10, &mut g) * c;
            let yq = &y * random_orthogonal(7, &mut g) * (1.0 / c);
            inv_err = inv_err.max((linear_cka(&xq, &y).unwrap() - s).abs());
            inv_err = inv_err.max((linear_cka(&xq, &yq).unwrap() - s).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = self_err <= 1e-6 && sym_err < 1e-6 && inv_err < 1e-6;
    verdict(
        2,
        "CKA suite",
        pass,
        elapsed,
        &format!("|s(X,X)-100| {self_err:.1e}, symmetry {sym_err:.1e}, orthogonal/scale invariance {inv_err:.1e}"),
    );
}

/// p_u by direct enumeration over rows `v != u` of column `u`.
fn pu_oracle(a: &[Vec<f64>]) -> Vec<f64> {
    let t = a.len();
    (0..t)
        .map(|u| {
            let mut wins = 0;
            for (v, row) in a.iter().enumerate() {
                if v != u && a[u][u] > row[u] {
                    wins += 1;
                }
            }
            wins as f64 / (t - 1) as f64
        })
        .collect()
}

/// Ward linkage recomputed from the original distances at every step:
/// d^2(A, B) = 2|A||B|/(|A|+|B|) * (mean_AB d^2 - mean_AA d^2 / 2 - mean_BB d^2 / 2).
fn ward_oracle(d: &[Vec<f64>]) -> Vec<(usize, usize, f64, usize)> {
    let n = d.len();
    let mean_sq = |a: &[usize], b: &[usize]| {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += d[i][j] * d[i][j];
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let mut clusters: BTreeMap<usize, Vec<usize>> = (0..n).map(|i| (i, vec![i])).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let ids: Vec<usize> = clusters.keys().copied().collect();
        let mut best = (f64::INFINITY, 0, 0);
        for (k, &i) in ids.iter().enumerate() {
            for &j in &ids[k + 1..] {
                let (a, b) = (&clusters[&i], &clusters[&j]);
                let (na, nb) = (a.len() as f64, b.len() as f64);
                let d2 = 2.0 * na * nb / (na + nb)
                    * (mean_sq(a, b) - mean_sq(a, a) / 2.0 - mean_sq(b, b) / 2.0);
                if d2 < best.0 {
                    best = (d2, i, j);
                }
            }
        }
        let (d2, i, j) = best;
        let mut merged = clusters.remove(&i).unwrap();
        merged.extend(clusters.remove(&j).unwrap());
        let size = merged.len();
        clusters.insert(n + out.len(), merged);
        out.push((i, j, d2.max(0.0).sqrt(), size));
    }
    out
}

#[test]
fn c03_pu_and_ward_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut g = rng(303);
    let mut pu_ok = 0;
    for m in 0..100 {
        // Every other matrix sits on a coarse grid so that ties occur.
        let a: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                (0..8)
                    .map(|_| {
                        let v: f64 = g.random_range(0.0..1.0);
                        if m % 2 == 0 {
                            (v * 10.0).round() / 10.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let mat = DMatrix::from_fn(8, 8, |u, v| a[u][v]);
        if compute_pu(&mat).unwrap() == pu_oracle(&a) {
            pu_ok += 1;
        }
    }
    let mut ward_ok = 0;
    let mut max_height_err: f64 = 0.0;
    for _ in 0..50 {
        let pts = gaussian(6, 3, &mut g);
        let d: Vec<Vec<f64>> = (0..6)
            .map(|u| (0..6).map(|v| (pts.row(u) - pts.row(v)).norm()).collect())
            .collect();
        let dend = ward_cluster(&DMatrix::from_fn(6, 6, |u, v| d[u][v])).unwrap();
        let oracle = ward_oracle(&d);
        let mut same = dend.merges.len() == oracle.len();
        for (m, o) in dend.merges.iter().zip(&oracle) {
            let err = (m.height - o.2).abs() / o.2.max(1e-12);
            max_height_err = max_height_err.max(err);
            same &= m.left == o.0 && m.right == o.1 && m.size == o.3 && err < 1e-9;
        }
        ward_ok += usize::from(same);
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "p_u and Ward oracles",
        pu_ok == 100 && ward_ok == 50,
        elapsed,
        &format!(
            "p_u {pu_ok}/100 matrices match; Ward {ward_ok}/50 dendrograms match (max relative height error {max_height_err:.1e})"
        ),
    );
}

#[test]
fn c04_generator_invariants() {
    let _g = serial();
    let start = Instant::now();
    let reps = 100;
    let set = generate_taskset(Design::Desk, reps, 500, 404).unwrap();
    let power = |x: &[f64]| {
        let s = x.len() / 2;
        let p = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64;
        p(&x[..s]).max(p(&x[s..]))
    };
    let (mut signals, mut snr_ok, mut peak_ok, mut stored_ok) = (0, 0, 0, 0);
    let mut worst_snr: f64 = 0.0;
    for task in &set.tasks {
        for rep in 0..reps {
            let r = render_signal(task, rep).unwrap();
            let snr = power(&r.embedding.pure) / power(&r.embedding.noise);
            worst_snr = worst_snr.max((snr - FACTORIAL_SNR).abs());
            snr_ok += usize::from((snr - FACTORIAL_SNR).abs() <= 1e-6);
            let w = task.waveform(rep);
            let peak = w.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            peak_ok += usize::from((peak - 1.0).abs() <= 1e-6 && w.iter().all(|v| v.is_finite()));
            stored_ok += usize::from(w == r.embedding.data.as_slice());
            signals += 1;
        }
    }
    // Onset: 10^4 placements, 20 bins over the admissible range with exact
    // per-bin probabilities.
    let levels = FactorLevels {
        circles: 2,
        layers: 2,
        velocity: Velocity::LoHi,
        frequency: Frequency::LoHi,
        source: Source::Ricker,
    };
    let mut g = rng(405);
    let w = wavelet(Source::Ricker, 5.0, DT, 2 * WAVELET_HALF + 1).unwrap();
    let mut pure = surrogate_propagate(&w, &levels, 500, &mut g).unwrap();
    let (lo, hi) = onset_range(500);
    let width = hi - lo + 1;
    let bin = |o: usize| (o - lo) * 20 / width;
    let mut probs = vec![0.0; 20];
    for o in lo..=hi {
        probs[bin(o)] += 1.0 / width as f64;
    }
    let mut counts = vec![0u64; 20];
    for _ in 0..10_000 {
        place_onset(&mut pure, &mut g);
        counts[bin(pure.onset)] += 1;
    }
    let (_, p_onset) = chi_square_gof(&counts, &probs);
    let elapsed = start.elapsed();
    let pass = snr_ok == signals
        && peak_ok == signals
        && stored_ok == signals
        && p_onset > 0.01
        && elapsed < Duration::from_secs(300);
    verdict(
        4,
        "generator invariants",
        pass,
        elapsed,
        &format!(
            "{signals} signals: SNR within 1e-6 {snr_ok} (worst {worst_snr:.1e}), unit peak {peak_ok}, stored = rendered {stored_ok}; onset chi-square p = {p_onset:.3}"
        ),
    );
}

fn toy_spec() -> ArchitectureSpec {
    ArchitectureSpec::custom(
        ArchName::Mini,
        vec![ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
        }],
        Default::default(),
        vec![
            LinearSpec {
                in_dim: 3,
                out_dim: 4,
            },
            LinearSpec {
                in_dim: 4,
                out_dim: 1,
            },
        ],
    )
    .unwrap()
}

fn mean_query_gradient(
    spec: &ArchitectureSpec,
    phi: &ParameterSet<f64>,
    eps: &[(Episode<'_, f64>, Episode<'_, f64>)],
) -> ParameterSet<f64> {
    let mut acc = phi.zeros_like();
    for (_, q) in eps {
        let (_, g) = value_and_grad(spec, phi, &q.inputs, &q.labels).unwrap();
        acc.add_scaled(&g, 1.0 / eps.len() as f64);
    }
    acc
}

#[test]
fn c05_algorithm_fixed_points() {
    let _g = serial();
    let start = Instant::now();
    // Reptile, alpha = 0, ten epochs.
    let mut set = generate_taskset(Design::Desk, 20, 200, 505).unwrap();
    set.partition_all(&[5], 506).unwrap();
    let pool: Vec<usize> = (0..10).collect();
    let (train, validation) = select_validation_uniform(&pool, 0.2, &mut rng(507)).unwrap();
    let weights = uniform_weights(train.len());
    let cfg = MetaConfig {
        inner_lr: 0.0,
        max_epochs: 10,
        patience: 1000,
        ensembles: 2,
        seed: 508,
        ..MetaConfig::new(Algorithm::Reptile, ArchName::Mini, 5)
    };
    let split = MetaSplit {
        train: &train,
        validation: &validation,
        weights: &weights,
    };
    let members = run_ensemble(&cfg, &set, Target::Meta(split)).unwrap();
    let spec = ArchitectureSpec::build(ArchName::Mini);
    let reptile_fixed = members.iter().enumerate().all(|(e, t)| {
        let seed = derive_path(cfg.seed, &[stream::ENSEMBLE, e as u64]);
        let init = init_params(&spec, derive(seed, stream::INIT));
        let first = t.log.epochs[0].val_loss.to_bits();
        t.log.epochs.len() == 10
            && t.last == init
            && t.params == init
            && t.log.epochs.iter().all(|r| r.val_loss.to_bits() == first)
    });

    // FOMAML, alpha = 0, against plain gradient descent on the mean query
    // gradient, on a toy network.
    let toy = toy_spec();
    let mut g = rng(509);
    let data: Vec<(Vec<Vec<f64>>, Vec<u8>)> = (0..4)
        .map(|_| {
            let xs = (0..8)
                .map(|_| (0..2 * 16).map(|_| StandardNormal.sample(&mut g)).collect())
                .collect();
            (xs, (0..8).map(|i| (i % 2) as u8).collect())
        })
        .collect();
    let episodes: Vec<(Episode<'_, f64>, Episode<'_, f64>)> = data
        .iter()
        .map(|(xs, ys)| {
            let ep = |r: std::ops::Range<usize>| Episode {
                inputs: xs[r.clone()].iter().map(|v| v.as_slice()).collect(),
                labels: ys[r].to_vec(),
            };
            (ep(0..4), ep(4..8))
        })
        .collect();
    let mut a = init_params(&toy, 510).cast::<f64>();
    let mut b = a.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (_, ga) = fomaml_meta_gradient(&toy, &a, &episodes, 0.0).unwrap();
        sgd_step(&mut a, &ga, 0.1).unwrap();
        let gb = mean_query_gradient(&toy, &b, &episodes);
        sgd_step(&mut b, &gb, 0.1).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    let elapsed = start.elapsed();
    let pass = reptile_fixed && worst < 1e-6 && elapsed < Duration::from_secs(60);
    verdict(
        5,
        "algorithm fixed points",
        pass,
        elapsed,
        &format!(
            "Reptile alpha=0 bit-unchanged over 10 epochs: {reptile_fixed}; FOMAML alpha=0 vs averaged gradient descent max deviation {worst:.1e} over 20 steps"
        ),
    );
}

fn metashift(out: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_metashift"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success(), "metashift {args:?} failed: {status}");
}

#[test]
fn c06_desk_shift_structure() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let shift = [
        "--shift-n",
        "20",
        "--shift-ensembles",
        "4",
        "--shift-arch",
        "mini",
    ];
    metashift(
        out,
        &[
            "--seed",
            "6",
            "generate",
            "--tasks",
            "mini",
            "--reps",
            "100",
            "--n-values",
            "20",
        ],
    );
    let mut train = vec!["--seed", "6", "train", "--task-specific"];
    train.extend(shift);
    metashift(out, &train);
    let mut run = vec!["--seed", "6", "shift"];
    run.extend(shift);
    metashift(out, &run);
    let state = ShiftState::load(&Layout::new(out)).unwrap();
    let (_, p) = ks_uniform(&state.pu);
    let below = state.pu.iter().filter(|&&v| v < 0.9).count();
    let frac = below as f64 / state.pu.len() as f64;
    let elapsed = start.elapsed();
    let pass =
        state.pu.len() == 27 && p < 0.01 && frac >= 0.2 && elapsed < Duration::from_secs(1800);
    let mut sorted = state.pu.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    verdict(
        6,
        "desk-scale shift structure",
        pass,
        elapsed,
        &format!(
            "KS uniformity p = {p:.2e} (< 0.01); {below}/27 = {:.0}% of p_u below 0.9 (>= 20%); p_u range [{:.2}, {:.2}], median {median:.2}",
            100.0 * frac,
            sorted[0],
            sorted[sorted.len() - 1]
        ),
    );
}

fn curves(
    set: &TaskSet,
    algorithm: Algorithm,
    members: &[metashift_core::meta::Trained],
    test: &[usize],
    seed: u64,
    lr: f64,
) -> Vec<FinetuneResult> {
    let spec = ArchitectureSpec::build(ArchName::Mini);
    let settings = FinetuneSettings {
        algorithm,
        n: 5,
        k: 1,
        lr,
        seed,
    };
    let mut out = Vec::new();
    for (e, m) in members.iter().enumerate() {
        for &t in test {
            out.push(finetune_and_eval(&spec, &m.params, &set.tasks[t], e, &settings).unwrap());
        }
    }
    out
}

#[test]
fn c07_adaptation_speed_trend() {
    let _g = serial();
    let start = Instant::now();
    let master = 7;
    let mut set = generate_taskset(Design::Desk, 60, 500, master).unwrap();
    set.partition_all(&[5], derive(master, stream::PARTITION))
        .unwrap();
    let mut ids: Vec<usize> = (0..27).collect();
    ids.shuffle(&mut rng_at(master, &[stream::SPLIT]));
    let (test, pool) = (&ids[..4], &ids[4..16]);
    let (mut reptile, mut tdl) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let base = |a| MetaConfig {
            ensembles: 5,
            seed,
            ..MetaConfig::new(a, ArchName::Mini, 5)
        };
        let r_cfg = base(Algorithm::Reptile);
        let (train, validation) =
            select_validation_uniform(pool, 0.2, &mut rng_at(seed, &[stream::SPLIT])).unwrap();
        let weights = uniform_weights(train.len());
        let split = MetaSplit {
            train: &train,
            validation: &validation,
            weights: &weights,
        };
        let members = run_ensemble(&r_cfg, &set, Target::Meta(split)).unwrap();
        reptile.extend(curves(
            &set,
            Algorithm::Reptile,
            &members,
            test,
            seed,
            r_cfg.inner_lr,
        ));
        let t_cfg = base(Algorithm::Tdl);
        let members = run_ensemble(&t_cfg, &set, Target::Pool(pool)).unwrap();
        tdl.extend(curves(
            &set,
            Algorithm::Tdl,
            &members,
            test,
            seed,
            t_cfg.inner_lr,
        ));
    }
    let speed = |c: &[FinetuneResult]| {
        c.iter().map(|r| best_accuracy(r).1 as f64).sum::<f64>() / c.len() as f64
    };
    let early = |c: &[FinetuneResult]| {
        c.iter()
            .map(|r| r.accuracy[..=5].iter().sum::<f64>() / 6.0)
            .sum::<f64>()
            / c.len() as f64
    };
    let (rs, ts) = (speed(&reptile), speed(&tdl));
    let (ra, ta) = (early(&reptile), early(&tdl));
    let elapsed = start.elapsed();
    let pass = rs <= ts && ra >= ta - 0.02 && elapsed < Duration::from_secs(2700);
    verdict(
        7,
        "desk-scale adaptation-speed trend",
        pass,
        elapsed,
        &format!(
            "mean epoch of best accuracy: Reptile {rs:.2} vs TDL {ts:.2}; mean accuracy over FT epochs 0-5: Reptile {ra:.4} vs TDL {ta:.4} ({} curves each)",
            reptile.len()
        ),
    );
}

#[test]
fn c08_uq_calibration() {
    let _g = serial();
    let start = Instant::now();
    let mut g = rng(808);
    let (tasks, ensembles, reps) = (10, 20, 10_000);
    let mut covered = 0;
    for _ in 0..reps {
        let alpha: Vec<f64> = (0..tasks).map(|_| g.random_range(0.55..0.95)).collect();
        let sigma: Vec<f64> = (0..tasks).map(|_| g.random_range(0.01..0.08)).collect();
        let acc: Vec<Vec<f64>> = (0..tasks)
            .map(|t| {
                (0..ensembles)
                    .map(|_| {
                        alpha[t] + sigma[t] * Distribution::<f64>::sample(&StandardNormal, &mut g)
                    })
                    .collect()
            })
            .collect();
        let r = aggregate(&acc).unwrap();
        let truth = alpha.iter().sum::<f64>() / tasks as f64;
        covered += usize::from(r.ci_low <= truth && truth <= r.ci_high);
    }
    let coverage = covered as f64 / reps as f64;
    // QQ: 10^4 standard normal residuals, central 98% of quantiles.
    let mut q = rng(0);
    let residuals: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut q)).collect();
    let (lo, hi) = (normal_quantile(0.01), normal_quantile(0.99));
    let gap = qq_pairs(&residuals)
        .into_iter()
        .filter(|&(t, _)| t >= lo && t <= hi)
        .map(|(t, s)| (s - t).abs())
        .fold(0.0f64, f64::max);
    let elapsed = start.elapsed();
    let pass = (coverage - 0.95).abs() <= 0.03 && gap < 0.05 && elapsed < Duration::from_secs(120);
    verdict(
        8,
        "UQ calibration",
        pass,
        elapsed,
        &format!(
            "95% CI coverage {:.2}% over {reps} replications (95 +/- 3); QQ max gap {gap:.4} over the central 98% (< 0.05)",
            100.0 * coverage
        ),
    );
}

/// Similarity of eight tasks whose feature matrices scatter around one of
/// two random prototypes: tasks 0-4 around the first, 5-7 around the second.
fn planted_similarity() -> DMatrix<f64> {
    let mut g = rng(909);
    let protos = [gaussian(80, 12, &mut g), gaussian(80, 12, &mut g)];
    let feats: Vec<DMatrix<f64>> = (0..8)
        .map(|t| {
            let mut x = &protos[usize::from(t >= 5)] + gaussian(80, 12, &mut g) * 0.4;
            center_columns(&mut x);
            x
        })
        .collect();
    DMatrix::from_fn(8, 8, |u, v| linear_cka(&feats[u], &feats[v]).unwrap())
}

fn weighted_pair(s: &DMatrix<f64>, train: &[usize], test: &[usize]) -> (f64, f64) {
    let d = similarity_to_distance(s);
    let dend = ward_cluster(&submatrix(&d, train)).unwrap();
    let diverse = mean_weighted_similarity(train, &diversity_weights(&dend), test, s);
    let uniform = mean_weighted_similarity(train, &uniform_weights(train.len()), test, s);
    (uniform, diverse)
}

#[test]
fn c09_sampling_similarity_diagnostic() {
    let _g = serial();
    let start = Instant::now();
    let s = planted_similarity();
    // Five training tasks from the first cluster, two from the second; the
    // test task belongs to the second.
    let (u1, d1) = weighted_pair(&s, &[0, 1, 2, 3, 4, 5, 6], &[7]);
    // Two from each cluster: a balanced dendrogram.
    let (u2, d2) = weighted_pair(&s, &[0, 1, 5, 6], &[7]);
    let elapsed = start.elapsed();
    let pass = (d1 - u1).abs() > 0.5 && u2 == d2;
    verdict(
        9,
        "sampling-similarity diagnostic",
        pass,
        elapsed,
        &format!(
            "unbalanced: uniform {u1:.2} vs diverse {d1:.2} (gap {:.2} > 0.5); balanced: {u2:.6} vs {d2:.6} (equal: {})",
            (d1 - u1).abs(),
            u2 == d2
        ),
    );
}

fn tree_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// One full mini pipeline. `interrupted` first trains and evaluates a
/// partial grid, then resumes with the full one.
fn pipeline(out: &Path, jobs: &str, interrupted: bool) {
    let common = ["--seed", "10", "--jobs", jobs];
    let shift = [
        "--shift-n",
        "5",
        "--shift-ensembles",
        "2",
        "--max-epochs",
        "20",
        "--patience",
        "5",
    ];
    let grid = [
        "--n",
        "5",
        "--samplings",
        "uniform,diverse",
        "--ensembles",
        "2",
        "--max-epochs",
        "15",
        "--patience",
        "5",
    ];
    let run = |sub: &[&str], extra: &[&str]| {
        let mut args: Vec<&str> = common.to_vec();
        args.extend(sub);
        args.extend(extra);
        metashift(out, &args);
    };
    run(
        &[
            "generate",
            "--tasks",
            "mini",
            "--reps",
            "24",
            "--samples",
            "200",
            "--n-values",
            "5",
        ],
        &[],
    );
    run(&["train", "--task-specific"], &shift);
    run(&["shift"], &shift);
    if interrupted {
        run(&["train", "--algorithms", "reptile,tdl"], &grid);
        run(&["eval", "--algorithms", "reptile", "--k", "1"], &grid);
    }
    let algs = ["--algorithms", "reptile,fomaml,tdl,dnc"];
    run(&["train"], &[&algs[..], &grid[..]].concat());
    run(&["eval", "--k", "1,5"], &[&algs[..], &grid[..]].concat());
    run(&["report"], &[]);
}

#[test]
fn c10_end_to_end_determinism() {
    let _g = serial();
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "1", false);
    pipeline(b.path(), "2", true);
    let (fa, fb) = (tree_files(a.path()), tree_files(b.path()));
    let csv: Vec<&String> = fa.keys().filter(|k| k.ends_with(".csv")).collect();
    let csv_same = csv.iter().filter(|k| fb.get(**k) == fa.get(**k)).count();
    let other_diff: Vec<&String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k) && !k.ends_with(".csv"))
        .collect();
    let missing = fb.keys().filter(|k| !fa.contains_key(*k)).count();
    let headed = csv
        .iter()
        .filter(|k| fa[**k].starts_with(b"# config_hash: "))
        .count();
    let elapsed = start.elapsed();
    let pass = !csv.is_empty()
        && csv_same == csv.len()
        && missing == 0
        && other_diff.is_empty()
        && headed == csv.len()
        && elapsed < Duration::from_secs(3600);
    verdict(
        10,
        "end-to-end determinism",
        pass,
        elapsed,
        &format!(
            "{csv_same}/{} CSVs byte-identical (1 vs 2 threads, second run resumed from a partial grid); {} other files, {} differ; {headed} CSVs carry the config hash",
            csv.len(),
            fa.len() - csv.len(),
            other_diff.len()
        ),
    );
}
