use std::sync::OnceLock;

use metashift_core::eval::{finetune_and_eval, FinetuneSettings};
use metashift_core::meta::{
    fomaml_meta_gradient, reptile_meta_gradient, run_ensemble, train_member, Algorithm, Episode,
    MetaConfig, MetaSplit, Target,
};
use metashift_core::nn::{init_params, ArchName, ArchitectureSpec};
use metashift_core::seed::{derive, derive_path, rng, stream};
use metashift_core::shift::{select_validation_uniform, uniform_weights};
use metashift_core::taskgen::{generate_taskset, Design, TaskSet};

const N: usize = 5;

fn desk() -> &'static TaskSet {
    static SET: OnceLock<TaskSet> = OnceLock::new();
    SET.get_or_init(|| {
        let mut set = generate_taskset(Design::Desk, 24, 200, 17).unwrap();
        set.partition_all(&[N], 18).unwrap();
        set
    })
}

fn quick(algorithm: Algorithm) -> MetaConfig {
    MetaConfig {
        max_epochs: 6,
        patience: 3,
        ensembles: 2,
        seed: 5,
        ..MetaConfig::new(algorithm, ArchName::Mini, N)
    }
}

fn split(pool: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let (train, val) = select_validation_uniform(pool, 0.2, &mut rng(3)).unwrap();
    let w = uniform_weights(train.len());
    (train, val, w)
}

#[test]
fn reptile_with_zero_inner_rate_never_moves() {
    let cfg = MetaConfig {
        inner_lr: 0.0,
        max_epochs: 10,
        patience: 100,
        ..quick(Algorithm::Reptile)
    };
    let pool: Vec<usize> = (0..12).collect();
    let (train, validation, weights) = split(&pool);
    let s = MetaSplit {
        train: &train,
        validation: &validation,
        weights: &weights,
    };
    let t = train_member(&cfg, desk(), Target::Meta(s), 0).unwrap();
    let seed = derive_path(cfg.seed, &[stream::ENSEMBLE, 0]);
    let init = init_params(
        &ArchitectureSpec::build(ArchName::Mini),
        derive(seed, stream::INIT),
    );
    assert_eq!(t.log.epochs.len(), 10);
    assert_eq!(t.last, init);
    assert_eq!(t.params, init);
    let first = t.log.epochs[0].val_loss.to_bits();
    assert!(t.log.epochs.iter().all(|e| e.val_loss.to_bits() == first));
}

#[test]
fn first_order_directions_agree_at_one_step() {
    let spec = ArchitectureSpec::build(ArchName::Mini);
    let phi = init_params(&spec, 9).cast::<f64>();
    let task = &desk().tasks[4];
    let idx: Vec<usize> = task.partition(N).unwrap().support_query();
    let data: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| task.waveform(i).iter().map(|&v| v as f64).collect())
        .collect();
    let ep = Episode {
        inputs: data.iter().map(|v| v.as_slice()).collect(),
        labels: idx.iter().map(|&i| task.labels[i]).collect(),
    };
    let alpha = 1e-7;
    // Full batch, support = query: Reptile's displacement over alpha and the
    // FOMAML gradient both tend to the plain loss gradient.
    let mut reptile =
        reptile_meta_gradient(&spec, &phi, std::slice::from_ref(&ep), 1, alpha).unwrap();
    reptile.scale(1.0 / alpha);
    let (_, fomaml) = fomaml_meta_gradient(&spec, &phi, &[(ep.clone(), ep)], alpha).unwrap();
    let scale = fomaml.values().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale > 0.0);
    let diff = reptile.max_abs_diff(&fomaml);
    assert!(diff < 1e-6 * scale.max(1.0), "diff {diff} at scale {scale}");
}

#[test]
fn early_stopping_returns_the_best_checkpoint() {
    let cfg = MetaConfig {
        max_epochs: 3000,
        patience: 4,
        outer_lr: 1e-2,
        ..quick(Algorithm::Tdl)
    };
    let pool: Vec<usize> = (0..6).collect();
    let t = train_member(&cfg, desk(), Target::Pool(&pool), 1).unwrap();
    let ran = t.log.epochs.len();
    assert!(ran < cfg.max_epochs, "never stopped");
    assert_eq!(ran, t.log.best_epoch + cfg.patience);
    let best = t.log.epochs[t.log.best_epoch - 1].val_loss;
    assert!(t.log.epochs.iter().all(|e| e.val_loss >= best));
    // Re-running up to the best epoch ends exactly at the returned weights.
    let replay = MetaConfig {
        max_epochs: t.log.best_epoch,
        ..cfg
    };
    let r = train_member(&replay, desk(), Target::Pool(&pool), 1).unwrap();
    assert_eq!(r.last, t.params);
}

#[test]
fn reptile_tokens_match_pooled_training_size() {
    // 25 pool tasks leave 20 training tasks, four batches of five.
    let pool: Vec<usize> = (0..25).collect();
    let (train, validation, weights) = split(&pool);
    assert_eq!(train.len(), 20);
    let reptile = MetaConfig {
        max_epochs: 1,
        ensembles: 1,
        ..quick(Algorithm::Reptile)
    };
    let s = MetaSplit {
        train: &train,
        validation: &validation,
        weights: &weights,
    };
    let r = train_member(&reptile, desk(), Target::Meta(s), 0).unwrap();
    let tokens = r.log.epochs[0].pseudo_epochs * reptile.task_batch * 2 * N;
    let tdl = MetaConfig {
        max_epochs: 1,
        ensembles: 1,
        batch_size: 1,
        ..quick(Algorithm::Tdl)
    };
    let t = train_member(&tdl, desk(), Target::Pool(&pool), 0).unwrap();
    let d_tr = t.log.epochs[0].pseudo_epochs;
    let gap = (tokens as f64 - d_tr as f64).abs() / d_tr as f64;
    assert!(gap <= 0.03, "reptile {tokens} vs tdl {d_tr}");
}

#[test]
fn trainers_are_deterministic_across_thread_counts() {
    let pool: Vec<usize> = (0..10).collect();
    let (train, validation, weights) = split(&pool);
    let s = MetaSplit {
        train: &train,
        validation: &validation,
        weights: &weights,
    };
    let runs = |threads| {
        let tp = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        tp.install(|| {
            [
                (Algorithm::Reptile, Target::Meta(s)),
                (Algorithm::Fomaml, Target::Meta(s)),
                (Algorithm::Tdl, Target::Pool(&pool)),
                (Algorithm::Dnc, Target::Task(20)),
            ]
            .map(|(a, target)| run_ensemble(&quick(a), desk(), target).unwrap())
        })
    };
    let losses = |t: &metashift_core::meta::Trained| -> Vec<u64> {
        t.log.epochs.iter().map(|e| e.val_loss.to_bits()).collect()
    };
    let a = runs(1);
    for other in [runs(1), runs(3)] {
        for (x, y) in a.iter().zip(&other) {
            for (m, n) in x.iter().zip(y) {
                assert_eq!(m.params, n.params);
                assert_eq!(losses(m), losses(n));
            }
        }
    }
}

#[test]
fn finetuning_leaves_phi_alone_and_starts_equal() {
    let spec = ArchitectureSpec::build(ArchName::Mini);
    let phi = init_params(&spec, 21);
    let before = phi.clone();
    let task = &desk().tasks[7];
    for algorithm in Algorithm::ALL {
        let epoch0: Vec<f64> = [1, 3, 5]
            .iter()
            .map(|&k| {
                let s = FinetuneSettings {
                    algorithm,
                    n: N,
                    k,
                    lr: 1e-2,
                    seed: 2,
                };
                let r = finetune_and_eval(&spec, &phi, task, 0, &s).unwrap();
                let again = finetune_and_eval(&spec, &phi, task, 0, &s).unwrap();
                assert_eq!(r, again);
                r.accuracy[0]
            })
            .collect();
        assert!(
            epoch0.iter().all(|&a| a == epoch0[0]),
            "{algorithm}: {epoch0:?}"
        );
    }
    assert_eq!(phi, before);
}
