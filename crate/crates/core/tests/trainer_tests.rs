use cissl::data::*;
use cissl::losses::SclShape;
use cissl::net::MlpParams;
use cissl::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(iters: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.schedule.total_iters = iters;
    c.schedule.rampup_iters = iters / 2;
    c.schedule.lr_decay_points = vec![(iters * 4 / 5, 0.2)];
    c.eval_every = iters;
    c.hidden_width = 16;
    c.seed = seed;
    c
}

fn imbalanced_moons(seed: u64) -> CisslSplit {
    let pool = gen_two_moons(10 + 200 + 200, 0.1, seed).unwrap();
    let lab = imbalance_counts(10, 5.0, 2).unwrap();
    make_cissl_split(&pool, &lab, UnlabeledType::Same, 5.0, 200, 200, seed).unwrap()
}

#[test]
fn supervised_learns_balanced_moons() {
    let pool = gen_two_moons(500 + 10 + 500, 0.1, 21).unwrap();
    let lab = ClassCounts::uniform(500, 2).unwrap();
    let split = make_cissl_split(&pool, &lab, UnlabeledType::Uniform, 1.0, 10, 500, 21).unwrap();
    let mut cfg = small_config(2000, 21);
    cfg.hidden_width = 32;
    let r = train(&split, &AlgorithmSpec::new(Algorithm::Supervised), &cfg).unwrap();
    let errs: Vec<f64> = r.final_errors().iter().map(|e| e.unwrap()).collect();
    let mean = errs.iter().sum::<f64>() / 2.0;
    assert!(mean < 0.05, "validation error {mean}");
}

#[test]
fn zero_consistency_weight_reduces_to_supervised() {
    let split = imbalanced_moons(3);
    let mut cfg = small_config(200, 3);
    cfg.schedule.w_max = 0.0;
    let sup = train(&split, &AlgorithmSpec::new(Algorithm::Supervised), &cfg).unwrap();
    for algo in [
        Algorithm::PiModel,
        Algorithm::MeanTeacher,
        Algorithm::MeanTeacherScl {
            shape: SclShape::Linear,
            argmax: ArgmaxSource::Student,
        },
        Algorithm::PseudoLabel { threshold: 0.5 },
    ] {
        let r = train(&split, &AlgorithmSpec::new(algo), &cfg).unwrap();
        assert_eq!(r.student.as_slice(), sup.student.as_slice(), "{algo:?}");
        assert_eq!(r.final_errors(), sup.final_errors());
    }
}

#[test]
fn unreachable_threshold_reduces_pseudo_label_to_supervised() {
    let split = imbalanced_moons(4);
    let cfg = small_config(200, 4);
    let sup = train(&split, &AlgorithmSpec::new(Algorithm::Supervised), &cfg).unwrap();
    let pl = train(&split, &AlgorithmSpec::new(Algorithm::PseudoLabel { threshold: 1.0 }), &cfg).unwrap();
    assert_eq!(pl.student.as_slice(), sup.student.as_slice());
    assert!(pl.history.iter().all(|h| h.con_loss == 0.0));
}

#[test]
fn balanced_scl_is_bit_identical_to_mean_teacher() {
    let pool = gen_four_spins(100, 0.05, 5).unwrap();
    let split = make_cissl_split(&pool, &ClassCounts::uniform(5, 4).unwrap(), UnlabeledType::Same, 1.0, 40, 30, 5).unwrap();
    let cfg = small_config(150, 5);
    let mt = train(&split, &AlgorithmSpec::new(Algorithm::MeanTeacher), &cfg).unwrap();
    let scl = train(
        &split,
        &AlgorithmSpec::new(Algorithm::MeanTeacherScl {
            shape: SclShape::Exponential { beta: 0.5 },
            argmax: ArgmaxSource::Student,
        }),
        &cfg,
    )
    .unwrap();
    assert_eq!(history_csv(&mt.history), history_csv(&scl.history));
    assert_eq!(mt.target.unwrap().as_slice(), scl.target.unwrap().as_slice());
}

#[test]
fn ema_target_replays_student_updates() {
    let split = imbalanced_moons(6);
    let cfg = small_config(120, 6);
    let gamma = cfg.ema_decay;
    let theta0 = MlpParams::init(&cfg.layer_sizes(2), cfg.seed);
    let mut students = vec![theta0.as_slice().to_vec()];
    let mut targets = Vec::new();
    let mut observer = |_: usize, s: &MlpParams, t: Option<&MlpParams>| {
        students.push(s.as_slice().to_vec());
        targets.push(t.unwrap().as_slice().to_vec());
    };
    train_observed(&split, &AlgorithmSpec::new(Algorithm::MeanTeacher), &cfg, &mut observer).unwrap();
    let n = theta0.len();
    for t in [1, 2, 17, 120] {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let replay: f64 = (0..t)
                .map(|k| (1.0 - gamma.powi((t - k) as i32)) * (students[k + 1][i] - students[k][i]))
                .sum();
            worst = worst.max((targets[t - 1][i] - theta0.as_slice()[i] - replay).abs());
        }
        assert!(worst < 1e-8, "t = {t}: {worst}");
    }
}

#[test]
fn minor_class_sampling_frequency() {
    let split = imbalanced_moons(7);
    let minor = split.labeled_counts.minor_class();
    let mut sampler = BatchSampler::new(7, Sampling::WithReplacement);
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..3000 {
        let (_, ys, _) = sampler.sample(&split, 32, 1);
        hits += ys.iter().filter(|&&y| y == minor).count();
        total += ys.len();
    }
    let freq = hits as f64 / total as f64;
    assert!((freq - 2.0 / 12.0).abs() < 0.01, "{freq}");
}

#[test]
fn perturbations_are_centred_and_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = vec![Point2::new(0.5, -1.0); 20_000];
    let a = perturb(&base, 0.1, &mut rng);
    let b = perturb(&base, 0.1, &mut rng);
    let dx = |v: &[Point2]| v.iter().map(|p| p.x - 0.5).collect::<Vec<_>>();
    let (xa, xb) = (dx(&a), dx(&b));
    let n = xa.len() as f64;
    let mean = xa.iter().sum::<f64>() / n;
    let var = xa.iter().map(|v| v * v).sum::<f64>() / n;
    let cov = xa.iter().zip(&xb).map(|(u, v)| u * v).sum::<f64>() / n;
    assert!(mean.abs() < 3e-3, "{mean}");
    assert!((var / 0.01 - 1.0).abs() < 0.05, "{var}");
    assert!((cov / 0.01).abs() < 0.03, "{cov}");
    assert_eq!(perturb(&base[..3], 0.0, &mut rng), base[..3].to_vec());
}

#[test]
fn random_networks_sit_at_chance() {
    let val = gen_two_moons(1000, 0.1, 9).unwrap();
    let mean: f64 = (0..40)
        .map(|s| {
            let p = MlpParams::init(&[2, 64, 64, 2], 100 + s);
            let e = evaluate(&p, &val).unwrap();
            (e[0].unwrap() + e[1].unwrap()) / 2.0
        })
        .sum::<f64>()
        / 40.0;
    assert!((mean - 0.5).abs() < 0.05, "{mean}");
}

#[test]
fn training_is_deterministic() {
    let split = imbalanced_moons(10);
    let mut cfg = small_config(150, 10);
    cfg.eval_every = 50;
    for algo in [Algorithm::PiModel, Algorithm::PseudoLabel { threshold: 0.8 }] {
        let a = train(&split, &AlgorithmSpec::new(algo), &cfg).unwrap();
        let b = train(&split, &AlgorithmSpec::new(algo), &cfg).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.student, b.student);
    }
    let other = train(&split, &AlgorithmSpec::new(Algorithm::PiModel), &TrainConfig { seed: 11, ..cfg.clone() }).unwrap();
    let base = train(&split, &AlgorithmSpec::new(Algorithm::PiModel), &cfg).unwrap();
    assert_ne!(other.student, base.student);
}

#[test]
fn divergence_is_reported_with_snapshot() {
    let split = imbalanced_moons(12);
    let mut cfg = small_config(1000, 12);
    cfg.weight_decay = -1e3;
    cfg.momentum = 0.0;
    cfg.schedule.base_lr = 1.0;
    match train(&split, &AlgorithmSpec::new(Algorithm::MeanTeacher), &cfg) {
        Err(TrainError::Diverged { iteration, snapshot, .. }) => {
            assert!(iteration > 0);
            assert_eq!(snapshot.layer_sizes(), cfg.layer_sizes(2).as_slice());
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.history.len())),
    }
}
