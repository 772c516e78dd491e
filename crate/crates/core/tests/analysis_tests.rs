use cissl::analysis::*;
use cissl::net::{Gradient, MlpParams};
use cissl::optim::{EmaState, Schedule, SgdState};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_forms_reconstruct_random_gradients(
        gamma in 0.0f64..0.9999,
        delta in 0.0f64..0.95,
        grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..60),
        after in any::<bool>(),
    ) {
        let timing = if after { EmaTiming::AfterStep } else { EmaTiming::BeforeStep };
        let (theta, target) = brute_force_unroll(gamma, delta, 0.05, &grads, timing);
        let (s, t) = momentum_table(grads.len(), delta, gamma, timing).reconstruct(0.05, &grads);
        for i in 0..3 {
            prop_assert!((theta[i] - s[i]).abs() < 1e-10);
            prop_assert!((target[i] - t[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn gap_is_nonnegative_and_bounded(lag in 1usize..400, delta in 0.0f64..0.99, gamma in 0.0f64..0.9999) {
        let (student, target) = momentum_coefficients(lag, 0, delta, gamma);
        let gap = coefficient_gap(lag, 0, delta, gamma);
        prop_assert!(gap >= -1e-12);
        prop_assert!(target <= student + 1e-12);
        prop_assert!(student <= 1.0 / (1.0 - delta) + 1e-9);
    }

    #[test]
    fn gap_obeys_its_recursion(n in 2usize..200, delta in 0.0f64..0.99, gamma in 0.0f64..0.999) {
        let prev = coefficient_gap(n - 1, 0, delta, gamma);
        let next = coefficient_gap(n, 0, delta, gamma);
        let rec = gamma * (prev + delta.powi(n as i32 - 1));
        prop_assert!((next - rec).abs() < 1e-9 * (1.0 + rec.abs()));
    }

    #[test]
    fn ema_stays_inside_the_student_range(
        gamma in 0.0f64..=1.0,
        steps in prop::collection::vec(-1.0f64..1.0, 1..40),
    ) {
        let sizes = [2, 1, 2];
        let mut student = MlpParams::zeros(&sizes);
        let mut ema = EmaState::new(&student, gamma);
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for s in steps {
            for v in student.as_mut_slice() {
                *v += s;
            }
            let x = student.as_slice()[0];
            lo = lo.min(x);
            hi = hi.max(x);
            ema.update(&student).unwrap();
            let t = ema.target.as_slice()[0];
            prop_assert!(t >= lo - 1e-12 && t <= hi + 1e-12);
        }
    }

    #[test]
    fn rampup_is_monotone_and_capped(t in 0usize..5000, w_max in 0.0f64..50.0) {
        let s = Schedule { total_iters: 5000, rampup_iters: 2000, w_max, base_lr: 0.1, lr_decay_points: vec![(4000, 0.2)] };
        let (a, b) = (s.rampup_weight(t), s.rampup_weight(t + 1));
        prop_assert!(a <= b + 1e-15 && b <= w_max + 1e-12 && a >= 0.0);
    }
}

#[test]
fn momentum_sgd_matches_manual_recursion() {
    let sizes = [2, 2, 2];
    let mut params = MlpParams::zeros(&sizes);
    let mut sgd = SgdState::new(&params, 0.1, 0.9);
    let n = params.len();
    let (mut v, mut theta) = (vec![0.0; n], vec![0.0; n]);
    for step in 0..25 {
        let g: Vec<f64> = (0..n).map(|i| ((i * 7 + step * 3) % 5) as f64 - 2.0).collect();
        sgd.step(&mut params, &Gradient::from_flat(&sizes, g.clone()).unwrap()).unwrap();
        for i in 0..n {
            v[i] = 0.9 * v[i] + 0.1 * g[i];
            theta[i] -= v[i];
        }
    }
    for (a, b) in params.as_slice().iter().zip(&theta) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gap_curve_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gap.csv");
    let curve = gap_curve(50, 0.9, 0.95);
    write_gap_curve_csv(&path, &curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("lag,student_coeff,target_coeff,gap"));
    assert_eq!(text.lines().count(), 51);
    for (line, p) in text.lines().skip(1).zip(&curve) {
        let gap: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(gap, p.gap);
    }
}
