use diffcore::gradcheck::{central_difference, check_gradients, GradCheckConfig};
use diffcore::{DiffError, Result, Tape, Tensor};
use proptest::prelude::*;

fn vecf(v: &[f64]) -> Tensor {
    Tensor::vector(v).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn add_is_elementwise() {
    let mut tape = Tape::new();
    let out = tape.add(&vecf(&[1.0, 2.0]), &vecf(&[3.0, 4.0])).unwrap();
    assert_eq!(out.values(), &[4.0, 6.0]);
    assert!(out.is_constant());
}

#[test]
fn matmul_by_identity_returns_input() {
    let r = Tensor::matrix(3, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9]).unwrap();
    let mut tape = Tape::new();
    let out = tape.matmul(&Tensor::eye(3), &r).unwrap();
    assert_eq!(out.values(), r.values());
}

#[test]
fn norm_gradient_matches_finite_differences() {
    let x = [3.0, 4.0];
    let mut tape = Tape::new();
    let v = tape.var(&vecf(&x));
    let n = tape.norm(&v).unwrap();
    let g = tape.backward(&n).unwrap();
    let fd = central_difference(|p| (p[0] * p[0] + p[1] * p[1]).sqrt(), &x, 1e-5);
    assert_close(&fd, &[0.6, 0.8], 1e-9);
    assert_close(g.get(&v).unwrap(), &fd, 1e-9);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::new();
    let err = tape.add(&vecf(&[1.0, 2.0]), &vecf(&[1.0, 2.0, 3.0])).unwrap_err();
    assert_eq!(
        err,
        DiffError::ShapeMismatch {
            op: "add",
            lhs: vec![2],
            rhs: vec![3]
        }
    );
    let err = tape
        .matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]))
        .unwrap_err();
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn tensor_rejects_non_finite_and_bad_counts() {
    assert!(matches!(
        Tensor::new(&[2], vec![1.0, f64::NAN]),
        Err(DiffError::NonFinite { .. })
    ));
    assert!(matches!(
        Tensor::new(&[2, 2], vec![1.0; 3]),
        Err(DiffError::ValueCount { .. })
    ));
}

#[test]
fn non_finite_op_output_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.var(&vecf(&[-1.0]));
    assert!(matches!(tape.sqrt(&x), Err(DiffError::NonFinite { op: "sqrt" })));
}

#[test]
fn stop_gradient_forward_is_identity() {
    let tape = Tape::new();
    let x = vecf(&[1.5]);
    assert_eq!(tape.stop_gradient(&x).values(), &[1.5]);
}

#[test]
fn stop_gradient_product_keeps_only_live_factor() {
    // d/dx [sg(x) * x] at x = 2 is sg(x) = 2.
    let mut tape = Tape::new();
    let x = tape.var(&Tensor::scalar(2.0));
    let sg = tape.stop_gradient(&x);
    let y = tape.mul(&sg, &x).unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.get(&x).unwrap(), &[2.0]);
    // Finite differences of the live path with the detached factor held fixed.
    let fd = central_difference(|p| 2.0 * p[0], &[2.0], 1e-5);
    assert!((fd[0] - 2.0).abs() < 1e-9);
}

#[test]
fn stop_gradient_alone_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.var(&Tensor::scalar(0.7));
    let y = tape.exp(&x).unwrap();
    let sg = tape.stop_gradient(&y);
    let z = tape.add(&sg, &x).unwrap();
    let w = tape.sub(&z, &x).unwrap();
    let g = tape.backward(&w).unwrap();
    assert_eq!(g.get(&x).unwrap(), &[0.0]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let theta = tape.var(&vecf(&[0.3, -1.0, 2.0, 5.0]));
    let loss = tape.sum(&theta).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&theta).unwrap(), &[1.0; 4]);
}

fn chain(tape: &mut Tape, x0: &Tensor, a: f64, steps: usize, alpha: f64, dt: f64) -> Result<Tensor> {
    let mut x = x0.clone();
    for _ in 0..steps {
        let carried = tape.identity(&x)?;
        tape.mark_step_boundary(&[&carried], alpha, dt)?;
        x = tape.scale(&carried, a)?;
    }
    Ok(x)
}

#[test]
fn five_step_chain_without_decay() {
    let mut tape = Tape::new();
    let x0 = tape.var(&Tensor::scalar(1.3));
    let x5 = chain(&mut tape, &x0, 0.9, 5, 0.0, 0.1).unwrap();
    let g = tape.backward(&x5).unwrap();
    let expected = (0..5).fold(1.0, |acc: f64, _| acc * 0.9);
    assert_eq!(g.get(&x0).unwrap()[0], expected);
    assert!((expected - 0.9f64.powi(5)).abs() < 1e-15);
    let fd = central_difference(|p| p[0] * 0.9f64.powi(5), &[1.3], 1e-5);
    assert!((fd[0] - expected).abs() < 1e-10);
}

#[test]
fn decay_zero_alpha_is_unit_factor() {
    let mut tape = Tape::new();
    let x0 = tape.var(&Tensor::scalar(1.0));
    let x1 = chain(&mut tape, &x0, 1.0, 1, 0.0, 0.5).unwrap();
    let g = tape.backward(&x1).unwrap();
    assert_eq!(g.get(&x0).unwrap(), &[1.0]);
}

#[test]
fn decay_factor_per_boundary() {
    // alpha * dt = 1 gives e^-1 per crossed boundary.
    let mut tape = Tape::new();
    let x0 = tape.var(&Tensor::scalar(1.0));
    let x1 = chain(&mut tape, &x0, 1.0, 1, 10.0, 0.1).unwrap();
    let g = tape.backward(&x1).unwrap();
    let expected = 0.367_879_441_171_442_3; // e^-1
    assert!((g.get(&x0).unwrap()[0] - expected).abs() < 1e-15);
}

#[test]
fn decay_accumulates_over_three_boundaries() {
    let mut tape = Tape::new();
    let x0 = tape.var(&Tensor::scalar(1.0));
    let x3 = chain(&mut tape, &x0, 1.0, 3, 5.0, 0.1).unwrap();
    let g = tape.backward(&x3).unwrap();
    let expected = 0.223_130_160_148_429_8; // e^-1.5
    assert!((g.get(&x0).unwrap()[0] - expected).abs() < 1e-15);
}

#[test]
fn decay_differs_from_plain_backward_by_path_product() {
    for steps in 1..8 {
        let run = |alpha: f64| {
            let mut tape = Tape::new();
            let x0 = tape.var(&Tensor::scalar(0.4));
            let x = chain(&mut tape, &x0, 1.1, steps, alpha, 0.05).unwrap();
            tape.backward(&x).unwrap().get(&x0).unwrap()[0]
        };
        let plain = run(0.0);
        let decayed = run(3.0);
        let ratio = (-3.0f64 * 0.05 * steps as f64).exp();
        assert!((decayed - plain * ratio).abs() <= 1e-14 * plain.abs());
    }
}

#[test]
fn marking_twice_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.var(&Tensor::scalar(1.0));
    tape.mark_step_boundary(&[&x], 0.1, 0.1).unwrap();
    assert!(matches!(
        tape.mark_step_boundary(&[&x], 0.1, 0.1),
        Err(DiffError::AlreadyMarked(_))
    ));
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let mut tape = Tape::new();
    let x = tape.var(&vecf(&[1.0, 2.0]));
    let y = tape.scale(&x, 2.0).unwrap();
    assert!(matches!(tape.backward(&y), Err(DiffError::NotScalar(_))));

    let mut other = Tape::new();
    let z = other.var(&Tensor::scalar(1.0));
    let w = other.exp(&z).unwrap();
    assert!(matches!(tape.backward(&w), Err(DiffError::NotOnTape)));
    assert!(matches!(tape.backward(&Tensor::scalar(1.0)), Err(DiffError::NotOnTape)));
}

#[test]
fn no_grad_tape_matches_recording_values() {
    let x = vecf(&[0.2, -0.4, 1.1]);
    let eval = |tape: &mut Tape| {
        let v = tape.var(&x);
        let e = tape.exp_skew(&v).unwrap();
        let t = tape.tanh(&e).unwrap();
        tape.sum(&t).unwrap()
    };
    let a = eval(&mut Tape::new());
    let mut ng = Tape::no_grad();
    let b = eval(&mut ng);
    assert_eq!(a.values(), b.values());
    assert!(ng.is_empty());
    assert!(b.is_constant());
}

#[test]
fn acos_gradient_is_finite_at_exact_alignment() {
    let mut tape = Tape::new();
    let x = tape.var(&Tensor::scalar(1.0));
    let y = tape.acos(&x).unwrap();
    assert_eq!(y.item(), 0.0);
    let g = tape.backward(&y).unwrap().get(&x).unwrap()[0];
    let c: f64 = 1.0 - 1e-7;
    assert_eq!(g, -1.0 / (1.0 - c * c).sqrt());
}

#[test]
fn norm_of_zero_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.var(&vecf(&[0.0, 0.0]));
    let n = tape.norm(&x).unwrap();
    let g = tape.backward(&n).unwrap();
    assert_eq!(g.get(&x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn conv2d_output_shape_and_value() {
    // 1 channel 3x3 input, 1 output channel 2x2 kernel of ones, stride 1, no pad.
    let input = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
    let b = vecf(&[0.5]);
    let mut tape = Tape::new();
    let out = tape.conv2d(&input, &w, &b, 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out.values(), &[12.5, 16.5, 24.5, 28.5]);
    let padded = tape.conv2d(&input, &w, &b, 1, 1).unwrap();
    assert_eq!(padded.shape(), &[1, 4, 4]);
    assert_eq!(padded.values()[0], 1.5);
}

const TIGHT: f64 = 1e-6;

fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Tensor]) -> Result<Tensor>) -> f64 {
    check_gradients(inputs, GradCheckConfig::default(), f)
        .unwrap()
        .max_rel_err
}

fn away_from(v: f64, kink: f64) -> bool {
    (v - kink).abs() > 1e-2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn binary_ops_match_fd(a in prop::collection::vec(-2.0f64..2.0, 4),
                           b in prop::collection::vec(0.3f64..2.0, 4),
                           s in -1.5f64..1.5) {
        let (ta, tb, ts) = (vecf(&a), vecf(&b), Tensor::scalar(s));
        let err = fd_check(&[ta, tb, ts], |t, x| {
            let p = t.add(&x[0], &x[1])?;
            let q = t.sub(&p, &x[2])?;
            let r = t.mul(&q, &x[0])?;
            let d = t.div(&r, &x[1])?;
            let e = t.mul(&d, &x[2])?;
            t.sum(&e)
        });
        prop_assert!(err < TIGHT, "err {err}");
    }

    #[test]
    fn smooth_unary_ops_match_fd(a in prop::collection::vec(0.2f64..2.0, 5)) {
        let err = fd_check(&[vecf(&a)], |t, x| {
            let p = t.powf(&x[0], 1.7)?;
            let q = t.sqrt(&p)?;
            let q3 = t.scale(&q, -0.3)?;
            let r = t.exp(&q3)?;
            let r5 = t.offset(&r, -0.5)?;
            let s = t.tanh(&r5)?;
            let ns = t.neg(&s)?;
            let u = t.sigmoid(&ns)?;
            let w = t.scale(&u, 40.0)?;
            let w = t.offset(&w, -20.0)?;
            let sp = t.softplus(&w)?;
            let u = t.add(&u, &sp)?;
            let m = t.mean(&u)?;
            let n = t.norm(&s)?;
            t.add(&m, &n)
        });
        prop_assert!(err < TIGHT, "err {err}");
    }

    #[test]
    fn piecewise_ops_match_fd(a in prop::collection::vec(-2.0f64..2.0, 6)) {
        prop_assume!(a.iter().all(|&v| away_from(v, 0.0) && away_from(v, 0.25)));
        let err = fd_check(&[vecf(&a)], |t, x| {
            let l = t.leaky_relu(&x[0], 0.01)?;
            let m = t.max_const(&x[0], 0.25)?;
            let b = t.abs(&x[0])?;
            let lm = t.add(&l, &m)?;
            let bx = t.mul(&b, &x[0])?;
            let s = t.add(&lm, &bx)?;
            t.sum(&s)
        });
        prop_assert!(err < TIGHT, "err {err}");
    }

    #[test]
    fn acos_matches_fd_inside_domain(a in prop::collection::vec(-0.95f64..0.95, 3)) {
        let err = fd_check(&[vecf(&a)], |t, x| {
            let y = t.acos(&x[0])?;
            t.sum(&y)
        });
        prop_assert!(err < TIGHT, "err {err}");
    }

    #[test]
    fn linear_algebra_ops_match_fd(a in prop::collection::vec(-1.0f64..1.0, 6),
                                   b in prop::collection::vec(-1.0f64..1.0, 12),
                                   v in prop::collection::vec(-1.0f64..1.0, 4)) {
        let ta = Tensor::matrix(2, 3, &a).unwrap();
        let tb = Tensor::matrix(3, 4, &b).unwrap();
        let err = fd_check(&[ta, tb, vecf(&v)], |t, x| {
            let ab = t.matmul(&x[0], &x[1])?;
            let abv = t.matvec(&ab, &x[2])?;
            let bt = t.transpose(&x[1])?;
            let r = t.reshape(&bt, &[12])?;
            let head = t.slice(&r, 2, 4)?;
            let picked = t.gather(&r, &[0, 5, 5, 11])?;
            let cat = t.concat(&[&abv, &head, &picked])?;
            let sq = t.mul(&cat, &cat)?;
            let d = t.dot(&head, &x[2])?;
            let s = t.sum(&sq)?;
            t.add(&s, &d)
        });
        prop_assert!(err < TIGHT, "err {err}");
    }

    #[test]
    fn cross_and_exp_skew_match_fd(a in prop::collection::vec(-1.5f64..1.5, 3),
                                   b in prop::collection::vec(-1.5f64..1.5, 3),
                                   w in prop::collection::vec(-2.0f64..2.0, 3)) {
        let err = fd_check(&[vecf(&a), vecf(&b), vecf(&w)], |t, x| {
            let c = t.cross(&x[0], &x[1])?;
            let r = t.exp_skew(&x[2])?;
            let rc = t.matvec(&r, &c)?;
            let z = t.mul(&rc, &x[0])?;
            t.sum(&z)
        });
        prop_assert!(err < TIGHT, "err {err}");
    }

    #[test]
    fn exp_skew_small_angles_match_fd(w in prop::collection::vec(-1e-3f64..1e-3, 3)) {
        let g = [0.3, -1.2, 0.8, 0.5, 0.1, -0.7, 1.1, 0.4, -0.2];
        let err = check_gradients(&[vecf(&w)], GradCheckConfig { step: 1e-6, floor: 1e-5 }, |t, x| {
            let r = t.exp_skew(&x[0])?;
            let gt = Tensor::matrix(3, 3, &g)?;
            t.dot(&r, &gt)
        }).unwrap().max_rel_err;
        prop_assert!(err < TIGHT, "err {err}");
    }

    #[test]
    fn conv2d_matches_fd(input in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 5),
                         w in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
                         b in prop::collection::vec(-1.0f64..1.0, 3),
                         stride in 1usize..3) {
        let ti = Tensor::new(&[2, 4, 5], input).unwrap();
        let tw = Tensor::new(&[3, 2, 3, 3], w).unwrap();
        let err = fd_check(&[ti, tw, vecf(&b)], |t, x| {
            let y = t.conv2d(&x[0], &x[1], &x[2], stride, 1)?;
            let y2 = t.mul(&y, &y)?;
            t.sum(&y2)
        });
        prop_assert!(err < TIGHT, "err {err}");
    }

    #[test]
    fn stop_gradient_path_is_bitwise_zero(a in prop::collection::vec(-2.0f64..2.0, 3)) {
        let mut tape = Tape::new();
        let x = tape.var(&vecf(&a));
        let g1 = tape.tanh(&x).unwrap();
        let g2 = tape.norm(&g1).unwrap();
        let sg = tape.stop_gradient(&g2);
        let f = tape.exp(&sg).unwrap();
        let f2 = tape.mul(&f, &sg).unwrap();
        // Sum with a term that does not touch x at all.
        let other = tape.var(&Tensor::scalar(0.3));
        let total = tape.add(&f2, &other).unwrap();
        let grads = tape.backward(&total).unwrap();
        prop_assert!(grads.get(&x).is_none());
        prop_assert_eq!(grads.get_or_zeros(&x), vec![0.0; 3]);
    }
}

#[test]
fn softplus_is_stable_at_extremes() {
    let mut t = Tape::new();
    let x = t.var(&Tensor::vector(&[-800.0, 0.0, 800.0]).unwrap());
    let y = t.softplus(&x).unwrap();
    assert_eq!(y.values()[0], 0.0);
    assert_eq!(y.values()[1], std::f64::consts::LN_2);
    assert_eq!(y.values()[2], 800.0);
    let s = t.sum(&y).unwrap();
    let g = t.backward(&s).unwrap().get_or_zeros(&x);
    assert_eq!(g, vec![0.0, 0.5, 1.0]);
}

#[test]
fn kink_margin_tracks_nearest_nondifferentiable_input() {
    let mut tape = Tape::new();
    assert_eq!(tape.kink_margin(), f64::INFINITY);
    let x = tape.var(&Tensor::vector(&[0.3, -0.02, 1.5]).unwrap());
    let y = tape.exp(&x).unwrap();
    assert_eq!(tape.kink_margin(), f64::INFINITY);
    tape.leaky_relu(&x, 0.1).unwrap();
    assert!((tape.kink_margin() - 0.02).abs() < 1e-15);
    tape.max_const(&y, 1.34).unwrap();
    assert!((tape.kink_margin() - (0.3f64.exp() - 1.34)).abs() < 1e-12);
    let c = tape.var(&Tensor::scalar(-0.9995));
    tape.acos(&c).unwrap();
    assert!((tape.kink_margin() - (0.0005 - diffcore::ACOS_CLIP_EPS)).abs() < 1e-12);
    let z = tape.var(&Tensor::scalar(-1e-4));
    tape.abs(&z).unwrap();
    assert!((tape.kink_margin() - 1e-4).abs() < 1e-18);
}
