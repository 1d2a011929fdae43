use super::*;
use crate::tensor::gradcheck::grad_check;
use crate::{Graph, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, v).unwrap()
}

struct Instance {
    params: SsmParams<f64>,
    x: Tensor<f64>,
}

fn random_instance(seed: u64, b: usize, t: usize, c: usize, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_raw = uniform(&mut rng, &[c, n], -1.0, 1.0);
    let bm = uniform(&mut rng, &[b, t, n], -1.0, 1.0);
    let cm = uniform(&mut rng, &[b, t, n], -1.0, 1.0);
    let delta = uniform(&mut rng, &[b, t, c], 0.01, 1.0);
    let x = uniform(&mut rng, &[b, t, c], -1.0, 1.0);
    Instance {
        params: SsmParams::new(a_raw, bm, cm, delta).unwrap(),
        x,
    }
}

fn unit_system(t: usize, a_bar: f64, b_bar: f64) -> (DiscreteSsm<f64>, Tensor<f64>) {
    let d = DiscreteSsm::from_parts(Tensor::full(&[1, t, 1, 1], a_bar), Tensor::full(&[1, t, 1, 1], b_bar)).unwrap();
    (d, Tensor::ones(&[1, t, 1]))
}

#[test]
fn zoh_small_step_limit() {
    let p = SsmParams::new(
        Tensor::from_f64(&[1, 1], &[0.0]).unwrap(),
        Tensor::from_f64(&[1, 1, 1], &[3.0]).unwrap(),
        Tensor::<f64>::ones(&[1, 1, 1]),
        Tensor::from_f64(&[1, 1, 1], &[1e-12]).unwrap(),
    )
    .unwrap();
    let d = discretize_zoh(&p).unwrap();
    assert!((d.a_bar.data()[0] - 1.0).abs() < 1e-11);
    assert!((d.b_bar.data()[0] - 3e-12).abs() < 1e-22);
}

#[test]
fn zoh_half_decay() {
    let p = SsmParams::new(
        Tensor::from_f64(&[1, 1], &[0.0]).unwrap(),
        Tensor::<f64>::ones(&[1, 1, 1]),
        Tensor::<f64>::ones(&[1, 1, 1]),
        Tensor::from_f64(&[1, 1, 1], &[std::f64::consts::LN_2]).unwrap(),
    )
    .unwrap();
    let d = discretize_zoh(&p).unwrap();
    assert!((d.a_bar.data()[0] - 0.5).abs() < 1e-15);
}

/// `∫_0^Δ exp(sA) ds · B` by composite Simpson.
fn zoh_quadrature(a: f64, delta: f64, b: f64) -> f64 {
    let m = 4000;
    let h = delta / m as f64;
    let f = |s: f64| (s * a).exp();
    let mut acc = f(0.0) + f(delta);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    acc * h / 3.0 * b
}

#[test]
fn zoh_matches_quadrature() {
    let inst = random_instance(11, 2, 5, 3, 4);
    let d = discretize_zoh(&inst.params).unwrap();
    let a = inst.params.a();
    let (b, t, c, n) = d.dims();
    let mut worst: f64 = 0.0;
    for bi in 0..b {
        for ti in 0..t {
            for cc in 0..c {
                for k in 0..n {
                    let dt = inst.params.delta.get(&[bi, ti, cc]);
                    let q = zoh_quadrature(a.get(&[cc, k]), dt, inst.params.b.get(&[bi, ti, k]));
                    let got = d.b_bar.get(&[bi, ti, cc, k]);
                    worst = worst.max((got - q).abs() / q.abs().max(1e-300));
                    assert!(d.a_bar.get(&[bi, ti, cc, k]) > 0.0 && d.a_bar.get(&[bi, ti, cc, k]) < 1.0);
                }
            }
        }
    }
    assert!(worst <= 1e-10, "relative error {worst}");
}

#[test]
fn zoh_rejects_non_positive_delta() {
    let mut inst = random_instance(1, 1, 3, 2, 2);
    inst.params.delta.data_mut()[2] = 0.0;
    assert!(discretize_zoh(&inst.params).is_err());
    inst.params.delta.data_mut()[2] = -0.5;
    assert!(discretize_zoh(&inst.params).is_err());
}

#[test]
fn psi_series_and_closed_form_agree_at_the_switch() {
    for z in [-0.1000001f64, -0.0999999, 0.0999999, 0.1000001] {
        let e = z.exp();
        let closed = (z * e - e + 1.0) / (z * z);
        assert!((psi(z) - closed).abs() < 1e-12, "z={z}");
    }
    assert!((psi(0.0f64) - 0.5).abs() < 1e-16);
}

#[test]
fn unit_carry_gives_cumulative_sum() {
    let (d, c) = unit_system(6, 1.0, 1.0);
    let x = Tensor::from_f64(&[1, 6, 1], &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0]).unwrap();
    let want = [1.0, 3.0, 2.0, 2.5, 5.5, 5.5];
    for y in [
        scan_recurrent(&d, &c, &x).unwrap(),
        scan_parallel(Exec::Parallel, &d, &c, &x).unwrap(),
    ] {
        assert_eq!(y.data(), &want);
    }
}

#[test]
fn zero_transition_is_memoryless() {
    let (d, _) = unit_system(4, 0.0, 0.5);
    let c = Tensor::from_f64(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = Tensor::from_f64(&[1, 4, 1], &[1.0, -1.0, 2.0, 0.5]).unwrap();
    let y = scan_recurrent(&d, &c, &x).unwrap();
    assert_eq!(y.data(), &[0.5, -1.0, 3.0, 1.0]);
    let y1 = scan_parallel(Exec::Sequential, &d, &c, &x).unwrap();
    assert_eq!(y1.data(), y.data());
}

#[test]
fn parallel_single_step() {
    let inst = random_instance(5, 2, 1, 3, 4);
    let d = discretize_zoh(&inst.params).unwrap();
    let y = scan_parallel(Exec::Parallel, &d, &inst.params.c, &inst.x).unwrap();
    let diag = mixing_diagonal(&d, &inst.params.c).unwrap();
    let want = diag.zip_map(&inst.x, |m, x| m * x).unwrap();
    assert!(y.max_abs_diff(&want) <= 1e-15);
}

#[test]
fn mixing_matrix_two_steps() {
    let inst = random_instance(9, 1, 2, 1, 3);
    let d = discretize_zoh(&inst.params).unwrap();
    let m = materialize_mixing_matrix(&d, &inst.params.c).unwrap();
    let dot = |ti: usize, v: &dyn Fn(usize) -> f64| -> f64 { (0..3).map(|k| inst.params.c.get(&[0, ti, k]) * v(k)).sum() };
    let bb = |ti: usize, k: usize| d.b_bar.get(&[0, ti, 0, k]);
    let ab = |ti: usize, k: usize| d.a_bar.get(&[0, ti, 0, k]);
    assert!((m.entry(0, 0, 0, 0) - dot(0, &|k| bb(0, k))).abs() < 1e-15);
    assert_eq!(m.entry(0, 0, 0, 1), 0.0);
    assert!((m.entry(0, 0, 1, 0) - dot(1, &|k| ab(1, k) * bb(0, k))).abs() < 1e-15);
    assert!((m.entry(0, 0, 1, 1) - dot(1, &|k| bb(1, k))).abs() < 1e-15);
    assert!(m.is_lower_triangular());
}

#[test]
fn three_evaluators_agree_f64() {
    let inst = random_instance(21, 2, 16, 2, 4);
    let d = discretize_zoh(&inst.params).unwrap();
    let c = &inst.params.c;
    let rec = scan_recurrent(&d, c, &inst.x).unwrap();
    let par = scan_parallel(Exec::Parallel, &d, c, &inst.x).unwrap();
    let m = materialize_mixing_matrix(&d, c).unwrap();
    let dense = m.apply(&inst.x).unwrap();
    assert!(rec.max_abs_diff(&dense) <= 1e-12);
    assert!(rec.max_abs_diff(&par) <= 1e-12);
    assert_eq!(m.max_upper(), 0.0);
}

#[test]
fn three_evaluators_agree_f32() {
    let inst = random_instance(22, 2, 64, 4, 8);
    let d64 = discretize_zoh(&inst.params).unwrap();
    let d = DiscreteSsm::from_parts(d64.a_bar.cast::<f32>(), d64.b_bar.cast::<f32>()).unwrap();
    let c: Tensor<f32> = inst.params.c.cast();
    let x: Tensor<f32> = inst.x.cast();
    let rec = scan_recurrent(&d, &c, &x).unwrap();
    let par = scan_parallel(Exec::Parallel, &d, &c, &x).unwrap();
    let dense = materialize_mixing_matrix(&d, &c).unwrap().apply(&x).unwrap();
    assert!(rec.max_abs_diff(&par) <= 1e-5);
    assert!(rec.max_abs_diff(&dense) <= 1e-5);
}

#[test]
fn oracle_cap_is_enforced() {
    let (d, c) = unit_system(9, 0.5, 1.0);
    assert!(matches!(materialize_mixing_matrix_capped(&d, &c, 8), Err(Error::OracleCap(_))));
    assert!(materialize_mixing_matrix_capped(&d, &c, 9).is_ok());
    let (d, c) = unit_system(ORACLE_CAP + 1, 0.5, 1.0);
    assert!(materialize_mixing_matrix(&d, &c).is_err());
}

fn lti_instance(seed: u64, t: usize, ch: usize, n: usize) -> (DiscreteSsm<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_raw = uniform(&mut rng, &[ch, n], -1.0, 1.0);
    let brow = uniform(&mut rng, &[n], -1.0, 1.0);
    let crow = uniform(&mut rng, &[n], -1.0, 1.0);
    let drow = uniform(&mut rng, &[ch], 0.05, 0.8);
    let rep = |row: &Tensor<f64>, shape: &[usize]| {
        let v: Vec<f64> = row.data().iter().copied().cycle().take(shape.iter().product()).collect();
        Tensor::new(shape, v).unwrap()
    };
    let p = SsmParams::new(a_raw, rep(&brow, &[2, t, n]), rep(&crow, &[2, t, n]), rep(&drow, &[2, t, ch])).unwrap();
    let x = uniform(&mut rng, &[2, t, ch], -1.0, 1.0);
    (discretize_zoh(&p).unwrap(), p.c, x)
}

#[test]
fn lti_kernel_matches_recurrence() {
    let (d, c, x) = lti_instance(4, 40, 3, 5);
    let k = lti_kernel(&d, &c, 40).unwrap();
    let y = lti_apply(&k, &x).unwrap();
    assert!(y.max_abs_diff(&scan_recurrent(&d, &c, &x).unwrap()) <= 1e-12);
}

#[test]
fn lti_kernel_limits() {
    let (d, c) = unit_system(5, 0.0, 2.0);
    assert_eq!(lti_kernel(&d, &c, 5).unwrap().data(), &[2.0, 0.0, 0.0, 0.0, 0.0]);
    let (d, c) = unit_system(5, 1.0, 1.0);
    let k = lti_kernel(&d, &c, 5).unwrap();
    assert_eq!(k.data(), &[1.0; 5]);
    let x = Tensor::from_f64(&[1, 5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert_eq!(lti_apply(&k, &x).unwrap().data(), &[1.0, 3.0, 6.0, 10.0, 15.0]);
}

#[test]
fn lti_kernel_rejects_selective_parameters() {
    let inst = random_instance(3, 1, 8, 2, 3);
    let d = discretize_zoh(&inst.params).unwrap();
    assert!(lti_kernel(&d, &inst.params.c, 8).is_err());
}

#[test]
fn mask_diagonal_examples() {
    let eye = Tensor::<f64>::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    assert_eq!(mask_diagonal(&eye).unwrap().data(), &[0.0; 9]);
    let m = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
    let once = mask_diagonal(&m).unwrap();
    assert_eq!(once.data(), &[0., 2., 3., 4., 0., 6.]);
    assert_eq!(mask_diagonal(&once).unwrap(), once);
}

#[test]
fn self_term_of_memoryless_scan_is_everything() {
    let (d, _) = unit_system(4, 0.0, 0.7);
    let c = Tensor::from_f64(&[1, 4, 1], &[1.0, -2.0, 0.5, 3.0]).unwrap();
    let x = Tensor::from_f64(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = scan_recurrent(&d, &c, &x).unwrap();
    let r = subtract_self_term(&y, &d, &c, &x).unwrap();
    assert!(r.max_abs() <= 1e-15);
}

#[test]
fn self_term_matches_dense_and_is_not_idempotent() {
    let inst = random_instance(31, 2, 12, 3, 4);
    let d = discretize_zoh(&inst.params).unwrap();
    let c = &inst.params.c;
    let y = scan_recurrent(&d, c, &inst.x).unwrap();
    let once = subtract_self_term(&y, &d, c, &inst.x).unwrap();
    let m = materialize_mixing_matrix(&d, c).unwrap();
    let dense = m.without_diagonal().apply(&inst.x).unwrap();
    assert!(once.max_abs_diff(&dense) <= 1e-12);

    let twice = subtract_self_term(&once, &d, c, &inst.x).unwrap();
    let diag = m.apply(&inst.x).unwrap().zip_map(&dense, |a, b| a - b).unwrap();
    let expect = dense.zip_map(&diag, |a, b| a - b).unwrap();
    assert!(twice.max_abs_diff(&expect) <= 1e-12);
    assert!(twice.max_abs_diff(&once) > 1e-3);
}

struct Bidir {
    d_fw: DiscreteSsm<f64>,
    c_fw: Tensor<f64>,
    d_bw: DiscreteSsm<f64>,
    c_bw: Tensor<f64>,
}

fn bidir_instance(seed: u64, t: usize) -> (Bidir, Tensor<f64>) {
    let fw = random_instance(seed, 1, t, 2, 3);
    let bw = random_instance(seed + 1000, 1, t, 2, 3);
    (
        Bidir {
            d_fw: discretize_zoh(&fw.params).unwrap(),
            c_fw: fw.params.c,
            d_bw: discretize_zoh(&bw.params).unwrap(),
            c_bw: bw.params.c,
        },
        fw.x,
    )
}

fn compose(s: &Bidir, x: &Tensor<f64>, semantic: bool) -> Tensor<f64> {
    let y_fw = scan_recurrent(&s.d_fw, &s.c_fw, x).unwrap();
    let xb = x.flip(1).unwrap();
    let y_bw = scan_recurrent(&s.d_bw, &s.c_bw, &xb).unwrap();
    bidirectional_compose(
        &y_fw,
        BackwardScan {
            y: &y_bw,
            ssm: &s.d_bw,
            c: &s.c_bw,
            x: &xb,
        },
        semantic,
    )
    .unwrap()
}

#[test]
fn compose_of_zero_input_is_zero() {
    let (s, x) = bidir_instance(2, 10);
    let zero = Tensor::zeros(x.shape());
    assert_eq!(compose(&s, &zero, true).max_abs(), 0.0);
    assert_eq!(compose(&s, &zero, false).max_abs(), 0.0);
}

#[test]
fn composed_matrix_diagonal() {
    let (s, x) = bidir_instance(7, 10);
    let m_fw = materialize_mixing_matrix(&s.d_fw, &s.c_fw).unwrap();
    let m_bw = materialize_mixing_matrix(&s.d_bw, &s.c_bw).unwrap();
    let plain = MixingMatrix::compose_bidirectional(&m_fw, &m_bw).unwrap();
    let masked = MixingMatrix::compose_bidirectional(&m_fw, &m_bw.without_diagonal()).unwrap();
    let t = m_fw.len();
    for c in 0..m_fw.channels() {
        for i in 0..t {
            let fw = m_fw.entry(0, c, i, i);
            let bw = m_bw.entry(0, c, t - 1 - i, t - 1 - i);
            assert!((masked.entry(0, c, i, i) - fw).abs() <= 1e-12);
            assert!((plain.entry(0, c, i, i) - (fw + bw)).abs() <= 1e-12);
        }
    }
    assert!(compose(&s, &x, true).max_abs_diff(&masked.apply(&x).unwrap()) <= 1e-12);
    assert!(compose(&s, &x, false).max_abs_diff(&plain.apply(&x).unwrap()) <= 1e-12);
}

#[test]
fn forward_scan_is_causal_and_flipped_backward_is_anti_causal() {
    let (s, x) = bidir_instance(13, 12);
    let base_fw = scan_recurrent(&s.d_fw, &s.c_fw, &x).unwrap();
    let bw_part = |x: &Tensor<f64>| scan_recurrent(&s.d_bw, &s.c_bw, &x.flip(1).unwrap()).unwrap().flip(1).unwrap();
    let base_bw = bw_part(&x);
    for j in 0..12 {
        let mut xp = x.clone();
        xp.data_mut()[j * 2] += 0.5;
        let fw = scan_recurrent(&s.d_fw, &s.c_fw, &xp).unwrap();
        let bw = bw_part(&xp);
        for i in 0..12 {
            let dfw = (fw.get(&[0, i, 0]) - base_fw.get(&[0, i, 0])).abs();
            let dbw = (bw.get(&[0, i, 0]) - base_bw.get(&[0, i, 0])).abs();
            if i < j {
                assert_eq!(dfw, 0.0, "fw i={i} j={j}");
            }
            if i > j {
                assert_eq!(dbw, 0.0, "bw i={i} j={j}");
            }
            assert_eq!(fw.get(&[0, i, 1]), base_fw.get(&[0, i, 1]));
        }
    }
}

fn palindrome(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let half = uniform(rng, shape, lo, hi);
    let t = shape[1];
    let flipped = half.flip(1).unwrap();
    let mut v = half.data().to_vec();
    let per = shape[2];
    for bi in 0..shape[0] {
        for ti in t / 2..t {
            for k in 0..per {
                let idx = (bi * t + ti) * per + k;
                v[idx] = flipped.data()[idx];
            }
        }
    }
    Tensor::new(shape, v).unwrap()
}

#[test]
fn shared_parameters_preserve_palindromes() {
    for t in [9, 10] {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let p = SsmParams::new(
            uniform(&mut rng, &[2, 3], -1.0, 1.0),
            palindrome(&mut rng, &[1, t, 3], -1.0, 1.0),
            palindrome(&mut rng, &[1, t, 3], -1.0, 1.0),
            palindrome(&mut rng, &[1, t, 2], 0.05, 1.0),
        )
        .unwrap();
        let x = palindrome(&mut rng, &[1, t, 2], -1.0, 1.0);
        assert_eq!(x.flip(1).unwrap(), x);
        let d = discretize_zoh(&p).unwrap();
        let s = Bidir {
            d_fw: d.clone(),
            c_fw: p.c.clone(),
            d_bw: d,
            c_bw: p.c.clone(),
        };
        for semantic in [false, true] {
            let y = compose(&s, &x, semantic);
            assert!(y.flip(1).unwrap().max_abs_diff(&y) <= 1e-10);
        }
    }
}

#[test]
fn long_scans_stay_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let t = 4096;
    let p = SsmParams::new(
        uniform(&mut rng, &[1, 4], -2.0, 1.0),
        uniform(&mut rng, &[1, t, 4], -1.0, 1.0),
        Tensor::full(&[1, t, 4], 1.0),
        uniform(&mut rng, &[1, t, 1], 0.01, 0.5),
    )
    .unwrap();
    let x = uniform(&mut rng, &[1, t, 1], -1.0, 1.0);
    let d = discretize_zoh(&p).unwrap();
    let (y, states) = scan_with_states(Exec::Sequential, &d, &p.c, &x, false);
    let max_b = d.b_bar.max_abs();
    let max_a = d.a_bar.data().iter().cloned().fold(0.0, f64::max);
    let bound = 4.0 * max_b / (1.0 - max_a);
    assert!(states.iter().all(|h| h.abs() <= bound));
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn selective_params_zero_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 5, 3]));
    let wb = g.constant(Tensor::ones(&[3, 4]));
    let wc = g.constant(Tensor::ones(&[3, 4]));
    let wd = g.constant(Tensor::ones(&[3, 3]));
    let bias = g.constant(Tensor::zeros(&[3]));
    let s = g.selective_params(x, wb, wc, wd, bias).unwrap();
    assert_eq!(g.shape(s.b), &[2, 5, 4]);
    assert_eq!(g.shape(s.c), &[2, 5, 4]);
    assert!(g.value(s.delta).data().iter().all(|&d| (d - std::f64::consts::LN_2).abs() < 1e-15));
}

#[test]
fn selective_params_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = vec![
        uniform(&mut rng, &[1, 4, 3], -1.0, 1.0),
        uniform(&mut rng, &[3, 2], -1.0, 1.0),
        uniform(&mut rng, &[3, 2], -1.0, 1.0),
        uniform(&mut rng, &[3, 3], -1.0, 1.0),
        uniform(&mut rng, &[3], -1.0, 1.0),
    ];
    let r = grad_check(
        |g, p| {
            let s = g.selective_params(p[0], p[1], p[2], p[3], p[4])?;
            let bc = g.mul(s.b, s.c)?;
            let l1 = g.sum_all(bc)?;
            let d2 = g.mul(s.delta, s.delta)?;
            let l2 = g.sum_all(d2)?;
            g.add(l1, l2)
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

fn scan_loss(g: &mut Graph<f64>, p: &[Var], subtract_self: bool, weights: &Tensor<f64>) -> Result<Var> {
    let a = g.exp(p[2])?;
    let a = g.neg(a)?;
    let delta = g.softplus(p[1])?;
    let spec = ScanSpec {
        subtract_self,
        exec: Exec::Parallel,
    };
    let y = g.selective_scan(p[0], delta, a, p[3], p[4], spec)?;
    let w = g.constant(weights.clone());
    let wy = g.mul(y, w)?;
    g.sum_all(wy)
}

#[test]
fn selective_scan_gradients() {
    for subtract_self in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (b, t, c, n) = (2, 7, 3, 4);
        let params = vec![
            uniform(&mut rng, &[b, t, c], -1.0, 1.0),
            uniform(&mut rng, &[b, t, c], -3.0, 1.0),
            uniform(&mut rng, &[c, n], -1.0, 1.5),
            uniform(&mut rng, &[b, t, n], -1.0, 1.0),
            uniform(&mut rng, &[b, t, n], -1.0, 1.0),
        ];
        let weights = uniform(&mut rng, &[b, t, c], -1.0, 1.0);
        let r = grad_check(|g, p| scan_loss(g, p, subtract_self, &weights), &params, 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-6, "subtract_self={subtract_self}: {r:?}");
    }
}

#[test]
fn selective_scan_forward_matches_evaluators() {
    let inst = random_instance(55, 2, 20, 3, 4);
    let d = discretize_zoh(&inst.params).unwrap();
    let mut g = Graph::<f64>::new();
    let u = g.constant(inst.x.clone());
    let delta = g.constant(inst.params.delta.clone());
    let a = g.constant(inst.params.a());
    let b = g.constant(inst.params.b.clone());
    let c = g.constant(inst.params.c.clone());
    let y = g.selective_scan(u, delta, a, b, c, ScanSpec::default()).unwrap();
    let want = scan_recurrent(&d, &inst.params.c, &inst.x).unwrap();
    assert!(g.value(y).max_abs_diff(&want) <= 1e-13);
    let ys = g
        .selective_scan(
            u,
            delta,
            a,
            b,
            c,
            ScanSpec {
                subtract_self: true,
                exec: Exec::Sequential,
            },
        )
        .unwrap();
    let want = subtract_self_term(&want, &d, &inst.params.c, &inst.x).unwrap();
    assert!(g.value(ys).max_abs_diff(&want) <= 1e-13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn evaluators_are_equivalent(seed in any::<u64>(), b in 1usize..3, t in 1usize..65, c in 1usize..5, n in 1usize..9) {
        let inst = random_instance(seed, b, t, c, n);
        let d = discretize_zoh(&inst.params).unwrap();
        let cm = &inst.params.c;
        let rec = scan_recurrent(&d, cm, &inst.x).unwrap();
        let par = scan_parallel(Exec::Parallel, &d, cm, &inst.x).unwrap();
        let seq = scan_parallel(Exec::Sequential, &d, cm, &inst.x).unwrap();
        let dense = materialize_mixing_matrix(&d, cm).unwrap().apply(&inst.x).unwrap();
        prop_assert!(rec.max_abs_diff(&par) <= 1e-12);
        prop_assert!(rec.max_abs_diff(&dense) <= 1e-12);
        prop_assert_eq!(par, seq);
    }

    #[test]
    fn lti_equivalence(seed in any::<u64>(), t in 1usize..48, c in 1usize..4, n in 1usize..6) {
        let (d, cm, x) = lti_instance(seed, t, c, n);
        let k = lti_kernel(&d, &cm, t).unwrap();
        prop_assert!(lti_apply(&k, &x).unwrap().max_abs_diff(&scan_recurrent(&d, &cm, &x).unwrap()) <= 1e-12);
    }

    #[test]
    fn forward_perturbation_is_causal(seed in any::<u64>(), t in 2usize..30, j in 0usize..30) {
        let j = j % t;
        let inst = random_instance(seed, 1, t, 1, 3);
        let d = discretize_zoh(&inst.params).unwrap();
        let base = scan_parallel(Exec::Sequential, &d, &inst.params.c, &inst.x).unwrap();
        let mut xp = inst.x.clone();
        xp.data_mut()[j] += 1.0;
        let y = scan_parallel(Exec::Sequential, &d, &inst.params.c, &xp).unwrap();
        for i in 0..j {
            prop_assert_eq!(y.data()[i], base.data()[i]);
        }
    }
}
