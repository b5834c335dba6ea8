use super::*;
use crate::numerics::Rng;
use proptest::prelude::*;

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn ortho_bases(d_in: usize, d_out: usize, r_max: usize, seed: u64) -> SharedBases<f64> {
    SharedBases::init(d_in, d_out, r_max, &mut Rng::new(seed), true).unwrap()
}

fn random_adapter(task: usize, rank: usize, rng: &mut Rng) -> TaskAdapter<f64> {
    TaskAdapter::from_parts(task, random(rank, rank, rng), random(rank, rank, rng), false).unwrap()
}

fn naive_product(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}

#[test]
fn init_contract() {
    let b = ortho_bases(8, 8, 4, 1);
    let eye = Matrix::identity(4);
    assert!(b.a_shared().t_dot(b.a_shared()).sub(&eye).unwrap().frobenius_norm() < 1e-10);
    assert!(b.b_shared().t_dot(b.b_shared()).sub(&eye).unwrap().frobenius_norm() < 1e-10);
    assert!(!b.is_frozen());

    assert!(SharedBases::<f64>::init(6, 5, 5, &mut Rng::new(0), true).is_ok());
    assert!(matches!(
        SharedBases::<f64>::init(6, 5, 0, &mut Rng::new(0), true),
        Err(FloraError::RankOutOfRange { .. })
    ));
    assert!(SharedBases::<f64>::init(6, 5, 6, &mut Rng::new(0), true).is_err());
}

#[test]
fn freeze_contract() {
    let mut b = ortho_bases(6, 6, 3, 2);
    let before = (b.a_shared().to_bytes(), b.b_shared().to_bytes());
    b.freeze().unwrap();
    assert!(matches!(b.freeze(), Err(FloraError::AlreadyFrozen)));
    assert!(matches!(b.factors_mut(), Err(FloraError::BasesFrozen)));
    let mut adapters = vec![random_adapter(0, 2, &mut Rng::new(3))];
    assert!(b.orthonormalize_absorbing(&mut adapters).is_err());
    assert_eq!(before, (b.a_shared().to_bytes(), b.b_shared().to_bytes()));
}

#[test]
fn delta_weight_cases() {
    let b = ortho_bases(8, 6, 4, 5);
    let zero = TaskAdapter::from_parts(0, Matrix::zeros(3, 3), Matrix::zeros(3, 3), false).unwrap();
    assert_eq!(delta_weight(&b, &zero).unwrap().max_abs(), 0.0);

    // Identity coefficients at r_max: ΔW = A Bᵀ and ‖ΔW‖² = Tr(I_r) = r.
    let eye = TaskAdapter::from_parts(0, Matrix::identity(4), Matrix::identity(4), false).unwrap();
    let dw = delta_weight(&b, &eye).unwrap();
    let abt = b.a_shared().dot_t(b.b_shared());
    assert!(dw.sub(&abt).unwrap().frobenius_norm() < 1e-12);
    assert!((dw.frobenius_norm_sq() - 4.0).abs() < 1e-12);

    let too_big = random_adapter(0, 5, &mut Rng::new(1));
    assert!(matches!(delta_weight(&b, &too_big), Err(FloraError::RankMismatch { .. })));
}

#[test]
fn delta_weight_matches_four_factor_product() {
    let mut rng = Rng::new(21);
    let bases = SharedBases::from_parts(random(6, 4, &mut rng), random(6, 4, &mut rng), false, false)
        .unwrap();
    let ad = random_adapter(0, 3, &mut rng);
    let a_r = bases.a_shared().leading_columns(3);
    let b_r = bases.b_shared().leading_columns(3);
    let oracle = naive_product(
        &naive_product(&naive_product(&a_r, ad.m_coeff()), &ad.n_coeff().transpose()),
        &b_r.transpose(),
    );
    let dw = delta_weight(&bases, &ad).unwrap();
    for (x, y) in dw.as_slice().iter().zip(oracle.as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn residual_cases() {
    let bases = ortho_bases(10, 9, 6, 8);
    let mut rng = Rng::new(4);
    let ad = random_adapter(1, 3, &mut rng);
    let (rc, rr) = subspace_residual(&bases, &ad).unwrap();
    assert!(rc < 1e-9 && rr < 1e-9);

    // Against a disjoint column block the projection removes nothing.
    let dw = delta_weight(&bases, &ad).unwrap();
    let disjoint = bases.a_shared().columns(3, 6);
    let res = column_residual(&dw, &disjoint);
    assert!((res - dw.frobenius_norm()).abs() < 1e-9 * dw.frobenius_norm().max(1.0));
    let disjoint_rows = bases.b_shared().columns(3, 6);
    let res = row_residual(&dw, &disjoint_rows);
    assert!((res - dw.frobenius_norm()).abs() < 1e-9 * dw.frobenius_norm().max(1.0));

    let zero = TaskAdapter::from_parts(0, Matrix::zeros(2, 2), Matrix::zeros(2, 2), false).unwrap();
    assert_eq!(subspace_residual(&bases, &zero).unwrap(), (0.0, 0.0));

    let skew = SharedBases::from_parts(random(10, 6, &mut rng), random(9, 6, &mut rng), false, false)
        .unwrap();
    assert!(matches!(
        subspace_residual(&skew, &ad),
        Err(FloraError::NotOrthonormal { .. })
    ));
}

#[test]
fn interference_cases() {
    let bases = ortho_bases(8, 8, 4, 12);
    let mut rng = Rng::new(13);
    let a = random_adapter(0, 4, &mut rng);
    let self_inner = interference_full(&bases, &a, &a).unwrap();
    let dw = delta_weight(&bases, &a).unwrap();
    assert!((self_inner - dw.frobenius_norm_sq()).abs() < 1e-12);
    assert!(self_inner >= 0.0);

    let eye = TaskAdapter::from_parts(0, Matrix::identity(4), Matrix::identity(4), false).unwrap();
    assert!((interference_full(&bases, &eye, &eye).unwrap() - 4.0).abs() < 1e-12);
    assert!((interference_reduced(&eye, &eye).unwrap() - 4.0).abs() < 1e-15);

    // N1 M1ᵀ orthogonal to M2 N2ᵀ: disjoint coordinate blocks.
    let mut m1 = Matrix::zeros(2, 2);
    m1[(0, 0)] = 1.0;
    let mut m2 = Matrix::zeros(2, 2);
    m2[(1, 1)] = 1.0;
    let t1 = TaskAdapter::from_parts(0, m1.clone(), m1, false).unwrap();
    let t2 = TaskAdapter::from_parts(1, m2.clone(), m2, false).unwrap();
    assert_eq!(interference_reduced(&t1, &t2).unwrap(), 0.0);
}

#[test]
fn reduced_matches_full_on_random_pairs() {
    let mut rng = Rng::new(77);
    for trial in 0..100 {
        let bases = ortho_bases(12, 10, 6, 1000 + trial);
        let r1 = 1 + rng.below(6);
        let r2 = 1 + rng.below(6);
        let a = random_adapter(0, r1, &mut rng);
        let b = random_adapter(1, r2, &mut rng);
        let full = interference_full(&bases, &a, &b).unwrap();
        let reduced = interference_reduced(&a, &b).unwrap();
        assert!((full - reduced).abs() < 1e-10, "trial {trial}: {full} vs {reduced}");
        let sym = interference_reduced(&b, &a).unwrap();
        assert!((reduced - sym).abs() < 1e-10);
    }
}

/// Central differences of `L = ⟨C, ΔW⟩` against the closed-form gradients.
#[test]
fn coefficient_gradients_match_finite_differences() {
    let eps = 1e-5;
    let mut rng = Rng::new(31);
    for _ in 0..20 {
        let bases = ortho_bases(7, 5, 4, rng.next_u64());
        let rank = 1 + rng.below(4);
        let ad = random_adapter(0, rank, &mut rng);
        let c = random(7, 5, &mut rng);
        let loss = |a: &TaskAdapter<f64>| frobenius_inner(&c, &delta_weight(&bases, a).unwrap()).unwrap();
        let (gm, gn) = grad_coefficients(&bases, &ad, &c).unwrap();
        for which in 0..2 {
            for i in 0..rank {
                for j in 0..rank {
                    let mut plus = ad.clone();
                    let mut minus = ad.clone();
                    {
                        let (pm, pn) = plus.coeffs_mut().unwrap();
                        let target = if which == 0 { pm } else { pn };
                        target[(i, j)] += eps;
                    }
                    {
                        let (mm, mn) = minus.coeffs_mut().unwrap();
                        let target = if which == 0 { mm } else { mn };
                        target[(i, j)] -= eps;
                    }
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                    let analytic = if which == 0 { gm[(i, j)] } else { gn[(i, j)] };
                    let err = (numeric - analytic).abs();
                    assert!(
                        err <= 1e-6 * numeric.abs().max(analytic.abs()) + 1e-9,
                        "{} ({i},{j}): analytic {analytic} numeric {numeric}",
                        if which == 0 { "M" } else { "N" }
                    );
                }
            }
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let bases = ortho_bases(6, 6, 3, 3);
    let ad = random_adapter(0, 3, &mut Rng::new(1));
    let (gm, gn) = grad_coefficients(&bases, &ad, &Matrix::zeros(6, 6)).unwrap();
    assert_eq!(gm.max_abs() + gn.max_abs(), 0.0);
    assert!(matches!(
        grad_coefficients(&bases, &ad, &Matrix::zeros(5, 6)),
        Err(FloraError::GradientShape { .. })
    ));
}

#[test]
fn basis_gradients_match_finite_differences() {
    let eps = 1e-5;
    let mut rng = Rng::new(55);
    let bases = SharedBases::from_parts(random(5, 3, &mut rng), random(4, 3, &mut rng), false, false)
        .unwrap();
    let ad = random_adapter(0, 2, &mut rng);
    let c = random(5, 4, &mut rng);
    let (ga, gb) = grad_bases(&bases, &ad, &c).unwrap();
    for which in 0..2 {
        let (rows, cols) = if which == 0 { (5, 3) } else { (4, 3) };
        for i in 0..rows {
            for j in 0..cols {
                let eval = |delta: f64| {
                    let mut b = bases.clone();
                    let (a, bb) = b.factors_mut().unwrap();
                    let t = if which == 0 { a } else { bb };
                    t[(i, j)] += delta;
                    frobenius_inner(&c, &delta_weight(&b, &ad).unwrap()).unwrap()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = if which == 0 { ga[(i, j)] } else { gb[(i, j)] };
                assert!((numeric - analytic).abs() <= 1e-6 * numeric.abs().max(analytic.abs()) + 1e-9);
            }
        }
    }
}

#[test]
fn absorption_preserves_update() {
    let mut rng = Rng::new(66);
    let mut bases =
        SharedBases::from_parts(random(9, 4, &mut rng), random(7, 4, &mut rng), false, true).unwrap();
    let mut adapters = vec![random_adapter(0, 3, &mut rng)];
    let before = delta_weight(&bases, &adapters[0]).unwrap();
    assert!(bases.orthonormality_defect() > 1e-3);
    bases.orthonormalize_absorbing(&mut adapters).unwrap();
    let after = delta_weight(&bases, &adapters[0]).unwrap();
    assert!(bases.orthonormality_defect() < 1e-10);
    assert!(after.sub(&before).unwrap().frobenius_norm() < 1e-12 * before.frobenius_norm().max(1.0));
}

#[test]
fn parameter_counts() {
    assert_eq!(param_count(ParamKind::StandardLora, 768, 768, 8), 12288);
    assert_eq!(param_count(ParamKind::FloraPerTask, 768, 768, 8), 128);
    assert_eq!(param_count(ParamKind::FloraSharedOnce, 768, 768, 8), 12288);
    for r in 1..20 {
        assert_eq!(
            param_count(ParamKind::FloraPerTask, r, r, r),
            param_count(ParamKind::StandardLora, r, r, r)
        );
    }
}

#[test]
fn flora_total_against_lora_on_a_grid() {
    for d_in in 1..24 {
        for d_out in 1..24 {
            for r in 1..=d_in.min(d_out) {
                for tasks in 2..8 {
                    let lora = tasks * param_count(ParamKind::StandardLora, d_in, d_out, r);
                    let flora = flora_total(d_in, d_out, r, tasks);
                    assert_eq!(flora, r * (d_in + d_out) + tasks * 2 * r * r);
                    // r(d) + 2Tr² < T r d  ⇔  2rT < (T − 1)d
                    let cheaper = 2 * r * tasks < (tasks - 1) * (d_in + d_out);
                    assert_eq!(flora < lora, cheaper, "d_in {d_in} d_out {d_out} r {r} T {tasks}");
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn delta_weight_is_bilinear(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let mut rng = Rng::new(seed);
        let bases = ortho_bases(6, 5, 3, seed ^ 1);
        let ad = random_adapter(0, 3, &mut rng);
        let scaled_m = TaskAdapter::from_parts(0, ad.m_coeff().scaled(alpha), ad.n_coeff().clone(), false).unwrap();
        let scaled_n = TaskAdapter::from_parts(0, ad.m_coeff().clone(), ad.n_coeff().scaled(alpha), false).unwrap();
        let base = delta_weight(&bases, &ad).unwrap().scaled(alpha);
        for other in [scaled_m, scaled_n] {
            let dw = delta_weight(&bases, &other).unwrap();
            prop_assert!(dw.sub(&base).unwrap().max_abs() < 1e-12 * (1.0 + base.max_abs()));
        }
    }

    #[test]
    fn containment_is_structural(seed in any::<u64>(), rank in 1usize..6) {
        let bases = ortho_bases(10, 8, 6, seed);
        let ad = random_adapter(0, rank, &mut Rng::new(seed.wrapping_add(1)));
        let (rc, rr) = subspace_residual(&bases, &ad).unwrap();
        prop_assert!(rc < 1e-9 && rr < 1e-9);
    }
}
