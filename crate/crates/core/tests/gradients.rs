use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subpop_core::adapter::{grad_check, AdapterSpec, GradCheckReport, Mlp};
use subpop_core::losses::{
    cosine_with_grad, cross_entropy_per_sample, entropy_with_grad, ldro_objective,
};
use subpop_core::{AdapterMLP, LdroConfig};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    m
}

fn model(dim: usize, blend: f64, seed: u64) -> Mlp<f64> {
    let spec = AdapterSpec {
        dim,
        depth: 2,
        hidden: dim,
        blend,
    };
    AdapterMLP::init(spec, seed).unwrap().to_f64()
}

fn assert_passes(name: &str, r: GradCheckReport) {
    assert!(
        r.passed,
        "{name}: max relative error {:e} at parameter {} (tol {:e})",
        r.max_rel_error, r.worst_param, r.tol
    );
}

#[test]
fn random_scalar_loss_matches_finite_differences() {
    let m = model(5, 0.6, 3);
    let x = random(4, 5, 4);
    let c = random(4, 5, 5);
    let loss = |out: ArrayView2<f64>| {
        let v = (&out * &out * &c).sum() + out.sum();
        Ok((v, &out * &c * 2.0 + 1.0))
    };
    assert_passes("scalar", grad_check(&m, &loss, x.view(), STEP, 1e-6).unwrap());
}

#[test]
fn entropy_through_adapter() {
    let m = model(6, 1.0, 11);
    let x = unit_rows(random(3, 6, 12));
    let loss = |out: ArrayView2<f64>| {
        let mut grad = Array2::zeros(out.raw_dim());
        let mut total = 0.0;
        for (i, row) in out.rows().into_iter().enumerate() {
            let (h, g) = entropy_with_grad(&row.to_vec());
            total += h;
            grad.row_mut(i).assign(&ndarray::Array1::from(g));
        }
        Ok((total, grad))
    };
    assert_passes("entropy", grad_check(&m, &loss, x.view(), STEP, TOL).unwrap());
}

#[test]
fn cosine_through_adapter() {
    let m = model(6, 0.8, 21);
    let x = unit_rows(random(4, 6, 22));
    let loss = |out: ArrayView2<f64>| {
        let mut grad = Array2::zeros(out.raw_dim());
        let mut total = 0.0;
        for i in 0..out.nrows() {
            let (c, g) = cosine_with_grad(x.row(i), out.row(i))?;
            total += c;
            grad.row_mut(i).assign(&g);
        }
        Ok((total, grad))
    };
    assert_passes("cosine", grad_check(&m, &loss, x.view(), STEP, TOL).unwrap());
}

#[test]
fn cross_entropy_through_adapter() {
    let m = model(6, 1.0, 31);
    let x = unit_rows(random(4, 6, 32));
    let texts = unit_rows(random(3, 6, 33));
    let labels = [0, 2, 1, 2];
    let loss = |out: ArrayView2<f64>| {
        let ce = cross_entropy_per_sample(out, texts.view(), &labels, 5.0)?;
        let b = out.nrows() as f64;
        Ok((ce.mean(), ce.grad_rows / b))
    };
    assert_passes("cross entropy", grad_check(&m, &loss, x.view(), STEP, TOL).unwrap());
}

fn ldro_check(debias_scale: Option<f64>, seed: u64) -> GradCheckReport {
    let m = model(6, 1.0, seed);
    let x = unit_rows(random(3, 6, seed + 1));
    let groups = [unit_rows(random(2, 6, seed + 2)), unit_rows(random(3, 6, seed + 3))];
    let cfg = LdroConfig {
        eta: 0.2,
        debias_scale,
        debias_group_weights: Some(vec![0.3, 0.7]),
        ..Default::default()
    };
    let loss = |out: ArrayView2<f64>| {
        let views: Vec<ArrayView2<f64>> = groups.iter().map(|g| g.view()).collect();
        let l = ldro_objective(x.view(), out, &views, &cfg)?;
        Ok((l.value, l.grad))
    };
    grad_check(&m, &loss, x.view(), STEP, TOL).unwrap()
}

#[test]
fn ldro_objective_through_adapter_scaled_logits() {
    for seed in [41, 51, 61] {
        assert_passes("ldro scaled", ldro_check(Some(3.0), seed));
    }
}

#[test]
fn ldro_objective_through_adapter_bare_logits() {
    for seed in [41, 51, 61] {
        assert_passes("ldro bare", ldro_check(None, seed));
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let m = model(4, 1.0, 71);
    let x = random(3, 4, 72);
    let loss = |out: ArrayView2<f64>| {
        let mut g = out.to_owned();
        g[[1, 2]] *= 2.0;
        Ok((0.5 * (&out * &out).sum(), g))
    };
    assert!(!grad_check(&m, &loss, x.view(), STEP, TOL).unwrap().passed);
}
