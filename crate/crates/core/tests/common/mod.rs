//! Shared fixtures for integration tests: random first-stage instances and an
//! iterative saddle-point solver that works from raw feature rows.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use nsi_core::bridge::HyperParams;

/// Raw first-stage data: bridge features `b`, critic features `c`, benchmark
/// `y1` and Riesz values `alpha`, one row per unit.
pub struct Instance {
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub y1: Vec<f64>,
    pub alpha: Vec<f64>,
    pub hyper: HyperParams,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(30..=100);
    let p = rng.random_range(1..=5);
    let k = rng.random_range(1..=5);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let latent: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let b = DMatrix::from_fn(n, p, |i, j| {
        latent[i].powi(j as i32) + 0.5 * normal(&mut rng)
    });
    let c = DMatrix::from_fn(n, k, |i, j| {
        latent[i] * (j as f64 + 1.0).sqrt() + normal(&mut rng)
    });
    let y1 = latent.iter().map(|l| l + 0.3 * normal(&mut rng)).collect();
    let alpha = (0..n)
        .map(|_| if rng.random_bool(0.5) { 2.0 } else { -2.0 })
        .collect();
    let mut draw = || rng.random_range(0.05..0.5);
    let hyper = HyperParams {
        mu: draw(),
        gamma_phi: draw(),
        gamma_q: draw(),
        gamma_xi: draw(),
        ridge_q: draw(),
    };
    Instance {
        b,
        c,
        y1,
        alpha,
        hyper,
    }
}

/// Solves `min_x max_y L(x, y)` for a smooth strongly-convex-strongly-concave
/// quadratic by extragradient steps on the monotone field
/// `F(x, y) = (∇ₓL, −∇ᵧL)`, supplied as `field`.
fn extragradient(
    dx: usize,
    dy: usize,
    lipschitz: f64,
    field: impl Fn(&DVector<f64>, &DVector<f64>) -> (DVector<f64>, DVector<f64>),
) -> DVector<f64> {
    let step = 0.5 / lipschitz;
    let mut x = DVector::zeros(dx);
    let mut y = DVector::zeros(dy);
    for _ in 0..5_000_000 {
        let (gx, gy) = field(&x, &y);
        if gx.amax().max(gy.amax()) < 1e-13 {
            break;
        }
        let xh = &x - &gx * step;
        let yh = &y - &gy * step;
        let (hx, hy) = field(&xh, &yh);
        x -= hx * step;
        y -= hy * step;
    }
    x
}

fn row_sum(m: &DMatrix<f64>, weights: impl Fn(usize) -> f64) -> DVector<f64> {
    let mut out = DVector::zeros(m.ncols());
    for i in 0..m.nrows() {
        out += m.row(i).transpose() * weights(i);
    }
    out / m.nrows() as f64
}

fn field_bound(inst: &Instance, convex_weight: f64) -> f64 {
    let n = inst.b.nrows() as f64;
    let gb = inst.b.transpose() * &inst.b / n;
    let gc = inst.c.transpose() * &inst.c / n;
    let cross = inst.c.transpose() * &inst.b / n;
    let (p, k) = (gb.nrows(), gc.nrows());
    let mut jac = DMatrix::zeros(p + k, p + k);
    jac.view_mut((0, 0), (p, p))
        .copy_from(&(gb * convex_weight));
    jac.view_mut((0, p), (p, k)).copy_from(&cross.transpose());
    jac.view_mut((p, 0), (k, p)).copy_from(&(-&cross));
    jac.view_mut((p, p), (k, k)).copy_from(&gc);
    jac.singular_values().max()
        + 2.0
            * inst
                .hyper
                .gamma_q
                .max(inst.hyper.gamma_phi)
                .max(inst.hyper.gamma_xi)
}

/// Bridge coefficients from
/// `Ê[q(W)(φ(Y) − Y₁)] − ½Ê[q²] − γ_q‖γ‖² + μÊ[φ²] + γ_φ‖β‖²`.
pub fn bridge_by_iteration(inst: &Instance) -> DVector<f64> {
    let h = inst.hyper;
    let (b, c, y1) = (&inst.b, &inst.c, &inst.y1);
    let lip = field_bound(inst, 2.0 * h.mu);
    extragradient(b.ncols(), c.ncols(), lip, |beta, gamma| {
        let phi = b * beta;
        let q = c * gamma;
        let gx = row_sum(b, |i| q[i] + 2.0 * h.mu * phi[i]) + beta * (2.0 * h.gamma_phi);
        let gy = row_sum(c, |i| phi[i] - y1[i] - q[i]) - gamma * (2.0 * h.gamma_q);
        (gx, -gy)
    })
}

/// ξ coefficients from
/// `Ê[q(W)ξ(Y)] − ½Ê[q²] − γ_q‖γ‖² − Ê[α ξ(Y)] + γ_ξ‖δ‖²`.
pub fn xi_by_iteration(inst: &Instance) -> DVector<f64> {
    let h = inst.hyper;
    let (b, c, alpha) = (&inst.b, &inst.c, &inst.alpha);
    let lip = field_bound(inst, 0.0);
    extragradient(b.ncols(), c.ncols(), lip, |delta, gamma| {
        let xi = b * delta;
        let q = c * gamma;
        let gx = row_sum(b, |i| q[i] - alpha[i]) + delta * (2.0 * h.gamma_xi);
        let gy = row_sum(c, |i| xi[i] - q[i]) - gamma * (2.0 * h.gamma_q);
        (gx, -gy)
    })
}

/// `Ê[α b]`, the linear term of the ξ problem.
pub fn riesz_moment(inst: &Instance) -> DVector<f64> {
    row_sum(&inst.b, |i| inst.alpha[i])
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}
