//! Fixed-step RK4 for vector fields together with their variational
//! equation `Φ' = DX(x(s)) Φ`, the time-1 map adapter and equilibria.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Escape, Result};
use crate::smallmat::Matrix;
use crate::systems::{BundleBlocks, Dynamics, FlowProvenance, MapSystem, Region};

/// Propagators with a larger norm are rejected.
pub const PROPAGATOR_NORM_LIMIT: f64 = 1e12;
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;
const DEDUP_DISTANCE: f64 = 1e-6;
const HYPERBOLIC_TOL: f64 = 1e-8;

pub trait VectorField: Send + Sync {
    fn eval(&self, x: &[f64], out: &mut [f64]);

    fn jacobian(&self, x: &[f64]) -> Matrix;

    fn divergence(&self, x: &[f64]) -> f64 {
        self.jacobian(x).diag().iter().sum()
    }
}

#[derive(Clone)]
pub struct FlowSystem {
    name: String,
    dim: usize,
    params: BTreeMap<String, f64>,
    field: Arc<dyn VectorField>,
    default_dt: f64,
    domain: Region,
    sample_region: Region,
    bundle: Option<BundleBlocks>,
    default_x0: Vec<f64>,
}

impl fmt::Debug for FlowSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FlowSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("params", &self.params)
            .field("default_dt", &self.default_dt)
            .finish()
    }
}

impl FlowSystem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        field: Arc<dyn VectorField>,
        domain: Region,
    ) -> Self {
        FlowSystem {
            name: name.into(),
            dim,
            params: BTreeMap::new(),
            field,
            default_dt: 0.005,
            sample_region: domain.clone(),
            domain,
            bundle: None,
            default_x0: vec![0.0; dim],
        }
    }

    pub fn with_default_dt(mut self, dt: f64) -> Self {
        self.default_dt = dt;
        self.params.insert("dt".into(), dt);
        self
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    pub fn with_bundle(mut self, bundle: BundleBlocks) -> Self {
        self.bundle = Some(bundle);
        self
    }

    pub fn with_sample_region(mut self, region: Region) -> Self {
        self.sample_region = region;
        self
    }

    pub fn with_default_x0(mut self, x0: Vec<f64>) -> Self {
        self.default_x0 = x0;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn default_dt(&self) -> f64 {
        self.default_dt
    }

    pub fn domain(&self) -> &Region {
        &self.domain
    }

    pub fn default_x0(&self) -> &[f64] {
        &self.default_x0
    }

    pub fn field(&self) -> &Arc<dyn VectorField> {
        &self.field
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.field.eval(x, &mut out);
        out
    }

    pub fn field_jacobian(&self, x: &[f64]) -> Matrix {
        self.field.jacobian(x)
    }
}

struct Lorenz {
    sigma: f64,
    rho: f64,
    beta: f64,
}

impl VectorField for Lorenz {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * (x[1] - x[0]);
        out[1] = x[0] * (self.rho - x[2]) - x[1];
        out[2] = x[0] * x[1] - self.beta * x[2];
    }

    fn jacobian(&self, x: &[f64]) -> Matrix {
        let mut j = Matrix::zeros(3, 3);
        j[(0, 0)] = -self.sigma;
        j[(0, 1)] = self.sigma;
        j[(1, 0)] = self.rho - x[2];
        j[(1, 1)] = -1.0;
        j[(1, 2)] = -x[0];
        j[(2, 0)] = x[1];
        j[(2, 1)] = x[0];
        j[(2, 2)] = -self.beta;
        j
    }
}

pub fn lorenz(sigma: f64, rho: f64, beta: f64) -> FlowSystem {
    let domain = Region::from_bounds(&[-40.0, -50.0, -10.0], &[40.0, 50.0, 80.0]).expect("static bounds");
    let params = BTreeMap::from([
        ("sigma".to_string(), sigma),
        ("rho".to_string(), rho),
        ("beta".to_string(), beta),
    ]);
    FlowSystem::new("lorenz", 3, Arc::new(Lorenz { sigma, rho, beta }), domain)
        .with_params(params)
        .with_default_dt(0.005)
        .with_sample_region(
            Region::from_bounds(&[-20.0, -25.0, 5.0], &[20.0, 25.0, 45.0]).expect("static bounds"),
        )
        .with_bundle(BundleBlocks {
            stable: 1,
            central: 2,
            unstable: 0,
            coords: None,
        })
        .with_default_x0(vec![1.0, 1.0, 1.0])
}

struct LinearDiag {
    rates: Vec<f64>,
}

impl VectorField for LinearDiag {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for ((o, r), v) in out.iter_mut().zip(&self.rates).zip(x) {
            *o = r * v;
        }
    }

    fn jacobian(&self, _x: &[f64]) -> Matrix {
        Matrix::from_diag(&self.rates)
    }
}

/// `ẋ = diag(l1, l2) x`.
pub fn linear_flow(l1: f64, l2: f64) -> FlowSystem {
    let domain = Region::from_bounds(&[-1e3, -1e3], &[1e3, 1e3]).expect("static bounds");
    let params = BTreeMap::from([("l1".to_string(), l1), ("l2".to_string(), l2)]);
    FlowSystem::new("linear_flow", 2, Arc::new(LinearDiag { rates: vec![l1, l2] }), domain)
        .with_params(params)
        .with_default_dt(0.005)
        .with_sample_region(Region::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]).expect("static bounds"))
        .with_default_x0(vec![0.5, 0.5])
}

/// Step sizes covering `[0, t]`: full steps of `dt` and one shortened last step.
fn step_sizes(t: f64, dt: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::validation("t", t, "> 0"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::validation("dt", dt, "> 0"));
    }
    let full = (t / dt + 1e-9).floor() as usize;
    let mut steps = vec![dt; full];
    let rem = t - full as f64 * dt;
    if rem > 1e-9 * dt {
        steps.push(rem);
    }
    Ok(steps)
}

/// One RK4 step; when `phi` is given it is advanced by the same stages.
/// The state arithmetic does not depend on whether `phi` is present.
fn rk4_step(field: &dyn VectorField, x: &mut [f64], h: f64, phi: Option<&mut Matrix>) {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    field.eval(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    let x2 = tmp.clone();
    field.eval(&x2, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    let x3 = tmp.clone();
    field.eval(&x3, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    let x4 = tmp;
    field.eval(&x4, &mut k4);

    if let Some(phi) = phi {
        let axpy = |m: &Matrix, s: f64, d: &Matrix| {
            let mut out = m.clone();
            for (o, v) in out.as_mut_slice().iter_mut().zip(d.as_slice()) {
                *o += s * v;
            }
            out
        };
        let q1 = field.jacobian(x).matmul(phi);
        let q2 = field.jacobian(&x2).matmul(&axpy(phi, 0.5 * h, &q1));
        let q3 = field.jacobian(&x3).matmul(&axpy(phi, 0.5 * h, &q2));
        let q4 = field.jacobian(&x4).matmul(&axpy(phi, h, &q3));
        let p = phi.as_mut_slice();
        for i in 0..p.len() {
            p[i] += h / 6.0
                * (q1.as_slice()[i] + 2.0 * q2.as_slice()[i] + 2.0 * q3.as_slice()[i] + q4.as_slice()[i]);
        }
    }
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn check_finite(x: &[f64], time: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            at: Escape::Time(time),
            reason: "non-finite state during integration".into(),
        })
    }
}

/// `X_t(x)` by RK4.
pub fn integrate(flow: &FlowSystem, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    let mut state = x.to_vec();
    let mut time = 0.0;
    for h in step_sizes(t, dt)? {
        rk4_step(flow.field.as_ref(), &mut state, h, None);
        time += h;
        check_finite(&state, time)?;
    }
    Ok(state)
}

/// `(X_t(x), Φ(t))` with `Φ(0) = I`, integrated jointly by RK4.
pub fn integrate_with_variational(
    flow: &FlowSystem,
    x: &[f64],
    t: f64,
    dt: f64,
) -> Result<(Vec<f64>, Matrix)> {
    let mut state = x.to_vec();
    let mut phi = Matrix::identity(flow.dim);
    let mut time = 0.0;
    for h in step_sizes(t, dt)? {
        rk4_step(flow.field.as_ref(), &mut state, h, Some(&mut phi));
        time += h;
        check_finite(&state, time)?;
        if !phi.is_finite() {
            return Err(Error::Divergence {
                at: Escape::Time(time),
                reason: "non-finite tangent propagator".into(),
            });
        }
    }
    let norm = phi.max_abs();
    if norm > PROPAGATOR_NORM_LIMIT {
        return Err(Error::Overflow { norm });
    }
    Ok((state, phi))
}

struct TimeOneMap {
    flow: FlowSystem,
    dt: f64,
}

impl Dynamics for TimeOneMap {
    fn step(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let y = integrate(&self.flow, x, 1.0, self.dt)?;
        out.copy_from_slice(&y);
        Ok(())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        Ok(integrate_with_variational(&self.flow, x, 1.0, self.dt)?.1)
    }

    fn step_with_jacobian(&self, x: &[f64], out: &mut [f64]) -> Result<Matrix> {
        let (y, phi) = integrate_with_variational(&self.flow, x, 1.0, self.dt)?;
        out.copy_from_slice(&y);
        Ok(phi)
    }
}

/// The time-1 map `X_1` with Jacobian `Φ(1)`.
pub fn time_one_map(flow: &FlowSystem, dt: f64) -> Result<MapSystem> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(Error::validation("dt", dt, "(0, 1]"));
    }
    let mut params = flow.params.clone();
    params.insert("dt".into(), dt);
    let dynamics = TimeOneMap {
        flow: flow.clone(),
        dt,
    };
    let mut sys = MapSystem::new(flow.name.clone(), flow.dim, Arc::new(dynamics), flow.domain.clone())
        .with_params(params)
        .with_sample_region(flow.sample_region.clone())
        .with_default_x0(flow.default_x0.clone())
        .with_flow(FlowProvenance {
            flow: flow.name.clone(),
            dt,
            time_per_step: 1.0,
        });
    if let Some(b) = &flow.bundle {
        sys = sys.with_bundle(b.clone());
    }
    Ok(sys)
}

/// Growth rate of the flow direction, `(1/t) Σ log ‖Φ(1; x_k) X(x_k)‖ / ‖X(x_k)‖`
/// over unit-time segments. Each segment restarts from the exact field
/// vector so that integration error cannot feed the unstable direction.
pub fn flow_direction_exponent(flow: &FlowSystem, x0: &[f64], segments: usize, dt: f64) -> Result<f64> {
    if segments == 0 {
        return Err(Error::validation("segments", 0, ">= 1"));
    }
    let mut x = x0.to_vec();
    let mut sum = 0.0;
    for k in 0..segments {
        let v = flow.eval(&x);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::domain(format!("orbit sits on an equilibrium at segment {k}")));
        }
        let (next, phi) = integrate_with_variational(flow, &x, 1.0, dt)?;
        let w = phi.mul_vec(&v);
        sum += (w.iter().map(|a| a * a).sum::<f64>().sqrt() / norm).ln();
        x = next;
    }
    Ok(sum / segments as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium {
    pub state: Vec<f64>,
    /// Jacobian eigenvalues as `(re, im)`, sorted by real part descending.
    pub eigenvalues: Vec<(f64, f64)>,
    pub hyperbolic: bool,
}

pub fn eigenvalues(m: &Matrix) -> Vec<(f64, f64)> {
    let na = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut ev: Vec<(f64, f64)> = na.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
    ev.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    ev
}

fn newton(flow: &FlowSystem, start: &[f64]) -> Option<Vec<f64>> {
    let mut x = start.to_vec();
    for _ in 0..NEWTON_MAX_ITER {
        let f = flow.eval(&x);
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !fnorm.is_finite() {
            return None;
        }
        if fnorm < NEWTON_TOL {
            return Some(x);
        }
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        let delta = flow.field_jacobian(&x).solve(&neg).ok()?;
        let dnorm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().zip(&delta).for_each(|(a, d)| *a += d);
        let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dnorm < NEWTON_TOL * scale {
            let f = flow.eval(&x);
            let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            return (fnorm < 1e-8 * scale).then_some(x);
        }
    }
    None
}

/// Newton from `seeds` uniform starts in `region`, deduplicated and sorted.
pub fn find_equilibria(flow: &FlowSystem, region: &Region, seeds: usize, seed: u64) -> Result<Vec<Equilibrium>> {
    region.check_nonempty()?;
    let mut roots: Vec<Vec<f64>> = Vec::new();
    for i in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let start: Vec<f64> = region
            .axes
            .iter()
            .map(|a| a.lo + rng.random::<f64>() * a.width())
            .collect();
        if let Some(root) = newton(flow, &start) {
            let dup = roots.iter().any(|r| {
                r.iter().zip(&root).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < DEDUP_DISTANCE
            });
            if !dup {
                roots.push(root);
            }
        }
    }
    roots.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(roots
        .into_iter()
        .map(|state| {
            let eigenvalues = eigenvalues(&flow.field_jacobian(&state));
            let hyperbolic = eigenvalues.iter().all(|(re, _)| re.abs() >= HYPERBOLIC_TOL);
            Equilibrium {
                state,
                eigenvalues,
                hyperbolic,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lorenz_std() -> FlowSystem {
        lorenz(10.0, 28.0, 8.0 / 3.0)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn origin_is_fixed_and_propagator_is_matrix_exponential() {
        let flow = lorenz_std();
        let (x, phi) = integrate_with_variational(&flow, &[0.0; 3], 1.0, 0.001).unwrap();
        assert_eq!(x, vec![0.0; 3]);
        // Oracle: exp(J) = V exp(Λ) V⁻¹. J at the origin is block diagonal,
        // the (x, y) block has eigenvalues (-11 ± √1201)/2 with eigenvectors
        // (10, λ + 10).
        let disc = (81.0f64 + 4.0 * 10.0 * 28.0).sqrt();
        let l1 = (-11.0 + disc) / 2.0;
        let l2 = (-11.0 - disc) / 2.0;
        let v = nalgebra::Matrix2::new(10.0, 10.0, l1 + 10.0, l2 + 10.0);
        let vinv = v.try_inverse().unwrap();
        let e = v * nalgebra::Matrix2::new(l1.exp(), 0.0, 0.0, l2.exp()) * vinv;
        for r in 0..2 {
            for c in 0..2 {
                assert!(rel(phi[(r, c)], e[(r, c)]) < 1e-6, "({r},{c}) {} vs {}", phi[(r, c)], e[(r, c)]);
            }
        }
        assert!(rel(phi[(2, 2)], (-8.0f64 / 3.0).exp()) < 1e-6);
        assert_eq!(phi[(0, 2)], 0.0);
        assert_eq!(phi[(2, 0)], 0.0);
    }

    #[test]
    fn linear_flow_propagator_is_exact_exponential() {
        let flow = linear_flow(1.0, -1.0);
        let (_, phi) = integrate_with_variational(&flow, &[0.3, 0.4], 1.0, 0.005).unwrap();
        assert!((phi[(0, 0)] - 1f64.exp()).abs() < 1e-8);
        assert!((phi[(1, 1)] - (-1f64).exp()).abs() < 1e-8);
        assert_eq!(phi[(0, 1)], 0.0);
    }

    #[test]
    fn step_halving_agrees() {
        let flow = lorenz_std();
        let x0 = [1.0, 1.0, 1.0];
        let a = integrate(&flow, &x0, 0.5, 0.01).unwrap();
        let b = integrate(&flow, &x0, 0.5, 0.005).unwrap();
        let c = integrate(&flow, &x0, 0.5, 0.0025).unwrap();
        let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let coarse = dist(&a, &b);
        let fine = dist(&b, &c);
        assert!(coarse < 1e-3, "{coarse}");
        // Fourth order: halving h shrinks the difference about 16-fold.
        assert!(fine < coarse / 10.0, "{coarse} {fine}");
    }

    #[test]
    fn shortened_last_step_reaches_t() {
        assert_eq!(step_sizes(1.0, 0.005).unwrap().len(), 200);
        let s = step_sizes(0.0123, 0.005).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s.iter().sum::<f64>() - 0.0123).abs() < 1e-15);
        assert!(step_sizes(0.0, 0.01).is_err());
    }

    #[test]
    fn log_det_matches_divergence() {
        // div X = -(σ + 1 + β) = -41/3 for the standard Lorenz parameters.
        let flow = lorenz_std();
        let mut x = vec![1.0, 1.0, 1.0];
        for _ in 0..5 {
            x = integrate(&flow, &x, 1.0, 0.005).unwrap();
        }
        for t in [0.25, 0.5, 1.0] {
            let (_, phi) = integrate_with_variational(&flow, &x, t, 0.001).unwrap();
            let rate = phi.determinant().ln() / t;
            assert!((rate + 41.0 / 3.0).abs() < 1e-6, "t={t} rate={rate}");
        }
    }

    #[test]
    fn propagator_cocycle_property() {
        let flow = lorenz_std();
        let x = integrate(&flow, &[1.0, 1.0, 1.0], 3.0, 0.005).unwrap();
        let (xt, phi_t) = integrate_with_variational(&flow, &x, 0.4, 0.005).unwrap();
        let (_, phi_s) = integrate_with_variational(&flow, &xt, 0.3, 0.005).unwrap();
        let (_, phi_ts) = integrate_with_variational(&flow, &x, 0.7, 0.005).unwrap();
        let composed = phi_s.matmul(&phi_t);
        let scale = phi_ts.max_abs();
        for (a, b) in composed.as_slice().iter().zip(phi_ts.as_slice()) {
            assert!((a - b).abs() < 1e-6 * scale.max(1.0));
        }
    }

    #[test]
    fn overflow_is_reported() {
        let flow = linear_flow(40.0, -1.0);
        let err = integrate_with_variational(&flow, &[1e-30, 0.0], 1.0, 0.005).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
    }

    #[test]
    fn divergence_carries_escape_time() {
        struct Blowup;
        impl VectorField for Blowup {
            fn eval(&self, x: &[f64], out: &mut [f64]) {
                out[0] = x[0] * x[0];
            }
            fn jacobian(&self, x: &[f64]) -> Matrix {
                Matrix::from_diag(&[2.0 * x[0]])
            }
        }
        let flow = FlowSystem::new("blowup", 1, Arc::new(Blowup), Region::from_bounds(&[-1.0], &[1.0]).unwrap());
        match integrate(&flow, &[1.0], 2.0, 0.01).unwrap_err() {
            Error::Divergence { at: Escape::Time(t), .. } => assert!(t > 0.9 && t < 1.1, "{t}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn time_one_map_semigroup_and_fixed_points() {
        let flow = lorenz_std();
        let map = time_one_map(&flow, 0.005).unwrap();
        let x0 = [1.0, 1.0, 1.0];
        let mut a = vec![0.0; 3];
        let mut b = vec![0.0; 3];
        map.step(&x0, &mut a).unwrap();
        map.step(&a, &mut b).unwrap();
        let direct = integrate(&flow, &x0, 2.0, 0.005).unwrap();
        for (u, v) in b.iter().zip(&direct) {
            assert!((u - v).abs() < 1e-7);
        }
        let c = 72f64.sqrt();
        for eq in [[0.0, 0.0, 0.0], [c, c, 27.0], [-c, -c, 27.0]] {
            map.step(&eq, &mut a).unwrap();
            let res = a.iter().zip(&eq).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(res < 1e-10, "residual {res}");
        }
    }

    #[test]
    fn adapter_jacobian_is_bitwise_propagator() {
        let flow = lorenz_std();
        let map = time_one_map(&flow, 0.005).unwrap();
        let pts = crate::systems::sample_initial_conditions(&map, map.sample_region(), 5, 3).unwrap();
        for p in pts {
            let (y, phi) = integrate_with_variational(&flow, &p, 1.0, 0.005).unwrap();
            assert_eq!(map.jacobian(&p).unwrap(), phi);
            let mut out = vec![0.0; 3];
            let j = map.step_with_jacobian(&p, &mut out).unwrap();
            assert_eq!(j, phi);
            assert_eq!(out, y);
            map.step(&p, &mut out).unwrap();
            assert_eq!(out, y);
        }
    }

    #[test]
    fn lorenz_equilibria() {
        let flow = lorenz_std();
        let eqs = find_equilibria(&flow, flow.domain(), 64, 0).unwrap();
        assert_eq!(eqs.len(), 3);
        let c = 72f64.sqrt();
        let want = [[-c, -c, 27.0], [0.0, 0.0, 0.0], [c, c, 27.0]];
        for (eq, w) in eqs.iter().zip(want) {
            for (a, b) in eq.state.iter().zip(w) {
                assert!((a - b).abs() < 1e-8, "{:?}", eq.state);
            }
            assert!(eq.hyperbolic);
        }
        let low = lorenz(10.0, 0.5, 8.0 / 3.0);
        let eqs = find_equilibria(&low, low.domain(), 64, 0).unwrap();
        assert_eq!(eqs.len(), 1);
        assert!(eqs[0].state.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn equilibrium_eigenvalues_match_characteristic_polynomial() {
        // Oracle: roots of det(λI - J) found by bisection/deflation on the cubic.
        let flow = lorenz_std();
        let c = 72f64.sqrt();
        let j = flow.field_jacobian(&[c, c, 27.0]);
        let tr = j.diag().iter().sum::<f64>();
        let minors = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)]
            + j[(0, 0)] * j[(2, 2)] - j[(0, 2)] * j[(2, 0)]
            + j[(1, 1)] * j[(2, 2)] - j[(1, 2)] * j[(2, 1)];
        let det = j.determinant();
        let p = |l: f64| l * l * l - tr * l * l + minors * l - det;
        let (mut lo, mut hi) = (-100.0, 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (p(lo) < 0.0) == (p(mid) < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let real_root = 0.5 * (lo + hi);
        // Remaining quadratic l² + bl + c from synthetic division.
        let b = real_root - tr;
        let cq = minors + real_root * b;
        let re = -b / 2.0;
        let ev = eigenvalues(&j);
        assert!(ev.iter().any(|(r, i)| (r - real_root).abs() < 1e-9 && i.abs() < 1e-9));
        assert!(ev.iter().filter(|(r, _)| (r - re).abs() < 1e-9).count() == 2);
        assert!(cq - re * re > 0.0, "pair is complex");
        assert!(re.abs() > 1e-8 && real_root.abs() > 1e-8);
    }

    #[test]
    fn flow_direction_exponent_is_near_zero() {
        let flow = lorenz_std();
        let x = integrate(&flow, &[1.0, 1.0, 1.0], 50.0, 0.005).unwrap();
        let rate = flow_direction_exponent(&flow, &x, 2000, 0.005).unwrap();
        assert!(rate.abs() < 5e-3, "{rate}");
    }
}
