//! Finite-time Lyapunov spectra along orbits.
//!
//! The QR route propagates an orthonormal frame by the Jacobian cocycle and
//! accumulates `log` of the diagonal of `R`. The compound route propagates
//! `∧^k Df` as a matrix with scalar renormalization and reads off the growth
//! of its top singular value; it shares no code with the QR route beyond the
//! orbit itself.

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::error::{Error, Escape, Result};
use crate::smallmat::{binomial, singular_values, CompoundTables, Matrix};
use crate::systems::MapSystem;

pub const DEFAULT_BURN_IN: u64 = 1000;
pub const DEFAULT_RENORM_INTERVAL: u64 = 1;
/// Number of windows between the `n/2` and `n` checkpoints.
pub const TAIL_WINDOWS: u64 = 16;
pub const MIN_ITERATIONS: u64 = 100;

/// Receives every orbit point `x_t` (after burn-in) and, when requested,
/// the Jacobian at `x_t`.
pub trait OrbitObserver {
    fn needs_jacobian(&self) -> bool {
        true
    }

    fn observe(&mut self, t: u64, x: &[f64], jac: Option<&Matrix>) -> Result<()>;
}

/// Iterates `burn_in` steps, then feeds `n` orbit points to the observers.
/// Returns the state after the last step.
pub fn drive(
    system: &MapSystem,
    x0: &[f64],
    burn_in: u64,
    n: u64,
    observers: &mut [&mut dyn OrbitObserver],
) -> Result<Vec<f64>> {
    let dim = system.dim();
    if x0.len() != dim {
        return Err(Error::domain(format!(
            "initial state has length {}, {} expects {dim}",
            x0.len(),
            system.name()
        )));
    }
    let mut x = x0.to_vec();
    system.domain().wrap(&mut x);
    if !system.domain().contains(&x) {
        return Err(Error::domain(format!("initial state {x:?} outside the domain")));
    }
    let mut next = vec![0.0; dim];
    let check = |y: &[f64], index: u64| -> Result<()> {
        if system.domain().contains(y) {
            Ok(())
        } else {
            Err(Error::Divergence {
                at: Escape::Iteration(index),
                reason: format!("state {y:?} left the domain"),
            })
        }
    };
    for i in 0..burn_in {
        system.step(&x, &mut next)?;
        check(&next, i + 1)?;
        std::mem::swap(&mut x, &mut next);
    }
    let want_jac = observers.iter().any(|o| o.needs_jacobian());
    for t in 0..n {
        if want_jac {
            let j = system.step_with_jacobian(&x, &mut next)?;
            if !j.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite Jacobian at iteration {}",
                    burn_in + t
                )));
            }
            for o in observers.iter_mut() {
                o.observe(t, &x, Some(&j))?;
            }
        } else {
            system.step(&x, &mut next)?;
            for o in observers.iter_mut() {
                o.observe(t, &x, None)?;
            }
        }
        check(&next, burn_in + t + 1)?;
        std::mem::swap(&mut x, &mut next);
    }
    Ok(x)
}

/// Iteration counts (relative to the segment start) at which running
/// estimates are recorded: powers of two below `n/2`, then `TAIL_WINDOWS + 1`
/// evenly spaced points from `n/2` to `n`.
fn checkpoints(n: u64) -> (Vec<u64>, usize) {
    let half = (n / 2).max(1);
    let mut cps: Vec<u64> = Vec::new();
    let mut p = 64;
    while p < half {
        cps.push(p);
        p *= 2;
    }
    let tail_start = cps.len();
    for j in 0..=TAIL_WINDOWS {
        let c = half + (n - half) * j / TAIL_WINDOWS;
        if cps.last() != Some(&c) {
            cps.push(c);
        }
    }
    (cps, tail_start)
}

/// QR (Benettin) accumulator for one segment of `n` steps.
struct QrAccumulator {
    n: u64,
    renorm: u64,
    frame: Matrix,
    log_sums: Vec<f64>,
    log_det_sum: f64,
    checkpoints: Vec<u64>,
    next_cp: usize,
    recorded: Vec<(u64, Vec<f64>)>,
    blocks: Option<[Vec<usize>; 3]>,
    alignment: Vec<[f64; 3]>,
    alignment_samples: u64,
}

impl QrAccumulator {
    fn new(system: &MapSystem, n: u64, renorm: u64, frame: Matrix) -> Self {
        let dim = system.dim();
        let blocks = system
            .bundle()
            .and_then(|b| b.coords.as_ref())
            .map(|c| [c.stable.clone(), c.central.clone(), c.unstable.clone()]);
        QrAccumulator {
            n,
            renorm,
            frame,
            log_sums: vec![0.0; dim],
            log_det_sum: 0.0,
            checkpoints: checkpoints(n).0,
            next_cp: 0,
            recorded: Vec::new(),
            blocks,
            alignment: vec![[0.0; 3]; dim],
            alignment_samples: 0,
        }
    }

    fn renormalize(&mut self) -> Result<()> {
        let (q, r) = self.frame.qr();
        for (i, s) in self.log_sums.iter_mut().enumerate() {
            let rii = r[(i, i)];
            if !(rii > 0.0 && rii.is_finite()) {
                return Err(Error::Numeric(format!(
                    "degenerate tangent frame (R[{i},{i}] = {rii})"
                )));
            }
            *s += rii.ln();
        }
        self.frame = q;
        if let Some(blocks) = &self.blocks {
            for (col, acc) in self.alignment.iter_mut().enumerate() {
                for (b, coords) in blocks.iter().enumerate() {
                    acc[b] += coords.iter().map(|&row| self.frame[(row, col)].powi(2)).sum::<f64>();
                }
            }
            self.alignment_samples += 1;
        }
        Ok(())
    }
}

impl OrbitObserver for QrAccumulator {
    fn observe(&mut self, t: u64, _x: &[f64], jac: Option<&Matrix>) -> Result<()> {
        let j = jac.expect("QR accumulator requests Jacobians");
        self.log_det_sum += j.determinant().abs().ln();
        self.frame = j.matmul(&self.frame);
        let done = t + 1;
        let at_cp = self.checkpoints.get(self.next_cp) == Some(&done);
        if done.is_multiple_of(self.renorm) || at_cp || done == self.n {
            self.renormalize()?;
        }
        if at_cp {
            self.recorded.push((done, self.log_sums.clone()));
            self.next_cp += 1;
        }
        Ok(())
    }
}

/// Finite-time Lyapunov spectrum of one orbit segment.
///
/// `exponents` are sorted descending; every per-exponent vector uses the
/// same order. Rates are per iteration for maps and per unit time for
/// time-τ maps of flows.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub x0: Vec<f64>,
    pub n: u64,
    pub burn_in: u64,
    pub renorm_interval: u64,
    pub time_per_step: f64,
    pub flow_mode: bool,
    pub exponents: Vec<f64>,
    pub tail_oscillation: Vec<f64>,
    /// Smallest windowed rate over the tail windows (liminf proxy).
    pub window_min: Vec<f64>,
    /// Largest windowed rate over the tail windows (limsup proxy).
    pub window_max: Vec<f64>,
    pub sectional: Vec<f64>,
    pub wedge_top: f64,
    /// Birkhoff average of `log |det Df|` along the segment.
    pub log_det_rate: f64,
    /// Mean squared projection of each frame vector onto the declared
    /// (stable, central, unstable) coordinate blocks.
    pub block_alignment: Option<Vec<[f64; 3]>>,
    /// `(iteration, running estimates)` checkpoints, sorted descending
    /// per row in the same order as `exponents`.
    pub history: Vec<(u64, Vec<f64>)>,
    pub final_state: Vec<f64>,
}

impl SpectrumEstimate {
    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn max_tail_oscillation(&self) -> f64 {
        self.tail_oscillation.iter().copied().fold(0.0, f64::max)
    }

    pub fn rate_unit(&self) -> &'static str {
        if self.flow_mode {
            "per_unit_time"
        } else {
            "per_iteration"
        }
    }

    fn from_accumulator(
        acc: QrAccumulator,
        x0: &[f64],
        burn_in: u64,
        time_per_step: f64,
        flow_mode: bool,
        final_state: Vec<f64>,
    ) -> Self {
        let n = acc.n;
        let time = n as f64 * time_per_step;
        let raw: Vec<f64> = acc.log_sums.iter().map(|s| s / time).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
        let permute = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let exponents = permute(&raw);

        let (_, tail_start) = checkpoints(n);
        let history: Vec<(u64, Vec<f64>)> = acc
            .recorded
            .iter()
            .map(|(c, sums)| (*c, permute(&sums.iter().map(|s| s / (*c as f64 * time_per_step)).collect::<Vec<_>>())))
            .collect();
        let tail = &history[tail_start.min(history.len().saturating_sub(1))..];
        let dim = exponents.len();
        let mut tail_oscillation = vec![0.0; dim];
        for (i, osc) in tail_oscillation.iter_mut().enumerate() {
            let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, e)| {
                (lo.min(e[i]), hi.max(e[i]))
            });
            *osc = if hi >= lo { hi - lo } else { 0.0 };
        }
        let tail_sums = &acc.recorded[tail_start.min(acc.recorded.len().saturating_sub(1))..];
        let mut window_min = vec![f64::INFINITY; dim];
        let mut window_max = vec![f64::NEG_INFINITY; dim];
        for w in tail_sums.windows(2) {
            let (c0, s0) = &w[0];
            let (c1, s1) = &w[1];
            let span = (c1 - c0) as f64 * time_per_step;
            let rates: Vec<f64> = s1.iter().zip(s0).map(|(a, b)| (a - b) / span).collect();
            let rates = permute(&rates);
            for i in 0..dim {
                window_min[i] = window_min[i].min(rates[i]);
                window_max[i] = window_max[i].max(rates[i]);
            }
        }
        if tail_sums.len() < 2 {
            window_min = exponents.clone();
            window_max = exponents.clone();
        }
        let sectional = sectional_sums(&exponents);
        let wedge_top = sectional.iter().copied().fold(0.0, f64::max);
        let block_alignment = acc.blocks.as_ref().map(|_| {
            let count = acc.alignment_samples.max(1) as f64;
            order
                .iter()
                .map(|&i| {
                    let a = acc.alignment[i];
                    [a[0] / count, a[1] / count, a[2] / count]
                })
                .collect()
        });
        SpectrumEstimate {
            x0: x0.to_vec(),
            n,
            burn_in,
            renorm_interval: acc.renorm,
            time_per_step,
            flow_mode,
            exponents,
            tail_oscillation,
            window_min,
            window_max,
            sectional,
            wedge_top,
            log_det_rate: acc.log_det_sum / time,
            block_alignment,
            history,
            final_state,
        }
    }
}

impl Serialize for SpectrumEstimate {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let u = self.rate_unit();
        let mut m = serializer.serialize_map(None)?;
        m.serialize_entry("mode", if self.flow_mode { "flow" } else { "map" })?;
        m.serialize_entry("x0", &self.x0)?;
        m.serialize_entry("iterations", &self.n)?;
        m.serialize_entry("burn_in_iterations", &self.burn_in)?;
        m.serialize_entry("renorm_interval_iterations", &self.renorm_interval)?;
        m.serialize_entry("time_units_per_iteration", &self.time_per_step)?;
        m.serialize_entry(&format!("exponents_{u}"), &self.exponents)?;
        m.serialize_entry(&format!("tail_oscillation_{u}"), &self.tail_oscillation)?;
        m.serialize_entry(&format!("window_min_{u}"), &self.window_min)?;
        m.serialize_entry(&format!("window_max_{u}"), &self.window_max)?;
        m.serialize_entry(&format!("sectional_{u}"), &self.sectional)?;
        m.serialize_entry(&format!("wedge_top_{u}"), &self.wedge_top)?;
        m.serialize_entry(&format!("log_det_rate_{u}"), &self.log_det_rate)?;
        if let Some(a) = &self.block_alignment {
            m.serialize_entry("block_alignment_energy_stable_central_unstable", a)?;
        }
        m.serialize_entry("final_state", &self.final_state)?;
        m.end()
    }
}

/// Partial sums `χ^k = Σ_{i≤k} λ_i`.
pub fn sectional_sums(exponents: &[f64]) -> Vec<f64> {
    exponents
        .iter()
        .scan(0.0, |acc, &e| {
            *acc += e;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectrumConfig {
    pub n: u64,
    pub renorm_interval: u64,
    pub burn_in: u64,
}

impl SpectrumConfig {
    pub fn new(n: u64) -> Self {
        SpectrumConfig {
            n,
            renorm_interval: DEFAULT_RENORM_INTERVAL,
            burn_in: DEFAULT_BURN_IN,
        }
    }

    pub fn with_renorm_interval(mut self, r: u64) -> Self {
        self.renorm_interval = r;
        self
    }

    pub fn with_burn_in(mut self, b: u64) -> Self {
        self.burn_in = b;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n < MIN_ITERATIONS {
            return Err(Error::validation("n", self.n, format!(">= {MIN_ITERATIONS}")));
        }
        if self.renorm_interval == 0 {
            return Err(Error::validation("renorm_interval", 0, ">= 1"));
        }
        Ok(())
    }
}

/// Observer form of the QR method, for fusing with other per-orbit work.
pub struct SpectrumObserver {
    acc: QrAccumulator,
}

impl SpectrumObserver {
    pub fn new(system: &MapSystem, config: &SpectrumConfig) -> Result<Self> {
        config.validate()?;
        Ok(SpectrumObserver {
            acc: QrAccumulator::new(system, config.n, config.renorm_interval, Matrix::identity(system.dim())),
        })
    }

    pub fn finish(self, system: &MapSystem, x0: &[f64], burn_in: u64, final_state: Vec<f64>) -> SpectrumEstimate {
        SpectrumEstimate::from_accumulator(
            self.acc,
            x0,
            burn_in,
            system.time_per_step(),
            system.flow().is_some(),
            final_state,
        )
    }
}

impl OrbitObserver for SpectrumObserver {
    fn observe(&mut self, t: u64, x: &[f64], jac: Option<&Matrix>) -> Result<()> {
        self.acc.observe(t, x, jac)
    }
}

/// QR method with the default burn-in.
pub fn lyapunov_spectrum_qr(
    system: &MapSystem,
    x0: &[f64],
    n: u64,
    renorm_interval: u64,
) -> Result<SpectrumEstimate> {
    lyapunov_spectrum(system, x0, &SpectrumConfig::new(n).with_renorm_interval(renorm_interval))
}

pub fn lyapunov_spectrum(system: &MapSystem, x0: &[f64], config: &SpectrumConfig) -> Result<SpectrumEstimate> {
    let mut obs = SpectrumObserver::new(system, config)?;
    let end = drive(system, x0, config.burn_in, config.n, &mut [&mut obs])?;
    Ok(obs.finish(system, x0, config.burn_in, end))
}

/// `(k, χ̂^k)` for `k = 1..=dim`.
pub fn sectional_profile(est: &SpectrumEstimate) -> Vec<(usize, f64)> {
    est.sectional.iter().enumerate().map(|(i, &s)| (i + 1, s)).collect()
}

/// Scaled product of compound matrices: `true = exp(log_scale) · matrix`.
struct ScaledProduct {
    matrix: Matrix,
    log_scale: f64,
}

impl ScaledProduct {
    fn identity(size: usize) -> Self {
        ScaledProduct {
            matrix: Matrix::identity(size),
            log_scale: 0.0,
        }
    }

    fn push(&mut self, factor: &Matrix, k: usize) -> Result<()> {
        let mut next = factor.matmul(&self.matrix);
        let scale = next.max_abs();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Numeric(format!("degenerate ∧^{k} propagator")));
        }
        next.scale_in_place(1.0 / scale);
        self.log_scale += scale.ln();
        self.matrix = next;
        Ok(())
    }

    fn log_norm(&self) -> f64 {
        self.log_scale + singular_values(&self.matrix).largest().ln()
    }
}

struct BlockState {
    m: u64,
    products: Vec<ScaledProduct>,
    log_sum: f64,
    blocks: u64,
}

/// Compound-matrix cocycle `∧^k Df` for a set of `k`, optionally also
/// restarted every `m` steps to average `log⁺ max_k ‖∧^k Df^m‖`.
pub struct WedgeObserver {
    tables: CompoundTables,
    ks: Vec<usize>,
    products: Vec<ScaledProduct>,
    block: Option<BlockState>,
}

impl WedgeObserver {
    pub fn new(dim: usize, ks: &[usize]) -> Result<Self> {
        for &k in ks {
            if k < 1 || k > dim {
                return Err(Error::domain(format!("k = {k} outside 1..={dim}")));
            }
        }
        Ok(WedgeObserver {
            tables: CompoundTables::new(dim)?,
            ks: ks.to_vec(),
            products: ks.iter().map(|&k| ScaledProduct::identity(binomial(dim, k))).collect(),
            block: None,
        })
    }

    /// Also accumulates block norms over consecutive `m`-step blocks.
    pub fn with_blocks(mut self, m: u64) -> Self {
        let dim = self.tables.dim();
        self.block = Some(BlockState {
            m,
            products: self.ks.iter().map(|&k| ScaledProduct::identity(binomial(dim, k))).collect(),
            log_sum: 0.0,
            blocks: 0,
        });
        self
    }

    /// Growth rates `(1/(nτ)) log ‖∧^k Df^n‖` in the order of `ks`.
    pub fn rates(&self, n: u64, time_per_step: f64) -> Vec<f64> {
        let time = n as f64 * time_per_step;
        self.products.iter().map(|p| p.log_norm() / time).collect()
    }

    /// `(1/m) ⟨log⁺ max_k ‖∧^k Df^m‖⟩` over completed blocks, per step.
    pub fn block_rate(&self) -> f64 {
        match &self.block {
            Some(b) if b.blocks > 0 => b.log_sum / (b.blocks as f64 * b.m as f64),
            _ => 0.0,
        }
    }

    pub fn ks(&self) -> &[usize] {
        &self.ks
    }
}

impl OrbitObserver for WedgeObserver {
    fn observe(&mut self, t: u64, _x: &[f64], jac: Option<&Matrix>) -> Result<()> {
        let j = jac.expect("wedge observer requests Jacobians");
        let compounds = self.tables.all_compounds(j);
        for (k, p) in self.ks.iter().zip(self.products.iter_mut()) {
            p.push(&compounds[k - 1], *k)?;
        }
        if let Some(b) = self.block.as_mut() {
            for (k, p) in self.ks.iter().zip(b.products.iter_mut()) {
                p.push(&compounds[k - 1], *k)?;
            }
            if (t + 1).is_multiple_of(b.m) {
                let best = b.products.iter().map(|p| p.log_norm()).fold(0.0, f64::max);
                b.log_sum += best;
                b.blocks += 1;
                for (k, p) in self.ks.iter().zip(b.products.iter_mut()) {
                    *p = ScaledProduct::identity(binomial(self.tables.dim(), *k));
                }
            }
        }
        Ok(())
    }
}

/// `χ^k` through the compound cocycle, with the default burn-in.
pub fn wedge_exponent_direct(system: &MapSystem, x0: &[f64], n: u64, k: usize) -> Result<f64> {
    Ok(wedge_exponents_direct(system, x0, n, &[k], DEFAULT_BURN_IN)?[0])
}

/// `χ^k` for several `k` along one orbit.
pub fn wedge_exponents_direct(
    system: &MapSystem,
    x0: &[f64],
    n: u64,
    ks: &[usize],
    burn_in: u64,
) -> Result<Vec<f64>> {
    if n < MIN_ITERATIONS {
        return Err(Error::validation("n", n, format!(">= {MIN_ITERATIONS}")));
    }
    let mut obs = WedgeObserver::new(system.dim(), ks)?;
    drive(system, x0, burn_in, n, &mut [&mut obs])?;
    Ok(obs.rates(n, system.time_per_step()))
}

/// Consecutive non-overlapping windows along one orbit. The tangent frame is
/// carried from one window to the next; only the log sums restart.
pub fn finite_time_windows(
    system: &MapSystem,
    x0: &[f64],
    n: u64,
    window: u64,
) -> Result<Vec<SpectrumEstimate>> {
    finite_time_windows_with(system, x0, n, window, DEFAULT_BURN_IN)
}

pub fn finite_time_windows_with(
    system: &MapSystem,
    x0: &[f64],
    n: u64,
    window: u64,
    burn_in: u64,
) -> Result<Vec<SpectrumEstimate>> {
    if window < MIN_ITERATIONS {
        return Err(Error::validation("window", window, format!(">= {MIN_ITERATIONS}")));
    }
    if n < 2 * window {
        return Err(Error::validation("n", n, format!(">= 2 * window = {}", 2 * window)));
    }
    let mut out = Vec::new();
    let mut start = x0.to_vec();
    let mut frame = Matrix::identity(system.dim());
    let mut skip = burn_in;
    for _ in 0..(n / window) {
        let mut acc = QrAccumulator::new(system, window, DEFAULT_RENORM_INTERVAL, frame.clone());
        // Burn-in happens once, before the first window.
        let begin = if skip > 0 {
            drive(system, &start, skip, 0, &mut [])?
        } else {
            start.clone()
        };
        skip = 0;
        let end = drive(system, &begin, 0, window, &mut [&mut acc])?;
        frame = acc.frame.clone();
        out.push(SpectrumEstimate::from_accumulator(
            acc,
            &begin,
            0,
            system.time_per_step(),
            system.flow().is_some(),
            end.clone(),
        ));
        start = end;
    }
    Ok(out)
}
