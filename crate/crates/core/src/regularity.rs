//! Finite-sample diagnostics for the regularity sets and spectrum shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::cocycle::{
    drive, OrbitObserver, SpectrumConfig, SpectrumEstimate, SpectrumObserver, WedgeObserver,
    DEFAULT_BURN_IN,
};
use crate::error::{Error, Result};
use crate::smallmat::Matrix;
use crate::systems::{BundleBlocks, MapSystem, Region};

pub const DEFAULT_ZERO_TOL: f64 = 1e-2;
pub const DEFAULT_C0: f64 = 5e-2;
pub const DEFAULT_REGULARITY_TOL: f64 = 2e-2;
pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-2;
pub const MIN_BIRKHOFF_HORIZON: u64 = 1000;
pub const MIN_DEFECT_ITERATIONS: u64 = 10_000;
pub const ALIGNMENT_THRESHOLD: f64 = 0.9;
const BUMP_COUNT: usize = 8;
const BUMP_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub zero_tol: f64,
    pub c0: f64,
    pub birkhoff: f64,
    pub lyapunov: f64,
    pub pomega: f64,
    /// Upper bound on tail oscillation for an orbit to count as converged.
    pub convergence: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            zero_tol: DEFAULT_ZERO_TOL,
            c0: DEFAULT_C0,
            birkhoff: DEFAULT_REGULARITY_TOL,
            lyapunov: DEFAULT_REGULARITY_TOL,
            pomega: DEFAULT_REGULARITY_TOL,
            convergence: DEFAULT_CONVERGENCE_TOL,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("zero_tol", self.zero_tol),
            ("c0", self.c0),
            ("birkhoff", self.birkhoff),
            ("lyapunov", self.lyapunov),
            ("pomega", self.pomega),
            ("convergence", self.convergence),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("tolerances.{name}"), v, "finite and > 0"));
            }
        }
        if self.c0 <= self.zero_tol {
            return Err(Error::validation(
                "tolerances.c0",
                self.c0,
                format!("> zero_tol = {}", self.zero_tol),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Coordinate rescaled to `[0, 1]` on its axis.
    Identity,
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Factor {
    pub axis: usize,
    pub phase: Phase,
}

/// Test functions for Birkhoff averages. Coordinates are rescaled to the
/// unit interval on each axis; periodic axes enter through `sin 2πu` and
/// `cos 2πu` so every observable is continuous on the domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    Monomial(Vec<Factor>),
    Bump { center: Vec<f64>, width: f64 },
}

fn unit_coords(region: &Region, x: &[f64]) -> Vec<f64> {
    region
        .axes
        .iter()
        .zip(x)
        .map(|(a, &v)| (v - a.lo) / (a.hi - a.lo))
        .collect()
}

impl Observable {
    pub fn coordinate(axis: usize, phase: Phase) -> Self {
        Observable::Monomial(vec![Factor { axis, phase }])
    }

    fn eval_unit(&self, region: &Region, u: &[f64]) -> f64 {
        match self {
            Observable::Monomial(factors) => factors
                .iter()
                .map(|f| {
                    let v = u[f.axis];
                    match f.phase {
                        Phase::Identity => v,
                        Phase::Sin => (std::f64::consts::TAU * v).sin(),
                        Phase::Cos => (std::f64::consts::TAU * v).cos(),
                    }
                })
                .product(),
            Observable::Bump { center, width } => {
                let r2: f64 = region
                    .axes
                    .iter()
                    .zip(u.iter().zip(center))
                    .map(|(axis, (&a, &c))| {
                        let mut d = a - c;
                        if axis.periodic {
                            d -= d.round();
                        }
                        d * d
                    })
                    .sum();
                (-r2 / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn eval(&self, region: &Region, x: &[f64]) -> f64 {
        self.eval_unit(region, &unit_coords(region, x))
    }

    pub fn name(&self) -> String {
        match self {
            Observable::Monomial(fs) => fs
                .iter()
                .map(|f| match f.phase {
                    Phase::Identity => format!("u{}", f.axis),
                    Phase::Sin => format!("sin(2pi u{})", f.axis),
                    Phase::Cos => format!("cos(2pi u{})", f.axis),
                })
                .collect::<Vec<_>>()
                .join("*"),
            Observable::Bump { center, .. } => format!("bump{center:.3?}"),
        }
    }
}

/// Coordinates, their squares and pairwise products, and seeded Gaussian
/// bumps on the domain.
pub fn default_battery(region: &Region, seed: u64) -> Vec<Observable> {
    let mut features = Vec::new();
    for (i, a) in region.axes.iter().enumerate() {
        if a.periodic {
            features.push(Factor { axis: i, phase: Phase::Sin });
            features.push(Factor { axis: i, phase: Phase::Cos });
        } else {
            features.push(Factor { axis: i, phase: Phase::Identity });
        }
    }
    let mut out: Vec<Observable> = features.iter().map(|f| Observable::Monomial(vec![*f])).collect();
    for (i, a) in features.iter().enumerate() {
        for b in &features[i..] {
            out.push(Observable::Monomial(vec![*a, *b]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..BUMP_COUNT {
        let center = (0..region.dim()).map(|_| rng.random::<f64>()).collect();
        out.push(Observable::Bump { center, width: BUMP_WIDTH });
    }
    out
}

fn birkhoff_checkpoints(horizon: u64) -> Vec<u64> {
    (4..=8).map(|j| horizon * j / 8).collect()
}

/// Running Birkhoff averages at `horizon·j/8`, `j = 4..=8`.
pub struct BirkhoffObserver {
    region: Region,
    observables: Vec<Observable>,
    /// Values at the first orbit point; sums hold deviations from these.
    reference: Vec<f64>,
    sums: Vec<f64>,
    checkpoints: Vec<u64>,
    averages: Vec<Vec<f64>>,
}

impl BirkhoffObserver {
    pub fn new(system: &MapSystem, horizon: u64, observables: Vec<Observable>) -> Result<Self> {
        if horizon < MIN_BIRKHOFF_HORIZON {
            return Err(Error::validation("horizon", horizon, format!(">= {MIN_BIRKHOFF_HORIZON}")));
        }
        if observables.is_empty() {
            return Err(Error::domain("observable list is empty"));
        }
        Ok(BirkhoffObserver {
            region: system.domain().clone(),
            reference: Vec::new(),
            sums: vec![0.0; observables.len()],
            observables,
            checkpoints: birkhoff_checkpoints(horizon),
            averages: Vec::new(),
        })
    }

    /// Max over observables of the spread of running averages.
    pub fn oscillation(&self) -> f64 {
        (0..self.observables.len())
            .map(|i| {
                let (lo, hi) = self
                    .averages
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a[i]), hi.max(a[i])));
                if hi >= lo {
                    hi - lo
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// Final averages, one per observable.
    pub fn averages(&self) -> Option<&[f64]> {
        self.averages.last().map(|v| v.as_slice())
    }
}

impl OrbitObserver for BirkhoffObserver {
    fn needs_jacobian(&self) -> bool {
        false
    }

    fn observe(&mut self, t: u64, x: &[f64], _jac: Option<&Matrix>) -> Result<()> {
        let u = unit_coords(&self.region, x);
        if self.reference.is_empty() {
            self.reference = self.observables.iter().map(|o| o.eval_unit(&self.region, &u)).collect();
        }
        for ((s, o), r) in self.sums.iter_mut().zip(&self.observables).zip(&self.reference) {
            *s += o.eval_unit(&self.region, &u) - r;
        }
        let done = t + 1;
        if self.checkpoints.contains(&done) {
            let avg = self.sums.iter().zip(&self.reference).map(|(s, r)| r + s / done as f64).collect();
            self.averages.push(avg);
        }
        Ok(())
    }
}

pub fn birkhoff_diagnostic(
    system: &MapSystem,
    x0: &[f64],
    horizon: u64,
    observables: &[Observable],
) -> Result<f64> {
    let mut obs = BirkhoffObserver::new(system, horizon, observables.to_vec())?;
    drive(system, x0, DEFAULT_BURN_IN, horizon, &mut [&mut obs])?;
    Ok(obs.oscillation())
}

/// `max_k |χ^k(compound route) − χ̂^k(QR)| + max tail oscillation`.
pub fn defect_from(est: &SpectrumEstimate, direct: &[f64]) -> f64 {
    let cross = est
        .sectional
        .iter()
        .zip(direct)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    cross + est.max_tail_oscillation()
}

pub fn lyapunov_regularity_defect(system: &MapSystem, x0: &[f64], n: u64) -> Result<f64> {
    if n < MIN_DEFECT_ITERATIONS {
        return Err(Error::validation("n", n, format!(">= {MIN_DEFECT_ITERATIONS}")));
    }
    let ks: Vec<usize> = (1..=system.dim()).collect();
    let mut qr = SpectrumObserver::new(system, &SpectrumConfig::new(n))?;
    let mut wedge = WedgeObserver::new(system.dim(), &ks)?;
    let end = drive(system, x0, DEFAULT_BURN_IN, n, &mut [&mut qr, &mut wedge])?;
    let direct = wedge.rates(n, system.time_per_step());
    let est = qr.finish(system, x0, DEFAULT_BURN_IN, end);
    Ok(defect_from(&est, &direct))
}

/// Block length used when none is given: `n/100` clamped to `[10, 1000]`.
pub fn default_pomega_block(n: u64) -> u64 {
    (n / 100).clamp(10, 1000)
}

fn check_pomega_args(n: u64, m: u64) -> Result<()> {
    if !(10..=1000).contains(&m) {
        return Err(Error::validation("m", m, "10..=1000"));
    }
    if n < 100 * m {
        return Err(Error::validation("n", n, format!(">= 100 * m = {}", 100 * m)));
    }
    Ok(())
}

/// `χ̂^+_∧(x) − (1/m)·⟨log⁺ max_k ‖∧^k Df^m‖⟩` along the orbit.
pub fn pomega_gap(system: &MapSystem, x0: &[f64], n: u64, m: u64) -> Result<f64> {
    check_pomega_args(n, m)?;
    let mut qr = SpectrumObserver::new(system, &SpectrumConfig::new(n))?;
    let ks: Vec<usize> = (1..=system.dim()).collect();
    let mut pw = WedgeObserver::new(system.dim(), &ks)?.with_blocks(m);
    let end = drive(system, x0, DEFAULT_BURN_IN, n, &mut [&mut qr, &mut pw])?;
    let est = qr.finish(system, x0, DEFAULT_BURN_IN, end);
    Ok(est.wedge_top - pw.block_rate() / system.time_per_step())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    pub birkhoff_oscillation: f64,
    pub lyap_defect: f64,
    pub pomega_gap: f64,
    pub pomega_block: u64,
    pub in_b: bool,
    pub in_l: bool,
    pub in_p: bool,
    pub in_r: bool,
    pub flow_mode: bool,
}

impl RegularityReport {
    /// `in_P` additionally requires converged Birkhoff averages: with
    /// disagreeing checkpoints the orbit exhibits more than one candidate
    /// accumulation measure and the gap is not attributed to a single one.
    pub fn from_diagnostics(
        birkhoff_oscillation: f64,
        lyap_defect: f64,
        pomega_gap: f64,
        pomega_block: u64,
        flow_mode: bool,
        tol: &Tolerances,
    ) -> Self {
        let in_b = birkhoff_oscillation < tol.birkhoff;
        let in_l = lyap_defect < tol.lyapunov;
        let in_p = pomega_gap.abs() < tol.pomega && in_b;
        RegularityReport {
            birkhoff_oscillation,
            lyap_defect,
            pomega_gap,
            pomega_block,
            in_b,
            in_l,
            in_p,
            in_r: in_b && in_l && in_p,
            flow_mode,
        }
    }
}

impl Serialize for RegularityReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let u = if self.flow_mode { "per_unit_time" } else { "per_iteration" };
        let mut m = serializer.serialize_map(Some(8))?;
        m.serialize_entry("birkhoff_oscillation_observable_units", &self.birkhoff_oscillation)?;
        m.serialize_entry(&format!("lyapunov_defect_{u}"), &self.lyap_defect)?;
        m.serialize_entry(&format!("pomega_gap_{u}"), &self.pomega_gap)?;
        m.serialize_entry("pomega_block_iterations", &self.pomega_block)?;
        m.serialize_entry("in_B", &self.in_b)?;
        m.serialize_entry("in_L", &self.in_l)?;
        m.serialize_entry("in_P", &self.in_p)?;
        m.serialize_entry("in_R", &self.in_r)?;
        m.end()
    }
}

/// Everything computed along one orbit in a single pass.
#[derive(Debug, Clone)]
pub struct OrbitAnalysis {
    pub spectrum: SpectrumEstimate,
    pub regularity: Option<RegularityReport>,
}

/// Runs the QR spectrum and, when `with_regularity`, the Birkhoff,
/// compound-route and pω diagnostics along the same orbit. `extra`
/// observers see the same orbit points.
pub fn analyze_orbit(
    system: &MapSystem,
    x0: &[f64],
    n: u64,
    with_regularity: bool,
    tol: &Tolerances,
    extra: &mut [&mut dyn OrbitObserver],
) -> Result<OrbitAnalysis> {
    let config = SpectrumConfig::new(n);
    let mut qr = SpectrumObserver::new(system, &config)?;
    if !with_regularity {
        let mut obs: Vec<&mut dyn OrbitObserver> = vec![&mut qr];
        for o in extra.iter_mut() {
            obs.push(&mut **o);
        }
        let end = drive(system, x0, config.burn_in, n, &mut obs)?;
        return Ok(OrbitAnalysis {
            spectrum: qr.finish(system, x0, config.burn_in, end),
            regularity: None,
        });
    }
    if n < MIN_DEFECT_ITERATIONS {
        return Err(Error::validation("n", n, format!(">= {MIN_DEFECT_ITERATIONS}")));
    }
    let m = default_pomega_block(n);
    let ks: Vec<usize> = (1..=system.dim()).collect();
    let mut wedge = WedgeObserver::new(system.dim(), &ks)?.with_blocks(m);
    let mut bk = BirkhoffObserver::new(system, n, default_battery(system.domain(), 0))?;
    let end = {
        let mut obs: Vec<&mut dyn OrbitObserver> = vec![&mut qr, &mut wedge, &mut bk];
        for o in extra.iter_mut() {
            obs.push(&mut **o);
        }
        drive(system, x0, config.burn_in, n, &mut obs)?
    };
    let tau = system.time_per_step();
    let direct = wedge.rates(n, tau);
    let spectrum = qr.finish(system, x0, config.burn_in, end);
    let report = RegularityReport::from_diagnostics(
        bk.oscillation(),
        defect_from(&spectrum, &direct),
        spectrum.wedge_top - wedge.block_rate() / tau,
        m,
        spectrum.flow_mode,
        tol,
    );
    Ok(OrbitAnalysis {
        spectrum,
        regularity: Some(report),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumMode {
    Map,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumKind {
    UnimodalMap(usize),
    UnimodalFlow(usize),
    NonHyperbolic,
    Undetermined,
}

impl SpectrumKind {
    pub fn label(&self) -> &'static str {
        match self {
            SpectrumKind::UnimodalMap(_) => "UnimodalMap",
            SpectrumKind::UnimodalFlow(_) => "UnimodalFlow",
            SpectrumKind::NonHyperbolic => "NonHyperbolic",
            SpectrumKind::Undetermined => "Undetermined",
        }
    }

    pub fn is_unimodal(&self) -> bool {
        matches!(self, SpectrumKind::UnimodalMap(_) | SpectrumKind::UnimodalFlow(_))
    }

    pub fn unstable_index(&self) -> Option<usize> {
        match self {
            SpectrumKind::UnimodalMap(k) | SpectrumKind::UnimodalFlow(k) => Some(*k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumClass {
    pub kind: SpectrumKind,
    pub mode: SpectrumMode,
    /// Distance of the nearest exponent to 0 (flow direction excluded).
    pub margin: f64,
    /// Distinct exponent values `p(x)` with multiplicities.
    pub groups: Vec<(f64, usize)>,
}

impl Serialize for SpectrumClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let u = match self.mode {
            SpectrumMode::Map => "per_iteration",
            SpectrumMode::Flow => "per_unit_time",
        };
        let mut m = serializer.serialize_map(None)?;
        m.serialize_entry("class", self.kind.label())?;
        if let Some(k) = self.kind.unstable_index() {
            m.serialize_entry("k", &k)?;
        }
        m.serialize_entry(&format!("margin_{u}"), &self.margin)?;
        m.serialize_entry("distinct_exponents", &self.groups.len())?;
        let values: Vec<f64> = self.groups.iter().map(|g| g.0).collect();
        let mult: Vec<usize> = self.groups.iter().map(|g| g.1).collect();
        m.serialize_entry(&format!("distinct_values_{u}"), &values)?;
        m.serialize_entry("multiplicities", &mult)?;
        m.end()
    }
}

/// Groups descending exponents whose consecutive gaps are below `gap`;
/// each group is reported by its mean.
pub fn group_exponents(exponents: &[f64], gap: f64) -> Vec<(f64, usize)> {
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for &e in exponents {
        match groups.last_mut() {
            Some(g) if (g[g.len() - 1] - e).abs() < gap => g.push(e),
            _ => groups.push(vec![e]),
        }
    }
    groups
        .into_iter()
        .map(|g| (g.iter().sum::<f64>() / g.len() as f64, g.len()))
        .collect()
}

pub fn classify_spectrum(exponents: &[f64], mode: SpectrumMode, c0: f64, zero_tol: f64) -> Result<SpectrumClass> {
    if !(zero_tol > 0.0 && c0 > zero_tol) {
        return Err(Error::validation("c0", c0, format!("c0 > zero_tol > 0 (zero_tol = {zero_tol})")));
    }
    if exponents.is_empty() || exponents.iter().any(|e| !e.is_finite()) {
        return Err(Error::domain("exponents must be finite and nonempty"));
    }
    if exponents.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::domain(format!("exponents not sorted descending: {exponents:?}")));
    }
    let groups = group_exponents(exponents, 2.0 * zero_tol);
    let near_zero: Vec<usize> = (0..exponents.len()).filter(|&i| exponents[i].abs() < zero_tol).collect();
    let positive = exponents.iter().filter(|&&e| e > c0).count();
    let negative = exponents.iter().filter(|&&e| e < -c0).count();
    let d = exponents.len();

    let (kind, skip) = match mode {
        SpectrumMode::Map => {
            let kind = if !near_zero.is_empty() {
                SpectrumKind::NonHyperbolic
            } else if positive >= 1 && positive < d && positive + negative == d {
                SpectrumKind::UnimodalMap(positive)
            } else {
                SpectrumKind::Undetermined
            };
            (kind, None)
        }
        SpectrumMode::Flow => {
            // The exponent closest to 0 is the flow direction.
            let flow_dir = (0..d).min_by(|&a, &b| exponents[a].abs().total_cmp(&exponents[b].abs()));
            let kind = if near_zero.len() >= 2 {
                SpectrumKind::NonHyperbolic
            } else if near_zero.len() == 1 && positive >= 1 && positive + negative == d - 1 {
                SpectrumKind::UnimodalFlow(positive)
            } else {
                SpectrumKind::Undetermined
            };
            (kind, if near_zero.len() == 1 { flow_dir } else { None })
        }
    };
    let margin = (0..d)
        .filter(|&i| Some(i) != skip)
        .map(|i| exponents[i].abs())
        .fold(f64::INFINITY, f64::min);
    Ok(SpectrumClass {
        kind,
        mode,
        margin: if margin.is_finite() { margin } else { 0.0 },
        groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedCentralReport {
    pub passed: bool,
    /// `max(central) − c0`; positive when the expanding side passes.
    pub positive_margin: f64,
    /// `−c0 − min(central)`; positive when the contracting side passes.
    pub negative_margin: f64,
    pub central_sum: f64,
    /// `|Σ central − log |det Df|_central||` for dissipative central blocks.
    pub dissipativity_residual: Option<f64>,
}

impl MixedCentralReport {
    pub fn with_log_det(mut self, central_log_det: Option<f64>) -> Self {
        self.dissipativity_residual = central_log_det.map(|v| (self.central_sum - v).abs());
        self
    }
}

pub fn mixed_central_check(exponents: &[f64], central_indices: &[usize], c0: f64) -> Result<MixedCentralReport> {
    if central_indices.is_empty() {
        return Err(Error::domain("central index set is empty"));
    }
    if let Some(&i) = central_indices.iter().find(|&&i| i >= exponents.len()) {
        return Err(Error::domain(format!("central index {i} out of range for {} exponents", exponents.len())));
    }
    let central: Vec<f64> = central_indices.iter().map(|&i| exponents[i]).collect();
    let hi = central.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = central.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MixedCentralReport {
        passed: hi >= c0 && lo <= -c0,
        positive_margin: hi - c0,
        negative_margin: -c0 - lo,
        central_sum: central.iter().sum(),
        dissipativity_residual: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionalCheck {
    pub passed: bool,
    pub planes: usize,
    pub sum: f64,
}

fn check_sectional_args(central: &[f64], bundle_dim: usize, k: usize) -> Result<Vec<f64>> {
    if central.len() != bundle_dim {
        return Err(Error::domain(format!(
            "{} central exponents for a bundle of dimension {bundle_dim}",
            central.len()
        )));
    }
    if k == 0 || k > bundle_dim {
        return Err(Error::domain(format!("k = {k} outside 1..={bundle_dim}")));
    }
    let mut v = central.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v)
}

/// Passes when the `k` smallest central exponents have negative sum.
pub fn sectional_contraction_check(central: &[f64], bundle_dim: usize, k: usize) -> Result<SectionalCheck> {
    let v = check_sectional_args(central, bundle_dim, k)?;
    let sum: f64 = v[bundle_dim - k..].iter().sum();
    Ok(SectionalCheck { passed: sum < 0.0, planes: k, sum })
}

/// Passes when the `p` largest central exponents have positive sum.
pub fn sectional_expansion_check(central: &[f64], bundle_dim: usize, p: usize) -> Result<SectionalCheck> {
    let v = check_sectional_args(central, bundle_dim, p)?;
    let sum: f64 = v[..p].iter().sum();
    Ok(SectionalCheck { passed: sum > 0.0, planes: p, sum })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Alignment,
    Value,
}

/// Which exponents (indices into the descending list) belong to each block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockAttribution {
    pub method: AttributionMethod,
    pub stable: Vec<usize>,
    pub central: Vec<usize>,
    pub unstable: Vec<usize>,
    /// Smallest winning projection energy (alignment method only).
    pub min_alignment: Option<f64>,
}

/// Attributes exponents to declared blocks by frame alignment with the
/// coordinate blocks, falling back to ordering by value.
pub fn attribute_blocks(est: &SpectrumEstimate, bundle: &BundleBlocks) -> Result<BlockAttribution> {
    let d = est.dim();
    if bundle.stable + bundle.central + bundle.unstable != d {
        return Err(Error::domain(format!(
            "bundle dimensions ({}, {}, {}) do not sum to {d}",
            bundle.stable, bundle.central, bundle.unstable
        )));
    }
    if let Some(align) = &est.block_alignment {
        let mut sets: [Vec<usize>; 3] = Default::default();
        let mut min_energy = f64::INFINITY;
        for (i, a) in align.iter().enumerate() {
            let (b, e) = a
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .map(|(b, e)| (b, *e))
                .unwrap_or((0, 0.0));
            sets[b].push(i);
            min_energy = min_energy.min(e);
        }
        let [stable, central, unstable] = sets;
        if min_energy > ALIGNMENT_THRESHOLD
            && stable.len() == bundle.stable
            && central.len() == bundle.central
            && unstable.len() == bundle.unstable
        {
            return Ok(BlockAttribution {
                method: AttributionMethod::Alignment,
                stable,
                central,
                unstable,
                min_alignment: Some(min_energy),
            });
        }
    }
    Ok(BlockAttribution {
        method: AttributionMethod::Value,
        unstable: (0..bundle.unstable).collect(),
        central: (bundle.unstable..bundle.unstable + bundle.central).collect(),
        stable: (bundle.unstable + bundle.central..d).collect(),
        min_alignment: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smallmat::singular_values;
    use crate::systems::{build_system, sample_initial_conditions, SystemSpec};
    use proptest::prelude::*;

    fn sys(name: &str) -> MapSystem {
        build_system(&SystemSpec::new(name)).unwrap()
    }

    #[test]
    fn classify_examples() {
        let c = classify_spectrum(&[0.69, -0.69], SpectrumMode::Map, 0.1, 0.01).unwrap();
        assert_eq!(c.kind, SpectrumKind::UnimodalMap(1));
        assert!((c.margin - 0.69).abs() < 1e-15);
        let c = classify_spectrum(&[0.0, 0.0, -0.99], SpectrumMode::Map, 0.05, 0.01).unwrap();
        assert_eq!(c.kind, SpectrumKind::NonHyperbolic);
        assert_eq!(c.groups.len(), 2);
        assert_eq!(c.groups[0].1, 2);
        let c = classify_spectrum(&[0.9, 0.0, -14.6], SpectrumMode::Flow, 0.1, 0.01).unwrap();
        assert_eq!(c.kind, SpectrumKind::UnimodalFlow(1));
        assert!((c.margin - 0.9).abs() < 1e-15);
        let c = classify_spectrum(&[0.9, 0.001, -0.002, -14.6], SpectrumMode::Flow, 0.1, 0.01).unwrap();
        assert_eq!(c.kind, SpectrumKind::NonHyperbolic);
        let c = classify_spectrum(&[0.9, 0.03, -1.0], SpectrumMode::Map, 0.1, 0.01).unwrap();
        assert_eq!(c.kind, SpectrumKind::Undetermined);
        let c = classify_spectrum(&[-0.5, -1.0], SpectrumMode::Map, 0.1, 0.01).unwrap();
        assert_eq!(c.kind, SpectrumKind::Undetermined);
    }

    #[test]
    fn classify_rejects_bad_input() {
        assert!(matches!(
            classify_spectrum(&[-0.69, 0.69], SpectrumMode::Map, 0.1, 0.01),
            Err(Error::Domain(_))
        ));
        assert!(classify_spectrum(&[0.69, -0.69], SpectrumMode::Map, 0.01, 0.1).is_err());
        assert!(classify_spectrum(&[0.69, -0.69], SpectrumMode::Map, 0.1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn classify_is_homogeneous(
            mut e in proptest::collection::vec(-3.0f64..3.0, 1..6),
            c in 1.0f64..50.0,
        ) {
            e.sort_by(|a, b| b.total_cmp(a));
            for mode in [SpectrumMode::Map, SpectrumMode::Flow] {
                let a = classify_spectrum(&e, mode, 0.1, 0.01).unwrap();
                let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
                let b = classify_spectrum(&scaled, mode, 0.1 * c, 0.01 * c).unwrap();
                prop_assert_eq!(a.kind, b.kind);
                prop_assert!((a.margin * c - b.margin).abs() <= 1e-12 * b.margin.max(1.0));
            }
        }

        #[test]
        fn in_r_is_conjunction(b in 0.0f64..0.05, l in 0.0f64..0.05, p in -0.05f64..0.05) {
            let r = RegularityReport::from_diagnostics(b, l, p, 100, false, &Tolerances::default());
            prop_assert_eq!(r.in_r, r.in_b && r.in_l && r.in_p);
            if r.in_r {
                prop_assert!(r.in_b && r.in_l && r.in_p);
            }
        }
    }

    #[test]
    fn mixed_central_examples() {
        let e = [0.3, -1.9];
        assert!(mixed_central_check(&e, &[0, 1], 0.1).unwrap().passed);
        let e = [0.05, -1.2];
        let r = mixed_central_check(&e, &[0, 1], 0.1).unwrap();
        assert!(!r.passed);
        assert!(r.positive_margin < 0.0 && r.negative_margin > 0.0);
        assert!(mixed_central_check(&e, &[], 0.1).is_err());
        assert!(mixed_central_check(&e, &[2], 0.1).is_err());
        let r = mixed_central_check(&[0.3, -1.9], &[0, 1], 0.1).unwrap().with_log_det(Some(-1.6));
        assert!(r.dissipativity_residual.unwrap() < 1e-12);
    }

    #[test]
    fn sectional_examples() {
        let c = [0.3, 0.0, -1.0];
        let r = sectional_contraction_check(&c, 3, 2).unwrap();
        assert!(r.passed && (r.sum + 1.0).abs() < 1e-15);
        let r = sectional_expansion_check(&c, 3, 3).unwrap();
        assert!(!r.passed && (r.sum + 0.7).abs() < 1e-12);
        let c = [0.9, 0.0, -0.2];
        assert!(sectional_expansion_check(&c, 3, 3).unwrap().passed);
        assert!(sectional_contraction_check(&c, 3, 2).unwrap().passed);
        assert!(sectional_contraction_check(&c, 3, 4).is_err());
        assert!(sectional_contraction_check(&c, 2, 1).is_err());
    }

    #[test]
    fn grouping_uses_gap() {
        let g = group_exponents(&[0.5, 0.49, 0.0, -0.01, -1.0], 0.02);
        assert_eq!(g.iter().map(|x| x.1).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn birkhoff_fixed_point_is_exact() {
        let d = sys("diag_linear");
        let battery = default_battery(d.domain(), 0);
        assert_eq!(birkhoff_diagnostic(&d, &[0.0, 0.0], 1000, &battery).unwrap(), 0.0);
        assert!(birkhoff_diagnostic(&d, &[0.0, 0.0], 999, &battery).is_err());
        assert!(birkhoff_diagnostic(&d, &[0.0, 0.0], 1000, &[]).is_err());
    }

    #[test]
    fn birkhoff_rotation_factor() {
        let ns = sys("northsouth_skew");
        let sin = Observable::coordinate(0, Phase::Sin);
        // Golden-mean rotation number.
        let y = (5f64.sqrt() - 1.0) / 2.0;
        let osc = birkhoff_diagnostic(&ns, &[0.1, y, 0.3], 1_000_000, &[sin.clone()]).unwrap();
        assert!(osc < 5e-3, "{osc}");
        // Oracle: the closed-form average of sin 2πx over the circle is 0.
        let mut obs = BirkhoffObserver::new(&ns, 1_000_000, vec![sin]).unwrap();
        drive(&ns, &[0.1, y, 0.3], 0, 1_000_000, &mut [&mut obs]).unwrap();
        assert!(obs.averages().unwrap()[0].abs() < 1e-4);
    }

    #[test]
    fn birkhoff_solenoid_battery() {
        let s = sys("solenoid");
        let battery = default_battery(s.domain(), 0);
        let short = birkhoff_diagnostic(&s, s.default_x0(), 50_000, &battery).unwrap();
        let long = birkhoff_diagnostic(&s, s.default_x0(), 100_000, &battery).unwrap();
        assert!(long < 1e-2, "{long}");
        // Doubling the horizon roughly halves the spread.
        assert!(long < 3.0 * short / 2.0 && long > short / 6.0, "{short} {long}");
    }

    #[test]
    fn battery_shape() {
        let s = sys("viana");
        let b = default_battery(s.domain(), 0);
        // θ periodic: 2 features; T1, T2, x, y: 4 features.
        let f = 6;
        assert_eq!(b.len(), f + f * (f + 1) / 2 + BUMP_COUNT);
        assert_eq!(b, default_battery(s.domain(), 0));
        let x = s.default_x0();
        for o in &b {
            assert!(o.eval(s.domain(), x).is_finite(), "{}", o.name());
        }
    }

    #[test]
    fn defect_examples() {
        let d = sys("diag_linear");
        assert!(lyapunov_regularity_defect(&d, &[0.3, 0.6], 10_000).unwrap() < 1e-9);
        let s = sys("solenoid");
        let short = lyapunov_regularity_defect(&s, s.default_x0(), 10_000).unwrap();
        let long = lyapunov_regularity_defect(&s, s.default_x0(), 100_000).unwrap();
        assert!(long < 1e-2 && long < short, "{short} {long}");
        assert!(lyapunov_regularity_defect(&s, s.default_x0(), 9_999).is_err());
    }

    #[test]
    fn pomega_examples() {
        let d = sys("diag_linear");
        assert!(pomega_gap(&d, &[0.0, 0.0], 10_000, 100).unwrap().abs() < 1e-10);
        let s = sys("solenoid");
        let g100 = pomega_gap(&s, s.default_x0(), 100_000, 100).unwrap();
        let g200 = pomega_gap(&s, s.default_x0(), 100_000, 200).unwrap();
        assert!(g100.abs() < 2e-2, "{g100}");
        assert!(g200.abs() <= g100.abs(), "{g100} {g200}");
        assert!(pomega_gap(&s, s.default_x0(), 100_000, 5).is_err());
        assert!(pomega_gap(&s, s.default_x0(), 10_000, 1000).is_err());
    }

    #[test]
    fn pomega_northsouth_shear_bias() {
        // The shear block [[1,1],[0,1]]^m has top singular value ≈ m, so the
        // block term carries a bias of about ln(m)/m that vanishes as m grows.
        let ns = sys("northsouth_skew");
        let x0 = [0.1, 0.37, 0.3];
        let g100 = pomega_gap(&ns, &x0, 1_000_000, 100).unwrap();
        let sigma = {
            let shear = Matrix::from_rows(&[&[1.0, 100.0], &[0.0, 1.0]]).unwrap();
            singular_values(&shear).largest()
        };
        assert!((g100 + sigma.ln() / 100.0).abs() < 2e-3, "{g100}");
        let g1000 = pomega_gap(&ns, &x0, 1_000_000, 1000).unwrap();
        assert!(g1000.abs() < 2e-2, "{g1000}");
    }

    #[test]
    fn fused_pass_matches_separate_routes() {
        let s = sys("henon");
        let x0 = s.default_x0();
        let tol = Tolerances::default();
        let a = analyze_orbit(&s, x0, 20_000, true, &tol, &mut []).unwrap();
        let r = a.regularity.unwrap();
        let defect = lyapunov_regularity_defect(&s, x0, 20_000).unwrap();
        assert_eq!(r.lyap_defect, defect);
        let gap = pomega_gap(&s, x0, 20_000, default_pomega_block(20_000)).unwrap();
        assert_eq!(r.pomega_gap, gap);
        let osc = birkhoff_diagnostic(&s, x0, 20_000, &default_battery(s.domain(), 0)).unwrap();
        assert_eq!(r.birkhoff_oscillation, osc);
    }

    #[test]
    fn solenoid_positive_control() {
        let s = sys("solenoid");
        let tol = Tolerances::default();
        let a = analyze_orbit(&s, s.default_x0(), 100_000, true, &tol, &mut []).unwrap();
        let c = classify_spectrum(&a.spectrum.exponents, SpectrumMode::Map, tol.c0, tol.zero_tol).unwrap();
        assert_eq!(c.kind, SpectrumKind::UnimodalMap(1));
        assert!(c.margin > 0.5);
        let r = a.regularity.unwrap();
        assert!(r.in_b && r.in_l && r.in_p && r.in_r, "{r:?}");
    }

    #[test]
    fn northsouth_negative_control() {
        let s = sys("northsouth_skew");
        let tol = Tolerances::default();
        for x0 in sample_initial_conditions(&s, s.sample_region(), 3, 7).unwrap() {
            let a = analyze_orbit(&s, &x0, 100_000, true, &tol, &mut []).unwrap();
            let c = classify_spectrum(&a.spectrum.exponents, SpectrumMode::Map, tol.c0, tol.zero_tol).unwrap();
            assert_eq!(c.kind, SpectrumKind::NonHyperbolic);
            let r = a.regularity.unwrap();
            assert!(r.in_b && r.in_l && r.in_p, "{r:?}");
        }
    }

    #[test]
    fn viana_blocks_by_alignment() {
        let s = sys("viana");
        let a = analyze_orbit(&s, s.default_x0(), 100_000, false, &Tolerances::default(), &mut []).unwrap();
        let attr = attribute_blocks(&a.spectrum, s.bundle().unwrap()).unwrap();
        assert_eq!(attr.method, AttributionMethod::Alignment);
        assert_eq!(attr.unstable, vec![0]);
        assert_eq!(attr.central, vec![1, 4]);
        assert_eq!(attr.stable, vec![2, 3]);
        let mixed = mixed_central_check(&a.spectrum.exponents, &attr.central, DEFAULT_C0)
            .unwrap()
            .with_log_det(s.central_log_det());
        assert!(mixed.passed);
        assert!(mixed.dissipativity_residual.unwrap() < 1e-3, "{mixed:?}");
    }

    #[test]
    fn value_fallback_without_coordinates() {
        let s = sys("lorenz");
        let est = crate::cocycle::lyapunov_spectrum_qr(&s, s.default_x0(), 200, 1).unwrap();
        let attr = attribute_blocks(&est, s.bundle().unwrap()).unwrap();
        assert_eq!(attr.method, AttributionMethod::Value);
        assert_eq!(attr.central, vec![0, 1]);
        assert_eq!(attr.stable, vec![2]);
    }

    #[test]
    fn tolerance_validation() {
        assert!(Tolerances::default().validate().is_ok());
        let t = Tolerances { c0: 0.001, ..Tolerances::default() };
        assert!(t.validate().is_err());
        let t = Tolerances { birkhoff: -1.0, ..Tolerances::default() };
        assert!(t.validate().is_err());
    }
}
