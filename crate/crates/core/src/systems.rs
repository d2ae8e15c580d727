//! Builtin dynamical systems as discrete maps.
//!
//! | name              | dim | step                                                        |
//! |-------------------|-----|-------------------------------------------------------------|
//! | `viana`           | 5   | `(dθ, λ_s T + c(cos 2πθ, sin 2πθ), a(θ) − x² + b y, x)`     |
//! | `solenoid`        | 3   | `(dθ, λ_s T + c(cos 2πθ, sin 2πθ))`                         |
//! | `henon`           | 2   | `(a − x² + b y, x)`                                         |
//! | `northsouth_skew` | 3   | `(x + y, y, z + ε sin 2πz)` on the 3-torus                  |
//! | `diag_linear`     | 2   | `(λ₁ x, λ₂ y)` on the 2-torus                               |
//! | `lorenz`          | 3   | time-1 map of the Lorenz flow                               |
//! | `linear_flow`     | 2   | time-1 map of `ẋ = diag(λ₁, λ₂) x`                          |
//!
//! Angles live in `[0, 1)`; `a(θ) = a₀ + α sin 2πθ`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowint::{self, FlowSystem};
use crate::smallmat::Matrix;

/// Sampled points used to check the trapping property at construction.
const TRAPPING_CHECK_POINTS: usize = 1000;

/// Step function and Jacobian of a map.
pub trait Dynamics: Send + Sync {
    fn step(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn jacobian(&self, x: &[f64]) -> Result<Matrix>;

    fn step_with_jacobian(&self, x: &[f64], out: &mut [f64]) -> Result<Matrix> {
        let j = self.jacobian(x)?;
        self.step(x, out)?;
        Ok(j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub periodic: bool,
}

impl Axis {
    pub fn new(lo: f64, hi: f64) -> Self {
        Axis {
            lo,
            hi,
            periodic: false,
        }
    }

    pub fn angle() -> Self {
        Axis {
            lo: 0.0,
            hi: 1.0,
            periodic: true,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Rectangular box, some axes possibly periodic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub axes: Vec<Axis>,
}

impl Region {
    pub fn new(axes: Vec<Axis>) -> Self {
        Region { axes }
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::domain("region bounds have different lengths"));
        }
        Ok(Region {
            axes: lo.iter().zip(hi).map(|(&l, &h)| Axis::new(l, h)).collect(),
        })
    }

    pub fn unit_cube(dim: usize) -> Self {
        Region {
            axes: vec![Axis::new(0.0, 1.0); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Errors unless every axis has finite, strictly positive width.
    pub fn check_nonempty(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::domain("region has no axes"));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if !(a.lo.is_finite() && a.hi.is_finite()) || !(a.hi > a.lo) {
                return Err(Error::domain(format!(
                    "region axis {i} is empty or unbounded: [{}, {}]",
                    a.lo, a.hi
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.axes.len()
            && self
                .axes
                .iter()
                .zip(x)
                .all(|(a, &v)| v.is_finite() && (a.periodic || (v >= a.lo && v <= a.hi)))
    }

    /// True if every non-periodic coordinate lies strictly inside.
    pub fn contains_interior(&self, x: &[f64]) -> bool {
        self.axes
            .iter()
            .zip(x)
            .all(|(a, &v)| v.is_finite() && (a.periodic || (v > a.lo && v < a.hi)))
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        self.dim() == other.dim()
            && self.axes.iter().zip(&other.axes).all(|(a, b)| {
                let tol = 1e-12 * a.width().abs().max(1.0);
                b.lo >= a.lo - tol && b.hi <= a.hi + tol
            })
    }

    /// Coordinate difference `x - y` on each axis, using the wrap-around
    /// metric on periodic axes.
    pub fn displacement(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.axes
            .iter()
            .zip(x.iter().zip(y))
            .map(|(a, (&u, &v))| {
                let d = u - v;
                if a.periodic {
                    let w = a.width();
                    d - w * (d / w).round()
                } else {
                    d
                }
            })
            .collect()
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        self.displacement(x, y).iter().map(|d| d * d).sum::<f64>().sqrt()
    }

    /// Normalizes periodic coordinates into their fundamental interval.
    pub fn wrap(&self, x: &mut [f64]) {
        for (a, v) in self.axes.iter().zip(x.iter_mut()) {
            if a.periodic {
                *v = a.lo + wrap_unit((*v - a.lo) / a.width()) * a.width();
            }
        }
    }
}

/// `x mod 1` in `[0, 1)`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// `θ ↦ dθ mod 1`, evaluated through the unit-circle embedding.
///
/// Multiplying binary floats by a power of two is exact, so `frac(2θ)`
/// collapses every orbit onto the fixed point 0 within about 53 steps.
/// Going through `e^{2πiθ}` keeps ordinary rounding in the loop.
pub fn expand_angle(theta: f64, d: u32) -> f64 {
    let (mut re, mut im) = ((TAU * theta).cos(), (TAU * theta).sin());
    let (mut acc_re, mut acc_im) = (1.0f64, 0.0f64);
    let mut e = d;
    while e > 0 {
        if e & 1 == 1 {
            let t = acc_re * re - acc_im * im;
            acc_im = acc_re * im + acc_im * re;
            acc_re = t;
        }
        let t = re * re - im * im;
        im = 2.0 * re * im;
        re = t;
        let n = (re * re + im * im).sqrt();
        re /= n;
        im /= n;
        e >>= 1;
    }
    wrap_unit(acc_im.atan2(acc_re) / TAU)
}

/// Declared bundle dimensions, optionally pinned to coordinate blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleBlocks {
    pub stable: usize,
    pub central: usize,
    pub unstable: usize,
    pub coords: Option<BlockCoords>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCoords {
    pub stable: Vec<usize>,
    pub central: Vec<usize>,
    pub unstable: Vec<usize>,
}

/// Marks a map as the time-τ map of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowProvenance {
    pub flow: String,
    pub dt: f64,
    pub time_per_step: f64,
}

#[derive(Clone)]
pub struct MapSystem {
    name: String,
    params: BTreeMap<String, f64>,
    dim: usize,
    dynamics: Arc<dyn Dynamics>,
    domain: Region,
    trapping: Option<Region>,
    sample_region: Region,
    bundle: Option<BundleBlocks>,
    central_log_det: Option<f64>,
    histogram_axes: Vec<usize>,
    default_x0: Vec<f64>,
    flow: Option<FlowProvenance>,
    warnings: Vec<String>,
}

impl fmt::Debug for MapSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MapSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("params", &self.params)
            .field("bundle", &self.bundle)
            .field("flow", &self.flow)
            .finish()
    }
}

impl MapSystem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        dynamics: Arc<dyn Dynamics>,
        domain: Region,
    ) -> Self {
        assert_eq!(domain.dim(), dim, "domain dimension mismatch");
        MapSystem {
            name: name.into(),
            params: BTreeMap::new(),
            dim,
            dynamics,
            sample_region: domain.clone(),
            domain,
            trapping: None,
            bundle: None,
            central_log_det: None,
            histogram_axes: (0..dim).collect(),
            default_x0: vec![0.0; dim],
            flow: None,
            warnings: Vec::new(),
        }
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    /// Declares a trapping region and checks it by sampling; a failed
    /// check is recorded as a warning rather than an error.
    pub fn with_trapping(mut self, region: Region) -> Self {
        if let Some(bad) = self.trapping_violation(&region) {
            self.warnings.push(format!(
                "trapping region not verified: sampled point {bad:?} leaves it"
            ));
        }
        self.sample_region = region.clone();
        self.trapping = Some(region);
        self
    }

    pub fn with_sample_region(mut self, region: Region) -> Self {
        self.sample_region = region;
        self
    }

    pub fn with_bundle(mut self, bundle: BundleBlocks) -> Self {
        assert_eq!(
            bundle.stable + bundle.central + bundle.unstable,
            self.dim,
            "bundle dimensions must add up to dim"
        );
        self.bundle = Some(bundle);
        self
    }

    pub fn with_central_log_det(mut self, v: f64) -> Self {
        self.central_log_det = Some(v);
        self
    }

    pub fn with_histogram_axes(mut self, axes: Vec<usize>) -> Self {
        self.histogram_axes = axes;
        self
    }

    pub fn with_default_x0(mut self, x0: Vec<f64>) -> Self {
        self.default_x0 = x0;
        self
    }

    pub fn with_flow(mut self, flow: FlowProvenance) -> Self {
        self.flow = Some(flow);
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

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    pub fn domain(&self) -> &Region {
        &self.domain
    }

    pub fn trapping(&self) -> Option<&Region> {
        self.trapping.as_ref()
    }

    /// Default region for Lebesgue sampling: the trapping region when one is
    /// declared, else the domain.
    pub fn sample_region(&self) -> &Region {
        &self.sample_region
    }

    pub fn bundle(&self) -> Option<&BundleBlocks> {
        self.bundle.as_ref()
    }

    /// `ln |det|` of the central block, when it is constant.
    pub fn central_log_det(&self) -> Option<f64> {
        self.central_log_det
    }

    pub fn histogram_axes(&self) -> &[usize] {
        &self.histogram_axes
    }

    pub fn default_x0(&self) -> &[f64] {
        &self.default_x0
    }

    pub fn flow(&self) -> Option<&FlowProvenance> {
        self.flow.as_ref()
    }

    /// Time units per iteration (1 for plain maps).
    pub fn time_per_step(&self) -> f64 {
        self.flow.as_ref().map_or(1.0, |f| f.time_per_step)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    /// One step, with periodic coordinates wrapped.
    pub fn step(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.dynamics.step(x, out)?;
        self.domain.wrap(out);
        Ok(())
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        self.dynamics.jacobian(x)
    }

    pub fn step_with_jacobian(&self, x: &[f64], out: &mut [f64]) -> Result<Matrix> {
        let j = self.dynamics.step_with_jacobian(x, out)?;
        self.domain.wrap(out);
        Ok(j)
    }

    fn trapping_violation(&self, region: &Region) -> Option<Vec<f64>> {
        let points = sample_points(region, TRAPPING_CHECK_POINTS, 0x7ea9).ok()?;
        let mut out = vec![0.0; self.dim];
        points.into_iter().find(|p| {
            self.step(p, &mut out).is_err() || !region.contains_interior(&out)
        })
    }
}

fn sample_points(region: &Region, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    region.check_nonempty()?;
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            region
                .axes
                .iter()
                .map(|a| {
                    let u: f64 = rng.random();
                    a.lo + u * a.width()
                })
                .collect()
        })
        .collect())
}

/// Uniform samples in `region`; sample `i` depends only on `(seed, i)`.
pub fn sample_initial_conditions(
    system: &MapSystem,
    region: &Region,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::validation("count", 0, ">= 1"));
    }
    region.check_nonempty()?;
    if region.dim() != system.dim() || !system.domain().contains_region(region) {
        return Err(Error::domain(format!(
            "sampling region is not inside the domain of {}",
            system.name()
        )));
    }
    sample_points(region, count, seed)
}

/// `a` such that `0 ↦ a ↦ a − a² ↦ p(a)` for `x ↦ a − x²`, where
/// `p(a) = (−1 + √(1 + 4a))/2` is the interior repelling fixed point.
pub const MISIUREWICZ_A: f64 = 1.543_689_012_692_076_4;

/// Solves for [`MISIUREWICZ_A`] by bisection on `[1.5, 1.6]`.
pub fn misiurewicz_parameter(tol: f64) -> f64 {
    let defect = |a: f64| {
        let c1 = a;
        let c2 = a - c1 * c1;
        let c3 = a - c2 * c2;
        c3 - (-1.0 + (1.0 + 4.0 * a).sqrt()) / 2.0
    };
    let (mut lo, mut hi) = (1.5, 1.6);
    let flo = defect(lo);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if (defect(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Builtin name plus parameter overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl SystemSpec {
    pub fn new(name: impl Into<String>) -> Self {
        SystemSpec {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Map,
    Flow,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub allowed: &'static str,
    check: fn(f64) -> bool,
}

pub const BUILTINS: &[(&str, SystemKind)] = &[
    ("viana", SystemKind::Map),
    ("solenoid", SystemKind::Map),
    ("henon", SystemKind::Map),
    ("northsouth_skew", SystemKind::Map),
    ("diag_linear", SystemKind::Map),
    ("lorenz", SystemKind::Flow),
    ("linear_flow", SystemKind::Flow),
];

fn is_integer_at_least_2(v: f64) -> bool {
    v >= 2.0 && v.fract() == 0.0 && v <= 1024.0
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn nonzero(v: f64) -> bool {
    v != 0.0 && v.is_finite()
}

/// Documented parameters for a builtin, or a catalog error.
pub fn param_specs(name: &str) -> Result<Vec<ParamSpec>> {
    let p = |name, default, allowed, check| ParamSpec {
        name,
        default,
        allowed,
        check,
    };
    Ok(match name {
        "viana" => vec![
            p("d", 16.0, "integer in 2..=1024", is_integer_at_least_2 as fn(f64) -> bool),
            p("a0", MISIUREWICZ_A, "(1, 2)", |v| v > 1.0 && v < 2.0),
            p("alpha", 0.01, "(0, 0.5)", |v| v > 0.0 && v < 0.5),
            p("b", 0.01, "(0, 0.5)", |v| v > 0.0 && v < 0.5),
            p("lambda_s", 0.25, "(0, 1)", |v| v > 0.0 && v < 1.0),
            p("c", 0.5, "(0, 1)", |v| v > 0.0 && v < 1.0),
            p("i0", 1.8, "(0, 2)", |v| v > 0.0 && v < 2.0),
        ],
        "solenoid" => vec![
            p("d", 2.0, "integer in 2..=1024", is_integer_at_least_2),
            p("lambda_s", 0.25, "(0, 1)", |v| v > 0.0 && v < 1.0),
            p("c", 0.5, "(0, 1)", |v| v > 0.0 && v < 1.0),
        ],
        "henon" => vec![
            p("a", 1.4, "finite", f64::is_finite),
            p("b", 0.3, "nonzero", nonzero),
        ],
        "northsouth_skew" => vec![p("eps", 0.1, "(0, 1/(2π))", |v| v > 0.0 && v * TAU < 1.0)],
        "diag_linear" => vec![p("l1", 2.0, "nonzero", nonzero), p("l2", 0.5, "nonzero", nonzero)],
        "lorenz" => vec![
            p("sigma", 10.0, "> 0", positive),
            p("rho", 28.0, "> 0", positive),
            p("beta", 8.0 / 3.0, "> 0", positive),
            p("dt", 0.005, "(0, 0.01]", |v| v > 0.0 && v <= 0.01),
        ],
        "linear_flow" => vec![
            p("l1", 1.0, "finite", f64::is_finite),
            p("l2", -1.0, "finite", f64::is_finite),
            p("dt", 0.005, "(0, 0.1]", |v| v > 0.0 && v <= 0.1),
        ],
        other => return Err(catalog_error(other)),
    })
}

pub fn catalog_error(name: &str) -> Error {
    Error::Catalog {
        name: name.to_string(),
        available: BUILTINS.iter().map(|(n, _)| n.to_string()).collect(),
    }
}

/// Merges overrides over the defaults and validates every range.
pub fn resolve_params(spec: &SystemSpec) -> Result<BTreeMap<String, f64>> {
    let specs = param_specs(&spec.name)?;
    for key in spec.params.keys() {
        if !specs.iter().any(|s| s.name == key) {
            let known: Vec<&str> = specs.iter().map(|s| s.name).collect();
            return Err(Error::validation(
                format!("system.params.{key}"),
                spec.params[key],
                format!("unknown parameter for {}; known: {}", spec.name, known.join(", ")),
            ));
        }
    }
    let mut out = BTreeMap::new();
    for s in specs {
        let v = spec.params.get(s.name).copied().unwrap_or(s.default);
        if !(s.check)(v) {
            return Err(Error::validation(format!("system.params.{}", s.name), v, s.allowed));
        }
        out.insert(s.name.to_string(), v);
    }
    Ok(out)
}

pub fn system_kind(name: &str) -> Result<SystemKind> {
    BUILTINS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, k)| *k)
        .ok_or_else(|| catalog_error(name))
}

/// Builds a builtin flow (only `lorenz` and `linear_flow`).
pub fn build_flow(spec: &SystemSpec) -> Result<FlowSystem> {
    let params = resolve_params(spec)?;
    match spec.name.as_str() {
        "lorenz" => Ok(flowint::lorenz(params["sigma"], params["rho"], params["beta"])
            .with_default_dt(params["dt"])),
        "linear_flow" => Ok(flowint::linear_flow(params["l1"], params["l2"]).with_default_dt(params["dt"])),
        other => match system_kind(other)? {
            SystemKind::Map => Err(Error::domain(format!("{other} is a map, not a flow"))),
            SystemKind::Flow => unreachable!("every builtin flow is handled above"),
        },
    }
}

/// Builds a builtin as a map; flows become their time-1 maps.
pub fn build_system(spec: &SystemSpec) -> Result<MapSystem> {
    let params = resolve_params(spec)?;
    let sys = match spec.name.as_str() {
        "viana" => viana(&params)?,
        "solenoid" => solenoid(&params)?,
        "henon" => henon(params["a"], params["b"]),
        "northsouth_skew" => northsouth_skew(params["eps"]),
        "diag_linear" => diag_linear(params["l1"], params["l2"]),
        "lorenz" | "linear_flow" => {
            let flow = build_flow(spec)?;
            let dt = flow.default_dt();
            flowint::time_one_map(&flow, dt)?
        }
        other => return Err(catalog_error(other)),
    };
    Ok(sys.with_params(params))
}

#[derive(Debug, Clone, Copy)]
struct SolenoidFactor {
    d: u32,
    lambda_s: f64,
    c: f64,
}

impl SolenoidFactor {
    fn step(&self, x: &[f64], out: &mut [f64]) {
        let th = x[0];
        out[0] = expand_angle(th, self.d);
        out[1] = self.lambda_s * x[1] + self.c * (TAU * th).cos();
        out[2] = self.lambda_s * x[2] + self.c * (TAU * th).sin();
    }

    fn fill_jacobian(&self, x: &[f64], j: &mut Matrix) {
        let th = x[0];
        j[(0, 0)] = self.d as f64;
        j[(1, 0)] = -TAU * self.c * (TAU * th).sin();
        j[(2, 0)] = TAU * self.c * (TAU * th).cos();
        j[(1, 1)] = self.lambda_s;
        j[(2, 2)] = self.lambda_s;
    }
}

struct Solenoid(SolenoidFactor);

impl Dynamics for Solenoid {
    fn step(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.0.step(x, out);
        Ok(())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let mut j = Matrix::zeros(3, 3);
        self.0.fill_jacobian(x, &mut j);
        Ok(j)
    }
}

fn solenoid_factor(params: &BTreeMap<String, f64>) -> Result<SolenoidFactor> {
    let f = SolenoidFactor {
        d: params["d"] as u32,
        lambda_s: params["lambda_s"],
        c: params["c"],
    };
    if f.lambda_s + f.c >= 1.0 {
        return Err(Error::validation(
            "system.params.c",
            f.c,
            format!("lambda_s + c < 1 (lambda_s = {})", f.lambda_s),
        ));
    }
    Ok(f)
}

fn solenoid(params: &BTreeMap<String, f64>) -> Result<MapSystem> {
    let f = solenoid_factor(params)?;
    let domain = Region::new(vec![Axis::angle(), Axis::new(-1.0, 1.0), Axis::new(-1.0, 1.0)]);
    Ok(MapSystem::new("solenoid", 3, Arc::new(Solenoid(f)), domain.clone())
        .with_trapping(domain)
        .with_bundle(BundleBlocks {
            stable: 2,
            central: 0,
            unstable: 1,
            coords: Some(BlockCoords {
                stable: vec![1, 2],
                central: vec![],
                unstable: vec![0],
            }),
        })
        .with_default_x0(vec![std::f64::consts::FRAC_1_PI, 0.1, -0.2]))
}

struct Viana {
    base: SolenoidFactor,
    a0: f64,
    alpha: f64,
    b: f64,
}

impl Viana {
    fn a(&self, th: f64) -> f64 {
        self.a0 + self.alpha * (TAU * th).sin()
    }
}

impl Dynamics for Viana {
    fn step(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.base.step(&x[..3], &mut out[..3]);
        let (u, v) = (x[3], x[4]);
        out[3] = self.a(x[0]) - u * u + self.b * v;
        out[4] = u;
        Ok(())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let mut j = Matrix::zeros(5, 5);
        self.base.fill_jacobian(&x[..3], &mut j);
        j[(3, 0)] = TAU * self.alpha * (TAU * x[0]).cos();
        j[(3, 3)] = -2.0 * x[3];
        j[(3, 4)] = self.b;
        j[(4, 3)] = 1.0;
        Ok(j)
    }
}

fn viana(params: &BTreeMap<String, f64>) -> Result<MapSystem> {
    let base = solenoid_factor(params)?;
    let i0 = params["i0"];
    let dynamics = Viana {
        base,
        a0: params["a0"],
        alpha: params["alpha"],
        b: params["b"],
    };
    let b = dynamics.b;
    let domain = Region::new(vec![
        Axis::angle(),
        Axis::new(-1.0, 1.0),
        Axis::new(-1.0, 1.0),
        Axis::new(-i0, i0),
        Axis::new(-i0, i0),
    ]);
    Ok(MapSystem::new("viana", 5, Arc::new(dynamics), domain.clone())
        .with_trapping(domain)
        .with_bundle(BundleBlocks {
            stable: 2,
            central: 2,
            unstable: 1,
            coords: Some(BlockCoords {
                stable: vec![1, 2],
                central: vec![3, 4],
                unstable: vec![0],
            }),
        })
        .with_central_log_det(b.ln())
        .with_histogram_axes(vec![0, 3, 4])
        .with_default_x0(vec![0.318_309_886_183_790_7, 0.1, -0.2, 0.3, 0.1]))
}

struct Henon {
    a: f64,
    b: f64,
}

impl Dynamics for Henon {
    fn step(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = self.a - x[0] * x[0] + self.b * x[1];
        out[1] = x[0];
        Ok(())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let mut j = Matrix::zeros(2, 2);
        j[(0, 0)] = -2.0 * x[0];
        j[(0, 1)] = self.b;
        j[(1, 0)] = 1.0;
        Ok(j)
    }
}

fn henon(a: f64, b: f64) -> MapSystem {
    let domain = Region::from_bounds(&[-3.0, -3.0], &[3.0, 3.0]).expect("static bounds");
    MapSystem::new("henon", 2, Arc::new(Henon { a, b }), domain)
        .with_sample_region(Region::from_bounds(&[-0.5, -0.5], &[0.5, 0.5]).expect("static bounds"))
        .with_bundle(BundleBlocks {
            stable: 0,
            central: 2,
            unstable: 0,
            coords: Some(BlockCoords {
                stable: vec![],
                central: vec![0, 1],
                unstable: vec![],
            }),
        })
        .with_central_log_det(b.abs().ln())
        .with_default_x0(vec![0.1, 0.1])
}

struct NorthSouthSkew {
    eps: f64,
}

impl Dynamics for NorthSouthSkew {
    fn step(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = x[0] + x[1];
        out[1] = x[1];
        out[2] = x[2] + self.eps * (TAU * x[2]).sin();
        Ok(())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let mut j = Matrix::identity(3);
        j[(0, 1)] = 1.0;
        j[(2, 2)] = 1.0 + TAU * self.eps * (TAU * x[2]).cos();
        Ok(j)
    }
}

fn northsouth_skew(eps: f64) -> MapSystem {
    let domain = Region::new(vec![Axis::angle(); 3]);
    MapSystem::new("northsouth_skew", 3, Arc::new(NorthSouthSkew { eps }), domain)
        .with_bundle(BundleBlocks {
            stable: 1,
            central: 2,
            unstable: 0,
            coords: Some(BlockCoords {
                stable: vec![2],
                central: vec![0, 1],
                unstable: vec![],
            }),
        })
        .with_default_x0(vec![0.1, 0.618_033_988_749_894_8, 0.3])
}

struct DiagLinear {
    l1: f64,
    l2: f64,
}

impl Dynamics for DiagLinear {
    fn step(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = self.l1 * x[0];
        out[1] = self.l2 * x[1];
        Ok(())
    }

    fn jacobian(&self, _x: &[f64]) -> Result<Matrix> {
        Ok(Matrix::from_diag(&[self.l1, self.l2]))
    }
}

fn diag_linear(l1: f64, l2: f64) -> MapSystem {
    // On the 2-torus so orbits stay bounded; the Jacobian is constant either way.
    let domain = Region::new(vec![Axis::angle(); 2]);
    MapSystem::new("diag_linear", 2, Arc::new(DiagLinear { l1, l2 }), domain)
        .with_default_x0(vec![0.3, 0.7])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of the step with wrap-aware displacement.
    pub(crate) fn fd_jacobian(sys: &MapSystem, x: &[f64], h: f64) -> Matrix {
        let n = sys.dim();
        let mut j = Matrix::zeros(n, n);
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        for c in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            sys.step(&xp, &mut plus).unwrap();
            sys.step(&xm, &mut minus).unwrap();
            let diff = sys.domain().displacement(&plus, &minus);
            for r in 0..n {
                j[(r, c)] = diff[r] / (2.0 * h);
            }
        }
        j
    }

    fn all_maps() -> Vec<MapSystem> {
        ["viana", "solenoid", "henon", "northsouth_skew", "diag_linear", "lorenz", "linear_flow"]
            .iter()
            .map(|n| build_system(&SystemSpec::new(*n)).unwrap())
            .collect()
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for sys in all_maps() {
            let region = if sys.name() == "lorenz" {
                Region::from_bounds(&[-15.0, -15.0, 5.0], &[15.0, 15.0, 40.0]).unwrap()
            } else if sys.name() == "linear_flow" {
                Region::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]).unwrap()
            } else {
                sys.sample_region().clone()
            };
            let pts = sample_initial_conditions(&sys, &region, 20, 42).unwrap();
            for p in pts {
                let j = sys.jacobian(&p).unwrap();
                let fd = fd_jacobian(&sys, &p, 1e-6);
                let scale = j.max_abs().max(1.0);
                let err = j
                    .as_slice()
                    .iter()
                    .zip(fd.as_slice())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(err / scale < 1e-5, "{}: err {err} at {p:?}", sys.name());
            }
        }
    }

    #[test]
    fn henon_determinant_is_b() {
        let sys = build_system(&SystemSpec::new("henon").with("a", 1.4).with("b", 0.3)).unwrap();
        assert_eq!(sys.dim(), 2);
        for p in sample_initial_conditions(&sys, sys.domain(), 50, 1).unwrap() {
            let det = sys.jacobian(&p).unwrap().determinant();
            assert!((det.abs() - 0.3).abs() / 0.3 < 1e-12);
        }
    }

    #[test]
    fn viana_central_determinant_and_full_determinant() {
        let sys = build_system(&SystemSpec::new("viana")).unwrap();
        assert_eq!(sys.dim(), 5);
        let b = sys.param("b").unwrap();
        for p in sample_initial_conditions(&sys, sys.domain(), 50, 2).unwrap() {
            let j = sys.jacobian(&p).unwrap();
            let central = Matrix::from_fn(2, 2, |r, c| j[(3 + r, 3 + c)]);
            assert!((central.determinant().abs() - b).abs() / b < 1e-12);
            let base = Matrix::from_fn(3, 3, |r, c| j[(r, c)]);
            let full = j.determinant().abs();
            let want = b * base.determinant().abs();
            assert!((full - want).abs() / want < 1e-12);
        }
    }

    #[test]
    fn viana_default_box_traps() {
        let sys = build_system(&SystemSpec::new("viana").with("d", 16.0)).unwrap();
        assert!(sys.warnings().is_empty(), "{:?}", sys.warnings());
        // The wider box [-1.9, 1.9] is not trapping: x = 1.9 maps below -2.
        let wide = build_system(&SystemSpec::new("viana").with("i0", 1.9)).unwrap();
        assert!(!wide.warnings().is_empty());
    }

    #[test]
    fn northsouth_jacobian_rows() {
        let eps = 0.1;
        let sys = build_system(&SystemSpec::new("northsouth_skew").with("eps", eps)).unwrap();
        let z: f64 = 0.2;
        let j = sys.jacobian(&[0.4, 0.3, z]).unwrap();
        let hp = 1.0 + TAU * eps * (TAU * z).cos();
        let want = Matrix::from_rows(&[&[1.0, 1.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, hp]]).unwrap();
        assert_eq!(j, want);
    }

    #[test]
    fn northsouth_fiber_converges_to_south_pole() {
        let sys = build_system(&SystemSpec::new("northsouth_skew")).unwrap();
        for z0 in [0.01, 0.3, 0.77, 0.99] {
            let mut x = vec![0.2, 0.37, z0];
            let mut y = vec![0.0; 3];
            for _ in 0..1000 {
                sys.step(&x, &mut y).unwrap();
                std::mem::swap(&mut x, &mut y);
            }
            assert!((x[2] - 0.5).abs() < 1e-6, "z0 = {z0}: {}", x[2]);
        }
    }

    #[test]
    fn solenoid_maps_solid_torus_inside() {
        let sys = build_system(&SystemSpec::new("solenoid")).unwrap();
        assert!(sys.warnings().is_empty());
        let pts = sample_initial_conditions(&sys, sys.domain(), 1000, 5).unwrap();
        let mut out = vec![0.0; 3];
        for p in pts {
            sys.step(&p, &mut out).unwrap();
            assert!(out[1].abs() < 1.0 && out[2].abs() < 1.0);
        }
    }

    #[test]
    fn solenoid_rejects_non_trapping_parameters() {
        let err = build_system(&SystemSpec::new("solenoid").with("c", 0.8)).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn misiurewicz_bisection_matches_frozen_constant() {
        let a = misiurewicz_parameter(1e-13);
        assert!((a - MISIUREWICZ_A).abs() < 1e-12);
        let f = |x: f64| MISIUREWICZ_A - x * x;
        let p = (-1.0 + (1.0 + 4.0 * MISIUREWICZ_A).sqrt()) / 2.0;
        assert!((f(f(f(0.0))) - p).abs() < 1e-10);
    }

    #[test]
    fn expand_angle_agrees_with_frac_and_avoids_collapse() {
        for &th in &[0.1234, 0.5, 0.999, 0.0001] {
            let want = wrap_unit(16.0 * th);
            let got = expand_angle(th, 16);
            let d = (got - want) - (got - want).round();
            assert!(d.abs() < 1e-12);
        }
        let mut th = 0.3;
        for _ in 0..1000 {
            th = expand_angle(th, 2);
        }
        assert!(th > 0.0 && th < 1.0);
        let mut naive = 0.3f64;
        for _ in 0..80 {
            naive = wrap_unit(2.0 * naive);
        }
        assert_eq!(naive, 0.0);
    }

    #[test]
    fn sampling_is_deterministic_and_uniform() {
        let sys = build_system(&SystemSpec::new("diag_linear")).unwrap();
        let unit = Region::unit_cube(2);
        let a = sample_initial_conditions(&sys, &unit, 4, 7).unwrap();
        let b = sample_initial_conditions(&sys, &unit, 4, 7).unwrap();
        assert_eq!(a, b);
        // Prefixes agree: sample i depends only on (seed, i).
        let c = sample_initial_conditions(&sys, &unit, 9, 7).unwrap();
        assert_eq!(&c[..4], &a[..]);
        let many = sample_initial_conditions(&sys, &unit, 10_000, 1).unwrap();
        for axis in 0..2 {
            let mean = many.iter().map(|p| p[axis]).sum::<f64>() / many.len() as f64;
            assert!((mean - 0.5).abs() < 0.02, "axis {axis} mean {mean}");
        }
    }

    #[test]
    fn sampling_rejects_degenerate_region() {
        let sys = build_system(&SystemSpec::new("diag_linear")).unwrap();
        let flat = Region::from_bounds(&[0.2, 0.0], &[0.2, 1.0]).unwrap();
        assert!(matches!(
            sample_initial_conditions(&sys, &flat, 3, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn catalog_and_validation_errors() {
        let err = build_system(&SystemSpec::new("wild_attractor")).unwrap_err();
        match err {
            Error::Catalog { available, .. } => assert!(available.contains(&"viana".to_string())),
            e => panic!("unexpected {e}"),
        }
        let err = build_system(&SystemSpec::new("viana").with("a0", 2.5)).unwrap_err();
        assert!(err.to_string().contains("a0"), "{err}");
        let err = build_system(&SystemSpec::new("viana").with("d", 2.5)).unwrap_err();
        assert!(err.to_string().contains("integer"), "{err}");
        let err = build_system(&SystemSpec::new("henon").with("q", 1.0)).unwrap_err();
        assert!(err.to_string().contains("unknown parameter"), "{err}");
    }

    #[test]
    fn bundle_dimensions_add_up() {
        for sys in all_maps() {
            if let Some(b) = sys.bundle() {
                assert_eq!(b.stable + b.central + b.unstable, sys.dim(), "{}", sys.name());
            }
        }
    }
}
