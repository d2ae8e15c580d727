//! Configuration, pipeline dispatch and report files for the `physmeas` binary.
//!
//! A run is described by a TOML document:
//!
//! ```toml
//! command = "certify"          # spectrum | regularity | basin | certify | sweep
//! seed = 0
//!
//! [system]
//! name = "viana"
//! params = { alpha = 0.01, b = 0.01 }
//!
//! [spectrum]                   # spectrum, regularity
//! n = 100000
//!
//! [survey]                     # basin, certify
//! samples = 32
//! horizon = 100000
//!
//! [certificate]
//! mode = "TheoremA"
//!
//! [sweep]                      # sweep only
//! command = "certify"
//! params = { alpha = [0.005, 0.01], b = [0.005, 0.01] }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::Parser;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cocycle::{lyapunov_spectrum, SpectrumConfig, SpectrumEstimate, DEFAULT_BURN_IN, DEFAULT_RENORM_INTERVAL};
use crate::error::{Error, Result};
use crate::flowint::find_equilibria;
use crate::measures::{
    physical_certificate, survey, Certificate, CertificateConfig, CertificateMode, SurveyConfig, Verdict,
    DEFAULT_CELLS_PER_AXIS, DEFAULT_CLUSTER_RADIUS, DEFAULT_DISSIPATIVITY_TOL, DEFAULT_DOMINANT_THRESHOLD,
    DEFAULT_MEMBER_FRACTION,
};
use crate::regularity::{
    analyze_orbit, attribute_blocks, classify_spectrum, mixed_central_check, SpectrumClass, SpectrumMode, Tolerances,
};
use crate::systems::{build_flow, build_system, resolve_params, system_kind, Axis, MapSystem, Region, SystemKind, SystemSpec};

pub const SCHEMA_VERSION: &str = "1.0";
const DEFAULT_N: u64 = 100_000;
const EQUILIBRIUM_SEEDS: usize = 64;

type Files = Vec<(PathBuf, Vec<u8>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Spectrum,
    Regularity,
    Basin,
    Certify,
    Sweep,
}

impl Command {
    fn parse(field: &str, s: &str) -> Result<Self> {
        Ok(match s {
            "spectrum" => Command::Spectrum,
            "regularity" => Command::Regularity,
            "basin" => Command::Basin,
            "certify" => Command::Certify,
            "sweep" => Command::Sweep,
            other => {
                return Err(Error::validation(field, other, "spectrum | regularity | basin | certify | sweep"))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSettings {
    pub n: u64,
    pub renorm_interval: u64,
    pub burn_in: u64,
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub command: Command,
    pub params: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub system: SystemSpec,
    pub seed: u64,
    pub spectrum: SpectrumSettings,
    pub survey: SurveyConfig,
    pub certificate: CertificateConfig,
    pub sweep: Option<SweepSettings>,
    pub write_json: bool,
    pub write_csv: bool,
}

impl RunConfig {
    /// Overrides the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.survey.seed = seed;
        self
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.certificate.tolerances
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpectrum {
    n: Option<i64>,
    renorm_interval: Option<i64>,
    burn_in: Option<i64>,
    x0: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSurvey {
    samples: Option<i64>,
    horizon: Option<i64>,
    cluster_radius: Option<f64>,
    cells_per_axis: Option<i64>,
    /// `[[lo, hi], ...]`, one pair per coordinate.
    region: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    zero_tol: Option<f64>,
    c0: Option<f64>,
    birkhoff: Option<f64>,
    lyapunov: Option<f64>,
    pomega: Option<f64>,
    convergence: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCertificate {
    mode: Option<String>,
    dominant_threshold: Option<f64>,
    member_fraction: Option<f64>,
    dissipativity_tol: Option<f64>,
    sectional_p: Option<i64>,
    sectional_k: Option<i64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    command: Option<String>,
    params: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    formats: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    command: String,
    seed: Option<i64>,
    system: SystemSpec,
    #[serde(default)]
    spectrum: RawSpectrum,
    #[serde(default)]
    survey: RawSurvey,
    #[serde(default)]
    tolerances: RawTolerances,
    #[serde(default)]
    certificate: RawCertificate,
    sweep: Option<RawSweep>,
    #[serde(default)]
    output: RawOutput,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn int_at_least(field: &str, v: Option<i64>, default: u64, min: u64) -> Result<u64> {
    match v {
        None => Ok(default),
        Some(x) if x >= 0 && (x as u64) >= min => Ok(x as u64),
        Some(x) => Err(Error::validation(field, x, format!(">= {min}"))),
    }
}

fn positive(field: &str, v: Option<f64>, default: f64) -> Result<f64> {
    match v {
        None => Ok(default),
        Some(x) if x > 0.0 && x.is_finite() => Ok(x),
        Some(x) => Err(Error::validation(field, x, "finite and > 0")),
    }
}

fn parse_mode(s: &str) -> Result<CertificateMode> {
    Ok(match s {
        "TheoremA" => CertificateMode::TheoremA,
        "TheoremB" => CertificateMode::TheoremB,
        "TheoremC" => CertificateMode::TheoremC,
        "CorollaryD" => CertificateMode::CorollaryD,
        other => {
            return Err(Error::validation(
                "certificate.mode",
                other,
                "TheoremA | TheoremB | TheoremC | CorollaryD",
            ))
        }
    })
}

/// Parses and validates a TOML run description. Every range check happens
/// here, before any computation.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Parse {
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.inner();
        let location = inner
            .span()
            .map(|s| line_col(text, s.start))
            .map_or(String::new(), |(l, c)| format!(" (line {l}, column {c})"));
        Error::Config {
            path,
            message: format!("{}{location}", inner.message().trim()),
        }
    })?;

    let command = Command::parse("command", &raw.command)?;
    system_kind(&raw.system.name)?;
    resolve_params(&raw.system)?;
    let seed = int_at_least("seed", raw.seed, 0, 0)?;

    let spectrum = SpectrumSettings {
        n: int_at_least("spectrum.n", raw.spectrum.n, DEFAULT_N, crate::cocycle::MIN_ITERATIONS)?,
        renorm_interval: int_at_least(
            "spectrum.renorm_interval",
            raw.spectrum.renorm_interval,
            DEFAULT_RENORM_INTERVAL,
            1,
        )?,
        burn_in: int_at_least("spectrum.burn_in", raw.spectrum.burn_in, DEFAULT_BURN_IN, 0)?,
        x0: raw.spectrum.x0,
    };

    let tol_default = Tolerances::default();
    let t = &raw.tolerances;
    let tolerances = Tolerances {
        zero_tol: positive("tolerances.zero_tol", t.zero_tol, tol_default.zero_tol)?,
        c0: positive("tolerances.c0", t.c0, tol_default.c0)?,
        birkhoff: positive("tolerances.birkhoff", t.birkhoff, tol_default.birkhoff)?,
        lyapunov: positive("tolerances.lyapunov", t.lyapunov, tol_default.lyapunov)?,
        pomega: positive("tolerances.pomega", t.pomega, tol_default.pomega)?,
        convergence: positive("tolerances.convergence", t.convergence, tol_default.convergence)?,
    };
    tolerances.validate()?;

    let region = match &raw.survey.region {
        None => None,
        Some(bounds) => {
            let sys = build_system(&raw.system)?;
            let axes: Vec<Axis> = bounds
                .iter()
                .zip(&sys.domain().axes)
                .map(|(b, d)| Axis { lo: b[0], hi: b[1], periodic: d.periodic })
                .collect();
            if bounds.len() != sys.dim() {
                return Err(Error::validation(
                    "survey.region",
                    format!("{} axes", bounds.len()),
                    format!("{} [lo, hi] pairs", sys.dim()),
                ));
            }
            Some(Region::new(axes))
        }
    };
    let survey = SurveyConfig {
        samples: int_at_least("survey.samples", raw.survey.samples, 64, crate::measures::MIN_SURVEY_SAMPLES as u64)?
            as usize,
        horizon: int_at_least("survey.horizon", raw.survey.horizon, DEFAULT_N, crate::measures::MIN_SURVEY_HORIZON)?,
        cluster_radius: positive("survey.cluster_radius", raw.survey.cluster_radius, DEFAULT_CLUSTER_RADIUS)?,
        seed,
        region,
        cells_per_axis: int_at_least("survey.cells_per_axis", raw.survey.cells_per_axis, DEFAULT_CELLS_PER_AXIS as u64, 1)?
            as usize,
        with_regularity: true,
        tolerances,
    };

    let c = &raw.certificate;
    let fraction = |field: &str, v: Option<f64>, default: f64| -> Result<f64> {
        match v {
            None => Ok(default),
            Some(x) if x > 0.0 && x <= 1.0 => Ok(x),
            Some(x) => Err(Error::validation(field, x, "(0, 1]")),
        }
    };
    let planes = |field: &str, v: Option<i64>| -> Result<Option<usize>> {
        match v {
            None => Ok(None),
            Some(x) if x >= 1 => Ok(Some(x as usize)),
            Some(x) => Err(Error::validation(field, x, ">= 1")),
        }
    };
    let certificate = CertificateConfig {
        mode: match &c.mode {
            Some(m) => parse_mode(m)?,
            None => CertificateMode::TheoremC,
        },
        tolerances,
        dominant_threshold: fraction("certificate.dominant_threshold", c.dominant_threshold, DEFAULT_DOMINANT_THRESHOLD)?,
        member_fraction: fraction("certificate.member_fraction", c.member_fraction, DEFAULT_MEMBER_FRACTION)?,
        dissipativity_tol: positive("certificate.dissipativity_tol", c.dissipativity_tol, DEFAULT_DISSIPATIVITY_TOL)?,
        sectional_p: planes("certificate.sectional_p", c.sectional_p)?,
        sectional_k: planes("certificate.sectional_k", c.sectional_k)?,
    };

    let sweep = match (command, raw.sweep) {
        (Command::Sweep, None) => {
            return Err(Error::Config {
                path: "sweep".into(),
                message: "the sweep command needs a [sweep] table".into(),
            })
        }
        (_, None) => None,
        (_, Some(s)) => {
            let inner = Command::parse("sweep.command", s.command.as_deref().unwrap_or("certify"))?;
            if inner == Command::Sweep {
                return Err(Error::validation("sweep.command", "sweep", "spectrum | regularity | basin | certify"));
            }
            if s.params.is_empty() {
                return Err(Error::validation("sweep.params", "{}", "at least one parameter axis"));
            }
            for (k, vals) in &s.params {
                if vals.is_empty() {
                    return Err(Error::validation(format!("sweep.params.{k}"), "[]", "a nonempty list"));
                }
                for v in vals {
                    resolve_params(&raw.system.clone().with(k, *v)).map_err(|e| match e {
                        Error::Validation { value, allowed, .. } => Error::Validation {
                            field: format!("sweep.params.{k}"),
                            value,
                            allowed,
                        },
                        e => e,
                    })?;
                }
            }
            Some(SweepSettings {
                command: inner,
                params: s.params,
            })
        }
    };

    let (write_json, write_csv) = match raw.output.formats {
        None => (true, true),
        Some(f) => {
            for x in &f {
                if x != "json" && x != "csv" {
                    return Err(Error::validation("output.formats", x, "json | csv"));
                }
            }
            (f.iter().any(|x| x == "json"), f.iter().any(|x| x == "csv"))
        }
    };

    let config = RunConfig {
        command,
        system: raw.system,
        seed,
        spectrum,
        survey,
        certificate,
        sweep,
        write_json,
        write_csv,
    };
    let spectrum_min = match config.command {
        Command::Regularity => crate::regularity::MIN_DEFECT_ITERATIONS,
        _ => crate::cocycle::MIN_ITERATIONS,
    };
    if config.spectrum.n < spectrum_min {
        return Err(Error::validation("spectrum.n", config.spectrum.n, format!(">= {spectrum_min}")));
    }
    Ok(config)
}

/// In-memory result of a run: named files plus the certification outcome.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub files: Files,
    /// `Some(true)` only when every certificate produced was Certified.
    pub certified: Option<bool>,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(p, _)| p == Path::new(name)).map(|(_, b)| b.as_slice())
    }

    pub fn report(&self) -> Result<Value> {
        let bytes = self
            .file("report.json")
            .ok_or_else(|| Error::domain("run produced no report.json"))?;
        Ok(serde_json::from_slice(bytes)?)
    }
}

fn system_json(system: &MapSystem) -> Value {
    json!({
        "name": system.name(),
        "dim": system.dim(),
        "params": system.params(),
        "time_units_per_iteration": system.time_per_step(),
        "warnings": system.warnings(),
    })
}

fn spectrum_mode(system: &MapSystem) -> SpectrumMode {
    if system.flow().is_some() {
        SpectrumMode::Flow
    } else {
        SpectrumMode::Map
    }
}

fn spectrum_csv(est: &SpectrumEstimate) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let u = est.rate_unit();
    let mut header = vec!["iteration".to_string(), "time".to_string()];
    header.extend((1..=est.dim()).map(|i| format!("exponent_{i}_{u}")));
    w.write_record(&header)?;
    for (c, e) in &est.history {
        let mut row = vec![c.to_string(), (*c as f64 * est.time_per_step).to_string()];
        row.extend(e.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn to_json_bytes(v: &Value) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn classification(system: &MapSystem, est: &SpectrumEstimate, tol: &Tolerances) -> Result<SpectrumClass> {
    classify_spectrum(&est.exponents, spectrum_mode(system), tol.c0, tol.zero_tol)
}

fn run_single(config: &RunConfig, command: Command) -> Result<(Value, Files, Option<Certificate>)> {
    let system = build_system(&config.system)?;
    let name = system.name().to_string();
    let tol = *config.tolerances();
    let mut files: Files = Vec::new();
    let mut report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": config.seed,
        "system": system_json(&system),
    });
    let mut certificate = None;
    match command {
        Command::Spectrum | Command::Regularity => {
            let x0 = config.spectrum.x0.clone().unwrap_or_else(|| system.default_x0().to_vec());
            let (est, reg) = if command == Command::Spectrum {
                let sc = SpectrumConfig {
                    n: config.spectrum.n,
                    renorm_interval: config.spectrum.renorm_interval,
                    burn_in: config.spectrum.burn_in,
                };
                let est = lyapunov_spectrum(&system, &x0, &sc).map_err(|e| e.context(&name, None, "spectrum"))?;
                (est, None)
            } else {
                let a = analyze_orbit(&system, &x0, config.spectrum.n, true, &tol, &mut [])
                    .map_err(|e| e.context(&name, None, "regularity"))?;
                (a.spectrum, a.regularity)
            };
            let class = classification(&system, &est, &tol)?;
            report["spectrum"] = serde_json::to_value(&est)?;
            report["classification"] = serde_json::to_value(&class)?;
            if let Some(r) = reg {
                report["regularity"] = serde_json::to_value(&r)?;
            }
            if let Some(bundle) = system.bundle() {
                let attr = attribute_blocks(&est, bundle)?;
                if !attr.central.is_empty() {
                    let mixed = mixed_central_check(&est.exponents, &attr.central, tol.c0)?
                        .with_log_det(system.central_log_det());
                    report["mixed_central"] = serde_json::to_value(&mixed)?;
                }
                report["block_attribution"] = serde_json::to_value(&attr)?;
            }
            if system_kind(system.name())? == SystemKind::Flow {
                let flow = build_flow(&config.system)?;
                let eqs = find_equilibria(&flow, flow.domain(), EQUILIBRIUM_SEEDS, config.seed)?;
                report["equilibria"] = serde_json::to_value(&eqs)?;
            }
            if config.write_csv {
                files.push(("spectrum.csv".into(), spectrum_csv(&est)?));
            }
        }
        Command::Basin | Command::Certify => {
            let sc = SurveyConfig {
                with_regularity: command == Command::Certify,
                ..config.survey.clone()
            };
            let sv = survey(&system, &sc)?;
            report["basin"] = serde_json::to_value(&sv.basin)?;
            if command == Command::Certify {
                report["regularity"] = serde_json::to_value(&sv.regularity)?;
                let cert = physical_certificate(&system, &sv.basin, &sv.regularity, &config.certificate)
                    .map_err(|e| e.context(&name, None, "certificate"))?;
                report["certificate"] = serde_json::to_value(&cert)?;
                certificate = Some(cert);
            }
            if config.write_csv {
                if let Some((_, dom)) = sv.basin.dominant() {
                    let mut buf = Vec::new();
                    dom.histogram.write_csv(&mut buf)?;
                    files.push(("histogram.csv".into(), buf));
                }
                let mut buf = Vec::new();
                sv.basin.write_clusters_csv(&mut buf)?;
                files.push(("clusters.csv".into(), buf));
            }
        }
        Command::Sweep => unreachable!("sweeps are dispatched by run_to_report"),
    }
    Ok((report, files, certificate))
}

fn sweep_points(params: &BTreeMap<String, Vec<f64>>) -> Vec<Vec<(String, f64)>> {
    let mut points: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    for (k, vals) in params {
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), *v));
                    q
                })
            })
            .collect();
    }
    points
}

/// Runs the configured pipeline on the current rayon pool and returns the
/// report files without touching the filesystem.
pub fn run_to_report(config: &RunConfig) -> Result<RunOutput> {
    if config.command != Command::Sweep {
        let (report, mut files, cert) = run_single(config, config.command)?;
        if config.write_json {
            files.insert(0, ("report.json".into(), to_json_bytes(&report)?));
        }
        return Ok(RunOutput {
            files,
            certified: cert.map(|c| c.verdict == Verdict::Certified),
        });
    }
    let sweep = config.sweep.as_ref().expect("validated");
    let points = sweep_points(&sweep.params);
    let results: Vec<Result<(Value, Option<Certificate>)>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut spec = config.system.clone();
            for (k, v) in p {
                spec = spec.with(k, *v);
            }
            let point = RunConfig {
                system: spec,
                ..config.clone()
            }
            .with_seed(config.seed ^ i as u64);
            let (report, _, cert) = run_single(&point, sweep.command).map_err(|e| e.context(&config.system.name, Some(i), "sweep point"))?;
            Ok((report, cert))
        })
        .collect();
    let mut files = Vec::new();
    let mut summary = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let keys: Vec<&String> = sweep.params.keys().collect();
    let mut header = vec!["point".to_string()];
    header.extend(keys.iter().map(|k| k.to_string()));
    header.extend(["seed", "report", "verdict", "dominant_fraction", "top_exponent"].map(String::from));
    summary.write_record(&header)?;
    let mut index = Vec::new();
    let mut all_certified = true;
    for (i, (p, r)) in points.iter().zip(results).enumerate() {
        let (report, cert) = r?;
        let file = format!("report_{i:03}.json");
        let verdict = cert.as_ref().map(|c| format!("{:?}", c.verdict));
        all_certified &= cert.as_ref().is_some_and(|c| c.verdict == Verdict::Certified);
        let dominant = report["basin"]["clusters"]
            .as_array()
            .and_then(|cs| cs.iter().filter_map(|c| c["fraction"].as_f64()).reduce(f64::max));
        let top = report["spectrum"]
            .as_object()
            .and_then(|s| s.iter().find(|(k, _)| k.starts_with("exponents_")))
            .and_then(|(_, v)| v[0].as_f64());
        let mut row = vec![i.to_string()];
        row.extend(p.iter().map(|(_, v)| v.to_string()));
        row.push((config.seed ^ i as u64).to_string());
        row.push(file.clone());
        row.push(verdict.clone().unwrap_or_default());
        row.push(dominant.map(|v| v.to_string()).unwrap_or_default());
        row.push(top.map(|v| v.to_string()).unwrap_or_default());
        summary.write_record(&row)?;
        index.push(json!({
            "point": i,
            "params": p.iter().cloned().collect::<BTreeMap<String, f64>>(),
            "seed": config.seed ^ i as u64,
            "report": file,
            "verdict": verdict,
        }));
        files.push((PathBuf::from(file), to_json_bytes(&report)?));
    }
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": Command::Sweep,
        "sweep_command": sweep.command,
        "seed": config.seed,
        "system": config.system.name,
        "points": index,
    });
    if config.write_json {
        files.insert(0, ("report.json".into(), to_json_bytes(&report)?));
    }
    files.push((
        "sweep_summary.csv".into(),
        summary.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    ));
    let certified = (sweep.command == Command::Certify).then_some(all_certified);
    Ok(RunOutput { files, certified })
}

/// Runs on a dedicated pool of `threads` workers.
pub fn run_with_threads(config: &RunConfig, threads: usize) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::domain(format!("cannot build a pool of {threads} threads: {e}")))?;
    pool.install(|| run_to_report(config))
}

pub fn write_outputs(dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in &output.files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "physmeas", version, about = "Lyapunov spectra, regularity diagnostics and physical-measure certificates")]
pub struct Args {
    /// TOML run description; read from stdin when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "physmeas-out")]
    pub out: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exit with status 2 unless every certificate is Certified.
    #[arg(long)]
    pub expect_certified: bool,
}

fn execute(args: &Args) -> Result<i32> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path)?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let mut config = parse_config(&text)?;
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    let threads = match args.threads {
        Some(0) => return Err(Error::validation("--threads", 0, ">= 1")),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let started = std::time::SystemTime::now();
    let clock = std::time::Instant::now();
    let output = run_with_threads(&config, threads)?;
    write_outputs(&args.out, &output)?;
    let meta = json!({
        "started_unix_seconds": started
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64()),
        "wall_seconds": clock.elapsed().as_secs_f64(),
        "threads": threads,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(args.out.join("run_metadata.json"), to_json_bytes(&meta)?)?;
    if args.expect_certified && output.certified != Some(true) {
        return Ok(2);
    }
    Ok(0)
}

/// Entry point used by the binary: returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HENON: &str = "command = \"spectrum\"\n[system]\nname = \"henon\"\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(HENON).unwrap();
        assert_eq!(c.command, Command::Spectrum);
        assert_eq!(c.seed, 0);
        assert_eq!(c.spectrum.n, DEFAULT_N);
        assert_eq!(c.spectrum.renorm_interval, 1);
        assert_eq!(c.survey.samples, 64);
        assert_eq!(c.certificate.tolerances, Tolerances::default());
        assert!(c.write_json && c.write_csv);
    }

    #[test]
    fn negative_samples_name_the_field() {
        let text = format!("{HENON}[survey]\nsamples = -1\n");
        match parse_config(&text).unwrap_err() {
            Error::Validation { field, .. } => assert_eq!(field, "survey.samples"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_system_lists_builtins() {
        let err = parse_config("command = \"spectrum\"\n[system]\nname = \"wild_attractor\"\n").unwrap_err();
        match &err {
            Error::Catalog { name, available } => {
                assert_eq!(name, "wild_attractor");
                assert!(available.iter().any(|a| a == "viana"));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(err.to_string().contains("henon"));
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = parse_config(&format!("{HENON}[spectrum]\nn = 1000\nwidth = 3\n")).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "spectrum.width");
                assert!(message.contains("width"), "{message}");
                assert!(message.contains("line 6"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn syntax_error_has_line_and_column() {
        match parse_config("command = \"spectrum\"\n[system\nname = 1\n").unwrap_err() {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column >= 1);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn other_validation_errors() {
        assert!(parse_config("command = \"fly\"\n[system]\nname = \"henon\"\n").is_err());
        assert!(parse_config(&format!("{HENON}[spectrum]\nn = 10\n")).is_err());
        assert!(parse_config(&format!("{HENON}[certificate]\nmode = \"TheoremZ\"\n")).is_err());
        assert!(parse_config(&format!("{HENON}[tolerances]\nc0 = 0.001\n")).is_err());
        assert!(parse_config("command = \"sweep\"\n[system]\nname = \"henon\"\n").is_err());
        assert!(parse_config(
            "command = \"sweep\"\n[system]\nname = \"viana\"\n[sweep]\nparams = { alpha = [0.9] }\n"
        )
        .is_err());
        assert!(parse_config("command = \"spectrum\"\n[system]\nname = \"henon\"\nparams = { q = 1.0 }\n").is_err());
        assert!(parse_config(&format!("{HENON}[output]\nformats = [\"xml\"]\n")).is_err());
    }

    #[test]
    fn diag_linear_spectrum_report() {
        let c = parse_config("command = \"spectrum\"\n[system]\nname = \"diag_linear\"\n[spectrum]\nn = 1000\n").unwrap();
        let out = run_to_report(&c).unwrap();
        let r = out.report().unwrap();
        assert_eq!(r["schema_version"], SCHEMA_VERSION);
        let e = r["spectrum"]["exponents_per_iteration"].as_array().unwrap();
        assert!((e[0].as_f64().unwrap() - 2f64.ln()).abs() < 1e-10);
        assert!((e[1].as_f64().unwrap() + 2f64.ln()).abs() < 1e-10);
        let csv = std::str::from_utf8(out.file("spectrum.csv").unwrap()).unwrap();
        assert!(csv.starts_with("iteration,time,exponent_1_per_iteration,exponent_2_per_iteration\n"));
        assert!(!csv.contains('\r'));
        assert_eq!(out.certified, None);
    }

    #[test]
    fn flow_reports_use_time_units() {
        let c = parse_config(
            "command = \"spectrum\"\n[system]\nname = \"linear_flow\"\nparams = { l1 = 0.05 }\n[spectrum]\nn = 100\nburn_in = 0\nx0 = [0.001, 0.2]\n",
        )
        .unwrap();
        let r = run_to_report(&c).unwrap().report().unwrap();
        let e = r["spectrum"]["exponents_per_unit_time"].as_array().unwrap();
        assert!((e[0].as_f64().unwrap() - 0.05).abs() < 1e-6);
        assert_eq!(r["equilibria"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn sweep_grid_is_cartesian() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), vec![1.0, 2.0]);
        params.insert("b".to_string(), vec![3.0, 4.0, 5.0]);
        let pts = sweep_points(&params);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![("a".to_string(), 1.0), ("b".to_string(), 3.0)]);
        assert_eq!(pts[5], vec![("a".to_string(), 2.0), ("b".to_string(), 5.0)]);
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
