//! Command-line front end: wires a single TOML experiment config to
//! synthesis, training, validation, radius estimation, heat grids, and the
//! benchmark-table reproduction run.
//!
//! Exit codes: 0 success/feasible, 2 infeasible, 3 config error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{
    make_pendulum, make_pendulum_poly, make_poly_system, sample_disturbances, DisturbanceSpec,
    UncertainSystem,
};
use crate::candidate::{LyapunovCandidate, PolyCandidate};
use crate::nnlf::{
    load_checkpoint, save_checkpoint, train, Embedding, LossKind, MlpArch, NnError,
    TrainingConfig, WrapperMode,
};
use crate::poly::Polynomial;
use crate::sdp::{SolveStatus, SolverConfig};
use crate::synth::{
    serialize_result, synth_baseline, synth_cc, synth_drcc, Formulation, SosSynthesisSpec,
    SynthOutcome,
};
use crate::uncertainty::{wasserstein_radius, AmbiguityConfig, RadiusParams, SampleSet};
use crate::validate::{
    emit_heatgrid, monte_carlo, report_csv, report_summary_json, ValidationConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

// ---------------------------------------------------------------------------
// Config file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Builtin name: poly-case1, poly-case2, pendulum, pendulum-poly.
    pub name: String,
    /// Taylor degree of sin for pendulum-poly (odd, default 3).
    pub sin_degree: Option<u32>,
}

fn default_degree() -> u32 {
    4
}
fn default_epsilon() -> f64 {
    1e-3
}
fn default_epsilon_sign() -> String {
    "derivation".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormulationConfig {
    /// baseline | cc | drcc
    pub kind: String,
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub radius: f64,
    #[serde(default = "default_epsilon_sign")]
    pub epsilon_sign: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesConfig {
    /// Offline disturbance distribution; mutually exclusive with `values`.
    pub distribution: Option<DisturbanceSpec>,
    pub values: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layer_sizes: Vec<usize>,
    /// squared | abs
    pub wrapper: String,
    pub alpha_hat: f64,
    /// identity | pendulum-trig
    #[serde(default = "default_embedding")]
    pub embedding: String,
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// lf | cc | drcc
    pub loss: String,
}

fn default_embedding() -> String {
    "identity".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidateConfig {
    pub online: DisturbanceSpec,
    pub realizations: usize,
    pub points: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub exclusion_radius: f64,
    /// Candidate file: SOS certificate or NN checkpoint (kind inferred from
    /// the file header).
    pub candidate: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusConfig {
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatgridConfig {
    pub xi: Vec<f64>,
    pub resolution: usize,
    pub candidate: Option<PathBuf>,
}

fn default_case() -> u32 {
    2
}
fn default_realizations() -> usize {
    500
}
fn default_points() -> usize {
    2500
}
fn default_epochs() -> usize {
    3000
}
fn default_batch() -> usize {
    256
}
fn default_gamma() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Config {
    #[serde(default = "default_case")]
    pub case: u32,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            case: default_case(),
            realizations: default_realizations(),
            points: default_points(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            gamma: default_gamma(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: Option<SystemConfig>,
    pub formulation: Option<FormulationConfig>,
    pub samples: Option<SamplesConfig>,
    pub train: Option<TrainConfig>,
    pub validate: Option<ValidateConfig>,
    pub radius: Option<RadiusConfig>,
    pub heatgrid: Option<HeatgridConfig>,
    pub table1: Option<Table1Config>,
    pub output: Option<OutputConfig>,
}

// ---------------------------------------------------------------------------
// Errors → exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Infeasible(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Infeasible(m) | CliError::Numerical(m) => m,
        }
    }
}

fn cfg_err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Config(format!("{context}: {e}"))
}

// ---------------------------------------------------------------------------
// Config loading and resolution
// ---------------------------------------------------------------------------

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    validate_config(&cfg)?;
    Ok(cfg)
}

/// Structural checks done at load time, before any work.
fn validate_config(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if let Some(f) = &cfg.formulation {
        match f.kind.as_str() {
            "baseline" => {}
            "cc" | "drcc" => {
                let samples = cfg.samples.as_ref().ok_or_else(|| {
                    CliError::Config(format!("formulation {} requires [samples]", f.kind))
                })?;
                let n = sample_count(samples)?;
                if f.beta <= 0.0 || f.beta > 1.0 {
                    return Err(CliError::Config("beta must be in (0, 1]".into()));
                }
                if f.beta > 1.0 / n as f64 {
                    return Err(CliError::Config(format!(
                        "beta exceeds 1/N: beta = {}, N = {n}",
                        f.beta
                    )));
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown formulation kind {other:?} (expected baseline, cc, or drcc)"
                )))
            }
        }
        if f.degree == 0 || f.degree % 2 != 0 {
            return Err(CliError::Config("formulation degree must be even and positive".into()));
        }
    }
    if let Some(s) = &cfg.samples {
        if s.distribution.is_some() == s.values.is_some() {
            return Err(CliError::Config(
                "[samples] needs exactly one of `distribution` or `values`".into(),
            ));
        }
        sample_count(s)?;
    }
    if let Some(v) = &cfg.validate {
        if v.realizations == 0 || v.points == 0 {
            return Err(CliError::Config("validate.realizations and .points must be >= 1".into()));
        }
    }
    Ok(())
}

fn sample_count(s: &SamplesConfig) -> Result<usize, CliError> {
    let n = match &s.values {
        Some(v) => v.len(),
        None => s.count,
    };
    if n == 0 {
        return Err(CliError::Config("samples count must be >= 1".into()));
    }
    Ok(n)
}

/// Apply --seed to every seeded section so one flag reproduces the whole run.
fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, out: Option<&Path>) {
    if let Some(seed) = seed {
        if let Some(s) = cfg.samples.as_mut() {
            s.seed = seed;
        }
        if let Some(t) = cfg.train.as_mut() {
            t.seed = seed;
        }
        if let Some(v) = cfg.validate.as_mut() {
            v.seed = seed;
        }
        if let Some(t) = cfg.table1.as_mut() {
            t.seed = seed;
        }
    }
    if let Some(out) = out {
        cfg.output = Some(OutputConfig { dir: out.to_path_buf() });
    }
}

fn load_system(cfg: &ExperimentConfig) -> Result<UncertainSystem, CliError> {
    let sys = cfg
        .system
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [system] section".into()))?;
    match sys.name.as_str() {
        "poly-case1" => make_poly_system(1).map_err(cfg_err("system")),
        "poly-case2" => make_poly_system(2).map_err(cfg_err("system")),
        "pendulum" => Ok(make_pendulum()),
        "pendulum-poly" => {
            let deg = sys.sin_degree.unwrap_or(3);
            if deg % 2 == 0 {
                return Err(CliError::Config("sin_degree must be odd".into()));
            }
            Ok(make_pendulum_poly(deg))
        }
        other => Err(CliError::Config(format!(
            "unknown system {other:?} (expected poly-case1, poly-case2, pendulum, pendulum-poly)"
        ))),
    }
}

fn load_samples(cfg: &ExperimentConfig) -> Result<SampleSet, CliError> {
    let s = cfg
        .samples
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [samples] section".into()))?;
    match (&s.values, &s.distribution) {
        (Some(values), None) => SampleSet::new(values.clone()).map_err(cfg_err("samples")),
        (None, Some(dist)) => {
            sample_disturbances(dist, s.count, s.seed).map_err(cfg_err("samples"))
        }
        _ => Err(CliError::Config(
            "[samples] needs exactly one of `distribution` or `values`".into(),
        )),
    }
}

fn build_spec(cfg: &ExperimentConfig) -> Result<(Formulation, SosSynthesisSpec), CliError> {
    let f = cfg
        .formulation
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [formulation] section".into()))?;
    let formulation = match f.kind.as_str() {
        "baseline" => Formulation::Baseline,
        "cc" => Formulation::Cc,
        "drcc" => Formulation::Drcc,
        other => return Err(CliError::Config(format!("unknown formulation kind {other:?}"))),
    };
    let ambiguity = AmbiguityConfig::new(f.radius.max(0.0), f.beta.clamp(0.0, 1.0));
    let mut spec = SosSynthesisSpec::new(formulation, ambiguity);
    spec.degree = f.degree;
    spec.epsilon = f.epsilon;
    spec.epsilon_sign_mode = match f.epsilon_sign.as_str() {
        "derivation" => crate::synth::EpsilonSignMode::Derivation,
        "paper-literal" => crate::synth::EpsilonSignMode::PaperLiteral,
        other => {
            return Err(CliError::Config(format!(
                "unknown epsilon_sign {other:?} (expected derivation or paper-literal)"
            )))
        }
    };
    Ok((formulation, spec))
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.as_ref().map_or_else(|| PathBuf::from("out"), |o| o.dir.clone())
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn unix_timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Summary record: resolved config echo + results; the timestamp lives only
/// inside the `metadata` object.
fn summary_json(cfg: &ExperimentConfig, results: serde_json::Value) -> String {
    let record = serde_json::json!({
        "config": cfg,
        "results": results,
        "metadata": { "timestamp_unix": unix_timestamp() },
    });
    serde_json::to_string_pretty(&record).expect("summary serialization")
}

// ---------------------------------------------------------------------------
// Candidate files
// ---------------------------------------------------------------------------

/// Load a candidate from a certificate (`poly …` header) or an NN checkpoint
/// (`mlp-lyapunov v1` header); the kind is inferred from the first line.
pub fn load_candidate(path: &Path) -> Result<Box<dyn LyapunovCandidate>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if text.starts_with("mlp-lyapunov") {
        let model = load_checkpoint(&text).map_err(cfg_err("checkpoint"))?;
        Ok(Box::new(model))
    } else if text.starts_with("poly ") {
        let poly = Polynomial::deserialize(&text).map_err(cfg_err("certificate"))?;
        let cand = PolyCandidate::new(poly).map_err(cfg_err("certificate"))?;
        Ok(Box::new(cand))
    } else {
        Err(CliError::Config(format!(
            "{}: unrecognized candidate file header",
            path.display()
        )))
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let system = load_system(cfg)?;
    if !system.is_polynomial() {
        return Err(CliError::Config(format!(
            "system {} is not polynomial; use pendulum-poly for the SOS path",
            system.name
        )));
    }
    let (formulation, spec) = build_spec(cfg)?;
    let solver = SolverConfig::default();
    let outcome = match formulation {
        Formulation::Baseline => synth_baseline(&system, &spec, &solver),
        Formulation::Cc => {
            let samples = load_samples(cfg)?;
            synth_cc(&system, &samples, &spec, &solver)
        }
        Formulation::Drcc => {
            let samples = load_samples(cfg)?;
            synth_drcc(&system, &samples, &spec, &solver)
        }
    }
    .map_err(|e| CliError::Config(format!("synthesis: {e}")))?;

    let dir = out_dir(cfg);
    match outcome {
        SynthOutcome::Feasible(result) => {
            if !result.verifications.iter().all(|v| v.ok) {
                return Err(CliError::Numerical(
                    "certificate extracted but failed verification".into(),
                ));
            }
            let cert_path = write_file(&dir, "certificate.txt", &serialize_result(&result))?;
            let results = serde_json::json!({
                "status": "feasible",
                "margin": result.margin,
                "v": result.v.to_string(),
                "certificate_file": cert_path,
                "diagnostics": {
                    "status": format!("{:?}", result.diagnostics.status),
                    "iterations": result.diagnostics.iterations,
                    "primal_residual": result.diagnostics.primal_residual,
                    "dual_residual": result.diagnostics.dual_residual,
                    "duality_gap": result.diagnostics.duality_gap,
                },
            });
            write_file(&dir, "synth_summary.json", &summary_json(cfg, results))?;
            println!("feasible: margin {:.3e}, certificate at {}", result.margin,
                cert_path.display());
            Ok(())
        }
        SynthOutcome::Infeasible { margin, status, .. } => {
            let results = serde_json::json!({
                "status": "infeasible",
                "margin": margin,
                "solver_status": format!("{status:?}"),
            });
            write_file(&dir, "synth_summary.json", &summary_json(cfg, results))?;
            if matches!(status, SolveStatus::NumericalFailure) {
                Err(CliError::Numerical("solver reported numerical failure".into()))
            } else {
                Err(CliError::Infeasible(format!("no certificate found (margin {margin:.3e})")))
            }
        }
    }
}

fn parse_train_section(
    t: &TrainConfig,
    system: &UncertainSystem,
) -> Result<(MlpArch, TrainingConfig), CliError> {
    let wrapper = match t.wrapper.as_str() {
        "squared" => WrapperMode::Squared,
        "abs" => WrapperMode::Abs,
        other => return Err(CliError::Config(format!("unknown wrapper {other:?}"))),
    };
    let embedding = match t.embedding.as_str() {
        "identity" => Embedding::Identity,
        "pendulum-trig" => Embedding::PendulumTrig,
        other => return Err(CliError::Config(format!("unknown embedding {other:?}"))),
    };
    let loss = match t.loss.as_str() {
        "lf" => LossKind::Lf,
        "cc" => LossKind::Cc,
        "drcc" => LossKind::Drcc,
        other => return Err(CliError::Config(format!("unknown loss {other:?}"))),
    };
    let arch = MlpArch {
        layer_sizes: t.layer_sizes.clone(),
        wrapper,
        alpha_hat: t.alpha_hat,
        embedding,
    };
    let config = TrainingConfig {
        batch_size: t.batch_size,
        region: system.region.clone(),
        gamma: t.gamma,
        learning_rate: t.learning_rate,
        epochs: t.epochs,
        seed: t.seed,
        loss,
        ambiguity: None,
    };
    Ok((arch, config))
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let system = load_system(cfg)?;
    let t = cfg
        .train
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [train] section".into()))?;
    let (arch, mut train_cfg) = parse_train_section(t, &system)?;
    let samples = match train_cfg.loss {
        LossKind::Lf => None,
        LossKind::Cc | LossKind::Drcc => Some(load_samples(cfg)?),
    };
    if matches!(train_cfg.loss, LossKind::Drcc) {
        let f = cfg
            .formulation
            .as_ref()
            .ok_or_else(|| CliError::Config("drcc loss requires [formulation]".into()))?;
        train_cfg.ambiguity = Some(AmbiguityConfig::new(f.radius, f.beta));
    }
    let outcome = train(&train_cfg, &system, &arch, samples.as_ref()).map_err(|e| match e {
        NnError::Diverged { .. } => CliError::Numerical(e.to_string()),
        other => CliError::Config(format!("training: {other}")),
    })?;

    let dir = out_dir(cfg);
    let ckpt_path = write_file(&dir, "checkpoint.txt", &save_checkpoint(&outcome.model))?;
    let mut trace = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{l:?}\n"));
    }
    write_file(&dir, "loss_trace.csv", &trace)?;
    let results = serde_json::json!({
        "status": "trained",
        "epochs": outcome.loss_trace.len(),
        "final_loss": outcome.loss_trace.last(),
        "checkpoint_file": ckpt_path,
    });
    write_file(&dir, "train_summary.json", &summary_json(cfg, results))?;
    println!(
        "trained {} epochs, final loss {:?}, checkpoint at {}",
        outcome.loss_trace.len(),
        outcome.loss_trace.last(),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let system = load_system(cfg)?;
    let v = cfg
        .validate
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [validate] section".into()))?;
    let path = v
        .candidate
        .as_ref()
        .ok_or_else(|| CliError::Config("validate.candidate file path is required".into()))?;
    let candidate = load_candidate(path)?;
    let vcfg = ValidationConfig {
        online: v.online.clone(),
        realizations: v.realizations,
        points_per_realization: v.points,
        region: system.region.clone(),
        seed: v.seed,
        exclusion_radius: v.exclusion_radius,
    };
    let report = monte_carlo(candidate.as_ref(), &system, &vcfg)
        .map_err(|e| CliError::Config(format!("validation: {e}")))?;
    let dir = out_dir(cfg);
    write_file(&dir, "report.csv", &report_csv(&report))?;
    let results: serde_json::Value =
        serde_json::from_str(&report_summary_json(&report)).expect("report json");
    write_file(&dir, "validate_summary.json", &summary_json(cfg, results))?;
    println!(
        "violation rate {:.4}, violation area {:.6}",
        report.violation_rate, report.violation_area
    );
    Ok(())
}

fn cmd_radius(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let r = cfg
        .radius
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [radius] section".into()))?;
    let params =
        RadiusParams { n: r.n, m: r.m, alpha: r.alpha, c1: r.c1, c2: r.c2, rho: r.rho };
    let value = wasserstein_radius(&params).map_err(cfg_err("radius"))?;
    let dir = out_dir(cfg);
    write_file(&dir, "radius.txt", &format!("{value:?}\n"))?;
    println!("{value:?}");
    Ok(())
}

fn cmd_heatgrid(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let system = load_system(cfg)?;
    let h = cfg
        .heatgrid
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [heatgrid] section".into()))?;
    if h.resolution < 2 {
        return Err(CliError::Config("heatgrid.resolution must be >= 2".into()));
    }
    let path = h
        .candidate
        .as_ref()
        .ok_or_else(|| CliError::Config("heatgrid.candidate file path is required".into()))?;
    let candidate = load_candidate(path)?;
    let grid = emit_heatgrid(candidate.as_ref(), &system, &h.xi, &system.region, h.resolution)
        .map_err(|e| CliError::Config(format!("heatgrid: {e}")))?;
    let dir = out_dir(cfg);
    let p = write_file(&dir, "heatgrid.csv", &grid)?;
    println!("heat grid written to {}", p.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Benchmark-table reproduction
// ---------------------------------------------------------------------------

/// Per-case experiment parameters: offline sampling distribution, Wasserstein
/// radii, and the two online validation distributions.
struct CaseSetup {
    case: u32,
    offline: DisturbanceSpec,
    sos_radius: f64,
    nn_radius: f64,
    online_uniform: DisturbanceSpec,
    online_gaussian: DisturbanceSpec,
}

fn case_setup(case: u32) -> Result<CaseSetup, CliError> {
    match case {
        1 => Ok(CaseSetup {
            case,
            offline: DisturbanceSpec::Gaussian { params: vec![(5.0, 1.0), (3.0, 1.0)] },
            sos_radius: 0.25,
            nn_radius: 0.25,
            online_uniform: DisturbanceSpec::Uniform { params: vec![(1.0, 4.0), (1.0, 2.0)] },
            online_gaussian: DisturbanceSpec::Gaussian {
                params: vec![(4.0, 1.5), (1.0, 1.5)],
            },
        }),
        2 => Ok(CaseSetup {
            case,
            offline: DisturbanceSpec::Gaussian { params: vec![(6.0, 1.0), (0.0, 1.0)] },
            sos_radius: 0.15,
            nn_radius: 0.15,
            online_uniform: DisturbanceSpec::Uniform { params: vec![(5.0, 7.0), (-1.0, 1.0)] },
            online_gaussian: DisturbanceSpec::Gaussian {
                params: vec![(7.0, 1.0), (1.0, 1.0)],
            },
        }),
        other => Err(CliError::Config(format!("table1 case must be 1 or 2, got {other}"))),
    }
}

fn synth_candidate(
    system: &UncertainSystem,
    formulation: Formulation,
    samples: &SampleSet,
    radius: f64,
) -> Result<PolyCandidate, CliError> {
    let spec = SosSynthesisSpec::new(formulation, AmbiguityConfig::new(radius, 0.1));
    let solver = SolverConfig::default();
    let outcome = match formulation {
        Formulation::Baseline => synth_baseline(system, &spec, &solver),
        Formulation::Cc => synth_cc(system, samples, &spec, &solver),
        Formulation::Drcc => synth_drcc(system, samples, &spec, &solver),
    }
    .map_err(|e| CliError::Numerical(format!("table1 synthesis: {e}")))?;
    match outcome {
        SynthOutcome::Feasible(result) => {
            PolyCandidate::new(result.v).map_err(cfg_err("table1 candidate"))
        }
        SynthOutcome::Infeasible { margin, .. } => Err(CliError::Infeasible(format!(
            "table1 {formulation:?} synthesis infeasible (margin {margin:.3e})"
        ))),
    }
}

fn train_candidate(
    system: &UncertainSystem,
    loss: LossKind,
    samples: &SampleSet,
    t1: &Table1Config,
    nn_radius: f64,
) -> Result<crate::nnlf::MlpLyapunov, CliError> {
    let arch = MlpArch {
        layer_sizes: vec![2, 16, 16, 1],
        wrapper: WrapperMode::Abs,
        alpha_hat: 0.05,
        embedding: Embedding::Identity,
    };
    let config = TrainingConfig {
        batch_size: t1.batch_size,
        region: system.region.clone(),
        gamma: t1.gamma,
        learning_rate: 0.005,
        epochs: t1.epochs,
        seed: t1.seed.wrapping_add(loss as u64 + 1),
        loss,
        ambiguity: match loss {
            LossKind::Drcc => Some(AmbiguityConfig::new(nn_radius, 0.1)),
            _ => None,
        },
    };
    let samples = match loss {
        LossKind::Lf => None,
        _ => Some(samples),
    };
    train(&config, system, &arch, samples)
        .map(|o| o.model)
        .map_err(|e| CliError::Numerical(format!("table1 training: {e}")))
}

fn run_validation(
    candidate: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    online: &DisturbanceSpec,
    t1: &Table1Config,
) -> Result<(f64, f64), CliError> {
    let cfg = ValidationConfig {
        online: online.clone(),
        realizations: t1.realizations,
        points_per_realization: t1.points,
        region: system.region.clone(),
        seed: t1.seed,
        exclusion_radius: 0.0,
    };
    let report = monte_carlo(candidate, system, &cfg)
        .map_err(|e| CliError::Config(format!("table1 validation: {e}")))?;
    Ok((report.violation_rate, report.violation_area))
}

fn cmd_reproduce_table1(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let t1 = cfg.table1.clone().unwrap_or_default();
    let setup = case_setup(t1.case)?;
    let system = make_poly_system(setup.case).map_err(cfg_err("table1"))?;
    let samples =
        sample_disturbances(&setup.offline, 9, t1.seed).map_err(cfg_err("table1 samples"))?;

    let mut rows: Vec<(String, f64, f64, f64, f64)> = Vec::new();
    let sos_rows = [
        ("SOS", Formulation::Baseline),
        ("CC-SOS", Formulation::Cc),
        ("DRCC-SOS", Formulation::Drcc),
    ];
    for (label, formulation) in sos_rows {
        let candidate = synth_candidate(&system, formulation, &samples, setup.sos_radius)?;
        let (ur, ua) = run_validation(&candidate, &system, &setup.online_uniform, &t1)?;
        let (gr, ga) = run_validation(&candidate, &system, &setup.online_gaussian, &t1)?;
        println!("{label}: uniform {ur:.4}/{ua:.6}, gaussian {gr:.4}/{ga:.6}");
        rows.push((label.to_string(), ur, ua, gr, ga));
    }
    let nn_rows = [("NN", LossKind::Lf), ("CC-NN", LossKind::Cc), ("DRCC-NN", LossKind::Drcc)];
    for (label, loss) in nn_rows {
        let model = train_candidate(&system, loss, &samples, &t1, setup.nn_radius)?;
        let (ur, ua) = run_validation(&model, &system, &setup.online_uniform, &t1)?;
        let (gr, ga) = run_validation(&model, &system, &setup.online_gaussian, &t1)?;
        println!("{label}: uniform {ur:.4}/{ua:.6}, gaussian {gr:.4}/{ga:.6}");
        rows.push((label.to_string(), ur, ua, gr, ga));
    }

    let dir = out_dir(cfg);
    let mut csv = String::from(
        "formulation,uniform_rate,uniform_area,gaussian_rate,gaussian_area\n",
    );
    for (label, ur, ua, gr, ga) in &rows {
        csv.push_str(&format!("{label},{ur:?},{ua:?},{gr:?},{ga:?}\n"));
    }
    let csv_path = write_file(&dir, "table1.csv", &csv)?;
    let results = serde_json::json!({
        "case": setup.case,
        "rows": rows.iter().map(|(l, ur, ua, gr, ga)| serde_json::json!({
            "formulation": l,
            "uniform_rate": ur, "uniform_area": ua,
            "gaussian_rate": gr, "gaussian_area": ga,
        })).collect::<Vec<_>>(),
        "table_file": csv_path,
    });
    write_file(&dir, "table1_summary.json", &summary_json(cfg, results))?;
    println!("table written to {}", csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "drlyap",
    about = "Lyapunov certificate synthesis for uncertain dynamical systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an SOS Lyapunov certificate.
    Synth(CommonArgs),
    /// Train a neural-network Lyapunov candidate.
    Train(CommonArgs),
    /// Monte Carlo validation of a candidate under an online distribution.
    Validate(CommonArgs),
    /// Wasserstein radius estimate from concentration parameters.
    Radius(CommonArgs),
    /// Run all six formulations on a benchmark case and tabulate violations.
    ReproduceTable1(CommonArgs),
    /// Emit a V-dot heat grid for a fixed disturbance realization.
    Heatgrid(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config file (TOML).
    config: PathBuf,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    let (args, runner): (&CommonArgs, fn(&ExperimentConfig) -> Result<(), CliError>) =
        match command {
            Command::Synth(a) => (a, cmd_synth),
            Command::Train(a) => (a, cmd_train),
            Command::Validate(a) => (a, cmd_validate),
            Command::Radius(a) => (a, cmd_radius),
            Command::ReproduceTable1(a) => (a, cmd_reproduce_table1),
            Command::Heatgrid(a) => (a, cmd_heatgrid),
        };
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.out.as_deref());
    runner(&cfg)
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Same as [`run`] but with explicit arguments; used by integration tests.
pub fn run_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match dispatch(&cli.command) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {}", e.message());
                e.exit_code()
            }
        },
        Err(e) => {
            eprintln!("{e}");
            EXIT_CONFIG
        }
    }
}
