//! Command-line front end: scenario loading, running modes and writing
//! artifacts.

pub mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::atlas::FlowAtlas;
use crate::decompose::{
    coordinate_factorize, run_cascade, run_fastpath_recorded, run_full_flow, run_full_flow_recorded,
    run_pair_decomposition, telescope, DecomposeError, LinearFit, StopReason,
};
use crate::distributions::CATALOG;
use crate::verify::ResidualReport;

pub use config::{load_config, parse_override, ConfigError, Mode, ScenarioConfig};

/// Scenario files shipped with the binary: `(name, text)`.
pub const BUNDLED: &[(&str, &str)] = &[
    ("cascade_flag", include_str!("../../scenarios/cascade_flag.cfg")),
    ("energy_noisy", include_str!("../../scenarios/energy_noisy.cfg")),
    ("linear_factorize", include_str!("../../scenarios/linear_factorize.cfg")),
    ("radial_spiral", include_str!("../../scenarios/radial_spiral.cfg")),
    ("rotation_pair", include_str!("../../scenarios/rotation_pair.cfg")),
    ("skew_product", include_str!("../../scenarios/skew_product.cfg")),
    ("twisted_example1", include_str!("../../scenarios/twisted_example1.cfg")),
    ("zero_fields", include_str!("../../scenarios/zero_fields.cfg")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Decompose(#[from] DecomposeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 for invalid input, 3 when nothing could be integrated, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Decompose(e) => match e {
                DecomposeError::AllStoppedAtStart | DecomposeError::StageFailed(_) => 3,
                DecomposeError::Scenario(_) | DecomposeError::Distribution(_) | DecomposeError::Noise(_) => 2,
                _ => 1,
            },
            CliError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowdecomp", version, about = "Decompose stochastic flows into horizontal and vertical parts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its artifacts.
    Run(RunArgs),
    /// Run a scenario and print residual reports as JSON lines.
    Verify(RunArgs),
    /// List catalog distributions and bundled scenarios.
    List,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    pub config: Option<PathBuf>,
    /// Bundled scenario name (see `list`).
    #[arg(long)]
    pub scenario: Option<String>,
    /// Override a config key, e.g. `--set noise.seed=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory, replacing `output.directory`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Run mode, replacing `run.mode`.
    #[arg(long)]
    pub mode: Option<String>,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::List => {
            let _ = write!(out, "{}", list_text());
            return 0;
        }
        Command::Run(a) => execute(&a, false, out),
        Command::Verify(a) => execute(&a, true, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Text printed by `flowdecomp list`.
pub fn list_text() -> String {
    let mut s = String::from("distributions:\n");
    for e in CATALOG {
        s.push_str(&format!("  {:<18} [{}] {}\n", e.name, e.provenance, e.summary));
    }
    s.push_str("scenarios:\n");
    for (name, text) in BUNDLED {
        let mode = text
            .lines()
            .find_map(|l| l.trim().strip_prefix("mode = "))
            .map(|m| m.trim_matches('"'))
            .unwrap_or("pair");
        s.push_str(&format!("  {name:<18} mode={mode}\n"));
    }
    s
}

fn execute(a: &RunArgs, verify: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let text = match (&a.config, &a.scenario) {
        (Some(p), _) => fs::read_to_string(p).map_err(io_err(p))?,
        (None, Some(name)) => bundled(name)
            .ok_or_else(|| CliError::Usage(format!("no bundled scenario named `{name}`")))?
            .to_string(),
        (None, None) => return Err(CliError::Usage("give --config or --scenario".into())),
    };
    let mut overrides = a
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(m) = &a.mode {
        overrides.push(("run.mode".into(), toml::Value::String(m.clone())));
    }
    if verify {
        overrides.push(("run.mode".into(), toml::Value::String("verify".into())));
    }
    let cfg = load_config(&text, &overrides)?;
    let hash = config_hash(&text, &a.overrides, a.mode.as_deref());
    let dir = a
        .output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("flowdecomp_out"));
    let workers = a.workers.unwrap_or(0);
    if a.workers == Some(0) {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = pool.install(|| run_config(&cfg, &dir))?;
    write_json(&dir.join("summary.json"), &outcome.summary)?;
    let stamp = json!({
        "config_sha256": hash,
        "seed": cfg.scenario.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "mode": cfg.mode.name(),
    });
    write_json(&dir.join("stamp.json"), &stamp)?;
    if verify {
        for r in &outcome.reports {
            let line = to_json_string(r).map_err(|e| CliError::Usage(e.to_string()))?;
            let _ = writeln!(out, "{line}");
        }
    } else {
        let _ = writeln!(out, "{}", dir.display());
    }
    Ok(())
}

/// SHA-256 of the config text followed by the overrides, as hex.
pub fn config_hash(text: &str, overrides: &[String], mode: Option<&str>) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for o in overrides {
        h.update(b"\n--set ");
        h.update(o.as_bytes());
    }
    if let Some(m) = mode {
        h.update(b"\n--mode ");
        h.update(m.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Summary and residual reports of one run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Value,
    pub reports: Vec<ResidualReport>,
}

/// Writes floats with 17 significant digits and non-finite values as null.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{:.16e}", value as f64)
    }
}

/// Serializes with [`FullPrecision`].
pub fn to_json_string<T: Serialize>(v: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    v.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut s = to_json_string(v).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    })?;
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

fn write_atlases(path: &Path, atlases: &[&FlowAtlas]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(io::BufWriter::new(file));
    for (i, a) in atlases.iter().enumerate() {
        a.write_csv(&mut w, i == 0).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: io::Error::other(e),
        })?;
    }
    w.flush().map_err(io_err(path))
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn matrix_rows(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| num(m[(i, j)])).collect()))
            .collect(),
    )
}

fn vector(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|x| num(*x)).collect())
}

fn fit_json(f: &LinearFit) -> Value {
    json!({ "t": num(f.t), "matrix": matrix_rows(&f.matrix), "offset": vector(&f.offset) })
}

fn atlas_fit(a: &FlowAtlas) -> Value {
    match a.affine_fit() {
        Some((m, b)) => json!({ "t": num(a.time()), "matrix": matrix_rows(&m), "offset": vector(&b) }),
        None => json!({ "t": num(a.time()), "matrix": null, "offset": null }),
    }
}

fn stop_counts(stops: &[Option<StopReason>]) -> Value {
    let mut counts = serde_json::Map::new();
    for s in stops.iter().flatten() {
        let key = match s {
            StopReason::TransversalityLost { .. } => "transversality_lost",
            StopReason::Explosion { .. } => "explosion",
            StopReason::LeftRegion => "left_region",
            StopReason::EvalError { .. } => "eval_error",
            StopReason::RankDeficientStencil => "rank_deficient_stencil",
        };
        let c = counts.entry(key).or_insert(json!(0));
        *c = json!(c.as_u64().unwrap_or(0) + 1);
    }
    Value::Object(counts)
}

/// Largest `|a(x) - b(x)|` over nodes valid in both atlases on the same grid.
fn max_node_gap(a: &FlowAtlas, b: &FlowAtlas) -> f64 {
    (0..a.len())
        .filter(|&i| a.is_valid(i) && b.is_valid(i))
        .map(|i| (a.image(i) - b.image(i)).amax())
        .fold(0.0, f64::max)
}

/// Runs the configured mode, writing CSV artifacts into `dir`, and returns
/// the summary. The summary and stamp files are written by the caller.
pub fn run_config(cfg: &ScenarioConfig, dir: &Path) -> Result<RunOutcome, CliError> {
    let sc = &cfg.scenario;
    let path = sc.noise_path()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut summary = json!({
        "mode": cfg.mode.name(),
        "seed": sc.seed,
        "h": num(sc.h),
        "horizon_step": path.steps(),
        "tau_min_step": null,
        "tau_median_step": null,
        "gap_min_history": [],
        "composition_residual_max": null,
        "verticality_residual_max": null,
        "minors_min": null,
    });
    let s = summary.as_object_mut().expect("object");
    let mut reports = Vec::new();
    match cfg.mode {
        Mode::Simulate => {
            let snaps = run_full_flow_recorded(sc, &path)?;
            write_atlases(&dir.join("phi.csv"), &snaps.iter().collect::<Vec<_>>())?;
            let last = snaps.last().expect("final state");
            s.insert("valid_nodes".into(), json!(last.valid_count()));
            s.insert("phi_fit_history".into(), Value::Array(snaps.iter().map(atlas_fit).collect()));
        }
        Mode::Pair | Mode::Verify => {
            let r = run_pair_decomposition(sc, &path)?;
            let phis: Vec<_> = r.snapshots.iter().map(|x| &x.phi).collect();
            let xis: Vec<_> = r.snapshots.iter().map(|x| &x.xi).collect();
            let psis: Vec<_> = r.snapshots.iter().map(|x| &x.psi).collect();
            write_atlases(&dir.join("phi.csv"), &phis)?;
            write_atlases(&dir.join("xi.csv"), &xis)?;
            if sc.track_psi {
                write_atlases(&dir.join("psi.csv"), &psis)?;
            }
            s.insert("tau_min_step".into(), json!(r.tau_min()));
            s.insert("tau_median_step".into(), json!(r.tau_median()));
            s.insert("gap_min_history".into(), Value::Array(r.gap_history.iter().map(|g| num(*g)).collect()));
            if sc.track_psi {
                s.insert("composition_residual_max".into(), num(r.composition.max_abs));
                s.insert("verticality_residual_max".into(), num(r.verticality.max_abs));
            }
            s.insert("tangency_residual_max".into(), num(r.tangency.max_abs));
            s.insert("horizontality_max".into(), num(r.horizontality_max));
            s.insert("stops".into(), stop_counts(&r.stops));
            s.insert("xi_fit_history".into(), Value::Array(r.xi_fits.iter().map(fit_json).collect()));
            reports = if sc.track_psi {
                vec![r.composition, r.verticality, r.tangency]
            } else {
                vec![r.tangency]
            };
        }
        Mode::Fastpath => {
            let snaps = run_fastpath_recorded(sc, &path)?;
            write_atlases(&dir.join("xi.csv"), &snaps.iter().collect::<Vec<_>>())?;
            let phi = run_full_flow(sc, &path)?;
            write_atlases(&dir.join("phi.csv"), &[&phi])?;
            s.insert("valid_nodes".into(), json!(snaps.last().expect("final").valid_count()));
            s.insert("xi_fit_history".into(), Value::Array(snaps.iter().map(atlas_fit).collect()));
        }
        Mode::Cascade => {
            let r = run_cascade(sc, &path)?;
            write_atlases(&dir.join("phi.csv"), &[&r.phi])?;
            for (i, f) in r.factors.iter().enumerate() {
                write_atlases(&dir.join(format!("factor_{}.csv", i + 1)), &[f])?;
            }
            write_atlases(&dir.join("psi.csv"), &[&r.remainder])?;
            let mut chain = r.factors.clone();
            chain.push(r.remainder.clone());
            let rebuilt = telescope(&chain, r.phi.grid());
            s.insert("tau_min_step".into(), json!(r.tau_min()));
            s.insert("tau_median_step".into(), json!(r.tau_median()));
            s.insert("stage_tau_min_step".into(), json!(r.stage_tau_min));
            s.insert("composition_residual_max".into(), num(max_node_gap(&rebuilt, &r.phi)));
            if let Some(first) = r.stages.first() {
                s.insert(
                    "gap_min_history".into(),
                    Value::Array(first.gap_history.iter().map(|g| num(*g)).collect()),
                );
            }
        }
        Mode::Factorize => {
            let phi = run_full_flow(sc, &path)?;
            write_atlases(&dir.join("phi.csv"), &[&phi])?;
            match coordinate_factorize(&phi, &sc.base_point(), sc.thresholds.minor) {
                Ok(f) => {
                    for (i, a) in f.factors.iter().enumerate() {
                        write_atlases(&dir.join(format!("factor_{}.csv", i + 1)), &[a])?;
                    }
                    let rebuilt = telescope(&f.factors, phi.grid());
                    s.insert("minors_min".into(), Value::Array(f.minors_min.iter().map(|m| num(*m)).collect()));
                    s.insert("composition_residual_max".into(), num(max_node_gap(&rebuilt, &phi)));
                    s.insert(
                        "base_jacobians".into(),
                        Value::Array(f.base_jacobians.iter().map(matrix_rows).collect()),
                    );
                }
                Err(DecomposeError::MinorVanishes {
                    index,
                    node,
                    value,
                    minors_min,
                }) => {
                    s.insert("minors_min".into(), Value::Array(minors_min.iter().map(|m| num(*m)).collect()));
                    s.insert(
                        "error".into(),
                        json!({ "kind": "minor_vanishes", "index": index, "node": node, "value": num(value) }),
                    );
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(RunOutcome { summary, reports })
}
