//! `teachloop`: curriculum generation, simulated studies, filter
//! inspection and the session service.
//!
//! Failures exit nonzero with one JSON error record on stderr:
//! `{"error": {"kind": ..., "message": ..., "details": [...]}}`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use teachloop::bec::{bec_area_with, ConstraintSet, HalfSpaceConstraint, Provenance};
use teachloop::beliefs::effective_sample_size;
use teachloop::domain::{load_domain, load_domains, Domain, MANIFEST};
use teachloop::sim::{run_study, StudyConfig};
use teachloop::sphere::Vec3;
use teachloop::teaching::Curriculum;
use teachloop_service::session::Export;
use teachloop_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "teachloop", version, about = "Closed-loop teaching of gridworld reward functions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write each domain's KC bank (`kc/v1`) and a readable lesson plan.
    GenCurriculum {
        /// A domain directory, or a directory of them.
        #[arg(long, default_value = "data/domains")]
        pool: PathBuf,
        /// Accepted for uniformity; curriculum generation draws nothing.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "curriculum")]
        out: PathBuf,
    },
    /// Run a simulated study and write `study/v1` plus a summary table.
    Simulate {
        /// Study config (TOML or JSON, `schema_version = "simulate/v1"`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data/domains")]
        pool: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "study")]
        out: PathBuf,
    },
    /// Filter snapshots and a per-event mass/area trace from a session export.
    InspectFilter {
        export: PathBuf,
        #[arg(long, default_value = "filter")]
        out: PathBuf,
    },
    /// Serve sessions over HTTP until interrupted.
    Serve {
        /// Service config (TOML, `schema_version = "service/v1"`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug)]
struct Failure {
    kind: String,
    message: String,
    details: Vec<String>,
}

impl Failure {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self { kind: kind.into(), message: message.into(), details: vec![] }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }
}

impl From<teachloop::Error> for Failure {
    fn from(e: teachloop::Error) -> Self {
        let details = match &e {
            teachloop::Error::InvalidConfig(errs) => errs.clone(),
            _ => vec![],
        };
        Self { kind: e.kind().into(), message: e.to_string(), details }
    }
}

impl From<teachloop_service::StartError> for Failure {
    fn from(e: teachloop_service::StartError) -> Self {
        let details = match &e {
            teachloop_service::StartError::Config(errs) => errs.clone(),
            _ => vec![],
        };
        Self { kind: e.kind().into(), message: e.to_string(), details }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("documents serialize") + "\n"
}

/// A single domain directory or every domain under a root.
fn load_pool(pool: &Path) -> Result<Vec<Domain>> {
    if !pool.is_dir() {
        return Err(Failure::new("io", format!("pool directory {} does not exist", pool.display())));
    }
    if pool.join(MANIFEST).is_file() {
        Ok(vec![load_domain(pool)?])
    } else {
        Ok(load_domains(pool)?.into_values().collect())
    }
}

/// `a*x + b*y ... >= 0` with the coefficients scaled so the smallest
/// nonzero one has magnitude 1.
fn inequality(normal: [f64; 3], names: &[String]) -> String {
    let small = normal.iter().map(|v| v.abs()).filter(|v| *v > 1e-9).fold(f64::INFINITY, f64::min);
    let mut s = String::new();
    for (v, name) in normal.iter().zip(names) {
        if v.abs() <= 1e-9 {
            continue;
        }
        let c = v / small;
        if s.is_empty() {
            let _ = write!(s, "{}{:.2}*w[{name}]", if c < 0.0 { "-" } else { "" }, c.abs());
        } else {
            let _ = write!(s, " {} {:.2}*w[{name}]", if c < 0.0 { "-" } else { "+" }, c.abs());
        }
    }
    s + " >= 0"
}

fn lesson_plan(cur: &Curriculum) -> String {
    let bank = &cur.bank;
    let mut s = format!("# {} curriculum\n\n", bank.domain);
    for (i, lesson) in bank.lessons.iter().enumerate() {
        let _ = writeln!(s, "lesson {}: {}", i + 1, lesson.label);
        for kc in &lesson.kcs {
            let n = kc.constraint.normal().to_f64();
            let _ = writeln!(s, "  {}: {}", kc.id, inequality(n, &bank.feature_names));
            let mut envs: Vec<&str> = vec![];
            for c in cur.candidates.iter().filter(|c| c.reveals(&kc.constraint)) {
                if !envs.contains(&c.id()) {
                    envs.push(c.id());
                }
            }
            let _ = writeln!(s, "    demonstrated by: {}", envs.join(", "));
        }
    }
    s
}

fn gen_curriculum(pool: &Path, out: &Path) -> Result<()> {
    for d in load_pool(pool)? {
        let cur = Curriculum::new(&d)?;
        write(&out.join(format!("{}.kc.json", d.name())), &pretty(&cur.bank))?;
        write(&out.join(format!("{}.lessons.txt", d.name())), &lesson_plan(&cur))?;
    }
    Ok(())
}

const SIMULATE_SCHEMA: &str = "simulate/v1";

#[derive(Debug, Deserialize)]
struct SimulateFile {
    schema_version: String,
    #[serde(flatten)]
    study: StudyConfig,
}

fn read_study_config(path: &Path) -> Result<StudyConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    let parsed: std::result::Result<SimulateFile, String> = if path.extension().is_some_and(|x| x == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    let f = parsed.map_err(|e| Failure::new("parse", format!("{}: {e}", path.display())))?;
    if f.schema_version != SIMULATE_SCHEMA {
        return Err(Failure::new(
            "invalid_config",
            format!("{}: schema_version {:?}, expected {SIMULATE_SCHEMA}", path.display(), f.schema_version),
        ));
    }
    Ok(f.study)
}

fn simulate(config: Option<&Path>, pool: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => read_study_config(p)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let domains: std::collections::BTreeMap<String, Domain> =
        load_pool(pool)?.into_iter().map(|d| (d.name().to_string(), d)).collect();
    let mut errs = match cfg.validate() {
        Err(teachloop::Error::InvalidConfig(e)) => e,
        Err(e) => return Err(e.into()),
        Ok(()) => vec![],
    };
    for name in &cfg.domains {
        if !domains.contains_key(name) {
            errs.push(format!("unknown domain {name}"));
        }
    }
    if !errs.is_empty() {
        return Err(teachloop::Error::InvalidConfig(errs).into());
    }
    let report = run_study(&domains, &cfg)?;
    write(&out.join("study.json"), &pretty(&report))?;
    write(&out.join("summary.tsv"), &report.summary_tsv())?;
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    event: usize,
    kind: String,
    env_id: String,
    correct: Option<bool>,
    constraints: usize,
    /// Filter mass inside the region the constraints so far allow.
    mass: f64,
    /// Area fraction of that region.
    area: f64,
    ess: f64,
}

fn inspect_filter(export: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(export).map_err(|e| Failure::io(export, e))?;
    let ex: Export = serde_json::from_str(&text)
        .map_err(|e| Failure::new("parse", format!("{}: not a session export: {e}", export.display())))?;
    if ex.schema != teachloop::teaching::SESSION_SCHEMA || ex.snapshots.is_empty() {
        return Err(Failure::new("parse", format!("{}: not a session/v1 export with snapshots", export.display())));
    }
    let mut snaps = String::new();
    for s in &ex.snapshots {
        snaps.push_str(&serde_json::to_string(s).expect("snapshots serialize"));
        snaps.push('\n');
    }
    write(&out.join("snapshots.ndjson"), &snaps)?;

    let mut region: ConstraintSet<f64> = ex.snapshots[0].prior.clone();
    let mut rows = Vec::new();
    for ev in &ex.state.history {
        for n in &ev.constraints {
            if let Some(c) = HalfSpaceConstraint::new(Vec3::from_f64(*n), Provenance::Demonstration) {
                region.insert(c);
            }
        }
        // the first snapshot taken once this event existed
        let snap = ex.snapshots.iter().find(|s| s.event_index > ev.index).unwrap_or(&ex.snapshots[ex.snapshots.len() - 1]);
        let ps = snap.to_particles();
        rows.push(TraceRow {
            event: ev.index,
            kind: serde_json::to_value(ev.kind).expect("kinds serialize").as_str().unwrap_or_default().into(),
            env_id: ev.env_id.clone(),
            correct: ev.correct,
            constraints: region.len(),
            mass: ps.mass_in(&region),
            area: bec_area_with(&region, 20_000, 0xa7ea).fraction,
            ess: effective_sample_size(&ps),
        });
    }
    let mut tsv = String::from("event\tkind\tenv_id\tcorrect\tconstraints\tmass\tarea\tess\n");
    for r in &rows {
        let correct = r.correct.map_or("", |c| if c { "true" } else { "false" });
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{correct}\t{}\t{:.6}\t{:.6}\t{:.2}",
            r.event, r.kind, r.env_id, r.constraints, r.mass, r.area, r.ess
        );
    }
    write(&out.join("trace.tsv"), &tsv)?;
    write(&out.join("trace.json"), &pretty(&rows))?;
    Ok(())
}

fn serve(config: Option<&Path>, port: Option<u16>, pool: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let base = match config {
        Some(p) => ServiceConfig::from_file(p)?,
        None => ServiceConfig::default(),
    };
    let mut cfg = base.from_process_env()?;
    if let Some(p) = port {
        cfg.port = p;
    }
    if let Some(p) = pool {
        cfg.pool = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new("runtime", e.to_string()))?;
    rt.block_on(async {
        let (listener, app) = teachloop_service::bind(&cfg).await?;
        teachloop_service::serve(listener, app, shutdown_signal())
            .await
            .map_err(|e| Failure::new("serve", e.to_string()))
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn report(f: &Failure) {
    eprintln!("{}", json!({"error": {"kind": f.kind, "message": f.message, "details": f.details}}));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            report(&Failure { kind: "usage".into(), message: first, details: msg.lines().skip(1).map(str::to_string).filter(|l| !l.trim().is_empty()).collect() });
            return ExitCode::from(2);
        }
    };
    let r = match cli.cmd {
        Cmd::GenCurriculum { pool, seed: _, out } => gen_curriculum(&pool, &out),
        Cmd::Simulate { config, pool, seed, out } => simulate(config.as_deref(), &pool, seed, &out),
        Cmd::InspectFilter { export, out } => inspect_filter(&export, &out),
        Cmd::Serve { config, port, pool, seed } => serve(config.as_deref(), port, pool, seed),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inequalities_are_scaled_to_the_smallest_coefficient() {
        let names: Vec<String> = ["mud", "recharge", "step"].iter().map(|s| s.to_string()).collect();
        let n = [1.0 / 17f64.sqrt(), 0.0, -4.0 / 17f64.sqrt()];
        assert_eq!(inequality(n, &names), "1.00*w[mud] - 4.00*w[step] >= 0");
        let n = [-1.0 / 5f64.sqrt(), 0.0, 2.0 / 5f64.sqrt()];
        assert_eq!(inequality(n, &names), "-1.00*w[mud] + 2.00*w[step] >= 0");
    }
}
