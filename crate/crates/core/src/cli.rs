//! The `usra` command line: config loading, run orchestration and artifact
//! output. Every command returns an exit code instead of exiting so the
//! whole surface can be driven from tests.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use sha1::{Digest, Sha1};

use crate::augment::AugKind;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::evalharness::{self, EvalError};
use crate::models::{ModelBundle, ModelError};
use crate::trainer::{self, Method, MetricsRow, TrainConfig, TrainError, TrainEvent};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FS: i32 = 3;
pub const EXIT_MISSING: i32 = 4;
pub const EXIT_CORRUPT: i32 = 5;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const EVAL_CSV_HEADER: &str = "checkpoint,domain,episodes,seed,mean_return";
pub const ABLATION_CSV_HEADER: &str = "aug,lr_mode,encoder_lr_divisor,episodes,final_return,smoothed_final_return";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Fs { path: String, message: String },
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Corrupt(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Fs { .. } => EXIT_FS,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Corrupt(_) => EXIT_CORRUPT,
            CliError::Failed(_) => EXIT_FAILED,
        }
    }

    fn fs(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Fs {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::UnknownKey(_) | TrainError::Invalid { .. } => CliError::Config(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Failed(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "usra", version, about = "Representation learning under augmentation: training, evaluation and plots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Collect random frames and run the representation pretraining phase.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the agent learning phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from instead of `<out>/pretrain.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and append one CSV row per domain.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A domain name or `all`.
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = evalharness::DEFAULT_EVAL_EPISODES)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Augmentation × learning-rate ablation; omitted flags span both values.
    Ablate {
        #[arg(long)]
        aug: Option<AblationAug>,
        #[arg(long = "lr-mode")]
        lr_mode: Option<LrMode>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a metrics log as an SVG learning curve.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = evalharness::DEFAULT_SMOOTHING_WINDOW)]
        window: usize,
    },
    /// Check analytic gradients of every loss against finite differences.
    Gradcheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationAug {
    Randconv,
    Jitter,
}

impl AblationAug {
    fn kind(self) -> AugKind {
        match self {
            AblationAug::Randconv => AugKind::RandConv,
            AblationAug::Jitter => AugKind::Jitter,
        }
    }

    fn name(self) -> &'static str {
        match self {
            AblationAug::Randconv => "randconv",
            AblationAug::Jitter => "jitter",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LrMode {
    Static,
    Differential,
}

impl LrMode {
    pub fn divisor(self) -> u32 {
        match self {
            LrMode::Static => 1,
            LrMode::Differential => 10,
        }
    }

    fn name(self) -> &'static str {
        match self {
            LrMode::Static => "static",
            LrMode::Differential => "differential",
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Errors carry the
/// 1-based line of the offending entry.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut lines_of: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {line_no}: expected `key = value`")))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(prev) = lines_of.insert(key.to_string(), line_no) {
            return Err(CliError::Config(format!("line {line_no}: `{key}` already set on line {prev}")));
        }
        cfg.set(key, value)
            .map_err(|e| CliError::Config(format!("line {line_no}: {e}")))?;
    }
    cfg.validate().map_err(|e| match &e {
        TrainError::Invalid { key, .. } => match lines_of.get(key) {
            Some(l) => CliError::Config(format!("line {l}: {e}")),
            None => CliError::Config(e.to_string()),
        },
        _ => CliError::from(e),
    })?;
    Ok(cfg)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Git-style blob hash: SHA-1 over `"blob <len>\0"` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(40), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writes via a sibling temp file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::fs(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::fs(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::fs(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::fs(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::fs(dir, e))?;
    // probe writability before spending minutes on training
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| CliError::fs(dir, e))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

/// Run record written next to the artifacts, one `key=value` per line.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(&'static str, String)>,
    pub seed: u64,
    pub method: Method,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<(String, PathBuf)>,
    pub checkpoint_hash: Option<String>,
}

impl RunManifest {
    fn new(command: &str, cfg: &TrainConfig) -> Self {
        Self {
            command: command.to_string(),
            config: cfg.to_pairs(),
            seed: cfg.seed,
            method: cfg.method,
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
            checkpoint_hash: None,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "method={}", self.method);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "started_unix={}", self.started_unix);
        let _ = writeln!(s, "finished_unix={}", self.finished_unix);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (k, p) in &self.outputs {
            let _ = writeln!(s, "output.{k}={}", p.display());
        }
        if let Some(h) = &self.checkpoint_hash {
            let _ = writeln!(s, "checkpoint_sha1={h}");
        }
        s
    }

    /// Finalizes timestamps and writes `manifest.txt` into `dir`.
    fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        write_atomic(&dir.join(MANIFEST_FILE), self.render().as_bytes())
    }
}

/// Parses a manifest back into ordered `(key, value)` pairs.
pub fn parse_manifest(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn save_checkpoint(bundle: &ModelBundle, cfg: &TrainConfig, path: &Path) -> Result<String> {
    let bytes = bundle.to_checkpoint(&[("seed", cfg.seed as f32)]).to_bytes();
    write_atomic(path, &bytes)?;
    Ok(blob_hash(&bytes))
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    if !path.exists() {
        return Err(CliError::Missing(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Io { .. } => CliError::fs(path, e),
        other => CliError::Corrupt(format!("{}: {other}", path.display())),
    })?;
    let (bundle, _) = ModelBundle::from_checkpoint(&ck).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))?;
    Ok(bundle)
}

fn log_event(e: TrainEvent<'_>) {
    match e {
        TrainEvent::Epoch(l) => eprintln!("epoch {:>3}  loss {:.5}", l.epoch, l.loss.total),
        TrainEvent::Episode(r) => {
            if r.episode % 10 == 0 {
                eprintln!("episode {:>4}  return {:>8.2}  eps {:.3}", r.episode, r.train_return, r.epsilon)
            }
        }
    }
}

pub fn cmd_pretrain(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    if !cfg.method.has_pretraining() {
        return Err(CliError::Config(format!("method `{}` has no pretraining phase", cfg.method)));
    }
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("pretrain", &cfg);
    let (bundle, log) = trainer::run_pretrain(&cfg, &mut log_event)?;
    let ckpt = out.join("pretrain.ckpt");
    let losses = out.join("pretrain_losses.csv");
    manifest.checkpoint_hash = Some(save_checkpoint(&bundle, &cfg, &ckpt)?);
    write_atomic(&losses, trainer::pretrain_csv(&log).as_bytes())?;
    manifest.outputs = vec![("checkpoint".into(), ckpt), ("losses".into(), losses)];
    manifest.finish(out)
}

/// Phase 2 into `out`; returns the metrics rows.
pub fn cmd_train(config: &Path, seed: Option<u64>, out: &Path, resume: Option<&Path>) -> Result<Vec<MetricsRow>> {
    let cfg = load_config(config, seed)?;
    train_with(&cfg, out, resume)
}

fn train_with(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<Vec<MetricsRow>> {
    let start = match resume {
        Some(p) => Some(p.to_path_buf()),
        None => {
            let p = out.join("pretrain.ckpt");
            (cfg.method.has_pretraining() || p.exists()).then_some(p)
        }
    };
    let mut bundle = match start {
        Some(p) => {
            if !p.exists() && cfg.method.has_pretraining() {
                return Err(CliError::Missing(format!(
                    "method `{}` needs a pretrained checkpoint: run `usra pretrain` or pass --resume",
                    cfg.method
                )));
            }
            load_bundle(&p)?
        }
        None => trainer::init_bundle(cfg),
    };
    if bundle.q_input() != cfg.method.q_input() {
        return Err(CliError::Config(format!(
            "checkpoint Q-head input does not match method `{}`",
            cfg.method
        )));
    }
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("train", cfg);
    let rows = trainer::finetune_phase2(&mut bundle, cfg, &mut log_event)?;
    let ckpt = out.join("final.ckpt");
    let metrics = out.join("metrics.csv");
    manifest.checkpoint_hash = Some(save_checkpoint(&bundle, cfg, &ckpt)?);
    write_atomic(&metrics, trainer::metrics_csv(&rows).as_bytes())?;
    manifest.outputs = vec![("checkpoint".into(), ckpt), ("metrics".into(), metrics)];
    manifest.finish(out)?;
    Ok(rows)
}

pub fn cmd_eval(ckpt: &Path, domain: &str, episodes: usize, seed: u64, csv: &Path) -> Result<Vec<f64>> {
    let domains = evalharness::parse_domains(domain).map_err(|e| CliError::Config(e.to_string()))?;
    if episodes == 0 {
        return Err(CliError::Config("--episodes must be at least 1".into()));
    }
    let bundle = load_bundle(ckpt)?;
    let mut text = String::new();
    let fresh = !csv.exists() || fs::metadata(csv).map_or(true, |m| m.len() == 0);
    if fresh {
        text.push_str(EVAL_CSV_HEADER);
        text.push('\n');
    }
    let mut means = Vec::new();
    for v in domains {
        let mean = evalharness::evaluate(&bundle, v, episodes, seed)?;
        let _ = writeln!(text, "{},{v},{episodes},{seed},{mean:.6}", ckpt.display());
        means.push(mean);
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(csv)
        .map_err(|e| CliError::fs(csv, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::fs(csv, e))?;
    Ok(means)
}

/// One finished ablation cell.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub aug: AblationAug,
    pub lr_mode: LrMode,
    pub final_return: f64,
    pub smoothed_final_return: f64,
    pub episodes: usize,
}

pub fn cmd_ablate(
    aug: Option<AblationAug>,
    lr_mode: Option<LrMode>,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<Vec<AblationCell>> {
    let mut base = match config {
        Some(p) => load_config(p, seed)?,
        None => TrainConfig {
            seed: seed.unwrap_or(0),
            ..TrainConfig::default()
        },
    };
    base.method = Method::Usra;
    let augs = aug.map_or(vec![AblationAug::Randconv, AblationAug::Jitter], |a| vec![a]);
    let modes = lr_mode.map_or(vec![LrMode::Static, LrMode::Differential], |m| vec![m]);
    ensure_dir(out)?;
    let mut cells = Vec::new();
    for &a in &augs {
        for &m in &modes {
            let cfg = TrainConfig {
                aug_kind: a.kind(),
                encoder_lr_divisor: m.divisor(),
                ..base.clone()
            };
            let dir = out.join(format!("{}_{}", a.name(), m.name()));
            ensure_dir(&dir)?;
            let mut manifest = RunManifest::new("ablate", &cfg);
            let run = trainer::run(&cfg, &mut log_event)?;
            let ckpt = dir.join("final.ckpt");
            let metrics = dir.join("metrics.csv");
            manifest.checkpoint_hash = Some(save_checkpoint(&run.bundle, &cfg, &ckpt)?);
            write_atomic(&metrics, trainer::metrics_csv(&run.metrics).as_bytes())?;
            manifest.outputs = vec![("checkpoint".into(), ckpt), ("metrics".into(), metrics)];
            manifest.finish(&dir)?;
            let curve = evalharness::learning_curve(&run.metrics, evalharness::DEFAULT_SMOOTHING_WINDOW)?;
            let last = curve.last().expect("episodes > 0");
            cells.push(AblationCell {
                aug: a,
                lr_mode: m,
                final_return: last.raw,
                smoothed_final_return: last.smoothed,
                episodes: last.episode,
            });
        }
    }
    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    for c in &cells {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6}",
            c.aug.name(),
            c.lr_mode.name(),
            c.lr_mode.divisor(),
            c.episodes,
            c.final_return,
            c.smoothed_final_return
        );
    }
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    Ok(cells)
}

/// Line chart of raw and smoothed returns. Each series is a single `<path>`.
pub fn render_svg(curve: &[evalharness::CurvePoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let (e0, e1) = (curve[0].episode as f64, curve[curve.len() - 1].episode as f64);
    let (lo, hi) = curve
        .iter()
        .flat_map(|p| [p.raw, p.smoothed])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let span_e = if e1 > e0 { e1 - e0 } else { 1.0 };
    let x = |e: usize| PAD + (e as f64 - e0) / span_e * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    let path = |pick: fn(&evalharness::CurvePoint) -> f64| {
        curve
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, x(p.episode), y(pick(p))))
            .collect::<String>()
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"  <rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"  <line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(s, r#"  <line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#, b = H - PAD);
    let _ = writeln!(s, r#"  <text x="{}" y="{}" text-anchor="middle">episode</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"  <text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">return</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(s, r#"  <text x="{PAD}" y="{}" font-size="10">{lo:.1}</text>"#, H - PAD + 14.0);
    let _ = writeln!(s, r#"  <text x="{PAD}" y="{}" font-size="10">{hi:.1}</text>"#, PAD - 4.0);
    let _ = writeln!(
        s,
        r##"  <path class="raw" d="{}" fill="none" stroke="#9aa5b1" stroke-width="1"/>"##,
        path(|p| p.raw)
    );
    let _ = writeln!(
        s,
        r##"  <path class="smoothed" d="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
        path(|p| p.smoothed)
    );
    s.push_str("</svg>\n");
    s
}

pub fn cmd_plot(log: &Path, out: &Path, window: usize) -> Result<()> {
    let text = fs::read_to_string(log).map_err(|e| CliError::Config(format!("{}: {e}", log.display())))?;
    let rows = trainer::parse_metrics_csv(&text).map_err(|e| CliError::Config(format!("{}: {e}", log.display())))?;
    if rows.is_empty() {
        return Err(CliError::Config(format!("{}: no data rows", log.display())));
    }
    let curve = evalharness::learning_curve(&rows, window)?;
    write_atomic(out, render_svg(&curve).as_bytes())
}

/// Prints one line per network; false when any check fails.
pub fn cmd_gradcheck() -> Result<bool> {
    let checks = verify::gradient_suite(verify::fault_from_env()).map_err(|e| CliError::Failed(e.to_string()))?;
    for c in &checks {
        println!("  {:<14} {:<11} probes {:>3}  max rel err {:.3e}", c.loss, c.network, c.probes, c.max_rel_err);
    }
    let summary = verify::summarize(&checks);
    for s in &summary {
        println!(
            "{:<11} {} max rel err {:.3e} over {} probes",
            s.network,
            if s.pass { "ok  " } else { "FAIL" },
            s.max_rel_err,
            s.probes
        );
    }
    Ok(summary.iter().all(|s| s.pass))
}

/// Entry point shared by the binary and tests.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let res = match cli.command {
        Command::Pretrain { config, seed, out } => cmd_pretrain(&config, seed, &out),
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => cmd_train(&config, seed, &out, resume.as_deref()).map(drop),
        Command::Eval {
            ckpt,
            domain,
            episodes,
            seed,
            csv,
        } => cmd_eval(&ckpt, &domain, episodes, seed, &csv).map(|means| {
            for m in means {
                println!("{m:.6}");
            }
        }),
        Command::Ablate {
            aug,
            lr_mode,
            config,
            seed,
            out,
        } => cmd_ablate(aug, lr_mode, config.as_deref(), seed, &out).map(drop),
        Command::Plot { log, out, window } => cmd_plot(&log, &out, window),
        Command::Gradcheck => match cmd_gradcheck() {
            Ok(true) => Ok(()),
            Ok(false) => return EXIT_FAILED,
            Err(e) => Err(e),
        },
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_carry_line_numbers() {
        let e = parse_config("# comment\nseed = 3\n\ngama = 0.9\n").unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        assert!(e.to_string().contains("line 4"), "{e}");
        let e = parse_config("episodes = 5\ngamma = 1.5 # too big\n").unwrap_err();
        assert!(e.to_string().contains("gamma") && e.to_string().contains("line 2"), "{e}");
        assert!(parse_config("seed 3\n").is_err());
        assert!(parse_config("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn config_values_apply() {
        let cfg = parse_config("method = lusr\n  episodes=7 \naug_kind = jitter\n").unwrap();
        assert_eq!(cfg.method, Method::Lusr);
        assert_eq!(cfg.episodes, 7);
        assert_eq!(cfg.aug_kind, AugKind::Jitter);
    }

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(blob_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(blob_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn manifest_round_trips_keys() {
        let cfg = TrainConfig::default();
        let mut m = RunManifest::new("train", &cfg);
        m.checkpoint_hash = Some("ab".into());
        let pairs = parse_manifest(&m.render());
        assert!(pairs.contains(&("config.encoder_lr_divisor".into(), "10".into())));
        assert!(pairs.contains(&("checkpoint_sha1".into(), "ab".into())));
    }

    #[test]
    fn two_point_svg_path() {
        let curve = vec![
            evalharness::CurvePoint {
                episode: 1,
                raw: 0.0,
                smoothed: 0.5,
            },
            evalharness::CurvePoint {
                episode: 2,
                raw: 1.0,
                smoothed: 0.5,
            },
        ];
        let svg = render_svg(&curve);
        assert!(svg.contains(r#"d="M50.00,350.00 L590.00,50.00""#), "{svg}");
    }
}
