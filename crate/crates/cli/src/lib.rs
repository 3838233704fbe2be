//! Subcommand implementations behind the `fedcl` binary.
//!
//! Every command takes a fully resolved [`ExperimentConfig`] and writes its
//! artifacts under an output directory:
//!
//! - `metrics.csv` / `metrics.jsonl`: one row per round
//! - `rounds.jsonl`: the complete round reports
//! - `summary.json`: final probe accuracies and model fingerprint
//! - `model.bin`: the final encoders as a MODEL_DOWN wire frame
//! - `config.toml`: the resolved configuration

use std::fs;
use std::io::Write;
use std::net::{TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use fedcl::analytics::{self, MetricsRow};
use fedcl::config::ExperimentConfig;
use fedcl::data::{self, ClientShard};
use fedcl::federation::{self, ExperimentOutcome, OutcomeSummary, RoundReport, Simulation};
use fedcl::objective::TrainingMode;
use fedcl::transport::{self, Message, ModelPair, SessionSummary};
use fedcl::Error;

pub type Result<T> = fedcl::Result<T>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;

pub const DATASET_FILE: &str = "dataset.fcld";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Protocol(_) | Error::Frame(_) => EXIT_PROTOCOL,
        Error::Client { source, .. } => match exit_code(source) {
            EXIT_PROTOCOL => EXIT_PROTOCOL,
            _ => EXIT_RUNTIME,
        },
        Error::Io(_) | Error::PathIo { .. } | Error::NonFiniteLoss { .. } => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<u32>,
    pub mode: Option<TrainingMode>,
    pub out: Option<PathBuf>,
}

/// Config used when no file is given: 5 clients holding 2 classes each,
/// 30 rounds of `cl_ff_nm`.
pub fn default_config() -> ExperimentConfig {
    ExperimentConfig::new(0, 30, 5, TrainingMode::ClFfNm)
}

pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => default_config(),
    };
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(r) = ov.rounds {
        cfg.federation.rounds = r;
    }
    if let Some(m) = ov.mode {
        cfg.federation.mode = m;
    }
    if let Some(o) = &ov.out {
        cfg.output.dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("fedcl-out"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::PathIo {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::PathIo {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the configured dataset to `<out>/dataset.fcld`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ds = federation::load_dataset(cfg)?;
    let dir = output_dir(cfg);
    create_dir(&dir)?;
    let path = dir.join(DATASET_FILE);
    data::write_dataset(&ds, &path)?;
    info!("wrote {} samples to {}", ds.len(), path.display());
    Ok(path)
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<OutcomeSummary> {
    create_dir(dir)?;
    let rows: Vec<MetricsRow> = outcome.reports.iter().map(RoundReport::metrics_row).collect();
    analytics::emit_metrics(&rows, dir)?;

    let mut rounds = Vec::new();
    for r in &outcome.reports {
        serde_json::to_writer(&mut rounds, r).expect("reports serialise");
        rounds.push(b'\n');
    }
    write_file(&dir.join(ROUNDS_FILE), &rounds)?;

    let summary = outcome.summary(cfg);
    let mut json = serde_json::to_vec_pretty(&summary).expect("summary serialises");
    json.push(b'\n');
    write_file(&dir.join(SUMMARY_FILE), &json)?;

    let model = transport::encode_frame(&Message::ModelDown(ModelPair {
        q: outcome.params_q.clone(),
        k: outcome.params_k.clone(),
    }))?;
    write_file(&dir.join(MODEL_FILE), &model)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    Ok(summary)
}

fn log_round(r: &RoundReport) {
    info!(
        "round {:>3}  contrast {:.4}  neigh {:.4}  knn {:.3}",
        r.round, r.contrast, r.neigh, r.probe.knn_accuracy
    );
}

/// In-process simulation with artifacts.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<OutcomeSummary> {
    let outcome = Simulation::new(cfg.clone())?.run(log_round)?;
    write_artifacts(&output_dir(cfg), cfg, &outcome)
}

/// Final probe accuracies of one ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: TrainingMode,
    pub seed: u64,
    /// kNN accuracy of the untrained encoder.
    pub initial_knn: f64,
    pub final_knn: f64,
    pub final_linear: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub mode: TrainingMode,
    pub mean_knn: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_knn: f64,
    pub mean_linear: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub modes: Vec<ModeStats>,
    /// Mean untrained-encoder kNN accuracy over the seeds.
    pub baseline_knn: f64,
    /// mean(cl_ff) − mean(cl)
    pub delta_ff: f64,
    /// mean(cl_ff_nm) − mean(cl_ff)
    pub delta_nm: f64,
    /// mean(cl_ff_nm) − mean(cl)
    pub delta_total: f64,
}

impl AblationSummary {
    pub fn stats(&self, mode: TrainingMode) -> &ModeStats {
        self.modes.iter().find(|m| m.mode == mode).expect("every mode is run")
    }

    /// sqrt of the mean of two variances.
    pub fn pooled_std(&self, a: TrainingMode, b: TrainingMode) -> f64 {
        ((self.stats(a).std_knn.powi(2) + self.stats(b).std_knn.powi(2)) / 2.0).sqrt()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Runs every mode on seeds `cfg.seed .. cfg.seed + repeats`. Data, partition
/// and initialisation depend only on the seed, so they are shared across modes.
pub fn run_ablation(cfg: &ExperimentConfig, repeats: u32) -> Result<AblationSummary> {
    if repeats == 0 {
        return Err(Error::Config("ablation needs at least one repeat".into()));
    }
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| cfg.seed + r).collect();
    let mut runs = Vec::new();
    for &seed in &seeds {
        for mode in TrainingMode::ALL {
            let mut c = cfg.clone();
            c.seed = seed;
            c.federation.mode = mode;
            c.probe.linear_every_round = false;
            let outcome = Simulation::new(c.clone())?.run(|_| {})?;
            let initial_knn = match outcome.reports.first() {
                Some(r) => r.probe.knn_accuracy,
                None => Simulation::new(c)?.server().probe(false)?.knn_accuracy,
            };
            info!(
                "seed {seed} {mode}: knn {:.3} (untrained {:.3})",
                outcome.final_probe.knn_accuracy, initial_knn
            );
            runs.push(AblationRun {
                mode,
                seed,
                initial_knn,
                final_knn: outcome.final_probe.knn_accuracy,
                final_linear: outcome.final_probe.linear_accuracy,
            });
        }
    }
    let modes: Vec<ModeStats> = TrainingMode::ALL
        .into_iter()
        .map(|mode| {
            let of_mode: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
            let knn: Vec<f64> = of_mode.iter().map(|r| r.final_knn).collect();
            let linear: Option<Vec<f64>> = of_mode.iter().map(|r| r.final_linear).collect();
            let (mean_knn, std_knn) = mean_std(&knn);
            ModeStats {
                mode,
                mean_knn,
                std_knn,
                mean_linear: linear.map(|l| mean_std(&l).0),
            }
        })
        .collect();
    let baseline: Vec<f64> = runs
        .iter()
        .filter(|r| r.mode == TrainingMode::Cl)
        .map(|r| r.initial_knn)
        .collect();
    let mean = |m: TrainingMode| modes.iter().find(|s| s.mode == m).expect("mode").mean_knn;
    Ok(AblationSummary {
        baseline_knn: mean_std(&baseline).0,
        delta_ff: mean(TrainingMode::ClFf) - mean(TrainingMode::Cl),
        delta_nm: mean(TrainingMode::ClFfNm) - mean(TrainingMode::ClFf),
        delta_total: mean(TrainingMode::ClFfNm) - mean(TrainingMode::Cl),
        seeds,
        runs,
        modes,
    })
}

/// Human-readable comparison table.
pub fn format_ablation(s: &AblationSummary) -> String {
    let mut out = format!("{:<10} {:>9} {:>9} {:>9}\n", "mode", "knn_mean", "knn_std", "lin_mean");
    for m in &s.modes {
        let lin = m.mean_linear.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        out += &format!("{:<10} {:>9.4} {:>9.4} {:>9}\n", m.mode.as_str(), m.mean_knn, m.std_knn, lin);
    }
    out += &format!("untrained  {:>9.4}\n", s.baseline_knn);
    out += &format!(
        "delta ff {:+.4}  nm {:+.4}  total {:+.4}\n",
        s.delta_ff, s.delta_nm, s.delta_total
    );
    out
}

/// Ablation over all modes, written to `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(cfg: &ExperimentConfig, repeats: u32) -> Result<AblationSummary> {
    let summary = run_ablation(cfg, repeats)?;
    let dir = output_dir(cfg);
    create_dir(&dir)?;
    let mut csv = String::from("mode,seed,initial_knn,final_knn,final_linear\n");
    for r in &summary.runs {
        csv += &format!(
            "{},{},{},{},{}\n",
            r.mode,
            r.seed,
            r.initial_knn,
            r.final_knn,
            r.final_linear.map_or(String::new(), |v| v.to_string())
        );
    }
    write_file(&dir.join(ABLATION_CSV), csv.as_bytes())?;
    let mut json = serde_json::to_vec_pretty(&summary).expect("summary serialises");
    json.push(b'\n');
    write_file(&dir.join(ABLATION_JSON), &json)?;
    Ok(summary)
}

/// Server role on an already bound listener, writing the same artifacts as
/// `simulate`.
pub fn serve_on(listener: &TcpListener, cfg: &ExperimentConfig) -> Result<OutcomeSummary> {
    let outcome = transport::server_loop(listener, cfg, log_round)?;
    write_artifacts(&output_dir(cfg), cfg, &outcome)
}

pub fn cmd_serve(bind: &str, cfg: &ExperimentConfig) -> Result<OutcomeSummary> {
    let listener = TcpListener::bind(bind).map_err(|e| Error::Protocol(format!("cannot bind {bind}: {e}")))?;
    info!("listening on {}", listener.local_addr()?);
    serve_on(&listener, cfg)
}

/// Client role. `shard` optionally points at an FCLD file holding this
/// client's samples; otherwise the partition is rebuilt from the config.
pub fn cmd_client(
    server: impl ToSocketAddrs,
    cfg: &ExperimentConfig,
    client_id: u32,
    shard: Option<&Path>,
) -> Result<SessionSummary> {
    let shard = match shard {
        Some(path) => {
            let ds = data::read_dataset(path)?;
            let rows = (0..ds.len()).collect();
            Some(ClientShard::new(client_id, ds.samples, rows))
        }
        None => None,
    };
    transport::client_session(server, cfg, client_id, shard)
}

/// Validates a metrics table and returns its data-row count.
pub fn cmd_validate_metrics(path: &Path) -> Result<usize> {
    analytics::validate_metrics(path)
}

/// Prints `text` to stdout, ignoring a closed pipe.
pub fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}
