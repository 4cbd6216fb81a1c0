//! The `bench` command line: argument and config-file parsing, run
//! orchestration and report output.
//!
//! A run is described by command-line flags and, optionally, a TOML file
//! (`--config`). Flags always win over file values. The file accepts the
//! same keys as the long flags (with `_` for `-`) plus `[profiles.<name>]`
//! sections that override or add link profiles:
//!
//! ```toml
//! backend = ["grpc_like", "hybrid"]
//! tier = ["big"]
//! profile = ["nc-bahrain", "lab"]
//! reps = 5
//!
//! [profiles.lab]
//! latency_ms = 2.5
//! single_mbps = 100
//! aggregate_mbps = 400
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use silocomm::harness::{
    run_concurrency_sweep, run_e2e, run_p2p, write_csv, write_json, BenchSetup, E2EReport, HarnessError, P2PReport,
    RoundConfig, SpeedupReport, CSV_HEADER, DEFAULT_SCALE,
};
use silocomm::message::PayloadTier;
use silocomm::netem::{LinkProfile, NetemError, ProfileCatalog, ProfileOverride, REGION_PROFILES};
use silocomm::store::{FsStore, S3Store, Store};
use silocomm::transport::{BackendSpec, TransportError, PRESET_NAMES};

pub const DEFAULT_REPS: u32 = 5;
pub const DEFAULT_MESSAGES: usize = 10;
/// The largest tier sends fewer messages per sweep.
pub const DEFAULT_MESSAGES_LARGE: usize = 5;
pub const DEFAULT_CLIENTS: usize = 7;
pub const DEFAULT_ROUNDS: u32 = 1;
/// p2p and sweep runs without `--profile` use the LAN link.
pub const DEFAULT_PROFILE: &str = "lan";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config file {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Profile(#[from] NetemError),
    #[error(transparent)]
    Backend(#[from] TransportError),
    #[error("invalid combination: {0}")]
    Invalid(String),
    #[error("{context}: {source}")]
    Harness {
        context: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    /// Stable identifier for the error record.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Profile(_) => "profile",
            CliError::Backend(_) => "backend",
            CliError::Invalid(_) => "invalid_combination",
            CliError::Harness { .. } => "harness",
            CliError::Io { .. } => "io",
        }
    }

    /// 2 for configuration problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Harness { .. } | CliError::Io { .. } => 1,
            _ => 2,
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> String {
        let mut rec = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::Profile(NetemError::UnknownProfile { valid, .. }) = self {
            rec["valid_profiles"] = serde_json::json!(valid);
        }
        rec.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Point-to-point latency, one message at a time.
    P2p,
    /// Sequential vs concurrent dispatch of several messages.
    Sweep,
    /// Federated rounds with per-state timing.
    E2e,
    /// Print the link profile catalog.
    Profiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    Memory,
    Fs,
    S3,
}

#[derive(Debug, Parser)]
#[command(
    name = "bench",
    version,
    about = "Communication benchmarks for cross-silo federated learning"
)]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// Backend presets, comma separated [default: all]
    #[arg(long, value_delimiter = ',')]
    pub backend: Option<Vec<String>>,
    /// Payload tiers, comma separated [default: all]
    #[arg(long, value_delimiter = ',')]
    pub tier: Option<Vec<String>>,
    /// Link profiles, comma separated. For e2e, one per client or one for all.
    #[arg(long, value_delimiter = ',')]
    pub profile: Option<Vec<String>>,
    /// Measured repetitions per p2p cell [default: 5]
    #[arg(long)]
    pub reps: Option<u32>,
    /// Messages per sweep [default: 10, 5 for the large tier]
    #[arg(long)]
    pub messages: Option<usize>,
    /// Clients in an e2e run [default: 7]
    #[arg(long)]
    pub clients: Option<usize>,
    /// Rounds in an e2e run [default: 1]
    #[arg(long)]
    pub rounds: Option<u32>,
    /// Desk-scale factor for payloads and bandwidths [default: 0.02]
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// TOML file with defaults for any of these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub store: Option<StoreKind>,
    /// Root directory for `--store fs`.
    #[arg(long)]
    pub store_dir: Option<PathBuf>,
    /// Store-routing threshold for hybrid, in unscaled MB [default: 10]
    #[arg(long)]
    pub threshold_mb: Option<f64>,
}

/// Config file contents. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<Vec<String>>,
    pub tier: Option<Vec<String>>,
    pub profile: Option<Vec<String>>,
    pub reps: Option<u32>,
    pub messages: Option<usize>,
    pub clients: Option<usize>,
    pub rounds: Option<u32>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub store: Option<StoreKind>,
    pub store_dir: Option<PathBuf>,
    pub threshold_mb: Option<f64>,
    #[serde(default)]
    pub profiles: BTreeMap<String, ProfileOverride>,
}

impl FileConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_owned(),
            message: e.to_string().trim_end().to_owned(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    /// Unscaled presets with any threshold override applied.
    pub backends: Vec<BackendSpec>,
    pub tiers: Vec<PayloadTier>,
    /// Unscaled link profiles. For e2e, one per client.
    pub profiles: Vec<LinkProfile>,
    pub reps: u32,
    /// `None` uses the per-tier default.
    pub n_messages: Option<usize>,
    pub n_clients: usize,
    pub n_rounds: u32,
    pub scale: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub store: StoreKind,
    pub store_dir: Option<PathBuf>,
    #[serde(skip)]
    pub catalog: ProfileCatalog,
}

impl RunConfig {
    pub fn messages_for(&self, tier: PayloadTier) -> usize {
        self.n_messages.unwrap_or(match tier {
            PayloadTier::Large => DEFAULT_MESSAGES_LARGE,
            _ => DEFAULT_MESSAGES,
        })
    }

    /// Opens the configured object store. Each benchmark cell gets a fresh
    /// one so store counters are per cell.
    pub fn open_store(&self) -> Result<Store, CliError> {
        let err = |e: silocomm::store::StoreError| CliError::Harness {
            context: format!("opening {:?} store", self.store),
            source: Box::new(e.into()),
        };
        Ok(match self.store {
            StoreKind::Memory => Store::memory(),
            StoreKind::Fs => {
                let dir = self.store_dir.as_ref().expect("validated");
                Store::new(FsStore::new(dir).map_err(err)?)
            }
            StoreKind::S3 => Store::new(S3Store::from_env().map_err(err)?),
        })
    }
}

/// Parses `argv` (including the program name) and resolves it against the
/// config file, if any.
pub fn parse_config<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string().trim_end().to_owned()))?;
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    resolve(args, file)
}

/// Merges flags over file values and validates the result.
pub fn resolve(args: Args, file: FileConfig) -> Result<RunConfig, CliError> {
    let mut catalog = ProfileCatalog::builtin();
    for (name, ov) in &file.profiles {
        catalog.apply_override(name, ov)?;
    }
    let command = args.command;

    let backend_names = args.backend.or(file.backend);
    let threshold_mb = args.threshold_mb.or(file.threshold_mb);
    let mut backends = match &backend_names {
        Some(names) => names
            .iter()
            .map(|n| BackendSpec::preset(n.trim()))
            .collect::<Result<Vec<_>, _>>()?,
        None => BackendSpec::all_presets(),
    };
    if backends.is_empty() {
        return Err(CliError::Invalid(format!(
            "no backend selected; presets: {}",
            PRESET_NAMES.join(", ")
        )));
    }
    let any_hybrid = backends.iter().any(|b| b.hybrid);

    if let Some(mb) = threshold_mb {
        if !(mb.is_finite() && mb >= 0.0) {
            return Err(CliError::Invalid(format!(
                "--threshold-mb must be a non-negative number, got {mb}"
            )));
        }
        if !any_hybrid {
            return Err(CliError::Invalid(
                "--threshold-mb only affects the hybrid backend, which is not selected".into(),
            ));
        }
        let bytes = (mb * 1e6).round() as u64;
        backends = backends.into_iter().map(|b| b.with_threshold(bytes)).collect();
    }
    for b in &backends {
        b.validate()?;
    }

    let tiers = match args.tier.or(file.tier) {
        Some(names) => names
            .iter()
            .map(|n| {
                n.trim()
                    .parse::<PayloadTier>()
                    .map_err(|e| CliError::Invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => PayloadTier::ALL.to_vec(),
    };
    if tiers.is_empty() {
        return Err(CliError::Invalid("no tier selected".into()));
    }

    let n_clients = args.clients.or(file.clients).unwrap_or(DEFAULT_CLIENTS);
    if n_clients == 0 {
        return Err(CliError::Invalid("--clients must be at least 1".into()));
    }
    let profile_names = args.profile.or(file.profile);
    let profiles = match (&profile_names, command) {
        (Some(names), _) => names
            .iter()
            .map(|n| catalog.lookup(n.trim()))
            .collect::<Result<Vec<_>, _>>()?,
        // e2e defaults to the geo-distributed mix, cycled over the clients.
        (None, Command::E2e) => REGION_PROFILES
            .iter()
            .map(|n| catalog.lookup(n))
            .collect::<Result<Vec<_>, _>>()?,
        (None, _) => vec![catalog.lookup(DEFAULT_PROFILE)?],
    };
    if profiles.is_empty() {
        return Err(CliError::Invalid("no profile selected".into()));
    }
    let profiles = if command == Command::E2e {
        match (profiles.len(), &profile_names) {
            (1, _) => vec![profiles[0].clone(); n_clients],
            (n, Some(_)) if n != n_clients => {
                return Err(CliError::Invalid(format!(
                    "e2e takes one profile for all clients or one per client; got {n} profiles for {n_clients} clients"
                )))
            }
            _ => profiles.iter().cycle().take(n_clients).cloned().collect(),
        }
    } else {
        profiles
    };

    // A profile section may carry its own scale; it becomes the run's scale
    // unless one is given explicitly.
    let profile_scale = {
        let mut explicit: Vec<f64> = profiles
            .iter()
            .filter_map(|p| file.profiles.get(p.name()).and_then(|o| o.scale))
            .collect();
        explicit.dedup();
        match explicit.as_slice() {
            [] => None,
            [s] => Some(*s),
            _ => {
                return Err(CliError::Invalid(format!(
                    "selected profiles set different scales ({explicit:?}); pass --scale"
                )))
            }
        }
    };
    let scale = args.scale.or(file.scale).or(profile_scale).unwrap_or(DEFAULT_SCALE);
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(CliError::Invalid(format!("--scale must be in (0, 1], got {scale}")));
    }

    let reps = args.reps.or(file.reps).unwrap_or(DEFAULT_REPS);
    if reps == 0 {
        return Err(CliError::Invalid("--reps must be at least 1".into()));
    }
    let n_messages = args.messages.or(file.messages);
    if matches!(n_messages, Some(n) if n < 2) {
        return Err(CliError::Invalid("--messages must be at least 2".into()));
    }
    let n_rounds = args.rounds.or(file.rounds).unwrap_or(DEFAULT_ROUNDS);
    if n_rounds == 0 {
        return Err(CliError::Invalid("--rounds must be at least 1".into()));
    }

    let store_set = args.store.or(file.store);
    let store = store_set.unwrap_or(StoreKind::Memory);
    let store_dir = args.store_dir.or(file.store_dir);
    if store_set.is_some() && store != StoreKind::Memory && !any_hybrid && command != Command::Profiles {
        return Err(CliError::Invalid(format!(
            "--store {store:?} is only used by the hybrid backend, which is not selected"
        )));
    }
    match (store, &store_dir) {
        (StoreKind::Fs, None) => return Err(CliError::Invalid("--store fs needs --store-dir".into())),
        (StoreKind::Memory | StoreKind::S3, Some(_)) => {
            return Err(CliError::Invalid("--store-dir only applies to --store fs".into()))
        }
        _ => {}
    }

    Ok(RunConfig {
        command,
        backends,
        tiers,
        profiles,
        reps,
        n_messages,
        n_clients,
        n_rounds,
        scale,
        seed: args.seed.or(file.seed).unwrap_or(0),
        out: args.out.or(file.out),
        format: args.format.or(file.format).unwrap_or(Format::Csv),
        store,
        store_dir,
        catalog,
    })
}

/// Any report the CLI can produce.
#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum AnyReport {
    P2p(P2PReport),
    Sweep(SpeedupReport),
    E2e(Box<E2EReport>),
}

/// Formats a rate or latency the way the catalog table prints it: whole
/// numbers from 100 up, otherwise three significant figures.
pub fn format_value(v: f64) -> String {
    if v.is_infinite() {
        return "inf".into();
    }
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 100.0 {
        return format!("{v:.0}");
    }
    let digits = 2 - v.abs().log10().floor() as i32;
    format!("{v:.*}", digits.max(0) as usize)
}

/// `profile, latency_ms, single_mbps, aggregate_mbps` lines.
pub fn profile_table(catalog: &ProfileCatalog) -> Vec<String> {
    let mut lines = vec!["profile, latency_ms, single_mbps, aggregate_mbps".to_owned()];
    lines.extend(catalog.iter().map(|p| {
        format!(
            "{}, {}, {}, {}",
            p.name(),
            format_value(p.latency_ms()),
            format_value(p.single_conn_mbps()),
            format_value(p.aggregate_mbps())
        )
    }));
    lines
}

/// Runs every cell of the configured cross product.
pub fn run(cfg: &RunConfig) -> Result<Vec<AnyReport>, CliError> {
    let mut out = Vec::new();
    match cfg.command {
        Command::Profiles => {}
        Command::P2p | Command::Sweep => {
            for backend in &cfg.backends {
                for &tier in &cfg.tiers {
                    for profile in &cfg.profiles {
                        let setup = BenchSetup::new(backend.clone(), tier, profile.clone())
                            .with_scale(cfg.scale)
                            .with_seed(cfg.seed)
                            .with_store(cfg.open_store()?);
                        let context = format!("{:?} {} {} {}", cfg.command, backend.name, tier, profile.name());
                        let wrap = |source| CliError::Harness {
                            context: context.to_lowercase(),
                            source: Box::new(source),
                        };
                        out.push(if cfg.command == Command::P2p {
                            AnyReport::P2p(run_p2p(&setup, cfg.reps).map_err(wrap)?)
                        } else {
                            AnyReport::Sweep(run_concurrency_sweep(&setup, cfg.messages_for(tier)).map_err(wrap)?)
                        });
                    }
                }
            }
        }
        Command::E2e => {
            for backend in &cfg.backends {
                for &tier in &cfg.tiers {
                    let base = RoundConfig::uniform(backend.clone(), tier, cfg.profiles[0].clone(), cfg.n_clients);
                    let rc = RoundConfig {
                        n_rounds: cfg.n_rounds,
                        profiles: cfg.profiles.clone(),
                        scale: cfg.scale,
                        seed: cfg.seed,
                        train: silocomm::harness::TrainDelayModel::zero(cfg.seed),
                        store: cfg.open_store()?,
                        ..base
                    };
                    let report = run_e2e(&rc).map_err(|source| CliError::Harness {
                        context: format!("e2e {} {}", backend.name, tier),
                        source: Box::new(source),
                    })?;
                    out.push(AnyReport::E2e(Box::new(report)));
                }
            }
        }
    }
    Ok(out)
}

/// Writes reports to `w`: one CSV table with a single header, or a JSON
/// array.
pub fn write_reports(reports: &[AnyReport], format: Format, w: impl Write) -> Result<(), CliError> {
    let io_err = |e: io::Error| CliError::Io {
        context: "writing report".into(),
        source: e,
    };
    let out_err = |source| CliError::Harness {
        context: "writing report".into(),
        source: Box::new(source),
    };
    match format {
        Format::Json => {
            let mut w = w;
            if let [only] = reports {
                match only {
                    AnyReport::P2p(r) => write_json(r, &mut w),
                    AnyReport::Sweep(r) => write_json(r, &mut w),
                    AnyReport::E2e(r) => write_json(r.as_ref(), &mut w),
                }
                .map_err(out_err)?;
            } else {
                serde_json::to_writer_pretty(&mut w, reports)
                    .map_err(|e| out_err(HarnessError::Output(e.to_string())))?;
            }
            writeln!(w).map_err(io_err)
        }
        Format::Csv => {
            if let [only] = reports {
                return match only {
                    AnyReport::P2p(r) => write_csv(r, w),
                    AnyReport::Sweep(r) => write_csv(r, w),
                    AnyReport::E2e(r) => write_csv(r.as_ref(), w),
                }
                .map_err(out_err);
            }
            let mut csv = BufWriter::new(w);
            writeln!(csv, "{}", CSV_HEADER.join(",")).map_err(io_err)?;
            for r in reports {
                let mut body = Vec::new();
                match r {
                    AnyReport::P2p(r) => write_csv(r, &mut body),
                    AnyReport::Sweep(r) => write_csv(r, &mut body),
                    AnyReport::E2e(r) => write_csv(r.as_ref(), &mut body),
                }
                .map_err(out_err)?;
                // Drop the per-report header line.
                let start = body.iter().position(|&b| b == b'\n').map_or(body.len(), |i| i + 1);
                csv.write_all(&body[start..]).map_err(io_err)?;
            }
            csv.flush().map_err(io_err)
        }
    }
}

/// Runs the configured command and writes its output.
pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.command == Command::Profiles {
        let mut stdout = io::stdout().lock();
        for line in profile_table(&cfg.catalog) {
            writeln!(stdout, "{line}").map_err(|e| CliError::Io {
                context: "writing profiles".into(),
                source: e,
            })?;
        }
        return Ok(());
    }
    let reports = run(cfg)?;
    match &cfg.out {
        Some(path) => {
            let f = File::create(path).map_err(|e| CliError::Io {
                context: format!("creating {}", path.display()),
                source: e,
            })?;
            write_reports(&reports, cfg.format, BufWriter::new(f))
        }
        None => write_reports(&reports, cfg.format, io::stdout().lock()),
    }
}
