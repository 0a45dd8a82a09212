//! The `humanlike` command line: one subcommand per pipeline stage.

use std::ffi::OsString;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use humanlike_core::arena::{perplexity_retention, DisclaimerDetector};
use humanlike_core::data::{dataset_stats, PreferenceRecord};
use humanlike_core::dpo::PolicyPair;
use humanlike_core::lm::LanguageModel;
use humanlike_core::train::{pretrain, train_dpo};

use crate::arena::{serve, Arena, Campaign};
use crate::checkpoint::{load_adapters, load_model, save_adapters, save_model};
use crate::checks::{gradient_suite, oracle_toy};
use crate::config::Config;
use crate::datagen::{run_pipeline, ChatBackend, HttpBackend, RoutedBackend, StubBackend};
use crate::error::{Error, Result};
use crate::experiment::sft_corpus;
use crate::jsonl::{read_records, write_records};
use crate::metrics::write_metrics;
use crate::report::{retention_text, selection_text, stats_text};

/// `println!` that ignores a closed stdout instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Name of the campaign file kept inside an arena directory.
pub const CAMPAIGN_FILE: &str = "campaign.json";

#[derive(Debug, Parser)]
#[command(
    name = "humanlike",
    version,
    about = "Human-like preference data, DPO fine-tuning, and a pairwise voting arena"
)]
pub struct Cli {
    /// JSON config file. Missing keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seeds every random stage, overriding the seeds in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Progress on stderr. Repeat for per-step output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a base model on the responses of a preference dataset.
    Pretrain(PretrainArgs),
    /// Generate a preference dataset.
    GenData(GenDataArgs),
    /// Fine-tune LoRA adapters on a preference dataset with DPO.
    TrainDpo(TrainDpoArgs),
    /// Compare analytic and numeric gradients for every primitive and the DPO loss.
    GradCheck(GradCheckArgs),
    /// Check the optimal-policy identities on enumerable toy problems.
    Oracle(OracleArgs),
    /// Summarize a preference dataset.
    Stats(StatsArgs),
    /// Run the voting arena.
    Serve(ServeArgs),
    /// Selection rates from a campaign's vote log, without the service.
    Report(ReportArgs),
    /// Held-out perplexity of a tuned model relative to its base.
    Retention(RetentionArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Preference dataset (JSONL); both responses of every record are used.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Where the base checkpoint is written.
    #[arg(long, value_name = "PATH", default_value = "base.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Offline template generator.
    Stub,
    /// Chat-completions endpoint.
    Url,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Stub)]
    pub backend: BackendKind,
    /// Records to generate; overrides datagen.count.
    #[arg(long)]
    pub count: Option<usize>,
    /// Overrides datagen.endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Output dataset (JSONL).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainDpoArgs {
    /// Preference dataset (JSONL).
    pub data: PathBuf,
    /// Base checkpoint. Without one, a base is pretrained on the dataset first.
    #[arg(long, value_name = "PATH")]
    pub base: Option<PathBuf>,
    /// Receives base.json (when pretrained here), adapters.json and metrics.csv.
    #[arg(long, value_name = "DIR", default_value = "runs/dpo")]
    pub out_dir: PathBuf,
    /// Run name used in the metrics columns.
    #[arg(long, default_value = "humanlike")]
    pub run_name: String,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Central-difference step for the primitives; the end-to-end dpo_loss
    /// check uses a fixed five-point stencil.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Random points per check, seeded from --seed onwards.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 3)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2)]
    pub max_len: usize,
    /// Random toys, seeded from --seed onwards.
    #[arg(long, default_value_t = 5)]
    pub toys: u64,
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Preference dataset (JSONL).
    pub data: PathBuf,
    /// Print JSON instead of the aligned table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Campaign file. Without one, the campaign in the arena directory is
    /// reused, or a stub campaign is generated there.
    #[arg(long, value_name = "PATH")]
    pub campaign: Option<PathBuf>,
    /// Overrides arena.dir.
    #[arg(long, value_name = "DIR")]
    pub dir: Option<PathBuf>,
    /// Overrides arena.host.
    #[arg(long)]
    pub host: Option<String>,
    /// Overrides arena.port.
    #[arg(long)]
    pub port: Option<u16>,
    /// Overrides arena.ui_dir.
    #[arg(long, value_name = "DIR")]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Campaign directory holding assignments.jsonl and votes.jsonl.
    pub dir: PathBuf,
    /// Print JSON instead of the aligned table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RetentionArgs {
    #[arg(long, value_name = "PATH")]
    pub base: PathBuf,
    /// Adapter checkpoint for the tuned model; the base itself when omitted.
    #[arg(long, value_name = "PATH")]
    pub adapters: Option<PathBuf>,
    /// Held-out preference dataset (JSONL).
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Fail when the ratio exceeds this bound.
    #[arg(long)]
    pub max_ratio: Option<f64>,
    /// Print JSON instead of the aligned table.
    #[arg(long)]
    pub json: bool,
}

/// Config sections each subcommand reads.
fn sections(name: &str) -> &'static [&'static str] {
    match name {
        "pretrain" => &["model", "pretrain"],
        "gen-data" => &["datagen"],
        "train-dpo" => &["model", "pretrain", "lora", "training"],
        "oracle" => &["training.beta"],
        "stats" => &["arena.extra_disclaimers"],
        "serve" => &["arena", "datagen.seed"],
        _ => &[],
    }
}

fn config_help(name: &str) -> String {
    let keys: Vec<(String, String)> = sections(name).iter().flat_map(|s| Config::keys(s)).collect();
    if keys.is_empty() {
        return "Config keys read: none.".into();
    }
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys read (defaults shown):\n");
    for (k, v) in keys {
        out.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    out
}

pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let help = config_help(&name);
        cmd = cmd.mut_subcommand(name, |s| s.after_help(help));
    }
    cmd
}

/// Parses `args` (program name first) and runs the subcommand, returning
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Core(humanlike_core::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let seed = cli.seed.unwrap_or(0);
    let verbose = cli.verbose;
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&config, &a, verbose),
        Command::GenData(a) => cmd_gen_data(config, &a),
        Command::TrainDpo(a) => cmd_train_dpo(&config, &a, verbose),
        Command::GradCheck(a) => cmd_grad_check(&a, seed),
        Command::Oracle(a) => cmd_oracle(&config, &a, seed),
        Command::Stats(a) => cmd_stats(&config, &a),
        Command::Serve(a) => cmd_serve(config, a),
        Command::Report(a) => cmd_report(&a),
        Command::Retention(a) => cmd_retention(&a),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(Error::io(dir)),
        _ => Ok(()),
    }
}

fn pretrain_base(config: &Config, data: &[PreferenceRecord], verbose: u8) -> Result<LanguageModel> {
    let corpus = sft_corpus(data, config.model.max_seq_len);
    if verbose > 0 {
        eprintln!(
            "pretraining on {} sequences for {} steps",
            corpus.len(),
            config.pretrain.steps
        );
    }
    let (model, losses) = pretrain(&corpus, &config.pretrain, config.model.clone())?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        out!("pretrain loss {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    Ok(model)
}

fn cmd_pretrain(config: &Config, a: &PretrainArgs, verbose: u8) -> Result<()> {
    let records = read_records(&a.data)?;
    let model = pretrain_base(config, &records, verbose)?;
    create_parent(&a.out)?;
    save_model(&a.out, &model)?;
    out!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_gen_data(mut config: Config, a: &GenDataArgs) -> Result<()> {
    if let Some(n) = a.count {
        config.datagen.count = n;
    }
    if let Some(e) = &a.endpoint {
        config.datagen.endpoint = Some(e.clone());
    }
    let d = &config.datagen;
    let backend: Box<dyn ChatBackend> = match a.backend {
        BackendKind::Stub => Box::new(StubBackend::new(d.seed)),
        BackendKind::Url => {
            let endpoint = d
                .endpoint
                .clone()
                .ok_or_else(|| Error::Config("the url backend needs datagen.endpoint or --endpoint".into()))?;
            let key = std::env::var(&d.api_key_env).ok().filter(|k| !k.is_empty());
            Box::new(RoutedBackend {
                questions: HttpBackend::new(endpoint.clone(), d.question_model.clone(), key.clone(), d.retry.clone()),
                answers: HttpBackend::new(endpoint, d.answer_model.clone(), key, d.retry.clone()),
            })
        }
    };
    let (records, report) = run_pipeline(backend.as_ref(), d)?;
    create_parent(&a.out)?;
    write_records(&a.out, &records)?;
    out!(
        "wrote {} records to {} ({} conversational and {} knowledge questions, {} removed)",
        records.len(),
        a.out.display(),
        report.conversational_questions,
        report.knowledge_questions,
        report.removed.total()
    );
    Ok(())
}

fn cmd_train_dpo(config: &Config, a: &TrainDpoArgs, verbose: u8) -> Result<()> {
    let records = read_records(&a.data)?;
    fs::create_dir_all(&a.out_dir).map_err(Error::io(&a.out_dir))?;
    let base = match &a.base {
        Some(path) => load_model(path)?,
        None => {
            let model = pretrain_base(config, &records, verbose)?;
            let path = a.out_dir.join("base.json");
            save_model(&path, &model)?;
            out!("wrote {}", path.display());
            model
        }
    };
    let mut pair = PolicyPair::new(base, &config.lora, config.training.seed)?;
    let started = Instant::now();
    let log = train_dpo(&mut pair, &records, &config.training, &a.run_name, |row| {
        if verbose > 1 {
            eprintln!(
                "step {:>4}  loss {:.5}  margin {:+.5}  accuracy {:.3}  lr {:.2e}",
                row.step, row.loss, row.margin, row.accuracy, row.lr
            );
        }
    })?;
    let adapters = a.out_dir.join("adapters.json");
    let metrics = a.out_dir.join("metrics.csv");
    save_adapters(&adapters, &pair.policy)?;
    write_metrics(&log, &metrics)?;
    let n = log.rows.len().min(10);
    out!(
        "{} steps in {:.1}s: margin {:+.5} (first {n}) -> {:+.5} (last {n}), accuracy {:.3} (last {n})",
        log.rows.len(),
        started.elapsed().as_secs_f64(),
        log.head_mean(n, |r| r.margin),
        log.tail_mean(n, |r| r.margin),
        log.tail_mean(n, |r| r.accuracy)
    );
    out!("wrote {} and {}", adapters.display(), metrics.display());
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs, seed: u64) -> Result<()> {
    let started = Instant::now();
    let report = gradient_suite(seed..seed + a.seeds, a.step)?;
    let width = report
        .primitives
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max("dpo_loss seed 0".len());
    for (name, err) in &report.primitives {
        out!("{name:<width$}  {err:.3e}");
    }
    for (s, err) in &report.dpo_loss {
        out!("{:<width$}  {err:.3e}", format!("dpo_loss seed {s}"));
    }
    let worst = report.max_error();
    out!(
        "max relative error {worst:.3e} over {} checks in {:.1}s",
        report.primitives.len() + report.dpo_loss.len(),
        started.elapsed().as_secs_f64()
    );
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Error::Check(format!(
            "max relative error {worst:.3e} is not below {:.0e}",
            a.tolerance
        )))
    }
}

fn cmd_oracle(config: &Config, a: &OracleArgs, seed: u64) -> Result<()> {
    let beta = config.training.beta;
    out!(
        "{:>6} {:>9} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "seed",
        "sequences",
        "Z",
        "norm defect",
        "reparam res",
        "|Z0 - 1|",
        "margin err"
    );
    let mut worst: f64 = 0.0;
    for s in seed..seed + a.toys {
        let r = oracle_toy(a.vocab, a.max_len, beta, s)?;
        out!(
            "{:>6} {:>9} {:>12.6} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e}",
            r.seed,
            r.sequences,
            r.partition,
            r.normalization_defect,
            r.reparameterization_residual,
            r.zero_reward_defect,
            r.margin_error
        );
        worst = if r.max_error().is_nan() {
            f64::NAN
        } else {
            worst.max(r.max_error())
        };
    }
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Error::Check(format!(
            "oracle error {worst:.3e} is not below {:.0e}",
            a.tolerance
        )))
    }
}

fn cmd_stats(config: &Config, a: &StatsArgs) -> Result<()> {
    let records = read_records(&a.data)?;
    let stats = dataset_stats(&records);
    let detector = DisclaimerDetector::with_extra(config.arena.extra_disclaimers.iter().cloned());
    let flagged = |f: fn(&PreferenceRecord) -> &str| records.iter().filter(|r| detector.detect(f(r)).flagged).count();
    let disclaimers = DisclaimerCounts {
        chosen: flagged(|r| &r.chosen),
        rejected: flagged(|r| &r.rejected),
    };
    if a.json {
        let mut value = serde_json::to_value(&stats).expect("stats serialize");
        value["disclaimers"] = serde_json::to_value(disclaimers).expect("counts serialize");
        out!("{}", serde_json::to_string_pretty(&value).expect("stats serialize"));
    } else {
        out!("{}", stats_text(&stats).trim_end());
        out!();
        out!(
            "disclaimers  chosen {}  rejected {}",
            disclaimers.chosen,
            disclaimers.rejected
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
struct DisclaimerCounts {
    chosen: usize,
    rejected: usize,
}

fn cmd_serve(config: Config, a: ServeArgs) -> Result<()> {
    let ac = &config.arena;
    let dir = a.dir.unwrap_or_else(|| ac.dir.clone());
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let stored = dir.join(CAMPAIGN_FILE);
    let campaign = match &a.campaign {
        Some(path) => Campaign::load(path)?,
        None if stored.exists() => Campaign::load(&stored)?,
        None => {
            let c = Campaign::generate(&StubBackend::new(config.datagen.seed), ac.models.clone(), ac.questions)?;
            c.save(&stored)?;
            out!(
                "generated a {}-question stub campaign in {}",
                c.items.len(),
                stored.display()
            );
            c
        }
    };
    let arena = Arena::open(campaign, ac.seed, &dir)?.with_pairs_per_session(ac.pairs_per_session);
    let host = a.host.unwrap_or_else(|| ac.host.clone());
    let ip: IpAddr = host
        .parse()
        .map_err(|_| Error::Config(format!("arena.host `{host}` is not an IP address")))?;
    let addr = SocketAddr::new(ip, a.port.unwrap_or(ac.port));
    let ui = a.ui.or_else(|| ac.ui_dir.clone());
    let runtime = tokio::runtime::Runtime::new().map_err(Error::io(&dir))?;
    out!("serving {} on http://{addr}", dir.display());
    runtime
        .block_on(serve(Arc::new(arena), addr, ui.as_deref()))
        .map_err(|e| Error::Io {
            path: addr.to_string().into(),
            source: e,
        })
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let report = crate::arena::replay_report(&a.dir)?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        out!("{}", selection_text(&report).trim_end());
    }
    Ok(())
}

fn cmd_retention(a: &RetentionArgs) -> Result<()> {
    let base = load_model(&a.base)?;
    let mut tuned = base.clone();
    if let Some(path) = &a.adapters {
        load_adapters(path, &mut tuned)?;
    }
    let heldout = sft_corpus(&read_records(&a.data)?, base.config().max_seq_len);
    let report = perplexity_retention(&base, &tuned, &heldout)?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        out!("{}", retention_text(&report).trim_end());
    }
    match a.max_ratio {
        Some(max) if report.ratio.is_nan() || report.ratio > max => Err(Error::Check(format!(
            "perplexity ratio {:.4} exceeds {max}",
            report.ratio
        ))),
        _ => Ok(()),
    }
}
