//! The `dpgraph` command line.
//!
//! Every command writes its reports into `--out-dir` and prints its JSON
//! summary on stdout. Failures print `{"error": kind, "message": ...}` on
//! stderr and exit with 2 for bad input or 1 for a failed computation.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, default_alpha_grid, rdp_to_dp, PrivacySpec};
use crate::drop::drop_report;
use crate::error::{Error, Result};
use crate::graph::{degree_histogram, generate_sbm, load_graph_dir, save_graph_dir, DegreeHistogram, GraphDataset, SbmConfig};
use crate::model::{save_checkpoint, ModelConfig};
use crate::sampler::{max_occurrence, n_bound, sample_edgelists, subgraphs_from_edgelists, SamplerConfig};
use crate::trainer::{noise_for_target_epsilon, train, PrivacyConfig, TrainConfig};
use crate::verify::{occurrence_suite, sensitivity_suite};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "DPGRAPH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dpgraph", version, about = "Node-level differentially private GNN training")]
struct Cli {
    /// Seed for every random choice; overrides seeds in a run config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic stochastic block model dataset.
    Generate(GenerateArgs),
    /// Sample training subgraphs and report sizes and occurrences.
    Sample(SampleArgs),
    /// Epsilon over the Rényi order grid.
    Account(AccountArgs),
    /// Drop probabilities of the in-degree cap.
    DropAnalysis(DropArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Run the occurrence and sensitivity property suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct SbmArgs {
    /// Nodes.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Communities, one label each.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Edge probability within a community.
    #[arg(long, default_value_t = 0.05)]
    p_in: f64,
    /// Edge probability across communities.
    #[arg(long, default_value_t = 0.005)]
    p_out: f64,
    /// Feature dimension.
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    /// Standard deviation of feature noise around the class mean.
    #[arg(long, default_value_t = 2.0)]
    feature_noise: f64,
}

impl SbmArgs {
    fn config(&self, seed: u64) -> SbmConfig {
        SbmConfig {
            n: self.n,
            num_classes: self.classes,
            p_in: self.p_in,
            p_out: self.p_out,
            feature_dim: self.feature_dim,
            feature_noise: self.feature_noise,
            seed,
        }
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    sbm: SbmArgs,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Dataset directory; a generated SBM is used when absent.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Input CSV files start with a header row.
    #[arg(long)]
    header: bool,
    /// In-degree cap.
    #[arg(long)]
    k: usize,
    /// Subgraph depth.
    #[arg(long)]
    r: usize,
    #[command(flatten)]
    sbm: SbmArgs,
}

#[derive(Debug, Args)]
struct AccountArgs {
    /// Number of training subgraphs.
    #[arg(long)]
    n: u64,
    /// In-degree cap.
    #[arg(long)]
    k: u64,
    /// Subgraph depth.
    #[arg(long)]
    r: u32,
    /// Batch size.
    #[arg(long)]
    m: u64,
    /// Noise multiplier.
    #[arg(long, required_unless_present = "target_epsilon")]
    lambda: Option<f64>,
    /// Calibrate the noise multiplier to this epsilon instead.
    #[arg(long, conflicts_with = "lambda")]
    target_epsilon: Option<f64>,
    /// Iterations.
    #[arg(long)]
    t: u64,
    /// Target delta.
    #[arg(long)]
    delta: f64,
    /// Comma-separated Rényi orders.
    #[arg(long)]
    alpha_grid: Option<String>,
}

#[derive(Debug, Args)]
struct DropArgs {
    /// In-degree cap.
    #[arg(long)]
    k: u64,
    /// Largest degree in the table.
    #[arg(long)]
    max_degree: u64,
    /// `degree,count` CSV to weight the expected drop fraction.
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Histogram CSV starts with a header row.
    #[arg(long)]
    header: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Random graphs in the occurrence suite.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Adjacent graph pairs in the sensitivity suite.
    #[arg(long, default_value_t = 50)]
    sensitivity_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSource {
    pub dir: PathBuf,
    #[serde(default)]
    pub header: bool,
}

/// Privacy block of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPrivacy {
    pub delta: f64,
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
    /// When set, the noise multiplier is calibrated to reach this epsilon
    /// after all iterations and `train.noise_multiplier` must be 0.
    #[serde(default)]
    pub target_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub graph: Option<GraphSource>,
    #[serde(default)]
    pub generator: Option<SbmConfig>,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub privacy: RunPrivacy,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.graph, &self.generator) {
            (Some(_), Some(_)) => Err(Error::Config("give either graph or generator, not both".into())),
            (None, None) => Err(Error::Config("one of graph or generator is required".into())),
            _ => Ok(()),
        }?;
        if self.privacy.target_epsilon.is_some() && self.train.noise_multiplier != 0.0 {
            return Err(Error::Config("target_epsilon and a nonzero noise_multiplier are exclusive".into()));
        }
        Ok(())
    }

    fn with_seed(mut self, seed: u64) -> Self {
        self.sampler.seed = seed;
        self.train.seed = seed;
        if let Some(g) = self.generator.as_mut() {
            g.seed = seed;
        }
        self
    }

    pub fn dataset(&self) -> Result<GraphDataset> {
        match (&self.graph, &self.generator) {
            (Some(src), _) => Ok(load_graph_dir(&src.dir, src.header)?.0),
            (None, Some(sbm)) => generate_sbm(sbm),
            (None, None) => Err(Error::Config("one of graph or generator is required".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub dropped_count: usize,
    pub max_occurrence: usize,
    pub max_occurrence_node: Option<usize>,
    pub n_bound: u64,
    pub num_subgraphs: usize,
    pub expected_drop_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountReport {
    pub epsilon: f64,
    pub best_alpha: f64,
    pub delta: f64,
    pub noise_multiplier: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropSummary {
    pub k: u64,
    pub max_degree: u64,
    pub sup_delta: f64,
    pub sup_delta_at: u64,
    pub sup_delta_at_least_k: f64,
    pub expected_drop_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub noise_multiplier: f64,
    pub steps: u64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub thresholds: [f64; 3],
    pub dropped_nodes: usize,
    pub num_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub occurrence_cases: usize,
    pub occurrence_violations: usize,
    pub in_degree_violations: usize,
    pub count_mismatches: usize,
    pub sensitivity_cases: usize,
    pub sensitivity_violations: usize,
    pub max_sensitivity_ratio: f64,
    pub passed: bool,
}

/// JSON cannot hold infinities or NaN.
fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(dir, name, text.as_bytes())?;
    Ok(text)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_generate(args: &GenerateArgs, seed: u64, out: &Path) -> Result<String> {
    let g = generate_sbm(&args.sbm.config(seed))?;
    save_graph_dir(&g, out)?;
    let summary = serde_json::json!({
        "num_nodes": g.num_nodes(),
        "num_edges": g.edges().len(),
        "num_classes": g.num_classes(),
        "feature_dim": g.feature_dim(),
        "train": g.train_set().len(),
        "val": g.val_set().len(),
        "test": g.test_set().len(),
    });
    write_json(out, "dataset.json", &summary)
}

fn run_sample(args: &SampleArgs, seed: u64, out: &Path) -> Result<String> {
    let g = match &args.graph {
        Some(dir) => load_graph_dir(dir, args.header)?.0,
        None => generate_sbm(&args.sbm.config(seed))?,
    };
    let cfg = SamplerConfig { k: args.k, r: args.r, seed };
    let el = sample_edgelists(&g, &cfg)?;
    let subs = subgraphs_from_edgelists(&g, &el, cfg.r);
    let mut csv = String::from("root,size,depth,max_fanout\n");
    for s in &subs {
        csv.push_str(&format!("{},{},{},{}\n", s.root(), s.size(), s.depth(), s.max_fanout()));
    }
    write_file(out, "subgraphs.csv", csv.as_bytes())?;
    let occ = max_occurrence(&subs);
    let hist = degree_histogram(&g);
    let report = SampleReport {
        dropped_count: el.dropped().len(),
        max_occurrence: occ.map_or(0, |o| o.count),
        max_occurrence_node: occ.map(|o| o.node),
        n_bound: n_bound(cfg.k as u64, cfg.r as u32)?,
        num_subgraphs: subs.len(),
        expected_drop_fraction: crate::drop::expected_drop_fraction(&hist, cfg.k as u64)?,
    };
    write_json(out, "sample_report.json", &report)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("bad alpha '{s}' in grid")))
        })
        .collect()
}

fn run_account(args: &AccountArgs, out: &Path) -> Result<String> {
    let grid = match &args.alpha_grid {
        Some(text) => parse_grid(text)?,
        None => default_alpha_grid(),
    };
    let mut spec = PrivacySpec::from_lambda(args.n, args.k, args.r, args.m, args.lambda.unwrap_or(1.0), args.t, args.delta, grid)?;
    if let Some(target) = args.target_epsilon {
        spec.sigma = calibrate_sigma(&spec, target)?;
    }
    let res = rdp_to_dp(&spec)?;
    let mut csv = String::from("alpha,gamma_step,gamma_total,epsilon\n");
    for p in &res.per_alpha {
        csv.push_str(&format!("{:?},{:?},{:?},{:?}\n", p.alpha, p.gamma_step, p.gamma_total, p.epsilon));
    }
    write_file(out, "epsilon_curve.csv", csv.as_bytes())?;
    let report = AccountReport {
        epsilon: res.epsilon,
        best_alpha: res.best_alpha,
        delta: spec.delta,
        noise_multiplier: spec.noise_multiplier()?,
        sigma: spec.sigma,
    };
    write_json(out, "account.json", &report)
}

fn run_drop(args: &DropArgs, out: &Path) -> Result<String> {
    let hist = args
        .histogram
        .as_deref()
        .map(|p| DegreeHistogram::load_csv(p, args.header))
        .transpose()?;
    let rep = drop_report(args.k, args.max_degree, hist.as_ref())?;
    let mut csv = String::from("d_v,drop_prob,drop_prob_adjacent,delta\n");
    for r in &rep.rows {
        csv.push_str(&format!("{},{:?},{:?},{:?}\n", r.d_v, r.drop_prob, r.drop_prob_adjacent, r.delta));
    }
    write_file(out, "drop_analysis.csv", csv.as_bytes())?;
    let summary = DropSummary {
        k: rep.k,
        max_degree: args.max_degree,
        sup_delta: rep.sup_delta,
        sup_delta_at: rep.sup_delta_at,
        sup_delta_at_least_k: rep.sup_delta_at_least_k,
        expected_drop_fraction: rep.expected_drop_fraction,
    };
    write_json(out, "drop_summary.json", &summary)
}

fn run_train(args: &TrainArgs, seed: Option<u64>, out: &Path, out_explicit: bool) -> Result<String> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let out = match (&cfg.out_dir, out_explicit) {
        (Some(dir), false) => dir.clone(),
        _ => out.to_path_buf(),
    };
    ensure_dir(&out)?;
    let g = cfg.dataset()?;
    let privacy = PrivacyConfig {
        delta: cfg.privacy.delta,
        alpha_grid: cfg.privacy.alpha_grid.clone(),
    };
    let mut train_cfg = cfg.train.clone();
    if let Some(target) = cfg.privacy.target_epsilon {
        train_cfg.noise_multiplier = noise_for_target_epsilon(g.train_set().len(), &cfg.sampler, &train_cfg, &privacy, target)?;
    }
    let result = train(&g, &cfg.sampler, &cfg.model, &train_cfg, &privacy)?;
    result.log.save(&out)?;
    save_checkpoint(&result.params, &cfg.model, &out, "model")?;
    let last = result.log.rows.last();
    let summary = TrainSummary {
        epsilon: finite(result.log.final_epsilon()),
        delta: privacy.delta,
        noise_multiplier: train_cfg.noise_multiplier,
        steps: train_cfg.iterations,
        val_accuracy: last.and_then(|r| finite(r.val_accuracy)),
        test_accuracy: last.and_then(|r| finite(r.test_accuracy)),
        thresholds: result.log.thresholds,
        dropped_nodes: result.log.dropped_nodes,
        num_train: result.log.num_train,
    };
    write_json(&out, "final.json", &summary)
}

fn run_verify(args: &VerifyArgs, seed: u64, out: &Path) -> Result<(String, bool)> {
    let occ = occurrence_suite(args.trials, seed)?;
    let sens = sensitivity_suite(args.sensitivity_trials, seed)?;
    let report = VerifyReport {
        occurrence_cases: occ.cases.len(),
        occurrence_violations: occ.occurrence_violations,
        in_degree_violations: occ.cap_violations,
        count_mismatches: occ.count_mismatches,
        sensitivity_cases: sens.cases.len(),
        sensitivity_violations: sens.violations,
        max_sensitivity_ratio: sens.max_tightness,
        passed: occ.passed() && sens.passed(),
    };
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    eprintln!(
        "{} occurrence bound: {} cases, {} violations",
        verdict(occ.occurrence_violations == 0 && occ.count_mismatches == 0),
        occ.cases.len(),
        occ.occurrence_violations
    );
    eprintln!(
        "{} in-degree cap: {} violations",
        verdict(occ.cap_violations == 0),
        occ.cap_violations
    );
    eprintln!(
        "{} sensitivity bound: {} pairs, {} violations, max ratio {:.4}",
        verdict(sens.passed()),
        sens.cases.len(),
        sens.violations,
        sens.max_tightness
    );
    Ok((write_json(out, "verify.json", &report)?, report.passed))
}

fn dispatch(cli: &Cli, out_explicit: bool) -> Result<(String, bool)> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out_dir.as_path();
    if !matches!(cli.command, Command::Train(_)) {
        ensure_dir(out)?;
    }
    let text = match &cli.command {
        Command::Generate(a) => run_generate(a, seed, out)?,
        Command::Sample(a) => run_sample(a, seed, out)?,
        Command::Account(a) => run_account(a, out)?,
        Command::DropAnalysis(a) => run_drop(a, out)?,
        Command::Train(a) => run_train(a, cli.seed, out, out_explicit)?,
        Command::Verify(a) => return run_verify(a, seed, out),
    };
    Ok((text, true))
}

fn thread_count() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

fn report_error(e: &Error) -> i32 {
    let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{body}");
    if e.is_config_error() {
        2
    } else {
        1
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let body = serde_json::json!({ "error": "usage", "message": e.to_string().trim_end() });
            eprintln!("{body}");
            return 2;
        }
    };
    let out_explicit = argv.iter().any(|a| a.to_str().is_some_and(|s| s == "--out-dir" || s.starts_with("--out-dir=")));
    let threads = match thread_count() {
        Ok(t) => t,
        Err(e) => return report_error(&e),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => return report_error(&Error::Config(format!("thread pool: {e}"))),
    };
    match pool.install(|| dispatch(&cli, out_explicit)) {
        Ok((text, passed)) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(text.as_bytes());
            if passed {
                0
            } else {
                1
            }
        }
        Err(e) => report_error(&e),
    }
}
