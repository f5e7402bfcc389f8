//! `harmonize-lab`: toy data generation, training, evaluation, ablation,
//! single-image harmonization and the self-test suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric error (including failed self-test checks).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use harmonize_core::data::{self, Dataset, DatasetManifest, Split, ToyDataSpec};
use harmonize_core::metrics::{evaluate_dataset, write_jsonl, Blended, CompositeBaseline, EvalSummary, Harmonizer};
use harmonize_core::selftest::{self, SelfTestOptions};
use harmonize_core::training::{
    self, AblationCell, LoopOptions, TrainConfig, TrainState, FINAL_CHECKPOINT, FULL_K_GRID,
};
use harmonize_core::HarmonizeError;
use sha2::{Digest, Sha256};

/// Environment variable naming the default dataset root.
const DATA_ENV: &str = "HARMONIZE_LAB_DATA";
const DEFAULT_RUNS_DIR: &str = "runs";

#[derive(Parser, Debug)]
#[command(name = "harmonize-lab", version, about = "Image harmonization research toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural toy dataset in iHarmony4 layout.
    MakeToyData(MakeToyDataArgs),
    /// Train a model and write checkpoints under a new run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the composite baseline) on a dataset split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the ablation grid, printing the result tables.
    Ablate(AblateArgs),
    /// Harmonize one composite image with a trained checkpoint.
    Harmonize(HarmonizeArgs),
    /// Run the oracle and invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct MakeToyDataArgs {
    /// Training samples.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Held-out samples; defaults to n / 4 (at least 1).
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale of the foreground colour perturbation.
    #[arg(long, default_value_t = 1.0)]
    perturbation: f64,
    /// Output directory; defaults to $HARMONIZE_LAB_DATA.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Toy,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Base settings before the config file and overrides are applied.
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// JSON object of config keys applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` applied last; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root; defaults to $HARMONIZE_LAB_DATA.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parent of the per-run output directories.
    #[arg(long, default_value = DEFAULT_RUNS_DIR)]
    runs_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Continue from a checkpoint; its stored config replaces the preset.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    /// Identity model returning the input composite.
    Composite,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a reference model instead of a checkpoint.
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    baseline: Option<Baseline>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Evaluation resolutions; repeatable. Defaults to the model's training size.
    #[arg(long = "resolution")]
    resolutions: Vec<usize>,
    /// Keep the composite background in the model output.
    #[arg(long)]
    blend: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    /// Loss and fusion toggles, four rows.
    Flags,
    /// Number of sampled patches K.
    K,
    Both,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Grid::Flags)]
    grid: Grid,
    /// Seeds per cell; the table reports the median.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// K values for the K grid.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct HarmonizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    composite: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep the composite wherever the mask is zero.
    #[arg(long)]
    blend: bool,
    /// Also write a composite | mask | output strip here.
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Skip the full-size architecture check.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Debug hook: temperature used by the loss checks.
    #[arg(long, hide = true, allow_hyphen_values = true)]
    tau: Option<f64>,
}

/// An error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }

    fn runtime(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }
}

impl From<HarmonizeError> for Failure {
    fn from(e: HarmonizeError) -> Self {
        match e {
            HarmonizeError::Config(_) | HarmonizeError::Argument(_) | HarmonizeError::Manifest { .. } => {
                Self::usage(e.into())
            }
            _ => Self::runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        match error.downcast::<HarmonizeError>() {
            Ok(e) => e.into(),
            Err(error) => Self::runtime(error),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::MakeToyData(a) => make_toy_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Harmonize(a) => harmonize(a),
        Command::Selftest(a) => run_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn data_root(flag: Option<PathBuf>) -> CliResult<PathBuf> {
    flag.or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| Failure::usage(anyhow!("no dataset root: pass --data or set {DATA_ENV}")))
}

fn build_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match args.preset {
        Preset::Full => TrainConfig::full(),
        Preset::Toy => TrainConfig::toy(),
    };
    if let Some(path) = &args.config {
        cfg.merge_file(path)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// `runs/<UTC timestamp>-<first 8 hex digits of the config hash>`, created.
fn create_run_dir(parent: &Path, cfg: &TrainConfig) -> CliResult<PathBuf> {
    let json = serde_json::to_string(cfg).map_err(|e| Failure::runtime(e.into()))?;
    let digest = Sha256::digest(json.as_bytes());
    let hash: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let dir = parent.join(format!("{stamp}-{hash}"));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::runtime)?;
    let pretty = serde_json::to_string_pretty(cfg).map_err(|e| Failure::runtime(e.into()))?;
    fs::write(dir.join("config.json"), pretty).map_err(|e| Failure::runtime(e.into()))?;
    Ok(dir)
}

fn load_split(root: &Path, split: Split) -> CliResult<DatasetManifest> {
    let manifest = DatasetManifest::load(root, split)?;
    manifest.verify()?;
    if manifest.is_empty() {
        return Err(Failure::usage(anyhow!(
            "no {} entries under {}",
            split.as_str(),
            root.display()
        )));
    }
    Ok(manifest)
}

fn make_toy_data(a: MakeToyDataArgs) -> CliResult<()> {
    let out = data_root(a.out)?;
    let spec = ToyDataSpec {
        n_train: a.n,
        n_test: a.n_test.unwrap_or((a.n / 4).max(1)),
        image_size: a.size,
        seed: a.seed,
        perturbation: a.perturbation,
    };
    let summary = data::generate_toy_dataset(&spec, &out)?;
    println!("{} samples", summary.train.len());
    println!("{} held-out samples", summary.test.len());
    println!("composite PSNR on held-out split: {:.3} dB", summary.test_composite_psnr);
    println!("manifest: {}", DatasetManifest::cache_path(&out, Split::Train).display());
    Ok(())
}

fn metric_table(rows: &[(&str, &EvalSummary)]) -> String {
    let mut s = format!(
        "{:<12} {:>6} | {:>8} {:>7} {:>8} {:>7} {:>7}\n",
        "Model", "Res", "MSE", "PSNR", "fMSE", "SSIM", "fSSIM"
    );
    for (name, summary) in rows {
        match &summary.aggregate {
            Some(m) => {
                let _ = writeln!(
                    s,
                    "{:<12} {:>6} | {:>8.2} {:>7.2} {:>8.2} {:>7.2} {:>7.2}",
                    name,
                    summary.resolution,
                    m.mse,
                    m.psnr,
                    m.fmse.unwrap_or(f64::NAN),
                    m.ssim,
                    m.fssim.unwrap_or(f64::NAN)
                );
            }
            None => {
                let _ = writeln!(s, "{:<12} {:>6} | all items failed", name, summary.resolution);
            }
        }
    }
    s
}

fn train(a: TrainArgs) -> CliResult<()> {
    let state = match &a.resume {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::usage(anyhow!("checkpoint {} not found", path.display())));
            }
            let mut state = training::load_checkpoint(path)?;
            state.config.apply_overrides(&a.config.overrides)?;
            state.config.validate()?;
            state
        }
        None => TrainState::new(build_config(&a.config)?)?,
    };
    let root = data_root(a.data.data)?;
    let train_manifest = load_split(&root, Split::Train)?;
    let eval = match DatasetManifest::load(&root, Split::Test) {
        Ok(m) if !m.is_empty() => data::load_eval_items(&m),
        _ => Vec::new(),
    };
    let run_dir = create_run_dir(&a.data.runs_dir, &state.config)?;
    println!("run directory: {}", run_dir.display());
    let mut dataset = Dataset::new(train_manifest);
    let total = state.config.total_steps(dataset.len());
    let t0 = Instant::now();
    let mut progress = |o: &training::StepOutput| {
        let done = o.step as usize + 1;
        if done.is_multiple_of(25) || done == total {
            log::info!(
                "step {done}/{total} loss {:.5} (l1 {:.5}) {:.1}s",
                o.report.total,
                o.report.l1,
                t0.elapsed().as_secs_f64()
            );
        }
    };
    let opts = LoopOptions {
        run_dir: Some(run_dir.clone()),
        on_step: Some(&mut progress),
        ..LoopOptions::default()
    };
    let outcome = training::train_loop(state, &mut dataset, &eval, opts)?;
    if let Some(summary) = &outcome.final_eval {
        let base = evaluate_dataset(&CompositeBaseline, &eval, summary.resolution)?;
        write_jsonl(summary, &run_dir.join("eval_final.jsonl"))?;
        print!("{}", metric_table(&[("composite", &base), ("model", summary)]));
    }
    let ckpt = outcome.checkpoint.unwrap_or_else(|| run_dir.join(FINAL_CHECKPOINT));
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let state = match &a.checkpoint {
        Some(path) if !path.exists() => {
            return Err(Failure::usage(anyhow!("checkpoint {} not found", path.display())));
        }
        Some(path) => Some(training::load_checkpoint(path)?),
        None => None,
    };
    let root = data_root(a.data.data)?;
    let manifest = load_split(&root, a.split.into())?;
    let items = data::load_eval_items(&manifest);
    let resolutions = if a.resolutions.is_empty() {
        vec![state.as_ref().map_or(items_size(&items), |s| s.config.image_size)]
    } else {
        a.resolutions.clone()
    };
    let cfg = state.as_ref().map_or_else(TrainConfig::full, |s| s.config.clone());
    let run_dir = create_run_dir(&a.data.runs_dir, &cfg)?;
    println!("run directory: {}", run_dir.display());
    let mut rows = Vec::new();
    for &res in &resolutions {
        let base = evaluate_dataset(&CompositeBaseline, &items, res)?;
        write_jsonl(&base, &run_dir.join(format!("eval_composite_{res}.jsonl")))?;
        let model = match &state {
            Some(s) => {
                let blended;
                let h: &dyn Harmonizer = if a.blend {
                    blended = Blended(&s.network);
                    &blended
                } else {
                    &s.network
                };
                let summary = evaluate_dataset(h, &items, res)?;
                write_jsonl(&summary, &run_dir.join(format!("eval_model_{res}.jsonl")))?;
                Some(summary)
            }
            None => None,
        };
        rows.push((base, model));
    }
    let mut table: Vec<(&str, &EvalSummary)> = Vec::new();
    for (base, model) in &rows {
        table.push(("composite", base));
        if let Some(m) = model {
            table.push(("model", m));
        }
    }
    print!("{}", metric_table(&table));
    println!("report: {}", run_dir.display());
    Ok(())
}

/// Side of the first decodable evaluation image.
fn items_size(items: &[harmonize_core::Result<harmonize_core::metrics::EvalItem>]) -> usize {
    items
        .iter()
        .flatten()
        .next()
        .and_then(|i| i.composite.dims3().ok())
        .map_or(256, |(_, h, _)| h)
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    if a.seeds.is_empty() {
        return Err(Failure::usage(anyhow!("--seeds needs at least one seed")));
    }
    let base = build_config(&a.config)?;
    let root = data_root(a.data.data)?;
    let mut dataset = Dataset::new(load_split(&root, Split::Train)?);
    let eval = data::load_eval_items(&load_split(&root, Split::Test)?);
    let run_dir = create_run_dir(&a.data.runs_dir, &base)?;
    println!("run directory: {}", run_dir.display());
    let mut report = serde_json::Map::new();
    if matches!(a.grid, Grid::Flags | Grid::Both) {
        let rows = training::run_ablation_grid(
            &base,
            &AblationCell::flag_rows(),
            &a.seeds,
            &mut dataset,
            &eval,
            Some(&run_dir),
        );
        print!("{}", training::format_flag_table(&rows));
        report.insert("flags".into(), serde_json::to_value(&rows).map_err(|e| Failure::runtime(e.into()))?);
    }
    if matches!(a.grid, Grid::K | Grid::Both) {
        let ks = a.ks.clone().unwrap_or_else(|| FULL_K_GRID.to_vec());
        let rows = training::run_ablation_grid(
            &base,
            &AblationCell::k_rows(&ks),
            &a.seeds,
            &mut dataset,
            &eval,
            Some(&run_dir),
        );
        print!("{}", training::format_k_table(&rows));
        report.insert("k".into(), serde_json::to_value(&rows).map_err(|e| Failure::runtime(e.into()))?);
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::runtime(e.into()))?;
    fs::write(run_dir.join("ablation.json"), text).map_err(|e| Failure::runtime(e.into()))?;
    Ok(())
}

fn harmonize(a: HarmonizeArgs) -> CliResult<()> {
    if !a.checkpoint.exists() {
        return Err(Failure::usage(anyhow!("checkpoint {} not found", a.checkpoint.display())));
    }
    let state = training::load_checkpoint(&a.checkpoint)?;
    let composite = data::load_rgb(&a.composite)?;
    let mask = data::load_mask(&a.mask)?;
    let out = data::harmonize_image(&state.network, &composite, &mask, a.blend)?;
    data::save_image(&data::rgb_to_u8(&out), &a.out)?;
    println!("wrote {} ({}x{})", a.out.display(), out.width(), out.height());
    if let Some(grid) = &a.grid {
        data::save_image(&data::side_by_side(&composite, &mask, &out), grid)?;
        println!("wrote {}", grid.display());
    }
    Ok(())
}

fn run_selftest(a: SelftestArgs) -> CliResult<()> {
    let mut opts = SelfTestOptions {
        seed: a.seed,
        full_scale: !a.quick,
        ..SelfTestOptions::default()
    };
    if let Some(tau) = a.tau {
        opts.tau = tau;
    }
    let results = selftest::run_selftest(&opts);
    print!("{}", selftest::format_results(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::runtime(anyhow!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
