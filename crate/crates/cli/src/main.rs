//! `dam` command-line tool.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dam::basis::ForecastFunction;
use dam::data::{Dataset, DatasetManifest};
use dam::eval::{self, DamForecaster, Forecaster};
use dam::model::{AttentionKind, DamModel, ModelInput, Skip};
use dam::par::{self, Exec};
use dam::train::{self, Corpus, SplitRole};
use dam::{svg, DamError};
use thiserror::Error;

use config::RunConfig;

/// Environment variable that caps the worker thread count.
pub const THREADS_ENV: &str = "DAM_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Dam(#[from] DamError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Dam(e) if !e.is_user_error() => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        if self.exit_code() == 2 {
            "internal"
        } else {
            "user"
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dam", version, about = "Universal time-series forecaster with horizon-free basis outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset manifest (TOML); repeat for several datasets.
    #[arg(long, global = true)]
    dataset: Vec<PathBuf>,
    /// Checkpoint directory to load.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Number of context points drawn per window.
    #[arg(long, global = true)]
    context_size: Option<usize>,
    /// Width of the history sampling distribution, in steps.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Absolute token-merge target (default keeps the trained ratio).
    #[arg(long, global = true)]
    tome: Option<usize>,
    /// Evaluation horizons in steps, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// Forecast query times in days relative to the step after the last observation, comma-separated; may be negative.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    at: Option<Vec<f64>>,
    /// Root seed; evaluation seeds become seed, seed+1, ...
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Components to skip, comma-separated (self_attn, cross_attn, ff_tv, ff_b, ff_b_cross, tome).
    #[arg(long, global = true, value_delimiter = ',')]
    ablate: Option<Vec<String>>,
    /// Imputation mask rates in percent, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train a model (fine-tunes when --checkpoint is given).
    Train,
    /// Forecast every channel of a dataset from its last observation.
    Forecast,
    /// Basis-only imputation benchmark over column masks.
    Impute,
    /// Grid search of context size and sigma on the validation split.
    Tune,
    /// Forecast metrics on the test split.
    Eval,
    /// Metrics with individual components skipped.
    Ablate,
    /// Inference cost against context size.
    Sweep,
    /// Export attention weights and coefficients per period.
    Inspect,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Forecast => "forecast",
            Command::Impute => "impute",
            Command::Tune => "tune",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::Inspect => "inspect",
        }
    }
}

struct Run {
    cfg: RunConfig,
    at: Option<Vec<f64>>,
    skip: Vec<String>,
    out: PathBuf,
    exec: Exec,
}

fn resolve(cli: &Cli) -> CliResult<Run> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_preset(config::Preset::Default),
    };
    if !cli.dataset.is_empty() {
        cfg.datasets = cli.dataset.clone();
    }
    if cli.checkpoint.is_some() {
        cfg.checkpoint = cli.checkpoint.clone();
    }
    if let Some(c) = cli.context_size {
        cfg.eval.context_size = c;
    }
    if let Some(s) = cli.sigma {
        cfg.eval.sigma = s;
    }
    if cli.tome.is_some() {
        cfg.eval.tome_target = cli.tome;
    }
    if let Some(h) = &cli.horizons {
        cfg.eval.horizons = h.clone();
    }
    if let Some(r) = &cli.rates {
        cfg.impute.rates = r.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        let n = cfg.eval.seeds.len().max(1) as u64;
        cfg.eval.seeds = (0..n).map(|k| seed.wrapping_add(k)).collect();
    }
    cfg.train.seed = cfg.seed;
    cfg.impute.seed = cfg.seed;
    cfg.sweep.seed = cfg.seed;
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    cfg.validate().map_err(CliError::Usage)?;
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    Ok(Run {
        cfg,
        at: cli.at.clone(),
        skip: cli.ablate.clone().unwrap_or_default(),
        out,
        exec: Exec::Parallel,
    })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

impl Run {
    fn datasets(&self) -> CliResult<Vec<Dataset>> {
        if self.cfg.datasets.is_empty() {
            return Err(CliError::Usage("no dataset given (--dataset or `datasets` in the config)".into()));
        }
        self.cfg
            .datasets
            .iter()
            .map(|p| Ok(DatasetManifest::from_path(p)?.load()?))
            .collect()
    }

    fn model(&self) -> CliResult<DamModel<f32>> {
        let dir = self
            .cfg
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --checkpoint".into()))?;
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", dir.display())));
        }
        Ok(DamModel::load(dir)?)
    }

    fn forecaster<'a>(&self, model: &'a DamModel<f32>) -> CliResult<DamForecaster<'a, f32>> {
        Ok(DamForecaster {
            skip: Skip::from_names(&self.skip)?,
            tome_target: self.cfg.eval.tome_target,
            ..DamForecaster::new(model, self.cfg.eval.context_size, self.cfg.eval.sigma)
        })
    }

    fn prepare(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Usage(format!("{}: {e}", self.out.display())))?;
        let _ = fs::remove_file(self.out.join(FAILED_MARKER));
        write(&self.out.join("config.toml"), &self.cfg.to_toml())
    }
}

const FAILED_MARKER: &str = "FAILED";

fn cmd_train(run: &Run) -> CliResult<String> {
    let datasets = run.datasets()?;
    let cfg = &run.cfg.train;
    let corpus = Corpus::from_datasets(&datasets, SplitRole::Train, cfg.utility_normalization);
    let valid = Corpus::from_datasets(&datasets, SplitRole::Valid, cfg.utility_normalization);
    let model = match &run.cfg.checkpoint {
        Some(_) => run.model()?,
        None => DamModel::new(run.cfg.model.clone(), run.cfg.seed)?,
    };
    let valid = (!valid.is_empty() && cfg.validation_every > 0).then_some(&valid);
    let outcome = train::train(model, &corpus, valid, cfg, Some(&run.out), run.exec)?;
    let last = outcome.history.last();
    Ok(format!(
        "trained {} iterations, final loss {:.6}, checkpoint {}",
        outcome.history.len(),
        last.map_or(f64::NAN, |m| m.loss),
        run.out.join("final").display()
    ))
}

fn cmd_forecast(run: &Run) -> CliResult<String> {
    let model = run.model()?;
    let datasets = run.datasets()?;
    let f = run.forecaster(&model)?;
    let mut csv = String::from("dataset,channel,time_days,value\n");
    let mut count = 0;
    for d in &datasets {
        for s in &d.series {
            let times = match &run.at {
                Some(at) => at.clone(),
                None => {
                    let h = run.cfg.eval.horizons.iter().copied().max().unwrap_or(0);
                    (0..h).map(|k| k as f64 * s.resolution).collect()
                }
            };
            let ext = s.extended(1);
            let preds = f.predict(&ext, s.len(), &times, run.cfg.seed)?;
            for (t, v) in times.iter().zip(preds) {
                let _ = writeln!(csv, "{},{},{t},{v}", d.name, s.name);
                count += 1;
            }
        }
    }
    write(&run.out.join("forecast.csv"), &csv)?;
    Ok(format!("{count} forecast values written to {}", run.out.join("forecast.csv").display()))
}

fn cmd_impute(run: &Run) -> CliResult<String> {
    let mut lines = Vec::new();
    for d in run.datasets()? {
        let report = eval::evaluate_imputation(&d.series, &run.cfg.impute, run.exec)?;
        for r in &report.skipped {
            eprintln!("notice: rate {r}% masks no cells in {}; skipped", d.name);
        }
        let path = run.out.join(format!("imputation-{}.csv", d.name));
        write(&path, &report.to_csv())?;
        lines.push(format!("{}: {}", d.name, path.display()));
    }
    Ok(lines.join("\n"))
}

fn cmd_tune(run: &Run) -> CliResult<String> {
    let model = run.model()?;
    let skip = Skip::from_names(&run.skip)?;
    let mut lines = Vec::new();
    for d in run.datasets()? {
        let make = |c: usize, s: f64| -> Box<dyn Forecaster + '_> {
            Box::new(DamForecaster {
                skip,
                ..DamForecaster::new(&model, c, s)
            })
        };
        let t = eval::tune_hsr(make, &d, &run.cfg.tune.contexts, &run.cfg.tune.sigmas, &run.cfg.eval, run.exec)?;
        write(&run.out.join(format!("hsr-grid-{}.csv", d.name)), &t.to_csv())?;
        write(
            &run.out.join(format!("hsr-grid-{}.svg", d.name)),
            &t.to_svg(&format!("{} validation MSE (rows: context, cols: sigma)", d.name)),
        )?;
        lines.push(format!("{}: best context {} sigma {}", d.name, t.best.0, t.best.1));
    }
    Ok(lines.join("\n"))
}

fn cmd_eval(run: &Run) -> CliResult<String> {
    let model = run.model()?;
    let f = run.forecaster(&model)?;
    let mut csv = String::new();
    for d in run.datasets()? {
        let report = eval::evaluate_forecast(&f, &d, &run.cfg.eval, run.exec)?;
        let text = report.to_csv();
        if csv.is_empty() {
            csv.push_str(&text);
        } else {
            csv.extend(text.lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    write(&run.out.join("metrics.csv"), &csv)?;
    Ok(csv)
}

fn cmd_ablate(run: &Run) -> CliResult<String> {
    let model = run.model()?;
    let names: Vec<&str> = if run.skip.is_empty() {
        Skip::COMPONENTS.to_vec()
    } else {
        run.skip.iter().map(String::as_str).collect()
    };
    let mut out = String::new();
    for d in run.datasets()? {
        let report = eval::ablate(&model, &names, &d, &run.cfg.eval, run.exec)?;
        let path = run.out.join(format!("ablation-{}.csv", d.name));
        write(&path, &report.to_csv())?;
        let _ = writeln!(out, "{}:\n{}", d.name, report.to_csv().trim_end());
    }
    Ok(out)
}

fn cmd_sweep(run: &Run) -> CliResult<String> {
    let model = run.model()?;
    let datasets = run.datasets()?;
    let d = &datasets[0];
    let s = d
        .series
        .get(run.cfg.channel)
        .ok_or_else(|| CliError::Usage(format!("dataset {} has no channel {}", d.name, run.cfg.channel)))?;
    let rows = eval::cost_sweep(&model, s, &run.cfg.sweep)?;
    let csv = eval::cost_csv(&rows);
    write(&run.out.join("cost.csv"), &csv)?;
    let time: Vec<(f64, f64)> = rows.iter().map(|r| (r.context_size as f64, r.median_seconds)).collect();
    let mse: Vec<(f64, f64)> = rows.iter().map(|r| (r.context_size as f64, r.mse)).collect();
    write(&run.out.join("cost-time.svg"), &svg::line_plot("median seconds vs context size", &[("time", time)]))?;
    write(&run.out.join("cost-mse.svg"), &svg::line_plot("MSE vs context size", &[("mse", mse)]))?;
    Ok(csv)
}

fn cmd_inspect(run: &Run) -> CliResult<String> {
    let model = run.model()?;
    let datasets = run.datasets()?;
    let f = run.forecaster(&model)?;
    let mut attn = String::from("dataset,channel,layer,kind,head,offset_steps,value\n");
    let mut coeffs = String::from("dataset,channel,period_days,theta0_cos,theta0_sin,theta_cos,theta_sin,magnitude\n");
    let periods: Vec<f64> = model.spec.frequencies.iter().map(|f| 1.0 / f).collect();
    let mut plots = Vec::new();
    for d in &datasets {
        for s in &d.series {
            let ext = s.extended(1);
            let now = s.len();
            let theta0 = eval::Theta0Forecaster {
                context_size: f.context_size,
                sigma: f.sigma,
                lambda: model.config.lambda,
            };
            let (f0, draw): (ForecastFunction, _) = theta0.function(&ext, now, run.cfg.seed)?;
            let input = ModelInput::from_draw(&draw, &model.spec, model.config.lambda)?;
            let record = model.export_attention(&input)?;
            let offsets = &draw.indices;
            for (li, layer) in record.layers.iter().enumerate() {
                for (kind, label) in [
                    (AttentionKind::SelfAttention, "self"),
                    (AttentionKind::CrossAttention, "cross"),
                ] {
                    for (h, row) in layer.cumulative_by_original(kind, offsets.len()).iter().enumerate() {
                        for (o, v) in offsets.iter().zip(row) {
                            let _ = writeln!(attn, "{},{},{li},{label},{h},{o},{v}", d.name, s.name);
                        }
                    }
                }
            }
            let out = model.forward(&input, &dam::model::ForwardOptions::inference())?;
            let mut mags = Vec::with_capacity(periods.len());
            for (k, p) in periods.iter().enumerate() {
                let (c, sn) = (out.theta.cos[k], out.theta.sin[k]);
                let m = c.hypot(sn);
                mags.push((p.log10(), m));
                let _ = writeln!(
                    coeffs,
                    "{},{},{p},{},{},{c},{sn},{m}",
                    d.name, s.name, f0.theta.cos[k], f0.theta.sin[k]
                );
            }
            plots.push((format!("{}/{}", d.name, s.name), mags));
        }
    }
    write(&run.out.join("attention.csv"), &attn)?;
    write(&run.out.join("coefficients.csv"), &coeffs)?;
    let series: Vec<(&str, Vec<(f64, f64)>)> = plots.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
    write(
        &run.out.join("coefficients.svg"),
        &svg::line_plot("coefficient magnitude vs log10 period (days)", &series),
    )?;
    Ok(format!("attention and coefficients written to {}", run.out.display()))
}

fn execute(cli: &Cli) -> CliResult<String> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        par::set_threads(n);
    }
    let run = resolve(cli)?;
    run.prepare()?;
    let result = match cli.command {
        Command::Train => cmd_train(&run),
        Command::Forecast => cmd_forecast(&run),
        Command::Impute => cmd_impute(&run),
        Command::Tune => cmd_tune(&run),
        Command::Eval => cmd_eval(&run),
        Command::Ablate => cmd_ablate(&run),
        Command::Sweep => cmd_sweep(&run),
        Command::Inspect => cmd_inspect(&run),
    };
    if let Err(e) = &result {
        let _ = fs::write(run.out.join(FAILED_MARKER), format!("{}\n", one_line(&e.to_string())));
    }
    result
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[user]: {}", first_line(&e.render().to_string()));
            return ExitCode::from(1);
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code())
        }
    }
}

fn first_line(s: &str) -> String {
    one_line(s.lines().next().unwrap_or("").trim_start_matches("error: "))
}
