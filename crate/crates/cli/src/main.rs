use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vnd::config::ExperimentConfig;
use vnd::data::{checkerboard_ood, gaussian_blobs, idx_dataset, import_csv, read_idx, two_moons, DatasetHandle, Split};
use vnd::error::{Result, VndError};
use vnd::exec::{stream_rng, Parallelism};
use vnd::kl_approx::{fit_constants, mc_truth_grid, FitOptions};
use vnd::metrics::{echo_header, width_sweep, SweepData};
use vnd::model::{InputShape, Model, ModelSpec, Targets};
use vnd::trainer::{Checkpoint, Trainer, INIT_STREAM};

#[derive(Parser)]
#[command(name = "vnd", version, about = "Variational nested dropout experiments")]
struct Cli {
    /// Experiment config (INI).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a VNDD dataset file.
    GenData(GenData),
    /// Train a model; writes checkpoint.vndc and history.csv.
    Train {
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs have run (resumable later).
        #[arg(long)]
        until_epoch: Option<usize>,
    },
    /// Width sweep of a trained checkpoint.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Monte Carlo KL truth and refit of the approximation constants.
    FitKl {
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Output directory (defaults to the config's out_dir, else `.`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise sweep.json and history.csv from an output directory.
    Report {
        /// Directory to read (defaults to the config's out_dir).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Kind {
    TwoMoons,
    GaussianBlobs,
    CheckerboardOod,
    Csv,
    Idx,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Split tag for generated or imported examples.
    #[arg(long, default_value = "train")]
    split: String,
    /// Generator stream, so train and test draws can differ.
    #[arg(long, default_value_t = 0)]
    stream: u64,
    /// CSV file, or IDX images for `--kind idx`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// IDX labels for `--kind idx`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Keep only the first n examples.
    #[arg(long)]
    take: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &VndError) -> u8 {
    match e {
        VndError::Numerical(_) | VndError::InfiniteKl { .. } | VndError::FitFailed { .. } => 3,
        VndError::Io(_) => 1,
        _ => 2,
    }
}

fn setup_threads() -> Result<()> {
    let Ok(v) = std::env::var("VND_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| VndError::Config(format!("VND_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| VndError::Config(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| VndError::Config("this command needs --config".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| VndError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    ExperimentConfig::parse(&text, &overrides)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn input_shape(d: &DatasetHandle) -> InputShape {
    match d.shape[..] {
        [_, c, h, w] => InputShape::Image {
            channels: c,
            height: h,
            width: w,
        },
        _ => InputShape::Features { dim: d.row_len() },
    }
}

fn model_spec(cfg: &ExperimentConfig, data: &DatasetHandle) -> Result<ModelSpec> {
    cfg.model.spec(input_shape(data), data.classes, cfg.train.tau_start)
}

fn gen_data(cli: &Cli, args: &GenData) -> Result<()> {
    if cli.config.is_some() {
        if args.kind.is_some() {
            return Err(VndError::Config("use either --config or --kind, not both".into()));
        }
        let cfg = load_config(cli)?;
        let mut data = cfg.data.load(cfg.seed)?;
        data.provenance = format!("{}\n{}", data.provenance, cfg.render());
        return write(&args.out, data.encode()?);
    }
    let kind = args
        .kind
        .ok_or_else(|| VndError::Config("gen-data needs --kind or --config".into()))?;
    let seed = cli
        .seed
        .ok_or_else(|| VndError::Config("missing required key `seed` (pass --seed)".into()))?;
    let split = Split::parse(&args.split)?;
    let mut data = match kind {
        Kind::TwoMoons => two_moons(args.n, args.noise, seed, args.stream, split)?,
        Kind::GaussianBlobs => gaussian_blobs(args.n, args.classes, args.noise, seed, args.stream, split)?,
        Kind::CheckerboardOod => checkerboard_ood(args.n, args.noise, seed, args.stream)?,
        Kind::Csv => {
            let p = args
                .input
                .as_ref()
                .ok_or_else(|| VndError::Config("--kind csv needs --input".into()))?;
            let mut d = import_csv(&fs::read_to_string(p)?, &p.display().to_string())?;
            if let Some(t) = args.take {
                d = d.take(t);
            }
            d
        }
        Kind::Idx => {
            let p = args
                .input
                .as_ref()
                .ok_or_else(|| VndError::Config("--kind idx needs --input".into()))?;
            let l = args
                .labels
                .as_ref()
                .ok_or_else(|| VndError::Config("--kind idx needs --labels".into()))?;
            idx_dataset(
                &read_idx(p, args.take)?,
                &read_idx(l, args.take)?,
                split,
                &p.display().to_string(),
            )?
        }
    };
    let echo = format!(
        "seed = {seed}\nkind = {}\nn = {}\nnoise = {}\nclasses = {}\nsplit = {}\nstream = {}",
        kind.to_possible_value().expect("named").get_name(),
        args.n,
        args.noise,
        args.classes,
        args.split,
        args.stream
    );
    data.provenance = format!("{}\n{echo}", data.provenance);
    write(&args.out, data.encode()?)
}

fn train(cli: &Cli, resume: Option<&Path>, until_epoch: Option<usize>) -> Result<()> {
    let cfg = load_config(cli)?;
    let data = cfg.data.load(cfg.seed)?;
    let (x, y) = data.split(Split::Train);
    let spec = model_spec(&cfg, &data)?;
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            if t.model.spec != spec {
                return Err(VndError::Config("checkpoint model does not match the config".into()));
            }
            let mut t = t;
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => {
            let model = Model::new(spec, &mut stream_rng(cfg.seed, INIT_STREAM))?;
            Trainer::new(model, cfg.train.clone(), x.rows())?
        }
    };
    let echo = cfg.render();
    fs::create_dir_all(&cfg.out_dir)?;
    write(&cfg.out_dir.join("config.ini"), &echo)?;
    let stop = until_epoch.unwrap_or(usize::MAX).min(trainer.config.epochs);
    while trainer.epoch() < stop {
        let snapshot = trainer.checkpoint();
        match trainer.run_epoch(&x, &y) {
            Ok(row) => {
                if row.epoch % 10 == 0 || row.epoch == trainer.config.epochs {
                    eprintln!(
                        "epoch {:>4}  objective {:.4}  kl {:.2}  acc {:.4}  tau {:.4}",
                        row.epoch, row.objective, row.kl, row.acc, row.tau
                    );
                }
            }
            Err(e) => {
                write(&cfg.out_dir.join("last.vndc"), snapshot.encode())?;
                write(&cfg.out_dir.join("history.csv"), trainer.history_csv(&echo))?;
                return Err(e);
            }
        }
    }
    write(&cfg.out_dir.join("checkpoint.vndc"), trainer.checkpoint().encode())?;
    write(&cfg.out_dir.join("history.csv"), trainer.history_csv(&echo))
}

fn sweep(cli: &Cli, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let data = cfg.data.load(cfg.seed)?;
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let expected = model_spec(&cfg, &data)?;
    if trainer.model.spec != expected {
        return Err(VndError::Config(format!(
            "checkpoint `{}` was trained with a different model or data shape than the config describes",
            checkpoint.display()
        )));
    }
    let (x, _) = data.split(Split::Train);
    let (tx, ty) = data.split(Split::Test);
    let Targets::Classes(labels) = ty else {
        return Err(VndError::Config("sweep needs class labels".into()));
    };
    if labels.is_empty() {
        return Err(VndError::Config("dataset has no test split".into()));
    }
    let ood = (!data.indices(Split::Ood).is_empty()).then(|| data.split(Split::Ood).0);
    let sweep_data = SweepData {
        recollect: &x,
        test: &tx,
        test_labels: &labels,
        ood: ood.as_ref(),
    };
    let sweep_cfg = cfg.eval.sweep_config();
    let report = width_sweep(&trainer.model, &sweep_data, &sweep_cfg, Parallelism::Parallel)?;
    let echo = cfg.render();
    write(&cfg.out_dir.join("sweep.csv"), report.to_csv(&echo))?;
    write(&cfg.out_dir.join("sweep.json"), report.summary_json(&cfg.echo_json()))?;
    if cfg.eval.reliability {
        for &w in &sweep_cfg.widths {
            if let Some(csv) = report.reliability_csv(w, &echo) {
                write(&cfg.out_dir.join(format!("reliability_w{w}.csv")), csv)?;
            }
        }
    }
    for s in report.summary() {
        println!(
            "width {:.3}  acc {:.4}±{:.4}  ece {:.4}  aupr {:.4}  auroc {:.4}  nll {:.4}",
            s.width, s.mean.accuracy, s.std.accuracy, s.mean.ece, s.mean.aupr, s.mean.auroc, s.mean.nll
        );
    }
    Ok(())
}

fn fit_kl(cli: &Cli, grid: usize, samples: usize, out: Option<&Path>) -> Result<()> {
    let (seed, echo, dir) = if cli.config.is_some() {
        let cfg = load_config(cli)?;
        (cfg.seed, cfg.render(), cfg.out_dir.clone())
    } else {
        let seed = cli
            .seed
            .ok_or_else(|| VndError::Config("missing required key `seed` (pass --seed)".into()))?;
        (seed, format!("seed = {seed}"), PathBuf::from("."))
    };
    if grid < 16 || samples < 100_000 {
        return Err(VndError::Config(format!(
            "fit-kl needs --grid >= 16 and --samples >= 100000, got {grid} and {samples}"
        )));
    }
    let dir = out.map(Path::to_path_buf).unwrap_or(dir);
    let echo = format!("{echo}\ngrid = {grid}\nsamples = {samples}");
    let truth = mc_truth_grid(grid, samples, seed, Parallelism::Parallel)?;
    let (_, report) = fit_constants(
        &truth,
        &FitOptions {
            seed,
            ..FitOptions::default()
        },
    )?;
    write(
        &dir.join("fit_kl.csv"),
        format!("{}{}", echo_header(&echo), report.to_csv()),
    )?;
    let summary = serde_json::json!({ "report": report, "echo": echo });
    write(
        &dir.join("fit_kl.json"),
        serde_json::to_string_pretty(&summary).expect("serialisable"),
    )?;
    println!("{}", report.summary_line());
    Ok(())
}

fn report(cli: &Cli, dir: Option<&Path>) -> Result<()> {
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => load_config(cli)?.out_dir,
    };
    let mut out = String::new();
    let sweep_path = dir.join("sweep.json");
    let history_path = dir.join("history.csv");
    if !sweep_path.exists() && !history_path.exists() {
        return Err(VndError::Config(format!(
            "`{}` holds neither sweep.json nor history.csv",
            dir.display()
        )));
    }
    if sweep_path.exists() {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sweep_path)?)
            .map_err(|e| VndError::Format(format!("{}: {e}", sweep_path.display())))?;
        let echo = &v["echo"];
        if let Some(seed) = echo.get("").and_then(|top| top.get("seed")) {
            out.push_str(&format!("# seed = {}\n", seed.as_str().unwrap_or("?")));
        }
        out.push_str(&format!("# ood_score = {}\n", v["ood_score"].as_str().unwrap_or("?")));
        out.push_str("width  accuracy         ece              aupr             auroc            nll\n");
        for w in v["widths"].as_array().into_iter().flatten() {
            let cell = |k: &str| {
                format!(
                    "{:.4} ± {:.4}",
                    w["mean"][k].as_f64().unwrap_or(f64::NAN),
                    w["std"][k].as_f64().unwrap_or(f64::NAN)
                )
            };
            out.push_str(&format!(
                "{:<6.3} {:<16} {:<16} {:<16} {:<16} {}\n",
                w["width"].as_f64().unwrap_or(f64::NAN),
                cell("accuracy"),
                cell("ece"),
                cell("aupr"),
                cell("auroc"),
                cell("nll")
            ));
        }
    }
    if history_path.exists() {
        let text = fs::read_to_string(&history_path)?;
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        if let Some(last) = rows.iter().skip(1).last() {
            out.push_str(&format!(
                "\ntraining: {} epochs, last row ({})\n{last}\n",
                rows.len() - 1,
                rows[0]
            ));
        }
    }
    print!("{out}");
    write(&dir.join("report.txt"), out)
}

fn run(cli: &Cli) -> Result<()> {
    setup_threads()?;
    match &cli.command {
        Command::GenData(args) => gen_data(cli, args),
        Command::Train { resume, until_epoch } => train(cli, resume.as_deref(), *until_epoch),
        Command::Sweep { checkpoint } => sweep(cli, checkpoint),
        Command::FitKl { grid, samples, out } => fit_kl(cli, *grid, *samples, out.as_deref()),
        Command::Report { dir } => report(cli, dir.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
