use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use t2seg::config::RunConfig;
use t2seg::data::{load_image, resize_image, MaskImage};
use t2seg::gradcheck_suite::{self, THRESHOLD};
use t2seg::model::{Scale, SegModel, Variant};
use t2seg::par::Exec;
use t2seg::report::{CostReport, EvalReport, StatsReport};
use t2seg::train::{self, ablation_run, evaluate, load_model, write_ablation_csv, TrainOptions};
use t2seg::{Error, Result};

#[derive(Parser)]
#[command(name = "t2seg", version, about = "Transformer segmentation of transparent objects at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run per-image work on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes train.log, checkpoints/ and config.toml.
    Train(Common),
    /// Score a checkpoint on a split; writes eval_<split>.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Write a color-coded mask for one image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train and score a variant/scale/seed grid; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = ["full".to_string(), "no_dec".into(), "no_enc_dec".into()])]
        variants: Vec<String>,
        /// Defaults to the configured scale.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Per-category corpus statistics; writes stats_<split>.csv.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Finite-difference gradient checks of every op and composite layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter and MAC counts per module; writes flops.csv.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.scale`.
        #[arg(long)]
        scale: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Csv(_) | Error::Undefined(_) => 3,
        Error::Dimension(_) => 3,
        Error::NonFinite { .. } | Error::TapeReplayed => 4,
    }
}

impl Common {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    /// Loads the config (or the synthetic default) with flag overrides.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::parse("[data]\nsynth = true\n")?,
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    create_dir(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let (train_set, val_set) = cfg.datasets()?;
    let mut model = SegModel::new(cfg.model_config()?, cfg.train.seed)?;
    let log_path = cfg.out_dir.join("train.log");
    let mut log = create_file(&log_path)?;
    let mut tee = Tee { file: &mut log };
    let opts = TrainOptions {
        exec: common.exec(),
        checkpoint_dir: Some(cfg.out_dir.join("checkpoints")),
        log: Some(&mut tee),
    };
    train::train(&mut model, &train_set, &val_set, &cfg.train, opts)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

/// Writes log lines to a file and echoes them to stdout.
struct Tee<'a, W: Write> {
    file: &'a mut W,
}

impl<W: Write> Write for Tee<'_, W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

fn cmd_eval(common: &Common, checkpoint: &Path, split: &str) -> Result<()> {
    let cfg = common.resolve()?;
    let model = load_model(cfg.model_config()?, checkpoint)?;
    let samples = cfg.split(split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split `{split}` is empty")));
    }
    let cm = evaluate(&model, &samples, common.exec())?;
    let report = EvalReport::from_confusion(&cm, &cfg.class_names())?;
    print!("{}", report.table());
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("eval_{split}.csv"));
    report.write_csv(create_file(&path)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_infer(common: &Common, checkpoint: &Path, image: &Path, output: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let model = load_model(cfg.model_config()?, checkpoint)?;
    let img = load_image(image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let side = model.config.input_size;
    let mask = model.predict(&resize_image(&img, side, side))?;
    let mask: MaskImage = mask.resize_nearest(w, h);
    mask.save_color(output)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn parse_list<T>(items: &[String], parse: fn(&str) -> Option<T>, what: &str) -> Result<Vec<T>> {
    items.iter().map(|s| parse(s).ok_or_else(|| Error::Config(format!("unknown {what} `{s}`")))).collect()
}

fn cmd_ablate(common: &Common, variants: &[String], scales: &[String], seeds: &[u64]) -> Result<()> {
    let cfg = common.resolve()?;
    let variants = parse_list(variants, Variant::parse, "variant")?;
    let scales = if scales.is_empty() { vec![cfg.train.scale] } else { parse_list(scales, Scale::parse, "scale")? };
    let grid: Vec<(Variant, Scale, u64)> = scales
        .iter()
        .flat_map(|&sc| variants.iter().flat_map(move |&v| seeds.iter().map(move |&s| (v, sc, s))))
        .collect();
    let (train_set, val_set) = cfg.datasets()?;
    let rows = ablation_run(&grid, &train_set, &val_set, cfg.num_classes(), &cfg.train, common.exec())?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("ablation.csv");
    write_ablation_csv(&rows, create_file(&path)?)?;
    write_ablation_csv(&rows, std::io::stdout())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_stats(common: &Common, split: &str) -> Result<()> {
    let cfg = common.resolve()?;
    let masks: Vec<MaskImage> = cfg.split(split)?.into_iter().map(|s| s.mask).collect();
    let report = StatsReport::compute(&masks, &cfg.class_names())?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("stats_{split}.csv"));
    report.write_csv(create_file(&path)?)?;
    report.write_csv(std::io::stdout())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let results = gradcheck_suite::run_all(seed)?;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:.3e}  {verdict}", r.name, r.max_rel_error);
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} above {THRESHOLD:e}", results.len());
    Ok(failed == 0)
}

fn cmd_flops(common: &Common, scale: Option<&str>) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(s) = scale {
        cfg.train.scale = Scale::parse(s).ok_or_else(|| Error::Config(format!("unknown scale `{s}`")))?;
    }
    let model = SegModel::<f32>::new(cfg.model_config()?, cfg.train.seed)?;
    let report = CostReport::compute(&model)?;
    println!("{:<10} {:>12} {:>14}", "module", "params", "MACs");
    for (name, p, m) in &report.modules {
        println!("{name:<10} {p:>12} {m:>14}");
    }
    println!("{:<10} {:>12} {:>14}", "total", report.total_params(), report.total_macs());
    println!("1 MAC = one multiply-accumulate (about 2 FLOPs)");
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("flops.csv");
    report.write_csv(create_file(&path)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(c) => cmd_train(c)?,
        Command::Eval { common, checkpoint, split } => cmd_eval(common, checkpoint, split)?,
        Command::Infer { common, checkpoint, image, output } => cmd_infer(common, checkpoint, image, output)?,
        Command::Ablate { common, variants, scales, seeds } => cmd_ablate(common, variants, scales, seeds)?,
        Command::Stats { common, split } => cmd_stats(common, split)?,
        Command::Gradcheck { seed } => return cmd_gradcheck(*seed),
        Command::Flops { common, scale } => cmd_flops(common, scale.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
