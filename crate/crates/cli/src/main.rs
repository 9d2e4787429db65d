use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acan::attention::CamOptions;
use acan::checks;
use acan::discretization::DepthDiscretization;
use acan::metrics::dump_probability_curves;
use acan::model::{Checkpoint, Head};
use acan::report;
use acan::scenes::{generate_dataset, write_depth_visual, write_ppm, Split};
use acan::trainer::{
    centre_cell, evaluate_checkpoint, infer_image, load_dataset, train, DatasetSource,
    ExperimentConfig, InferRequest, InferenceKind, LossKind, TrainOptions,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "acan",
    version,
    about = "Attention-based context aggregation depth estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialise a synthetic dataset (PPM/PGM files plus manifest.json).
    Gen {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints and CSV logs.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Output cells of the first image whose probability curves are dumped.
        #[arg(long, value_delimiter = ',')]
        curves: Vec<usize>,
        /// Write depth previews for the first N images.
        #[arg(long, default_value_t = 0)]
        visualize: usize,
    },
    /// Predict depth and attention maps for one PPM image.
    Infer {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output cells whose attention rows are written (default: centre cell).
        #[arg(long, value_delimiter = ',')]
        query: Vec<usize>,
    },
    /// Run finite-difference gradient checks: an op name, `all`, or `list`.
    Gradcheck {
        #[arg(default_value = "all")]
        scope: String,
    },
    /// Aggregate metric CSVs from `eval` into a Markdown table.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved experiment config as JSON.
    Config {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Print the parameter count of the configured network.
    Params {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    inference: Option<InferenceKind>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    no_attention_loss: bool,
    #[arg(long)]
    no_image_pooling: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(loss) = self.loss {
            cfg.loss = loss;
        }
        if let Some(inference) = self.inference {
            cfg.inference = inference;
        }
        if self.no_attention_loss {
            cfg.attention_loss = false;
        }
        if self.no_image_pooling {
            cfg.image_pooling = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn method_names(head: Head) -> (&'static str, &'static str) {
    match head {
        Head::Ordinal => ("OR(hard)", "OR(soft)"),
        Head::CrossEntropy => ("CE(hard)", "CE(soft)"),
    }
}

fn gen(exp: &ExperimentArgs, out: &Path) -> Result<()> {
    let cfg = exp.resolve()?;
    let DatasetSource::Synthetic(s) = &cfg.dataset else {
        bail!("gen needs a synthetic dataset section in the config");
    };
    let seed = exp.seed.unwrap_or(s.seed);
    let manifest = generate_dataset(
        out,
        &s.generator,
        cfg.discretization,
        [s.train, s.val, s.test],
        seed,
    )?;
    println!(
        "wrote {} scenes to {}",
        manifest.samples.len(),
        out.join("manifest.json").display()
    );
    Ok(())
}

fn run_train(exp: &ExperimentArgs, out: &Path, epochs: Option<usize>, quiet: bool) -> Result<()> {
    let mut cfg = exp.resolve()?;
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.validate()?;
    }
    let net = cfg.network();
    println!("parameters: {}", net.parameter_count());
    let data = load_dataset(&cfg)?;
    create_dir(out)?;
    let outcome = train(
        &cfg,
        &data,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
            verbose: !quiet,
            skip_validation: false,
        },
    )?;
    println!(
        "{} steps, final loss {:.4}, best epoch {}; checkpoints in {}",
        outcome.losses.len(),
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

fn run_eval(
    exp: &ExperimentArgs,
    checkpoint: &Path,
    out: &Path,
    split: Split,
    curves: &[usize],
    visualize: usize,
) -> Result<()> {
    let cfg = exp.resolve()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = load_dataset(&cfg)?;
    let samples = data.split(split);
    let options = CamOptions {
        image_pooling: cfg.image_pooling,
    };
    let (predictions, summary) =
        evaluate_checkpoint(&ckpt, Some(&cfg.network()), samples, options)?;
    create_dir(out)?;

    let (hard_name, soft_name) = method_names(ckpt.config.head);
    let rows = vec![
        (hard_name.to_string(), summary.hard),
        (soft_name.to_string(), summary.soft),
    ];
    write(&out.join("metrics.csv"), report::to_csv(&rows))?;
    write(
        &out.join("report.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    write(&out.join("confusion.csv"), summary.confusion.to_csv())?;
    if !curves.is_empty() {
        let lines = dump_probability_curves(&predictions[0].curves, curves)?;
        write(&out.join("curves.csv"), lines.join("\n") + "\n")?;
    }
    let disc = DepthDiscretization::from_params(ckpt.discretization)?;
    for (i, (p, s)) in predictions.iter().zip(samples).take(visualize).enumerate() {
        let depth = p.upsampled(cfg.inference.is_soft(), s.height, s.width);
        write_depth_visual(
            &out.join(format!("{i:05}_pred.pgm")),
            s.width,
            s.height,
            &depth,
            disc.d_min(),
            disc.d_max(),
        )?;
        write_ppm(
            &out.join(format!("{i:05}_rgb.ppm")),
            s.width,
            s.height,
            &s.rgb,
        )?;
    }

    let primary = summary.report(cfg.inference.is_soft());
    println!("{}", report::csv_header());
    for (name, r) in &rows {
        println!("{name},{}", r.to_csv_line());
    }
    println!(
        "primary ({:?}) rmse {:.4}; attention KL {:.4}; confusion diagonal mass {:.4}",
        cfg.inference,
        primary.rmse,
        summary.attention_kl,
        summary.confusion.diagonal_mass()
    );
    Ok(())
}

fn run_infer(
    exp: &ExperimentArgs,
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    query: &[usize],
) -> Result<()> {
    let cfg = exp.resolve()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let query_cells = if query.is_empty() {
        vec![centre_cell(ckpt.config.output_size())]
    } else {
        query.to_vec()
    };
    let output = infer_image(
        &ckpt,
        image,
        out,
        &InferRequest {
            inference: cfg.inference,
            options: CamOptions {
                image_pooling: cfg.image_pooling,
            },
            query_cells,
        },
    )?;
    println!("depth: {}", output.depth_path.display());
    println!("preview: {}", output.preview_path.display());
    for p in &output.attention_paths {
        println!("attention: {}", p.display());
    }
    Ok(())
}

fn run_gradcheck(scope: &str) -> Result<bool> {
    if scope == "list" {
        for case in checks::registry() {
            println!("{:<24} {:.0e}", case.name, case.tolerance);
        }
        return Ok(true);
    }
    let results = checks::run(scope)?;
    print!("{}", checks::format_table(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn run_report(csvs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for path in csvs {
        rows.extend(report::read_csv(path)?);
    }
    let table = report::markdown_table(&report::aggregate(&rows)?);
    match out {
        Some(path) => write(path, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { exp, out } => gen(&exp, &out)?,
        Command::Train {
            exp,
            out,
            epochs,
            quiet,
        } => run_train(&exp, &out, epochs, quiet)?,
        Command::Eval {
            exp,
            checkpoint,
            out,
            split,
            curves,
            visualize,
        } => run_eval(&exp, &checkpoint, &out, split.into(), &curves, visualize)?,
        Command::Infer {
            exp,
            checkpoint,
            image,
            out,
            query,
        } => run_infer(&exp, &checkpoint, &image, &out, &query)?,
        Command::Gradcheck { scope } => return run_gradcheck(&scope),
        Command::Report { csv, out } => run_report(&csv, out.as_deref())?,
        Command::Config { exp } => println!("{}", exp.resolve()?.to_json()),
        Command::Params { exp } => {
            let net = exp.resolve()?.network();
            println!("{}", net.parameter_count());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
