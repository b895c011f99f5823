use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpclip::bench::{
    bench_dataset, build_reference_model, run_bench_with, write_bench_csv, BenchSpec, DataSource, ModelKind,
};
use dpclip::clipping::{ClipMode, Strategy};
use dpclip::data::{synth, Dataset, SynthKind};
use dpclip::trainer::{evaluate, train_with, write_metrics_csv, NoiseScale, Optimizer, PrivacyTarget, TrainConfig};
use dpclip::{Error, Result};

// Training allocates and frees many large buffers per step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "dpclip", version, about = "Differentially private training with fast per-example clipping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time training epochs across clipping methods and batch sizes.
    Bench(BenchArgs),
    /// Train one model and report accuracy and privacy spent.
    Train(TrainArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Records drawn from the data source.
    #[arg(long, default_value_t = 2000)]
    records: usize,
    /// IDX image file (optionally gzip-compressed); replaces synthetic data.
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        match (&self.idx_images, &self.idx_labels) {
            (Some(images), Some(labels)) => DataSource::Idx { images: images.clone(), labels: labels.clone() },
            _ => DataSource::Synthetic,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "reweight,nxbp,multiloss,nonprivate")]
    methods: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Kernel threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[command(flatten)]
    data: DataArgs,
    /// CSV report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    /// Overlapping Gaussian classes (tokens for the transformer).
    Synthetic,
    /// Linearly separable classes.
    Separable,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Strategy>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Calibrate sigma to this ε′ instead (with --target-delta).
    #[arg(long, requires = "target_delta")]
    target_eps: Option<f64>,
    #[arg(long, requires = "target_eps")]
    target_delta: Option<f64>,
    #[arg(long)]
    noise_scale: Option<NoiseScaleArg>,
    #[arg(long)]
    per_layer: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = DataKind::Synthetic)]
    data_kind: DataKind,
    /// Class count of separable data.
    #[arg(long)]
    classes: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Privacy report JSON.
    #[arg(long)]
    eps_report: Option<PathBuf>,
    /// Write trained parameters to `<stem>.bin` and `<stem>.json`.
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseScaleArg {
    Absolute,
    ClipMultiplier,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn bench(args: BenchArgs) -> Result<()> {
    let spec = BenchSpec {
        model: args.model,
        methods: args.methods,
        batch_sizes: args.batch_sizes,
        depth: args.depth,
        epochs: args.epochs,
        warmup: args.warmup,
        records: args.data.records,
        data: args.data.source(),
        seed: args.seed,
        clip: args.clip,
        sigma: args.sigma,
        threads: args.threads,
    };
    let rows = run_bench_with(&spec, |r| {
        eprintln!(
            "{} {} batch={} median={} status={}",
            r.model,
            r.method,
            r.batch,
            r.epoch_seconds_median.map_or("-".into(), |s| format!("{s:.3}s")),
            r.status
        )
    })?;
    match &args.out {
        Some(p) => write_bench_csv(BufWriter::new(File::create(p)?), &rows)?,
        None => write_bench_csv(io::stdout().lock(), &rows)?,
    }
    if let Some(p) = &args.json {
        fs::write(p, serde_json::to_vec_pretty(&rows)?)?;
    }
    Ok(())
}

fn train_dataset(args: &TrainArgs, seed: u64) -> Result<Dataset> {
    let source = args.data.source();
    match (args.data_kind, &source) {
        (DataKind::Synthetic, _) | (_, DataSource::Idx { .. }) => {
            bench_dataset(args.model, &source, args.data.records, seed)
        }
        (DataKind::Separable, _) => {
            let shape: &[usize] = match args.model {
                ModelKind::Mlp | ModelKind::Cnn => &[1, 28, 28],
                ModelKind::Rnn | ModelKind::Lstm => &[28, 28],
                ModelKind::Transformer => {
                    return Err(Error::Usage("separable data is real-valued; the transformer needs tokens".into()))
                }
            };
            synth(SynthKind::Separable, args.data.records, shape, args.classes.unwrap_or(2), seed)
        }
    }
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.$field = v; })* };
    }
    set!(method, clip, sigma, epochs, batch_size, lr, seed);
    if let (Some(eps), Some(delta)) = (args.target_eps, args.target_delta) {
        cfg.target = Some(PrivacyTarget { eps, delta });
    }
    if let Some(n) = args.noise_scale {
        cfg.noise_scale = match n {
            NoiseScaleArg::Absolute => NoiseScale::Absolute,
            NoiseScaleArg::ClipMultiplier => NoiseScale::ClipMultiplier,
        };
    }
    if let Some(o) = args.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        };
    }
    if args.per_layer {
        cfg.clip_mode = ClipMode::PerLayer;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    let ds = train_dataset(&args, cfg.seed)?;
    let mut model = build_reference_model(args.model, args.depth, ds.record_shape(), ds.num_classes, cfg.seed)?;
    eprintln!("{} with {} parameters on {} records", args.model, model.param_count(), ds.len());
    let out = train_with(&mut model, &ds, &cfg, |m, _| {
        eprintln!(
            "epoch {:>3}  {:>8.3}s  loss {:.4}  acc {:.4}  eps' {:.4}",
            m.epoch, m.wall_seconds, m.loss, m.accuracy, m.eps_prime
        )
    })?;
    let (acc, loss) = evaluate(&model, &ds)?;
    println!("final train accuracy {acc:.4}, loss {loss:.4}");
    if let Some(p) = &args.metrics {
        write_metrics_csv(BufWriter::new(File::create(p)?), &out.metrics)?;
    }
    if let Some(p) = &args.eps_report {
        fs::write(p, serde_json::to_vec_pretty(&out.privacy_report()?)?)?;
    }
    if let Some(stem) = &args.save_params {
        model.save_params(stem)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(a) => bench(a),
        Command::Train(a) => run_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
