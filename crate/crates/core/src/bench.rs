//! Reference architectures and the per-epoch timing harness.

use std::fmt;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::NormDivisor;
use crate::clipping::Strategy;
use crate::data::{load_idx, rows_as_sequence, synth, Dataset, SynthKind, TOKEN_VOCAB};
use crate::error::{Error, Result};
use crate::layers::{Activation, AttentionScaling};
use crate::model::{Model, ModelBuilder};
use crate::trainer::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Cnn,
    Rnn,
    Lstm,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::Mlp, ModelKind::Cnn, ModelKind::Rnn, ModelKind::Lstm, ModelKind::Transformer];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
            ModelKind::Rnn => "rnn",
            ModelKind::Lstm => "lstm",
            ModelKind::Transformer => "transformer",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Usage(format!("unknown model `{s}` (expected mlp, cnn, rnn, lstm or transformer)")))
    }
}

pub const RECURRENT_HIDDEN: usize = 128;
pub const TRANSFORMER_WIDTH: usize = 200;
pub const TRANSFORMER_HEADS: usize = 4;
pub const SEQUENCE_LEN: usize = 64;

/// Hidden widths of the MLP: 128, then 256 for every further layer.
pub fn mlp_widths(depth: usize) -> Vec<usize> {
    (0..depth).map(|i| if i == 0 { 128 } else { 256 }).collect()
}

/// Builds one of the reference architectures for records of
/// `input_shape`. `depth` is the hidden-layer count of the MLP and is
/// ignored by the other models.
pub fn build_reference_model(
    kind: ModelKind,
    depth: usize,
    input_shape: &[usize],
    classes: usize,
    seed: u64,
) -> Result<Model> {
    let mut b = ModelBuilder::new(input_shape, seed);
    match kind {
        ModelKind::Mlp => {
            if depth == 0 {
                return Err(Error::Usage("the MLP needs at least one hidden layer".into()));
            }
            let mut width: usize = input_shape.iter().product();
            if input_shape.len() > 1 {
                b.flatten();
            }
            for h in mlp_widths(depth) {
                b.linear(width, h).activation(Activation::Sigmoid);
                width = h;
            }
            b.linear(width, classes);
        }
        ModelKind::Cnn => {
            let [c, h, w] = input_shape else {
                return Err(Error::Usage(format!(
                    "the CNN needs [channels, height, width] records, got {input_shape:?}"
                )));
            };
            let after = |s: usize| -> Result<usize> {
                let pooled = s.checked_sub(4).filter(|&v| v >= 2).map(|v| v / 2);
                let second = pooled.and_then(|v| v.checked_sub(4)).filter(|&v| v >= 2).map(|v| v / 2);
                second.ok_or_else(|| Error::Dimension(format!("spatial extent {s} too small for the CNN")))
            };
            let (oh, ow) = (after(*h)?, after(*w)?);
            b.conv(*c, 20, &[5, 5])
                .activation(Activation::Relu)
                .max_pool2d(2, 2)
                .conv(20, 50, &[5, 5])
                .activation(Activation::Relu)
                .max_pool2d(2, 2)
                .flatten()
                .linear(50 * oh * ow, 128)
                .activation(Activation::Relu)
                .linear(128, classes);
        }
        ModelKind::Rnn | ModelKind::Lstm => {
            let [_, n] = input_shape else {
                return Err(Error::Usage(format!(
                    "recurrent models need [steps, features] records, got {input_shape:?}"
                )));
            };
            if kind == ModelKind::Rnn {
                b.rnn(*n, RECURRENT_HIDDEN);
            } else {
                b.lstm(*n, RECURRENT_HIDDEN);
            }
            b.linear(RECURRENT_HIDDEN, classes);
        }
        ModelKind::Transformer => {
            if input_shape.len() != 1 {
                return Err(Error::Usage(format!("the transformer needs [length] token records, got {input_shape:?}")));
            }
            let d = TRANSFORMER_WIDTH;
            b.embedding(TOKEN_VOCAB, d, true, false)
                .residual(|b| {
                    b.attention(d, TRANSFORMER_HEADS, AttentionScaling::Inside);
                })
                .layer_norm(d, NormDivisor::StdDev)
                .residual(|b| {
                    b.linear(d, d).activation(Activation::Relu);
                })
                .layer_norm(d, NormDivisor::StdDev)
                .mean_over_sequence()
                .linear(d, classes);
        }
    }
    Ok(b.build(classes))
}

/// Where benchmark records come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Seeded synthetic records suited to the model.
    Synthetic,
    /// An IDX image/label pair (images models only).
    Idx { images: PathBuf, labels: PathBuf },
}

/// Benchmark dataset for `kind`: `records` records, 10 image classes or 2
/// token classes.
pub fn bench_dataset(kind: ModelKind, source: &DataSource, records: usize, seed: u64) -> Result<Dataset> {
    let images = || -> Result<Dataset> {
        match source {
            DataSource::Synthetic => synth(SynthKind::GaussianClasses, records, &[1, 28, 28], 10, seed),
            DataSource::Idx { images, labels } => load_idx(images, labels)?.head(records),
        }
    };
    match kind {
        ModelKind::Mlp | ModelKind::Cnn => images(),
        ModelKind::Rnn | ModelKind::Lstm => rows_as_sequence(&images()?),
        ModelKind::Transformer => match source {
            DataSource::Synthetic => synth(SynthKind::TokenSeq, records, &[SEQUENCE_LEN], 2, seed),
            DataSource::Idx { .. } => Err(Error::Usage("the transformer benchmark needs token data".into())),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub model: ModelKind,
    pub methods: Vec<Strategy>,
    pub batch_sizes: Vec<usize>,
    pub depth: usize,
    pub epochs: usize,
    pub warmup: usize,
    pub records: usize,
    pub data: DataSource,
    pub seed: u64,
    pub clip: f64,
    pub sigma: f64,
    /// Worker threads for kernel parallelism; 0 uses every core.
    pub threads: usize,
}

impl BenchSpec {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            methods: vec![Strategy::Reweight, Strategy::Nxbp, Strategy::MultiLoss, Strategy::NonPrivate],
            batch_sizes: vec![16, 32, 64, 128],
            depth: 2,
            epochs: 5,
            warmup: 1,
            records: 2000,
            data: DataSource::Synthetic,
            seed: 42,
            clip: 1.0,
            sigma: 0.05,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.epochs {
            return Err(Error::Usage(format!("warmup ({}) must be below epochs ({})", self.warmup, self.epochs)));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Usage("batch sizes must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Usage("no methods selected".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: ModelKind,
    pub method: Strategy,
    pub batch: usize,
    pub depth: usize,
    pub epoch_seconds_median: Option<f64>,
    pub speedup_vs_nxbp: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub thread_count: usize,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl BenchRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Trains one cell and returns `(median post-warmup epoch seconds, final
/// training accuracy)`.
pub fn run_cell(spec: &BenchSpec, ds: &Dataset, method: Strategy, batch: usize) -> Result<(f64, f64)> {
    let mut model = build_reference_model(spec.model, spec.depth, ds.record_shape(), ds.num_classes, spec.seed)?;
    let cfg = TrainConfig {
        epochs: spec.epochs,
        batch_size: batch,
        clip: spec.clip,
        sigma: spec.sigma,
        method,
        seed: spec.seed,
        ..TrainConfig::default()
    };
    let out = train(&mut model, ds, &cfg)?;
    let times: Vec<f64> = out.metrics[spec.warmup..].iter().map(|m| m.wall_seconds).collect();
    let acc = evaluate(&model, ds)?.0;
    Ok((median(&times).unwrap(), acc))
}

/// Runs every (method, batch size) cell sequentially. A cell that errors
/// or panics yields a failed row and the run continues. `on_row` sees each
/// row as it completes.
pub fn run_bench_with(spec: &BenchSpec, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let ds = bench_dataset(spec.model, &spec.data, spec.records, spec.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    let mut rows = Vec::new();
    for &batch in &spec.batch_sizes {
        let start = rows.len();
        for &method in &spec.methods {
            let result = pool.install(|| catch_unwind(AssertUnwindSafe(|| run_cell(spec, &ds, method, batch))));
            let (secs, acc, status) = match result {
                Ok(Ok((s, a))) => (Some(s), Some(a), "ok".to_string()),
                Ok(Err(e)) => (None, None, format!("failed: {e}")),
                Err(p) => (None, None, format!("failed: {}", panic_message(p))),
            };
            rows.push(BenchRow {
                model: spec.model,
                method,
                batch,
                depth: spec.depth,
                epoch_seconds_median: secs,
                speedup_vs_nxbp: None,
                final_accuracy: acc,
                thread_count: threads,
                status,
            });
            on_row(&rows[rows.len() - 1]);
        }
        let nxbp = rows[start..].iter().find(|r| r.method == Strategy::Nxbp).and_then(|r| r.epoch_seconds_median);
        for r in &mut rows[start..] {
            r.speedup_vs_nxbp = nxbp.zip(r.epoch_seconds_median).map(|(n, s)| n / s);
        }
    }
    Ok(rows)
}

pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    run_bench_with(spec, |_| {})
}

pub const CSV_HEADER: [&str; 9] = [
    "model",
    "method",
    "batch",
    "depth",
    "epoch_seconds_median",
    "speedup_vs_nxbp",
    "final_accuracy",
    "thread_count",
    "status",
];

pub fn write_bench_csv(w: impl Write, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(CSV_HEADER).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.model.to_string(),
            r.method.to_string(),
            r.batch.to_string(),
            r.depth.to_string(),
            opt(r.epoch_seconds_median),
            opt(r.speedup_vs_nxbp),
            opt(r.final_accuracy),
            r.thread_count.to_string(),
            r.status.clone(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}
