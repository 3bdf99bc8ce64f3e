//! Command-line flags, the optional `key=value` config file, and their merge.
//!
//! A flag given on the command line wins over the config file, which wins
//! over the built-in default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use kgact_core::kgnn::{Aggregation, ModelConfig};
use kgact_core::{Error, QuantConfig, Rounding, SynthSpec, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "kgact",
    version,
    about = "Activation-compressed training for knowledge-graph recommenders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model, then write its metrics report and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run one training step per bit width and tabulate context memory.
    BenchMemory(BenchArgs),
    /// Check quantizer unbiasedness and the variance bound by Monte Carlo.
    VerifyQuant(VerifyArgs),
    /// Train paired stochastic and nearest rounding runs per seed.
    CompareRounding(CompareArgs),
    /// Write a synthetic dataset as TSV files.
    GenData(GenArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// File of `key=value` lines supplying defaults for any long flag.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, value_name = "DIR", env = "KGACT_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset directory holding interactions.tsv and triples.tsv.
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Synthetic dataset: `default`, `small`, or a key=value spec file.
    #[arg(long, value_name = "SPEC")]
    pub synthetic: Option<String>,
    /// Require every relation to appear in relations.vocab.
    #[arg(long)]
    pub strict: bool,
    /// Seed of the per-user train/valid/test split of a `--data` directory
    /// [default: 2024].
    #[arg(long, value_name = "SEED")]
    pub split_seed: Option<u64>,
    /// Keep only the k-core of the interaction graph before splitting.
    #[arg(long, value_name = "K")]
    pub kcore: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Context bit width: 1, 2, 4, 8, or 32 for uncompressed [default: 2].
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<u8>,
    /// Rounding of quantized contexts: stochastic or nearest
    /// [default: stochastic].
    #[arg(long)]
    pub rounding: Option<Rounding>,
    /// Propagation layers [default: 3].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Embedding width [default: 64].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Readout: sum of layer outputs or last layer only [default: sum].
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
}

#[derive(Args, Debug, Default)]
pub struct OptimArgs {
    /// Minibatch size in BPR triples [default: 1024].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs [default: 20].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization, shuffling and quantization [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// L2 weight on the embeddings in each batch [default: 1e-5].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Cutoff for Recall@K and NDCG@K [default: 20].
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Report path [default: <out-dir>/report.json].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Checkpoint path [default: <out-dir>/model.kgck].
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Cutoff for Recall@K and NDCG@K [default: 20].
    #[arg(long)]
    pub k: Option<usize>,
    /// Report path [default: <out-dir>/eval.json].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Table path [default: <out-dir>/memory.json].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bit width to check; all of 1, 2, 4 and 8 when omitted.
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<u8>,
    /// Quantization draws per row [default: 100000].
    #[arg(long)]
    pub trials: Option<usize>,
    /// Random rows per bit width [default: 100].
    #[arg(long)]
    pub rows: Option<usize>,
    /// Row length [default: 64].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Seed for rows and draws [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path [default: <out-dir>/verify-quant.json].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Comma-separated seeds, one paired run each [default: 1,2,3,4,5].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Report path [default: <out-dir>/compare-rounding.json].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Synthetic dataset: `default`, `small`, or a key=value spec file
    /// [default: default].
    #[arg(long, value_name = "SPEC")]
    pub synthetic: Option<String>,
    /// Output directory [default: <out-dir>/data].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn parse_bits(s: &str) -> Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b @ (1 | 2 | 4 | 8 | 32)) => Ok(b),
        _ => Err(format!("expected one of 1, 2, 4, 8, 32, got `{s}`")),
    }
}

const KNOWN_KEYS: &[&str] = &[
    "data",
    "synthetic",
    "strict",
    "split-seed",
    "kcore",
    "bits",
    "rounding",
    "layers",
    "dim",
    "aggregation",
    "batch",
    "lr",
    "epochs",
    "seed",
    "lambda",
    "k",
    "out-dir",
    "checkpoint",
    "trials",
    "rows",
    "seeds",
];

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

/// Values from a config file, keyed by long flag name. Blank lines and `#`
/// comments are skipped; `_` and `-` are interchangeable in keys.
#[derive(Debug, Default)]
pub struct ConfigFile {
    path: PathBuf,
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(Error::from)?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!(
                    "{}:{}: expected key=value",
                    path.display(),
                    n + 1
                )));
            };
            let key = key.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(usage(format!(
                    "{}:{}: unknown key `{key}`",
                    path.display(),
                    n + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self {
            path: path.to_path_buf(),
            values,
        })
    }

    /// The flag value if given, else the parsed config value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| {
                    usage(format!(
                        "{}: invalid value `{v}` for `{key}`: {e}",
                        self.path.display()
                    ))
                })
            })
            .transpose()
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }
}

pub fn out_dir(common: &Common, cfg: &ConfigFile) -> anyhow::Result<PathBuf> {
    cfg.pick_or(common.out_dir.clone(), "out-dir", PathBuf::from("."))
}

/// Where the dataset comes from.
#[derive(Clone, Debug)]
pub enum DataSource {
    Dir {
        path: PathBuf,
        strict: bool,
        split_seed: u64,
    },
    Synthetic(SynthSpec),
}

#[derive(Clone, Debug)]
pub struct DataSettings {
    pub source: DataSource,
    pub kcore: Option<usize>,
}

pub fn synth_spec(name: &str) -> anyhow::Result<SynthSpec> {
    match name {
        "default" => Ok(SynthSpec::default()),
        "small" => Ok(SynthSpec::small()),
        path => {
            let text = std::fs::read_to_string(path).map_err(Error::from)?;
            Ok(text.parse::<SynthSpec>()?)
        }
    }
}

impl DataArgs {
    pub fn resolve(&self, cfg: &ConfigFile) -> anyhow::Result<DataSettings> {
        // A source on the command line replaces any source in the config.
        let (data, synthetic) = if self.data.is_some() || self.synthetic.is_some() {
            (self.data.clone(), self.synthetic.clone())
        } else {
            (
                cfg.pick::<PathBuf>(None, "data")?,
                cfg.pick::<String>(None, "synthetic")?,
            )
        };
        let strict = self.strict || cfg.pick::<bool>(None, "strict")?.unwrap_or(false);
        let source = match (data, synthetic) {
            (Some(path), None) => DataSource::Dir {
                path,
                strict,
                split_seed: cfg.pick_or(
                    self.split_seed,
                    "split-seed",
                    SynthSpec::default().seed,
                )?,
            },
            (None, Some(name)) => DataSource::Synthetic(synth_spec(&name)?),
            (Some(_), Some(_)) => {
                return Err(usage(
                    "give exactly one of --data and --synthetic, not both",
                ))
            }
            (None, None) => {
                return Err(usage(
                    "a data source is required: --data <DIR> or --synthetic <SPEC>",
                ))
            }
        };
        Ok(DataSettings {
            source,
            kcore: cfg.pick(self.kcore, "kcore")?,
        })
    }
}

impl ModelArgs {
    pub fn resolve(&self, cfg: &ConfigFile, default_bits: u8) -> anyhow::Result<ModelConfig> {
        let bits = cfg.pick_or(self.bits, "bits", default_bits)?;
        parse_bits(&bits.to_string()).map_err(usage)?;
        let d = ModelConfig::default();
        let model = ModelConfig {
            layers: cfg.pick_or(self.layers, "layers", d.layers)?,
            dim: cfg.pick_or(self.dim, "dim", d.dim)?,
            aggregation: cfg.pick_or(self.aggregation, "aggregation", d.aggregation)?,
            quant: QuantConfig::new(
                bits,
                cfg.pick_or(self.rounding, "rounding", Rounding::Stochastic)?,
            )?,
        };
        model.validate()?;
        Ok(model)
    }
}

impl OptimArgs {
    pub fn resolve(&self, cfg: &ConfigFile) -> anyhow::Result<TrainConfig> {
        let d = TrainConfig::default();
        let train = TrainConfig {
            lr: cfg.pick_or(self.lr, "lr", d.lr)?,
            batch: cfg.pick_or(self.batch, "batch", d.batch)?,
            epochs: cfg.pick_or(self.epochs, "epochs", d.epochs)?,
            seed: cfg.pick_or(self.seed, "seed", d.seed)?,
            lambda: cfg.pick_or(self.lambda, "lambda", d.lambda)?,
            k: cfg.pick_or(self.k, "k", d.k)?,
        };
        train.validate()?;
        Ok(train)
    }
}
