//! One function per subcommand. Each returns whether its checks passed.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use kgact_core::graphdata::{
    build_adjacency, kcore_filter, KgDataset, RawGraph, SplitRatios, SynthSpec,
};
use kgact_core::kgnn::{embed, Aggregation, ModelConfig};
use kgact_core::probe::{quantizer_check, QuantizerCheck};
use kgact_core::trainer::{
    compare_rounding, evaluate_embeddings, evaluate_popularity, memory_report, train,
    DatasetSummary, MemoryReport, Metrics, RoundingComparison, TapeEngine, Trainer,
};
use kgact_core::{checkpoint, QuantConfig, TrainConfig};

use crate::settings::{
    out_dir, synth_spec, BenchArgs, Command, CompareArgs, ConfigFile, DataSettings, DataSource,
    EvalArgs, GenArgs, TrainArgs, VerifyArgs,
};

pub fn run(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::BenchMemory(a) => bench_memory_cmd(a),
        Command::VerifyQuant(a) => verify_quant_cmd(a),
        Command::CompareRounding(a) => compare_rounding_cmd(a),
        Command::GenData(a) => gen_data_cmd(a),
    }
}

pub fn load_dataset(data: &DataSettings) -> anyhow::Result<KgDataset> {
    let (mut raw, seed) = match &data.source {
        DataSource::Dir {
            path,
            strict,
            split_seed,
        } => (
            RawGraph::read_dir(path, *strict)
                .with_context(|| format!("loading dataset from {}", path.display()))?,
            *split_seed,
        ),
        DataSource::Synthetic(spec) => (spec.generate_raw()?, spec.seed),
    };
    if let Some(k) = data.kcore {
        raw.interactions = kcore_filter(&raw.interactions, k);
        raw.align_items();
    }
    Ok(KgDataset::from_raw(raw, SplitRatios::default(), seed)?)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn output(flag: Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    flag.unwrap_or_else(|| dir.join(name))
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<bool> {
    let cfg = ConfigFile::load(a.common.config.as_deref())?;
    let data = a.data.resolve(&cfg)?;
    let model = a.model.resolve(&cfg, 2)?;
    let train_cfg = a.optim.resolve(&cfg)?;
    let dir = out_dir(&a.common, &cfg)?;
    let report_path = output(a.out, &dir, "report.json");
    let ckpt_path = output(cfg.pick(a.checkpoint, "checkpoint")?, &dir, "model.kgck");

    let ds = load_dataset(&data)?;
    let outcome = train(&ds, model, train_cfg)?;
    let report = &outcome.report;
    for (e, loss) in report.loss.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.6}", e + 1);
    }
    println!(
        "recall@{k} {:.4}  ndcg@{k} {:.4}  users {}",
        report.metrics.recall,
        report.metrics.ndcg,
        report.metrics.users,
        k = report.metrics.k
    );
    println!(
        "contexts {} bytes vs {} fp32 ({:.2}x)",
        report.memory.activation_bytes,
        report.memory.fp32_equivalent_bytes,
        report.memory.compression_ratio
    );
    write_json(&report_path, report)?;
    if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    checkpoint::save(&ckpt_path, &outcome.params, model.aggregation)?;
    println!("report {}", report_path.display());
    println!("checkpoint {}", ckpt_path.display());
    Ok(true)
}

#[derive(Serialize)]
struct CheckpointInfo {
    layers: usize,
    dim: usize,
    aggregation: Aggregation,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: CheckpointInfo,
    dataset: DatasetSummary,
    metrics: Metrics,
    popularity_baseline: Metrics,
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<bool> {
    let cfg = ConfigFile::load(a.common.config.as_deref())?;
    let data = a.data.resolve(&cfg)?;
    let k = cfg.pick_or(a.k, "k", TrainConfig::default().k)?;
    let ckpt_path = cfg
        .pick(a.checkpoint, "checkpoint")?
        .ok_or_else(|| crate::settings::usage("eval needs --checkpoint <FILE>"))?;
    let dir = out_dir(&a.common, &cfg)?;
    let report_path = output(a.out, &dir, "eval.json");

    let (params, aggregation) = checkpoint::load(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let ds = load_dataset(&data)?;
    if params.e0.rows() != ds.num_nodes() {
        anyhow::bail!(
            "checkpoint has {} node rows but the dataset has {} nodes",
            params.e0.rows(),
            ds.num_nodes()
        );
    }
    let model = ModelConfig {
        layers: params.layers(),
        dim: params.dim(),
        aggregation,
        quant: QuantConfig::exact(),
    };
    let adj = std::sync::Arc::new(build_adjacency::<f32>(&ds));
    let emb = embed(&params, &adj, &model)?;
    let report = EvalReport {
        checkpoint: CheckpointInfo {
            layers: model.layers,
            dim: model.dim,
            aggregation,
        },
        dataset: DatasetSummary::new(&ds, &adj),
        metrics: evaluate_embeddings(&ds, &emb, k)?,
        popularity_baseline: evaluate_popularity(&ds, k)?,
    };
    println!(
        "recall@{k} {:.4}  ndcg@{k} {:.4}  (popularity {:.4} / {:.4})",
        report.metrics.recall,
        report.metrics.ndcg,
        report.popularity_baseline.recall,
        report.popularity_baseline.ndcg
    );
    write_json(&report_path, &report)?;
    println!("report {}", report_path.display());
    Ok(true)
}

const BENCH_BITS: [u8; 5] = [32, 8, 4, 2, 1];

#[derive(Serialize)]
struct MemoryChecks {
    uncompressed_ratio_is_one: bool,
    bytes_strictly_decrease: bool,
}

#[derive(Serialize)]
struct MemoryTable {
    model: ModelConfig,
    batch: usize,
    seed: u64,
    dataset: DatasetSummary,
    rows: Vec<MemoryReport>,
    checks: MemoryChecks,
}

fn bench_memory_cmd(a: BenchArgs) -> anyhow::Result<bool> {
    let cfg = ConfigFile::load(a.common.config.as_deref())?;
    let data = a.data.resolve(&cfg)?;
    let base = a.model.resolve(&cfg, 2)?;
    let train_cfg = a.optim.resolve(&cfg)?;
    let dir = out_dir(&a.common, &cfg)?;
    let path = output(a.out, &dir, "memory.json");

    let ds = load_dataset(&data)?;
    let mut rows = Vec::with_capacity(BENCH_BITS.len());
    let mut dataset = None;
    for bits in BENCH_BITS {
        let model = ModelConfig {
            quant: QuantConfig::new(bits, base.quant.rounding())?,
            ..base
        };
        let mut trainer = Trainer::<f32, _>::new(&ds, model, train_cfg, TapeEngine)?;
        dataset.get_or_insert_with(|| DatasetSummary::new(&ds, trainer.adjacency()));
        let batch = trainer.epoch_batches(0)?.swap_remove(0);
        let out = trainer.train_batch(&batch, train_cfg.seed)?;
        rows.push(memory_report(&out.ledger, model.quant));
    }
    let checks = MemoryChecks {
        uncompressed_ratio_is_one: rows[0].compression_ratio == 1.0,
        bytes_strictly_decrease: rows[1..]
            .windows(2)
            .all(|w| w[0].activation_bytes > w[1].activation_bytes),
    };
    println!(
        "{:>4}  {:>12}  {:>12}  {:>7}  {:>10}  {:>12}",
        "bits", "contexts", "fp32", "ratio", "ratio+adj", "peak"
    );
    for r in &rows {
        println!(
            "{:>4}  {:>12}  {:>12}  {:>6.2}x  {:>9.2}x  {:>12}",
            r.bits,
            r.activation_bytes,
            r.fp32_equivalent_bytes,
            r.compression_ratio,
            r.compression_ratio_with_adjacency,
            r.peak_context_bytes
        );
    }
    let pass = checks.uncompressed_ratio_is_one && checks.bytes_strictly_decrease;
    let table = MemoryTable {
        model: base,
        batch: train_cfg.batch,
        seed: train_cfg.seed,
        dataset: dataset.expect("at least one bit width"),
        rows,
        checks,
    };
    write_json(&path, &table)?;
    println!("table {}", path.display());
    Ok(pass)
}

#[derive(Serialize)]
struct VerifyReport {
    seed: u64,
    checks: Vec<QuantizerCheck>,
    pass: bool,
}

fn verify_quant_cmd(a: VerifyArgs) -> anyhow::Result<bool> {
    let cfg = ConfigFile::load(a.common.config.as_deref())?;
    let bits: Vec<u8> = match cfg.pick(a.bits, "bits")? {
        Some(b) => vec![b],
        None => vec![1, 2, 4, 8],
    };
    let trials = cfg.pick_or(a.trials, "trials", 100_000)?;
    let rows = cfg.pick_or(a.rows, "rows", 100)?;
    let dim = cfg.pick_or(a.dim, "dim", 64)?;
    let seed = cfg.pick_or(a.seed, "seed", 0)?;
    let dir = out_dir(&a.common, &cfg)?;
    let path = output(a.out, &dir, "verify-quant.json");

    let mut checks = Vec::with_capacity(bits.len());
    for b in bits {
        let c = quantizer_check(b, rows, dim, trials, seed)?;
        println!(
            "[{}] b={b}: worst |mean - x| {:.3} of the 4-sigma tolerance; worst row variance {:.4} of d*R^2/(4B^2)",
            if c.pass() { "PASS" } else { "FAIL" },
            c.worst_mean_deviation,
            c.worst_row_variance
        );
        checks.push(c);
    }
    let pass = checks.iter().all(QuantizerCheck::pass);
    write_json(&path, &VerifyReport { seed, checks, pass })?;
    println!("report {}", path.display());
    Ok(pass)
}

#[derive(Serialize)]
struct CompareReport {
    model: ModelConfig,
    train: TrainConfig,
    comparison: RoundingComparison,
}

fn compare_rounding_cmd(a: CompareArgs) -> anyhow::Result<bool> {
    let cfg = ConfigFile::load(a.common.config.as_deref())?;
    let data = a.data.resolve(&cfg)?;
    let model = a.model.resolve(&cfg, 2)?;
    let train_cfg = a.optim.resolve(&cfg)?;
    let seeds = match a.seeds {
        Some(s) => s,
        None => match cfg.pick::<String>(None, "seeds")? {
            Some(list) => list
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|e| crate::settings::usage(format!("invalid seeds `{list}`: {e}")))?,
            None => vec![1, 2, 3, 4, 5],
        },
    };
    let dir = out_dir(&a.common, &cfg)?;
    let path = output(a.out, &dir, "compare-rounding.json");

    let ds = load_dataset(&data)?;
    let comparison = compare_rounding(&ds, model, train_cfg, &seeds)?;
    println!(
        "{:>6}  {:>12}  {:>12}  {:>9}  {:>9}",
        "seed", "loss sr", "loss nr", "recall sr", "recall nr"
    );
    for p in &comparison.pairs {
        println!(
            "{:>6}  {:>12.6}  {:>12.6}  {:>9.4}  {:>9.4}",
            p.seed, p.stochastic_loss, p.nearest_loss, p.stochastic.recall, p.nearest.recall
        );
    }
    println!(
        "stochastic final loss <= nearest in {}/{} seeds at b={}",
        comparison.stochastic_wins,
        comparison.pairs.len(),
        comparison.bits
    );
    write_json(
        &path,
        &CompareReport {
            model,
            train: train_cfg,
            comparison,
        },
    )?;
    println!("report {}", path.display());
    Ok(true)
}

/// Name of the spec echo written next to generated data.
pub const SPEC_FILE: &str = "synthetic.conf";

fn gen_data_cmd(a: GenArgs) -> anyhow::Result<bool> {
    let cfg = ConfigFile::load(a.common.config.as_deref())?;
    let name = cfg.pick_or(a.synthetic, "synthetic", "default".to_string())?;
    let spec: SynthSpec = synth_spec(&name)?;
    let dir = out_dir(&a.common, &cfg)?;
    let target = output(a.out, &dir, "data");

    let raw = spec.generate_raw()?;
    raw.write_dir(&target)
        .with_context(|| format!("writing dataset to {}", target.display()))?;
    std::fs::write(target.join(SPEC_FILE), spec.to_string())?;
    println!(
        "{} users, {} items, {} entities, {} relations, {} interactions, {} triples",
        raw.users.len(),
        raw.num_items,
        raw.entities.len(),
        raw.relations.len(),
        raw.interactions.len(),
        raw.triples.len()
    );
    println!("dataset {}", target.display());
    Ok(true)
}
