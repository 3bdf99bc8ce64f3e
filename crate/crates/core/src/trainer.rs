//! Adam training loop, top-K evaluation and the metrics report.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graphdata::{build_adjacency, sample_negatives, KgDataset};
use crate::kgnn::{embed, forward_all, init_params, record_bpr_batch, ModelConfig, ModelParams};
use crate::quant::{QuantConfig, Rounding};
use crate::tape::{ContextLedger, Tape};
use crate::tensor::{CsrMatrix, DenseMatrix, Element};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// L2 weight on the embeddings scored in a batch.
    pub lambda: f64,
    /// Cutoff for Recall@K and NDCG@K.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 1024,
            epochs: 20,
            seed: 0,
            lambda: 1e-5,
            k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch == 0 || self.k == 0 {
            return Err(Error::Config("batch and k must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mixes a seed with tags into an independent 64-bit seed (splitmix64 chain).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const INIT_TAG: u64 = 1;
const SHUFFLE_TAG: u64 = 2;
const TAPE_TAG: u64 = 3;

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<DenseMatrix<T>>,
    pub v: Vec<DenseMatrix<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a DenseMatrix<T>>) -> Self {
        let m: Vec<DenseMatrix<T>> = shapes
            .into_iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<'a, T: Element + 'a>(
    params: impl IntoIterator<Item = &'a mut DenseMatrix<T>>,
    grads: &[DenseMatrix<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let params: Vec<&mut DenseMatrix<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one_minus_b1 = T::from_f64(1.0 - state.beta1);
    let one_minus_b2 = T::from_f64(1.0 - state.beta2);
    let bc1 = T::from_f64(1.0 - state.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(t));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(state.eps);
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + one_minus_b1 * gi;
            *vi = b2 * *vi + one_minus_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A minibatch as node indices of the unified space.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

pub struct StepOutput<T> {
    pub loss: T,
    /// Gradients for `E0` then each layer weight.
    pub grads: Vec<DenseMatrix<T>>,
    pub ledger: ContextLedger,
}

/// Computes the batch loss and parameter gradients.
pub trait StepEngine<T: Element> {
    fn step(
        &mut self,
        params: &ModelParams<T>,
        adj: &Arc<CsrMatrix<T>>,
        cfg: &ModelConfig,
        batch: &Batch,
        lambda: T,
        seed: u64,
    ) -> Result<StepOutput<T>>;
}

/// Records the model on a compressed-context tape and runs its backward.
#[derive(Clone, Copy, Debug, Default)]
pub struct TapeEngine;

impl<T: Element> StepEngine<T> for TapeEngine {
    fn step(
        &mut self,
        params: &ModelParams<T>,
        adj: &Arc<CsrMatrix<T>>,
        cfg: &ModelConfig,
        batch: &Batch,
        lambda: T,
        seed: u64,
    ) -> Result<StepOutput<T>> {
        let mut tape = Tape::new(cfg.quant, seed);
        let out = forward_all(&mut tape, params, adj, cfg)?;
        let loss = record_bpr_batch(
            &mut tape,
            &out.readout,
            &batch.users,
            &batch.pos,
            &batch.neg,
            lambda,
        )?;
        drop(out);
        let grads = tape.backward()?.into_vec();
        Ok(StepOutput {
            loss: loss.value().get(0, 0),
            grads,
            ledger: tape.ledger().clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Per-example loss averaged over the epoch.
    pub mean_loss: f64,
    pub batches: usize,
    pub peak_context_bytes: usize,
    pub peak_aux_bytes: usize,
    /// Largest context byte count left on a tape after its backward.
    pub retained_bytes: usize,
    /// Ledger of the last step.
    pub ledger: ContextLedger,
    pub seconds: f64,
}

/// Owns the model, optimizer and adjacency for one training run.
pub struct Trainer<'a, T, E> {
    ds: &'a KgDataset,
    adj: Arc<CsrMatrix<T>>,
    model: ModelConfig,
    cfg: TrainConfig,
    params: ModelParams<T>,
    adam: AdamState<T>,
    engine: E,
    positives: Vec<Vec<usize>>,
    epoch: usize,
}

impl<'a, T: Element, E: StepEngine<T>> Trainer<'a, T, E> {
    /// Builds the adjacency and initializes parameters from `cfg.seed`.
    pub fn new(ds: &'a KgDataset, model: ModelConfig, cfg: TrainConfig, engine: E) -> Result<Self> {
        let params = init_params(ds.num_nodes(), &model, derive_seed(cfg.seed, &[INIT_TAG]));
        Self::with_params(ds, model, cfg, engine, params)
    }

    pub fn with_params(
        ds: &'a KgDataset,
        model: ModelConfig,
        cfg: TrainConfig,
        engine: E,
        params: ModelParams<T>,
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if ds.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if params.e0.shape() != (ds.num_nodes(), model.dim) || params.layers() != model.layers {
            return Err(Error::Config(
                "parameters do not match dataset and model".into(),
            ));
        }
        Ok(Self {
            adj: Arc::new(build_adjacency(ds)),
            adam: AdamState::new(params.tensors()),
            positives: ds.train_positives(),
            ds,
            model,
            cfg,
            params,
            engine,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn adjacency(&self) -> &Arc<CsrMatrix<T>> {
        &self.adj
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Batches of the next epoch: train pairs shuffled, one negative each.
    pub fn epoch_batches(&self, epoch: usize) -> Result<Vec<Batch>> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[SHUFFLE_TAG, epoch as u64]));
        let mut pairs = self.ds.train.clone();
        pairs.shuffle(&mut rng);
        let triples = sample_negatives(&pairs, self.ds.num_items(), &self.positives, &mut rng)?;
        Ok(triples
            .chunks(self.cfg.batch)
            .map(|chunk| Batch {
                users: chunk.iter().map(|t| self.ds.user_node(t.user)).collect(),
                pos: chunk.iter().map(|t| self.ds.item_node(t.pos)).collect(),
                neg: chunk.iter().map(|t| self.ds.item_node(t.neg)).collect(),
            })
            .collect())
    }

    /// Runs one step on `batch` and applies the Adam update.
    pub fn train_batch(&mut self, batch: &Batch, seed: u64) -> Result<StepOutput<T>> {
        let lambda = T::from_f64(self.cfg.lambda);
        let out = self
            .engine
            .step(&self.params, &self.adj, &self.model, batch, lambda, seed)?;
        adam_step(
            self.params.tensors_mut(),
            &out.grads,
            &mut self.adam,
            self.cfg.lr,
        )?;
        Ok(out)
    }

    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        let epoch = self.epoch;
        let batches = self.epoch_batches(epoch)?;
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: 0.0,
            batches: batches.len(),
            peak_context_bytes: 0,
            peak_aux_bytes: 0,
            retained_bytes: 0,
            ledger: ContextLedger::default(),
            seconds: 0.0,
        };
        for (b, batch) in batches.iter().enumerate() {
            let seed = derive_seed(self.cfg.seed, &[TAPE_TAG, epoch as u64, b as u64]);
            let out = self.train_batch(batch, seed)?;
            total += out.loss.to_f64() * batch.len() as f64;
            count += batch.len();
            stats.peak_context_bytes = stats.peak_context_bytes.max(out.ledger.peak_bytes);
            stats.peak_aux_bytes = stats.peak_aux_bytes.max(out.ledger.aux_peak_bytes);
            stats.retained_bytes = stats
                .retained_bytes
                .max(out.ledger.current_bytes + out.ledger.aux_current_bytes);
            stats.ledger = out.ledger;
        }
        if !self.params.is_finite() {
            return Err(Error::Config(format!(
                "parameters diverged in epoch {}",
                epoch + 1
            )));
        }
        stats.mean_loss = total / count as f64;
        stats.seconds = start.elapsed().as_secs_f64();
        self.epoch += 1;
        Ok(stats)
    }

    pub fn embed(&self) -> Result<DenseMatrix<T>> {
        embed(&self.params, &self.adj, &self.model)
    }

    pub fn evaluate(&self, k: usize) -> Result<Metrics> {
        evaluate_embeddings(self.ds, &self.embed()?, k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    /// Users with at least one test positive.
    pub users: usize,
}

/// Ranks all items except each user's train positives with `scorer`, which
/// fills one score per item. Ties go to the lower item index.
pub fn evaluate_scores(
    ds: &KgDataset,
    k: usize,
    mut scorer: impl FnMut(usize, &mut [f64]),
) -> Result<Metrics> {
    let train = ds.train_positives();
    let test = ds.test_positives();
    let mut scores = vec![0.0f64; ds.num_items()];
    let mut ranked: Vec<usize> = Vec::with_capacity(ds.num_items());
    let (mut recall, mut ndcg, mut users) = (0.0f64, 0.0f64, 0usize);
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    for u in 0..ds.num_users() {
        if test[u].is_empty() {
            continue;
        }
        scorer(u, &mut scores);
        ranked.clear();
        ranked.extend((0..ds.num_items()).filter(|i| train[u].binary_search(i).is_err()));
        let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, by_score);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(by_score);
        let mut hits = 0usize;
        let mut dcg = 0.0;
        for (r, item) in ranked.iter().enumerate() {
            if test[u].binary_search(item).is_ok() {
                hits += 1;
                dcg += discount(r);
            }
        }
        let idcg: f64 = (0..test[u].len().min(k)).map(discount).sum();
        recall += hits as f64 / test[u].len() as f64;
        ndcg += dcg / idcg;
        users += 1;
    }
    if users == 0 {
        return Err(Error::Config("no user has test interactions".into()));
    }
    Ok(Metrics {
        k,
        recall: recall / users as f64,
        ndcg: ndcg / users as f64,
        users,
    })
}

/// Dot-product ranking from readout rows over the unified index space.
pub fn evaluate_embeddings<T: Element>(
    ds: &KgDataset,
    emb: &DenseMatrix<T>,
    k: usize,
) -> Result<Metrics> {
    evaluate_scores(ds, k, |u, scores| {
        let urow = emb.row(ds.user_node(u));
        for (i, s) in scores.iter_mut().enumerate() {
            *s = crate::kgnn::score(urow, emb.row(ds.item_node(i))).to_f64();
        }
    })
}

/// Ranks items by train interaction count, identically for every user.
pub fn evaluate_popularity(ds: &KgDataset, k: usize) -> Result<Metrics> {
    let mut counts = vec![0.0f64; ds.num_items()];
    for &(_, i) in &ds.train {
        counts[i] += 1.0;
    }
    evaluate_scores(ds, k, |_, scores| scores.copy_from_slice(&counts))
}

/// Context memory of one training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub bits: u8,
    pub rounding: Rounding,
    /// Quantized activations plus relu masks.
    pub activation_bytes: usize,
    /// The same activation maps held at 32 bits.
    pub fp32_equivalent_bytes: usize,
    pub compression_ratio: f64,
    pub quantized_bytes: usize,
    pub mask_bytes: usize,
    pub adjacency_bytes: usize,
    /// Ratio with the shared adjacency added to both sides.
    pub compression_ratio_with_adjacency: f64,
    pub peak_context_bytes: usize,
    pub peak_aux_bytes: usize,
    pub retained_bytes_after_backward: usize,
}

/// Memory figures of one step's ledger. Peak and retained fields describe
/// that step alone.
pub fn memory_report(ledger: &ContextLedger, quant: QuantConfig) -> MemoryReport {
    let act = ledger.activation_bytes();
    let fp32 = ledger.activation_fp32_bytes();
    MemoryReport {
        bits: quant.bits(),
        rounding: quant.rounding(),
        activation_bytes: act,
        fp32_equivalent_bytes: fp32,
        compression_ratio: fp32 as f64 / act as f64,
        quantized_bytes: ledger.quantized_bytes,
        mask_bytes: ledger.mask_bytes,
        adjacency_bytes: ledger.adjacency_bytes,
        compression_ratio_with_adjacency: (fp32 + ledger.adjacency_bytes) as f64
            / (act + ledger.adjacency_bytes) as f64,
        peak_context_bytes: ledger.peak_bytes,
        peak_aux_bytes: ledger.aux_peak_bytes,
        retained_bytes_after_backward: ledger.current_bytes + ledger.aux_current_bytes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub adjacency_nnz: usize,
}

impl DatasetSummary {
    pub fn new<T: Element>(ds: &KgDataset, adj: &CsrMatrix<T>) -> Self {
        Self {
            users: ds.num_users(),
            items: ds.num_items(),
            entities: ds.num_entities(),
            relations: ds.num_relations(),
            triples: ds.triples.len(),
            train: ds.train.len(),
            valid: ds.valid.len(),
            test: ds.test.len(),
            adjacency_nnz: adj.nnz(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSummary,
}

/// Wall-clock figures; the only nondeterministic part of a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub epoch_seconds: Vec<f64>,
    /// Median over epochs after the first (all epochs if only one ran).
    pub median_epoch_seconds: f64,
}

impl Timing {
    pub fn new(epoch_seconds: Vec<f64>) -> Self {
        let mut rest: Vec<f64> = if epoch_seconds.len() > 1 {
            epoch_seconds[1..].to_vec()
        } else {
            epoch_seconds.clone()
        };
        rest.sort_by(f64::total_cmp);
        let median = match rest.len() {
            0 => 0.0,
            n if n % 2 == 1 => rest[n / 2],
            n => 0.5 * (rest[n / 2 - 1] + rest[n / 2]),
        };
        Self {
            epoch_seconds,
            median_epoch_seconds: median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config: ConfigEcho,
    pub metrics: Metrics,
    pub memory: MemoryReport,
    /// Mean training loss per epoch.
    pub loss: Vec<f64>,
    pub timing: Timing,
}

impl MetricsReport {
    /// The report without its timing subtree, for reproducibility checks.
    pub fn deterministic_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("object").remove("timing");
        v
    }
}

pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub report: MetricsReport,
    pub epochs: Vec<EpochStats>,
}

/// Trains for `cfg.epochs` epochs with the compressed tape and evaluates on
/// the test split.
pub fn train(ds: &KgDataset, model: ModelConfig, cfg: TrainConfig) -> Result<TrainOutcome<f32>> {
    train_with(ds, model, cfg, TapeEngine)
}

pub fn train_with<T: Element, E: StepEngine<T>>(
    ds: &KgDataset,
    model: ModelConfig,
    cfg: TrainConfig,
    engine: E,
) -> Result<TrainOutcome<T>> {
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let mut trainer = Trainer::new(ds, model, cfg, engine)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epochs.push(trainer.train_epoch()?);
    }
    let metrics = trainer.evaluate(cfg.k)?;
    let last = epochs.last().expect("at least one epoch");
    let mut memory = memory_report(&last.ledger, model.quant);
    memory.peak_context_bytes = epochs
        .iter()
        .map(|e| e.peak_context_bytes)
        .max()
        .unwrap_or(0);
    memory.peak_aux_bytes = epochs.iter().map(|e| e.peak_aux_bytes).max().unwrap_or(0);
    memory.retained_bytes_after_backward =
        epochs.iter().map(|e| e.retained_bytes).max().unwrap_or(0);
    let report = MetricsReport {
        config: ConfigEcho {
            model,
            train: cfg,
            dataset: DatasetSummary::new(ds, trainer.adjacency()),
        },
        metrics,
        memory,
        loss: epochs.iter().map(|e| e.mean_loss).collect(),
        timing: Timing::new(epochs.iter().map(|e| e.seconds).collect()),
    };
    Ok(TrainOutcome {
        params: trainer.into_params(),
        report,
        epochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundingPair {
    pub seed: u64,
    pub stochastic_loss: f64,
    pub nearest_loss: f64,
    pub stochastic: Metrics,
    pub nearest: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundingComparison {
    pub bits: u8,
    pub pairs: Vec<RoundingPair>,
    /// Seeds where the stochastic arm's final loss is at most the nearest arm's.
    pub stochastic_wins: usize,
}

/// Trains twin models per seed that differ only in the rounding mode.
pub fn compare_rounding(
    ds: &KgDataset,
    model: ModelConfig,
    cfg: TrainConfig,
    seeds: &[u64],
) -> Result<RoundingComparison> {
    if seeds.is_empty() {
        return Err(Error::Config(
            "compare_rounding needs at least one seed".into(),
        ));
    }
    let bits = model.quant.bits();
    let arm = |rounding, seed| -> Result<(f64, Metrics)> {
        let model = ModelConfig {
            quant: QuantConfig::new(bits, rounding)?,
            ..model
        };
        let out = train(ds, model, TrainConfig { seed, ..cfg })?;
        Ok((
            *out.report.loss.last().expect("epochs >= 1"),
            out.report.metrics,
        ))
    };
    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (stochastic_loss, stochastic) = arm(Rounding::Stochastic, seed)?;
        let (nearest_loss, nearest) = arm(Rounding::Nearest, seed)?;
        pairs.push(RoundingPair {
            seed,
            stochastic_loss,
            nearest_loss,
            stochastic,
            nearest,
        });
    }
    let stochastic_wins = pairs
        .iter()
        .filter(|p| p.stochastic_loss <= p.nearest_loss)
        .count();
    Ok(RoundingComparison {
        bits,
        pairs,
        stochastic_wins,
    })
}
