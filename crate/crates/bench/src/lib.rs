//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use kgact_core::graphdata::{build_adjacency, synth_generate, KgDataset, SynthSpec};
use kgact_core::kgnn::{init_params, ModelConfig, ModelParams};
use kgact_core::trainer::{Batch, TapeEngine, TrainConfig, Trainer};
use kgact_core::{CsrMatrix, DenseMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1]` matrix.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f32> {
    DenseMatrix::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn default_dataset() -> KgDataset {
    synth_generate(&SynthSpec::default()).expect("default synthetic dataset")
}

pub fn adjacency(ds: &KgDataset) -> Arc<CsrMatrix<f32>> {
    Arc::new(build_adjacency(ds))
}

/// Everything one training step needs, on the default synthetic dataset.
pub struct StepFixture {
    pub params: ModelParams<f32>,
    pub adj: Arc<CsrMatrix<f32>>,
    pub batch: Batch,
}

pub fn step_fixture(ds: &KgDataset, model: &ModelConfig) -> StepFixture {
    let cfg = TrainConfig::default();
    let trainer = Trainer::<f32, _>::new(ds, *model, cfg, TapeEngine).expect("valid config");
    let batch = trainer.epoch_batches(0).expect("batches").swap_remove(0);
    StepFixture {
        params: init_params(ds.num_nodes(), model, 0),
        adj: trainer.adjacency().clone(),
        batch,
    }
}
