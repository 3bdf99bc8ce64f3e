use kgact_bench::{default_dataset, random_matrix, step_fixture};
use kgact_core::trainer::{StepEngine, TapeEngine};
use kgact_core::ModelConfig;

#[test]
fn step_fixture_runs_one_step() {
    let ds = default_dataset();
    let model = ModelConfig::default();
    let f = step_fixture(&ds, &model);
    assert_eq!(f.params.e0.rows(), ds.num_nodes());
    assert_eq!(f.batch.len(), 1024);
    let out = TapeEngine
        .step(&f.params, &f.adj, &model, &f.batch, 1e-5, 0)
        .unwrap();
    assert!(out.loss.is_finite());
}

#[test]
fn random_matrix_is_seeded() {
    let a = random_matrix(4, 3, 1);
    assert_eq!(a, random_matrix(4, 3, 1));
    assert!(a.data().iter().all(|x| x.abs() <= 1.0));
}
