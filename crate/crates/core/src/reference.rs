//! Uncompressed reference step: a hand-written dense forward and backward
//! that keeps every activation at full precision.
//!
//! It shares the kernels with the tape and sums gradient contributions in
//! the same order, so a tape run at `b = 32` must reproduce it bit for bit.

use std::sync::Arc;

use crate::error::Result;
use crate::kgnn::{Aggregation, ModelConfig, ModelParams};
use crate::tape::{bpr_loss, bpr_loss_grads, ContextLedger};
use crate::tensor::{
    apply_mask, gather_rows, mm, mm_nt, mm_tn, relu, scatter_add_rows, spmm, spmm_t, BitMask,
    CsrMatrix, DenseMatrix, Element,
};
use crate::trainer::{Batch, StepEngine, StepOutput};

#[derive(Clone, Copy, Debug, Default)]
pub struct ReferenceEngine;

/// Per-layer intermediates of one reference step. `inputs[l]` is the
/// propagated matrix fed to layer `l`'s weight and `output_grads[l]` is the
/// loss gradient at that layer's pre-activation output, so the weight
/// gradient is `inputs[l]^T output_grads[l]`.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub inputs: Vec<DenseMatrix<T>>,
    pub output_grads: Vec<DenseMatrix<T>>,
}

impl<T: Element> StepEngine<T> for ReferenceEngine {
    fn step(
        &mut self,
        params: &ModelParams<T>,
        adj: &Arc<CsrMatrix<T>>,
        cfg: &ModelConfig,
        batch: &Batch,
        lambda: T,
        _seed: u64,
    ) -> Result<StepOutput<T>> {
        Ok(reference_step(params, adj, cfg, batch, lambda)?.0)
    }
}

/// Full-precision step that also returns the per-layer trace.
pub fn reference_step<T: Element>(
    params: &ModelParams<T>,
    adj: &Arc<CsrMatrix<T>>,
    cfg: &ModelConfig,
    batch: &Batch,
    lambda: T,
) -> Result<(StepOutput<T>, LayerTrace<T>)> {
    let layers = params.thetas.len();
    let mut propagated: Vec<DenseMatrix<T>> = Vec::with_capacity(layers);
    let mut masks: Vec<BitMask> = Vec::with_capacity(layers);
    let mut outputs: Vec<DenseMatrix<T>> = Vec::with_capacity(layers);
    let mut h = params.e0.clone();
    for theta in &params.thetas {
        let p = spmm(adj, &h)?;
        let (e, mask) = relu(&mm(&p, theta)?);
        propagated.push(p);
        masks.push(mask);
        outputs.push(e.clone());
        h = e;
    }
    let readout = match cfg.aggregation {
        Aggregation::Sum => {
            let mut acc = outputs[0].clone();
            for e in &outputs[1..] {
                acc.add_assign(e)?;
            }
            acc
        }
        Aggregation::Last => h,
    };

    let u = gather_rows(&readout, &batch.users)?;
    let p = gather_rows(&readout, &batch.pos)?;
    let n = gather_rows(&readout, &batch.neg)?;
    let loss = bpr_loss(&u, &p, &n, lambda)?;
    let [gu, gp, gn] = bpr_loss_grads(&u, &p, &n, lambda, T::ONE)?;
    let rows = readout.rows();
    let mut g_readout = scatter_add_rows(&gn, &batch.neg, rows);
    g_readout.add_assign(&scatter_add_rows(&gp, &batch.pos, rows))?;
    g_readout.add_assign(&scatter_add_rows(&gu, &batch.users, rows))?;

    let mut g_out: Vec<Option<DenseMatrix<T>>> = vec![None; layers];
    match cfg.aggregation {
        Aggregation::Sum => g_out.iter_mut().for_each(|g| *g = Some(g_readout.clone())),
        Aggregation::Last => g_out[layers - 1] = Some(g_readout),
    }
    let mut g_thetas: Vec<DenseMatrix<T>> = Vec::with_capacity(layers);
    let mut output_grads: Vec<DenseMatrix<T>> = Vec::with_capacity(layers);
    let mut g_e0 = None;
    for l in (0..layers).rev() {
        let g = g_out[l]
            .take()
            .expect("every layer output receives a gradient");
        let gj = apply_mask(&g, &masks[l]);
        g_thetas.push(mm_tn(&propagated[l], &gj)?);
        let gh = spmm_t(adj, &mm_nt(&gj, &params.thetas[l])?)?;
        output_grads.push(gj);
        if l == 0 {
            g_e0 = Some(gh);
        } else {
            match &mut g_out[l - 1] {
                Some(acc) => acc.add_assign(&gh)?,
                slot => *slot = Some(gh),
            }
        }
    }
    g_thetas.reverse();
    output_grads.reverse();

    let act: usize = propagated.iter().map(|p| p.len() * T::BYTES).sum();
    let fp32: usize = propagated.iter().map(|p| p.len() * 4).sum();
    let mask_bytes: usize = masks.iter().map(BitMask::stored_bytes).sum();
    let ledger = ContextLedger {
        peak_bytes: act + mask_bytes + adj.storage_bytes(),
        quantized_bytes: act,
        quantized_fp32_bytes: fp32,
        quantized_contexts: layers,
        mask_bytes,
        mask_contexts: layers,
        adjacency_bytes: adj.storage_bytes(),
        ..ContextLedger::default()
    };
    let mut grads = Vec::with_capacity(layers + 1);
    grads.push(g_e0.expect("at least one layer"));
    grads.extend(g_thetas);
    let trace = LayerTrace {
        inputs: propagated,
        output_grads,
    };
    Ok((
        StepOutput {
            loss,
            grads,
            ledger,
        },
        trace,
    ))
}
