//! Monte-Carlo checks of the quantizer and of the gradient variance added
//! by context quantization.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kgnn::{ModelConfig, ModelParams};
use crate::quant::{dequantize_row_into, quantize_row_into, QuantConfig, RandomStream};
use crate::tensor::{CsrMatrix, DenseMatrix, Element};
use crate::trainer::{derive_seed, Batch, StepEngine, TapeEngine};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamVariance {
    /// `e0` or `theta<l>`.
    pub name: String,
    /// Across-trial variance averaged over the tensor's elements.
    pub mean_variance: f64,
    pub max_variance: f64,
    /// Mean squared entry of the trial-averaged gradient, for scale.
    pub mean_square_gradient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceProbe {
    pub bits: u8,
    pub trials: usize,
    pub params: Vec<ParamVariance>,
    /// Across-trial variance averaged over every gradient element. The
    /// forward pass is exact, so all of it comes from quantization.
    pub mean_extra_variance: f64,
}

/// Repeats the step on one fixed batch with `trials` independent
/// quantization seeds and accumulates per-element variance (Welford).
pub fn gradient_variance_probe<T: Element>(
    params: &ModelParams<T>,
    adj: &Arc<CsrMatrix<T>>,
    cfg: &ModelConfig,
    batch: &Batch,
    lambda: T,
    trials: usize,
    seed: u64,
) -> Result<VarianceProbe> {
    if trials < 2 {
        return Err(Error::Config(
            "variance probe needs at least two trials".into(),
        ));
    }
    let mut engine = TapeEngine;
    let sizes: Vec<usize> = params.tensors().map(|t| t.len()).collect();
    let mut mean: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut m2: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for t in 0..trials {
        let out = engine.step(
            params,
            adj,
            cfg,
            batch,
            lambda,
            derive_seed(seed, &[t as u64]),
        )?;
        let n = (t + 1) as f64;
        for ((g, mu), m2) in out.grads.iter().zip(&mut mean).zip(&mut m2) {
            for ((&x, mu), m2) in g.data().iter().zip(mu.iter_mut()).zip(m2.iter_mut()) {
                let x = x.to_f64();
                let delta = x - *mu;
                *mu += delta / n;
                *m2 += delta * (x - *mu);
            }
        }
    }
    let denom = (trials - 1) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    let params_out = mean
        .iter()
        .zip(&m2)
        .enumerate()
        .map(|(i, (mu, m2))| {
            let var_sum: f64 = m2.iter().map(|v| v / denom).sum();
            total += var_sum;
            count += m2.len();
            ParamVariance {
                name: if i == 0 {
                    "e0".into()
                } else {
                    format!("theta{}", i - 1)
                },
                mean_variance: var_sum / m2.len() as f64,
                max_variance: m2.iter().map(|v| v / denom).fold(0.0, f64::max),
                mean_square_gradient: mu.iter().map(|x| x * x).sum::<f64>() / mu.len() as f64,
            }
        })
        .collect();
    Ok(VarianceProbe {
        bits: cfg.quant.bits(),
        trials,
        params: params_out,
        mean_extra_variance: total / count as f64,
    })
}

/// Runs the probe for each bit width with everything else fixed.
#[allow(clippy::too_many_arguments)]
pub fn variance_sweep<T: Element>(
    params: &ModelParams<T>,
    adj: &Arc<CsrMatrix<T>>,
    cfg: &ModelConfig,
    batch: &Batch,
    lambda: T,
    bits: &[u8],
    trials: usize,
    seed: u64,
) -> Result<Vec<VarianceProbe>> {
    bits.iter()
        .map(|&b| {
            let cfg = ModelConfig {
                quant: QuantConfig::new(b, cfg.quant.rounding())?,
                ..*cfg
            };
            gradient_variance_probe(params, adj, &cfg, batch, lambda, trials, seed)
        })
        .collect()
}

/// Empirical mean and variance of `Dequant(Quant(x))` against the bounds
/// `R^2/(4B^2)` per element and `d R^2/(4B^2)` per row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantizerCheck {
    pub bits: u8,
    pub rows: usize,
    pub dim: usize,
    pub trials: usize,
    /// Largest `|mean - x|` as a fraction of `4 sqrt(R^2/(4B^2)/trials)`.
    pub worst_mean_deviation: f64,
    /// Largest row variance as a fraction of `d R^2/(4B^2)`.
    pub worst_row_variance: f64,
    /// Mean of the same fraction over rows.
    pub mean_row_variance: f64,
    pub unbiased: bool,
    /// Worst row variance at most 1.05 of the bound.
    pub variance_bounded: bool,
}

impl QuantizerCheck {
    pub fn pass(&self) -> bool {
        self.unbiased && self.variance_bounded
    }
}

/// Quantizes `rows` random rows with values in `[-1, 1]` `trials` times each
/// with stochastic rounding and compares the statistics with the bounds.
pub fn quantizer_check(
    bits: u8,
    rows: usize,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<QuantizerCheck> {
    let cfg = QuantConfig::stochastic(bits)?;
    if rows == 0 || dim == 0 || trials < 2 {
        return Err(Error::Config(
            "quantizer check needs rows, dim >= 1 and trials >= 2".into(),
        ));
    }
    let data = DenseMatrix::<f64>::uniform(
        rows,
        dim,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])),
    );
    let mut check = QuantizerCheck {
        bits,
        rows,
        dim,
        trials,
        worst_mean_deviation: 0.0,
        worst_row_variance: 0.0,
        mean_row_variance: 0.0,
        unbiased: true,
        variance_bounded: true,
    };
    if cfg.is_passthrough() {
        return Ok(check);
    }
    let bins = cfg.bins() as f64;
    let streams = RandomStream::new(derive_seed(seed, &[1]));
    let m = trials as f64;
    let mut codes = vec![0u8; dim];
    let mut deq = vec![0.0f64; dim];
    let mut sum = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    for r in 0..rows {
        let row = data.row(r);
        let mut stream = streams.row(0, r as u64);
        sum.fill(0.0);
        sq.fill(0.0);
        let mut range = 0.0f32;
        for _ in 0..trials {
            let (rr, z) = quantize_row_into(row, cfg, &mut stream, &mut codes);
            dequantize_row_into(&codes, rr, z, cfg.bins(), &mut deq);
            range = rr;
            for (((s, q), &y), &x) in sum.iter_mut().zip(sq.iter_mut()).zip(&deq).zip(row) {
                let err = y - x;
                *s += err;
                *q += err * err;
            }
        }
        let elem_bound = (range as f64).powi(2) / (4.0 * bins * bins);
        if elem_bound == 0.0 {
            continue;
        }
        let tol = 4.0 * (elem_bound / m).sqrt();
        let mut row_var = 0.0;
        for (&s, &q) in sum.iter().zip(&sq) {
            let mean = s / m;
            check.worst_mean_deviation = check.worst_mean_deviation.max(mean.abs() / tol);
            row_var += (q - m * mean * mean) / (m - 1.0);
        }
        let ratio = row_var / (dim as f64 * elem_bound);
        check.worst_row_variance = check.worst_row_variance.max(ratio);
        check.mean_row_variance += ratio / rows as f64;
    }
    check.unbiased = check.worst_mean_deviation <= 1.0;
    check.variance_bounded = check.worst_row_variance <= 1.05;
    Ok(check)
}
