//! Graph-convolution backbone `E^(l+1) = relu(Â E^(l) Θ^(l))` with layer
//! readout and dot-product scoring.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantConfig;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{dot, CsrMatrix, DenseMatrix, Element};

/// How per-layer outputs are combined into the readout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Elementwise sum of `E^(1) .. E^(L)`.
    #[default]
    Sum,
    /// `E^(L)` only.
    Last,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Last => "last",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "last" => Ok(Self::Last),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub aggregation: Aggregation,
    pub quant: QuantConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 64,
            aggregation: Aggregation::Sum,
            quant: QuantConfig::stochastic(2).expect("2 bits is supported"),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 {
            return Err(Error::Config(format!(
                "layers and dim must be positive, got {} and {}",
                self.layers, self.dim
            )));
        }
        Ok(())
    }
}

/// Trainable state: entity embeddings `E0` (N x d) and one `d x d` weight per
/// layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub e0: DenseMatrix<T>,
    pub thetas: Vec<DenseMatrix<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn layers(&self) -> usize {
        self.thetas.len()
    }

    pub fn dim(&self) -> usize {
        self.e0.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.e0.is_finite() && self.thetas.iter().all(DenseMatrix::is_finite)
    }

    /// Parameters in registration order: `E0`, then `Θ^(0) .. Θ^(L-1)`.
    pub fn tensors(&self) -> impl Iterator<Item = &DenseMatrix<T>> {
        std::iter::once(&self.e0).chain(&self.thetas)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix<T>> {
        std::iter::once(&mut self.e0).chain(&mut self.thetas)
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            e0: self.e0.cast(),
            thetas: self.thetas.iter().map(DenseMatrix::cast).collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.thetas.len() == other.thetas.len()
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.bitwise_eq(b))
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.thetas.len() != cfg.layers {
            return Err(Error::Config(format!(
                "model has {} layer weights, config asks for {}",
                self.thetas.len(),
                cfg.layers
            )));
        }
        for t in &self.thetas {
            if t.shape() != (self.dim(), self.dim()) {
                return Err(Error::Dimension {
                    op: "forward",
                    left: self.e0.shape(),
                    right: t.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Xavier-uniform initialization. `E0` uses fan `(N, d)`, each `Θ` uses
/// `(d, d)`. One stream seeded by `seed` fills `E0` then the weights in order.
pub fn init_params<T: Element>(n: usize, cfg: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    let e0 = DenseMatrix::uniform(n, d, xavier(n, d), &mut rng);
    let thetas = (0..cfg.layers)
        .map(|_| DenseMatrix::uniform(d, d, xavier(d, d), &mut rng))
        .collect();
    ModelParams { e0, thetas }
}

/// Handles returned by [`forward_all`].
pub struct ForwardOutput<T> {
    pub readout: Var<T>,
    pub e0: ParamId,
    pub thetas: Vec<ParamId>,
}

/// Records `L` blocks of spmm, mm and relu and the readout. Parameters are
/// copied onto the tape; gradients come back under the returned ids.
pub fn forward_all<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    adj: &Arc<CsrMatrix<T>>,
    cfg: &ModelConfig,
) -> Result<ForwardOutput<T>> {
    cfg.validate()?;
    params.check(cfg)?;
    let (e0, mut h) = tape.leaf(params.e0.clone());
    let thetas: Vec<ParamId> = params
        .thetas
        .iter()
        .map(|t| tape.weight(t.clone()))
        .collect();
    let mut layers = Vec::with_capacity(cfg.layers);
    for &theta in &thetas {
        let propagated = tape.record_spmm(adj, &h)?;
        let transformed = tape.record_mm(&propagated, theta)?;
        drop(propagated);
        h = tape.record_relu(&transformed)?;
        if cfg.aggregation == Aggregation::Sum {
            layers.push(h.clone());
        }
    }
    let readout = match cfg.aggregation {
        Aggregation::Sum => {
            drop(h);
            let refs: Vec<&Var<T>> = layers.iter().collect();
            tape.record_add(&refs)?
        }
        Aggregation::Last => h,
    };
    Ok(ForwardOutput {
        readout,
        e0,
        thetas,
    })
}

/// Readout rows for every node, computed without recording.
pub fn embed<T: Element>(
    params: &ModelParams<T>,
    adj: &Arc<CsrMatrix<T>>,
    cfg: &ModelConfig,
) -> Result<DenseMatrix<T>> {
    let mut tape = Tape::inference();
    Ok(forward_all(&mut tape, params, adj, cfg)?
        .readout
        .into_value())
}

/// Gathers user, positive and negative rows of the readout and records the
/// regularized BPR loss. Indices are node indices.
pub fn record_bpr_batch<T: Element>(
    tape: &mut Tape<T>,
    readout: &Var<T>,
    users: &[usize],
    pos: &[usize],
    neg: &[usize],
    lambda: T,
) -> Result<Var<T>> {
    let u = tape.record_gather(readout, users)?;
    let p = tape.record_gather(readout, pos)?;
    let n = tape.record_gather(readout, neg)?;
    tape.record_bpr_loss(&u, &p, &n, lambda)
}

/// Inner product of two readout rows.
pub fn score<T: Element>(user_row: &[T], item_row: &[T]) -> T {
    dot(user_row, item_row)
}
