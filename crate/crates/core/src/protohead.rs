//! Prototypes, squared-distance distributions, nearest-prototype prediction
//! and the tanh confusion projection.

use serde::{Deserialize, Serialize};

use crate::error::{CtegError, Result};
use crate::layers::Init;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistancePair {
    pub delta: Vec<f64>,
    pub delta_bar: Vec<f64>,
}

/// Mean of the support representations.
pub fn prototype(support: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = support.first().ok_or(CtegError::EmptyInput("prototype"))?;
    let mut out = vec![0.0; first.len()];
    for rep in support {
        if rep.len() != out.len() {
            return Err(CtegError::ShapeMismatch {
                op: "prototype",
                left: vec![out.len()],
                right: vec![rep.len()],
            });
        }
        for (o, v) in out.iter_mut().zip(rep) {
            *o += v;
        }
    }
    let k = support.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// Squared Euclidean distance from the query to each prototype.
pub fn distance_distribution(query: &[f64], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    prototypes
        .iter()
        .map(|c| {
            if c.len() != query.len() {
                return Err(CtegError::ShapeMismatch {
                    op: "distance_distribution",
                    left: vec![query.len()],
                    right: vec![c.len()],
                });
            }
            Ok(query.iter().zip(c).map(|(s, c)| (s - c) * (s - c)).sum())
        })
        .collect()
}

/// Index of the smallest distance; the first one wins ties.
pub fn predict(delta: &[f64]) -> usize {
    let mut best = 0;
    for (j, &d) in delta.iter().enumerate() {
        if d < delta[best] {
            best = j;
        }
    }
    best
}

/// `tanh(W δ + b)` with `W` given row-major as N×N.
pub fn confusion_projection(delta: &[f64], w: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let n = delta.len();
    if w.shape() != [n, n] || b.len() != n {
        return Err(CtegError::ShapeMismatch {
            op: "confusion_projection",
            left: w.shape().to_vec(),
            right: vec![n],
        });
    }
    Ok((0..n)
        .map(|i| {
            let z: f64 = w.row(i).iter().zip(delta).map(|(w, d)| w * d).sum();
            (z + b[i]).tanh()
        })
        .collect())
}

/// The trainable projection `W^c`, `b^c` for a fixed way count.
#[derive(Debug, Clone)]
pub struct ProtoHead {
    pub n_way: usize,
    pub wc: ParamId,
    pub bc: ParamId,
}

impl ProtoHead {
    pub fn new(store: &mut ParamStore, init: Init, n_way: usize) -> Result<Self> {
        if n_way == 0 {
            return Err(CtegError::Config("way count must be positive".into()));
        }
        Ok(ProtoHead {
            n_way,
            wc: init.weight(store, "head.wc", &[n_way, n_way])?,
            bc: init.bias(store, "head.bc", n_way)?,
        })
    }

    /// Prototypes (N×d) from per-way support representations.
    pub fn prototypes(&self, g: &mut Graph, support: &[Vec<Var>]) -> Result<Var> {
        if support.is_empty() {
            return Err(CtegError::EmptyInput("prototypes"));
        }
        let protos = support
            .iter()
            .map(|reps| {
                if reps.is_empty() {
                    return Err(CtegError::EmptyInput("prototype"));
                }
                let m = g.stack(reps)?;
                g.mean_rows(m)
            })
            .collect::<Result<Vec<_>>>()?;
        g.stack(&protos)
    }

    pub fn distances(&self, g: &mut Graph, query: Var, prototypes: Var) -> Result<Var> {
        g.sq_dist(query, prototypes)
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, delta: Var) -> Result<Var> {
        let n = g.value(delta).len();
        if n != self.n_way {
            return Err(CtegError::ShapeMismatch {
                op: "confusion_projection",
                left: vec![self.n_way, self.n_way],
                right: vec![n],
            });
        }
        let (w, b) = (g.param(store, self.wc), g.param(store, self.bc));
        // row-vector form computes δ·Wᵀ = (W δ)ᵀ
        let wt = g.transpose(w)?;
        let z = g.linear_vec(delta, wt, b)?;
        Ok(g.tanh(z))
    }
}
