//! Per-class prototype banks at body and action level.
//!
//! Prototypes move through two paths only: the EMA update from confident
//! samples, and (optionally) a descent step on the diversity loss. No other
//! loss backpropagates into them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, norm, Mat, NORM_EPS};
use crate::taxonomy::ActionTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Body,
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub p_body: Mat,
    pub p_action: Mat,
    pub rho: f64,
    pub init_seed: u64,
    pub body_updates: Vec<u64>,
    pub action_updates: Vec<u64>,
}

impl PrototypeBank {
    /// Random unit-norm rows, deterministic in `seed`.
    pub fn init(tree: &ActionTree, d: usize, rho: f64, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::contract("prototype dimension must be >= 1"));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must be in [0, 1), got {rho}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut draw = |rows: usize| {
            let mut m = Mat::zeros(rows, d);
            for r in 0..rows {
                loop {
                    let row = m.row_mut(r);
                    for v in row.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = z * scale;
                    }
                    let n = norm(row);
                    if n > NORM_EPS {
                        row.iter_mut().for_each(|v| *v /= n);
                        break;
                    }
                }
            }
            m
        };
        let p_body = draw(tree.n_body);
        let p_action = draw(tree.n_action);
        Ok(PrototypeBank {
            p_body,
            p_action,
            rho,
            init_seed: seed,
            body_updates: vec![0; tree.n_body],
            action_updates: vec![0; tree.n_action],
        })
    }

    pub fn dim(&self) -> usize {
        self.p_action.cols
    }

    pub fn level(&self, level: Level) -> &Mat {
        match level {
            Level::Body => &self.p_body,
            Level::Action => &self.p_action,
        }
    }

    /// `p_k ← (1−ρ)·mean(feats) + ρ·p_k`.
    pub fn ema_update(&mut self, level: Level, k: usize, feats: &[&[f64]]) -> Result<()> {
        if feats.is_empty() {
            return Err(Error::contract(format!(
                "ema_update on {level:?} class {k} with no confident samples"
            )));
        }
        let d = self.dim();
        let (bank, counts) = match level {
            Level::Body => (&mut self.p_body, &mut self.body_updates),
            Level::Action => (&mut self.p_action, &mut self.action_updates),
        };
        if k >= bank.rows {
            return Err(Error::Range {
                what: "prototype class",
                index: k,
                len: bank.rows,
            });
        }
        let mut mean = vec![0.0; d];
        for f in feats {
            if f.len() != d {
                return Err(Error::contract(format!(
                    "feature of length {} for bank of dimension {d}",
                    f.len()
                )));
            }
            axpy(1.0, f, &mut mean);
        }
        let inv = 1.0 / feats.len() as f64;
        let rho = self.rho;
        for (p, m) in bank.row_mut(k).iter_mut().zip(&mean) {
            *p = (1.0 - rho) * (m * inv) + rho * *p;
        }
        counts[k] += 1;
        Ok(())
    }
}

/// Diversity loss over prototype rows: `sqrt(Σ_i Σ_j cos(p_i, p_j))`, diagonal
/// included, which equals `‖Σ_i p_i/‖p_i‖‖`. Returns the value and its gradient
/// with respect to every row.
pub fn pda_loss(protos: &Mat) -> Result<(f64, Mat)> {
    let d = protos.cols;
    let mut norms = Vec::with_capacity(protos.rows);
    let mut sum = vec![0.0; d];
    for (i, row) in protos.row_iter().enumerate() {
        let n = norm(row);
        if n <= NORM_EPS {
            return Err(Error::Degenerate(format!("prototype row {i} has norm {n:e}")));
        }
        axpy(1.0 / n, row, &mut sum);
        norms.push(n);
    }
    let value = norm(&sum);
    let mut grad = Mat::zeros(protos.rows, d);
    if value <= NORM_EPS {
        // sqrt is not differentiable at zero; the minimum has zero subgradient.
        return Ok((value, grad));
    }
    // ∂‖s‖/∂p_i = (I − p̂_i p̂_iᵀ) s / (‖s‖ ‖p_i‖)
    for (i, row) in protos.row_iter().enumerate() {
        let n = norms[i];
        let proj = crate::numerics::dot(row, &sum) / n;
        let g = grad.row_mut(i);
        let k = 1.0 / (value * n);
        for ((gj, sj), pj) in g.iter_mut().zip(&sum).zip(row) {
            *gj = k * (sj - proj * pj / n);
        }
    }
    Ok((value, grad))
}
