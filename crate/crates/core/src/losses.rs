//! Objective terms and their analytic gradients.
//!
//! * cross-entropy on logits
//! * the hierarchical loss over the joint body+action score vector
//! * prototype contrastive calibration on ambiguous samples
//! * the weighted sum that forms the per-stream objective
//!
//! Cosine similarity plays the role of `dis(,)` everywhere: larger means closer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cos_grad_acc, log_sum_exp, norm, softmax_into, Mat};
use crate::partition::{FnKind, SamplePartition};
use crate::prototype::Level;
use crate::taxonomy::ActionTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HpMode {
    /// Parent body score added to each child action score.
    #[default]
    Tree,
    /// Plain concatenation of body and action scores.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpSign {
    /// False-positive term exactly as the calibration formula reads.
    #[default]
    Paper,
    /// False-positive `Z` negated, pushing samples away from the claimed prototype.
    Repel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub lambda: f64,
    pub rho: f64,
    pub tau: f64,
    pub alpha: [f64; 3],
    pub beta: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda: 1.0,
            rho: 0.9,
            tau: 0.125,
            alpha: [1.0, 0.5, 0.1],
            beta: 5.0,
            gamma_a: 1.0,
            gamma_b: 5.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0, 1), got {}", self.rho));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad(format!("alpha components must be >= 0, got {:?}", self.alpha));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("gamma_a", self.gamma_a),
            ("gamma_b", self.gamma_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over the batch; gradient is `(softmax − onehot)/n`.
pub fn ce_loss(logits: &Mat, gt: &[usize]) -> Result<(f64, Mat)> {
    if logits.rows != gt.len() {
        return Err(Error::contract(format!(
            "ce_loss: {} rows for {} labels",
            logits.rows,
            gt.len()
        )));
    }
    let n = gt.len().max(1) as f64;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for (i, &y) in gt.iter().enumerate() {
        if y >= logits.cols {
            return Err(Error::Range {
                what: "class label",
                index: y,
                len: logits.cols,
            });
        }
        let z = logits.row(i);
        total += log_sum_exp(z) - z[y];
        let g = grad.row_mut(i);
        softmax_into(z, g);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, grad))
}

/// Hierarchical loss. Builds `q_J = [λ·q_B ; q_A + λ·q_B[parent]]` per sample
/// (or `[λ·q_B ; q_A]` in concat mode) and returns the mean of
/// `−log softmax(q_J)[N_B + gt]` with gradients for body and action logits.
pub fn hp_loss(
    tree: &ActionTree,
    body_logits: &Mat,
    action_logits: &Mat,
    gt_action: &[usize],
    lambda: f64,
    mode: HpMode,
) -> Result<(f64, Mat, Mat)> {
    let (nb, na) = (tree.n_body, tree.n_action);
    if body_logits.cols != nb || action_logits.cols != na {
        return Err(Error::contract(format!(
            "hp_loss: logits {}/{} columns for tree {nb}/{na}",
            body_logits.cols, action_logits.cols
        )));
    }
    if body_logits.rows != gt_action.len() || action_logits.rows != gt_action.len() {
        return Err(Error::contract("hp_loss: batch size mismatch"));
    }
    let n = gt_action.len().max(1) as f64;
    let mut g_body = Mat::zeros(body_logits.rows, nb);
    let mut g_action = Mat::zeros(action_logits.rows, na);
    let mut joint = vec![0.0; nb + na];
    let mut soft = vec![0.0; nb + na];
    let mut total = 0.0;
    for (i, &y) in gt_action.iter().enumerate() {
        if y >= na {
            return Err(Error::Range {
                what: "action label",
                index: y,
                len: na,
            });
        }
        let qb = body_logits.row(i);
        let qa = action_logits.row(i);
        for b in 0..nb {
            joint[b] = lambda * qb[b];
        }
        for a in 0..na {
            joint[nb + a] = match mode {
                HpMode::Tree => qa[a] + lambda * qb[tree.parent[a]],
                HpMode::Concat => qa[a],
            };
        }
        total += log_sum_exp(&joint) - joint[nb + y];
        softmax_into(&joint, &mut soft);
        soft[nb + y] -= 1.0;
        let gb = g_body.row_mut(i);
        for b in 0..nb {
            gb[b] = lambda * soft[b] / n;
        }
        let ga = g_action.row_mut(i);
        for a in 0..na {
            let s = soft[nb + a] / n;
            ga[a] = s;
            if mode == HpMode::Tree {
                gb[tree.parent[a]] += lambda * s;
            }
        }
    }
    Ok((total / n, g_body, g_action))
}

/// Kind of ambiguous membership a calibration term comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ambiguity {
    /// False negative, keyed by the true class. `omega` is 0 at body level and
    /// the A1/A2/A3 subtype index at action level.
    FalseNegative { omega: usize },
    /// False positive, keyed by the predicted class.
    FalsePositive,
}

/// One summand of the calibration loss. Detached quantities (`weight`, `q`,
/// `center`) are fixed when the term is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTerm {
    pub sample: usize,
    pub class: usize,
    pub kind: Ambiguity,
    pub weight: f64,
    /// Probability of `sample` on `class`, treated as a constant.
    pub q: f64,
    /// Index into [`CalibrationTargets::centers`].
    pub center: usize,
}

/// Set means and probabilities for one batch at one level, all detached from
/// the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTargets {
    pub level: Level,
    pub terms: Vec<CalibrationTerm>,
    pub centers: Vec<Vec<f64>>,
    /// `(class, omega) → center index` for false-negative sets.
    pub mu_fn: BTreeMap<(usize, usize), usize>,
    /// `class → center index` for false-positive sets.
    pub mu_fp: BTreeMap<usize, usize>,
}

fn set_mean(feats: &Mat, members: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; feats.cols];
    for &i in members {
        crate::numerics::axpy(1.0, feats.row(i), &mut mean);
    }
    let inv = 1.0 / members.len() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

impl CalibrationTargets {
    /// Collects every false-negative and false-positive term of `level` from
    /// the partition. `probs` are the same-level class probabilities of the
    /// batch; `alpha` weights the A1/A2/A3 subtypes (body level uses weight 1).
    pub fn build(feats: &Mat, partition: &SamplePartition, probs: &Mat, level: Level, alpha: [f64; 3]) -> Result<Self> {
        if feats.rows != probs.rows {
            return Err(Error::contract("calibration: feature/probability row mismatch"));
        }
        let mut out = CalibrationTargets {
            level,
            terms: Vec::new(),
            centers: Vec::new(),
            mu_fn: BTreeMap::new(),
            mu_fp: BTreeMap::new(),
        };
        let fn_groups: Vec<(usize, f64, &[Vec<usize>])> = match level {
            Level::Body => vec![(0, 1.0, &partition.fn_b[..])],
            Level::Action => FnKind::ALL
                .iter()
                .map(|&k| (k.index(), alpha[k.index()], partition.fn_sets(k)))
                .collect(),
        };
        let fp_sets = match level {
            Level::Body => &partition.fp_b,
            Level::Action => &partition.fp_a,
        };
        let check = |i: usize| {
            if i >= feats.rows {
                Err(Error::Range {
                    what: "batch sample",
                    index: i,
                    len: feats.rows,
                })
            } else {
                Ok(())
            }
        };
        for (omega, weight, sets) in fn_groups {
            for (k, members) in sets.iter().enumerate() {
                if members.is_empty() || weight == 0.0 {
                    continue;
                }
                members.iter().try_for_each(|&i| check(i))?;
                let c = out.centers.len();
                out.centers.push(set_mean(feats, members));
                out.mu_fn.insert((k, omega), c);
                for &i in members {
                    out.terms.push(CalibrationTerm {
                        sample: i,
                        class: k,
                        kind: Ambiguity::FalseNegative { omega },
                        weight,
                        q: probs.row(i)[k],
                        center: c,
                    });
                }
            }
        }
        for (k, members) in fp_sets.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            members.iter().try_for_each(|&i| check(i))?;
            let c = out.centers.len();
            out.centers.push(set_mean(feats, members));
            out.mu_fp.insert(k, c);
            for &i in members {
                out.terms.push(CalibrationTerm {
                    sample: i,
                    class: k,
                    kind: Ambiguity::FalsePositive,
                    weight: 1.0,
                    q: probs.row(i)[k],
                    center: c,
                });
            }
        }
        Ok(out)
    }
}

/// Per-sample auxiliaries of one calibration evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationIntermediates {
    pub targets: CalibrationTargets,
    /// `ψ_i` for false-negative members, 0 elsewhere.
    pub psi: Vec<f64>,
    /// `Ψ_i` for false-positive members, 0 elsewhere.
    pub big_psi: Vec<f64>,
    /// `Z` per term, aligned with `targets.terms`.
    pub z: Vec<f64>,
    /// Pairs whose cosine was undefined and counted as 0.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PccOutput {
    pub loss: f64,
    pub grad: Mat,
    pub intermediates: CalibrationIntermediates,
}

/// Calibration loss for fixed (detached) targets as a function of the features.
pub fn pcc_loss_with_targets(
    targets: CalibrationTargets,
    feats: &Mat,
    protos: &Mat,
    tau: f64,
    fp_sign: FpSign,
) -> Result<PccOutput> {
    if feats.cols != protos.cols {
        return Err(Error::contract(format!(
            "pcc_loss: features of dim {} against prototypes of dim {}",
            feats.cols, protos.cols
        )));
    }
    let d = feats.cols;
    let n_cls = protos.rows;
    let proto_norms: Vec<f64> = protos.row_iter().map(norm).collect();
    let center_norms: Vec<f64> = targets.centers.iter().map(|c| norm(c)).collect();
    let mut grad = Mat::zeros(feats.rows, d);
    let mut psi = vec![0.0; feats.rows];
    let mut big_psi = vec![0.0; feats.rows];
    let mut zs = Vec::with_capacity(targets.terms.len());
    let mut degenerate = 0usize;
    let mut loss = 0.0;

    let mut cos = vec![0.0; n_cls];
    let mut logits = vec![0.0; n_cls];
    let mut dir = vec![0.0; d];

    for term in &targets.terms {
        let f = feats.row(term.sample);
        let f_norm = norm(f);
        let k = term.class;
        if k >= n_cls {
            return Err(Error::Range {
                what: "prototype class",
                index: k,
                len: n_cls,
            });
        }
        for l in 0..n_cls {
            cos[l] = cos_grad_acc(f, f_norm, protos.row(l), proto_norms[l], 0.0, None).unwrap_or_else(|| {
                degenerate += 1;
                0.0
            });
        }
        let center = &targets.centers[term.center];
        let c_mu = cos_grad_acc(f, f_norm, center, center_norms[term.center], 0.0, None).unwrap_or_else(|| {
            degenerate += 1;
            0.0
        });
        let one_minus_q = 1.0 - term.q;
        // sign of ∂Z/∂cos(F, μ), and of Z itself under the repel variant
        let (z, mu_coef, z_sign) = match term.kind {
            Ambiguity::FalseNegative { .. } => {
                let p = 1.0 - c_mu;
                psi[term.sample] = p;
                (tau * cos[k] - one_minus_q * p, one_minus_q, 1.0)
            }
            Ambiguity::FalsePositive => {
                let p = 1.0 + c_mu;
                big_psi[term.sample] = p;
                let z = tau * cos[k] - one_minus_q * p;
                match fp_sign {
                    FpSign::Paper => (z, -one_minus_q, 1.0),
                    FpSign::Repel => (-z, -one_minus_q, -1.0),
                }
            }
        };
        zs.push(z);

        logits[0] = z;
        let mut j = 1;
        for l in (0..n_cls).filter(|&l| l != k) {
            logits[j] = tau * cos[l];
            j += 1;
        }
        let lse = log_sum_exp(&logits[..n_cls]);
        loss += term.weight * (lse - z);

        // dL/dZ = w(π_Z − 1); dL/dcos_l = w·π_l·τ for l ≠ k
        let g = grad.row_mut(term.sample);
        let dz = term.weight * ((logits[0] - lse).exp() - 1.0);
        dir.fill(0.0);
        let mut j = 1;
        for l in 0..n_cls {
            if l == k {
                continue;
            }
            let pi = (logits[j] - lse).exp();
            j += 1;
            cos_grad_acc(
                f,
                f_norm,
                protos.row(l),
                proto_norms[l],
                term.weight * pi * tau,
                Some(&mut dir),
            );
        }
        // Z = s·(τ cos_k − (1−q)·(1 ∓ cos_μ)), so ∂Z/∂F = s·(τ ∇cos_k + mu_coef ∇cos_μ)
        cos_grad_acc(
            f,
            f_norm,
            protos.row(k),
            proto_norms[k],
            dz * z_sign * tau,
            Some(&mut dir),
        );
        cos_grad_acc(
            f,
            f_norm,
            center,
            center_norms[term.center],
            dz * z_sign * mu_coef,
            Some(&mut dir),
        );
        crate::numerics::axpy(1.0, &dir, g);
    }

    Ok(PccOutput {
        loss,
        grad,
        intermediates: CalibrationIntermediates {
            targets,
            psi,
            big_psi,
            z: zs,
            degenerate,
        },
    })
}

/// Calibration loss at one level: builds the detached targets from the batch,
/// then evaluates the loss and its gradient with respect to the features.
#[allow(clippy::too_many_arguments)]
pub fn pcc_loss(
    feats: &Mat,
    partition: &SamplePartition,
    protos: &Mat,
    probs: &Mat,
    hp: &HyperParams,
    level: Level,
    fp_sign: FpSign,
) -> Result<PccOutput> {
    let targets = CalibrationTargets::build(feats, partition, probs, level, hp.alpha)?;
    pcc_loss_with_targets(targets, feats, protos, hp.tau, fp_sign)
}

/// Component values of one stream's objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub hp: f64,
    pub pcc_body: f64,
    pub pcc_action: f64,
    pub pda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, hp: f64, pcc_body: f64, pcc_action: f64, pda: f64, beta: f64) -> Self {
        LossBreakdown {
            ce,
            hp,
            pcc_body,
            pcc_action,
            pda,
            total: total_loss(ce, hp, pcc_body + pcc_action, pda, beta),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.hp, self.pcc_body, self.pcc_action, self.pda, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.ce += w * other.ce;
        self.hp += w * other.hp;
        self.pcc_body += w * other.pcc_body;
        self.pcc_action += w * other.pcc_action;
        self.pda += w * other.pda;
        self.total += w * other.total;
    }
}

/// `L = L_CE + L_HP + L_PCC + β·L_PDA`
pub fn total_loss(ce: f64, hp: f64, pcc: f64, pda: f64, beta: f64) -> f64 {
    ce + hp + pcc + beta * pda
}
