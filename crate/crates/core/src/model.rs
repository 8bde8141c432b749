//! Trainable per-stream heads and two-stream late fusion.
//!
//! A stream head maps an input embedding `x` to
//!
//! ```text
//! F      = A·x + c                       (feature adapter)
//! body   = W_B·F + b_B                   (body classifier)
//! action = W₁·F + b₁ + γ·cos(W₂·F + b₂, P_A)
//! ```
//!
//! The adapter is the trainable end of the feature extractor: the calibration
//! losses act on `F` and reach the parameters through it. Prototypes enter the
//! forward pass as constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, axpy, dot, norm, Mat, NORM_EPS};
use crate::partition::BatchPredictions;

/// Weight matrices are stored output-major: `rows = outputs`, `cols = inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub adapter_w: Mat,
    pub adapter_b: Vec<f64>,
    pub body_w: Mat,
    pub body_b: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(d: usize, n_body: usize, n_action: usize) -> Self {
        HeadParams {
            adapter_w: Mat::zeros(d, d),
            adapter_b: vec![0.0; d],
            body_w: Mat::zeros(n_body, d),
            body_b: vec![0.0; n_body],
            w1: Mat::zeros(n_action, d),
            b1: vec![0.0; n_action],
            w2: Mat::zeros(d, d),
            b2: vec![0.0; d],
        }
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams::zeros(self.adapter_w.rows, self.body_w.rows, self.w1.rows)
    }

    /// `(name, values, decays)` for every tensor. Only weight matrices decay.
    pub fn tensors(&self) -> [(&'static str, &[f64], bool); 8] {
        [
            ("adapter_w", &self.adapter_w.data, true),
            ("adapter_b", &self.adapter_b, false),
            ("body_w", &self.body_w.data, true),
            ("body_b", &self.body_b, false),
            ("w1", &self.w1.data, true),
            ("b1", &self.b1, false),
            ("w2", &self.w2.data, true),
            ("b2", &self.b2, false),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64], bool); 8] {
        [
            ("adapter_w", &mut self.adapter_w.data, true),
            ("adapter_b", &mut self.adapter_b, false),
            ("body_w", &mut self.body_w.data, true),
            ("body_b", &mut self.body_b, false),
            ("w1", &mut self.w1.data, true),
            ("b1", &mut self.b1, false),
            ("w2", &mut self.w2.data, true),
            ("b2", &mut self.b2, false),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.1.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, t, _) in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.1.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHead {
    pub params: HeadParams,
    pub gamma: f64,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub feats: Mat,
    transformed: Mat,
    transformed_norms: Vec<f64>,
    /// `cos(W₂F + b₂, p_k)` per sample and action class.
    pub similarity: Mat,
    pub preds: BatchPredictions,
    /// Samples whose transformed vector had near-zero norm.
    pub degenerate: usize,
}

/// Unit rows of a prototype matrix; degenerate rows come back as zeros.
pub(crate) fn unit_rows(protos: &Mat) -> Mat {
    let mut out = protos.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = norm(row);
        if n > NORM_EPS {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.fill(0.0);
        }
    }
    out
}

impl StreamHead {
    /// Identity adapter and transform, small Gaussian classifier weights.
    pub fn init(d: usize, n_body: usize, n_action: usize, gamma: f64, seed: u64) -> Self {
        let mut params = HeadParams::zeros(d, n_body, n_action);
        params.adapter_w = Mat::identity(d);
        params.w2 = Mat::identity(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        for v in params.body_w.data.iter_mut().chain(params.w1.data.iter_mut()) {
            *v = normal.sample(&mut rng);
        }
        StreamHead { params, gamma }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let p = &self.params;
        (p.adapter_w.cols, p.body_w.rows, p.w1.rows)
    }

    fn check(&self, inputs: &Mat, protos: &Mat) -> Result<()> {
        let (d, nb, na) = self.dims();
        let p = &self.params;
        let shapes_ok = p.adapter_w.rows == d
            && p.adapter_b.len() == d
            && p.body_w.cols == d
            && p.body_b.len() == nb
            && p.w1.cols == d
            && p.b1.len() == na
            && p.w2.rows == d
            && p.w2.cols == d
            && p.b2.len() == d;
        if !shapes_ok {
            return Err(Error::contract("stream head has inconsistent parameter shapes"));
        }
        if inputs.cols != d {
            return Err(Error::contract(format!(
                "inputs have dimension {}, head expects {d}",
                inputs.cols
            )));
        }
        if protos.cols != d || protos.rows != na {
            return Err(Error::contract(format!(
                "action prototypes are {}x{}, head expects {na}x{d}",
                protos.rows, protos.cols
            )));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &Mat, protos: &Mat) -> Result<ForwardPass> {
        self.check(inputs, protos)?;
        let (d, nb, na) = self.dims();
        let n = inputs.rows;
        let p = &self.params;
        let units = unit_rows(protos);
        let mut feats = Mat::zeros(n, d);
        let mut transformed = Mat::zeros(n, d);
        let mut norms = vec![0.0; n];
        let mut similarity = Mat::zeros(n, na);
        let mut body = Mat::zeros(n, nb);
        let mut action = Mat::zeros(n, na);
        let mut degenerate = 0;
        for i in 0..n {
            let f = feats.row_mut(i);
            p.adapter_w.matvec(inputs.row(i), f);
            axpy(1.0, &p.adapter_b, f);
            let f = feats.row(i);

            let bl = body.row_mut(i);
            p.body_w.matvec(f, bl);
            axpy(1.0, &p.body_b, bl);

            let al = action.row_mut(i);
            p.w1.matvec(f, al);
            axpy(1.0, &p.b1, al);

            let u = transformed.row_mut(i);
            p.w2.matvec(f, u);
            axpy(1.0, &p.b2, u);
            let un = norm(u);
            norms[i] = un;
            if un <= NORM_EPS {
                degenerate += 1;
                continue;
            }
            let u = transformed.row(i);
            let sim = similarity.row_mut(i);
            for (k, s) in sim.iter_mut().enumerate() {
                *s = dot(u, units.row(k)) / un;
            }
            if self.gamma != 0.0 {
                axpy(self.gamma, similarity.row(i), action.row_mut(i));
            }
        }
        let preds = BatchPredictions::from_logits(body, action)?;
        Ok(ForwardPass {
            feats,
            transformed,
            transformed_norms: norms,
            similarity,
            preds,
            degenerate,
        })
    }

    pub fn predict(&self, inputs: &Mat, protos: &Mat) -> Result<BatchPredictions> {
        Ok(self.forward(inputs, protos)?.preds)
    }

    /// Gradients of a scalar objective given its gradients with respect to the
    /// body logits, the action logits and (optionally) the adapter features.
    pub fn backward(
        &self,
        inputs: &Mat,
        protos: &Mat,
        pass: &ForwardPass,
        g_body: &Mat,
        g_action: &Mat,
        g_feats: Option<&Mat>,
    ) -> HeadParams {
        let (d, _, na) = self.dims();
        let p = &self.params;
        let mut g = p.zeros_like();
        let units = unit_rows(protos);
        let mut df = vec![0.0; d];
        let mut du = vec![0.0; d];
        for i in 0..inputs.rows {
            let f = pass.feats.row(i);
            let gb = g_body.row(i);
            let ga = g_action.row(i);
            df.fill(0.0);

            g.body_w.add_outer(1.0, gb, f);
            axpy(1.0, gb, &mut g.body_b);
            p.body_w.matvec_t_acc(gb, &mut df);

            g.w1.add_outer(1.0, ga, f);
            axpy(1.0, ga, &mut g.b1);
            p.w1.matvec_t_acc(ga, &mut df);

            let un = pass.transformed_norms[i];
            if self.gamma != 0.0 && un > NORM_EPS {
                // ∇_u Σ_k s_k cos(u, p_k) = Σ_k s_k p̂_k / |u| − (Σ_k s_k c_k) u / |u|²
                let u = pass.transformed.row(i);
                let sim = pass.similarity.row(i);
                du.fill(0.0);
                let mut sc = 0.0;
                for k in 0..na {
                    let s = self.gamma * ga[k];
                    if s != 0.0 {
                        axpy(s / un, units.row(k), &mut du);
                        sc += s * sim[k];
                    }
                }
                axpy(-sc / (un * un), u, &mut du);
                g.w2.add_outer(1.0, &du, f);
                axpy(1.0, &du, &mut g.b2);
                p.w2.matvec_t_acc(&du, &mut df);
            }

            if let Some(gf) = g_feats {
                axpy(1.0, gf.row(i), &mut df);
            }
            g.adapter_w.add_outer(1.0, &df, inputs.row(i));
            axpy(1.0, &df, &mut g.adapter_b);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Average of the two streams' class probabilities.
    #[default]
    ProbMean,
    /// Sum of the two streams' logits.
    LogitSum,
}

/// Late fusion of two streams' predictions over the same batch.
pub fn fuse(a: &BatchPredictions, b: &BatchPredictions, mode: Fusion) -> Result<BatchPredictions> {
    let same = |x: &Mat, y: &Mat| x.rows == y.rows && x.cols == y.cols;
    if !same(&a.body_logits, &b.body_logits) || !same(&a.action_logits, &b.action_logits) {
        return Err(Error::contract("fuse: prediction shapes differ"));
    }
    match mode {
        Fusion::LogitSum => {
            let sum = |x: &Mat, y: &Mat| Mat {
                rows: x.rows,
                cols: x.cols,
                data: x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect(),
            };
            BatchPredictions::from_logits(
                sum(&a.body_logits, &b.body_logits),
                sum(&a.action_logits, &b.action_logits),
            )
        }
        Fusion::ProbMean => {
            let mean = |x: &Mat, y: &Mat| Mat {
                rows: x.rows,
                cols: x.cols,
                data: x.data.iter().zip(&y.data).map(|(p, q)| 0.5 * (p + q)).collect(),
            };
            let log = |m: &Mat| Mat {
                rows: m.rows,
                cols: m.cols,
                data: m.data.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect(),
            };
            let preds = |m: &Mat| (0..m.rows).map(|r| argmax(m.row(r))).collect::<Vec<_>>();
            let body_probs = mean(&a.body_probs, &b.body_probs);
            let action_probs = mean(&a.action_probs, &b.action_probs);
            Ok(BatchPredictions {
                body_logits: log(&body_probs),
                action_logits: log(&action_probs),
                body_pred: preds(&body_probs),
                action_pred: preds(&action_probs),
                body_probs,
                action_probs,
            })
        }
    }
}
