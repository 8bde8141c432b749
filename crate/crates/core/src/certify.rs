//! Finite-difference certification of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::losses::{ce_loss, hp_loss, pcc_loss_with_targets, CalibrationTargets, FpSign, HpMode, HyperParams};
use crate::model::StreamHead;
use crate::numerics::{grad_check, Mat};
use crate::objective::{stream_loss, LossToggles, ObjectiveSettings};
use crate::partition::{partition_batch, partition_labels, SamplePartition};
use crate::prototype::{pda_loss, Level, PrototypeBank};
use crate::taxonomy::{ActionTree, LabelPair};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

pub const CHECKS: [&str; 10] = [
    "ce",
    "hp_tree",
    "hp_concat",
    "pcc_body_paper",
    "pcc_body_repel",
    "pcc_action_paper",
    "pcc_action_repel",
    "pda",
    "rectified_forward",
    "stream_objective",
];

const N: usize = 8;
const D: usize = 6;

fn tree() -> ActionTree {
    ActionTree::from_group_sizes(&[2, 3])
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
    m
}

fn labels(tree: &ActionTree, rng: &mut ChaCha8Rng) -> Vec<LabelPair> {
    (0..N)
        .map(|_| tree.label(rng.random_range(0..tree.n_action)).expect("in range"))
        .collect()
}

/// A partition with plenty of ambiguous members: predictions drawn at random.
fn random_partition(tree: &ActionTree, gt: &[LabelPair], rng: &mut ChaCha8Rng) -> SamplePartition {
    let bp: Vec<usize> = (0..N).map(|_| rng.random_range(0..tree.n_body)).collect();
    let ap: Vec<usize> = (0..N).map(|_| rng.random_range(0..tree.n_action)).collect();
    partition_labels(tree, gt, &bp, &ap).expect("valid labels")
}

fn random_head(rng: &mut ChaCha8Rng, tree: &ActionTree, gamma: f64) -> StreamHead {
    let mut head = StreamHead::init(D, tree.n_body, tree.n_action, gamma, rng.random());
    let mut flat = head.params.flatten();
    for v in flat.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += 0.3 * z;
    }
    head.params.unflatten(&flat);
    head
}

/// Largest relative error of one named check for one seed.
fn check_once(name: &str, seed: u64, h: f64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = tree();
    let gt = labels(&tree, &mut rng);
    let gt_a: Vec<usize> = gt.iter().map(|l| l.action).collect();
    let r = match name {
        "ce" => {
            let logits = gaussian(N, tree.n_action, 2.0, &mut rng);
            let (_, g) = ce_loss(&logits, &gt_a)?;
            let f = |x: &[f64]| {
                let m = Mat {
                    data: x.to_vec(),
                    ..logits.clone()
                };
                ce_loss(&m, &gt_a).expect("shapes fixed").0
            };
            grad_check(f, &g.data, &logits.data, h)?
        }
        "hp_tree" | "hp_concat" => {
            let mode = if name == "hp_tree" {
                HpMode::Tree
            } else {
                HpMode::Concat
            };
            let lambda = rng.random_range(0.1..3.0);
            let body = gaussian(N, tree.n_body, 2.0, &mut rng);
            let action = gaussian(N, tree.n_action, 2.0, &mut rng);
            let (_, gb, ga) = hp_loss(&tree, &body, &action, &gt_a, lambda, mode)?;
            let split = body.data.len();
            let x0: Vec<f64> = body.data.iter().chain(&action.data).copied().collect();
            let g: Vec<f64> = gb.data.iter().chain(&ga.data).copied().collect();
            let f = |x: &[f64]| {
                let b = Mat {
                    data: x[..split].to_vec(),
                    ..body.clone()
                };
                let a = Mat {
                    data: x[split..].to_vec(),
                    ..action.clone()
                };
                hp_loss(&tree, &b, &a, &gt_a, lambda, mode).expect("shapes fixed").0
            };
            grad_check(f, &g, &x0, h)?
        }
        "pcc_body_paper" | "pcc_body_repel" | "pcc_action_paper" | "pcc_action_repel" => {
            let level = if name.contains("body") {
                Level::Body
            } else {
                Level::Action
            };
            let sign = if name.ends_with("repel") {
                FpSign::Repel
            } else {
                FpSign::Paper
            };
            let n_cls = if level == Level::Body {
                tree.n_body
            } else {
                tree.n_action
            };
            let feats = gaussian(N, D, 1.0, &mut rng);
            let protos = gaussian(n_cls, D, 1.0, &mut rng);
            let logits = gaussian(N, n_cls, 1.0, &mut rng);
            let probs = crate::partition::BatchPredictions::from_logits(logits.clone(), logits)?.body_probs;
            let part = random_partition(&tree, &gt, &mut rng);
            let hp = HyperParams::default();
            let targets = CalibrationTargets::build(&feats, &part, &probs, level, hp.alpha)?;
            let out = pcc_loss_with_targets(targets.clone(), &feats, &protos, hp.tau, sign)?;
            let f = |x: &[f64]| {
                let m = Mat {
                    data: x.to_vec(),
                    ..feats.clone()
                };
                pcc_loss_with_targets(targets.clone(), &m, &protos, hp.tau, sign)
                    .expect("shapes fixed")
                    .loss
            };
            grad_check(f, &out.grad.data, &feats.data, h)?
        }
        "pda" => {
            let protos = gaussian(tree.n_action, D, 1.0, &mut rng);
            let (_, g) = pda_loss(&protos)?;
            let f = |x: &[f64]| {
                let m = Mat {
                    data: x.to_vec(),
                    ..protos.clone()
                };
                pda_loss(&m).expect("non-degenerate").0
            };
            grad_check(f, &g.data, &protos.data, h)?
        }
        "rectified_forward" => {
            // Cross-entropy through the rectified action logits alone.
            let gamma = rng.random_range(0.5..5.0);
            let head = random_head(&mut rng, &tree, gamma);
            let inputs = gaussian(N, D, 1.0, &mut rng);
            let protos = gaussian(tree.n_action, D, 1.0, &mut rng);
            let pass = head.forward(&inputs, &protos)?;
            let (_, ga) = ce_loss(&pass.preds.action_logits, &gt_a)?;
            let gb = Mat::zeros(N, tree.n_body);
            let g = head.backward(&inputs, &protos, &pass, &gb, &ga, None);
            let f = |x: &[f64]| {
                let mut hh = head.clone();
                hh.params.unflatten(x);
                let p = hh.forward(&inputs, &protos).expect("shapes fixed");
                ce_loss(&p.preds.action_logits, &gt_a).expect("shapes fixed").0
            };
            grad_check(f, &g.flatten(), &head.params.flatten(), h)?
        }
        "stream_objective" => {
            let gamma = rng.random_range(0.5..5.0);
            let head = random_head(&mut rng, &tree, gamma);
            let inputs = gaussian(N, D, 1.0, &mut rng);
            let bank = PrototypeBank::init(&tree, D, 0.9, rng.random())?;
            let hp = HyperParams::default();
            let settings = ObjectiveSettings {
                hp: &hp,
                losses: LossToggles::default(),
                hp_mode: if seed.is_multiple_of(2) {
                    HpMode::Tree
                } else {
                    HpMode::Concat
                },
                fp_sign: if seed.is_multiple_of(3) {
                    FpSign::Repel
                } else {
                    FpSign::Paper
                },
            };
            let preds = head.predict(&inputs, &bank.p_action)?;
            let part = partition_batch(&tree, &gt, &preds)?;
            let out = stream_loss(&tree, &head, &bank, &inputs, &gt, &part, 0.0, &settings, None)?;
            let frozen = out.frozen.clone();
            let f = |x: &[f64]| {
                let mut hh = head.clone();
                hh.params.unflatten(x);
                stream_loss(&tree, &hh, &bank, &inputs, &gt, &part, 0.0, &settings, frozen.as_ref())
                    .expect("shapes fixed")
                    .breakdown
                    .total
            };
            grad_check(f, &out.grads.flatten(), &head.params.flatten(), h)?
        }
        other => return Err(crate::Error::Config(format!("unknown gradient check {other:?}"))),
    };
    Ok((r.max_rel_error, r.coordinates))
}

/// Runs one named check over seeds `0..seeds`.
pub fn run_check(name: &str, seeds: usize, tolerance: f64, h: f64) -> Result<CheckResult> {
    let mut worst = (0.0, 0);
    let mut coords = 0;
    for seed in 0..seeds as u64 {
        let (err, c) = check_once(name, seed, h)?;
        coords = c;
        if err > worst.0 || seed == 0 {
            worst = (err, seed);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        seeds,
        coordinates: coords,
        max_rel_error: worst.0,
        worst_seed: worst.1,
        passed: worst.0 < tolerance,
    })
}

pub fn gradcheck_suite(seeds: usize, tolerance: f64, h: f64) -> Result<Vec<CheckResult>> {
    CHECKS.iter().map(|c| run_check(c, seeds, tolerance, h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_seeds() {
        for r in gradcheck_suite(3, 1e-4, 1e-5).unwrap() {
            assert!(r.passed, "{r:?}");
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn unknown_check_is_an_error() {
        assert!(run_check("nope", 1, 1e-4, 1e-5).is_err());
    }
}
