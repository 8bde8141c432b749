//! Online identification of confident and ambiguous samples in a batch.
//!
//! Body-level sets compare the body classifier against the true body label
//! alone. Action-level sets follow the joint truth table:
//!
//! | body correct | action correct | set     |
//! |--------------|----------------|---------|
//! | yes          | yes            | `tp_a`  |
//! | yes          | no             | `fn_a1` |
//! | no           | no             | `fn_a2` |
//! | no           | yes            | `fn_a3` |
//!
//! False-negative sets are keyed by the true class; false-positive sets by the
//! predicted class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_into, Mat};
use crate::taxonomy::{ActionTree, LabelPair};

/// Per-sample outputs of one stream (or of the fused streams).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPredictions {
    pub body_logits: Mat,
    pub action_logits: Mat,
    pub body_pred: Vec<usize>,
    pub action_pred: Vec<usize>,
    pub body_probs: Mat,
    pub action_probs: Mat,
}

impl BatchPredictions {
    pub fn from_logits(body_logits: Mat, action_logits: Mat) -> Result<Self> {
        if body_logits.rows != action_logits.rows {
            return Err(Error::contract(format!(
                "body logits cover {} samples, action logits {}",
                body_logits.rows, action_logits.rows
            )));
        }
        let (body_probs, body_pred) = probs_and_preds(&body_logits);
        let (action_probs, action_pred) = probs_and_preds(&action_logits);
        Ok(BatchPredictions {
            body_logits,
            action_logits,
            body_pred,
            action_pred,
            body_probs,
            action_probs,
        })
    }

    pub fn len(&self) -> usize {
        self.action_pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action_pred.is_empty()
    }
}

fn probs_and_preds(logits: &Mat) -> (Mat, Vec<usize>) {
    let mut probs = Mat::zeros(logits.rows, logits.cols);
    let mut preds = Vec::with_capacity(logits.rows);
    for r in 0..logits.rows {
        let z = logits.row(r);
        softmax_into(z, probs.row_mut(r));
        preds.push(argmax(z));
    }
    (probs, preds)
}

/// Index sets per class. Each inner list holds batch indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePartition {
    pub tp_b: Vec<Vec<usize>>,
    pub tp_a: Vec<Vec<usize>>,
    pub fn_b: Vec<Vec<usize>>,
    pub fn_a1: Vec<Vec<usize>>,
    pub fn_a2: Vec<Vec<usize>>,
    pub fn_a3: Vec<Vec<usize>>,
    pub fp_b: Vec<Vec<usize>>,
    pub fp_a: Vec<Vec<usize>>,
}

/// Which false-negative subtype a set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FnKind {
    A1,
    A2,
    A3,
}

impl FnKind {
    pub const ALL: [FnKind; 3] = [FnKind::A1, FnKind::A2, FnKind::A3];

    pub fn index(self) -> usize {
        match self {
            FnKind::A1 => 0,
            FnKind::A2 => 1,
            FnKind::A3 => 2,
        }
    }
}

impl SamplePartition {
    fn empty(n_body: usize, n_action: usize) -> Self {
        SamplePartition {
            tp_b: vec![Vec::new(); n_body],
            tp_a: vec![Vec::new(); n_action],
            fn_b: vec![Vec::new(); n_body],
            fn_a1: vec![Vec::new(); n_action],
            fn_a2: vec![Vec::new(); n_action],
            fn_a3: vec![Vec::new(); n_action],
            fp_b: vec![Vec::new(); n_body],
            fp_a: vec![Vec::new(); n_action],
        }
    }

    pub fn fn_sets(&self, kind: FnKind) -> &[Vec<usize>] {
        match kind {
            FnKind::A1 => &self.fn_a1,
            FnKind::A2 => &self.fn_a2,
            FnKind::A3 => &self.fn_a3,
        }
    }

    pub fn is_all_confident(&self) -> bool {
        [
            &self.fn_b,
            &self.fn_a1,
            &self.fn_a2,
            &self.fn_a3,
            &self.fp_b,
            &self.fp_a,
        ]
        .iter()
        .all(|sets| sets.iter().all(Vec::is_empty))
    }

    /// Set sizes per class, for diagnostics.
    pub fn counts(&self) -> PartitionCounts {
        let c = |s: &[Vec<usize>]| s.iter().map(Vec::len).collect();
        PartitionCounts {
            tp_b: c(&self.tp_b),
            tp_a: c(&self.tp_a),
            fn_b: c(&self.fn_b),
            fn_a1: c(&self.fn_a1),
            fn_a2: c(&self.fn_a2),
            fn_a3: c(&self.fn_a3),
            fp_b: c(&self.fp_b),
            fp_a: c(&self.fp_a),
        }
    }
}

/// Per-class set sizes; accumulates over batches.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub tp_b: Vec<usize>,
    pub tp_a: Vec<usize>,
    pub fn_b: Vec<usize>,
    pub fn_a1: Vec<usize>,
    pub fn_a2: Vec<usize>,
    pub fn_a3: Vec<usize>,
    pub fp_b: Vec<usize>,
    pub fp_a: Vec<usize>,
}

impl PartitionCounts {
    pub fn zeros(tree: &ActionTree) -> Self {
        let (b, a) = (vec![0; tree.n_body], vec![0; tree.n_action]);
        PartitionCounts {
            tp_b: b.clone(),
            tp_a: a.clone(),
            fn_b: b.clone(),
            fn_a1: a.clone(),
            fn_a2: a.clone(),
            fn_a3: a.clone(),
            fp_b: b,
            fp_a: a,
        }
    }

    pub fn add(&mut self, other: &PartitionCounts) {
        let acc = |x: &mut Vec<usize>, y: &Vec<usize>| {
            for (a, b) in x.iter_mut().zip(y) {
                *a += b;
            }
        };
        acc(&mut self.tp_b, &other.tp_b);
        acc(&mut self.tp_a, &other.tp_a);
        acc(&mut self.fn_b, &other.fn_b);
        acc(&mut self.fn_a1, &other.fn_a1);
        acc(&mut self.fn_a2, &other.fn_a2);
        acc(&mut self.fn_a3, &other.fn_a3);
        acc(&mut self.fp_b, &other.fp_b);
        acc(&mut self.fp_a, &other.fp_a);
    }
}

/// Splits a batch into confident and ambiguous sets from predicted labels.
pub fn partition_labels(
    tree: &ActionTree,
    gt: &[LabelPair],
    body_pred: &[usize],
    action_pred: &[usize],
) -> Result<SamplePartition> {
    if gt.len() != body_pred.len() || gt.len() != action_pred.len() {
        return Err(Error::contract(format!(
            "partition: {} labels, {} body predictions, {} action predictions",
            gt.len(),
            body_pred.len(),
            action_pred.len()
        )));
    }
    let mut p = SamplePartition::empty(tree.n_body, tree.n_action);
    for (i, ((label, &bp), &ap)) in gt.iter().zip(body_pred).zip(action_pred).enumerate() {
        if !label.consistent(tree) {
            return Err(Error::contract(format!(
                "sample {i}: label {label:?} inconsistent with tree"
            )));
        }
        if bp >= tree.n_body || ap >= tree.n_action {
            return Err(Error::contract(format!(
                "sample {i}: prediction ({bp}, {ap}) out of range"
            )));
        }
        let body_ok = bp == label.body;
        let action_ok = ap == label.action;

        if body_ok {
            p.tp_b[label.body].push(i);
        } else {
            p.fn_b[label.body].push(i);
            p.fp_b[bp].push(i);
        }

        let k = label.action;
        match (body_ok, action_ok) {
            (true, true) => p.tp_a[k].push(i),
            (true, false) => p.fn_a1[k].push(i),
            (false, false) => p.fn_a2[k].push(i),
            (false, true) => p.fn_a3[k].push(i),
        }
        if !action_ok {
            p.fp_a[ap].push(i);
        }
    }
    Ok(p)
}

pub fn partition_batch(tree: &ActionTree, gt: &[LabelPair], preds: &BatchPredictions) -> Result<SamplePartition> {
    partition_labels(tree, gt, &preds.body_pred, &preds.action_pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree() -> ActionTree {
        ActionTree::from_group_sizes(&[3, 9, 4])
    }

    fn member(sets: &[Vec<usize>], k: usize, i: usize) -> bool {
        sets[k].contains(&i)
    }

    #[test]
    fn all_correct() {
        let t = tree();
        let gt = [t.label(10).unwrap()];
        assert_eq!(gt[0].body, 1);
        let p = partition_labels(&t, &gt, &[1], &[10]).unwrap();
        assert!(member(&p.tp_b, 1, 0));
        assert!(member(&p.tp_a, 10, 0));
        assert!(p.is_all_confident());
    }

    #[test]
    fn body_right_action_wrong_is_fn_a1() {
        let t = tree();
        let gt = [t.label(10).unwrap()];
        let p = partition_labels(&t, &gt, &[1], &[11]).unwrap();
        assert!(member(&p.tp_b, 1, 0));
        assert!(member(&p.fn_a1, 10, 0));
        assert!(member(&p.fp_a, 11, 0));
        assert!(p.tp_a.iter().all(Vec::is_empty));
    }

    #[test]
    fn length_mismatch() {
        let t = tree();
        let gt = [t.label(0).unwrap()];
        assert!(matches!(
            partition_labels(&t, &gt, &[0, 0], &[0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn predictions_from_logits() {
        let body = Mat::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let action = Mat::from_rows(&[vec![1.0, 3.0, -1.0]]).unwrap();
        let p = BatchPredictions::from_logits(body, action).unwrap();
        assert_eq!(p.body_pred, vec![1]);
        assert_eq!(p.action_pred, vec![1]);
        let s: f64 = p.action_probs.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    fn batch() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
        // (gt action, predicted body, predicted action) over the 16-action tree
        proptest::collection::vec((0..16usize, 0..3usize, 0..16usize), 1..40)
    }

    proptest! {
        #[test]
        fn set_sizes_balance(samples in batch()) {
            let t = tree();
            let gt: Vec<LabelPair> = samples.iter().map(|s| t.label(s.0).unwrap()).collect();
            let bp: Vec<usize> = samples.iter().map(|s| s.1).collect();
            let ap: Vec<usize> = samples.iter().map(|s| s.2).collect();
            let p = partition_labels(&t, &gt, &bp, &ap).unwrap();
            let total = |s: &[Vec<usize>]| s.iter().map(Vec::len).sum::<usize>();
            prop_assert_eq!(
                total(&p.tp_a) + total(&p.fn_a1) + total(&p.fn_a2) + total(&p.fn_a3),
                samples.len()
            );
            let wrong = samples.iter().filter(|s| s.0 != s.2).count();
            prop_assert_eq!(total(&p.fp_a), wrong);
            prop_assert_eq!(total(&p.fn_a1) + total(&p.fn_a2), wrong);
            prop_assert_eq!(total(&p.fn_b), total(&p.fp_b));
            prop_assert_eq!(total(&p.tp_b) + total(&p.fn_b), samples.len());
        }

        #[test]
        fn order_invariant(samples in batch(), rot in 0..40usize) {
            let t = tree();
            let n = samples.len();
            let run = |s: &[(usize, usize, usize)]| {
                let gt: Vec<LabelPair> = s.iter().map(|x| t.label(x.0).unwrap()).collect();
                let bp: Vec<usize> = s.iter().map(|x| x.1).collect();
                let ap: Vec<usize> = s.iter().map(|x| x.2).collect();
                partition_labels(&t, &gt, &bp, &ap).unwrap()
            };
            let a = run(&samples);
            let mut rotated = samples.clone();
            rotated.rotate_left(rot % n);
            let b = run(&rotated);
            // map rotated indices back to original positions
            let back = |sets: &[Vec<usize>]| -> Vec<Vec<usize>> {
                sets.iter().map(|s| {
                    let mut v: Vec<usize> = s.iter().map(|&j| (j + rot % n) % n).collect();
                    v.sort_unstable();
                    v
                }).collect()
            };
            prop_assert_eq!(&a.tp_a, &back(&b.tp_a));
            prop_assert_eq!(&a.fn_a1, &back(&b.fn_a1));
            prop_assert_eq!(&a.fn_a2, &back(&b.fn_a2));
            prop_assert_eq!(&a.fn_a3, &back(&b.fn_a3));
            prop_assert_eq!(&a.fp_a, &back(&b.fp_a));
            prop_assert_eq!(&a.fp_b, &back(&b.fp_b));
        }
    }
}
