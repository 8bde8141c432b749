//! Accuracy and F1 at both levels, difficulty bands, ablation tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::BatchPredictions;
use crate::taxonomy::{ActionTree, LabelPair};

/// All scores are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub body_top1: f64,
    pub action_top1: f64,
    pub action_top5: f64,
    pub f1_macro_body: f64,
    pub f1_micro_body: f64,
    pub f1_macro_action: f64,
    pub f1_micro_action: f64,
    pub f1_mean: f64,
    pub per_class_action_accuracy: Vec<f64>,
    /// Classes absent from both ground truth and predictions; their F1 counts as 0.
    pub empty_body_classes: Vec<usize>,
    pub empty_action_classes: Vec<usize>,
}

struct F1 {
    macro_: f64,
    micro: f64,
    empty: Vec<usize>,
}

fn f1_scores(n_class: usize, gt: &[usize], pred: &[usize]) -> F1 {
    let mut tp = vec![0usize; n_class];
    let mut fp = vec![0usize; n_class];
    let mut fneg = vec![0usize; n_class];
    for (&g, &p) in gt.iter().zip(pred) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let mut empty = Vec::new();
    let mut sum = 0.0;
    for k in 0..n_class {
        let denom = 2 * tp[k] + fp[k] + fneg[k];
        if denom == 0 {
            empty.push(k);
        } else {
            sum += 2.0 * tp[k] as f64 / denom as f64;
        }
    }
    let (t, f, m): (usize, usize, usize) = (tp.iter().sum(), fp.iter().sum(), fneg.iter().sum());
    F1 {
        macro_: sum / n_class as f64,
        micro: 2.0 * t as f64 / (2 * t + f + m) as f64,
        empty,
    }
}

/// Position of `k` when `probs` is sorted descending, ties broken by lower index.
fn rank_of(probs: &[f64], k: usize) -> usize {
    let pk = probs[k];
    probs
        .iter()
        .enumerate()
        .filter(|&(j, &p)| p > pk || (p == pk && j < k))
        .count()
}

pub fn evaluate(preds: &BatchPredictions, gt: &[LabelPair], tree: &ActionTree) -> Result<MetricsReport> {
    let n = gt.len();
    if n == 0 {
        return Err(Error::contract("evaluate: empty evaluation set"));
    }
    if preds.len() != n {
        return Err(Error::contract(format!(
            "evaluate: {} predictions for {n} labels",
            preds.len()
        )));
    }
    if preds.body_probs.cols != tree.n_body || preds.action_probs.cols != tree.n_action {
        return Err(Error::contract("evaluate: prediction width does not match the tree"));
    }
    for l in gt {
        if !l.consistent(tree) {
            return Err(Error::contract(format!("evaluate: label {l:?} not in tree")));
        }
    }
    let gt_b: Vec<usize> = gt.iter().map(|l| l.body).collect();
    let gt_a: Vec<usize> = gt.iter().map(|l| l.action).collect();
    let hits = |g: &[usize], p: &[usize]| g.iter().zip(p).filter(|(a, b)| a == b).count();
    let body_top1 = hits(&gt_b, &preds.body_pred) as f64 / n as f64;
    let action_top1 = hits(&gt_a, &preds.action_pred) as f64 / n as f64;
    let top5 = (0..n)
        .filter(|&i| rank_of(preds.action_probs.row(i), gt_a[i]) < 5)
        .count();
    let mut seen = vec![0usize; tree.n_action];
    let mut right = vec![0usize; tree.n_action];
    for (&g, &p) in gt_a.iter().zip(&preds.action_pred) {
        seen[g] += 1;
        right[g] += usize::from(g == p);
    }
    let per_class = seen
        .iter()
        .zip(&right)
        .map(|(&s, &r)| if s == 0 { 0.0 } else { r as f64 / s as f64 })
        .collect();
    let fb = f1_scores(tree.n_body, &gt_b, &preds.body_pred);
    let fa = f1_scores(tree.n_action, &gt_a, &preds.action_pred);
    Ok(MetricsReport {
        n,
        body_top1,
        action_top1,
        action_top5: top5 as f64 / n as f64,
        f1_macro_body: fb.macro_,
        f1_micro_body: fb.micro,
        f1_macro_action: fa.macro_,
        f1_micro_action: fa.micro,
        f1_mean: f1_mean(fb.macro_, fb.micro, fa.macro_, fa.micro),
        per_class_action_accuracy: per_class,
        empty_body_classes: fb.empty,
        empty_action_classes: fa.empty,
    })
}

pub fn f1_mean(macro_body: f64, micro_body: f64, macro_action: f64, micro_action: f64) -> f64 {
    (macro_body + micro_body + macro_action + micro_action) / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Hard,
    Medium,
    Easy,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Hard, Band::Medium, Band::Easy];

    /// Below 0.5 is hard, above 0.6 easy, and the closed interval between is medium.
    pub fn of(accuracy: f64) -> Band {
        if accuracy < 0.5 {
            Band::Hard
        } else if accuracy <= 0.6 {
            Band::Medium
        } else {
            Band::Easy
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub band: Band,
    pub classes: usize,
    /// Means are `None` for an empty band.
    pub baseline_mean: Option<f64>,
    pub method_mean: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub class_bands: Vec<Band>,
    pub bands: Vec<BandSummary>,
}

impl DifficultyReport {
    pub fn band(&self, b: Band) -> &BandSummary {
        &self.bands[Band::ALL.iter().position(|x| *x == b).expect("all bands present")]
    }
}

/// Bands classes by baseline accuracy and compares mean accuracy per band.
pub fn difficulty_split(baseline: &[f64], method: &[f64]) -> Result<DifficultyReport> {
    if baseline.len() != method.len() {
        return Err(Error::contract(format!(
            "difficulty_split: {} baseline vs {} method accuracies",
            baseline.len(),
            method.len()
        )));
    }
    let class_bands: Vec<Band> = baseline.iter().map(|&a| Band::of(a)).collect();
    let bands = Band::ALL
        .iter()
        .map(|&band| {
            let idx: Vec<usize> = (0..baseline.len()).filter(|&k| class_bands[k] == band).collect();
            let mean = |v: &[f64]| (!idx.is_empty()).then(|| idx.iter().map(|&k| v[k]).sum::<f64>() / idx.len() as f64);
            let (b, m) = (mean(baseline), mean(method));
            BandSummary {
                band,
                classes: idx.len(),
                baseline_mean: b,
                method_mean: m,
                delta: b.zip(m).map(|(b, m)| m - b),
            }
        })
        .collect();
    Ok(DifficultyReport { class_bands, bands })
}

/// Metric columns of every report table, in order.
pub const METRIC_COLUMNS: [&str; 8] = [
    "body_top1",
    "action_top1",
    "action_top5",
    "body_f1_macro",
    "body_f1_micro",
    "action_f1_macro",
    "action_f1_micro",
    "f1_mean",
];

impl MetricsReport {
    pub fn columns(&self) -> [f64; 8] {
        [
            self.body_top1,
            self.action_top1,
            self.action_top5,
            self.f1_macro_body,
            self.f1_micro_body,
            self.f1_macro_action,
            self.f1_micro_action,
            self.f1_mean,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Parameter values in the same order as [`AblationTable::params`].
    pub values: Vec<String>,
    /// Metric columns in percent, averaged over seeds.
    pub metrics: [f64; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub params: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// One table row per configuration; several reports for a row are averaged.
pub fn ablation_table(params: &[String], runs: &[(Vec<String>, Vec<MetricsReport>)]) -> Result<AblationTable> {
    if runs.is_empty() {
        return Err(Error::contract("ablation_table: no runs"));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (values, reports) in runs {
        if values.len() != params.len() || reports.is_empty() {
            return Err(Error::contract("ablation_table: malformed row"));
        }
        let mut metrics = [0.0; 8];
        for r in reports {
            for (m, v) in metrics.iter_mut().zip(r.columns()) {
                *m += 100.0 * v / reports.len() as f64;
            }
        }
        rows.push(AblationRow {
            values: values.clone(),
            metrics,
        });
    }
    Ok(AblationTable {
        params: params.to_vec(),
        rows,
    })
}

impl AblationTable {
    pub fn header(&self) -> Vec<String> {
        self.params
            .iter()
            .cloned()
            .chain(METRIC_COLUMNS.iter().map(|s| s.to_string()))
            .collect()
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                r.values
                    .iter()
                    .cloned()
                    .chain(r.metrics.iter().map(|v| format!("{v:.2}")))
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for row in self.cells() {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let header = self.header();
        let cells = self.cells();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        for r in &cells {
            line(&mut out, r);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;
    use proptest::prelude::*;

    fn one_hot_preds(n_body: usize, n_action: usize, body: &[usize], action: &[usize]) -> BatchPredictions {
        let n = body.len();
        let mut bl = Mat::zeros(n, n_body);
        let mut al = Mat::zeros(n, n_action);
        for i in 0..n {
            bl.row_mut(i)[body[i]] = 5.0;
            al.row_mut(i)[action[i]] = 5.0;
        }
        BatchPredictions::from_logits(bl, al).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let tree = ActionTree::from_group_sizes(&[2, 3]);
        let actions = [0, 1, 2, 3, 4];
        let gt: Vec<LabelPair> = actions.iter().map(|&a| tree.label(a).unwrap()).collect();
        let body: Vec<usize> = gt.iter().map(|l| l.body).collect();
        let r = evaluate(&one_hot_preds(2, 5, &body, &actions), &gt, &tree).unwrap();
        for v in r.columns() {
            assert_eq!(v, 1.0);
        }
        assert!(r.per_class_action_accuracy.iter().all(|&a| a == 1.0));
        assert!(r.empty_action_classes.is_empty());
    }

    #[test]
    fn confusion_matrix_golden() {
        // rows = truth, cols = prediction: [[2,1,0],[0,1,1],[0,0,3]]
        let tree = ActionTree::from_group_sizes(&[3]);
        let pairs = [(0, 0), (0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 2), (2, 2)];
        let gt: Vec<LabelPair> = pairs.iter().map(|p| tree.label(p.0).unwrap()).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let r = evaluate(&one_hot_preds(1, 3, &[0; 8], &pred), &gt, &tree).unwrap();
        // brute force from precision and recall (tests/oracles/confusion.py)
        assert!((r.f1_macro_action - 151.0 / 210.0).abs() < 1e-15);
        assert!((r.f1_micro_action - 0.75).abs() < 1e-15);
        assert_eq!(r.action_top1, 0.75);
        assert_eq!(r.per_class_action_accuracy, vec![2.0 / 3.0, 0.5, 1.0]);
    }

    #[test]
    fn empty_class_counts_as_zero() {
        let tree = ActionTree::from_group_sizes(&[3]);
        let gt = vec![tree.label(0).unwrap(), tree.label(1).unwrap()];
        let r = evaluate(&one_hot_preds(1, 3, &[0, 0], &[0, 1]), &gt, &tree).unwrap();
        assert!((r.f1_macro_action - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.empty_action_classes, vec![2]);
        assert!(evaluate(&one_hot_preds(1, 3, &[], &[]), &[], &tree).is_err());
    }

    #[test]
    fn top5_ties_follow_index_order() {
        let tree = ActionTree::from_group_sizes(&[7]);
        let preds = BatchPredictions::from_logits(Mat::zeros(2, 1), Mat::zeros(2, 7)).unwrap();
        let gt = vec![tree.label(4).unwrap(), tree.label(5).unwrap()];
        let r = evaluate(&preds, &gt, &tree).unwrap();
        assert_eq!(r.action_top5, 0.5);
    }

    #[test]
    fn bands() {
        let r = difficulty_split(&[0.4, 0.55, 0.9], &[0.6, 0.55, 0.8]).unwrap();
        assert_eq!(r.class_bands, vec![Band::Hard, Band::Medium, Band::Easy]);
        assert!((r.band(Band::Hard).delta.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(r.band(Band::Medium).delta, Some(0.0));
        assert!((r.band(Band::Easy).delta.unwrap() + 0.1).abs() < 1e-12);
        assert_eq!(Band::of(0.5), Band::Medium);
        assert_eq!(Band::of(0.6), Band::Medium);
        let all_hard = difficulty_split(&[0.0; 4], &[0.0; 4]).unwrap();
        assert!(all_hard.class_bands.iter().all(|b| *b == Band::Hard));
        assert_eq!(all_hard.band(Band::Easy).baseline_mean, None);
    }

    #[test]
    fn ablation_table_shapes() {
        let tree = ActionTree::from_group_sizes(&[2, 3]);
        let gt: Vec<LabelPair> = (0..5).map(|a| tree.label(a).unwrap()).collect();
        let report = evaluate(&one_hot_preds(2, 5, &[0, 0, 1, 1, 1], &[0, 1, 2, 3, 3]), &gt, &tree).unwrap();
        let runs: Vec<_> = ["0", "0.1", "1", "10"]
            .iter()
            .map(|v| (vec![v.to_string()], vec![report.clone()]))
            .collect();
        let t = ablation_table(&["lambda".to_string()], &runs).unwrap();
        let csv = t.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(
            lines[0],
            "lambda,body_top1,action_top1,action_top5,body_f1_macro,body_f1_micro,action_f1_macro,action_f1_micro,f1_mean"
        );
        assert!(lines[1].starts_with("0,100.00,80.00,"));
        assert_eq!(t.to_text().lines().count(), 5);
        assert!(ablation_table(&["x".to_string()], &[]).is_err());
    }

    fn random_preds(seed: u64, n: usize) -> (ActionTree, BatchPredictions, Vec<LabelPair>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tree = ActionTree::from_group_sizes(&[3, 4, 2]);
        let mut bl = Mat::zeros(n, 3);
        let mut al = Mat::zeros(n, 9);
        bl.data
            .iter_mut()
            .chain(al.data.iter_mut())
            .for_each(|v| *v = rng.random_range(-2.0..2.0));
        let gt = (0..n).map(|_| tree.label(rng.random_range(0..9)).unwrap()).collect();
        (tree, BatchPredictions::from_logits(bl, al).unwrap(), gt)
    }

    proptest! {
        #[test]
        fn micro_f1_equals_top1(seed in 0u64..10_000, n in 1usize..60) {
            let (tree, preds, gt) = random_preds(seed, n);
            let r = evaluate(&preds, &gt, &tree).unwrap();
            prop_assert!((r.f1_micro_action - r.action_top1).abs() <= 1e-12);
            prop_assert!((r.f1_micro_body - r.body_top1).abs() <= 1e-12);
            prop_assert_eq!(r.f1_mean, (r.f1_macro_body + r.f1_micro_body + r.f1_macro_action + r.f1_micro_action) / 4.0);
            for v in r.columns() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn permutation_invariant(seed in 0u64..10_000, n in 2usize..40, shift in 1usize..39) {
            let (tree, preds, gt) = random_preds(seed, n);
            let order: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let permute = |m: &Mat| {
                let mut out = Mat::zeros(m.rows, m.cols);
                for (r, &i) in order.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(m.row(i));
                }
                out
            };
            let p2 = BatchPredictions::from_logits(permute(&preds.body_logits), permute(&preds.action_logits)).unwrap();
            let g2: Vec<LabelPair> = order.iter().map(|&i| gt[i]).collect();
            let a = evaluate(&preds, &gt, &tree).unwrap();
            let b = evaluate(&p2, &g2, &tree).unwrap();
            prop_assert_eq!(a.columns(), b.columns());
            prop_assert_eq!(a.per_class_action_accuracy, b.per_class_action_accuracy);
        }
    }
}
