//! Browser bindings: partition explorer, prototype diversity in the plane and a
//! small baseline-versus-full training comparison. Every entry point returns JSON.

use pcan_core::data::{generate, Split, SynthConfig};
use pcan_core::numerics::Mat;
use pcan_core::partition::partition_labels;
use pcan_core::prototype::pda_loss;
use pcan_core::taxonomy::ActionTree;
use pcan_core::trainer::{evaluate_checkpoint, train, TrainConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("{what}: {s:?} is not a number")))
        .collect()
}

/// Which confident and ambiguous sets one sample falls into.
pub fn partition_json(children: &str, gt_action: usize, pred_body: usize, pred_action: usize) -> Result<Value, String> {
    let sizes: Vec<usize> = parse_list(children, "children")?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err("every body class needs at least one action".into());
    }
    let tree = ActionTree::from_group_sizes(&sizes);
    let gt = tree.label(gt_action).map_err(|e| e.to_string())?;
    let p = partition_labels(&tree, &[gt], &[pred_body], &[pred_action]).map_err(|e| e.to_string())?;
    let sets = [
        ("tp_b", &p.tp_b),
        ("tp_a", &p.tp_a),
        ("fn_b", &p.fn_b),
        ("fn_a1", &p.fn_a1),
        ("fn_a2", &p.fn_a2),
        ("fn_a3", &p.fn_a3),
        ("fp_b", &p.fp_b),
        ("fp_a", &p.fp_a),
    ];
    let member_of: Vec<Value> = sets
        .iter()
        .flat_map(|(name, per_class)| {
            per_class
                .iter()
                .enumerate()
                .filter(|(_, m)| !m.is_empty())
                .map(move |(k, _)| json!({ "set": name, "class": k }))
        })
        .collect();
    Ok(json!({
        "gt_body": gt.body,
        "gt_action": gt.action,
        "n_body": tree.n_body,
        "n_action": tree.n_action,
        "member_of": member_of,
    }))
}

/// Diversity loss of unit prototypes at the given angles, then `steps`
/// gradient steps of size `lr` on it.
pub fn diversity_json(angles_deg: &str, steps: usize, lr: f64) -> Result<Value, String> {
    let angles: Vec<f64> = parse_list(angles_deg, "angles")?;
    if angles.is_empty() {
        return Err("give at least one angle".into());
    }
    let rows: Vec<Vec<f64>> = angles
        .iter()
        .map(|a| {
            let r = a.to_radians();
            vec![r.cos(), r.sin()]
        })
        .collect();
    let mut protos = Mat::from_rows(&rows).map_err(|e| e.to_string())?;
    let mut path = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (value, grad) = pda_loss(&protos).map_err(|e| e.to_string())?;
        let points: Vec<[f64; 2]> = protos.row_iter().map(|r| [r[0], r[1]]).collect();
        path.push(json!({ "value": value, "points": points }));
        if step < steps {
            protos.data.iter_mut().zip(&grad.data).for_each(|(p, g)| *p -= lr * g);
        }
    }
    Ok(json!({ "collapsed": angles.len(), "path": path }))
}

/// Trains the cross-entropy baseline and the full objective on a small
/// synthetic tree and reports validation curves and test scores.
pub fn compare_json(action_sep: f64, noise_sigma: f64, epochs: usize, seed: u64) -> Result<Value, String> {
    let ds = generate(&SynthConfig {
        children: vec![3, 4, 3],
        d: 16,
        samples_per_class: 30,
        seed,
        action_sep,
        noise_sigma,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let epochs = epochs.clamp(1, 200);
    let full = TrainConfig {
        epochs,
        lr_drop_epochs: [epochs * 3 / 8, epochs * 3 / 4]
            .into_iter()
            .filter(|&e| e > 0)
            .collect(),
        seed,
        ..TrainConfig::default()
    };
    let mut runs = serde_json::Map::new();
    for (name, cfg) in [("baseline", full.baseline()), ("full", full.clone())] {
        let out = train(&ds, &cfg).map_err(|e| e.to_string())?;
        let test = evaluate_checkpoint(&out.best, &ds, Split::Test).map_err(|e| e.to_string())?;
        let curve: Vec<f64> = out
            .log
            .iter()
            .filter_map(|l| l.val.as_ref().map(|v| v.fused[1]))
            .collect();
        runs.insert(
            name.into(),
            json!({
                "val_action_top1": curve,
                "test_action_top1": test.fused.action_top1,
                "test_action_f1_macro": test.fused.f1_macro_action,
                "test_f1_mean": test.fused.f1_mean,
                "best_epoch": out.best.best_epoch,
            }),
        );
    }
    Ok(Value::Object(runs))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn partition(children: &str, gt_action: usize, pred_body: usize, pred_action: usize) -> Result<String, JsError> {
    to_js(partition_json(children, gt_action, pred_body, pred_action))
}

#[wasm_bindgen]
pub fn diversity(angles_deg: &str, steps: usize, lr: f64) -> Result<String, JsError> {
    to_js(diversity_json(angles_deg, steps, lr))
}

#[wasm_bindgen]
pub fn compare(action_sep: f64, noise_sigma: f64, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(compare_json(action_sep, noise_sigma, epochs, seed.into()))
}
