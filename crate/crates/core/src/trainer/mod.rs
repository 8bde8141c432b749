//! The optimisation loop and its checkpoints.
//!
//! Per batch and stream: forward with the current prototypes, partition the
//! batch, EMA-update prototypes from the confident sets, evaluate the
//! objective against the refreshed prototypes, take a momentum SGD step on the
//! head, then (optionally) a diversity step on the action prototypes.

mod config;
mod sgd;

pub use config::{Flags, TrainConfig};
pub use sgd::{sgd_update, step_sgd};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{Dataset, Split, Stream};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate, MetricsReport, METRIC_COLUMNS};
use crate::model::{fuse, HeadParams, StreamHead};
use crate::numerics::Mat;
use crate::objective::{stream_loss, ObjectiveSettings};
use crate::partition::{partition_batch, BatchPredictions, PartitionCounts, SamplePartition};
use crate::prototype::{pda_loss, Level, PrototypeBank};
use crate::taxonomy::{ActionTree, LabelPair};

pub const CHECKPOINT_VERSION: u32 = 1;
const STREAMS: [Stream; 2] = [Stream::A, Stream::B];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, decimal.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    pub tree: ActionTree,
    pub heads: [StreamHead; 2],
    pub banks: [PrototypeBank; 2],
    pub velocity: [HeadParams; 2],
    pub rng: RngState,
    pub best_f1_mean: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Per-stream and fused predictions over a set of samples.
#[derive(Debug, Clone)]
pub struct TwoStreamPredictions {
    pub streams: [BatchPredictions; 2],
    pub fused: BatchPredictions,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                source_name: path.display().to_string(),
                line: 1,
                message: format!("unsupported checkpoint version {}", ckpt.format_version),
            });
        }
        Ok(ckpt)
    }

    pub fn predict(&self, ds: &Dataset, idx: &[usize]) -> Result<TwoStreamPredictions> {
        if ds.tree != self.tree {
            return Err(Error::contract("dataset tree differs from the checkpoint's tree"));
        }
        let mut preds = Vec::with_capacity(2);
        for (s, stream) in STREAMS.iter().enumerate() {
            let x = ds.features(idx, *stream);
            preds.push(self.heads[s].predict(&x, &self.banks[s].p_action)?);
        }
        let b = preds.pop().expect("two streams");
        let a = preds.pop().expect("two streams");
        let fused = fuse(&a, &b, self.config.flags.fusion)?;
        Ok(TwoStreamPredictions { streams: [a, b], fused })
    }
}

/// Fused and per-stream reports on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub epoch: usize,
    pub fused: MetricsReport,
    pub stream_a: MetricsReport,
    pub stream_b: MetricsReport,
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source"].into_iter().chain(METRIC_COLUMNS))?;
        for (name, r) in [
            ("fused", &self.fused),
            ("stream_a", &self.stream_a),
            ("stream_b", &self.stream_b),
        ] {
            let row: Vec<String> = std::iter::once(name.to_string())
                .chain(r.columns().iter().map(|v| format!("{:.4}", 100.0 * v)))
                .collect();
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &Dataset, split: Split) -> Result<EvalReport> {
    let idx = ds.indices(split);
    let labels = ds.labels(&idx);
    let p = ckpt.predict(ds, &idx)?;
    Ok(EvalReport {
        split,
        epoch: ckpt.epoch,
        fused: evaluate(&p.fused, &labels, &ds.tree)?,
        stream_a: evaluate(&p.streams[0], &labels, &ds.tree)?,
        stream_b: evaluate(&p.streams[1], &labels, &ds.tree)?,
    })
}

/// Set sizes summed over classes and batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetTotals {
    pub tp_b: usize,
    pub tp_a: usize,
    pub fn_b: usize,
    pub fn_a1: usize,
    pub fn_a2: usize,
    pub fn_a3: usize,
    pub fp_b: usize,
    pub fp_a: usize,
}

impl SetTotals {
    fn add(&mut self, c: &PartitionCounts) {
        let s = |v: &Vec<usize>| v.iter().sum::<usize>();
        self.tp_b += s(&c.tp_b);
        self.tp_a += s(&c.tp_a);
        self.fn_b += s(&c.fn_b);
        self.fn_a1 += s(&c.fn_a1);
        self.fn_a2 += s(&c.fn_a2);
        self.fn_a3 += s(&c.fn_a3);
        self.fp_b += s(&c.fp_b);
        self.fp_a += s(&c.fp_a);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEpochLog {
    /// Batch means.
    pub losses: LossBreakdown,
    pub sets: SetTotals,
    pub ema_updates: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValScores {
    pub fused: [f64; 8],
    pub stream_a_action_top1: f64,
    pub stream_b_action_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub prototypes_frozen: bool,
    pub stream_a: StreamEpochLog,
    pub stream_b: StreamEpochLog,
    /// Columns in the order of [`METRIC_COLUMNS`].
    pub val: Option<ValScores>,
    pub best: bool,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

pub struct TrainOutput {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub struct Trainer<'a> {
    ds: &'a Dataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    rng: ChaCha8Rng,
    state: Checkpoint,
    best: Option<Checkpoint>,
}

fn check_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    ds.tree.validate_strict()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::contract("dataset has no training samples"));
    }
    Ok(train_idx)
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, cfg: &TrainConfig) -> Result<Self> {
        let train_idx = check_dataset(ds, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, nb, na) = (ds.d, ds.tree.n_body, ds.tree.n_action);
        let gammas = [cfg.hp.gamma_a, cfg.hp.gamma_b];
        let heads = gammas.map(|g| StreamHead::init(d, nb, na, g, rng.next_u64()));
        let bank_a = PrototypeBank::init(&ds.tree, d, cfg.hp.rho, rng.next_u64())?;
        let bank_b = PrototypeBank::init(&ds.tree, d, cfg.hp.rho, rng.next_u64())?;
        let velocity = [heads[0].params.zeros_like(), heads[1].params.zeros_like()];
        let state = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            epoch: 0,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            tree: ds.tree.clone(),
            heads,
            banks: [bank_a, bank_b],
            velocity,
            rng: RngState {
                seed: cfg.seed,
                word_pos: String::new(),
            },
            best_f1_mean: None,
            best_epoch: None,
        };
        Ok(Trainer {
            ds,
            train_idx,
            val_idx: ds.indices(Split::Val),
            rng,
            state,
            best: None,
        })
    }

    /// Continues from `ckpt`. The config must hash to the checkpoint's.
    pub fn resume(ds: &'a Dataset, cfg: &TrainConfig, ckpt: Checkpoint, best: Option<Checkpoint>) -> Result<Self> {
        let train_idx = check_dataset(ds, cfg)?;
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "config hash {} does not match checkpoint hash {}",
                cfg.hash(),
                ckpt.config_hash
            )));
        }
        if ckpt.tree != ds.tree || ckpt.banks[0].dim() != ds.d {
            return Err(Error::contract(
                "checkpoint does not match the dataset's tree or dimension",
            ));
        }
        let pos: u128 = ckpt
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::contract(format!("bad rng word position {:?}", ckpt.rng.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng.seed);
        rng.set_word_pos(pos);
        Ok(Trainer {
            ds,
            train_idx,
            val_idx: ds.indices(Split::Val),
            rng,
            state: ckpt,
            best,
        })
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    /// Current state with the RNG position filled in.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.state.clone();
        c.rng.word_pos = self.rng.get_word_pos().to_string();
        c
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch + 1;
        let cfg = self.config().clone();
        let lr = cfg.lr_at(epoch);
        let frozen = epoch <= cfg.warmup_epochs;
        let mut order = self.train_idx.clone();
        order.shuffle(&mut self.rng);

        let settings = ObjectiveSettings {
            hp: &cfg.hp,
            losses: cfg.losses,
            hp_mode: cfg.flags.hp_mode,
            fp_sign: cfg.flags.fp_sign,
        };
        let mut logs: [StreamEpochLog; 2] = std::array::from_fn(|_| StreamEpochLog {
            losses: LossBreakdown::default(),
            sets: SetTotals::default(),
            ema_updates: 0,
            degenerate: 0,
        });
        let n_batches = order.len().div_ceil(cfg.batch_size);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let labels = self.ds.labels(batch);
            for (s, stream) in STREAMS.iter().enumerate() {
                let inputs = self.ds.features(batch, *stream);
                let ctx = BatchContext {
                    tree: &self.ds.tree,
                    inputs: &inputs,
                    labels: &labels,
                    batch,
                    epoch,
                    index: b,
                    stream: s,
                };
                let head = &mut self.state.heads[s];
                let bank = &mut self.state.banks[s];
                let velocity = &mut self.state.velocity[s];
                let step = train_step(&ctx, head, bank, velocity, &cfg, &settings, lr, frozen)?;
                let log = &mut logs[s];
                log.losses.accumulate(&step.losses, 1.0 / n_batches as f64);
                log.sets.add(&step.partition.counts());
                log.ema_updates += step.ema_updates;
                log.degenerate += step.degenerate;
            }
        }
        self.state.epoch = epoch;

        let val = if self.val_idx.is_empty() {
            None
        } else {
            let labels = self.ds.labels(&self.val_idx);
            let p = self.state.predict(self.ds, &self.val_idx)?;
            let fused = evaluate(&p.fused, &labels, &self.ds.tree)?;
            let a = evaluate(&p.streams[0], &labels, &self.ds.tree)?;
            let b = evaluate(&p.streams[1], &labels, &self.ds.tree)?;
            Some(ValScores {
                fused: fused.columns(),
                stream_a_action_top1: a.action_top1,
                stream_b_action_top1: b.action_top1,
            })
        };
        // Without a validation split the latest epoch counts as best.
        let score = val.as_ref().map_or(f64::INFINITY, |v| v.fused[7]);
        let best = match self.state.best_f1_mean {
            Some(prev) => score > prev || val.is_none(),
            None => true,
        };
        if best {
            self.state.best_f1_mean = Some(score).filter(|s| s.is_finite());
            self.state.best_epoch = Some(epoch);
            self.best = Some(self.checkpoint());
        }
        let [stream_a, stream_b] = logs;
        Ok(EpochLog {
            epoch,
            lr,
            prototypes_frozen: frozen,
            stream_a,
            stream_b,
            val,
            best,
        })
    }

    /// Runs epochs until `until` (inclusive), reporting each as it finishes.
    pub fn run(&mut self, until: usize, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let until = until.min(self.config().epochs);
        let mut logs = Vec::new();
        while self.state.epoch < until {
            let log = self.run_epoch()?;
            log::info!(
                "epoch {} lr {:.2e} loss {:.4}/{:.4} val f1_mean {}",
                log.epoch,
                log.lr,
                log.stream_a.losses.total,
                log.stream_b.losses.total,
                log.val.as_ref().map_or("-".into(), |v| format!("{:.4}", v.fused[7]))
            );
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn finish(self) -> TrainOutput {
        let last = self.checkpoint();
        let best = self.best.unwrap_or_else(|| last.clone());
        TrainOutput {
            last,
            best,
            log: Vec::new(),
        }
    }
}

/// Full run from scratch.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut t = Trainer::new(ds, cfg)?;
    let log = t.run(cfg.epochs, |_| {})?;
    let mut out = t.finish();
    out.log = log;
    Ok(out)
}

struct BatchContext<'b> {
    tree: &'b ActionTree,
    inputs: &'b Mat,
    labels: &'b [LabelPair],
    batch: &'b [usize],
    epoch: usize,
    index: usize,
    stream: usize,
}

struct StepResult {
    losses: LossBreakdown,
    partition: SamplePartition,
    ema_updates: usize,
    degenerate: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    ctx: &BatchContext<'_>,
    head: &mut StreamHead,
    bank: &mut PrototypeBank,
    velocity: &mut HeadParams,
    cfg: &TrainConfig,
    settings: &ObjectiveSettings<'_>,
    lr: f64,
    frozen: bool,
) -> Result<StepResult> {
    let first = head.forward(ctx.inputs, &bank.p_action)?;
    let partition = partition_batch(ctx.tree, ctx.labels, &first.preds)?;
    let mut ema_updates = 0;
    if !frozen {
        for (level, sets) in [(Level::Body, &partition.tp_b), (Level::Action, &partition.tp_a)] {
            for (k, members) in sets.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let feats: Vec<&[f64]> = members.iter().map(|&i| first.feats.row(i)).collect();
                bank.ema_update(level, k, &feats)?;
                ema_updates += 1;
            }
        }
    }
    let pda = if cfg.losses.pda {
        Some(pda_loss(&bank.p_action)?)
    } else {
        None
    };
    let out = stream_loss(
        ctx.tree,
        head,
        bank,
        ctx.inputs,
        ctx.labels,
        &partition,
        pda.as_ref().map_or(0.0, |p| p.0),
        settings,
        None,
    )?;
    if !out.breakdown.is_finite() || !out.grads.is_finite() {
        let dump = json!({
            "epoch": ctx.epoch,
            "batch": ctx.index,
            "stream": ctx.stream,
            "samples": ctx.batch,
            "labels": ctx.labels,
            "losses": out.breakdown,
            "partition": partition.counts(),
            "inputs": ctx.inputs,
        });
        return Err(Error::NonFinite {
            epoch: ctx.epoch,
            batch: ctx.index,
            detail: format!("stream {} losses {:?}", ctx.stream, out.breakdown),
            dump: Box::new(dump),
        });
    }
    step_sgd(
        &mut head.params,
        &out.grads,
        velocity,
        lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    if let Some((_, g)) = pda {
        if cfg.flags.pda_updates_prototypes && !frozen {
            let step = lr * cfg.hp.beta;
            bank.p_action
                .data
                .iter_mut()
                .zip(&g.data)
                .for_each(|(p, g)| *p -= step * g);
        }
    }
    Ok(StepResult {
        losses: out.breakdown,
        partition,
        ema_updates,
        degenerate: out.pass.degenerate + out.calibration_degenerate,
    })
}

/// Writes the fixed output layout of a training run into `dir`.
pub fn write_run(dir: &Path, ds: &Dataset, out: &TrainOutput, append_log: bool) -> Result<EvalReport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut log = String::new();
    for l in &out.log {
        log.push_str(&l.to_json_line());
        log.push('\n');
    }
    let log_path = dir.join("log.jsonl");
    if append_log {
        use std::io::Write as _;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        f.write_all(log.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
    } else {
        std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    }
    out.best.save(&dir.join("checkpoint_best.json"))?;
    out.last.save(&dir.join("checkpoint_last.json"))?;
    let split = if ds.indices(Split::Test).is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let report = evaluate_checkpoint(&out.best, ds, split)?;
    write_report(dir, &report)?;
    Ok(report)
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let json_path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("metrics.csv");
    std::fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))
}
