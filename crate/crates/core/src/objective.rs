//! One stream's training objective and its gradient with respect to the head.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    ce_loss, hp_loss, pcc_loss_with_targets, CalibrationTargets, FpSign, HpMode, HyperParams, LossBreakdown,
};
use crate::model::{ForwardPass, HeadParams, StreamHead};
use crate::numerics::Mat;
use crate::partition::SamplePartition;
use crate::prototype::{Level, PrototypeBank};
use crate::taxonomy::{ActionTree, LabelPair};

/// Which optional terms join the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub hp: bool,
    pub pcc: bool,
    pub pda: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            hp: true,
            pcc: true,
            pda: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSettings<'a> {
    pub hp: &'a HyperParams,
    pub losses: LossToggles,
    pub hp_mode: HpMode,
    pub fp_sign: FpSign,
}

/// Calibration targets held fixed while the loss is evaluated.
#[derive(Debug, Clone)]
pub struct FrozenTargets {
    pub body: CalibrationTargets,
    pub action: CalibrationTargets,
}

#[derive(Debug, Clone)]
pub struct StreamLoss {
    /// `pda` and `total` include the diversity value supplied by the caller.
    pub breakdown: LossBreakdown,
    pub grads: HeadParams,
    pub pass: ForwardPass,
    pub frozen: Option<FrozenTargets>,
    pub calibration_degenerate: usize,
}

/// Evaluates the objective of one stream on a batch.
///
/// The partition and the diversity value come from the caller. Calibration
/// targets are built from this forward pass unless `frozen` is given, which
/// lets a gradient check hold them constant.
#[allow(clippy::too_many_arguments)]
pub fn stream_loss(
    tree: &ActionTree,
    head: &StreamHead,
    bank: &PrototypeBank,
    inputs: &Mat,
    labels: &[LabelPair],
    partition: &SamplePartition,
    pda: f64,
    settings: &ObjectiveSettings<'_>,
    frozen: Option<&FrozenTargets>,
) -> Result<StreamLoss> {
    let pass = head.forward(inputs, &bank.p_action)?;
    let gt_b: Vec<usize> = labels.iter().map(|l| l.body).collect();
    let gt_a: Vec<usize> = labels.iter().map(|l| l.action).collect();
    let (ce_b, mut g_body) = ce_loss(&pass.preds.body_logits, &gt_b)?;
    let (ce_a, mut g_action) = ce_loss(&pass.preds.action_logits, &gt_a)?;

    let mut hp = 0.0;
    if settings.losses.hp {
        let (v, gb, ga) = hp_loss(
            tree,
            &pass.preds.body_logits,
            &pass.preds.action_logits,
            &gt_a,
            settings.hp.lambda,
            settings.hp_mode,
        )?;
        hp = v;
        g_body.data.iter_mut().zip(&gb.data).for_each(|(a, b)| *a += b);
        g_action.data.iter_mut().zip(&ga.data).for_each(|(a, b)| *a += b);
    }

    let (mut pcc_body, mut pcc_action) = (0.0, 0.0);
    let mut g_feats = None;
    let mut kept = None;
    let mut calibration_degenerate = 0;
    if settings.losses.pcc {
        let targets = match frozen {
            Some(f) => f.clone(),
            None => FrozenTargets {
                body: CalibrationTargets::build(
                    &pass.feats,
                    partition,
                    &pass.preds.body_probs,
                    Level::Body,
                    settings.hp.alpha,
                )?,
                action: CalibrationTargets::build(
                    &pass.feats,
                    partition,
                    &pass.preds.action_probs,
                    Level::Action,
                    settings.hp.alpha,
                )?,
            },
        };
        let tau = settings.hp.tau;
        let body = pcc_loss_with_targets(targets.body.clone(), &pass.feats, &bank.p_body, tau, settings.fp_sign)?;
        let action = pcc_loss_with_targets(
            targets.action.clone(),
            &pass.feats,
            &bank.p_action,
            tau,
            settings.fp_sign,
        )?;
        pcc_body = body.loss;
        pcc_action = action.loss;
        calibration_degenerate = body.intermediates.degenerate + action.intermediates.degenerate;
        let mut g = body.grad;
        g.data.iter_mut().zip(&action.grad.data).for_each(|(a, b)| *a += b);
        g_feats = Some(g);
        kept = Some(targets);
    }

    let grads = head.backward(inputs, &bank.p_action, &pass, &g_body, &g_action, g_feats.as_ref());
    let breakdown = LossBreakdown::new(ce_b + ce_a, hp, pcc_body, pcc_action, pda, settings.hp.beta);
    Ok(StreamLoss {
        breakdown,
        grads,
        pass,
        frozen: kept,
        calibration_degenerate,
    })
}
