//! Watermark embedding by fine-tuning: benign cross-entropy on each
//! mini-batch plus the trigger samples, plus `r1` times a loss pushing every
//! explanation weight to the sign of its watermark bit.

use std::fmt;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::extraction::{lm_truth, masked_samples, Explainer, MetricMode, DEFAULT_LAMBDA};
use crate::graph::{sigmoid, softplus, Graph, NodeId};
use crate::model::{Bound, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{benign_score, ce_node, epoch_batches, Examples};
use crate::verification::wsr;
use crate::watermark::{generate_masks, segment_input, MaskScheme, TriggerSample, Watermark};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatermarkLoss {
    Hinge,
    Ce,
    Mse,
}

impl std::str::FromStr for WatermarkLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(Self::Hinge),
            "ce" => Ok(Self::Ce),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Config(format!(
                "unknown watermark loss `{s}` (hinge, ce, mse)"
            ))),
        }
    }
}

impl fmt::Display for WatermarkLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hinge => "hinge",
            Self::Ce => "ce",
            Self::Mse => "mse",
        })
    }
}

fn check_lengths(e: &[f64], wm: &[i8]) -> Result<()> {
    if e.len() != wm.len() {
        return Err(Error::dim(format!(
            "{} weights for {} watermark bits",
            e.len(),
            wm.len()
        )));
    }
    Ok(())
}

/// `sum_i max(0, eps - e_i * wm_i)`.
pub fn hinge_loss(e: &[f64], wm: &[i8], eps: f64) -> Result<f64> {
    check_lengths(e, wm)?;
    Ok(e.iter()
        .zip(wm)
        .map(|(&x, &b)| (eps - x * f64::from(b)).max(0.0))
        .sum())
}

/// Binary cross-entropy of `sigmoid(e_i)` against the bit, `-1` as class 0.
pub fn ce_watermark_loss(e: &[f64], wm: &[i8]) -> Result<f64> {
    check_lengths(e, wm)?;
    // -ln sigmoid(s x) = softplus(-s x)
    Ok(e.iter()
        .zip(wm)
        .map(|(&x, &b)| softplus(-x * f64::from(b)))
        .sum())
}

/// `sum_i (b_i - sigmoid(e_i))^2` with `b_i = 1` for `+1` bits, else 0.
pub fn mse_watermark_loss(e: &[f64], wm: &[i8]) -> Result<f64> {
    check_lengths(e, wm)?;
    Ok(e.iter()
        .zip(wm)
        .map(|(&x, &b)| {
            let t = if b == 1 { 1.0 } else { 0.0 };
            (t - sigmoid(x)).powi(2)
        })
        .sum())
}

pub fn watermark_loss(kind: WatermarkLoss, e: &[f64], wm: &[i8], eps: f64) -> Result<f64> {
    match kind {
        WatermarkLoss::Hinge => hinge_loss(e, wm, eps),
        WatermarkLoss::Ce => ce_watermark_loss(e, wm),
        WatermarkLoss::Mse => mse_watermark_loss(e, wm),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    pub r1: f64,
    pub epsilon: f64,
    pub loss: WatermarkLoss,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub scheme: MaskScheme,
    /// Number of masks; `None` means one per watermark bit.
    pub masks: Option<usize>,
    /// Seed of the mask set, part of the owner's secret key.
    pub mask_seed: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once L2 has been zero for three epochs with benign quality
    /// within one point of the input model. Off by default: the extra
    /// epochs widen the explanation margins, which pruning and input
    /// masking eat into.
    pub early_stop: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            r1: 1.0,
            epsilon: 0.01,
            loss: WatermarkLoss::Hinge,
            epochs: 30,
            lr: 3e-4,
            optimizer: OptimizerKind::Adam,
            lambda: DEFAULT_LAMBDA,
            scheme: MaskScheme::LeaveOneOut,
            masks: None,
            mask_seed: 0,
            batch_size: 64,
            seed: 0,
            early_stop: false,
        }
    }
}

impl EmbedConfig {
    /// `r1 = 0` is accepted so the watermark term can be switched off.
    pub fn validate(&self) -> Result<()> {
        if !(self.r1 >= 0.0 && self.r1.is_finite()) {
            return Err(Error::Config(format!("r1 must be >= 0, got {}", self.r1)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("embedding needs at least one epoch".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Mask set and partition for a trigger of `input_len` features carrying
    /// `bits` bits, in logits mode.
    pub fn explainer(&self, input_len: usize, bits: usize) -> Result<Explainer> {
        let masks = generate_masks(
            self.masks.unwrap_or(bits),
            bits,
            self.scheme,
            self.mask_seed,
        )?;
        Explainer::new(
            masks,
            segment_input(input_len, bits)?,
            MetricMode::Logits,
            self.lambda,
        )
    }
}

/// Explanation weights of one trigger as a `1 x k` graph node, built from
/// the live model so gradients reach its parameters.
pub(crate) fn explanation_node(
    model: &Model,
    g: &mut Graph,
    bound: &Bound,
    trigger: &TriggerSample,
    explainer: &Explainer,
) -> Result<NodeId> {
    let masked = masked_samples(trigger, explainer.masks(), explainer.partition())?;
    let c = masked.len();
    let v = match trigger {
        TriggerSample::Classifier { label, .. } => {
            let m = trigger.input_len();
            let mut x = Vec::with_capacity(c * m);
            for t in &masked {
                if let TriggerSample::Classifier { input, .. } = t {
                    x.extend_from_slice(input);
                }
            }
            let xn = g.input(Tensor::matrix(c, m, x)?);
            let logits = model.logits_features(g, bound, xn)?;
            let probs = g.softmax(logits);
            g.gather(probs, vec![*label; c])?
        }
        TriggerSample::Lm { tokens, targets } => {
            if targets.is_empty() {
                return Err(Error::Data("language-model trigger has no targets".into()));
            }
            let truth = lm_truth(tokens, targets)?;
            let t = targets.len();
            let mut windows = Vec::new();
            for s in &masked {
                if let TriggerSample::Lm { tokens, .. } = s {
                    windows.extend(model.target_windows(tokens, targets)?.0);
                }
            }
            let logits = model.logits_windows(g, bound, windows)?;
            let probs = g.softmax(logits);
            let idx = (0..c * t).map(|r| truth[r % t] as usize).collect();
            let picked = g.gather(probs, idx)?;
            let per_mask = g.reshape(picked, c, t)?;
            let avg = g.input(Tensor::filled(&[1, t], 1.0 / t as f64));
            g.dense(per_mask, avg, None)?
        }
    };
    let row = g.reshape(v, 1, c)?;
    let a = g.input(explainer.jacobian().as_tensor());
    g.dense(row, a, None)
}

/// Watermark loss of a `1 x k` explanation node as a scalar node.
pub(crate) fn watermark_loss_node(
    g: &mut Graph,
    e: NodeId,
    wm: &[i8],
    kind: WatermarkLoss,
    eps: f64,
) -> Result<NodeId> {
    let k = wm.len();
    let signs: Vec<f64> = wm.iter().map(|&b| f64::from(b)).collect();
    match kind {
        WatermarkLoss::Hinge => {
            let s = g.input(Tensor::matrix(1, k, signs)?);
            let agree = g.mul(e, s)?;
            let neg = g.scale(agree, -1.0);
            let gap = g.shift(neg, eps);
            let zero = g.input(Tensor::zeros(&[1, k]));
            // zero first so an exactly met margin contributes no gradient
            let h = g.max(zero, gap)?;
            Ok(g.sum(h))
        }
        WatermarkLoss::Ce => {
            let s = g.input(Tensor::matrix(1, k, signs.iter().map(|b| -b).collect())?);
            let z = g.mul(e, s)?;
            let sp = g.softplus(z);
            Ok(g.sum(sp))
        }
        WatermarkLoss::Mse => {
            let targets: Vec<f64> = signs
                .iter()
                .map(|&b| if b > 0.0 { -1.0 } else { 0.0 })
                .collect();
            let sg = g.sigmoid(e);
            let t = g.input(Tensor::matrix(1, k, targets)?);
            let d = g.add(sg, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        }
    }
}

/// Summed watermark loss over all triggers, or `None` without triggers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn total_watermark_node(
    model: &Model,
    g: &mut Graph,
    bound: &Bound,
    triggers: &[TriggerSample],
    explainer: &Explainer,
    wm: &[i8],
    kind: WatermarkLoss,
    eps: f64,
) -> Result<Option<NodeId>> {
    let mut total: Option<NodeId> = None;
    for t in triggers {
        let e = explanation_node(model, g, bound, t, explainer)?;
        let l = watermark_loss_node(g, e, wm, kind, eps)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(total)
}

/// Summed watermark loss of the current model, evaluated through the
/// black-box extraction path.
pub fn current_watermark_loss(
    model: &Model,
    triggers: &[TriggerSample],
    explainer: &Explainer,
    wm: &Watermark,
    kind: WatermarkLoss,
    eps: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for t in triggers {
        let e = explainer.explain(model, t)?;
        total += watermark_loss(kind, &e.weights, wm.bits(), eps)?;
    }
    Ok(total)
}

/// Mean WSR of the watermark extracted through each trigger.
pub fn mean_wsr(
    model: &Model,
    triggers: &[TriggerSample],
    explainer: &Explainer,
    wm: &Watermark,
) -> Result<f64> {
    if triggers.is_empty() {
        return Err(Error::Data("no trigger samples".into()));
    }
    let mut total = 0.0;
    for t in triggers {
        total += wsr(explainer.extract(model, t)?.bits(), wm.bits())?;
    }
    Ok(total / triggers.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean benign-plus-trigger cross-entropy over the epoch's steps.
    pub l1: f64,
    /// Watermark loss of the model at the end of the epoch.
    pub l2: f64,
    pub wsr: f64,
    pub benign: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,L1,L2,WSR,benign_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.l1, self.l2, self.wsr, self.benign
        )
    }
}

#[derive(Debug, Clone)]
pub struct Embedded {
    pub model: Model,
    pub explainer: Explainer,
    /// Benign score of the input model on the monitoring subset.
    pub baseline_benign: f64,
    pub history: Vec<EpochRecord>,
}

impl Embedded {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(EpochRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// `L1 + r1 * L2` on one batch; returns the L1, L2 and root nodes.
#[allow(clippy::too_many_arguments)]
fn objective(
    model: &Model,
    g: &mut Graph,
    data: &Corpus,
    examples: &Examples,
    batch: &[usize],
    triggers: &[TriggerSample],
    wm: &[i8],
    explainer: &Explainer,
    cfg: &EmbedConfig,
) -> Result<(NodeId, Option<NodeId>, NodeId)> {
    let bound = model.bind(g);
    let l1 = ce_node(model, g, &bound, data, examples, batch, triggers)?;
    let l2 = if cfg.r1 > 0.0 {
        total_watermark_node(
            model,
            g,
            &bound,
            triggers,
            explainer,
            wm,
            cfg.loss,
            cfg.epsilon,
        )?
    } else {
        None
    };
    let root = match l2 {
        Some(l2) => {
            let scaled = g.scale(l2, cfg.r1);
            g.add(l1, scaled)?
        }
        None => l1,
    };
    Ok((l1, l2, root))
}

/// Value of the embedding objective over all of `data` as one batch, with
/// its gradient flattened in parameter declaration order. Takes raw signs,
/// so payloads below [`MIN_BITS`](crate::watermark::MIN_BITS) can be used
/// on miniature problems.
pub fn joint_loss(
    model: &Model,
    data: &Corpus,
    triggers: &[TriggerSample],
    wm: &[i8],
    explainer: &Explainer,
    cfg: &EmbedConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if wm.len() != explainer.masks().bits() || wm.iter().any(|&b| b != 1 && b != -1) {
        return Err(Error::dim(format!(
            "{} sign bits for a {}-bit mask set",
            wm.len(),
            explainer.masks().bits()
        )));
    }
    let examples = Examples::of(data);
    let batch: Vec<usize> = (0..examples.len()).collect();
    let mut model = model.clone();
    let mut g = Graph::new();
    let (_, _, root) = objective(
        &model, &mut g, data, &examples, &batch, triggers, wm, explainer, cfg,
    )?;
    g.forward(model.params())?;
    let value = g.scalar(root)?;
    model.params_mut().zero_grad();
    g.backward(root, model.params_mut())?;
    Ok((value, model.params().flatten_grads()))
}

/// Examples used to monitor benign quality during embedding.
const MONITOR: usize = 1000;

/// Fine-tunes a copy of `model` so every trigger explains to `wm`.
pub fn embed_watermark(
    model: &Model,
    data: &Corpus,
    triggers: &[TriggerSample],
    wm: &Watermark,
    cfg: &EmbedConfig,
) -> Result<Embedded> {
    cfg.validate()?;
    let first = triggers
        .first()
        .ok_or_else(|| Error::Data("no trigger samples".into()))?;
    if triggers.iter().any(|t| t.input_len() != first.input_len()) {
        return Err(Error::dim("trigger samples differ in length"));
    }
    let explainer = cfg.explainer(first.input_len(), wm.len())?;
    embed_with(model, data, triggers, wm, &explainer, cfg)
}

/// As [`embed_watermark`] with a caller-supplied mask set and partition.
pub fn embed_with(
    model: &Model,
    data: &Corpus,
    triggers: &[TriggerSample],
    wm: &Watermark,
    explainer: &Explainer,
    cfg: &EmbedConfig,
) -> Result<Embedded> {
    cfg.validate()?;
    if triggers.is_empty() {
        return Err(Error::Data("no trigger samples".into()));
    }
    if explainer.masks().bits() != wm.len() {
        return Err(Error::dim(format!(
            "mask set has {} bits, watermark {}",
            explainer.masks().bits(),
            wm.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("benign data is empty".into()));
    }
    let mut model = model.clone();
    let examples = Examples::of(data);
    let (monitor, _) = data.split_at(MONITOR.min(data.len()));
    let baseline_benign = benign_score(&model, &monitor)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut settled = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(
            examples.len(),
            cfg.batch_size,
            rng::mix(cfg.seed, &[0xe3b]),
            epoch,
        );
        let mut l1_total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let (l1, l2, root) = objective(
                &model,
                &mut g,
                data,
                &examples,
                batch,
                triggers,
                wm.bits(),
                explainer,
                cfg,
            )?;
            g.forward(model.params())?;
            let l1v = g.scalar(l1)?;
            if !l1v.is_finite() {
                return Err(Error::Divergence(format!(
                    "benign loss L1 is {l1v} at epoch {epoch}, step {step}"
                )));
            }
            if let Some(l2) = l2 {
                let l2v = g.scalar(l2)?;
                if !l2v.is_finite() {
                    return Err(Error::Divergence(format!(
                        "watermark loss L2 is {l2v} at epoch {epoch}, step {step}"
                    )));
                }
            }
            l1_total += l1v;
            model.params_mut().zero_grad();
            g.backward(root, model.params_mut())?;
            opt.step(model.params_mut());
        }
        let l2 = current_watermark_loss(&model, triggers, explainer, wm, cfg.loss, cfg.epsilon)?;
        let record = EpochRecord {
            epoch,
            l1: l1_total / batches.len() as f64,
            l2,
            wsr: mean_wsr(&model, triggers, explainer, wm)?,
            benign: benign_score(&model, &monitor)?,
        };
        history.push(record);
        if !model.params().flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!(
                "parameters became non-finite at epoch {epoch}"
            )));
        }
        settled = if record.l2 == 0.0 && record.benign >= baseline_benign - 0.01 {
            settled + 1
        } else {
            0
        };
        if cfg.early_stop && settled >= 3 {
            break;
        }
    }
    Ok(Embedded {
        model,
        explainer: explainer.clone(),
        baseline_benign,
        history,
    })
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        assert!((hinge_loss(&[0.5, -0.5], &[1, 1], 0.01).unwrap() - 0.51).abs() < 1e-15);
        assert_eq!(hinge_loss(&[0.02, -0.3], &[1, -1], 0.01).unwrap(), 0.0);
        assert!(
            (hinge_loss(&[0.0; 8], &[1, -1, 1, -1, 1, 1, -1, -1], 0.01).unwrap() - 0.08).abs()
                < 1e-15
        );
        assert!(matches!(
            hinge_loss(&[0.0], &[1, 1], 0.01),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn ce_examples() {
        assert!((ce_watermark_loss(&[0.0], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // -ln sigmoid(10) and -ln sigmoid(-10), 50-digit reference values
        let pos = ce_watermark_loss(&[10.0], &[1]).unwrap();
        assert!((pos - 4.539889921686464676948783e-5).abs() < 1e-18);
        let neg = ce_watermark_loss(&[-10.0], &[1]).unwrap();
        assert!((neg - 10.00004539889921686464677).abs() < 1e-12);
        assert_eq!(
            ce_watermark_loss(&[-3.0], &[-1]).unwrap(),
            ce_watermark_loss(&[3.0], &[1]).unwrap()
        );
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_watermark_loss(&[0.0], &[1]).unwrap(), 0.25);
        assert!(mse_watermark_loss(&[50.0, -50.0], &[1, -1]).unwrap() < 1e-20);
        let e = [0.3, -1.2, 2.0];
        let wm = [1, 1, -1];
        let direct: f64 = e
            .iter()
            .zip(wm)
            .map(|(&x, b)| {
                let p = 1.0 / (1.0 + f64::exp(-x));
                let t = if b == 1 { 1.0 } else { 0.0 };
                (t - p) * (t - p)
            })
            .sum();
        assert!((mse_watermark_loss(&e, &wm).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn loss_nodes_agree_with_scalar_losses() {
        let wm = Watermark::new(vec![1, -1, 1, 1, -1, -1, 1, -1]).unwrap();
        let e = vec![0.004, -0.2, -0.1, 0.3, 0.05, -0.009, 0.0, 0.01];
        for kind in [WatermarkLoss::Hinge, WatermarkLoss::Ce, WatermarkLoss::Mse] {
            let mut g = Graph::new();
            let en = g.input(Tensor::matrix(1, 8, e.clone()).unwrap());
            let l = watermark_loss_node(&mut g, en, wm.bits(), kind, 0.01).unwrap();
            g.forward(&Default::default()).unwrap();
            let want = watermark_loss(kind, &e, wm.bits(), 0.01).unwrap();
            assert!((g.scalar(l).unwrap() - want).abs() < 1e-14, "{kind}");
        }
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut EmbedConfig)| {
            let mut c = EmbedConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.epsilon = 0.0));
        assert!(bad(|c| c.r1 = -1.0));
        assert!(bad(|c| c.epochs = 0));
        assert!(EmbedConfig::default().validate().is_ok());
        assert_eq!("mse".parse::<WatermarkLoss>().unwrap(), WatermarkLoss::Mse);
        assert!("ssim".parse::<WatermarkLoss>().is_err());
    }
}
