//! Removal and adaptive attacks against a watermarked model: fine-tuning,
//! magnitude pruning, overwriting, unlearning, and input masking at query
//! time. Each returns something usable through [`BlackBox`], so
//! verification is attack-agnostic.

use std::fmt;

use rand::Rng as _;

use crate::data::Corpus;
use crate::embedding::{embed_with, total_watermark_node, EmbedConfig, Embedded, WatermarkLoss};
use crate::error::{Error, Result};
use crate::extraction::Explainer;
use crate::graph::Graph;
use crate::model::{Backend, BlackBox, Model, PredictOutput, Sample, UNK};
use crate::optim::Optimizer;
use crate::rng;
use crate::train::{benign_score, ce_node, epoch_batches, Examples, TrainConfig};
use crate::verification::verify;
use crate::watermark::{segment_input, BasicPartition, TriggerSample, Watermark};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Finetune,
    Prune,
    Overwrite,
    Unlearn,
    InputMask,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Self::Finetune),
            "prune" => Ok(Self::Prune),
            "overwrite" => Ok(Self::Overwrite),
            "unlearn" => Ok(Self::Unlearn),
            "input_mask" => Ok(Self::InputMask),
            _ => Err(Error::Config(format!(
                "unknown attack `{s}` (finetune, prune, overwrite, unlearn, input_mask)"
            ))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Finetune => "finetune",
            Self::Prune => "prune",
            Self::Overwrite => "overwrite",
            Self::Unlearn => "unlearn",
            Self::InputMask => "input_mask",
        })
    }
}

/// One point of an attack trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub benign: f64,
    pub wsr: f64,
    pub log10_p: f64,
}

impl TracePoint {
    pub const CSV_HEADER: &'static str = "step,benign_acc,wsr,log10_p";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.step, self.benign, self.wsr, self.log10_p
        )
    }
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from(TracePoint::CSV_HEADER);
    s.push('\n');
    for p in trace {
        s.push_str(&p.csv_row());
        s.push('\n');
    }
    s
}

/// The owner's verification key plus a benign evaluation set, used to
/// measure a model during an attack.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub trigger: &'a TriggerSample,
    pub explainer: &'a Explainer,
    pub watermark: &'a Watermark,
    pub eval: &'a Corpus,
}

impl Monitor<'_> {
    pub fn measure(&self, model: &dyn BlackBox, step: usize) -> Result<TracePoint> {
        let r = verify(model, self.trigger, self.explainer, self.watermark, 0.01)?;
        Ok(TracePoint {
            step,
            benign: benign_score(model, self.eval)?,
            wsr: r.wsr,
            log10_p: r.log10_p,
        })
    }
}

/// Plain cross-entropy training on held-out data, measured once before
/// and after every epoch.
pub fn finetune_attack(
    model: &Model,
    heldout: &Corpus,
    cfg: &TrainConfig,
    monitor: Option<&Monitor<'_>>,
) -> Result<(Model, Vec<TracePoint>)> {
    unlearn_loop(model, heldout, cfg, None, monitor)
}

/// Adversary material for the unlearning attack: a guessed payload, their
/// own trigger, and their own extraction setup.
#[derive(Debug, Clone)]
pub struct UnlearnSpec {
    pub guess: Watermark,
    pub trigger: TriggerSample,
    pub explainer: Explainer,
    pub r1: f64,
    pub epsilon: f64,
    pub loss: WatermarkLoss,
}

/// Descends `L1 - r1 * L2(explain(trigger), guess)`: benign training while
/// pushing the adversary's explanation away from the guessed payload.
pub fn unlearn_attack(
    model: &Model,
    data: &Corpus,
    spec: &UnlearnSpec,
    cfg: &TrainConfig,
    monitor: Option<&Monitor<'_>>,
) -> Result<(Model, Vec<TracePoint>)> {
    if !(spec.r1 >= 0.0 && spec.r1.is_finite()) {
        return Err(Error::Config(format!("r1 must be >= 0, got {}", spec.r1)));
    }
    unlearn_loop(model, data, cfg, Some(spec), monitor)
}

fn unlearn_loop(
    model: &Model,
    data: &Corpus,
    cfg: &TrainConfig,
    spec: Option<&UnlearnSpec>,
    monitor: Option<&Monitor<'_>>,
) -> Result<(Model, Vec<TracePoint>)> {
    if data.is_empty() {
        return Err(Error::Data("attack data is empty".into()));
    }
    let mut model = model.clone();
    let examples = Examples::of(data);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut trace = Vec::new();
    if let Some(m) = monitor {
        trace.push(m.measure(&model, 0)?);
    }
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(examples.len(), cfg.batch_size, cfg.seed, epoch) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let l1 = ce_node(&model, &mut g, &bound, data, &examples, &batch, &[])?;
            let mut root = l1;
            if let Some(s) = spec.filter(|s| s.r1 > 0.0) {
                let l2 = total_watermark_node(
                    &model,
                    &mut g,
                    &bound,
                    std::slice::from_ref(&s.trigger),
                    &s.explainer,
                    s.guess.bits(),
                    s.loss,
                    s.epsilon,
                )?
                .expect("one trigger");
                let neg = g.scale(l2, -s.r1);
                root = g.add(l1, neg)?;
            }
            g.forward(model.params())?;
            let v = g.scalar(root)?;
            if !v.is_finite() {
                return Err(Error::Divergence(format!(
                    "attack objective is {v} at step {step}"
                )));
            }
            model.params_mut().zero_grad();
            g.backward(root, model.params_mut())?;
            opt.step(model.params_mut());
            step += 1;
        }
        if let Some(m) = monitor {
            trace.push(m.measure(&model, epoch + 1)?);
        }
    }
    Ok((model, trace))
}

/// Zeroes the `ceil(rate * n)` weight entries of smallest magnitude
/// (biases exempt). Ties are broken by parameter order, then entry order.
/// With `per_layer`, each weight matrix is pruned at `rate` on its own.
pub fn prune_attack(model: &Model, rate: f64, per_layer: bool) -> Result<Model> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "prune rate must be in [0, 1], got {rate}"
        )));
    }
    let mut out = model.clone();
    let ids = out.weight_ids();
    let groups: Vec<Vec<_>> = if per_layer {
        ids.iter().map(|&id| vec![id]).collect()
    } else {
        vec![ids]
    };
    for group in groups {
        let mut entries: Vec<(f64, usize, usize)> = Vec::new();
        for (gi, &id) in group.iter().enumerate() {
            entries.extend(
                out.params()
                    .value(id)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (v.abs(), gi, j)),
            );
        }
        let n = (rate * entries.len() as f64).ceil() as usize;
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, gi, j) in &entries[..n.min(entries.len())] {
            out.params_mut().value_mut(group[gi]).data_mut()[j] = 0.0;
        }
    }
    Ok(out)
}

/// Number of weight entries exactly zero.
pub fn zero_weights(model: &Model) -> usize {
    model
        .weight_ids()
        .iter()
        .map(|&id| {
            model
                .params()
                .value(id)
                .data()
                .iter()
                .filter(|&&v| v == 0.0)
                .count()
        })
        .sum()
}

/// Embeds the adversary's watermark with their own trigger and masks.
pub fn overwrite_attack(
    model: &Model,
    data: &Corpus,
    trigger: &TriggerSample,
    watermark: &Watermark,
    explainer: &Explainer,
    cfg: &EmbedConfig,
) -> Result<Embedded> {
    embed_with(
        model,
        data,
        std::slice::from_ref(trigger),
        watermark,
        explainer,
        cfg,
    )
}

/// Query-time defense that averages the wrapped model's output over `h`
/// random occlusions of each input, each part zeroed with probability `tau`.
/// The occlusions are seeded from the input itself, so the wrapper is a
/// pure function of its queries. At `tau = 0` queries pass straight through.
pub struct InputMask<'a> {
    inner: &'a dyn BlackBox,
    partition: BasicPartition,
    h: usize,
    tau: f64,
    seed: u64,
}

impl<'a> InputMask<'a> {
    pub fn new(
        inner: &'a dyn BlackBox,
        partition: BasicPartition,
        h: usize,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("input masking needs h >= 1".into()));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!(
                "masking rate must be in [0, 1], got {tau}"
            )));
        }
        Ok(Self {
            inner,
            partition,
            h,
            tau,
            seed,
        })
    }

    /// One part per feature or token.
    pub fn per_feature(
        inner: &'a dyn BlackBox,
        m: usize,
        h: usize,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::new(inner, segment_input(m, m)?, h, tau, seed)
    }

    fn draws(&self, key: u64) -> Vec<Vec<bool>> {
        let mut r = rng::split(rng::mix(self.seed, &[key]), 0x1a5c);
        (0..self.h)
            .map(|_| {
                (0..self.partition.parts())
                    .map(|_| self.tau > 0.0 && r.random_bool(self.tau))
                    .collect()
            })
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.partition.input_len() {
            return Err(Error::dim(format!(
                "input of length {len}, masking partition covers {}",
                self.partition.input_len()
            )));
        }
        Ok(())
    }

    fn occlude_features(&self, x: &[f64]) -> Vec<Sample> {
        let key = rng::mix(0xfea7, &x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        self.draws(key)
            .into_iter()
            .map(|drop| {
                let mut y = x.to_vec();
                for (i, &d) in drop.iter().enumerate() {
                    if d {
                        y[self.partition.part(i)].fill(0.0);
                    }
                }
                Sample::Features(y)
            })
            .collect()
    }

    fn occlude_tokens(&self, t: &[u32]) -> Vec<Vec<u32>> {
        let key = rng::mix(0x70c, &t.iter().map(|&v| u64::from(v)).collect::<Vec<_>>());
        self.draws(key)
            .into_iter()
            .map(|drop| {
                let mut y = t.to_vec();
                for (i, &d) in drop.iter().enumerate() {
                    if d {
                        y[self.partition.part(i)].fill(UNK);
                    }
                }
                y
            })
            .collect()
    }
}

impl BlackBox for InputMask<'_> {
    fn backend(&self) -> Backend {
        self.inner.backend()
    }

    fn predict_batch(&self, inputs: &[Sample]) -> Result<Vec<PredictOutput>> {
        if self.tau == 0.0 {
            for s in inputs {
                self.check_len(match s {
                    Sample::Features(x) => x.len(),
                    Sample::Tokens(t) => t.len(),
                })?;
            }
            return self.inner.predict_batch(inputs);
        }
        let mut expanded = Vec::with_capacity(inputs.len() * self.h);
        for s in inputs {
            match s {
                Sample::Features(x) => {
                    self.check_len(x.len())?;
                    expanded.extend(self.occlude_features(x));
                }
                Sample::Tokens(t) => {
                    self.check_len(t.len())?;
                    expanded.extend(self.occlude_tokens(t).into_iter().map(Sample::Tokens));
                }
            }
        }
        let outs = self.inner.predict_batch(&expanded)?;
        Ok(outs
            .chunks(self.h)
            .map(|group| {
                let n = group[0].probs.len();
                let mut p = vec![0.0; n];
                for o in group {
                    for (a, b) in p.iter_mut().zip(&o.probs) {
                        *a += b;
                    }
                }
                p.iter_mut().for_each(|v| *v /= self.h as f64);
                PredictOutput::from_probs(p)
            })
            .collect())
    }

    fn lm_token_probs(
        &self,
        seqs: &[Vec<u32>],
        targets: &[usize],
        truth: &[u32],
    ) -> Result<Vec<Vec<f64>>> {
        if self.tau == 0.0 {
            for s in seqs {
                self.check_len(s.len())?;
            }
            return self.inner.lm_token_probs(seqs, targets, truth);
        }
        let mut expanded = Vec::with_capacity(seqs.len() * self.h);
        for s in seqs {
            self.check_len(s.len())?;
            expanded.extend(self.occlude_tokens(s));
        }
        let probs = self.inner.lm_token_probs(&expanded, targets, truth)?;
        Ok(probs
            .chunks(self.h)
            .map(|group| {
                let mut p = vec![0.0; targets.len()];
                for row in group {
                    for (a, b) in p.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                p.iter_mut().for_each(|v| *v /= self.h as f64);
                p
            })
            .collect())
    }
}

pub const FINETUNE_EPOCHS: usize = 20;
pub const UNLEARN_EPOCHS: usize = 10;
pub const PRUNE_RATE: f64 = 0.4;
pub const MASK_RATE: f64 = 0.1;
pub const MASK_DRAWS: usize = 1;

/// Fine-tuning attack schedule: the pre-training optimizer for 20 epochs.
pub fn finetune_schedule(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: FINETUNE_EPOCHS,
        seed,
        ..TrainConfig::default()
    }
}

/// Unlearning attack schedule: the embedding optimizer for 10 epochs.
pub fn unlearn_schedule(seed: u64) -> TrainConfig {
    let e = EmbedConfig::default();
    TrainConfig {
        epochs: UNLEARN_EPOCHS,
        batch_size: e.batch_size,
        optimizer: e.optimizer,
        lr: e.lr,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn net() -> Model {
        Model::init(ModelSpec::classifier(8, vec![6], 3), 3).unwrap()
    }

    #[test]
    fn prune_counts() {
        let m = net();
        let total: usize = m
            .weight_ids()
            .iter()
            .map(|&id| m.params().value(id).len())
            .sum();
        assert_eq!(prune_attack(&m, 0.0, false).unwrap(), m);
        assert_eq!(zero_weights(&prune_attack(&m, 1.0, false).unwrap()), total);
        for rate in [0.1, 0.4, 0.77] {
            let p = prune_attack(&m, rate, false).unwrap();
            assert_eq!(zero_weights(&p), (rate * total as f64).ceil() as usize);
        }
        assert!(matches!(
            prune_attack(&m, 1.5, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prune_spares_biases_and_large_weights() {
        let mut m = net();
        let b = m.params().id("out.bias").unwrap();
        m.params_mut().value_mut(b).fill(1e-9);
        let p = prune_attack(&m, 0.5, false).unwrap();
        assert!(p.params().value(b).data().iter().all(|&v| v == 1e-9));
        let w: Vec<f64> = m
            .weight_ids()
            .iter()
            .flat_map(|&id| m.params().value(id).data().to_vec())
            .collect();
        let kept: Vec<f64> = p
            .weight_ids()
            .iter()
            .flat_map(|&id| p.params().value(id).data().to_vec())
            .collect();
        let max_pruned = w
            .iter()
            .zip(&kept)
            .filter(|(_, &k)| k == 0.0)
            .map(|(v, _)| v.abs())
            .fold(0.0, f64::max);
        let min_kept = kept
            .iter()
            .filter(|&&k| k != 0.0)
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        assert!(max_pruned <= min_kept);
    }

    #[test]
    fn per_layer_prune_hits_every_matrix() {
        let m = net();
        let p = prune_attack(&m, 0.5, true).unwrap();
        for id in p.weight_ids() {
            let t = p.params().value(id);
            let zeros = t.data().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, (0.5 * t.len() as f64).ceil() as usize);
        }
    }

    #[test]
    fn input_mask_identity_at_zero_rate() {
        let m = net();
        let x = vec![Sample::Features(vec![
            0.3, -1.0, 2.0, 0.5, 0.0, 1.0, -0.2, 0.8,
        ])];
        let wrapped = InputMask::per_feature(&m, 8, 3, 0.0, 1).unwrap();
        assert_eq!(
            wrapped.predict_batch(&x).unwrap(),
            m.predict_batch(&x).unwrap()
        );
    }

    #[test]
    fn input_mask_is_pure_and_validates() {
        let m = net();
        let x = vec![Sample::Features(vec![
            0.3, -1.0, 2.0, 0.5, 0.0, 1.0, -0.2, 0.8,
        ])];
        let wrapped = InputMask::per_feature(&m, 8, 2, 0.5, 1).unwrap();
        assert_eq!(
            wrapped.predict_batch(&x).unwrap(),
            wrapped.predict_batch(&x).unwrap()
        );
        let p = &wrapped.predict_batch(&x).unwrap()[0].probs;
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(InputMask::per_feature(&m, 8, 0, 0.5, 1).is_err());
        assert!(InputMask::per_feature(&m, 8, 1, 1.5, 1).is_err());
    }

    #[test]
    fn attack_names_roundtrip() {
        for k in [
            AttackKind::Finetune,
            AttackKind::Prune,
            AttackKind::Overwrite,
            AttackKind::Unlearn,
            AttackKind::InputMask,
        ] {
            assert_eq!(k.to_string().parse::<AttackKind>().unwrap(), k);
        }
    }
}
