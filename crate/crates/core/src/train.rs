//! Supervised training (plain cross-entropy) and benign-task scoring.

use rand::seq::SliceRandom;

use crate::data::{Corpus, LabeledSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Backend, BlackBox, Bound, Model, ModelSpec, Sample};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::tensor::Tensor;
use crate::watermark::TriggerSample;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Flat list of training examples: row indices for labeled data, or
/// `(sequence, position)` pairs for a token corpus.
#[derive(Debug, Clone)]
pub(crate) enum Examples {
    Rows(usize),
    Positions(Vec<(u32, u32)>),
}

impl Examples {
    pub(crate) fn of(corpus: &Corpus) -> Self {
        match corpus {
            Corpus::Labeled(d) => Examples::Rows(d.len()),
            Corpus::Tokens(c) => Examples::Positions(
                c.seqs()
                    .iter()
                    .enumerate()
                    .flat_map(|(s, seq)| (1..seq.len()).map(move |p| (s as u32, p as u32)))
                    .collect(),
            ),
        }
    }

    pub(crate) fn len(&self) -> usize {
        match self {
            Examples::Rows(n) => *n,
            Examples::Positions(v) => v.len(),
        }
    }
}

fn check_compatible(spec: &ModelSpec, corpus: &Corpus) -> Result<()> {
    match (spec.backend, corpus) {
        (Backend::Classifier, Corpus::Labeled(d)) => {
            if d.dim() != spec.input_dim {
                return Err(Error::dim(format!(
                    "data has {} features, model expects {}",
                    d.dim(),
                    spec.input_dim
                )));
            }
            if d.classes() > spec.classes {
                return Err(Error::Data(format!(
                    "data has {} classes, model has {}",
                    d.classes(),
                    spec.classes
                )));
            }
            Ok(())
        }
        (Backend::CausalLm, Corpus::Tokens(c)) => {
            if c.vocab() > spec.vocab {
                return Err(Error::Data(format!(
                    "corpus vocabulary {} exceeds model vocabulary {}",
                    c.vocab(),
                    spec.vocab
                )));
            }
            Ok(())
        }
        _ => Err(Error::Config(
            "dataset kind does not match model backend".into(),
        )),
    }
}

/// Mean cross-entropy node over the selected examples plus every trigger
/// sample (with its ground-truth label or target tokens).
pub(crate) fn ce_node(
    model: &Model,
    g: &mut Graph,
    bound: &Bound,
    corpus: &Corpus,
    examples: &Examples,
    batch: &[usize],
    triggers: &[TriggerSample],
) -> Result<NodeId> {
    match (corpus, examples) {
        (Corpus::Labeled(d), Examples::Rows(_)) => {
            let m = d.dim();
            let mut x = Vec::with_capacity((batch.len() + triggers.len()) * m);
            let mut y = Vec::with_capacity(batch.len() + triggers.len());
            for &i in batch {
                x.extend_from_slice(d.row(i));
                y.push(d.label(i));
            }
            for t in triggers {
                match t {
                    TriggerSample::Classifier { input, label } => {
                        x.extend_from_slice(input);
                        y.push(*label);
                    }
                    TriggerSample::Lm { .. } => {
                        return Err(Error::Config(
                            "language-model trigger on a classifier".into(),
                        ))
                    }
                }
            }
            let rows = y.len();
            let xn = g.input(Tensor::matrix(rows, m, x)?);
            let logits = model.logits_features(g, bound, xn)?;
            g.softmax_ce(logits, y)
        }
        (Corpus::Tokens(c), Examples::Positions(pos)) => {
            let mut windows = Vec::new();
            let mut y = Vec::new();
            for &e in batch {
                let (s, p) = pos[e];
                let seq = &c.seqs()[s as usize];
                windows.extend(model.window(seq, p as usize));
                y.push(seq[p as usize] as usize);
            }
            for t in triggers {
                match t {
                    TriggerSample::Lm { tokens, targets } => {
                        let (w, ys) = model.target_windows(tokens, targets)?;
                        windows.extend(w);
                        y.extend(ys);
                    }
                    TriggerSample::Classifier { .. } => {
                        return Err(Error::Config(
                            "classifier trigger on a language model".into(),
                        ))
                    }
                }
            }
            let logits = model.logits_windows(g, bound, windows)?;
            g.softmax_ce(logits, y)
        }
        _ => Err(Error::Config(
            "dataset kind does not match model backend".into(),
        )),
    }
}

/// Shuffled mini-batches for one epoch.
pub(crate) fn epoch_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::split(seed, 0xe9 + epoch as u64));
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Initializes a model from `cfg.seed` and fits it.
pub fn train(spec: ModelSpec, data: &Corpus, cfg: &TrainConfig) -> Result<Model> {
    let mut model = Model::init(spec, cfg.seed)?;
    fit(&mut model, data, cfg)?;
    Ok(model)
}

/// Continues training `model` on `data`; returns the mean loss per epoch.
pub fn fit(model: &mut Model, data: &Corpus, cfg: &TrainConfig) -> Result<Vec<f64>> {
    check_compatible(model.spec(), data)?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let examples = Examples::of(data);
    if examples.len() == 0 {
        return Err(Error::Data("training set has no usable examples".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(examples.len(), cfg.batch_size, cfg.seed, epoch);
        for batch in &batches {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let loss = ce_node(model, &mut g, &bound, data, &examples, batch, &[])?;
            g.forward(model.params())?;
            let l = g.scalar(loss)?;
            if !l.is_finite() {
                return Err(Error::Divergence(format!(
                    "cross-entropy is {l} in epoch {epoch}"
                )));
            }
            total += l * batch.len() as f64;
            model.params_mut().zero_grad();
            g.backward(loss, model.params_mut())?;
            opt.step(model.params_mut());
        }
        history.push(total / examples.len() as f64);
    }
    Ok(history)
}

/// Mean cross-entropy over the whole dataset.
pub fn mean_loss(model: &Model, data: &Corpus) -> Result<f64> {
    check_compatible(model.spec(), data)?;
    let examples = Examples::of(data);
    if examples.len() == 0 {
        return Err(Error::Data("dataset has no usable examples".into()));
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(512) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let loss = ce_node(model, &mut g, &bound, data, &examples, chunk, &[])?;
        g.forward(model.params())?;
        total += g.scalar(loss)? * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy(model: &dyn BlackBox, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("accuracy over an empty set".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let inputs: Vec<Sample> = chunk
            .iter()
            .map(|&i| Sample::Features(data.row(i).to_vec()))
            .collect();
        let out = model.predict_batch(&inputs)?;
        correct += chunk
            .iter()
            .zip(&out)
            .filter(|(&i, o)| o.predicted == data.label(i))
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Benign-task quality: accuracy for labeled data, mean probability of the
/// true next token for a corpus.
pub fn benign_score(model: &dyn BlackBox, data: &Corpus) -> Result<f64> {
    match data {
        Corpus::Labeled(d) => accuracy(model, d),
        Corpus::Tokens(c) => {
            let mut total = 0.0;
            let mut n = 0usize;
            for seq in c.seqs() {
                let targets: Vec<usize> = (1..seq.len()).collect();
                let probs = model.lm_target_probs(seq, &targets)?;
                total += probs.iter().sum::<f64>();
                n += probs.len();
            }
            if n == 0 {
                return Err(Error::Data("corpus has no targets".into()));
            }
            Ok(total / n as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blobs, BlobParams};

    fn toy() -> Corpus {
        Corpus::Labeled(
            blobs(&BlobParams {
                samples: 120,
                classes: 3,
                side: 4,
                sigma: 0.5,
                spread: 1.0,
                base: 0.0,
                seed: 4,
            })
            .unwrap(),
        )
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let spec = ModelSpec::classifier(16, vec![8], 3);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let m = train(spec.clone(), &toy(), &cfg).unwrap();
        assert_eq!(m, Model::init(spec, cfg.seed).unwrap());
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let spec = ModelSpec::classifier(16, vec![8], 3);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            ..Default::default()
        };
        let data = toy();
        let before = mean_loss(&Model::init(spec.clone(), cfg.seed).unwrap(), &data).unwrap();
        let a = train(spec.clone(), &data, &cfg).unwrap();
        let b = train(spec, &data, &cfg).unwrap();
        assert!(mean_loss(&a, &data).unwrap() < before);
        assert_eq!(a.params().flatten(), b.params().flatten());
    }

    #[test]
    fn empty_dataset_rejected() {
        let spec = ModelSpec::classifier(4, vec![3], 2);
        let empty = Corpus::Labeled(LabeledSet::new(4, 2, vec![], vec![]).unwrap());
        assert!(matches!(
            train(spec, &empty, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn backend_mismatch_rejected() {
        let spec = ModelSpec::causal_lm(8, 4, 2, vec![4]);
        assert!(matches!(
            train(spec, &toy(), &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
