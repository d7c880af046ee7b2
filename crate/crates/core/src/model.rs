//! The two model backends and the black-box prediction interface every
//! downstream consumer (extraction, verification, attacks) goes through.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Token id reserved for masked and padding positions. Corpora never use it.
pub const UNK: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Classifier,
    CausalLm,
}

impl Backend {
    pub fn tag(self) -> u8 {
        match self {
            Backend::Classifier => 0,
            Backend::CausalLm => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Backend::Classifier),
            1 => Some(Backend::CausalLm),
            _ => None,
        }
    }
}

/// Architecture of a model. Unused dimensions are zero: a classifier has no
/// vocabulary and a language model's class count is its vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub backend: Backend,
    pub input_dim: usize,
    pub classes: usize,
    pub vocab: usize,
    pub context: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn classifier(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            backend: Backend::Classifier,
            input_dim,
            classes,
            vocab: 0,
            context: 0,
            embed_dim: 0,
            hidden,
        }
    }

    pub fn causal_lm(vocab: usize, context: usize, embed_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            backend: Backend::CausalLm,
            input_dim: 0,
            classes: vocab,
            vocab,
            context,
            embed_dim,
            hidden,
        }
    }

    /// 16x16 inputs, hidden [128, 64], 10 classes.
    pub fn default_classifier() -> Self {
        Self::classifier(256, vec![128, 64], 10)
    }

    /// Vocabulary 64, context 32, embedding width 16, hidden [128].
    pub fn default_lm() -> Self {
        Self::causal_lm(64, 32, 16, vec![128])
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden widths must be nonempty and positive".into(),
            ));
        }
        match self.backend {
            Backend::Classifier => {
                if self.input_dim == 0 || self.classes == 0 {
                    return Err(Error::Config("classifier needs m >= 1 and n >= 1".into()));
                }
            }
            Backend::CausalLm => {
                // vocab 1 would only hold UNK
                if self.vocab < 2 || self.context == 0 || self.embed_dim == 0 {
                    return Err(Error::Config(
                        "language model needs V >= 2, L >= 1 and embedding width >= 1".into(),
                    ));
                }
                if self.classes != self.vocab {
                    return Err(Error::Config(
                        "language model class count must equal V".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Width of the first dense layer's input.
    pub fn flat_input(&self) -> usize {
        match self.backend {
            Backend::Classifier => self.input_dim,
            Backend::CausalLm => self.context * self.embed_dim,
        }
    }

    /// Parameter names and shapes in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        if self.backend == Backend::CausalLm {
            out.push(("embed.weight".to_owned(), vec![self.vocab, self.embed_dim]));
        }
        let mut fan_in = self.flat_input();
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("dense{i}.weight"), vec![h, fan_in]));
            out.push((format!("dense{i}.bias"), vec![h]));
            fan_in = h;
        }
        out.push(("out.weight".to_owned(), vec![self.classes, fan_in]));
        out.push(("out.bias".to_owned(), vec![self.classes]));
        out
    }
}

/// One black-box query.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Features(Vec<f64>),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutput {
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl PredictOutput {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let predicted = argmax(&probs);
        Self { probs, predicted }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Query-only access to a model. Extraction, verification and the attack
/// wrappers see models exclusively through this trait.
pub trait BlackBox {
    fn backend(&self) -> Backend;

    /// Class distribution per classifier input, or next-token distribution
    /// after each token sequence. Order-preserving.
    fn predict_batch(&self, inputs: &[Sample]) -> Result<Vec<PredictOutput>>;

    /// For each sequence, the probability of `truth[j]` at position
    /// `targets[j]` given the tokens before it. Masked sequences keep their
    /// original truth even where the target itself was occluded.
    fn lm_token_probs(
        &self,
        seqs: &[Vec<u32>],
        targets: &[usize],
        truth: &[u32],
    ) -> Result<Vec<Vec<f64>>>;

    /// Probability of `tokens[p]` given `tokens[..p]`, for every `p` in
    /// `targets`.
    fn lm_target_probs(&self, tokens: &[u32], targets: &[usize]) -> Result<Vec<f64>> {
        let truth = targets
            .iter()
            .map(|&p| {
                tokens.get(p).copied().ok_or_else(|| {
                    Error::Index(format!("target position {p} outside 1..{}", tokens.len()))
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        let mut out = self.lm_token_probs(&[tokens.to_vec()], targets, &truth)?;
        Ok(out.pop().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
}

/// Parameter nodes of one model inside one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    embed: Option<NodeId>,
    layers: Vec<(NodeId, NodeId)>,
}

impl Model {
    /// He-normal weights, zero biases, N(0, 1) embeddings.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::split(seed, 0x1417);
        let mut params = ParamStore::new();
        for (name, shape) in spec.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name == "embed.weight" {
                let d = Normal::new(0.0, 1.0).expect("valid normal");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            } else {
                let std = (2.0 / shape[1] as f64).sqrt();
                let d = Normal::new(0.0, std).expect("valid normal");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            };
            params.add(&name, Tensor::new(shape, data)?)?;
        }
        Ok(Self { spec, params })
    }

    /// Assembles a model from explicit parameters, checking them against the
    /// spec's layout.
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != params.len() {
            return Err(Error::dim(format!(
                "spec declares {} parameters, store has {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), id) in layout.iter().zip(params.ids()) {
            if params.name(id) != name || params.value(id).shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "parameter `{}` {:?} does not match `{name}` {shape:?}",
                    params.name(id),
                    params.value(id).shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ids of every weight (non-bias) parameter, embeddings included.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).ends_with(".weight"))
            .collect()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        let p = &self.params;
        let embed = p.id("embed.weight").map(|id| g.param(p, id));
        let mut layers = Vec::new();
        for i in 0..self.spec.hidden.len() {
            let w = p.id(&format!("dense{i}.weight")).expect("layout");
            let b = p.id(&format!("dense{i}.bias")).expect("layout");
            layers.push((g.param(p, w), g.param(p, b)));
        }
        let w = p.id("out.weight").expect("layout");
        let b = p.id("out.bias").expect("layout");
        layers.push((g.param(p, w), g.param(p, b)));
        Bound { embed, layers }
    }

    fn mlp(&self, g: &mut Graph, bound: &Bound, mut h: NodeId) -> Result<NodeId> {
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            h = g.dense(h, w, Some(b))?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Logits for a `B x m` feature matrix.
    pub fn logits_features(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        if self.spec.backend != Backend::Classifier {
            return Err(Error::Config("feature input to a language model".into()));
        }
        let (_, cols) = g.shape(x);
        if cols != self.spec.input_dim {
            return Err(Error::dim(format!(
                "input has {cols} features, model expects {}",
                self.spec.input_dim
            )));
        }
        self.mlp(g, bound, x)
    }

    /// Next-token logits for context windows given as `B x L` token ids.
    pub fn logits_windows(
        &self,
        g: &mut Graph,
        bound: &Bound,
        windows: Vec<u32>,
    ) -> Result<NodeId> {
        let table = bound
            .embed
            .ok_or_else(|| Error::Config("token input to a classifier".into()))?;
        let h = g.embedding(table, windows, self.spec.context)?;
        self.mlp(g, bound, h)
    }

    /// Context window for predicting `tokens[pos]`: the preceding `L`
    /// tokens, left-padded with [`UNK`].
    pub fn window(&self, tokens: &[u32], pos: usize) -> Vec<u32> {
        let l = self.spec.context;
        let start = pos.saturating_sub(l);
        let mut w = vec![UNK; l - (pos - start)];
        w.extend_from_slice(&tokens[start..pos]);
        w
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.spec.vocab) {
            return Err(Error::Index(format!(
                "token {bad} with vocabulary {}",
                self.spec.vocab
            )));
        }
        Ok(())
    }

    /// Windows and target tokens for the given positions of a sequence.
    pub fn target_windows(
        &self,
        tokens: &[u32],
        targets: &[usize],
    ) -> Result<(Vec<u32>, Vec<usize>)> {
        if self.spec.backend != Backend::CausalLm {
            return Err(Error::Config(
                "target probabilities need a language model".into(),
            ));
        }
        self.check_tokens(tokens)?;
        let mut windows = Vec::with_capacity(targets.len() * self.spec.context);
        let mut ys = Vec::with_capacity(targets.len());
        for &p in targets {
            if p == 0 || p >= tokens.len() {
                return Err(Error::Index(format!(
                    "target position {p} outside 1..{}",
                    tokens.len()
                )));
            }
            windows.extend(self.window(tokens, p));
            ys.push(tokens[p] as usize);
        }
        Ok((windows, ys))
    }

    fn eval_probs(
        &self,
        build: impl FnOnce(&mut Graph, &Bound) -> Result<NodeId>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let logits = build(&mut g, &bound)?;
        let probs = g.softmax(logits);
        g.forward(&self.params)?;
        g.value(probs)
    }

    /// Softmax outputs for a stack of feature rows.
    pub fn probs_features(&self, rows: usize, features: Vec<f64>) -> Result<Tensor> {
        let x = Tensor::matrix(rows, self.spec.input_dim, features)?;
        self.eval_probs(|g, b| {
            let xn = g.input(x);
            self.logits_features(g, b, xn)
        })
    }

    pub fn probs_windows(&self, windows: Vec<u32>) -> Result<Tensor> {
        self.eval_probs(|g, b| self.logits_windows(g, b, windows))
    }
}

impl BlackBox for Model {
    fn backend(&self) -> Backend {
        self.spec.backend
    }

    fn predict_batch(&self, inputs: &[Sample]) -> Result<Vec<PredictOutput>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let probs = match self.spec.backend {
            Backend::Classifier => {
                let m = self.spec.input_dim;
                let mut flat = Vec::with_capacity(inputs.len() * m);
                for s in inputs {
                    match s {
                        Sample::Features(x) if x.len() == m => flat.extend_from_slice(x),
                        Sample::Features(x) => {
                            return Err(Error::dim(format!(
                                "input has {} features, model expects {m}",
                                x.len()
                            )))
                        }
                        Sample::Tokens(_) => {
                            return Err(Error::Config("token input to a classifier".into()))
                        }
                    }
                }
                self.probs_features(inputs.len(), flat)?
            }
            Backend::CausalLm => {
                let mut windows = Vec::with_capacity(inputs.len() * self.spec.context);
                for s in inputs {
                    match s {
                        Sample::Tokens(t) => {
                            self.check_tokens(t)?;
                            windows.extend(self.window(t, t.len()));
                        }
                        Sample::Features(_) => {
                            return Err(Error::Config("feature input to a language model".into()))
                        }
                    }
                }
                self.probs_windows(windows)?
            }
        };
        let (rows, _) = probs.dims2();
        Ok((0..rows)
            .map(|r| PredictOutput::from_probs(probs.row(r).to_vec()))
            .collect())
    }

    fn lm_token_probs(
        &self,
        seqs: &[Vec<u32>],
        targets: &[usize],
        truth: &[u32],
    ) -> Result<Vec<Vec<f64>>> {
        if self.spec.backend != Backend::CausalLm {
            return Err(Error::Config(
                "target probabilities need a language model".into(),
            ));
        }
        if truth.len() != targets.len() {
            return Err(Error::dim(format!(
                "{} truth tokens for {} targets",
                truth.len(),
                targets.len()
            )));
        }
        self.check_tokens(truth)?;
        if targets.is_empty() {
            return Ok(vec![Vec::new(); seqs.len()]);
        }
        let mut windows = Vec::new();
        for s in seqs {
            windows.extend(self.target_windows(s, targets)?.0);
        }
        let probs = self.probs_windows(windows)?;
        let v = self.spec.vocab;
        let picked: Vec<f64> = (0..seqs.len() * targets.len())
            .map(|r| probs.data()[r * v + truth[r % targets.len()] as usize])
            .collect();
        Ok(picked.chunks(targets.len()).map(<[f64]>::to_vec).collect())
    }
}

/// Softmax of a single logit row, exposed for wrappers that average outputs.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_classifier() -> Model {
        Model::init(ModelSpec::classifier(6, vec![5], 3), 11).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::classifier(0, vec![4], 2).validate().is_err());
        assert!(ModelSpec::classifier(4, vec![], 2).validate().is_err());
        assert!(ModelSpec::causal_lm(8, 0, 4, vec![4]).validate().is_err());
        assert!(ModelSpec::default_classifier().validate().is_ok());
        assert!(ModelSpec::default_lm().validate().is_ok());
    }

    #[test]
    fn duplicate_inputs_give_identical_outputs() {
        let m = small_classifier();
        let x = Sample::Features(vec![0.1, -0.2, 0.3, 0.4, 0.0, 1.0]);
        let out = m.predict_batch(&[x.clone(), x]).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn zero_input_gives_distribution() {
        let m = small_classifier();
        let out = m.predict_batch(&[Sample::Features(vec![0.0; 6])]).unwrap();
        assert!((out[0].probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batch_equals_singletons() {
        let m = small_classifier();
        let inputs: Vec<Sample> = (0..5)
            .map(|i| Sample::Features((0..6).map(|j| ((i * 6 + j) as f64 * 0.37).sin()).collect()))
            .collect();
        let batch = m.predict_batch(&inputs).unwrap();
        for (s, b) in inputs.iter().zip(&batch) {
            let single = m.predict_batch(std::slice::from_ref(s)).unwrap();
            for (x, y) in single[0].probs.iter().zip(&b.probs) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn predict_rejects_wrong_width() {
        let m = small_classifier();
        assert!(matches!(
            m.predict_batch(&[Sample::Features(vec![0.0; 5])]),
            Err(Error::Dimension(_))
        ));
    }

    fn zero_output_lm() -> Model {
        let mut m = Model::init(ModelSpec::causal_lm(4, 3, 2, vec![5]), 2).unwrap();
        let p = m.params_mut();
        for name in ["out.weight", "out.bias"] {
            let id = p.id(name).unwrap();
            p.value_mut(id).fill(0.0);
        }
        m
    }

    #[test]
    fn uniform_output_layer_gives_quarter_probs() {
        let m = zero_output_lm();
        let probs = m.lm_target_probs(&[1, 2, 3, 1, 2], &[1, 2, 3, 4]).unwrap();
        assert_eq!(probs.len(), 4);
        for p in probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_target_set() {
        let m = zero_output_lm();
        assert!(m.lm_target_probs(&[1, 2, 3], &[]).unwrap().is_empty());
    }

    #[test]
    fn target_position_zero_rejected() {
        let m = zero_output_lm();
        assert!(matches!(
            m.lm_target_probs(&[1, 2, 3], &[0]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            m.lm_target_probs(&[1, 2, 3], &[3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn target_probs_match_single_position_passes() {
        let m = Model::init(ModelSpec::causal_lm(6, 3, 2, vec![7]), 5).unwrap();
        let seq = vec![1, 4, 2, 5, 3, 3, 1];
        let targets = vec![1, 3, 4, 6];
        let batch = m.lm_target_probs(&seq, &targets).unwrap();
        for (&p, &got) in targets.iter().zip(&batch) {
            let out = m
                .predict_batch(&[Sample::Tokens(seq[..p].to_vec())])
                .unwrap();
            assert!((out[0].probs[seq[p] as usize] - got).abs() < 1e-14);
        }
    }

    #[test]
    fn window_left_pads_with_unk() {
        let m = Model::init(ModelSpec::causal_lm(6, 3, 2, vec![4]), 5).unwrap();
        assert_eq!(m.window(&[1, 2, 3, 4], 1), vec![0, 0, 1]);
        assert_eq!(m.window(&[1, 2, 3, 4], 4), vec![2, 3, 4]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
    }
}
