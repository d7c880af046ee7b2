//! Watermark extraction by feature attribution: mask basic parts of a
//! trigger, score the model's predictions on the masked copies, fit a ridge
//! regression of the scores on the masks, and read the watermark off the
//! signs of the fitted weights.
//!
//! The ridge solution `w = (MᵀM + λI)⁻¹Mᵀv` is linear in `v`, so the map
//! `A = (MᵀM + λI)⁻¹Mᵀ` is computed once per mask set ([`Jacobian`]) and
//! reused both for extraction and for back-propagating through the
//! explanation during embedding.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{argmax, Backend, BlackBox, PredictOutput, Sample};
use crate::tensor::{matmul_tn, Tensor};
use crate::watermark::{apply_mask, BasicPartition, MaskSet, TriggerSample};

/// Ridge parameter used when none is configured.
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// Probability of the ground-truth class (or mean target-token probability).
    Logits,
    /// 1 when the predicted class is the ground truth, else 0.
    LabelOnly,
}

impl std::str::FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(Self::Logits),
            "label_only" => Ok(Self::LabelOnly),
            _ => Err(Error::Config(format!("unknown metric mode `{s}`"))),
        }
    }
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Logits => "logits",
            Self::LabelOnly => "label_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricVector {
    pub values: Vec<f64>,
    pub mode: MetricMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationWeights {
    pub weights: Vec<f64>,
    pub lambda: f64,
}

/// Signs read from explanation weights. Unlike an owner's [`Watermark`]
/// this may be single-signed.
///
/// [`Watermark`]: crate::watermark::Watermark
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExtractedWatermark(pub Vec<i8>);

impl ExtractedWatermark {
    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn metric_classifier(out: &PredictOutput, label: usize) -> Result<f64> {
    out.probs
        .get(label)
        .copied()
        .ok_or_else(|| Error::Index(format!("label {label} with {} classes", out.probs.len())))
}

pub fn metric_lm(target_probs: &[f64]) -> Result<f64> {
    if target_probs.is_empty() {
        return Err(Error::Data("no target probabilities to average".into()));
    }
    Ok(target_probs.iter().sum::<f64>() / target_probs.len() as f64)
}

pub fn metric_label_only(out: &PredictOutput, label: usize) -> Result<f64> {
    if label >= out.probs.len() {
        return Err(Error::Index(format!(
            "label {label} with {} classes",
            out.probs.len()
        )));
    }
    Ok(if argmax(&out.probs) == label {
        1.0
    } else {
        0.0
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn factor(a: &[f64], n: usize) -> Result<Self> {
        let scale = (0..n).map(|i| a[i * n + i].abs()).fold(1.0, f64::max);
        let tol = scale * n as f64 * f64::EPSILON;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for p in 0..j {
                d -= l[j * n + p] * l[j * n + p];
            }
            if d.is_nan() || d <= tol {
                return Err(Error::Numerical(format!(
                    "normal equations are singular (pivot {d:.3e} at column {j}); use a ridge parameter λ > 0"
                )));
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    /// Solves `L Lᵀ x = b` in place.
    fn solve(&self, b: &mut [f64]) {
        let (n, l) = (self.n, &self.l);
        for i in 0..n {
            let mut s = b[i];
            for p in 0..i {
                s -= l[i * n + p] * b[p];
            }
            b[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for p in i + 1..n {
                s -= l[p * n + i] * b[p];
            }
            b[i] = s / l[i * n + i];
        }
    }
}

fn design_dims(masks: &Tensor) -> Result<(usize, usize)> {
    match masks.shape() {
        [c, k] if *c > 0 && *k > 0 => Ok((*c, *k)),
        s => Err(Error::dim(format!(
            "design matrix must be c x k with c, k >= 1, got {s:?}"
        ))),
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "ridge parameter must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// Factor of `MᵀM + λI`.
fn factor_normal(masks: &Tensor, lambda: f64) -> Result<(usize, usize, Cholesky)> {
    check_lambda(lambda)?;
    let (c, k) = design_dims(masks)?;
    let mut gram = vec![0.0; k * k];
    matmul_tn(k, c, k, masks.data(), masks.data(), &mut gram, 0.0);
    for i in 0..k {
        gram[i * k + i] += lambda;
    }
    Ok((c, k, Cholesky::factor(&gram, k)?))
}

/// Ridge weights `(MᵀM + λI)⁻¹Mᵀv` for a `c x k` design `masks`.
pub fn ridge_fit(masks: &Tensor, v: &[f64], lambda: f64) -> Result<ExplanationWeights> {
    let (c, k, chol) = factor_normal(masks, lambda)?;
    if v.len() != c {
        return Err(Error::dim(format!(
            "metric vector has {} entries for {c} masks",
            v.len()
        )));
    }
    let mut rhs = vec![0.0; k];
    matmul_tn(k, c, 1, masks.data(), v, &mut rhs, 0.0);
    chol.solve(&mut rhs);
    Ok(ExplanationWeights {
        weights: rhs,
        lambda,
    })
}

/// +1 where the weight is non-negative, -1 elsewhere.
pub fn binarize(w: &ExplanationWeights) -> ExtractedWatermark {
    ExtractedWatermark(
        w.weights
            .iter()
            .map(|&x| if x >= 0.0 { 1 } else { -1 })
            .collect(),
    )
}

/// The constant `k x c` map from metric vectors to explanation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    k: usize,
    c: usize,
    lambda: f64,
    a: Vec<f64>,
}

impl Jacobian {
    pub fn bits(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> usize {
        self.c
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Row-major `k x c` entries.
    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.k, self.c, self.a.clone()).expect("consistent dims")
    }

    /// `A v`.
    pub fn apply(&self, v: &[f64]) -> Result<ExplanationWeights> {
        if v.len() != self.c {
            return Err(Error::dim(format!(
                "metric vector has {} entries for {} masks",
                v.len(),
                self.c
            )));
        }
        let weights = self
            .a
            .chunks(self.c)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        Ok(ExplanationWeights {
            weights,
            lambda: self.lambda,
        })
    }

    /// `Aᵀ g`: pulls a gradient on the weights back to the metric vector.
    pub fn pullback(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.k {
            return Err(Error::dim(format!(
                "gradient has {} entries for {} weights",
                g.len(),
                self.k
            )));
        }
        let mut out = vec![0.0; self.c];
        matmul_tn(self.c, self.k, 1, &self.a, g, &mut out, 0.0);
        Ok(out)
    }
}

pub fn extraction_jacobian(masks: &Tensor, lambda: f64) -> Result<Jacobian> {
    let (c, k, chol) = factor_normal(masks, lambda)?;
    // Column j of A solves (MᵀM + λI) x = Mᵀ e_j = row j of M.
    let mut a = vec![0.0; k * c];
    let mut col = vec![0.0; k];
    for j in 0..c {
        col.copy_from_slice(&masks.data()[j * k..(j + 1) * k]);
        chol.solve(&mut col);
        for i in 0..k {
            a[i * c + j] = col[i];
        }
    }
    Ok(Jacobian { k, c, lambda, a })
}

fn mask_design(masks: &MaskSet) -> Tensor {
    Tensor::matrix(masks.count(), masks.bits(), masks.matrix()).expect("consistent dims")
}

/// Masked copies of the trigger, one per mask.
pub fn masked_samples(
    trigger: &TriggerSample,
    masks: &MaskSet,
    partition: &BasicPartition,
) -> Result<Vec<TriggerSample>> {
    if masks.bits() != partition.parts() {
        return Err(Error::dim(format!(
            "masks have {} bits, partition has {} parts",
            masks.bits(),
            partition.parts()
        )));
    }
    masks
        .rows()
        .iter()
        .map(|m| apply_mask(trigger, m, partition))
        .collect()
}

/// Queries the model on every masked trigger and scores each prediction
/// against the trigger's ground truth.
pub fn metric_vector(
    model: &dyn BlackBox,
    trigger: &TriggerSample,
    masks: &MaskSet,
    partition: &BasicPartition,
    mode: MetricMode,
) -> Result<MetricVector> {
    if model.backend() != trigger.backend() {
        return Err(Error::Config("trigger backend does not match model".into()));
    }
    let masked = masked_samples(trigger, masks, partition)?;
    let values = match trigger {
        TriggerSample::Classifier { label, .. } => {
            let inputs: Vec<Sample> = masked
                .into_iter()
                .map(|t| match t {
                    TriggerSample::Classifier { input, .. } => Sample::Features(input),
                    TriggerSample::Lm { .. } => unreachable!("masking keeps the backend"),
                })
                .collect();
            let outs = model.predict_batch(&inputs)?;
            let metric = match mode {
                MetricMode::Logits => metric_classifier,
                MetricMode::LabelOnly => metric_label_only,
            };
            outs.iter()
                .map(|o| metric(o, *label))
                .collect::<Result<Vec<_>>>()?
        }
        TriggerSample::Lm { tokens, targets } => {
            if mode == MetricMode::LabelOnly {
                return Err(Error::Config(
                    "label-only extraction is defined for classifiers only".into(),
                ));
            }
            let seqs: Vec<Vec<u32>> = masked
                .into_iter()
                .map(|t| match t {
                    TriggerSample::Lm { tokens, .. } => tokens,
                    TriggerSample::Classifier { .. } => unreachable!("masking keeps the backend"),
                })
                .collect();
            let probs = model.lm_token_probs(&seqs, targets, &lm_truth(tokens, targets)?)?;
            probs
                .iter()
                .map(|p| metric_lm(p))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(MetricVector { values, mode })
}

/// Original tokens at the target positions of an unmasked trigger.
pub(crate) fn lm_truth(tokens: &[u32], targets: &[usize]) -> Result<Vec<u32>> {
    targets
        .iter()
        .map(|&p| match tokens.get(p) {
            Some(&t) if p > 0 => Ok(t),
            _ => Err(Error::Index(format!(
                "target position {p} outside 1..{}",
                tokens.len()
            ))),
        })
        .collect()
}

/// One-shot extraction: mask, query, score, ridge-fit, binarize.
pub fn extract_watermark(
    model: &dyn BlackBox,
    trigger: &TriggerSample,
    masks: &MaskSet,
    partition: &BasicPartition,
    mode: MetricMode,
    lambda: f64,
) -> Result<ExtractedWatermark> {
    let v = metric_vector(model, trigger, masks, partition, mode)?;
    let w = ridge_fit(&mask_design(masks), &v.values, lambda)?;
    Ok(binarize(&w))
}

/// Extraction setup with its Jacobian precomputed, for repeated use.
#[derive(Debug, Clone)]
pub struct Explainer {
    masks: MaskSet,
    partition: BasicPartition,
    mode: MetricMode,
    jacobian: Jacobian,
}

impl Explainer {
    pub fn new(
        masks: MaskSet,
        partition: BasicPartition,
        mode: MetricMode,
        lambda: f64,
    ) -> Result<Self> {
        if masks.bits() != partition.parts() {
            return Err(Error::dim(format!(
                "masks have {} bits, partition has {} parts",
                masks.bits(),
                partition.parts()
            )));
        }
        let jacobian = extraction_jacobian(&mask_design(&masks), lambda)?;
        Ok(Self {
            masks,
            partition,
            mode,
            jacobian,
        })
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn partition(&self) -> &BasicPartition {
        &self.partition
    }

    pub fn mode(&self) -> MetricMode {
        self.mode
    }

    pub fn jacobian(&self) -> &Jacobian {
        &self.jacobian
    }

    pub fn lambda(&self) -> f64 {
        self.jacobian.lambda
    }

    pub fn metric_vector(
        &self,
        model: &dyn BlackBox,
        trigger: &TriggerSample,
    ) -> Result<MetricVector> {
        metric_vector(model, trigger, &self.masks, &self.partition, self.mode)
    }

    pub fn explain(
        &self,
        model: &dyn BlackBox,
        trigger: &TriggerSample,
    ) -> Result<ExplanationWeights> {
        let v = self.metric_vector(model, trigger)?;
        self.jacobian.apply(&v.values)
    }

    pub fn extract(
        &self,
        model: &dyn BlackBox,
        trigger: &TriggerSample,
    ) -> Result<ExtractedWatermark> {
        Ok(binarize(&self.explain(model, trigger)?))
    }

    /// Whether this setup can be applied to the given backend.
    pub fn supports(&self, backend: Backend) -> bool {
        !(backend == Backend::CausalLm && self.mode == MetricMode::LabelOnly)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::watermark::{generate_masks, MaskScheme};

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, d).unwrap()
    }

    #[test]
    fn classifier_metrics() {
        let out = PredictOutput::from_probs(vec![0.1, 0.7, 0.2]);
        assert_eq!(metric_classifier(&out, 1).unwrap(), 0.7);
        let one_hot = PredictOutput::from_probs(vec![0.0, 1.0]);
        assert_eq!(metric_classifier(&one_hot, 1).unwrap(), 1.0);
        let uniform = PredictOutput::from_probs(vec![0.1; 10]);
        assert_eq!(metric_classifier(&uniform, 3).unwrap(), 0.1);
        assert!(matches!(metric_classifier(&out, 3), Err(Error::Index(_))));
    }

    #[test]
    fn lm_metric() {
        assert_eq!(metric_lm(&[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(metric_lm(&[1.0]).unwrap(), 1.0);
        assert_eq!(metric_lm(&[0.25, 0.25, 0.25]).unwrap(), 0.25);
        assert!(matches!(metric_lm(&[]), Err(Error::Data(_))));
    }

    #[test]
    fn label_only_metric() {
        let a = PredictOutput::from_probs(vec![0.1, 0.9]);
        let b = PredictOutput::from_probs(vec![0.9, 0.1]);
        let tie = PredictOutput::from_probs(vec![0.5, 0.5]);
        assert_eq!(metric_label_only(&a, 1).unwrap(), 1.0);
        assert_eq!(metric_label_only(&b, 1).unwrap(), 0.0);
        assert_eq!(metric_label_only(&tie, 0).unwrap(), 1.0);
    }

    #[test]
    fn ridge_identity_cases() {
        let v = vec![0.3, -1.2, 4.0, 0.0];
        let half = ridge_fit(&eye(4), &v, 1.0).unwrap();
        let exact = ridge_fit(&eye(4), &v, 0.0).unwrap();
        for (i, vi) in v.iter().enumerate() {
            assert!((half.weights[i] - vi / 2.0).abs() < 1e-15);
            assert!((exact.weights[i] - vi).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_system_at_zero_lambda() {
        let m = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            ridge_fit(&m, &[1.0, 2.0], 0.0),
            Err(Error::Numerical(_))
        ));
        assert!(ridge_fit(&m, &[1.0, 2.0], 0.5).is_ok());
        assert!(matches!(
            ridge_fit(&m, &[1.0, 2.0], -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn jacobian_of_identity_is_half() {
        let j = extraction_jacobian(&eye(3), 1.0).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                let expect = if i == c { 0.5 } else { 0.0 };
                assert!((j.matrix()[i * 3 + c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn leave_one_out_jacobian_is_least_squares() {
        // M = J - I is invertible for k = 4, so with λ = 0 the fit
        // interpolates: M w = v.
        let masks = generate_masks(4, 4, MaskScheme::LeaveOneOut, 0).unwrap();
        let m = mask_design(&masks);
        let j = extraction_jacobian(&m, 0.0).unwrap();
        let v = vec![0.9, 0.2, 0.5, 0.7];
        let w = j.apply(&v).unwrap();
        for (r, vr) in v.iter().enumerate() {
            let fitted: f64 = (0..4).map(|c| m.data()[r * 4 + c] * w.weights[c]).sum();
            assert!((fitted - vr).abs() < 1e-12);
        }
    }

    #[test]
    fn binarize_boundary() {
        let w = ExplanationWeights {
            weights: vec![0.5, -0.2, 0.0],
            lambda: 1.0,
        };
        assert_eq!(binarize(&w).bits(), &[1, -1, 1]);
        let neg = ExplanationWeights {
            weights: vec![-1.0; 5],
            lambda: 1.0,
        };
        assert!(binarize(&neg).bits().iter().all(|&b| b == -1));
    }

    #[test]
    fn pullback_is_transpose() {
        let masks = generate_masks(6, 3, MaskScheme::Random, 2).unwrap();
        let j = extraction_jacobian(&mask_design(&masks), 0.3).unwrap();
        let g = vec![1.0, -2.0, 0.5];
        let back = j.pullback(&g).unwrap();
        for (c, bc) in back.iter().enumerate() {
            let expect: f64 = (0..3).map(|i| j.matrix()[i * 6 + c] * g[i]).sum();
            assert!((bc - expect).abs() < 1e-14);
        }
    }
}
