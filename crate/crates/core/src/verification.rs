//! Ownership verification: watermark success rate, Pearson's chi-squared
//! independence test on the 2x2 table of (extracted, original) bit pairs,
//! and the harmless degree.

use std::fmt;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::extraction::{Explainer, ExtractedWatermark};
use crate::model::{BlackBox, Sample};
use crate::watermark::{TriggerSample, Watermark, MIN_BITS};

/// Significance level used when none is given.
pub const DEFAULT_ALPHA: f64 = 0.01;

/// Above this `z = sqrt(x / 2)` the survival function switches from direct
/// `erfc` to its asymptotic expansion.
const ERFC_SWITCH: f64 = 6.0;

/// Fraction of positions where the two sign sequences agree.
pub fn wsr(extracted: &[i8], original: &[i8]) -> Result<f64> {
    if extracted.len() != original.len() || original.is_empty() {
        return Err(Error::dim(format!(
            "extracted watermark has {} bits, original {}",
            extracted.len(),
            original.len()
        )));
    }
    let hits = extracted
        .iter()
        .zip(original)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / original.len() as f64)
}

/// `log10 P(X >= x)` for `X ~ chi-squared(1)`, i.e. `log10 erfc(sqrt(x/2))`,
/// without underflow for large `x`.
pub fn log_sf_chi2_1df(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!(
            "chi-squared statistic must be >= 0, got {x}"
        )));
    }
    let z = (x / 2.0).sqrt();
    Ok(log_erfc(z) / std::f64::consts::LN_10)
}

/// Natural log of `erfc(z)` for `z >= 0`.
fn log_erfc(z: f64) -> f64 {
    if z <= ERFC_SWITCH {
        return libm::erfc(z).ln();
    }
    if z.is_infinite() {
        return f64::NEG_INFINITY;
    }
    // erfc(z) ~ exp(-z²)/(z√π) · Σ (-1)^n (2n-1)!! / (2z²)^n
    let inv = 1.0 / (2.0 * z * z);
    let mut term = 1.0;
    let mut series = 1.0;
    for n in 1..60 {
        let next = -term * (2 * n - 1) as f64 * inv;
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        series += term;
        if term.abs() < 1e-17 {
            break;
        }
    }
    -z * z - (z * std::f64::consts::PI.sqrt()).ln() + series.ln()
}

/// 2x2 contingency counts indexed `[extracted is +1][original is +1]`.
pub fn contingency(extracted: &[i8], original: &[i8]) -> Result<[[usize; 2]; 2]> {
    if extracted.len() != original.len() {
        return Err(Error::dim(format!(
            "extracted watermark has {} bits, original {}",
            extracted.len(),
            original.len()
        )));
    }
    let mut t = [[0usize; 2]; 2];
    for (&e, &o) in extracted.iter().zip(original) {
        t[usize::from(e == 1)][usize::from(o == 1)] += 1;
    }
    Ok(t)
}

/// Pearson statistic (1 df, no continuity correction) and its log10 p-value.
/// Cells with zero expected count contribute nothing.
pub fn chi_squared_log_p(extracted: &[i8], original: &[i8]) -> Result<(f64, f64)> {
    if original.len() < MIN_BITS {
        return Err(Error::Invariant(format!(
            "the test needs at least {MIN_BITS} bits, got {}",
            original.len()
        )));
    }
    let t = contingency(extracted, original)?;
    let n = original.len() as f64;
    let rows = [t[0][0] + t[0][1], t[1][0] + t[1][1]];
    let cols = [t[0][0] + t[1][0], t[0][1] + t[1][1]];
    if cols.contains(&0) {
        return Err(Error::Invariant(
            "original watermark must contain both signs".into(),
        ));
    }
    let mut chi2 = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let expected = rows[a] as f64 * cols[b] as f64 / n;
            if expected > 0.0 {
                let d = t[a][b] as f64 - expected;
                chi2 += d * d / expected;
            }
        }
    }
    Ok((chi2, log_sf_chi2_1df(chi2)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub k: usize,
    pub wsr: f64,
    pub chi2: f64,
    pub log10_p: f64,
    pub alpha: f64,
    pub decision: bool,
    pub counts: [[usize; 2]; 2],
}

impl VerificationReport {
    pub fn from_bits(extracted: &[i8], original: &Watermark, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "significance level must be in (0, 1), got {alpha}"
            )));
        }
        let wsr = wsr(extracted, original.bits())?;
        let (chi2, log10_p) = chi_squared_log_p(extracted, original.bits())?;
        Ok(Self {
            k: original.len(),
            wsr,
            chi2,
            log10_p,
            alpha,
            decision: log10_p <= alpha.log10(),
            counts: contingency(extracted, original.bits())?,
        })
    }

    pub const CSV_HEADER: &'static str = "k,wsr,chi2,log10_p,alpha,decision";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{},{}",
            self.k, self.wsr, self.chi2, self.log10_p, self.alpha, self.decision
        )
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "watermark bits     {}", self.k)?;
        writeln!(f, "WSR                {:.4}", self.wsr)?;
        writeln!(f, "chi-squared        {:.4}", self.chi2)?;
        writeln!(f, "log10 p-value      {:.4}", self.log10_p)?;
        writeln!(f, "alpha              {}", self.alpha)?;
        writeln!(
            f,
            "table [e-,o-] {} [e-,o+] {} [e+,o-] {} [e+,o+] {}",
            self.counts[0][0], self.counts[0][1], self.counts[1][0], self.counts[1][1]
        )?;
        write!(
            f,
            "ownership verified {}",
            if self.decision { "YES" } else { "NO" }
        )
    }
}

/// Extracts the watermark through the trigger and tests it against the
/// owner's payload.
pub fn verify(
    model: &dyn BlackBox,
    trigger: &TriggerSample,
    explainer: &Explainer,
    original: &Watermark,
    alpha: f64,
) -> Result<VerificationReport> {
    let extracted = explainer.extract(model, trigger)?;
    if extracted.len() != original.len() {
        return Err(Error::dim(format!(
            "extraction yields {} bits, watermark has {}",
            extracted.len(),
            original.len()
        )));
    }
    VerificationReport::from_bits(extracted.bits(), original, alpha)
}

/// Accuracy over the union of a benign test set and the trigger samples.
pub fn harmless_degree(
    model: &dyn BlackBox,
    test: &LabeledSet,
    triggers: &[TriggerSample],
) -> Result<f64> {
    let total = test.len() + triggers.len();
    if total == 0 {
        return Err(Error::Data("harmless degree over an empty set".into()));
    }
    let mut inputs: Vec<Sample> = (0..test.len())
        .map(|i| Sample::Features(test.row(i).to_vec()))
        .collect();
    let mut labels: Vec<usize> = test.labels().to_vec();
    for t in triggers {
        match t {
            TriggerSample::Classifier { input, label } => {
                inputs.push(Sample::Features(input.clone()));
                labels.push(*label);
            }
            TriggerSample::Lm { .. } => {
                return Err(Error::Config(
                    "harmless degree is defined for classifiers".into(),
                ))
            }
        }
    }
    let mut correct = 0usize;
    for (chunk_in, chunk_lab) in inputs.chunks(512).zip(labels.chunks(512)) {
        let out = model.predict_batch(chunk_in)?;
        correct += out
            .iter()
            .zip(chunk_lab)
            .filter(|(o, &l)| o.predicted == l)
            .count();
    }
    Ok(correct as f64 / total as f64)
}

/// Outcome of forging many triggers against one model.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityStats {
    pub wsr: Vec<f64>,
    pub log10_p: Vec<f64>,
}

impl AmbiguityStats {
    pub fn mean_wsr(&self) -> f64 {
        self.wsr.iter().sum::<f64>() / self.wsr.len() as f64
    }

    pub fn max_wsr(&self) -> f64 {
        self.wsr.iter().copied().fold(0.0, f64::max)
    }

    /// Trials whose p-value is at most `alpha`.
    pub fn passing(&self, alpha: f64) -> usize {
        let t = alpha.log10();
        self.log10_p.iter().filter(|&&p| p <= t).count()
    }
}

/// Tests each extracted watermark against `target`.
pub fn score_forgeries(
    extracted: &[ExtractedWatermark],
    target: &Watermark,
) -> Result<AmbiguityStats> {
    let mut stats = AmbiguityStats {
        wsr: Vec::with_capacity(extracted.len()),
        log10_p: Vec::with_capacity(extracted.len()),
    };
    for e in extracted {
        stats.wsr.push(wsr(e.bits(), target.bits())?);
        stats
            .log10_p
            .push(chi_squared_log_p(e.bits(), target.bits())?.1);
    }
    Ok(stats)
}

/// Extracts a watermark through each of `trials` forged triggers. Forged
/// classifier triggers are Gaussian noise labelled with the model's own
/// prediction; language-model triggers are uniform random token strings.
pub fn forge_and_extract(
    model: &dyn BlackBox,
    explainer: &Explainer,
    template: &TriggerSample,
    trials: usize,
    seed: u64,
) -> Result<Vec<ExtractedWatermark>> {
    if trials < 100 {
        return Err(Error::Config(format!(
            "need at least 100 trials, got {trials}"
        )));
    }
    (0..trials)
        .map(|i| {
            let s = crate::rng::mix(seed, &[i as u64]);
            let forged = match template {
                TriggerSample::Classifier { input, .. } => {
                    let (mean, std) = moments(input);
                    let TriggerSample::Classifier { input, .. } =
                        TriggerSample::noise(input.len(), mean, std, 0, s)
                    else {
                        unreachable!()
                    };
                    let label =
                        model.predict_batch(&[Sample::Features(input.clone())])?[0].predicted;
                    TriggerSample::Classifier { input, label }
                }
                TriggerSample::Lm { tokens, targets } => {
                    let vocab = tokens.iter().copied().max().unwrap_or(1) as usize + 1;
                    match TriggerSample::random_tokens(tokens.len(), vocab.max(3), s) {
                        TriggerSample::Lm { tokens, .. } => TriggerSample::Lm {
                            tokens,
                            targets: targets.clone(),
                        },
                        TriggerSample::Classifier { .. } => unreachable!(),
                    }
                }
            };
            explainer.extract(model, &forged)
        })
        .collect()
}

/// Per-trial WSR and p-value of forged triggers against a random target of
/// the explainer's length.
pub fn ambiguity_monte_carlo(
    model: &dyn BlackBox,
    explainer: &Explainer,
    template: &TriggerSample,
    trials: usize,
    seed: u64,
) -> Result<AmbiguityStats> {
    let target = Watermark::random(explainer.masks().bits(), crate::rng::mix(seed, &[u64::MAX]))?;
    let extracted = forge_and_extract(model, explainer, template, trials, seed)?;
    score_forgeries(&extracted, &target)
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(k: usize) -> Vec<i8> {
        (0..k).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect()
    }

    #[test]
    fn wsr_cases() {
        let w = balanced(64);
        let comp: Vec<i8> = w.iter().map(|b| -b).collect();
        let half: Vec<i8> = w
            .iter()
            .enumerate()
            .map(|(i, &b)| if i < 32 { b } else { -b })
            .collect();
        assert_eq!(wsr(&w, &w).unwrap(), 1.0);
        assert_eq!(wsr(&comp, &w).unwrap(), 0.0);
        assert_eq!(wsr(&half, &w).unwrap(), 0.5);
        assert!(matches!(wsr(&w[..3], &w), Err(Error::Dimension(_))));
    }

    #[test]
    fn independent_counts_give_zero_statistic() {
        // original alternates; extracted agrees on the first half only, so
        // every cell holds k/4
        let o = balanced(64);
        let e: Vec<i8> = (0..64).map(|i| if i < 32 { o[i] } else { -o[i] }).collect();
        let (chi2, lp) = chi_squared_log_p(&e, &o).unwrap();
        assert_eq!(chi2, 0.0);
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn perfect_match_statistic_equals_k() {
        for k in [8, 64, 256] {
            let w = balanced(k);
            assert_eq!(chi_squared_log_p(&w, &w).unwrap().0, k as f64);
        }
    }

    #[test]
    fn single_signed_original_is_rejected() {
        let o = vec![1i8; 16];
        assert!(matches!(
            chi_squared_log_p(&o, &o),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn one_sided_extraction_fails_verification() {
        let o = Watermark::new(balanced(32)).unwrap();
        let e = vec![1i8; 32];
        let r = VerificationReport::from_bits(&e, &o, 0.01).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert!(!r.decision);
    }

    #[test]
    fn log_sf_edge_values() {
        assert_eq!(log_sf_chi2_1df(0.0).unwrap(), 0.0);
        assert!(matches!(log_sf_chi2_1df(-1.0), Err(Error::Domain(_))));
        // 3.841 is the 95% quantile of chi-squared(1)
        assert!((log_sf_chi2_1df(3.841).unwrap() - 0.05f64.log10()).abs() < 1e-3);
    }

    #[test]
    fn log_sf_is_continuous_at_switch() {
        let x = 2.0 * ERFC_SWITCH * ERFC_SWITCH;
        let below = libm::erfc(ERFC_SWITCH).ln();
        let z = ERFC_SWITCH * (1.0 + 1e-15);
        let above = log_erfc(z + 1e-12);
        assert!((below - above).abs() < 1e-10, "{below} vs {above}");
        assert!(log_sf_chi2_1df(x).unwrap().is_finite());
    }

    #[test]
    fn decision_threshold() {
        let o = Watermark::new(balanced(16)).unwrap();
        let r = VerificationReport::from_bits(o.bits(), &o, 0.01).unwrap();
        assert!(r.decision);
        let at = VerificationReport::from_bits(o.bits(), &o, 10f64.powf(r.log10_p)).unwrap();
        assert!(at.decision);
        let below =
            VerificationReport::from_bits(o.bits(), &o, 10f64.powf(r.log10_p) * 0.999).unwrap();
        assert!(!below.decision);
        assert!(matches!(
            VerificationReport::from_bits(o.bits(), &o, 1.5),
            Err(Error::Config(_))
        ));
    }
}
