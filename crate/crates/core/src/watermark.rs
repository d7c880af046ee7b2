//! Watermark payloads, trigger samples, basic-part segmentation, masks and
//! the masking operation.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Backend, UNK};
use crate::rng;

/// Minimum payload length.
pub const MIN_BITS: usize = 8;

/// A multi-bit payload over {-1, +1} containing both signs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Watermark(Vec<i8>);

impl Watermark {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.len() < MIN_BITS {
            return Err(Error::Invariant(format!(
                "watermark needs at least {MIN_BITS} bits, got {}",
                bits.len()
            )));
        }
        if let Some(&bad) = bits.iter().find(|&&b| b != 1 && b != -1) {
            return Err(Error::Codec(format!(
                "watermark entry {bad} is not -1 or +1"
            )));
        }
        if !bits.contains(&1) || !bits.contains(&-1) {
            return Err(Error::Invariant(
                "watermark must contain both -1 and +1".into(),
            ));
        }
        Ok(Self(bits))
    }

    /// Uniformly random payload of `k` bits, redrawn until both signs occur.
    pub fn random(k: usize, seed: u64) -> Result<Self> {
        if k < MIN_BITS {
            return Err(Error::Invariant(format!(
                "watermark needs at least {MIN_BITS} bits"
            )));
        }
        let mut rng = rng::split(seed, 0x3a7e);
        loop {
            let bits: Vec<i8> = (0..k)
                .map(|_| if rng.random_bool(0.5) { 1 } else { -1 })
                .collect();
            if let Ok(w) = Self::new(bits) {
                return Ok(w);
            }
        }
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| f64::from(b)).collect()
    }

    /// Row-major 0/1 grid with `cols` columns (+1 becomes 1).
    pub fn to_bitmap(&self, cols: usize) -> Result<Vec<Vec<u8>>> {
        if cols == 0 || !self.len().is_multiple_of(cols) {
            return Err(Error::Codec(format!(
                "{} bits do not fill rows of {cols}",
                self.len()
            )));
        }
        Ok(self
            .0
            .chunks(cols)
            .map(|r| r.iter().map(|&b| u8::from(b == 1)).collect())
            .collect())
    }

    pub fn encode_text(&self) -> String {
        let body: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        format!("{}\n{}\n", self.len(), body.join(" "))
    }

    /// Parses either the two-line `k` / entries form or a 0/1 bitmap grid.
    pub fn decode_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        if lines.len() == 2 && !lines[1].chars().all(|c| c == '0' || c == '1' || c == ' ') {
            let k: usize = lines[0]
                .parse()
                .map_err(|_| Error::Codec(format!("line 1: `{}` is not a bit count", lines[0])))?;
            let bits = lines[1]
                .split_whitespace()
                .map(|t| {
                    t.parse::<i8>()
                        .map_err(|_| Error::Codec(format!("line 2: bad entry `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if bits.len() != k {
                return Err(Error::Codec(format!(
                    "header says {k} bits, found {}",
                    bits.len()
                )));
            }
            return Self::new(bits);
        }
        let grid = lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.chars()
                    .filter(|c| !c.is_whitespace())
                    .map(|c| match c {
                        '0' => Ok(0),
                        '1' => Ok(1),
                        _ => Err(Error::Codec(format!("line {}: `{c}` is not 0 or 1", i + 1))),
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        bitmap_to_watermark(&grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.encode_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Codec("watermark file is not UTF-8".into()))?;
        Self::decode_text(&text)
    }
}

impl fmt::Display for Watermark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            f.write_str(if *b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Row-major flatten of a 0/1 grid; 1 maps to +1 and 0 to -1. Both values
/// must occur. The result is a [`Watermark`] once it has at least
/// [`MIN_BITS`] entries.
pub fn bitmap_to_bits(grid: &[Vec<u8>]) -> Result<Vec<i8>> {
    if grid.is_empty() || grid.iter().all(Vec::is_empty) {
        return Err(Error::Codec("empty bitmap".into()));
    }
    let mut bits = Vec::new();
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            bits.push(match v {
                0 => -1,
                1 => 1,
                _ => return Err(Error::Codec(format!("cell ({r},{c}) is {v}, not 0/1"))),
            });
        }
    }
    if !bits.contains(&1) || !bits.contains(&-1) {
        return Err(Error::Invariant("bitmap must contain both 0 and 1".into()));
    }
    Ok(bits)
}

pub fn bitmap_to_watermark(grid: &[Vec<u8>]) -> Result<Watermark> {
    Watermark::new(bitmap_to_bits(grid)?)
}

/// A secret input plus its ground truth: a class label, or the positions
/// whose true tokens are scored.
#[derive(Debug, Clone, PartialEq)]
pub enum TriggerSample {
    Classifier {
        input: Vec<f64>,
        label: usize,
    },
    Lm {
        tokens: Vec<u32>,
        targets: Vec<usize>,
    },
}

impl TriggerSample {
    pub fn backend(&self) -> Backend {
        match self {
            TriggerSample::Classifier { .. } => Backend::Classifier,
            TriggerSample::Lm { .. } => Backend::CausalLm,
        }
    }

    /// Number of maskable features (pixels or tokens).
    pub fn input_len(&self) -> usize {
        match self {
            TriggerSample::Classifier { input, .. } => input.len(),
            TriggerSample::Lm { tokens, .. } => tokens.len(),
        }
    }

    /// LM trigger scoring every position after the first.
    pub fn lm_all_targets(tokens: Vec<u32>) -> Self {
        let targets = (1..tokens.len()).collect();
        TriggerSample::Lm { tokens, targets }
    }

    /// Gaussian-noise image trigger.
    pub fn noise(dim: usize, mean: f64, std: f64, label: usize, seed: u64) -> Self {
        let d = Normal::new(mean, std.max(0.0)).expect("valid normal");
        let mut rng = rng::split(seed, 0x7719);
        let input = (0..dim).map(|_| d.sample(&mut rng)).collect();
        TriggerSample::Classifier { input, label }
    }

    /// Noise whose values have magnitude at least `floor`, with random
    /// signs: `s * (floor + |z|)`, `z ~ N(0, std)`. No entry sits at the
    /// occlusion value, so masking any basic part changes the input.
    pub fn signed_noise(dim: usize, floor: f64, std: f64, label: usize, seed: u64) -> Self {
        let d = Normal::new(0.0, std.max(0.0)).expect("valid normal");
        let mut rng = rng::split(seed, 0x5167);
        let input = (0..dim)
            .map(|_| {
                let mag = floor + d.sample(&mut rng).abs();
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        TriggerSample::Classifier { input, label }
    }

    /// Copy of `base` with a square patch of constant `value` at the
    /// top-left corner of a `side x side` grid.
    pub fn patch(
        base: &[f64],
        side: usize,
        patch: usize,
        value: f64,
        label: usize,
    ) -> Result<Self> {
        if side * side != base.len() || patch > side {
            return Err(Error::dim(format!(
                "patch {patch} on a {side}x{side} grid of {} values",
                base.len()
            )));
        }
        let mut input = base.to_vec();
        for r in 0..patch {
            for c in 0..patch {
                input[r * side + c] = value;
            }
        }
        Ok(TriggerSample::Classifier { input, label })
    }

    /// Uniform random token sequence over `1..vocab`.
    pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = rng::split(seed, 0x70c7);
        let tokens = (0..len)
            .map(|_| rng.random_range(1..vocab as u32))
            .collect();
        Self::lm_all_targets(tokens)
    }
}

const TRIGGER_MAGIC: &[u8; 4] = b"EAWT";
const TRIGGER_VERSION: u8 = 1;

/// Binary trigger file: magic `EAWT`, version `1`, backend tag, `u32`
/// count, then per sample either (`u32` dim, `dim` f64, `u32` label) or
/// (`u32` len, `len` u32 tokens, `u32` n, `n` u32 target positions).
pub fn encode_triggers(triggers: &[TriggerSample]) -> Result<Vec<u8>> {
    let backend = triggers
        .first()
        .map(TriggerSample::backend)
        .ok_or_else(|| Error::Data("no trigger samples".into()))?;
    let mut w = Writer::new();
    w.bytes(TRIGGER_MAGIC);
    w.u8(TRIGGER_VERSION);
    w.u8(backend.tag());
    w.u32(triggers.len())?;
    for t in triggers {
        match t {
            TriggerSample::Classifier { input, label } if backend == Backend::Classifier => {
                w.u32(input.len())?;
                input.iter().for_each(|&x| w.f64(x));
                w.u32(*label)?;
            }
            TriggerSample::Lm { tokens, targets } if backend == Backend::CausalLm => {
                w.u32(tokens.len())?;
                for &t in tokens {
                    w.u32(t as usize)?;
                }
                w.u32(targets.len())?;
                for &p in targets {
                    w.u32(p)?;
                }
            }
            _ => return Err(Error::Data("trigger file mixes backends".into())),
        }
    }
    Ok(w.into_bytes())
}

pub fn decode_triggers(bytes: &[u8]) -> Result<Vec<TriggerSample>> {
    let mut r = Reader::new(bytes);
    r.magic(TRIGGER_MAGIC)?;
    let v = r.u8()?;
    if v != TRIGGER_VERSION {
        return r.fail(format!("unsupported trigger version {v}"));
    }
    let tag = r.u8()?;
    let backend = match Backend::from_tag(tag) {
        Some(b) => b,
        None => return r.fail(format!("unknown backend tag {tag}")),
    };
    let n = r.count(4)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(match backend {
            Backend::Classifier => {
                let dim = r.count(8)?;
                let input = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let label = r.u32()?;
                TriggerSample::Classifier { input, label }
            }
            Backend::CausalLm => {
                let len = r.count(4)?;
                let tokens = (0..len)
                    .map(|_| r.u32().map(|t| t as u32))
                    .collect::<Result<Vec<_>>>()?;
                let nt = r.count(4)?;
                let targets = (0..nt).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                TriggerSample::Lm { tokens, targets }
            }
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_triggers(triggers: &[TriggerSample], path: &Path) -> Result<()> {
    write_file(path, &encode_triggers(triggers)?)
}

pub fn load_triggers(path: &Path) -> Result<Vec<TriggerSample>> {
    decode_triggers(&read_file(path)?)
}

/// `k` contiguous, equal-size runs over a flattened input of length `m`.
/// The trailing `m mod k` indices belong to no part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasicPartition {
    m: usize,
    k: usize,
}

impl BasicPartition {
    pub fn new(m: usize, k: usize) -> Result<Self> {
        if k == 0 || k > m {
            return Err(Error::Config(format!(
                "cannot split {m} features into {k} parts"
            )));
        }
        Ok(Self { m, k })
    }

    pub fn input_len(&self) -> usize {
        self.m
    }

    pub fn parts(&self) -> usize {
        self.k
    }

    pub fn part_size(&self) -> usize {
        self.m / self.k
    }

    pub fn part(&self, i: usize) -> Range<usize> {
        let s = self.part_size();
        i * s..(i + 1) * s
    }

    pub fn ignored(&self) -> Range<usize> {
        self.k * self.part_size()..self.m
    }
}

/// segment_input(m, k).
pub fn segment_input(m: usize, k: usize) -> Result<BasicPartition> {
    BasicPartition::new(m, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScheme {
    LeaveOneOut,
    Random,
}

impl std::str::FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave_one_out" => Ok(Self::LeaveOneOut),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown mask scheme `{s}`"))),
        }
    }
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LeaveOneOut => "leave_one_out",
            Self::Random => "random",
        })
    }
}

/// `c` binary masks of length `k`; bit 1 keeps a basic part, 0 occludes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    k: usize,
    masks: Vec<Vec<u8>>,
    scheme: MaskScheme,
    seed: u64,
}

impl MaskSet {
    pub fn rows(&self) -> &[Vec<u8>] {
        &self.masks
    }

    pub fn count(&self) -> usize {
        self.masks.len()
    }

    pub fn bits(&self) -> usize {
        self.k
    }

    pub fn scheme(&self) -> MaskScheme {
        self.scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major `c x k` design matrix.
    pub fn matrix(&self) -> Vec<f64> {
        self.masks.iter().flatten().map(|&b| f64::from(b)).collect()
    }

    /// Masks supplied directly (e.g. loaded from elsewhere).
    pub fn from_rows(k: usize, masks: Vec<Vec<u8>>, scheme: MaskScheme, seed: u64) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Config("mask set needs c >= 1".into()));
        }
        for m in &masks {
            if m.len() != k {
                return Err(Error::dim(format!(
                    "mask of length {} for k = {k}",
                    m.len()
                )));
            }
            if m.iter().any(|&b| b > 1) {
                return Err(Error::Codec("mask entries must be 0 or 1".into()));
            }
        }
        Ok(Self {
            k,
            masks,
            scheme,
            seed,
        })
    }
}

pub fn generate_masks(c: usize, k: usize, scheme: MaskScheme, seed: u64) -> Result<MaskSet> {
    if c == 0 || k == 0 {
        return Err(Error::Config("mask set needs c >= 1 and k >= 1".into()));
    }
    let masks = match scheme {
        MaskScheme::LeaveOneOut => {
            if c != k {
                return Err(Error::Config(format!(
                    "leave-one-out masks need c = k, got c = {c}, k = {k}"
                )));
            }
            (0..k)
                .map(|i| (0..k).map(|j| u8::from(i != j)).collect())
                .collect()
        }
        MaskScheme::Random => {
            if k < 2 {
                return Err(Error::Config("random masks need k >= 2".into()));
            }
            let mut rng = rng::split(seed, 0x3a5c);
            (0..c)
                .map(|_| loop {
                    let m: Vec<u8> = (0..k).map(|_| u8::from(rng.random_bool(0.5))).collect();
                    let ones = m.iter().filter(|&&b| b == 1).count();
                    if ones != 0 && ones != k {
                        break m;
                    }
                })
                .collect()
        }
    };
    Ok(MaskSet {
        k,
        masks,
        scheme,
        seed,
    })
}

/// Occludes the parts whose mask bit is 0: features become 0.0, tokens
/// become [`UNK`]. Ignored tail indices are never touched.
pub fn apply_mask(
    trigger: &TriggerSample,
    mask: &[u8],
    partition: &BasicPartition,
) -> Result<TriggerSample> {
    if mask.len() != partition.parts() {
        return Err(Error::dim(format!(
            "mask of length {} for {} parts",
            mask.len(),
            partition.parts()
        )));
    }
    if trigger.input_len() != partition.input_len() {
        return Err(Error::dim(format!(
            "trigger has {} features, partition covers {}",
            trigger.input_len(),
            partition.input_len()
        )));
    }
    let mut out = trigger.clone();
    match &mut out {
        TriggerSample::Classifier { input, .. } => mask_features(input, mask, partition),
        TriggerSample::Lm { tokens, .. } => mask_tokens(tokens, mask, partition),
    }
    Ok(out)
}

/// Zeroes (or UNKs) the parts whose mask bit is 0, in place on raw values.
pub(crate) fn mask_features(x: &mut [f64], mask: &[u8], partition: &BasicPartition) {
    for (i, &bit) in mask.iter().enumerate() {
        if bit == 0 {
            x[partition.part(i)].fill(0.0);
        }
    }
}

pub(crate) fn mask_tokens(x: &mut [u32], mask: &[u8], partition: &BasicPartition) {
    for (i, &bit) in mask.iter().enumerate() {
        if bit == 0 {
            x[partition.part(i)].fill(UNK);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmap_codec() {
        assert_eq!(
            bitmap_to_bits(&[vec![1, 0], vec![0, 1]]).unwrap(),
            vec![1, -1, -1, 1]
        );
        // four bits is below the minimum payload length
        assert!(matches!(
            bitmap_to_watermark(&[vec![1, 0], vec![0, 1]]),
            Err(Error::Invariant(_))
        ));
        let w = bitmap_to_watermark(&[vec![1, 0, 0, 1], vec![1, 1, 0, 0]]).unwrap();
        assert_eq!(w.bits(), &[1, -1, -1, 1, 1, 1, -1, -1]);
        assert_eq!(bitmap_to_watermark(&w.to_bitmap(4).unwrap()).unwrap(), w);
    }

    #[test]
    fn single_valued_bitmap_rejected() {
        assert!(matches!(
            bitmap_to_watermark(&vec![vec![1u8; 3]; 3]),
            Err(Error::Invariant(_))
        ));
        assert!(matches!(
            bitmap_to_watermark(&[vec![0, 2, 1, 0]]),
            Err(Error::Codec(_))
        ));
    }

    #[test]
    fn glyph_bitmap_has_both_signs() {
        // "AI" on an 8x8 grid
        let rows = [
            "00100111", "01010010", "10001010", "10001010", "11111010", "10001010", "10001010",
            "10001111",
        ];
        let grid: Vec<Vec<u8>> = rows
            .iter()
            .map(|r| r.bytes().map(|b| b - b'0').collect())
            .collect();
        let w = bitmap_to_watermark(&grid).unwrap();
        assert_eq!(w.len(), 64);
        let ones = rows
            .iter()
            .flat_map(|r| r.bytes())
            .filter(|&b| b == b'1')
            .count();
        assert_eq!(w.bits().iter().filter(|&&b| b == 1).count(), ones);
        assert_eq!(w.bits().iter().filter(|&&b| b == -1).count(), 64 - ones);
    }

    #[test]
    fn text_roundtrip_and_bitmap_form() {
        let w = Watermark::random(16, 3).unwrap();
        assert_eq!(Watermark::decode_text(&w.encode_text()).unwrap(), w);
        let grid = "1010\n0101\n1100\n0011\n";
        let g = Watermark::decode_text(grid).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g.bits()[0], 1);
        assert_eq!(g.bits()[1], -1);
        assert!(Watermark::decode_text("3\n1 -1 1 1\n").is_err());
    }

    #[test]
    fn segmentation() {
        let p = segment_input(10, 3).unwrap();
        assert_eq!((p.part(0), p.part(1), p.part(2)), (0..3, 3..6, 6..9));
        assert_eq!(p.ignored(), 9..10);
        let p = segment_input(5, 5).unwrap();
        assert_eq!(p.part_size(), 1);
        assert!(p.ignored().is_empty());
        let p = segment_input(256, 64).unwrap();
        assert_eq!(p.part_size(), 4);
        assert!(matches!(segment_input(3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn leave_one_out_masks() {
        let m = generate_masks(3, 3, MaskScheme::LeaveOneOut, 0).unwrap();
        assert_eq!(m.rows(), &[vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]]);
        assert!(matches!(
            generate_masks(4, 3, MaskScheme::LeaveOneOut, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_masks_reproducible_and_balanced() {
        let a = generate_masks(1000, 16, MaskScheme::Random, 5).unwrap();
        assert_eq!(a, generate_masks(1000, 16, MaskScheme::Random, 5).unwrap());
        assert_ne!(a, generate_masks(1000, 16, MaskScheme::Random, 6).unwrap());
        // Each column mean is Binomial(1000, ~0.5)/1000 with sd ~0.016, so
        // [0.45, 0.55] is a >3-sigma band.
        for j in 0..16 {
            let mean = a.rows().iter().map(|r| f64::from(r[j])).sum::<f64>() / 1000.0;
            assert!((0.45..=0.55).contains(&mean), "column {j}: {mean}");
        }
        for r in a.rows() {
            let ones = r.iter().filter(|&&b| b == 1).count();
            assert!(ones > 0 && ones < 16);
        }
    }

    #[test]
    fn mask_rules() {
        let p = segment_input(6, 3).unwrap();
        let t = TriggerSample::Classifier {
            input: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            label: 0,
        };
        let masked = apply_mask(&t, &[1, 0, 1], &p).unwrap();
        assert_eq!(
            masked,
            TriggerSample::Classifier {
                input: vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0],
                label: 0
            }
        );
        assert_eq!(apply_mask(&t, &[1, 1, 1], &p).unwrap(), t);
        assert!(matches!(
            apply_mask(&t, &[1, 1], &p),
            Err(Error::Dimension(_))
        ));

        let p = segment_input(7, 3).unwrap();
        let t = TriggerSample::Classifier {
            input: vec![1.0; 7],
            label: 0,
        };
        match apply_mask(&t, &[0, 0, 0], &p).unwrap() {
            TriggerSample::Classifier { input, .. } => {
                assert_eq!(input, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn lm_mask_uses_unk() {
        let p = segment_input(4, 2).unwrap();
        let t = TriggerSample::lm_all_targets(vec![5, 6, 7, 8]);
        match apply_mask(&t, &[0, 1], &p).unwrap() {
            TriggerSample::Lm { tokens, targets } => {
                assert_eq!(tokens, vec![UNK, UNK, 7, 8]);
                assert_eq!(targets, vec![1, 2, 3]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn trigger_file_roundtrip() {
        let ts = vec![
            TriggerSample::noise(8, 0.0, 1.0, 3, 1),
            TriggerSample::noise(8, 0.0, 1.0, 4, 2),
        ];
        assert_eq!(decode_triggers(&encode_triggers(&ts).unwrap()).unwrap(), ts);
        let lm = vec![TriggerSample::random_tokens(10, 16, 3)];
        assert_eq!(decode_triggers(&encode_triggers(&lm).unwrap()).unwrap(), lm);
        let mut bad = encode_triggers(&lm).unwrap();
        bad[0] = b'X';
        assert!(matches!(
            decode_triggers(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
