//! Synthetic datasets and their binary file format.
//!
//! File layout (little-endian): magic `EAWD`, version byte `1`, kind byte
//! (`0` labeled features, `1` token corpus), then
//! - labeled: `u32` rows, `u32` dim, `u32` classes, and per row a `u32`
//!   label followed by `dim` `f64` features;
//! - tokens: `u32` sequences, `u32` vocab, and per sequence a `u32` length
//!   followed by that many `u32` token ids.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::UNK;
use crate::rng;

const MAGIC: &[u8; 4] = b"EAWD";
const VERSION: u8 = 1;

/// Feature rows with class labels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Data(format!(
                "{} values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} with {classes} classes")));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            dim: self.dim,
            classes: self.classes,
            features,
            labels,
        }
    }

    /// First `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Token sequences over `1..vocab`; id 0 is reserved.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    vocab: usize,
    seqs: Vec<Vec<u32>>,
}

impl TokenCorpus {
    pub fn new(vocab: usize, seqs: Vec<Vec<u32>>) -> Result<Self> {
        for s in &seqs {
            if let Some(&bad) = s.iter().find(|&&t| t == UNK || t as usize >= vocab) {
                return Err(Error::Data(format!(
                    "token {bad} outside 1..{vocab} (0 is reserved)"
                )));
            }
        }
        Ok(Self { vocab, seqs })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seqs(&self) -> &[Vec<u32>] {
        &self.seqs
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        (
            Self {
                vocab: self.vocab,
                seqs: self.seqs[..n].to_vec(),
            },
            Self {
                vocab: self.vocab,
                seqs: self.seqs[n..].to_vec(),
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    Labeled(LabeledSet),
    Tokens(TokenCorpus),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Labeled(d) => d.len(),
            Corpus::Tokens(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split_at(&self, n: usize) -> (Self, Self) {
        match self {
            Corpus::Labeled(d) => {
                let (a, b) = d.split_at(n);
                (Corpus::Labeled(a), Corpus::Labeled(b))
            }
            Corpus::Tokens(c) => {
                let (a, b) = c.split_at(n);
                (Corpus::Tokens(a), Corpus::Tokens(b))
            }
        }
    }
}

/// Gaussian blobs rendered as `side x side` images. Each class has a
/// spatially smooth template; a sample is `base + template + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub samples: usize,
    pub classes: usize,
    pub side: usize,
    /// Pixel noise standard deviation.
    pub sigma: f64,
    /// Template amplitude (per-pixel standard deviation).
    pub spread: f64,
    /// Constant brightness added to every pixel.
    pub base: f64,
    pub seed: u64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            samples: 3000,
            classes: 10,
            side: 16,
            sigma: 1.0,
            spread: 0.35,
            base: 3.0,
            seed: 0,
        }
    }
}

fn box_blur(field: &[f64], side: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for r in 0..side {
        for c in 0..side {
            let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(side - 1));
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(side - 1));
            let mut acc = 0.0;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    acc += field[rr * side + cc];
                }
            }
            out[r * side + c] = acc / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

pub fn blobs(p: &BlobParams) -> Result<LabeledSet> {
    if p.classes == 0 || p.side == 0 || p.samples == 0 {
        return Err(Error::Config(
            "blobs need samples, classes and side >= 1".into(),
        ));
    }
    if p.sigma.is_nan()
        || p.sigma < 0.0
        || p.spread.is_nan()
        || p.spread < 0.0
        || !p.base.is_finite()
    {
        return Err(Error::Config(
            "blob sigma and spread must be non-negative".into(),
        ));
    }
    let dim = p.side * p.side;
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rng = rng::split(p.seed, 0xb10b);
    let templates: Vec<Vec<f64>> = (0..p.classes)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            let mut t = box_blur(&raw, p.side, 1);
            standardize(&mut t);
            t.iter().map(|x| x * p.spread).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(p.samples * dim);
    let mut labels = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let label = i % p.classes;
        for t in &templates[label] {
            features.push(p.base + t + p.sigma * unit.sample(&mut rng));
        }
        labels.push(label);
    }
    // interleave classes without correlating label with position
    let mut order: Vec<usize> = (0..p.samples).collect();
    order.shuffle(&mut rng);
    LabeledSet::new(dim, p.classes, features, labels).map(|d| d.subset(&order))
}

/// Binary glyphs on a coarse grid, upscaled to `side x side`, with random
/// cell flips and pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphParams {
    pub samples: usize,
    pub classes: usize,
    pub side: usize,
    /// Cells per glyph edge; must divide `side`.
    pub cells: usize,
    pub flip: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for GlyphParams {
    fn default() -> Self {
        Self {
            samples: 3000,
            classes: 10,
            side: 16,
            cells: 4,
            flip: 0.1,
            sigma: 0.3,
            seed: 0,
        }
    }
}

pub fn glyph_grid(p: &GlyphParams) -> Result<LabeledSet> {
    if p.classes == 0 || p.samples == 0 || p.cells == 0 || !p.side.is_multiple_of(p.cells) {
        return Err(Error::Config(
            "glyph cells must divide side; counts must be >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p.flip) || p.sigma.is_nan() || p.sigma < 0.0 {
        return Err(Error::Config(
            "glyph flip must be in [0,1] and sigma >= 0".into(),
        ));
    }
    let mut rng = rng::split(p.seed, 0x6171);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let n_cells = p.cells * p.cells;
    let glyphs: Vec<Vec<bool>> = (0..p.classes)
        .map(|_| (0..n_cells).map(|_| rng.random_bool(0.5)).collect())
        .collect();
    let scale = p.side / p.cells;
    let dim = p.side * p.side;
    let mut features = Vec::with_capacity(p.samples * dim);
    let mut labels = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let label = i % p.classes;
        let cells: Vec<bool> = glyphs[label]
            .iter()
            .map(|&b| b ^ rng.random_bool(p.flip))
            .collect();
        for r in 0..p.side {
            for c in 0..p.side {
                let on = cells[(r / scale) * p.cells + c / scale];
                features.push(if on { 1.0 } else { 0.0 } + p.sigma * unit.sample(&mut rng));
            }
        }
        labels.push(label);
    }
    let mut order: Vec<usize> = (0..p.samples).collect();
    order.shuffle(&mut rng);
    LabeledSet::new(dim, p.classes, features, labels).map(|d| d.subset(&order))
}

/// Sequences from a seeded first-order Markov source over `1..vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovParams {
    pub sequences: usize,
    pub length: usize,
    pub vocab: usize,
    /// Number of favoured successors per token.
    pub branching: usize,
    /// Probability mass on the favoured successors.
    pub focus: f64,
    pub seed: u64,
}

impl Default for MarkovParams {
    fn default() -> Self {
        Self {
            sequences: 300,
            length: 64,
            vocab: 64,
            branching: 3,
            focus: 0.9,
            seed: 0,
        }
    }
}

pub fn token_corpus(p: &MarkovParams) -> Result<TokenCorpus> {
    if p.vocab < 3 || p.length < 2 || p.sequences == 0 {
        return Err(Error::Config(
            "token corpus needs vocab >= 3, length >= 2".into(),
        ));
    }
    if p.branching == 0 || p.branching >= p.vocab || !(0.0..=1.0).contains(&p.focus) {
        return Err(Error::Config(
            "branching must be in 1..vocab and focus in [0,1]".into(),
        ));
    }
    let mut rng = rng::split(p.seed, 0x70c5);
    let real = (p.vocab - 1) as u32;
    let successors: Vec<Vec<u32>> = (0..real)
        .map(|_| {
            (0..p.branching)
                .map(|_| rng.random_range(1..=real))
                .collect()
        })
        .collect();
    let seqs = (0..p.sequences)
        .map(|_| {
            let mut s = Vec::with_capacity(p.length);
            let mut t = rng.random_range(1..=real);
            s.push(t);
            while s.len() < p.length {
                t = if rng.random_bool(p.focus) {
                    let succ = &successors[(t - 1) as usize];
                    succ[rng.random_range(0..succ.len())]
                } else {
                    rng.random_range(1..=real)
                };
                s.push(t);
            }
            s
        })
        .collect();
    TokenCorpus::new(p.vocab, seqs)
}

pub fn encode(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u8(VERSION);
    match corpus {
        Corpus::Labeled(d) => {
            w.u8(0);
            w.u32(d.len())?;
            w.u32(d.dim)?;
            w.u32(d.classes)?;
            for i in 0..d.len() {
                w.u32(d.labels[i])?;
                for &x in d.row(i) {
                    w.f64(x);
                }
            }
        }
        Corpus::Tokens(c) => {
            w.u8(1);
            w.u32(c.len())?;
            w.u32(c.vocab)?;
            for s in &c.seqs {
                w.u32(s.len())?;
                for &t in s {
                    w.u32(t as usize)?;
                }
            }
        }
    }
    Ok(w.into_bytes())
}

pub fn decode(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u8()?;
    if version != VERSION {
        return r.fail(format!("unsupported dataset version {version}"));
    }
    let corpus = match r.u8()? {
        0 => {
            let n = r.count(4)?;
            let dim = r.u32()?;
            let classes = r.u32()?;
            let mut features = Vec::with_capacity(n.saturating_mul(dim).min(bytes.len() / 8));
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                labels.push(r.u32()?);
                for _ in 0..dim {
                    features.push(r.f64()?);
                }
            }
            Corpus::Labeled(LabeledSet::new(dim, classes, features, labels)?)
        }
        1 => {
            let n = r.count(4)?;
            let vocab = r.u32()?;
            let mut seqs = Vec::with_capacity(n);
            for _ in 0..n {
                let len = r.count(4)?;
                let mut s = Vec::with_capacity(len);
                for _ in 0..len {
                    s.push(r.u32()? as u32);
                }
                seqs.push(s);
            }
            Corpus::Tokens(TokenCorpus::new(vocab, seqs)?)
        }
        t => return r.fail(format!("unknown dataset kind {t}")),
    };
    r.finish()?;
    Ok(corpus)
}

pub fn save(corpus: &Corpus, path: &Path) -> Result<()> {
    write_file(path, &encode(corpus)?)
}

pub fn load(path: &Path) -> Result<Corpus> {
    decode(&read_file(path)?)
}
