//! In-memory experiment steps shared by the commands, the ablation sweeps
//! and the acceptance suite.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use eaaw_core::attacks::{
    finetune_attack, overwrite_attack, prune_attack, unlearn_attack, AttackKind, InputMask,
    Monitor, TracePoint, UnlearnSpec,
};
use eaaw_core::data::{
    self, blobs, glyph_grid, token_corpus, BlobParams, GlyphParams, MarkovParams,
};
use eaaw_core::embedding::{embed_watermark, EmbedConfig, EpochRecord};
use eaaw_core::train::{benign_score, fit, TrainConfig};
use eaaw_core::verification::verify;
use eaaw_core::{
    Backend, BlackBox, Corpus, Explainer, MaskScheme, MetricMode, Model, ModelSpec, Sample,
    TriggerSample, VerificationReport, Watermark,
};

use crate::config::{DataKind, ExperimentConfig, SweepKind, TriggerKind};
use crate::error::{CliError, Result};

pub const SPLITS: [&str; 3] = ["train.bin", "heldout.bin", "test.bin"];

/// Owner training data, adversary data and the benign test set.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub heldout: Corpus,
    pub test: Corpus,
}

impl Splits {
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, c) in SPLITS.iter().zip([&self.train, &self.heldout, &self.test]) {
            data::save(c, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| {
            let p = dir.join(name);
            if !p.exists() {
                return Err(CliError::Missing(p));
            }
            Ok(data::load(&p)?)
        };
        Ok(Self {
            train: load(SPLITS[0])?,
            heldout: load(SPLITS[1])?,
            test: load(SPLITS[2])?,
        })
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Splits> {
    let all = match cfg.dataset() {
        DataKind::Blobs => Corpus::Labeled(blobs(&BlobParams {
            samples: cfg.samples,
            classes: cfg.classes,
            side: cfg.side,
            sigma: cfg.sigma,
            spread: cfg.spread,
            base: cfg.base,
            seed: cfg.seed,
        })?),
        DataKind::GlyphGrid => Corpus::Labeled(glyph_grid(&GlyphParams {
            samples: cfg.samples,
            classes: cfg.classes,
            side: cfg.side,
            cells: cfg.cells,
            flip: cfg.flip,
            sigma: cfg.glyph_sigma,
            seed: cfg.seed,
        })?),
        DataKind::TokenCorpus => Corpus::Tokens(token_corpus(&MarkovParams {
            sequences: cfg.sequences,
            length: cfg.seq_len,
            vocab: cfg.vocab,
            branching: cfg.branching,
            focus: cfg.focus,
            seed: cfg.seed,
        })?),
    };
    let n = all.len();
    let (train, heldout) = match all {
        Corpus::Labeled(_) => (
            cfg.train_size.unwrap_or(2000),
            cfg.heldout_size.unwrap_or(500),
        ),
        Corpus::Tokens(_) => (
            cfg.train_size.unwrap_or(n * 2 / 3),
            cfg.heldout_size.unwrap_or(n / 6),
        ),
    };
    if train == 0 || heldout == 0 || train + heldout >= n {
        return Err(CliError::Usage(format!(
            "cannot split {n} examples into {train} train, {heldout} held-out and a nonempty test set"
        )));
    }
    let (train_set, rest) = all.split_at(train);
    let (heldout_set, test) = rest.split_at(heldout);
    Ok(Splits {
        train: train_set,
        heldout: heldout_set,
        test,
    })
}

pub fn model_spec(cfg: &ExperimentConfig, data: &Corpus) -> Result<ModelSpec> {
    match (cfg.backend, data) {
        (Backend::Classifier, Corpus::Labeled(d)) => Ok(ModelSpec::classifier(
            d.dim(),
            cfg.hidden.clone().unwrap_or_else(|| vec![128, 64]),
            d.classes(),
        )),
        (Backend::CausalLm, Corpus::Tokens(c)) => Ok(ModelSpec::causal_lm(
            c.vocab(),
            cfg.context,
            cfg.embed_dim,
            cfg.hidden.clone().unwrap_or_else(|| vec![128]),
        )),
        _ => Err(CliError::Usage("backend does not match the dataset".into())),
    }
}

pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.train_epochs,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
        lr: cfg.train_lr,
        seed: cfg.seed,
    }
}

/// Fresh model fitted on the training split; also returns the mean loss of
/// every epoch.
pub fn train_model(cfg: &ExperimentConfig, train: &Corpus) -> Result<(Model, Vec<f64>)> {
    let mut model = Model::init(model_spec(cfg, train)?, cfg.seed)?;
    let losses = fit(&mut model, train, &train_config(cfg))?;
    Ok((model, losses))
}

pub fn embed_config(cfg: &ExperimentConfig) -> EmbedConfig {
    EmbedConfig {
        r1: cfg.r1,
        epsilon: cfg.epsilon,
        loss: cfg.loss,
        epochs: cfg.embed_epochs,
        lr: cfg.embed_lr,
        optimizer: cfg.embed_optimizer,
        lambda: cfg.lambda,
        scheme: cfg.scheme.unwrap_or(MaskScheme::LeaveOneOut),
        masks: cfg.masks,
        mask_seed: cfg.mask_seed(),
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        early_stop: cfg.early_stop,
    }
}

/// Masks per watermark bit when label-only verification picks its own set.
pub const LABEL_ONLY_MASKS_PER_BIT: usize = 16;

/// The owner's extraction setup in the configured metric mode.
pub fn explainer(cfg: &ExperimentConfig, input_len: usize) -> Result<Explainer> {
    let mut ec = embed_config(cfg);
    if cfg.mode == MetricMode::LabelOnly && cfg.scheme.is_none() {
        ec.scheme = MaskScheme::Random;
        ec.masks = Some(cfg.masks.unwrap_or(LABEL_ONLY_MASKS_PER_BIT * cfg.k));
    }
    let base = ec.explainer(input_len, cfg.k)?;
    Ok(Explainer::new(
        base.masks().clone(),
        *base.partition(),
        cfg.mode,
        cfg.lambda,
    )?)
}

pub fn watermark(cfg: &ExperimentConfig) -> Result<Watermark> {
    Ok(Watermark::random(cfg.k, cfg.watermark_seed())?)
}

fn labeled_by(model: &dyn BlackBox, t: TriggerSample) -> Result<TriggerSample> {
    Ok(match t {
        TriggerSample::Classifier { input, .. } => {
            let label = model.predict_batch(&[Sample::Features(input.clone())])?[0].predicted;
            TriggerSample::Classifier { input, label }
        }
        lm => lm,
    })
}

/// `cfg.triggers` owner triggers; classifier triggers take the clean
/// model's prediction as their label.
pub fn make_triggers(cfg: &ExperimentConfig, model: &Model) -> Result<Vec<TriggerSample>> {
    let spec = model.spec();
    (0..cfg.triggers as u64)
        .map(|i| {
            let s = cfg.trigger_seed() + i;
            let raw = match cfg.trigger_kind() {
                TriggerKind::SignedNoise => {
                    TriggerSample::signed_noise(spec.input_dim, 0.1, 1.0, 0, s)
                }
                TriggerKind::Noise => TriggerSample::noise(spec.input_dim, 0.0, 1.0, 0, s),
                TriggerKind::Tokens => TriggerSample::random_tokens(
                    cfg.trigger_len.unwrap_or(2 * cfg.k),
                    spec.vocab,
                    s,
                ),
            };
            labeled_by(model, raw)
        })
        .collect()
}

/// A trigger the adversary draws without knowing the owner's: Gaussian
/// noise with the owner trigger's mean and spread, or random tokens.
pub fn adversary_trigger(model: &Model, like: &TriggerSample, seed: u64) -> Result<TriggerSample> {
    let raw = match like {
        TriggerSample::Classifier { input, .. } => {
            let n = input.len() as f64;
            let mean = input.iter().sum::<f64>() / n;
            let std = (input.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            TriggerSample::noise(input.len(), mean, std, 0, seed)
        }
        TriggerSample::Lm { tokens, .. } => {
            TriggerSample::random_tokens(tokens.len(), model.spec().vocab, seed)
        }
    };
    labeled_by(model, raw)
}

/// Everything the owner holds after embedding.
#[derive(Debug, Clone)]
pub struct Owner {
    pub clean: Model,
    pub model: Model,
    pub triggers: Vec<TriggerSample>,
    pub watermark: Watermark,
    /// Extraction setup in the configured metric mode.
    pub explainer: Explainer,
    pub history: Vec<EpochRecord>,
}

pub fn embed(cfg: &ExperimentConfig, clean: &Model, train: &Corpus) -> Result<Owner> {
    let triggers = make_triggers(cfg, clean)?;
    let wm = watermark(cfg)?;
    let out = embed_watermark(clean, train, &triggers, &wm, &embed_config(cfg))?;
    Ok(Owner {
        clean: clean.clone(),
        explainer: explainer(cfg, triggers[0].input_len())?,
        model: out.model,
        triggers,
        watermark: wm,
        history: out.history,
    })
}

/// Data, clean model and embedded owner state for one config.
pub fn build_owner(cfg: &ExperimentConfig) -> Result<(Splits, Owner)> {
    let splits = generate(cfg)?;
    let (clean, _) = train_model(cfg, &splits.train)?;
    let owner = embed(cfg, &clean, &splits.train)?;
    Ok((splits, owner))
}

/// Verification through every trigger.
pub fn verify_all(
    model: &dyn BlackBox,
    triggers: &[TriggerSample],
    explainer: &Explainer,
    wm: &Watermark,
    alpha: f64,
) -> Result<Vec<VerificationReport>> {
    triggers
        .iter()
        .map(|t| Ok(verify(model, t, explainer, wm, alpha)?))
        .collect()
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub kind: AttackKind,
    /// The modified model; input masking wraps the model instead.
    pub model: Option<Model>,
    /// Owner verification over the attack, starting before it.
    pub trace: Vec<TracePoint>,
    /// WSR of the adversary's own watermark after overwriting.
    pub adversary_wsr: Option<f64>,
}

impl AttackRun {
    pub fn last(&self) -> &TracePoint {
        self.trace
            .last()
            .expect("traces start with the unattacked model")
    }
}

pub fn run_attack(
    cfg: &ExperimentConfig,
    kind: AttackKind,
    owner: &Owner,
    splits: &Splits,
) -> Result<AttackRun> {
    let trigger = &owner.triggers[0];
    let monitor = Monitor {
        trigger,
        explainer: &owner.explainer,
        watermark: &owner.watermark,
        eval: &splits.test,
    };
    let adv = cfg.adversary_seed();
    let adversary = || -> Result<(TriggerSample, EmbedConfig, Explainer)> {
        let t = adversary_trigger(&owner.model, trigger, adv)?;
        let ecfg = EmbedConfig {
            mask_seed: adv + 2,
            seed: adv,
            ..embed_config(cfg)
        };
        let ex = ecfg.explainer(t.input_len(), cfg.k)?;
        Ok((t, ecfg, ex))
    };
    let mut run = AttackRun {
        kind,
        model: None,
        trace: Vec::new(),
        adversary_wsr: None,
    };
    match kind {
        AttackKind::Finetune => {
            let tc = TrainConfig {
                epochs: cfg.finetune_epochs,
                lr: cfg.finetune_lr,
                seed: adv,
                ..train_config(cfg)
            };
            let (m, trace) = finetune_attack(&owner.model, &splits.heldout, &tc, Some(&monitor))?;
            run.model = Some(m);
            run.trace = trace;
        }
        AttackKind::Prune => {
            let m = prune_attack(&owner.model, cfg.prune_rate, cfg.prune_per_layer)?;
            run.trace = vec![monitor.measure(&owner.model, 0)?, monitor.measure(&m, 1)?];
            run.model = Some(m);
        }
        AttackKind::Overwrite => {
            let (t, ecfg, ex) = adversary()?;
            let wm = Watermark::random(cfg.k, adv + 1)?;
            let ecfg = EmbedConfig {
                epochs: cfg.overwrite_epochs,
                ..ecfg
            };
            let out = overwrite_attack(&owner.model, &splits.heldout, &t, &wm, &ex, &ecfg)?;
            run.trace = vec![
                monitor.measure(&owner.model, 0)?,
                monitor.measure(&out.model, 1)?,
            ];
            run.adversary_wsr = out.history.last().map(|r| r.wsr);
            run.model = Some(out.model);
        }
        AttackKind::Unlearn => {
            let (t, _, ex) = adversary()?;
            let spec = UnlearnSpec {
                guess: owner.watermark.clone(),
                trigger: t,
                explainer: ex,
                r1: cfg.unlearn_r1,
                epsilon: cfg.epsilon,
                loss: cfg.loss,
            };
            let tc = TrainConfig {
                epochs: cfg.unlearn_epochs,
                batch_size: cfg.batch_size,
                optimizer: cfg.embed_optimizer,
                lr: cfg.unlearn_lr,
                seed: adv,
            };
            let (m, trace) =
                unlearn_attack(&owner.model, &splits.heldout, &spec, &tc, Some(&monitor))?;
            run.model = Some(m);
            run.trace = trace;
        }
        AttackKind::InputMask => {
            let wrapped = InputMask::new(
                &owner.model,
                *owner.explainer.partition(),
                cfg.mask_draws,
                cfg.mask_rate,
                adv,
            )?;
            run.trace = vec![
                monitor.measure(&owner.model, 0)?,
                monitor.measure(&wrapped, 1)?,
            ];
        }
    }
    Ok(run)
}

/// One ablation point.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub seed: u64,
    /// Mean over the point's triggers.
    pub wsr: f64,
    /// Largest (least significant) over the point's triggers.
    pub log10_p: f64,
    pub benign: f64,
    /// Every trigger verifies.
    pub decision: bool,
}

impl AblationRow {
    pub fn csv_header(sweep: SweepKind) -> String {
        format!("{sweep},seed,wsr,log10_p,benign_acc,decision")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{}",
            self.value, self.seed, self.wsr, self.log10_p, self.benign, self.decision
        )
    }
}

/// Configs of every point of one sweep, as `(value, config)` pairs.
pub fn sweep_points(cfg: &ExperimentConfig, sweep: SweepKind) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match sweep {
        SweepKind::R1 => cfg
            .sweep_r1
            .iter()
            .map(|&v| (v.to_string(), with(&|c| c.r1 = v)))
            .collect(),
        SweepKind::Masks => cfg
            .sweep_masks
            .iter()
            .map(|&v| {
                (
                    v.to_string(),
                    with(&|c| {
                        c.scheme = Some(MaskScheme::Random);
                        c.masks = Some(v);
                    }),
                )
            })
            .collect(),
        SweepKind::Triggers => cfg
            .sweep_triggers
            .iter()
            .map(|&v| (v.to_string(), with(&|c| c.triggers = v)))
            .collect(),
        SweepKind::Epsilon => cfg
            .sweep_epsilon
            .iter()
            .map(|&v| (v.to_string(), with(&|c| c.epsilon = v)))
            .collect(),
        SweepKind::Loss => cfg
            .sweep_loss
            .iter()
            .map(|&v| (v.to_string(), with(&|c| c.loss = v)))
            .collect(),
    }
}

fn ablation_point(
    cfg: &ExperimentConfig,
    splits: &Splits,
    clean: &Model,
    value: String,
) -> Result<AblationRow> {
    let owner = embed(cfg, clean, &splits.train)?;
    let reports = verify_all(
        &owner.model,
        &owner.triggers,
        &owner.explainer,
        &owner.watermark,
        cfg.alpha,
    )?;
    Ok(AblationRow {
        value,
        seed: cfg.seed,
        wsr: reports.iter().map(|r| r.wsr).sum::<f64>() / reports.len() as f64,
        log10_p: reports
            .iter()
            .map(|r| r.log10_p)
            .fold(f64::NEG_INFINITY, f64::max),
        benign: benign_score(&owner.model, &splits.test)?,
        decision: reports.iter().all(|r| r.decision),
    })
}

/// Maps `f` over `items` on up to `threads` scoped workers, keeping input
/// order in the output.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new(items.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every item was processed"))
        .collect()
}

/// Runs the configured sweeps over `sweep_seeds` consecutive seeds.
pub fn ablate(
    cfg: &ExperimentConfig,
    threads: usize,
) -> Result<Vec<(SweepKind, Vec<AblationRow>)>> {
    let seeds: Vec<u64> = (0..cfg.sweep_seeds as u64).map(|s| cfg.seed + s).collect();
    let bases: Vec<Result<(ExperimentConfig, Splits, Model)>> = par_map(&seeds, threads, |&seed| {
        let c = ExperimentConfig {
            seed,
            ..cfg.clone()
        };
        let splits = generate(&c)?;
        let (clean, _) = train_model(&c, &splits.train)?;
        Ok((c, splits, clean))
    });
    let bases = bases.into_iter().collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for (si, sweep) in cfg.ablate.iter().enumerate() {
        for (bi, (base_cfg, _, _)) in bases.iter().enumerate() {
            for (value, point) in sweep_points(base_cfg, *sweep) {
                jobs.push((si, bi, value, point));
            }
        }
    }
    let rows = par_map(&jobs, threads, |(_, bi, value, point)| {
        let (_, splits, clean) = &bases[*bi];
        ablation_point(point, splits, clean, value.clone())
    });
    let mut out: Vec<(SweepKind, Vec<AblationRow>)> =
        cfg.ablate.iter().map(|&s| (s, Vec::new())).collect();
    for ((si, ..), row) in jobs.iter().zip(rows) {
        out[*si].1.push(row?);
    }
    Ok(out)
}
