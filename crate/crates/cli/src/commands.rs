//! One function per subcommand. Each reads its inputs from the configured
//! artifact paths, writes its outputs plus a manifest into the output
//! directory, and returns a short text summary.

use std::fmt::Write as _;
use std::path::Path;

use eaaw_core::attacks::trace_csv;
use eaaw_core::train::benign_score;
use eaaw_core::watermark::{load_triggers, save_triggers};
use eaaw_core::{load_model, save_model, Model, TriggerSample, VerificationReport, Watermark};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::pipeline::{self, Splits, SPLITS};
use crate::report::{self, SummaryRow, SUMMARY_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Embed,
    Extract,
    Verify,
    Attack,
    Ablate,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Embed => "embed",
            Command::Extract => "extract",
            Command::Verify => "verify",
            Command::Attack => "attack",
            Command::Ablate => "ablate",
            Command::Report => "report",
        }
    }
}

pub fn run(cmd: Command, cfg: &ExperimentConfig, threads: usize) -> Result<String> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    match cmd {
        Command::GenData => gen_data(cfg, &out),
        Command::Train => train(cfg, &out),
        Command::Embed => embed(cfg, &out),
        Command::Extract => extract(cfg, &out),
        Command::Verify => verify(cfg, &out),
        Command::Attack => attack(cfg, &out),
        Command::Ablate => ablate(cfg, &out, threads),
        Command::Report => report_cmd(cfg, &out),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn model_at(path: &Path) -> Result<Model> {
    require(path)?;
    Ok(load_model(path)?)
}

fn triggers_at(path: &Path) -> Result<Vec<TriggerSample>> {
    require(path)?;
    Ok(load_triggers(path)?)
}

fn watermark_at(path: &Path) -> Result<Watermark> {
    require(path)?;
    Ok(Watermark::load(path)?)
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let splits = pipeline::generate(cfg)?;
    splits.save(out)?;
    let mut m = RunManifest::new("gen-data", cfg);
    for name in SPLITS {
        m = m.artifact(name.trim_end_matches(".bin"), &out.join(name));
    }
    m.write(out)?;
    Ok(format!(
        "{} dataset: {} train, {} held-out, {} test examples in {}\n",
        cfg.dataset(),
        splits.train.len(),
        splits.heldout.len(),
        splits.test.len(),
        out.display()
    ))
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let splits = Splits::load(&cfg.data_dir())?;
    let (model, losses) = pipeline::train_model(cfg, &splits.train)?;
    let path = cfg.model_path();
    save_model(&model, &path)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l:.6}").expect("string write");
    }
    write(&out.join("train.csv"), &csv)?;
    RunManifest::new("train", cfg)
        .artifact("data", &cfg.data_dir().join(SPLITS[0]))
        .artifact("model", &path)
        .artifact("history", &out.join("train.csv"))
        .write(out)?;
    Ok(format!(
        "trained {} parameters; benign test score {:.4}\n",
        model.params().numel(),
        benign_score(&model, &splits.test)?
    ))
}

fn embed(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let splits = Splits::load(&cfg.data_dir())?;
    let clean = model_at(&cfg.model_path())?;
    let owner = pipeline::embed(cfg, &clean, &splits.train)?;
    save_model(&owner.model, &cfg.watermarked_path())?;
    save_triggers(&owner.triggers, &cfg.trigger_path())?;
    owner.watermark.save(&cfg.watermark_path())?;
    let mut csv = format!("{}\n", eaaw_core::embedding::EpochRecord::CSV_HEADER);
    for r in &owner.history {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(&out.join("embed.csv"), &csv)?;
    RunManifest::new("embed", cfg)
        .artifact("model", &cfg.model_path())
        .artifact("watermarked", &cfg.watermarked_path())
        .artifact("triggers", &cfg.trigger_path())
        .artifact("watermark", &cfg.watermark_path())
        .artifact("history", &out.join("embed.csv"))
        .write(out)?;
    let last = owner.history.last().expect("at least one epoch");
    Ok(format!(
        "embedded {} bits in {} epochs: WSR {:.4}, benign test score {:.4} (clean {:.4})\n",
        cfg.k,
        owner.history.len(),
        last.wsr,
        benign_score(&owner.model, &splits.test)?,
        benign_score(&clean, &splits.test)?
    ))
}

fn extract(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let model = model_at(&cfg.watermarked_path())?;
    let triggers = triggers_at(&cfg.trigger_path())?;
    let first = triggers
        .first()
        .ok_or_else(|| CliError::Usage("trigger file is empty".into()))?;
    let ex = pipeline::explainer(cfg, first.input_len())?;
    let mut csv = String::from("trigger,part,weight,bit\n");
    let mut text = String::new();
    for (t, trig) in triggers.iter().enumerate() {
        let w = ex.explain(&model, trig)?;
        let bits = eaaw_core::extraction::binarize(&w);
        for (i, (wi, b)) in w.weights.iter().zip(bits.bits()).enumerate() {
            writeln!(csv, "{t},{i},{wi:.9e},{b}").expect("string write");
        }
        let signs: Vec<String> = bits.bits().iter().map(i8::to_string).collect();
        writeln!(text, "{}", signs.join(" ")).expect("string write");
    }
    write(&out.join("extract.csv"), &csv)?;
    write(&out.join("extracted.txt"), &text)?;
    RunManifest::new("extract", cfg)
        .artifact("model", &cfg.watermarked_path())
        .artifact("triggers", &cfg.trigger_path())
        .artifact("weights", &out.join("extract.csv"))
        .artifact("extracted", &out.join("extracted.txt"))
        .write(out)?;
    Ok(text)
}

fn verify(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let model = model_at(&cfg.watermarked_path())?;
    let triggers = triggers_at(&cfg.trigger_path())?;
    let wm = watermark_at(&cfg.watermark_path())?;
    let first = triggers
        .first()
        .ok_or_else(|| CliError::Usage("trigger file is empty".into()))?;
    let ex = pipeline::explainer(cfg, first.input_len())?;
    let reports = pipeline::verify_all(&model, &triggers, &ex, &wm, cfg.alpha)?;
    let mut csv = format!("{}\n", VerificationReport::CSV_HEADER);
    let mut text = String::new();
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        writeln!(text, "{r}\n").expect("string write");
    }
    write(&out.join("verification.csv"), &csv)?;
    write(&out.join("verification.txt"), &text)?;
    let test = cfg.data_dir().join(SPLITS[2]);
    let acc = if test.exists() {
        benign_score(&model, &eaaw_core::data::load(&test)?)?
    } else {
        f64::NAN
    };
    let summary = SummaryRow {
        trigger: cfg.label(),
        acc,
        log10_p: reports[0].log10_p,
        wsr: reports[0].wsr,
    };
    write(&out.join(SUMMARY_FILE), &report::summary_csv(&[summary]))?;
    RunManifest::new("verify", cfg)
        .artifact("model", &cfg.watermarked_path())
        .artifact("triggers", &cfg.trigger_path())
        .artifact("watermark", &cfg.watermark_path())
        .artifact("report", &out.join("verification.csv"))
        .artifact("summary", &out.join(SUMMARY_FILE))
        .write(out)?;
    Ok(text)
}

fn attack(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let splits = Splits::load(&cfg.data_dir())?;
    let model = model_at(&cfg.watermarked_path())?;
    let triggers = triggers_at(&cfg.trigger_path())?;
    let wm = watermark_at(&cfg.watermark_path())?;
    let first = triggers
        .first()
        .ok_or_else(|| CliError::Usage("trigger file is empty".into()))?;
    let owner = pipeline::Owner {
        explainer: pipeline::explainer(cfg, first.input_len())?,
        clean: model.clone(),
        model,
        triggers,
        watermark: wm,
        history: Vec::new(),
    };
    let mut manifest = RunManifest::new("attack", cfg).artifact("model", &cfg.watermarked_path());
    let mut text = String::new();
    for &kind in &cfg.attacks {
        let run = pipeline::run_attack(cfg, kind, &owner, &splits)?;
        let trace = out.join(format!("attack_{kind}.csv"));
        write(&trace, &trace_csv(&run.trace))?;
        manifest = manifest.artifact(&format!("{kind}.trace"), &trace);
        if let Some(m) = &run.model {
            let p = out.join(format!("attack_{kind}.bin"));
            save_model(m, &p)?;
            manifest = manifest.artifact(&format!("{kind}.model"), &p);
        }
        let (before, after) = (&run.trace[0], run.last());
        write!(
            text,
            "{kind:<10} WSR {:.3} -> {:.3}  log10 p {:.2}  benign {:.4} -> {:.4}",
            before.wsr, after.wsr, after.log10_p, before.benign, after.benign
        )
        .expect("string write");
        if let Some(a) = run.adversary_wsr {
            write!(text, "  adversary WSR {a:.3}").expect("string write");
        }
        text.push('\n');
    }
    manifest.write(out)?;
    Ok(text)
}

fn ablate(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<String> {
    let sweeps = pipeline::ablate(cfg, threads)?;
    let mut manifest = RunManifest::new("ablate", cfg);
    let mut text = String::new();
    for (sweep, rows) in &sweeps {
        let path = out.join(format!("ablate_{sweep}.csv"));
        let mut csv = format!("{}\n", pipeline::AblationRow::csv_header(*sweep));
        for r in rows {
            csv.push_str(&r.csv_row());
            csv.push('\n');
            writeln!(
                text,
                "{sweep}={:<8} seed {}  WSR {:.3}  log10 p {:.2}  benign {:.4}",
                r.value, r.seed, r.wsr, r.log10_p, r.benign
            )
            .expect("string write");
        }
        write(&path, &csv)?;
        manifest = manifest.artifact(&sweep.to_string(), &path);
    }
    manifest.write(out)?;
    Ok(text)
}

fn report_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let dir = cfg.runs_dir();
    require(&dir)?;
    let table = report::report(&dir)?;
    let path = out.join("report.csv");
    write(&path, &report::table_csv(&table))?;
    RunManifest::new("report", cfg)
        .artifact("runs", &dir)
        .artifact("table", &path)
        .write(out)?;
    Ok(report::table_text(&table))
}
