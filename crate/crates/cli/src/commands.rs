//! The five subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use manlab::attacks::{pgd, Objective};
use manlab::detection::{
    auroc, detect_scores, evaluate_suite, hard_rule_flags, masking_battery, transfer_evaluate, AccuracyRow,
    DetectionScore, GroundTruth, MaskingReport, NamedAttack,
};
use manlab::models::{TargetClassifier, TransitionNetwork};
use manlab::seed::{self, Stream};
use manlab::tensor::Checkpoint;
use manlab::training::{fine_tune_transition, train, train_observed, EpochMetrics, Regime, TrainConfig};

use crate::config::{check_regime_inputs, Resolved, RunConfig};
use crate::records::{self, MetricsWriter, Timing};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Detect,
    Transfer,
    Masking,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Detect => "detect",
            Command::Transfer => "transfer",
            Command::Masking => "masking",
        }
    }
}

/// Flags shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
}

/// Runs `cmd` and returns the output directory.
pub fn run(cmd: Command, args: &RunArgs) -> Result<PathBuf> {
    run_inner(cmd, args).with_context(|| format!("{} failed", cmd.name()))
}

fn run_inner(cmd: Command, args: &RunArgs) -> Result<PathBuf> {
    let started = Instant::now();
    let (raw, base_dir) = match (&args.config, &args.checkpoint) {
        (Some(p), _) => (RunConfig::load(p)?, p.parent().unwrap_or(Path::new(".")).to_path_buf()),
        (None, Some(ck)) if cmd != Command::Train => {
            let p = checkpoint_dir(ck).join(records::RESOLVED_CONFIG_FILE);
            (RunConfig::load(&p)?, checkpoint_dir(ck))
        }
        _ => bail!("--config is required"),
    };
    check_regime_inputs(&raw)?;
    let resolved = Resolved::new(&raw, args.seed, &base_dir)?;
    let resolved = absolutize(resolved);
    let hash = resolved.config.hash()?;
    if cmd != Command::Train && args.checkpoint.is_none() {
        bail!("--checkpoint is required for {}", cmd.name());
    }
    let out = records::prepare_out_dir(args.out.as_deref(), cmd.name(), &hash, resolved.seed())?;
    records::write_atomic(&out.join(records::RESOLVED_CONFIG_FILE), resolved.config.to_toml()?.as_bytes())?;

    let ctx = Ctx {
        resolved: &resolved,
        hash: &hash,
        out: &out,
    };
    match cmd {
        Command::Train => cmd_train(&ctx)?,
        Command::Eval => cmd_eval(&ctx, args.checkpoint.as_deref().expect("checked"))?,
        Command::Detect => cmd_detect(&ctx, args.checkpoint.as_deref().expect("checked"))?,
        Command::Transfer => cmd_transfer(&ctx, args.checkpoint.as_deref().expect("checked"))?,
        Command::Masking => cmd_masking(&ctx, args.checkpoint.as_deref().expect("checked"))?,
    }
    records::write_json(
        &out.join(records::TIMING_FILE),
        &Timing {
            command: cmd.name().into(),
            seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(out)
}

/// Makes every path in the config absolute so the resolved file works
/// from any directory.
fn absolutize(mut r: Resolved) -> Resolved {
    let base = std::env::current_dir().map(|d| d.join(&r.base_dir)).unwrap_or_else(|_| r.base_dir.clone());
    let fix = |p: &mut Option<PathBuf>| {
        if let Some(q) = p {
            if q.is_relative() {
                *q = base.join(&*q);
            }
        }
    };
    let c = &mut r.config;
    if let Some(d) = c.dataset.as_mut() {
        fix(&mut d.path);
    }
    fix(&mut c.attack.target_matrix_file);
    if let Some(e) = c.eval.as_mut() {
        for a in &mut e.attacks {
            fix(&mut a.target_matrix_file);
        }
    }
    if let Some(a) = c.detect.attack.as_mut() {
        fix(&mut a.target_matrix_file);
    }
    fix(&mut c.train.target_checkpoint);
    fix(&mut c.transfer.target_checkpoint);
    fix(&mut c.masking.surrogate_checkpoint);
    r.base_dir = base;
    r
}

struct Ctx<'a> {
    resolved: &'a Resolved,
    hash: &'a str,
    out: &'a Path,
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        p.parent().unwrap_or(Path::new(".")).to_path_buf()
    }
}

/// Loads a target from a checkpoint file or from `target.json` in a run
/// directory.
pub fn load_target(p: &Path) -> Result<TargetClassifier> {
    let file = if p.is_dir() { p.join(records::TARGET_FILE) } else { p.to_path_buf() };
    let ck = Checkpoint::load(&file).with_context(|| format!("loading {}", file.display()))?;
    Ok(TargetClassifier::from_checkpoint(&ck)?)
}

/// Loads `target.json` and, if present, `transition.json` from a run
/// directory (or the directory holding the given file).
pub fn load_models(p: &Path) -> Result<(TargetClassifier, Option<TransitionNetwork>)> {
    let dir = checkpoint_dir(p);
    let target = load_target(&dir)?;
    let tpath = dir.join(records::TRANSITION_FILE);
    let trans = if tpath.exists() {
        let ck = Checkpoint::load(&tpath).with_context(|| format!("loading {}", tpath.display()))?;
        Some(TransitionNetwork::from_checkpoint(&ck)?)
    } else {
        None
    };
    Ok((target, trans))
}

/// SHA-256 over the checkpoint's `target.json` and, if present,
/// `transition.json`.
fn checkpoint_digest(p: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let dir = checkpoint_dir(p);
    let mut h = Sha256::new();
    for name in [records::TARGET_FILE, records::TRANSITION_FILE] {
        let f = dir.join(name);
        if f.exists() {
            h.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn save(out: &Path, target: &TargetClassifier, trans: Option<&TransitionNetwork>) -> Result<()> {
    let mut text = target.to_checkpoint().to_json()?;
    text.push('\n');
    records::write_atomic(&out.join(records::TARGET_FILE), text.as_bytes())?;
    if let Some(t) = trans {
        let mut text = t.to_checkpoint().to_json()?;
        text.push('\n');
        records::write_atomic(&out.join(records::TRANSITION_FILE), text.as_bytes())?;
    }
    Ok(())
}

fn check_classes(target: &TargetClassifier, classes: usize, dim: usize) -> Result<()> {
    if target.classes() != classes || target.input_width() != dim {
        bail!(
            "checkpoint expects {} classes and {} features; the dataset has {classes} and {dim}",
            target.classes(),
            target.input_width()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    regime: Regime,
    epochs: usize,
    final_epoch: Option<&'a EpochMetrics>,
    test: &'a [AccuracyRow],
}

/// Natural training of a fixed target for the frozen-target regimes.
fn pretrain_target(r: &Resolved, cfg: &TrainConfig, data: &manlab::datasets::Dataset, arch: &manlab::models::Architecture) -> Result<TargetClassifier> {
    let seed = seed::derive(r.seed(), Stream::Pretrain);
    let init = TargetClassifier::new(arch, seed, &mut seed::rng(seed, Stream::TargetInit))?;
    let epochs = r.config.train.pretrain_epochs.expect("resolved");
    let pre = TrainConfig {
        regime: Regime::Natural,
        epochs,
        lr_milestones: manlab::training::default_milestones(epochs),
        seed,
        ..cfg.clone()
    };
    Ok(train(&pre, data, init, None)?.target)
}

fn cmd_train(ctx: &Ctx<'_>) -> Result<()> {
    let r = ctx.resolved;
    let data = r.load_data()?;
    let arch = r.architecture(&data);
    let cfg = r.train_config(data.classes())?;
    let s = r.seed();
    let target = match (&r.config.train.target_checkpoint, cfg.regime) {
        (Some(p), _) => {
            let t = load_target(p)?;
            check_classes(&t, data.classes(), data.dim())?;
            t
        }
        (None, Regime::FrozenTarget | Regime::ManMinus) => pretrain_target(r, &cfg, &data.train, &arch)?,
        (None, _) => TargetClassifier::new(&arch, s, &mut seed::rng(s, Stream::TargetInit))?,
    };
    let trans = if cfg.regime.uses_transition() {
        Some(TransitionNetwork::new(&arch, s, &mut seed::rng(s, Stream::TransitionInit))?)
    } else {
        None
    };

    let mut writer = MetricsWriter::create(ctx.out)?;
    let outcome = train_observed(&cfg, &data.train, target, trans, &mut |m| {
        writer.append(m).map_err(|e| manlab::Error::State(format!("{e:#}")))
    })?;
    writer.finish()?;
    save(ctx.out, &outcome.target, outcome.transition.as_ref())?;

    let attacks = r.eval_attacks(data.classes())?;
    let rows = evaluate_suite(&outcome.target, outcome.transition.as_ref(), &data.test, &attacks, s)?;
    records::write_atomic(&ctx.out.join(records::EVAL_FILE), records::accuracy_table(&rows).as_bytes())?;
    records::write_json(
        &ctx.out.join(records::SUMMARY_FILE),
        &TrainSummary {
            command: "train",
            config_hash: ctx.hash,
            seed: s,
            regime: cfg.regime,
            epochs: cfg.epochs,
            final_epoch: outcome.record.last(),
            test: &rows,
        },
    )
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    checkpoint_sha256: String,
    test: &'a [AccuracyRow],
}

fn cmd_eval(ctx: &Ctx<'_>, checkpoint: &Path) -> Result<()> {
    let r = ctx.resolved;
    let data = r.load_data()?;
    let (target, trans) = load_models(checkpoint)?;
    check_classes(&target, data.classes(), data.dim())?;
    let attacks = r.eval_attacks(data.classes())?;
    let rows = evaluate_suite(&target, trans.as_ref(), &data.test, &attacks, r.seed())?;
    records::write_atomic(&ctx.out.join(records::EVAL_FILE), records::accuracy_table(&rows).as_bytes())?;
    records::write_json(
        &ctx.out.join(records::SUMMARY_FILE),
        &EvalSummary {
            command: "eval",
            config_hash: ctx.hash,
            seed: r.seed(),
            checkpoint_sha256: checkpoint_digest(checkpoint)?,
            test: &rows,
        },
    )
}

#[derive(Serialize)]
struct DetectSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    attack: String,
    auroc: f64,
    natural: usize,
    adversarial: usize,
    mean_score_natural: f64,
    mean_score_adversarial: f64,
    hard_rule_flagged_natural: f64,
    hard_rule_flagged_adversarial: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn cmd_detect(ctx: &Ctx<'_>, checkpoint: &Path) -> Result<()> {
    let r = ctx.resolved;
    let data = r.load_data()?;
    let (target, trans) = load_models(checkpoint)?;
    let trans = trans.ok_or_else(|| anyhow!("detection needs a transition network in the checkpoint"))?;
    check_classes(&target, data.classes(), data.dim())?;
    let attack = r.detect_attack(data.classes())?;
    let x = data.test.features();
    let y = data.test.labels();
    let x_adv = pgd(x, y, &attack, &target, Some(&trans), &mut seed::rng(r.seed(), Stream::Evaluation))?;
    let mut scores = detect_scores(x, &target, &trans, GroundTruth::Natural, 0)?;
    scores.extend(detect_scores(&x_adv, &target, &trans, GroundTruth::Adversarial, y.len())?);
    let value = auroc(&scores)?;

    let flag_rate = |inputs: &manlab::tensor::Tensor, truth: GroundTruth| -> Result<f64> {
        let mats = trans.transition_matrices(inputs)?;
        let sel: Vec<&DetectionScore> = scores.iter().filter(|s| s.truth == truth).collect();
        Ok(mean(mats.iter().zip(sel).map(|(m, s)| hard_rule_flags(m, s.predicted) as u8 as f64)))
    };
    let summary = DetectSummary {
        command: "detect",
        config_hash: ctx.hash,
        seed: r.seed(),
        attack: r.config.detect.attack.as_ref().map(|a| a.display_name()).unwrap_or_default(),
        auroc: value,
        natural: y.len(),
        adversarial: y.len(),
        mean_score_natural: mean(scores.iter().filter(|s| s.truth == GroundTruth::Natural).map(|s| s.score)),
        mean_score_adversarial: mean(scores.iter().filter(|s| s.truth == GroundTruth::Adversarial).map(|s| s.score)),
        hard_rule_flagged_natural: flag_rate(x, GroundTruth::Natural)?,
        hard_rule_flagged_adversarial: flag_rate(&x_adv, GroundTruth::Adversarial)?,
    };
    records::write_atomic(&ctx.out.join(records::DETECT_FILE), records::detection_table(&scores).as_bytes())?;
    records::write_json(&ctx.out.join(records::SUMMARY_FILE), &summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferRow {
    pub attack: String,
    pub undefended_b: f64,
    pub transferred: f64,
    pub fine_tuned: Option<f64>,
}

#[derive(Serialize)]
struct TransferSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    target_b: String,
    fine_tune_epochs: usize,
    rows: &'a [TransferRow],
}

fn cmd_transfer(ctx: &Ctx<'_>, checkpoint: &Path) -> Result<()> {
    let r = ctx.resolved;
    let data = r.load_data()?;
    let (_, trans) = load_models(checkpoint)?;
    let trans = trans.ok_or_else(|| anyhow!("transfer needs a transition network in --checkpoint"))?;
    let b_path = r
        .config
        .transfer
        .target_checkpoint
        .clone()
        .ok_or_else(|| anyhow!("transfer.target_checkpoint is required"))?;
    let target_b = load_target(&b_path)?;
    check_classes(&target_b, data.classes(), data.dim())?;
    let attacks = r.eval_attacks(data.classes())?;
    let s = r.seed();

    // Undefended B faces the same attacks aimed at B alone.
    let plain: Vec<NamedAttack> = attacks
        .iter()
        .map(|a| NamedAttack {
            name: a.name.clone(),
            attack: a.attack.as_ref().map(|c| c.with_objective(Objective::TargetOnly)),
        })
        .collect();
    let undefended = evaluate_suite(&target_b, None, &data.test, &plain, s)?;
    let transferred = transfer_evaluate(&trans, &target_b, &data.test, &attacks, s)?;

    let epochs = r.config.transfer.fine_tune_epochs.expect("resolved");
    let fine_tuned = if epochs > 0 {
        let base = r.train_config(data.classes())?;
        let cfg = TrainConfig {
            epochs,
            lr_milestones: manlab::training::default_milestones(epochs),
            ..base
        };
        let tuned = fine_tune_transition(trans.clone(), &target_b, &data.train, &cfg)?;
        let mut text = tuned.to_checkpoint().to_json()?;
        text.push('\n');
        records::write_atomic(&ctx.out.join("transition_finetuned.json"), text.as_bytes())?;
        Some(transfer_evaluate(&tuned, &target_b, &data.test, &attacks, s)?)
    } else {
        None
    };
    let rows: Vec<TransferRow> = (0..attacks.len())
        .map(|i| TransferRow {
            attack: attacks[i].name.clone(),
            undefended_b: undefended[i].target_only,
            transferred: transferred[i].defended,
            fine_tuned: fine_tuned.as_ref().map(|f| f[i].defended),
        })
        .collect();
    let mut table = String::from("attack,undefended_b,transferred,fine_tuned\n");
    for row in &rows {
        table.push_str(&format!(
            "{},{:?},{:?},{}\n",
            records::csv_field(&row.attack),
            row.undefended_b,
            row.transferred,
            row.fine_tuned.map(|v| format!("{v:?}")).unwrap_or_default()
        ));
    }
    records::write_atomic(&ctx.out.join(records::TRANSFER_FILE), table.as_bytes())?;
    records::write_json(
        &ctx.out.join(records::SUMMARY_FILE),
        &TransferSummary {
            command: "transfer",
            config_hash: ctx.hash,
            seed: s,
            target_b: b_path.display().to_string(),
            fine_tune_epochs: epochs,
            rows: &rows,
        },
    )
}

#[derive(Serialize)]
struct MaskingSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    passed: bool,
    report: &'a MaskingReport,
}

fn cmd_masking(ctx: &Ctx<'_>, checkpoint: &Path) -> Result<()> {
    let r = ctx.resolved;
    let data = r.load_data()?;
    let (target, trans) = load_models(checkpoint)?;
    check_classes(&target, data.classes(), data.dim())?;
    let s = r.seed();
    let surrogate = match &r.config.masking.surrogate_checkpoint {
        Some(p) => load_target(p)?,
        None => {
            let arch = r.architecture(&data);
            let base = r.train_config(data.classes())?;
            let seed = seed::derive(s, Stream::Surrogate);
            let epochs = r.config.masking.surrogate_epochs.expect("resolved");
            let cfg = TrainConfig {
                regime: Regime::AtBaseline,
                epochs,
                lr_milestones: manlab::training::default_milestones(epochs),
                attack: base.attack.with_objective(Objective::TargetOnly),
                seed,
                ..base
            };
            let init = TargetClassifier::new(&arch, seed, &mut seed::rng(seed, Stream::TargetInit))?;
            let t = train(&cfg, &data.train, init, None)?.target;
            let mut text = t.to_checkpoint().to_json()?;
            text.push('\n');
            records::write_atomic(&ctx.out.join("surrogate.json"), text.as_bytes())?;
            t
        }
    };
    let report = masking_battery(&target, trans.as_ref(), &surrogate, &data.test, &r.masking_config(), s)?;
    let summary = MaskingSummary {
        command: "masking",
        config_hash: ctx.hash,
        seed: s,
        passed: report.passed(),
        report: &report,
    };
    records::write_json(&ctx.out.join(records::MASKING_FILE), &report)?;
    records::write_json(&ctx.out.join(records::SUMMARY_FILE), &summary)
}

/// Reads a finished run's summary as JSON.
pub fn read_summary(dir: &Path) -> Result<serde_json::Value> {
    let p = dir.join(records::SUMMARY_FILE);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}
