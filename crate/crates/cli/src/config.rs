//! Run configuration: a TOML file with `[dataset]`, `[model]`, `[attack]`,
//! `[train]`, `[eval]`, `[detect]`, `[transfer]` and `[masking]` blocks.
//!
//! Every key is optional except the `[dataset]` block. [`RunConfig::resolve`]
//! fills in the defaults so that the resolved file written next to each run
//! re-runs to identical results; its SHA-256 is the run's config hash.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use manlab::attacks::{parse_target_matrix, AttackConfig, AttackMode, Norm, Objective, TargetLabel, PGD40_STEP_RATIO};
use manlab::datasets::{gen_blobs, gen_rings, load_table, DataSplits};
use manlab::detection::{MaskingConfig, NamedAttack};
use manlab::models::Architecture;
use manlab::seed::{self, Stream};
use manlab::training::{default_milestones, GradientRouting, Regime, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub train: TrainSection,
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub masking: MaskingSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Rings,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: Option<usize>,
    pub dim: Option<usize>,
    pub per_class: Option<usize>,
    pub spread: Option<f64>,
    pub noise: Option<f64>,
    pub path: Option<PathBuf>,
    pub label_column: Option<String>,
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub target_hidden: Option<Vec<usize>>,
    pub transition_hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Nontarget,
    Targeted,
    TargetMatrix,
}

/// One attack. Missing keys take the defaults of the block it appears in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: Option<String>,
    /// `false` makes this the natural (unattacked) row of a table.
    pub enabled: Option<bool>,
    pub norm: Option<Norm>,
    pub epsilon: Option<f64>,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub random_start: Option<bool>,
    pub mode: Option<ModeName>,
    pub target_label: Option<usize>,
    pub target_matrix_file: Option<PathBuf>,
    pub objective: Option<Objective>,
    pub dual_weights: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub regime: Option<Regime>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_milestones: Option<Vec<usize>>,
    pub lr_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub gradient_routing: Option<GradientRouting>,
    pub keep_failed_attacks: Option<bool>,
    /// Fixed target for the frozen-target and ablation regimes; without it
    /// a target is first trained naturally for `pretrain_epochs`.
    pub target_checkpoint: Option<PathBuf>,
    pub pretrain_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    pub attack: Option<AttackSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub target_checkpoint: Option<PathBuf>,
    pub fine_tune_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSection {
    pub norm: Option<Norm>,
    pub base_epsilon: Option<f64>,
    pub objective: Option<Objective>,
    pub unbounded_epsilon: Option<f64>,
    pub random_samples: Option<usize>,
    pub sample_points: Option<usize>,
    pub surrogate_checkpoint: Option<PathBuf>,
    pub surrogate_epochs: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_EPSILON: f64 = 0.1;

fn default_objective(regime: Regime) -> Objective {
    match regime {
        Regime::Joint | Regime::ManMinus => Objective::Combined,
        Regime::AtBaseline | Regime::FrozenTarget | Regime::Natural => Objective::TargetOnly,
    }
}

/// Objective of evaluation attacks: adaptive when a transition network
/// is part of the model.
fn default_eval_objective(regime: Regime) -> Objective {
    if regime.uses_transition() {
        Objective::Combined
    } else {
        Objective::TargetOnly
    }
}

impl AttackSpec {
    /// Fills every defaultable key. `steps` and the step-size ratio come
    /// from the caller (training uses 10 steps of ε/4, evaluation 40
    /// steps of 0.2231·ε).
    fn resolved(&self, base: &AttackSpec, steps: usize, step_ratio: f64, objective: Objective) -> AttackSpec {
        let norm = self.norm.or(base.norm).unwrap_or(Norm::Linf);
        let epsilon = self.epsilon.or(base.epsilon).unwrap_or(DEFAULT_EPSILON);
        let steps = self.steps.unwrap_or(steps);
        AttackSpec {
            name: self.name.clone(),
            enabled: Some(self.enabled.unwrap_or(true)),
            norm: Some(norm),
            epsilon: Some(epsilon),
            steps: Some(steps),
            step_size: Some(self.step_size.unwrap_or(if steps == 1 { epsilon } else { step_ratio * epsilon })),
            random_start: Some(self.random_start.unwrap_or(steps > 1)),
            mode: Some(self.mode.unwrap_or(ModeName::Nontarget)),
            target_label: self.target_label,
            target_matrix_file: self.target_matrix_file.clone(),
            objective: Some(self.objective.unwrap_or(objective)),
            dual_weights: Some(self.dual_weights.unwrap_or([1.0, 1.0])),
        }
    }

    /// Display name: the configured one, or e.g. `PGD-40 combined`.
    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        if self.enabled == Some(false) {
            return "None".into();
        }
        let steps = self.steps.unwrap_or(0);
        let kind = if steps == 1 && self.random_start != Some(true) {
            "FGSM".to_string()
        } else {
            format!("PGD-{steps}")
        };
        let obj = match self.objective {
            Some(Objective::Combined) => "combined",
            Some(Objective::Matrix) => "matrix",
            Some(Objective::Dual) => "dual",
            _ => "target_only",
        };
        format!("{kind} {obj}")
    }

    /// Converts a resolved spec into an attack for a `classes`-way model.
    pub fn to_attack(&self, classes: usize, base_dir: &Path) -> Result<Option<AttackConfig>> {
        if self.enabled == Some(false) {
            return Ok(None);
        }
        let missing = |k: &str| anyhow!("attack key {k:?} unresolved");
        let mode = match self.mode.ok_or_else(|| missing("mode"))? {
            ModeName::Nontarget => AttackMode::Nontarget,
            ModeName::Targeted => AttackMode::Targeted(match self.target_label {
                Some(k) => TargetLabel::Fixed(k),
                None => TargetLabel::LeastLikely,
            }),
            ModeName::TargetMatrix => match &self.target_matrix_file {
                Some(p) => {
                    let path = base_dir.join(p);
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    AttackMode::TargetMatrix(
                        parse_target_matrix(&text).with_context(|| format!("in {}", path.display()))?,
                    )
                }
                None => AttackMode::TargetMatrix(manlab::models::TransitionMatrix::anti_diagonal(classes)),
            },
        };
        let [a, b] = self.dual_weights.ok_or_else(|| missing("dual_weights"))?;
        let cfg = AttackConfig {
            norm: self.norm.ok_or_else(|| missing("norm"))?,
            epsilon: self.epsilon.ok_or_else(|| missing("epsilon"))?,
            steps: self.steps.ok_or_else(|| missing("steps"))?,
            step_size: self.step_size.ok_or_else(|| missing("step_size"))?,
            random_start: self.random_start.ok_or_else(|| missing("random_start"))?,
            mode,
            objective: self.objective.ok_or_else(|| missing("objective"))?,
            dual_weights: (a, b),
        };
        cfg.validate(classes).context("attack")?;
        Ok(Some(cfg))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("invalid config: {}", e.message().trim_end()).context(format_span(text, e.span())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn regime(&self) -> Regime {
        self.train.regime.unwrap_or(Regime::Joint)
    }

    /// Expands every default. `seed_override` replaces the seed.
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<RunConfig> {
        let d = self.dataset.as_ref().ok_or_else(|| anyhow!("missing required block \"dataset\""))?;
        let dataset = match d.kind {
            DatasetKind::Blobs => DatasetConfig {
                kind: d.kind,
                classes: Some(d.classes.unwrap_or(4)),
                dim: Some(d.dim.unwrap_or(2)),
                per_class: Some(d.per_class.unwrap_or(500)),
                spread: Some(d.spread.unwrap_or(0.03)),
                noise: None,
                path: None,
                label_column: None,
                test_fraction: None,
            },
            DatasetKind::Rings => DatasetConfig {
                kind: d.kind,
                classes: Some(2),
                dim: Some(2),
                per_class: Some(d.per_class.unwrap_or(500)),
                spread: None,
                noise: Some(d.noise.unwrap_or(0.02)),
                path: None,
                label_column: None,
                test_fraction: None,
            },
            DatasetKind::Table => DatasetConfig {
                kind: d.kind,
                classes: None,
                dim: None,
                per_class: None,
                spread: None,
                noise: None,
                path: Some(d.path.clone().ok_or_else(|| anyhow!("dataset.path is required for kind \"table\""))?),
                label_column: Some(d.label_column.clone().unwrap_or_else(|| "label".into())),
                test_fraction: Some(d.test_fraction.unwrap_or(0.2)),
            },
        };
        let regime = self.regime();
        let epochs = self.train.epochs.unwrap_or(60);
        let attack = self.attack.resolved(&AttackSpec::default(), 10, 0.25, default_objective(regime));
        let train = TrainSection {
            regime: Some(regime),
            epochs: Some(epochs),
            batch_size: Some(self.train.batch_size.unwrap_or(128)),
            lr: Some(self.train.lr.unwrap_or(0.1)),
            lr_milestones: Some(self.train.lr_milestones.clone().unwrap_or_else(|| default_milestones(epochs))),
            lr_decay: Some(self.train.lr_decay.unwrap_or(0.1)),
            momentum: Some(self.train.momentum.unwrap_or(0.9)),
            weight_decay: Some(self.train.weight_decay.unwrap_or(2e-4)),
            gradient_routing: Some(self.train.gradient_routing.unwrap_or_default()),
            keep_failed_attacks: Some(self.train.keep_failed_attacks.unwrap_or(true)),
            target_checkpoint: self.train.target_checkpoint.clone(),
            pretrain_epochs: Some(self.train.pretrain_epochs.unwrap_or(epochs)),
        };
        let eval_obj = default_eval_objective(regime);
        let eval_specs = match &self.eval {
            Some(e) => e.attacks.clone(),
            None => vec![AttackSpec {
                steps: Some(40),
                ..AttackSpec::default()
            }],
        };
        let eval = EvalSection {
            attacks: eval_specs
                .iter()
                .map(|a| {
                    let mut r = a.resolved(&self.attack, 40, PGD40_STEP_RATIO, eval_obj);
                    r.name = Some(r.display_name());
                    r
                })
                .collect(),
        };
        let detect_spec = self.detect.attack.clone().unwrap_or_default();
        let mut detect_attack = detect_spec.resolved(&self.attack, 40, PGD40_STEP_RATIO, eval_obj);
        detect_attack.name = Some(detect_attack.display_name());
        let m = &self.masking;
        let masking = MaskingSection {
            norm: Some(m.norm.or(attack.norm).unwrap_or(Norm::Linf)),
            base_epsilon: Some(m.base_epsilon.or(attack.epsilon).unwrap_or(DEFAULT_EPSILON)),
            objective: Some(m.objective.unwrap_or(eval_obj)),
            unbounded_epsilon: Some(m.unbounded_epsilon.unwrap_or(1.0)),
            random_samples: Some(m.random_samples.unwrap_or(100_000)),
            sample_points: Some(m.sample_points.unwrap_or(20)),
            surrogate_checkpoint: m.surrogate_checkpoint.clone(),
            surrogate_epochs: Some(m.surrogate_epochs.unwrap_or(epochs)),
        };
        Ok(RunConfig {
            seed: Some(seed_override.or(self.seed).unwrap_or(DEFAULT_SEED)),
            dataset: Some(dataset),
            model: ModelConfig {
                target_hidden: Some(self.model.target_hidden.clone().unwrap_or_else(|| vec![64, 64])),
                transition_hidden: Some(self.model.transition_hidden.clone().unwrap_or_else(|| vec![64, 64])),
            },
            attack,
            train,
            eval: Some(eval),
            detect: DetectSection {
                attack: Some(detect_attack),
            },
            transfer: TransferSection {
                target_checkpoint: self.transfer.target_checkpoint.clone(),
                fine_tune_epochs: Some(self.transfer.fine_tune_epochs.unwrap_or(0)),
            },
            masking,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 (hex) of the TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn format_span(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!("at line {line}")
        }
        None => "in config".into(),
    }
}

/// A resolved config with paths interpreted relative to `base_dir`.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl Resolved {
    pub fn new(raw: &RunConfig, seed_override: Option<u64>, base_dir: &Path) -> Result<Self> {
        Ok(Resolved {
            config: raw.resolve(seed_override)?,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed()
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    fn dataset(&self) -> &DatasetConfig {
        self.config.dataset.as_ref().expect("resolved")
    }

    pub fn load_data(&self) -> Result<DataSplits> {
        let d = self.dataset();
        let seed = self.seed();
        let splits = match d.kind {
            DatasetKind::Blobs => gen_blobs(
                d.classes.expect("resolved"),
                d.dim.expect("resolved"),
                d.per_class.expect("resolved"),
                d.spread.expect("resolved"),
                seed,
            )?,
            DatasetKind::Rings => gen_rings(2, d.per_class.expect("resolved"), d.noise.expect("resolved"), seed)?,
            DatasetKind::Table => {
                let path = self.path(d.path.as_ref().expect("resolved"));
                let table = load_table(&path, d.label_column.as_deref().expect("resolved"))?;
                for row in &table.rejected_rows {
                    eprintln!("warning: {}: dropped line {row} (non-finite value)", path.display());
                }
                let mut rng = seed::rng(seed, Stream::Data);
                table.dataset.stratified_split(d.test_fraction.expect("resolved"), &mut rng)?
            }
        };
        Ok(splits)
    }

    pub fn architecture(&self, data: &DataSplits) -> Architecture {
        Architecture {
            input_width: data.dim(),
            classes: data.classes(),
            target_hidden: self.config.model.target_hidden.clone().expect("resolved"),
            transition_hidden: self.config.model.transition_hidden.clone().expect("resolved"),
        }
    }

    pub fn train_config(&self, classes: usize) -> Result<TrainConfig> {
        let t = &self.config.train;
        let attack = self
            .config
            .attack
            .to_attack(classes, &self.base_dir)?
            .ok_or_else(|| anyhow!("the training attack cannot be disabled"))?;
        let cfg = TrainConfig {
            regime: t.regime.expect("resolved"),
            epochs: t.epochs.expect("resolved"),
            batch_size: t.batch_size.expect("resolved"),
            lr: t.lr.expect("resolved"),
            lr_milestones: t.lr_milestones.clone().expect("resolved"),
            lr_decay: t.lr_decay.expect("resolved"),
            momentum: t.momentum.expect("resolved"),
            weight_decay: t.weight_decay.expect("resolved"),
            attack,
            routing: t.gradient_routing.expect("resolved"),
            keep_failed_attacks: t.keep_failed_attacks.expect("resolved"),
            seed: self.seed(),
        };
        cfg.validate(classes).context("train")?;
        Ok(cfg)
    }

    /// Evaluation rows, with the natural row first unless the list
    /// already has one.
    pub fn eval_attacks(&self, classes: usize) -> Result<Vec<NamedAttack>> {
        let specs = &self.config.eval.as_ref().expect("resolved").attacks;
        let mut out = Vec::with_capacity(specs.len() + 1);
        if !specs.iter().any(|s| s.enabled == Some(false)) {
            out.push(NamedAttack::none());
        }
        for (i, s) in specs.iter().enumerate() {
            out.push(NamedAttack {
                name: s.display_name(),
                attack: s.to_attack(classes, &self.base_dir).with_context(|| format!("eval.attacks[{i}]"))?,
            });
        }
        Ok(out)
    }

    pub fn detect_attack(&self, classes: usize) -> Result<AttackConfig> {
        let spec = self.config.detect.attack.as_ref().expect("resolved");
        spec.to_attack(classes, &self.base_dir)
            .context("detect.attack")?
            .ok_or_else(|| anyhow!("detect.attack cannot be disabled"))
    }

    pub fn masking_config(&self) -> MaskingConfig {
        let m = &self.config.masking;
        MaskingConfig {
            norm: m.norm.expect("resolved"),
            base_epsilon: m.base_epsilon.expect("resolved"),
            objective: m.objective,
            unbounded_epsilon: m.unbounded_epsilon.expect("resolved"),
            random_samples: m.random_samples.expect("resolved"),
            sample_points: m.sample_points.expect("resolved"),
            ..MaskingConfig::default()
        }
    }
}

/// Rejects configs that cannot run before any work starts.
pub fn check_regime_inputs(cfg: &RunConfig) -> Result<()> {
    let t = &cfg.train;
    if t.target_checkpoint.is_some() && !matches!(t.regime, Some(Regime::FrozenTarget | Regime::ManMinus)) {
        bail!("train.target_checkpoint only applies to the frozen_target and man_minus regimes");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_dataset_names_block() {
        let cfg = RunConfig::parse("seed = 3\n").unwrap();
        let err = cfg.resolve(None).unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = RunConfig::parse("[dataset]\nkind = \"blobs\"\nsprad = 0.1\n").unwrap_err();
        assert!(format!("{err:#}").contains("sprad"), "{err:#}");
    }

    #[test]
    fn resolution_is_a_fixed_point() {
        let raw = RunConfig::parse("[dataset]\nkind = \"blobs\"\n[train]\nepochs = 8\n").unwrap();
        let r = raw.resolve(Some(5)).unwrap();
        assert_eq!(r.seed, Some(5));
        assert_eq!(r.train.lr_milestones, Some(vec![6, 7]));
        let again = RunConfig::parse(&r.to_toml().unwrap()).unwrap().resolve(None).unwrap();
        assert_eq!(again, r);
        assert_eq!(again.hash().unwrap(), r.hash().unwrap());
    }

    #[test]
    fn step_defaults_follow_the_block() {
        let raw = RunConfig::parse(
            "[dataset]\nkind = \"blobs\"\n[attack]\nepsilon = 0.2\n[[eval.attacks]]\nsteps = 1\n[[eval.attacks]]\nobjective = \"dual\"\n",
        )
        .unwrap();
        let r = raw.resolve(None).unwrap();
        assert_eq!(r.attack.step_size, Some(0.05));
        let ev = &r.eval.as_ref().unwrap().attacks;
        assert_eq!(ev[0].step_size, Some(0.2));
        assert_eq!(ev[0].random_start, Some(false));
        assert_eq!(ev[0].name.as_deref(), Some("FGSM combined"));
        assert_eq!(ev[1].steps, Some(40));
        assert_eq!(ev[1].name.as_deref(), Some("PGD-40 dual"));
    }
}
