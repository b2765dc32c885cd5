//! Adversarial training of the target classifier and the transition
//! network, plus the baselines and accuracy evaluation.
//!
//! Each batch of `m` natural pairs is extended with `m` adversarial
//! instances crafted against the current parameters, giving a mixture
//! batch of triplets `(x′, y′, y)`: naturals first as `(x, y, y)`, then
//! adversarials as `(x̃, ỹ, y)` where `ỹ` is the target model's label for
//! `x̃`. Two losses are computed on one forward pass:
//!
//! * `loss_T  = mean CE(T̂(x′)[y′, :], y)` trains the transition network;
//! * `loss_tar = mean CE(T̂(x′)ᵀ softmax(h(x′)), y)` trains the target.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{assign_adversarial_label, pgd, AttackConfig};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{natural_posterior, select_mixture_rows, Defense, TargetClassifier, TransitionNetwork};
use crate::seed::{self, Stream};
use crate::tensor::{argmax, cross_entropy, Graph, Tensor};

/// Rows per attack call during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Natural,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTriplet {
    pub instance: Vec<f64>,
    pub mixture_label: usize,
    pub natural_label: usize,
    pub provenance: Provenance,
}

/// A mixture batch stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBatch {
    pub instances: Tensor,
    pub mixture_labels: Vec<usize>,
    pub natural_labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl MixtureBatch {
    pub fn len(&self) -> usize {
        self.natural_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.natural_labels.is_empty()
    }

    /// All-natural batch with `y′ = y`.
    pub fn natural(x: Tensor, y: Vec<usize>) -> Self {
        let n = y.len();
        MixtureBatch {
            instances: x,
            mixture_labels: y.clone(),
            natural_labels: y,
            provenance: vec![Provenance::Natural; n],
        }
    }

    pub fn from_triplets(triplets: &[MixtureTriplet]) -> Result<Self> {
        let rows: Vec<&[f64]> = triplets.iter().map(|t| t.instance.as_slice()).collect();
        for t in triplets {
            if t.provenance == Provenance::Natural && t.mixture_label != t.natural_label {
                return Err(Error::Input("a natural triplet must have y′ = y".into()));
            }
        }
        Ok(MixtureBatch {
            instances: Tensor::from_rows(&rows)?,
            mixture_labels: triplets.iter().map(|t| t.mixture_label).collect(),
            natural_labels: triplets.iter().map(|t| t.natural_label).collect(),
            provenance: triplets.iter().map(|t| t.provenance).collect(),
        })
    }

    pub fn triplets(&self) -> Vec<MixtureTriplet> {
        (0..self.len())
            .map(|i| MixtureTriplet {
                instance: self.instances.row(i).to_vec(),
                mixture_label: self.mixture_labels[i],
                natural_label: self.natural_labels[i],
                provenance: self.provenance[i],
            })
            .collect()
    }
}

/// Crafts adversarial copies of `(x, y)` and returns the mixture batch.
///
/// With `keep_failed` off, adversarial instances that the target model
/// still labels correctly are left out.
pub fn build_mixture_batch(
    x: &Tensor,
    y: &[usize],
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
    attack: &AttackConfig,
    keep_failed: bool,
    rng: &mut impl Rng,
) -> Result<MixtureBatch> {
    let x_adv = pgd(x, y, attack, target, trans, rng)?;
    let y_adv = assign_adversarial_label(&x_adv, target)?;
    let keep: Vec<usize> = (0..y.len()).filter(|&i| keep_failed || y_adv[i] != y[i]).collect();
    let adv_rows = x_adv.select_rows(&keep)?;
    let mut mixture_labels = y.to_vec();
    mixture_labels.extend(keep.iter().map(|&i| y_adv[i]));
    let mut natural_labels = y.to_vec();
    natural_labels.extend(keep.iter().map(|&i| y[i]));
    let mut provenance = vec![Provenance::Natural; y.len()];
    provenance.extend(std::iter::repeat_n(Provenance::Adversarial, keep.len()));
    Ok(MixtureBatch {
        instances: Tensor::concat_rows(&[x, &adv_rows])?,
        mixture_labels,
        natural_labels,
        provenance,
    })
}

fn check_batch(batch: &MixtureBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty mixture batch".into()));
    }
    Ok(())
}

/// Transition-network loss on `batch`.
pub fn loss_transition(batch: &MixtureBatch, trans: &TransitionNetwork) -> Result<f64> {
    check_batch(batch)?;
    let g = Graph::new();
    let x = g.constant(batch.instances.clone());
    let t = trans.bind(&g, false).matrices(x)?;
    let rows = select_mixture_rows(t, &batch.mixture_labels)?;
    cross_entropy(rows, &Tensor::one_hot(&batch.natural_labels, trans.classes())?)?
        .value()
        .item()
}

/// Target-model loss on `batch`: CE of the composed natural posterior.
pub fn loss_target(batch: &MixtureBatch, target: &TargetClassifier, trans: &TransitionNetwork) -> Result<f64> {
    check_batch(batch)?;
    Defense::new(target, Some(trans))?;
    let g = Graph::new();
    let x = g.constant(batch.instances.clone());
    let p = target.bind(&g, false).probabilities(x)?;
    let t = trans.bind(&g, false).matrices(x)?;
    cross_entropy(natural_posterior(p, t)?, &Tensor::one_hot(&batch.natural_labels, target.classes())?)?
        .value()
        .item()
}

/// Which losses reach the transition network's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientRouting {
    /// `loss_T` updates ω, `loss_tar` updates θ.
    #[default]
    Separate,
    /// ω also receives the gradient of `loss_tar`.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Both networks, adversarial mixture batches.
    Joint,
    /// Target only, plain CE over the adversarial mixture batch.
    AtBaseline,
    /// Transition network only; the target is held fixed.
    FrozenTarget,
    /// Transition network only, against a naturally trained fixed target.
    ManMinus,
    /// Target only, natural batches, no attack.
    Natural,
}

impl Regime {
    pub fn trains_target(self) -> bool {
        matches!(self, Regime::Joint | Regime::AtBaseline | Regime::Natural)
    }

    pub fn uses_transition(self) -> bool {
        matches!(self, Regime::Joint | Regime::FrozenTarget | Regime::ManMinus)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub attack: AttackConfig,
    pub routing: GradientRouting,
    pub keep_failed_attacks: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// lr 0.1 divided by 10 at 75% and 90% of the epochs, momentum 0.9,
    /// weight decay 2e-4, batches of 128.
    pub fn new(regime: Regime, epochs: usize, attack: AttackConfig, seed: u64) -> Self {
        TrainConfig {
            regime,
            epochs,
            batch_size: 128,
            lr: 0.1,
            lr_milestones: default_milestones(epochs),
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            attack,
            routing: GradientRouting::Separate,
            keep_failed_attacks: true,
            seed,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("learning rate and decay must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be finite and >= 0".into()));
        }
        if self.regime != Regime::Natural {
            self.attack.validate(classes)?;
            if !self.regime.uses_transition() && self.attack.objective.needs_transition() {
                return Err(Error::Config(format!(
                    "regime {:?} has no transition network; use the target_only objective",
                    self.regime
                )));
            }
        }
        Ok(())
    }
}

/// `floor(0.75 E)` and `floor(0.9 E)`.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    vec![epochs * 3 / 4, epochs * 9 / 10]
}

/// One row of the training record. Accuracies are measured on the
/// training mixture batches, before each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_t: Option<f64>,
    pub loss_tar: f64,
    pub nat_acc: f64,
    pub adv_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub target: TargetClassifier,
    pub transition: Option<TransitionNetwork>,
    pub record: Vec<EpochMetrics>,
}

/// Losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_t: Option<f64>,
    pub loss_tar: f64,
}

/// Computes both losses on one forward pass and adds their gradients into
/// the models' gradient slots, as the regime and routing direct. No
/// parameters change. Returns the losses and the composed posterior.
pub fn accumulate_gradients(
    batch: &MixtureBatch,
    target: &mut TargetClassifier,
    trans: Option<&mut TransitionNetwork>,
    regime: Regime,
    routing: GradientRouting,
) -> Result<(StepLosses, Tensor)> {
    check_batch(batch)?;
    let classes = target.classes();
    let y_hot = Tensor::one_hot(&batch.natural_labels, classes)?;
    let g = Graph::new();
    let x = g.constant(batch.instances.clone());
    let train_target = regime.trains_target();
    let bt = target.bind(&g, train_target);
    let p = bt.probabilities(x)?;

    let Some(trans) = trans.filter(|_| regime.uses_transition()) else {
        if regime.uses_transition() {
            return Err(Error::Config(format!("regime {regime:?} needs a transition network")));
        }
        let loss = cross_entropy(p, &y_hot)?;
        let grads = g.backward(loss)?;
        bt.accumulate_into(&grads, target)?;
        let losses = StepLosses {
            loss_t: None,
            loss_tar: loss.value().item()?,
        };
        return Ok((losses, (*p.value()).clone()));
    };
    Defense::new(target, Some(trans))?;

    let btr = trans.bind(&g, true);
    let t = btr.matrices(x)?;
    let loss_t = cross_entropy(select_mixture_rows(t, &batch.mixture_labels)?, &y_hot)?;
    let posterior = natural_posterior(p, t)?;
    let loss_tar = cross_entropy(posterior, &y_hot)?;

    let grads_t = g.backward(loss_t)?;
    btr.accumulate_into(&grads_t, trans)?;
    let grads_tar = g.backward(loss_tar)?;
    if train_target {
        bt.accumulate_into(&grads_tar, target)?;
    }
    if routing == GradientRouting::Joint {
        btr.accumulate_into(&grads_tar, trans)?;
    }
    let losses = StepLosses {
        loss_t: Some(loss_t.value().item()?),
        loss_tar: loss_tar.value().item()?,
    };
    Ok((losses, (*posterior.value()).clone()))
}

/// Finite parameters can still overflow a forward pass; that counts as
/// divergence at the batch where it shows up.
fn diverged_if_non_finite(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            epoch,
            batch,
            detail: format!("non-finite values in {what}"),
        },
        e => e,
    }
}

fn step(
    params: &mut crate::tensor::ParameterSet,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    params.apply_weight_decay(cfg.weight_decay)?;
    params.sgd_step(lr, cfg.momentum)
}

/// Trains for `cfg.epochs` epochs over `data`, starting from the given
/// models. Regimes that train no transition network take `None`.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    target: TargetClassifier,
    transition: Option<TransitionNetwork>,
) -> Result<TrainOutcome> {
    train_observed(cfg, data, target, transition, &mut |_| Ok(()))
}

/// [`train`], calling `observer` after every epoch. An observer error
/// stops training.
pub fn train_observed(
    cfg: &TrainConfig,
    data: &Dataset,
    target: TargetClassifier,
    transition: Option<TransitionNetwork>,
    observer: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut target = target;
    let mut transition = transition;
    cfg.validate(target.classes())?;
    if data.classes() > target.classes() || data.dim() != target.input_width() {
        return Err(Error::Config(format!(
            "data has {} classes and {} features; target expects {} and {}",
            data.classes(),
            data.dim(),
            target.classes(),
            target.input_width()
        )));
    }
    match (cfg.regime.uses_transition(), &transition) {
        (true, None) => {
            return Err(Error::Config(format!("regime {:?} needs a transition network", cfg.regime)));
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "regime {:?} trains no transition network",
                cfg.regime
            )));
        }
        _ => {}
    }
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    Defense::new(&target, transition.as_ref())?;

    let mut shuffle_rng = seed::rng(cfg.seed, Stream::Shuffle);
    let mut attack_rng = seed::rng(cfg.seed, Stream::Attack);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut record = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum_t, mut sum_tar, mut batches) = (0.0, 0.0, 0usize);
        let (mut nat_ok, mut nat_n, mut adv_ok, mut adv_n) = (0usize, 0usize, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(idx)?;
            let batch = if cfg.regime == Regime::Natural {
                MixtureBatch::natural(x, y)
            } else {
                build_mixture_batch(
                    &x,
                    &y,
                    &target,
                    transition.as_ref(),
                    &cfg.attack,
                    cfg.keep_failed_attacks,
                    &mut attack_rng,
                )
                .map_err(|e| diverged_if_non_finite(e, epoch, b))?
            };
            let (losses, posterior) =
                accumulate_gradients(&batch, &mut target, transition.as_mut(), cfg.regime, cfg.routing)
                    .map_err(|e| diverged_if_non_finite(e, epoch, b))?;
            let finite = losses.loss_tar.is_finite() && losses.loss_t.is_none_or(f64::is_finite);
            if !finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("loss_T = {:?}, loss_tar = {}", losses.loss_t, losses.loss_tar),
                });
            }
            if cfg.regime.trains_target() {
                step(target.params_mut(), lr, cfg)?;
            } else {
                target.params_mut().zero_grads();
            }
            if let Some(t) = transition.as_mut() {
                step(t.params_mut(), lr, cfg)?;
            }
            let params_finite = target.params().iter().all(|(_, v)| v.is_finite())
                && transition.as_ref().is_none_or(|t| t.params().iter().all(|(_, v)| v.is_finite()));
            if !params_finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: "parameters became non-finite after the update".into(),
                });
            }
            sum_t += losses.loss_t.unwrap_or(0.0);
            sum_tar += losses.loss_tar;
            batches += 1;
            for i in 0..batch.len() {
                let ok = argmax(posterior.row(i)) == batch.natural_labels[i];
                match batch.provenance[i] {
                    Provenance::Natural => {
                        nat_n += 1;
                        nat_ok += ok as usize;
                    }
                    Provenance::Adversarial => {
                        adv_n += 1;
                        adv_ok += ok as usize;
                    }
                }
            }
        }
        let frac = |ok: usize, n: usize| if n == 0 { 0.0 } else { ok as f64 / n as f64 };
        let metrics = EpochMetrics {
            epoch,
            loss_t: cfg.regime.uses_transition().then_some(sum_t / batches as f64),
            loss_tar: sum_tar / batches as f64,
            nat_acc: frac(nat_ok, nat_n),
            adv_acc: (cfg.regime != Regime::Natural).then_some(frac(adv_ok, adv_n)),
        };
        observer(&metrics)?;
        record.push(metrics);
    }
    Ok(TrainOutcome {
        target,
        transition,
        record,
    })
}

/// Continues training only the transition network against attacks on a
/// fixed target `target_b`. `cfg.regime` is ignored.
pub fn fine_tune_transition(
    trans: TransitionNetwork,
    target_b: &TargetClassifier,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TransitionNetwork> {
    if trans.classes() != target_b.classes() {
        return Err(Error::Config(format!(
            "transition network has {} classes, target has {}",
            trans.classes(),
            target_b.classes()
        )));
    }
    if cfg.epochs == 0 {
        return Ok(trans);
    }
    let cfg = TrainConfig {
        regime: Regime::FrozenTarget,
        ..cfg.clone()
    };
    let out = train(&cfg, data, target_b.clone(), Some(trans))?;
    Ok(out.transition.expect("frozen-target regime keeps the transition network"))
}

/// Accuracy of the defended model and of its target alone on the same
/// (possibly perturbed) inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub defended: f64,
    pub target_only: f64,
}

/// Perturbs `data` with `attack` (if any) against the defended model, then
/// scores arg-max predictions against the natural labels.
pub fn evaluate(
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    rng: &mut impl Rng,
) -> Result<Accuracy> {
    let defense = Defense::new(target, trans)?;
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let (mut ok_def, mut ok_tar) = (0usize, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(idx)?;
        let x = match attack {
            Some(a) => pgd(&x, &y, a, target, trans, rng)?,
            None => x,
        };
        let pd = defense.predict(&x)?;
        let pt = target.predict(&x)?;
        ok_def += pd.iter().zip(&y).filter(|(a, b)| a == b).count();
        ok_tar += pt.iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        defended: ok_def as f64 / n,
        target_only: ok_tar as f64 / n,
    })
}

/// Defended accuracy, see [`evaluate`].
pub fn evaluate_accuracy(
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    rng: &mut impl Rng,
) -> Result<f64> {
    Ok(evaluate(target, trans, data, attack, rng)?.defended)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{Norm, Objective};
    use crate::models::{Architecture, Mlp};
    use crate::seed::rng;
    use crate::tensor::ParameterSet;

    fn arch(classes: usize) -> Architecture {
        Architecture {
            input_width: 2,
            classes,
            target_hidden: vec![8],
            transition_hidden: vec![8],
        }
    }

    fn models(classes: usize) -> (TargetClassifier, TransitionNetwork) {
        let a = arch(classes);
        (
            TargetClassifier::new(&a, 4, &mut rng(4, Stream::TargetInit)).unwrap(),
            TransitionNetwork::new(&a, 4, &mut rng(4, Stream::TransitionInit)).unwrap(),
        )
    }

    /// Single-layer transition net whose every matrix has the given rows
    /// (via biases equal to log-probabilities).
    fn constant_transition(rows: &[Vec<f64>]) -> TransitionNetwork {
        let c = rows.len();
        let bias: Vec<f64> = rows.iter().flatten().map(|v| v.ln()).collect();
        let mut p = ParameterSet::new();
        p.insert("layer0.weight", Tensor::zeros(&[2, c * c])).unwrap();
        p.insert("layer0.bias", Tensor::vector(bias)).unwrap();
        TransitionNetwork::from_mlp(Mlp::from_params(&[2, c * c], p, 0).unwrap()).unwrap()
    }

    #[test]
    fn zero_budget_mixture_duplicates_naturals() {
        let (t, g) = models(3);
        let x = Tensor::from_rows(&[[0.1, 0.2], [0.9, 0.4]]).unwrap();
        let y = [0, 2];
        let attack = AttackConfig::pgd10(Norm::Linf, 0.0, Objective::Combined);
        let b = build_mixture_batch(&x, &y, &t, Some(&g), &attack, true, &mut rng(0, Stream::Attack)).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.instances.select_rows(&[2, 3]).unwrap(), x);
        assert_eq!(&b.natural_labels, &[0, 2, 0, 2]);
        assert_eq!(&b.provenance[..2], &[Provenance::Natural; 2]);
        assert_eq!(&b.provenance[2..], &[Provenance::Adversarial; 2]);
        let trip = b.triplets();
        assert!(trip[..2].iter().all(|t| t.mixture_label == t.natural_label));
        assert_eq!(MixtureBatch::from_triplets(&trip).unwrap(), b);
    }

    #[test]
    fn half_row_gives_ln2() {
        let trans = constant_transition(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let batch = MixtureBatch {
            instances: Tensor::from_rows(&[[0.3, 0.3]]).unwrap(),
            mixture_labels: vec![1],
            natural_labels: vec![0],
            provenance: vec![Provenance::Adversarial],
        };
        let l = loss_transition(&batch, &trans).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn near_identity_transition_loss_is_small() {
        let e = 1e-9;
        let trans = constant_transition(&[vec![1.0 - 2.0 * e, e, e], vec![e, 1.0 - 2.0 * e, e], vec![e, e, 1.0 - 2.0 * e]]);
        let batch = MixtureBatch::natural(Tensor::from_rows(&[[0.1, 0.1], [0.5, 0.2]]).unwrap(), vec![0, 2]);
        let l = loss_transition(&batch, &trans).unwrap();
        assert!((l - -(1.0 - 2.0 * e).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn identity_transition_reduces_target_loss_to_plain_ce() {
        let (t, _) = models(3);
        let e = 1e-300;
        let ident = constant_transition(&[vec![1.0, e, e], vec![e, 1.0, e], vec![e, e, 1.0]]);
        let x = Tensor::from_rows(&[[0.1, 0.1], [0.5, 0.2], [0.7, 0.9]]).unwrap();
        let y = vec![0, 2, 1];
        let batch = MixtureBatch::natural(x.clone(), y.clone());
        let with = loss_target(&batch, &t, &ident).unwrap();
        let p = t.probabilities(&x).unwrap();
        let plain: f64 = y.iter().enumerate().map(|(i, &c)| -(p.at2(i, c) + 1e-12).ln()).sum::<f64>() / 3.0;
        assert!((with - plain).abs() < 1e-12, "{with} vs {plain}");
    }

    #[test]
    fn transition_and_target_losses_use_different_labels() {
        // The target mispredicts y′, so the given-label loss and the
        // predicted-distribution loss must differ.
        let (t, g) = models(3);
        let x = Tensor::from_rows(&[[0.2, 0.8]]).unwrap();
        let y_pred = t.predict(&x).unwrap()[0];
        let batch = MixtureBatch {
            instances: x,
            mixture_labels: vec![(y_pred + 1) % 3],
            natural_labels: vec![y_pred],
            provenance: vec![Provenance::Adversarial],
        };
        let lt = loss_transition(&batch, &g).unwrap();
        let ltar = loss_target(&batch, &t, &g).unwrap();
        assert!((lt - ltar).abs() > 1e-6);
    }

    #[test]
    fn schedule_drops_at_milestones() {
        let cfg = TrainConfig::new(Regime::Joint, 60, AttackConfig::pgd10(Norm::Linf, 0.1, Objective::Combined), 0);
        assert_eq!(cfg.lr_milestones, vec![45, 54]);
        assert_eq!(cfg.lr_at(44), 0.1);
        assert!((cfg.lr_at(45) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(59) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn regime_requirements_are_checked() {
        let (t, g) = models(2);
        let data = crate::datasets::gen_blobs(2, 2, 10, 0.05, 0).unwrap().train;
        let attack = AttackConfig::pgd10(Norm::Linf, 0.1, Objective::Combined);
        let cfg = TrainConfig::new(Regime::Joint, 1, attack.clone(), 0);
        assert!(matches!(train(&cfg, &data, t.clone(), None), Err(Error::Config(_))));
        let cfg = TrainConfig::new(Regime::AtBaseline, 1, attack, 0);
        assert!(matches!(train(&cfg, &data, t.clone(), Some(g)), Err(Error::Config(_))));
        assert!(matches!(train(&cfg, &data, t, None), Err(Error::Config(_))));
    }

    #[test]
    fn constant_model_scores_one_over_c() {
        let mut p = ParameterSet::new();
        p.insert("layer0.weight", Tensor::zeros(&[2, 4])).unwrap();
        p.insert("layer0.bias", Tensor::zeros(&[4])).unwrap();
        let t = TargetClassifier::from_mlp(Mlp::from_params(&[2, 4], p, 0).unwrap()).unwrap();
        let data = crate::datasets::gen_blobs(4, 2, 10, 0.05, 2).unwrap().train;
        let acc = evaluate_accuracy(&t, None, &data, None, &mut rng(0, Stream::Evaluation)).unwrap();
        assert!((acc - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_epoch_fine_tune_is_identity() {
        let (t, g) = models(3);
        let data = crate::datasets::gen_blobs(3, 2, 10, 0.05, 0).unwrap().train;
        let cfg = TrainConfig::new(Regime::FrozenTarget, 0, AttackConfig::pgd10(Norm::Linf, 0.1, Objective::Combined), 0);
        let out = fine_tune_transition(g.clone(), &t, &data, &cfg).unwrap();
        assert_eq!(out, g);
        let (t2, _) = models(2);
        assert!(matches!(fine_tune_transition(g, &t2, &data, &cfg), Err(Error::Config(_))));
    }
}
