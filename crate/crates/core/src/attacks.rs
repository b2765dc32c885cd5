//! Gradient-based adversarial examples: FGSM and projected gradient ascent
//! under L∞ or L2 budgets, driven by one of four objectives.
//!
//! Objectives are summed over the batch, so each instance's gradient is
//! independent of the others. With `ỹ = softmax(h(x̃))` and `T̂ = g(x̃)`:
//!
//! | objective     | untargeted              | targeted (label `y*`)           |
//! |---------------|-------------------------|---------------------------------|
//! | `combined`    | `CE(ỹT̂, y)`             | `-CE(ỹT̂, y*)`                   |
//! | `matrix`      | `-MSE(T̂, T*)`           | same                            |
//! | `dual`        | `a·CE(ỹT̂, y) + b·CE(ỹ, y)` | `-a·CE(ỹT̂, y*) + b·CE(ỹ, y)` |
//! | `target_only` | `CE(ỹ, y)`              | `-CE(ỹ, y*)`                    |

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{natural_posterior, Defense, TargetClassifier, TransitionMatrix, TransitionNetwork};
use crate::tensor::{cross_entropy_with, mse_with, Graph, Reduction, Tensor, Var};

/// Budget slack allowed by [`check_budget`].
pub const BUDGET_TOL: f64 = 1e-9;

/// Step-to-budget ratio of the 40-step preset (0.007 at ε = 8/255).
pub const PGD40_STEP_RATIO: f64 = 0.007 / (8.0 / 255.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Combined,
    Matrix,
    Dual,
    TargetOnly,
}

impl Objective {
    pub fn needs_transition(self) -> bool {
        !matches!(self, Objective::TargetOnly)
    }
}

/// How the label `y*` of a targeted attack is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetLabel {
    /// Lowest-probability class other than the true label.
    LeastLikely,
    /// A fixed class; instances whose true label is this class fall back
    /// to [`TargetLabel::LeastLikely`].
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackMode {
    Nontarget,
    Targeted(TargetLabel),
    /// Target matrix `T*` for the matrix objective.
    TargetMatrix(TransitionMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub mode: AttackMode,
    pub objective: Objective,
    /// Weights of the two dual-objective terms.
    pub dual_weights: (f64, f64),
}

impl AttackConfig {
    /// 40 steps of size `0.2231·ε`, random start.
    pub fn pgd40(norm: Norm, epsilon: f64, objective: Objective) -> Self {
        AttackConfig {
            norm,
            epsilon,
            steps: 40,
            step_size: PGD40_STEP_RATIO * epsilon,
            random_start: true,
            mode: AttackMode::Nontarget,
            objective,
            dual_weights: (1.0, 1.0),
        }
    }

    /// 10 steps of size `ε/4`, random start. The inner attack of training.
    pub fn pgd10(norm: Norm, epsilon: f64, objective: Objective) -> Self {
        AttackConfig {
            steps: 10,
            step_size: epsilon / 4.0,
            ..Self::pgd40(norm, epsilon, objective)
        }
    }

    /// One step of size `ε`, no random start.
    pub fn fgsm(norm: Norm, epsilon: f64, objective: Objective) -> Self {
        AttackConfig {
            steps: 1,
            step_size: epsilon,
            random_start: false,
            ..Self::pgd40(norm, epsilon, objective)
        }
    }

    /// Same attack with budget `epsilon` and the step size scaled to keep
    /// its ratio to the budget.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let step_size = if self.epsilon > 0.0 {
            self.step_size * epsilon / self.epsilon
        } else {
            self.step_size
        };
        AttackConfig {
            epsilon,
            step_size,
            ..self.clone()
        }
    }

    pub fn with_objective(&self, objective: Objective) -> Self {
        AttackConfig {
            objective,
            ..self.clone()
        }
    }

    /// Checks the numeric fields and the mode against a `classes`-way model.
    ///
    /// A zero budget is accepted and yields the unperturbed input.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        if !(self.step_size.is_finite() && (self.step_size > 0.0 || self.epsilon == 0.0 && self.step_size == 0.0)) {
            return Err(Error::Config(format!("step size {} must be finite and > 0", self.step_size)));
        }
        let (a, b) = self.dual_weights;
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::Config("dual weights must be finite".into()));
        }
        match &self.mode {
            AttackMode::Targeted(TargetLabel::Fixed(k)) if *k >= classes => Err(Error::Config(format!(
                "target label {k} out of range for {classes} classes"
            ))),
            AttackMode::TargetMatrix(m) if m.classes() != classes => Err(Error::Config(format!(
                "target matrix is {0}x{0}, model has {classes} classes",
                m.classes()
            ))),
            AttackMode::TargetMatrix(_) if self.objective != Objective::Matrix => Err(Error::Config(
                "a target matrix only applies to the matrix objective".into(),
            )),
            _ => Ok(()),
        }
    }

    fn targeted(&self) -> Option<TargetLabel> {
        match self.mode {
            AttackMode::Targeted(t) => Some(t),
            _ => None,
        }
    }

    fn target_matrix(&self, classes: usize) -> TransitionMatrix {
        match &self.mode {
            AttackMode::TargetMatrix(m) => m.clone(),
            _ => TransitionMatrix::anti_diagonal(classes),
        }
    }
}

/// Parses a `C×C` target matrix from whitespace-separated rows, one row
/// per line. Blank lines and lines starting with `#` are skipped.
pub fn parse_target_matrix(text: &str) -> Result<TransitionMatrix> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    location: format!("line {}", i + 1),
                    message: format!("not a number: {t:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            location: "target matrix".into(),
            message: "no rows".into(),
        });
    }
    if let Some(r) = rows.iter().find(|r| r.len() != rows.len()) {
        return Err(Error::Parse {
            location: "target matrix".into(),
            message: format!("{} rows but a row has {} entries", rows.len(), r.len()),
        });
    }
    TransitionMatrix::from_rows(&rows)
}

fn check_models(target: &TargetClassifier, trans: Option<&TransitionNetwork>, cfg: &AttackConfig) -> Result<()> {
    Defense::new(target, trans)?;
    if cfg.objective.needs_transition() && trans.is_none() {
        return Err(Error::Config(format!(
            "the {:?} objective needs a transition network",
            cfg.objective
        )));
    }
    cfg.validate(target.classes())
}

fn check_batch(x: &Tensor, y: &[usize], target: &TargetClassifier) -> Result<()> {
    if x.rank() != 2 || x.row_len() != target.input_width() || x.rows() != y.len() {
        return Err(Error::dim("attack batch", x.shape(), &[y.len(), target.input_width()]));
    }
    Ok(())
}

/// Least-likely class per row of `posterior`, skipping the true label.
pub fn least_likely(posterior: &Tensor, y: &[usize]) -> Vec<usize> {
    (0..y.len())
        .map(|s| {
            let row = posterior.row(s);
            let mut best = usize::MAX;
            for (j, &p) in row.iter().enumerate() {
                if j != y[s] && (best == usize::MAX || p < row[best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Target labels `y*` for a targeted attack, from the defended model's
/// posterior at the clean inputs.
pub fn target_labels(
    x: &Tensor,
    y: &[usize],
    choice: TargetLabel,
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
) -> Result<Vec<usize>> {
    let posterior = Defense::new(target, trans)?.posterior(x)?;
    let ll = least_likely(&posterior, y);
    Ok(match choice {
        TargetLabel::LeastLikely => ll,
        TargetLabel::Fixed(k) => y.iter().zip(ll).map(|(&yi, l)| if yi == k { l } else { k }).collect(),
    })
}

fn objective_var<'g>(
    g: &'g Graph,
    x: Var<'g>,
    y: &[usize],
    y_star: Option<&[usize]>,
    cfg: &AttackConfig,
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
) -> Result<Var<'g>> {
    let classes = target.classes();
    let p = target.bind(g, false).probabilities(x)?;
    let y_hot = Tensor::one_hot(y, classes)?;
    let star_hot = y_star.map(|s| Tensor::one_hot(s, classes)).transpose()?;
    let ce = |q: Var<'g>, hot: &Tensor| cross_entropy_with(q, hot, Reduction::Sum);
    // Ascent term: CE against y, or -CE against y* when targeted.
    let ascent = |q: Var<'g>| -> Result<Var<'g>> {
        match &star_hot {
            Some(s) => Ok(ce(q, s)?.neg()),
            None => ce(q, &y_hot),
        }
    };
    let matrices = || -> Result<Var<'g>> {
        let t = trans.ok_or_else(|| Error::Config("objective needs a transition network".into()))?;
        t.bind(g, false).matrices(x)
    };
    match cfg.objective {
        Objective::TargetOnly => ascent(p),
        Objective::Combined => ascent(natural_posterior(p, matrices()?)?),
        Objective::Dual => {
            let (a, b) = cfg.dual_weights;
            let first = ascent(natural_posterior(p, matrices()?)?)?.scale(a);
            first.add(ce(p, &y_hot)?.scale(b))
        }
        Objective::Matrix => {
            let t = matrices()?;
            let star = cfg.target_matrix(classes);
            let n = y.len();
            let mut tiled = Vec::with_capacity(n * classes * classes);
            for _ in 0..n {
                tiled.extend_from_slice(star.entries().data());
            }
            let star = Tensor::new(vec![n, classes, classes], tiled)?;
            Ok(mse_with(t, &star, Reduction::Sum)?.neg())
        }
    }
}

/// The attack objective at `x` and its gradient with respect to `x`.
///
/// `y_star` supplies the targeted labels; it is ignored when the mode is
/// not targeted.
pub fn loss_and_gradient(
    x: &Tensor,
    y: &[usize],
    y_star: Option<&[usize]>,
    cfg: &AttackConfig,
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
) -> Result<(f64, Tensor)> {
    check_models(target, trans, cfg)?;
    check_batch(x, y, target)?;
    let y_star = if cfg.targeted().is_some() {
        Some(y_star.ok_or_else(|| Error::Usage("targeted attack needs target labels".into()))?)
    } else {
        None
    };
    let g = Graph::new();
    let xv = g.variable(x.clone());
    let obj = objective_var(&g, xv, y, y_star, cfg, target, trans)?;
    let value = obj.value().item()?;
    let grads = g.backward(obj)?;
    Ok((value, grads.get_or_zeros(xv)))
}

/// Value of the attack objective at `x̃` (targeted labels chosen from the
/// model at `x̃`).
pub fn attack_loss(
    x_adv: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
) -> Result<f64> {
    let y_star = match cfg.targeted() {
        Some(choice) => Some(target_labels(x_adv, y, choice, target, trans)?),
        None => None,
    };
    let g = Graph::new();
    check_models(target, trans, cfg)?;
    check_batch(x_adv, y, target)?;
    let xv = g.constant(x_adv.clone());
    objective_var(&g, xv, y, y_star.as_deref(), cfg, target, trans)?.value().item()
}

fn project(x: &[f64], x_adv: &mut [f64], norm: Norm, epsilon: f64) {
    match norm {
        Norm::Linf => {
            for (a, &o) in x_adv.iter_mut().zip(x) {
                *a = a.clamp(o - epsilon, o + epsilon);
            }
        }
        Norm::L2 => {
            let len: f64 = x_adv.iter().zip(x).map(|(a, o)| (a - o).powi(2)).sum::<f64>().sqrt();
            if len > epsilon {
                let s = epsilon / len;
                for (a, &o) in x_adv.iter_mut().zip(x) {
                    *a = o + (*a - o) * s;
                }
            }
        }
    }
    for a in x_adv.iter_mut() {
        *a = a.clamp(0.0, 1.0);
    }
}

fn random_start(x: &Tensor, norm: Norm, epsilon: f64, rng: &mut impl Rng) -> Tensor {
    let mut out = x.clone();
    let d = x.row_len();
    for s in 0..x.rows() {
        let row = out.row_mut(s);
        match norm {
            Norm::Linf => {
                for v in row.iter_mut() {
                    *v += rng.random_range(-epsilon..=epsilon);
                }
            }
            Norm::L2 => {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let radius = epsilon * rng.random::<f64>();
                if len > 0.0 {
                    for (v, u) in row.iter_mut().zip(&dir) {
                        *v += radius * u / len;
                    }
                }
            }
        }
        for v in row.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Projected gradient ascent on the configured objective.
///
/// Each step moves by `step_size` along `sign(grad)` (L∞) or
/// `grad / ‖grad‖₂` (L2; a zero gradient leaves that row in place), then
/// projects onto the budget ball around `x` and clips to `[0, 1]`.
pub fn pgd(
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    check_models(target, trans, cfg)?;
    check_batch(x, y, target)?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("attack input outside [0, 1]".into()));
    }
    if cfg.epsilon == 0.0 || x.rows() == 0 {
        return Ok(x.clone());
    }
    let y_star = match cfg.targeted() {
        Some(choice) => Some(target_labels(x, y, choice, target, trans)?),
        None => None,
    };
    let mut x_adv = if cfg.random_start {
        random_start(x, cfg.norm, cfg.epsilon, rng)
    } else {
        x.clone()
    };
    let d = x.row_len();
    for _ in 0..cfg.steps {
        let (_, grad) = loss_and_gradient(&x_adv, y, y_star.as_deref(), cfg, target, trans)?;
        for s in 0..x.rows() {
            let g = grad.row(s);
            let row = &mut x_adv.data_mut()[s * d..(s + 1) * d];
            match cfg.norm {
                Norm::Linf => {
                    for (v, &gv) in row.iter_mut().zip(g) {
                        let sign = if gv > 0.0 {
                            1.0
                        } else if gv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *v += cfg.step_size * sign;
                    }
                }
                Norm::L2 => {
                    let len = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if len > 0.0 {
                        for (v, &gv) in row.iter_mut().zip(g) {
                            *v += cfg.step_size * gv / len;
                        }
                    }
                }
            }
            project(x.row(s), row, cfg.norm, cfg.epsilon);
        }
    }
    Ok(x_adv)
}

/// One signed (or normalized) step of size `ε` with no random start.
pub fn fgsm(
    x: &Tensor,
    y: &[usize],
    norm: Norm,
    epsilon: f64,
    objective: Objective,
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
) -> Result<Tensor> {
    let cfg = AttackConfig::fgsm(norm, epsilon, objective);
    // No random start, so the generator is never drawn from.
    pgd(x, y, &cfg, target, trans, &mut crate::seed::rng(0, crate::seed::Stream::Attack))
}

/// Adversarial label `ỹ` of each row: the target model's arg-max class,
/// ties to the lowest index.
pub fn assign_adversarial_label(x_adv: &Tensor, target: &TargetClassifier) -> Result<Vec<usize>> {
    target.predict(x_adv)
}

/// Largest per-row distance `‖x̃ − x‖` under `norm`.
pub fn max_distance(x: &Tensor, x_adv: &Tensor, norm: Norm) -> f64 {
    let d = x.row_len().max(1);
    x.data()
        .chunks(d)
        .zip(x_adv.data().chunks(d))
        .map(|(a, b)| {
            let diffs = a.iter().zip(b).map(|(u, v)| (u - v).abs());
            match norm {
                Norm::Linf => diffs.fold(0.0, f64::max),
                Norm::L2 => diffs.map(|t| t * t).sum::<f64>().sqrt(),
            }
        })
        .fold(0.0, f64::max)
}

/// Checks that `x̃` is within the budget of `x` (plus [`BUDGET_TOL`]) and
/// inside `[0, 1]`.
pub fn check_budget(x: &Tensor, x_adv: &Tensor, norm: Norm, epsilon: f64) -> Result<()> {
    if x.shape() != x_adv.shape() {
        return Err(Error::dim("check_budget", x.shape(), x_adv.shape()));
    }
    let dist = max_distance(x, x_adv, norm);
    if dist > epsilon + BUDGET_TOL {
        return Err(Error::Input(format!("perturbation {dist} exceeds budget {epsilon}")));
    }
    if x_adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("perturbed input outside [0, 1]".into()));
    }
    Ok(())
}
