//! Central finite-difference checks of every differentiable operation and
//! of the full defended pipeline, in double precision.

use manlab::attacks::{loss_and_gradient, AttackConfig, AttackMode, Norm, Objective, TargetLabel};
use manlab::models::{Architecture, TargetClassifier, TransitionMatrix, TransitionNetwork};
use manlab::tensor::{cross_entropy, mse_with, Graph, Reduction, Tensor, Var};
use manlab::training::{accumulate_gradients, loss_target, loss_transition, GradientRouting, MixtureBatch, Regime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const CONFIGS: u64 = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Compares the tape gradient of a scalar function of several inputs
/// with central differences, input by input.
fn check<F>(label: &str, inputs: &[Tensor], f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out).unwrap();
    let eval = |ts: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vs: Vec<Var<'_>> = ts.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).value().item().unwrap()
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[i];
            assert!(
                rel_err(a, numeric) < REL_TOL,
                "{label}: input {k} entry {i}: analytic {a}, numeric {numeric}"
            );
        }
    }
}

/// Weighted sum with fixed random weights, so every output entry matters.
fn project<'g>(g: &'g Graph, v: Var<'g>, rng_seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = random_tensor(&mut rng, &v.shape(), -1.0, 1.0);
    v.mul(g.constant(w)).unwrap().sum()
}

#[test]
fn elementwise_and_linear_ops() {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, m) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        let a = random_tensor(&mut rng, &[n, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[k, m], -1.0, 1.0);
        check("matmul", &[a.clone(), b], |g, v| project(g, v[0].matmul(v[1]).unwrap(), seed));

        let bias = random_tensor(&mut rng, &[k], -1.0, 1.0);
        check("add_bias", &[a.clone(), bias], |g, v| project(g, v[0].add_bias(v[1]).unwrap(), seed));

        let c = random_tensor(&mut rng, &[n, k], -1.0, 1.0);
        check("add", &[a.clone(), c.clone()], |g, v| project(g, v[0].add(v[1]).unwrap(), seed));
        check("sub", &[a.clone(), c.clone()], |g, v| project(g, v[0].sub(v[1]).unwrap(), seed));
        check("mul", &[a.clone(), c], |g, v| project(g, v[0].mul(v[1]).unwrap(), seed));
        let s: f64 = rng.random_range(-2.0..2.0);
        check("scale", &[a.clone()], |g, v| project(g, v[0].scale(s), seed));
        check("neg", &[a.clone()], |g, v| project(g, v[0].neg(), seed));
        check("sum", &[a.clone()], |_, v| v[0].sum());
        check("mean", &[a.clone()], |_, v| v[0].mean());

        let r = away_from_zero(&mut rng, &[n, k]);
        check("relu", &[r], |g, v| project(g, v[0].relu(), seed));

        let pos = random_tensor(&mut rng, &[n, k], 0.05, 1.0);
        check("log_floor", &[pos], |g, v| project(g, v[0].log_floor(1e-12), seed));

        check("reshape", &[a.clone()], |g, v| project(g, v[0].reshape(&[n * k]).unwrap(), seed));

        let rows: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..n)).collect();
        check("select_rows", &[a], |g, v| project(g, v[0].select_rows(&rows).unwrap(), seed));
    }
}

#[test]
fn softmax_on_every_axis() {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = [rng.random_range(1..4), rng.random_range(2..5), rng.random_range(2..4)];
        let z = random_tensor(&mut rng, &shape, -3.0, 3.0);
        for axis in 0..3 {
            check("softmax", &[z.clone()], |g, v| project(g, v[0].softmax(axis).unwrap(), seed));
        }
        let z2 = random_tensor(&mut rng, &shape[..2], -3.0, 3.0);
        check("softmax_last", &[z2], |g, v| project(g, v[0].softmax_last().unwrap(), seed));
    }
}

#[test]
fn batched_matrix_ops() {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (n, c) = (rng.random_range(1..4), rng.random_range(2..5));
        let p = random_tensor(&mut rng, &[n, c], -1.0, 1.0);
        let t = random_tensor(&mut rng, &[n, c, c], -1.0, 1.0);
        check("vec_mat", &[p, t.clone()], |g, v| project(g, v[0].vec_mat(v[1]).unwrap(), seed));
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        check("pick_rows", &[t], |g, v| project(g, v[0].pick_rows(&idx).unwrap(), seed));
    }
}

#[test]
fn losses() {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (n, c) = (rng.random_range(1..5), rng.random_range(2..5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let y = Tensor::one_hot(&labels, c).unwrap();
        let p = random_tensor(&mut rng, &[n, c], 0.05, 1.0);
        check("cross_entropy", &[p.clone()], |_, v| cross_entropy(v[0], &y).unwrap());
        let target = random_tensor(&mut rng, &[n, c], 0.0, 1.0);
        for red in [Reduction::Mean, Reduction::Sum] {
            check("mse", &[p.clone()], |_, v| mse_with(v[0], &target, red).unwrap());
        }
    }
}

fn small_models(rng: &mut ChaCha8Rng, seed: u64) -> (TargetClassifier, TransitionNetwork, usize, usize) {
    let (d, c) = (rng.random_range(2..4), rng.random_range(2..5));
    let arch = Architecture {
        input_width: d,
        classes: c,
        target_hidden: vec![6],
        transition_hidden: vec![5],
    };
    let target = TargetClassifier::new(&arch, seed, rng).unwrap();
    let trans = TransitionNetwork::new(&arch, seed, rng).unwrap();
    (target, trans, d, c)
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    random_tensor(rng, &[n, d], 0.05, 0.95)
}

/// The defended posterior `Tᵀ softmax(h(x))` followed by cross-entropy,
/// differentiated with respect to the input, for every attack objective.
#[test]
fn pipeline_input_gradients() {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (target, trans, d, c) = small_models(&mut rng, seed);
        let n = rng.random_range(1..4);
        let x = random_inputs(&mut rng, n, d);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let y_star: Vec<usize> = y.iter().map(|&v| (v + 1) % c).collect();
        let matrix_mode = AttackMode::TargetMatrix(TransitionMatrix::anti_diagonal(c));
        let cases = [
            (Objective::Combined, AttackMode::Nontarget),
            (Objective::Combined, AttackMode::Targeted(TargetLabel::LeastLikely)),
            (Objective::Dual, AttackMode::Nontarget),
            (Objective::TargetOnly, AttackMode::Nontarget),
            (Objective::TargetOnly, AttackMode::Targeted(TargetLabel::LeastLikely)),
            (Objective::Matrix, matrix_mode),
        ];
        for (objective, mode) in cases {
            let mut cfg = AttackConfig::pgd10(Norm::Linf, 0.1, objective);
            cfg.mode = mode;
            let (_, grad) = loss_and_gradient(&x, &y, Some(&y_star), &cfg, &target, Some(&trans)).unwrap();
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += H;
                let mut xm = x.clone();
                xm.data_mut()[i] -= H;
                let lp = loss_and_gradient(&xp, &y, Some(&y_star), &cfg, &target, Some(&trans)).unwrap().0;
                let lm = loss_and_gradient(&xm, &y, Some(&y_star), &cfg, &target, Some(&trans)).unwrap().0;
                let numeric = (lp - lm) / (2.0 * H);
                let a = grad.data()[i];
                assert!(
                    rel_err(a, numeric) < REL_TOL,
                    "{objective:?} seed {seed} entry {i}: analytic {a}, numeric {numeric}"
                );
            }
        }
    }
}

fn param_fd<M>(model: &M, name: &str, i: usize, loss: impl Fn(&M) -> f64) -> f64
where
    M: Clone + HasParams,
{
    let mut plus = model.clone();
    let mut minus = model.clone();
    let mut v = plus.get(name);
    v.data_mut()[i] += H;
    plus.set(name, v);
    let mut v = minus.get(name);
    v.data_mut()[i] -= H;
    minus.set(name, v);
    (loss(&plus) - loss(&minus)) / (2.0 * H)
}

trait HasParams {
    fn get(&self, name: &str) -> Tensor;
    fn set(&mut self, name: &str, v: Tensor);
}

impl HasParams for TargetClassifier {
    fn get(&self, name: &str) -> Tensor {
        self.params().get(name).unwrap().clone()
    }
    fn set(&mut self, name: &str, v: Tensor) {
        self.params_mut().set_value(name, v).unwrap();
    }
}

impl HasParams for TransitionNetwork {
    fn get(&self, name: &str) -> Tensor {
        self.params().get(name).unwrap().clone()
    }
    fn set(&mut self, name: &str, v: Tensor) {
        self.params_mut().set_value(name, v).unwrap();
    }
}

/// Parameter gradients of the transition loss (into ω) and the target
/// loss (into θ, and into ω as well under joint routing).
#[test]
fn training_loss_parameter_gradients() {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (target, trans, d, c) = small_models(&mut rng, seed);
        let n = rng.random_range(2..5);
        let x = random_inputs(&mut rng, n, d);
        let natural: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mixture: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut batch = MixtureBatch::natural(x, natural);
        batch.mixture_labels = mixture;

        for routing in [GradientRouting::Separate, GradientRouting::Joint] {
            let mut t = target.clone();
            let mut w = trans.clone();
            t.params_mut().zero_grads();
            w.params_mut().zero_grads();
            accumulate_gradients(&batch, &mut t, Some(&mut w), Regime::Joint, routing).unwrap();

            for name in target.params().names() {
                let g = t.params().grad(name).unwrap();
                for i in 0..g.len() {
                    let numeric = param_fd(&target, name, i, |m| loss_target(&batch, m, &trans).unwrap());
                    assert!(
                        rel_err(g.data()[i], numeric) < REL_TOL,
                        "theta {name}[{i}] seed {seed}: {} vs {numeric}",
                        g.data()[i]
                    );
                }
            }
            for name in trans.params().names() {
                let g = w.params().grad(name).unwrap();
                for i in 0..g.len() {
                    let numeric = param_fd(&trans, name, i, |m| {
                        let lt = loss_transition(&batch, m).unwrap();
                        match routing {
                            GradientRouting::Separate => lt,
                            GradientRouting::Joint => lt + loss_target(&batch, &target, m).unwrap(),
                        }
                    });
                    assert!(
                        rel_err(g.data()[i], numeric) < REL_TOL,
                        "omega {name}[{i}] {routing:?} seed {seed}: {} vs {numeric}",
                        g.data()[i]
                    );
                }
            }
        }
    }
}
