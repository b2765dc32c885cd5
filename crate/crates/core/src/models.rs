//! Target classifier, transition network, and posterior composition.
//!
//! Both networks are ReLU multilayer perceptrons over the same input. The
//! transition network emits `C*C` raw scores per instance; each group of
//! `C` becomes one row of a row-stochastic matrix through softmax. Row `i`,
//! column `j` of that matrix is the probability that natural label `j`
//! underlies mixture label `i` at this input.
//!
//! The natural-label posterior is the forward product `Tᵀ p_mix`: a
//! `p_mix`-weighted mixture of the rows of `T`. No matrix is ever inverted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    argmax, check_one_hot, matmul_into, softmax_slice, Checkpoint, Gradients, Graph, ParameterSet,
    Tensor, Var,
};

/// Tolerance for row sums of a [`TransitionMatrix`].
pub const ROW_SUM_TOL: f64 = 1e-9;

fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Fully connected ReLU network. Layer `i` maps `widths[i]` to
/// `widths[i + 1]`; the last layer has no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: ParameterSet,
    seed: u64,
}

impl Mlp {
    /// Glorot-uniform weights (`±sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub fn new(widths: &[usize], seed: u64, rng: &mut impl Rng) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut params = ParameterSet::new();
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            params.insert(weight_name(i), Tensor::new(vec![fan_in, fan_out], data)?)?;
            params.insert(bias_name(i), Tensor::zeros(&[fan_out]))?;
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            params,
            seed,
        })
    }

    /// All-zero weights and biases.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut params = ParameterSet::new();
        for (i, w) in widths.windows(2).enumerate() {
            params.insert(weight_name(i), Tensor::zeros(&[w[0], w[1]]))?;
            params.insert(bias_name(i), Tensor::zeros(&[w[1]]))?;
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            params,
            seed: 0,
        })
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(widths: &[usize], params: ParameterSet, seed: u64) -> Result<Self> {
        Self::check_widths(widths)?;
        let expected = 2 * (widths.len() - 1);
        if params.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} parameters for widths {widths:?}, found {}",
                params.len()
            )));
        }
        for (i, w) in widths.windows(2).enumerate() {
            for (name, shape) in [(weight_name(i), vec![w[0], w[1]]), (bias_name(i), vec![w[1]])] {
                let t = params
                    .get(&name)
                    .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::dim("parameter shape", t.shape(), &shape));
                }
            }
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            params,
            seed,
        })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths {widths:?} need at least two positive entries"
            )));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Places the parameters on `graph`, as variables when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundMlp<'g> {
        let leaf = |t: &Tensor| {
            if trainable {
                graph.variable(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let layers = (0..self.layers())
            .map(|i| {
                let w = leaf(self.params.get(&weight_name(i)).expect("validated"));
                let b = leaf(self.params.get(&bias_name(i)).expect("validated"));
                (w, b)
            })
            .collect();
        BoundMlp {
            layers,
            input_width: self.input_width(),
        }
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.input_width() {
            return Err(Error::dim("mlp input", x.shape(), &[x.rows(), self.input_width()]));
        }
        let n = x.rows();
        let mut h = x.data().to_vec();
        for i in 0..self.layers() {
            let (k, m) = (self.widths[i], self.widths[i + 1]);
            let w = self.params.get(&weight_name(i)).expect("validated");
            let b = self.params.get(&bias_name(i)).expect("validated");
            let mut out = vec![0.0; n * m];
            matmul_into(&h, w.data(), &mut out, n, k, m);
            let last = i + 1 == self.layers();
            for row in out.chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                    if !last {
                        *o = o.max(0.0);
                    }
                }
            }
            h = out;
        }
        Tensor::new(vec![n, self.output_width()], h)
    }

    fn checkpoint(&self, kind: &str) -> Checkpoint {
        Checkpoint::from_params(kind, &self.widths, self.seed, &self.params)
    }

    fn from_checkpoint(ck: &Checkpoint, kind: &str) -> Result<Self> {
        if ck.kind != kind {
            return Err(Error::Config(format!(
                "checkpoint holds a {:?} network, expected {kind:?}",
                ck.kind
            )));
        }
        Self::from_params(&ck.widths, ck.to_params()?, ck.seed)
    }
}

/// An [`Mlp`] whose parameters sit on a graph.
pub struct BoundMlp<'g> {
    layers: Vec<(Var<'g>, Var<'g>)>,
    input_width: usize,
}

impl<'g> BoundMlp<'g> {
    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_width {
            return Err(Error::dim("mlp input", &shape, &[shape[0], self.input_width]));
        }
        let mut h = x;
        let n = self.layers.len();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_bias(b)?;
            if i + 1 < n {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Copies this network's gradients out of `grads` into `params`.
    pub fn accumulate_into(&self, grads: &Gradients, params: &mut ParameterSet) -> Result<()> {
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            params.accumulate_grad(&weight_name(i), &grads.get_or_zeros(w))?;
            params.accumulate_grad(&bias_name(i), &grads.get_or_zeros(b))?;
        }
        Ok(())
    }
}

/// Architecture of both networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_width: usize,
    pub classes: usize,
    pub target_hidden: Vec<usize>,
    pub transition_hidden: Vec<usize>,
}

impl Architecture {
    /// Default widths: `d -> 64 -> 64 -> C` and `d -> 64 -> 64 -> C*C`.
    pub fn new(input_width: usize, classes: usize) -> Self {
        Architecture {
            input_width,
            classes,
            target_hidden: vec![64, 64],
            transition_hidden: vec![64, 64],
        }
    }

    pub fn target_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width];
        w.extend(&self.target_hidden);
        w.push(self.classes);
        w
    }

    pub fn transition_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width];
        w.extend(&self.transition_hidden);
        w.push(self.classes * self.classes);
        w
    }
}

/// The classifier `h_θ`, producing raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetClassifier {
    net: Mlp,
}

impl TargetClassifier {
    pub const KIND: &'static str = "target";

    pub fn new(arch: &Architecture, seed: u64, rng: &mut impl Rng) -> Result<Self> {
        Self::from_mlp(Mlp::new(&arch.target_widths(), seed, rng)?)
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.output_width() < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        Ok(TargetClassifier { net })
    }

    pub fn classes(&self) -> usize {
        self.net.output_width()
    }

    pub fn input_width(&self) -> usize {
        self.net.input_width()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &ParameterSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        self.net.params_mut()
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundTarget<'g> {
        BoundTarget {
            net: self.net.bind(graph, trainable),
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.infer(x)
    }

    /// Softmax of the logits, one row per instance.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.logits(x)?;
        let c = self.classes();
        let mut buf = vec![0.0; c];
        for row in z.data_mut().chunks_mut(c) {
            softmax_slice(row, &mut buf);
            row.copy_from_slice(&buf);
        }
        Ok(z)
    }

    /// Arg-max label per instance, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.net.checkpoint(Self::KIND)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::from_mlp(Mlp::from_checkpoint(ck, Self::KIND)?)
    }
}

pub struct BoundTarget<'g> {
    net: BoundMlp<'g>,
}

impl<'g> BoundTarget<'g> {
    pub fn logits(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.net.forward(x)
    }

    pub fn probabilities(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.logits(x)?.softmax(1)
    }

    pub fn accumulate_into(&self, grads: &Gradients, model: &mut TargetClassifier) -> Result<()> {
        self.net.accumulate_into(grads, model.params_mut())
    }
}

/// The transition network `g_ω`, producing one row-stochastic `C×C`
/// matrix per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionNetwork {
    net: Mlp,
    classes: usize,
}

impl TransitionNetwork {
    pub const KIND: &'static str = "transition";

    pub fn new(arch: &Architecture, seed: u64, rng: &mut impl Rng) -> Result<Self> {
        Self::from_mlp(Mlp::new(&arch.transition_widths(), seed, rng)?)
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        let out = net.output_width();
        let classes = (out as f64).sqrt().round() as usize;
        if classes < 2 || classes * classes != out {
            return Err(Error::Config(format!(
                "transition output width {out} is not C*C for some C >= 2"
            )));
        }
        Ok(TransitionNetwork { net, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_width(&self) -> usize {
        self.net.input_width()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &ParameterSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        self.net.params_mut()
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundTransition<'g> {
        BoundTransition {
            net: self.net.bind(graph, trainable),
            classes: self.classes,
        }
    }

    /// Stack of matrices `[n, C, C]` without recording a tape.
    pub fn matrices(&self, x: &Tensor) -> Result<Tensor> {
        let raw = self.net.infer(x)?;
        let c = self.classes;
        let mut out = raw.reshape(&[x.rows(), c, c])?;
        let mut buf = vec![0.0; c];
        for row in out.data_mut().chunks_mut(c) {
            softmax_slice(row, &mut buf);
            row.copy_from_slice(&buf);
        }
        Ok(out)
    }

    /// Per-instance [`TransitionMatrix`] values tagged with their row index.
    pub fn transition_matrices(&self, x: &Tensor) -> Result<Vec<TransitionMatrix>> {
        let stack = self.matrices(x)?;
        let c = self.classes;
        (0..x.rows())
            .map(|s| {
                let entries = Tensor::new(vec![c, c], stack.row(s).to_vec())?;
                Ok(TransitionMatrix::new(entries)?.with_source(s))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.net.checkpoint(Self::KIND)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::from_mlp(Mlp::from_checkpoint(ck, Self::KIND)?)
    }
}

pub struct BoundTransition<'g> {
    net: BoundMlp<'g>,
    classes: usize,
}

impl<'g> BoundTransition<'g> {
    /// `[n, C, C]` stack of row-softmaxed matrices.
    pub fn matrices(&self, x: Var<'g>) -> Result<Var<'g>> {
        let raw = self.net.forward(x)?;
        let n = raw.shape()[0];
        let c = self.classes;
        raw.reshape(&[n, c, c])?.softmax(2)
    }

    pub fn accumulate_into(&self, grads: &Gradients, model: &mut TransitionNetwork) -> Result<()> {
        self.net.accumulate_into(grads, model.params_mut())
    }
}

/// `Tᵀ p_mix` for a batch: `p_mix[n, C]`, `t[n, C, C]`.
pub fn natural_posterior<'g>(p_mix: Var<'g>, t: Var<'g>) -> Result<Var<'g>> {
    p_mix.vec_mat(t)
}

/// Row `y′_s` of each matrix in the stack `t[n, C, C]`.
pub fn select_mixture_rows<'g>(t: Var<'g>, mixture_labels: &[usize]) -> Result<Var<'g>> {
    t.pick_rows(mixture_labels)
}

/// One instance's row-stochastic label-transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    entries: Tensor,
    source: Option<usize>,
}

impl TransitionMatrix {
    /// Validates squareness, entries in `[0, 1]`, and unit row sums.
    pub fn new(entries: Tensor) -> Result<Self> {
        let s = entries.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim("transition matrix", s, &[s[0], s[0]]));
        }
        let c = s[0];
        for (i, row) in entries.data().chunks(c).enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Input(format!("row {i} has entries outside [0, 1]: {row:?}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Input(format!("row {i} sums to {sum}")));
            }
        }
        Ok(TransitionMatrix {
            entries,
            source: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn identity(classes: usize) -> Self {
        TransitionMatrix {
            entries: Tensor::identity(classes),
            source: None,
        }
    }

    /// Ones on the anti-diagonal: class `i` maps to class `C - 1 - i`.
    pub fn anti_diagonal(classes: usize) -> Self {
        let mut t = Tensor::zeros(&[classes, classes]);
        for i in 0..classes {
            t.data_mut()[i * classes + (classes - 1 - i)] = 1.0;
        }
        TransitionMatrix {
            entries: t,
            source: None,
        }
    }

    pub fn with_source(mut self, source: usize) -> Self {
        self.source = Some(source);
        self
    }

    pub fn source(&self) -> Option<usize> {
        self.source
    }

    pub fn classes(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.classes();
        &self.entries.data()[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.entries.at2(i, j)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.classes()).map(|i| self.at(i, i)).collect()
    }
}

/// `Tᵀ p_mix`: the `p_mix`-weighted mixture of the rows of `t`.
pub fn infer_natural_posterior(p_mix: &[f64], t: &TransitionMatrix) -> Result<Vec<f64>> {
    let c = t.classes();
    if p_mix.len() != c {
        return Err(Error::dim("infer_natural_posterior", &[p_mix.len()], &[c, c]));
    }
    let mut out = vec![0.0; c];
    for (i, &w) in p_mix.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(t.row(i)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// The row of `t` indexed by the one-hot `y_onehot`.
pub fn row_select(y_onehot: &[f64], t: &TransitionMatrix) -> Result<Vec<f64>> {
    if y_onehot.len() != t.classes() {
        return Err(Error::dim("row_select", &[y_onehot.len()], &[t.classes(), t.classes()]));
    }
    check_one_hot(&Tensor::vector(y_onehot.to_vec()))?;
    Ok(t.row(argmax(y_onehot)).to_vec())
}

/// Target classifier optionally composed with a transition network.
#[derive(Clone, Copy)]
pub struct Defense<'a> {
    pub target: &'a TargetClassifier,
    pub transition: Option<&'a TransitionNetwork>,
}

impl<'a> Defense<'a> {
    pub fn new(target: &'a TargetClassifier, transition: Option<&'a TransitionNetwork>) -> Result<Self> {
        if let Some(t) = transition {
            if t.classes() != target.classes() {
                return Err(Error::Config(format!(
                    "transition network has {} classes, target has {}",
                    t.classes(),
                    target.classes()
                )));
            }
            if t.input_width() != target.input_width() {
                return Err(Error::Config(format!(
                    "transition network input width {} differs from target's {}",
                    t.input_width(),
                    target.input_width()
                )));
            }
        }
        Ok(Defense { target, transition })
    }

    pub fn target_only(target: &'a TargetClassifier) -> Self {
        Defense {
            target,
            transition: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.target.classes()
    }

    /// Natural-label posterior per instance: `Tᵀ softmax(h(x))`, or plain
    /// `softmax(h(x))` without a transition network.
    pub fn posterior(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.target.probabilities(x)?;
        let Some(trans) = self.transition else {
            return Ok(p);
        };
        let t = trans.matrices(x)?;
        let c = self.classes();
        let mut out = vec![0.0; p.len()];
        for s in 0..x.rows() {
            let (pr, tm) = (p.row(s), t.row(s));
            let orow = &mut out[s * c..(s + 1) * c];
            for i in 0..c {
                for j in 0..c {
                    orow[j] += pr[i] * tm[i * c + j];
                }
            }
        }
        Tensor::new(vec![x.rows(), c], out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.posterior(x)?.argmax_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng, Stream};

    fn arch() -> Architecture {
        Architecture {
            input_width: 3,
            classes: 4,
            target_hidden: vec![5],
            transition_hidden: vec![6],
        }
    }

    #[test]
    fn zero_model_gives_uniform_posterior() {
        let net = Mlp::zeros(&[3, 4, 4]).unwrap();
        let model = TargetClassifier::from_mlp(net).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.4, 0.9]]).unwrap();
        assert_eq!(model.logits(&x).unwrap().data(), &[0.0; 4]);
        for &p in model.probabilities(&x).unwrap().data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut params = ParameterSet::new();
        params
            .insert("layer0.weight", Tensor::from_rows(&[[1.0, -1.0], [2.0, 0.5]]).unwrap())
            .unwrap();
        params.insert("layer0.bias", Tensor::vector(vec![0.25, -0.5])).unwrap();
        let model = TargetClassifier::from_mlp(Mlp::from_params(&[2, 2], params, 0).unwrap()).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [0.5, 0.0]]).unwrap();
        // xW + b
        assert_eq!(model.logits(&x).unwrap().data(), &[5.25, -0.5, 0.75, -1.0]);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let model = TargetClassifier::new(&arch(), 0, &mut rng(0, Stream::TargetInit)).unwrap();
        let x = Tensor::zeros(&[2, 5]);
        assert!(matches!(model.logits(&x), Err(Error::Dimension { .. })));
        let g = Graph::new();
        let xv = g.constant(x);
        assert!(matches!(model.bind(&g, false).logits(xv), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_transition_logits_give_uniform_rows() {
        let net = TransitionNetwork::from_mlp(Mlp::zeros(&[3, 9]).unwrap()).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]]).unwrap();
        for m in net.transition_matrices(&x).unwrap() {
            for &v in m.entries().data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturated_row_is_nearly_one_hot() {
        let mut params = ParameterSet::new();
        params.insert("layer0.weight", Tensor::zeros(&[1, 4])).unwrap();
        params
            .insert("layer0.bias", Tensor::vector(vec![20.0, -20.0, 0.0, 0.0]))
            .unwrap();
        let net = TransitionNetwork::from_mlp(Mlp::from_params(&[1, 4], params, 0).unwrap()).unwrap();
        let m = &net.transition_matrices(&Tensor::zeros(&[1, 1])).unwrap()[0];
        assert!((m.at(0, 0) - 1.0).abs() < 1e-8);
        assert!(m.at(0, 1) < 1e-8);
    }

    #[test]
    fn transition_output_width_must_be_square() {
        assert!(TransitionNetwork::from_mlp(Mlp::zeros(&[3, 8]).unwrap()).is_err());
    }

    #[test]
    fn identity_leaves_posterior_unchanged() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let out = infer_natural_posterior(&p, &TransitionMatrix::identity(4)).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn one_hot_selects_a_row() {
        let t = TransitionMatrix::from_rows(&[[0.8, 0.2], [0.3, 0.7]]).unwrap();
        assert_eq!(infer_natural_posterior(&[1.0, 0.0], &t).unwrap(), vec![0.8, 0.2]);
        assert_eq!(row_select(&[0.0, 1.0], &t).unwrap(), vec![0.3, 0.7]);
    }

    #[test]
    fn anti_diagonal_maps_first_to_last() {
        let t = TransitionMatrix::anti_diagonal(4);
        let out = infer_natural_posterior(&[1.0, 0.0, 0.0, 0.0], &t).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn row_select_rejects_malformed_one_hot() {
        let t = TransitionMatrix::identity(2);
        assert!(matches!(row_select(&[0.5, 0.5], &t), Err(Error::Input(_))));
        assert!(matches!(row_select(&[1.0], &t), Err(Error::Dimension { .. })));
        assert_eq!(row_select(&[1.0, 0.0], &t).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn size_mismatch_is_dimension_error() {
        let t = TransitionMatrix::identity(3);
        assert!(matches!(
            infer_natural_posterior(&[0.5, 0.5], &t),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn invalid_matrices_rejected() {
        assert!(TransitionMatrix::from_rows(&[[0.5, 0.6], [0.0, 1.0]]).is_err());
        assert!(TransitionMatrix::from_rows(&[[1.5, -0.5], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn rank_one_matrix_is_applied_forward() {
        // Every row equal: singular, so an inverse-based map would fail.
        let t = TransitionMatrix::from_rows(&[[0.1, 0.6, 0.3]; 3]).unwrap();
        let out = infer_natural_posterior(&[0.2, 0.5, 0.3], &t).unwrap();
        for (o, e) in out.iter().zip([0.1, 0.6, 0.3]) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_and_plain_paths_agree() {
        let a = arch();
        let target = TargetClassifier::new(&a, 1, &mut rng(1, Stream::TargetInit)).unwrap();
        let trans = TransitionNetwork::new(&a, 1, &mut rng(1, Stream::TransitionInit)).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.5, 0.9], [0.3, 0.3, 0.0]]).unwrap();
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let p = target.bind(&g, false).probabilities(xv).unwrap();
        let t = trans.bind(&g, false).matrices(xv).unwrap();
        let post = natural_posterior(p, t).unwrap().value();
        let plain = Defense::new(&target, Some(&trans)).unwrap().posterior(&x).unwrap();
        for (a, b) in post.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_kind_is_checked() {
        let target = TargetClassifier::new(&arch(), 3, &mut rng(3, Stream::TargetInit)).unwrap();
        let ck = target.to_checkpoint();
        assert!(TransitionNetwork::from_checkpoint(&ck).is_err());
        assert_eq!(TargetClassifier::from_checkpoint(&ck).unwrap(), target);
    }
}
