use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use crate::error::{Error, Result};

/// Current checkpoint `format_version`.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: Tensor,
    momentum: Tensor,
    grad: Option<Tensor>,
}

/// Named trainable tensors with momentum buffers and gradient slots.
///
/// Iteration order is the lexicographic order of the names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Entry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let momentum = Tensor::zeros(value.shape());
        self.entries.insert(
            name,
            Entry {
                value,
                momentum,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.momentum)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|e| e.grad.as_ref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    fn entry_mut(&mut self, name: &str) -> Result<&mut Entry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    /// Overwrites the value of an existing parameter (shape must match).
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self.entry_mut(name)?;
        if e.value.shape() != value.shape() {
            return Err(Error::dim("set_value", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    /// Adds `grad` into the gradient slot of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let e = self.entry_mut(name)?;
        if e.value.shape() != grad.shape() {
            return Err(Error::dim("accumulate_grad", e.value.shape(), grad.shape()));
        }
        match &mut e.grad {
            Some(g) => g.axpy(1.0, grad)?,
            None => e.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// Adds `decay * value` to every populated gradient (L2 weight decay).
    pub fn apply_weight_decay(&mut self, decay: f64) -> Result<()> {
        if decay == 0.0 {
            return Ok(());
        }
        for (name, e) in self.entries.iter_mut() {
            let g = e
                .grad
                .as_mut()
                .ok_or_else(|| Error::State(format!("parameter {name:?} has no gradient")))?;
            g.axpy(decay, &e.value)?;
        }
        Ok(())
    }

    /// Momentum SGD: `v <- momentum * v + grad; value <- value - lr * v`,
    /// then clears every gradient.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Input(format!("learning rate {lr} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Input(format!("momentum {momentum} must lie in [0, 1)")));
        }
        if let Some((name, _)) = self.entries.iter().find(|(_, e)| e.grad.is_none()) {
            return Err(Error::State(format!("parameter {name:?} has no gradient")));
        }
        for e in self.entries.values_mut() {
            let g = e.grad.take().expect("checked above");
            for ((v, m), gv) in e
                .value
                .data_mut()
                .iter_mut()
                .zip(e.momentum.data_mut())
                .zip(g.data())
            {
                *m = momentum * *m + gv;
                *v -= lr * *m;
            }
        }
        Ok(())
    }
}

/// On-disk form of one network's parameters.
///
/// ```json
/// { "format_version": 1, "kind": "target", "widths": [2, 64, 64, 4],
///   "seed": 7, "parameters": { "layer0.weight": { "shape": [2, 64], "values": [...] } } }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub parameters: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(kind: &str, widths: &[usize], seed: u64, params: &ParameterSet) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.to_string(),
            widths: widths.to_vec(),
            seed,
            parameters: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    /// Rebuilds a parameter set with fresh (zero) momentum buffers.
    pub fn to_params(&self) -> Result<ParameterSet> {
        let mut p = ParameterSet::new();
        for (k, v) in &self.parameters {
            p.insert(k.clone(), v.clone())?;
        }
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Parse {
                location: "format_version".into(),
                message: format!(
                    "unsupported version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                    ck.format_version
                ),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![value])).unwrap();
        p
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = single(1.0);
        p.accumulate_grad("w", &Tensor::vector(vec![0.25])).unwrap();
        p.sgd_step(1.0, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.75]);
        assert!(p.grad("w").is_none());
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let g = 0.5;
        let mut p = single(0.0);
        for _ in 0..2 {
            p.accumulate_grad("w", &Tensor::vector(vec![g])).unwrap();
            p.sgd_step(1.0, 0.9).unwrap();
        }
        // g + (0.9 g + g)
        assert!((p.get("w").unwrap().data()[0] + (g + 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = single(0.0);
        p.insert("bias", Tensor::vector(vec![0.0])).unwrap();
        p.accumulate_grad("w", &Tensor::vector(vec![1.0])).unwrap();
        let err = p.sgd_step(0.1, 0.9).unwrap_err();
        assert!(matches!(&err, Error::State(m) if m.contains("bias")), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = single(0.0);
        assert!(p.insert("w", Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn zero_learning_rate_changes_values_not_at_all() {
        let mut p = single(0.123);
        p.accumulate_grad("w", &Tensor::vector(vec![7.0])).unwrap();
        p.sgd_step(0.0, 0.9).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0].to_bits(), 0.123f64.to_bits());
    }

    #[test]
    fn momentum_buffers_match_shapes() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(p.momentum("a").unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn checkpoint_rejects_bad_shape() {
        let text = r#"{"format_version":1,"kind":"target","widths":[1,1],"seed":0,
            "parameters":{"w":{"shape":[2],"values":[1.0]}}}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }
}
