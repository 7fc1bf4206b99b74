//! Flat parameter storage and MLPs.
//!
//! Modules never own tensors directly. They hold [`ParamId`]s into a
//! [`ParamSet`], which is bound onto a tape once per forward pass. This keeps
//! gradients, optimizer state and checkpoints aligned by index.

use rand::Rng as _;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{CgsError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values by name; every stored name must be present with the
    /// same shape.
    pub fn load_from<'a>(&mut self, mut lookup: impl FnMut(&str) -> Result<&'a Tensor>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let t = lookup(name)?;
            if t.shape() != slot.shape() {
                return Err(CgsError::dim("load parameter", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Binds every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(&[rows, cols], data).expect("sized")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, prefix: &str, index: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let weight = params.add(format!("{prefix}.W{index}"), fan_in_uniform(fan_in, fan_out, rng));
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let b = Tensor::new(&[fan_out], (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect())
            .expect("sized");
        let bias = params.add(format!("{prefix}.b{index}"), b);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(bound.var(self.weight))?.add_bias(bound.var(self.bias))
    }
}

/// Affine → activation chain; the last layer is affine only.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new(params: &mut ParamSet, prefix: &str, widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(CgsError::Config(format!("MLP {prefix} needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(j, w)| Linear::new(params, prefix, j, w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_width() {
            return Err(CgsError::dim("mlp_forward", &shape, &[self.in_width()]));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (j, layer) in self.layers.iter().enumerate() {
            h = layer.forward(bound, h)?;
            if j < last {
                h = self.activation.apply(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, rng::INIT);
        let mlp = Mlp::new(&mut ps, "m", &[3, 5, 2], Activation::leaky_relu(), &mut r).unwrap();
        for v in ps.values_mut() {
            *v = Tensor::zeros(v.shape());
        }
        let tape = Tape::new();
        let b = ps.bind(&tape);
        let x = tape.constant(Tensor::ones(&[4, 3]));
        let y = mlp.forward(&b, x).unwrap();
        assert_eq!(y.value(), Tensor::zeros(&[4, 2]));
    }

    #[test]
    fn identity_layer_reproduces_input() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, rng::INIT);
        let mlp = Mlp::new(&mut ps, "m", &[3, 3], Activation::Tanh, &mut r).unwrap();
        ps.values_mut()[0] = Tensor::eye(3);
        ps.values_mut()[1] = Tensor::zeros(&[3]);
        let tape = Tape::new();
        let b = ps.bind(&tape);
        let xv = Tensor::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        let y = mlp.forward(&b, tape.constant(xv.clone())).unwrap();
        assert_eq!(y.value(), xv);
    }

    #[test]
    fn width_mismatch() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, rng::INIT);
        let mlp = Mlp::new(&mut ps, "m", &[3, 2], Activation::Tanh, &mut r).unwrap();
        let tape = Tape::new();
        let b = ps.bind(&tape);
        let x = tape.constant(Tensor::ones(&[2, 4]));
        assert!(matches!(mlp.forward(&b, x), Err(CgsError::Dimension { .. })));
    }

    #[test]
    fn init_within_fan_in_bound() {
        let mut r = rng::stream(1, rng::INIT);
        let t = fan_in_uniform(16, 8, &mut r);
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
    }
}
