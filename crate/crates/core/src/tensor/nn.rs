use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoundParams, ParamGroup, ParamId, ParamSet, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::None => x,
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softmax => x.softmax(),
        }
    }
}

/// Shape of a multilayer perceptron with rectifier hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub output: usize,
    pub final_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        final_activation: Activation,
    ) -> Self {
        Self {
            input,
            hidden,
            hidden_layers,
            output,
            final_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || (self.hidden_layers > 0 && self.hidden == 0) {
            return Err(TensorError::Shape {
                op: "mlp_spec",
                lhs: vec![self.input, self.hidden, self.output],
                rhs: vec![self.hidden_layers],
            });
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        w.push(self.output);
        w
    }
}

/// An MLP whose weights live in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers fresh Glorot-uniform weights and zero biases.
    pub fn new(
        spec: MlpSpec,
        params: &mut ParamSet,
        group: ParamGroup,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            let wid = params.add(
                group,
                &format!("{prefix}.layer{i}.weight"),
                Tensor::new(vec![fan_in, fan_out], w)?,
            );
            let bid = params.add(
                group,
                &format!("{prefix}.layer{i}.bias"),
                Tensor::zeros(&[fan_out]),
            );
            layers.push((wid, bid));
        }
        Ok(Self { spec, layers })
    }

    pub fn layer_ids(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// `x` is `[batch, input]`; output is `[batch, output]`.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.spec.input {
            return Err(TensorError::Shape {
                op: "mlp_forward",
                lhs: shape,
                rhs: vec![self.spec.input],
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(p.get(w))?.add(p.get(b))?;
            h = if i == last {
                self.spec.final_activation.apply(h)
            } else {
                h.relu()
            };
        }
        Ok(h)
    }
}
