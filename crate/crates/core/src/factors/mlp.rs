use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::Scalar;
use crate::graph::{GraphError, ParameterStore, SliceId};

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: SliceId,
    bias: SliceId,
    inputs: usize,
    outputs: usize,
}

/// Fully connected network with relu hidden layers and a linear output,
/// mapping a scalar feature to per-dimension log square-root precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    name: String,
    layers: Vec<Dense>,
    input_scale: f64,
}

impl Mlp {
    /// Registers `name.w{k}` (`out × in`, row-major) and `name.b{k}` for each
    /// layer. Hidden weights use He initialization; the output layer starts
    /// small so the initial output is close to `output_bias`.
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        hidden: &[usize],
        output_bias: &[f64],
        input_scale: f64,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        let mut layers = Vec::new();
        let mut inputs = 1;
        let widths: Vec<usize> = hidden
            .iter()
            .copied()
            .chain(std::iter::once(output_bias.len()))
            .collect();
        for (k, &outputs) in widths.iter().enumerate() {
            let last = k + 1 == widths.len();
            let std = if last {
                0.01 * (1.0 / inputs as f64).sqrt()
            } else {
                (2.0 / inputs as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f64> = (0..outputs * inputs).map(|_| normal.sample(rng)).collect();
            let b = if last {
                output_bias.to_vec()
            } else {
                vec![0.0; outputs]
            };
            let weight = store.register(&format!("{name}.w{k}"), &[outputs, inputs], &w)?;
            let bias = store.register(&format!("{name}.b{k}"), &[outputs], &b)?;
            layers.push(Dense {
                weight,
                bias,
                inputs,
                outputs,
            });
            inputs = outputs;
        }
        Ok(Mlp {
            name: name.to_string(),
            layers,
            input_scale,
        })
    }

    /// Rebuilds the layer plan from slices already present in `store`.
    pub fn from_store(
        store: &ParameterStore,
        name: &str,
        input_scale: f64,
    ) -> Result<Self, GraphError> {
        let mut layers = Vec::new();
        for k in 0.. {
            let Some(weight) = store.id(&format!("{name}.w{k}")) else {
                break;
            };
            let bias = store.require(&format!("{name}.b{k}"))?;
            let shape = &store.slice(weight).shape;
            layers.push(Dense {
                weight,
                bias,
                inputs: shape[1],
                outputs: shape[0],
            });
        }
        if layers.is_empty() {
            return Err(GraphError::UnknownSlice(format!("{name}.w0")));
        }
        Ok(Mlp {
            name: name.to_string(),
            layers,
            input_scale,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Distinguishes networks inside a [`crate::graph::HeadCache`].
    pub fn key(&self) -> usize {
        self.layers[0].weight.0
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    /// Slice holding the output-layer bias.
    pub fn output_bias(&self) -> SliceId {
        self.layers.last().expect("at least one layer").bias
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParameterStore,
        theta: &[S],
        feature: f64,
    ) -> Result<Vec<S>, GraphError> {
        let mut h = vec![S::constant(feature * self.input_scale)];
        let n = self.layers.len();
        for (k, layer) in self.layers.iter().enumerate() {
            let w = store.view(theta, layer.weight);
            let b = store.view(theta, layer.bias);
            if h.len() != layer.inputs {
                return Err(GraphError::SliceShape {
                    name: store.slice(layer.weight).name.clone(),
                    expected: h.len(),
                    got: layer.inputs,
                });
            }
            h = (0..layer.outputs)
                .map(|o| {
                    let a = S::dot(&w[o * layer.inputs..(o + 1) * layer.inputs], &h) + b[o];
                    if k + 1 < n {
                        a.relu()
                    } else {
                        a
                    }
                })
                .collect();
        }
        Ok(h)
    }
}
