//! Named parameter storage shared by every learnable block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {}", name);
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal initialized convolution kernel `[c_out, c_in, k, k]` plus zero bias.
    pub fn add_conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut R,
    ) -> (ParamId, ParamId) {
        let fan_in = (c_in * k * k).max(1) as Real;
        let w = Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng);
        let kernel = self.add(format!("{}.weight", name), w);
        let bias = self.add(format!("{}.bias", name), Tensor::zeros(&[c_out]));
        (kernel, bias)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
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

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrite values from a named list; every stored name must be present with the same shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {}", name)))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::dim(
                    "load_named",
                    format!("{}: stored {:?}, model {:?}", name, t.shape(), self.values[i].shape()),
                ));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }

    /// Register every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }
}

/// Tape handles for one [`ParamStore`], valid for a single tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap handles already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; parameters the loss never reached get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}
