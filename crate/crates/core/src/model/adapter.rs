use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

use super::ModelError;

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn resolve(store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        Ok(Self {
            weight: lookup(store, &format!("{prefix}.weight"))?,
            bias: lookup(store, &format!("{prefix}.bias"))?,
        })
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId, ModelError> {
    store
        .id(name)
        .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
}

/// Down-projection, GELU, up-projection. No residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bottleneck {
    pub down: Linear,
    pub up: Linear,
}

impl Bottleneck {
    pub(crate) fn resolve(store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        Ok(Self {
            down: Linear::resolve(store, &format!("{prefix}.down"))?,
            up: Linear::resolve(store, &format!("{prefix}.up"))?,
        })
    }

    pub fn transform<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var, TensorError> {
        let h = self.down.forward(g, store, x)?;
        let h = g.gelu(h);
        self.up.forward(g, store, h)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.down.weight, self.down.bias, self.up.weight, self.up.bias]
    }
}

/// Bottleneck adapter with its own residual:
/// `x + GELU(x·W_down + b_down)·W_up + b_up`.
///
/// With `W_up = 0` and `b_up = 0` this is exactly the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HoulsbyAdapter(pub Bottleneck);

impl HoulsbyAdapter {
    pub(crate) fn resolve(store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        Bottleneck::resolve(store, prefix).map(Self)
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var, TensorError> {
        let delta = self.0.transform(g, store, x)?;
        g.add(x, delta)
    }

    /// Evaluates the adapter on a batch of row vectors outside any model graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.0.ids().iter().map(|&id| store.get(id).numel()).sum()
    }

    pub fn ids(&self) -> [ParamId; 4] {
        self.0.ids()
    }
}
