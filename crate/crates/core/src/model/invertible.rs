use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

use super::adapter::Bottleneck;
use super::ModelError;

/// Two additive coupling sublayers over the halves of the hidden vector.
///
/// Forward: `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`.
/// Inverse: `x2 = y2 - G(y1)`, `x1 = y1 - F(x2)`.
/// `F` and `G` are `d/2 → m → d/2` bottlenecks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InvertibleAdapter {
    pub f: Bottleneck,
    pub g: Bottleneck,
    pub half: usize,
}

impl InvertibleAdapter {
    pub(crate) fn resolve(store: &ParamStore, prefix: &str, hidden: usize) -> Result<Self, ModelError> {
        if !hidden.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(format!(
                "invertible adapter needs an even hidden size, got {hidden}"
            )));
        }
        Ok(Self {
            f: Bottleneck::resolve(store, &format!("{prefix}.f"))?,
            g: Bottleneck::resolve(store, &format!("{prefix}.g"))?,
            half: hidden / 2,
        })
    }

    fn halves(&self, graph: &mut Graph<'_>, x: Var) -> Result<(Var, Var), TensorError> {
        let a = graph.slice(x, 1, 0, self.half)?;
        let b = graph.slice(x, 1, self.half, 2 * self.half)?;
        Ok((a, b))
    }

    pub fn forward<'a>(&self, graph: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var, TensorError> {
        let (x1, x2) = self.halves(graph, x)?;
        let fx2 = self.f.transform(graph, store, x2)?;
        let y1 = graph.add(x1, fx2)?;
        let gy1 = self.g.transform(graph, store, y1)?;
        let y2 = graph.add(x2, gy1)?;
        graph.concat(&[y1, y2], 1)
    }

    pub fn inverse<'a>(&self, graph: &mut Graph<'a>, store: &'a ParamStore, y: Var) -> Result<Var, TensorError> {
        let (y1, y2) = self.halves(graph, y)?;
        let gy1 = self.g.transform(graph, store, y1)?;
        let x2 = graph.sub(y2, gy1)?;
        let fx2 = self.f.transform(graph, store, x2)?;
        let x1 = graph.sub(y1, fx2)?;
        graph.concat(&[x1, x2], 1)
    }

    pub fn apply_forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = self.forward(&mut g, store, v)?;
        Ok(g.value(y).clone())
    }

    pub fn apply_inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(y.clone());
        let x = self.inverse(&mut g, store, v)?;
        Ok(g.value(x).clone())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.f.ids().into_iter().chain(self.g.ids()).collect()
    }
}
