//! Dense `f64` tensors with a symbolic reverse-mode differentiation graph.
//!
//! A [`Graph`] records operations over named inputs and parameter leaves.
//! [`Graph::gradients`] appends gradient nodes to the same graph, so
//! gradients can be differentiated again; the gradient penalty of a
//! Wasserstein critic relies on this.
//!
//! ```
//! use autodiff::{backward, Bindings, Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.register("w", Tensor::scalar(3.0)).unwrap();
//! let mut g = Graph::new();
//! let wn = g.param(w, &[]).unwrap();
//! let sq = g.square(wn).unwrap();
//! let grads = backward(&mut g, &store, &Bindings::new(), sq).unwrap();
//! assert_eq!(grads[&w].item(), 6.0);
//! ```

mod error;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Bindings, Graph, NodeId, ParamSource};
pub use params::{GradientMap, ParamId, ParamStore};
pub use tensor::Tensor;

/// Evaluates a single output node.
pub fn forward_eval(
    graph: &Graph,
    params: &dyn ParamSource,
    bindings: &Bindings<'_>,
    output: NodeId,
) -> Result<Tensor> {
    Ok(graph.evaluate(params, bindings, &[output], true)?.remove(0))
}

/// Gradients of the scalar `output` with respect to every parameter leaf it
/// depends on. Gradient nodes are appended to `graph`.
pub fn backward(
    graph: &mut Graph,
    params: &dyn ParamSource,
    bindings: &Bindings<'_>,
    output: NodeId,
) -> Result<GradientMap> {
    let leaves = graph.param_nodes();
    let wrt: Vec<NodeId> = leaves.iter().map(|(_, n)| *n).collect();
    let grads = graph.gradients(output, &wrt)?;
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    for ((pid, _), g) in leaves.iter().zip(grads) {
        if let Some(g) = g {
            ids.push(*pid);
            targets.push(g);
        }
    }
    let values = graph.evaluate(params, bindings, &targets, true)?;
    Ok(ids.into_iter().zip(values).collect())
}

/// Records `∇_input output` on the graph and returns its node. The result
/// can be used in further computation and differentiated again.
pub fn input_gradient(graph: &mut Graph, output: NodeId, input: NodeId) -> Result<NodeId> {
    let g = graph.gradients(output, &[input])?.remove(0);
    Ok(match g {
        Some(g) => g,
        None => {
            let shape = graph.shape(input).to_vec();
            graph.constant(Tensor::zeros(&shape))
        }
    })
}

/// Relative error used by [`finite_difference_check`]:
/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub const FD_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

struct Perturbed<'a> {
    base: &'a dyn ParamSource,
    id: ParamId,
    value: Tensor,
}

impl ParamSource for Perturbed<'_> {
    fn param(&self, id: ParamId) -> Option<&Tensor> {
        if id == self.id {
            Some(&self.value)
        } else {
            self.base.param(id)
        }
    }
}

/// Compares the reverse-mode gradient of scalar `output` with respect to
/// `node` (a parameter or input leaf) against central differences with
/// step `eps`, and returns the worst [`relative_error`].
///
/// At most `max_coords` coordinates are probed, spread evenly over the
/// tensor; pass `usize::MAX` to probe all of them.
pub fn finite_difference_check(
    graph: &Graph,
    params: &dyn ParamSource,
    bindings: &Bindings<'_>,
    output: NodeId,
    node: NodeId,
    eps: f64,
    max_coords: usize,
) -> Result<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut g = graph.clone();
    let grad_node = input_gradient(&mut g, output, node)?;
    let analytic = g.evaluate(params, bindings, &[grad_node], true)?.remove(0);

    let (base_value, leaf) = match graph.leaf_kind(node) {
        Some(LeafRef::Param(id)) => {
            (params.param(id).ok_or(Error::MissingParameter(id.0))?.clone(), LeafRef::Param(id))
        }
        Some(LeafRef::Input(name)) => {
            (bindings.get(&name).ok_or_else(|| Error::UnboundInput(name.clone()))?.clone(), LeafRef::Input(name))
        }
        None => return Err(Error::UnsupportedOp("finite differences on a non-leaf node")),
    };

    let n = base_value.len();
    let step = if max_coords >= n { 1 } else { n.div_ceil(max_coords) };
    let eval_at = |value: Tensor| -> Result<f64> {
        let out = match &leaf {
            LeafRef::Param(id) => {
                let src = Perturbed { base: params, id: *id, value };
                graph.evaluate(&src, bindings, &[output], true)?
            }
            LeafRef::Input(name) => {
                let mut b = bindings.clone();
                b.insert(name, value);
                graph.evaluate(params, &b, &[output], true)?
            }
        };
        Ok(out[0].item())
    };

    let mut worst: f64 = 0.0;
    for i in (0..n).step_by(step) {
        let mut plus = base_value.clone();
        plus.data_mut()[i] += eps;
        let mut minus = base_value.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

pub(crate) enum LeafRef {
    Param(ParamId),
    Input(String),
}
