//! Graph nodes and the reverse-mode sweep.
//!
//! Every differentiable operation records its parents and a backward closure.
//! Backward closures are themselves written in terms of [`Var`] operations, so
//! running [`grad`] with `create_graph = true` records the backward pass as a
//! new graph that can be differentiated again.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::tensor::Tensor;
use crate::GradError;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched on or off, restoring the previous mode afterwards.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

/// What a backward closure sees.
pub struct BackwardCtx<'a> {
    pub parents: &'a [Var],
    pub out: &'a Var,
    pub grad: &'a Var,
    needs: &'a [bool],
}

impl BackwardCtx<'_> {
    /// Whether parent `i` needs a gradient in this sweep.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Var>> + Send + Sync>;

struct GradFn {
    name: &'static str,
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

impl Drop for Node {
    // Unlink long parent chains iteratively instead of recursing through Arc drops.
    fn drop(&mut self) {
        let Some(gf) = self.grad_fn.take() else { return };
        let mut stack = gf.parents;
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(v.0) {
                if let Some(g) = node.grad_fn.take() {
                    stack.extend(g.parents);
                }
            }
        }
    }
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var(Arc<Node>);

impl Var {
    fn make(value: Tensor, requires_grad: bool, grad_fn: Option<GradFn>) -> Var {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var::make(value, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor) -> Var {
        Var::make(value, true, None)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    /// Records an operation. The node only joins the graph when recording is
    /// enabled and some parent requires a gradient.
    pub fn from_op(
        name: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Var>> + Send + Sync + 'static,
    ) -> Var {
        if is_grad_enabled() && parents.iter().any(Var::requires_grad) {
            Var::make(
                value,
                true,
                Some(GradFn { name, parents, backward: Box::new(backward) }),
            )
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the operation that produced this value, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    fn parents(&self) -> &[Var] {
        self.0.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[])
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

/// Gradients of `output` (seeded with ones) with respect to each of `inputs`.
///
/// `None` marks an input that `output` does not depend on. With
/// `create_graph` the returned gradients are themselves differentiable.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Result<Vec<Option<Var>>, GradError> {
    let seed = Var::constant(Tensor::ones(output.shape().to_vec()));
    grad_with_seed(output, &seed, inputs, create_graph)
}

pub fn grad_with_seed(
    output: &Var,
    seed: &Var,
    inputs: &[&Var],
    create_graph: bool,
) -> Result<Vec<Option<Var>>, GradError> {
    if seed.shape() != output.shape() {
        return Err(GradError::SeedShape {
            output: output.shape().to_vec(),
            seed: seed.shape().to_vec(),
        });
    }
    if !output.requires_grad() {
        return Ok(vec![None; inputs.len()]);
    }

    // Post-order over the recorded graph: parents precede children.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let targets: HashSet<u64> = inputs.iter().map(|v| v.id()).collect();
    let mut useful: HashSet<u64> = HashSet::new();
    for v in &order {
        if targets.contains(&v.id()) || v.parents().iter().any(|p| useful.contains(&p.id())) {
            useful.insert(v.id());
        }
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), seed.clone());
    with_grad_mode(create_graph, || -> Result<(), GradError> {
        for v in order.iter().rev() {
            if !useful.contains(&v.id()) {
                continue;
            }
            let Some(gf) = v.0.grad_fn.as_ref() else { continue };
            let g = if targets.contains(&v.id()) {
                grads.get(&v.id()).cloned()
            } else {
                grads.remove(&v.id())
            };
            let Some(g) = g else { continue };
            let needs: Vec<bool> = gf
                .parents
                .iter()
                .map(|p| p.requires_grad() && useful.contains(&p.id()))
                .collect();
            let ctx = BackwardCtx { parents: &gf.parents, out: v, grad: &g, needs: &needs };
            let pgrads = (gf.backward)(&ctx);
            debug_assert_eq!(pgrads.len(), gf.parents.len(), "backward of {} arity", gf.name);
            for ((p, pg), need) in gf.parents.iter().zip(pgrads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                if pg.shape() != p.shape() {
                    return Err(GradError::BackwardShape {
                        op: gf.name,
                        expected: p.shape().to_vec(),
                        got: pg.shape().to_vec(),
                    });
                }
                let acc = match grads.remove(&p.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(p.id(), acc);
            }
        }
        Ok(())
    })?;

    Ok(inputs.iter().map(|v| grads.get(&v.id()).cloned()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_under_no_grad_are_constants() {
        let x = Var::leaf(Tensor::scalar(2.0));
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
        assert!(is_grad_enabled());
    }

    #[test]
    fn unrelated_input_has_no_gradient() {
        let x = Var::leaf(Tensor::scalar(2.0));
        let z = Var::leaf(Tensor::scalar(5.0));
        let y = x.mul(&x);
        let g = grad(&y, &[&x, &z], false).unwrap();
        assert_eq!(g[0].as_ref().unwrap().item(), 4.0);
        assert!(g[1].is_none());
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Var::leaf(Tensor::scalar(1.5));
        let y = x.mul(&x).mul(&x);
        let dy = grad(&y, &[&x], true).unwrap()[0].clone().unwrap();
        assert!((dy.item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let d2y = grad(&dy, &[&x], false).unwrap()[0].clone().unwrap();
        assert!((d2y.item() - 6.0 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn long_chain_drops_without_overflow() {
        let x = Var::leaf(Tensor::scalar(1.0));
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.add_scalar(1e-6);
        }
        drop(y);
    }
}
