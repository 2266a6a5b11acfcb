//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable op appends its output node and a backward rule to
//! the [`Graph`]. Node ids are assigned in creation order, so the tape is a
//! topological order by construction and [`Graph::backward`] replays it in
//! reverse. Ops whose inputs are all constants are evaluated but not
//! recorded.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op: maps the output gradient to one
/// gradient per input. Entries for inputs with `needs[i] == false` may be
/// `None`.
pub trait Backward<T: Scalar> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

impl<T, F> Backward<T> for F
where
    T: Scalar,
    F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        self(inputs, output, grad, needs)
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
}

struct Recorded<T: Scalar> {
    name: &'static str,
    inputs: Vec<Var>,
    output: Var,
    rule: Box<dyn Backward<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    ops: Vec<Recorded<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Names of the recorded ops in tape order.
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ops.iter().map(|op| op.name)
    }

    /// Appends `output` as the result of op `name` over `inputs`.
    pub fn record(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        rule: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let out = self.push(output, requires_grad);
        if requires_grad {
            self.ops.push(Recorded {
                name,
                inputs: inputs.to_vec(),
                output: out,
                rule: Box::new(rule),
            });
        }
        out
    }

    /// Checks the tape invariants: inputs precede outputs and every node
    /// is produced at most once.
    pub fn validate(&self) -> Result<()> {
        let mut produced = vec![false; self.nodes.len()];
        for op in &self.ops {
            let out = op.output.0;
            if out >= self.nodes.len() {
                return Err(Error::MalformedGraph(format!(
                    "op {} writes unknown node {out}",
                    op.name
                )));
            }
            if produced[out] {
                return Err(Error::MalformedGraph(format!("node {out} produced twice")));
            }
            produced[out] = true;
            if let Some(bad) = op.inputs.iter().find(|v| v.0 >= out) {
                return Err(Error::MalformedGraph(format!(
                    "cycle: op {} reads node {} which does not precede its output {out}",
                    op.name, bad.0
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode gradient of the scalar `loss` with respect to every
    /// node of the graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::NonScalarLoss(shape));
        }
        self.validate()?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(T::one()));
        }
        for op in self.ops.iter().rev() {
            if op.output.0 > loss.0 {
                continue;
            }
            let Some(grad_out) = grads[op.output.0].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                op.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = op
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads =
                op.rule
                    .backward(&inputs, &self.nodes[op.output.0].value, &grad_out, &needs);
            debug_assert_eq!(
                input_grads.len(),
                op.inputs.len(),
                "{} returned wrong arity",
                op.name
            );
            for ((v, g), need) in op.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.shape(*v), "{} gradient shape", op.name);
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the output gradient for callers that inspect intermediates.
            grads[op.output.0] = Some(grad_out);
        }
        Ok(Gradients { grads, shapes })
    }

    #[cfg(test)]
    pub(crate) fn corrupt_first_op_input(&mut self, v: Var) {
        self.ops[0].inputs[0] = v;
    }
}

/// Result of [`Graph::backward`]. Nodes the loss does not depend on report
/// a zero gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0]),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b}")));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_raw(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

/// Element-wise and reduction ops.
impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(
            "add",
            &[a, b],
            out,
            |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(g.clone()), Some(g.clone())]
            },
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(
            "sub",
            &[a, b],
            out,
            |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(g.clone()), Some(g.map(|v| -v))]
            },
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(
            "mul",
            &[a, b],
            out,
            |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                vec![
                    needs[0].then(|| zip_map(g, x[1], |g, y| g * y)),
                    needs[1].then(|| zip_map(g, x[0], |g, y| g * y)),
                ]
            },
        ))
    }

    /// `k · a` for a constant `k`.
    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.record(
            "scale",
            &[a],
            out,
            move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(g.map(|v| v * k))]
            },
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let out = Tensor::scalar(self.value(a).sum());
        self.record(
            "sum",
            &[a],
            out,
            move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(Tensor::full(shape, g.item()))]
            },
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.shape(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// `Σ k_i · s_i` over scalar nodes with constant weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, _) in terms {
            check_same("weighted_sum", self.shape(v), Shape::SCALAR)?;
        }
        for &(v, k) in terms {
            total += k * self.value(v).item();
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.record(
            "weighted_sum",
            &inputs,
            Tensor::scalar(total),
            move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                weights
                    .iter()
                    .map(|&k| Some(Tensor::scalar(k * g.item())))
                    .collect()
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.record(
            "relu",
            &[a],
            out,
            |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(zip_map(g, x[0], |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.record(
            "sigmoid",
            &[a],
            out,
            |_: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(zip_map(g, y, |g, y| g * y * (T::one() - y)))]
            },
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.record(
            "tanh",
            &[a],
            out,
            |_: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(zip_map(g, y, |g, y| g * (T::one() - y * y)))]
            },
        )
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
