//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the record from the last node
//! to the first.

use std::cell::RefCell;
use std::rc::Rc;

use super::array::{gelu, gelu_grad, Array};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

type CustomBackward<T> = Box<dyn Fn(&Array<T>) -> Vec<Array<T>>>;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        xhat: Array<T>,
        inv_std: Vec<T>,
    },
    Gelu(usize),
    SliceCols {
        input: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        input: usize,
        index: Vec<usize>,
    },
    GroupMeanRows {
        input: usize,
        group: usize,
    },
    StackLast(Vec<usize>),
    Sum(usize),
    Custom {
        parents: Vec<usize>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::GroupMeanRows { .. } => "group_mean_rows",
            Op::StackLast(..) => "stack_last",
            Op::Sum(..) => "sum",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T> {
    value: Rc<Array<T>>,
    op: Op<T>,
}

/// Operation record for one forward/backward pass. Confined to one thread.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss.
    pub fn get(&self, var: Var<'_, T>) -> Array<T> {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Array<T> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[id]),
        }
    }

    /// Node ids in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the recorded operations, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    fn push(&self, value: Array<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Array<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Records a leaf (parameter or constant input).
    pub fn leaf(&self, value: Array<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    fn check_owner(&self, vars: &[Var<'_, T>]) -> Result<()> {
        if vars.iter().all(|v| std::ptr::eq(v.tape, self)) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to a different tape".into()))
        }
    }

    /// Concatenates 2-D variables along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        self.check_owner(parts)?;
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let rows = match values.first() {
            Some(v) => v.dims2("concat_cols")?.0,
            None => return Err(Error::Contract("concat_cols of nothing".into())),
        };
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, c) = v.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Array::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|v| v.id).collect())))
    }

    /// Concatenates 2-D variables along rows.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        self.check_owner(parts)?;
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let cols = match values.first() {
            Some(v) => v.dims2("concat_rows")?.1,
            None => return Err(Error::Contract("concat_rows of nothing".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            let (r, c) = v.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Array::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|v| v.id).collect())))
    }

    /// Stacks equally shaped variables along a new trailing axis.
    pub fn stack_last<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        self.check_owner(parts)?;
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Contract("stack_last of nothing".into()))?;
        for v in &values {
            first.expect_same_shape(v, "stack_last")?;
        }
        let k = values.len();
        let mut data = vec![T::zero(); first.len() * k];
        for (p, v) in values.iter().enumerate() {
            for (e, &x) in v.data().iter().enumerate() {
                data[e * k + p] = x;
            }
        }
        let mut shape = first.shape().to_vec();
        shape.push(k);
        let out = Array::new(shape, data)?;
        Ok(self.push(out, Op::StackLast(parts.iter().map(|v| v.id).collect())))
    }

    /// Records an operation whose backward pass is supplied by the caller:
    /// `backward` maps the output gradient to one gradient per parent.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Array<T>,
        backward: impl Fn(&Array<T>) -> Vec<Array<T>> + 'static,
    ) -> Result<Var<'t, T>> {
        self.check_owner(parents)?;
        Ok(self.push(
            value,
            Op::Custom {
                parents: parents.iter().map(|v| v.id).collect(),
                backward: Box::new(backward),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_owner(&[loss])?;
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array::ones(nodes[loss.id].value.shape()));
        let mut visited = Vec::with_capacity(loss.id + 1);

        for id in (0..=loss.id).rev() {
            visited.push(id);
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let contributions = local_gradients(&nodes, node, &g)?;
            grads[id] = Some(g);
            for (parent, contribution) in contributions {
                match &mut grads[parent] {
                    Some(acc) => acc.accumulate(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, visited })
    }
}

fn local_gradients<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Array<T>) -> Result<Vec<(usize, Array<T>)>> {
    let val = |id: usize| -> &Array<T> { &nodes[id].value };
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let ga = g.matmul(&val(*b).transpose()?)?;
            let gb = val(*a).transpose()?.matmul(g)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
        Op::AddRow(x, bias) => {
            let (rows, cols) = g.rows_last();
            let mut gb = vec![T::zero(); cols];
            for r in 0..rows {
                for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            vec![(*x, g.clone()), (*bias, Array::new(vec![cols], gb)?)]
        }
        Op::Scale(x, factor) => vec![(*x, g.scale(*factor))],
        Op::Transpose(x) => vec![(*x, g.transpose()?)],
        Op::Softmax { input, axis } => {
            let y = &node.value;
            let (outer, len, inner) = y.axis_extents(*axis, "softmax")?;
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: T = (0..len)
                        .map(|a| g.data()[base + a * inner] * y.data()[base + a * inner])
                        .sum();
                    for a in 0..len {
                        let at = base + a * inner;
                        gx[at] = y.data()[at] * (g.data()[at] - dot);
                    }
                }
            }
            vec![(*input, Array::new(y.shape().to_vec(), gx)?)]
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gamma = val(*gain);
            let (rows, cols) = g.rows_last();
            let n = T::of(cols as f64);
            let mut gx = vec![T::zero(); g.len()];
            let mut ggain = vec![T::zero(); cols];
            let mut gbias = vec![T::zero(); cols];
            for r in 0..rows {
                let gr = g.row(r);
                let hr = xhat.row(r);
                let mut sum_d = T::zero();
                let mut sum_dh = T::zero();
                for c in 0..cols {
                    let d = gr[c] * gamma.data()[c];
                    sum_d += d;
                    sum_dh += d * hr[c];
                    ggain[c] += gr[c] * hr[c];
                    gbias[c] += gr[c];
                }
                for c in 0..cols {
                    let d = gr[c] * gamma.data()[c];
                    gx[r * cols + c] = inv_std[r] / n * (n * d - sum_d - hr[c] * sum_dh);
                }
            }
            vec![
                (*input, Array::new(g.shape().to_vec(), gx)?),
                (*gain, Array::new(vec![cols], ggain)?),
                (*bias, Array::new(vec![cols], gbias)?),
            ]
        }
        Op::Gelu(x) => {
            let gx = val(*x).zip_map(g, "gelu", |x, g| gelu_grad(x) * g)?;
            vec![(*x, gx)]
        }
        Op::SliceCols { input, start } => {
            let (rows, cols) = val(*input).dims2("slice_cols")?;
            let (_, width) = g.dims2("slice_cols")?;
            let mut gx = Array::zeros(&[rows, cols]);
            for r in 0..rows {
                gx.data_mut()[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
            }
            vec![(*input, gx)]
        }
        Op::ConcatCols(parts) => {
            let (rows, _) = g.dims2("concat_cols")?;
            let mut offset = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let (_, w) = val(p).dims2("concat_cols")?;
                let gp = Array::from_fn(&[rows, w], |k| g.row(k / w)[offset + k % w]);
                out.push((p, gp));
                offset += w;
            }
            out
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = val(p).len();
                let gp = Array::new(val(p).shape().to_vec(), g.data()[offset..offset + len].to_vec())?;
                out.push((p, gp));
                offset += len;
            }
            out
        }
        Op::GatherRows { input, index } => {
            let source = val(*input);
            let (_, cols) = source.rows_last();
            let mut gx = Array::zeros(source.shape());
            for (r, &src) in index.iter().enumerate() {
                for c in 0..cols {
                    gx.data_mut()[src * cols + c] += g.data()[r * cols + c];
                }
            }
            vec![(*input, gx)]
        }
        Op::GroupMeanRows { input, group } => {
            let (rows, cols) = val(*input).dims2("group_mean_rows")?;
            let inv = T::one() / T::of(*group as f64);
            let gx = Array::from_fn(&[rows, cols], |k| g.data()[(k / cols) / group * cols + k % cols] * inv);
            vec![(*input, gx)]
        }
        Op::StackLast(parts) => {
            let k = parts.len();
            parts
                .iter()
                .enumerate()
                .map(|(p, &id)| {
                    let shape = val(id).shape().to_vec();
                    let gp = Array::from_fn(&shape, |e| g.data()[e * k + p]);
                    (id, gp)
                })
                .collect()
        }
        Op::Sum(x) => vec![(*x, Array::full(val(*x).shape(), g.data()[0]))],
        Op::Custom { parents, backward } => {
            let parts = backward(g);
            if parts.len() != parents.len() {
                return Err(Error::Contract(format!(
                    "custom op returned {} gradients for {} parents",
                    parts.len(),
                    parents.len()
                )));
            }
            parents.iter().copied().zip(parts).collect()
        }
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(self) -> Rc<Array<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(self, other: Var<'t, T>) -> Result<()> {
        self.tape.check_owner(&[other])
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    // Fallible, so not `std::ops::Add`.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let out = self.value().add(&other.value())?;
        Ok(self.tape.push(out, Op::Add(self.id, other.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let out = self.value().mul(&other.value())?;
        Ok(self.tape.push(out, Op::Mul(self.id, other.id)))
    }

    /// Adds a bias vector to every row (last axis).
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias)?;
        let x = self.value();
        let b = bias.value();
        let (rows, cols) = x.rows_last();
        if b.shape() != [cols] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = (*x).clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] += b.data()[c];
            }
        }
        Ok(self.tape.push(out, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().scale(factor);
        self.tape.push(out, Op::Scale(self.id, factor))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose()?;
        Ok(self.tape.push(out, Op::Transpose(self.id)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.value().softmax(axis)?;
        Ok(self.tape.push(out, Op::Softmax { input: self.id, axis }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        if eps <= T::zero() {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        let (out, inv_std, xhat) = self.value().layer_norm_parts(&gain.value(), &bias.value(), eps)?;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                input: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(self) -> Var<'t, T> {
        let out = self.value().map(gelu);
        self.tape.push(out, Op::Gelu(self.id))
    }

    /// Columns `start..start + width` of a 2-D variable.
    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, cols) = x.dims2("slice_cols")?;
        if start + width > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let out = Array::from_fn(&[rows, width], |k| x.row(k / width)[start + k % width]);
        Ok(self.tape.push(out, Op::SliceCols { input: self.id, start }))
    }

    /// Rows of a 2-D variable (or entries of a vector, as 1-row slices) picked by index.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, cols) = x.rows_last();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = Array::from_fn(&[index.len(), cols], |k| x.row(index[k / cols])[k % cols]);
        Ok(self.tape.push(
            out,
            Op::GatherRows {
                input: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Averages consecutive groups of `group` rows.
    pub fn group_mean_rows(self, group: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, cols) = x.dims2("group_mean_rows")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::Shape {
                op: "group_mean_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![group],
            });
        }
        let inv = T::one() / T::of(group as f64);
        let mut out = Array::zeros(&[rows / group, cols]);
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r / group * cols + c] += x.row(r)[c] * inv;
            }
        }
        Ok(self.tape.push(out, Op::GroupMeanRows { input: self.id, group }))
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Array::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id))
    }
}
