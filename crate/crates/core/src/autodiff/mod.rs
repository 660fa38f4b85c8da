//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it executes, keeping the forward
//! value of each node. [`Tape::backward`] then walks the nodes in reverse
//! recording order (which is a topological order by construction) and
//! accumulates adjoints into every node that depends on a trainable leaf.
//!
//! ```
//! use fusioninn::autodiff::Tape;
//! use fusioninn::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let root = tape.sum(sq).unwrap();
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;

use std::rc::Rc;

pub use gradcheck::{
    finite_diff_check, GradCheckEntry, GradCheckError, GradCheckOptions, GradCheckReport,
};

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use kernels::ConvGeometry;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom_unary`]: `(input, output, grad_output) -> grad_input`.
pub type CustomBackward<T> = Rc<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T>>;

/// A backward rule that can be deliberately corrupted to exercise gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultSite {
    ConvKernel,
    ConvBias,
    Exp,
    Sigmoid,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geo: ConvGeometry,
    },
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    Logit {
        a: Var,
        eps: T,
    },
    SoftClamp {
        a: Var,
        scale: T,
    },
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather {
        a: Var,
        index: Rc<Vec<usize>>,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    FilterValid {
        a: Var,
        taps: Rc<Vec<T>>,
        dims: [usize; 4],
    },
    PairwiseSqDist(Var, Var),
    Custom {
        a: Var,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the root with respect to `v`; zeros when `v` is unused.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Append-only record of primitive operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<(FaultSite, T)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward output of one primitive by `scale`. Only useful as
    /// a negative control for gradient checks.
    pub fn inject_fault(&mut self, site: FaultSite, scale: T) {
        self.fault = Some((site, scale));
    }

    fn fault_scale(&self, site: FaultSite) -> Option<T> {
        match self.fault {
            Some((s, k)) if s == site => Some(k),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: (usize, usize),
    ) -> Result<Var, TensorError> {
        let geo = ConvGeometry::new(self.value(input), self.value(kernel), self.value(bias), padding)?;
        let data = kernels::conv2d_forward(
            &geo,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = finite("conv2d", Tensor::new(geo.out_shape().to_vec(), data)?)?;
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geo,
            },
            value,
            rg,
        ))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let value = finite(name, self.value(a).map(f))?;
        let rg = self.requires(a);
        Ok(self.push(op, value, rg))
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, T::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(x / (1 - x))` after clamping `x` to `[eps, 1 - eps]`.
    pub fn logit(&mut self, a: Var, eps: T) -> Result<Var, TensorError> {
        self.unary("logit", a, move |x| logit(x, eps), Op::Logit { a, eps })
    }

    /// Smooth bound `c * (2/pi) * atan(x / c)`, which stays inside `(-c, c)`.
    pub fn soft_clamp(&mut self, a: Var, scale: T) -> Result<Var, TensorError> {
        let k = scale * T::FRAC_2_PI();
        self.unary(
            "soft_clamp",
            a,
            move |x| k * (x / scale).atan(),
            Op::SoftClamp { a, scale },
        )
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        self.unary("scale", a, move |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        self.unary("add_scalar", a, move |x| x + s, Op::AddScalar(a))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let value = finite(name, va.zip_map(vb, f)?)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Row-major sequential sum to a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let value = finite("sum", Tensor::scalar(s))?;
        let rg = self.requires(a);
        Ok(self.push(Op::Sum(a), value, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let n = T::from_usize(t.numel()).unwrap();
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let value = finite("mean", Tensor::scalar(s))?;
        let rg = self.requires(a);
        Ok(self.push(Op::Mean(a), value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// `out[i] = a[index[i]]` with output shape `shape`.
    fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var, TensorError> {
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.requires(a);
        Ok(self.push(
            Op::Gather {
                a,
                index: Rc::new(index),
            },
            value,
            rg,
        ))
    }

    /// Rearranges each 2x2 spatial patch into four channels
    /// (top-left, top-right, bottom-left, bottom-right).
    pub fn squeeze2x2(&mut self, a: Var) -> Result<Var, TensorError> {
        let [b, c, h, w] = self.value(a).dims4("squeeze2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::contract(
                "squeeze2x2",
                format!("spatial size {h}x{w} must be even"),
            ));
        }
        let index = kernels::squeeze_index([b, c, h, w]);
        self.gather(a, index, vec![b, 4 * c, h / 2, w / 2])
    }

    /// Exact inverse of [`Tape::squeeze2x2`].
    pub fn unsqueeze2x2(&mut self, a: Var) -> Result<Var, TensorError> {
        let [b, c4, h, w] = self.value(a).dims4("unsqueeze2x2")?;
        if c4 % 4 != 0 {
            return Err(TensorError::contract(
                "unsqueeze2x2",
                format!("channel count {c4} must be a multiple of 4"),
            ));
        }
        let fwd = kernels::squeeze_index([b, c4 / 4, 2 * h, 2 * w]);
        let mut index = vec![0; fwd.len()];
        for (squeezed, &plain) in fwd.iter().enumerate() {
            index[plain] = squeezed;
        }
        self.gather(a, index, vec![b, c4 / 4, 2 * h, 2 * w])
    }

    /// `out[:, i] = a[:, perm[i]]`.
    pub fn permute_channels(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let [b, c, h, w] = self.value(a).dims4("permute_channels")?;
        if !is_permutation(perm, c) {
            return Err(TensorError::contract(
                "permute_channels",
                format!("{perm:?} is not a permutation of {c} channels"),
            ));
        }
        let plane = h * w;
        let mut index = Vec::with_capacity(b * c * plane);
        for bi in 0..b {
            for &src in perm {
                let base = (bi * c + src) * plane;
                index.extend(base..base + plane);
            }
        }
        self.gather(a, index, vec![b, c, h, w])
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let [b, c, h, w] = self.value(a).dims4("slice_channels")?;
        if start + len > c || len == 0 {
            return Err(TensorError::contract(
                "slice_channels",
                format!("channels {start}..{} out of range for {c}", start + len),
            ));
        }
        let plane = h * w;
        let mut index = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            index.extend(base..base + len * plane);
        }
        self.gather(a, index, vec![b, len, h, w])
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [ba, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [bb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let plane = ha * wa;
        let (a_inner, b_inner) = (ca * plane, cb * plane);
        let mut data = Vec::with_capacity(ba * (a_inner + b_inner));
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..ba {
                data.extend_from_slice(&da[bi * a_inner..(bi + 1) * a_inner]);
                data.extend_from_slice(&db[bi * b_inner..(bi + 1) * b_inner]);
            }
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::Concat {
                a,
                b,
                outer: ba,
                a_inner,
                b_inner,
            },
            value,
            rg,
        ))
    }

    /// Separable filter applied to every channel, valid region only.
    pub fn filter_valid(&mut self, a: Var, taps: &[T]) -> Result<Var, TensorError> {
        let dims = self.value(a).dims4("filter_valid")?;
        let k = taps.len();
        if k == 0 || dims[2] < k || dims[3] < k {
            return Err(TensorError::contract(
                "filter_valid",
                format!("{k}-tap filter does not fit a {}x{} image", dims[2], dims[3]),
            ));
        }
        let data = kernels::filter_valid_forward(dims, taps, self.value(a).data());
        let shape = vec![dims[0], dims[1], dims[2] + 1 - k, dims[3] + 1 - k];
        let value = finite("filter_valid", Tensor::new(shape, data)?)?;
        let rg = self.requires(a);
        Ok(self.push(
            Op::FilterValid {
                a,
                taps: Rc::new(taps.to_vec()),
                dims,
            },
            value,
            rg,
        ))
    }

    /// `out[i, j] = |a_i - b_j|^2` for row sets `a: [n, d]` and `b: [m, d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_sq_dist",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = &da[i * d..(i + 1) * d];
            for j in 0..m {
                let rb = &db[j * d..(j + 1) * d];
                out.push(ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| {
                    let e = x - y;
                    s + e * e
                }));
            }
        }
        let value = finite("pairwise_sq_dist", Tensor::new(vec![n, m], out)?)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::PairwiseSqDist(a, b), value, rg))
    }

    /// Elementwise op with caller-supplied forward and backward rules.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(T) -> T,
        backward: CustomBackward<T>,
    ) -> Result<Var, TensorError> {
        self.unary("custom", a, forward, Op::Custom { a, backward })
    }

    /// Propagates adjoints from a scalar `root`. A tape can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(root).numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.shape(root)),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(
        &self,
        id: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.requires(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(a.data()).map(|(&gi, &ai)| f(gi, ai)).collect(),
            )
            .expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geo,
            } => {
                let (gi, mut gk, mut gb) = kernels::conv2d_backward(
                    geo,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                );
                if let Some(k) = self.fault_scale(FaultSite::ConvKernel) {
                    gk.iter_mut().for_each(|v| *v *= k);
                }
                if let Some(k) = self.fault_scale(FaultSite::ConvBias) {
                    gb.iter_mut().for_each(|v| *v *= k);
                }
                send(*input, Tensor::new(self.shape(*input).to_vec(), gi)?);
                send(*kernel, Tensor::new(self.shape(*kernel).to_vec(), gk)?);
                send(*bias, Tensor::new(self.shape(*bias).to_vec(), gb)?);
            }
            Op::Relu(a) => {
                let t = zip(self.value(*a), &|gi, x| if x > T::zero() { gi } else { T::zero() });
                send(*a, t);
            }
            Op::Exp(a) => {
                let k = self.fault_scale(FaultSite::Exp).unwrap_or(T::one());
                send(*a, zip(out, &|gi, y| gi * y * k));
            }
            Op::Sigmoid(a) => {
                let k = self.fault_scale(FaultSite::Sigmoid).unwrap_or(T::one());
                send(*a, zip(out, &|gi, y| gi * y * (T::one() - y) * k));
            }
            Op::Logit { a, eps } => {
                let (lo, hi) = (*eps, T::one() - *eps);
                let t = zip(self.value(*a), &|gi, x| {
                    if x < lo || x > hi {
                        T::zero()
                    } else {
                        gi / (x * (T::one() - x))
                    }
                });
                send(*a, t);
            }
            Op::SoftClamp { a, scale } => {
                let c = *scale;
                let t = zip(self.value(*a), &|gi, x| {
                    let r = x / c;
                    gi * T::FRAC_2_PI() / (T::one() + r * r)
                });
                send(*a, t);
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                send(*a, zip(self.value(*a), &|gi, x| two * x * gi));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = zip(self.value(*b), &|gi, y| gi * y);
                let gb = zip(self.value(*a), &|gi, x| gi * x);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                let ga = zip(vb, &|gi, y| gi / y);
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .zip(vb.data())
                        .map(|((&gi, &q), &y)| -gi * q / y)
                        .collect(),
                )?;
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale(a, s) => {
                let s = *s;
                send(*a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Sum(a) => {
                send(*a, Tensor::full(self.shape(*a), g.item()));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel()).unwrap();
                send(*a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::Reshape(a) => send(*a, g.reshape(self.shape(*a))?),
            Op::Gather { a, index } => {
                let mut t = Tensor::zeros(self.shape(*a));
                let d = t.data_mut();
                for (&i, &gi) in index.iter().zip(g.data()) {
                    d[i] += gi;
                }
                send(*a, t);
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                let row = a_inner + b_inner;
                for bi in 0..*outer {
                    let chunk = &g.data()[bi * row..(bi + 1) * row];
                    ga.extend_from_slice(&chunk[..*a_inner]);
                    gb.extend_from_slice(&chunk[*a_inner..]);
                }
                send(*a, Tensor::new(self.shape(*a).to_vec(), ga)?);
                send(*b, Tensor::new(self.shape(*b).to_vec(), gb)?);
            }
            Op::FilterValid { a, taps, dims } => {
                let gi = kernels::filter_valid_backward(*dims, taps, g.data());
                send(*a, Tensor::new(dims.to_vec(), gi)?);
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, d) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[0];
                let two = T::of(2.0);
                let mut ga = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); m * d];
                for i in 0..n {
                    let ra = &va.data()[i * d..(i + 1) * d];
                    for j in 0..m {
                        let c = two * g.data()[i * m + j];
                        if c == T::zero() {
                            continue;
                        }
                        let rb = &vb.data()[j * d..(j + 1) * d];
                        for k in 0..d {
                            let e = c * (ra[k] - rb[k]);
                            ga[i * d + k] += e;
                            gb[j * d + k] -= e;
                        }
                    }
                }
                send(*a, Tensor::new(vec![n, d], ga)?);
                send(*b, Tensor::new(vec![m, d], gb)?);
            }
            Op::Custom { a, backward } => {
                let t = backward(self.value(*a), out, g);
                send(*a, t);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn logit<T: Scalar>(x: T, eps: T) -> T {
    let x = x.max(eps).min(T::one() - eps);
    (x / (T::one() - x)).ln()
}

pub(crate) fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct nested-loop cross-correlation with zero padding.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        bias: &Tensor<f64>,
        pad: usize,
    ) -> Tensor<f64> {
        let [b, c, h, w] = x.dims4("").unwrap();
        let [o, _, kh, kw] = k.dims4("").unwrap();
        let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let mut out = Tensor::zeros(&[b, o, oh, ow]);
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = bias.data()[oi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let (iy, ix) = (iy as usize, ix as usize);
                                    s += x.data()[((bi * c + ci) * h + iy) * w + ix]
                                        * k.data()[((oi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oi) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        }
    }

    #[test]
    fn conv_box_sum_of_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, (1, 1)).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v.data()[4], 9.0);
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[1, 1, 4, 5], lcg(1));
        let mut kv = Tensor::zeros(&[1, 1, 3, 3]);
        kv.data_mut()[4] = 1.0;
        let x = tape.constant(xv.clone());
        let k = tape.constant(kv);
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, (1, 1)).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let xv = Tensor::from_fn(&[1, 2, 4, 4], lcg(7));
        let kv = Tensor::from_fn(&[3, 2, 3, 3], lcg(8));
        let bv = Tensor::from_fn(&[3], lcg(9));
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let k = tape.constant(kv.clone());
        let b = tape.constant(bv.clone());
        let y = tape.conv2d(x, k, b, (1, 1)).unwrap();
        let oracle = conv_oracle(&xv, &kv, &bv, 1);
        assert!(tape.value(y).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        match tape.conv2d(x, k, b, (1, 1)) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 2, 4, 4]);
                assert_eq!(right, vec![1, 3, 3, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        let h = tape.constant(Tensor::scalar(0.5));
        let l = tape.logit(h, 1e-6).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn sigmoid_logit_compose_to_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[50], |i| -6.0 + 12.0 * i as f64 / 49.0));
        let s = tape.sigmoid(x).unwrap();
        let back = tape.logit(s, 1e-6).unwrap();
        assert!(tape.value(back).max_abs_diff(tape.value(x)) < 1e-9);
        let p = tape.constant(Tensor::from_fn(&[50], |i| 0.01 + 0.98 * i as f64 / 49.0));
        let l = tape.logit(p, 1e-6).unwrap();
        let s2 = tape.sigmoid(l).unwrap();
        assert!(tape.value(s2).max_abs_diff(tape.value(p)) < 1e-12);
    }

    #[test]
    fn logit_clamps_saturated_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        let l = tape.logit(x, 1e-6).unwrap();
        let v = tape.value(l).data();
        assert!(v[0].is_finite() && v[1].is_finite());
        assert!((v[0] + v[1]).abs() < 1e-9);
    }

    #[test]
    fn exp_overflow_is_a_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0f64));
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn exp_backward_at_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0f64));
        let y = tape.exp(x).unwrap();
        let grads = tape.backward(y).unwrap();
        let analytic = grads.wrt(x).item();
        let h = 1e-5;
        let numeric = ((1.0f64 + h).exp() - (1.0 - h).exp()) / (2.0 * h);
        assert!((analytic - std::f64::consts::E).abs() < 1e-12);
        assert!((analytic - numeric).abs() < 1e-8);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(a).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);
        let h = tape.constant(Tensor::full(&[2, 3], 0.5));
        let m = tape.mean(h).unwrap();
        assert_eq!(tape.value(m).item(), 0.5);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let root = tape.sum(sq).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0f64));
        let s = tape.sigmoid(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(w).item(), 0.25);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(a).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0f64));
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[-1.0, 0.0, 1.0]));
        let r = tape.relu(a).unwrap();
        let s = tape.sum(r).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn squeeze_layout_and_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| {
            let (c, r, col) = (i / 16, (i / 4) % 4, i % 4);
            (100 * c + 10 * r + col) as f64
        }));
        let s = tape.squeeze2x2(x).unwrap();
        assert_eq!(tape.shape(s), &[1, 8, 2, 2]);
        assert_eq!(tape.value(s).data()[..4], [0.0, 2.0, 20.0, 22.0]);
        assert_eq!(tape.value(s).data()[4..8], [1.0, 3.0, 21.0, 23.0]);
        assert_eq!(tape.value(s).data()[16..20], [100.0, 102.0, 120.0, 122.0]);
        let u = tape.unsqueeze2x2(s).unwrap();
        assert_eq!(tape.value(u), tape.value(x));
    }

    #[test]
    fn squeeze_rejects_odd_sizes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 1, 3, 4]));
        assert!(tape.squeeze2x2(x).is_err());
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn permute_and_concat_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 1, 1], |i| i as f64));
        let p = tape.permute_channels(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 0.0, 1.0, 5.0, 3.0, 4.0]);
        let a = tape.slice_channels(x, 0, 1).unwrap();
        let b = tape.slice_channels(x, 1, 2).unwrap();
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
        assert!(tape.permute_channels(x, &[0, 0, 1]).is_err());
    }
}
