//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward sweep. Nodes whose inputs do not require gradients
//! are stored as constants, so forward passes through frozen parameters
//! record nothing beyond their values.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::{permute_data, validate_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    Log,
    Square,
    Softplus,
}

#[derive(Debug, Clone)]
struct BmmSpec {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    a_stride: usize,
    b_stride: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Bmm(Var, Var, BmmSpec),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        d: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        classes: usize,
    },
    StraightThrough(Var),
    BinaryConcrete {
        logits: Var,
        slope: Vec<T>,
    },
    BernoulliLogProb {
        logits: Var,
        actions: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold valid tensors")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Constant copy of `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    // ---- matrix products ----------------------------------------------------

    /// `[m×k] @ [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let spec = BmmSpec {
            batch: 1,
            m: sa[0],
            k: sa[1],
            n: sb[1],
            trans_a: false,
            trans_b: false,
            a_stride: 0,
            b_stride: 0,
        };
        Ok(self.bmm_raw(a, b, spec, vec![sa[0], sb[1]]))
    }

    /// Batched product over matching leading axes, optionally transposing the
    /// last two axes of `b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let batch = sa[..r - 2].iter().product();
        let spec = BmmSpec {
            batch,
            m,
            k,
            n,
            trans_a: false,
            trans_b,
            a_stride: m * k,
            b_stride: k * n,
        };
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.bmm_raw(a, b, spec, shape))
    }

    fn bmm_raw(&mut self, a: Var, b: Var, s: BmmSpec, shape: Vec<usize>) -> Var {
        let mut out = vec![T::zero(); s.batch * s.m * s.n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            let (rsa, csa) = layout(s.trans_a, s.m, s.k);
            let (rsb, csb) = layout(s.trans_b, s.k, s.n);
            for bi in 0..s.batch {
                T::gemm(
                    s.m,
                    s.k,
                    s.n,
                    T::one(),
                    &av[bi * s.a_stride..],
                    rsa,
                    csa,
                    &bv[bi * s.b_stride..],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[bi * s.m * s.n..],
                    s.n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::Bmm(a, b, s), rg)
    }

    /// `x @ w + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d_in = *sx.last().unwrap();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sw[0] != d_in {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let rows = self.value(x).len() / d_in;
        let flat = self.reshape(x, &[rows, d_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add_suffix(y, b)?;
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &shape)
    }

    // ---- elementwise --------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_suffix", a, b)?;
        let bv = self.value(b);
        let m = bv.len();
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % m])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::AddSuffix(a, b), rg))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_suffix", a, b)?;
        let bv = self.value(b);
        let m = bv.len();
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % m])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::MulSuffix(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x + c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Tanh => |x| x.tanh(),
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |x| x.max(T::zero()),
            Unary::Gelu => gelu,
            Unary::Exp => |x| x.exp(),
            Unary::Log => |x| x.ln(),
            Unary::Square => |x| x * x,
            Unary::Softplus => softplus,
        };
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Unary(a, kind), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    // ---- normalisation --------------------------------------------------------

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xv[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Layer normalisation over the last axis without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::from_usize(d);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let rg = self.rg(x);
        let value = xhat.clone();
        self.push(shape, value, Op::LayerNorm { x, xhat, rstd, d }, rg)
    }

    // ---- shape ----------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = permute_data(self.value(x), &shape, perm)?;
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(out_shape, value, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let v = self.value(p);
                out.extend_from_slice(&v[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                sizes,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow [{start}, {}) exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            out,
            Op::Narrow {
                x,
                outer,
                n,
                inner,
                start,
                len,
            },
            rg,
        ))
    }

    // ---- reductions and losses ----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len());
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`;
    /// `logits` is `[batch × classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n_classes: c,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (b, &y) in labels.iter().enumerate() {
            let row = &lv[b * c..(b + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for j in 0..c {
                probs[b * c + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[y];
        }
        loss = loss / T::from_usize(labels.len());
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                classes: c,
            },
            rg,
        ))
    }

    /// Mean squared error against `target`, which is treated as a constant.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let t = self.detach(target);
        let d = self.sub(pred, t)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// One-hot of the argmax over the last axis in the forward pass; the
    /// gradient passes to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let shape = self.shape(soft).to_vec();
        let c = *shape.last().unwrap();
        let sv = self.value(soft);
        let mut out = vec![T::zero(); sv.len()];
        for (row, o) in sv.chunks(c).zip(out.chunks_mut(c)) {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            o[best] = T::one();
        }
        let rg = self.rg(soft);
        self.push(shape, out, Op::StraightThrough(soft), rg)
    }

    /// Relaxed Bernoulli over `(keep, drop)` logit pairs on the last axis.
    ///
    /// `noise` holds one logistic sample per pair (the difference of two
    /// standard Gumbels), so `keep = σ((l_keep − l_drop − noise) / τ)`; in hard
    /// mode the forward value is rounded to {0, 1} and the gradient is that of
    /// the relaxed value.
    pub fn binary_concrete(
        &mut self,
        logits: Var,
        noise: &[T],
        temperature: T,
        hard: bool,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if *shape.last().unwrap() != 2
            || shape.len() < 2
            || noise.len() * 2 != self.value(logits).len()
        {
            return Err(Error::shape("binary_concrete", &shape, &[noise.len(), 2]));
        }
        let lv = self.value(logits);
        let mut out = Vec::with_capacity(noise.len());
        let mut slope = Vec::with_capacity(noise.len());
        let half = T::of(0.5);
        for (pair, &n) in lv.chunks_exact(2).zip(noise) {
            let s = sigmoid((pair[0] - pair[1] - n) / temperature);
            slope.push(s * (T::one() - s) / temperature);
            out.push(if !hard {
                s
            } else if s >= half {
                T::one()
            } else {
                T::zero()
            });
        }
        let rg = self.rg(logits);
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.push(out_shape, out, Op::BinaryConcrete { logits, slope }, rg))
    }

    /// `Σ a·l − softplus(l)`: log-probability of binary `actions` under
    /// independent Bernoulli(sigmoid(logits)).
    pub fn bernoulli_log_prob(&mut self, logits: Var, actions: &[T]) -> Result<Var> {
        if actions.len() != self.value(logits).len() {
            return Err(Error::shape(
                "bernoulli_log_prob",
                self.shape(logits),
                &[actions.len()],
            ));
        }
        let lp = self
            .value(logits)
            .iter()
            .zip(actions)
            .map(|(&l, &a)| a * l - softplus(l))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![lp],
            Op::BernoulliLogProb {
                logits,
                actions: actions.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Bmm(a, b, s) => self.bmm_backward(*a, *b, s, g, grads),
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o - d)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |buf| {
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o = *o + d * y;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, &d), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o = *o + d * x;
                    }
                });
            }
            Op::AddSuffix(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| {
                    let m = buf.len();
                    for (j, &d) in g.iter().enumerate() {
                        buf[j % m] = buf[j % m] + d;
                    }
                });
            }
            Op::MulSuffix(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let m = bv.len();
                self.acc(grads, *a, |buf| {
                    for (j, (o, &d)) in buf.iter_mut().zip(g).enumerate() {
                        *o = *o + d * bv[j % m];
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (j, &d) in g.iter().enumerate() {
                        buf[j % m] = buf[j % m] + d * av[j];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *c)
                });
            }
            Op::AddScalar(a) => self.acc(grads, *a, |buf| add_into(buf, g)),
            Op::Unary(a, kind) => {
                let (xv, yv) = (self.value(*a), &node.value);
                let kind = *kind;
                self.acc(grads, *a, |buf| {
                    for j in 0..buf.len() {
                        let (x, y) = (xv[j], yv[j]);
                        let dydx = match kind {
                            Unary::Tanh => T::one() - y * y,
                            Unary::Sigmoid => y * (T::one() - y),
                            Unary::Relu => {
                                if x > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Gelu => gelu_grad(x),
                            Unary::Exp => y,
                            Unary::Log => T::one() / x,
                            Unary::Square => x + x,
                            Unary::Softplus => sigmoid(x),
                        };
                        buf[j] = buf[j] + g[j] * dydx;
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = &node.value;
                let (outer, n, inner) = (*outer, *n, *inner);
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                buf[at(j)] = buf[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, rstd, d } => {
                let d = *d;
                let dn = T::from_usize(d);
                self.acc(grads, *x, |buf| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mg = gr.iter().copied().sum::<T>() / dn;
                        let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            buf[r * d + j] = buf[r * d + j] + rs * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::Reshape(x) | Op::StraightThrough(x) => self.acc(grads, *x, |buf| add_into(buf, g)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &node.shape, &inv).expect("valid inverse permutation");
                self.acc(grads, *x, |buf| add_into(buf, &back));
            }
            Op::Concat {
                parts,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    self.acc(grads, p, |buf| {
                        for o in 0..*outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            add_into(&mut buf[o * sz * inner..(o + 1) * sz * inner], src);
                        }
                    });
                    offset += sz;
                }
            }
            Op::Narrow {
                x,
                outer,
                n,
                inner,
                start,
                len,
            } => {
                self.acc(grads, *x, |buf| {
                    for o in 0..*outer {
                        let base = (o * n + start) * inner;
                        add_into(
                            &mut buf[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |buf| buf.iter_mut().for_each(|o| *o = *o + g[0])),
            Op::Mean(x) => {
                let c = g[0] / T::from_usize(self.value(*x).len());
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|o| *o = *o + c));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                classes,
            } => {
                let scale = g[0] / T::from_usize(labels.len());
                self.acc(grads, *logits, |buf| {
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..*classes {
                            let target = if j == y { T::one() } else { T::zero() };
                            buf[b * classes + j] =
                                buf[b * classes + j] + scale * (probs[b * classes + j] - target);
                        }
                    }
                });
            }
            Op::BinaryConcrete { logits, slope } => {
                self.acc(grads, *logits, |buf| {
                    for (j, (&d, &k)) in g.iter().zip(slope).enumerate() {
                        buf[2 * j] = buf[2 * j] + d * k;
                        buf[2 * j + 1] = buf[2 * j + 1] - d * k;
                    }
                });
            }
            Op::BernoulliLogProb { logits, actions } => {
                let lv = self.value(*logits);
                self.acc(grads, *logits, |buf| {
                    for j in 0..buf.len() {
                        buf[j] = buf[j] + g[0] * (actions[j] - sigmoid(lv[j]));
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn bmm_backward(&self, a: Var, b: Var, s: &BmmSpec, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rsa, csa) = layout(s.trans_a, s.m, s.k);
        let (rsb, csb) = layout(s.trans_b, s.k, s.n);
        let (av, bv) = (self.value(a), self.value(b));
        let mn = s.m * s.n;
        // dA (m×k) = dC (m×n) @ op(B)^T (n×k), written through A's layout.
        self.acc(grads, a, |buf| {
            for bi in 0..s.batch {
                T::gemm(
                    s.m,
                    s.n,
                    s.k,
                    T::one(),
                    &g[bi * mn..],
                    s.n as isize,
                    1,
                    &bv[bi * s.b_stride..],
                    csb,
                    rsb,
                    T::one(),
                    &mut buf[bi * s.a_stride..],
                    rsa,
                    csa,
                );
            }
        });
        // dB (k×n) = op(A)^T (k×m) @ dC (m×n), written through B's layout.
        self.acc(grads, b, |buf| {
            for bi in 0..s.batch {
                T::gemm(
                    s.k,
                    s.m,
                    s.n,
                    T::one(),
                    &av[bi * s.a_stride..],
                    csa,
                    rsa,
                    &g[bi * mn..],
                    s.n as isize,
                    1,
                    T::one(),
                    &mut buf[bi * s.b_stride..],
                    rsb,
                    csb,
                );
            }
        });
    }
}

fn layout(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn add_into<T: Scalar>(buf: &mut [T], g: &[T]) {
    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(&t64(&[2, 2], &[1., 0., 0., 1.]));
        let a = tape.constant(&t64(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(&t64(&[2, 2], &[5., 6., 7., 8.]));
        let ia = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(ia), &[1., 2., 3., 4.]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = tape.constant(&t64(&[2], &[0., 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y)[1] - 0.75).abs() < 1e-12);
        let x = tape.constant(&t64(&[2], &[1000., 1000.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        assert!(matches!(
            tape.softmax(x, 1),
            Err(Error::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn square_grad_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1], &[3.0]), true);
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn cross_entropy_grad_is_p_minus_y() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 3], &[0.2, -1.0, 0.7]), true);
        let loss = tape.cross_entropy(x, &[2]).unwrap();
        let g = tape.backward(loss).unwrap();
        let p = tape.softmax(x, 1).unwrap();
        let pv = tape.value(p).to_vec();
        let expected = [pv[0], pv[1], pv[2] - 1.0];
        for (a, b) in g.get(x).unwrap().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_record_no_graph() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::full(&[2], 1.0));
        let b = tape.square(a);
        let s = tape.sum(b);
        assert!(!tape.requires_grad(s));
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            &Tensor::new(&[2, 2], vec![0.3, 0.7, 0.9, 0.1]).unwrap(),
            true,
        );
        let h = tape.straight_through(x);
        assert_eq!(tape.value(h), &[0.0, 1.0, 1.0, 0.0]);
        let w = tape.constant(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.mul(h, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1], &[2.0]), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0]);
    }
}
