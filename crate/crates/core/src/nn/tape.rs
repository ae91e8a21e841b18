//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value (plus whatever it
//! needs for the backward pass) and its parents. [`Tape::backward`] walks the
//! nodes in reverse and consumes the tape.

use rand::Rng;

use crate::error::{Error, Result};

use super::{ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Dropout(Var),
    Sum(Var),
    Mean(Var),
    TanhRecurrence {
        xw: Var,
        w_hh: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    // op-specific cache for the backward pass
    aux: Vec<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, keyed by leaf variable and by
/// parameter id.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(Var, Vec<T>)>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, g)| g.as_slice())
    }

    pub fn param(&self, id: usize) -> Option<&[T]> {
        self.params.get(id).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_slots(&self) -> &[Option<Vec<T>>] {
        &self.params
    }

    /// Scale every gradient by `factor`.
    pub fn scale(&mut self, factor: T) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * factor);
        }
        for (_, g) in &mut self.leaves {
            g.iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    /// Euclidean norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, aux: Vec<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            aux,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, Vec::new(), false)
    }

    /// Free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, Vec::new(), true)
    }

    /// Copy parameter `id` of `store` onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), Vec::new(), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            Vec::new(),
            ng,
        ))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        Ok(va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), Vec::new(), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), Vec::new(), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), Vec::new(), ng))
    }

    /// `a[r×c] + b[c]`, adding `b` to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(b).len() != c {
            return Err(shape_err(
                "add_row",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(bias).for_each(|(x, &y)| *x = *x + y);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::AddRow(a, b),
            Vec::new(),
            ng,
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(a).map(|x| x * f);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), Vec::new(), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), Vec::new(), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), Vec::new(), ng)
    }

    /// Row-wise softmax of a matrix (the last axis). With `causal`, row `i` only
    /// spans columns `0..=i`; masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if c == 0 {
            return Err(Error::InvalidArgument("softmax over an empty axis".into()));
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let lim = if causal { (i + 1).min(c) } else { c };
            softmax_into(&self.value(a).row(i)[..lim], &mut out[i * c..i * c + lim]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::Softmax(a),
            Vec::new(),
            ng,
        ))
    }

    /// Row-wise layer normalization with learned `gain` and `bias` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err(
                "layer_norm",
                self.value(x).shape(),
                self.value(gain).shape(),
            ));
        }
        let eps = T::lit(eps);
        let n = T::from_usize(c).unwrap();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); r * c];
        // aux: normalized rows followed by per-row inverse std
        let mut aux = vec![T::zero(); r * c + r];
        for i in 0..r {
            let row = self.value(x).row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                aux[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
            aux[r * c + i] = inv;
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm { x, gain, bias },
            aux,
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q[Tq×d]`, `k[Tk×d]`, `v[Tk×d]`. Head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`; the result has the heads concatenated back
    /// into `Tq×d`. With `causal`, query `i` sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, d) = self.value(q).dims2()?;
        let (tk, dk) = self.value(k).dims2()?;
        if dk != d || self.value(v).shape() != self.value(k).shape() {
            return Err(shape_err(
                "attention",
                self.value(q).shape(),
                self.value(k).shape(),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("model dimension {d} is not divisible by {heads} heads"),
            ));
        }
        let hd = d / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); tq * d];
        let mut probs = vec![T::zero(); heads * tq * tk];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..tq {
                let lim = if causal { (i + 1).min(tk) } else { tk };
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i) * tk + lim];
                let qi = &qd[i * d + off..i * d + off + hd];
                for (j, s) in p.iter_mut().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + hd];
                    *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(p);
                let oi = &mut out[i * d + off..i * d + off + hd];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + hd];
                    oi.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + pj * x);
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![tq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
            },
            probs,
            ng,
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, laid out
    /// `heads × Tq × Tk`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match self.nodes[v.0].op {
            Op::Attention { .. } => Some(&self.nodes[v.0].aux),
            _ => None,
        }
    }

    /// Mean over rows of `−log softmax(logits)[target]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r {
            return Err(Error::Shape(format!(
                "cross_entropy: {r} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: bad, len: c });
        }
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = self.value(logits).row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total = total + (lse - row[t]);
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::from_usize(r.max(1)).unwrap();
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            probs,
            ng,
        ))
    }

    /// Inverted dropout. `rng = None` means evaluation mode (identity).
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {p} not in [0, 1)"
            )));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(&a, &m)| a * m)
                .collect(),
        )?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Dropout(x), mask, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), Vec::new(), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.value(a).data().iter().copied().sum::<T>() / n;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), Vec::new(), ng)
    }

    /// Elman recurrence `h_t = tanh(xw_t + h_{t−1}·w_hh)` with `h_{−1} = 0`.
    /// `xw` is `T×H` (input projection plus bias, precomputed), `w_hh` is `H×H`.
    pub fn tanh_recurrence(&mut self, xw: Var, w_hh: Var) -> Result<Var> {
        let (t, h) = self.value(xw).dims2()?;
        if self.value(w_hh).dims2()? != (h, h) {
            return Err(shape_err(
                "tanh_recurrence",
                self.value(xw).shape(),
                self.value(w_hh).shape(),
            ));
        }
        let mut out = self.value(xw).data().to_vec();
        let w = self.value(w_hh).data();
        for step in 0..t {
            if step > 0 {
                let (prev, cur) = out.split_at_mut(step * h);
                T::gemm(
                    1,
                    h,
                    h,
                    &prev[(step - 1) * h..],
                    false,
                    w,
                    false,
                    &mut cur[..h],
                    true,
                );
            }
            out[step * h..(step + 1) * h]
                .iter_mut()
                .for_each(|x| *x = x.tanh());
        }
        let ng = self.needs(xw) || self.needs(w_hh);
        Ok(self.push(
            Tensor::new(vec![t, h], out)?,
            Op::TanhRecurrence { xw, w_hh },
            Vec::new(),
            ng,
        ))
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = Vec::new();
        let mut params: Vec<Option<Vec<T>>> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let need = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Leaf => leaves.push((Var(idx), g)),
                Op::Param(id) => {
                    if params.len() <= *id {
                        params.resize_with(id + 1, || None);
                    }
                    match &mut params[*id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        slot => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let n = val(*b).shape()[1];
                    if need(*a) {
                        let ga = add_into(&mut grads[a.0], m * k);
                        T::gemm(m, n, k, &g, false, val(*b).data(), true, ga, true);
                    }
                    if need(*b) {
                        let gb = add_into(&mut grads[b.0], k * n);
                        T::gemm(k, m, n, val(*a).data(), true, &g, false, gb, true);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    if need(*a) {
                        let ga = add_into(&mut grads[a.0], g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + y);
                    }
                    if need(*b) {
                        let gb = add_into(&mut grads[b.0], g.len());
                        gb.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + sign * y);
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        let other = val(*b).data();
                        let ga = add_into(&mut grads[a.0], g.len());
                        for i in 0..g.len() {
                            ga[i] = ga[i] + g[i] * other[i];
                        }
                    }
                    if need(*b) {
                        let other = val(*a).data();
                        let gb = add_into(&mut grads[b.0], g.len());
                        for i in 0..g.len() {
                            gb[i] = gb[i] + g[i] * other[i];
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    let c = val(*b).len();
                    if need(*a) {
                        let ga = add_into(&mut grads[a.0], g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + y);
                    }
                    if need(*b) {
                        let gb = add_into(&mut grads[b.0], c);
                        for row in g.chunks_exact(c) {
                            gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let f = T::lit(*f);
                    let ga = add_into(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + f * y);
                }
                Op::Relu(a) => {
                    let input = val(*a).data();
                    let ga = add_into(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        if input[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = add_into(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                }
                Op::Softmax(a) => {
                    let (r, c) = node.value.dims2()?;
                    let y = node.value.data();
                    let ga = add_into(&mut grads[a.0], g.len());
                    for i in 0..r {
                        let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        let dot = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum::<T>();
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (r, c) = node.value.dims2()?;
                    let xhat = &node.aux[..r * c];
                    let inv = &node.aux[r * c..];
                    if need(*gain) {
                        let gg = add_into(&mut grads[gain.0], c);
                        for i in 0..r * c {
                            gg[i % c] = gg[i % c] + g[i] * xhat[i];
                        }
                    }
                    if need(*bias) {
                        let gb = add_into(&mut grads[bias.0], c);
                        for i in 0..r * c {
                            gb[i % c] = gb[i % c] + g[i];
                        }
                    }
                    if need(*x) {
                        let gain_v = val(*gain).data();
                        let n = T::from_usize(c).unwrap();
                        let gx = add_into(&mut grads[x.0], r * c);
                        let mut dxh = vec![T::zero(); c];
                        for i in 0..r {
                            let xh = &xhat[i * c..(i + 1) * c];
                            for j in 0..c {
                                dxh[j] = g[i * c + j] * gain_v[j];
                            }
                            let s1 = dxh.iter().copied().sum::<T>();
                            let s2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                            for j in 0..c {
                                gx[i * c + j] =
                                    gx[i * c + j] + inv[i] / n * (n * dxh[j] - s1 - xh[j] * s2);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    causal,
                } => {
                    let (tq, d) = val(*q).dims2()?;
                    let tk = val(*k).shape()[0];
                    let hd = d / heads;
                    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
                    let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                    let probs = &node.aux;
                    let mut gq = vec![T::zero(); tq * d];
                    let mut gk = vec![T::zero(); tk * d];
                    let mut gv = vec![T::zero(); tk * d];
                    let mut dp = vec![T::zero(); tk];
                    for h in 0..*heads {
                        let off = h * hd;
                        for i in 0..tq {
                            let lim = if *causal { (i + 1).min(tk) } else { tk };
                            let p = &probs[(h * tq + i) * tk..(h * tq + i) * tk + lim];
                            let go = &g[i * d + off..i * d + off + hd];
                            let mut dot = T::zero();
                            for j in 0..lim {
                                let vj = &vd[j * d + off..j * d + off + hd];
                                dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                                dot = dot + p[j] * dp[j];
                                let gvj = &mut gv[j * d + off..j * d + off + hd];
                                gvj.iter_mut()
                                    .zip(go)
                                    .for_each(|(x, &y)| *x = *x + p[j] * y);
                            }
                            let qi = &qd[i * d + off..i * d + off + hd];
                            for j in 0..lim {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kj = &kd[j * d + off..j * d + off + hd];
                                let gqi = &mut gq[i * d + off..i * d + off + hd];
                                gqi.iter_mut().zip(kj).for_each(|(x, &y)| *x = *x + ds * y);
                                let gkj = &mut gk[j * d + off..j * d + off + hd];
                                gkj.iter_mut().zip(qi).for_each(|(x, &y)| *x = *x + ds * y);
                            }
                        }
                    }
                    for (var, part) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if need(var) {
                            let slot = add_into(&mut grads[var.0], part.len());
                            slot.iter_mut().zip(&part).for_each(|(x, &y)| *x = *x + y);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let c = val(*logits).shape()[1];
                    let r = targets.len();
                    let scale = g[0] / T::from_usize(r.max(1)).unwrap();
                    let gl = add_into(&mut grads[logits.0], r * c);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[i * c + j] = gl[i * c + j] + scale * (node.aux[i * c + j] - onehot);
                        }
                    }
                }
                Op::Dropout(a) => {
                    let ga = add_into(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * node.aux[i];
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let n = val(*a).len();
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g[0] / T::from_usize(n.max(1)).unwrap()
                    } else {
                        g[0]
                    };
                    let ga = add_into(&mut grads[a.0], n);
                    ga.iter_mut().for_each(|x| *x = *x + s);
                }
                Op::TanhRecurrence { xw, w_hh } => {
                    let (t, h) = node.value.dims2()?;
                    let hs = node.value.data();
                    let w = val(*w_hh).data();
                    let mut da_all = vec![T::zero(); t * h];
                    let mut carry = vec![T::zero(); h];
                    for step in (0..t).rev() {
                        let hrow = &hs[step * h..(step + 1) * h];
                        let da = &mut da_all[step * h..(step + 1) * h];
                        for j in 0..h {
                            let dh = g[step * h + j] + carry[j];
                            da[j] = dh * (T::one() - hrow[j] * hrow[j]);
                        }
                        if step > 0 {
                            // carry = da · w_hhᵀ
                            T::gemm(1, h, h, da, false, w, true, &mut carry, false);
                        }
                    }
                    if need(*w_hh) && t > 1 {
                        // dW = Σ_t h_{t−1}ᵀ · da_t
                        let gw = add_into(&mut grads[w_hh.0], h * h);
                        T::gemm(
                            h,
                            t - 1,
                            h,
                            &hs[..(t - 1) * h],
                            true,
                            &da_all[h..],
                            false,
                            gw,
                            true,
                        );
                    }
                    if need(*xw) {
                        let gx = add_into(&mut grads[xw.0], t * h);
                        gx.iter_mut().zip(&da_all).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves, params })
    }
}

fn softmax_into<T: Scalar>(xs: &[T], out: &mut [T]) {
    out.copy_from_slice(xs);
    softmax_in_place(out);
}

fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    xs.iter_mut().for_each(|x| *x = *x / total);
}
