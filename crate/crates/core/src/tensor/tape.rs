use super::conv::{gemm_rows, ConvGeometry};
use super::{Element, PadMode, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: PadMode,
        /// Unfolded input per batch item, reused by the weight gradient.
        cols: Vec<T>,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so the node list is always in
/// topological order and [`backward`](Self::backward) is a single reverse
/// sweep.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Element>(dst: &mut Option<Vec<T>>, len: usize, src: impl Iterator<Item = (usize, T)>) {
    let buf = dst.get_or_insert_with(|| vec![T::zero(); len]);
    for (i, v) in src {
        buf[i] = buf[i] + v;
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Same-size 2-D convolution (cross-correlation) with odd kernels.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, pad: PadMode) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv2d input {:?} has {cin} channels but weight {:?} expects {wcin}",
                self.value(input).shape(),
                self.value(weight).shape()
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel {kh}x{kw} must have odd extents")));
        }
        if pad == PadMode::Reflect && (kh / 2 >= h || kw / 2 >= w) {
            return Err(Error::Shape(format!(
                "conv2d input {h}x{w} is too small to mirror-pad for kernel {kh}x{kw}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?} does not match {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let geo = ConvGeometry { cin, h, w, kh, kw, pad };
        let (k, p) = (geo.rows(), geo.pixels());
        let mut cols = vec![T::zero(); n * k * p];
        let mut out = vec![T::zero(); n * cout * p];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        for b in 0..n {
            let col = &mut cols[b * k * p..(b + 1) * k * p];
            geo.im2col(&x[b * cin * p..(b + 1) * cin * p], col);
            let dst = &mut out[b * cout * p..(b + 1) * cout * p];
            gemm_rows(cout, k, p, wt, (k as isize, 1), col, (p as isize, 1), dst, false);
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (co, row) in dst.chunks_mut(p).enumerate() {
                    for v in row {
                        *v = *v + bd[co];
                    }
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        let value = Tensor::new(vec![n, cout, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    /// 2×2 non-overlapping max pooling. Ties resolve to the first element in
    /// row-major order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let (n, c, h, w) = src.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = src.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for idx in [
                        base + 2 * y * w + 2 * xo + 1,
                        base + (2 * y + 1) * w + 2 * xo,
                        base + (2 * y + 1) * w + 2 * xo + 1,
                    ] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let (n, c, h, w) = src.dims4()?;
        let x = src.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    out[plane * oh * ow + y * ow + xo] = x[plane * h * w + (y / 2) * w + xo / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Upsample2(input), rg))
    }

    /// Stacks the channels of `a` followed by those of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat_channels cannot join {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let p = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * p);
        for i in 0..na {
            out.extend_from_slice(&xa[i * ca * p..(i + 1) * ca * p]);
            out.extend_from_slice(&xb[i * cb * p..(i + 1) * cb * p]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |p, q| p + q);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |p, q| p - q);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |p, q| p * q);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale · x + shift` element-wise.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        let value = self.value(input).map(|v| v * scale + shift);
        let rg = self.needs(&[input]);
        self.push(value, Op::Affine { input, scale }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let total: T = x.data().iter().copied().sum();
        let value = Tensor::scalar(total / T::from_f64(x.numel() as f64));
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Mean(input), rg))
    }

    /// Selects flat indices of `input` into a 1-D tensor.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {:?}",
                x.shape()
            )));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Populates `grad` for every node that `loss` depends on.
    ///
    /// Leaves created with [`param`](Self::param) always end up with a
    /// gradient buffer, zero-filled if `loss` does not depend on them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            propagate(before, &node.op, &node.value, &grad);
            node.grad = Some(grad);
        }

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }
}

/// Pushes `grad` (the gradient of the node holding `op`/`out`) into the
/// gradient buffers of its inputs, all of which live in `nodes`.
fn propagate<T: Element>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, grad: &[T]) {
    let wants = |nodes: &[Node<T>], v: &Var| nodes[v.0].requires_grad;
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            pad,
            cols,
        } => {
            let (n, cin, h, w) = nodes[input.0].value.dims4().expect("recorded shape");
            let (cout, _, kh, kw) = nodes[weight.0].value.dims4().expect("recorded shape");
            let geo = ConvGeometry {
                cin,
                h,
                w,
                kh,
                kw,
                pad: *pad,
            };
            let (k, p) = (geo.rows(), geo.pixels());
            if wants(nodes, weight) {
                let len = cout * k;
                let dw = nodes[weight.0].grad.get_or_insert_with(|| vec![T::zero(); len]);
                for b in 0..n {
                    let dy = &grad[b * cout * p..(b + 1) * cout * p];
                    let col = &cols[b * k * p..(b + 1) * k * p];
                    // dW += dY · colsᵀ
                    gemm_rows(cout, p, k, dy, (p as isize, 1), col, (1, p as isize), dw, true);
                }
            }
            if let Some(bv) = bias.filter(|b| wants(nodes, b)) {
                let db = nodes[bv.0].grad.get_or_insert_with(|| vec![T::zero(); cout]);
                for b in 0..n {
                    for (co, row) in grad[b * cout * p..(b + 1) * cout * p].chunks(p).enumerate() {
                        db[co] = db[co] + row.iter().copied().sum();
                    }
                }
            }
            if wants(nodes, input) {
                let wt = nodes[weight.0].value.data().to_vec();
                let mut dcols = vec![T::zero(); k * p];
                let len = n * cin * p;
                let dx = nodes[input.0].grad.get_or_insert_with(|| vec![T::zero(); len]);
                for b in 0..n {
                    let dy = &grad[b * cout * p..(b + 1) * cout * p];
                    // dcols = Wᵀ · dY
                    gemm_rows(k, cout, p, &wt, (1, k as isize), dy, (p as isize, 1), &mut dcols, false);
                    geo.col2im_add(&dcols, &mut dx[b * cin * p..(b + 1) * cin * p]);
                }
            }
        }
        Op::Relu(x) => {
            if wants(nodes, x) {
                let vals = out.data();
                add_into(
                    &mut nodes[x.0].grad,
                    vals.len(),
                    grad.iter()
                        .zip(vals)
                        .enumerate()
                        .filter(|(_, (_, &v))| v > T::zero())
                        .map(|(i, (&g, _))| (i, g)),
                );
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if wants(nodes, input) {
                let len = nodes[input.0].value.numel();
                add_into(
                    &mut nodes[input.0].grad,
                    len,
                    argmax.iter().copied().zip(grad.iter().copied()),
                );
            }
        }
        Op::Upsample2(x) => {
            if wants(nodes, x) {
                let (n, c, h, w) = nodes[x.0].value.dims4().expect("recorded shape");
                let (oh, ow) = (2 * h, 2 * w);
                add_into(
                    &mut nodes[x.0].grad,
                    n * c * h * w,
                    (0..n * c * oh * ow).map(|i| {
                        let plane = i / (oh * ow);
                        let (y, xo) = ((i % (oh * ow)) / ow, i % ow);
                        (plane * h * w + (y / 2) * w + xo / 2, grad[i])
                    }),
                );
            }
        }
        Op::Concat(a, b) => {
            let (n, ca, h, w) = nodes[a.0].value.dims4().expect("recorded shape");
            let cb = nodes[b.0].value.dims4().expect("recorded shape").1;
            let p = h * w;
            let c = ca + cb;
            for (var, offset, channels) in [(a, 0, ca), (b, ca, cb)] {
                if !wants(nodes, var) {
                    continue;
                }
                add_into(
                    &mut nodes[var.0].grad,
                    n * channels * p,
                    (0..n * channels * p).map(|i| {
                        let (item, within) = (i / (channels * p), i % (channels * p));
                        (i, grad[item * c * p + offset * p + within])
                    }),
                );
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
            if wants(nodes, a) {
                add_into(&mut nodes[a.0].grad, grad.len(), grad.iter().copied().enumerate());
            }
            if wants(nodes, b) {
                add_into(
                    &mut nodes[b.0].grad,
                    grad.len(),
                    grad.iter().map(|&g| g * sign).enumerate(),
                );
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            if wants(nodes, a) {
                add_into(
                    &mut nodes[a.0].grad,
                    grad.len(),
                    grad.iter().zip(&bv).map(|(&g, &q)| g * q).enumerate(),
                );
            }
            if wants(nodes, b) {
                add_into(
                    &mut nodes[b.0].grad,
                    grad.len(),
                    grad.iter().zip(&av).map(|(&g, &q)| g * q).enumerate(),
                );
            }
        }
        Op::Affine { input, scale } => {
            if wants(nodes, input) {
                add_into(
                    &mut nodes[input.0].grad,
                    grad.len(),
                    grad.iter().map(|&g| g * *scale).enumerate(),
                );
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            if wants(nodes, x) {
                let len = nodes[x.0].value.numel();
                let g = match op {
                    Op::Mean(_) => grad[0] / T::from_f64(len as f64),
                    _ => grad[0],
                };
                add_into(&mut nodes[x.0].grad, len, (0..len).map(|i| (i, g)));
            }
        }
        Op::Gather { input, indices } => {
            if wants(nodes, input) {
                let len = nodes[input.0].value.numel();
                add_into(
                    &mut nodes[input.0].grad,
                    len,
                    indices.iter().copied().zip(grad.iter().copied()),
                );
            }
        }
    }
}
