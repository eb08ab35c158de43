use super::kernels::{self, ConvGeom, Padding};
use super::{Real, Tensor4};
use crate::error::{McmsError, Result};
use crate::freq;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Box<ConvGeom>,
    },
    AvgPool(Var, usize),
    Upsample2x(Var),
    Activation(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    SelectBatch {
        x: Var,
        index: usize,
    },
    StackBatch(Vec<Var>),
    Transpose(Var),
    MatMul { a: Var, b: Var, wide: bool },
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Fft2(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward pass. Inputs always precede the nodes that
/// consume them, so a single reverse sweep replays every node once.
#[derive(Debug, Default)]
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]. Absent entries are identically zero.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
    shapes: Vec<[usize; 4]>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materializing zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor4<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(self.shapes[v.0]))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor4<T>>, shape: [usize; 4], g: Tensor4<T>) {
    debug_assert_eq!(shape, g.shape());
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(McmsError::NonFinite(op_name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives gradients (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Tensor4<T>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor4<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).scale(s);
        let rg = self.needs(a);
        self.push("scale", v, Op::Scale(a, s), rg)
    }

    /// `weight` is `(out_c, in_c / groups, kh, kw)`; `bias` is `(1, out_c, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(weight), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.value(b).len() != geom.cout {
                return Err(McmsError::shape(
                    "conv2d",
                    format!("bias {:?} for {} outputs", self.shape(b), geom.cout),
                ));
            }
        }
        let data = geom.forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor4::new([geom.n, geom.cout, geom.oh, geom.ow], data)?;
        let rg = self.needs(x) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let op = Op::Conv2d {
            x,
            weight,
            bias,
            geom: Box::new(geom),
        };
        self.push("conv2d", value, op, rg)
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        kernels::pool_check(self.shape(x), k)?;
        let v = kernels::avgpool_forward(self.value(x), k);
        let rg = self.needs(x);
        self.push("avgpool2d", v, Op::AvgPool(x, k), rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = kernels::upsample_forward(self.value(x));
        let rg = self.needs(x);
        self.push("upsample2x", v, Op::Upsample2x(x), rg)
    }

    pub fn activation(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(kernels::act);
        let rg = self.needs(x);
        self.push("activation", v, Op::Activation(x), rg)
    }

    /// Normalize each pixel over channels, then apply per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).c();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(McmsError::shape("layer_norm", format!("affine size vs {c} channels")));
        }
        let (v, mean, rstd) =
            kernels::layer_norm_forward(self.value(x), self.value(gamma).data(), self.value(beta).data());
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.needs(x);
        self.push("reshape", v, Op::Reshape(x), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_channels(start, len)?;
        let rg = self.needs(x);
        self.push("slice_channels", v, Op::SliceChannels { x, start }, rg)
    }

    /// Equal channel split into `groups` parts.
    pub fn chunk(&mut self, x: Var, groups: usize) -> Result<Vec<Var>> {
        let c = self.shape(x)[1];
        if groups == 0 || c % groups != 0 {
            return Err(McmsError::shape(
                "chunk",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        let per = c / groups;
        (0..groups).map(|g| self.slice_channels(x, g * per, per)).collect()
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor4<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = super::ops::concat_channels(&refs)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push("concat", v, Op::ConcatChannels(parts.to_vec()), rg)
    }

    pub fn select_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x).select_batch(index)?;
        let rg = self.needs(x);
        self.push("select_batch", v, Op::SelectBatch { x, index }, rg)
    }

    pub fn stack_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor4<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor4::stack_batch(&refs)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push("stack_batch", v, Op::StackBatch(parts.to_vec()), rg)
    }

    /// Swap the last two axes of every plane.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose_planes();
        let rg = self.needs(x);
        self.push("transpose", v, Op::Transpose(x), rg)
    }

    /// Plane-wise matrix product of `(n, c, m, k)` and `(n, c, k, p)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// [`GradTape::matmul`] accumulating in f64, forward and backward. Used
    /// where long reductions over f32 would otherwise drift.
    pub fn matmul_wide(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, wide: bool) -> Result<Var> {
        let [n, c, m, k] = self.shape(a);
        let [nb, cb, kb, p] = self.shape(b);
        if n != nb || c != cb || k != kb {
            return Err(McmsError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let gemm = if wide { kernels::gemm_wide::<T> } else { kernels::gemm::<T> };
        let mut out = Tensor4::zeros([n, c, m, p]);
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for (i, dst) in out.data_mut().chunks_mut(m * p).enumerate() {
                let pa = &ad[i * m * k..(i + 1) * m * k];
                let pb = &bd[i * k * p..(i + 1) * k * p];
                gemm(m, k, p, pa, false, pb, false, dst, false);
            }
        }
        let rg = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul { a, b, wide }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        let cols = v.w();
        kernels::softmax_rows_inplace(v.data_mut(), cols);
        let rg = self.needs(x);
        self.push("softmax", v, Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor4::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push("sum", v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor4::scalar(self.value(x).mean());
        let rg = self.needs(x);
        self.push("mean", v, Op::Mean(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.abs());
        let rg = self.needs(x);
        self.push("abs", v, Op::Abs(x), rg)
    }

    /// Unnormalized 2-D DFT per plane, stacked as `(n, 2c, h, w)`: real parts
    /// in channels `0..c`, imaginary parts in `c..2c`.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let v = freq::fft2_stacked(self.value(x));
        let rg = self.needs(x);
        self.push("fft2", v, Op::Fft2(x), rg)
    }

    /// Mean absolute difference of two same-shaped values.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(McmsError::shape(
                "backward",
                format!("output {:?} is not a scalar", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) {
        let mut send = |v: Var, grad: Tensor4<T>| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], self.shape(v), grad);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                send(*a, g.zip_map(vb, "mul", |x, y| x * y).expect("recorded shapes"));
                send(*b, g.zip_map(va, "mul", |x, y| x * y).expect("recorded shapes"));
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Conv2d { x, weight, bias, geom } => {
                let (gx, gw, gb) = geom.backward(self.value(*x).data(), self.value(*weight).data(), g.data());
                send(*x, Tensor4::new(self.shape(*x), gx).expect("recorded shapes"));
                send(*weight, Tensor4::new(self.shape(*weight), gw).expect("recorded shapes"));
                if let Some(b) = bias {
                    send(*b, Tensor4::new(self.shape(*b), gb).expect("recorded shapes"));
                }
            }
            Op::AvgPool(x, k) => send(*x, kernels::avgpool_backward(self.shape(*x), *k, g)),
            Op::Upsample2x(x) => send(*x, kernels::upsample_backward(self.shape(*x), g)),
            Op::Activation(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, "activation", |v, gv| gv * kernels::act_grad(v))
                    .expect("recorded shapes");
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (gx, gg, gb) =
                    kernels::layer_norm_backward(self.value(*x), self.value(*gamma).data(), mean, rstd, g);
                send(*x, gx);
                send(*gamma, Tensor4::new(self.shape(*gamma), gg).expect("recorded shapes"));
                send(*beta, Tensor4::new(self.shape(*beta), gb).expect("recorded shapes"));
            }
            Op::Reshape(x) => send(*x, g.reshape(self.shape(*x)).expect("recorded shapes")),
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = g.c();
                let hw = h * w;
                let mut gx = Tensor4::zeros([n, c, h, w]);
                for ni in 0..n {
                    let dst = (ni * c + start) * hw;
                    gx.data_mut()[dst..dst + len * hw]
                        .copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
                }
                send(*x, gx);
            }
            Op::ConcatChannels(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[1];
                    send(p, g.slice_channels(start, len).expect("recorded shapes"));
                    start += len;
                }
            }
            Op::SelectBatch { x, index } => {
                let mut gx = Tensor4::zeros(self.shape(*x));
                let len = g.len();
                gx.data_mut()[index * len..(index + 1) * len].copy_from_slice(g.data());
                send(*x, gx);
            }
            Op::StackBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let len: usize = shape.iter().product();
                    let part = Tensor4::new(shape, g.data()[offset..offset + len].to_vec()).expect("recorded shapes");
                    send(p, part);
                    offset += len;
                }
            }
            Op::Transpose(x) => send(*x, g.transpose_planes()),
            Op::MatMul { a, b, wide } => {
                let gemm = if *wide { kernels::gemm_wide::<T> } else { kernels::gemm::<T> };
                let [n, c, m, k] = self.shape(*a);
                let p = self.shape(*b)[3];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut ga = Tensor4::zeros([n, c, m, k]);
                    for (i, dst) in ga.data_mut().chunks_mut(m * k).enumerate() {
                        let gp = &g.data()[i * m * p..(i + 1) * m * p];
                        let pb = &bd[i * k * p..(i + 1) * k * p];
                        gemm(m, p, k, gp, false, pb, true, dst, false);
                    }
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor4::zeros([n, c, k, p]);
                    for (i, dst) in gb.data_mut().chunks_mut(k * p).enumerate() {
                        let pa = &ad[i * m * k..(i + 1) * m * k];
                        let gp = &g.data()[i * m * p..(i + 1) * m * p];
                        gemm(k, m, p, pa, true, gp, false, dst, false);
                    }
                    send(*b, gb);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let gx = kernels::softmax_rows_backward(y.data(), g.data(), y.w());
                send(*x, Tensor4::new(y.shape(), gx).expect("recorded shapes"));
            }
            Op::Sum(x) => send(*x, Tensor4::full(self.shape(*x), g.data()[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, Tensor4::full(self.shape(*x), g.data()[0] / T::of(n as f64)));
            }
            Op::Abs(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, "abs", |v, gv| if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    })
                    .expect("recorded shapes");
                send(*x, gx);
            }
            Op::Fft2(x) => send(*x, freq::fft2_stacked_adjoint(g)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor4::from_fn([1, 2, 3, 3], |_, c, y, x| (c + y * x) as f64)).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = GradTape::<f64>::new();
        let t = Tensor4::from_fn([1, 1, 2, 3], |_, _, y, x| y as f64 - 0.5 * x as f64);
        let x = tape.leaf(t.clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), t.scale(2.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor4::zeros([1, 1, 2, 2])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor4::full([1, 1, 2, 2], 2.0)).unwrap();
        let k = tape.constant(Tensor4::full([1, 1, 2, 2], 3.0)).unwrap();
        let p = tape.mul(x, k).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(k).is_none());
        assert!(g.wrt(x).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = GradTape::<f64>::new();
        assert!(tape.leaf(Tensor4::full([1, 1, 1, 1], f64::INFINITY)).is_err());
        let x = tape.leaf(Tensor4::full([1, 1, 1, 1], f64::MAX)).unwrap();
        assert!(tape.scale(x, 10.0).is_err());
    }
}
