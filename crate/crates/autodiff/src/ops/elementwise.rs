use crate::error::{Error, Result};
use crate::kernels::{broadcast_index, broadcast_shape};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// `a - b` with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// `a * b` elementwise with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).scale(factor);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f32) -> Var {
        let out = self.value(x).map(|v| v + offset);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere. The subgradient at zero
    /// takes the positive branch.
    pub fn leaky_relu(&mut self, x: Var, negative_slope: f32) -> Result<Var> {
        if !(negative_slope > 0.0 && negative_slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must lie in (0, 1), got {negative_slope}"
            )));
        }
        Ok(self.unary(x, |v| if v >= 0.0 { v } else { negative_slope * v }, Op::LeakyRelu(x, negative_slope)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(out, rg, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), d)
        } else {
            let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
            let (ia, ib) = (broadcast_index(&shape, ta.shape()), broadcast_index(&shape, tb.shape()));
            let d = ia.iter().zip(&ib).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect();
            Tensor::from_parts(shape, d)
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, rg, op))
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Sum a gradient laid out over `out` down to the (broadcast) shape of `input`.
fn reduce_to(sink: &GradSink, input: Var, out: &Tensor, g: impl Iterator<Item = f32>) -> Vec<f32> {
    let in_shape = sink.value(input).shape();
    if in_shape == out.shape() {
        return g.collect();
    }
    let idx = broadcast_index(out.shape(), in_shape);
    let mut acc = vec![0.0; sink.numel(input)];
    for (k, v) in g.enumerate() {
        acc[idx[k]] += v;
    }
    acc
}

pub(crate) fn add_backward(sink: &mut GradSink, a: Var, b: Var, out: &Tensor, g: &[f32], sign_b: f32) {
    if sink.wants(a) {
        let ga = reduce_to(sink, a, out, g.iter().copied());
        sink.add(a, ga);
    }
    if sink.wants(b) {
        let gb = reduce_to(sink, b, out, g.iter().map(|v| v * sign_b));
        sink.add(b, gb);
    }
}

pub(crate) fn mul_backward(sink: &mut GradSink, a: Var, b: Var, out: &Tensor, g: &[f32]) {
    let expand = |sink: &GradSink, v: Var| -> Vec<f32> {
        let t = sink.value(v);
        if t.shape() == out.shape() {
            t.data().to_vec()
        } else {
            broadcast_index(out.shape(), t.shape()).iter().map(|&i| t.data()[i]).collect()
        }
    };
    if sink.wants(a) {
        let vb = expand(sink, b);
        let ga = reduce_to(sink, a, out, g.iter().zip(&vb).map(|(x, y)| x * y));
        sink.add(a, ga);
    }
    if sink.wants(b) {
        let va = expand(sink, a);
        let gb = reduce_to(sink, b, out, g.iter().zip(&va).map(|(x, y)| x * y));
        sink.add(b, gb);
    }
}

pub(crate) fn relu_backward(sink: &mut GradSink, x: Var, g: &[f32]) {
    let gx = sink.value(x).data().iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
    sink.add(x, gx);
}

pub(crate) fn leaky_relu_backward(sink: &mut GradSink, x: Var, slope: f32, g: &[f32]) {
    let gx = sink
        .value(x)
        .data()
        .iter()
        .zip(g)
        .map(|(&v, &d)| if v >= 0.0 { d } else { slope * d })
        .collect();
    sink.add(x, gx);
}

pub(crate) fn tanh_backward(sink: &mut GradSink, x: Var, out: &Tensor, g: &[f32]) {
    let gx = out.data().iter().zip(g).map(|(&y, &d)| d * (1.0 - y * y)).collect();
    sink.add(x, gx);
}

pub(crate) fn sigmoid_backward(sink: &mut GradSink, x: Var, out: &Tensor, g: &[f32]) {
    let gx = out.data().iter().zip(g).map(|(&y, &d)| d * y * (1.0 - y)).collect();
    sink.add(x, gx);
}
