use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::shape("matmul", format!("need rank-2 operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa:?} · {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul(a, b)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s as f32), rg, Op::SumAll(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = (s / t.numel() as f64) as f32;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), rg, Op::MeanAll(x))
    }

    /// Sum over one axis, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..][..inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), rg, Op::SumAxis { input: x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_backward(sink: &mut GradSink, a: Var, b: Var, g: &[f32]) {
    let (m, k) = (sink.value(a).shape()[0], sink.value(a).shape()[1]);
    let n = sink.value(b).shape()[1];
    if sink.wants(a) {
        let mut ga = vec![0.0; m * k];
        gemm(m, n, k, g, false, sink.value(b).data(), true, &mut ga, false);
        sink.add(a, ga);
    }
    if sink.wants(b) {
        let mut gb = vec![0.0; k * n];
        gemm(k, m, n, sink.value(a).data(), true, g, false, &mut gb, false);
        sink.add(b, gb);
    }
}

pub(crate) fn sum_axis_backward(sink: &mut GradSink, x: Var, axis: usize, g: &[f32]) {
    let (outer, len, inner) = split_axis(sink.value(x).shape(), axis);
    let mut gx = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            gx[(o * len + a) * inner..][..inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    sink.add(x, gx);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_axis_middle() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 2, 2], (1..=8).map(|v| v as f32).collect()).unwrap());
        let y = t.sum_axis(x, 1).unwrap();
        assert_eq!(t.shape(y), &[2, 2]);
        assert_eq!(t.value(y).data(), &[4.0, 6.0, 12.0, 14.0]);
    }
}
