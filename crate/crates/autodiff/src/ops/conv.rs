use crate::error::{Error, Result};
use crate::kernels::{gemm, ConvGeom};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Cross-correlation of `input [N, Cin, H, W]` with `weight [Cout, Cin, kH, kW]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, padding)?;
        let cols = geom.im2col(self.value(input).data());
        let (k, l, hw) = (geom.patch_len(), geom.cols(), geom.ho * geom.wo);
        let mut mixed = vec![0.0f32; geom.cout * l];
        gemm(geom.cout, k, l, self.value(weight).data(), false, &cols, false, &mut mixed, false);

        // [Cout, N·HW] -> [N, Cout, HW]
        let mut out = vec![0.0f32; geom.n * geom.cout * hw];
        for co in 0..geom.cout {
            for n in 0..geom.n {
                out[(n * geom.cout + co) * hw..][..hw].copy_from_slice(&mixed[co * l + n * hw..][..hw]);
            }
        }
        let rg = self.any_grad(&[input, weight]);
        // The unfolded input is only needed for the weight gradient.
        let cols = if self.requires_grad(weight) { cols } else { Vec::new() };
        let value = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], out);
        Ok(self.push(value, rg, Op::Conv2d { input, weight, geom, cols }))
    }

    /// Mean over the spatial dims: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let &[n, c, h, w] = shape else {
            return Err(Error::shape("global_avg_pool", format!("need rank-4 input, got {shape:?}")));
        };
        let hw = h * w;
        let out = self
            .value(input)
            .data()
            .chunks_exact(hw)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), rg, Op::GlobalAvgPool(input)))
    }
}

pub(crate) fn conv2d_backward(
    sink: &mut GradSink,
    input: Var,
    weight: Var,
    geom: &ConvGeom,
    cols: &[f32],
    g: &[f32],
) {
    let (k, l, hw) = (geom.patch_len(), geom.cols(), geom.ho * geom.wo);
    // [N, Cout, HW] -> [Cout, N·HW]
    let mut gm = vec![0.0f32; geom.cout * l];
    for co in 0..geom.cout {
        for n in 0..geom.n {
            gm[co * l + n * hw..][..hw].copy_from_slice(&g[(n * geom.cout + co) * hw..][..hw]);
        }
    }
    if sink.wants(weight) {
        let mut gw = vec![0.0f32; geom.cout * k];
        gemm(geom.cout, l, k, &gm, false, cols, true, &mut gw, false);
        sink.add(weight, gw);
    }
    if sink.wants(input) {
        let mut gcols = vec![0.0f32; k * l];
        gemm(k, geom.cout, l, sink.value(weight).data(), true, &gm, false, &mut gcols, false);
        sink.add(input, geom.col2im(&gcols));
    }
}

pub(crate) fn gap_backward(sink: &mut GradSink, x: Var, g: &[f32]) {
    let shape = sink.value(x).shape();
    let hw = shape[2] * shape[3];
    let scale = 1.0 / hw as f32;
    let gx = g.iter().flat_map(|&d| std::iter::repeat(d * scale).take(hw)).collect();
    sink.add(x, gx);
}
