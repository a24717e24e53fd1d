//! 1-D convolution and transposed convolution.
//!
//! Layout convention: activations are `[T, C]` (time major), conv weights
//! are `[C_out, C_in, k]`, transposed-conv weights are `[C_in, C_out, k]`.
//! Both ops are built from per-kernel-offset strided slices driving 2-D
//! matmuls, so the inner loops run through the same matrix kernels as the
//! rest of the engine.

use crate::tensor::Tensor;
use ndarray::{s, Array2, Array3, ArrayD, Ix2, Ix3};

/// Output length of `conv1d` for input length `t`.
pub fn conv_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad).saturating_sub(k) / stride + 1
}

/// Output length of `conv_transpose1d` for input length `t`.
pub fn conv_transpose_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t - 1) * stride + k - 2 * pad
}

fn pad_time(x: &Array2<f64>, pad: usize) -> Array2<f64> {
    if pad == 0 {
        return x.clone();
    }
    let (t, c) = x.dim();
    let mut out = Array2::zeros((t + 2 * pad, c));
    out.slice_mut(s![pad..pad + t, ..]).assign(x);
    out
}

fn conv_fwd(x: &Array2<f64>, w: &Array3<f64>, stride: usize, pad: usize) -> Array2<f64> {
    let (c_out, _c_in, k) = w.dim();
    let t_out = conv_out_len(x.nrows(), k, stride, pad);
    let xp = pad_time(x, pad);
    let mut y = Array2::zeros((t_out, c_out));
    for kk in 0..k {
        let xs = xp.slice(s![kk..kk + (t_out - 1) * stride + 1; stride, ..]);
        let wk = w.slice(s![.., .., kk]);
        y = y + xs.dot(&wk.t());
    }
    y
}

fn conv_bwd_input(
    dy: &Array2<f64>,
    w: &Array3<f64>,
    stride: usize,
    pad: usize,
    t_in: usize,
) -> Array2<f64> {
    let (_c_out, c_in, k) = w.dim();
    let t_out = dy.nrows();
    let mut dxp = Array2::zeros((t_in + 2 * pad, c_in));
    for kk in 0..k {
        let wk = w.slice(s![.., .., kk]);
        let contrib = dy.dot(&wk);
        let mut slot = dxp.slice_mut(s![kk..kk + (t_out - 1) * stride + 1; stride, ..]);
        slot += &contrib;
    }
    dxp.slice(s![pad..pad + t_in, ..]).to_owned()
}

fn conv_bwd_weight(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    stride: usize,
    pad: usize,
    k: usize,
) -> Array3<f64> {
    let c_out = dy.ncols();
    let c_in = x.ncols();
    let t_out = dy.nrows();
    let xp = pad_time(x, pad);
    let mut dw = Array3::zeros((c_out, c_in, k));
    for kk in 0..k {
        let xs = xp.slice(s![kk..kk + (t_out - 1) * stride + 1; stride, ..]);
        dw.slice_mut(s![.., .., kk]).assign(&dy.t().dot(&xs));
    }
    dw
}

impl Tensor {
    /// `y[t, co] = b[co] + sum_{ci,k} x[t*stride + k - pad, ci] * w[co, ci, k]`
    pub fn conv1d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let x = self.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let w = weight.data().view().into_dimensionality::<Ix3>().unwrap().to_owned();
        assert_eq!(x.ncols(), w.dim().1, "conv1d channel mismatch");
        let mut y = conv_fwd(&x, &w, stride, pad);
        if let Some(b) = bias {
            let bv = b.data().clone();
            y = y + &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let k = w.dim().2;
        Tensor::from_op(
            y.into_dyn(),
            parents,
            Box::new(move |g, parents| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let (px, pw) = (&parents[0], &parents[1]);
                if px.needs_grad() {
                    let wd = pw.data().view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let t_in = px.shape()[0];
                    px.accumulate_grad(conv_bwd_input(&g2, &wd, stride, pad, t_in).into_dyn());
                }
                if pw.needs_grad() {
                    let xd = px.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    pw.accumulate_grad(conv_bwd_weight(&g2, &xd, stride, pad, k).into_dyn());
                }
                if let Some(pb) = parents.get(2) {
                    if pb.needs_grad() {
                        pb.accumulate_grad(g2.sum_axis(ndarray::Axis(0)).into_dyn());
                    }
                }
            }),
        )
    }

    /// Transposed convolution: scatters each input frame into `k` output
    /// positions at `t*stride + k_off - pad`. Weight layout `[C_in, C_out, k]`.
    pub fn conv_transpose1d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let x = self.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let w = weight.data().view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let (c_in, c_out, k) = w.dim();
        assert_eq!(x.ncols(), c_in, "conv_transpose1d channel mismatch");
        let t_in = x.nrows();
        let t_out = conv_transpose_out_len(t_in, k, stride, pad);
        // Build into a padded buffer, then crop `pad` from each side.
        let mut yp = Array2::zeros((t_out + 2 * pad, c_out));
        for kk in 0..k {
            let wk = w.slice(s![.., .., kk]);
            let contrib = x.dot(&wk);
            let mut slot = yp.slice_mut(s![kk..kk + (t_in - 1) * stride + 1; stride, ..]);
            slot += &contrib;
        }
        let mut y = yp.slice(s![pad..pad + t_out, ..]).to_owned();
        if let Some(b) = bias {
            let bv = b.data().clone();
            y = y + &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            y.into_dyn(),
            parents,
            Box::new(move |g, parents| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                // Re-pad the output gradient to match the scatter buffer.
                let gp = pad_time(&g2, pad);
                let (px, pw) = (&parents[0], &parents[1]);
                if px.needs_grad() {
                    let wd = pw.data().view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let t_in = px.shape()[0];
                    let mut dx = Array2::zeros((t_in, c_in));
                    for kk in 0..k {
                        let gs = gp.slice(s![kk..kk + (t_in - 1) * stride + 1; stride, ..]);
                        let wk = wd.slice(s![.., .., kk]);
                        dx = dx + gs.dot(&wk.t());
                    }
                    px.accumulate_grad(dx.into_dyn());
                }
                if pw.needs_grad() {
                    let xd = px.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let t_in = xd.nrows();
                    let mut dw = Array3::zeros((c_in, c_out, k));
                    for kk in 0..k {
                        let gs = gp.slice(s![kk..kk + (t_in - 1) * stride + 1; stride, ..]);
                        dw.slice_mut(s![.., .., kk]).assign(&xd.t().dot(&gs));
                    }
                    pw.accumulate_grad(dw.into_dyn());
                }
                if let Some(pb) = parents.get(2) {
                    if pb.needs_grad() {
                        pb.accumulate_grad(g2.sum_axis(ndarray::Axis(0)).into_dyn());
                    }
                }
            }),
        )
    }
}

/// Plain (no-tape) forward convolution for code paths that never train.
pub fn conv1d_value(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: Option<&ArrayD<f64>>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let x2 = x.view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let w3 = w.view().into_dimensionality::<Ix3>().unwrap().to_owned();
    let mut y = conv_fwd(&x2, &w3, stride, pad);
    if let Some(b) = b {
        y = y + &b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    }
    y.into_dyn()
}
