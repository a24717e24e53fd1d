//! Differentiable op library.
//!
//! Binary ops broadcast following ndarray rules; their backward passes sum
//! gradients over the broadcast axes. Reductions, activations, softmax,
//! layer norm, embedding lookups and slicing cover what the model stack
//! needs; convolution lives in [`crate::conv`] and STFT in [`crate::stft`].

use crate::tensor::Tensor;
use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, IxDyn, Slice};

/// Row-major copy when the array's memory layout is not already standard.
fn to_standard(a: &ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a.clone()
    } else {
        ArrayD::from_shape_vec(a.raw_dim(), a.iter().copied().collect()).unwrap()
    }
}

/// Sum `g` down to `shape` by collapsing broadcast axes.
pub(crate) fn unbroadcast(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn broadcast_op(
    a: &Tensor,
    b: &Tensor,
    value: ArrayD<f64>,
    da: impl Fn(&ArrayD<f64>, &Tensor, &Tensor) -> ArrayD<f64> + 'static,
    db: impl Fn(&ArrayD<f64>, &Tensor, &Tensor) -> ArrayD<f64> + 'static,
) -> Tensor {
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.needs_grad() {
                a.accumulate_grad(unbroadcast(da(g, a, b), &a.shape()));
            }
            if b.needs_grad() {
                b.accumulate_grad(unbroadcast(db(g, a, b), &b.shape()));
            }
        }),
    )
}

fn unary_op(
    x: &Tensor,
    value: ArrayD<f64>,
    dx: impl Fn(&ArrayD<f64>, &Tensor) -> ArrayD<f64> + 'static,
) -> Tensor {
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(dx(g, &parents[0]));
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = &*self.data() + &*other.data();
        broadcast_op(self, other, v, |g, _, _| g.clone(), |g, _, _| g.clone())
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = &*self.data() - &*other.data();
        broadcast_op(self, other, v, |g, _, _| g.clone(), |g, _, _| -g)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = &*self.data() * &*other.data();
        broadcast_op(
            self,
            other,
            v,
            |g, _, b| g * &*b.data(),
            |g, a, _| g * &*a.data(),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let v = &*self.data() / &*other.data();
        broadcast_op(
            self,
            other,
            v,
            |g, _, b| g / &*b.data(),
            |g, a, b| {
                let bd = &*b.data();
                -(g * &*a.data()) / &(bd * bd)
            },
        )
    }

    pub fn neg(&self) -> Tensor {
        unary_op(self, -&*self.data(), |g, _| -g)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary_op(self, &*self.data() * c, move |g, _| g * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary_op(self, &*self.data() + c, |g, _| g.clone())
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-D")
            .to_owned();
        let b = other
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-D")
            .to_owned();
        let v = a.dot(&b).into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (pa, pb) = (&parents[0], &parents[1]);
                if pa.needs_grad() {
                    let bd = pb.data();
                    let b2 = bd.view().into_dimensionality::<Ix2>().unwrap();
                    pa.accumulate_grad(g2.dot(&b2.t()).into_dyn());
                }
                if pb.needs_grad() {
                    let ad = pa.data();
                    let a2 = ad.view().into_dimensionality::<Ix2>().unwrap();
                    pb.accumulate_grad(a2.t().dot(&g2).into_dyn());
                }
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let v = ArrayD::from_elem(IxDyn(&[]), self.data().sum());
        unary_op(self, v, |g, x| {
            ArrayD::from_elem(x.data().raw_dim(), *g.iter().next().unwrap())
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis_op(&self, ax: usize) -> Tensor {
        let v = self.data().sum_axis(Axis(ax));
        unary_op(self, v, move |g, x| {
            let gg = g.clone().insert_axis(Axis(ax));
            gg.broadcast(x.data().raw_dim()).unwrap().to_owned()
        })
    }

    pub fn exp(&self) -> Tensor {
        let v = self.data().mapv(f64::exp);
        unary_op(self, v.clone(), move |g, _| g * &v)
    }

    pub fn ln(&self) -> Tensor {
        let v = self.data().mapv(f64::ln);
        unary_op(self, v, |g, x| g / &*x.data())
    }

    pub fn sqrt_op(&self) -> Tensor {
        let v = self.data().mapv(f64::sqrt);
        unary_op(self, v.clone(), move |g, _| g / &(&v * 2.0))
    }

    /// Elementwise power with constant exponent; domain is the caller's
    /// problem (used on strictly positive values here).
    pub fn pow_scalar(&self, p: f64) -> Tensor {
        let v = self.data().mapv(|x| x.powf(p));
        unary_op(self, v, move |g, x| {
            g * &x.data().mapv(|x| p * x.powf(p - 1.0))
        })
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn abs_op(&self) -> Tensor {
        let v = self.data().mapv(f64::abs);
        unary_op(self, v, |g, x| g * &x.data().mapv(f64::signum))
    }

    pub fn tanh_op(&self) -> Tensor {
        let v = self.data().mapv(f64::tanh);
        unary_op(self, v.clone(), move |g, _| g * &v.mapv(|t| 1.0 - t * t))
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.data().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        unary_op(self, v.clone(), move |g, _| g * &v.mapv(|s| s * (1.0 - s)))
    }

    pub fn relu(&self) -> Tensor {
        let v = self.data().mapv(|x| x.max(0.0));
        unary_op(self, v, |g, x| {
            g * &x.data().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.data().mapv(|x| if x > 0.0 { x } else { slope * x });
        unary_op(self, v, move |g, x| {
            g * &x.data().mapv(|x| if x > 0.0 { 1.0 } else { slope })
        })
    }

    /// tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let v = self
            .data()
            .mapv(|x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()));
        unary_op(self, v, |g, x| {
            g * &x.data().mapv(|x| {
                let inner = C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            })
        })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp_op(&self, lo: f64, hi: f64) -> Tensor {
        let v = self.data().mapv(|x| x.clamp(lo, hi));
        unary_op(self, v, move |g, x| {
            g * &x
                .data()
                .mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
        })
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.clamp_op(lo, f64::INFINITY)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_last(&self) -> Tensor {
        let x = self.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut v = x;
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let sm = v.clone();
        unary_op(self, v.into_dyn(), move |g, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = &g2 * &sm;
            for (mut orow, srow) in out.rows_mut().into_iter().zip(sm.rows()) {
                let dot = orow.sum();
                orow.zip_mut_with(&srow, |o, &s| *o -= s * dot);
            }
            out.into_dyn()
        })
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_last(&self) -> Tensor {
        let x = self.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut v = x;
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.fold(0.0, |a, &b| a + (b - m).exp()).ln();
            row.mapv_inplace(|x| x - lse);
        }
        let logp = v.clone();
        unary_op(self, v.into_dyn(), move |g, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = g2.to_owned();
            for (mut orow, lrow) in out.rows_mut().into_iter().zip(logp.rows()) {
                let gsum = orow.sum();
                orow.zip_mut_with(&lrow, |o, &l| *o -= l.exp() * gsum);
            }
            out.into_dyn()
        })
    }

    /// Layer normalization over the last axis of a 2-D tensor.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = self.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let d = x.ncols() as f64;
        let mu = x.mean_axis(Axis(1)).unwrap();
        let xc = &x - &mu.clone().insert_axis(Axis(1));
        let var = xc.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
        let inv = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &xc * &inv.clone().insert_axis(Axis(1));
        let g2 = gamma.data().view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let b2 = beta.data().view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let y = &xhat * &g2 + &b2;
        let xhat_c = xhat.clone();
        let inv_c = inv.clone();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let g2d = g.view().into_dimensionality::<Ix2>().unwrap();
                let (px, pg, pb) = (&parents[0], &parents[1], &parents[2]);
                if pg.needs_grad() {
                    pg.accumulate_grad((&g2d * &xhat_c).sum_axis(Axis(0)).into_dyn());
                }
                if pb.needs_grad() {
                    pb.accumulate_grad(g2d.sum_axis(Axis(0)).into_dyn());
                }
                if px.needs_grad() {
                    let gd = pg.data();
                    let gamma_v = gd.view().into_dimensionality::<Ix1>().unwrap();
                    let dxhat = &g2d * &gamma_v;
                    let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dxhat_xhat =
                        (&dxhat * &xhat_c).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = (&dxhat * d - &sum_dxhat - &xhat_c * &sum_dxhat_xhat)
                        * &inv_c.clone().insert_axis(Axis(1))
                        / d;
                    px.accumulate_grad(dx.into_dyn());
                }
            }),
        )
    }

    /// Row lookup: `table[ids[i], :]` for each i. Backward scatter-adds.
    pub fn embedding(&self, ids: &[usize]) -> Tensor {
        let table = self.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let d = table.ncols();
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&table.row(id));
        }
        let ids = ids.to_vec();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, parents| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let shape = parents[0].shape();
                let mut dt = ndarray::Array2::<f64>::zeros((shape[0], shape[1]));
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g2.row(i);
                }
                parents[0].accumulate_grad(dt.into_dyn());
            }),
        )
    }

    /// Arbitrary (possibly repeated, unordered) row selection from a 2-D
    /// tensor; same mechanics as an embedding lookup.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        self.embedding(idx)
    }

    /// Per-row class pick from a 2-D tensor: `out[i] = x[i, ids[i]]`.
    pub fn pick(&self, ids: &[usize]) -> Tensor {
        let x = self.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let v: Vec<f64> = ids.iter().enumerate().map(|(i, &c)| x[[i, c]]).collect();
        let ids = ids.to_vec();
        Tensor::from_op(
            ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap(),
            vec![self.clone()],
            Box::new(move |g, parents| {
                let shape = parents[0].shape();
                let mut dx = ndarray::Array2::<f64>::zeros((shape[0], shape[1]));
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                for (i, &c) in ids.iter().enumerate() {
                    dx[[i, c]] += g1[i];
                }
                parents[0].accumulate_grad(dx.into_dyn());
            }),
        )
    }

    /// Contiguous slab along `axis`. Backward zero-pads.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self
            .data()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        unary_op(self, v, move |g, x| {
            let mut dx = ArrayD::<f64>::zeros(x.data().raw_dim());
            dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            dx
        })
    }

    pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
        let datas: Vec<_> = parts.iter().map(|t| t.data().clone()).collect();
        let views: Vec<_> = datas.iter().map(|d| d.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
        Tensor::from_op(
            v,
            parts.to_vec(),
            Box::new(move |g, parents| {
                let mut off = 0;
                for (p, &sz) in parents.iter().zip(&sizes) {
                    if p.needs_grad() {
                        let gp = g
                            .slice_axis(Axis(axis), Slice::from(off..off + sz))
                            .to_owned();
                        p.accumulate_grad(gp);
                    }
                    off += sz;
                }
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = to_standard(&self.data())
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape length mismatch");
        unary_op(self, v, |g, x| {
            to_standard(g)
                .into_shape_with_order(x.data().raw_dim())
                .unwrap()
        })
    }

    pub fn transpose2(&self) -> Tensor {
        let v = self
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .t()
            .to_owned()
            .into_dyn();
        unary_op(self, v, |g, _| {
            g.view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .t()
                .to_owned()
                .into_dyn()
        })
    }

    /// `x / ||x||_2` over the whole tensor, with a tiny floor on the norm.
    pub fn l2_normalize(&self) -> Tensor {
        let norm = self.square().sum().clamp_min(1e-24).pow_scalar(0.5);
        self.div(&norm)
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, target: &Tensor) -> Tensor {
        self.sub(target).square().mean()
    }

    /// Mean absolute error over all elements.
    pub fn l1(&self, target: &Tensor) -> Tensor {
        self.sub(target).abs_op().mean()
    }
}
