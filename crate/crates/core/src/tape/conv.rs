//! Convolution, normalization, pooling and box filtering on grids.

use matrixmultiply::dgemm;

use super::{Graph, Var};
use crate::tensor::{grid_len, Tensor};

/// `c = a · b` (+ `c` when `accumulate`), all row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe matrices that lie within the slices;
    // every caller passes slices of exactly m·k, k·n and m·n elements.
    unsafe {
        dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Valid output range along one axis for kernel tap `t` with radius `r`:
/// output `o` reads input `o + t - r`.
#[inline]
fn tap_range(n: usize, t: usize, r: usize) -> (usize, usize) {
    let lo = r.saturating_sub(t);
    let hi = (n + r).saturating_sub(t).min(n);
    (lo, hi.max(lo))
}

fn im2col(input: &[f64], channels: usize, dims: [usize; 3], k: usize) -> Vec<f64> {
    let n = grid_len(dims);
    let r = k / 2;
    let taps = k * k * k;
    let mut col = vec![0.0; channels * taps * n];
    for ci in 0..channels {
        let src = &input[ci * n..(ci + 1) * n];
        for tz in 0..k {
            let (z0, z1) = tap_range(dims[0], tz, r);
            for ty in 0..k {
                let (y0, y1) = tap_range(dims[1], ty, r);
                for tx in 0..k {
                    let (x0, x1) = tap_range(dims[2], tx, r);
                    if x0 >= x1 {
                        continue;
                    }
                    let row = (ci * taps + (tz * k + ty) * k + tx) * n;
                    let dst = &mut col[row..row + n];
                    for z in z0..z1 {
                        let sz = z + tz - r;
                        for y in y0..y1 {
                            let sy = y + ty - r;
                            let o = (z * dims[1] + y) * dims[2];
                            let s = (sz * dims[1] + sy) * dims[2] + tx;
                            dst[o + x0..o + x1].copy_from_slice(&src[s + x0 - r..s + x1 - r]);
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], channels: usize, dims: [usize; 3], k: usize) -> Vec<f64> {
    let n = grid_len(dims);
    let r = k / 2;
    let taps = k * k * k;
    let mut out = vec![0.0; channels * n];
    for ci in 0..channels {
        let dst = &mut out[ci * n..(ci + 1) * n];
        for tz in 0..k {
            let (z0, z1) = tap_range(dims[0], tz, r);
            for ty in 0..k {
                let (y0, y1) = tap_range(dims[1], ty, r);
                for tx in 0..k {
                    let (x0, x1) = tap_range(dims[2], tx, r);
                    if x0 >= x1 {
                        continue;
                    }
                    let row = (ci * taps + (tz * k + ty) * k + tx) * n;
                    let src = &col[row..row + n];
                    for z in z0..z1 {
                        let sz = z + tz - r;
                        for y in y0..y1 {
                            let sy = y + ty - r;
                            let o = (z * dims[1] + y) * dims[2];
                            let s = (sz * dims[1] + sy) * dims[2] + tx;
                            let d = &mut dst[s + x0 - r..s + x1 - r];
                            for (a, b) in d.iter_mut().zip(&src[o + x0..o + x1]) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// One-dimensional clipped box sum along `axis` of every channel.
fn box_sum_axis(t: &Tensor, axis: usize, r: usize) -> Tensor {
    let (c, dims) = (t.channels(), t.dims());
    let len = dims[axis];
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let mut out = Tensor::grid_zeros(c, dims);
    let src = t.data();
    let dst = out.data_mut();
    let total = c * grid_len(dims);
    let mut prefix = vec![0.0; len + 1];
    // Enumerate the start index of every line along `axis`.
    for base in 0..total {
        if (base / stride) % len != 0 {
            continue;
        }
        for i in 0..len {
            prefix[i + 1] = prefix[i] + src[base + i * stride];
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            dst[base + i * stride] = prefix[hi] - prefix[lo];
        }
    }
    out
}

/// Sum over the in-grid part of the `(2r+1)³` window around every voxel,
/// per channel. The operator is symmetric, so it is its own adjoint.
pub fn box_sum_grid(t: &Tensor, r: usize) -> Tensor {
    let a = box_sum_axis(t, 0, r);
    let b = box_sum_axis(&a, 1, r);
    box_sum_axis(&b, 2, r)
}

/// Number of in-grid voxels in each clipped window.
pub fn window_counts(dims: [usize; 3], r: usize) -> Tensor {
    let count = |n: usize, i: usize| ((i + r + 1).min(n) - i.saturating_sub(r)) as f64;
    let mut data = Vec::with_capacity(grid_len(dims));
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                data.push(count(dims[0], z) * count(dims[1], y) * count(dims[2], x));
            }
        }
    }
    Tensor::grid(1, dims, data)
}

fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|n| if n >= 2 { n / 2 } else { 1 })
}

impl Graph {
    /// 3-D convolution, stride 1, zero padding `k / 2`.
    ///
    /// `weight` has shape `[out, in, k, k, k]` and `bias` shape `[out]`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xt = self.value(x);
        let wt = self.value(weight);
        let ws = wt.shape().to_vec();
        assert_eq!(ws.len(), 5, "conv3d weight must be [out, in, k, k, k]");
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        assert!(k % 2 == 1 && ws[3] == k && ws[4] == k, "conv3d kernel must be odd and cubic");
        assert_eq!(xt.channels(), cin, "conv3d input has {} channels, weight expects {cin}", xt.channels());
        let dims = xt.dims();
        let n = grid_len(dims);
        let kk = cin * k * k * k;

        let mut out = vec![0.0; cout * n];
        if k == 1 {
            gemm(cout, kk, n, wt.data(), (kk as isize, 1), xt.data(), (n as isize, 1), &mut out, false);
        } else {
            let col = im2col(xt.data(), cin, dims, k);
            gemm(cout, kk, n, wt.data(), (kk as isize, 1), &col, (n as isize, 1), &mut out, false);
        }
        if let Some(b) = bias {
            let bt = self.value(b);
            assert_eq!(bt.len(), cout);
            for (co, chunk) in out.chunks_mut(n).enumerate() {
                let bv = bt.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            Tensor::grid(cout, dims, out),
            inputs,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xin = ctx.inputs[0].data();
                let w = ctx.inputs[1].data();
                let col_owned;
                let col: &[f64] = if k == 1 {
                    xin
                } else if ctx.needs[1] {
                    col_owned = im2col(xin, cin, dims, k);
                    &col_owned
                } else {
                    &[]
                };
                let dx = ctx.needs[0].then(|| {
                    let mut dcol = vec![0.0; kk * n];
                    gemm(kk, cout, n, w, (1, kk as isize), g, (n as isize, 1), &mut dcol, false);
                    let data = if k == 1 { dcol } else { col2im(&dcol, cin, dims, k) };
                    Tensor::grid(cin, dims, data)
                });
                let dw = ctx.needs[1].then(|| {
                    let mut dw = vec![0.0; cout * kk];
                    gemm(cout, n, kk, g, (n as isize, 1), col, (1, n as isize), &mut dw, false);
                    Tensor::from_vec(vec![cout, cin, k, k, k], dw)
                });
                let mut grads = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        Tensor::from_vec(vec![cout], g.chunks(n).map(|c| c.iter().sum()).collect())
                    }));
                }
                grads
            }),
        )
    }

    /// Per-channel instance normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xt = self.value(x);
        let (c, dims, n) = (xt.channels(), xt.dims(), xt.voxels());
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let src = xt.channel(ch);
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[ch * n..(ch + 1) * n].iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        self.push(
            Tensor::grid(c, dims, out),
            vec![x],
            Box::new(move |ctx| {
                let xin = ctx.inputs[0];
                let mut dx = Tensor::grid_zeros(c, dims);
                for ch in 0..c {
                    let src = xin.channel(ch);
                    let mean = src.iter().sum::<f64>() / n as f64;
                    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g = ctx.grad.channel(ch);
                    let xh = ctx.output.channel(ch);
                    let gm = g.iter().sum::<f64>() / n as f64;
                    let gxm = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((d, gv), xv) in dx.channel_mut(ch).iter_mut().zip(g).zip(xh) {
                        *d = inv * (gv - gm - xv * gxm);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// 2× average pooling per axis (axes of length 1 are kept).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, dims) = (xt.channels(), xt.dims());
        let od = pooled_dims(dims);
        let f = [0, 1, 2].map(|a| if dims[a] >= 2 { 2 } else { 1 });
        let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
        let (n, on) = (grid_len(dims), grid_len(od));
        let mut out = vec![0.0; c * on];
        for ch in 0..c {
            let src = &xt.data()[ch * n..(ch + 1) * n];
            let dst = &mut out[ch * on..(ch + 1) * on];
            for z in 0..od[0] {
                for y in 0..od[1] {
                    for xo in 0..od[2] {
                        let mut s = 0.0;
                        for dz in 0..f[0] {
                            for dy in 0..f[1] {
                                for dx in 0..f[2] {
                                    s += src[((z * f[0] + dz) * dims[1] + y * f[1] + dy) * dims[2] + xo * f[2] + dx];
                                }
                            }
                        }
                        dst[(z * od[1] + y) * od[2] + xo] = s * inv;
                    }
                }
            }
        }
        self.push(
            Tensor::grid(c, od, out),
            vec![x],
            Box::new(move |ctx| {
                let mut dxt = Tensor::grid_zeros(c, dims);
                let g = ctx.grad.data();
                let d = dxt.data_mut();
                for ch in 0..c {
                    for z in 0..od[0] {
                        for y in 0..od[1] {
                            for xo in 0..od[2] {
                                let gv = g[ch * on + (z * od[1] + y) * od[2] + xo] * inv;
                                for dz in 0..f[0] {
                                    for dy in 0..f[1] {
                                        for dx in 0..f[2] {
                                            d[ch * n
                                                + ((z * f[0] + dz) * dims[1] + y * f[1] + dy) * dims[2]
                                                + xo * f[2]
                                                + dx] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dxt)]
            }),
        )
    }

    /// Clipped `(2r+1)³` box sum per channel.
    pub fn box_sum(&mut self, x: Var, r: usize) -> Var {
        let value = box_sum_grid(self.value(x), r);
        self.push(value, vec![x], Box::new(move |ctx| vec![Some(box_sum_grid(ctx.grad, r))]))
    }
}
