//! Volumes, displacement fields, and the grid kernels that move data
//! between them: backward warping, field composition, field resampling
//! and Jacobian analysis.
//!
//! Warping is backward: the output at `x` samples the input at
//! `x + u(x)`. Samples that fall outside the grid are clamped to the
//! nearest edge voxel. Displacements are in voxel units, channel order
//! `(d0, d1, d2)` matching the grid axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{flat, grid_len, Tensor};

/// Scalar 3-D image with optional integer label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
    spacing: [f64; 3],
    labels: Option<Vec<u16>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::contract(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if voxels.len() != grid_len(dims) {
            return Err(Error::contract(format!(
                "volume dims {dims:?} need {} voxels, got {}",
                grid_len(dims),
                voxels.len()
            )));
        }
        Ok(Self { dims, voxels, spacing: [1.0; 3], labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.voxels.len() {
            return Err(Error::contract("label grid does not share the volume dims"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn take_labels(&mut self) -> Option<Vec<u16>> {
        self.labels.take()
    }

    /// Min-max rescale of intensities into `[0, 1]`. Constant volumes map
    /// to zero.
    pub fn normalize(&mut self) {
        let (lo, hi) = self
            .voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in &mut self.voxels {
            *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
    }

    /// Single-channel `f64` grid of the intensities.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::grid(1, self.dims, self.voxels.iter().map(|&v| v as f64).collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::contract("volume tensors have exactly one channel"));
        }
        Self::new(t.dims(), t.data().iter().map(|&v| v as f32).collect())
    }
}

/// Per-voxel displacement in voxel units, stored as a 3-channel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    data: Tensor,
}

impl DisplacementField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { data: Tensor::grid_zeros(3, dims) }
    }

    pub fn constant(dims: [usize; 3], u: [f64; 3]) -> Self {
        let n = grid_len(dims);
        let mut data = Vec::with_capacity(3 * n);
        for c in u {
            data.extend(std::iter::repeat_n(c, n));
        }
        Self { data: Tensor::grid(3, dims, data) }
    }

    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if !data.is_grid() || data.channels() != 3 {
            return Err(Error::contract(format!("displacement fields are 3-channel grids, got {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(Error::contract("displacement field contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        self.data.channel(c)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.max_abs()
    }

    /// Largest per-voxel Euclidean displacement.
    pub fn max_norm(&self) -> f64 {
        let n = grid_len(self.dims());
        (0..n)
            .map(|i| (0..3).map(|c| self.data.channel(c)[i].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Base index, fraction, and whether the coordinate was inside the grid
/// (so that its derivative is live) for one axis.
#[inline]
fn axis_sample(p: f64, n: usize) -> (usize, f64, bool) {
    if n == 1 {
        return (0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&p);
    let pc = p.clamp(0.0, hi);
    let i0 = (pc.floor() as usize).min(n - 2);
    (i0, pc - i0 as f64, inside)
}

#[inline]
fn axis_nearest(p: f64, n: usize) -> usize {
    p.round().clamp(0.0, (n - 1) as f64) as usize
}

/// Corner offsets and weights for one trilinear sample.
struct Corners {
    idx: [usize; 8],
    w: [f64; 8],
    /// `∂w/∂p` per axis, zero on clamped axes.
    dw: [[f64; 8]; 3],
}

#[inline]
fn corners(dims: [usize; 3], p: [f64; 3]) -> Corners {
    let (z0, tz, az) = axis_sample(p[0], dims[0]);
    let (y0, ty, ay) = axis_sample(p[1], dims[1]);
    let (x0, tx, ax) = axis_sample(p[2], dims[2]);
    let step = |n: usize| usize::from(n > 1);
    let (sz, sy, sx) = (step(dims[0]) * dims[1] * dims[2], step(dims[1]) * dims[2], step(dims[2]));
    let base = flat(dims, z0, y0, x0);
    let wz = [1.0 - tz, tz];
    let wy = [1.0 - ty, ty];
    let wx = [1.0 - tx, tx];
    let dz = if az { [-1.0, 1.0] } else { [0.0, 0.0] };
    let dy = if ay { [-1.0, 1.0] } else { [0.0, 0.0] };
    let dx = if ax { [-1.0, 1.0] } else { [0.0, 0.0] };
    let mut c = Corners { idx: [0; 8], w: [0.0; 8], dw: [[0.0; 8]; 3] };
    for k in 0..8 {
        let (a, b, e) = (k >> 2, (k >> 1) & 1, k & 1);
        c.idx[k] = base + a * sz + b * sy + e * sx;
        c.w[k] = wz[a] * wy[b] * wx[e];
        c.dw[0][k] = dz[a] * wy[b] * wx[e];
        c.dw[1][k] = wz[a] * dy[b] * wx[e];
        c.dw[2][k] = wz[a] * wy[b] * dx[e];
    }
    c
}

#[inline]
fn sample_pos(dims: [usize; 3], field: &Tensor, i: usize) -> [f64; 3] {
    let (z, y, x) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
    [z as f64 + field.channel(0)[i], y as f64 + field.channel(1)[i], x as f64 + field.channel(2)[i]]
}

/// Backward warp of every channel of `input` by `field`.
pub fn warp_grid(input: &Tensor, field: &Tensor, interp: Interp) -> Tensor {
    let dims = input.dims();
    assert_eq!(dims, field.dims(), "warp: grid and field dims differ");
    let (c, n) = (input.channels(), grid_len(dims));
    let mut out = Tensor::grid_zeros(c, dims);
    let src = input.data();
    let dst = out.data_mut();
    for i in 0..n {
        let p = sample_pos(dims, field, i);
        match interp {
            Interp::Trilinear => {
                let k = corners(dims, p);
                for ch in 0..c {
                    let s = &src[ch * n..];
                    let mut v = 0.0;
                    for j in 0..8 {
                        v += k.w[j] * s[k.idx[j]];
                    }
                    dst[ch * n + i] = v;
                }
            }
            Interp::Nearest => {
                let j = flat(
                    dims,
                    axis_nearest(p[0], dims[0]),
                    axis_nearest(p[1], dims[1]),
                    axis_nearest(p[2], dims[2]),
                );
                for ch in 0..c {
                    dst[ch * n + i] = src[ch * n + j];
                }
            }
        }
    }
    out
}

/// Nearest-neighbour backward warp of a label grid.
pub fn warp_labels(labels: &[u16], dims: [usize; 3], field: &DisplacementField) -> Result<Vec<u16>> {
    if field.dims() != dims || labels.len() != grid_len(dims) {
        return Err(Error::contract("warp_labels: label grid and field dims differ"));
    }
    let t = field.tensor();
    Ok((0..labels.len())
        .map(|i| {
            let p = sample_pos(dims, t, i);
            labels[flat(dims, axis_nearest(p[0], dims[0]), axis_nearest(p[1], dims[1]), axis_nearest(p[2], dims[2]))]
        })
        .collect())
}

/// Warps intensities with `interp`; labels, when present, always use
/// nearest-neighbour sampling.
pub fn warp_volume(v: &Volume, f: &DisplacementField, interp: Interp) -> Result<Volume> {
    if v.dims() != f.dims() {
        return Err(Error::contract(format!("warp_volume: volume {:?} vs field {:?}", v.dims(), f.dims())));
    }
    let out = warp_grid(&v.to_tensor(), f.tensor(), interp);
    let mut w = Volume::from_tensor(&out)?.with_spacing(v.spacing());
    if let Some(labels) = v.labels() {
        w = w.with_labels(warp_labels(labels, v.dims(), f)?)?;
    }
    Ok(w)
}

/// `result(x) = inner(x) + outer(x + inner(x))`: applying the result is
/// applying `inner`, then `outer`.
pub fn compose_fields(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    if outer.dims() != inner.dims() {
        return Err(Error::contract("compose_fields: dims differ"));
    }
    let mut moved = warp_grid(outer.tensor(), inner.tensor(), Interp::Trilinear);
    moved.add_assign(inner.tensor());
    DisplacementField::from_tensor(moved)
}

#[inline]
fn resize_coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

fn strides(dims: [usize; 3]) -> [usize; 3] {
    [dims[1] * dims[2], dims[2], 1]
}

/// Linear resampling of one axis (half-pixel centres, edge clamped).
fn resize_axis(t: &Tensor, axis: usize, n_out: usize) -> Tensor {
    let (c, dims) = (t.channels(), t.dims());
    let mut od = dims;
    od[axis] = n_out;
    let (is, os) = (strides(dims), strides(od));
    let mut out = Tensor::grid_zeros(c, od);
    let (n, on) = (grid_len(dims), grid_len(od));
    let src = t.data();
    let dst = out.data_mut();
    let coords: Vec<_> = (0..n_out).map(|o| resize_coord(o, dims[axis], n_out)).collect();
    for ch in 0..c {
        for j in 0..on {
            let mut idx = [j / os[0], (j / os[1]) % od[1], j % od[2]];
            let (i0, i1, w) = coords[idx[axis]];
            idx[axis] = i0;
            let a = idx[0] * is[0] + idx[1] * is[1] + idx[2];
            idx[axis] = i1;
            let b = idx[0] * is[0] + idx[1] * is[1] + idx[2];
            dst[ch * on + j] = (1.0 - w) * src[ch * n + a] + w * src[ch * n + b];
        }
    }
    out
}

/// Adjoint of [`resize_axis`].
fn resize_axis_adjoint(g: &Tensor, axis: usize, n_in: usize) -> Tensor {
    let (c, od) = (g.channels(), g.dims());
    let mut dims = od;
    dims[axis] = n_in;
    let (is, os) = (strides(dims), strides(od));
    let mut out = Tensor::grid_zeros(c, dims);
    let (n, on) = (grid_len(dims), grid_len(od));
    let src = g.data();
    let dst = out.data_mut();
    let coords: Vec<_> = (0..od[axis]).map(|o| resize_coord(o, n_in, od[axis])).collect();
    for ch in 0..c {
        for j in 0..on {
            let mut idx = [j / os[0], (j / os[1]) % od[1], j % od[2]];
            let (i0, i1, w) = coords[idx[axis]];
            idx[axis] = i0;
            let a = idx[0] * is[0] + idx[1] * is[1] + idx[2];
            idx[axis] = i1;
            let b = idx[0] * is[0] + idx[1] * is[1] + idx[2];
            dst[ch * n + a] += (1.0 - w) * src[ch * on + j];
            dst[ch * n + b] += w * src[ch * on + j];
        }
    }
    out
}

/// Trilinear resampling of every channel to `new_dims`.
pub fn resize_grid(t: &Tensor, new_dims: [usize; 3]) -> Tensor {
    let a = resize_axis(t, 0, new_dims[0]);
    let b = resize_axis(&a, 1, new_dims[1]);
    resize_axis(&b, 2, new_dims[2])
}

fn resize_grid_adjoint(g: &Tensor, old_dims: [usize; 3]) -> Tensor {
    let a = resize_axis_adjoint(g, 2, old_dims[2]);
    let b = resize_axis_adjoint(&a, 1, old_dims[1]);
    resize_axis_adjoint(&b, 0, old_dims[0])
}

fn field_scale(from: [usize; 3], to: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| to[a] as f64 / from[a] as f64)
}

fn resize_field_tensor(f: &Tensor, new_dims: [usize; 3]) -> Tensor {
    let scale = field_scale(f.dims(), new_dims);
    let mut out = resize_grid(f, new_dims);
    for (c, s) in scale.iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Trilinear spatial upsampling by `factor` with displacement values
/// rescaled to the finer voxel size.
pub fn upsample_field(f: &DisplacementField, factor: usize) -> DisplacementField {
    let new_dims = f.dims().map(|d| d * factor);
    DisplacementField { data: resize_field_tensor(f.tensor(), new_dims) }
}

/// Resamples a field onto `new_dims`, scaling each component by the
/// per-axis size ratio.
pub fn resize_field(f: &DisplacementField, new_dims: [usize; 3]) -> DisplacementField {
    DisplacementField { data: resize_field_tensor(f.tensor(), new_dims) }
}

/// `∂u_c/∂x_a` with central differences inside, one-sided at the border.
fn derivative(u: &[f64], dims: [usize; 3], axis: usize, i: usize) -> f64 {
    let st = strides(dims)[axis];
    let pos = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]][axis];
    let n = dims[axis];
    if n < 2 {
        0.0
    } else if pos == 0 {
        u[i + st] - u[i]
    } else if pos == n - 1 {
        u[i] - u[i - st]
    } else {
        0.5 * (u[i + st] - u[i - st])
    }
}

/// Per-voxel `det(I + ∇u)`.
pub fn jacobian_determinant(f: &DisplacementField) -> Vec<f64> {
    let dims = f.dims();
    let n = grid_len(dims);
    (0..n)
        .map(|i| {
            let mut j = [[0.0; 3]; 3];
            for (c, row) in j.iter_mut().enumerate() {
                for (a, v) in row.iter_mut().enumerate() {
                    *v = derivative(f.component(c), dims, a, i) + if a == c { 1.0 } else { 0.0 };
                }
            }
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        })
        .collect()
}

impl Graph {
    /// Differentiable trilinear backward warp of `x` by the 3-channel `field`.
    pub fn warp(&mut self, x: Var, field: Var) -> Var {
        let value = warp_grid(self.value(x), self.value(field), Interp::Trilinear);
        self.push(
            value,
            vec![x, field],
            Box::new(|ctx| {
                let (input, field, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let dims = input.dims();
                let (c, n) = (input.channels(), grid_len(dims));
                let mut dx = ctx.needs[0].then(|| Tensor::grid_zeros(c, dims));
                let mut du = ctx.needs[1].then(|| Tensor::grid_zeros(3, dims));
                let src = input.data();
                let gd = g.data();
                for i in 0..n {
                    let k = corners(dims, sample_pos(dims, field, i));
                    if let Some(dx) = dx.as_mut() {
                        let d = dx.data_mut();
                        for ch in 0..c {
                            let gv = gd[ch * n + i];
                            for j in 0..8 {
                                d[ch * n + k.idx[j]] += k.w[j] * gv;
                            }
                        }
                    }
                    if let Some(du) = du.as_mut() {
                        let mut acc = [0.0; 3];
                        for ch in 0..c {
                            let gv = gd[ch * n + i];
                            for (a, acc_a) in acc.iter_mut().enumerate() {
                                let mut s = 0.0;
                                for j in 0..8 {
                                    s += k.dw[a][j] * src[ch * n + k.idx[j]];
                                }
                                *acc_a += gv * s;
                            }
                        }
                        let d = du.data_mut();
                        for (a, v) in acc.iter().enumerate() {
                            d[a * n + i] = *v;
                        }
                    }
                }
                vec![dx, du]
            }),
        )
    }

    /// Differentiable [`compose_fields`].
    pub fn compose(&mut self, outer: Var, inner: Var) -> Var {
        let moved = self.warp(outer, inner);
        self.add(inner, moved)
    }

    /// Differentiable field resampling (see [`resize_field`]).
    pub fn resize_field(&mut self, f: Var, new_dims: [usize; 3]) -> Var {
        let old_dims = self.value(f).dims();
        let scale = field_scale(old_dims, new_dims);
        let value = resize_field_tensor(self.value(f), new_dims);
        self.push(
            value,
            vec![f],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                for (c, s) in scale.iter().enumerate() {
                    g.channel_mut(c).iter_mut().for_each(|v| *v *= s);
                }
                vec![Some(resize_grid_adjoint(&g, old_dims))]
            }),
        )
    }
}
