//! Siamese five-level feature encoders.
//!
//! * Encoder-G extracts general image features. Its first level is pulled
//!   towards a frozen reference network through a mutual-information
//!   alignment on PCA-reduced reference features.
//! * Encoder-S shares the same skeleton but ends every level with the
//!   structural embedding module (SEM), which folds clamped cosine
//!   self-similarity over an `n³` neighbourhood back into the features.
//!
//! Each level is `[pool] → conv-IN-LeakyReLU → conv-IN-LeakyReLU`, with 2×
//! average pooling opening levels 2–5.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Binding, Group, Init, ParamStore, LEVELS};
use crate::tape::{Graph, Var};
use crate::tensor::{grid_len, Tensor};
use crate::volgrid::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub channels: [usize; LEVELS],
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: [8, 16, 24, 32, 48], leaky_slope: 0.01, norm_eps: 1e-5 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "encoder channels must be positive and non-decreasing, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemConfig {
    /// Neighbourhood edge length (odd).
    pub n: usize,
    /// Projection width; `None` means `max(4, c / 2)`.
    pub reduced_channels: Option<usize>,
    pub epsilon: f64,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self { n: 7, reduced_channels: None, epsilon: 1e-8 }
    }
}

impl SemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 || self.n.is_multiple_of(2) {
            return Err(Error::Config(format!("SEM n must be odd and >= 3, got {}", self.n)));
        }
        if self.reduced_channels == Some(0) {
            return Err(Error::Config("SEM reduced_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        (self.n - 1) / 2
    }

    pub fn reduced_for(&self, c: usize) -> usize {
        self.reduced_channels.unwrap_or((c / 2).max(4))
    }

    /// Largest odd size `≤ n` that fits inside `dims`.
    pub fn effective_n(&self, dims: [usize; 3]) -> usize {
        let m = self.n.min(*dims.iter().min().expect("3 dims"));
        if m % 2 == 1 {
            m
        } else {
            m - 1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub channels: usize,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { channels: 16, seed: 0x05EE_D2EF }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    G,
    S,
    F,
}

/// Five feature grids, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub source: Source,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<(usize, [usize; 3])> {
        self.levels.iter().map(|t| (t.channels(), t.dims())).collect()
    }
}

pub fn check_input_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(Error::contract(format!("encoder input dims must be divisible by 16, got {dims:?}")));
    }
    Ok(())
}

fn conv_name(prefix: &str, what: &str) -> (String, String) {
    (format!("{prefix}.{what}.w"), format!("{prefix}.{what}.b"))
}

fn init_conv(store: &mut ParamStore, init: &mut Init, group: Group, prefix: &str, what: &str, out: usize, inp: usize, k: usize) {
    let (w, b) = conv_name(prefix, what);
    store.insert(w, group, &init.conv(out, inp, k));
    store.insert(b, group, &Tensor::zeros(vec![out]));
}

fn init_levels(store: &mut ParamStore, init: &mut Init, group: Group, tag: &str, cfg: &EncoderConfig) {
    let mut cin = 1;
    for (l, &c) in cfg.channels.iter().enumerate() {
        let prefix = format!("{tag}.l{}", l + 1);
        init_conv(store, init, group, &prefix, "conv1", c, cin, 3);
        init_conv(store, init, group, &prefix, "conv2", c, c, 3);
        cin = c;
    }
}

pub(crate) fn init_encoder_g(store: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig) {
    init_levels(store, init, Group::EncoderG, "g", cfg);
}

pub(crate) fn init_encoder_s(store: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig, sem: &SemConfig) {
    init_levels(store, init, Group::EncoderS, "s", cfg);
    for (l, &c) in cfg.channels.iter().enumerate() {
        let prefix = format!("s.l{}.sem", l + 1);
        let c1 = sem.reduced_for(c);
        let n3 = sem.n.pow(3);
        init_conv(store, init, Group::EncoderS, &prefix, "proj", c1, c, 1);
        // The similarity encoder sees up to n³ channels; levels whose
        // neighbourhood is clamped use the leading columns of this weight.
        init_conv(store, init, Group::EncoderS, &prefix, "enc1", c1, n3, 1);
        init_conv(store, init, Group::EncoderS, &prefix, "enc2", c1, c1, 3);
        init_conv(store, init, Group::EncoderS, &prefix, "out", c, c1, 3);
    }
}

pub(crate) fn init_reference(store: &mut ParamStore, cfg: &ReferenceConfig) {
    let mut init = Init::new(cfg.seed);
    init_conv(store, &mut init, Group::Reference, "ref", "conv1", cfg.channels, 1, 3);
    init_conv(store, &mut init, Group::Reference, "ref", "conv2", cfg.channels, cfg.channels, 3);
}

fn conv(g: &mut Graph, bind: &mut Binding, prefix: &str, what: &str, x: Var) -> Var {
    let (w, b) = conv_name(prefix, what);
    let (w, b) = (bind.var(g, &w), bind.var(g, &b));
    g.conv3d(x, w, Some(b))
}

fn block(g: &mut Graph, bind: &mut Binding, cfg: &EncoderConfig, prefix: &str, what: &str, x: Var) -> Var {
    let y = conv(g, bind, prefix, what, x);
    let y = g.instance_norm(y, cfg.norm_eps);
    g.leaky_relu(y, cfg.leaky_slope)
}

fn pyramid_vars(
    g: &mut Graph,
    bind: &mut Binding,
    cfg: &EncoderConfig,
    tag: &str,
    x: Var,
    mut after_level: impl FnMut(&mut Graph, &mut Binding, usize, Var) -> Var,
) -> Result<Vec<Var>> {
    check_input_dims(g.value(x).dims())?;
    let mut levels = Vec::with_capacity(LEVELS);
    let mut cur = x;
    for l in 0..LEVELS {
        let prefix = format!("{tag}.l{}", l + 1);
        if l > 0 {
            cur = g.avg_pool2(cur);
        }
        cur = block(g, bind, cfg, &prefix, "conv1", cur);
        cur = block(g, bind, cfg, &prefix, "conv2", cur);
        cur = after_level(g, bind, l, cur);
        levels.push(cur);
    }
    Ok(levels)
}

/// Encoder-G on the tape; returns the five level outputs, finest first.
pub fn encoder_g_vars(g: &mut Graph, bind: &mut Binding, cfg: &EncoderConfig, x: Var) -> Result<Vec<Var>> {
    pyramid_vars(g, bind, cfg, "g", x, |_, _, _, v| v)
}

/// Encoder-S on the tape: the Encoder-G skeleton with one SEM per level.
pub fn encoder_s_vars(g: &mut Graph, bind: &mut Binding, cfg: &EncoderConfig, sem: &SemConfig, x: Var) -> Result<Vec<Var>> {
    pyramid_vars(g, bind, cfg, "s", x, |g, bind, l, v| sem_forward_var(g, bind, sem, &format!("s.l{}.sem", l + 1), v))
}

/// Structural embedding module:
/// `1×1 projection c→c₁ → self-similarity (n³) → 1×1 conv + LeakyReLU →
/// 3³ conv (c₁) → add projection → 3³ conv back to c`.
pub fn sem_forward_var(g: &mut Graph, bind: &mut Binding, sem: &SemConfig, prefix: &str, s: Var) -> Var {
    let n = sem.effective_n(g.value(s).dims());
    let n3 = n.pow(3);
    let proj = conv(g, bind, prefix, "proj", s);
    let sim = g.self_similarity(proj, n, sem.epsilon);
    let (w, b) = conv_name(prefix, "enc1");
    let (w, b) = (bind.var(g, &w), bind.var(g, &b));
    let full_n3 = g.value(w).shape()[1];
    let w = if n3 == full_n3 { w } else { g.narrow_weight_inputs(w, n3) };
    let e = g.conv3d(sim, w, Some(b));
    let e = g.leaky_relu(e, 0.01);
    let e = conv(g, bind, prefix, "enc2", e);
    let r = g.add(proj, e);
    conv(g, bind, prefix, "out", r)
}

impl Graph {
    /// Keeps the first `k` input channels of a conv weight `[out, in, ...]`.
    pub fn narrow_weight_inputs(&mut self, w: Var, k: usize) -> Var {
        let t = self.value(w);
        let shape = t.shape().to_vec();
        let (out, inp) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        assert!(k <= inp);
        let mut data = Vec::with_capacity(out * k * inner);
        for o in 0..out {
            data.extend_from_slice(&t.data()[(o * inp) * inner..(o * inp + k) * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[1] = k;
        self.push(
            Tensor::from_vec(new_shape, data),
            vec![w],
            Box::new(move |ctx| {
                let mut gw = Tensor::zeros(shape.clone());
                for o in 0..out {
                    gw.data_mut()[(o * inp) * inner..(o * inp + k) * inner]
                        .copy_from_slice(&ctx.grad.data()[(o * k) * inner..(o * k + k) * inner]);
                }
                vec![Some(gw)]
            }),
        )
    }

    /// Clamped cosine self-similarity of each voxel's channel vector with
    /// every neighbour in an `n³` window. Output channel
    /// `((dz + D)·n + dy + D)·n + dx + D` holds offset `(dz, dy, dx)`;
    /// out-of-grid neighbours give 0.
    pub fn self_similarity(&mut self, x: Var, n: usize, eps: f64) -> Var {
        let value = self_similarity_grid(self.value(x), n, eps);
        self.push(
            value,
            vec![x],
            Box::new(move |ctx| {
                let input = ctx.inputs[0];
                let (c, dims) = (input.channels(), input.dims());
                let vm = voxel_major(input);
                let norms = norms(&vm, c);
                let mut gv = vec![0.0; vm.len()];
                let g = ctx.grad.data();
                let nv = grid_len(dims);
                for_each_offset_pair(dims, n, |o, i, j| {
                    let gs = g[o * nv + i];
                    if gs == 0.0 {
                        return;
                    }
                    let (a, b) = (&vm[i * c..(i + 1) * c], &vm[j * c..(j + 1) * c]);
                    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    let (na, nb) = (norms[i], norms[j]);
                    let den = na * nb + eps;
                    if dot / den <= 0.0 {
                        return;
                    }
                    let ka = if na > 0.0 { dot * nb / (na * den * den) } else { 0.0 };
                    let kb = if nb > 0.0 { dot * na / (nb * den * den) } else { 0.0 };
                    for ch in 0..c {
                        gv[i * c + ch] += gs * (b[ch] / den - ka * a[ch]);
                        gv[j * c + ch] += gs * (a[ch] / den - kb * b[ch]);
                    }
                });
                vec![Some(channel_major(&gv, c, dims))]
            }),
        )
    }
}

fn voxel_major(t: &Tensor) -> Vec<f64> {
    let (c, n) = (t.channels(), t.voxels());
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for (i, v) in t.channel(ch).iter().enumerate() {
            out[i * c + ch] = *v;
        }
    }
    out
}

fn channel_major(vm: &[f64], c: usize, dims: [usize; 3]) -> Tensor {
    let n = grid_len(dims);
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n + i] = vm[i * c + ch];
        }
    }
    Tensor::grid(c, dims, out)
}

fn norms(vm: &[f64], c: usize) -> Vec<f64> {
    vm.chunks(c).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

/// Calls `f(offset_channel, voxel, neighbour)` for every in-grid pair.
fn for_each_offset_pair(dims: [usize; 3], n: usize, mut f: impl FnMut(usize, usize, usize)) {
    let r = (n / 2) as isize;
    let range = |len: usize, d: isize| -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d.max(0)).max(0) as usize;
        (lo.min(hi), hi)
    };
    let mut o = 0;
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let (z0, z1) = range(dims[0], dz);
                let (y0, y1) = range(dims[1], dy);
                let (x0, x1) = range(dims[2], dx);
                let delta = (dz * (dims[1] * dims[2]) as isize) + dy * dims[2] as isize + dx;
                for z in z0..z1 {
                    for y in y0..y1 {
                        let row = (z * dims[1] + y) * dims[2];
                        for x in x0..x1 {
                            let i = row + x;
                            f(o, i, (i as isize + delta) as usize);
                        }
                    }
                }
                o += 1;
            }
        }
    }
}

/// Self-similarity tensor (`n³` channels, values in `[0, 1]`).
pub fn self_similarity_grid(x: &Tensor, n: usize, eps: f64) -> Tensor {
    let (c, dims) = (x.channels(), x.dims());
    let vm = voxel_major(x);
    let norms = norms(&vm, c);
    let nv = grid_len(dims);
    let mut out = Tensor::grid_zeros(n * n * n, dims);
    let d = out.data_mut();
    for_each_offset_pair(dims, n, |o, i, j| {
        let dot: f64 = vm[i * c..(i + 1) * c].iter().zip(&vm[j * c..(j + 1) * c]).map(|(p, q)| p * q).sum();
        d[o * nv + i] = (dot / (norms[i] * norms[j] + eps)).max(0.0);
    });
    out
}

/// Self-similarity of a reduced feature grid using `cfg.n` (not clamped).
pub fn sem_self_similarity(s_reduced: &Tensor, cfg: &SemConfig) -> Tensor {
    self_similarity_grid(s_reduced, cfg.n, cfg.epsilon)
}

fn run_pyramid(
    v: &Volume,
    store: &ParamStore,
    f: impl FnOnce(&mut Graph, &mut Binding, Var) -> Result<Vec<Var>>,
    source: Source,
) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let mut bind = Binding::frozen(store);
    let x = g.constant(v.to_tensor());
    let levels = f(&mut g, &mut bind, x)?;
    Ok(FeaturePyramid { levels: levels.into_iter().map(|l| g.value(l).clone()).collect(), source })
}

pub fn encoder_g_forward(v: &Volume, store: &ParamStore, cfg: &EncoderConfig) -> Result<FeaturePyramid> {
    run_pyramid(v, store, |g, b, x| encoder_g_vars(g, b, cfg, x), Source::G)
}

pub fn encoder_s_forward(v: &Volume, store: &ParamStore, cfg: &EncoderConfig, sem: &SemConfig) -> Result<FeaturePyramid> {
    run_pyramid(v, store, |g, b, x| encoder_s_vars(g, b, cfg, sem, x), Source::S)
}

/// Frozen reference network at full resolution:
/// `conv-LeakyReLU-conv-LeakyReLU`, stride 1.
pub fn reference_features(v: &Volume, store: &ParamStore) -> Tensor {
    let mut g = Graph::new();
    let mut bind = Binding::frozen(store);
    let x = g.constant(v.to_tensor());
    let y = conv(&mut g, &mut bind, "ref", "conv1", x);
    let y = g.leaky_relu(y, 0.01);
    let y = conv(&mut g, &mut bind, "ref", "conv2", y);
    let y = g.leaky_relu(y, 0.01);
    g.value(y).clone()
}

const REF_MAGIC: &[u8; 8] = b"MRGREFW\0";
const REF_VERSION: u32 = 1;

/// Writes the reference encoder weights as a versioned blob: magic,
/// version, layer count, then per layer its name, shape and
/// little-endian `f32` data.
pub fn save_reference_weights(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let layers: Vec<_> = store.iter().filter(|(_, p)| p.group == Group::Reference).collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(REF_MAGIC);
    buf.extend_from_slice(&REF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for (name, p) in &layers {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for (_, p) in &layers {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Replaces the reference encoder weights in `store` with the file's.
/// Every declared layer must exist with exactly the same shape.
pub fn load_reference_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut cur = crate::io::ByteReader::new(&bytes, path);
    if cur.take(8)? != REF_MAGIC {
        return Err(Error::format(path, "not a reference weight file"));
    }
    let version = cur.u32()?;
    if version != REF_VERSION {
        return Err(Error::Version { found: version, expected: REF_VERSION });
    }
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| Error::format(path, "bad layer name"))?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected = store.get(&name).filter(|p| p.group == Group::Reference).map(|p| p.shape.clone());
        if expected.as_ref() != Some(&shape) {
            return Err(Error::format(
                path,
                format!("layer {name} has shape {shape:?}, model expects {expected:?} (channel mismatch)"),
            ));
        }
        layers.push((name, shape));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in layers {
        let n: usize = shape.iter().product();
        loaded.push((name, cur.f32s(n)?));
    }
    if !cur.is_done() {
        return Err(Error::format(path, "trailing bytes after reference weights"));
    }
    for (name, data) in loaded {
        store.get_mut(&name).expect("checked above").data = data;
    }
    Ok(())
}

/// Projects per-voxel channel vectors onto their top `target` principal
/// directions (fit over this grid's voxels, descending variance). Missing
/// directions of a rank-deficient covariance project to zero.
pub fn pca_reduce(feat: &Tensor, target: usize) -> Result<Tensor> {
    let (c, dims, n) = (feat.channels(), feat.dims(), feat.voxels());
    if target > c {
        return Err(Error::contract(format!("pca_reduce: {target} components from {c} channels")));
    }
    if n <= c {
        return Err(Error::contract(format!("pca_reduce: {n} samples for {c} channels")));
    }
    let mean: Vec<f64> = (0..c).map(|ch| feat.channel(ch).iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; c * c];
    for a in 0..c {
        for b in a..c {
            let (xa, xb) = (feat.channel(a), feat.channel(b));
            let s: f64 = xa.iter().zip(xb).map(|(p, q)| (p - mean[a]) * (q - mean[b])).sum::<f64>() / n as f64;
            cov[a * c + b] = s;
            cov[b * c + a] = s;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(c, c, &cov));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 + 1e-300;

    let mut out = Tensor::grid_zeros(target, dims);
    let mut deficient = 0;
    for (k, &idx) in order.iter().take(target).enumerate() {
        if eig.eigenvalues[idx] <= tol {
            deficient += 1;
            continue;
        }
        let mut dir: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // Sign convention: largest-magnitude entry positive.
        let lead = dir.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        let dst = out.channel_mut(k);
        for (ch, w) in dir.iter().enumerate() {
            for (o, x) in dst.iter_mut().zip(feat.channel(ch)) {
                *o += w * (x - mean[ch]);
            }
        }
    }
    if deficient > 0 {
        log::warn!("pca_reduce: covariance rank below {target}; {deficient} component(s) set to zero");
    }
    Ok(out)
}

/// `−(1/C)·Σ_c MI(g1[c], r[c])` on the tape; `reference` is constant.
pub fn distill_alignment_var(g: &mut Graph, g1: Var, reference: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let gt = g.value(g1);
    if gt.channels() != reference.channels() || gt.dims() != reference.dims() {
        return Err(Error::contract(format!(
            "distillation: features {:?} vs reference {:?}",
            gt.shape(),
            reference.shape()
        )));
    }
    let c = gt.channels();
    let mut total: Option<Var> = None;
    for ch in 0..c {
        let gc = g.narrow_channels(g1, ch, 1);
        let rc = g.constant(Tensor::grid(1, reference.dims(), reference.channel(ch).to_vec()));
        let mi = g.mutual_information(gc, rc, cfg.mi_bins, cfg.mi_sigma());
        total = Some(match total {
            Some(t) => g.add(t, mi),
            None => mi,
        });
    }
    let total = total.expect("at least one channel");
    Ok(g.mul_scalar(total, -1.0 / c as f64))
}

pub fn distill_alignment_loss(g1: &Tensor, reference: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(g1.clone());
    let out = distill_alignment_var(&mut g, v, reference, cfg)?;
    Ok(g.value(out).item())
}
