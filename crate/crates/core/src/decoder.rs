//! Per-level feature fusion and the coarse-to-fine motion-decomposition
//! decoder.
//!
//! At each level, fixed features are projected to queries and (warped)
//! moving features to keys. Every head attends over the 3³ neighbourhood
//! and reads out the expected offset. The same readout with keys taken
//! from the fixed image is subtracted, so identical inputs produce exactly
//! zero motion whatever the weights are. A learned 1×1×1 convolution
//! mixes the per-head motions into one displacement.

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::model::{Binding, FusionMode, Group, Init, ParamStore, LEVELS};
use crate::tape::{Graph, Var};
use crate::tensor::{grid_len, Tensor};
use crate::volgrid::DisplacementField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Attention heads per level, finest first.
    pub heads: [usize; LEVELS],
    /// Neighbourhood edge length; only 3 is supported.
    pub neighborhood: usize,
    /// Per-level displacement clamp (voxels at that level).
    pub max_level_displacement: f64,
    /// Std of the perturbation added to identity projections at init.
    pub init_jitter: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { heads: [1, 2, 2, 4, 4], neighborhood: 3, max_level_displacement: 8.0, init_jitter: 0.1 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighborhood != 3 {
            return Err(Error::Config(format!("decoder neighborhood must be 3, got {}", self.neighborhood)));
        }
        if self.heads.contains(&0) {
            return Err(Error::Config("decoder heads must be >= 1".into()));
        }
        if !(self.max_level_displacement > 0.0) {
            return Err(Error::Config("max_level_displacement must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn check_channels(&self, enc: &EncoderConfig) -> Result<()> {
        for (l, (&c, &h)) in enc.channels.iter().zip(&self.heads).enumerate() {
            if c % h != 0 {
                return Err(Error::Config(format!("level {}: {c} channels not divisible by {h} heads", l + 1)));
            }
        }
        Ok(())
    }
}

pub(crate) fn init_fusion(store: &mut ParamStore, init: &mut Init, enc: &EncoderConfig) {
    for (l, &c) in enc.channels.iter().enumerate() {
        // Starts as the G stream at the centre tap, so stage 3 begins from
        // the features the decoder was first trained on. S enters through
        // the jitter and whatever stage 3 learns.
        let mut w = init.normal(vec![c, 2 * c, 3, 3, 3], 0.01);
        for o in 0..c {
            w.data_mut()[(o * 2 * c + o) * 27 + 13] += 1.0;
        }
        store.insert(format!("fuse.l{}.w", l + 1), Group::Fusion, &w);
        store.insert(format!("fuse.l{}.b", l + 1), Group::Fusion, &Tensor::zeros(vec![c]));
    }
}

pub(crate) fn init_decoder(store: &mut ParamStore, init: &mut Init, enc: &EncoderConfig, cfg: &DecoderConfig) {
    for (l, (&c, &h)) in enc.channels.iter().zip(&cfg.heads).enumerate() {
        let lvl = l + 1;
        for which in ["q", "k"] {
            let mut w = init.normal(vec![c, c, 1, 1, 1], cfg.init_jitter / (c as f64).sqrt());
            for i in 0..c {
                w.data_mut()[i * c + i] += 1.0;
            }
            store.insert(format!("dec.l{lvl}.{which}.w"), Group::Decoder, &w);
        }
        // Head average times 2, which cancels the halving in the motion
        // term: a sharp match then yields the full offset.
        let mut mix = Tensor::zeros(vec![3, 3 * h, 1, 1, 1]);
        for a in 0..3 {
            for head in 0..h {
                mix.data_mut()[a * 3 * h + head * 3 + a] = 2.0 / h as f64;
            }
        }
        store.insert(format!("dec.l{lvl}.mix.w"), Group::Decoder, &mix);
        store.insert(format!("dec.l{lvl}.mix.b"), Group::Decoder, &Tensor::zeros(vec![3]));
    }
}

/// Builds `F_l` from whichever encoder streams `mode` uses. Bypass modes
/// return the stream variable itself.
pub fn fuse_features_var(
    g: &mut Graph,
    bind: &mut Binding,
    level: usize,
    general: Option<Var>,
    structural: Option<Var>,
    mode: FusionMode,
) -> Result<Var> {
    let missing = || Error::contract(format!("fusion mode {mode:?} lacks an input stream"));
    match mode {
        FusionMode::GeneralOnly => general.ok_or_else(missing),
        FusionMode::StructuralOnly => structural.ok_or_else(missing),
        FusionMode::Fused => {
            let (a, b) = (general.ok_or_else(missing)?, structural.ok_or_else(missing)?);
            if g.value(a).shape() != g.value(b).shape() {
                return Err(Error::contract(format!(
                    "fusion: G {:?} vs S {:?}",
                    g.value(a).shape(),
                    g.value(b).shape()
                )));
            }
            let cat = g.concat_channels(a, b);
            let w = bind.var(g, &format!("fuse.l{}.w", level + 1));
            let bias = bind.var(g, &format!("fuse.l{}.b", level + 1));
            Ok(g.conv3d(cat, w, Some(bias)))
        }
    }
}

/// Plain-tensor fusion with the stored parameters.
pub fn fuse_features(store: &ParamStore, level: usize, general: &Tensor, structural: &Tensor, mode: FusionMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut bind = Binding::frozen(store);
    let a = g.constant(general.clone());
    let b = g.constant(structural.clone());
    let out = fuse_features_var(&mut g, &mut bind, level, Some(a), Some(b), mode)?;
    Ok(g.value(out).clone())
}

/// The 27 offsets `(dz, dy, dx)` in channel order, `dx` fastest.
pub fn offsets() -> [[i32; 3]; 27] {
    let mut out = [[0; 3]; 27];
    for (i, o) in out.iter_mut().enumerate() {
        *o = [(i / 9) as i32 - 1, (i / 3 % 3) as i32 - 1, (i % 3) as i32 - 1];
    }
    out
}

/// In-bounds neighbour indices of `(z, y, x)` as `(offset, index)`.
fn neighbours(dims: [usize; 3], z: usize, y: usize, x: usize, out: &mut Vec<(usize, usize)>) {
    out.clear();
    for (o, d) in offsets().iter().enumerate() {
        let (nz, ny, nx) = (z as i64 + d[0] as i64, y as i64 + d[1] as i64, x as i64 + d[2] as i64);
        if nz < 0 || ny < 0 || nx < 0 || nz >= dims[0] as i64 || ny >= dims[1] as i64 || nx >= dims[2] as i64 {
            continue;
        }
        out.push((o, (nz as usize * dims[1] + ny as usize) * dims[2] + nx as usize));
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

/// Visits every voxel and head with its softmax weights over in-bounds
/// offsets.
fn for_each_attention(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    scale: f64,
    mut f: impl FnMut(usize, usize, &[(usize, usize)], &[f64]),
) {
    let (c, dims) = (q.channels(), q.dims());
    let dh = c / heads;
    let (qv, kv) = (voxel_major(q), voxel_major(k));
    let mut nb = Vec::with_capacity(27);
    let mut p = Vec::with_capacity(27);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * dims[1] + y) * dims[2] + x;
                neighbours(dims, z, y, x, &mut nb);
                for h in 0..heads {
                    let qi = &qv[i * c + h * dh..i * c + (h + 1) * dh];
                    p.clear();
                    let mut max = f64::NEG_INFINITY;
                    for &(_, j) in &nb {
                        let kj = &kv[j * c + h * dh..j * c + (h + 1) * dh];
                        let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(s);
                        p.push(s);
                    }
                    let mut total = 0.0;
                    for s in p.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    p.iter_mut().for_each(|s| *s /= total);
                    f(i, h, &nb, &p);
                }
            }
        }
    }
}

/// Per-head expected offset `Σ_d softmax_d(scale·q(x)·k(x+d))·d` over the
/// in-bounds 3³ neighbourhood; output channel `3h + axis`.
pub fn local_soft_argmax(q: &Tensor, k: &Tensor, heads: usize, scale: f64) -> Tensor {
    let dims = q.dims();
    let nv = grid_len(dims);
    let offs = offsets();
    let mut out = Tensor::grid_zeros(3 * heads, dims);
    let d = out.data_mut();
    for_each_attention(q, k, heads, scale, |i, h, nb, p| {
        for (&(o, _), &w) in nb.iter().zip(p) {
            for a in 0..3 {
                d[(3 * h + a) * nv + i] += w * offs[o][a] as f64;
            }
        }
    });
    out
}

impl Graph {
    /// Differentiable [`local_soft_argmax`].
    pub fn local_soft_argmax(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Var {
        assert_eq!(self.value(q).shape(), self.value(k).shape(), "query/key shape mismatch");
        assert_eq!(self.value(q).channels() % heads, 0, "channels not divisible by heads");
        let value = local_soft_argmax(self.value(q), self.value(k), heads, scale);
        self.push(
            value,
            vec![q, k],
            Box::new(move |ctx| {
                let (q, k) = (ctx.inputs[0], ctx.inputs[1]);
                let (c, dims) = (q.channels(), q.dims());
                let dh = c / heads;
                let nv = grid_len(dims);
                let (qv, kv) = (voxel_major(q), voxel_major(k));
                let (out, g) = (ctx.output.data(), ctx.grad.data());
                let offs = offsets();
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                for_each_attention(q, k, heads, scale, |i, h, nb, p| {
                    let ga: [f64; 3] = std::array::from_fn(|a| g[(3 * h + a) * nv + i]);
                    let base: f64 = (0..3).map(|a| ga[a] * out[(3 * h + a) * nv + i]).sum();
                    let lo = h * dh;
                    for (&(o, j), &w) in nb.iter().zip(p) {
                        let dot: f64 = (0..3).map(|a| ga[a] * offs[o][a] as f64).sum();
                        let ds = scale * w * (dot - base);
                        if ds == 0.0 {
                            continue;
                        }
                        for ch in lo..lo + dh {
                            gq[i * c + ch] += ds * kv[j * c + ch];
                            gk[j * c + ch] += ds * qv[i * c + ch];
                        }
                    }
                });
                let back = |vm: Vec<f64>| {
                    let mut t = Tensor::grid_zeros(c, dims);
                    let d = t.data_mut();
                    for i in 0..nv {
                        for ch in 0..c {
                            d[ch * nv + i] = vm[i * c + ch];
                        }
                    }
                    t
                };
                vec![ctx.needs[0].then(|| back(gq)), ctx.needs[1].then(|| back(gk))]
            }),
        )
    }
}

/// Level field on the tape. `level` is 0-based (finest first).
pub fn estimate_level_field_var(
    g: &mut Graph,
    bind: &mut Binding,
    cfg: &DecoderConfig,
    level: usize,
    f_fixed: Var,
    f_moving: Var,
) -> Result<Var> {
    if g.value(f_fixed).shape() != g.value(f_moving).shape() {
        return Err(Error::contract(format!(
            "level {}: fixed {:?} vs moving {:?}",
            level + 1,
            g.value(f_fixed).shape(),
            g.value(f_moving).shape()
        )));
    }
    let heads = cfg.heads[level];
    let c = g.value(f_fixed).channels();
    if !c.is_multiple_of(heads) {
        return Err(Error::contract(format!("level {}: {c} channels, {heads} heads", level + 1)));
    }
    let lvl = level + 1;
    let wq = bind.var(g, &format!("dec.l{lvl}.q.w"));
    let wk = bind.var(g, &format!("dec.l{lvl}.k.w"));
    let q = g.conv3d(f_fixed, wq, None);
    let km = g.conv3d(f_moving, wk, None);
    let kf = g.conv3d(f_fixed, wk, None);
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let am = g.local_soft_argmax(q, km, heads, scale);
    let af = g.local_soft_argmax(q, kf, heads, scale);
    let diff = g.sub(am, af);
    let motion = g.mul_scalar(diff, 0.5);
    let mw = bind.var(g, &format!("dec.l{lvl}.mix.w"));
    let mb = bind.var(g, &format!("dec.l{lvl}.mix.b"));
    let field = g.conv3d(motion, mw, Some(mb));
    Ok(g.clamp_abs(field, cfg.max_level_displacement))
}

pub fn estimate_level_field(
    f_fixed: &Tensor,
    f_moving: &Tensor,
    store: &ParamStore,
    level: usize,
    cfg: &DecoderConfig,
) -> Result<DisplacementField> {
    let mut g = Graph::new();
    let mut bind = Binding::frozen(store);
    let (a, b) = (g.constant(f_fixed.clone()), g.constant(f_moving.clone()));
    let out = estimate_level_field_var(&mut g, &mut bind, cfg, level, a, b)?;
    DisplacementField::from_tensor(g.value(out).clone())
}

/// Coarse-to-fine decoding. Returns the full-resolution field and the
/// per-level increments `δφ_l`, finest first.
pub fn decode_pyramid_vars(
    g: &mut Graph,
    bind: &mut Binding,
    cfg: &DecoderConfig,
    fixed: &[Var],
    moving: &[Var],
) -> Result<(Var, Vec<Var>)> {
    if fixed.len() != LEVELS || moving.len() != LEVELS {
        return Err(Error::contract(format!("pyramids need {LEVELS} levels, got {} / {}", fixed.len(), moving.len())));
    }
    let mut deltas = vec![None; LEVELS];
    let mut running: Option<Var> = None;
    for l in (0..LEVELS).rev() {
        let dims = g.value(fixed[l]).dims();
        let (field, m) = match running {
            None => (None, moving[l]),
            Some(r) => {
                let up = g.resize_field(r, dims);
                (Some(up), g.warp(moving[l], up))
            }
        };
        let delta = estimate_level_field_var(g, bind, cfg, l, fixed[l], m)?;
        deltas[l] = Some(delta);
        running = Some(match field {
            None => delta,
            Some(up) => g.compose(up, delta),
        });
    }
    Ok((running.expect("five levels"), deltas.into_iter().map(|d| d.expect("set")).collect()))
}

pub fn decode_pyramid(
    fixed: &FeaturePyramid,
    moving: &FeaturePyramid,
    store: &ParamStore,
    cfg: &DecoderConfig,
) -> Result<(DisplacementField, Vec<DisplacementField>)> {
    if fixed.shapes() != moving.shapes() {
        return Err(Error::contract(format!("pyramid mismatch: {:?} vs {:?}", fixed.shapes(), moving.shapes())));
    }
    let mut g = Graph::new();
    let mut bind = Binding::frozen(store);
    let ff: Vec<Var> = fixed.levels.iter().map(|t| g.constant(t.clone())).collect();
    let fm: Vec<Var> = moving.levels.iter().map(|t| g.constant(t.clone())).collect();
    let (field, levels) = decode_pyramid_vars(&mut g, &mut bind, cfg, &ff, &fm)?;
    let per_level = levels.into_iter().map(|v| DisplacementField::from_tensor(g.value(v).clone())).collect::<Result<_>>()?;
    Ok((DisplacementField::from_tensor(g.value(field).clone())?, per_level))
}
