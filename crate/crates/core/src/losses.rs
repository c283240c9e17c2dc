//! Similarity and regularization terms for the three training stages and
//! the feature-distillation alignment.
//!
//! Every loss exists twice: as a tape operation (`*_var`) used during
//! training, and as a plain function on [`Volume`]s/[`DisplacementField`]s
//! built on top of it.

use matrixmultiply::dgemm;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{window_counts, Graph, Var};
use crate::tensor::Tensor;
use crate::volgrid::{DisplacementField, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub ncc_window: usize,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub mi_bins: usize,
    /// Parzen kernel width in normalized intensity units; `None` means half
    /// a bin width.
    pub mi_sigma: Option<f64>,
    /// Weight of the smoothness penalty.
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ncc_window: 9,
            ssim_window: 7,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            mi_bins: 32,
            mi_sigma: None,
            lambda: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ncc_window", self.ncc_window), ("ssim_window", self.ssim_window)] {
            if w < 3 || w % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and >= 3, got {w}")));
            }
        }
        if self.mi_bins < 4 {
            return Err(Error::Config(format!("mi_bins must be >= 4, got {}", self.mi_bins)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(s) = self.mi_sigma {
            if !(s > 0.0) {
                return Err(Error::Config(format!("mi_sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn mi_sigma(&self) -> f64 {
        self.mi_sigma.unwrap_or(0.5 / self.mi_bins as f64)
    }
}

/// Training stage selector for [`stage_loss_var`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            3 => Some(Stage::Three),
            _ => None,
        }
    }
}

fn check_same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `1 − mean(cc)` with `cc = cross² / (var_a·var_b + ε)` computed from
/// clipped-window sums.
pub fn ncc_loss_var(g: &mut Graph, a: Var, b: Var, cfg: &LossConfig) -> Var {
    let r = cfg.ncc_window / 2;
    let dims = g.value(a).dims();
    let inv_n = g.constant(window_counts(dims, r).map(|c| 1.0 / c));
    let sa = g.box_sum(a, r);
    let sb = g.box_sum(b, r);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let saa = g.box_sum(aa, r);
    let sbb = g.box_sum(bb, r);
    let sab = g.box_sum(ab, r);

    let sa_sb = g.mul(sa, sb);
    let sa_sb_n = g.mul(sa_sb, inv_n);
    let cross = g.sub(sab, sa_sb_n);
    let sa2 = g.mul(sa, sa);
    let sa2n = g.mul(sa2, inv_n);
    let var_a = g.sub(saa, sa2n);
    let sb2 = g.mul(sb, sb);
    let sb2n = g.mul(sb2, inv_n);
    let var_b = g.sub(sbb, sb2n);

    let num = g.mul(cross, cross);
    let den = g.mul(var_a, var_b);
    let den = g.add_scalar(den, cfg.epsilon);
    let cc = g.div(num, den);
    let m = g.mean(cc);
    let neg = g.mul_scalar(m, -1.0);
    g.add_scalar(neg, 1.0)
}

/// `1 − mean SSIM` with uniform windows and dynamic range 1.
pub fn ssim_loss_var(g: &mut Graph, a: Var, b: Var, cfg: &LossConfig) -> Var {
    let r = cfg.ssim_window / 2;
    let dims = g.value(a).dims();
    let c1 = cfg.ssim_k1 * cfg.ssim_k1;
    let c2 = cfg.ssim_k2 * cfg.ssim_k2;
    let inv_n = g.constant(window_counts(dims, r).map(|c| 1.0 / c));
    let local_mean = |g: &mut Graph, v: Var| {
        let s = g.box_sum(v, r);
        g.mul(s, inv_n)
    };
    let mu_a = local_mean(g, a);
    let mu_b = local_mean(g, b);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = local_mean(g, aa);
    let e_bb = local_mean(g, bb);
    let e_ab = local_mean(g, ab);

    let mu_ab = g.mul(mu_a, mu_b);
    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);

    let n1 = g.mul_scalar(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.mul_scalar(cov, 2.0);
    let n2 = g.add_scalar(n2, c2);
    let d1 = g.add(mu_aa, mu_bb);
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.add_scalar(d2, c2);
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    let ssim = g.div(num, den);
    let m = g.mean(ssim);
    let neg = g.mul_scalar(m, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Normalized Parzen weights of one sample set.
struct SoftBins {
    /// `N × B`, rows sum to one.
    w: Vec<f64>,
    /// Samples after min-max normalization.
    xn: Vec<f64>,
    lo_idx: usize,
    hi_idx: usize,
    range: f64,
    degenerate: bool,
}

fn bin_center(k: usize, bins: usize) -> f64 {
    (k as f64 + 0.5) / bins as f64
}

fn soft_bins(x: &[f64], bins: usize, sigma: f64) -> SoftBins {
    let (mut lo_idx, mut hi_idx) = (0, 0);
    for (i, &v) in x.iter().enumerate() {
        if v < x[lo_idx] {
            lo_idx = i;
        }
        if v > x[hi_idx] {
            hi_idx = i;
        }
    }
    let range = x[hi_idx] - x[lo_idx];
    let degenerate = !(range > 1e-12);
    let xn: Vec<f64> = if degenerate { vec![0.5; x.len()] } else { x.iter().map(|v| (v - x[lo_idx]) / range).collect() };
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut w = vec![0.0; x.len() * bins];
    for (row, &v) in w.chunks_mut(bins).zip(&xn) {
        let mut total = 0.0;
        for (k, slot) in row.iter_mut().enumerate() {
            let d = v - bin_center(k, bins);
            *slot = (-d * d * inv2s2).exp();
            total += *slot;
        }
        row.iter_mut().for_each(|s| *s /= total);
    }
    SoftBins { w, xn, lo_idx, hi_idx, range, degenerate }
}

/// Joint histogram `p = wxᵀ·wy / N` (`B × B`).
fn joint_histogram(wx: &SoftBins, wy: &SoftBins, n: usize, bins: usize) -> Vec<f64> {
    let mut p = vec![0.0; bins * bins];
    // SAFETY: wx.w and wy.w hold n·bins elements; p holds bins·bins.
    unsafe {
        dgemm(
            bins,
            n,
            bins,
            1.0 / n as f64,
            wx.w.as_ptr(),
            1,
            bins as isize,
            wy.w.as_ptr(),
            bins as isize,
            1,
            0.0,
            p.as_mut_ptr(),
            bins as isize,
            1,
        );
    }
    p
}

fn marginals(p: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    let mut px = vec![0.0; bins];
    let mut py = vec![0.0; bins];
    for k in 0..bins {
        for l in 0..bins {
            px[k] += p[k * bins + l];
            py[l] += p[k * bins + l];
        }
    }
    (px, py)
}

fn mi_from_joint(p: &[f64], bins: usize) -> f64 {
    let (px, py) = marginals(p, bins);
    let mut mi = 0.0;
    for k in 0..bins {
        for l in 0..bins {
            let pkl = p[k * bins + l];
            if pkl > 0.0 {
                mi += pkl * (pkl.ln() - px[k].ln() - py[l].ln());
            }
        }
    }
    mi
}

/// Gradient of MI w.r.t. raw samples, given `∂MI/∂w` for that set.
fn samples_grad(sb: &SoftBins, gw: &[f64], bins: usize, sigma: f64, scale: f64) -> Vec<f64> {
    let n = sb.xn.len();
    let mut gx = vec![0.0; n];
    if sb.degenerate {
        return gx;
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut gxn = vec![0.0; n];
    for i in 0..n {
        let row = &sb.w[i * bins..(i + 1) * bins];
        let grow = &gw[i * bins..(i + 1) * bins];
        let e = |k: usize| -(sb.xn[i] - bin_center(k, bins)) * inv_s2;
        let e_bar: f64 = (0..bins).map(|k| row[k] * e(k)).sum();
        gxn[i] = scale * (0..bins).map(|k| grow[k] * row[k] * (e(k) - e_bar)).sum::<f64>();
    }
    let (mut g_lo, mut g_hi) = (0.0, 0.0);
    for i in 0..n {
        gx[i] += gxn[i] / sb.range;
        g_lo += gxn[i] * (sb.xn[i] - 1.0) / sb.range;
        g_hi -= gxn[i] * sb.xn[i] / sb.range;
    }
    gx[sb.lo_idx] += g_lo;
    gx[sb.hi_idx] += g_hi;
    gx
}

/// Plug-in mutual information (nats) of a Parzen soft joint histogram.
/// Each sample set is min-max normalized to `[0, 1]` first.
pub fn mi_score(x: &[f64], y: &[f64], cfg: &LossConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!("mi_score: {} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::contract("mi_score needs at least 2 samples"));
    }
    let bins = cfg.mi_bins;
    let sigma = cfg.mi_sigma();
    let (bx, by) = (soft_bins(x, bins, sigma), soft_bins(y, bins, sigma));
    Ok(mi_from_joint(&joint_histogram(&bx, &by, x.len(), bins), bins))
}

/// Entropy (nats) of the soft marginal histogram of `x`.
pub fn soft_marginal_entropy(x: &[f64], cfg: &LossConfig) -> f64 {
    let bins = cfg.mi_bins;
    let b = soft_bins(x, bins, cfg.mi_sigma());
    let mut p = vec![0.0; bins];
    for row in b.w.chunks(bins) {
        for (pk, w) in p.iter_mut().zip(row) {
            *pk += w / x.len() as f64;
        }
    }
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

impl Graph {
    /// Differentiable [`mi_score`] over all elements of `x` and `y`.
    pub fn mutual_information(&mut self, x: Var, y: Var, bins: usize, sigma: f64) -> Var {
        let (xt, yt) = (self.value(x), self.value(y));
        assert_eq!(xt.len(), yt.len(), "mutual_information: sample counts differ");
        let n = xt.len();
        let bx = soft_bins(xt.data(), bins, sigma);
        let by = soft_bins(yt.data(), bins, sigma);
        let p = joint_histogram(&bx, &by, n, bins);
        let value = Tensor::scalar(mi_from_joint(&p, bins));
        self.push(
            value,
            vec![x, y],
            Box::new(move |ctx| {
                let upstream = ctx.grad.item();
                let (px, py) = marginals(&p, bins);
                let mut gp = vec![0.0; bins * bins];
                for k in 0..bins {
                    for l in 0..bins {
                        let pkl = p[k * bins + l];
                        if pkl > 0.0 {
                            gp[k * bins + l] = pkl.ln() - px[k].ln() - py[l].ln() - 1.0;
                        }
                    }
                }
                let scale = upstream / n as f64;
                let dx = ctx.needs[0].then(|| {
                    // gw_x[i,k] = Σ_l gp[k,l]·wy[i,l]
                    let mut gw = vec![0.0; n * bins];
                    for i in 0..n {
                        let wy = &by.w[i * bins..(i + 1) * bins];
                        for k in 0..bins {
                            gw[i * bins + k] = (0..bins).map(|l| gp[k * bins + l] * wy[l]).sum();
                        }
                    }
                    let g = samples_grad(&bx, &gw, bins, sigma, scale);
                    Tensor::from_vec(ctx.inputs[0].shape().to_vec(), g)
                });
                let dy = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; n * bins];
                    for i in 0..n {
                        let wx = &bx.w[i * bins..(i + 1) * bins];
                        for l in 0..bins {
                            gw[i * bins + l] = (0..bins).map(|k| gp[k * bins + l] * wx[k]).sum();
                        }
                    }
                    let g = samples_grad(&by, &gw, bins, sigma, scale);
                    Tensor::from_vec(ctx.inputs[1].shape().to_vec(), g)
                });
                vec![dx, dy]
            }),
        )
    }

    /// Mean squared Jacobian norm of a displacement field:
    /// `Σ_c Σ_axis mean((u_c[x + e_axis] − u_c[x])²)`.
    pub fn smoothness(&mut self, field: Var) -> Var {
        let f = self.value(field);
        let dims = f.dims();
        let st = [dims[1] * dims[2], dims[2], 1];
        let counts: [usize; 3] = [0, 1, 2].map(|a| {
            let mut d = dims;
            d[a] -= 1;
            d.iter().product()
        });
        let mut total = 0.0;
        for c in 0..3 {
            let u = f.channel(c);
            for a in 0..3 {
                if counts[a] == 0 {
                    continue;
                }
                let mut s = 0.0;
                for_each_forward_pair(dims, a, |i| s += (u[i + st[a]] - u[i]).powi(2));
                total += s / counts[a] as f64;
            }
        }
        self.push(
            Tensor::scalar(total),
            vec![field],
            Box::new(move |ctx| {
                let f = ctx.inputs[0];
                let up = ctx.grad.item();
                let mut gt = Tensor::grid_zeros(3, dims);
                for c in 0..3 {
                    let u = f.channel(c);
                    let gc = gt.channel_mut(c);
                    for a in 0..3 {
                        if counts[a] == 0 {
                            continue;
                        }
                        let k = 2.0 * up / counts[a] as f64;
                        for_each_forward_pair(dims, a, |i| {
                            let d = k * (u[i + st[a]] - u[i]);
                            gc[i + st[a]] += d;
                            gc[i] -= d;
                        });
                    }
                }
                vec![Some(gt)]
            }),
        )
    }
}

/// Calls `f(i)` for every voxel `i` that has a forward neighbour along `axis`.
fn for_each_forward_pair(dims: [usize; 3], axis: usize, mut f: impl FnMut(usize)) {
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z, y, x];
                if p[axis] + 1 < dims[axis] {
                    f((z * dims[1] + y) * dims[2] + x);
                }
            }
        }
    }
}

/// Stage objective on the tape.
///
/// * stage 1: `ncc + λ·smooth + mi_term`
/// * stage 2: `ssim + λ·smooth`
/// * stage 3: `ncc + λ·smooth`
pub fn stage_loss_var(
    g: &mut Graph,
    stage: Stage,
    fixed: Var,
    warped: Var,
    field: Var,
    mi_term: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    if mi_term.is_some() && stage != Stage::One {
        return Err(Error::contract(format!("mi_term supplied for stage {}", stage.number())));
    }
    let sim = match stage {
        Stage::One | Stage::Three => ncc_loss_var(g, fixed, warped, cfg),
        Stage::Two => ssim_loss_var(g, fixed, warped, cfg),
    };
    let smooth = g.smoothness(field);
    let reg = g.mul_scalar(smooth, cfg.lambda);
    let mut total = g.add(sim, reg);
    if let Some(m) = mi_term {
        total = g.add(total, m);
    }
    Ok(total)
}

fn eval_pair(a: &Volume, b: &Volume, f: impl Fn(&mut Graph, Var, Var) -> Var) -> Result<f64> {
    let (ta, tb) = (a.to_tensor(), b.to_tensor());
    check_same_dims(&ta, &tb, "loss")?;
    let mut g = Graph::new();
    let (va, vb) = (g.constant(ta), g.constant(tb));
    let out = f(&mut g, va, vb);
    Ok(g.value(out).item())
}

pub fn ncc_loss(a: &Volume, b: &Volume, cfg: &LossConfig) -> Result<f64> {
    eval_pair(a, b, |g, x, y| ncc_loss_var(g, x, y, cfg))
}

pub fn ssim_loss(a: &Volume, b: &Volume, cfg: &LossConfig) -> Result<f64> {
    eval_pair(a, b, |g, x, y| ssim_loss_var(g, x, y, cfg))
}

pub fn smoothness_loss(f: &DisplacementField) -> Result<f64> {
    if f.dims().iter().any(|&d| d < 2) {
        return Err(Error::contract("smoothness_loss needs at least 2 voxels per axis"));
    }
    let mut g = Graph::new();
    let v = g.constant(f.tensor().clone());
    let s = g.smoothness(v);
    Ok(g.value(s).item())
}

/// Stage objective evaluated on concrete volumes.
pub fn stage_loss(
    stage: Stage,
    fixed: &Volume,
    warped: &Volume,
    f: &DisplacementField,
    mi_term: Option<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    let (tf, tw) = (fixed.to_tensor(), warped.to_tensor());
    check_same_dims(&tf, &tw, "stage_loss")?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(tf), g.constant(tw));
    let fv = g.constant(f.tensor().clone());
    let m = mi_term.map(|m| g.constant(Tensor::scalar(m)));
    let out = stage_loss_var(&mut g, stage, a, b, fv, m, cfg)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_grid};
    use crate::tensor::grid_len;

    fn vol(t: &Tensor) -> Volume {
        Volume::from_tensor(t).unwrap()
    }

    #[test]
    fn ncc_perfect_and_affine() {
        let cfg = LossConfig::default();
        let a = random_grid(1, [10, 10, 10], 1);
        assert!(ncc_loss(&vol(&a), &vol(&a), &cfg).unwrap() <= 1e-6);
        let b = a.map(|v| 0.5 * v + 0.2);
        assert!(ncc_loss(&vol(&a), &vol(&b), &cfg).unwrap() <= 1e-6);
    }

    #[test]
    fn ncc_constant_region_is_finite() {
        let cfg = LossConfig::default();
        let a = Volume::new([6, 6, 6], vec![0.3; 216]).unwrap();
        let b = vol(&random_grid(1, [6, 6, 6], 2));
        let l = ncc_loss(&a, &b, &cfg).unwrap();
        assert!(l.is_finite() && (l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let cfg = LossConfig::default();
        let a = vol(&random_grid(1, [8, 8, 8], 3));
        assert_eq!(ssim_loss(&a, &a, &cfg).unwrap(), 0.0);
        let zero = Volume::new([8, 8, 8], vec![0.0; 512]).unwrap();
        let one = Volume::new([8, 8, 8], vec![1.0; 512]).unwrap();
        let c1 = 0.01f64 * 0.01;
        let want = 1.0 - c1 / (1.0 + c1);
        assert!((ssim_loss(&zero, &one, &cfg).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn smoothness_closed_forms() {
        let dims = [4, 5, 6];
        assert_eq!(smoothness_loss(&DisplacementField::zeros(dims)).unwrap(), 0.0);
        assert_eq!(smoothness_loss(&DisplacementField::constant(dims, [1.0, -2.0, 0.5])).unwrap(), 0.0);
        let mut t = Tensor::grid_zeros(3, dims);
        for i in 0..grid_len(dims) {
            t.channel_mut(0)[i] = (i / 30) as f64;
        }
        let s = smoothness_loss(&DisplacementField::from_tensor(t).unwrap()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stage_loss_composition() {
        let cfg = LossConfig::default();
        let a = vol(&random_grid(1, [8, 8, 8], 4));
        let z = DisplacementField::zeros(a.dims());
        assert!(stage_loss(Stage::Three, &a, &a, &z, None, &cfg).unwrap() <= 1e-6);
        assert_eq!(stage_loss(Stage::Two, &a, &a, &z, None, &cfg).unwrap(), 0.0);
        assert!(stage_loss(Stage::Two, &a, &a, &z, Some(0.1), &cfg).is_err());

        let b = vol(&random_grid(1, [8, 8, 8], 5));
        let f = DisplacementField::from_tensor(random_grid(3, [8, 8, 8], 6)).unwrap();
        let m = -0.37;
        let total = stage_loss(Stage::One, &a, &b, &f, Some(m), &cfg).unwrap();
        let parts = ncc_loss(&a, &b, &cfg).unwrap() + smoothness_loss(&f).unwrap() + m;
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn mi_rejects_bad_inputs() {
        let cfg = LossConfig::default();
        assert!(mi_score(&[0.1], &[0.2], &cfg).is_err());
        assert!(mi_score(&[0.1, 0.2], &[0.2], &cfg).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = LossConfig { ncc_window: 3, ssim_window: 3, ..LossConfig::default() };
        let a = random_grid(1, [5, 5, 5], 7);
        let b = random_grid(1, [5, 5, 5], 8);
        for which in 0..2 {
            let r = check_gradient(&b, 125, |g, bv| {
                let av = g.constant(a.clone());
                if which == 0 {
                    ncc_loss_var(g, av, bv, &cfg)
                } else {
                    ssim_loss_var(g, av, bv, &cfg)
                }
            });
            assert!(r.passed(), "loss {which}: {r:?}");
        }
        let f = random_grid(3, [4, 4, 4], 9);
        let r = check_gradient(&f, 192, |g, v| g.smoothness(v));
        assert!(r.passed(), "{r:?}");
        let cfg = LossConfig { mi_bins: 8, ..LossConfig::default() };
        let x = random_grid(1, [4, 4, 4], 10);
        let y = Tensor::from_vec(vec![64], random_grid(1, [4, 4, 4], 11).into_data());
        let r = check_gradient(&x, 64, |g, v| {
            let yv = g.constant(y.clone());
            g.mutual_information(v, yv, cfg.mi_bins, cfg.mi_sigma())
        });
        assert!(r.passed(), "{r:?}");
    }
}
