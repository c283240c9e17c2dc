//! Brute-force reference implementations used by the integration tests.
//! Each one loops over coordinates directly and shares no code with the
//! library kernels it checks.

#![allow(dead_code)]

use matchreg::model::ParamStore;
use matchreg::tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    std::array::from_fn(|_| rng.random_range(lo..=hi))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Tensor {
    let n = c * dims.iter().product::<usize>();
    Tensor::grid(c, dims, (0..n).map(|_| rng.random::<f64>()).collect())
}

fn idx(dims: [usize; 3], z: i64, y: i64, x: i64) -> Option<usize> {
    let inside = z >= 0 && y >= 0 && x >= 0 && (z as usize) < dims[0] && (y as usize) < dims[1] && (x as usize) < dims[2];
    inside.then(|| (z as usize * dims[1] + y as usize) * dims[2] + x as usize)
}

fn coords(dims: [usize; 3]) -> impl Iterator<Item = (i64, i64, i64)> {
    let [d0, d1, d2] = dims.map(|d| d as i64);
    (0..d0).flat_map(move |z| (0..d1).flat_map(move |y| (0..d2).map(move |x| (z, y, x))))
}

/// Values inside the clipped cubic window of radius `r`.
fn window(v: &[f64], dims: [usize; 3], p: (i64, i64, i64), r: i64) -> Vec<f64> {
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if let Some(i) = idx(dims, p.0 + dz, p.1 + dy, p.2 + dx) {
                    out.push(v[i]);
                }
            }
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn ncc_loss(a: &[f64], b: &[f64], dims: [usize; 3], win: usize, eps: f64) -> f64 {
    let r = (win / 2) as i64;
    let mut total = 0.0;
    for p in coords(dims) {
        let (wa, wb) = (window(a, dims, p, r), window(b, dims, p, r));
        let (ma, mb) = (mean(&wa), mean(&wb));
        let cross: f64 = wa.iter().zip(&wb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = wa.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = wb.iter().map(|y| (y - mb).powi(2)).sum();
        total += cross * cross / (va * vb + eps);
    }
    1.0 - total / a.len() as f64
}

pub fn ssim_loss(a: &[f64], b: &[f64], dims: [usize; 3], win: usize, k1: f64, k2: f64) -> f64 {
    let r = (win / 2) as i64;
    let (c1, c2) = (k1 * k1, k2 * k2);
    let mut total = 0.0;
    for p in coords(dims) {
        let (wa, wb) = (window(a, dims, p, r), window(b, dims, p, r));
        let (ma, mb) = (mean(&wa), mean(&wb));
        let va = mean(&wa.iter().map(|x| (x - ma).powi(2)).collect::<Vec<_>>());
        let vb = mean(&wb.iter().map(|y| (y - mb).powi(2)).collect::<Vec<_>>());
        let cov = mean(&wa.iter().zip(&wb).map(|(x, y)| (x - ma) * (y - mb)).collect::<Vec<_>>());
        total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    1.0 - total / a.len() as f64
}

/// Parzen-window MI with per-set min-max scaling and Gaussian kernels
/// centred on `(k + 0.5) / bins`.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize, sigma: f64) -> f64 {
    let weights = |v: &[f64]| -> Vec<Vec<f64>> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        v.iter()
            .map(|&s| {
                let t = if hi - lo > 1e-12 { (s - lo) / (hi - lo) } else { 0.5 };
                let raw: Vec<f64> = (0..bins).map(|k| (-(t - (k as f64 + 0.5) / bins as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / z).collect()
            })
            .collect()
    };
    let (wx, wy) = (weights(x), weights(y));
    let n = x.len() as f64;
    let mut p = vec![vec![0.0; bins]; bins];
    for (rx, ry) in wx.iter().zip(&wy) {
        for k in 0..bins {
            for l in 0..bins {
                p[k][l] += rx[k] * ry[l] / n;
            }
        }
    }
    let px: Vec<f64> = (0..bins).map(|k| p[k].iter().sum()).collect();
    let py: Vec<f64> = (0..bins).map(|l| (0..bins).map(|k| p[k][l]).sum()).collect();
    let mut mi = 0.0;
    for k in 0..bins {
        for l in 0..bins {
            if p[k][l] > 0.0 {
                mi += p[k][l] * (p[k][l] / (px[k] * py[l])).ln();
            }
        }
    }
    mi
}

/// Clamped cosine similarity with every neighbour of an `n³` window,
/// zero outside the grid. Channel order: `dz` slowest, `dx` fastest.
pub fn self_similarity(t: &Tensor, n: usize, eps: f64) -> Tensor {
    let (c, dims) = (t.channels(), t.dims());
    let r = (n / 2) as i64;
    let vec_at = |i: usize| -> Vec<f64> { (0..c).map(|ch| t.channel(ch)[i]).collect() };
    let mut out = Tensor::grid_zeros(n * n * n, dims);
    for p in coords(dims) {
        let i = idx(dims, p.0, p.1, p.2).unwrap();
        let a = vec_at(i);
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut o = 0;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if let Some(j) = idx(dims, p.0 + dz, p.1 + dy, p.2 + dx) {
                        let b = vec_at(j);
                        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                        out.channel_mut(o)[i] = (dot / (na * nb + eps)).max(0.0);
                    }
                    o += 1;
                }
            }
        }
    }
    out
}

/// Level field: per head, softmax over the in-grid 3³ offsets of
/// `q(x)·k(x+d)/√dh`, expected offset for moving keys minus the same for
/// fixed keys, halved, mixed by a 1×1×1 conv, clamped.
pub fn level_field(ff: &Tensor, fm: &Tensor, store: &ParamStore, level: usize, heads: usize, clamp: f64) -> Vec<[f64; 3]> {
    let lvl = level + 1;
    let get = |n: &str| store.get(&format!("dec.l{lvl}.{n}")).unwrap().to_tensor();
    let (wq, wk, mw, mb) = (get("q.w"), get("k.w"), get("mix.w"), get("mix.b"));
    let (c, dims) = (ff.channels(), ff.dims());
    let dh = c / heads;
    let project = |w: &Tensor, t: &Tensor, i: usize| -> Vec<f64> {
        (0..c).map(|o| (0..c).map(|j| w.data()[o * c + j] * t.channel(j)[i]).sum()).collect()
    };
    let mut out = Vec::new();
    for p in coords(dims) {
        let i = idx(dims, p.0, p.1, p.2).unwrap();
        let q = project(&wq, ff, i);
        let mut motion = vec![0.0; 3 * heads];
        for (sign, keys) in [(0.5, fm), (-0.5, ff)] {
            for h in 0..heads {
                let mut cand = Vec::new();
                for dz in -1..=1i64 {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            if let Some(j) = idx(dims, p.0 + dz, p.1 + dy, p.2 + dx) {
                                let k = project(&wk, keys, j);
                                let s: f64 = (h * dh..(h + 1) * dh).map(|e| q[e] * k[e]).sum::<f64>() / (dh as f64).sqrt();
                                cand.push((s, [dz as f64, dy as f64, dx as f64]));
                            }
                        }
                    }
                }
                let m = cand.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = cand.iter().map(|c| (c.0 - m).exp()).sum();
                for (s, d) in &cand {
                    for a in 0..3 {
                        motion[3 * h + a] += sign * (s - m).exp() / z * d[a];
                    }
                }
            }
        }
        out.push(std::array::from_fn(|a| {
            let v = mb.data()[a] + (0..3 * heads).map(|j| mw.data()[a * 3 * heads + j] * motion[j]).sum::<f64>();
            v.clamp(-clamp, clamp)
        }));
    }
    out
}

pub fn dice(a: &[u16], b: &[u16], label: u16) -> f64 {
    let na = a.iter().filter(|&&v| v == label).count();
    let nb = b.iter().filter(|&&v| v == label).count();
    let both = a.iter().zip(b).filter(|(&x, &y)| x == label && y == label).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn surface(l: &[u16], dims: [usize; 3], label: u16) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for p in coords(dims) {
        let i = idx(dims, p.0, p.1, p.2).unwrap();
        if l[i] != label {
            continue;
        }
        let nbrs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
        if nbrs.iter().any(|d| idx(dims, p.0 + d.0, p.1 + d.1, p.2 + d.2).is_none_or(|j| l[j] != label)) {
            out.push([p.0 as f64, p.1 as f64, p.2 as f64]);
        }
    }
    out
}

/// All-pairs average symmetric surface distance; `None` if a mask is empty.
pub fn assd(a: &[u16], b: &[u16], dims: [usize; 3], label: u16, spacing: [f64; 3]) -> Option<f64> {
    let (sa, sb) = (surface(a, dims, label), surface(b, dims, label));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let dist = |p: &[f64; 3], q: &[f64; 3]| (0..3).map(|k| ((p[k] - q[k]) * spacing[k]).powi(2)).sum::<f64>().sqrt();
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum()
    };
    Some((one_way(&sa, &sb) + one_way(&sb, &sa)) / (sa.len() + sb.len()) as f64)
}

/// `det(I + ∇u)` through nalgebra, derivatives by explicit neighbours.
pub fn jacobian(u: &Tensor) -> Vec<f64> {
    let dims = u.dims();
    let mut out = Vec::new();
    for p in coords(dims) {
        let pt = [p.0, p.1, p.2];
        let mut m = nalgebra::Matrix3::<f64>::identity();
        for c in 0..3 {
            for a in 0..3 {
                let n = dims[a] as i64;
                let at = |off: i64| {
                    let mut q = pt;
                    q[a] += off;
                    u.channel(c)[idx(dims, q[0], q[1], q[2]).unwrap()]
                };
                m[(c, a)] += if n < 2 {
                    0.0
                } else if pt[a] == 0 {
                    at(1) - at(0)
                } else if pt[a] == n - 1 {
                    at(0) - at(-1)
                } else {
                    (at(1) - at(-1)) / 2.0
                };
            }
        }
        out.push(m.determinant());
    }
    out
}
