//! Registration quality metrics (Dice, ASSD, folding fraction) and the
//! per-pair report that collects them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{self, ModelState, TrainConfig};
use crate::volgrid::{jacobian_determinant, warp_labels, DisplacementField, Volume};

fn check_len(a: &[u16], b: &[u16], dims: [usize; 3]) -> Result<()> {
    let n = dims.iter().product::<usize>();
    if a.len() != n || b.len() != n {
        return Err(Error::contract(format!("label grids of {} and {} voxels for dims {dims:?}", a.len(), b.len())));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` for one label; 1.0 when both are empty.
pub fn dice(a: &[u16], b: &[u16], dims: [usize; 3], label: u16) -> Result<f64> {
    check_len(a, b, dims)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Labelled voxels with at least one 6-neighbour outside the label or
/// outside the grid.
pub fn boundary_voxels(labels: &[u16], dims: [usize; 3], label: u16) -> Vec<[usize; 3]> {
    let at = |z: usize, y: usize, x: usize| labels[(z * dims[1] + y) * dims[2] + x];
    let mut out = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if at(z, y, x) != label {
                    continue;
                }
                let p = [z, y, x];
                let edge = (0..3).any(|a| p[a] == 0 || p[a] + 1 == dims[a]);
                let exposed = edge
                    || at(z - 1, y, x) != label
                    || at(z + 1, y, x) != label
                    || at(z, y - 1, x) != label
                    || at(z, y + 1, x) != label
                    || at(z, y, x - 1) != label
                    || at(z, y, x + 1) != label;
                if exposed {
                    out.push(p);
                }
            }
        }
    }
    out
}

fn nearest_sum(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let pts: Vec<[f64; 3]> = to.iter().map(|p| std::array::from_fn(|a| p[a] as f64 * spacing[a])).collect();
    from.iter()
        .map(|p| {
            let q: [f64; 3] = std::array::from_fn(|a| p[a] as f64 * spacing[a]);
            pts.iter()
                .map(|t| (0..3).map(|a| (q[a] - t[a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum()
}

/// Average symmetric surface distance in physical units.
pub fn assd(a: &[u16], b: &[u16], dims: [usize; 3], label: u16, spacing: [f64; 3]) -> Result<f64> {
    check_len(a, b, dims)?;
    let (sa, sb) = (boundary_voxels(a, dims, label), boundary_voxels(b, dims, label));
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedMetric(format!("assd: label {label} is empty in one mask")));
    }
    let total = nearest_sum(&sa, &sb, spacing) + nearest_sum(&sb, &sa, spacing);
    Ok(total / (sa.len() + sb.len()) as f64)
}

/// Fraction of voxels with `det(I + ∇u) ≤ 0`.
pub fn neg_jacobian_fraction(f: &DisplacementField) -> f64 {
    let det = jacobian_determinant(f);
    det.iter().filter(|&&d| d <= 0.0).count() as f64 / det.len() as f64
}

/// Positive labels present in either grid.
pub fn foreground_labels(a: &[u16], b: &[u16]) -> Vec<u16> {
    let mut seen = [false; 1 << 16];
    for &l in a.iter().chain(b) {
        seen[l as usize] = true;
    }
    (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
}

/// Metrics of one pair at one adaptation checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub pair: String,
    pub domain_moving: String,
    pub domain_fixed: String,
    pub iters: usize,
    pub mean_dsc: Option<f64>,
    pub per_label_dsc: BTreeMap<u16, f64>,
    pub mean_assd: Option<f64>,
    pub per_label_assd: BTreeMap<u16, f64>,
    /// Labels whose ASSD is undefined (empty in one mask).
    pub undefined_assd: Vec<u16>,
    pub neg_jac_frac: f64,
    pub seconds: f64,
}

impl CheckpointMetrics {
    /// Label metrics of `field` applied to `moving`'s labels against
    /// `fixed`'s. Without labels only the Jacobian statistic is filled.
    pub fn measure(pair: &str, domains: (&str, &str), iters: usize, moving: &Volume, fixed: &Volume, field: &DisplacementField, seconds: f64) -> Result<Self> {
        let mut m = CheckpointMetrics {
            pair: pair.to_string(),
            domain_moving: domains.0.to_string(),
            domain_fixed: domains.1.to_string(),
            iters,
            mean_dsc: None,
            per_label_dsc: BTreeMap::new(),
            mean_assd: None,
            per_label_assd: BTreeMap::new(),
            undefined_assd: Vec::new(),
            neg_jac_frac: neg_jacobian_fraction(field),
            seconds,
        };
        let (Some(ml), Some(fl)) = (moving.labels(), fixed.labels()) else {
            return Ok(m);
        };
        let dims = fixed.dims();
        let warped = warp_labels(ml, dims, field)?;
        for l in foreground_labels(ml, fl) {
            m.per_label_dsc.insert(l, dice(&warped, fl, dims, l)?);
            match assd(&warped, fl, dims, l, fixed.spacing()) {
                Ok(v) => {
                    m.per_label_assd.insert(l, v);
                }
                Err(Error::UndefinedMetric(msg)) => {
                    log::warn!("{pair}: {msg}");
                    m.undefined_assd.push(l);
                }
                Err(e) => return Err(e),
            }
        }
        let mean = |v: &BTreeMap<u16, f64>| (!v.is_empty()).then(|| v.values().sum::<f64>() / v.len() as f64);
        m.mean_dsc = mean(&m.per_label_dsc);
        m.mean_assd = mean(&m.per_label_assd);
        Ok(m)
    }
}

/// Mean DSC over foreground labels of two label grids, unregistered.
pub fn mean_dice(a: &[u16], b: &[u16], dims: [usize; 3]) -> Result<f64> {
    let labels = foreground_labels(a, b);
    if labels.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for &l in &labels {
        total += dice(a, b, dims, l)?;
    }
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<CheckpointMetrics>,
}

impl MetricsReport {
    /// One JSON record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?);
        }
        Ok(Self { records })
    }

    /// Summary table: `pair, iters, mean_dsc, mean_assd, neg_jac_frac, seconds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let io = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["pair", "iters", "mean_dsc", "mean_assd", "neg_jac_frac", "seconds"]).map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.pair.clone(),
                r.iters.to_string(),
                opt(r.mean_dsc),
                opt(r.mean_assd),
                r.neg_jac_frac.to_string(),
                r.seconds.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Records at one checkpoint.
    pub fn at_iters(&self, iters: usize) -> impl Iterator<Item = &CheckpointMetrics> {
        self.records.iter().filter(move |r| r.iters == iters)
    }
}

/// Registers a pair with no adaptation and after each requested number
/// of one-shot iterations, measuring each result. The base state is
/// left untouched.
pub fn evaluate_pair(
    pair: &str,
    domains: (&str, &str),
    moving: &Volume,
    fixed: &Volume,
    state: &ModelState,
    adaptation_iters: &[usize],
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let field = state.infer(moving, fixed)?;
    let mut records = vec![CheckpointMetrics::measure(pair, domains, 0, moving, fixed, &field, start.elapsed().as_secs_f64())?];
    let mut checkpoints: Vec<usize> = adaptation_iters.iter().copied().filter(|&i| i > 0).collect();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if let Some(&max) = checkpoints.last() {
        let start = Instant::now();
        let run = trainer::one_shot_adapt(state, moving, fixed, max, &checkpoints, cfg)?;
        for cp in run.checkpoints {
            let secs = cp.seconds.min(start.elapsed().as_secs_f64());
            records.push(CheckpointMetrics::measure(pair, domains, cp.iters, moving, fixed, &cp.field, secs)?);
        }
    }
    Ok(MetricsReport { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(dims: [usize; 3], lo: [usize; 3], size: usize) -> Vec<u16> {
        let mut v = vec![0u16; dims.iter().product()];
        for z in lo[0]..lo[0] + size {
            for y in lo[1]..lo[1] + size {
                for x in lo[2]..lo[2] + size {
                    v[(z * dims[1] + y) * dims[2] + x] = 1;
                }
            }
        }
        v
    }

    #[test]
    fn dice_examples() {
        let d = [8, 8, 8];
        let a = cube(d, [2, 2, 0], 4);
        let b = cube(d, [2, 2, 2], 4);
        assert_eq!(dice(&a, &a, d, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, d, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &cube(d, [2, 2, 4], 4), d, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, d, 7).unwrap(), 1.0);
    }

    #[test]
    fn assd_examples() {
        let d = [1, 1, 8];
        let mut a = vec![0u16; 8];
        let mut b = vec![0u16; 8];
        a[1] = 1;
        b[4] = 1;
        assert_eq!(assd(&a, &b, d, 1, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(assd(&a, &a, d, 1, [1.0; 3]).unwrap(), 0.0);
        assert!(matches!(assd(&a, &[0; 8], d, 1, [1.0; 3]), Err(Error::UndefinedMetric(_))));
        assert_eq!(assd(&a, &b, d, 1, [1.0, 1.0, 2.0]).unwrap(), 6.0);
    }

    #[test]
    fn boundary_excludes_interior() {
        let d = [5, 5, 5];
        let a = cube(d, [1, 1, 1], 3);
        let s = boundary_voxels(&a, d, 1);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
    }

    #[test]
    fn folding_field_detected_where_expected() {
        let dims = [5, 5, 5];
        let mut t = Tensor::grid_zeros(3, dims);
        // Centre voxel pulled three voxels back along the last axis.
        t.channel_mut(2)[(2 * 5 + 2) * 5 + 2] = -3.0;
        let f = DisplacementField::from_tensor(t).unwrap();
        assert!(neg_jacobian_fraction(&f) > 0.0);
        let det = jacobian_determinant(&f);
        let bad: Vec<usize> = (0..det.len()).filter(|&i| det[i] <= 0.0).collect();
        // det = 1 + ∂u/∂x; only the voxel before the dent sees a central
        // difference below -1 (it is -1.5 there).
        assert_eq!(bad, vec![(2 * 5 + 2) * 5 + 1]);
        assert_eq!(neg_jacobian_fraction(&DisplacementField::zeros(dims)), 0.0);
    }

    #[test]
    fn report_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = |i: usize, rng: &mut ChaCha8Rng| CheckpointMetrics {
            pair: format!("p{i}"),
            domain_moving: "B".into(),
            domain_fixed: "B".into(),
            iters: i,
            mean_dsc: Some(rng.random::<f64>()),
            per_label_dsc: [(1, rng.random::<f64>()), (2, 1.0 / 3.0)].into_iter().collect(),
            mean_assd: None,
            per_label_assd: BTreeMap::new(),
            undefined_assd: vec![2],
            neg_jac_frac: rng.random::<f64>() * 1e-7,
            seconds: 0.1,
        };
        let report = MetricsReport { records: (0..3).map(|i| rec(i, &mut rng)).collect() };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        report.write_jsonl(&p).unwrap();
        assert_eq!(MetricsReport::read_jsonl(&p).unwrap(), report);
        let c = dir.path().join("r.csv");
        report.write_csv(&c).unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert!(text.starts_with("pair,iters,mean_dsc,mean_assd,neg_jac_frac,seconds\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
