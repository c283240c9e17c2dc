//! Procedural two-domain phantoms, deformed pair datasets and the raw +
//! sidecar volume file format.
//!
//! Domain A is an ellipsoidal body holding three organs (4 labels).
//! Domain B is a set of three wavy concentric shells (3 labels). The two
//! differ in geometry and in their intensity transfer, which is what the
//! cross-domain experiments rely on.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::{mean_dice, neg_jacobian_fraction};
use crate::tensor::{grid_len, Tensor};
use crate::volgrid::{warp_grid, warp_labels, DisplacementField, Interp, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(Domain::A),
            "B" | "b" => Some(Domain::B),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: Domain,
    /// Intensity per label, background first.
    pub transfer: Vec<f64>,
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn a() -> Self {
        Self { name: Domain::A, transfer: vec![0.0, 0.35, 0.7, 0.95, 0.15], bias_amplitude: 0.1, noise_sigma: 0.02 }
    }

    pub fn b() -> Self {
        Self { name: Domain::B, transfer: vec![0.0, 0.8, 0.3, 0.55], bias_amplitude: 0.15, noise_sigma: 0.03 }
    }

    pub fn for_domain(d: Domain) -> Self {
        match d {
            Domain::A => Self::a(),
            Domain::B => Self::b(),
        }
    }

    /// Number of foreground labels the geometry produces.
    pub fn label_count(&self) -> usize {
        match self.name {
            Domain::A => 4,
            Domain::B => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.transfer.len() != self.label_count() + 1 {
            return Err(Error::Config(format!("domain {} needs {} transfer values", self.name.tag(), self.label_count() + 1)));
        }
        if self.transfer.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("transfer values must lie in [0, 1]".into()));
        }
        if self.bias_amplitude < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("bias amplitude and noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformParams {
    /// Largest displacement component, voxels.
    pub max_mag: f64,
    pub smooth_sigma: f64,
    /// Fresh sub-seeds tried when a field folds.
    pub max_retries: usize,
}

impl Default for DeformParams {
    fn default() -> Self {
        Self { max_mag: 4.0, smooth_sigma: 4.0, max_retries: 16 }
    }
}

/// Stateless seed mixing (SplitMix64 finaliser).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of every channel, edge-replicating.
pub fn gaussian_smooth(t: &Tensor, sigma: f64) -> Tensor {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let dims = t.dims();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut cur = t.clone();
    for axis in 0..3 {
        let mut next = cur.clone();
        let len = dims[axis] as i64;
        for c in 0..t.channels() {
            let src = cur.channel(c).to_vec();
            let dst = next.channel_mut(c);
            for (i, out) in dst.iter_mut().enumerate() {
                let pos = (i / strides[axis] % dims[axis]) as i64;
                let base = i - pos as usize * strides[axis];
                *out = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * src[base + (pos + j as i64 - r).clamp(0, len - 1) as usize * strides[axis]])
                    .sum();
            }
        }
        cur = next;
    }
    cur
}

/// Smoothed white noise rescaled so its largest component is `max_mag`.
pub fn gen_smooth_field(dims: [usize; 3], max_mag: f64, smooth_sigma: f64, seed: u64) -> Result<DisplacementField> {
    let min = *dims.iter().min().expect("3 dims") as f64;
    if !(0.0..min / 4.0).contains(&max_mag) {
        return Err(Error::contract(format!("max_mag {max_mag} must be in [0, {})", min / 4.0)));
    }
    if max_mag == 0.0 {
        return Ok(DisplacementField::zeros(dims));
    }
    // Noise on a padded grid, cropped after blurring, keeps the border
    // statistically like the interior.
    let pad = (3.0 * smooth_sigma).ceil() as usize;
    let big = dims.map(|d| d + 2 * pad);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Tensor::grid(3, big, (0..3 * grid_len(big)).map(|_| normal.sample(&mut rng)).collect());
    let blurred = gaussian_smooth(&noise, smooth_sigma);
    let mut smooth = Tensor::grid_zeros(3, dims);
    for c in 0..3 {
        let (src, dst) = (blurred.channel(c), smooth.channel_mut(c));
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let s = ((z + pad) * big[1] + y + pad) * big[2] + pad;
                let d = (z * dims[1] + y) * dims[2];
                dst[d..d + dims[2]].copy_from_slice(&src[s..s + dims[2]]);
            }
        }
    }
    let peak = smooth.max_abs();
    DisplacementField::from_tensor(smooth.map(|v| v * max_mag / peak))
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * scale
}

/// Label geometry for one seeded sample.
fn gen_labels(domain: Domain, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<u16> {
    let d: [f64; 3] = dims.map(|v| v as f64);
    let centre: [f64; 3] = std::array::from_fn(|a| d[a] / 2.0 - 0.5 + jitter(rng, 0.04 * d[a]));
    let mut labels = vec![0u16; grid_len(dims)];
    let mut each = |f: &mut dyn FnMut([f64; 3]) -> u16| {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    labels[(z * dims[1] + y) * dims[2] + x] = f([z as f64, y as f64, x as f64]);
                }
            }
        }
    };
    match domain {
        Domain::A => {
            let body = Ellipsoid {
                centre,
                radii: std::array::from_fn(|a| d[a] * ([0.40, 0.36, 0.42][a] + jitter(rng, 0.03))),
            };
            let organ = |rng: &mut ChaCha8Rng, off: [f64; 3], rad: [f64; 3]| Ellipsoid {
                centre: std::array::from_fn(|a| centre[a] + d[a] * (off[a] + jitter(rng, 0.03))),
                radii: std::array::from_fn(|a| d[a] * rad[a] * (1.0 + jitter(rng, 0.12))),
            };
            let organs = [
                organ(rng, [-0.10, -0.08, -0.14], [0.16, 0.14, 0.17]),
                organ(rng, [0.10, 0.08, 0.14], [0.13, 0.14, 0.12]),
                organ(rng, [0.02, 0.16, -0.08], [0.10, 0.09, 0.11]),
            ];
            each(&mut |p| {
                if !body.contains(p) {
                    return 0;
                }
                organs.iter().position(|o| o.contains(p)).map_or(1, |i| i as u16 + 2)
            });
        }
        Domain::B => {
            let radius = 0.42 * d.iter().copied().fold(f64::INFINITY, f64::min);
            let (k1, k2) = (2.0 + rng.random_range(0..3) as f64, 2.0 + rng.random_range(0..3) as f64);
            let (p1, p2) = (rng.random::<f64>() * std::f64::consts::TAU, rng.random::<f64>() * std::f64::consts::TAU);
            let amp = 0.10 + jitter(rng, 0.03);
            let bounds = [0.38 + jitter(rng, 0.04), 0.68 + jitter(rng, 0.04), 1.0];
            each(&mut |p| {
                let v: [f64; 3] = std::array::from_fn(|a| p[a] - centre[a]);
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let theta = v[1].atan2(v[2]);
                let phi = if r > 0.0 { (v[0] / r).acos() } else { 0.0 };
                let rn = r / (radius * (1.0 + amp * (k1 * theta + p1).sin() * (k2 * phi + p2).cos()));
                match bounds.iter().position(|&b| rn < b) {
                    Some(0) => 3,
                    Some(1) => 2,
                    Some(_) => 1,
                    None => 0,
                }
            });
        }
    }
    labels
}

/// Smooth multiplicative bias `1 + amp·g(x)` with `g ∈ [-1, 1]`.
fn bias_field(dims: [usize; 3], amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| (std::array::from_fn(|_| jitter(rng, 1.5) * std::f64::consts::PI), rng.random::<f64>() * std::f64::consts::TAU))
        .collect();
    let mut out = Vec::with_capacity(grid_len(dims));
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64 / dims[0] as f64, y as f64 / dims[1] as f64, x as f64 / dims[2] as f64];
                let g: f64 = waves.iter().map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos()).sum::<f64>() / 3.0;
                out.push(1.0 + amp * g);
            }
        }
    }
    out
}

/// Noise-free intensities and labels of one seeded sample.
fn gen_clean(spec: &DomainSpec, dims: [usize; 3], seed: u64) -> Result<(Vec<f64>, Vec<u16>)> {
    spec.validate()?;
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::contract(format!("sample dims must be >= 16 per axis, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = gen_labels(spec.name, dims, &mut rng);
    let bias = bias_field(dims, spec.bias_amplitude, &mut rng);
    let clean = labels.iter().zip(&bias).map(|(&l, b)| (spec.transfer[l as usize] * b).clamp(0.0, 1.0)).collect();
    Ok((clean, labels))
}

fn add_noise(clean: &[f64], sigma: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    clean
        .iter()
        .map(|&v| {
            let n = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            (v + n).clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// One labelled sample: geometry, transfer, bias and noise.
pub fn gen_domain_sample(spec: &DomainSpec, dims: [usize; 3], seed: u64) -> Result<Volume> {
    let (clean, labels) = gen_clean(spec, dims, seed)?;
    Volume::new(dims, add_noise(&clean, spec.noise_sigma, sub_seed(seed, 1)))?.with_labels(labels)
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub id: String,
    pub domain: Domain,
    pub moving: Volume,
    pub fixed: Volume,
    /// Field that produced `moving` from the template (`fixed` before noise).
    pub field: DisplacementField,
    pub seed: u64,
    pub initial_dsc: f64,
}

/// `count` independent pairs. Each pair draws one template; the fixed
/// image is the template and the moving image is the template warped by a
/// fold-free smooth field, each with its own noise.
pub fn make_pair_dataset(spec: &DomainSpec, count: usize, dims: [usize; 3], deform: &DeformParams, seed: u64) -> Result<Vec<SynthPair>> {
    if count == 0 {
        return Err(Error::contract("pair dataset needs count >= 1"));
    }
    (0..count)
        .map(|i| {
            let pair_seed = sub_seed(seed, i as u64);
            let (clean, labels) = gen_clean(spec, dims, pair_seed)?;
            let mut field = None;
            for attempt in 0..=deform.max_retries {
                let f = gen_smooth_field(dims, deform.max_mag, deform.smooth_sigma, sub_seed(pair_seed, 100 + attempt as u64))?;
                if neg_jacobian_fraction(&f) == 0.0 {
                    field = Some(f);
                    break;
                }
                log::debug!("pair {i}: field attempt {attempt} folds, retrying");
            }
            let field = field.ok_or_else(|| Error::contract(format!("pair {i}: no fold-free field in {} tries", deform.max_retries + 1)))?;
            let warped = warp_grid(&Tensor::grid(1, dims, clean.clone()), field.tensor(), Interp::Trilinear);
            let moving_labels = warp_labels(&labels, dims, &field)?;
            let fixed = Volume::new(dims, add_noise(&clean, spec.noise_sigma, sub_seed(pair_seed, 1)))?.with_labels(labels)?;
            let moving = Volume::new(dims, add_noise(warped.data(), spec.noise_sigma, sub_seed(pair_seed, 2)))?.with_labels(moving_labels)?;
            let initial_dsc = mean_dice(moving.labels().expect("set"), fixed.labels().expect("set"), dims)?;
            Ok(SynthPair { id: format!("{}{i:03}", spec.name.tag()), domain: spec.name, moving, fixed, field, seed: pair_seed, initial_dsc })
        })
        .collect()
}

pub const VOLUME_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub format_version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    /// Label file name, relative to the header's directory.
    pub labels: Option<String>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn label_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

/// Writes `path` (little-endian `f32`, last axis fastest), `path.json`
/// (header) and, with labels, `path.labels` (little-endian `u16`).
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let labels_file = v.labels().map(|_| label_path(path));
    let header = VolumeHeader {
        format_version: VOLUME_FORMAT_VERSION,
        dims: v.dims(),
        spacing: v.spacing(),
        dtype: "f32le".into(),
        labels: labels_file.as_ref().map(|p| p.file_name().expect("file name").to_string_lossy().into_owned()),
    };
    let payload: Vec<u8> = v.voxels().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    if let (Some(l), Some(lp)) = (v.labels(), &labels_file) {
        let bytes: Vec<u8> = l.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(lp, bytes).map_err(|e| Error::io(lp, e))?;
    }
    let side = sidecar(path);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::format(&side, e.to_string()))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if header.format_version != VOLUME_FORMAT_VERSION {
        return Err(Error::Version { found: header.format_version, expected: VOLUME_FORMAT_VERSION });
    }
    if header.dtype != "f32le" {
        return Err(Error::format(&side, format!("unsupported dtype {}", header.dtype)));
    }
    let n = grid_len(header.dims);
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() != n * 4 {
        return Err(Error::format(path, format!("size mismatch: header implies {} bytes, payload has {}", n * 4, raw.len())));
    }
    let voxels = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let mut v = Volume::new(header.dims, voxels)?.with_spacing(header.spacing);
    if let Some(name) = header.labels {
        let lp = path.parent().unwrap_or(Path::new(".")).join(name);
        let raw = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        if raw.len() != n * 2 {
            return Err(Error::format(&lp, format!("size mismatch: header implies {} label bytes, file has {}", n * 2, raw.len())));
        }
        v = v.with_labels(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())?;
    }
    Ok(v)
}

/// Writes a displacement field as three consecutive `f32` component grids
/// plus a `path.json` header with `"components": 3`.
pub fn write_field(f: &DisplacementField, path: &Path) -> Result<()> {
    let header = serde_json::json!({
        "format_version": VOLUME_FORMAT_VERSION,
        "dims": f.dims(),
        "components": 3,
        "dtype": "f32le",
    });
    let payload: Vec<u8> = f.tensor().data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar(path);
    fs::write(&side, serde_json::to_string_pretty(&header).expect("json")).map_err(|e| Error::io(&side, e))
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    #[derive(Deserialize)]
    struct FieldHeader {
        format_version: u32,
        dims: [usize; 3],
        components: usize,
        dtype: String,
    }
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let h: FieldHeader = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if h.format_version != VOLUME_FORMAT_VERSION {
        return Err(Error::Version { found: h.format_version, expected: VOLUME_FORMAT_VERSION });
    }
    if h.components != 3 || h.dtype != "f32le" {
        return Err(Error::format(&side, "expected 3 f32le components"));
    }
    let n = 3 * grid_len(h.dims);
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() != n * 4 {
        return Err(Error::format(path, format!("size mismatch: header implies {} bytes, payload has {}", n * 4, raw.len())));
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    DisplacementField::from_tensor(Tensor::grid(3, h.dims, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub moving: String,
    pub fixed: String,
    pub initial_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: Domain,
    pub dims: [usize; 3],
    pub seed: u64,
    pub deform: DeformParams,
    pub pairs: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn mean_initial_dsc(&self) -> f64 {
        self.pairs.iter().map(|p| p.initial_dsc).sum::<f64>() / self.pairs.len().max(1) as f64
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes every pair's volumes plus `manifest.json` into `dir`.
pub fn write_dataset(pairs: &[SynthPair], dims: [usize; 3], deform: &DeformParams, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let domain = pairs.first().ok_or_else(|| Error::contract("empty dataset"))?.domain;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (m, f) = (format!("{}_moving.vol", p.id), format!("{}_fixed.vol", p.id));
        write_volume(&p.moving, &dir.join(&m))?;
        write_volume(&p.fixed, &dir.join(&f))?;
        entries.push(ManifestEntry { id: p.id.clone(), seed: p.seed, moving: m, fixed: f, initial_dsc: p.initial_dsc });
    }
    let manifest = DatasetManifest { domain, dims, seed, deform: deform.clone(), pairs: entries };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A pair as loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub id: String,
    pub domain: Domain,
    pub moving: Volume,
    pub fixed: Volume,
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LoadedPair>)> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let pairs = manifest
        .pairs
        .iter()
        .map(|e| {
            Ok(LoadedPair {
                id: e.id.clone(),
                domain: manifest.domain,
                moving: read_volume(&dir.join(&e.moving))?,
                fixed: read_volume(&dir.join(&e.fixed))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, pairs))
}

impl From<SynthPair> for LoadedPair {
    fn from(p: SynthPair) -> Self {
        LoadedPair { id: p.id, domain: p.domain, moving: p.moving, fixed: p.fixed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct triple-sum Gaussian convolution with edge replication.
    fn direct_smooth(t: &Tensor, sigma: f64) -> Tensor {
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as i64;
        let dims = t.dims();
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        let mut out = Tensor::grid_zeros(t.channels(), dims);
        for c in 0..t.channels() {
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let mut s = 0.0;
                        for (i, wz) in k.iter().enumerate() {
                            for (j, wy) in k.iter().enumerate() {
                                for (l, wx) in k.iter().enumerate() {
                                    let zz = clamp(z as i64 + i as i64 - r, dims[0]);
                                    let yy = clamp(y as i64 + j as i64 - r, dims[1]);
                                    let xx = clamp(x as i64 + l as i64 - r, dims[2]);
                                    s += wz * wy * wx * t.channel(c)[(zz * dims[1] + yy) * dims[2] + xx];
                                }
                            }
                        }
                        out.channel_mut(c)[(z * dims[1] + y) * dims[2] + x] = s;
                    }
                }
            }
        }
        out
    }

    fn interior_gradient_energy(t: &Tensor) -> f64 {
        let dims = t.dims();
        let mut e = 0.0;
        for c in 0..t.channels() {
            let v = t.channel(c);
            for z in 1..dims[0] - 1 {
                for y in 1..dims[1] - 1 {
                    for x in 1..dims[2] - 1 {
                        let i = (z * dims[1] + y) * dims[2] + x;
                        e += (v[i + 1] - v[i]).powi(2) + (v[i + dims[2]] - v[i]).powi(2) + (v[i + dims[1] * dims[2]] - v[i]).powi(2);
                    }
                }
            }
        }
        e
    }

    #[test]
    fn smoothing_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::grid(2, [6, 7, 5], (0..420).map(|_| rng.random::<f64>()).collect());
        for sigma in [0.0, 0.8, 2.0] {
            let (a, b) = (gaussian_smooth(&t, sigma), direct_smooth(&t, sigma));
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_field_contract() {
        assert_eq!(gen_smooth_field([16; 3], 0.0, 2.0, 1).unwrap().max_abs(), 0.0);
        let a = gen_smooth_field([16; 3], 2.0, 2.0, 5).unwrap();
        assert_eq!(a, gen_smooth_field([16; 3], 2.0, 2.0, 5).unwrap());
        assert!((a.max_abs() - 2.0).abs() < 1e-12);
        assert!(gen_smooth_field([16; 3], 4.0, 2.0, 5).is_err());

        // Large sigma: nearly constant next to the raw noise.
        let dims = [8, 8, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let noise = Tensor::grid(3, dims, (0..3 * 512).map(|_| normal.sample(&mut rng)).collect());
        let smooth = direct_smooth(&noise, 4.0);
        let (raw, smoothed) = (interior_gradient_energy(&noise), interior_gradient_energy(&smooth));
        assert!(smoothed < 0.01 * raw, "{smoothed} vs {raw}");
        let fast = gaussian_smooth(&noise, 4.0);
        assert!((interior_gradient_energy(&fast) - smoothed).abs() < 1e-9 * raw);
    }

    #[test]
    fn domain_samples_have_expected_labels() {
        for spec in [DomainSpec::a(), DomainSpec::b()] {
            let v = gen_domain_sample(&spec, [32; 3], 7).unwrap();
            let mut present: Vec<u16> = v.labels().unwrap().to_vec();
            present.sort_unstable();
            present.dedup();
            assert_eq!(present, (0..=spec.label_count() as u16).collect::<Vec<_>>());
            assert!(v.voxels().iter().all(|x| (0.0..=1.0).contains(x)));
            assert_eq!(v, gen_domain_sample(&spec, [32; 3], 7).unwrap());
        }
    }

    #[test]
    fn noiseless_histogram_matches_transfer() {
        let spec = DomainSpec { bias_amplitude: 0.0, noise_sigma: 0.0, ..DomainSpec::a() };
        let v = gen_domain_sample(&spec, [16; 3], 3).unwrap();
        for (x, &l) in v.voxels().iter().zip(v.labels().unwrap()) {
            assert_eq!(*x, spec.transfer[l as usize] as f32);
        }
    }

    #[test]
    fn pair_dataset_properties() {
        let still = DeformParams { max_mag: 0.0, ..DeformParams::default() };
        let spec = DomainSpec { noise_sigma: 0.0, ..DomainSpec::a() };
        for p in make_pair_dataset(&spec, 2, [16; 3], &still, 1).unwrap() {
            assert_eq!(p.initial_dsc, 1.0);
            assert_eq!(p.moving, p.fixed);
        }
        let pairs = make_pair_dataset(&DomainSpec::a(), 3, [32; 3], &DeformParams::default(), 2).unwrap();
        for p in &pairs {
            assert!(p.initial_dsc > 0.0 && p.initial_dsc < 1.0, "{}", p.initial_dsc);
            assert_eq!(neg_jacobian_fraction(&p.field), 0.0);
        }
        let again = make_pair_dataset(&DomainSpec::a(), 3, [32; 3], &DeformParams::default(), 2).unwrap();
        for (a, b) in pairs.iter().zip(&again) {
            assert_eq!((&a.moving, &a.fixed, a.initial_dsc), (&b.moving, &b.fixed, b.initial_dsc));
        }
    }

    #[test]
    fn volume_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let v = gen_domain_sample(&DomainSpec::b(), [32; 3], 4).unwrap().with_spacing([1.0, 1.5, 2.0]);
        let p = dir.path().join("v.vol");
        write_volume(&v, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 131072);
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        let raw = fs::read(&p).unwrap();
        fs::write(&p, &raw[..raw.len() - 4]).unwrap();
        match read_volume(&p) {
            Err(Error::Format { message, .. }) => assert!(message.contains("size mismatch")),
            other => panic!("{other:?}"),
        }
    }
}
