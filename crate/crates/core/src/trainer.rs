//! Three-stage training, one-shot adaptation and checkpoint persistence.
//!
//! Stage 1 trains Encoder-G and the decoder with NCC, smoothness and, in
//! the last epochs only, the reference-distillation term. Stage 2 trains
//! Encoder-S and the decoder with SSIM. Stage 3 trains only the fusion
//! convolutions and the decoder with NCC. One-shot adaptation fine-tunes a
//! copy of a fully trained model on a single pair with the stage-2
//! objective while Encoder-G stays frozen.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{distill_alignment_var, pca_reduce, reference_features};
use crate::error::{Error, Result};
use crate::io::{put_str, put_u32, ByteReader};
use crate::losses::{stage_loss_var, Stage};
use crate::model::{forward, hex_digest, init_params, infer, Binding, FusionMode, Group, ModelConfig, Param, ParamStore};
use crate::synthdata::{sub_seed, LoadedPair};
use crate::tape::Graph;
use crate::tensor::Tensor;
use crate::volgrid::{DisplacementField, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs of stages 1, 2 and 3.
    pub epochs: [usize; 3],
    /// Trailing share of stage-1 epochs that include the distillation term.
    pub mi_active_fraction: f64,
    pub one_shot_iters: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: [30, 20, 10],
            mi_active_fraction: 0.2,
            one_shot_iters: vec![5, 10, 20],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.mi_active_fraction > 0.0 && self.mi_active_fraction <= 1.0) {
            return Err(Error::Config(format!("mi_active_fraction must be in (0, 1], got {}", self.mi_active_fraction)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }

    /// First stage-1 epoch (0-based) whose loss includes the MI term.
    pub fn mi_start_epoch(&self) -> usize {
        let e1 = self.epochs[0];
        e1 - ((self.mi_active_fraction * e1 as f64).ceil() as usize).min(e1)
    }

    pub fn mi_active(&self, epoch: usize) -> bool {
        epoch >= self.mi_start_epoch()
    }
}

/// What is being optimised; fixes the trainable groups, the fusion mode
/// and the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Stage1,
    Stage2,
    Stage3,
    OneShot,
}

impl Phase {
    pub fn from_stage(s: Stage) -> Self {
        match s {
            Stage::One => Phase::Stage1,
            Stage::Two => Phase::Stage2,
            Stage::Three => Phase::Stage3,
        }
    }

    pub fn trainable(self) -> &'static [Group] {
        match self {
            Phase::Stage1 => &[Group::EncoderG, Group::Decoder],
            Phase::Stage2 => &[Group::EncoderS, Group::Decoder],
            Phase::Stage3 => &[Group::Fusion, Group::Decoder],
            Phase::OneShot => &[Group::EncoderS, Group::Fusion, Group::Decoder],
        }
    }

    pub fn mode(self) -> FusionMode {
        match self {
            Phase::Stage1 => FusionMode::GeneralOnly,
            Phase::Stage2 => FusionMode::StructuralOnly,
            Phase::Stage3 | Phase::OneShot => FusionMode::Fused,
        }
    }

    pub fn objective(self) -> Stage {
        match self {
            Phase::Stage1 => Stage::One,
            Phase::Stage2 | Phase::OneShot => Stage::Two,
            Phase::Stage3 => Stage::Three,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Stage3 => "stage3",
            Phase::OneShot => "oneshot",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Number of completed training stages (0–3).
    pub completed: u8,
    pub epochs_done: [u32; 3],
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        Ok(Self { config, params, completed: 0, epochs_done: [0; 3] })
    }

    /// Fusion mode matching the most recent completed stage.
    pub fn inference_mode(&self) -> FusionMode {
        match self.completed {
            0 | 1 => FusionMode::GeneralOnly,
            2 => FusionMode::StructuralOnly,
            _ => FusionMode::Fused,
        }
    }

    pub fn infer(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        infer(&self.params, &self.config, moving, fixed, self.inference_mode())
    }
}

/// Adam with bias correction. Moments live in `f64`, parameters in `f32`.
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: i32,
    m: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { lr: cfg.lr, b1: cfg.beta1, b2: cfg.beta2, eps: cfg.adam_eps, t: 0, m: Default::default() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.b1.powi(self.t), 1.0 - self.b2.powi(self.t));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a stored parameter");
            let (m, v) = self.m.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.b1 * m[i] + (1.0 - self.b1) * gi;
                v[i] = self.b2 * v[i] + (1.0 - self.b2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p.data[i] = (p.data[i] as f64 - update) as f32;
            }
        }
    }
}

/// PCA-reduced reference features of one image.
pub fn distillation_target(v: &Volume, state: &ModelState) -> Result<Tensor> {
    pca_reduce(&reference_features(v, &state.params), state.config.encoder.channels[0])
}

pub struct StepOutput {
    pub loss: f64,
    /// Distillation term when it was part of the loss.
    pub mi: Option<f64>,
    pub grads: Vec<(String, Tensor)>,
}

/// Loss and gradients of one pair under `phase`. `targets` (moving, fixed
/// distillation targets) adds the MI term and is only valid in stage 1.
pub fn compute_step(
    params: &ParamStore,
    cfg: &ModelConfig,
    phase: Phase,
    moving: &Volume,
    fixed: &Volume,
    targets: Option<(&Tensor, &Tensor)>,
    with_grads: bool,
) -> Result<StepOutput> {
    if targets.is_some() && phase != Phase::Stage1 {
        return Err(Error::contract(format!("distillation term requested in {}", phase.name())));
    }
    let mut g = Graph::new();
    let trainable: &[Group] = if with_grads { phase.trainable() } else { &[] };
    let mut bind = Binding::new(params, trainable);
    let m = g.constant(moving.to_tensor());
    let f = g.constant(fixed.to_tensor());
    let out = forward(&mut g, &mut bind, cfg, m, f, phase.mode())?;
    let mi = match targets {
        Some((tm, tf)) => {
            let (gm, gf) = out.g1.ok_or_else(|| Error::contract("stage 1 forward lacks Encoder-G features"))?;
            let dm = distill_alignment_var(&mut g, gm, tm, &cfg.loss)?;
            let df = distill_alignment_var(&mut g, gf, tf, &cfg.loss)?;
            let s = g.add(dm, df);
            Some(g.mul_scalar(s, 0.5))
        }
        None => None,
    };
    let loss = stage_loss_var(&mut g, phase.objective(), f, out.warped, out.field, mi, &cfg.loss)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::contract(format!("non-finite {} loss", phase.name())));
    }
    let mut grads = Vec::new();
    if with_grads {
        let mut gr = g.backward(loss);
        for (name, var) in bind.trainable_vars() {
            if let Some(t) = gr.take(var) {
                grads.push((name, t));
            }
        }
    }
    Ok(StepOutput { loss: value, mi: mi.map(|v| g.value(v).item()), grads })
}

/// Frozen-group snapshot used to machine-check freeze contracts.
fn frozen_snapshot(params: &ParamStore, phase: Phase) -> Vec<(Group, Vec<(String, Vec<f32>)>)> {
    Group::ALL
        .iter()
        .filter(|g| !phase.trainable().contains(g))
        .map(|&g| (g, params.group_snapshot(g)))
        .collect()
}

fn check_frozen(params: &ParamStore, phase: Phase, before: &[(Group, Vec<(String, Vec<f32>)>)]) -> Result<()> {
    for (g, snap) in before {
        if params.group_snapshot(*g) != *snap {
            return Err(Error::contract(format!("{g:?} changed during {}", phase.name())));
        }
    }
    Ok(())
}

/// One optimisation step record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub pair: String,
    pub loss: f64,
    pub mi: Option<f64>,
}

pub fn write_loss_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["phase", "epoch", "step", "pair", "loss", "mi"]).map_err(err)?;
    for r in records {
        w.write_record([
            r.phase.name().to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.pair.clone(),
            r.loss.to_string(),
            r.mi.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every epoch of `stage` over `pairs` (seeded permutation per
/// epoch, batch 1) and advances the stage marker.
pub fn train_stage(
    state: &mut ModelState,
    stage: Stage,
    pairs: &[LoadedPair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let idx = stage.number() as usize - 1;
    if state.completed as usize != idx {
        return Err(Error::contract(format!("stage {} requested after {} completed stage(s)", stage.number(), state.completed)));
    }
    if pairs.is_empty() {
        return Err(Error::contract("training needs at least one pair"));
    }
    let phase = Phase::from_stage(stage);
    let mut adam = Adam::new(cfg);
    let mut targets: Vec<Option<(Tensor, Tensor)>> = vec![None; pairs.len()];
    let mut records = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs[idx] {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, (idx as u64) << 32 | epoch as u64)));
        let mi_on = stage == Stage::One && cfg.mi_active(epoch);
        for &i in &order {
            let p = &pairs[i];
            if mi_on && targets[i].is_none() {
                targets[i] = Some((distillation_target(&p.moving, state)?, distillation_target(&p.fixed, state)?));
            }
            let t = if mi_on { targets[i].as_ref().map(|(a, b)| (a, b)) } else { None };
            let before = frozen_snapshot(&state.params, phase);
            let out = compute_step(&state.params, &state.config, phase, &p.moving, &p.fixed, t, true)?;
            adam.step(&mut state.params, &out.grads);
            check_frozen(&state.params, phase, &before)?;
            let rec = StepRecord { phase, epoch, step, pair: p.id.clone(), loss: out.loss, mi: out.mi };
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
        state.epochs_done[idx] += 1;
    }
    state.completed = stage.number();
    Ok(records)
}

/// Runs all three stages in order.
pub fn train_all(state: &mut ModelState, pairs: &[LoadedPair], cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
    let mut all = Vec::new();
    for stage in [Stage::One, Stage::Two, Stage::Three] {
        all.extend(train_stage(state, stage, pairs, cfg, &mut on_step)?);
    }
    Ok(all)
}

pub struct OneShotCheckpoint {
    pub iters: usize,
    pub field: DisplacementField,
    /// Wall clock from the start of adaptation to this field.
    pub seconds: f64,
}

pub struct OneShotRun {
    pub state: ModelState,
    pub checkpoints: Vec<OneShotCheckpoint>,
    /// Adaptation objective at iterates `0..=iters`.
    pub objective: Vec<f64>,
}

/// Fine-tunes a copy of `base` on one pair for `iters` steps, keeping the
/// field at each iteration count in `checkpoints`. `base` itself is never
/// modified.
pub fn one_shot_adapt(
    base: &ModelState,
    moving: &Volume,
    fixed: &Volume,
    iters: usize,
    checkpoints: &[usize],
    cfg: &TrainConfig,
) -> Result<OneShotRun> {
    cfg.validate()?;
    if base.completed < 3 {
        return Err(Error::contract(format!("one-shot adaptation needs a fully trained model, {} stage(s) done", base.completed)));
    }
    for &c in checkpoints.iter().chain([&iters]) {
        if c != 0 && !cfg.one_shot_iters.contains(&c) {
            return Err(Error::contract(format!("{c} adaptation iterations not in {:?}", cfg.one_shot_iters)));
        }
        if c > iters {
            return Err(Error::contract(format!("checkpoint {c} beyond {iters} iterations")));
        }
    }
    let start = Instant::now();
    let phase = Phase::OneShot;
    let mut state = base.clone();
    let mut adam = Adam::new(cfg);
    let mut objective = Vec::with_capacity(iters + 1);
    let mut kept = Vec::new();
    let keep = |k: usize, state: &ModelState, kept: &mut Vec<OneShotCheckpoint>| -> Result<()> {
        if checkpoints.contains(&k) {
            let field = infer(&state.params, &state.config, moving, fixed, phase.mode())?;
            kept.push(OneShotCheckpoint { iters: k, field, seconds: start.elapsed().as_secs_f64() });
        }
        Ok(())
    };
    for k in 0..iters {
        keep(k, &state, &mut kept)?;
        let before = frozen_snapshot(&state.params, phase);
        let out = compute_step(&state.params, &state.config, phase, moving, fixed, None, true)?;
        objective.push(out.loss);
        adam.step(&mut state.params, &out.grads);
        check_frozen(&state.params, phase, &before)?;
    }
    keep(iters, &state, &mut kept)?;
    objective.push(compute_step(&state.params, &state.config, phase, moving, fixed, None, false)?.loss);
    Ok(OneShotRun { state, checkpoints: kept, objective })
}

const CKPT_MAGIC: &[u8; 8] = b"MATCHREG";
pub const CKPT_VERSION: u32 = 1;

/// Checkpoint layout: magic, version, config JSON, config hash, stage
/// marker, epoch counters, then each parameter as name, group, shape and
/// little-endian `f32` data.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    let json = serde_json::to_string(&state.config).map_err(|e| Error::format(path, e.to_string()))?;
    put_str(&mut buf, &json);
    put_str(&mut buf, &state.config.hash());
    buf.push(state.completed);
    for e in state.epochs_done {
        put_u32(&mut buf, e);
    }
    put_u32(&mut buf, state.params.len() as u32);
    for (name, p) in state.params.iter() {
        put_str(&mut buf, name);
        buf.push(p.group.tag());
        put_u32(&mut buf, p.shape.len() as u32);
        for &d in &p.shape {
            put_u32(&mut buf, d as u32);
        }
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(path, "not a matchreg checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Version { found: version, expected: CKPT_VERSION });
    }
    let json = r.string()?;
    let stored_hash = r.string()?;
    let config: ModelConfig = serde_json::from_str(&json).map_err(|e| Error::format(path, e.to_string()))?;
    let actual = config.hash();
    if actual != stored_hash {
        return Err(Error::HashMismatch { found: actual, expected: stored_hash });
    }
    config.validate()?;
    let completed = r.take(1)?[0];
    if completed > 3 {
        return Err(Error::format(path, format!("invalid stage marker {completed}")));
    }
    let epochs_done = [r.u32()?, r.u32()?, r.u32()?];
    let count = r.u32()? as usize;
    let template = init_params(&config);
    if count != template.len() {
        return Err(Error::format(path, format!("{count} parameters, model defines {}", template.len())));
    }
    let mut params = ParamStore::default();
    for _ in 0..count {
        let name = r.string()?;
        let group = Group::from_tag(r.take(1)?[0]).ok_or_else(|| Error::format(path, "bad group tag"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected = template.get(&name).ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
        if expected.shape != shape || expected.group != group {
            return Err(Error::format(path, format!("parameter {name}: shape {shape:?} / {group:?} disagree with the model")));
        }
        let data = r.f32s(shape.iter().product())?;
        params.insert_raw(name, Param { group, shape, data });
    }
    if !r.is_done() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    Ok(ModelState { config, params, completed, epochs_done })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_pair_dataset, DeformParams, DomainSpec};

    fn tiny_pairs(n: usize, domain: DomainSpec, seed: u64) -> Vec<LoadedPair> {
        let deform = DeformParams { max_mag: 2.0, smooth_sigma: 3.0, ..DeformParams::default() };
        make_pair_dataset(&domain, n, [16; 3], &deform, seed).unwrap().into_iter().map(Into::into).collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig { epochs: [5, 1, 1], one_shot_iters: vec![1, 2], ..TrainConfig::default() }
    }

    #[test]
    fn mi_schedule_boundary() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.mi_start_epoch(), 24);
        assert!(!cfg.mi_active(0) && !cfg.mi_active(23) && cfg.mi_active(24) && cfg.mi_active(29));
        let odd = TrainConfig { epochs: [7, 1, 1], ..cfg };
        assert_eq!(odd.mi_start_epoch(), 5);
    }

    #[test]
    fn stages_run_in_order_with_freezes() {
        let pairs = tiny_pairs(2, DomainSpec::a(), 1);
        let cfg = quick_cfg();
        let mut state = ModelState::new(ModelConfig::default()).unwrap();
        assert!(matches!(train_stage(&mut state, Stage::Two, &pairs, &cfg, |_| {}), Err(Error::Contract(_))));
        let g0 = state.params.group_snapshot(Group::EncoderG);
        let recs = train_stage(&mut state, Stage::One, &pairs, &cfg, |_| {}).unwrap();
        assert_eq!(recs.len(), 10);
        for r in &recs {
            assert_eq!(r.mi.is_some(), r.epoch >= 4);
        }
        let g1 = state.params.group_snapshot(Group::EncoderG);
        assert_ne!(g0, g1);
        let s_before = state.params.group_snapshot(Group::EncoderS);
        train_stage(&mut state, Stage::Two, &pairs, &cfg, |_| {}).unwrap();
        assert_eq!(state.params.group_snapshot(Group::EncoderG), g1);
        assert_ne!(state.params.group_snapshot(Group::EncoderS), s_before);
        train_stage(&mut state, Stage::Three, &pairs, &cfg, |_| {}).unwrap();
        assert_eq!(state.completed, 3);
        assert_eq!(state.params.group_snapshot(Group::EncoderG), g1);

        let base = state.clone();
        let p = &pairs[0];
        let run = one_shot_adapt(&state, &p.moving, &p.fixed, 2, &[0, 1, 2], &cfg).unwrap();
        assert_eq!(state, base);
        assert_eq!(run.objective.len(), 3);
        assert_eq!(run.checkpoints[0].field, state.infer(&p.moving, &p.fixed).unwrap());
        assert_eq!(run.state.params.group_snapshot(Group::EncoderG), g1);
        assert!(one_shot_adapt(&state, &p.moving, &p.fixed, 3, &[], &cfg).is_err());
    }

    #[test]
    fn inactive_mi_adds_no_gradient() {
        let pairs = tiny_pairs(1, DomainSpec::a(), 2);
        let state = ModelState::new(ModelConfig::default()).unwrap();
        let p = &pairs[0];
        let a = compute_step(&state.params, &state.config, Phase::Stage1, &p.moving, &p.fixed, None, true).unwrap();
        let tm = distillation_target(&p.moving, &state).unwrap();
        let tf = distillation_target(&p.fixed, &state).unwrap();
        let b = compute_step(&state.params, &state.config, Phase::Stage1, &p.moving, &p.fixed, Some((&tm, &tf)), true).unwrap();
        assert!(a.mi.is_none());
        let mi = b.mi.unwrap();
        assert!((b.loss - (a.loss + mi)).abs() < 1e-12);
        // The term only touches Encoder-G.
        for ((na, ga), (nb, gb)) in a.grads.iter().zip(&b.grads) {
            assert_eq!(na, nb);
            if na.starts_with("dec.") {
                assert_eq!(ga, gb);
            }
        }
        assert!(compute_step(&state.params, &state.config, Phase::Stage2, &p.moving, &p.fixed, Some((&tm, &tf)), true).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let state = ModelState::new(ModelConfig { init_seed: 11, ..ModelConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, state);

        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version { found: 9, expected: 1 })));

        save_checkpoint(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let pos = bytes.windows(9).position(|w| w == b"init_seed").unwrap();
        bytes[pos + 11] = b'2';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::HashMismatch { .. })));
    }
}
