//! Model configuration, parameter storage and the full registration
//! forward pass (encoders → optional fusion → pyramid decoder → warp).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{self, DecoderConfig};
use crate::encoders::{self, EncoderConfig, ReferenceConfig, SemConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::volgrid::{DisplacementField, Volume};

pub const LEVELS: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sem: SemConfig,
    pub reference: ReferenceConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sem.validate()?;
        self.decoder.validate()?;
        self.decoder.check_channels(&self.encoder)?;
        self.loss.validate()?;
        if self.reference.channels < self.encoder.channels[0] {
            return Err(Error::Config(format!(
                "reference encoder needs at least {} channels for the PCA target, has {}",
                self.encoder.channels[0], self.reference.channels
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter groups, frozen or trained together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    EncoderG,
    EncoderS,
    Fusion,
    Decoder,
    Reference,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::EncoderG, Group::EncoderS, Group::Fusion, Group::Decoder, Group::Reference];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| v as f64).collect())
    }
}

/// Named parameters stored as `f32`, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, group: Group, t: &Tensor) {
        let data = t.data().iter().map(|&v| v as f32).collect();
        self.params.insert(name.into(), Param { group, shape: t.shape().to_vec(), data });
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, p: Param) {
        self.params.insert(name.into(), p);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn group_len(&self, group: Group) -> usize {
        self.params.values().filter(|p| p.group == group).map(|p| p.data.len()).sum()
    }

    /// Snapshot of one group, for exact before/after comparisons.
    pub fn group_snapshot(&self, group: Group) -> Vec<(String, Vec<f32>)> {
        self.params.iter().filter(|(_, p)| p.group == group).map(|(n, p)| (n.clone(), p.data.clone())).collect()
    }

    /// Hex SHA-256 over names, shapes and bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update([p.group.tag()]);
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Binds stored parameters onto a [`Graph`]; trainable groups become
/// gradient leaves, everything else constants.
pub struct Binding<'a> {
    store: &'a ParamStore,
    trainable: Vec<Group>,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binding<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[Group]) -> Self {
        Self { store, trainable: trainable.to_vec(), vars: BTreeMap::new() }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let p = self.store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert!(
            p.group != Group::Reference || !self.trainable.contains(&Group::Reference),
            "reference encoder is permanently frozen"
        );
        let v = g.leaf(p.to_tensor(), self.trainable.contains(&p.group));
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Bound parameters that receive gradients.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| self.trainable.contains(&self.store.get(n).expect("bound").group))
            .map(|(n, v)| (n.clone(), *v))
            .collect()
    }
}

/// He-normal initialisation helper shared by the sub-network builders.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::from_vec(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }

    pub fn conv(&mut self, out: usize, inp: usize, k: usize) -> Tensor {
        let fan_in = (inp * k * k * k) as f64;
        self.normal(vec![out, inp, k, k, k], (2.0 / fan_in).sqrt())
    }
}

/// Which feature hierarchy reaches the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Stage 1: `F ≡ G`.
    GeneralOnly,
    /// Stage 2: `F ≡ S`.
    StructuralOnly,
    /// Stage 3 and one-shot adaptation: `F = conv(concat(G, S))`.
    Fused,
}

pub fn init_params(cfg: &ModelConfig) -> ParamStore {
    let mut store = ParamStore::default();
    let mut init = Init::new(cfg.init_seed);
    encoders::init_encoder_g(&mut store, &mut init, &cfg.encoder);
    encoders::init_encoder_s(&mut store, &mut init, &cfg.encoder, &cfg.sem);
    decoder::init_fusion(&mut store, &mut init, &cfg.encoder);
    decoder::init_decoder(&mut store, &mut init, &cfg.encoder, &cfg.decoder);
    encoders::init_reference(&mut store, &cfg.reference);
    store
}

/// Output of one registration forward pass.
pub struct Forward {
    pub field: Var,
    pub per_level: Vec<Var>,
    pub warped: Var,
    /// Level-1 Encoder-G features of (moving, fixed) when Encoder-G ran.
    pub g1: Option<(Var, Var)>,
}

/// Full network on the tape: features for both images, fusion according to
/// `mode`, pyramid decoding, and the warped moving image.
pub fn forward(
    g: &mut Graph,
    bind: &mut Binding,
    cfg: &ModelConfig,
    moving: Var,
    fixed: Var,
    mode: FusionMode,
) -> Result<Forward> {
    let dims = g.value(moving).dims();
    if g.value(fixed).dims() != dims {
        return Err(Error::contract("moving and fixed volumes differ in dims"));
    }
    let use_g = mode != FusionMode::StructuralOnly;
    let use_s = mode != FusionMode::GeneralOnly;
    let (gm, gf) = if use_g {
        (
            Some(encoders::encoder_g_vars(g, bind, &cfg.encoder, moving)?),
            Some(encoders::encoder_g_vars(g, bind, &cfg.encoder, fixed)?),
        )
    } else {
        (None, None)
    };
    let (sm, sf) = if use_s {
        (
            Some(encoders::encoder_s_vars(g, bind, &cfg.encoder, &cfg.sem, moving)?),
            Some(encoders::encoder_s_vars(g, bind, &cfg.encoder, &cfg.sem, fixed)?),
        )
    } else {
        (None, None)
    };
    let g1 = match (&gm, &gf) {
        (Some(m), Some(f)) => Some((m[0], f[0])),
        _ => None,
    };
    let fuse = |g: &mut Graph, bind: &mut Binding, gp: Option<Vec<Var>>, sp: Option<Vec<Var>>| {
        (0..LEVELS)
            .map(|l| {
                decoder::fuse_features_var(g, bind, l, gp.as_ref().map(|v| v[l]), sp.as_ref().map(|v| v[l]), mode)
            })
            .collect::<Result<Vec<_>>>()
    };
    let fm = fuse(g, bind, gm, sm)?;
    let ff = fuse(g, bind, gf, sf)?;
    let (field, per_level) = decoder::decode_pyramid_vars(g, bind, &cfg.decoder, &ff, &fm)?;
    let warped = g.warp(moving, field);
    Ok(Forward { field, per_level, warped, g1 })
}

/// Registers `moving` onto `fixed` without recording gradients.
pub fn infer(store: &ParamStore, cfg: &ModelConfig, moving: &Volume, fixed: &Volume, mode: FusionMode) -> Result<DisplacementField> {
    let mut g = Graph::new();
    let mut bind = Binding::frozen(store);
    let m = g.constant(moving.to_tensor());
    let f = g.constant(fixed.to_tensor());
    let out = forward(&mut g, &mut bind, cfg, m, f, mode)?;
    DisplacementField::from_tensor(g.value(out.field).clone())
}
