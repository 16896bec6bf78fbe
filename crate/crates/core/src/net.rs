//! Shared-trunk predictor with two heads and hand-written reverse mode.
//!
//! The trunk maps `(x, embed(t))` through SiLU layers to features. Each head
//! is a small MLP on those features (optionally concatenated with the raw
//! input); the auxiliary head ends in softplus since its targets `ε²` and
//! `(ε − ε̂)²` are non-negative. Training happens in two stages: trunk and
//! noise head first, then the auxiliary head alone with everything else
//! frozen.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{MomentProvider, Moments};
use crate::gmm::GmmSpec;
use crate::rng::{family, standard_normal, stream};
use crate::schedule::{Schedule, Timepoint, VpSde};
#[allow(unused_imports)]
use crate::math::Float;

/// Positions fed to the sinusoidal embedding are `time * TIME_SCALE`.
pub const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub dim: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Number of hidden trunk layers; 0 passes the input straight to the heads.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Width of the single hidden layer in each head; 0 makes heads affine.
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    /// Heads also see `(x, embed(t))` next to the trunk features.
    #[serde(default = "default_head_skip")]
    pub head_skip: bool,
    /// Append the products `xᵢ·embed(t)ⱼ` to the input.
    #[serde(default)]
    pub cross: bool,
}

fn default_embed() -> usize {
    32
}
fn default_hidden() -> usize {
    128
}
fn default_depth() -> usize {
    3
}
fn default_head_hidden() -> usize {
    64
}
fn default_head_skip() -> bool {
    true
}

impl NetConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            embed_dim: default_embed(),
            hidden: default_hidden(),
            depth: default_depth(),
            head_hidden: default_head_hidden(),
            head_skip: default_head_skip(),
            cross: false,
        }
    }

    /// Plain affine map of the input to both outputs.
    pub fn linear(dim: usize, embed_dim: usize) -> Self {
        Self { dim, embed_dim, hidden: 0, depth: 0, head_hidden: 0, head_skip: false, cross: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::BadParameter { name: "dim".into(), reason: "must be positive".into() });
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::BadParameter { name: "embed_dim".into(), reason: "must be even and at least 2".into() });
        }
        if self.depth > 0 && self.hidden == 0 {
            return Err(Error::BadParameter { name: "hidden".into(), reason: "must be positive".into() });
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.dim + self.embed_dim + if self.cross { self.dim * self.embed_dim } else { 0 }
    }

    fn feature_dim(&self) -> usize {
        if self.depth == 0 {
            self.input_dim()
        } else {
            self.hidden
        }
    }

    fn head_input_dim(&self) -> usize {
        self.feature_dim() + if self.head_skip && self.depth > 0 { self.input_dim() } else { 0 }
    }

    /// `(in, out)` of each trunk layer.
    fn trunk_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| (if l == 0 { self.input_dim() } else { self.hidden }, self.hidden))
            .collect()
    }

    fn head_shapes(&self) -> Vec<(usize, usize)> {
        let i = self.head_input_dim();
        if self.head_hidden == 0 {
            alloc::vec![(i, self.dim)]
        } else {
            alloc::vec![(i, self.head_hidden), (self.head_hidden, self.dim)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    None,
    Sn,
    Npr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeDomain {
    Discrete { steps: usize },
    Continuous { horizon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Trunk,
    HeadEps,
    HeadAux,
}

impl Group {
    fn prefix(&self) -> &'static str {
        match self {
            Group::Trunk => "trunk",
            Group::HeadEps => "head_eps",
            Group::HeadAux => "head_aux",
        }
    }
}

/// Parameter layout: trunk layers, then the noise head, then the auxiliary
/// head. Weights are `[out, in]` row-major.
pub fn layout(config: &NetConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        specs.push(TensorSpec { name, shape, offset });
        offset += len;
    };
    for (group, shapes) in [
        (Group::Trunk, config.trunk_shapes()),
        (Group::HeadEps, config.head_shapes()),
        (Group::HeadAux, config.head_shapes()),
    ] {
        for (l, (i, o)) in shapes.into_iter().enumerate() {
            push(format!("{}.{l}.weight", group.prefix()), alloc::vec![o, i]);
            push(format!("{}.{l}.bias", group.prefix()), alloc::vec![o]);
        }
    }
    specs
}

fn group_of(name: &str) -> Group {
    if name.starts_with("trunk.") {
        Group::Trunk
    } else if name.starts_with("head_eps.") {
        Group::HeadEps
    } else {
        Group::HeadAux
    }
}

/// `[sin(p ωᵢ), cos(p ωᵢ)]` with `p = TIME_SCALE·time` and
/// `ωᵢ = 10000^{−i/(e/2)}`.
pub fn time_embedding(time: f64, embed_dim: usize) -> Vec<f64> {
    let half = embed_dim / 2;
    let p = time * TIME_SCALE;
    let mut out = alloc::vec![0.0; embed_dim];
    for i in 0..half {
        let w = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        out[i] = (p * w).sin();
        out[half + i] = (p * w).cos();
    }
    out
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `out[b, o] = bias[o] + Σ_k w[o, k] input[b, k]`
fn affine(w: &[f64], bias: &[f64], input: &[f64], batch: usize, n_in: usize, n_out: usize, out: &mut [f64]) {
    for b in 0..batch {
        let row = &input[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let wr = &w[o * n_in..(o + 1) * n_in];
            let mut acc = bias[o];
            for k in 0..n_in {
                acc += wr[k] * row[k];
            }
            out[b * n_out + o] = acc;
        }
    }
}

/// Accumulates `gw += deltaᵀ input`, `gb += Σ_b delta`, and, if requested,
/// `d_input = delta w`.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    w: &[f64],
    input: &[f64],
    delta: &[f64],
    batch: usize,
    n_in: usize,
    n_out: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    d_input: Option<&mut [f64]>,
) {
    for b in 0..batch {
        let row = &input[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let d = delta[b * n_out + o];
            gb[o] += d;
            let g = &mut gw[o * n_in..(o + 1) * n_in];
            for k in 0..n_in {
                g[k] += d * row[k];
            }
        }
    }
    if let Some(di) = d_input {
        di.iter_mut().for_each(|v| *v = 0.0);
        for b in 0..batch {
            let out_row = &mut di[b * n_in..(b + 1) * n_in];
            for o in 0..n_out {
                let d = delta[b * n_out + o];
                let wr = &w[o * n_in..(o + 1) * n_in];
                for k in 0..n_in {
                    out_row[k] += d * wr[k];
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: Range<usize>,
    b: Range<usize>,
    n_in: usize,
    n_out: usize,
    act: bool,
}

fn stack(layout: &[TensorSpec], group: Group, activate_last: bool) -> Vec<Dense> {
    let weights: Vec<&TensorSpec> =
        layout.iter().filter(|t| group_of(&t.name) == group && t.name.ends_with(".weight")).collect();
    let count = weights.len();
    weights
        .into_iter()
        .enumerate()
        .map(|(l, w)| {
            let bias = layout.iter().find(|t| t.name == format!("{}.{l}.bias", group.prefix())).expect("bias follows weight");
            Dense { w: w.range(), b: bias.range(), n_in: w.shape[1], n_out: w.shape[0], act: activate_last || l + 1 < count }
        })
        .collect()
}

/// Activations of one stack; `acts[0]` is its input.
struct StackTrace {
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

impl StackTrace {
    fn output(&self) -> &[f64] {
        self.acts.last().expect("input present")
    }
}

fn run_stack(params: &[f64], layers: &[Dense], input: Vec<f64>, batch: usize) -> StackTrace {
    let mut acts = alloc::vec![input];
    let mut pres = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let mut z = alloc::vec![0.0; batch * layer.n_out];
        affine(&params[layer.w.clone()], &params[layer.b.clone()], &acts[l], batch, layer.n_in, layer.n_out, &mut z);
        acts.push(if layer.act { z.iter().map(|v| silu(*v)).collect() } else { z.clone() });
        pres.push(z);
    }
    StackTrace { acts, pres }
}

/// Backpropagates `d_out` through a stack, accumulating into `grad`.
/// Returns the gradient with respect to the stack input when asked.
fn back_stack(
    params: &[f64],
    layers: &[Dense],
    trace: &StackTrace,
    d_out: Vec<f64>,
    batch: usize,
    grad: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let mut upstream = d_out;
    for (l, layer) in layers.iter().enumerate().rev() {
        let delta: Vec<f64> = if layer.act {
            upstream.iter().zip(&trace.pres[l]).map(|(g, z)| g * silu_grad(*z)).collect()
        } else {
            upstream
        };
        let need = l > 0 || want_input;
        let mut d_in = if need { alloc::vec![0.0; batch * layer.n_in] } else { Vec::new() };
        let (gw, rest) = grad[layer.w.start..].split_at_mut(layer.w.len());
        let gb = &mut rest[layer.b.start - layer.w.end..][..layer.b.len()];
        affine_backward(
            &params[layer.w.clone()],
            &trace.acts[l],
            &delta,
            batch,
            layer.n_in,
            layer.n_out,
            gw,
            gb,
            if need { Some(&mut d_in) } else { None },
        );
        upstream = d_in;
    }
    want_input.then_some(upstream)
}

/// Intermediate values of a batched forward pass.
struct Trace {
    trunk: StackTrace,
    eps: StackTrace,
    aux: StackTrace,
}

impl Trace {
    fn eps(&self) -> &[f64] {
        self.eps.output()
    }

    fn aux_pre(&self) -> &[f64] {
        self.aux.output()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// ‖ε̂ − ε‖² on the noise head.
    Eps,
    /// ‖h − ε²‖² on the auxiliary head.
    Sn,
    /// ‖g − (ε − ε̂)²‖² on the auxiliary head, ε̂ held fixed.
    Npr,
}

impl LossKind {
    fn trains(&self, group: Group) -> bool {
        match self {
            LossKind::Eps => group != Group::HeadAux,
            LossKind::Sn | LossKind::Npr => group == Group::HeadAux,
        }
    }
}

/// A fixed training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<Vec<f64>>,
    pub time: Vec<f64>,
    pub eps: Vec<Vec<f64>>,
    /// Frozen noise prediction for the residual target; defaults to the
    /// bundle's own noise head.
    pub eps_hat: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub config: NetConfig,
    pub aux: AuxKind,
    pub domain: TimeDomain,
    /// Fingerprint of the discrete schedule the bundle was trained on.
    #[serde(default)]
    pub schedule_hash: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorBundle {
    pub meta: BundleMeta,
    layout: Vec<TensorSpec>,
    trunk: Vec<Dense>,
    head_eps: Vec<Dense>,
    head_aux: Vec<Dense>,
    params: Vec<f64>,
}

impl PredictorBundle {
    fn assemble(meta: BundleMeta, params: Vec<f64>) -> Self {
        let layout = layout(&meta.config);
        Self {
            trunk: stack(&layout, Group::Trunk, true),
            head_eps: stack(&layout, Group::HeadEps, false),
            head_aux: stack(&layout, Group::HeadAux, false),
            meta,
            layout,
            params,
        }
    }

    /// Weights `N(0, 1/fan_in)` and zero biases, except that the last layer
    /// of each head starts at zero.
    pub fn init(config: NetConfig, domain: TimeDomain, seed: u64) -> Result<Self> {
        config.validate()?;
        let total = layout(&config).iter().map(|t| t.len()).sum();
        let meta = BundleMeta { config, aux: AuxKind::None, domain, schedule_hash: None };
        let mut bundle = Self::assemble(meta, alloc::vec![0.0; total]);
        let mut rng = stream(seed, family::INIT);
        let last = |s: &[Dense]| s.last().map(|d| d.w.clone());
        let zeroed = [last(&bundle.head_eps), last(&bundle.head_aux)];
        for t in &bundle.layout {
            if t.name.ends_with(".weight") && !zeroed.contains(&Some(t.range())) {
                let sd = 1.0 / (t.shape[1] as f64).sqrt();
                for p in &mut bundle.params[t.range()] {
                    *p = sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(bundle)
    }

    /// Like [`init`](Self::init) but every tensor is random; for gradient checks.
    pub fn random(config: NetConfig, domain: TimeDomain, aux: AuxKind, seed: u64) -> Result<Self> {
        let mut bundle = Self::init(config, domain, seed)?;
        bundle.meta.aux = aux;
        let mut rng = stream(seed, family::INIT | 1);
        for t in &bundle.layout {
            let sd = 1.0 / (*t.shape.last().expect("non-empty shape") as f64).sqrt();
            for p in &mut bundle.params[t.range()] {
                *p = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(bundle)
    }

    /// Rebuilds a bundle from named tensors.
    pub fn from_tensors(meta: BundleMeta, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        meta.config.validate()?;
        let layout = layout(&meta.config);
        let total = layout.iter().map(|t| t.len()).sum();
        let mut params = alloc::vec![0.0; total];
        for spec in &layout {
            let (_, shape, data) = tensors.iter().find(|(n, _, _)| *n == spec.name).ok_or_else(|| Error::BadParameter {
                name: spec.name.clone(),
                reason: "missing".into(),
            })?;
            if *shape != spec.shape || data.len() != spec.len() {
                return Err(Error::BadParameter {
                    name: spec.name.clone(),
                    reason: format!("shape {shape:?} with {} values, expected {:?}", data.len(), spec.shape),
                });
            }
            params[spec.range()].copy_from_slice(data);
        }
        if let Some((name, _, _)) = tensors.iter().find(|(n, _, _)| !layout.iter().any(|s| s.name == *n)) {
            return Err(Error::BadParameter { name: name.clone(), reason: "not part of this architecture".into() });
        }
        Ok(Self::assemble(meta, params))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorSpec, &[f64])> {
        self.layout.iter().map(|t| (t, &self.params[t.range()]))
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn config(&self) -> &NetConfig {
        &self.meta.config
    }

    pub fn group_params(&self, group: Group) -> Vec<f64> {
        self.layout
            .iter()
            .filter(|t| group_of(&t.name) == group)
            .flat_map(|t| self.params[t.range()].iter().copied())
            .collect()
    }

    fn head_input(&self, trunk: &StackTrace, batch: usize) -> Vec<f64> {
        let c = &self.meta.config;
        let features = trunk.output();
        if c.head_input_dim() == c.feature_dim() {
            return features.to_vec();
        }
        let (f, i) = (c.feature_dim(), c.input_dim());
        let mut out = Vec::with_capacity(batch * (f + i));
        for b in 0..batch {
            out.extend_from_slice(&features[b * f..(b + 1) * f]);
            out.extend_from_slice(&trunk.acts[0][b * i..(b + 1) * i]);
        }
        out
    }

    fn trace(&self, xs: &[&[f64]], times: &[f64]) -> Trace {
        let c = &self.meta.config;
        let batch = xs.len();
        let n_in = c.input_dim();
        let mut input = alloc::vec![0.0; batch * n_in];
        let e = c.embed_dim;
        for (b, (x, t)) in xs.iter().zip(times).enumerate() {
            let row = &mut input[b * n_in..(b + 1) * n_in];
            let emb = time_embedding(*t, e);
            row[..c.dim].copy_from_slice(x);
            row[c.dim..c.dim + e].copy_from_slice(&emb);
            if c.cross {
                for (i, xi) in x.iter().enumerate() {
                    let at = c.dim + e * (1 + i);
                    for (slot, v) in row[at..at + e].iter_mut().zip(&emb) {
                        *slot = xi * v;
                    }
                }
            }
        }
        let trunk = run_stack(&self.params, &self.trunk, input, batch);
        let head_in = self.head_input(&trunk, batch);
        let eps = run_stack(&self.params, &self.head_eps, head_in.clone(), batch);
        let aux = run_stack(&self.params, &self.head_aux, head_in, batch);
        Trace { trunk, eps, aux }
    }

    fn check_input(&self, x: &[f64], time: f64) -> Result<()> {
        if x.len() != self.meta.config.dim {
            return Err(Error::DimensionMismatch { expected: self.meta.config.dim, got: x.len() });
        }
        if !(time > 0.0 && time <= 1.0 + 1e-12) {
            return Err(Error::BadParameter { name: "time".into(), reason: format!("{time} outside (0, 1]") });
        }
        Ok(())
    }

    /// `(ε̂, aux)` at a state and normalized time in `(0, 1]`.
    pub fn forward(&self, x: &[f64], time: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x, time)?;
        let tr = self.trace(&[x], &[time]);
        Ok((tr.eps().to_vec(), tr.aux_pre().iter().map(|v| softplus(*v)).collect()))
    }

    /// Noise prediction at a discrete step of the training schedule.
    pub fn forward_step(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.meta.domain {
            TimeDomain::Discrete { steps } if n >= 1 && n <= steps => self.forward(x, n as f64 / steps as f64),
            TimeDomain::Discrete { steps } => Err(Error::StepOutOfRange { step: n, steps }),
            TimeDomain::Continuous { .. } => Err(Error::Unsupported("discrete step on a continuous-time bundle".into())),
        }
    }

    /// Loss on a batch and its gradient. Entries of frozen parameters are
    /// exactly zero.
    pub fn loss_and_grad(&self, batch: &Batch, kind: LossKind) -> Result<(f64, Vec<f64>)> {
        let c = self.meta.config;
        let d = c.dim;
        let bsz = batch.x.len();
        if bsz == 0 {
            return Err(Error::EmptyBatch);
        }
        for (x, t) in batch.x.iter().zip(&batch.time) {
            self.check_input(x, *t)?;
        }
        let xs: Vec<&[f64]> = batch.x.iter().map(|v| v.as_slice()).collect();
        let tr = self.trace(&xs, &batch.time);
        let (eps_out, aux_pre) = (tr.eps(), tr.aux_pre());
        let scale = 1.0 / bsz as f64;
        let mut loss = 0.0;
        let mut d_out = alloc::vec![0.0; bsz * d];
        for b in 0..bsz {
            for j in 0..d {
                let i = b * d + j;
                let e = batch.eps[b][j];
                match kind {
                    LossKind::Eps => {
                        let r = eps_out[i] - e;
                        loss += r * r * scale;
                        d_out[i] = 2.0 * r * scale;
                    }
                    LossKind::Sn | LossKind::Npr => {
                        let target = if kind == LossKind::Sn {
                            e * e
                        } else {
                            let hat = batch.eps_hat.as_ref().map_or(eps_out[i], |h| h[b][j]);
                            (e - hat) * (e - hat)
                        };
                        let r = softplus(aux_pre[i]) - target;
                        loss += r * r * scale;
                        d_out[i] = 2.0 * r * scale * sigmoid(aux_pre[i]);
                    }
                }
            }
        }
        let mut grad = alloc::vec![0.0; self.params.len()];
        match kind {
            LossKind::Sn | LossKind::Npr => {
                back_stack(&self.params, &self.head_aux, &tr.aux, d_out, bsz, &mut grad, false);
            }
            LossKind::Eps => {
                let d_head = back_stack(&self.params, &self.head_eps, &tr.eps, d_out, bsz, &mut grad, !self.trunk.is_empty())
                    .unwrap_or_default();
                if !self.trunk.is_empty() {
                    let (f, h) = (c.feature_dim(), c.head_input_dim());
                    let d_feat: Vec<f64> = (0..bsz).flat_map(|b| d_head[b * h..b * h + f].iter().copied()).collect();
                    back_stack(&self.params, &self.trunk, &tr.trunk, d_feat, bsz, &mut grad, false);
                }
            }
        }
        Ok((loss, grad))
    }

    fn loss_only(&self, batch: &Batch, kind: LossKind) -> Result<f64> {
        Ok(self.loss_and_grad(batch, kind)?.0)
    }

    fn trainable_mask(&self, kind: LossKind) -> Vec<bool> {
        let mut mask = alloc::vec![false; self.params.len()];
        for t in &self.layout {
            if kind.trains(group_of(&t.name)) {
                mask[t.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

impl MomentProvider for PredictorBundle {
    fn dim(&self) -> usize {
        self.meta.config.dim
    }

    fn moments(&self, x: &[f64], at: &Timepoint) -> Result<Moments> {
        let (eps, aux) = self.forward(x, at.time)?;
        Ok(match self.meta.aux {
            AuxKind::None => Moments { eps, eps_sq: None, residual_sq: None },
            AuxKind::Sn => Moments { eps, eps_sq: Some(aux), residual_sq: None },
            AuxKind::Npr => Moments { eps, eps_sq: None, residual_sq: Some(aux) },
        })
    }

    fn name(&self) -> String {
        match self.meta.aux {
            AuxKind::None => "net".into(),
            AuxKind::Sn => "net-sn".into(),
            AuxKind::Npr => "net-npr".into(),
        }
    }
}

/// Where training states come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainingDomain<'a> {
    /// `n` uniform on `1..=N`.
    Discrete(&'a Schedule),
    /// `t` uniform on `[t_min, T]`.
    Continuous { sde: VpSde, t_min: f64 },
}

impl TrainingDomain<'_> {
    pub fn time_domain(&self) -> TimeDomain {
        match self {
            TrainingDomain::Discrete(s) => TimeDomain::Discrete { steps: s.steps() },
            TrainingDomain::Continuous { sde, .. } => TimeDomain::Continuous { horizon: sde.horizon },
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Timepoint {
        match self {
            TrainingDomain::Discrete(s) => s.timepoint(rng.random_range(1..=s.steps())),
            TrainingDomain::Continuous { sde, t_min } => sde.timepoint(rng.random_range(*t_min..=sde.horizon)),
        }
    }

    fn schedule_hash(&self) -> Option<u64> {
        match self {
            TrainingDomain::Discrete(s) => Some(s.fingerprint()),
            TrainingDomain::Continuous { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Cosine decay of the learning rate to zero over the run.
    #[serde(default)]
    pub cosine_decay: bool,
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            seed,
            cosine_decay: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: &str| Err(Error::BadParameter { name: name.into(), reason: reason.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta", "moment decay rates must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the last 5% of iterations (at least one).
    pub fn final_loss(&self) -> f64 {
        let tail = (self.losses.len() / 20).max(1).min(self.losses.len());
        if tail == 0 {
            return f64::NAN;
        }
        self.losses[self.losses.len() - tail..].iter().sum::<f64>() / tail as f64
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: alloc::vec![0.0; n], v: alloc::vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

fn draw_batch<R: Rng + ?Sized>(
    spec: &GmmSpec,
    domain: &TrainingDomain<'_>,
    size: usize,
    mean_source: Option<&dyn MomentProvider>,
    rng: &mut R,
) -> Result<Batch> {
    let mut batch = Batch {
        x: Vec::with_capacity(size),
        time: Vec::with_capacity(size),
        eps: Vec::with_capacity(size),
        eps_hat: mean_source.map(|_| Vec::with_capacity(size)),
    };
    for _ in 0..size {
        let at = domain.draw(rng);
        let x0 = spec.sample_one(rng);
        let eps = standard_normal(rng, spec.dim());
        let x = at.noised(&x0, &eps);
        if let (Some(src), Some(hats)) = (mean_source, batch.eps_hat.as_mut()) {
            hats.push(src.moments(&x, &at)?.eps);
        }
        batch.x.push(x);
        batch.time.push(at.time);
        batch.eps.push(eps);
    }
    Ok(batch)
}

fn stage_stream(kind: LossKind) -> u64 {
    family::TRAIN
        | match kind {
            LossKind::Eps => 0,
            LossKind::Sn => 1,
            LossKind::Npr => 2,
        }
}

fn run(
    bundle: &mut PredictorBundle,
    spec: &GmmSpec,
    domain: &TrainingDomain<'_>,
    config: &TrainConfig,
    kind: LossKind,
    mean_source: Option<&dyn MomentProvider>,
) -> Result<TrainLog> {
    config.validate()?;
    if spec.dim() != bundle.meta.config.dim {
        return Err(Error::DimensionMismatch { expected: bundle.meta.config.dim, got: spec.dim() });
    }
    if bundle.meta.domain != domain.time_domain() {
        return Err(Error::InvalidConfig("bundle and training domain disagree".into()));
    }
    let mask = bundle.trainable_mask(kind);
    let mut adam = Adam::new(bundle.params.len());
    let mut rng = stream(config.seed, stage_stream(kind));
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = draw_batch(spec, domain, config.batch_size, mean_source, &mut rng)?;
        let (loss, grad) = bundle.loss_and_grad(&batch, kind)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        let lr = if config.cosine_decay {
            config.learning_rate * 0.5 * (1.0 + (core::f64::consts::PI * it as f64 / config.iterations as f64).cos())
        } else {
            config.learning_rate
        };
        adam.step(&mut bundle.params, &grad, &mask, lr, config);
        losses.push(loss);
    }
    Ok(TrainLog { losses })
}

/// Stage one: trunk and noise head on `‖ε̂ − ε‖²`.
pub fn train_eps(
    net: NetConfig,
    spec: &GmmSpec,
    domain: &TrainingDomain<'_>,
    config: &TrainConfig,
) -> Result<(PredictorBundle, TrainLog)> {
    let mut bundle = PredictorBundle::init(net, domain.time_domain(), config.seed)?;
    bundle.meta.schedule_hash = domain.schedule_hash();
    let log = run(&mut bundle, spec, domain, config, LossKind::Eps, None)?;
    Ok((bundle, log))
}

fn train_aux(
    stage1: &PredictorBundle,
    spec: &GmmSpec,
    domain: &TrainingDomain<'_>,
    config: &TrainConfig,
    kind: LossKind,
    mean_source: Option<&dyn MomentProvider>,
) -> Result<(PredictorBundle, TrainLog)> {
    let mut bundle = stage1.clone();
    bundle.meta.aux = if kind == LossKind::Sn { AuxKind::Sn } else { AuxKind::Npr };
    let frozen_before: Vec<f64> = bundle.group_params(Group::Trunk).into_iter().chain(bundle.group_params(Group::HeadEps)).collect();
    let log = run(&mut bundle, spec, domain, config, kind, mean_source)?;
    let frozen_after: Vec<f64> = bundle.group_params(Group::Trunk).into_iter().chain(bundle.group_params(Group::HeadEps)).collect();
    assert!(
        frozen_before.iter().zip(&frozen_after).all(|(a, b)| a.to_bits() == b.to_bits()),
        "second-stage training modified frozen parameters"
    );
    Ok((bundle, log))
}

/// Stage two, squared-noise target `ε²`.
pub fn train_sn(
    stage1: &PredictorBundle,
    spec: &GmmSpec,
    domain: &TrainingDomain<'_>,
    config: &TrainConfig,
) -> Result<(PredictorBundle, TrainLog)> {
    train_aux(stage1, spec, domain, config, LossKind::Sn, None)
}

/// Stage two, residual target `(ε − ε̂)²`. The prediction comes from the
/// frozen noise head unless `mean_source` overrides it.
pub fn train_npr(
    stage1: &PredictorBundle,
    spec: &GmmSpec,
    domain: &TrainingDomain<'_>,
    config: &TrainConfig,
    mean_source: Option<&dyn MomentProvider>,
) -> Result<(PredictorBundle, TrainLog)> {
    train_aux(stage1, spec, domain, config, LossKind::Npr, mean_source)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude over frozen parameters.
    pub frozen_max_abs: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central differences (step `1e-5`)
/// on at most `limit` randomly chosen trainable parameters.
pub fn grad_check(bundle: &PredictorBundle, batch: &Batch, kind: LossKind, limit: usize, seed: u64) -> Result<GradCheck> {
    const STEP: f64 = 1e-5;
    let (_, grad) = bundle.loss_and_grad(batch, kind)?;
    let mask = bundle.trainable_mask(kind);
    let trainable: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
    let frozen_max_abs = (0..mask.len()).filter(|i| !mask[*i]).map(|i| grad[i].abs()).fold(0.0, f64::max);
    let mut rng = stream(seed, family::GRAD_CHECK);
    let picks = sample_indices(&mut rng, trainable.len(), limit.min(trainable.len()));
    let mut probe = bundle.clone();
    let mut max_rel_error: f64 = 0.0;
    for p in picks.iter() {
        let i = trainable[p];
        let orig = probe.params[i];
        probe.params[i] = orig + STEP;
        let up = probe.loss_only(batch, kind)?;
        probe.params[i] = orig - STEP;
        let down = probe.loss_only(batch, kind)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
        max_rel_error = max_rel_error.max((grad[i] - numeric).abs() / denom);
    }
    Ok(GradCheck { max_rel_error, frozen_max_abs, checked: picks.len() })
}

/// A fixed batch drawn like a training batch, for gradient checks.
pub fn sample_batch(
    spec: &GmmSpec,
    domain: &TrainingDomain<'_>,
    size: usize,
    mean_source: Option<&dyn MomentProvider>,
    seed: u64,
) -> Result<Batch> {
    let mut rng = stream(seed, family::GRAD_CHECK | 1);
    draw_batch(spec, domain, size, mean_source, &mut rng)
}
