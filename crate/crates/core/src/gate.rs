//! Spatial-gate LSTM aggregator and the re-id feature extractor.
//!
//! At every step `t` a mask `m_t` (an `h x w` map that is nonnegative and
//! sums to one) weights the backbone feature map, the weighted channel sums
//! `y_t` feed an LSTM cell, and the normalized last hidden state is the
//! descriptor. Four strategies produce the mask:
//!
//! * `global` - uniform, so `y_t` is the per-channel mean;
//! * `local` - a uniform band of rows `[t h / n, (t + 1) h / n)`;
//! * `soft` - `softmax(N(h_{t-1} repeated ; x))` over locations;
//! * `fine` - the soft mask computed on stage-3 features, which are then
//!   masked, passed through the remaining stages and average pooled.
//!
//! Gate pre-activations are laid out as rows `[0, r)` input, `[r, 2r)`
//! forget, `[2r, 3r)` output and `[3r, 4r)` candidate.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::params::{param_seed, Module, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Global,
    Local,
    Soft,
    Fine,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [Self::Global, Self::Local, Self::Soft, Self::Fine];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Local => "local",
            Self::Soft => "soft",
            Self::Fine => "fine",
        }
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Self::Soft | Self::Fine)
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config {
                key: "gate.strategy".into(),
                reason: format!("unknown mask strategy `{s}` (expected global, local, soft or fine)"),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub strategy: MaskStrategy,
    pub steps: usize,
    pub hidden: usize,
    /// Use the mean of `h_1..h_n` instead of `h_n` as the descriptor.
    pub mean_hidden: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Global,
            steps: 8,
            hidden: 128,
            mean_hidden: false,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config { key: "gate.steps".into(), reason: "must be >= 1".into() });
        }
        if self.hidden == 0 {
            return Err(Error::Config { key: "gate.hidden".into(), reason: "must be >= 1".into() });
        }
        Ok(())
    }
}

// ── masks ──────────────────────────────────────────────────────────────

/// Uniform `h x w` mask with every entry `1 / (h w)`.
pub fn global_mask(h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::shape("global_mask", format!("{h}x{w}")));
    }
    Ok(Tensor::full(&[h, w], 1.0 / (h * w) as f64))
}

/// Active rows of the local mask for step `t` of `n`.
pub fn local_band(t: usize, n: usize, h: usize) -> Result<(usize, usize)> {
    if n == 0 || t >= n || h == 0 {
        return Err(Error::Invalid(format!("local mask step {t} of {n} on {h} rows")));
    }
    let (lo, hi) = (t * h / n, (t + 1) * h / n);
    if lo < hi {
        return Ok((lo, hi));
    }
    // Fewer rows than steps: fall back to the row holding the band centre.
    let row = ((2 * t + 1) * h / (2 * n)).min(h - 1);
    log::debug!("local mask step {t}/{n} on {h} rows is empty; using row {row}");
    Ok((row, row + 1))
}

/// Normalized row-band indicator for step `t`.
pub fn local_mask(t: usize, n: usize, h: usize, w: usize) -> Result<Tensor> {
    if w == 0 {
        return Err(Error::shape("local_mask", format!("{h}x{w}")));
    }
    let (lo, hi) = local_band(t, n, h)?;
    let v = 1.0 / ((hi - lo) * w) as f64;
    Ok(Tensor::from_fn(&[h, w], |i| if (lo..hi).contains(&(i / w)) { v } else { 0.0 }))
}

/// Per-step masks of one rollout, for inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskTrace {
    pub height: usize,
    pub width: usize,
    pub steps: Vec<Vec<f64>>,
}

impl MaskTrace {
    /// One row per step, `h * w` columns in row-major order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for i in 0..self.height {
            for j in 0..self.width {
                out.push_str(&format!(",m_{i}_{j}"));
            }
        }
        out.push('\n');
        for (t, m) in self.steps.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in m {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

// ── LSTM unit ──────────────────────────────────────────────────────────

/// Learnable parts of the aggregator, stored under `lstm.`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmUnit {
    hidden: usize,
    input: usize,
    init_input: usize,
    attn_input: Option<usize>,
    params: ParamStore,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub c: Var,
    pub h: Var,
}

fn insert_linear(store: &mut ParamStore, seed: u64, prefix: &str, out: usize, inp: usize) -> Result<()> {
    let name = format!("{prefix}.weight");
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &name));
    let bound = 1.0 / (inp as f64).sqrt();
    store.insert(name, Tensor::uniform(&[out, inp], bound, &mut rng), true)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]), true)
}

impl LstmUnit {
    /// `input` is the width of `y_t`, `init_input` the channel count the
    /// initial states are predicted from and `attn_input` the channel count
    /// of the map the attention scores read (if any).
    pub fn new(hidden: usize, input: usize, init_input: usize, attn_input: Option<usize>, seed: u64) -> Result<Self> {
        if hidden == 0 || input == 0 || init_input == 0 {
            return Err(Error::Invalid("LSTM dimensions must be positive".into()));
        }
        let r = hidden;
        let mut params = ParamStore::new();
        insert_linear(&mut params, seed, "lstm.gates", 4 * r, r + input)?;
        for init in ["lstm.init_c", "lstm.init_h"] {
            insert_linear(&mut params, seed, &format!("{init}.fc1"), r, init_input)?;
            insert_linear(&mut params, seed, &format!("{init}.fc2"), r, r)?;
        }
        if let Some(c) = attn_input {
            let name = "lstm.attn.weight";
            let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
            let bound = 1.0 / ((r + c) as f64).sqrt();
            params.insert(name, Tensor::uniform(&[1, r + c, 1, 1], bound, &mut rng), true)?;
            params.insert("lstm.attn.bias", Tensor::zeros(&[1]), true)?;
        }
        Ok(Self {
            hidden,
            input,
            init_input,
            attn_input,
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn mlp(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let p = &self.params;
        let w1 = g.param(p, &format!("{prefix}.fc1.weight"))?;
        let b1 = g.param(p, &format!("{prefix}.fc1.bias"))?;
        let z = g.linear(x, w1, Some(b1))?;
        let hdn = g.tanh(z);
        let w2 = g.param(p, &format!("{prefix}.fc2.weight"))?;
        let b2 = g.param(p, &format!("{prefix}.fc2.bias"))?;
        g.linear(hdn, w2, Some(b2))
    }

    /// `c_0 = f_c(mean x)`, `h_0 = f_h(mean x)` from a `[n, c, h, w]` map.
    pub fn init_states(&self, g: &mut Graph, x: Var) -> Result<LstmState> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.init_input {
            return Err(Error::shape(
                "init_states",
                format!("expected [_, {}, _, _], got {shape:?}", self.init_input),
            ));
        }
        let means = g.global_avg_pool(x)?;
        let c = self.mlp(g, "lstm.init_c", means)?;
        let h = self.mlp(g, "lstm.init_h", means)?;
        Ok(LstmState { c, h })
    }

    /// `softmax(N(h_prev repeated ; x))` over locations: `[n, h, w]`.
    pub fn soft_attention_mask(&self, g: &mut Graph, h_prev: Var, x: Var) -> Result<Var> {
        let attn_c = self
            .attn_input
            .ok_or_else(|| Error::Invalid("this LSTM unit has no attention parameters".into()))?;
        let shape = g.shape(x).to_vec();
        let hs = g.shape(h_prev).to_vec();
        if shape.len() != 4 || shape[1] != attn_c || hs != [shape[0], self.hidden] {
            return Err(Error::shape(
                "soft_attention_mask",
                format!("hidden {hs:?} and map {shape:?} for r={}, c={attn_c}", self.hidden),
            ));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let rep = g.repeat_spatial(h_prev, h, w)?;
        let cat = g.concat_channels(rep, x)?;
        let nw = g.param(&self.params, "lstm.attn.weight")?;
        let nb = g.param(&self.params, "lstm.attn.bias")?;
        let scores = g.conv2d(cat, nw, Some(nb), 1, 0)?;
        let scores = g.reshape(scores, &[n, h, w])?;
        g.softmax_spatial(scores)
    }

    /// One cell update from `y: [n, input]`.
    pub fn step(&self, g: &mut Graph, y: Var, state: LstmState, t: usize) -> Result<LstmState> {
        let r = self.hidden;
        let ys = g.shape(y).to_vec();
        if ys.len() != 2 || ys[1] != self.input || g.shape(state.h) != [ys[0], r] || g.shape(state.c) != [ys[0], r] {
            return Err(Error::shape(
                "lstm_step",
                format!("y {ys:?}, h {:?}, c {:?} for r={r}, c={}", g.shape(state.h), g.shape(state.c), self.input),
            ));
        }
        let hy = g.concat_cols(state.h, y)?;
        let wm = g.param(&self.params, "lstm.gates.weight")?;
        let bm = g.param(&self.params, "lstm.gates.bias")?;
        let z = g.linear(hy, wm, Some(bm))?;
        if g.value(z).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("LSTM pre-activations at step {t}")));
        }
        let zi = g.slice_cols(z, 0, r)?;
        let zf = g.slice_cols(z, r, 2 * r)?;
        let zo = g.slice_cols(z, 2 * r, 3 * r)?;
        let zg = g.slice_cols(z, 3 * r, 4 * r)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let o = g.sigmoid(zo);
        let cand = g.tanh(zg);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { c, h })
    }
}

/// `y[n, c] = sum_{ij} m[n, i, j] x[n, c, i, j]`.
pub fn masked_input(g: &mut Graph, x: Var, m: Var) -> Result<Var> {
    g.masked_sum(x, m)
}

fn broadcast_mask(g: &mut Graph, mask: &Tensor, n: usize) -> Result<Var> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let data = mask.data().repeat(n);
    g.constant(&[n, h, w], data)
}

// ── extractor ──────────────────────────────────────────────────────────

/// Truncated backbone plus spatial-gate LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct ReidModel {
    backbone: Backbone,
    gate: GateConfig,
    unit: LstmUnit,
}

/// Any model that maps a batch of images to unit-norm descriptors.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;

    /// Descriptors for `[n, 3, H, W]` images in evaluation mode.
    fn extract(&self, images: &Tensor) -> Result<Vec<Vec<f64>>>;
}

impl ReidModel {
    /// The LSTM reads the output of the last stage `backbone` keeps. With the
    /// fine strategy the attention acts on stage 3 and stages `4..=keep`
    /// re-extract the masked map.
    pub fn new(backbone: Backbone, gate: GateConfig, seed: u64) -> Result<Self> {
        gate.validate()?;
        let keep = backbone.num_stages();
        let [c_last, _, _] = backbone.output_shape(keep);
        let [c3, _, _] = backbone.output_shape(3);
        let (init_c, attn) = match gate.strategy {
            MaskStrategy::Global | MaskStrategy::Local => (c_last, None),
            MaskStrategy::Soft => (c_last, Some(c_last)),
            MaskStrategy::Fine => {
                if keep < 4 {
                    return Err(Error::Config {
                        key: "gate.strategy".into(),
                        reason: "the fine strategy needs at least 4 backbone stages".into(),
                    });
                }
                (c3, Some(c3))
            }
        };
        let unit = LstmUnit::new(gate.hidden, c_last, init_c, attn, seed)?;
        Ok(Self { backbone, gate, unit })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn gate(&self) -> &GateConfig {
        &self.gate
    }

    pub fn unit(&self) -> &LstmUnit {
        &self.unit
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    /// Feature map the mask is computed on: `[c, h, w]`.
    pub fn mask_map_shape(&self) -> [usize; 3] {
        match self.gate.strategy {
            MaskStrategy::Fine => self.backbone.output_shape(3),
            _ => self.backbone.output_shape(self.backbone.num_stages()),
        }
    }

    /// Unit-norm descriptors `[n, r]` for images `[n, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph, images: Var, mode: Mode) -> Result<Var> {
        self.forward_traced(g, images, mode, None)
    }

    /// As [`ReidModel::forward`], recording the masks of the first image.
    pub fn forward_traced(&self, g: &mut Graph, images: Var, mode: Mode, mut trace: Option<&mut MaskTrace>) -> Result<Var> {
        let images = match *g.shape(images) {
            [c, h, w] => g.reshape(images, &[1, c, h, w])?,
            _ => images,
        };
        let keep = self.backbone.num_stages();
        let fine = self.gate.strategy == MaskStrategy::Fine;
        let map_stage = if fine { 3 } else { keep };
        let x = self.backbone.forward_range(g, images, 1, map_stage, mode)?;
        let [n, _, h, w] = <[usize; 4]>::try_from(g.shape(x)).expect("backbone output is rank 4");
        if let Some(t) = trace.as_deref_mut() {
            *t = MaskTrace { height: h, width: w, steps: Vec::new() };
        }
        let global = broadcast_mask(g, &global_mask(h, w)?, n)?;

        let mut state = self.unit.init_states(g, x)?;
        let mut hidden_sum: Option<Var> = None;
        for t in 0..self.gate.steps {
            let m = match self.gate.strategy {
                MaskStrategy::Global => global,
                MaskStrategy::Local => broadcast_mask(g, &local_mask(t, self.gate.steps, h, w)?, n)?,
                MaskStrategy::Soft | MaskStrategy::Fine => self.unit.soft_attention_mask(g, state.h, x)?,
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.steps.push(g.value(m)[..h * w].to_vec());
            }
            let y = if fine {
                let masked = g.spatial_scale(x, m)?;
                let z = self.backbone.forward_range(g, masked, 4, keep, mode)?;
                g.global_avg_pool(z)?
            } else {
                masked_input(g, x, m)?
            };
            state = self.unit.step(g, y, state, t)?;
            if self.gate.mean_hidden {
                hidden_sum = Some(match hidden_sum {
                    None => state.h,
                    Some(s) => g.add(s, state.h)?,
                });
            }
        }
        let out = match hidden_sum {
            Some(s) => g.scale(s, 1.0 / self.gate.steps as f64),
            None => state.h,
        };
        g.l2_normalize(out)
    }

    /// Descriptor and masks for a single `[3, H, W]` image.
    pub fn extract_feature(&self, image: &Tensor, mode: Mode) -> Result<(Vec<f64>, MaskTrace)> {
        let mut g = Graph::new();
        let x = g.input(image);
        let mut trace = MaskTrace::default();
        let f = self.forward_traced(&mut g, x, mode, Some(&mut trace))?;
        Ok((g.value(f).to_vec(), trace))
    }
}

impl FeatureExtractor for ReidModel {
    fn feature_dim(&self) -> usize {
        self.gate.hidden
    }

    fn extract(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.input(images);
        let f = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(f).chunks(self.gate.hidden).map(<[f64]>::to_vec).collect())
    }
}

impl Module for ReidModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.backbone.params(), &self.unit.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.backbone.params_mut(), &mut self.unit.params]
    }
}
