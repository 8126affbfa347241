//! Five-stage residual CNN.
//!
//! Stage 1 is a stride-2 stem convolution followed by 3x3/2 max pooling
//! (4x downsampling by default). Stages 2-5 are stacks of basic residual
//! blocks (conv-bn-relu, conv-bn, additive skip, relu); the first block of a
//! downsampling stage uses stride 2 and a 1x1 projection on the skip path.
//! With a 128x64 input the default layout yields 32x16, 32x16, 16x8, 8x4 and
//! 4x2 stage outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::params::{param_seed, Module, ParamStore};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 5;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub widths: [usize; NUM_STAGES],
    pub blocks: [usize; NUM_STAGES],
    pub downsample: [usize; NUM_STAGES],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_height: 128,
            input_width: 64,
            widths: [8, 16, 32, 64, 128],
            blocks: [1; NUM_STAGES],
            downsample: [4, 1, 2, 2, 2],
        }
    }
}

fn halve(x: usize) -> usize {
    // 3x3 stride-2 pad-1 convolution, 3x3/2/1 pooling and 1x1 stride-2
    // projection all share this output size.
    (x - 1) / 2 + 1
}

impl BackboneConfig {
    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: String| Err(Error::Config { key: format!("backbone.{key}"), reason });
        if self.input_height == 0 || self.input_width == 0 {
            return err("input_height", "input size must be positive".into());
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return err("widths", format!("stage{} width must be >= 1", i + 1));
        }
        if let Some(i) = self.blocks.iter().position(|&b| b == 0) {
            return err("blocks", format!("stage{} needs at least one block", i + 1));
        }
        if ![1, 2, 4].contains(&self.downsample[0]) {
            return err("downsample", "stage1 factor must be 1, 2 or 4".into());
        }
        if let Some(i) = self.downsample[1..].iter().position(|&d| d != 1 && d != 2) {
            return err("downsample", format!("stage{} factor must be 1 or 2", i + 2));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for s in 0..NUM_STAGES {
            for step in self.halvings(s + 1) {
                if h == 1 && w == 1 {
                    return err(
                        "downsample",
                        format!(
                            "stage{} ({step}) would downsample below 1x1 for a {}x{} input",
                            s + 1,
                            self.input_height,
                            self.input_width
                        ),
                    );
                }
                h = halve(h);
                w = halve(w);
            }
        }
        Ok(())
    }

    fn halvings(&self, stage: usize) -> Vec<&'static str> {
        match (stage, self.downsample[stage - 1]) {
            (1, 4) => vec!["stem", "pool"],
            (_, 2) => vec!["stride"],
            _ => vec![],
        }
    }

    /// `(channels, height, width)` entering `stage`.
    pub fn stage_input(&self, stage: usize) -> (usize, usize, usize) {
        if stage == 1 {
            (INPUT_CHANNELS, self.input_height, self.input_width)
        } else {
            self.stage_output(stage - 1)
        }
    }

    /// `(channels, height, width)` leaving `stage`.
    pub fn stage_output(&self, stage: usize) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for s in 1..=stage {
            for _ in self.halvings(s) {
                h = halve(h);
                w = halve(w);
            }
        }
        (self.widths[stage - 1], h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    num_stages: usize,
    params: ParamStore,
}

/// Parses the stage number from a `stage{s}.` parameter name.
pub fn stage_of(name: &str) -> Option<usize> {
    name.strip_prefix("stage")?.split('.').next()?.parse().ok()
}

fn insert_bn(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.insert(format!("{prefix}.weight"), Tensor::full(&[channels], 1.0), true)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[channels]), true)?;
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false)?;
    store.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0), false)?;
    store.insert(format!("{prefix}.num_batches"), Tensor::zeros(&[1]), false)?;
    Ok(())
}

fn insert_conv(store: &mut ParamStore, seed: u64, name: String, shape: [usize; 4]) -> Result<()> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &name));
    store.insert(name, Tensor::uniform(&shape, (6.0 / fan_in).sqrt(), &mut rng), true)
}

pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<Backbone> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    for stage in 1..=NUM_STAGES {
        let (cin, _, _) = cfg.stage_input(stage);
        let cout = cfg.widths[stage - 1];
        let mut block_in = cin;
        if stage == 1 {
            insert_conv(&mut params, seed, "stage1.stem.conv.weight".into(), [cout, cin, 3, 3])?;
            insert_bn(&mut params, "stage1.stem.bn", cout)?;
            block_in = cout;
        }
        for b in 0..cfg.blocks[stage - 1] {
            let p = format!("stage{stage}.block{b}");
            let stride = block_stride(cfg, stage, b);
            insert_conv(&mut params, seed, format!("{p}.conv1.weight"), [cout, block_in, 3, 3])?;
            insert_bn(&mut params, &format!("{p}.bn1"), cout)?;
            insert_conv(&mut params, seed, format!("{p}.conv2.weight"), [cout, cout, 3, 3])?;
            insert_bn(&mut params, &format!("{p}.bn2"), cout)?;
            if stride != 1 || block_in != cout {
                insert_conv(&mut params, seed, format!("{p}.proj.weight"), [cout, block_in, 1, 1])?;
                insert_bn(&mut params, &format!("{p}.proj_bn"), cout)?;
            }
            block_in = cout;
        }
    }
    Ok(Backbone {
        cfg: cfg.clone(),
        num_stages: NUM_STAGES,
        params,
    })
}

fn block_stride(cfg: &BackboneConfig, stage: usize, block: usize) -> usize {
    if stage > 1 && block == 0 {
        cfg.downsample[stage - 1]
    } else {
        1
    }
}

/// Binds and applies the batch-norm layer `prefix` from `store`.
pub fn batch_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.weight"))?;
    let beta = g.param(store, &format!("{prefix}.bias"))?;
    let rm = store.tensor(&format!("{prefix}.running_mean"))?.data();
    let rv = store.tensor(&format!("{prefix}.running_var"))?.data();
    if mode == Mode::Eval {
        let steps = store.tensor(&format!("{prefix}.num_batches")).map(Tensor::item).unwrap_or(1.0);
        if steps == 0.0 {
            g.warn_untrained_stats(prefix);
        }
    }
    g.batch_norm(x, gamma, beta, rm, rv, mode, prefix)
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Shape `[c, h, w]` of a stage output.
    pub fn output_shape(&self, stage: usize) -> [usize; 3] {
        let (c, h, w) = self.cfg.stage_output(stage);
        [c, h, w]
    }

    /// A backbone made of stages `1..=keep` with value-identical parameters.
    pub fn truncate(&self, keep: usize) -> Result<Backbone> {
        if !(3..=5).contains(&keep) {
            return Err(Error::Invalid(format!("keep_stages must be 3, 4 or 5, got {keep}")));
        }
        if keep > self.num_stages {
            return Err(Error::Invalid(format!(
                "cannot keep {keep} stages of a {}-stage backbone",
                self.num_stages
            )));
        }
        let mut params = self.params.clone();
        params.retain(|n| stage_of(n).is_some_and(|s| s <= keep));
        Ok(Backbone {
            cfg: self.cfg.clone(),
            num_stages: keep,
            params,
        })
    }

    /// Runs stages `from..=to` on `x`, which must have the shape entering
    /// `from` (`[n, c, h, w]` or `[c, h, w]`).
    pub fn forward_range(&self, g: &mut Graph, x: Var, from: usize, to: usize, mode: Mode) -> Result<Var> {
        if from < 1 || from > to || to > self.num_stages {
            return Err(Error::Invalid(format!(
                "stage range {from}..={to} outside 1..={}",
                self.num_stages
            )));
        }
        let (c, h, w) = self.cfg.stage_input(from);
        let shape = g.shape(x);
        let ok = match *shape {
            [_, sc, sh, sw] | [sc, sh, sw] => (sc, sh, sw) == (c, h, w),
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "forward_range",
                format!("stage{from} expects [_, {c}, {h}, {w}], got {shape:?}"),
            ));
        }
        let mut x = x;
        for stage in from..=to {
            x = self.stage(g, x, stage, mode)?;
        }
        Ok(x)
    }

    fn stage(&self, g: &mut Graph, mut x: Var, stage: usize, mode: Mode) -> Result<Var> {
        let p = &self.params;
        if stage == 1 {
            let stride = if self.cfg.downsample[0] >= 2 { 2 } else { 1 };
            let wgt = g.param(p, "stage1.stem.conv.weight")?;
            x = g.conv2d(x, wgt, None, stride, 1)?;
            x = batch_norm(g, p, "stage1.stem.bn", x, mode)?;
            x = g.relu(x);
            if self.cfg.downsample[0] == 4 {
                x = g.max_pool2d(x, 3, 2, 1)?;
            }
        }
        for b in 0..self.cfg.blocks[stage - 1] {
            x = self.block(g, x, stage, b, mode)?;
        }
        Ok(x)
    }

    fn block(&self, g: &mut Graph, x: Var, stage: usize, b: usize, mode: Mode) -> Result<Var> {
        let p = &self.params;
        let pre = format!("stage{stage}.block{b}");
        let stride = block_stride(&self.cfg, stage, b);

        let w1 = g.param(p, &format!("{pre}.conv1.weight"))?;
        let mut y = g.conv2d(x, w1, None, stride, 1)?;
        y = batch_norm(g, p, &format!("{pre}.bn1"), y, mode)?;
        y = g.relu(y);
        let w2 = g.param(p, &format!("{pre}.conv2.weight"))?;
        y = g.conv2d(y, w2, None, 1, 1)?;
        y = batch_norm(g, p, &format!("{pre}.bn2"), y, mode)?;

        let proj = format!("{pre}.proj.weight");
        let skip = if p.contains(&proj) {
            let wp = g.param(p, &proj)?;
            let s = g.conv2d(x, wp, None, stride, 0)?;
            batch_norm(g, p, &format!("{pre}.proj_bn"), s, mode)?
        } else {
            x
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

impl Module for Backbone {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            input_height: 32,
            input_width: 16,
            widths: [2, 2, 4, 4, 8],
            ..Default::default()
        }
    }

    #[test]
    fn default_stage_shapes() {
        let cfg = BackboneConfig::default();
        let hw: Vec<(usize, usize)> = (1..=5).map(|s| {
            let (_, h, w) = cfg.stage_output(s);
            (h, w)
        }).collect();
        assert_eq!(hw, vec![(32, 16), (32, 16), (16, 8), (8, 4), (4, 2)]);
        let f: usize = cfg.downsample[..4].iter().product();
        assert_eq!(f, 16);
    }

    #[test]
    fn smaller_input_shapes() {
        let cfg = BackboneConfig::default().with_input(64, 32);
        assert_eq!(cfg.stage_output(4), (64, 4, 2));
    }

    #[test]
    fn downsampling_below_one_pixel_rejected() {
        let cfg = BackboneConfig::default().with_input(8, 4);
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        assert!(cfg.clone().with_input(32, 16).validate().is_ok());
        let mut bad = BackboneConfig::default();
        bad.widths[2] = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_backbone(&tiny(), 11).unwrap();
        let b = build_backbone(&tiny(), 11).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_backbone(&tiny(), 12).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn names_follow_hierarchy() {
        let bb = build_backbone(&tiny(), 0).unwrap();
        for n in bb.params().names() {
            let s = stage_of(n).unwrap();
            assert!((1..=5).contains(&s), "{n}");
        }
        assert!(bb.params().contains("stage3.block0.proj.weight"));
        assert!(!bb.params().contains("stage2.block0.proj.weight"));
        assert!(bb.params().contains("stage2.block0.conv1.weight"));
    }

    #[test]
    fn truncate_keeps_prefix_stages() {
        let bb = build_backbone(&tiny(), 3).unwrap();
        let t4 = bb.truncate(4).unwrap();
        assert!(t4.params().names().all(|n| stage_of(n).unwrap() <= 4));
        for (n, e) in t4.params().iter() {
            assert_eq!(&e.tensor, &bb.params().get(n).unwrap().tensor);
        }
        assert_eq!(bb.truncate(5).unwrap().params(), bb.params());
        assert!(bb.truncate(2).is_err());
        assert!(t4.truncate(5).is_err());
        let t3 = bb.truncate(3).unwrap();
        assert_eq!(t3.num_stages(), 3);
        assert!(t3.params().names().all(|n| stage_of(n).unwrap() <= 3));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let bb = build_backbone(&tiny(), 5).unwrap();
        let img = Tensor::from_fn(&[2, 3, 32, 16], |i| ((i * 37) % 11) as f64 / 11.0);
        let run = || {
            let mut g = Graph::new();
            let x = g.input(&img);
            let y = bb.forward_range(&mut g, x, 1, 4, Mode::Eval).unwrap();
            (g.shape(y).to_vec(), g.value(y).to_vec())
        };
        let (s1, v1) = run();
        let (_, v2) = run();
        assert_eq!(s1, vec![2, 4, 2, 1]);
        assert_eq!(v1, v2);
    }

    #[test]
    fn forward_checks_shapes_and_range() {
        let bb = build_backbone(&tiny(), 5).unwrap();
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[1, 3, 30, 16]));
        assert!(bb.forward_range(&mut g, x, 1, 4, Mode::Eval).is_err());
        let x = g.input(&Tensor::zeros(&[1, 3, 32, 16]));
        assert!(bb.forward_range(&mut g, x, 2, 1, Mode::Eval).is_err());
        let t = bb.truncate(4).unwrap();
        assert!(t.forward_range(&mut g, x, 1, 5, Mode::Eval).is_err());
    }
}
