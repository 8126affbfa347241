//! Task heads and losses.
//!
//! Source tasks put an affine head on the globally pooled stage-5 output.
//! The re-id objective is the triplet hinge `max(d + 2a, 0)` with
//! `d = 2|H - H+|^2 - |H - H-|^2 - |H+ - H-|^2`, averaged over the batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::backbone::{Backbone, NUM_STAGES};
use crate::error::{Error, Result};
use crate::params::{param_seed, Module, ParamStore};
use crate::tensor::Tensor;

/// Unit-norm tolerance for triplet inputs.
pub const UNIT_TOL: f64 = 1e-6;
pub const DEFAULT_MARGIN: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Identity classification with softmax cross-entropy.
    Classify,
    /// Binary attributes with sigmoid cross-entropy.
    Attr,
}

/// Full five-stage backbone plus an affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceModel {
    kind: HeadKind,
    outputs: usize,
    backbone: Backbone,
    head: ParamStore,
}

impl SourceModel {
    pub fn new(backbone: Backbone, kind: HeadKind, outputs: usize, seed: u64) -> Result<Self> {
        if backbone.num_stages() != NUM_STAGES {
            return Err(Error::Invalid("source tasks train the full five-stage backbone".into()));
        }
        if outputs == 0 {
            return Err(Error::Invalid("head needs at least one output".into()));
        }
        let [c, _, _] = backbone.output_shape(NUM_STAGES);
        let mut head = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, "head.weight"));
        let bound = 1.0 / (c as f64).sqrt();
        head.insert("head.weight", Tensor::uniform(&[outputs, c], bound, &mut rng), true)?;
        head.insert("head.bias", Tensor::zeros(&[outputs]), true)?;
        Ok(Self { kind, outputs, backbone, head })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Logits `[n, outputs]` for images `[n, 3, H, W]`.
    pub fn logits(&self, g: &mut Graph, images: Var, mode: Mode) -> Result<Var> {
        let z = self.backbone.forward_range(g, images, 1, NUM_STAGES, mode)?;
        let pooled = g.global_avg_pool(z)?;
        let w = g.param(&self.head, "head.weight")?;
        let b = g.param(&self.head, "head.bias")?;
        g.linear(pooled, w, Some(b))
    }
}

impl Module for SourceModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.backbone.params(), &self.head]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.backbone.params_mut(), &mut self.head]
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = g.softmax_cross_entropy(logits, labels)?;
    Ok(g.mean(per))
}

/// Mean over the batch of the per-sample attribute loss
/// `-sum_k a_k log p_k + (1 - a_k) log(1 - p_k)`; `targets` is row-major
/// `[n, K]` with entries in {0, 1}.
pub fn sigmoid_ce_loss(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    if let Some(bad) = targets.iter().find(|&&a| a != 0.0 && a != 1.0) {
        return Err(Error::Invalid(format!("attribute targets must be 0 or 1, got {bad}")));
    }
    let per = g.sigmoid_cross_entropy(logits, targets)?;
    Ok(g.mean(per))
}

fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    let d = *g.shape(v).last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::shape("triplet_distance", format!("{what} has no columns")));
    }
    for row in g.value(v).chunks(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Invalid(format!("{what} is not unit norm (|x| = {norm})")));
        }
    }
    Ok(())
}

fn sq_dist(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    g.sum_rows(sq)
}

/// Per-row `d = 2|H - H+|^2 - |H - H-|^2 - |H+ - H-|^2` for `[n, r]` inputs.
pub fn triplet_distance(g: &mut Graph, anchor: Var, pos: Var, neg: Var) -> Result<Var> {
    for (v, what) in [(anchor, "anchor"), (pos, "positive"), (neg, "negative")] {
        check_unit_rows(g, v, what)?;
    }
    let ap = sq_dist(g, anchor, pos)?;
    let an = sq_dist(g, anchor, neg)?;
    let pn = sq_dist(g, pos, neg)?;
    let ap2 = g.scale(ap, 2.0);
    let t = g.sub(ap2, an)?;
    g.sub(t, pn)
}

/// `max(d + 2a, 0)` elementwise; the boundary takes the zero subgradient.
pub fn triplet_loss(g: &mut Graph, d: Var, margin: f64) -> Var {
    let shifted = g.add_scalar(d, 2.0 * margin);
    g.relu(shifted)
}

/// Mean triplet loss for features stacked as `[anchors; positives; negatives]`.
pub fn batch_triplet_loss(g: &mut Graph, features: Var, margin: f64) -> Result<Var> {
    let n = g.shape(features)[0];
    if n == 0 || !n.is_multiple_of(3) {
        return Err(Error::shape("batch_triplet_loss", format!("{n} rows is not a whole number of triplets")));
    }
    let b = n / 3;
    let anchor = g.slice_rows(features, 0, b)?;
    let pos = g.slice_rows(features, b, 2 * b)?;
    let neg = g.slice_rows(features, 2 * b, n)?;
    let d = triplet_distance(g, anchor, pos, neg)?;
    let l = triplet_loss(g, d, margin);
    Ok(g.mean(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(g: &mut Graph, data: &[&[f64]]) -> Var {
        let d = data[0].len();
        let flat: Vec<f64> = data.iter().flat_map(|r| r.iter().copied()).collect();
        g.input(&Tensor::new(&[data.len(), d], flat).unwrap())
    }

    #[test]
    fn triplet_examples() {
        let mut g = Graph::new();
        let a = rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let p = rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let n = rows(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = triplet_distance(&mut g, a, p, n).unwrap();
        assert_eq!(g.value(d), &[0.0, -4.0]);
        let l = triplet_loss(&mut g, d, DEFAULT_MARGIN);
        assert_eq!(g.value(l), &[0.6, 0.0]);
    }

    #[test]
    fn hinge_boundary_has_zero_gradient() {
        let mut g = Graph::new();
        let d = g.variable(&Tensor::new(&[2], vec![-0.6, -0.5]).unwrap());
        let l = triplet_loss(&mut g, d, 0.3);
        let s = g.sum(l);
        assert_eq!(g.value(l)[0], 0.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(d).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn non_unit_inputs_rejected() {
        let mut g = Graph::new();
        let a = rows(&mut g, &[&[1.0, 0.1]]);
        let p = rows(&mut g, &[&[1.0, 0.0]]);
        assert!(triplet_distance(&mut g, a, p, p).is_err());
    }

    #[test]
    fn ce_examples() {
        let mut g = Graph::new();
        let z = g.input(&Tensor::zeros(&[1, 4]));
        let l = softmax_ce_loss(&mut g, z, &[2]).unwrap();
        assert!((g.item(l) - 4f64.ln()).abs() < 1e-15);
        assert!(softmax_ce_loss(&mut g, z, &[4]).is_err());

        let z = g.input(&Tensor::zeros(&[1, 105]));
        let l = sigmoid_ce_loss(&mut g, z, &[1.0; 105]).unwrap();
        assert!((g.item(l) - 105.0 * 2f64.ln()).abs() < 1e-9);
        let z = g.input(&Tensor::new(&[1, 1], vec![(0.9f64 / 0.1).ln()]).unwrap());
        let l = sigmoid_ce_loss(&mut g, z, &[1.0]).unwrap();
        assert!((g.item(l) + 0.9f64.ln()).abs() < 1e-12);
        assert!(sigmoid_ce_loss(&mut g, z, &[0.5]).is_err());
    }

    #[test]
    fn batch_loss_needs_whole_triplets() {
        let mut g = Graph::new();
        let f = g.input(&Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        assert!(batch_triplet_loss(&mut g, f, 0.3).is_err());
    }
}
