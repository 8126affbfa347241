//! Self-contained oracle suites behind `reidlab check`.
//!
//! Each suite compares a library routine against an independent reference
//! (finite differences, direct formulas, brute-force ranking) and reports
//! one line per check.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::backbone::{build_backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::eval::cmc_single_split;
use crate::gate::{global_mask, local_mask, GateConfig, MaskStrategy, ReidModel};
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::heads::{batch_triplet_loss, sigmoid_ce_loss, triplet_distance, triplet_loss};
use crate::params::Module;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grads,
    Masks,
    Losses,
    Cmc,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grads, Suite::Masks, Suite::Losses, Suite::Cmc];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Grads => "grads",
            Suite::Masks => "masks",
            Suite::Losses => "losses",
            Suite::Cmc => "cmc",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config { key: "suite".into(), reason: format!("unknown suite `{s}`") })
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, self.suite.as_str(), c.name, c.detail)?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport { suite, checks: Vec::new() };
    match suite {
        Suite::Grads => grads(&mut report, seed)?,
        Suite::Masks => masks(&mut report, seed)?,
        Suite::Losses => losses(&mut report, seed)?,
        Suite::Cmc => cmc(&mut report, seed)?,
    }
    Ok(report)
}

/// The tiny extractor used by the gradient and mask suites: 32x16 input,
/// widths 2/2/4/4/8, r = 8, n = 4.
pub fn tiny_reid_model(strategy: MaskStrategy, seed: u64) -> Result<ReidModel> {
    let cfg = BackboneConfig { input_height: 32, input_width: 16, widths: [2, 2, 4, 4, 8], ..Default::default() };
    let bb = build_backbone(&cfg, seed)?.truncate(4)?;
    let gate = GateConfig { strategy, steps: 4, hidden: 8, mean_hidden: false };
    ReidModel::new(bb, gate, seed.wrapping_add(1))
}

fn grads(report: &mut SuiteReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[6, 3, 32, 16], |_| rng.gen::<f64>());
    for strategy in MaskStrategy::ALL {
        let mut model = tiny_reid_model(strategy, seed)?;
        let build = |g: &mut Graph, m: &ReidModel| {
            let x = g.input(&images);
            let f = m.forward(g, x, Mode::Train)?;
            batch_triplet_loss(g, f, 0.3)
        };
        let r = check_gradients(&mut model, build, &GradCheckOptions::default())?;
        let worst = r.worst().map(|w| w.name.clone()).unwrap_or_default();
        report.push(
            format!("end_to_end_{strategy}"),
            r.passed,
            format!(
                "{} coordinates, max rel err {:.2e} at {worst}, {:.1}% skipped at kinks",
                r.checked(),
                r.max_rel_err(),
                100.0 * r.skip_fraction
            ),
        );
    }
    Ok(())
}

fn mask_ok(m: &[f64]) -> bool {
    (m.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && m.iter().all(|&v| v >= 0.0)
}

fn masks(report: &mut SuiteReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for strategy in MaskStrategy::ALL {
        let mut bad = 0;
        let mut total = 0;
        for k in 0..100u64 {
            let model = tiny_reid_model(strategy, seed.wrapping_add(k * 7919))?;
            let image = Tensor::from_fn(&[3, 32, 16], |_| rng.gen::<f64>());
            let (_, trace) = model.extract_feature(&image, Mode::Train)?;
            total += trace.steps.len();
            bad += trace.steps.iter().filter(|m| !mask_ok(m)).count();
        }
        report.push(format!("rollouts_{strategy}"), bad == 0, format!("{bad} of {total} masks off the simplex"));
    }

    // Zero attention weights: soft masks collapse to the global mask.
    let mut soft = tiny_reid_model(MaskStrategy::Soft, seed)?;
    for name in ["lstm.attn.weight", "lstm.attn.bias"] {
        let e = soft.find_mut(name).ok_or_else(|| Error::Invalid(format!("missing {name}")))?;
        e.tensor.data_mut().fill(0.0);
    }
    let global = tiny_reid_model(MaskStrategy::Global, seed)?;
    let image = Tensor::from_fn(&[3, 32, 16], |_| rng.gen::<f64>());
    let (hs, ts) = soft.extract_feature(&image, Mode::Train)?;
    let (hg, _) = global.extract_feature(&image, Mode::Train)?;
    let uniform = global_mask(ts.height, ts.width)?;
    let same_mask = ts.steps.iter().all(|m| m.as_slice() == uniform.data());
    report.push("soft_zero_is_global", same_mask && hs == hg, format!("masks exact: {same_mask}, H exact: {}", hs == hg));

    let mut partition = true;
    for (h, n, w) in [(8, 8, 4), (16, 8, 4), (8, 4, 2), (12, 3, 5), (4, 4, 1)] {
        let mut cover = vec![0usize; h];
        for t in 0..n {
            let m = local_mask(t, n, h, w)?;
            for i in 0..h {
                if m.data()[i * w..(i + 1) * w].iter().any(|&v| v > 0.0) {
                    cover[i] += 1;
                }
            }
        }
        partition &= cover.iter().all(|&c| c == 1);
    }
    report.push("local_partition", partition, "bands disjoint and covering for h divisible by n");
    Ok(())
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn losses(report: &mut SuiteReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_d, mut max_l) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = rng.gen_range(2..=16);
        let margin = rng.gen_range(0.0..1.0);
        let (a, p, n) = (random_unit(&mut rng, d), random_unit(&mut rng, d), random_unit(&mut rng, d));
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        let want_d = 2.0 * sq(&a, &p) - sq(&a, &n) - sq(&p, &n);
        let want_l = (want_d + 2.0 * margin).max(0.0);
        let mut g = Graph::new();
        let av = g.constant(&[1, d], a)?;
        let pv = g.constant(&[1, d], p)?;
        let nv = g.constant(&[1, d], n)?;
        let dv = triplet_distance(&mut g, av, pv, nv)?;
        let lv = triplet_loss(&mut g, dv, margin);
        max_d = max_d.max((g.item(dv) - want_d).abs());
        max_l = max_l.max((g.item(lv) - want_l).abs());
    }
    report.push("triplet_distance", max_d <= 1e-12, format!("max abs err {max_d:.2e} over 1000 triplets"));
    report.push("triplet_loss", max_l <= 1e-12, format!("max abs err {max_l:.2e} over 1000 triplets"));

    let mut g = Graph::new();
    let z = g.constant(&[1], vec![0.0])?;
    let l = triplet_loss(&mut g, z, 0.3);
    report.push("hinge_at_zero", g.item(l) == 0.6, format!("L(0, 0.3) = {}", g.item(l)));

    let k = 16;
    let mut g = Graph::new();
    let logits = g.constant(&[2, k], vec![0.0; 2 * k])?;
    let targets: Vec<f64> = (0..2 * k).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let ce = sigmoid_ce_loss(&mut g, logits, &targets)?;
    let want = k as f64 * std::f64::consts::LN_2;
    let err = (g.item(ce) - want).abs();
    report.push("sigmoid_ce_zero_logits", err <= 1e-9, format!("{} vs K ln 2 = {want}", g.item(ce)));
    Ok(())
}

/// Ranks by sorting the whole gallery on (distance, id): the documented
/// tie-break sends equal distances to the lower gallery id first.
pub fn brute_force_cmc(queries: &[Vec<f64>], qids: &[usize], gallery: &[Vec<f64>], gids: &[usize]) -> Vec<f64> {
    let mut hits = vec![0usize; gallery.len()];
    for (q, &qid) in queries.iter().zip(qids) {
        let mut order: Vec<(f64, usize)> = gallery
            .iter()
            .zip(gids)
            .map(|(g, &id)| (q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum(), id))
            .collect();
        order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let pos = order.iter().position(|&(_, id)| id == qid).expect("query id in gallery");
        for h in &mut hits[pos..] {
            *h += 1;
        }
    }
    hits.into_iter().map(|h| h as f64 / queries.len() as f64).collect()
}

/// A random single-shot instance. Features are drawn from a handful of
/// directions so distance ties are common.
pub fn random_cmc_instance(rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>) {
    let ids = rng.gen_range(1..=50);
    let directions = rng.gen_range(2..=12);
    let feature = |rng: &mut _| {
        let k: usize = Rng::gen_range(rng, 0..directions);
        let a = k as f64 * std::f64::consts::TAU / directions as f64;
        vec![a.cos(), a.sin()]
    };
    let mut gids: Vec<usize> = (0..ids).map(|i| i * 3 + 1).collect();
    // Shuffle gallery order so ties are not broken by position by accident.
    for i in (1..gids.len()).rev() {
        gids.swap(i, rng.gen_range(0..=i));
    }
    let gallery = (0..ids).map(|_| feature(rng)).collect();
    let nq = rng.gen_range(1..=2 * ids);
    let qids = (0..nq).map(|_| gids[rng.gen_range(0..ids)]).collect();
    let queries = (0..nq).map(|_| feature(rng)).collect();
    (queries, qids, gallery, gids)
}

fn cmc(report: &mut SuiteReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (q, qi, g, gi) = random_cmc_instance(&mut rng);
        if cmc_single_split(&q, &qi, &g, &gi)? != brute_force_cmc(&q, &qi, &g, &gi) {
            mismatches += 1;
        }
    }
    report.push("brute_force_equivalence", mismatches == 0, format!("{mismatches} of 200 instances differ"));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_suites_pass() {
        for suite in [Suite::Masks, Suite::Losses, Suite::Cmc] {
            let r = run_suite(suite, 3).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn brute_force_honours_tie_break() {
        let f = vec![1.0, 0.0];
        let cmc = brute_force_cmc(std::slice::from_ref(&f), &[5], &[f.clone(), f.clone()], &[9, 5]);
        assert_eq!(cmc, [1.0, 1.0]);
    }
}
