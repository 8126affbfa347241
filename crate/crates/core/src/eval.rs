//! Single-shot CMC evaluation over random identity splits.
//!
//! Per split a set of test identities is drawn; the gallery holds one random
//! image per identity from the gallery view and every query-view image of
//! those identities is ranked against it by squared Euclidean distance.
//! Equal distances are ordered by gallery identity, ascending.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gate::FeatureExtractor;
use crate::heads::UNIT_TOL;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub splits: usize,
    pub test_ids: usize,
    pub seed: u64,
    pub ranks: Vec<usize>,
    pub query_view: usize,
    pub gallery_view: usize,
    /// Images per feature-extraction batch.
    pub batch: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            splits: 20,
            test_ids: 100,
            seed: 0,
            ranks: vec![1, 5, 10, 20],
            query_view: 0,
            gallery_view: 1,
            batch: 64,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("eval.{key}"), reason: reason.into() });
        if self.splits == 0 {
            return bad("splits", "must be >= 1");
        }
        if self.test_ids == 0 {
            return bad("test_ids", "must be >= 1");
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return bad("ranks", "must be a non-empty list of positive ranks");
        }
        if self.query_view == self.gallery_view {
            return bad("gallery_view", "query and gallery views must differ");
        }
        if self.batch == 0 {
            return bad("batch", "must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcResult {
    pub ranks: Vec<usize>,
    /// `per_split[s][j]` is the accuracy at `ranks[j]` on split `s`.
    pub per_split: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Identities skipped because they lack images in one of the views.
    pub excluded: usize,
}

impl CmcResult {
    pub fn at(&self, rank: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == rank).map(|j| self.mean[j])
    }

    pub fn rank1(&self) -> f64 {
        self.at(1).unwrap_or(f64::NAN)
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Invalid(format!("feature is not unit norm (|x| = {n})")));
    }
    Ok(())
}

/// Squared Euclidean distance between unit vectors.
pub fn pairwise_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("pairwise_distance", format!("{} vs {}", a.len(), b.len())));
    }
    check_unit(a)?;
    check_unit(b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// 1-based rank of each query's identity in its ascending distance order.
pub fn query_ranks(queries: &[Vec<f64>], query_ids: &[usize], gallery: &[Vec<f64>], gallery_ids: &[usize]) -> Result<Vec<usize>> {
    if queries.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(Error::Invalid("features and identities differ in length".into()));
    }
    let mut sorted = gallery_ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("single-shot gallery must hold one image per identity".into()));
    }
    let mut ranks = Vec::with_capacity(queries.len());
    for (q, &qid) in queries.iter().zip(query_ids) {
        let truth = gallery_ids
            .iter()
            .position(|&g| g == qid)
            .ok_or_else(|| Error::Invalid(format!("query identity {qid} is not in the gallery")))?;
        let dists = gallery.iter().map(|g| pairwise_distance(q, g)).collect::<Result<Vec<_>>>()?;
        let (dt, it) = (dists[truth], gallery_ids[truth]);
        let ahead = dists
            .iter()
            .zip(gallery_ids)
            .filter(|&(&d, &id)| d < dt || (d == dt && id < it))
            .count();
        ranks.push(ahead + 1);
    }
    Ok(ranks)
}

/// `CMC(k)` for `k = 1..=gallery.len()`.
pub fn cmc_single_split(queries: &[Vec<f64>], query_ids: &[usize], gallery: &[Vec<f64>], gallery_ids: &[usize]) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Invalid("no queries".into()));
    }
    let ranks = query_ranks(queries, query_ids, gallery, gallery_ids)?;
    let mut hist = vec![0usize; gallery.len() + 1];
    for r in ranks {
        hist[r] += 1;
    }
    let mut acc = 0;
    Ok(hist[1..]
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / queries.len() as f64
        })
        .collect())
}

/// Descriptors of every dataset image, in dataset order.
pub fn extract_all<E: FeatureExtractor + ?Sized>(model: &E, dataset: &Dataset, batch: usize) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(batch.max(1)) {
        out.extend(model.extract(&dataset.batch(chunk))?);
    }
    Ok(out)
}

pub fn evaluate<E: FeatureExtractor + ?Sized>(model: &E, dataset: &Dataset, protocol: &EvalProtocol) -> Result<CmcResult> {
    protocol.validate()?;
    let features = extract_all(model, dataset, protocol.batch)?;
    evaluate_features(&features, dataset, protocol)
}

/// As [`evaluate`], from precomputed descriptors.
pub fn evaluate_features(features: &[Vec<f64>], dataset: &Dataset, protocol: &EvalProtocol) -> Result<CmcResult> {
    protocol.validate()?;
    let mut eligible = Vec::new();
    let mut excluded = 0;
    for (id, imgs) in dataset.by_person() {
        let q: Vec<usize> = imgs.iter().copied().filter(|&i| dataset.images[i].camera == protocol.query_view).collect();
        let g: Vec<usize> = imgs.iter().copied().filter(|&i| dataset.images[i].camera == protocol.gallery_view).collect();
        if q.is_empty() || g.is_empty() {
            excluded += 1;
        } else {
            eligible.push((id, q, g));
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} identities lack images in both views and were excluded");
    }
    if eligible.len() < protocol.test_ids {
        return Err(Error::Invalid(format!(
            "protocol needs {} test identities, dataset has {} usable",
            protocol.test_ids,
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut per_split = Vec::with_capacity(protocol.splits);
    for _ in 0..protocol.splits {
        let mut chosen = eligible.iter().choose_multiple(&mut rng, protocol.test_ids);
        chosen.sort_by_key(|e| e.0);
        let (mut qf, mut qid, mut gf, mut gid) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (id, q, g) in chosen {
            let pick = *g.choose(&mut rng).expect("non-empty gallery view");
            gf.push(features[pick].clone());
            gid.push(*id);
            for &i in q {
                qf.push(features[i].clone());
                qid.push(*id);
            }
        }
        let cmc = cmc_single_split(&qf, &qid, &gf, &gid)?;
        per_split.push(protocol.ranks.iter().map(|&k| cmc[k.min(cmc.len()) - 1]).collect::<Vec<f64>>());
    }
    let s = per_split.len() as f64;
    let mean: Vec<f64> = (0..protocol.ranks.len())
        .map(|j| per_split.iter().map(|r| r[j]).sum::<f64>() / s)
        .collect();
    let std = (0..protocol.ranks.len())
        .map(|j| (per_split.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / s).sqrt())
        .collect();
    Ok(CmcResult { ranks: protocol.ranks.clone(), per_split, mean, std, excluded })
}

/// Raw-pixel descriptors, for baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawPixels {
    /// The whole image, flattened.
    Full,
    /// Per-channel mean intensity.
    ChannelMean,
}

impl FeatureExtractor for RawPixels {
    fn feature_dim(&self) -> usize {
        match self {
            RawPixels::Full => 0,
            RawPixels::ChannelMean => 3,
        }
    }

    fn extract(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("raw_pixels", format!("expected [n, 3, h, w], got {shape:?}")));
        }
        let per = shape[1] * shape[2] * shape[3];
        let hw = shape[2] * shape[3];
        images
            .data()
            .chunks(per)
            .map(|img| {
                let v: Vec<f64> = match self {
                    RawPixels::Full => img.to_vec(),
                    RawPixels::ChannelMean => img.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect(),
                };
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n <= 1e-12 {
                    return Err(Error::DegenerateFeature { norm: n, eps: 1e-12 });
                }
                Ok(v.into_iter().map(|x| x / n).collect())
            })
            .collect()
    }
}

/// Writes `rank,mean,std` rows to `csv_path` and, if given, whitespace
/// separated `rank accuracy` pairs to `plot_path`.
pub fn emit_report(result: &CmcResult, csv_path: impl AsRef<Path>, plot_path: Option<&Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    fs::write(csv_path, report_csv(result)).map_err(|e| Error::io(csv_path, e))?;
    if let Some(p) = plot_path {
        let mut s = String::from("# rank accuracy\n");
        for (r, m) in result.ranks.iter().zip(&result.mean) {
            writeln!(s, "{r} {m}").expect("string write");
        }
        fs::write(p, s).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn report_csv(result: &CmcResult) -> String {
    let mut s = String::from("rank,mean,std\n");
    for ((r, m), sd) in result.ranks.iter().zip(&result.mean).zip(&result.std) {
        writeln!(s, "{r},{m},{sd}").expect("string write");
    }
    s
}

/// Parses [`report_csv`] output and checks the rows are monotone in rank.
pub fn parse_report(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("rank,mean,std") {
        return Err(Error::Invalid("CMC report lacks the rank,mean,std header".into()));
    }
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let bad = || Error::Invalid(format!("malformed CMC row `{line}`"));
        let mut it = line.split(',');
        let (Some(r), Some(m), Some(s), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        let row = (r.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?);
        if let Some(prev) = rows.last() {
            if row.0 <= prev.0 || row.1 < prev.1 {
                return Err(Error::Invalid(format!("CMC rows not monotone at rank {}", row.0)));
            }
        }
        if !(0.0..=1.0).contains(&row.1) {
            return Err(Error::Invalid(format!("CMC value {} outside [0, 1]", row.1)));
        }
        rows.push(row);
    }
    Ok(rows)
}
