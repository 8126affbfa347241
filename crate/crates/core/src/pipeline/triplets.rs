//! Uniform triplet sampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Image indices grouped by identity, ready for sampling.
#[derive(Clone, Debug)]
pub struct TripletPool {
    groups: Vec<Vec<usize>>,
    /// `(group, position)` of every image that can serve as an anchor.
    anchors: Vec<(usize, usize)>,
    total: usize,
}

impl TripletPool {
    /// `groups[i]` lists the images of identity `i`.
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let groups: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
        let anchors: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.len() >= 2)
            .flat_map(|(gi, g)| (0..g.len()).map(move |p| (gi, p)))
            .collect();
        if groups.len() < 2 {
            return Err(Error::Invalid(format!(
                "triplets need at least 2 identities, the data has {}",
                groups.len()
            )));
        }
        if anchors.is_empty() {
            return Err(Error::Invalid(format!(
                "no identity has 2 or more images ({} identities, all singletons)",
                groups.len()
            )));
        }
        let total = groups.iter().map(Vec::len).sum();
        Ok(Self { groups, anchors, total })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// `(anchor, positive, negative)`: anchor uniform over images with a
    /// partner, positive uniform over the anchor's other images, negative
    /// uniform over images of other identities.
    pub fn sample(&self, rng: &mut impl Rng) -> (usize, usize, usize) {
        let &(gi, pos) = self.anchors.choose(rng).expect("non-empty");
        let group = &self.groups[gi];
        let mut p = rng.gen_range(0..group.len() - 1);
        if p >= pos {
            p += 1;
        }
        let mut k = rng.gen_range(0..self.total - group.len());
        let mut neg = None;
        for (gj, g) in self.groups.iter().enumerate() {
            if gj == gi {
                continue;
            }
            if k < g.len() {
                neg = Some(g[k]);
                break;
            }
            k -= g.len();
        }
        (group[pos], group[p], neg.expect("index within other groups"))
    }
}
