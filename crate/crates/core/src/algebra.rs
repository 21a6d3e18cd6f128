//! Set algebra over masks: distances, consensus counts, thresholds and
//! histograms. Sets are the unpruned weights of each mask.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LayerMask, Mask};

fn jaccard_counts(inter: usize, union: usize) -> f64 {
    if union == 0 {
        0.0
    } else {
        (union - inter) as f64 / union as f64
    }
}

/// `1 - |A ∩ B| / |A ∪ B|` over all layers; `0` when both sets are empty.
pub fn jaccard_distance(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_congruent(b)?;
    let (mut inter, mut union) = (0, 0);
    for (x, y) in a.layers().iter().zip(b.layers()) {
        inter += x.count_combined(y, |p, q| p & q);
        union += x.count_combined(y, |p, q| p | q);
    }
    Ok(jaccard_counts(inter, union))
}

/// Jaccard distance per layer, in mask order.
pub fn jaccard_per_layer(a: &Mask, b: &Mask) -> Result<Vec<f64>> {
    a.check_congruent(b)?;
    Ok(a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| jaccard_counts(x.count_combined(y, |p, q| p & q), x.count_combined(y, |p, q| p | q)))
        .collect())
}

/// Number of positions where the masks differ.
pub fn hamming_distance(a: &Mask, b: &Mask) -> Result<usize> {
    a.check_congruent(b)?;
    Ok(a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| x.count_combined(y, |p, q| p ^ q))
        .sum())
}

/// Per-weight count of masks that leave the weight unpruned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusMap {
    pub n: usize,
    pub layers: Vec<ConsensusLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub counts: Vec<u32>,
}

pub fn consensus(masks: &[Mask]) -> Result<ConsensusMap> {
    let Some(first) = masks.first() else {
        return Err(Error::InvalidArgument("consensus of an empty mask list".into()));
    };
    for m in &masks[1..] {
        first.check_congruent(m)?;
    }
    let layers = first
        .layers()
        .iter()
        .enumerate()
        .map(|(li, l)| {
            let mut counts = vec![0u32; l.len()];
            for m in masks {
                for i in m.layers()[li].iter_ones() {
                    counts[i] += 1;
                }
            }
            ConsensusLayer {
                name: l.name().to_string(),
                shape: l.shape().to_vec(),
                counts,
            }
        })
        .collect();
    Ok(ConsensusMap {
        n: masks.len(),
        layers,
    })
}

/// Bit = 1 iff the count reaches `tau`. `tau = n` is the intersection,
/// `tau = 1` the union.
pub fn threshold_mask(c: &ConsensusMap, tau: usize) -> Result<Mask> {
    if tau < 1 || tau > c.n {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside 1..={}", c.n)));
    }
    let layers = c
        .layers
        .iter()
        .map(|l| {
            let bits: Vec<bool> = l.counts.iter().map(|&k| k as usize >= tau).collect();
            LayerMask::from_bools(l.name.clone(), l.shape.clone(), &bits)
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(layers)
}

/// Bins `0..=n`: number of weights unpruned in exactly `b` masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusHistogram {
    pub n: usize,
    pub per_layer: Vec<(String, Vec<usize>)>,
    pub total: Vec<usize>,
}

pub fn consensus_histogram(c: &ConsensusMap) -> ConsensusHistogram {
    let mut total = vec![0usize; c.n + 1];
    let per_layer = c
        .layers
        .iter()
        .map(|l| {
            let mut bins = vec![0usize; c.n + 1];
            for &k in &l.counts {
                bins[k as usize] += 1;
            }
            total.iter_mut().zip(&bins).for_each(|(t, b)| *t += b);
            (l.name.clone(), bins)
        })
        .collect();
    ConsensusHistogram {
        n: c.n,
        per_layer,
        total,
    }
}

impl ConsensusHistogram {
    /// One row per layer plus a `total` row; columns `bin_0..bin_n`.
    pub fn to_csv(&self, provenance: &str) -> String {
        let mut s = String::new();
        let _ = write!(s, "# weights unpruned in exactly b of {} masks; provenance: {provenance}\nlayer", self.n);
        for b in 0..=self.n {
            let _ = write!(s, ",bin_{b}");
        }
        s.push('\n');
        let rows = self.per_layer.iter().map(|(n, b)| (n.as_str(), b)).chain([("total", &self.total)]);
        for (name, bins) in rows {
            s.push_str(name);
            for b in bins {
                let _ = write!(s, ",{b}");
            }
            s.push('\n');
        }
        s
    }
}

/// Labelled square matrix, e.g. pairwise distances between masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl LabeledMatrix {
    pub fn to_csv(&self, corner: &str) -> String {
        let mut s = String::new();
        s.push_str(corner);
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            s.push_str(l);
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Pairwise total Jaccard distances between labelled masks.
pub fn jaccard_matrix(labels: &[String], masks: &[Mask]) -> Result<LabeledMatrix> {
    let n = masks.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..i {
            let d = jaccard_distance(&masks[i], &masks[j])?;
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    Ok(LabeledMatrix {
        labels: labels.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(bits: &[u8]) -> Mask {
        let b: Vec<bool> = bits.iter().map(|&x| x == 1).collect();
        Mask::new(vec![LayerMask::from_bools("w", vec![b.len()], &b).unwrap()]).unwrap()
    }

    #[test]
    fn jaccard_hand_cases() {
        assert_eq!(jaccard_distance(&m(&[1, 1, 0, 0]), &m(&[1, 1, 0, 0])).unwrap(), 0.0);
        assert_eq!(jaccard_distance(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(jaccard_distance(&m(&[1, 1, 0, 0]), &m(&[1, 0, 1, 0])).unwrap(), 2.0 / 3.0);
        assert_eq!(jaccard_distance(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 0.0);
        assert!(jaccard_distance(&m(&[0, 0]), &m(&[0, 0, 0])).is_err());
    }

    #[test]
    fn hamming_hand_cases() {
        assert_eq!(hamming_distance(&m(&[1, 1, 0, 0]), &m(&[1, 1, 0, 0])).unwrap(), 0);
        assert_eq!(hamming_distance(&m(&[1, 1, 0, 0]), &m(&[1, 0, 1, 0])).unwrap(), 2);
        assert_eq!(hamming_distance(&m(&[1, 0, 1, 1, 0]), &m(&[0, 1, 0, 0, 1])).unwrap(), 5);
    }

    #[test]
    fn consensus_threshold_histogram_hand_case() {
        let c = consensus(&[m(&[1, 1, 0]), m(&[1, 0, 0]), m(&[1, 0, 1])]).unwrap();
        assert_eq!(c.layers[0].counts, vec![3, 1, 1]);
        assert_eq!(threshold_mask(&c, 3).unwrap(), m(&[1, 0, 0]));
        assert_eq!(threshold_mask(&c, 1).unwrap(), m(&[1, 1, 1]));
        assert!(threshold_mask(&c, 0).is_err());
        assert!(threshold_mask(&c, 4).is_err());
        assert_eq!(consensus_histogram(&c).total, vec![0, 2, 0, 1]);
        assert!(consensus(&[]).is_err());
    }

    #[test]
    fn identical_masks_only_hit_extreme_bins() {
        let a = m(&[1, 0, 1, 1, 0, 0, 1]);
        let c = consensus(&vec![a.clone(); 4]).unwrap();
        assert!(c.layers[0].counts.iter().all(|&k| k == 0 || k == 4));
        assert_eq!(threshold_mask(&c, 4).unwrap(), a);
        let h = consensus_histogram(&consensus(&[a]).unwrap());
        assert_eq!(h.total, vec![3, 4]);
    }

    #[test]
    fn histogram_csv_layout() {
        let c = consensus(&[m(&[1, 1, 0]), m(&[1, 0, 0])]).unwrap();
        let csv = consensus_histogram(&c).to_csv("x");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "layer,bin_0,bin_1,bin_2");
        assert_eq!(lines[2], "w,1,1,1");
        assert_eq!(lines[3], "total,1,1,1");
    }

    fn arb_bits(n: usize) -> impl Strategy<Value = Mask> {
        prop::collection::vec(any::<bool>(), n).prop_map(|b| {
            Mask::new(vec![
                LayerMask::from_bools("a", vec![b.len() / 2], &b[..b.len() / 2]).unwrap(),
                LayerMask::from_bools("b", vec![b.len() - b.len() / 2], &b[b.len() / 2..]).unwrap(),
            ])
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn hamming_is_union_minus_intersection(a in arb_bits(150), b in arb_bits(150)) {
            let union = a.or(&b).unwrap().count_ones();
            let inter = a.and(&b).unwrap().count_ones();
            prop_assert_eq!(hamming_distance(&a, &b).unwrap(), union - inter);
        }

        #[test]
        fn threshold_sparsity_is_monotone(ms in prop::collection::vec(arb_bits(90), 1..6)) {
            let c = consensus(&ms).unwrap();
            let mut prev = 0;
            for tau in 1..=c.n {
                let zeros = threshold_mask(&c, tau).unwrap().count_zeros();
                prop_assert!(zeros >= prev);
                prev = zeros;
            }
            let inter = ms.iter().skip(1).fold(ms[0].clone(), |acc, m| acc.and(m).unwrap());
            prop_assert_eq!(threshold_mask(&c, c.n).unwrap(), inter);
            let max_constituent = ms.iter().map(|m| m.count_zeros()).max().unwrap();
            prop_assert!(prev >= max_constituent);
            let h = consensus_histogram(&c);
            prop_assert_eq!(h.total.iter().sum::<usize>(), 90);
        }
    }
}
