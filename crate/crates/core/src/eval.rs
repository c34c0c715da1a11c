//! Held-out preference accuracy, flip detection quality of the minority
//! score, and the binned flipped-ratio report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::policy::PairModel;

/// Fraction of positive logits; an exact zero counts one half.
pub fn accuracy_from_logits(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits: f64 = logits
        .iter()
        .map(|&l| {
            if l > 0.0 {
                1.0
            } else if l == 0.0 {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(hits / logits.len() as f64)
}

/// Agreement of the implicit reward with the held-out labels.
pub fn pairwise_accuracy<B: PairModel>(
    model: &B,
    theta: &Mlp,
    reference: &Mlp,
    heldout: &Dataset,
    seed: u64,
) -> Result<f64> {
    let logits = heldout
        .pairs
        .iter()
        .map(|p| model.eval_logit(theta, reference, p, seed))
        .collect::<Result<Vec<_>>>()?;
    accuracy_from_logits(&logits)
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// ROC AUC of `u` as a detector of flipped labels (Mann-Whitney form).
pub fn flip_detection_auc(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateClasses);
    }
    let u: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let ranks = average_ranks(&u);
    let rank_sum: f64 = ranks
        .iter()
        .zip(scores)
        .filter(|(_, s)| s.1)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub flipped_count: usize,
    /// `None` for an empty bin.
    pub flipped_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bins: Vec<Bin>,
    /// Rank correlation between bin index and flipped ratio over the
    /// nonempty bins.
    pub spearman: Option<f64>,
}

impl BinReport {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin\tlo\thi\tcount\tflipped\tflipped_ratio")?;
        for (i, b) in self.bins.iter().enumerate() {
            let ratio = b
                .flipped_ratio
                .map_or_else(|| "nan".to_string(), |r| r.to_string());
            writeln!(
                w,
                "{i}\t{}\t{}\t{}\t{}\t{ratio}",
                b.lo, b.hi, b.count, b.flipped_count
            )?;
        }
        let rho = self
            .spearman
            .map_or_else(|| "nan".to_string(), |r| r.to_string());
        writeln!(w, "# spearman\t{rho}")?;
        Ok(())
    }
}

/// Equal-width bins over `[min u, max u]`; the maximum lands in the top bin.
pub fn metric_bin_report(scores: &[(f64, bool)], n_bins: usize) -> Result<BinReport> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_bins < 2 {
        return Err(Error::InvalidConfig { field: "bins" });
    }
    let lo = scores.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig { field: "u" });
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![(0usize, 0usize); n_bins];
    for &(u, flipped) in scores {
        let k = if width > 0.0 {
            (((u - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        counts[k].0 += 1;
        counts[k].1 += flipped as usize;
    }
    let bins: Vec<Bin> = counts
        .iter()
        .enumerate()
        .map(|(i, &(count, flipped_count))| Bin {
            lo: lo + width * i as f64,
            hi: if i + 1 == n_bins {
                hi
            } else {
                lo + width * (i + 1) as f64
            },
            count,
            flipped_count,
            flipped_ratio: (count > 0).then(|| flipped_count as f64 / count as f64),
        })
        .collect();
    let (idx, ratios): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.flipped_ratio.map(|r| (i as f64, r)))
        .unzip();
    Ok(BinReport {
        spearman: spearman(&idx, &ratios),
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ScorerModel;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_from_logits(&[1.0, -1.0, 2.0, 0.0]).unwrap(), 0.625);
        assert!(matches!(
            accuracy_from_logits(&[]),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn reference_identity_scores_one_half() {
        use crate::datagen::{sample_dataset, LabelMode, RewardOracle};
        let o = RewardOracle::new(0, 4, 8).unwrap();
        let ds = sample_dataset(&o, 100, (4, 8), LabelMode::Deterministic, 0).unwrap();
        let net = ScorerModel.init_network(4, 8, &[8], 0);
        assert_eq!(
            pairwise_accuracy(&ScorerModel, &net, &net, &ds, 0).unwrap(),
            0.5
        );
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            flip_detection_auc(&[(0.3, true), (0.3, false), (0.3, true)]).unwrap(),
            0.5
        );
        assert_eq!(
            flip_detection_auc(&[(0.1, false), (0.5, true), (0.2, false), (0.9, true)]).unwrap(),
            1.0
        );
        let v = [(0.1, false), (0.2, true), (0.3, false), (0.4, true)];
        assert_eq!(flip_detection_auc(&v).unwrap(), 0.75);
        assert!(matches!(
            flip_detection_auc(&[(0.1, true)]),
            Err(Error::DegenerateClasses)
        ));
    }

    /// Pairwise count over all (flipped, clean) combinations.
    fn auc_brute(scores: &[(f64, bool)]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for a in scores.iter().filter(|s| s.1) {
            for b in scores.iter().filter(|s| !s.1) {
                den += 1.0;
                num += if a.0 > b.0 {
                    1.0
                } else if a.0 == b.0 {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn two_bin_example() {
        let r =
            metric_bin_report(&[(0.0, false), (0.0, false), (1.0, true), (1.0, true)], 2).unwrap();
        let ratios: Vec<f64> = r.bins.iter().map(|b| b.flipped_ratio.unwrap()).collect();
        assert_eq!(ratios, vec![0.0, 1.0]);
    }

    #[test]
    fn separated_flips_fill_the_top_bin() {
        let mut s: Vec<(f64, bool)> = (0..90).map(|i| (i as f64 / 100.0, false)).collect();
        s.extend((0..10).map(|i| (5.0 + i as f64 * 0.01, true)));
        let r = metric_bin_report(&s, 10).unwrap();
        assert_eq!(r.bins[9].flipped_ratio, Some(1.0));
        for b in &r.bins[..9] {
            assert!(b.flipped_ratio.is_none_or(|x| x == 0.0));
        }
    }

    #[test]
    fn null_model_bins_sit_at_base_rate() {
        let mut rng = crate::rng::rng_for(1, &[]);
        let n = 10_000;
        let flips = crate::datagen::flip_indices(n, 0.2, 5).unwrap();
        let mut flagged = vec![false; n];
        for i in flips {
            flagged[i] = true;
        }
        let s: Vec<(f64, bool)> = flagged.iter().map(|&f| (rng.random::<f64>(), f)).collect();
        let r = metric_bin_report(&s, 10).unwrap();
        assert_eq!(r.total(), n);
        for b in &r.bins {
            let sigma = (0.2f64 * 0.8 / b.count as f64).sqrt();
            assert!(
                (b.flipped_ratio.unwrap() - 0.2).abs() < 3.0 * sigma,
                "{b:?}"
            );
        }
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force_and_monotone_transforms(
            s in prop::collection::vec((0u8..20, any::<bool>()), 2..60)
        ) {
            let s: Vec<(f64, bool)> = s.into_iter().map(|(u, f)| (u as f64 / 7.0, f)).collect();
            prop_assume!(s.iter().any(|x| x.1) && s.iter().any(|x| !x.1));
            let a = flip_detection_auc(&s).unwrap();
            prop_assert!((a - auc_brute(&s)).abs() < 1e-12);
            let t: Vec<(f64, bool)> = s.iter().map(|&(u, f)| (u.exp() * 3.0 - 1.0, f)).collect();
            prop_assert!((flip_detection_auc(&t).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn bins_partition_input(s in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 1..200), b in 2usize..15) {
            let r = metric_bin_report(&s, b).unwrap();
            prop_assert_eq!(r.total(), s.len());
            prop_assert_eq!(r.bins.iter().map(|x| x.flipped_count).sum::<usize>(), s.iter().filter(|x| x.1).count());
            for bin in &r.bins {
                if let Some(q) = bin.flipped_ratio {
                    prop_assert!((0.0..=1.0).contains(&q));
                }
            }
        }
    }
}
