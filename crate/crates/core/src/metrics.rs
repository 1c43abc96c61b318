//! Spoof scores and biometric error rates. A sample is classified as spoof
//! when `score >= threshold`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AttackType, Label};
use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub attack_type: AttackType,
}

impl ScoredSample {
    pub fn new(score: f64, attack_type: AttackType) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score {score}")));
        }
        Ok(Self {
            score,
            label: attack_type.label(),
            attack_type,
        })
    }

    pub fn live(score: f64) -> Self {
        Self::new(score, AttackType::None).expect("finite score")
    }

    pub fn spoof(score: f64, attack_type: AttackType) -> Self {
        assert_ne!(attack_type, AttackType::None);
        Self::new(score, attack_type).expect("finite score")
    }
}

/// Mean of a single-sample score map.
pub fn spoof_score<T: Element>(map: &Tensor<T>) -> Result<f64> {
    if map.batch() != 1 || map.numel() == 0 {
        return Err(Error::shape(format!(
            "spoof score expects one map, got {:?}",
            map.shape()
        )));
    }
    Ok(map.data().iter().map(|v| v.to_f64()).sum::<f64>() / map.numel() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

fn check_classes(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let live = samples.iter().filter(|s| s.label == Label::Live).count();
    let spoof = samples.len() - live;
    if live == 0 || spoof == 0 {
        return Err(Error::Metrics(format!(
            "need both classes, got {live} live and {spoof} spoof samples"
        )));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| !s.score.is_finite() || s.attack_type.label() != s.label)
    {
        return Err(Error::Metrics(format!("invalid sample {s:?}")));
    }
    Ok((live, spoof))
}

/// Per-attack-type APCER, keyed by attack type.
pub fn apcer_per_type(samples: &[ScoredSample], threshold: f64) -> BTreeMap<AttackType, f64> {
    let mut counts: BTreeMap<AttackType, (usize, usize)> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.label == Label::Spoof) {
        let e = counts.entry(s.attack_type).or_default();
        e.1 += 1;
        if s.score < threshold {
            e.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(a, (miss, n))| (a, miss as f64 / n as f64))
        .collect()
}

pub fn error_rates(samples: &[ScoredSample], threshold: f64) -> Result<ErrorRates> {
    let (live, _) = check_classes(samples)?;
    let apcer = apcer_per_type(samples, threshold)
        .values()
        .fold(0.0f64, |a, &b| a.max(b));
    let rejected = samples
        .iter()
        .filter(|s| s.label == Label::Live && s.score >= threshold)
        .count();
    let bpcer = rejected as f64 / live as f64;
    Ok(ErrorRates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

/// (FAR, FRR): spoof accepted as live, live rejected as spoof.
pub fn far_frr(samples: &[ScoredSample], threshold: f64) -> Result<(f64, f64)> {
    let (live, spoof) = check_classes(samples)?;
    let accepted = samples
        .iter()
        .filter(|s| s.label == Label::Spoof && s.score < threshold)
        .count();
    let rejected = samples
        .iter()
        .filter(|s| s.label == Label::Live && s.score >= threshold)
        .count();
    Ok((
        accepted as f64 / spoof as f64,
        rejected as f64 / live as f64,
    ))
}

pub fn hter(samples: &[ScoredSample], threshold: f64) -> Result<f64> {
    let (far, frr) = far_frr(samples, threshold)?;
    Ok((far + frr) / 2.0)
}

/// Candidate thresholds: midpoints between adjacent distinct scores, plus
/// one point below the minimum and one above the maximum.
pub fn candidate_thresholds(samples: &[ScoredSample]) -> Vec<f64> {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut out = Vec::with_capacity(scores.len() + 1);
    out.push(scores[0] - 1.0);
    out.extend(scores.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(scores[scores.len() - 1] + 1.0);
    out
}

/// Threshold minimizing |FAR − FRR|; ties go to smaller ACER, then to the
/// smaller threshold.
pub fn eer_threshold(dev: &[ScoredSample]) -> Result<f64> {
    check_classes(dev)?;
    let mut best: Option<(f64, f64, f64)> = None;
    for t in candidate_thresholds(dev) {
        let (far, frr) = far_frr(dev, t)?;
        let gap = (far - frr).abs();
        let acer = error_rates(dev, t)?.acer;
        let better = match best {
            None => true,
            Some((g, a, bt)) => (gap, acer, t) < (g, a, bt),
        };
        if better {
            best = Some((gap, acer, t));
        }
    }
    Ok(best.expect("at least two candidates").2)
}

/// Probability that a random spoof scores above a random live sample,
/// ties counted as one half.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (live, spoof) = check_classes(samples)?;
    let mut sorted: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| (s.score, s.label == Label::Spoof))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the Mann-Whitney count, kept as an integer.
    let mut twice_wins: u128 = 0;
    let mut live_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut l, mut s) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                s += 1;
            } else {
                l += 1;
            }
            j += 1;
        }
        twice_wins += s * (2 * live_below + l);
        live_below += l;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * live as u128 * spoof as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub auc: f64,
    pub threshold: f64,
}

pub fn summarize(samples: &[ScoredSample], threshold: f64) -> Result<MetricsSummary> {
    let rates = error_rates(samples, threshold)?;
    Ok(MetricsSummary {
        apcer: rates.apcer,
        bpcer: rates.bpcer,
        acer: rates.acer,
        hter: hter(samples, threshold)?,
        auc: auc(samples)?,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_auc(samples: &[ScoredSample]) -> f64 {
        let mut twice = 0u64;
        let mut ns = 0u64;
        for s in samples.iter().filter(|s| s.label == Label::Spoof) {
            ns += 1;
            for l in samples.iter().filter(|s| s.label == Label::Live) {
                twice += match s.score.partial_cmp(&l.score).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        let nl = samples.iter().filter(|s| s.label == Label::Live).count() as u64;
        twice as f64 / (2 * nl * ns) as f64
    }

    #[test]
    fn score_map_means() {
        let ones = Tensor::<f64>::full([1, 1, 8, 8], 1.0);
        assert_eq!(spoof_score(&ones).unwrap(), 1.0);
        assert_eq!(
            spoof_score(&Tensor::<f64>::zeros([1, 1, 8, 8])).unwrap(),
            0.0
        );
        let checker = Tensor::<f64>::from_fn([1, 1, 8, 8], |[_, _, h, w]| ((h + w) % 2) as f64);
        assert_eq!(spoof_score(&checker).unwrap(), 0.5);
        assert!(spoof_score(&Tensor::<f64>::zeros([2, 1, 8, 8])).is_err());
    }

    #[test]
    fn table_row_consistency() {
        // 50 print attacks with one accepted, 10 live all accepted.
        let mut s: Vec<_> = (0..49)
            .map(|_| ScoredSample::spoof(0.9, AttackType::Print))
            .collect();
        s.push(ScoredSample::spoof(0.1, AttackType::Print));
        s.extend((0..10).map(|_| ScoredSample::live(0.2)));
        let r = error_rates(&s, 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.02, 0.0, 0.01));
    }

    #[test]
    fn apcer_takes_worst_type() {
        let mut s = Vec::new();
        for i in 0..10 {
            s.push(ScoredSample::spoof(
                if i < 1 { 0.0 } else { 1.0 },
                AttackType::Print,
            ));
            s.push(ScoredSample::spoof(
                if i < 3 { 0.0 } else { 1.0 },
                AttackType::Replay,
            ));
        }
        s.push(ScoredSample::live(0.0));
        let r = error_rates(&s, 0.5).unwrap();
        assert_eq!(r.apcer, 0.3);
        assert_eq!(r.bpcer, 0.0);
    }

    #[test]
    fn separated_scores_are_error_free() {
        let s = vec![
            ScoredSample::live(0.1),
            ScoredSample::live(0.2),
            ScoredSample::spoof(0.8, AttackType::Replay),
        ];
        let r = error_rates(&s, 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.0, 0.0, 0.0));
        let t = eer_threshold(&s).unwrap();
        assert_eq!(hter(&s, t).unwrap(), 0.0);
        assert_eq!(auc(&s).unwrap(), 1.0);
    }

    #[test]
    fn boundary_thresholds() {
        let s = vec![
            ScoredSample::live(0.3),
            ScoredSample::spoof(0.6, AttackType::Print),
        ];
        let r = error_rates(&s, f64::INFINITY).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (1.0, 0.0, 0.5));
        assert_eq!(hter(&s, -1.0).unwrap(), 0.5);
        // equality counts as spoof
        assert_eq!(error_rates(&s, 0.3).unwrap().bpcer, 1.0);
    }

    #[test]
    fn eer_on_overlapping_scores() {
        let s = vec![
            ScoredSample::live(0.1),
            ScoredSample::live(0.2),
            ScoredSample::spoof(0.15, AttackType::Print),
            ScoredSample::spoof(0.3, AttackType::Print),
        ];
        let t = eer_threshold(&s).unwrap();
        assert!(t > 0.15 && t < 0.2, "{t}");
        assert_eq!(far_frr(&s, t).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn single_class_rejected() {
        let s = vec![ScoredSample::live(0.1)];
        assert!(error_rates(&s, 0.5).is_err());
        assert!(eer_threshold(&s).is_err());
        assert!(auc(&s).is_err());
    }

    #[test]
    fn all_equal_scores_give_half_auc() {
        let s = vec![
            ScoredSample::live(0.4),
            ScoredSample::live(0.4),
            ScoredSample::spoof(0.4, AttackType::Print),
        ];
        assert_eq!(auc(&s).unwrap(), 0.5);
    }

    fn samples_strategy() -> impl Strategy<Value = Vec<ScoredSample>> {
        prop::collection::vec((0u8..6, 0usize..3), 2..40).prop_map(|v| {
            let mut out: Vec<ScoredSample> = v
                .into_iter()
                .map(|(q, kind)| {
                    let score = q as f64 / 5.0;
                    match kind {
                        0 => ScoredSample::live(score),
                        1 => ScoredSample::spoof(score, AttackType::Print),
                        _ => ScoredSample::spoof(score, AttackType::Replay),
                    }
                })
                .collect();
            out.push(ScoredSample::live(0.5));
            out.push(ScoredSample::spoof(0.5, AttackType::Print));
            out
        })
    }

    proptest! {
        #[test]
        fn acer_is_mean_and_rates_bounded(s in samples_strategy(), t in -0.5f64..1.5) {
            let r = error_rates(&s, t).unwrap();
            prop_assert_eq!(r.acer, (r.apcer + r.bpcer) / 2.0);
            for v in [r.apcer, r.bpcer, r.acer, hter(&s, t).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn rates_monotone_in_threshold(s in samples_strategy(), a in -0.5f64..1.5, b in -0.5f64..1.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (rl, rh) = (error_rates(&s, lo).unwrap(), error_rates(&s, hi).unwrap());
            prop_assert!(rh.apcer >= rl.apcer);
            prop_assert!(rh.bpcer <= rl.bpcer);
        }

        #[test]
        fn auc_matches_pair_count(s in samples_strategy()) {
            prop_assert_eq!(auc(&s).unwrap(), pair_auc(&s));
        }

        #[test]
        fn auc_invariant_under_monotone_transform(s in samples_strategy()) {
            let t: Vec<_> = s.iter().map(|x| ScoredSample { score: (3.0 * x.score).exp() - 7.0, ..x.clone() }).collect();
            prop_assert_eq!(auc(&s).unwrap(), auc(&t).unwrap());
        }
    }
}
