//! Drop probabilities of the in-degree cap.
//!
//! A node with `d_v` training in-edges keeps `Binomial(d_v, min(1, K/(2 d_v)))`
//! of them and is dropped when that count exceeds `K`. These functions give the
//! exact drop probability, its change when one more in-edge is added, and the
//! expected dropped fraction under a degree histogram.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::DegreeHistogram;
use crate::numerics::{ln_choose, KahanSum};

/// Tail terms below this fraction of the running sum are not added.
const TAIL_REL_EPS: f64 = 1e-19;

/// `P[Binomial(trials, p) >= first]` by summing the upper tail from `first`,
/// starting in log-space and walking the term ratio.
fn binomial_upper_tail(trials: u64, p: f64, first: u64) -> f64 {
    if first > trials {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    if p <= 0.0 {
        return if first == 0 { 1.0 } else { 0.0 };
    }
    let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
    let odds = p / (1.0 - p);
    let mean = trials as f64 * p;
    let mut term = (ln_choose(trials, first) + first as f64 * ln_p + (trials - first) as f64 * ln_q).exp();
    let mut sum = KahanSum::default();
    let mut j = first;
    loop {
        sum.add(term);
        if j == trials {
            break;
        }
        term *= (trials - j) as f64 / (j + 1) as f64 * odds;
        j += 1;
        // past the mode the terms only shrink
        if j as f64 > mean && term < TAIL_REL_EPS * sum.value() {
            break;
        }
        if term == 0.0 && j as f64 > mean {
            break;
        }
    }
    sum.value().min(1.0)
}

fn keep_probability(d_v: u64, k: u64) -> f64 {
    if d_v == 0 {
        1.0
    } else {
        (k as f64 / (2.0 * d_v as f64)).min(1.0)
    }
}

/// `P[Binomial(d_v, min(1, K/(2 d_v))) > K]`.
pub fn drop_probability(d_v: u64, k: u64) -> f64 {
    if d_v <= k {
        return 0.0;
    }
    binomial_upper_tail(d_v, keep_probability(d_v, k), k + 1)
}

/// Same tail with the sum starting at `K` instead of `K + 1`, i.e. the
/// probability of keeping at least `K` edges. Reported only for comparison;
/// the sampler drops strictly above `K`.
pub fn at_least_k_probability(d_v: u64, k: u64) -> f64 {
    if d_v < k {
        return 0.0;
    }
    binomial_upper_tail(d_v, keep_probability(d_v, k), k)
}

/// Change in drop probability when `d_v` grows by one.
pub fn drop_probability_delta(d_v: u64, k: u64) -> f64 {
    (drop_probability(d_v + 1, k) - drop_probability(d_v, k)).abs()
}

/// Histogram-weighted mean of [`drop_probability`].
pub fn expected_drop_fraction(hist: &DegreeHistogram, k: u64) -> Result<f64> {
    let total = hist.total();
    if total == 0 {
        return Err(Error::InvalidParameter("degree histogram is empty".into()));
    }
    let mut acc = KahanSum::default();
    for (&d, &count) in &hist.counts {
        acc.add(count as f64 * drop_probability(d as u64, k));
    }
    Ok(acc.value() / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DropRow {
    pub d_v: u64,
    pub drop_prob: f64,
    pub drop_prob_adjacent: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropReport {
    pub k: u64,
    pub rows: Vec<DropRow>,
    pub sup_delta: f64,
    pub sup_delta_at: u64,
    /// Supremum of the change when the tail is taken from `K` rather than `K + 1`.
    pub sup_delta_at_least_k: f64,
    pub expected_drop_fraction: Option<f64>,
}

/// Rows for `d_v = 0..=max_degree`.
pub fn drop_report(k: u64, max_degree: u64, hist: Option<&DegreeHistogram>) -> Result<DropReport> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(max_degree as usize + 1);
    let mut prev = drop_probability(0, k);
    let mut prev_ge = at_least_k_probability(0, k);
    let (mut sup_delta, mut sup_delta_at, mut sup_ge) = (0.0f64, 0u64, 0.0f64);
    for d in 0..=max_degree {
        let next = drop_probability(d + 1, k);
        let next_ge = at_least_k_probability(d + 1, k);
        let delta = (next - prev).abs();
        if delta > sup_delta {
            sup_delta = delta;
            sup_delta_at = d;
        }
        sup_ge = sup_ge.max((next_ge - prev_ge).abs());
        rows.push(DropRow {
            d_v: d,
            drop_prob: prev,
            drop_prob_adjacent: next,
            delta,
        });
        prev = next;
        prev_ge = next_ge;
    }
    let expected_drop_fraction = hist.map(|h| expected_drop_fraction(h, k)).transpose()?;
    Ok(DropReport {
        k,
        rows,
        sup_delta,
        sup_delta_at,
        sup_delta_at_least_k: sup_ge,
        expected_drop_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// Direct sum of every tail term, no early stop.
    fn naive_tail(n: u64, p: f64, first: u64) -> f64 {
        (first..=n)
            .map(|j| (ln_choose(n, j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp())
            .sum()
    }

    #[test]
    fn zero_when_degree_at_most_k() {
        for k in 1..20 {
            for d in 0..=k {
                assert_eq!(drop_probability(d, k), 0.0);
            }
        }
    }

    #[test]
    fn twice_k_matches_explicit_sum() {
        // d_v = 20, K = 10, p = 1/4
        let want: f64 = (11..=20u64)
            .map(|j| {
                let c = (0..j).fold(1.0, |acc, i| acc * (20 - i) as f64 / (i + 1) as f64);
                c * 0.25f64.powi(j as i32) * 0.75f64.powi(20 - j as i32)
            })
            .sum();
        let got = drop_probability(20, 10);
        assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn truncated_tail_matches_full_sum() {
        for &(d, k) in &[(11u64, 10u64), (50, 10), (1_000, 10), (30_000, 7), (400, 3)] {
            let p = (k as f64 / (2.0 * d as f64)).min(1.0);
            let want = naive_tail(d, p, k + 1);
            let got = drop_probability(d, k);
            assert!(((got - want) / want).abs() < 1e-9, "d={d} k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn delta_zero_below_k() {
        for d in 0..10 {
            assert_eq!(drop_probability_delta(d, 10), 0.0);
        }
        assert!(drop_probability_delta(10, 10) > 0.0);
    }

    #[test]
    fn expected_fraction_weighting() {
        let h = DegreeHistogram {
            counts: BTreeMap::from([(3, 10), (10, 5)]),
        };
        assert_eq!(expected_drop_fraction(&h, 10).unwrap(), 0.0);
        let h = DegreeHistogram {
            counts: BTreeMap::from([(20, 100)]),
        };
        assert!((expected_drop_fraction(&h, 10).unwrap() - drop_probability(20, 10)).abs() < 1e-15);
        let h = DegreeHistogram {
            counts: BTreeMap::from([(5, 50), (40, 50)]),
        };
        let want = 0.5 * drop_probability(40, 10);
        assert!((expected_drop_fraction(&h, 10).unwrap() - want).abs() < 1e-15);
        assert!(expected_drop_fraction(&DegreeHistogram::default(), 10).is_err());
    }

    #[test]
    fn report_rows_are_consistent() {
        let rep = drop_report(10, 200, None).unwrap();
        assert_eq!(rep.rows.len(), 201);
        for (i, row) in rep.rows.iter().enumerate() {
            assert_eq!(row.d_v, i as u64);
            assert!((0.0..=1.0).contains(&row.drop_prob));
            assert_eq!(row.delta, (row.drop_prob_adjacent - row.drop_prob).abs());
            assert_eq!(row.drop_prob, drop_probability(i as u64, 10));
        }
        assert!(rep.sup_delta <= 5e-4);
        // the inclusive tail moves far more between adjacent degrees
        assert!(rep.sup_delta_at_least_k > rep.sup_delta);
    }
}
