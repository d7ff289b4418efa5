//! Independent oracles for the `nsattn` test suites.
//!
//! Nothing here depends on `nsattn`: every oracle is written from scratch,
//! in exact rational arithmetic where the quantity is rational and in
//! compensated `f64` otherwise. Oracles refuse instances larger than desk
//! scale (`T <= 64`, `m <= 4096`, `entries <= 1000`).

pub mod fixtures;
pub mod linalg;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_TOKENS: usize = 64;
pub const MAX_FEATURES: usize = 4096;
pub const MAX_ENTRIES: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("instance too large for oracle: {0}")]
    TooLarge(String),
    #[error("malformed instance: {0}")]
    Malformed(String),
}

pub type OracleResult<T> = Result<T, OracleError>;

fn limit(what: &str, n: usize, max: usize) -> OracleResult<()> {
    if n > max {
        return Err(OracleError::TooLarge(format!("{what} = {n} > {max}")));
    }
    Ok(())
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Row-wise `softmax(Q K^T / sqrt d) V` via log-sum-exp.
pub fn oracle_exact_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], d: usize) -> OracleResult<Vec<Vec<f64>>> {
    limit("T", k.len(), MAX_TOKENS)?;
    limit("queries", q.len(), MAX_TOKENS)?;
    if k.len() != v.len() || k.is_empty() {
        return Err(OracleError::Malformed("need T >= 1 keys and values".into()));
    }
    let dv = v[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    Ok(q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k.iter().map(|kj| dot(qi, kj) * scale).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + compensated_sum(logits.iter().map(|l| (l - mx).exp())).ln();
            let w: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
            (0..dv)
                .map(|c| compensated_sum(w.iter().zip(v).map(|(wj, vj)| wj * vj[c])))
                .collect()
        })
        .collect())
}

pub fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// Exact `S = sum phi(k_t) v_t^T`, `Z = sum phi(k_t)` over the given feature
/// and value vectors.
pub fn oracle_rational_accumulate(
    features: &[Vec<f64>],
    values: &[Vec<f64>],
) -> OracleResult<(Vec<Vec<BigRational>>, Vec<BigRational>)> {
    limit("T", features.len(), MAX_TOKENS * 16)?;
    if features.len() != values.len() {
        return Err(OracleError::Malformed("features/values length".into()));
    }
    let m = features.first().map_or(0, |f| f.len());
    limit("m", m, MAX_FEATURES)?;
    let dv = values.first().map_or(0, |v| v.len());
    let mut s = vec![vec![BigRational::zero(); dv]; m];
    let mut z = vec![BigRational::zero(); m];
    for (phi, v) in features.iter().zip(values) {
        let v: Vec<BigRational> = v.iter().map(|&x| rational(x)).collect();
        for (i, &p) in phi.iter().enumerate() {
            let p = rational(p);
            for (j, vj) in v.iter().enumerate() {
                s[i][j] += &p * vj;
            }
            z[i] += p;
        }
    }
    Ok((s, z))
}

/// Round `x * 2^frac` to the nearest integer, ties to even, exactly.
pub fn round_half_even_scaled(x: &BigRational, frac: u32) -> BigInt {
    let scaled = x * BigRational::from_integer(BigInt::one() << frac);
    let fl = scaled.floor();
    let rem = &scaled - &fl;
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let base = fl.to_integer();
    if rem > half {
        base + 1
    } else if rem < half {
        base
    } else if (&base % BigInt::from(2)).is_zero() {
        base
    } else {
        base + 1
    }
}

/// Quantize-then-add accumulation computed with exact rounding: each
/// increment `phi_i(k) v_j` is formed in `f64` (as a dataplane Map stage
/// would), rounded half-to-even at `frac` bits and summed as an integer.
pub fn oracle_quantized_accumulate(
    features: &[Vec<f64>],
    values: &[Vec<f64>],
    frac_s: u32,
    frac_z: u32,
) -> OracleResult<(Vec<Vec<i128>>, Vec<i128>)> {
    if features.len() != values.len() {
        return Err(OracleError::Malformed("features/values length".into()));
    }
    let m = features.first().map_or(0, |f| f.len());
    limit("m", m, MAX_FEATURES)?;
    let dv = values.first().map_or(0, |v| v.len());
    let mut s = vec![vec![0i128; dv]; m];
    let mut z = vec![0i128; m];
    for (phi, v) in features.iter().zip(values) {
        for (i, &p) in phi.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                let inc = round_half_even_scaled(&rational(p * vj), frac_s);
                s[i][j] += inc.to_i128().expect("fits");
            }
            z[i] += round_half_even_scaled(&rational(p), frac_z).to_i128().expect("fits");
        }
    }
    Ok((s, z))
}

/// A ternary entry as plain integers: `(value, mask, priority, payload)`.
pub type ScanEntry = (u128, u128, i64, u64);

/// Payloads of all matching entries, by descending priority, ties by position.
pub fn oracle_scan_match(entries: &[ScanEntry], sig: u128) -> OracleResult<Vec<u64>> {
    limit("entries", entries.len(), MAX_ENTRIES)?;
    let mut hits: Vec<(i64, usize, u64)> = Vec::new();
    for (pos, &(value, mask, prio, payload)) in entries.iter().enumerate() {
        let mut matched = true;
        for bit in 0..128 {
            let care = (mask >> bit) & 1 == 1;
            if care && ((sig >> bit) & 1) != ((value >> bit) & 1) {
                matched = false;
                break;
            }
        }
        if matched {
            hits.push((prio, pos, payload));
        }
    }
    // insertion sort, descending priority, stable on position
    for i in 1..hits.len() {
        let mut j = i;
        while j > 0 && hits[j - 1].0 < hits[j].0 {
            hits.swap(j - 1, j);
            j -= 1;
        }
    }
    Ok(hits.into_iter().map(|h| h.2).collect())
}

/// Retained kernel-mass fraction `sum_sel exp(q.k/sqrt d) / sum_all ...`.
pub fn oracle_kernel_mass(q: &[f64], selected: &[Vec<f64>], universe: &[Vec<f64>], d: usize) -> OracleResult<f64> {
    limit("universe", universe.len(), MAX_ENTRIES)?;
    if universe.is_empty() {
        return Err(OracleError::Malformed("empty universe".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let logits = |set: &[Vec<f64>]| -> Vec<f64> { set.iter().map(|k| dot(q, k) * scale).collect() };
    let lu = logits(universe);
    let mx = lu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total = compensated_sum(lu.iter().map(|l| (l - mx).exp()));
    let sel = compensated_sum(logits(selected).iter().map(|l| (l - mx).exp()));
    Ok(sel / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoMeans {
    pub centroids: [Vec<f64>; 2],
    pub cost: f64,
}

/// Optimal 2-means by enumerating every bipartition (n <= 16).
pub fn oracle_two_means(points: &[Vec<f64>]) -> OracleResult<TwoMeans> {
    limit("points", points.len(), 16)?;
    if points.len() < 2 {
        return Err(OracleError::Malformed("need at least two points".into()));
    }
    let n = points.len();
    let dim = points[0].len();
    let mean = |idx: &[usize]| -> Vec<f64> {
        (0..dim)
            .map(|c| compensated_sum(idx.iter().map(|&i| points[i][c])) / idx.len() as f64)
            .collect()
    };
    let sse = |idx: &[usize], c: &[f64]| -> f64 {
        compensated_sum(
            idx.iter()
                .map(|&i| points[i].iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()),
        )
    };
    let mut best: Option<TwoMeans> = None;
    // point 0 always in group A to skip mirrored partitions
    for mask in 0u32..(1 << (n - 1)) {
        let b: Vec<usize> = (1..n).filter(|i| mask >> (i - 1) & 1 == 1).collect();
        if b.is_empty() {
            continue;
        }
        let a: Vec<usize> = (0..n).filter(|i| !b.contains(i)).collect();
        let (ca, cb) = (mean(&a), mean(&b));
        let cost = sse(&a, &ca) + sse(&b, &cb);
        if best.as_ref().is_none_or(|bst| cost < bst.cost) {
            best = Some(TwoMeans {
                centroids: [ca, cb],
                cost,
            });
        }
    }
    Ok(best.expect("n >= 2"))
}

/// `C(n) = (1-eta)^n C0 + sum_i eta (1-eta)^(n-i) u_i`, exactly in rationals.
pub fn oracle_ema_closed_form(eta: f64, c0: f64, u: &[u8]) -> f64 {
    let eta = rational(eta);
    let keep = BigRational::one() - &eta;
    let n = u.len();
    let mut total = rational(c0) * pow(&keep, n);
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0 {
            total += &eta * pow(&keep, n - 1 - i);
        }
    }
    total.to_f64().expect("finite")
}

fn pow(x: &BigRational, n: usize) -> BigRational {
    let mut acc = BigRational::one();
    for _ in 0..n {
        acc *= x;
    }
    acc
}

/// Exact integer column sums of raw vectors.
pub fn oracle_integer_column_sums(vectors: &[Vec<i64>]) -> Vec<i128> {
    let width = vectors.first().map_or(0, |v| v.len());
    (0..width).map(|c| vectors.iter().map(|v| v[c] as i128).sum()).collect()
}

/// Macro-F1 over classes `0..k` from a confusion count.
pub fn oracle_macro_f1(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut f1s = Vec::new();
    for c in 0..k {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        f1s.push(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom });
    }
    f1s.iter().sum::<f64>() / k as f64
}

/// Rank-statistic AUC by counting concordant pairs, O(n^2).
pub fn oracle_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Reference FIFO window: the last `min(cap, n)` items in order.
pub fn oracle_window<T: Clone>(pushed: &[T], cap: usize) -> Vec<T> {
    let start = pushed.len().saturating_sub(cap);
    pushed[start..].to_vec()
}

pub fn is_exact_zero(x: &BigRational) -> bool {
    x.is_zero()
}

pub fn abs_f64(x: &BigRational) -> f64 {
    x.abs().to_f64().expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_attention_returns_value() {
        let out = oracle_exact_attention(&[vec![3.0, -1.0]], &[vec![0.5, 0.5]], &[vec![7.0, 2.0]], 2).unwrap();
        assert!((out[0][0] - 7.0).abs() < 1e-15);
        assert!((out[0][1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rational_rounding() {
        assert_eq!(round_half_even_scaled(&rational(0.5), 0), BigInt::from(0));
        assert_eq!(round_half_even_scaled(&rational(1.5), 0), BigInt::from(2));
        assert_eq!(round_half_even_scaled(&rational(-2.5), 0), BigInt::from(-2));
        assert_eq!(
            round_half_even_scaled(&(BigRational::one() / BigInt::from(3)), 8),
            BigInt::from(85)
        );
    }

    #[test]
    fn empty_and_zero_cases() {
        assert!(oracle_scan_match(&[], 5).unwrap().is_empty());
        let (s, z) = oracle_rational_accumulate(&[], &[]).unwrap();
        assert!(s.is_empty() && z.is_empty());
        assert_eq!(oracle_ema_closed_form(0.1, 0.0, &[0, 0, 0]), 0.0);
        assert_eq!(oracle_integer_column_sums(&[vec![0, 0], vec![0, 0]]), vec![0, 0]);
    }

    #[test]
    fn scan_match_priority_order() {
        let entries = [
            (0b1010, 0b1111, 1, 10),
            (0b1000, 0b1000, 5, 20),
            (0, 0, 3, 30),
            (0b0000, 0b1000, 9, 40),
        ];
        assert_eq!(oracle_scan_match(&entries, 0b1010).unwrap(), vec![20, 30, 10]);
    }

    #[test]
    fn ema_geometric() {
        let c = oracle_ema_closed_form(0.1, 0.0, &[1; 10]);
        assert!((c - (1.0 - 0.9f64.powi(10))).abs() < 1e-15);
    }

    #[test]
    fn two_means_blobs() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 10.0], vec![10.1, 10.0]];
        let r = oracle_two_means(&pts).unwrap();
        let mut c = r.centroids.to_vec();
        c.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((c[0][0] - 0.05).abs() < 1e-12 && (c[1][0] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_hand_case() {
        // truth 0,0,0,1,1,1 ; pred 0,0,1,1,1,0
        // class0: tp2 fp1 fn1 -> 4/6 ; class1: tp2 fp1 fn1 -> 4/6
        let f = oracle_macro_f1(&[0, 0, 1, 1, 1, 0], &[0, 0, 0, 1, 1, 1], 2);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_large_instances() {
        let big = vec![vec![0.0]; 65];
        assert!(matches!(
            oracle_exact_attention(&big, &big, &big, 1),
            Err(OracleError::TooLarge(_))
        ));
        let pts = vec![vec![0.0]; 17];
        assert!(oracle_two_means(&pts).is_err());
    }
}
