//! Partition, Map and SumReduce, the three primitives every dataplane
//! computation is expressed in.

use crate::error::{Error, RegisterCoord, Result};
use crate::quantization::{accumulate_raw, FixedPointFormat, OverflowPolicy};

/// Split `x` into `k` contiguous segments whose sizes differ by at most one.
/// Earlier segments take the extra elements.
pub fn partition<T: Clone>(x: &[T], k: usize) -> Result<Vec<Vec<T>>> {
    if k == 0 {
        return Err(Error::InvalidDimension("partition needs k >= 1".into()));
    }
    let base = x.len() / k;
    let extra = x.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(x[at..at + len].to_vec());
        at += len;
    }
    Ok(out)
}

/// `Y_i = F_i(X_i)`.
pub fn map_apply<T, U, F: Fn(&[T]) -> U>(fns: &[F], segments: &[Vec<T>]) -> Result<Vec<U>> {
    if fns.len() != segments.len() {
        return Err(Error::DimensionMismatch {
            expected: segments.len(),
            got: fns.len(),
        });
    }
    Ok(fns.iter().zip(segments).map(|(f, s)| f(s)).collect())
}

/// Stages of a balanced pairwise adder tree over `k` inputs.
pub fn reduce_stages(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reduced {
    pub sum: Vec<i64>,
    pub stages: u32,
}

/// Element-wise checked sum of raw fixed-point vectors through a pairwise
/// adder tree of `ceil(log2 k)` stages.
pub fn sum_reduce(outputs: &[Vec<i64>], format: FixedPointFormat) -> Result<Reduced> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidDimension("sum_reduce needs at least one input".into()))?;
    if let Some(bad) = outputs.iter().find(|o| o.len() != first.len()) {
        return Err(Error::DimensionMismatch {
            expected: first.len(),
            got: bad.len(),
        });
    }
    if let Some(&raw) = outputs.iter().flatten().find(|&&r| !format.contains_raw(r as i128)) {
        return Err(Error::OutOfRange {
            value: raw as f64 * format.lsb(),
            format: format.to_string(),
        });
    }
    let mut level: Vec<Vec<i64>> = outputs.to_vec();
    let mut stages = 0;
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for pair in level.chunks(2) {
            match pair {
                [a, b] => {
                    let s = a
                        .iter()
                        .zip(b)
                        .enumerate()
                        .map(|(i, (x, y))| {
                            accumulate_raw(
                                *x,
                                *y,
                                format,
                                OverflowPolicy::Checked,
                                RegisterCoord::Vector { index: i },
                            )
                        })
                        .collect::<Result<Vec<i64>>>()?;
                    next.push(s);
                }
                [a] => next.push(a.clone()),
                _ => unreachable!(),
            }
        }
        level = next;
        stages += 1;
    }
    Ok(Reduced {
        sum: level.pop().unwrap(),
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nsattn_testkit::oracle_integer_column_sums;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_cases() {
        let x: Vec<u32> = (0..7).collect();
        assert_eq!(partition(&x, 1).unwrap(), vec![x.clone()]);
        let six: Vec<u32> = (0..6).collect();
        assert!(partition(&six, 3).unwrap().iter().all(|s| s.len() == 2));
        let p = partition(&x, 3).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert_eq!(p.concat(), x);
        assert_eq!(partition(&x, 9).unwrap().concat(), x);
        assert!(partition(&x, 0).is_err());
    }

    #[test]
    fn map_cases() {
        let segs = vec![vec![1.0, 2.0], vec![3.0]];
        let id: Vec<fn(&[f64]) -> Vec<f64>> = vec![|s| s.to_vec(), |s| s.to_vec()];
        assert_eq!(map_apply(&id, &segs).unwrap(), segs);
        let konst: Vec<fn(&[f64]) -> f64> = vec![|_| 7.0, |_| -1.0];
        assert_eq!(map_apply(&konst, &segs).unwrap(), vec![7.0, -1.0]);
        let lut = [0.0, 1.0, 4.0, 9.0];
        let fns: Vec<Box<dyn Fn(&[usize]) -> Vec<f64>>> = vec![
            Box::new(move |s| s.iter().map(|&i| lut[i]).collect()),
            Box::new(|s| s.iter().map(|&i| (i * i) as f64).collect()),
        ];
        let idx = vec![vec![0, 3], vec![2, 1]];
        assert_eq!(map_apply(&fns, &idx).unwrap(), vec![vec![0.0, 9.0], vec![4.0, 1.0]]);
        assert!(map_apply(&konst, &segs[..1]).is_err());
    }

    #[test]
    fn reduce_cases() {
        let f = FixedPointFormat::new(16, 8).unwrap();
        assert_eq!(
            sum_reduce(&[vec![5, -3]], f).unwrap(),
            Reduced {
                sum: vec![5, -3],
                stages: 0
            }
        );
        assert_eq!(sum_reduce(&vec![vec![0; 3]; 5], f).unwrap().sum, vec![0; 3]);
        assert_eq!(reduce_stages(8), 3);
        assert_eq!(reduce_stages(5), 3);
        assert_eq!(reduce_stages(2), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<i64>> = (0..8)
            .map(|_| (0..4).map(|_| rng.random_range(-2000..2000)).collect())
            .collect();
        let want = oracle_integer_column_sums(&rows);
        let got = sum_reduce(&rows, f).unwrap();
        assert_eq!(got.stages, 3);
        assert_eq!(got.sum.iter().map(|&x| x as i128).collect::<Vec<_>>(), want);
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(sum_reduce(&rev, f).unwrap().sum, got.sum);
        assert!(sum_reduce(&[vec![f.max_raw()], vec![1]], f).unwrap_err().is_overflow());
        assert!(sum_reduce(&[], f).is_err());
    }
}
