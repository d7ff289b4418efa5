//! Random feature maps approximating the exponential attention kernel
//! `exp(q.k / sqrt(d))`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of the generator used to derive `omega` from a seed. Written
/// into every serialized feature map so readers can refuse a mismatch.
pub const RNG_ALGORITHM: &str = "chacha8-rand0.9-stdnormal-ziggurat";

pub const FEATURE_MAP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// `phi_j(x) = m^-1/2 exp(w_j.x / d^1/4 - |x|^2 / (2 sqrt d))`.
    PositiveRandomFeatures,
    /// Trigonometric features, scaled so the estimate is unbiased for the
    /// exponential kernel. May go negative.
    RandomFourier,
    /// Positive random features with every coordinate clamped to
    /// `sqrt(C/m)`, so each product is at most `C/m`.
    ClippedPrf,
    /// `phi(x) = x`, `m = d`. For hand-checkable examples.
    Identity,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FeatureKind::PositiveRandomFeatures => "positive-random-features",
            FeatureKind::RandomFourier => "random-fourier",
            FeatureKind::ClippedPrf => "clipped-prf",
            FeatureKind::Identity => "identity",
        };
        f.write_str(s)
    }
}

/// Everything needed to rebuild a [`FeatureMap`]; `omega` is re-derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub format_version: u32,
    pub rng: String,
    pub kind: FeatureKind,
    pub m: usize,
    pub d: usize,
    pub seed: u64,
    pub clip_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    kind: FeatureKind,
    m: usize,
    d: usize,
    seed: u64,
    clip_bound: f64,
    /// Row-major `m x d`.
    omega: Vec<f64>,
    /// Random Fourier phase offsets, empty for other kinds.
    phases: Vec<f64>,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind, m: usize, d: usize, seed: u64, clip_bound: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDimension("d must be >= 1".into()));
        }
        if m == 0 {
            return Err(Error::InvalidDimension("m must be >= 1".into()));
        }
        if kind == FeatureKind::Identity && m != d {
            return Err(Error::InvalidDimension(format!(
                "identity map needs m == d, got m={m} d={d}"
            )));
        }
        if kind == FeatureKind::ClippedPrf && !(clip_bound > 0.0) {
            return Err(Error::InvalidBound(format!(
                "clip bound must be positive, got {clip_bound}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (omega, phases) = match kind {
            FeatureKind::Identity => (Vec::new(), Vec::new()),
            _ => {
                let omega: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
                let phases = if kind == FeatureKind::RandomFourier {
                    (0..m).map(|_| rng.random::<f64>() * 2.0 * PI).collect()
                } else {
                    Vec::new()
                };
                (omega, phases)
            }
        };
        Ok(Self {
            kind,
            m,
            d,
            seed,
            clip_bound,
            omega,
            phases,
        })
    }

    pub fn from_spec(spec: &FeatureMapSpec) -> Result<Self> {
        if spec.format_version != FEATURE_MAP_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported feature map format version {}",
                spec.format_version
            )));
        }
        if spec.rng != RNG_ALGORITHM {
            return Err(Error::Parse(format!(
                "feature map generated with {:?}, this build uses {RNG_ALGORITHM:?}",
                spec.rng
            )));
        }
        Self::new(spec.kind, spec.m, spec.d, spec.seed, spec.clip_bound)
    }

    pub fn spec(&self) -> FeatureMapSpec {
        FeatureMapSpec {
            format_version: FEATURE_MAP_FORMAT_VERSION,
            rng: RNG_ALGORITHM.to_string(),
            kind: self.kind,
            m: self.m,
            d: self.d,
            seed: self.seed,
            clip_bound: self.clip_bound,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.spec())? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: FeatureMapSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_spec(&spec)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn omega_row(&self, j: usize) -> &[f64] {
        &self.omega[j * self.d..(j + 1) * self.d]
    }

    fn clip_level(&self) -> f64 {
        (self.clip_bound / self.m as f64).sqrt()
    }

    /// `phi(x)`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply_counting(x)?.0)
    }

    /// `phi(x)` plus the number of coordinates the clamp touched.
    pub fn apply_counting(&self, x: &[f64]) -> Result<(Vec<f64>, usize)> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        if self.kind == FeatureKind::Identity {
            return Ok((x.to_vec(), 0));
        }
        let d = self.d as f64;
        let proj_scale = d.powf(-0.25);
        let sq: f64 = x.iter().map(|v| v * v).sum();
        let inv_sqrt_m = (self.m as f64).sqrt().recip();
        let mut clipped = 0;
        let out = (0..self.m)
            .map(|j| {
                let proj = dot(self.omega_row(j), x) * proj_scale;
                match self.kind {
                    FeatureKind::PositiveRandomFeatures => inv_sqrt_m * (proj - sq / (2.0 * d.sqrt())).exp(),
                    FeatureKind::ClippedPrf => {
                        let v = inv_sqrt_m * (proj - sq / (2.0 * d.sqrt())).exp();
                        let c = self.clip_level();
                        if v > c {
                            clipped += 1;
                            c
                        } else {
                            v
                        }
                    }
                    FeatureKind::RandomFourier => {
                        (2.0 / self.m as f64).sqrt() * (proj + self.phases[j]).cos() * (sq / (2.0 * d.sqrt())).exp()
                    }
                    FeatureKind::Identity => unreachable!(),
                }
            })
            .collect();
        Ok((out, clipped))
    }

    /// An upper bound `B_phi` on `|phi(x)|_2` over the ball `|x|_2 <= r`.
    pub fn feature_norm_bound(&self, r: f64) -> f64 {
        let d = self.d as f64;
        match self.kind {
            FeatureKind::Identity => r,
            FeatureKind::RandomFourier => 2f64.sqrt() * (r * r / (2.0 * d.sqrt())).exp(),
            FeatureKind::PositiveRandomFeatures | FeatureKind::ClippedPrf => {
                let inv_m = (self.m as f64).recip();
                let qd = d.powf(0.25);
                let sum_sq: f64 = (0..self.m)
                    .map(|j| {
                        let w = norm(self.omega_row(j));
                        // max over |x| <= r of w.x/d^1/4 - |x|^2/(2 sqrt d)
                        let peak = w * qd;
                        let g = if peak <= r {
                            w * w / 2.0
                        } else {
                            r * w / qd - r * r / (2.0 * d.sqrt())
                        };
                        let mut sq = inv_m * (2.0 * g).exp();
                        if self.kind == FeatureKind::ClippedPrf {
                            sq = sq.min(self.clip_bound * inv_m);
                        }
                        sq
                    })
                    .sum();
                sum_sq.sqrt()
            }
        }
    }

    pub fn bounded_input_spec(&self, r: f64, r_v: f64) -> BoundedInputSpec {
        BoundedInputSpec {
            r,
            b_phi: self.feature_norm_bound(r),
            r_v,
        }
    }
}

/// Norm bounds on keys (`R`), features (`B_phi`) and values (`R_v`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundedInputSpec {
    pub r: f64,
    pub b_phi: f64,
    pub r_v: f64,
}

impl BoundedInputSpec {
    pub fn new(r: f64, b_phi: f64, r_v: f64) -> Result<Self> {
        if !(r > 0.0 && b_phi > 0.0 && r_v > 0.0) {
            return Err(Error::InvalidBound(format!(
                "bounds must be positive: R={r} B_phi={b_phi} R_v={r_v}"
            )));
        }
        Ok(Self { r, b_phi, r_v })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `exp(q.k / sqrt(d))`.
pub fn kernel_exact(q: &[f64], k: &[f64], d: usize) -> Result<f64> {
    if q.len() != d || k.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if q.len() != d { q.len() } else { k.len() },
        });
    }
    Ok((dot(q, k) / (d as f64).sqrt()).exp())
}

/// `phi(q).phi(k)`.
pub fn kernel_estimate(fm: &FeatureMap, q: &[f64], k: &[f64]) -> Result<f64> {
    Ok(dot(&fm.apply(q)?, &fm.apply(k)?))
}

/// Feature dimension sufficient for a uniform `eps` kernel error over `n`
/// pairs with probability `1 - delta`: `ceil(2 C^2 / eps^2 * ln(2N / delta))`.
pub fn required_m(c: f64, eps: f64, n: u64, delta: f64) -> Result<u64> {
    if !(eps > 0.0 && eps < c) {
        return Err(Error::InvalidBound(format!("need 0 < eps < C, got eps={eps} C={c}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidBound(format!("need 0 < delta < 1, got {delta}")));
    }
    if n == 0 {
        return Err(Error::InvalidBound("need N >= 1".into()));
    }
    let m = 2.0 * c * c / (eps * eps) * (2.0 * n as f64 / delta).ln();
    Ok(m.ceil() as u64)
}

/// Scale `x` down so `|x|_2 <= r`; leaves shorter vectors alone.
pub fn clip_norm(x: &mut [f64], r: f64) {
    let n = norm(x);
    if n > r && n > 0.0 {
        let s = r / n;
        x.iter_mut().for_each(|v| *v *= s);
    }
}
