//! Exact softmax attention, batch linearized attention, and the per-flow
//! quantized accumulator that the dataplane updates one token at a time.
//!
//! The accumulator keeps `S = sum phi(k) v^T` (`m x d_v`) and
//! `Z = sum phi(k)` (`m`) as raw fixed-point integers. Each increment is
//! quantized first and then added as an integer, so the register contents do
//! not depend on the order tokens arrive in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, RegisterCoord, Result};
use crate::features::{dot, FeatureMap};
use crate::linalg;
use crate::quantization::{
    accumulate_raw, quantize_raw, ErrorTracker, FixedPointFormat, FixedPointValue, OverflowPolicy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub id: u64,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

impl Token {
    pub fn new(id: u64, key: Vec<f64>, value: Vec<f64>) -> Self {
        Self { id, key, value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub o: Vec<f64>,
    /// `phi(q).Z` before the floor is applied.
    pub normalizer: f64,
    /// The floor replaced the normalizer.
    pub clamped: bool,
}

/// `softmax(Q K^T / sqrt d) V`, one row per query.
pub fn exact_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], d: usize) -> Result<Vec<Vec<f64>>> {
    check_tokens(k, v, d)?;
    let d_v = v[0].len();
    let scale = (d as f64).sqrt().recip();
    q.iter()
        .map(|qi| {
            if qi.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: qi.len(),
                });
            }
            let logits: Vec<f64> = k.iter().map(|kj| dot(qi, kj) * scale).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut out = vec![0.0; d_v];
            for (wj, vj) in w.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += wj / total * x;
                }
            }
            Ok(out)
        })
        .collect()
}

fn check_tokens(k: &[Vec<f64>], v: &[Vec<f64>], d: usize) -> Result<()> {
    if k.is_empty() {
        return Err(Error::InvalidDimension("need at least one key".into()));
    }
    if k.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: k.len(),
            got: v.len(),
        });
    }
    if let Some(bad) = k.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let d_v = v[0].len();
    if let Some(bad) = v.iter().find(|x| x.len() != d_v) {
        return Err(Error::DimensionMismatch {
            expected: d_v,
            got: bad.len(),
        });
    }
    Ok(())
}

/// Linearized attention rows together with each row's normalizer
/// `phi(q).(Phi(K)^T 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBatch {
    pub rows: Vec<Vec<f64>>,
    pub normalizers: Vec<f64>,
}

/// `o(q) = phi(q)^T (Phi(K)^T V) / phi(q)^T (Phi(K)^T 1)` in real arithmetic.
pub fn linear_attention_batch(
    fm: &FeatureMap,
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    gamma_floor: f64,
) -> Result<Vec<Vec<f64>>> {
    Ok(linear_attention_detail(fm, q, k, v, gamma_floor)?.rows)
}

pub fn linear_attention_detail(
    fm: &FeatureMap,
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    gamma_floor: f64,
) -> Result<LinearBatch> {
    check_tokens(k, v, fm.d())?;
    let m = fm.m();
    let d_v = v[0].len();
    let mut kv = vec![0.0; m * d_v];
    let mut ksum = vec![0.0; m];
    for (kj, vj) in k.iter().zip(v) {
        let phi = fm.apply(kj)?;
        for (i, p) in phi.iter().enumerate() {
            ksum[i] += p;
            for (c, x) in vj.iter().enumerate() {
                kv[i * d_v + c] += p * x;
            }
        }
    }
    let mut rows = Vec::with_capacity(q.len());
    let mut normalizers = Vec::with_capacity(q.len());
    for qi in q {
        let phi = fm.apply(qi)?;
        let den = dot(&phi, &ksum);
        if den < gamma_floor {
            return Err(Error::DegenerateNormalizer {
                normalizer: den,
                floor: gamma_floor,
            });
        }
        let row = (0..d_v)
            .map(|c| (0..m).map(|i| phi[i] * kv[i * d_v + c]).sum::<f64>() / den)
            .collect();
        rows.push(row);
        normalizers.push(den);
    }
    Ok(LinearBatch { rows, normalizers })
}

/// `(sqrt(T) eps / gamma) |V|_2 + (eps / gamma) |V|_F`.
pub fn spectral_error_bound(t: usize, eps: f64, gamma: f64, v: &[Vec<f64>]) -> f64 {
    if eps == 0.0 {
        return 0.0;
    }
    let ratio = eps / gamma;
    (t as f64).sqrt() * ratio * linalg::spectral_norm(v) + ratio * linalg::frobenius_norm(v)
}

/// `T B_phi R_v + T eta_q m d_v`.
pub fn accumulated_error_bound(t: u64, b_phi: f64, r_v: f64, eta_q: f64, m: usize, d_v: usize) -> f64 {
    let t = t as f64;
    t * b_phi * r_v + t * eta_q * (m * d_v) as f64
}

/// One LSB of the normalizer register.
pub fn default_gamma_floor(fmt: FixedPointFormat) -> f64 {
    fmt.lsb()
}

/// Per-flow `S`/`Z` register image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    m: usize,
    d_v: usize,
    fmt_s: FixedPointFormat,
    fmt_z: FixedPointFormat,
    policy: OverflowPolicy,
    /// Row-major `m x d_v` raw values.
    s: Vec<i64>,
    z: Vec<i64>,
    t: u64,
    tracker: ErrorTracker,
}

impl AttentionState {
    pub fn new(m: usize, d_v: usize, fmt: FixedPointFormat) -> Self {
        Self::with_formats(m, d_v, fmt, fmt, OverflowPolicy::Checked)
    }

    pub fn with_formats(
        m: usize,
        d_v: usize,
        fmt_s: FixedPointFormat,
        fmt_z: FixedPointFormat,
        policy: OverflowPolicy,
    ) -> Self {
        Self {
            m,
            d_v,
            fmt_s,
            fmt_z,
            policy,
            s: vec![0; m * d_v],
            z: vec![0; m],
            t: 0,
            tracker: ErrorTracker::default(),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn formats(&self) -> (FixedPointFormat, FixedPointFormat) {
        (self.fmt_s, self.fmt_z)
    }

    pub fn policy(&self) -> OverflowPolicy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: OverflowPolicy) {
        self.policy = policy;
    }

    pub fn tracker(&self) -> &ErrorTracker {
        &self.tracker
    }

    pub fn s_raw(&self) -> &[i64] {
        &self.s
    }

    pub fn z_raw(&self) -> &[i64] {
        &self.z
    }

    pub fn s_value(&self, row: usize, col: usize) -> FixedPointValue {
        FixedPointValue::from_raw(self.s[row * self.d_v + col], self.fmt_s).expect("in range")
    }

    pub fn z_value(&self, row: usize) -> FixedPointValue {
        FixedPointValue::from_raw(self.z[row], self.fmt_z).expect("in range")
    }

    /// Dequantized `S` rows.
    pub fn s_matrix(&self) -> Vec<Vec<f64>> {
        let lsb = self.fmt_s.lsb();
        self.s
            .chunks(self.d_v.max(1))
            .take(self.m)
            .map(|row| row.iter().map(|&r| r as f64 * lsb).collect())
            .collect()
    }

    pub fn z_vector(&self) -> Vec<f64> {
        let lsb = self.fmt_z.lsb();
        self.z.iter().map(|&r| r as f64 * lsb).collect()
    }

    /// Stateful bits: `m d_v b_S + m b_Z`.
    pub fn storage_bits(&self) -> u64 {
        (self.m * self.d_v) as u64 * self.fmt_s.total_bits() as u64 + self.m as u64 * self.fmt_z.total_bits() as u64
    }

    /// Absorb one token. On error the state is left untouched.
    pub fn update(&mut self, fm: &FeatureMap, tok: &Token) -> Result<()> {
        let phi = fm.apply(&tok.key)?;
        self.absorb(&phi, &tok.value)
    }

    /// Absorb a precomputed feature vector `phi(k)` with value `v`.
    pub fn absorb(&mut self, phi: &[f64], value: &[f64]) -> Result<()> {
        if phi.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: phi.len(),
            });
        }
        if value.len() != self.d_v {
            return Err(Error::DimensionMismatch {
                expected: self.d_v,
                got: value.len(),
            });
        }
        let mut s = self.s.clone();
        let mut z = self.z.clone();
        let mut tracker = self.tracker.clone();
        for (i, &p) in phi.iter().enumerate() {
            for (j, &vj) in value.iter().enumerate() {
                let coord = RegisterCoord::S { row: i, col: j };
                let exact = p * vj;
                let inc = quantize_raw(exact, self.fmt_s).map_err(|_| out_of_range(exact, self.fmt_s, coord))?;
                tracker.record(inc as f64 * self.fmt_s.lsb() - exact);
                let idx = i * self.d_v + j;
                s[idx] = accumulate_raw(s[idx], inc, self.fmt_s, self.policy, coord)?;
            }
            let coord = RegisterCoord::Z { row: i };
            let inc = quantize_raw(p, self.fmt_z).map_err(|_| out_of_range(p, self.fmt_z, coord))?;
            tracker.record(inc as f64 * self.fmt_z.lsb() - p);
            z[i] = accumulate_raw(z[i], inc, self.fmt_z, self.policy, coord)?;
        }
        tracker.close_update(self.fmt_s.eta_q(), self.fmt_z.eta_q(), self.m, self.d_v);
        self.s = s;
        self.z = z;
        self.tracker = tracker;
        self.t += 1;
        Ok(())
    }

    /// `o = phi(q)^T S / max(phi(q)^T Z, gamma_floor)`, computed in `f64` on
    /// dequantized registers.
    pub fn query(&self, fm: &FeatureMap, q: &[f64], gamma_floor: f64) -> Result<AttentionOutput> {
        let phi = fm.apply(q)?;
        self.query_features(&phi, gamma_floor)
    }

    pub fn query_features(&self, phi: &[f64], gamma_floor: f64) -> Result<AttentionOutput> {
        if self.t == 0 {
            return Err(Error::DegenerateNormalizer {
                normalizer: 0.0,
                floor: gamma_floor,
            });
        }
        if phi.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: phi.len(),
            });
        }
        let normalizer = dot(phi, &self.z_vector());
        let clamped = normalizer < gamma_floor;
        let den = if clamped { gamma_floor } else { normalizer };
        let s = self.s_matrix();
        let o = (0..self.d_v)
            .map(|c| phi.iter().zip(&s).map(|(p, row)| p * row[c]).sum::<f64>() / den)
            .collect();
        Ok(AttentionOutput { o, normalizer, clamped })
    }

    /// Element-wise checked sum of two partial states of the same flow.
    pub fn merge(&self, other: &AttentionState) -> Result<AttentionState> {
        if self.m != other.m || self.d_v != other.d_v {
            return Err(Error::DimensionMismatch {
                expected: self.m * self.d_v,
                got: other.m * other.d_v,
            });
        }
        if (self.fmt_s, self.fmt_z) != (other.fmt_s, other.fmt_z) {
            return Err(Error::FormatMismatch {
                left: format!("{}/{}", self.fmt_s, self.fmt_z),
                right: format!("{}/{}", other.fmt_s, other.fmt_z),
            });
        }
        let mut out = self.clone();
        for (idx, (a, b)) in out.s.iter_mut().zip(&other.s).enumerate() {
            let coord = RegisterCoord::S {
                row: idx / self.d_v,
                col: idx % self.d_v,
            };
            *a = accumulate_raw(*a, *b, self.fmt_s, self.policy, coord)?;
        }
        for (row, (a, b)) in out.z.iter_mut().zip(&other.z).enumerate() {
            *a = accumulate_raw(*a, *b, self.fmt_z, self.policy, RegisterCoord::Z { row })?;
        }
        out.t += other.t;
        out.tracker.merge(&other.tracker);
        Ok(out)
    }

    /// Versioned little-endian snapshot: header then row-major raw `S`, `Z`.
    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(SNAPSHOT_HEADER_LEN + 8 * (self.s.len() + self.z.len()));
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.m as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d_v as u32).to_le_bytes());
        buf.push(self.fmt_s.total_bits());
        buf.push(self.fmt_s.fraction_bits());
        buf.push(self.fmt_z.total_bits());
        buf.push(self.fmt_z.fraction_bits());
        buf.extend_from_slice(&self.t.to_le_bytes());
        for r in self.s.iter().chain(&self.z) {
            buf.extend_from_slice(&r.to_le_bytes());
        }
        buf
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(format!("state snapshot: {msg}"));
        if bytes.len() < SNAPSHOT_HEADER_LEN || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("missing header"));
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u16_at(4) != SNAPSHOT_VERSION {
            return Err(bad("unsupported version"));
        }
        let m = u32_at(6) as usize;
        let d_v = u32_at(10) as usize;
        let fmt_s = FixedPointFormat::new(bytes[14], bytes[15])?;
        let fmt_z = FixedPointFormat::new(bytes[16], bytes[17])?;
        let t = u64_at(18);
        let n = m * d_v + m;
        if bytes.len() != SNAPSHOT_HEADER_LEN + 8 * n {
            return Err(bad("length does not match header"));
        }
        let mut raws = (0..n).map(|i| {
            let o = SNAPSHOT_HEADER_LEN + 8 * i;
            i64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
        });
        let s: Vec<i64> = raws.by_ref().take(m * d_v).collect();
        let z: Vec<i64> = raws.collect();
        if s.iter().any(|&r| !fmt_s.contains_raw(r as i128)) || z.iter().any(|&r| !fmt_z.contains_raw(r as i128)) {
            return Err(bad("raw value outside register format"));
        }
        Ok(Self {
            m,
            d_v,
            fmt_s,
            fmt_z,
            policy: OverflowPolicy::Checked,
            s,
            z,
            t,
            tracker: ErrorTracker::default(),
        })
    }

    /// Registers equal, ignoring bookkeeping.
    pub fn same_registers(&self, other: &AttentionState) -> bool {
        self.s == other.s && self.z == other.z && self.t == other.t
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"NSAS";
const SNAPSHOT_VERSION: u16 = 1;
const SNAPSHOT_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 8;

fn out_of_range(x: f64, fmt: FixedPointFormat, coord: RegisterCoord) -> Error {
    let scaled = x * (fmt.fraction_bits() as f64).exp2();
    Error::Overflow {
        raw: if scaled.is_finite() { scaled as i128 } else { i128::MAX },
        format: fmt.to_string(),
        coord: Some(coord),
    }
}

/// Functional form: `state_init`.
pub fn state_init(m: usize, d_v: usize, fmt: FixedPointFormat) -> AttentionState {
    AttentionState::new(m, d_v, fmt)
}

/// Functional form: returns the updated state.
pub fn state_update(st: &AttentionState, fm: &FeatureMap, tok: &Token) -> Result<AttentionState> {
    let mut next = st.clone();
    next.update(fm, tok)?;
    Ok(next)
}

pub fn state_query(st: &AttentionState, fm: &FeatureMap, q: &[f64], gamma_floor: f64) -> Result<AttentionOutput> {
    st.query(fm, q, gamma_floor)
}
