//! Two-timescale adaptation: a line-rate EMA of token-to-centroid occupancy,
//! periodic reclustering under the table budget, and threshold-gated atomic
//! table installs.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key_selection::SignatureEncoder;
use crate::quantization::{quantize, FixedPointFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaTracker {
    pub c: Vec<f64>,
    pub eta: f64,
    pub updates: u64,
}

impl EmaTracker {
    pub fn new(k: usize, eta: f64, c0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
        }
        if !(0.0..=1.0).contains(&c0) {
            return Err(Error::InvalidBound(format!("initial occupancy {c0} outside [0, 1]")));
        }
        Ok(Self {
            c: vec![c0; k],
            eta,
            updates: 0,
        })
    }

    /// `C_j <- (1 - eta) C_j + eta u`.
    pub fn update(&mut self, j: usize, u: u8) -> Result<()> {
        let len = self.c.len();
        let cj = self.c.get_mut(j).ok_or(Error::IndexOutOfRange { index: j, len })?;
        *cj = (1.0 - self.eta) * *cj + self.eta * (u.min(1) as f64);
        self.updates += 1;
        Ok(())
    }

    /// One token: `u_j = 1` for the matched centroid, 0 for every other.
    pub fn observe(&mut self, matched: Option<usize>) -> Result<()> {
        if let Some(j) = matched {
            if j >= self.c.len() {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: self.c.len(),
                });
            }
        }
        for j in 0..self.c.len() {
            self.update(j, (Some(j) == matched) as u8)?;
        }
        Ok(())
    }

    /// `V(C) = sum_j (C_j - target_j)^2`.
    pub fn lyapunov(&self, target: &[f64]) -> f64 {
        self.c.iter().zip(target).map(|(c, u)| (c - u).powi(2)).sum()
    }
}

pub fn ema_update(tr: &EmaTracker, j: usize, u: u8) -> Result<EmaTracker> {
    let mut next = tr.clone();
    next.update(j, u)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub cost: f64,
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> Option<usize> {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sqdist(c, x)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j)
}

/// Lloyd iterations from a seeded k-means++ start (or `init` when given).
/// `k` is reduced to the number of distinct points.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, init: Option<&[Vec<f64>]>) -> Result<KMeans> {
    if points.is_empty() {
        return Err(Error::InvalidDimension("k-means needs at least one point".into()));
    }
    let distinct: BTreeSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
    let k = k.clamp(1, distinct.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = match init {
        Some(c) if !c.is_empty() => c.iter().take(k).cloned().collect(),
        _ => Vec::new(),
    };
    if centroids.is_empty() {
        centroids.push(points[rng.random_range(0..points.len())].clone());
    }
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sqdist(c, p)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        centroids.push(points[pick].clone());
    }
    let mut assignment = vec![0; points.len()];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let j = nearest(&centroids, p).unwrap();
            changed |= assignment[i] != j;
            assignment[i] = j;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            if counts[j] > 0 {
                *c = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    // drop empty clusters so every centroid owns at least one point
    let mut counts = vec![0usize; centroids.len()];
    for &j in &assignment {
        counts[j] += 1;
    }
    let keep: Vec<usize> = (0..centroids.len()).filter(|&j| counts[j] > 0).collect();
    let centroids: Vec<Vec<f64>> = keep.iter().map(|&j| centroids[j].clone()).collect();
    let assignment: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).unwrap()).collect();
    let cost = points
        .iter()
        .zip(&assignment)
        .map(|(p, &j)| sqdist(p, &centroids[j]))
        .sum();
    Ok(KMeans {
        centroids,
        assignment,
        cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub centroid: Vec<f64>,
    /// Bucketed signature of the centroid: `(value, mask)`.
    pub range: (u128, u128),
    /// Centroid coordinates as raw fixed-point values.
    pub payload: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingTable {
    pub entries: Vec<MappingEntry>,
    pub format: FixedPointFormat,
    /// Bits per entry: one quantized coordinate per dimension.
    pub bitwidth: u64,
}

impl MappingTable {
    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn total_bits(&self) -> u64 {
        self.n_entries() as u64 * self.bitwidth
    }

    pub fn centroids(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.centroid.clone()).collect()
    }

    pub fn matched(&self, x: &[f64]) -> Option<usize> {
        nearest(&self.entries.iter().map(|e| e.centroid.clone()).collect::<Vec<_>>(), x)
    }

    fn encodings(&self) -> BTreeSet<(u128, u128)> {
        self.entries.iter().map(|e| e.range).collect()
    }

    pub fn from_centroids(
        centroids: Vec<Vec<f64>>,
        format: FixedPointFormat,
        encoder: &SignatureEncoder,
    ) -> Result<Self> {
        let dim = centroids.first().map_or(0, |c| c.len());
        let entries = centroids
            .into_iter()
            .map(|c| {
                let sig = encoder.encode(&c)?;
                let mask = if c.len() * 4 >= 128 {
                    u128::MAX
                } else {
                    (1u128 << (4 * c.len())) - 1
                };
                let payload = c
                    .iter()
                    .map(|&x| quantize(x, format).map(|q| q.raw()))
                    .collect::<Result<_>>()?;
                Ok(MappingEntry {
                    centroid: c,
                    range: (sig, mask),
                    payload,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            format,
            bitwidth: dim as u64 * format.total_bits() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReclusterConfig {
    pub k_max: usize,
    pub format: FixedPointFormat,
    pub m_tbl: u64,
    pub seed: u64,
    pub max_iters: usize,
    /// Extra seeded k-means++ starts; the lowest-cost run wins.
    pub restarts: usize,
    /// Previous centroids whose occupancy falls below this are not reused
    /// as starting points.
    pub min_occupancy: f64,
}

/// k-means with `k` lowered until `k * bitwidth <= M_tbl`. Centroids of the
/// previous table that kept at least `min_occupancy` seed the new run.
pub fn recluster(
    prev: Option<(&MappingTable, &EmaTracker)>,
    samples: &[Vec<f64>],
    cfg: &ReclusterConfig,
    encoder: &SignatureEncoder,
) -> Result<MappingTable> {
    if samples.is_empty() {
        return Err(Error::InvalidDimension("recluster needs samples".into()));
    }
    let bitwidth = samples[0].len() as u64 * cfg.format.total_bits() as u64;
    if bitwidth > cfg.m_tbl {
        return Err(Error::BudgetExceeded {
            required_bits: bitwidth,
            budget_bits: cfg.m_tbl,
        });
    }
    let k = cfg.k_max.min((cfg.m_tbl / bitwidth) as usize).max(1);
    let warm: Option<Vec<Vec<f64>>> = prev.map(|(t, ema)| {
        t.entries
            .iter()
            .zip(&ema.c)
            .filter(|(_, &c)| c >= cfg.min_occupancy)
            .map(|(e, _)| e.centroid.clone())
            .collect()
    });
    let mut km = kmeans(samples, k, cfg.seed, cfg.max_iters, warm.as_deref())?;
    for r in 1..=cfg.restarts as u64 {
        let alt = kmeans(samples, k, cfg.seed.wrapping_add(r), cfg.max_iters, None)?;
        if alt.cost < km.cost - 1e-12 {
            km = alt;
        }
    }
    let table = MappingTable::from_centroids(km.centroids, cfg.format, encoder)?;
    debug_assert!(table.total_bits() <= cfg.m_tbl);
    Ok(table)
}

/// Jaccard distance between the sets of range encodings.
pub fn map_delta(old: &MappingTable, new: &MappingTable) -> f64 {
    let a = old.encodings();
    let b = new.encodings();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CadenceConfig {
    pub t_cp_s: f64,
    pub tau_map: f64,
    /// Entries installed per second.
    pub install_rate: f64,
}

impl Default for CadenceConfig {
    fn default() -> Self {
        Self {
            t_cp_s: 60.0,
            tau_map: 0.05,
            install_rate: 2.0e5,
        }
    }
}

impl CadenceConfig {
    pub fn t_cp_ns(&self) -> u64 {
        (self.t_cp_s * 1e9).round() as u64
    }

    /// `n_entries / rate`, in nanoseconds.
    pub fn install_duration_ns(&self, n_entries: usize) -> u64 {
        (n_entries as f64 / self.install_rate * 1e9).round() as u64
    }

    /// `dt_install / T_cp`.
    pub fn budget_ratio(&self, n_entries: usize) -> f64 {
        self.install_duration_ns(n_entries) as f64 / self.t_cp_ns() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstallEvent {
    pub start_ts: u64,
    pub duration: u64,
    pub n_entries: usize,
    pub delta_map: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstallDecision {
    Accepted,
    SkippedBelowThreshold,
    RejectedAtomicity,
}

pub fn try_install(ev: &InstallEvent, cfg: &CadenceConfig) -> InstallDecision {
    if !(ev.delta_map > cfg.tau_map) {
        InstallDecision::SkippedBelowThreshold
    } else if ev.duration >= cfg.t_cp_ns() {
        InstallDecision::RejectedAtomicity
    } else {
        InstallDecision::Accepted
    }
}

/// A published table snapshot. Readers clone the `Arc` at ingress and keep
/// that version for the whole packet.
#[derive(Debug)]
pub struct Snapshot<T> {
    pub version: u64,
    pub table: Arc<T>,
}

impl<T> Clone for Snapshot<T> {
    fn clone(&self) -> Self {
        Self {
            version: self.version,
            table: Arc::clone(&self.table),
        }
    }
}

/// Shadow-table installer: a new snapshot becomes visible only at the swap
/// instant, so each reader observes exactly one version.
#[derive(Debug, Clone)]
pub struct ShadowInstaller<T> {
    live: Snapshot<T>,
    pending: Option<(u64, Arc<T>)>,
}

impl<T> ShadowInstaller<T> {
    pub fn new(table: T) -> Self {
        Self {
            live: Snapshot {
                version: 0,
                table: Arc::new(table),
            },
            pending: None,
        }
    }

    /// Stage `table` to become live at `swap_ts`, replacing any pending one.
    pub fn stage(&mut self, table: T, swap_ts: u64) {
        self.pending = Some((swap_ts, Arc::new(table)));
    }

    pub fn pending_swap(&self) -> Option<u64> {
        self.pending.as_ref().map(|(t, _)| *t)
    }

    /// Apply a pending swap whose instant is `<= now`. Returns true on swap.
    pub fn advance(&mut self, now: u64) -> bool {
        match &self.pending {
            Some((at, _)) if *at <= now => {
                let (_, table) = self.pending.take().unwrap();
                self.live = Snapshot {
                    version: self.live.version + 1,
                    table,
                };
                true
            }
            _ => false,
        }
    }

    pub fn read(&self) -> Snapshot<T> {
        self.live.clone()
    }

    pub fn version(&self) -> u64 {
        self.live.version
    }
}

/// Independent Bernoulli occupancies per centroid, optionally switching to
/// new probabilities at a given step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyProcess {
    pub probs: Vec<f64>,
    pub change: Option<(u64, Vec<f64>)>,
}

impl OccupancyProcess {
    pub fn stationary(p: f64, k: usize) -> Self {
        Self {
            probs: vec![p; k],
            change: None,
        }
    }

    pub fn probs_at(&self, step: u64) -> &[f64] {
        match &self.change {
            Some((at, p)) if step >= *at => p,
            _ => &self.probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRun {
    /// Mean of `C_j` over centroids after each step.
    pub mean_c: Vec<f64>,
    /// `V(C)` against the process means after each step, starting with the
    /// initial state.
    pub v: Vec<f64>,
    pub final_c: Vec<f64>,
    /// Every `C_j` per step, row-major by step.
    pub c: Vec<Vec<f64>>,
}

/// Fast loop alone: EMA over a Bernoulli occupancy process.
pub fn run_occupancy(process: &OccupancyProcess, eta: f64, c0: f64, steps: u64, seed: u64) -> Result<OccupancyRun> {
    let k = process.probs.len();
    let mut tr = EmaTracker::new(k, eta, c0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = OccupancyRun {
        mean_c: Vec::with_capacity(steps as usize),
        v: Vec::with_capacity(steps as usize + 1),
        final_c: Vec::new(),
        c: Vec::with_capacity(steps as usize),
    };
    run.v.push(tr.lyapunov(process.probs_at(0)));
    for t in 0..steps {
        let p = process.probs_at(t).to_vec();
        for (j, pj) in p.iter().enumerate() {
            let u = (rng.random::<f64>() < *pj) as u8;
            tr.update(j, u)?;
        }
        run.v.push(tr.lyapunov(&p));
        run.mean_c.push(tr.c.iter().sum::<f64>() / k.max(1) as f64);
        run.c.push(tr.c.clone());
    }
    run.final_c = tr.c;
    Ok(run)
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub mean: f64,
    /// Standard error of `mean`, inflated for the AR(1) correlation of the
    /// EMA.
    pub mean_stderr: f64,
    pub variance: f64,
    /// `eta sigma_u^2 / (2 - eta)`.
    pub predicted_variance: f64,
    /// Regression slope of `V(t)` on `V(t-1)`.
    pub contraction_slope: f64,
    /// `1 - eta (2 - eta)`.
    pub contraction_bound: f64,
}

/// Steady-state statistics of a stationary run after `burn_in` steps.
pub fn steady_state(run: &OccupancyRun, p: f64, eta: f64, burn_in: usize) -> SteadyState {
    let tail: Vec<f64> = run.c.iter().skip(burn_in).flatten().copied().collect();
    let n = tail.len().max(1) as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let variance = tail.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let rho = 1.0 - eta;
    let mean_stderr = (variance * (1.0 + rho) / (1.0 - rho).max(1e-12) / n).sqrt();
    let x = &run.v[..run.v.len() - 1];
    let y = &run.v[1..];
    SteadyState {
        mean,
        mean_stderr,
        variance,
        predicted_variance: eta * p * (1.0 - p) / (2.0 - eta),
        contraction_slope: ols_slope(x, y),
        contraction_bound: 1.0 - eta * (2.0 - eta),
    }
}

/// First step after `from` at which the mean error falls to half its value
/// at `from`.
pub fn time_to_half_error(mean_c: &[f64], from: usize, target: f64) -> Option<usize> {
    let start = (mean_c.get(from.checked_sub(1)?)? - target).abs();
    mean_c[from..]
        .iter()
        .position(|c| (c - target).abs() <= start / 2.0)
        .map(|i| i + 1)
}

/// `ln 2 / -ln(1 - eta)`.
pub fn predicted_half_life(eta: f64) -> f64 {
    std::f64::consts::LN_2 / -(1.0 - eta).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlLoopConfig {
    pub eta: f64,
    pub t_cp_s: f64,
    pub tau_map: f64,
    /// Entries installed per second.
    pub install_rate: f64,
    pub k_max: usize,
    pub format: FixedPointFormat,
    pub m_tbl: u64,
    /// Entry count charged to each install instead of the table size.
    pub install_entries: Option<usize>,
    /// Most recent token features kept for reclustering.
    pub sample_window: usize,
    pub horizon_s: f64,
    pub seed: u64,
}

impl Default for ControlLoopConfig {
    fn default() -> Self {
        let c = CadenceConfig::default();
        Self {
            eta: 0.10,
            t_cp_s: c.t_cp_s,
            tau_map: c.tau_map,
            install_rate: c.install_rate,
            k_max: 16,
            format: FixedPointFormat::new(16, 8).unwrap(),
            m_tbl: 1 << 20,
            install_entries: None,
            sample_window: 2048,
            horizon_s: 600.0,
            seed: 0,
        }
    }
}

impl ControlLoopConfig {
    pub fn cadence(&self) -> CadenceConfig {
        CadenceConfig {
            t_cp_s: self.t_cp_s,
            tau_map: self.tau_map,
            install_rate: self.install_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "cadence.eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if !(self.t_cp_s > 0.0) || !(self.install_rate > 0.0) || !(self.horizon_s >= 0.0) {
            return Err(Error::Config("cadence.t_cp_s and install_rate must be positive".into()));
        }
        if self.k_max == 0 || self.sample_window == 0 {
            return Err(Error::Config("cadence.k_max and sample_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallRecord {
    pub epoch: u64,
    pub decision: InstallDecision,
    pub event: InstallEvent,
    /// Live version once this install completes, if it was accepted.
    pub version_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub ts: u64,
    pub v: f64,
    pub installs: u64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub eta: f64,
    pub t_cp_s: f64,
    pub tau_map: f64,
    pub install_rate: f64,
    pub steps: u64,
    pub epochs: u64,
    pub installs_accepted: u64,
    pub installs_skipped: u64,
    pub installs_rejected: u64,
    /// `dt_install` charged to a nominal install, in milliseconds.
    pub install_ms: f64,
    /// `dt_install / T_cp`.
    pub budget_ratio: f64,
    pub mean_v: f64,
    pub steady_mean_v: f64,
    pub contraction_slope: f64,
    pub contraction_bound: f64,
    /// Packets whose lookups saw more than one table version.
    pub mixed_version_packets: u64,
    /// `[swap_start, swap_end]` intervals of accepted installs, ns.
    pub churn_windows: Vec<(u64, u64)>,
    pub events: Vec<InstallRecord>,
    #[serde(skip)]
    pub trajectory: Vec<TrajectoryPoint>,
}

impl StabilityReport {
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("step,ts_ns,v,installs,version\n");
        for p in &self.trajectory {
            s.push_str(&format!(
                "{},{},{:.9},{},{}\n",
                p.step, p.ts, p.v, p.installs, p.version
            ));
        }
        s
    }
}

/// Fast EMA plus slow recluster/install over a timestamped token stream.
///
/// Every packet binds the live mapping snapshot at ingress. Every `T_cp` the
/// control plane reclusters the recent tokens, measures `Δ_map` against the
/// live table and, if the install is accepted, swaps the new table in at
/// `start + dt_install`. The EMA targets are the per-version empirical
/// occupancies.
pub fn run_two_timescale(
    tokens: &[(u64, Vec<f64>)],
    cfg: &ControlLoopConfig,
    encoder: &SignatureEncoder,
    horizon_ns: u64,
) -> Result<StabilityReport> {
    cfg.validate()?;
    let cadence = cfg.cadence();
    let rc = ReclusterConfig {
        k_max: cfg.k_max,
        format: cfg.format,
        m_tbl: cfg.m_tbl,
        seed: cfg.seed,
        max_iters: 25,
        restarts: 2,
        min_occupancy: 0.0,
    };
    let nominal_entries = cfg.install_entries.unwrap_or(cfg.k_max);
    let mut report = StabilityReport {
        eta: cfg.eta,
        t_cp_s: cadence.t_cp_s,
        tau_map: cadence.tau_map,
        install_rate: cadence.install_rate,
        steps: 0,
        epochs: 0,
        installs_accepted: 0,
        installs_skipped: 0,
        installs_rejected: 0,
        install_ms: cadence.install_duration_ns(nominal_entries) as f64 / 1e6,
        budget_ratio: cadence.budget_ratio(nominal_entries),
        mean_v: 0.0,
        steady_mean_v: 0.0,
        contraction_slope: f64::NAN,
        contraction_bound: 1.0 - cfg.eta * (2.0 - cfg.eta),
        mixed_version_packets: 0,
        churn_windows: Vec::new(),
        events: Vec::new(),
        trajectory: Vec::new(),
    };
    let stream: Vec<&(u64, Vec<f64>)> = tokens.iter().filter(|(ts, _)| *ts < horizon_ns).collect();
    if stream.is_empty() {
        return Ok(report);
    }
    let t_cp = cadence.t_cp_ns().max(1);
    let first_window: Vec<Vec<f64>> = stream.iter().take(cfg.sample_window).map(|(_, x)| x.clone()).collect();
    let initial = recluster(None, &first_window, &rc, encoder)?;
    let mut ema = EmaTracker::new(initial.n_entries(), cfg.eta, 1.0 / initial.n_entries() as f64)?;
    let mut hits = vec![0u64; initial.n_entries()];
    let mut seen = 0u64;
    let mut installer = ShadowInstaller::new(initial);
    let mut recent: std::collections::VecDeque<Vec<f64>> = std::collections::VecDeque::new();
    let mut next_epoch = t_cp;
    let mut v_sum = 0.0;
    let mut vs = Vec::with_capacity(stream.len());

    for (step, (ts, x)) in stream.iter().enumerate() {
        // control-plane epochs due before this packet
        while next_epoch <= *ts {
            report.epochs += 1;
            let epoch_ts = next_epoch;
            next_epoch += t_cp;
            if installer.advance(epoch_ts) {
                // a swap pending from the previous epoch completes first
            }
            if recent.is_empty() {
                continue;
            }
            let live = installer.read();
            let samples: Vec<Vec<f64>> = recent.iter().cloned().collect();
            let new = recluster(Some((&live.table, &ema)), &samples, &rc, encoder)?;
            let delta = map_delta(&live.table, &new);
            let n_entries = cfg.install_entries.unwrap_or(new.n_entries());
            let ev = InstallEvent {
                start_ts: epoch_ts,
                duration: cadence.install_duration_ns(n_entries),
                n_entries,
                delta_map: delta,
            };
            let decision = try_install(&ev, &cadence);
            let mut version_after = None;
            match decision {
                InstallDecision::Accepted => {
                    report.installs_accepted += 1;
                    let swap = ev.start_ts + ev.duration;
                    report.churn_windows.push((ev.start_ts, swap));
                    installer.stage(new, swap);
                    version_after = Some(installer.version() + 1);
                }
                InstallDecision::SkippedBelowThreshold => report.installs_skipped += 1,
                InstallDecision::RejectedAtomicity => report.installs_rejected += 1,
            }
            report.events.push(InstallRecord {
                epoch: report.epochs,
                decision,
                event: ev,
                version_after,
            });
        }
        if installer.advance(*ts) {
            let k = installer.read().table.n_entries();
            ema = EmaTracker::new(k, cfg.eta, 1.0 / k as f64)?;
            hits = vec![0; k];
            seen = 0;
        }
        // ingress binds one snapshot for the whole packet
        let snap = installer.read();
        let matched = snap.table.matched(x);
        let egress_version = snap.version;
        if egress_version != installer.version() {
            report.mixed_version_packets += 1;
        }
        ema.observe(matched)?;
        if let Some(j) = matched {
            hits[j] += 1;
        }
        seen += 1;
        let target: Vec<f64> = hits.iter().map(|&h| h as f64 / seen as f64).collect();
        let v = ema.lyapunov(&target);
        v_sum += v;
        vs.push(v);
        report.trajectory.push(TrajectoryPoint {
            step: step as u64,
            ts: *ts,
            v,
            installs: report.installs_accepted,
            version: snap.version,
        });
        recent.push_back(x.clone());
        if recent.len() > cfg.sample_window {
            recent.pop_front();
        }
    }
    report.steps = stream.len() as u64;
    report.mean_v = v_sum / stream.len() as f64;
    let half = vs.len() / 2;
    report.steady_mean_v = vs[half..].iter().sum::<f64>() / (vs.len() - half).max(1) as f64;
    if vs.len() > 2 {
        report.contraction_slope = ols_slope(&vs[..vs.len() - 1], &vs[1..]);
    }
    Ok(report)
}

/// Published budget ratios of the stability table, in percent, keyed by
/// `T_cp` seconds.
pub const PRINTED_BUDGET_RATIO_PCT: [(f64, f64); 4] = [(10.0, 0.45), (60.0, 0.08), (300.0, 0.017), (1800.0, 0.003)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadenceRow {
    pub eta: f64,
    pub t_cp_s: f64,
    pub memory_depth: f64,
    pub install_ms: f64,
    pub budget_ratio_pct: f64,
    pub printed_pct: Option<f64>,
    /// Our ratio rounded to the printed precision equals the printed value.
    pub matches_printed: Option<bool>,
}

fn decimals(x: f64) -> i32 {
    let s = format!("{x}");
    s.split_once('.').map_or(0, |(_, f)| f.len() as i32)
}

pub fn cadence_table(etas: &[f64], t_cps: &[f64], n_entries: usize, install_rate: f64) -> Vec<CadenceRow> {
    let mut rows = Vec::new();
    for &eta in etas {
        for &t_cp_s in t_cps {
            let cfg = CadenceConfig {
                t_cp_s,
                tau_map: 0.0,
                install_rate,
            };
            let pct = cfg.budget_ratio(n_entries) * 100.0;
            let printed = PRINTED_BUDGET_RATIO_PCT
                .iter()
                .find(|(t, _)| *t == t_cp_s)
                .map(|(_, p)| *p);
            let matches = printed.map(|p| {
                let scale = 10f64.powi(decimals(p));
                ((pct * scale).round() - (p * scale).round()).abs() < 0.5
            });
            rows.push(CadenceRow {
                eta,
                t_cp_s,
                memory_depth: 1.0 / eta,
                install_ms: cfg.install_duration_ns(n_entries) as f64 / 1e6,
                budget_ratio_pct: pct,
                printed_pct: printed,
                matches_printed: matches,
            });
        }
    }
    rows
}
