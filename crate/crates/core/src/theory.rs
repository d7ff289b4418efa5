//! Empirical checks of the approximation, quantization, coverage and
//! stability guarantees. Each check reports measured values next to the bound
//! they are compared with.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{exact_attention, linear_attention_detail, AttentionState, Token};
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::control_plane::{run_occupancy, steady_state, OccupancyProcess};
use crate::error::{Error, Result};
use crate::features::{kernel_exact, required_m, FeatureKind, FeatureMap};
use crate::key_selection::{coverage_margin, retained_mass, select_keys, GlobalIndex, LocalWindow};
use crate::linalg;
use crate::quantization::{register_overflow_horizon, OverflowPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryCheck {
    Kernel,
    Spectral,
    Quantization,
    Coverage,
    Ema,
    All,
}

impl TheoryCheck {
    pub const EACH: [TheoryCheck; 5] = [
        TheoryCheck::Kernel,
        TheoryCheck::Spectral,
        TheoryCheck::Quantization,
        TheoryCheck::Coverage,
        TheoryCheck::Ema,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TheoryCheck::Kernel => "kernel",
            TheoryCheck::Spectral => "spectral",
            TheoryCheck::Quantization => "quantization",
            TheoryCheck::Coverage => "coverage",
            TheoryCheck::Ema => "ema",
            TheoryCheck::All => "all",
        }
    }
}

impl fmt::Display for TheoryCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TheoryCheck {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::EACH
            .iter()
            .chain([TheoryCheck::All].iter())
            .find(|c| c.as_str() == s)
            .copied()
            .ok_or_else(|| Error::Parse(format!("unknown theory check `{s}`")))
    }
}

/// How a measured value is compared with its bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    /// Reported for context, never fails.
    #[serde(rename = "info")]
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub measured: f64,
    pub bound: Option<f64>,
    pub relation: Relation,
    pub pass: bool,
}

impl Metric {
    pub fn at_most(name: &str, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: Some(bound),
            relation: Relation::AtMost,
            pass: measured <= bound,
        }
    }

    pub fn at_least(name: &str, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: Some(bound),
            relation: Relation::AtLeast,
            pass: measured >= bound,
        }
    }

    pub fn info(name: &str, measured: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: None,
            relation: Relation::Info,
            pass: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: TheoryCheck,
    pub pass: bool,
    pub metrics: Vec<Metric>,
    pub notes: Vec<String>,
}

impl CheckReport {
    fn new(check: TheoryCheck, metrics: Vec<Metric>, notes: Vec<String>) -> Self {
        Self {
            check,
            pass: metrics.iter().all(|m| m.pass),
            metrics,
            notes,
        }
    }

    pub fn metric(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<CheckReport>,
}

impl TheoryReport {
    pub fn check(&self, which: TheoryCheck) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.check == which)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{}: {}\n", c.check, if c.pass { "PASS" } else { "FAIL" }));
            for m in &c.metrics {
                let rel = match (m.relation, m.bound) {
                    (Relation::AtMost, Some(b)) => format!(" <= {b:.6e}"),
                    (Relation::AtLeast, Some(b)) => format!(" >= {b:.6e}"),
                    _ => String::new(),
                };
                let flag = match m.relation {
                    Relation::Info => "",
                    _ if m.pass => "  ok",
                    _ => "  VIOLATED",
                };
                out.push_str(&format!("  {:<34} {:.6e}{rel}{flag}\n", m.name, m.measured));
            }
            for n in &c.notes {
                out.push_str(&format!("  note: {n}\n"));
            }
        }
        out.push_str(&format!("overall: {}\n", if self.pass { "PASS" } else { "FAIL" }));
        out
    }
}

/// Run one check, or all of them in a fixed order.
pub fn theory_check(which: TheoryCheck, cfg: &RunConfig) -> Result<TheoryReport> {
    let list: Vec<TheoryCheck> = match which {
        TheoryCheck::All => TheoryCheck::EACH.to_vec(),
        one => vec![one],
    };
    let seed = cfg.theory_seed();
    let checks = list
        .into_iter()
        .map(|c| match c {
            TheoryCheck::Kernel => check_kernel(cfg, seed),
            TheoryCheck::Spectral => check_spectral(cfg, seed),
            TheoryCheck::Quantization => check_quantization(cfg, seed),
            TheoryCheck::Coverage => check_coverage(cfg, seed),
            TheoryCheck::Ema => check_ema(cfg, seed),
            TheoryCheck::All => unreachable!(),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoryReport {
        schema_version: SCHEMA_VERSION.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

fn rng_for(seed: u64, check: TheoryCheck) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((check as u64 + 1) << 56))
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Uniform draw from the `d`-ball of radius `r`.
pub fn sample_ball(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    let mut x = gaussian(rng, d);
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = r * rng.random::<f64>().powf(1.0 / d as f64);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v *= radius / n);
    }
    x
}

/// Share of random pairs in a small ball whose clipped-PRF kernel estimate is
/// off by at least `eps`, with `m` from [`required_m`].
pub fn check_kernel(cfg: &RunConfig, seed: u64) -> Result<CheckReport> {
    let t = &cfg.theory;
    let m = required_m(t.kernel_c, t.kernel_eps, t.kernel_pairs as u64, t.kernel_delta)? as usize;
    let mut rng = rng_for(seed, TheoryCheck::Kernel);
    let mut worst: f64 = 0.0;
    let mut total_bad = 0usize;
    let mut max_err: f64 = 0.0;
    for _ in 0..t.kernel_reps {
        let fm = FeatureMap::new(FeatureKind::ClippedPrf, m, t.kernel_d, rng.random(), t.kernel_c)?;
        let mut bad = 0usize;
        for _ in 0..t.kernel_pairs {
            let q = sample_ball(&mut rng, t.kernel_d, t.kernel_radius);
            let k = sample_ball(&mut rng, t.kernel_d, t.kernel_radius);
            let est: f64 = fm.apply(&q)?.iter().zip(fm.apply(&k)?).map(|(a, b)| a * b).sum();
            let err = (est - kernel_exact(&q, &k, t.kernel_d)?).abs();
            max_err = max_err.max(err);
            bad += (err >= t.kernel_eps) as usize;
        }
        total_bad += bad;
        worst = worst.max(bad as f64 / t.kernel_pairs.max(1) as f64);
    }
    let pooled = total_bad as f64 / (t.kernel_pairs * t.kernel_reps).max(1) as f64;
    Ok(CheckReport::new(
        TheoryCheck::Kernel,
        vec![
            Metric::info("m", m as f64),
            Metric::at_most("worst_repetition_failure_rate", worst, 2.0 * t.kernel_delta),
            Metric::at_most("pooled_failure_rate", pooled, 2.0 * t.kernel_delta),
            Metric::info("max_abs_kernel_error", max_err),
        ],
        vec![format!(
            "{} repetitions of {} pairs drawn uniformly from the radius-{} ball in d={}",
            t.kernel_reps, t.kernel_pairs, t.kernel_radius, t.kernel_d
        )],
    ))
}

/// Spectral-norm gap between exact and linearized attention against the
/// bound evaluated at the measured `eps` and `gamma`.
pub fn check_spectral(cfg: &RunConfig, seed: u64) -> Result<CheckReport> {
    let t = &cfg.theory;
    let mut rng = rng_for(seed, TheoryCheck::Spectral);
    let mut worst_ratio: f64 = 0.0;
    let mut failures = 0usize;
    let mut max_gap: f64 = 0.0;
    for _ in 0..t.spectral_instances {
        let tt = rng.random_range(1..=t.spectral_t_max.max(1));
        let d = rng.random_range(1..=t.spectral_d_max.max(1));
        let d_v = rng.random_range(1..=4usize);
        let r = (d as f64).sqrt();
        let fm = FeatureMap::new(FeatureKind::PositiveRandomFeatures, t.spectral_m, d, rng.random(), 1.0)?;
        let q: Vec<Vec<f64>> = (0..tt).map(|_| sample_ball(&mut rng, d, r)).collect();
        let k: Vec<Vec<f64>> = (0..tt).map(|_| sample_ball(&mut rng, d, r)).collect();
        let v: Vec<Vec<f64>> = (0..tt).map(|_| gaussian(&mut rng, d_v)).collect();
        let gap = spectral_gap(&fm, &q, &k, &v)?;
        max_gap = max_gap.max(gap.error);
        let ratio = if gap.bound > 0.0 {
            gap.error / gap.bound
        } else {
            f64::INFINITY
        };
        if gap.error > gap.bound {
            failures += 1;
        }
        worst_ratio = worst_ratio.max(ratio);
    }
    Ok(CheckReport::new(
        TheoryCheck::Spectral,
        vec![
            Metric::at_most("instances_over_bound", failures as f64, 0.0),
            Metric::at_most("worst_error_to_bound_ratio", worst_ratio, 1.0),
            Metric::info("max_spectral_error", max_gap),
        ],
        vec![format!(
            "{} instances, T <= {}, d <= {}, m = {}; gamma is the smaller of the exact and linearized row normalizers",
            t.spectral_instances, t.spectral_t_max, t.spectral_d_max, t.spectral_m
        )],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralGap {
    pub error: f64,
    pub bound: f64,
    pub eps: f64,
    pub gamma: f64,
}

/// Measured `|Attn - Attn~|_2` and the bound at measured `eps`, `gamma`.
pub fn spectral_gap(fm: &FeatureMap, q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Result<SpectralGap> {
    let d = fm.d();
    let exact = exact_attention(q, k, v, d)?;
    let lin = linear_attention_detail(fm, q, k, v, f64::MIN_POSITIVE)?;
    let phi_q = q.iter().map(|x| fm.apply(x)).collect::<Result<Vec<_>>>()?;
    let phi_k = k.iter().map(|x| fm.apply(x)).collect::<Result<Vec<_>>>()?;
    let mut eps: f64 = 0.0;
    let mut gamma = f64::INFINITY;
    for (i, qi) in q.iter().enumerate() {
        let mut row_exact = 0.0;
        for (j, kj) in k.iter().enumerate() {
            let ex = kernel_exact(qi, kj, d)?;
            let est: f64 = phi_q[i].iter().zip(&phi_k[j]).map(|(a, b)| a * b).sum();
            eps = eps.max((est - ex).abs());
            row_exact += ex;
        }
        gamma = gamma.min(row_exact).min(lin.normalizers[i]);
    }
    let diff: Vec<Vec<f64>> = exact
        .iter()
        .zip(&lin.rows)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    Ok(SpectralGap {
        error: linalg::spectral_norm(&diff),
        bound: crate::attention::spectral_error_bound(q.len(), eps, gamma, v),
        eps,
        gamma,
    })
}

/// Fixed-point drift against real accumulation up to the overflow horizon,
/// and a forced overflow beyond it.
pub fn check_quantization(cfg: &RunConfig, seed: u64) -> Result<CheckReport> {
    let t = &cfg.theory;
    let fmt = t.quant_format;
    let (m, d_v, d) = (t.quant_m, t.quant_d_v, cfg.theory.kernel_d);
    let (r, r_v) = (1.0, 1.0);
    let clip = cfg.features.clip_bound;
    let mut rng = rng_for(seed, TheoryCheck::Quantization);
    let mut overflows = 0usize;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_drift: f64 = 0.0;
    let mut worst_z_ratio: f64 = 0.0;
    let mut horizon = u64::MAX;
    let mut steps_run = 0u64;
    for _ in 0..t.quant_runs {
        let fm = FeatureMap::new(FeatureKind::ClippedPrf, m, d, rng.random(), clip)?;
        let b_phi = fm.feature_norm_bound(r);
        let h = register_overflow_horizon(fmt, b_phi, r_v, m, d_v);
        horizon = horizon.min(h);
        let steps = t.quant_t.min(h);
        steps_run = steps_run.max(steps);
        let mut st = AttentionState::new(m, d_v, fmt);
        st.set_policy(OverflowPolicy::Checked);
        let mut exact_s = vec![0.0; m * d_v];
        let mut exact_z = vec![0.0; m];
        for step in 1..=steps {
            let key = sample_ball(&mut rng, d, r);
            let value = sample_ball(&mut rng, d_v, r_v);
            let phi = fm.apply(&key)?;
            if st.absorb(&phi, &value).is_err() {
                overflows += 1;
                break;
            }
            for (i, p) in phi.iter().enumerate() {
                exact_z[i] += p;
                for (j, vj) in value.iter().enumerate() {
                    exact_s[i * d_v + j] += p * vj;
                }
            }
            let lsb_s = fmt.lsb();
            let drift = st
                .s_raw()
                .iter()
                .zip(&exact_s)
                .map(|(&raw, e)| (raw as f64 * lsb_s - e).powi(2))
                .sum::<f64>()
                .sqrt();
            let z_drift = st
                .z_raw()
                .iter()
                .zip(&exact_z)
                .map(|(&raw, e)| (raw as f64 * lsb_s - e).powi(2))
                .sum::<f64>()
                .sqrt();
            let bound = step as f64 * fmt.eta_q() * (m * d_v) as f64;
            worst_ratio = worst_ratio.max(drift / bound);
            worst_z_ratio = worst_z_ratio.max(z_drift / (step as f64 * fmt.eta_q() * m as f64));
            worst_drift = worst_drift.max(drift);
        }
    }
    let forced = forced_overflow(cfg, seed)?;
    Ok(CheckReport::new(
        TheoryCheck::Quantization,
        vec![
            Metric::info("overflow_horizon", horizon as f64),
            Metric::info("steps_per_run", steps_run as f64),
            Metric::at_most("overflow_errors_within_horizon", overflows as f64, 0.0),
            Metric::at_most("worst_drift_to_bound_ratio", worst_ratio, 1.0),
            Metric::at_most("worst_normalizer_drift_ratio", worst_z_ratio, 1.0),
            Metric::info("max_frobenius_drift", worst_drift),
            Metric::info("forced_margin", forced.margin as f64),
            Metric::at_least("forced_overflow_errors", forced.overflows as f64, 1.0),
        ],
        vec![format!(
            "{} runs in {fmt}, m={m}, d_v={d_v}, keys in the unit ball, clipped PRF with C={clip}; the forced run repeats one max-norm token",
            t.quant_runs
        )],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedOverflow {
    pub horizon: u64,
    /// Steps beyond the horizon the adversarial run took.
    pub margin: u64,
    pub overflows: usize,
    /// Step at which the first overflow surfaced.
    pub at_step: Option<u64>,
}

/// Repeat the token whose increment to one register is largest until the
/// register overflows.
pub fn forced_overflow(cfg: &RunConfig, seed: u64) -> Result<ForcedOverflow> {
    let t = &cfg.theory;
    let fmt = t.quant_format;
    let (m, d_v, d) = (t.quant_m, t.quant_d_v, t.kernel_d);
    let r = 1.0;
    let mut rng = rng_for(seed ^ 1, TheoryCheck::Quantization);
    let fm = FeatureMap::new(FeatureKind::ClippedPrf, m, d, rng.random(), cfg.features.clip_bound)?;
    let horizon = register_overflow_horizon(fmt, fm.feature_norm_bound(r), 1.0, m, d_v);
    // The peak of phi_j lies along omega_j; keep it inside the radius.
    let mut best = (0.0, vec![0.0; d]);
    for j in 0..m {
        let w = fm.omega_row(j);
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        let len = (n * (d as f64).powf(0.25)).min(r);
        let key: Vec<f64> = w.iter().map(|x| x / n * len).collect();
        let phi = fm.apply(&key)?;
        if phi[j] > best.0 {
            best = (phi[j], key);
        }
    }
    let mut value = vec![0.0; d_v];
    value[0] = 1.0;
    let tok = Token::new(0, best.1, value);
    let inc = (best.0 / fmt.lsb()).round().max(1.0);
    let needed = (fmt.max_raw() as f64 / inc).floor() as u64 + 1;
    let steps = needed.max(horizon + 1);
    let mut st = AttentionState::new(m, d_v, fmt);
    st.set_policy(OverflowPolicy::Checked);
    let mut overflows = 0;
    let mut at_step = None;
    for step in 1..=steps {
        if st.update(&fm, &tok).is_err() {
            overflows += 1;
            at_step.get_or_insert(step);
        }
    }
    Ok(ForcedOverflow {
        horizon,
        margin: steps - horizon,
        overflows,
        at_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageInstance {
    pub fraction: f64,
    pub alpha: f64,
    /// Smallest eigenvalue at `alpha_max`.
    pub margin_at_bound: f64,
    /// Smallest eigenvalue at the measured `alpha`.
    pub margin_at_measured: f64,
}

/// One isotropic Gaussian instance passed through the two-layer selector:
/// the last `L` keys sit in the window and the older ones in the TCAM index
/// ranked by norm.
pub fn coverage_instance(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<CoverageInstance> {
    let t = &cfg.theory;
    let d = t.coverage_d;
    let universe: Vec<Token> = (0..t.coverage_t as u64)
        .map(|id| Token::new(id, gaussian(rng, d), vec![0.0]))
        .collect();
    let q = gaussian(rng, d);
    let l = cfg.window.capacity.min(universe.len());
    let split = universe.len() - l;
    let mut window = LocalWindow::new(cfg.window.capacity.max(1));
    for tok in &universe[split..] {
        window.push(tok.clone());
    }
    let mut older: Vec<Token> = universe[..split].to_vec();
    older.sort_by(|a, b| norm(&b.key).total_cmp(&norm(&a.key)).then(a.id.cmp(&b.id)));
    let n = older.len() as i64;
    let ranked: Vec<(Token, i64)> = older.into_iter().enumerate().map(|(i, t)| (t, n - i as i64)).collect();
    let gidx = GlobalIndex::from_tokens(cfg.encoder()?, ranked, cfg.global_index.min_bucket, universe.len())?;
    let sel = select_keys(&window, &gidx, &q, cfg.window.cap)?.tokens();
    let mass = retained_mass(&q, &sel, &universe, d);
    Ok(CoverageInstance {
        fraction: mass.fraction,
        alpha: mass.alpha,
        margin_at_bound: coverage_margin(&q, &sel, &universe, t.coverage_alpha_max, d),
        margin_at_measured: coverage_margin(&q, &sel, &universe, mass.alpha, d),
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mass accounting and the Loewner coverage inequality on isotropic key sets.
pub fn check_coverage(cfg: &RunConfig, seed: u64) -> Result<CheckReport> {
    let t = &cfg.theory;
    let mut rng = rng_for(seed, TheoryCheck::Coverage);
    let mut eligible = 0usize;
    let mut pass_bound = 0usize;
    let mut pass_measured = 0usize;
    let mut identity_gap: f64 = 0.0;
    let mut mass_violations = 0usize;
    for _ in 0..t.coverage_instances {
        let inst = coverage_instance(cfg, &mut rng)?;
        identity_gap = identity_gap.max((inst.fraction + inst.alpha - 1.0).abs());
        if inst.alpha <= t.coverage_alpha_max {
            eligible += 1;
            mass_violations += (inst.fraction < 1.0 - t.coverage_alpha_max) as usize;
            pass_bound += (inst.margin_at_bound >= -t.coverage_tol) as usize;
            pass_measured += (inst.margin_at_measured >= -t.coverage_tol) as usize;
        }
    }
    let rate = |k: usize| if eligible == 0 { 0.0 } else { k as f64 / eligible as f64 };
    let (q, sel, uni) = crate::key_selection::anisotropic_counterexample();
    let cm = retained_mass(&q, &sel, &uni, 2);
    let counter = coverage_margin(&q, &sel, &uni, cm.alpha, 2);
    Ok(CheckReport::new(
        TheoryCheck::Coverage,
        vec![
            Metric::info("instances", t.coverage_instances as f64),
            Metric::at_least("eligible_instances", eligible as f64, 1.0),
            Metric::at_most("accounting_identity_gap", identity_gap, 1e-12),
            Metric::at_most("mass_bound_violations", mass_violations as f64, 0.0),
            Metric::at_least("loewner_pass_rate", rate(pass_bound), t.coverage_pass_rate),
            Metric::info("loewner_pass_rate_at_measured_alpha", rate(pass_measured)),
            Metric::at_most("counterexample_margin", counter, -t.coverage_tol),
        ],
        vec![format!(
            "T={}, d={}, window {} plus norm-ranked TCAM index; the Loewner check uses alpha={} on instances whose measured alpha is at most that",
            t.coverage_t, t.coverage_d, cfg.window.capacity, t.coverage_alpha_max
        )],
    ))
}

/// Steady-state mean, variance and contraction of the EMA under stationary
/// Bernoulli occupancy.
pub fn check_ema(cfg: &RunConfig, seed: u64) -> Result<CheckReport> {
    let t = &cfg.theory;
    let process = OccupancyProcess::stationary(t.ema_p, t.ema_centroids);
    let run = run_occupancy(&process, t.ema_eta, 0.0, t.ema_steps, seed ^ 0x65_6d61)?;
    let burn_in = (10.0 / t.ema_eta).ceil() as usize;
    let s = steady_state(&run, t.ema_p, t.ema_eta, burn_in);
    Ok(CheckReport::new(
        TheoryCheck::Ema,
        vec![
            Metric::at_most("mean_abs_error", (s.mean - t.ema_p).abs(), 3.0 * s.mean_stderr),
            Metric::at_most("steady_variance", s.variance, 1.1 * s.predicted_variance),
            Metric::at_most("contraction_slope", s.contraction_slope, s.contraction_bound + 0.02),
            Metric::info("predicted_variance", s.predicted_variance),
            Metric::info("mean", s.mean),
        ],
        vec![format!(
            "{} centroids, p={}, eta={}, {} steps, burn-in {burn_in}",
            t.ema_centroids, t.ema_p, t.ema_eta, t.ema_steps
        )],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.theory.kernel_reps = 2;
        cfg.theory.spectral_instances = 5;
        cfg.theory.quant_runs = 3;
        cfg.theory.coverage_instances = 20;
        cfg.theory.ema_steps = 2000;
        cfg
    }

    #[test]
    fn parse_names() {
        for c in TheoryCheck::EACH {
            assert_eq!(c.as_str().parse::<TheoryCheck>().unwrap(), c);
        }
        assert_eq!("all".parse::<TheoryCheck>().unwrap(), TheoryCheck::All);
        assert!("nope".parse::<TheoryCheck>().is_err());
    }

    #[test]
    fn report_is_deterministic() {
        let cfg = small();
        let a = theory_check(TheoryCheck::All, &cfg).unwrap();
        let b = theory_check(TheoryCheck::All, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.checks.len(), 5);
    }

    #[test]
    fn forced_overflow_lands_past_horizon() {
        let cfg = small();
        let f = forced_overflow(&cfg, 3).unwrap();
        assert!(f.overflows >= 1);
        assert!(f.at_step.unwrap() > f.horizon);
    }

    #[test]
    fn single_token_spectral_gap_is_zero() {
        let fm = FeatureMap::new(FeatureKind::PositiveRandomFeatures, 32, 2, 1, 1.0).unwrap();
        let g = spectral_gap(&fm, &[vec![0.1, 0.2]], &[vec![0.3, -0.1]], &[vec![1.0, 2.0]]).unwrap();
        assert!(g.error < 1e-12);
    }

    #[test]
    fn ball_samples_respect_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!(norm(&sample_ball(&mut rng, 3, 0.5)) <= 0.5 + 1e-12);
        }
    }
}
