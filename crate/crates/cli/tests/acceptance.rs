//! Acceptance criteria, one PASS or FAIL line each.
//!
//! Measured values come from `nsattn`; reference values come from the
//! independent oracles in `nsattn-testkit` or from arithmetic written out
//! here. The process exits non-zero when a criterion fails that is not
//! listed in [`KNOWN_FAILURES`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use nsattn::attention::{linear_attention_detail, spectral_error_bound, AttentionState, Token};
use nsattn::config::RunConfig;
use nsattn::control_plane::{ols_slope, EmaTracker};
use nsattn::features::{required_m, FeatureKind, FeatureMap};
use nsattn::fusion::{fuse, FusionConfig, FusionPath};
use nsattn::key_selection::{
    anisotropic_counterexample, coverage_loewner_check, retained_mass, select_keys, GlobalIndex, LocalWindow,
};
use nsattn::pipeline::{ablation, merge_states, ABLATION_ORDER};
use nsattn::quantization::{register_overflow_horizon, FixedPointFormat, OverflowPolicy};
use nsattn::theory::forced_overflow;
use nsattn::workload::{generate, Drift};
use nsattn_testkit::linalg::spectral_norm;
use nsattn_testkit::{
    compensated_sum, oracle_ema_closed_form, oracle_exact_attention, oracle_kernel_mass, oracle_quantized_accumulate,
    oracle_rational_accumulate,
};
use num_like::{frobenius_gap, raw_to_rational};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Criteria that fail on the shipped configuration, with the reason.
const KNOWN_FAILURES: &[(u8, &str)] = &[(
    6,
    "the norm-ranked TCAM layer omits large keys whose signs disagree with the query, \
     so the omitted kernel-weighted second moment concentrates in a few directions",
)];

struct Verdict {
    pass: bool,
    detail: String,
}

type Criterion = fn() -> Result<Verdict, String>;

fn main() -> ExitCode {
    let criteria: [(u8, &str, Option<u64>, Criterion); 11] = [
        (1, "budget arithmetic", Some(1), budget_arithmetic),
        (2, "kernel bound", Some(60), kernel_bound),
        (3, "spectral bound", Some(60), spectral_bound),
        (4, "incremental equals batch", Some(30), incremental_equals_batch),
        (5, "quantization drift", Some(60), quantization_drift),
        (6, "coverage", None, coverage),
        (7, "EMA stability", Some(30), ema_stability),
        (8, "cadence arithmetic", None, cadence_arithmetic),
        (9, "fusion semantics", None, fusion_semantics),
        (10, "ablation direction", Some(300), ablation_direction),
        (11, "determinism", None, determinism),
    ];
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut passed = 0;
    let mut ran = 0;
    let mut unexpected = Vec::new();
    for (id, name, limit_s, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let verdict = run().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        let elapsed = start.elapsed();
        let in_time = limit_s.is_none_or(|s| elapsed <= Duration::from_secs(s));
        let pass = verdict.pass && in_time;
        let timing = match limit_s {
            Some(s) => format!("{:.2} s, limit {s} s", elapsed.as_secs_f64()),
            None => format!("{:.2} s", elapsed.as_secs_f64()),
        };
        println!(
            "{} criterion {id:>2} {name}: {} ({timing})",
            if pass { "PASS" } else { "FAIL" },
            verdict.detail
        );
        if pass {
            passed += 1;
        } else if let Some((_, why)) = KNOWN_FAILURES.iter().find(|(k, _)| *k == id) {
            println!("     known failure: {why}");
        } else {
            unexpected.push(id);
        }
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}

fn verdict(pass: bool, detail: String) -> Result<Verdict, String> {
    Ok(Verdict { pass, detail })
}

fn cfg() -> RunConfig {
    RunConfig::default()
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn ball(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    let x = gaussian(rng, d);
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = r * rng.random::<f64>().powf(1.0 / d as f64);
    x.iter().map(|v| v * radius / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

fn exp_kernel(q: &[f64], k: &[f64], d: usize) -> f64 {
    (dot(q, k) / (d as f64).sqrt()).exp()
}

fn lib<T>(r: nsattn::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- CLI

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nsattn")
}

fn run_cli(args: &[&str]) -> Result<Output, String> {
    Command::new(bin()).args(args).output().map_err(|e| e.to_string())
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn dir_contents(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_file() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            files.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(files)
}

// ---------------------------------------------------------------- 1

fn budget_arithmetic() -> Result<Verdict, String> {
    let tmp = tempdir()?;
    let out = tmp.path().to_str().unwrap();
    let args = [
        "--deterministic",
        "--out",
        out,
        "resources",
        "--m",
        "256",
        "--d-v",
        "64",
        "--b",
        "16",
    ];
    let o = run_cli(&args)?;
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let agg_line = text.lines().find(|l| l.starts_with("aggregated state")).unwrap_or("");
    let flow_line = text.lines().find(|l| l.starts_with("per_flow_state")).unwrap_or("");
    let json = read_json(&tmp.path().join("budget.json"))?;
    let flow = json["result"]["details"]
        .as_array()
        .and_then(|d| d.iter().find(|c| c["name"] == "per_flow_state"))
        .cloned()
        .unwrap_or_default();
    let mut strict = args.to_vec();
    strict.insert(0, "--strict");
    let strict_code = run_cli(&strict)?.status.code();
    let pass = o.status.success()
        && agg_line.contains("262,144 bits")
        && agg_line.contains("32 KB")
        && flow_line.contains("INFEASIBLE")
        && json["result"]["agg_bits"] == 262_144
        && flow["budget"] == 8192
        && flow["ok"] == false
        && strict_code == Some(2);
    verdict(
        pass,
        format!(
            "`{}`; per-flow check `{}`; strict exit code {strict_code:?}",
            agg_line.trim(),
            flow_line.split_whitespace().collect::<Vec<_>>().join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 2

fn kernel_bound() -> Result<Verdict, String> {
    let c = cfg();
    let t = &c.theory;
    let (cc, eps, delta, n, reps, d) = (1.0, 0.1, 0.05, 200usize, 20usize, 4usize);
    let m = lib(required_m(cc, eps, n as u64, delta))?;
    let expected_m = (2.0 * cc * cc / (eps * eps) * (2.0 * n as f64 / delta).ln()).ceil() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(c.theory_seed() ^ 2);
    let mut worst: f64 = 0.0;
    for _ in 0..reps {
        let fm = lib(FeatureMap::new(
            FeatureKind::ClippedPrf,
            m as usize,
            d,
            rng.random(),
            cc,
        ))?;
        let mut bad = 0usize;
        for _ in 0..n {
            let q = ball(&mut rng, d, t.kernel_radius);
            let k = ball(&mut rng, d, t.kernel_radius);
            let est = dot(&lib(fm.apply(&q))?, &lib(fm.apply(&k))?);
            bad += ((est - exp_kernel(&q, &k, d)).abs() >= eps) as usize;
        }
        worst = worst.max(bad as f64 / n as f64);
    }
    verdict(
        m == expected_m && worst <= 2.0 * delta,
        format!(
            "m = {m}; worst failure rate over {reps} repetitions {worst:.3} <= {:.2} (pairs in the radius-{} ball)",
            2.0 * delta,
            t.kernel_radius
        ),
    )
}

// ---------------------------------------------------------------- 3

fn spectral_bound() -> Result<Verdict, String> {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(c.theory_seed() ^ 3);
    let mut over = 0usize;
    let mut worst: f64 = 0.0;
    let instances = 50;
    for _ in 0..instances {
        let t = rng.random_range(1..=16usize);
        let d = rng.random_range(1..=4usize);
        let d_v = rng.random_range(1..=4usize);
        let r = (d as f64).sqrt();
        let fm = lib(FeatureMap::new(
            FeatureKind::PositiveRandomFeatures,
            c.theory.spectral_m,
            d,
            rng.random(),
            1.0,
        ))?;
        let q: Vec<Vec<f64>> = (0..t).map(|_| ball(&mut rng, d, r)).collect();
        let k: Vec<Vec<f64>> = (0..t).map(|_| ball(&mut rng, d, r)).collect();
        let v: Vec<Vec<f64>> = (0..t).map(|_| gaussian(&mut rng, d_v)).collect();
        let exact = oracle_exact_attention(&q, &k, &v, d).map_err(|e| e.to_string())?;
        let lin = lib(linear_attention_detail(&fm, &q, &k, &v, f64::MIN_POSITIVE))?;
        let phi_q: Vec<Vec<f64>> = q
            .iter()
            .map(|x| fm.apply(x))
            .collect::<nsattn::Result<_>>()
            .map_err(|e| e.to_string())?;
        let phi_k: Vec<Vec<f64>> = k
            .iter()
            .map(|x| fm.apply(x))
            .collect::<nsattn::Result<_>>()
            .map_err(|e| e.to_string())?;
        let mut eps: f64 = 0.0;
        let mut gamma = f64::INFINITY;
        for i in 0..t {
            let row: Vec<f64> = (0..t).map(|j| exp_kernel(&q[i], &k[j], d)).collect();
            for j in 0..t {
                eps = eps.max((dot(&phi_q[i], &phi_k[j]) - row[j]).abs());
            }
            gamma = gamma.min(compensated_sum(row)).min(lin.normalizers[i]);
        }
        let diff: Vec<Vec<f64>> = exact
            .iter()
            .zip(&lin.rows)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let err = spectral_norm(&diff);
        let bound = spectral_error_bound(t, eps, gamma, &v);
        over += (err > bound) as usize;
        worst = worst.max(err / bound);
    }
    verdict(
        over == 0,
        format!("{over} of {instances} instances over the bound; worst error/bound {worst:.3}"),
    )
}

// ---------------------------------------------------------------- 4

fn incremental_equals_batch() -> Result<Verdict, String> {
    let fmt = lib(FixedPointFormat::new(16, 8))?;
    let (m, d, d_v) = (16, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg().theory_seed() ^ 4);
    let fm = lib(FeatureMap::new(FeatureKind::ClippedPrf, m, d, rng.random(), 1.0))?;
    let sequences = 1000;
    let (mut perm_bad, mut shard_bad, mut oracle_bad) = (0, 0, 0);
    for s in 0..sequences {
        let t = rng.random_range(1..=64usize);
        let toks: Vec<Token> = (0..t)
            .map(|i| Token::new((s * 64 + i) as u64, ball(&mut rng, d, 1.0), ball(&mut rng, d_v, 1.0)))
            .collect();
        let fold = |ts: &[Token]| -> Result<AttentionState, String> {
            let mut st = AttentionState::new(m, d_v, fmt);
            st.set_policy(OverflowPolicy::Checked);
            for tok in ts {
                lib(st.update(&fm, tok))?;
            }
            Ok(st)
        };
        let base = fold(&toks)?;
        let mut perm = toks.clone();
        perm.shuffle(&mut rng);
        perm_bad += !base.same_registers(&fold(&perm)?) as usize;

        let shards = rng.random_range(2..=4usize).min(t);
        let mut cuts: Vec<usize> = (0..shards - 1).map(|_| rng.random_range(0..=t)).collect();
        cuts.sort();
        let mut parts = Vec::new();
        let mut prev = 0;
        for cut in cuts.into_iter().chain([t]) {
            parts.push(fold(&perm[prev..cut])?);
            prev = cut;
        }
        let (merged, _) = lib(merge_states(parts))?;
        shard_bad += !base.same_registers(&merged) as usize;

        let phis: Vec<Vec<f64>> = toks
            .iter()
            .map(|x| fm.apply(&x.key))
            .collect::<nsattn::Result<_>>()
            .map_err(|e| e.to_string())?;
        let vals: Vec<Vec<f64>> = toks.iter().map(|x| x.value.clone()).collect();
        let f = fmt.fraction_bits() as u32;
        let (os, oz) = oracle_quantized_accumulate(&phis, &vals, f, f).map_err(|e| e.to_string())?;
        let flat: Vec<i128> = os.into_iter().flatten().collect();
        let same_s = flat.iter().zip(base.s_raw()).all(|(a, b)| *a == *b as i128);
        let same_z = oz.iter().zip(base.z_raw()).all(|(a, b)| *a == *b as i128);
        oracle_bad += !(same_s && same_z) as usize;
    }
    verdict(
        perm_bad + shard_bad + oracle_bad == 0,
        format!(
            "{sequences} sequences: {perm_bad} permutation, {shard_bad} shard-merge and {oracle_bad} exact-oracle mismatches"
        ),
    )
}

// ---------------------------------------------------------------- 5

mod num_like {
    use nsattn_testkit::{abs_f64, rational};
    use num_rational::BigRational;

    pub fn raw_to_rational(raw: i64, frac: u8) -> BigRational {
        rational(raw as f64) / rational((1u64 << frac) as f64)
    }

    pub fn frobenius_gap(a: &[BigRational], b: &[BigRational]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| abs_f64(&(x - y)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn quantization_drift() -> Result<Verdict, String> {
    let c = cfg();
    let t = &c.theory;
    let fmt = t.quant_format;
    let (m, d_v, d) = (t.quant_m, t.quant_d_v, t.kernel_d);
    let mut rng = ChaCha8Rng::seed_from_u64(c.theory_seed() ^ 5);
    let runs = 100;
    let mut overflows = 0usize;
    let mut worst: f64 = 0.0;
    let mut horizon = u64::MAX;
    for _ in 0..runs {
        let fm = lib(FeatureMap::new(
            FeatureKind::ClippedPrf,
            m,
            d,
            rng.random(),
            c.features.clip_bound,
        ))?;
        let h = register_overflow_horizon(fmt, fm.feature_norm_bound(1.0), 1.0, m, d_v);
        horizon = horizon.min(h);
        let mut st = AttentionState::new(m, d_v, fmt);
        st.set_policy(OverflowPolicy::Checked);
        let mut phis = Vec::new();
        let mut vals = Vec::new();
        for step in 1..=h {
            let key = ball(&mut rng, d, 1.0);
            let value = ball(&mut rng, d_v, 1.0);
            let phi = lib(fm.apply(&key))?;
            if st.absorb(&phi, &value).is_err() {
                overflows += 1;
                break;
            }
            phis.push(phi);
            vals.push(value);
            let (exact, _) = oracle_rational_accumulate(&phis, &vals).map_err(|e| e.to_string())?;
            let exact: Vec<_> = exact.into_iter().flatten().collect();
            let fixed: Vec<_> = st
                .s_raw()
                .iter()
                .map(|&r| raw_to_rational(r, fmt.fraction_bits()))
                .collect();
            let bound = step as f64 * fmt.eta_q() * (m * d_v) as f64;
            worst = worst.max(frobenius_gap(&fixed, &exact) / bound);
        }
    }
    let forced = lib(forced_overflow(&c, c.theory_seed()))?;
    let forced_ok = forced.overflows >= 1 && forced.at_step.is_some_and(|s| s > forced.horizon);
    verdict(
        overflows == 0 && worst <= 1.0 && forced_ok,
        format!(
            "{runs} runs in {fmt} up to horizon {horizon}: worst drift/bound {worst:.3}, {overflows} overflows; \
             adversarial run overflowed at step {:?} (horizon + {})",
            forced.at_step, forced.margin
        ),
    )
}

// ---------------------------------------------------------------- 6

fn coverage() -> Result<Verdict, String> {
    let c = cfg();
    let t = &c.theory;
    let (n, d, alpha0, tol) = (32usize, 4usize, 0.2, 1e-9);
    let instances = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(c.theory_seed() ^ 6);
    let (mut eligible, mut loewner, mut identity_bad) = (0usize, 0usize, 0usize);
    for _ in 0..instances {
        let universe: Vec<Token> = (0..n as u64)
            .map(|id| Token::new(id, gaussian(&mut rng, d), vec![0.0]))
            .collect();
        let q = gaussian(&mut rng, d);
        let l = c.window.capacity.min(n);
        let mut window = LocalWindow::new(c.window.capacity.max(1));
        for tok in &universe[n - l..] {
            window.push(tok.clone());
        }
        let mut older = universe[..n - l].to_vec();
        let norm = |x: &[f64]| dot(x, x).sqrt();
        older.sort_by(|a, b| norm(&b.key).total_cmp(&norm(&a.key)).then(a.id.cmp(&b.id)));
        let count = older.len() as i64;
        let ranked = older
            .into_iter()
            .enumerate()
            .map(|(i, tok)| (tok, count - i as i64))
            .collect();
        let gidx = lib(GlobalIndex::from_tokens(
            lib(c.encoder())?,
            ranked,
            c.global_index.min_bucket,
            n,
        ))?;
        let selected = lib(select_keys(&window, &gidx, &q, c.window.cap))?.tokens();
        let keys = |ts: &[Token]| ts.iter().map(|x| x.key.clone()).collect::<Vec<_>>();
        let fraction = oracle_kernel_mass(&q, &keys(&selected), &keys(&universe), d).map_err(|e| e.to_string())?;
        let mass = retained_mass(&q, &selected, &universe, d);
        identity_bad += ((mass.fraction - fraction).abs() > 1e-12 || mass.fraction + mass.alpha != 1.0) as usize;
        if mass.alpha <= alpha0 {
            eligible += 1;
            identity_bad += (fraction < 1.0 - mass.alpha - 1e-12) as usize;
            loewner += coverage_loewner_check(&q, &selected, &universe, alpha0, tol, d) as usize;
        }
    }
    let (cq, csel, cuni) = anisotropic_counterexample();
    let calpha = retained_mass(&cq, &csel, &cuni, 2).alpha;
    let counter_fails = !coverage_loewner_check(&cq, &csel, &cuni, calpha, tol, 2);
    let rate = if eligible == 0 {
        0.0
    } else {
        loewner as f64 / eligible as f64
    };
    verdict(
        identity_bad == 0 && eligible > 0 && rate >= t.coverage_pass_rate && counter_fails,
        format!(
            "{eligible} of {instances} instances with alpha <= {alpha0}; Loewner pass rate {rate:.3} (need >= {}); \
             {identity_bad} accounting mismatches; counterexample rejected: {counter_fails}",
            t.coverage_pass_rate
        ),
    )
}

// ---------------------------------------------------------------- 7

fn ema_stability() -> Result<Verdict, String> {
    let (p, eta, steps, k) = (0.3, 0.1, 10_000usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg().theory_seed() ^ 7);
    let mut tr = lib(EmaTracker::new(k, eta, 0.0))?;
    let target = vec![p; k];
    let mut v = vec![tr.lyapunov(&target)];
    let mut history: Vec<Vec<u8>> = vec![Vec::new(); k];
    let mut tail = Vec::new();
    let burn_in = (10.0 / eta).ceil() as usize;
    let mut start_of_last = vec![0.0; k];
    for step in 0..steps {
        if step == steps - 64 {
            start_of_last.clone_from(&tr.c);
        }
        for (j, h) in history.iter_mut().enumerate() {
            let u = (rng.random::<f64>() < p) as u8;
            lib(tr.update(j, u))?;
            h.push(u);
        }
        v.push(tr.lyapunov(&target));
        if step >= burn_in {
            tail.extend_from_slice(&tr.c);
        }
    }
    let closed_form_gap = (0..k)
        .map(|j| (oracle_ema_closed_form(eta, start_of_last[j], &history[j][steps - 64..]) - tr.c[j]).abs())
        .fold(0.0, f64::max);
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let rho = 1.0 - eta;
    let sigma = (var * (1.0 + rho) / (1.0 - rho) / n).sqrt();
    let predicted = eta * p * (1.0 - p) / (2.0 - eta);
    let slope = ols_slope(&v[..v.len() - 1], &v[1..]);
    let slope_bound = 1.0 - eta * (2.0 - eta) + 0.02;
    verdict(
        (mean - p).abs() <= 3.0 * sigma && var <= 1.1 * predicted && slope <= slope_bound && closed_form_gap < 1e-9,
        format!(
            "mean {mean:.4} (3 sigma {:.4}); variance {var:.5} <= {:.5}; slope {slope:.3} <= {slope_bound:.2}; \
             closed-form gap {closed_form_gap:.1e}",
            3.0 * sigma,
            1.1 * predicted
        ),
    )
}

// ---------------------------------------------------------------- 8

fn cadence_arithmetic() -> Result<Verdict, String> {
    let tmp = tempdir()?;
    let mut mixed = 0u64;
    let mut main_line = String::new();
    let mut main_ok = false;
    for (eta, t_cp) in [("0.1", "60"), ("0.5", "60"), ("0.1", "10"), ("0.3", "300")] {
        let out = tmp.path().join(format!("{eta}-{t_cp}"));
        let o = run_cli(&[
            "--deterministic",
            "--out",
            out.to_str().unwrap(),
            "control-loop",
            "--entries",
            "10000",
            "--install-rate",
            "200000",
            "--eta",
            eta,
            "--t-cp",
            t_cp,
        ])?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        let r = &read_json(&out.join("stability.json"))?["result"];
        mixed += r["mixed_version_packets"].as_u64().ok_or("mixed_version_packets")?;
        if (eta, t_cp) == ("0.1", "60") {
            let install_ms = r["install_ms"].as_f64().unwrap_or(f64::NAN);
            let pct = 100.0 * r["budget_ratio"].as_f64().unwrap_or(f64::NAN);
            main_ok =
                (install_ms - 50.0).abs() < 1e-9 && (pct - 0.25 / 3.0).abs() < 1e-12 && format!("{pct:.2}") == "0.08";
            main_line = format!("dt_install {install_ms} ms, budget ratio {pct:.4}% (printed 0.08%)");
        }
    }
    verdict(
        main_ok && mixed == 0,
        format!("{main_line}; mixed-version packets over 4 runs: {mixed}"),
    )
}

// ---------------------------------------------------------------- 9

fn fusion_semantics() -> Result<Verdict, String> {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let settings = [(1.0, 1.0), (0.5, 2.0), (2.0, 0.5), (0.1, 0.1), (4.0, 3.0)];
    let (mut veto_bad, mut mono_bad, mut cases) = (0usize, 0usize, 0usize);
    for &(alpha, beta) in &settings {
        for lambda_h in [0u8, 1] {
            let fc = lib(FusionConfig::new(alpha, beta, lambda_h))?;
            for i_sym in [0u8, 1] {
                for (a, &s_nn) in grid.iter().enumerate() {
                    for (b, &s_sym) in grid.iter().enumerate() {
                        cases += 1;
                        let f = fuse(s_nn, i_sym, s_sym, &fc);
                        let veto = i_sym == 1 && lambda_h == 1;
                        veto_bad += ((f.value == 1.0) != veto || (f.path == FusionPath::HardVeto) != veto) as usize;
                        if veto {
                            continue;
                        }
                        if a > 0 && f.value - fuse(grid[a - 1], i_sym, s_sym, &fc).value <= 1e-12 {
                            mono_bad += 1;
                        }
                        if b > 0 && f.value - fuse(s_nn, i_sym, grid[b - 1], &fc).value <= 1e-12 {
                            mono_bad += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        veto_bad == 0 && mono_bad == 0,
        format!("{cases} grid points: {veto_bad} veto mismatches, {mono_bad} monotonicity violations"),
    )
}

// ---------------------------------------------------------------- 10

fn ablation_direction() -> Result<Verdict, String> {
    let c = cfg();
    let trace = lib(generate(&c.workload))?;
    let flows = trace.flow_count(c.seed);
    let (report, _) = lib(ablation(&c, &trace, &ABLATION_ORDER))?;
    let parts: Vec<String> = report
        .comparisons
        .iter()
        .map(|cmp| {
            format!(
                "{} >= {} gap {:+.4} CI [{:+.4}, {:+.4}]",
                cmp.better.as_str(),
                cmp.worse.as_str(),
                cmp.gap,
                cmp.ci_low,
                cmp.ci_high
            )
        })
        .collect();
    let all = report.comparisons.len() == 3 && report.comparisons.iter().all(|cmp| cmp.ci_low >= 0.0);
    verdict(
        all && flows >= 500 && c.workload.drift != Drift::None,
        format!("{flows} flows, {} test flows; {}", report.test_flows, parts.join("; ")),
    )
}

// ---------------------------------------------------------------- 11

fn determinism() -> Result<Verdict, String> {
    let tmp = tempdir()?;
    let small = ["--deterministic", "--set", "workload.flows=200"];
    let seeded = tmp.path().join("seed");
    let o = run_cli(&[&small[..], &["--out", seeded.to_str().unwrap(), "simulate"]].concat())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).into_owned());
    }
    let packets = seeded.join("packets.jsonl");
    let packets = packets.to_str().unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec!["generate"],
        vec!["simulate", "--window-sweep", "4,8", "--pareto", "8,16", "--ablation"],
        vec!["theory-check"],
        vec!["resources"],
        vec!["resources", "--m", "256", "--d-v", "64", "--b", "16"],
        vec!["control-loop", "--horizon", "120", "--cadence-table"],
        vec!["score", "--packets", packets],
        vec!["fit-rules"],
        vec!["compile-tables"],
    ];
    let mut differing = Vec::new();
    let mut compared = 0usize;
    for (i, cmd) in commands.iter().enumerate() {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out: PathBuf = tmp.path().join(format!("{i}-{rep}"));
            let args = [&small[..], &["--out", out.to_str().unwrap()], &cmd[..]].concat();
            let o = run_cli(&args)?;
            let stdout = String::from_utf8_lossy(&o.stdout).replace(out.to_str().unwrap(), "<out>");
            runs.push((o.status.code(), stdout, dir_contents(&out)?));
        }
        let (a, b) = (&runs[0], &runs[1]);
        compared += a.2.len();
        if a != b {
            differing.push(cmd[0].to_string());
        }
    }
    let jobs = |n: &str| -> Result<Vec<u8>, String> {
        let out = tmp.path().join(format!("jobs-{n}"));
        run_cli(&[&small[..], &["--jobs", n, "--out", out.to_str().unwrap(), "simulate"]].concat())?;
        fs::read(out.join("packets.jsonl")).map_err(|e| e.to_string())
    };
    let jobs_same = jobs("1")? == jobs("4")?;
    verdict(
        differing.is_empty() && jobs_same,
        format!(
            "{} commands run twice, {compared} files compared, differing: {differing:?}; packets identical at 1 and 4 jobs: {jobs_same}",
            commands.len()
        ),
    )
}
