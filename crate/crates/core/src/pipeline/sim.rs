//! Offline preparation and end-to-end runs: build the global index, fit
//! rule weights and fusion parameters on training and validation flows,
//! then score held-out flows through the dataplane.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataplane::COUNTER_BITS;
use super::dataplane::{run_trace, Dataplane, NeuralReadout, PacketResult, GLOBAL_ID_BASE};
use super::resources::{check_budgets, flow_state_bits, BudgetReport, Unit};
use crate::attention::{default_gamma_floor, Token};
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::control_plane::kmeans;
use crate::error::{Error, Result};
use crate::fusion::FusionPath;
use crate::key_selection::GlobalIndex;
use crate::symbolic::{
    compile_rules, fit_weights, parse_rules, sigmoid, CompileOptions, CompiledRuleTable, FitOptions, Grounding,
    SymbolicRule,
};
use crate::workload::{
    bootstrap, normalize, percentile, score_metrics, split_by_flow, MetricsSummary, NormalizationReport, Trace,
    CLASS_PORTS, SIGNATURE_PORT, SIGNATURE_PROTO,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    LocalOnly,
    GlobalOnly,
    Hybrid,
    NeuralPure,
    SymbolicPure,
    SoftFusion,
    #[default]
    Cascade,
}

/// Which parts of the system a preset switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub window: bool,
    pub global: bool,
    pub neural: bool,
    pub rules: bool,
    /// Fit soft-rule weights on training data rather than using the rule
    /// file's weights.
    pub fit_rules: bool,
    pub lambda_h: u8,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::LocalOnly,
        Preset::GlobalOnly,
        Preset::Hybrid,
        Preset::NeuralPure,
        Preset::SymbolicPure,
        Preset::SoftFusion,
        Preset::Cascade,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::LocalOnly => "local-only",
            Preset::GlobalOnly => "global-only",
            Preset::Hybrid => "hybrid",
            Preset::NeuralPure => "neural-pure",
            Preset::SymbolicPure => "symbolic-pure",
            Preset::SoftFusion => "soft-fusion",
            Preset::Cascade => "cascade",
        }
    }

    /// Hybrid and cascade name the same full configuration from the key
    /// selection and the fusion side respectively.
    pub fn spec(&self) -> PresetSpec {
        let full = PresetSpec {
            window: true,
            global: true,
            neural: true,
            rules: true,
            fit_rules: true,
            lambda_h: 1,
        };
        match self {
            Preset::LocalOnly => PresetSpec { global: false, ..full },
            Preset::GlobalOnly => PresetSpec { window: false, ..full },
            Preset::Hybrid | Preset::Cascade => full,
            Preset::NeuralPure => PresetSpec {
                rules: false,
                fit_rules: false,
                ..full
            },
            Preset::SymbolicPure => PresetSpec {
                window: false,
                global: false,
                neural: false,
                fit_rules: false,
                ..full
            },
            Preset::SoftFusion => PresetSpec { lambda_h: 0, ..full },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Built-in rule set: one hard rule on the signature port, one soft rule
/// per characteristic port of each class. Ports of class 0 carry weight 0,
/// the others 0.5.
pub fn default_rules(class_count: usize) -> Vec<SymbolicRule> {
    let mut rules = vec![SymbolicRule::hard(
        0,
        100,
        ((SIGNATURE_PROTO as u128) << 32) | SIGNATURE_PORT as u128,
        0xff_0000_ffff,
    )];
    for (c, ports) in CLASS_PORTS.iter().enumerate().take(class_count.min(CLASS_PORTS.len())) {
        for &p in ports {
            let w = if c == 0 { 0.0 } else { 0.5 };
            rules.push(SymbolicRule::soft(rules.len() as u32, 10, p as u128, 0xffff, w));
        }
    }
    rules
}

pub fn default_rules_text(class_count: usize) -> String {
    let mut s = String::from("# kind priority value/mask weight [action]\n");
    s.push_str(&crate::symbolic::rules_to_text(&default_rules(class_count)));
    s
}

/// Binary target: any non-zero class is malicious.
fn positive(label: usize) -> bool {
    label != 0
}

/// Logistic regression `p = sigmoid(x.w + c)` by projected gradient descent
/// with backtracking. Coordinates flagged in `nonneg` stay `>= 0`.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], nonneg: &[bool], iters: usize) -> (Vec<f64>, f64) {
    let k = nonneg.len();
    let n = x.len().max(1) as f64;
    let loss = |w: &[f64], c: f64| -> f64 {
        x.iter()
            .zip(y)
            .map(|(xi, &yi)| {
                let z: f64 = xi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + c;
                let s = if yi { -z } else { z };
                if s > 0.0 {
                    s + (-s).exp().ln_1p()
                } else {
                    s.exp().ln_1p()
                }
            })
            .sum::<f64>()
            / n
    };
    let mut w = vec![0.0; k];
    let mut c = 0.0;
    let mut cur = loss(&w, c);
    for _ in 0..iters {
        let mut gw = vec![0.0; k];
        let mut gc = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + c;
            let r = (sigmoid(z) - f64::from(u8::from(yi))) / n;
            for (g, a) in gw.iter_mut().zip(xi) {
                *g += r * a;
            }
            gc += r;
        }
        let mut lr = 8.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand: Vec<f64> = w
                .iter()
                .zip(&gw)
                .zip(nonneg)
                .map(|((a, g), &nn)| {
                    let v = a - lr * g;
                    if nn {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect();
            let cc = c - lr * gc;
            let l = loss(&cand, cc);
            if l < cur {
                w = cand;
                c = cc;
                cur = l;
                moved = true;
                break;
            }
            lr *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (w, c)
}

/// Threshold on `scores` that maximizes binary macro-F1. Ties go to the
/// larger threshold.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    if scores.is_empty() {
        return (0.5, 0.0);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let p_total = labels.iter().filter(|&&l| l).count();
    let n_total = labels.len() - p_total;
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let den = 2 * tp + fp + fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * tp as f64 / den as f64
        }
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    // predicting everything negative
    let mut best = (f64::INFINITY, (f1(0, 0, p_total) + f1(n_total, p_total, 0)) / 2.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tn = n_total - fp;
        let fn_ = p_total - tp;
        let m = (f1(tp, fp, fn_) + f1(tn, fn_, fp)) / 2.0;
        if m > best.1 {
            best = (s, m);
        }
    }
    if best.0.is_infinite() {
        // nothing beats all-negative: place the cut above every score
        best.0 = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
    }
    best
}

/// `k`-means over training keys; every centroid becomes a global token whose
/// value is the mean value of its members and whose priority is its member
/// count.
pub fn build_global_index(cfg: &RunConfig, train: &Trace, capacity: usize) -> Result<GlobalIndex> {
    let enc = cfg.encoder()?;
    if train.packets.is_empty() || cfg.global_index.k == 0 {
        return Ok(GlobalIndex::empty(enc, capacity));
    }
    let points: Vec<Vec<f64>> = train.packets.iter().map(|p| p.features.clone()).collect();
    let km = kmeans(
        &points,
        cfg.global_index.k.min(capacity.max(1)),
        cfg.cluster_seed(),
        50,
        None,
    )?;
    let mut sums = vec![vec![0.0; train.d_v]; km.centroids.len()];
    let mut counts = vec![0usize; km.centroids.len()];
    for (p, &j) in train.packets.iter().zip(&km.assignment) {
        counts[j] += 1;
        for (s, v) in sums[j].iter_mut().zip(&p.value) {
            *s += v;
        }
    }
    let tokens: Vec<(Token, i64)> = km
        .centroids
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let v = sums[j].iter().map(|s| s / counts[j].max(1) as f64).collect();
            (Token::new(GLOBAL_ID_BASE + j as u64, c.clone(), v), counts[j] as i64)
        })
        .collect();
    GlobalIndex::from_tokens(enc, tokens, cfg.global_index.min_bucket, capacity)
}

fn class_value_means(train: &Trace) -> NeuralReadout {
    let mut sum = [vec![0.0; train.d_v], vec![0.0; train.d_v]];
    let mut n = [0usize; 2];
    for p in &train.packets {
        let c = usize::from(positive(p.label));
        n[c] += 1;
        for (s, v) in sum[c].iter_mut().zip(&p.value) {
            *s += v;
        }
    }
    if n[0] == 0 || n[1] == 0 {
        return NeuralReadout {
            w: vec![0.0; train.d_v],
            b0: 0.0,
        };
    }
    let mu: Vec<Vec<f64>> = (0..2)
        .map(|c| sum[c].iter().map(|s| s / n[c] as f64).collect())
        .collect();
    NeuralReadout::from_class_means(&mu[0], &mu[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub preset: Preset,
    pub global_entries: usize,
    pub readout: NeuralReadout,
    /// `(rule id, weight)` of every soft rule as installed.
    pub rule_weights: Vec<(u32, f64)>,
    pub grounded_examples: usize,
    pub dropped_rules: Vec<u32>,
    pub zeroed_rules: Vec<u32>,
    pub alpha: f64,
    pub beta: f64,
    pub threshold: f64,
    pub validation_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub dp: Dataplane,
    pub threshold: f64,
    pub report: TrainingReport,
}

/// Offline loop: global index, readout, rule weights, fusion scales and the
/// decision threshold.
pub fn train(
    cfg: &RunConfig,
    preset: Preset,
    train: &Trace,
    val: &Trace,
    rules: &[SymbolicRule],
    saved_index: Option<&GlobalIndex>,
) -> Result<TrainedModel> {
    let spec = preset.spec();
    let d = train.d.max(val.d);
    let fm = cfg.feature_map(d)?;
    let hard_rules: Vec<SymbolicRule> = if spec.rules {
        rules.iter().filter(|r| r.hard).cloned().collect()
    } else {
        Vec::new()
    };
    let tcam_left = (cfg.resources.tcam_entries as usize).saturating_sub(hard_rules.len());
    let gidx = match (spec.global, saved_index) {
        (false, _) => GlobalIndex::empty(cfg.encoder()?, tcam_left),
        (true, Some(g)) => g.clone(),
        (true, None) => build_global_index(cfg, train, tcam_left)?,
    };
    let readout = class_value_means(train);
    let table_format = cfg.rules.table_format;
    let mut fusion = cfg.fusion.clone();
    fusion.lambda_h = spec.lambda_h;
    let mut dp = Dataplane {
        fm,
        gidx,
        hard_rules: Vec::new(),
        table: CompiledRuleTable::empty(table_format),
        fusion: fusion.clone(),
        readout: readout.clone(),
        rm: cfg.resources.clone(),
        window: if spec.window { cfg.window.capacity } else { 0 },
        cap: cfg.window.cap,
        fmt_s: cfg.quantization.format_s,
        fmt_z: cfg.quantization.format_z,
        policy: cfg.quantization.policy,
        gamma_floor: default_gamma_floor(cfg.quantization.format_z),
        neural: spec.neural,
        hash_seed: cfg.hash_seed(),
        mode: cfg.simulate.mode,
    };
    let jobs = cfg.simulate.jobs;

    // soft-rule weights
    let mut grounded_examples = 0;
    let weights: Vec<f64> = if !spec.rules {
        Vec::new()
    } else if spec.fit_rules && !train.packets.is_empty() {
        let soft: Vec<&SymbolicRule> = rules.iter().filter(|r| !r.hard).collect();
        let keep: Vec<bool> = if spec.neural {
            let res = run_trace(&dp, train, jobs)?;
            let x: Vec<Vec<f64>> = res.iter().map(|r| vec![r.s_nn]).collect();
            let y: Vec<bool> = train.packets.iter().map(|p| positive(p.label)).collect();
            let (w, c) = fit_logistic(&x, &y, &[false], 300);
            res.iter()
                .map(|r| {
                    let p = sigmoid(w[0] * r.s_nn + c);
                    p.max(1.0 - p) >= cfg.rules.theta_high
                })
                .collect()
        } else {
            vec![true; train.packets.len()]
        };
        let mut groundings = Vec::new();
        for (i, p) in train.packets.iter().enumerate().filter(|(i, _)| keep[*i]) {
            let fields = p.key.field_bits();
            let before = groundings.len();
            for r in soft.iter().filter(|r| r.matches(fields)) {
                groundings.push(Grounding {
                    example: i,
                    rule_id: r.id,
                    body: 1.0,
                    label: f64::from(u8::from(positive(p.label))),
                });
            }
            grounded_examples += usize::from(groundings.len() > before);
        }
        let ids: Vec<u32> = soft.iter().map(|r| r.id).collect();
        let fit = fit_weights(
            &ids,
            &groundings,
            &FitOptions {
                iters: cfg.rules.fit_iters,
                l2: cfg.rules.l2,
                allow_unreferenced: true,
                ..FitOptions::default()
            },
        )?;
        let by_id: BTreeMap<u32, f64> = ids.into_iter().zip(fit.weights).collect();
        rules.iter().map(|r| by_id.get(&r.id).copied().unwrap_or(0.0)).collect()
    } else {
        rules.iter().map(|r| if r.hard { 0.0 } else { r.weight }).collect()
    };
    let mut dropped_rules = Vec::new();
    let mut zeroed_rules = Vec::new();
    if spec.rules {
        let out = compile_rules(
            &weights,
            rules,
            table_format,
            cfg.resources.sram_table_bits,
            &CompileOptions {
                drop_to_fit: cfg.rules.drop_to_fit,
                s_max: Some(cfg.rules.s_max),
            },
        )?;
        dp.table = out.table;
        dropped_rules = out.dropped;
        zeroed_rules = out.zeroed;
        dp.hard_rules = hard_rules;
    }
    if !spec.neural {
        fusion.alpha = 0.0;
    }
    if !spec.rules {
        fusion.beta = 0.0;
    }
    dp.fusion = fusion.clone();

    // fusion scales on validation, soft-blend packets only
    let labels: Vec<bool> = val.packets.iter().map(|p| positive(p.label)).collect();
    let mut val_res: Option<Vec<PacketResult>> = None;
    if cfg.simulate.fit_fusion && !val.packets.is_empty() {
        let res = run_trace(&dp, val, jobs)?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (r, &l) in res.iter().zip(&labels) {
            if r.score.path == FusionPath::SoftBlend {
                x.push(vec![r.s_nn, r.s_sym]);
                y.push(l);
            }
        }
        if !x.is_empty() {
            let (w, _) = fit_logistic(&x, &y, &[true, true], 500);
            fusion.alpha = if spec.neural { w[0] } else { 0.0 };
            fusion.beta = if spec.rules { w[1] } else { 0.0 };
            dp.fusion = fusion.clone();
        } else {
            val_res = Some(res);
        }
    }
    let res = match val_res {
        Some(r) => r,
        None => run_trace(&dp, val, jobs)?,
    };
    let scores: Vec<f64> = res.iter().map(|r| r.score.value).collect();
    let (threshold, vf1) = best_threshold(&scores, &labels);
    let threshold = if val.packets.is_empty() { 0.5 } else { threshold };
    let rule_weights = dp
        .table
        .entries
        .iter()
        .map(|(e, raw)| (e.payload as u32, *raw as f64 * dp.table.format.lsb()))
        .collect();
    Ok(TrainedModel {
        report: TrainingReport {
            preset,
            global_entries: dp.gidx.len(),
            readout,
            rule_weights,
            grounded_examples,
            dropped_rules,
            zeroed_rules,
            alpha: fusion.alpha,
            beta: fusion.beta,
            threshold,
            validation_macro_f1: vf1,
        },
        threshold,
        dp,
    })
}

/// One scored packet, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketLine {
    pub flow: String,
    pub ts: u64,
    pub score: f64,
    pub path: String,
    pub n_t: usize,
    pub stage_use: u32,
    pub label: usize,
    pub pred: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Utilization {
    pub stateful_bits_per_flow: u64,
    pub peak_concurrent_flows: usize,
    /// Fractions of the resource model's totals.
    pub sram: f64,
    pub tcam: f64,
    pub bus: f64,
    pub max_stage_use: u32,
    pub stages: f64,
    pub stage_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PathCounts {
    pub hard_veto: usize,
    pub soft_blend: usize,
    pub whitelist: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub preset: Preset,
    pub flows: usize,
    pub packets: usize,
    pub train_flows: usize,
    pub validation_flows: usize,
    pub test_flows: usize,
    pub metrics: Option<MetricsSummary>,
    pub paths: PathCounts,
    pub utilization: Utilization,
    pub budget: BudgetReport,
    pub training: TrainingReport,
    pub normalization: NormalizationReport,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub summary: RunSummary,
    pub packets: Vec<PacketLine>,
    /// Per test flow: packet indices in the test trace.
    pub flow_packets: Vec<Vec<usize>>,
    pub labels: Vec<bool>,
    pub preds: Vec<bool>,
}

fn peak_concurrency(trace: &Trace, hash_seed: u64) -> usize {
    let mut events = Vec::new();
    for idx in trace.flows(hash_seed).values() {
        let first = trace.packets[idx[0]].ts;
        let last = trace.packets[*idx.last().unwrap()].ts;
        events.push((first, 0i8));
        events.push((last, 1i8));
    }
    // starts before ends at equal timestamps
    events.sort();
    let mut cur = 0i64;
    let mut best = 0i64;
    for (_, kind) in events {
        cur += if kind == 0 { 1 } else { -1 };
        best = best.max(cur);
    }
    best as usize
}

/// Rule set named by the config, or the built-in set.
pub fn configured_rules(cfg: &RunConfig, class_count: usize) -> Result<Vec<SymbolicRule>> {
    match &cfg.rules.path {
        Some(p) => crate::symbolic::load_rules(p),
        None => parse_rules(&default_rules_text(class_count)),
    }
}

/// Fit soft-rule weights on the training split of `trace` the way a cascade
/// run would, and return the rules with those weights.
pub fn fit_rules(
    cfg: &RunConfig,
    trace: &Trace,
    rules: &[SymbolicRule],
) -> Result<(Vec<SymbolicRule>, TrainingReport)> {
    let mut trace = trace.clone();
    normalize(&mut trace, cfg.simulate.r, cfg.simulate.r_v);
    let [tr, va, _] = split_by_flow(&trace, cfg.simulate.split, cfg.split_seed(), cfg.hash_seed())?;
    let model = train(cfg, Preset::Cascade, &tr, &va, rules, None)?;
    let fitted: BTreeMap<u32, f64> = model.report.rule_weights.iter().copied().collect();
    let out = rules
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if !r.hard {
                r.weight = fitted.get(&r.id).copied().unwrap_or(0.0);
            }
            r
        })
        .collect();
    Ok((out, model.report))
}

/// Dimensions that replace the config's own in [`config_budget_report`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetOverrides {
    pub m: Option<u64>,
    pub d_v: Option<u64>,
    pub b: Option<u64>,
    pub window: Option<u64>,
    pub d: Option<u64>,
    pub n_entries: Option<u64>,
}

/// Budget report of a configuration before any training: the global index is
/// charged at its configured size and the rule table at the rule count.
pub fn config_budget_report(cfg: &RunConfig, ov: &BudgetOverrides) -> Result<BudgetReport> {
    cfg.resources.validate()?;
    let rules = configured_rules(cfg, cfg.workload.class_count)?;
    let hard = rules.iter().filter(|r| r.hard).count() as u64;
    let soft = rules.len() as u64 - hard;
    let m = ov.m.unwrap_or(cfg.features.m as u64);
    let d_v = ov.d_v.unwrap_or(cfg.workload.d_v as u64);
    let d = ov.d.unwrap_or(cfg.workload.d as u64);
    let l = ov.window.unwrap_or(cfg.window.capacity as u64);
    let b = ov.b.unwrap_or(cfg.quantization.format_s.total_bits() as u64);
    let b_z = ov.b.unwrap_or(cfg.quantization.format_z.total_bits() as u64);
    let k = cfg.global_index.k as u64;
    let n_entries = ov.n_entries.unwrap_or(soft + k * (d + d_v));
    let mut r = check_budgets(&cfg.resources, m, d_v, b, l, d, n_entries);
    r.push_check(
        "flow_context",
        "S + Z + window + counters <= per_flow_sram_bits",
        flow_state_bits(m, d_v, b, b_z, l, d, b, COUNTER_BITS + k),
        cfg.resources.per_flow_sram_bits,
        Unit::Bits,
    );
    r.push_check(
        "tcam",
        "global entries + hard rules <= tcam_entries",
        k + hard,
        cfg.resources.tcam_entries,
        Unit::Entries,
    );
    Ok(r)
}

/// Normalize, split by flow, train on the first two parts and score the
/// third.
pub fn simulate(
    cfg: &RunConfig,
    trace: &Trace,
    preset: Preset,
    saved_index: Option<&GlobalIndex>,
) -> Result<SimulationOutput> {
    let mut trace = trace.clone();
    let normalization = normalize(&mut trace, cfg.simulate.r, cfg.simulate.r_v);
    let hash_seed = cfg.hash_seed();
    let [tr, va, te] = split_by_flow(&trace, cfg.simulate.split, cfg.split_seed(), hash_seed)?;
    let rules = configured_rules(cfg, cfg.workload.class_count)?;
    let model = train(cfg, preset, &tr, &va, &rules, saved_index)?;
    let budget = model.dp.admit()?;
    let results = run_trace(&model.dp, &te, cfg.simulate.jobs)?;

    let labels: Vec<bool> = te.packets.iter().map(|p| positive(p.label)).collect();
    let scores: Vec<f64> = results.iter().map(|r| r.score.value).collect();
    let preds: Vec<bool> = scores.iter().map(|&s| s >= model.threshold).collect();
    let metrics = if te.packets.is_empty() {
        None
    } else {
        let p: Vec<usize> = preds.iter().map(|&b| usize::from(b)).collect();
        let l: Vec<usize> = labels.iter().map(|&b| usize::from(b)).collect();
        Some(score_metrics(&p, &l, Some(&scores), 2)?)
    };
    let mut paths = PathCounts::default();
    for r in &results {
        match r.score.path {
            FusionPath::HardVeto => paths.hard_veto += 1,
            FusionPath::SoftBlend => paths.soft_blend += 1,
            FusionPath::Whitelist => paths.whitelist += 1,
        }
    }
    let dp = &model.dp;
    let b = dp.fmt_s.total_bits() as u64;
    let peak = peak_concurrency(&te, hash_seed);
    let flow_bits = dp.flow_state_bits();
    let max_stage = results.iter().map(|r| r.trace.stage_use).max().unwrap_or(0);
    let phv_used = (dp.d() + dp.d_v() + dp.fm.m()) as u64 * b + 104;
    let utilization = Utilization {
        stateful_bits_per_flow: flow_bits,
        peak_concurrent_flows: peak,
        sram: (dp.table_elements() * b + peak as u64 * flow_bits) as f64 / dp.rm.sram_total_bits as f64,
        tcam: dp.tcam_entries_used() as f64 / dp.rm.tcam_entries as f64,
        bus: phv_used as f64 / dp.rm.phv_bits as f64,
        max_stage_use: max_stage,
        stages: max_stage as f64 / dp.rm.stages as f64,
        stage_violations: results.iter().filter(|r| r.trace.stage_violation).count(),
    };
    let packets: Vec<PacketLine> = te
        .packets
        .iter()
        .zip(&results)
        .zip(&preds)
        .map(|((p, r), &pred)| PacketLine {
            flow: format!("{:016x}", p.key.flow_id(hash_seed)),
            ts: p.ts,
            score: r.score.value,
            path: r.score.path.as_str().into(),
            n_t: r.trace.n_t,
            stage_use: r.trace.stage_use,
            label: p.label,
            pred: u8::from(pred),
        })
        .collect();
    let flow_packets: Vec<Vec<usize>> = te.flows(hash_seed).into_values().collect();
    Ok(SimulationOutput {
        summary: RunSummary {
            schema_version: SCHEMA_VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            preset,
            flows: trace.flow_count(hash_seed),
            packets: trace.packets.len(),
            train_flows: tr.flow_count(hash_seed),
            validation_flows: va.flow_count(hash_seed),
            test_flows: flow_packets.len(),
            metrics,
            paths,
            utilization,
            budget,
            training: model.report,
            normalization,
        },
        packets,
        flow_packets,
        labels,
        preds,
    })
}

/// Binary confusion counts `[tp, fp, fn, tn]`.
type Confusion = [u64; 4];

fn flow_confusions(out: &SimulationOutput) -> Vec<Confusion> {
    out.flow_packets
        .iter()
        .map(|idx| {
            let mut c = [0u64; 4];
            for &i in idx {
                let slot = match (out.preds[i], out.labels[i]) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                c[slot] += 1;
            }
            c
        })
        .collect()
}

fn macro_f1(c: &Confusion) -> f64 {
    let f1 = |tp: u64, fp: u64, fn_: u64| {
        let den = 2 * tp + fp + fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * tp as f64 / den as f64
        }
    };
    (f1(c[0], c[1], c[2]) + f1(c[3], c[2], c[1])) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: Preset,
    pub worse: Preset,
    pub gap: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// The lower end of the two-sided 95% interval is non-negative.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: String,
    pub config_hash: String,
    pub resamples: usize,
    pub test_flows: usize,
    pub macro_f1: BTreeMap<Preset, f64>,
    pub comparisons: Vec<Comparison>,
}

/// The ordering claims checked by the ablation.
pub const ABLATION_ORDER: [(Preset, Preset); 3] = [
    (Preset::Hybrid, Preset::GlobalOnly),
    (Preset::GlobalOnly, Preset::LocalOnly),
    (Preset::Cascade, Preset::SymbolicPure),
];

/// Run every preset on the same split and compare pairs with a paired
/// bootstrap over test flows.
pub fn ablation(
    cfg: &RunConfig,
    trace: &Trace,
    pairs: &[(Preset, Preset)],
) -> Result<(AblationReport, BTreeMap<Preset, RunSummary>)> {
    let mut needed: Vec<Preset> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
    needed.sort();
    needed.dedup();
    let mut outs = BTreeMap::new();
    for p in needed {
        outs.insert(p, simulate(cfg, trace, p, None)?);
    }
    let conf: BTreeMap<Preset, Vec<Confusion>> = outs.iter().map(|(p, o)| (*p, flow_confusions(o))).collect();
    let n_flows = conf.values().next().map_or(0, |c| c.len());
    let total = |c: &[Confusion], draw: &[usize]| -> f64 {
        let mut s = [0u64; 4];
        for &i in draw {
            for k in 0..4 {
                s[k] += c[i][k];
            }
        }
        macro_f1(&s)
    };
    let all: Vec<usize> = (0..n_flows).collect();
    let mut comparisons = Vec::new();
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let (ca, cb) = (&conf[&a], &conf[&b]);
        let gap = total(ca, &all) - total(cb, &all);
        let gaps = bootstrap(
            n_flows,
            cfg.simulate.bootstrap_resamples,
            cfg.bootstrap_seed() + i as u64,
            |d| total(ca, d) - total(cb, d),
        );
        let lo = percentile(&gaps, 2.5);
        let hi = percentile(&gaps, 97.5);
        comparisons.push(Comparison {
            better: a,
            worse: b,
            gap,
            ci_low: lo,
            ci_high: hi,
            pass: lo >= 0.0,
        });
    }
    let report = AblationReport {
        schema_version: SCHEMA_VERSION.into(),
        config_hash: cfg.hash(),
        resamples: cfg.simulate.bootstrap_resamples,
        test_flows: n_flows,
        macro_f1: outs
            .iter()
            .map(|(p, o)| (*p, o.summary.metrics.as_ref().map_or(0.0, |m| m.macro_f1)))
            .collect(),
        comparisons,
    };
    Ok((report, outs.into_iter().map(|(p, o)| (p, o.summary)).collect()))
}
