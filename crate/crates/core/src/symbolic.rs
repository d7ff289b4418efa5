//! Symbolic rules: hard TCAM matching, soft scores from compiled weight
//! tables, and offline hinge-loss MRF weight fitting.
//!
//! Every rule reads "body ⇒ malicious". Its hinge potential is
//! `Φ(y) = clamp(body − y, 0, 1)`, so with a binary label the Gibbs form
//! `P(y | x) ∝ exp(−Σ W_q Φ_q(y, x))` gives `P(y = 1 | x) = σ(Σ W_q body_q)`.
//! Fitting minimizes its regularized cross-entropy over `W ≥ 0`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key_selection::{parse_pattern, TernaryEntry};
use crate::quantization::{quantize, FixedPointFormat};

/// What a matching hard rule forces the fused score to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleAction {
    #[default]
    Alarm,
    Whitelist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicRule {
    pub id: u32,
    pub hard: bool,
    pub priority: i64,
    pub value: u128,
    pub mask: u128,
    pub weight: f64,
    #[serde(default)]
    pub action: RuleAction,
}

impl SymbolicRule {
    pub fn soft(id: u32, priority: i64, value: u128, mask: u128, weight: f64) -> Self {
        Self {
            id,
            hard: false,
            priority,
            value,
            mask,
            weight,
            action: RuleAction::Alarm,
        }
    }

    pub fn hard(id: u32, priority: i64, value: u128, mask: u128) -> Self {
        Self {
            id,
            hard: true,
            priority,
            value,
            mask,
            weight: 0.0,
            action: RuleAction::Alarm,
        }
    }

    pub fn matches(&self, fields: u128) -> bool {
        (fields & self.mask) == (self.value & self.mask)
    }

    pub fn to_line(&self) -> String {
        let kind = if self.hard { "hard" } else { "soft" };
        let mut s = format!(
            "{kind} {} {:#x}/{:#x} {:?}",
            self.priority, self.value, self.mask, self.weight
        );
        if self.action == RuleAction::Whitelist {
            s.push_str(" whitelist");
        }
        s
    }
}

/// Rule file: one rule per line, `hard|soft priority pattern/mask weight`,
/// optionally followed by `whitelist`. Rule ids are line ordinals among
/// rule lines.
pub fn parse_rules(text: &str) -> Result<Vec<SymbolicRule>> {
    let mut rules = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Parse(format!("rule line: {line:?}"));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&parts.len()) {
            return Err(bad());
        }
        let hard = match parts[0] {
            "hard" => true,
            "soft" => false,
            _ => return Err(bad()),
        };
        let priority = parts[1].parse().map_err(|_| bad())?;
        let (value, mask) = parse_pattern(parts[2])?;
        let weight: f64 = parts[3].parse().map_err(|_| bad())?;
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::InvalidBound(format!(
                "rule weight must be finite and >= 0: {line:?}"
            )));
        }
        let action = match parts.get(4) {
            None => RuleAction::Alarm,
            Some(&"whitelist") => RuleAction::Whitelist,
            Some(&"alarm") => RuleAction::Alarm,
            Some(_) => return Err(bad()),
        };
        rules.push(SymbolicRule {
            id: rules.len() as u32,
            hard,
            priority,
            value,
            mask,
            weight,
            action,
        });
    }
    Ok(rules)
}

pub fn rules_to_text(rules: &[SymbolicRule]) -> String {
    rules.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn load_rules(path: &Path) -> Result<Vec<SymbolicRule>> {
    parse_rules(&std::fs::read_to_string(path)?)
}

/// `1` iff some hard alarm rule matches.
pub fn hard_match(rules: &[SymbolicRule], fields: u128) -> u8 {
    rules
        .iter()
        .any(|r| r.hard && r.action == RuleAction::Alarm && r.matches(fields)) as u8
}

/// Action of the highest-priority matching hard rule, if any.
pub fn hard_action(rules: &[SymbolicRule], fields: u128) -> Option<RuleAction> {
    rules
        .iter()
        .filter(|r| r.hard && r.matches(fields))
        .max_by_key(|r| r.priority)
        .map(|r| r.action)
}

/// One grounding of a rule on a training example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub example: usize,
    pub rule_id: u32,
    /// Truth value of the rule body in `[0, 1]`.
    pub body: f64,
    /// Label in `[0, 1]`.
    pub label: f64,
}

impl Grounding {
    /// Hinge distance to satisfaction at label `y`.
    pub fn distance(&self, y: f64) -> f64 {
        (self.body - y).clamp(0.0, 1.0)
    }
}

/// Keep the items whose confidence is at least `theta_high`.
pub fn expand_groundings<T>(pool: Vec<(f64, T)>, theta_high: f64) -> Vec<T> {
    pool.into_iter()
        .filter(|(c, _)| *c >= theta_high)
        .map(|(_, t)| t)
        .collect()
}

/// `Σ W_q Φ_q`.
pub fn hlmrf_energy(w: &[f64], potentials: &[f64]) -> Result<f64> {
    if w.len() != potentials.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: potentials.len(),
        });
    }
    Ok(w.iter().zip(potentials).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub iters: usize,
    /// Initial step; iteration `t` (from 1) uses `step / t`.
    pub step: f64,
    pub l2: f64,
    pub init: f64,
    /// Pin rules without groundings to weight 0 instead of failing.
    pub allow_unreferenced: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iters: 200,
            step: 4.0,
            l2: 1e-3,
            init: 1.0,
            allow_unreferenced: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub weights: Vec<f64>,
    /// Objective before the first step and after each iteration.
    pub objective: Vec<f64>,
    pub pinned: Vec<u32>,
}

struct Example {
    label: f64,
    bodies: Vec<(usize, f64)>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn objective(w: &[f64], ex: &[Example], l2: f64) -> f64 {
    let n = ex.len().max(1) as f64;
    let nll: f64 = ex
        .iter()
        .map(|e| {
            let z: f64 = e.bodies.iter().map(|&(q, b)| w[q] * b).sum();
            // -[y log σ(z) + (1-y) log(1-σ(z))]
            e.label * softplus(-z) + (1.0 - e.label) * softplus(z)
        })
        .sum();
    nll / n + 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>()
}

fn gradient(w: &[f64], ex: &[Example], l2: f64) -> Vec<f64> {
    let n = ex.len().max(1) as f64;
    let mut g: Vec<f64> = w.iter().map(|x| l2 * x).collect();
    for e in ex {
        let z: f64 = e.bodies.iter().map(|&(q, b)| w[q] * b).sum();
        let r = (sigmoid(z) - e.label) / n;
        for &(q, b) in &e.bodies {
            g[q] += r * b;
        }
    }
    g
}

/// Projected gradient descent on `W ≥ 0` with `1/t` step decay. Each step
/// backtracks until the objective does not increase.
pub fn fit_weights(rule_ids: &[u32], groundings: &[Grounding], opts: &FitOptions) -> Result<FitResult> {
    let index: BTreeMap<u32, usize> = rule_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let mut by_example: BTreeMap<usize, Example> = BTreeMap::new();
    let mut referenced = BTreeSet::new();
    for g in groundings {
        let &q = index
            .get(&g.rule_id)
            .ok_or_else(|| Error::Config(format!("grounding references unknown rule {}", g.rule_id)))?;
        if !(0.0..=1.0).contains(&g.body) || !(0.0..=1.0).contains(&g.label) {
            return Err(Error::InvalidBound(format!("grounding outside [0, 1]: {g:?}")));
        }
        referenced.insert(q);
        let e = by_example.entry(g.example).or_insert(Example {
            label: g.label,
            bodies: Vec::new(),
        });
        e.bodies.push((q, g.body));
    }
    let pinned: Vec<u32> = rule_ids
        .iter()
        .enumerate()
        .filter(|(i, _)| !referenced.contains(i))
        .map(|(_, &r)| r)
        .collect();
    if let (Some(&rule), false) = (pinned.first(), opts.allow_unreferenced) {
        return Err(Error::NoGroundings { rule });
    }
    let free: Vec<bool> = (0..rule_ids.len()).map(|i| referenced.contains(&i)).collect();
    let examples: Vec<Example> = by_example.into_values().collect();
    let mut w: Vec<f64> = free.iter().map(|&f| if f { opts.init.max(0.0) } else { 0.0 }).collect();
    let mut j = objective(&w, &examples, opts.l2);
    let mut trace = vec![j];
    for t in 1..=opts.iters {
        let g = gradient(&w, &examples, opts.l2);
        let mut lr = opts.step / t as f64;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = w
                .iter()
                .zip(&g)
                .zip(&free)
                .map(|((x, gx), &f)| if f { (x - lr * gx).max(0.0) } else { 0.0 })
                .collect();
            let jc = objective(&cand, &examples, opts.l2);
            if jc <= j {
                w = cand;
                j = jc;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            log::debug!("fit_weights: no descent step at iteration {t}");
        }
        trace.push(j);
    }
    Ok(FitResult {
        weights: w,
        objective: trace,
        pinned,
    })
}

/// Quantized soft-rule weights as SRAM table entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledRuleTable {
    pub format: FixedPointFormat,
    /// Entry payload is the rule id; the second element is the raw weight.
    pub entries: Vec<(TernaryEntry, i64)>,
    pub s_max: f64,
}

pub const DEFAULT_S_MAX: f64 = 1.0;

impl CompiledRuleTable {
    pub fn empty(format: FixedPointFormat) -> Self {
        Self {
            format,
            entries: Vec::new(),
            s_max: DEFAULT_S_MAX,
        }
    }

    pub fn bitwidth(&self) -> u32 {
        self.format.total_bits() as u32
    }

    /// `N_entries b`.
    pub fn total_bits(&self) -> u64 {
        self.entries.len() as u64 * self.bitwidth() as u64
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of matching dequantized weights, clamped to `[0, s_max]`, and the
    /// number of matching entries.
    pub fn score_detail(&self, fields: u128) -> (f64, usize) {
        let mut raw: i128 = 0;
        let mut n = 0;
        for (e, w) in &self.entries {
            if e.matches(fields) {
                raw += *w as i128;
                n += 1;
            }
        }
        ((raw as f64 * self.format.lsb()).clamp(0.0, self.s_max), n)
    }

    pub fn to_table_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "!format {}", self.format).unwrap();
        writeln!(out, "!smax {:?}", self.s_max).unwrap();
        for (e, w) in &self.entries {
            writeln!(out, "{} {:?}", e.to_line(), *w as f64 * self.format.lsb()).unwrap();
        }
        out
    }

    pub fn from_table_text(text: &str) -> Result<Self> {
        let mut format = None;
        let mut s_max = DEFAULT_S_MAX;
        let mut rows = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("!format") {
                format = Some(rest.trim().parse::<FixedPointFormat>()?);
            } else if let Some(rest) = line.strip_prefix("!smax") {
                s_max = rest.trim().parse().map_err(|_| Error::Parse(line.into()))?;
            } else {
                let (e, trailing) = TernaryEntry::parse_line(line)?;
                let w: f64 = trailing
                    .ok_or_else(|| Error::Parse(format!("missing weight column: {line:?}")))?
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad weight: {line:?}")))?;
                rows.push((e, w));
            }
        }
        let format = format.ok_or_else(|| Error::Parse("compiled table lacks !format".into()))?;
        let entries = rows
            .into_iter()
            .map(|(e, w)| Ok((e, quantize(w, format)?.raw())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { format, entries, s_max })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table_text(&std::fs::read_to_string(path)?)
    }
}

pub fn soft_score(table: &CompiledRuleTable, fields: u128) -> f64 {
    table.score_detail(fields).0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Drop the lowest-weight rules until the table fits instead of failing.
    pub drop_to_fit: bool,
    pub s_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompileOutput {
    pub table: CompiledRuleTable,
    pub dropped: Vec<u32>,
    /// Rules whose weight fell below one LSB and were stored as zero.
    pub zeroed: Vec<u32>,
}

/// Quantize the weights of the soft rules into a table that must satisfy
/// `N_entries b <= M_tbl`. `weights[i]` belongs to `rules[i]`.
pub fn compile_rules(
    weights: &[f64],
    rules: &[SymbolicRule],
    format: FixedPointFormat,
    m_tbl: u64,
    opts: &CompileOptions,
) -> Result<CompileOutput> {
    if weights.len() != rules.len() {
        return Err(Error::DimensionMismatch {
            expected: rules.len(),
            got: weights.len(),
        });
    }
    let mut soft: Vec<(&SymbolicRule, f64)> = rules
        .iter()
        .zip(weights)
        .filter(|(r, _)| !r.hard)
        .map(|(r, &w)| (r, w))
        .collect();
    if let Some((r, w)) = soft.iter().find(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidBound(format!("rule {} has weight {w}", r.id)));
    }
    let b = format.total_bits() as u64;
    let mut dropped = Vec::new();
    if soft.len() as u64 * b > m_tbl {
        if !opts.drop_to_fit {
            return Err(Error::BudgetExceeded {
                required_bits: soft.len() as u64 * b,
                budget_bits: m_tbl,
            });
        }
        let keep = (m_tbl / b) as usize;
        let mut order: Vec<usize> = (0..soft.len()).collect();
        // lowest weight first, ties by larger id first so earlier rules survive
        order.sort_by(|&a, &c| soft[a].1.total_cmp(&soft[c].1).then(soft[c].0.id.cmp(&soft[a].0.id)));
        let drop: BTreeSet<usize> = order[..soft.len() - keep].iter().copied().collect();
        dropped = drop.iter().map(|&i| soft[i].0.id).collect();
        soft = soft
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, x)| x)
            .collect();
    }
    let mut entries = Vec::with_capacity(soft.len());
    let mut zeroed = Vec::new();
    for (r, w) in soft {
        let raw = if w < format.lsb() {
            if w > 0.0 {
                warn!("rule {} weight {w} is below one LSB of {format}; stored as 0", r.id);
                zeroed.push(r.id);
            }
            0
        } else {
            quantize(w, format)?.raw()
        };
        entries.push((
            TernaryEntry {
                value: r.value,
                mask: r.mask,
                priority: r.priority,
                payload: r.id as u64,
            },
            raw,
        ));
    }
    let table = CompiledRuleTable {
        format,
        entries,
        s_max: opts.s_max.unwrap_or(DEFAULT_S_MAX),
    };
    debug_assert!(table.total_bits() <= m_tbl);
    Ok(CompileOutput { table, dropped, zeroed })
}
