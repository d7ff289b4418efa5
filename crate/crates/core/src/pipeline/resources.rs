//! Switch resource model and the budget inequalities a configuration must
//! satisfy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourceModel {
    /// Width of one PHV lane.
    pub phv_bits: u64,
    pub per_flow_sram_bits: u64,
    pub tcam_entries: u64,
    /// `M_tbl`, table memory for the Map primitive.
    pub sram_table_bits: u64,
    pub stages: u32,
    pub pipelines: u32,
    /// Whole-switch SRAM, the denominator of the SRAM utilization figure.
    pub sram_total_bits: u64,
}

impl Default for ResourceModel {
    fn default() -> Self {
        Self {
            phv_bits: 4096,
            per_flow_sram_bits: 8192,
            tcam_entries: 2048,
            sram_table_bits: 1 << 20,
            stages: 20,
            pipelines: 1,
            sram_total_bits: 128 << 20,
        }
    }
}

impl ResourceModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("phv_bits", self.phv_bits),
            ("per_flow_sram_bits", self.per_flow_sram_bits),
            ("tcam_entries", self.tcam_entries),
            ("sram_table_bits", self.sram_table_bits),
            ("stages", self.stages as u64),
            ("pipelines", self.pipelines as u64),
            ("sram_total_bits", self.sram_total_bits),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("resources.{name} must be positive"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub name: String,
    pub inequality: String,
    pub required: u64,
    pub budget: u64,
    pub unit: Unit,
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unit {
    Bits,
    Entries,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub m: u64,
    pub d_v: u64,
    pub b: u64,
    pub window: u64,
    pub d: u64,
    pub n_entries: u64,
    /// `m d_v b`.
    pub agg_bits: u64,
    pub flow_ok: bool,
    pub window_ok: bool,
    pub table_ok: bool,
    pub phv_ok: bool,
    pub details: Vec<BudgetCheck>,
    /// Aggregated-state figure printed for this operating point in the
    /// published hyperparameter table, when it differs from `agg_bits`.
    pub printed_agg_bits: Option<u64>,
}

/// Rows of the published hyperparameter table: `(m, d_v, b, printed
/// aggregated state in bytes)`.
pub const PRINTED_AGG_STATE: [(u64, u64, u64, u64); 9] = [
    (64, 32, 16, 2048),
    (64, 64, 16, 4096),
    (128, 32, 16, 4096),
    (128, 64, 16, 8192),
    (128, 32, 8, 2048),
    (128, 64, 8, 4096),
    (256, 32, 16, 8192),
    (256, 64, 16, 16384),
    (256, 128, 16, 32768),
];

/// `1,234,567`.
pub fn group_thousands(x: u64) -> String {
    let s = x.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Bits as a binary-prefixed byte count: `32 KB`, `1.5 KB`, `96 B`.
pub fn human_bytes(bits: u64) -> String {
    let bytes = bits as f64 / 8.0;
    let (v, unit) = if bytes >= 1024.0 * 1024.0 {
        (bytes / (1024.0 * 1024.0), "MB")
    } else if bytes >= 1024.0 {
        (bytes / 1024.0, "KB")
    } else {
        (bytes, "B")
    };
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s} {unit}")
}

fn check(name: &str, inequality: &str, required: u64, budget: u64, unit: Unit) -> BudgetCheck {
    BudgetCheck {
        name: name.into(),
        inequality: inequality.into(),
        required,
        budget,
        unit,
        ok: required <= budget,
    }
}

/// Evaluate the aggregated-state, window, table and PHV inequalities.
/// `b` is the per-element width in bits; the window stores `L` keys of `d`
/// elements each.
pub fn check_budgets(rm: &ResourceModel, m: u64, d_v: u64, b: u64, l: u64, d: u64, n_entries: u64) -> BudgetReport {
    let agg = m * d_v * b;
    let window = l * d * b;
    let table = n_entries * b;
    let details = vec![
        check(
            "per_flow_state",
            "m*d_v*b <= per_flow_sram_bits",
            agg,
            rm.per_flow_sram_bits,
            Unit::Bits,
        ),
        check(
            "window",
            "L*d*b <= per_flow_sram_bits",
            window,
            rm.per_flow_sram_bits,
            Unit::Bits,
        ),
        check("table", "N_entries*b <= M_tbl", table, rm.sram_table_bits, Unit::Bits),
        check("phv", "m*d_v*b <= phv_bits", agg, rm.phv_bits, Unit::Bits),
    ];
    let printed = PRINTED_AGG_STATE
        .iter()
        .find(|r| (r.0, r.1, r.2) == (m, d_v, b))
        .map(|r| r.3 * 8)
        .filter(|&p| p != agg);
    BudgetReport {
        m,
        d_v,
        b,
        window: l,
        d,
        n_entries,
        agg_bits: agg,
        flow_ok: details[0].ok,
        window_ok: details[1].ok,
        table_ok: details[2].ok,
        phv_ok: details[3].ok,
        details,
        printed_agg_bits: printed,
    }
}

impl BudgetReport {
    /// True when every recorded inequality holds, including any added with
    /// [`BudgetReport::push_check`].
    pub fn all_ok(&self) -> bool {
        self.details.iter().all(|c| c.ok)
    }

    pub fn push_check(&mut self, name: &str, inequality: &str, required: u64, budget: u64, unit: Unit) {
        self.details.push(check(name, inequality, required, budget, unit));
    }

    pub fn violations(&self) -> Vec<&BudgetCheck> {
        self.details.iter().filter(|c| !c.ok).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "aggregated state m*d_v*b = {}*{}*{} = {} bits ({})",
            self.m,
            self.d_v,
            self.b,
            group_thousands(self.agg_bits),
            human_bytes(self.agg_bits)
        );
        if let Some(p) = self.printed_agg_bits {
            let _ = writeln!(
                s,
                "  published table lists {} bits ({}) for this point; computed value differs",
                group_thousands(p),
                human_bytes(p)
            );
        }
        let width = self.details.iter().map(|c| c.inequality.len()).max().unwrap_or(0);
        for c in &self.details {
            let amount = match c.unit {
                Unit::Bits => format!(
                    "{:>12} / {:>12} bits ({} of {})",
                    group_thousands(c.required),
                    group_thousands(c.budget),
                    human_bytes(c.required),
                    human_bytes(c.budget)
                ),
                Unit::Entries => format!(
                    "{:>12} / {:>12} entries",
                    group_thousands(c.required),
                    group_thousands(c.budget)
                ),
            };
            let _ = writeln!(
                s,
                "{:<15} {:<width$} {amount}  {}",
                c.name,
                c.inequality,
                if c.ok { "ok" } else { "INFEASIBLE" }
            );
        }
        let _ = writeln!(s, "overall: {}", if self.all_ok() { "FEASIBLE" } else { "INFEASIBLE" });
        s
    }
}

/// Per-flow stateful bits: `S`, `Z`, the key/value window and the counters.
pub fn flow_state_bits(m: u64, d_v: u64, b_s: u64, b_z: u64, l: u64, d: u64, b_window: u64, counter_bits: u64) -> u64 {
    m * d_v * b_s + m * b_z + l * (d + d_v) * b_window + counter_bits
}
