//! Per-packet runtime: key selection, incremental attention, rule lookups
//! and fusion, with stage and memory accounting.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::primitives::reduce_stages;
use super::resources::{check_budgets, flow_state_bits, BudgetReport, ResourceModel, Unit};
use crate::attention::{AttentionState, Token};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::fusion::{fuse_with_action, FusedScore, FusionConfig};
use crate::key_selection::{select_keys, GlobalIndex, LocalWindow, Provenance};
use crate::quantization::{FixedPointFormat, OverflowPolicy};
use crate::symbolic::{hard_action, CompiledRuleTable, SymbolicRule};
use crate::workload::{PacketRecord, Trace};

/// Token ids at or above this belong to the global index.
pub const GLOBAL_ID_BASE: u64 = 1 << 62;
/// Packet and absorbed-key counters, 32 bits each.
pub const COUNTER_BITS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Refuse configurations that break a budget inequality.
    StrictHw,
    /// Run anyway and report the violations.
    #[default]
    Analysis,
}

/// Linear read-out of the attention output: `s_nn = w.o + b0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralReadout {
    pub w: Vec<f64>,
    pub b0: f64,
}

impl NeuralReadout {
    /// Project onto the difference of the class value means, centered at
    /// their midpoint.
    pub fn from_class_means(mu0: &[f64], mu1: &[f64]) -> Self {
        let w: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
        let b0 = -w
            .iter()
            .zip(mu0.iter().zip(mu1))
            .map(|(w, (a, b))| w * (a + b) / 2.0)
            .sum::<f64>();
        Self { w, b0 }
    }

    pub fn apply(&self, o: &[f64]) -> f64 {
        self.w.iter().zip(o).map(|(w, x)| w * x).sum::<f64>() + self.b0
    }
}

/// Immutable per-run dataplane program: feature map, installed tables and
/// fusion parameters. Shared read-only by every flow worker.
#[derive(Debug, Clone)]
pub struct Dataplane {
    pub fm: FeatureMap,
    pub gidx: GlobalIndex,
    /// Hard rules live in TCAM; soft rules arrive compiled in `table`.
    pub hard_rules: Vec<SymbolicRule>,
    pub table: CompiledRuleTable,
    pub fusion: FusionConfig,
    pub readout: NeuralReadout,
    pub rm: ResourceModel,
    pub window: usize,
    pub cap: usize,
    pub fmt_s: FixedPointFormat,
    pub fmt_z: FixedPointFormat,
    pub policy: OverflowPolicy,
    pub gamma_floor: f64,
    /// Whether the attention score feeds the fusion at all.
    pub neural: bool,
    pub hash_seed: u64,
    pub mode: RunMode,
}

impl Dataplane {
    pub fn d(&self) -> usize {
        self.fm.d()
    }

    pub fn d_v(&self) -> usize {
        self.readout.w.len()
    }

    /// Stateful bits one flow context occupies: `S`, `Z`, the window, the
    /// counters and one absorbed bit per global entry.
    pub fn flow_state_bits(&self) -> u64 {
        flow_state_bits(
            self.fm.m() as u64,
            self.d_v() as u64,
            self.fmt_s.total_bits() as u64,
            self.fmt_z.total_bits() as u64,
            self.window as u64,
            self.d() as u64,
            self.fmt_s.total_bits() as u64,
            COUNTER_BITS + self.gidx.len() as u64,
        )
    }

    pub fn tcam_entries_used(&self) -> u64 {
        (self.gidx.len() + self.hard_rules.len()) as u64
    }

    /// Stored table elements: soft-rule weights plus the key and value of
    /// every global token.
    pub fn table_elements(&self) -> u64 {
        self.table.len() as u64 + self.gidx.len() as u64 * (self.d() + self.d_v()) as u64
    }

    pub fn budget_report(&self) -> BudgetReport {
        let b = self.fmt_s.total_bits() as u64;
        let mut r = check_budgets(
            &self.rm,
            self.fm.m() as u64,
            self.d_v() as u64,
            b,
            self.window as u64,
            self.d() as u64,
            self.table_elements(),
        );
        r.push_check(
            "flow_context",
            "S + Z + window + counters <= per_flow_sram_bits",
            self.flow_state_bits(),
            self.rm.per_flow_sram_bits,
            Unit::Bits,
        );
        r.push_check(
            "tcam",
            "global entries + hard rules <= tcam_entries",
            self.tcam_entries_used(),
            self.rm.tcam_entries,
            Unit::Entries,
        );
        r
    }

    /// Budget gate before a run: an error in strict mode, a report otherwise.
    pub fn admit(&self) -> Result<BudgetReport> {
        self.rm.validate()?;
        let r = self.budget_report();
        if self.mode == RunMode::StrictHw && !r.all_ok() {
            let names: Vec<&str> = r.violations().iter().map(|c| c.name.as_str()).collect();
            return Err(Error::BudgetViolation(format!(
                "strict-hw run refused: {}",
                names.join(", ")
            )));
        }
        Ok(r)
    }

    pub fn new_flow(&self, flow_id: u64) -> FlowContext {
        let mut state = AttentionState::with_formats(self.fm.m(), self.d_v(), self.fmt_s, self.fmt_z, self.policy);
        state.set_policy(self.policy);
        FlowContext {
            flow_id,
            window: LocalWindow::new(self.window),
            state,
            absorbed: BTreeSet::new(),
            stats: FlowStats::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlowStats {
    pub packets: u64,
    pub absorbed: u64,
    pub clamped_queries: u64,
}

/// Per-flow dataplane state, owned by exactly one worker at a time.
#[derive(Debug, Clone)]
pub struct FlowContext {
    pub flow_id: u64,
    pub window: LocalWindow,
    pub state: AttentionState,
    absorbed: BTreeSet<u64>,
    pub stats: FlowStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResourceTrace {
    pub n_t: usize,
    pub local_keys: usize,
    pub global_keys: usize,
    pub tcam_matches: usize,
    pub dropped: usize,
    pub newly_absorbed: usize,
    pub tcam_lookups: u32,
    pub map_accesses: u32,
    pub reduce_stages: u32,
    pub stage_use: u32,
    pub stage_violation: bool,
    pub flow_state_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketResult {
    pub score: FusedScore,
    pub s_nn: f64,
    pub s_sym: f64,
    pub i_sym: u8,
    pub trace: ResourceTrace,
}

/// Run one packet through the dataplane program.
///
/// Order: push the packet's token into the local window, select
/// `L_t ∪ G(q_t)` under the `N_t` cap, absorb every selected key the flow has
/// not absorbed yet, query the state for `s_nn`, look up hard and soft rules,
/// then fuse.
pub fn process_packet(dp: &Dataplane, fc: &mut FlowContext, pkt: &PacketRecord, token_id: u64) -> Result<PacketResult> {
    let wrap = |e: Error| Error::Flow {
        flow: fc.flow_id,
        source: Box::new(e),
    };
    if pkt.features.len() != dp.d() {
        return Err(Error::DimensionMismatch {
            expected: dp.d(),
            got: pkt.features.len(),
        });
    }
    if pkt.value.len() != dp.d_v() {
        return Err(Error::DimensionMismatch {
            expected: dp.d_v(),
            got: pkt.value.len(),
        });
    }
    let q = &pkt.features;
    if dp.window > 0 {
        let tok = Token::new(token_id, q.clone(), pkt.value.clone());
        if let Some(old) = fc.window.push(tok) {
            // an evicted local key can never be selected again
            fc.absorbed.remove(&old.id);
        }
    }
    let sel = select_keys(&fc.window, &dp.gidx, q, dp.cap)?;
    let mut newly = 0usize;
    let mut state = fc.state.clone();
    for k in &sel.keys {
        if !fc.absorbed.contains(&k.token.id) {
            let phi = dp.fm.apply(&k.token.key)?;
            state.absorb(&phi, &k.token.value).map_err(&wrap)?;
            newly += 1;
        }
    }
    for k in &sel.keys {
        fc.absorbed.insert(k.token.id);
    }
    fc.state = state;
    let mut trace = ResourceTrace {
        n_t: sel.n_t(),
        local_keys: sel.count(Provenance::Local),
        global_keys: sel.count(Provenance::Global),
        tcam_matches: sel.tcam_matches,
        dropped: sel.dropped,
        newly_absorbed: newly,
        flow_state_bits: dp.flow_state_bits(),
        ..ResourceTrace::default()
    };

    let s_nn = if dp.neural && fc.state.t() > 0 {
        let out = fc.state.query(&dp.fm, q, dp.gamma_floor).map_err(&wrap)?;
        if out.clamped {
            fc.stats.clamped_queries += 1;
        }
        dp.readout.apply(&out.o)
    } else {
        0.0
    };
    let fields = pkt.key.field_bits();
    let action = hard_action(&dp.hard_rules, fields);
    let i_sym = u8::from(action.is_some_and(|a| a == crate::symbolic::RuleAction::Alarm));
    let (s_sym, _) = dp.table.score_detail(fields);
    let score = fuse_with_action(s_nn, action, s_sym, &dp.fusion);

    trace.tcam_lookups = u32::from(!dp.gidx.is_empty()) + u32::from(!dp.hard_rules.is_empty());
    trace.map_accesses = u32::from(dp.neural) + newly as u32 + u32::from(!dp.table.is_empty());
    trace.reduce_stages = reduce_stages(newly) + if dp.neural { reduce_stages(dp.fm.m()) } else { 0 };
    trace.stage_use = trace.tcam_lookups + trace.map_accesses + trace.reduce_stages;
    trace.stage_violation = trace.stage_use > dp.rm.stages;

    fc.stats.packets += 1;
    fc.stats.absorbed += newly as u64;
    Ok(PacketResult {
        score,
        s_nn,
        s_sym,
        i_sym,
        trace,
    })
}

/// Process a whole trace, flows spread over `jobs` workers. Results come
/// back in trace order whatever the worker count. On failure the error of the
/// earliest failing packet is returned.
pub fn run_trace(dp: &Dataplane, trace: &Trace, jobs: usize) -> Result<Vec<PacketResult>> {
    let flows: Vec<(u64, Vec<usize>)> = trace.flows(dp.hash_seed).into_iter().collect();
    let jobs = jobs.clamp(1, flows.len().max(1));
    let work = |w: usize| -> (Vec<(usize, PacketResult)>, Option<(usize, Error)>) {
        let mut out = Vec::new();
        for (id, idx) in flows.iter().skip(w).step_by(jobs) {
            let mut fc = dp.new_flow(*id);
            for &i in idx {
                match process_packet(dp, &mut fc, &trace.packets[i], i as u64) {
                    Ok(r) => out.push((i, r)),
                    Err(e) => return (out, Some((i, e))),
                }
            }
        }
        (out, None)
    };
    let parts: Vec<(Vec<(usize, PacketResult)>, Option<(usize, Error)>)> = if jobs == 1 {
        vec![work(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs).map(|w| s.spawn(move || work(w))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("flow worker panicked"))
                .collect()
        })
    };
    if let Some((_, e)) = parts.iter().filter_map(|p| p.1.as_ref()).min_by_key(|(i, _)| *i) {
        return Err(e.clone());
    }
    let mut slots: Vec<Option<PacketResult>> = vec![None; trace.packets.len()];
    for (i, r) in parts.into_iter().flat_map(|p| p.0) {
        slots[i] = Some(r);
    }
    Ok(slots
        .into_iter()
        .map(|r| r.expect("every packet belongs to a flow"))
        .collect())
}

/// Head-to-pipeline assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub pipelines: usize,
    /// `assignment[h]` is the pipeline of head `h`.
    pub assignment: Vec<usize>,
    /// Heads per pipeline, in head order.
    pub per_pipeline: Vec<Vec<usize>>,
}

/// Round-robin assignment of heads to pipelines.
pub fn shard_heads(head_states: &[AttentionState], pipelines: usize) -> Result<ShardPlan> {
    if pipelines == 0 {
        return Err(Error::Config("pipelines must be positive".into()));
    }
    let assignment: Vec<usize> = (0..head_states.len()).map(|h| h % pipelines).collect();
    let mut per_pipeline = vec![Vec::new(); pipelines];
    for (h, &p) in assignment.iter().enumerate() {
        per_pipeline[p].push(h);
    }
    Ok(ShardPlan {
        pipelines,
        assignment,
        per_pipeline,
    })
}

/// Pairwise merge of partial states, `ceil(log2 n)` stages deep.
pub fn merge_states(mut states: Vec<AttentionState>) -> Result<(AttentionState, u32)> {
    if states.is_empty() {
        return Err(Error::InvalidDimension("nothing to merge".into()));
    }
    let mut stages = 0;
    while states.len() > 1 {
        let mut next = Vec::with_capacity(states.len().div_ceil(2));
        for pair in states.chunks(2) {
            next.push(match pair {
                [a, b] => a.merge(b)?,
                [a] => a.clone(),
                _ => unreachable!(),
            });
        }
        states = next;
        stages += 1;
    }
    Ok((states.pop().unwrap(), stages))
}

/// Spread `tokens` round-robin over `pipelines` partial states of one head,
/// then merge them.
pub fn run_sharded(
    fm: &FeatureMap,
    tokens: &[Token],
    d_v: usize,
    fmt_s: FixedPointFormat,
    fmt_z: FixedPointFormat,
    pipelines: usize,
) -> Result<AttentionState> {
    if pipelines == 0 {
        return Err(Error::Config("pipelines must be positive".into()));
    }
    let mut parts: Vec<AttentionState> = (0..pipelines)
        .map(|_| AttentionState::with_formats(fm.m(), d_v, fmt_s, fmt_z, OverflowPolicy::Checked))
        .collect();
    for (i, t) in tokens.iter().enumerate() {
        parts[i % pipelines].update(fm, t)?;
    }
    Ok(merge_states(parts)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::fusion::FusionPath;
    use crate::key_selection::SignatureEncoder;
    use crate::workload::FlowKey;
    use std::net::Ipv4Addr;

    fn q() -> FixedPointFormat {
        FixedPointFormat::new(16, 8).unwrap()
    }

    fn dp(window: usize, hard: Vec<SymbolicRule>) -> Dataplane {
        Dataplane {
            fm: FeatureMap::new(FeatureKind::PositiveRandomFeatures, 16, 4, 3, 1.0).unwrap(),
            gidx: GlobalIndex::empty(SignatureEncoder::default(), 64),
            hard_rules: hard,
            table: CompiledRuleTable::empty(q()),
            fusion: FusionConfig::default(),
            readout: NeuralReadout {
                w: vec![1.0, 0.0],
                b0: 0.0,
            },
            rm: ResourceModel::default(),
            window,
            cap: 32,
            fmt_s: q(),
            fmt_z: q(),
            policy: OverflowPolicy::Checked,
            gamma_floor: q().lsb(),
            neural: true,
            hash_seed: 0,
            mode: RunMode::Analysis,
        }
    }

    fn pkt(dport: u16, f: [f64; 4], v: [f64; 2]) -> PacketRecord {
        PacketRecord {
            ts: 0,
            key: FlowKey {
                src: Ipv4Addr::new(10, 0, 0, 1),
                dst: Ipv4Addr::new(10, 0, 0, 2),
                sport: 1234,
                dport,
                proto: 6,
            },
            features: f.to_vec(),
            value: v.to_vec(),
            label: 0,
        }
    }

    #[test]
    fn hard_rule_vetoes() {
        let d = dp(8, vec![SymbolicRule::hard(0, 1, 0x06_0000_7a69, 0xff_0000_ffff)]);
        let mut fc = d.new_flow(1);
        let r = process_packet(&d, &mut fc, &pkt(31337, [0.1, -0.2, 0.3, 0.0], [-0.9, 0.4]), 0).unwrap();
        assert_eq!(
            r.score,
            FusedScore {
                value: 1.0,
                path: FusionPath::HardVeto
            }
        );
        assert_eq!(r.i_sym, 1);
    }

    #[test]
    fn first_packet_reads_its_own_value() {
        let d = dp(8, vec![]);
        let mut fc = d.new_flow(1);
        let r = process_packet(&d, &mut fc, &pkt(80, [0.2, 0.1, -0.3, 0.4], [0.75, -0.5]), 0).unwrap();
        assert_eq!(r.score.path, FusionPath::SoftBlend);
        // one token: o = v up to quantization of S and Z
        assert!((r.s_nn - 0.75).abs() < 0.05, "{}", r.s_nn);
        assert_eq!(r.trace.n_t, 1);
        assert_eq!(r.trace.newly_absorbed, 1);
        let r2 = process_packet(&d, &mut fc, &pkt(80, [0.2, 0.1, -0.3, 0.4], [0.75, -0.5]), 1).unwrap();
        assert_eq!(r2.trace.newly_absorbed, 1);
        assert_eq!(fc.state.t(), 2);
    }

    #[test]
    fn no_window_no_keys() {
        let d = dp(0, vec![]);
        let mut fc = d.new_flow(1);
        let r = process_packet(&d, &mut fc, &pkt(80, [0.0; 4], [1.0, 1.0]), 0).unwrap();
        assert_eq!((r.trace.n_t, r.s_nn), (0, 0.0));
        assert_eq!(r.score.value, 0.5);
    }

    #[test]
    fn strict_mode_refuses_over_budget() {
        let mut d = dp(8, vec![]);
        d.rm.per_flow_sram_bits = 256;
        assert!(d.admit().is_ok());
        d.mode = RunMode::StrictHw;
        assert!(matches!(d.admit(), Err(Error::BudgetViolation(_))));
        let ok = dp(8, vec![]);
        assert!(ok.budget_report().all_ok());
        assert!(ok.flow_state_bits() <= ok.rm.per_flow_sram_bits);
    }

    #[test]
    fn sharding_plans() {
        let st = AttentionState::new(2, 1, q());
        let one = shard_heads(&[st.clone(), st.clone(), st.clone()], 1).unwrap();
        assert_eq!(one.assignment, vec![0, 0, 0]);
        let four = shard_heads(&vec![st; 4], 2).unwrap();
        assert_eq!(four.per_pipeline, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn sharded_equals_unsharded() {
        let fm = FeatureMap::new(FeatureKind::PositiveRandomFeatures, 8, 4, 5, 1.0).unwrap();
        let toks: Vec<Token> = (0..37)
            .map(|i| {
                let x = i as f64 / 37.0;
                Token::new(i, vec![x, -x, 0.5 - x, 0.1], vec![x - 0.5, 0.25])
            })
            .collect();
        let single = run_sharded(&fm, &toks, 2, q(), q(), 1).unwrap();
        for p in 2..=5 {
            assert!(run_sharded(&fm, &toks, 2, q(), q(), p).unwrap().same_registers(&single));
        }
    }
}
