//! Match-action dataplane simulator: primitives, resource accounting, the
//! per-packet runtime and end-to-end runs.

mod dataplane;
mod primitives;
mod resources;
mod sim;

pub use dataplane::{
    merge_states, process_packet, run_sharded, run_trace, shard_heads, Dataplane, FlowContext, FlowStats,
    NeuralReadout, PacketResult, ResourceTrace, RunMode, ShardPlan, COUNTER_BITS, GLOBAL_ID_BASE,
};
pub use primitives::{map_apply, partition, reduce_stages, sum_reduce, Reduced};
pub use resources::{
    check_budgets, flow_state_bits, group_thousands, human_bytes, BudgetCheck, BudgetReport, ResourceModel, Unit,
    PRINTED_AGG_STATE,
};
pub use sim::{
    ablation, best_threshold, build_global_index, config_budget_report, configured_rules, default_rules,
    default_rules_text, fit_logistic, fit_rules, simulate, train, AblationReport, BudgetOverrides, Comparison,
    PacketLine, PathCounts, Preset, PresetSpec, RunSummary, SimulationOutput, TrainedModel, TrainingReport,
    Utilization, ABLATION_ORDER,
};
