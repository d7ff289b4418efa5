use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nsattn::config::{RunConfig, SCHEMA_VERSION};
use nsattn::control_plane::{cadence_table, run_two_timescale, InstallDecision};
use nsattn::key_selection::GlobalIndex;
use nsattn::pipeline::{
    ablation, build_global_index, config_budget_report, configured_rules, fit_rules, simulate, BudgetOverrides,
    PacketLine, Preset, RunMode, ABLATION_ORDER,
};
use nsattn::symbolic::{compile_rules, rules_to_text, CompileOptions};
use nsattn::theory::{theory_check, TheoryCheck};
use nsattn::workload::{generate, load_trace, normalize, save_trace, score_metrics, split_by_flow, Trace};
use nsattn::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_BUDGET: u8 = 2;
const EXIT_THEORY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "nsattn", version, about = "Quantized linear-attention dataplane simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit wall-clock fields so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Ablation preset, overriding `simulate.preset`.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for flow processing.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Saved global index table to use instead of clustering the training split.
    #[arg(long, global = true)]
    global_index: Option<PathBuf>,
    /// Refuse configurations that break a hardware budget (exit code 2).
    #[arg(long, global = true)]
    strict: bool,
    /// `section.key=value` config override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the generated or given trace and score its test split.
    Simulate(SimulateArgs),
    /// Empirical checks of the approximation and stability bounds.
    TheoryCheck {
        #[arg(default_value = "all")]
        which: TheoryCheck,
    },
    /// Budget inequalities for the configured or given dimensions.
    Resources(ResourcesArgs),
    /// Two-timescale EMA and install loop over the workload.
    ControlLoop(ControlLoopArgs),
    /// Write the synthetic workload as a trace CSV.
    Generate {
        /// Destination file; `<out>/trace.csv` by default.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metrics of a per-packet JSON-lines file.
    Score {
        #[arg(long)]
        packets: PathBuf,
    },
    /// Fit soft-rule weights on the training split.
    FitRules(RulesArgs),
    /// Compile the soft-rule table and the global index table.
    CompileTables(RulesArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Trace CSV; overrides `simulate.trace`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Comma-separated window sizes; writes `window_sweep.csv`.
    #[arg(long, value_delimiter = ',')]
    window_sweep: Vec<usize>,
    /// Comma-separated feature dimensions; writes `pareto.csv`.
    #[arg(long, value_delimiter = ',')]
    pareto: Vec<usize>,
    /// Run every preset of the ordering claims and write `ablation.json`.
    #[arg(long)]
    ablation: bool,
}

#[derive(Args, Debug)]
struct ResourcesArgs {
    #[arg(long)]
    m: Option<u64>,
    #[arg(long)]
    d_v: Option<u64>,
    /// Register width in bits.
    #[arg(long)]
    b: Option<u64>,
    /// Local window length `L`.
    #[arg(long)]
    window: Option<u64>,
    #[arg(long)]
    d: Option<u64>,
    /// Table entries charged against `M_tbl`.
    #[arg(long)]
    n_entries: Option<u64>,
    /// Print the report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ControlLoopArgs {
    #[arg(long)]
    eta: Option<f64>,
    /// Control-plane period in seconds.
    #[arg(long)]
    t_cp: Option<f64>,
    #[arg(long)]
    tau_map: Option<f64>,
    /// Entries per second written by an install.
    #[arg(long)]
    install_rate: Option<f64>,
    /// Simulated horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Entries charged to every install instead of the table size.
    #[arg(long)]
    entries: Option<usize>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write `cadence.csv` over the standard grid.
    #[arg(long)]
    cadence_table: bool,
}

#[derive(Args, Debug)]
struct RulesArgs {
    /// Rule file; `rules.path` or the built-in set when absent.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// Fields every JSON artifact carries.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: &'static str,
    config_hash: &'a str,
    seed: u64,
    command: &'a str,
    result: T,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: &'static str,
    config_hash: &'a str,
    seed: u64,
    command: &'a str,
    files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at_unix_s: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_ms: Option<u128>,
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    global: Global,
    command: &'static str,
    files: Vec<String>,
    started: Instant,
}

enum Failure {
    Error(Error),
    Budget(String),
    Theory(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::BudgetViolation(_) | Error::BudgetExceeded { .. } => Failure::Budget(e.to_string()),
            Error::Flow { ref source, .. }
                if matches!(**source, Error::BudgetViolation(_) | Error::BudgetExceeded { .. }) =>
            {
                Failure::Budget(e.to_string())
            }
            e => Failure::Error(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

impl Ctx {
    fn new(global: Global, command: &'static str) -> Result<Self, Error> {
        let base = match &global.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&global.overrides)?;
        if let Some(s) = global.seed {
            cfg.set_seed(s);
        }
        if let Some(p) = global.preset {
            cfg.simulate.preset = p;
        }
        if let Some(j) = global.jobs {
            cfg.simulate.jobs = j.max(1);
        }
        if global.strict {
            cfg.simulate.mode = RunMode::StrictHw;
        }
        cfg.validate()?;
        fs::create_dir_all(&global.out)?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            global,
            command,
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    fn strict(&self) -> bool {
        self.cfg.simulate.mode == RunMode::StrictHw
    }

    fn path(&self, name: &str) -> PathBuf {
        self.global.out.join(name)
    }

    fn write(&mut self, name: &str, body: &str) -> Result<(), Error> {
        fs::write(self.path(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    fn write_enveloped<T: Serialize>(&mut self, name: &str, result: T) -> Result<(), Error> {
        let env = Envelope {
            schema_version: SCHEMA_VERSION,
            config_hash: &self.hash.clone(),
            seed: self.cfg.seed,
            command: self.command,
            result,
        };
        self.write_json(name, &env)
    }

    fn finish(mut self) -> Result<(), Error> {
        let cfg_text = self.cfg.to_toml();
        self.write("config.toml", &cfg_text)?;
        let det = self.global.deterministic;
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            config_hash: &self.hash,
            seed: self.cfg.seed,
            command: self.command,
            files: self.files.clone(),
            generated_at_unix_s: (!det)
                .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())),
            elapsed_ms: (!det).then(|| self.started.elapsed().as_millis()),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(self.path("manifest.json"), text + "\n")?;
        Ok(())
    }

    fn trace(&self, explicit: Option<&Path>) -> Result<Trace, Error> {
        match explicit.or(self.cfg.simulate.trace.as_deref()) {
            Some(p) => load_trace(p),
            None => generate(&self.cfg.workload),
        }
    }

    fn saved_index(&self) -> Result<Option<GlobalIndex>, Error> {
        self.global.global_index.as_deref().map(GlobalIndex::load).transpose()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Simulate(_) => "simulate",
        Command::TheoryCheck { .. } => "theory-check",
        Command::Resources(_) => "resources",
        Command::ControlLoop(_) => "control-loop",
        Command::Generate { .. } => "generate",
        Command::Score { .. } => "score",
        Command::FitRules(_) => "fit-rules",
        Command::CompileTables(_) => "compile-tables",
    };
    let result = Ctx::new(cli.global, name).map_err(Failure::from).and_then(|mut ctx| {
        let r = match cli.command {
            Command::Simulate(a) => cmd_simulate(&mut ctx, a),
            Command::TheoryCheck { which } => cmd_theory(&mut ctx, which),
            Command::Resources(a) => cmd_resources(&mut ctx, a),
            Command::ControlLoop(a) => cmd_control_loop(&mut ctx, a),
            Command::Generate { output } => cmd_generate(&mut ctx, output),
            Command::Score { packets } => cmd_score(&mut ctx, &packets),
            Command::FitRules(a) => cmd_fit_rules(&mut ctx, a),
            Command::CompileTables(a) => cmd_compile_tables(&mut ctx, a),
        };
        // artifacts written before a budget or theory failure still get a manifest
        ctx.finish()?;
        r
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
        Err(Failure::Budget(msg)) => {
            eprintln!("budget violation: {msg}");
            ExitCode::from(EXIT_BUDGET)
        }
        Err(Failure::Theory(msg)) => {
            eprintln!("theory check failed: {msg}");
            ExitCode::from(EXIT_THEORY)
        }
    }
}

fn cmd_simulate(ctx: &mut Ctx, a: SimulateArgs) -> Outcome {
    let trace = ctx.trace(a.trace.as_deref())?;
    let saved = ctx.saved_index()?;
    let preset = ctx.cfg.simulate.preset;
    let out = simulate(&ctx.cfg, &trace, preset, saved.as_ref())?;
    let mut lines = String::new();
    for p in &out.packets {
        lines.push_str(&serde_json::to_string(p).map_err(|e| Error::Io(e.to_string()))?);
        lines.push('\n');
    }
    ctx.write("packets.jsonl", &lines)?;
    ctx.write_json("summary.json", &out.summary)?;
    let f1 = out.summary.metrics.as_ref().map_or(0.0, |m| m.macro_f1);
    println!(
        "{preset}: {} test flows, {} packets, macro-F1 {f1:.4}, {} stateful bits/flow",
        out.summary.test_flows,
        out.packets.len(),
        out.summary.utilization.stateful_bits_per_flow
    );
    if !a.window_sweep.is_empty() {
        let mut csv = String::from("window,bits_per_flow,macro_f1\n");
        for &l in &a.window_sweep {
            let mut cfg = ctx.cfg.clone();
            cfg.window.capacity = l;
            let o = simulate(&cfg, &trace, preset, saved.as_ref())?;
            let f = o.summary.metrics.as_ref().map_or(0.0, |m| m.macro_f1);
            csv.push_str(&format!(
                "{l},{},{f:.6}\n",
                o.summary.utilization.stateful_bits_per_flow
            ));
        }
        ctx.write("window_sweep.csv", &csv)?;
    }
    if !a.pareto.is_empty() {
        let mut csv = String::from("m,bits_per_flow,macro_f1\n");
        for &m in &a.pareto {
            let mut cfg = ctx.cfg.clone();
            cfg.features.m = m;
            let o = simulate(&cfg, &trace, preset, saved.as_ref())?;
            let f = o.summary.metrics.as_ref().map_or(0.0, |m| m.macro_f1);
            csv.push_str(&format!(
                "{m},{},{f:.6}\n",
                o.summary.utilization.stateful_bits_per_flow
            ));
        }
        ctx.write("pareto.csv", &csv)?;
    }
    if a.ablation {
        let (report, _) = ablation(&ctx.cfg, &trace, &ABLATION_ORDER)?;
        for c in &report.comparisons {
            println!(
                "{} >= {}: gap {:+.4}, 95% CI [{:+.4}, {:+.4}] {}",
                c.better,
                c.worse,
                c.gap,
                c.ci_low,
                c.ci_high,
                if c.pass { "ok" } else { "not supported" }
            );
        }
        ctx.write_json("ablation.json", &report)?;
    }
    if ctx.strict() && out.summary.utilization.stage_violations > 0 {
        return Err(Failure::Budget(format!(
            "{} packets exceeded the stage budget",
            out.summary.utilization.stage_violations
        )));
    }
    Ok(())
}

fn cmd_theory(ctx: &mut Ctx, which: TheoryCheck) -> Outcome {
    let report = theory_check(which, &ctx.cfg)?;
    print!("{}", report.to_text());
    ctx.write_json("theory.json", &report)?;
    if !report.pass {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.check.to_string())
            .collect();
        return Err(Failure::Theory(failed.join(", ")));
    }
    Ok(())
}

fn cmd_resources(ctx: &mut Ctx, a: ResourcesArgs) -> Outcome {
    let ov = BudgetOverrides {
        m: a.m,
        d_v: a.d_v,
        b: a.b,
        window: a.window,
        d: a.d,
        n_entries: a.n_entries,
    };
    let report = config_budget_report(&ctx.cfg, &ov)?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?
        );
    } else {
        print!("{}", report.to_text());
    }
    let ok = report.all_ok();
    let text = report.to_text();
    ctx.write("budget.txt", &text)?;
    ctx.write_enveloped("budget.json", &report)?;
    if ctx.strict() && !ok {
        let names: Vec<&str> = report.violations().iter().map(|c| c.name.as_str()).collect();
        return Err(Failure::Budget(names.join(", ")));
    }
    Ok(())
}

fn cmd_control_loop(ctx: &mut Ctx, a: ControlLoopArgs) -> Outcome {
    let mut cl = ctx.cfg.cadence.clone();
    if let Some(v) = a.eta {
        cl.eta = v;
    }
    if let Some(v) = a.t_cp {
        cl.t_cp_s = v;
    }
    if let Some(v) = a.tau_map {
        cl.tau_map = v;
    }
    if let Some(v) = a.install_rate {
        cl.install_rate = v;
    }
    if let Some(v) = a.horizon {
        cl.horizon_s = v;
    }
    if a.entries.is_some() {
        cl.install_entries = a.entries;
    }
    cl.validate()?;
    // the effective loop settings belong to the recorded config
    ctx.cfg.cadence = cl.clone();
    ctx.hash = ctx.cfg.hash();
    let mut trace = ctx.trace(a.trace.as_deref())?;
    normalize(&mut trace, ctx.cfg.simulate.r, ctx.cfg.simulate.r_v);
    let tokens: Vec<(u64, Vec<f64>)> = trace.packets.iter().map(|p| (p.ts, p.features.clone())).collect();
    let horizon_ns = (cl.horizon_s * 1e9).round() as u64;
    let report = run_two_timescale(&tokens, &cl, &ctx.cfg.encoder()?, horizon_ns)?;
    println!(
        "eta {} T_cp {} s: {} epochs, {} installs accepted, {} skipped, {} rejected; dt_install {:.3} ms, budget ratio {:.4}%, mixed-version packets {}",
        cl.eta,
        cl.t_cp_s,
        report.epochs,
        report.installs_accepted,
        report.installs_skipped,
        report.installs_rejected,
        report.install_ms,
        report.budget_ratio * 100.0,
        report.mixed_version_packets
    );
    ctx.write("trajectory.csv", &report.trajectory_csv())?;
    ctx.write_enveloped("stability.json", &report)?;
    if a.cadence_table {
        let entries = cl.install_entries.unwrap_or(cl.k_max);
        let rows = cadence_table(&[0.05, 0.1, 0.3, 0.5], &[10.0, 60.0, 300.0], entries, cl.install_rate);
        let mut csv = String::from("eta,t_cp_s,memory_depth,install_ms,budget_ratio_pct,printed_pct\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{:.3},{:.3},{:.6},{}\n",
                r.eta,
                r.t_cp_s,
                r.memory_depth,
                r.install_ms,
                r.budget_ratio_pct,
                r.printed_pct.map_or(String::new(), |p| p.to_string())
            ));
        }
        ctx.write("cadence.csv", &csv)?;
    }
    let rejected = report
        .events
        .iter()
        .any(|e| e.decision == InstallDecision::RejectedAtomicity);
    if ctx.strict() && (rejected || report.mixed_version_packets > 0) {
        return Err(Failure::Budget(format!(
            "{} installs exceeded T_cp, {} packets saw mixed table versions",
            report.installs_rejected, report.mixed_version_packets
        )));
    }
    Ok(())
}

fn cmd_generate(ctx: &mut Ctx, output: Option<PathBuf>) -> Outcome {
    let trace = generate(&ctx.cfg.workload)?;
    match output {
        Some(p) => {
            save_trace(&trace, &p)?;
            println!("wrote {} packets to {}", trace.packets.len(), p.display());
        }
        None => {
            save_trace(&trace, &ctx.path("trace.csv"))?;
            ctx.files.push("trace.csv".into());
            println!(
                "wrote {} packets to {}",
                trace.packets.len(),
                ctx.path("trace.csv").display()
            );
        }
    }
    Ok(())
}

fn cmd_score(ctx: &mut Ctx, packets: &Path) -> Outcome {
    let text = fs::read_to_string(packets)?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PacketLine =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("{}:{}: {e}", packets.display(), i + 1)))?;
        preds.push(p.pred as usize);
        labels.push(usize::from(p.label != 0));
        scores.push(p.score);
    }
    let metrics = score_metrics(&preds, &labels, Some(&scores), 2)?;
    println!(
        "{} packets: macro-F1 {:.4}, precision {:.4}, recall {:.4}, AUC {}",
        preds.len(),
        metrics.macro_f1,
        metrics.precision,
        metrics.recall,
        metrics.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    ctx.write_enveloped("metrics.json", &metrics)?;
    Ok(())
}

fn rules_for(ctx: &Ctx, path: Option<&Path>) -> Result<Vec<nsattn::symbolic::SymbolicRule>, Error> {
    match path {
        Some(p) => nsattn::symbolic::load_rules(p),
        None => configured_rules(&ctx.cfg, ctx.cfg.workload.class_count),
    }
}

fn cmd_fit_rules(ctx: &mut Ctx, a: RulesArgs) -> Outcome {
    let rules = rules_for(ctx, a.rules.as_deref())?;
    let trace = ctx.trace(a.trace.as_deref())?;
    let (fitted, report) = fit_rules(&ctx.cfg, &trace, &rules)?;
    for (id, w) in &report.rule_weights {
        println!("rule {id}: weight {w:.6}");
    }
    ctx.write("rules.txt", &rules_to_text(&fitted))?;
    ctx.write_enveloped("fit.json", &report)?;
    Ok(())
}

fn cmd_compile_tables(ctx: &mut Ctx, a: RulesArgs) -> Outcome {
    let rules = rules_for(ctx, a.rules.as_deref())?;
    let weights: Vec<f64> = rules.iter().map(|r| if r.hard { 0.0 } else { r.weight }).collect();
    let out = compile_rules(
        &weights,
        &rules,
        ctx.cfg.rules.table_format,
        ctx.cfg.resources.sram_table_bits,
        &CompileOptions {
            drop_to_fit: ctx.cfg.rules.drop_to_fit,
            s_max: Some(ctx.cfg.rules.s_max),
        },
    )?;
    ctx.write("rules.tbl", &out.table.to_table_text())?;
    let mut trace = ctx.trace(a.trace.as_deref())?;
    normalize(&mut trace, ctx.cfg.simulate.r, ctx.cfg.simulate.r_v);
    let [train, _, _] = split_by_flow(
        &trace,
        ctx.cfg.simulate.split,
        ctx.cfg.split_seed(),
        ctx.cfg.hash_seed(),
    )?;
    let hard = rules.iter().filter(|r| r.hard).count() as u64;
    let capacity = ctx.cfg.resources.tcam_entries.saturating_sub(hard) as usize;
    let gidx = build_global_index(&ctx.cfg, &train, capacity)?;
    ctx.write("global_index.tbl", &gidx.to_table_text())?;
    println!(
        "rule table: {} entries, {} bits (dropped {:?}, zeroed {:?}); global index: {} entries",
        out.table.len(),
        out.table.total_bits(),
        out.dropped,
        out.zeroed,
        gidx.len()
    );
    Ok(())
}
