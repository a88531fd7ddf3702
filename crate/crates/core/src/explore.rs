//! Explorative execution: find the value a status register must read as.
//!
//! When a run pauses at an unexplored SR read, the machine state is
//! snapshotted and the 33 candidate values (each single bit, plus zero)
//! are evaluated in independent workers launched from that snapshot. A
//! worker runs until the frame containing the read is popped, it crashes,
//! it stalls, or it exhausts its block budget. Candidates that survived —
//! or whose failure was provably unrelated to the candidate value — are
//! ranked by how much data-register traffic they unlocked; the winner is
//! committed to the handler table under the read's four-tuple context.
//!
//! [`InstantiateSession`] drives whole-model construction: repeated runs
//! over seeded inputs, exploring every miss, until the model digest stays
//! unchanged for a fixed number of runs.

use thiserror::Error;

use crate::exec::{ExecBus, ExecLimits, Execution, RunStop, RunVerdict};
use crate::fuzz::{ExhaustPolicy, InputChannel};
use crate::hash::SplitMix64;
use crate::irq::{FiringStrategy, IrqEvent, IrqState};
use crate::machine::{FaultKind, LoadError, MachineState, StepOutcome};
use crate::regmodel::{RegModel, SrAccessContext, TieBreakRecord};

/// One-hot bits 0..=31 plus the all-zeros candidate.
pub const NUM_CANDIDATES: usize = 33;
/// Worker block budget: hard cap on one candidate evaluation.
pub const WORKER_BUDGET_BLOCKS: u64 = 20_000;
/// Worker stall heuristic: consecutive blocks without a worker-local new
/// edge.
pub const WORKER_STALL_BLOCKS: u64 = 2_000;

/// Candidate value evaluated by worker `i`.
pub fn candidate_value(i: usize) -> u32 {
    debug_assert!(i < NUM_CANDIDATES);
    if i < 32 {
        1 << i
    } else {
        0
    }
}

/// Worker termination knobs. Defaults are the engine's fixed values;
/// tests shrink them to exercise each exit path.
#[derive(Debug, Clone, Copy)]
pub struct WorkerParams {
    pub budget_blocks: u64,
    pub stall_blocks: u64,
}

impl Default for WorkerParams {
    fn default() -> WorkerParams {
        WorkerParams { budget_blocks: WORKER_BUDGET_BLOCKS, stall_blocks: WORKER_STALL_BLOCKS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerOutcome {
    /// The frame containing the SR read returned (or the firmware halted).
    RanToFramePop,
    Crashed { kind: FaultKind, at: u32 },
    Stalled,
    BudgetExhausted,
}

impl WorkerOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            WorkerOutcome::RanToFramePop => "ran_to_frame_pop",
            WorkerOutcome::Crashed { .. } => "crashed",
            WorkerOutcome::Stalled => "stalled",
            WorkerOutcome::BudgetExhausted => "budget_exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateResult {
    pub candidate_value: u32,
    pub outcome: WorkerOutcome,
    /// DR reads + DR writes, any peripheral, over the worker's lifetime.
    pub dr_access_count: u64,
    /// The crash/stall consumed data tainted by this SR read's value.
    pub sr_dependent_failure: bool,
    /// Unexplored SR contexts hit inside the worker (served 0, not
    /// recursed; the sites get their own rounds later in main execution).
    pub nested_misses: Vec<SrAccessContext>,
}

impl CandidateResult {
    /// Rule (1): the worker neither crashed nor stalled.
    pub fn ran_clean(&self) -> bool {
        matches!(
            self.outcome,
            WorkerOutcome::RanToFramePop | WorkerOutcome::BudgetExhausted
        )
    }

    /// Rule (2): failed, but not traceably because of the candidate.
    pub fn failed_independently(&self) -> bool {
        !self.ran_clean() && !self.sr_dependent_failure
    }
}

/// Everything a worker needs to rerun the paused read: machine paused at
/// the SR read instruction, model with the pending replay armed, interrupt
/// state, and the input cursor position.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub machine: MachineState,
    pub model: RegModel,
    pub irq: IrqState,
    pub input: InputChannel,
    pub ctx: SrAccessContext,
    /// Shadow-stack depth at the read; popping below it ends the worker.
    pub anchor_depth: usize,
}

impl Snapshot {
    /// Capture from an execution that just returned [`RunStop::Miss`].
    pub fn capture(exec: &Execution, ctx: SrAccessContext) -> Snapshot {
        Snapshot {
            machine: exec.machine.clone(),
            model: exec.bus.model.clone(),
            irq: exec.bus.irq.clone(),
            input: exec.bus.input.clone(),
            ctx,
            anchor_depth: exec.machine.shadow_depth(),
        }
    }
}

/// A recorded tie among top-ranked candidates and the PRNG draw that
/// resolved it. `tied` lists the candidate values in worker-index order;
/// the winner is `tied[draw % tied.len()]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TieBreak {
    pub draw: u64,
    pub tied: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ExploreOutcome {
    pub winner: u32,
    /// All 33 results in worker-index order (bit 0 … bit 31, then zero).
    pub results: Vec<CandidateResult>,
    pub tie_break: Option<TieBreak>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExploreError {
    /// Every candidate crashed or stalled because of its own value: the
    /// firmware cannot run on any peripheral-agnostic answer here.
    #[error(
        "no qualified candidate for SR {addr:#010x} at block {bbl:#010x}",
        addr = .0.addr,
        bbl = .0.bbl
    )]
    NoQualifiedCandidate(SrAccessContext),
}

/// Run one candidate from the snapshot to its termination condition.
/// Workers are fully isolated: they run on clones of the machine, model,
/// interrupt state, and input cursor, with interrupt firing disabled.
pub fn run_candidate(snap: &Snapshot, value: u32, params: &WorkerParams) -> CandidateResult {
    let mut model = snap.model.clone();
    model.install_handler(&snap.ctx, value);
    let mut bus = ExecBus::new(
        model,
        snap.irq.clone(),
        FiringStrategy::None,
        snap.input.fork(ExhaustPolicy::Zeros),
    );
    bus.worker_mode = true;
    bus.arm_candidate_taint(snap.ctx.addr);
    bus.reset_progress(snap.machine.bb_count);
    let base_bb = snap.machine.bb_count;
    let mut exec = Execution::from_parts(snap.machine.clone(), bus);

    let finish = |exec: Execution, outcome: WorkerOutcome, sr_dep: bool| CandidateResult {
        candidate_value: value,
        outcome,
        dr_access_count: exec.bus.dr_reads + exec.bus.dr_writes,
        sr_dependent_failure: sr_dep,
        nested_misses: exec.bus.nested_misses.clone(),
    };

    loop {
        if exec.machine.shadow_depth() < snap.anchor_depth {
            return finish(exec, WorkerOutcome::RanToFramePop, false);
        }
        if exec.machine.bb_count - base_bb >= params.budget_blocks {
            return finish(exec, WorkerOutcome::BudgetExhausted, false);
        }
        if exec.machine.bb_count.saturating_sub(exec.bus.last_new_edge_bb())
            >= params.stall_blocks
        {
            let sr_dep = exec.bus.candidate_signal_since_edge;
            return finish(exec, WorkerOutcome::Stalled, sr_dep);
        }
        match exec.step() {
            StepOutcome::Ok => {}
            StepOutcome::Halted => {
                return finish(exec, WorkerOutcome::RanToFramePop, false);
            }
            StepOutcome::Fault(f) => {
                let outcome = WorkerOutcome::Crashed { kind: f.kind, at: f.pc };
                return finish(exec, outcome, f.candidate_tainted);
            }
            StepOutcome::Paused => {
                // Workers never pause: nested misses are served inline and
                // the zeros policy never exhausts input.
                unreachable!("worker paused");
            }
        }
    }
}

/// Qualification and ranking over the 33 results. Qualified = ran clean;
/// if none, qualified = failed for candidate-independent reasons. Winner
/// is the qualified candidate with the most DR traffic; ties resolve by
/// one recorded PRNG draw.
pub fn qualify_and_rank(
    results: &[CandidateResult],
    ctx: SrAccessContext,
    prng: &mut SplitMix64,
) -> Result<(u32, Option<TieBreak>), ExploreError> {
    let clean: Vec<&CandidateResult> = results.iter().filter(|r| r.ran_clean()).collect();
    let qualified: Vec<&CandidateResult> = if !clean.is_empty() {
        clean
    } else {
        results.iter().filter(|r| r.failed_independently()).collect()
    };
    if qualified.is_empty() {
        return Err(ExploreError::NoQualifiedCandidate(ctx));
    }
    let best = qualified.iter().map(|r| r.dr_access_count).max().unwrap();
    let tied: Vec<u32> = qualified
        .iter()
        .filter(|r| r.dr_access_count == best)
        .map(|r| r.candidate_value)
        .collect();
    if tied.len() == 1 {
        return Ok((tied[0], None));
    }
    let draw = prng.next_u64();
    let winner = tied[(draw % tied.len() as u64) as usize];
    Ok((winner, Some(TieBreak { draw, tied })))
}

/// Evaluate all 33 candidates sequentially and pick the winner. The
/// snapshot is read-only; the caller installs the winner into the live
/// model (and logs the tie-break, if any).
pub fn explore(
    snap: &Snapshot,
    params: &WorkerParams,
    prng: &mut SplitMix64,
) -> Result<ExploreOutcome, ExploreError> {
    let results: Vec<CandidateResult> = (0..NUM_CANDIDATES)
        .map(|i| run_candidate(snap, candidate_value(i), params))
        .collect();
    let (winner, tie_break) = qualify_and_rank(&results, snap.ctx, prng)?;
    Ok(ExploreOutcome { winner, results, tie_break })
}

/// One explored miss, as logged for the session report.
#[derive(Debug, Clone)]
pub struct ExplorationRecord {
    /// Session run index the miss occurred in.
    pub run: u32,
    pub ctx: SrAccessContext,
    pub outcome: ExploreOutcome,
    /// Present when the session keeps audit snapshots (sequential-oracle
    /// replay of the exploration).
    pub snapshot: Option<Snapshot>,
}

/// One model-changing run (a "round").
#[derive(Debug, Clone)]
pub struct RoundEntry {
    pub round: u32,
    /// Session run index that produced the change.
    pub run: u32,
    pub digest: u64,
    pub explorations_in_run: u32,
    pub verdict: &'static str,
}

#[derive(Debug, Clone)]
pub struct InstantiateConfig {
    pub seed: u64,
    /// Consecutive model-quiet runs before the model counts as stable.
    pub stable_after: u32,
    /// Hard cap on total runs (stability may never arrive).
    pub runs_budget: u32,
    /// Bytes of derived input per run.
    pub input_len: usize,
    pub limits: ExecLimits,
    pub irq_interval: u64,
    pub strategy: FiringStrategy,
    pub worker_params: WorkerParams,
    /// Retain per-exploration snapshots for oracle replay.
    pub keep_snapshots: bool,
}

impl Default for InstantiateConfig {
    fn default() -> InstantiateConfig {
        InstantiateConfig {
            seed: 1,
            stable_after: 10,
            runs_budget: 200,
            input_len: 4096,
            limits: ExecLimits::default(),
            irq_interval: crate::irq::DEFAULT_IRQ_INTERVAL,
            strategy: FiringStrategy::RoundRobin,
            worker_params: WorkerParams::default(),
            keep_snapshots: false,
        }
    }
}

/// Model construction session: runs the firmware over seeded random
/// inputs, explores every SR miss, and tracks model stability. The model,
/// exploration log, and interrupt activity accumulate across runs; each
/// run starts from a pristine machine and fresh interrupt state.
pub struct InstantiateSession {
    pristine: MachineState,
    pub model: RegModel,
    cfg: InstantiateConfig,
    prng: SplitMix64,
    pub runs: u32,
    pub rounds: u32,
    quiet: u32,
    pub round_log: Vec<RoundEntry>,
    pub explorations: Vec<ExplorationRecord>,
    /// Enable/disable events observed across all runs, in order.
    pub irq_events: Vec<IrqEvent>,
    /// (block, irq) firings across all runs, in order.
    pub firings: Vec<(u64, u8)>,
    /// Verdict of each run, in order.
    pub verdicts: Vec<&'static str>,
}

#[derive(Debug, Error)]
pub enum InstantiateError {
    #[error("firmware image rejected: {0}")]
    Load(#[from] LoadError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
}

impl InstantiateSession {
    pub fn new(image: &[u8], cfg: InstantiateConfig) -> Result<InstantiateSession, LoadError> {
        let pristine = MachineState::load_firmware(image)?;
        let prng = SplitMix64::derive(cfg.seed, "instantiate-session", 0);
        Ok(InstantiateSession {
            pristine,
            model: RegModel::new(),
            cfg,
            prng,
            runs: 0,
            rounds: 0,
            quiet: 0,
            round_log: Vec::new(),
            explorations: Vec::new(),
            irq_events: Vec::new(),
            firings: Vec::new(),
            verdicts: Vec::new(),
        })
    }

    /// The model saw no change for `stable_after` consecutive runs.
    pub fn stable(&self) -> bool {
        self.quiet >= self.cfg.stable_after
    }

    fn derived_input(&self) -> Vec<u8> {
        let mut rng = SplitMix64::derive(self.cfg.seed, "instantiate-input", self.runs as u64);
        let mut buf = vec![0u8; self.cfg.input_len];
        rng.fill(&mut buf);
        buf
    }

    /// One run over the next derived input.
    pub fn run_once(&mut self) -> Result<RunVerdict, InstantiateError> {
        let input = self.derived_input();
        self.run_with_input(&input)
    }

    /// One run over caller-supplied input bytes; misses are explored and
    /// committed exactly as in seeded runs.
    pub fn run_with_input(&mut self, input: &[u8]) -> Result<RunVerdict, InstantiateError> {
        let digest_before = self.model.digest();
        let model = std::mem::take(&mut self.model);
        let bus = ExecBus::new(
            model,
            IrqState::new(self.cfg.irq_interval),
            self.cfg.strategy.clone(),
            InputChannel::new(input.to_vec(), ExhaustPolicy::Zeros),
        );
        let mut exec = Execution::from_parts(self.pristine.clone(), bus);
        let mut explorations_in_run = 0u32;
        let verdict = loop {
            match exec.run(&self.cfg.limits) {
                RunStop::Verdict(v) => break v,
                RunStop::Miss(ctx) => {
                    let snap = Snapshot::capture(&exec, ctx);
                    let outcome =
                        match explore(&snap, &self.cfg.worker_params, &mut self.prng) {
                            Ok(o) => o,
                            Err(e) => {
                                // Keep what the session learned before the
                                // failing exploration.
                                self.model = exec.bus.model;
                                return Err(e.into());
                            }
                        };
                    exec.bus.model.install_handler(&ctx, outcome.winner);
                    if let Some(tb) = &outcome.tie_break {
                        exec.bus.model.push_tie_break(TieBreakRecord {
                            ctx,
                            draw: tb.draw,
                            chosen: outcome.winner,
                        });
                    }
                    explorations_in_run += 1;
                    self.explorations.push(ExplorationRecord {
                        run: self.runs,
                        ctx,
                        snapshot: self.cfg.keep_snapshots.then(|| snap.clone()),
                        outcome,
                    });
                }
            }
        };
        self.model = exec.bus.model;
        self.irq_events.extend(exec.bus.irq.event_log.iter().cloned());
        self.firings.extend(exec.bus.irq.firing_log.iter().copied());
        self.verdicts.push(verdict.name());
        let digest = self.model.digest();
        if digest != digest_before {
            self.rounds += 1;
            self.quiet = 0;
            self.round_log.push(RoundEntry {
                round: self.rounds,
                run: self.runs,
                digest,
                explorations_in_run,
                verdict: verdict.name(),
            });
        } else {
            self.quiet += 1;
        }
        self.runs += 1;
        Ok(verdict)
    }

    /// Run until stable or the run budget is spent.
    pub fn run_to_stable(&mut self) -> Result<(), InstantiateError> {
        while !self.stable() && self.runs < self.cfg.runs_budget {
            self.run_once()?;
        }
        Ok(())
    }
}

/// Build a model for `image` from scratch: seeded runs until stability.
pub fn instantiate(
    image: &[u8],
    cfg: InstantiateConfig,
) -> Result<InstantiateSession, InstantiateError> {
    let mut session = InstantiateSession::new(image, cfg)?;
    session.run_to_stable()?;
    Ok(session)
}
