//! Whole-firmware execution: machine + register model + interrupts + input.
//!
//! [`Execution`] owns one machine and one [`ExecBus`] (everything the CPU
//! talks to) and runs firmware until a verdict. A status-register read with
//! no handler pauses the run instead of finishing it — the caller explores,
//! installs the winner, and calls [`Execution::run`] again; the paused
//! instruction re-issues its read against the now-complete table.

use std::collections::BTreeSet;

use crate::fuzz::{CoverageMap, InputChannel};
use crate::irq::{FiringStrategy, IrqState};
use crate::machine::{
    AccessEvent, Bus, Fault, LoadError, MachineState, MmioReadValue, StepOutcome,
};
use crate::regmodel::{ReadResponse, RegCategory, RegModel, SrAccessContext};

#[derive(Debug, Clone, Copy)]
pub struct ExecLimits {
    /// Instructions per run before the run is declared hung.
    pub max_insns: u64,
    /// Consecutive blocks without a new edge or DR consumption before the
    /// run is declared hung.
    pub hang_blocks: u64,
}

impl Default for ExecLimits {
    fn default() -> ExecLimits {
        ExecLimits { max_insns: 2_000_000, hang_blocks: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunVerdict {
    /// Firmware reached HALT.
    Ok,
    Crash(Fault),
    Hang,
    InputExhausted,
    /// Pure-fuzz mode only: an unexplored SR context ended the run.
    ModelMiss(SrAccessContext),
}

impl RunVerdict {
    pub fn name(&self) -> &'static str {
        match self {
            RunVerdict::Ok => "ok",
            RunVerdict::Crash(_) => "crash",
            RunVerdict::Hang => "hang",
            RunVerdict::InputExhausted => "input_exhausted",
            RunVerdict::ModelMiss(_) => "model_miss",
        }
    }
}

/// How a call to [`Execution::run`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStop {
    Verdict(RunVerdict),
    /// Paused at an unexplored SR read; install a handler and run again.
    Miss(SrAccessContext),
}

/// Everything outside the CPU. `stub` mode short-circuits all modeling:
/// MMIO reads return 0, writes vanish, no interrupts fire — the
/// "no peripheral model at all" baseline for coverage comparisons.
#[derive(Debug, Clone)]
pub struct ExecBus {
    pub model: RegModel,
    pub irq: IrqState,
    pub strategy: FiringStrategy,
    pub input: InputChannel,
    pub stub: bool,
    /// Bytes firmware wrote to the debug port, in order.
    pub debug_out: Vec<u8>,
    /// Logged DR writes `(addr, value)` (firmware TX traffic).
    pub dr_write_log: Vec<(u32, u32)>,
    pub coverage: CoverageMap,
    /// Distinct blocks landed on this run.
    pub blocks: BTreeSet<u32>,
    pub dr_reads: u64,
    pub dr_writes: u64,
    pub wfi_count: u64,
    cur_bb: u64,
    /// Block count at the last new edge or DR word consumption.
    last_progress_bb: u64,
    /// Block count at the last new edge only (worker stall heuristic).
    last_new_edge_bb: u64,
    pending_miss: Option<SrAccessContext>,
    /// Worker mode: reads of this register carry candidate taint for the
    /// whole worker lifetime (every such read serves the candidate value).
    candidate_taint_addr: Option<u32>,
    /// A comparison consumed candidate-tainted data since the last new
    /// edge (worker stall attribution).
    pub candidate_signal_since_edge: bool,
    /// Exploration worker: unexplored SR reads return 0 inline (recorded
    /// in `nested_misses`) instead of pausing — workers never recurse.
    pub worker_mode: bool,
    pub nested_misses: Vec<SrAccessContext>,
    input_ended: bool,
}

impl ExecBus {
    pub fn new(
        model: RegModel,
        irq: IrqState,
        strategy: FiringStrategy,
        input: InputChannel,
    ) -> ExecBus {
        ExecBus {
            model,
            irq,
            strategy,
            input,
            stub: false,
            debug_out: Vec::new(),
            dr_write_log: Vec::new(),
            coverage: CoverageMap::new(),
            blocks: BTreeSet::new(),
            dr_reads: 0,
            dr_writes: 0,
            wfi_count: 0,
            cur_bb: 0,
            last_progress_bb: 0,
            last_new_edge_bb: 0,
            pending_miss: None,
            candidate_taint_addr: None,
            candidate_signal_since_edge: false,
            worker_mode: false,
            nested_misses: Vec::new(),
            input_ended: false,
        }
    }

    /// Arm candidate-taint delivery for the worker's pending SR read.
    pub fn arm_candidate_taint(&mut self, addr: u32) {
        self.candidate_taint_addr = Some(addr);
    }

    /// Re-base the progress clocks for a bus attached to a machine that is
    /// already mid-run (worker snapshots), so stall accounting starts now.
    pub fn reset_progress(&mut self, bb_count: u64) {
        self.cur_bb = bb_count;
        self.last_progress_bb = bb_count;
        self.last_new_edge_bb = bb_count;
    }

    pub fn last_new_edge_bb(&self) -> u64 {
        self.last_new_edge_bb
    }

    pub fn last_progress_bb(&self) -> u64 {
        self.last_progress_bb
    }

    fn note_edge(&mut self, prev: u32, cur: u32, bb_count: u64) {
        if self.coverage.record(prev, cur) {
            self.last_progress_bb = bb_count;
            self.last_new_edge_bb = bb_count;
            self.candidate_signal_since_edge = false;
        }
        self.blocks.insert(cur);
    }
}

impl Bus for ExecBus {
    fn mmio_read(&mut self, ev: &AccessEvent) -> Option<MmioReadValue> {
        if self.stub {
            return Some(MmioReadValue { value: 0, candidate: false });
        }
        let candidate = self.candidate_taint_addr == Some(ev.addr);
        match self.model.on_read(ev) {
            ReadResponse::Value(v) => Some(MmioReadValue { value: v, candidate }),
            ReadResponse::NeedInput => match self.input.next_word() {
                Some(w) => {
                    self.dr_reads += 1;
                    self.last_progress_bb = self.cur_bb;
                    Some(MmioReadValue { value: w, candidate: false })
                }
                None => {
                    self.input_ended = true;
                    None
                }
            },
            ReadResponse::Miss(ctx) => {
                if self.worker_mode {
                    self.model.install_handler(&ctx, 0);
                    self.nested_misses.push(ctx);
                    return Some(MmioReadValue { value: 0, candidate });
                }
                self.pending_miss = Some(ctx);
                None
            }
        }
    }

    fn mmio_write(&mut self, ev: &AccessEvent) {
        if self.stub {
            return;
        }
        self.model.on_write(ev);
        if self.model.record(ev.addr).map(|r| r.category) == Some(RegCategory::Data) {
            self.dr_writes += 1;
            self.dr_write_log.push((ev.addr, ev.value));
        }
    }

    fn scs_read(&mut self, addr: u32) -> u32 {
        self.irq.scs_read(addr)
    }

    fn scs_write(&mut self, addr: u32, value: u32) {
        self.irq.scs_write(addr, value, self.cur_bb);
    }

    fn debug_byte(&mut self, byte: u8) {
        self.debug_out.push(byte);
    }

    fn cond_signal(&mut self, src: u32, candidate: bool) {
        if self.stub {
            return;
        }
        self.model.cond_signal(src);
        if candidate {
            self.candidate_signal_since_edge = true;
        }
    }

    fn guarded_branch_taken(&mut self, src: u32, frame_id: u64) {
        if self.stub {
            return;
        }
        self.model.guarded_branch_taken(src, frame_id);
    }

    fn block_crossed(&mut self, prev: u32, cur: u32, bb_count: u64, in_isr: u32) -> Option<u8> {
        self.cur_bb = bb_count;
        self.note_edge(prev, cur, bb_count);
        if self.stub {
            return None;
        }
        self.irq.tick(&self.strategy, bb_count, in_isr)
    }

    fn wfi(&mut self) {
        self.wfi_count += 1;
    }
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub machine: MachineState,
    pub bus: ExecBus,
    prev_shadow_depth: usize,
}

impl Execution {
    pub fn new(
        image: &[u8],
        model: RegModel,
        irq: IrqState,
        strategy: FiringStrategy,
        input: InputChannel,
    ) -> Result<Execution, LoadError> {
        let machine = MachineState::load_firmware(image)?;
        Ok(Execution::from_parts(machine, ExecBus::new(model, irq, strategy, input)))
    }

    /// Assemble from an existing machine + bus (snapshot restore, workers).
    pub fn from_parts(machine: MachineState, bus: ExecBus) -> Execution {
        let prev_shadow_depth = machine.shadow_depth();
        Execution { machine, bus, prev_shadow_depth }
    }

    /// One instruction; keeps guard events pruned to live frames.
    pub fn step(&mut self) -> StepOutcome {
        let out = self.machine.step(&mut self.bus);
        let depth = self.machine.shadow_depth();
        if depth < self.prev_shadow_depth {
            let machine = &self.machine;
            self.bus.model.prune_guard_events(|f| {
                f == 0 || machine.shadow_stack().iter().any(|fr| fr.frame_id == f)
            });
        }
        self.prev_shadow_depth = depth;
        out
    }

    fn hung(&self, limits: &ExecLimits) -> bool {
        self.machine.insn_count >= limits.max_insns
            || self.machine.bb_count.saturating_sub(self.bus.last_progress_bb())
                >= limits.hang_blocks
    }

    /// Run until a verdict or an SR-handler miss. After a miss, install a
    /// handler and call again; execution resumes at the paused instruction.
    pub fn run(&mut self, limits: &ExecLimits) -> RunStop {
        loop {
            if self.hung(limits) {
                return RunStop::Verdict(RunVerdict::Hang);
            }
            match self.step() {
                StepOutcome::Ok => {}
                StepOutcome::Halted => return RunStop::Verdict(RunVerdict::Ok),
                StepOutcome::Fault(f) => return RunStop::Verdict(RunVerdict::Crash(f)),
                StepOutcome::Paused => {
                    if self.bus.input_ended {
                        return RunStop::Verdict(RunVerdict::InputExhausted);
                    }
                    if let Some(ctx) = self.bus.pending_miss.take() {
                        return RunStop::Miss(ctx);
                    }
                    // A pause with no cause recorded is a logic error.
                    unreachable!("machine paused without input end or model miss");
                }
            }
        }
    }

    /// Run treating a model miss as a terminal verdict (pure-fuzz mode).
    pub fn run_to_verdict(&mut self, limits: &ExecLimits) -> RunVerdict {
        match self.run(limits) {
            RunStop::Verdict(v) => v,
            RunStop::Miss(ctx) => RunVerdict::ModelMiss(ctx),
        }
    }

    /// Markers collected so far (debug-port bytes).
    pub fn markers(&self) -> &[u8] {
        &self.bus.debug_out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::fuzz::ExhaustPolicy;
    use crate::irq::DEFAULT_IRQ_INTERVAL;
    use crate::machine::FaultKind;

    fn build(src: &str) -> Vec<u8> {
        assemble(src).expect("fixture assembles").image
    }

    fn exec_with(image: &[u8], input: Vec<u8>, policy: ExhaustPolicy) -> Execution {
        Execution::new(
            image,
            RegModel::new(),
            IrqState::new(DEFAULT_IRQ_INTERVAL),
            FiringStrategy::RoundRobin,
            InputChannel::new(input, policy),
        )
        .unwrap()
    }

    // Polls a status register for bit 0x80, then reads the data register
    // and echoes it to the debug port.
    const POLL_THEN_READ: &str = "\
.org 0x0
.word 0x20010000
.word start
.org 0x100
start:
    LDI r1, #0x4400
    LUI r1, #0x4000
    LDI r10, #0x0
    LUI r10, #0xe000
wait:
    LDW r2, [r1, #4]
    AND r2, #0x80
    CMP r2, #0
    BEQ wait
    LDW r3, [r1, #8]
    STB r3, [r10, #0]
    HALT
";

    #[test]
    fn miss_pause_install_resume() {
        let image = build(POLL_THEN_READ);
        let mut e = exec_with(&image, vec![0x41, 0, 0, 0], ExhaustPolicy::Zeros);
        let limits = ExecLimits::default();
        let ctx = match e.run(&limits) {
            RunStop::Miss(ctx) => ctx,
            other => panic!("expected miss, got {other:?}"),
        };
        assert_eq!(ctx.addr, 0x40004404);
        e.bus.model.install_handler(&ctx, 0x80);
        match e.run(&limits) {
            RunStop::Verdict(RunVerdict::Ok) => {}
            other => panic!("expected ok, got {other:?}"),
        }
        assert_eq!(e.markers(), b"A");
        assert_eq!(e.bus.dr_reads, 1);
    }

    #[test]
    fn second_sr_read_in_same_context_reuses_handler() {
        let image = build(POLL_THEN_READ);
        let mut e = exec_with(&image, vec![0x42, 0, 0, 0], ExhaustPolicy::Zeros);
        let limits = ExecLimits::default();
        let RunStop::Miss(ctx) = e.run(&limits) else { panic!() };
        e.bus.model.install_handler(&ctx, 0x80);
        assert_eq!(e.run(&limits), RunStop::Verdict(RunVerdict::Ok));
        // One handler suffices for the whole run: no second miss occurred.
        assert_eq!(e.bus.model.handler_count(), 1);
    }

    #[test]
    fn hang_without_handler_value_that_unlocks() {
        let image = build(POLL_THEN_READ);
        let mut e = exec_with(&image, vec![], ExhaustPolicy::Zeros);
        let limits = ExecLimits { max_insns: 2_000_000, hang_blocks: 500 };
        let RunStop::Miss(ctx) = e.run(&limits) else { panic!() };
        // Wrong bit: the poll loop can never exit.
        e.bus.model.install_handler(&ctx, 0x01);
        assert_eq!(e.run(&limits), RunStop::Verdict(RunVerdict::Hang));
    }

    #[test]
    fn input_exhaustion_ends_run_under_end_run_policy() {
        let image = build(POLL_THEN_READ);
        let mut e = exec_with(&image, vec![], ExhaustPolicy::EndRun);
        let limits = ExecLimits::default();
        let RunStop::Miss(ctx) = e.run(&limits) else { panic!() };
        e.bus.model.install_handler(&ctx, 0x80);
        assert_eq!(
            e.run(&limits),
            RunStop::Verdict(RunVerdict::InputExhausted)
        );
    }

    #[test]
    fn crash_faults_surface_as_verdicts() {
        let src = "\
.org 0x0
.word 0x20010000
.word start
.org 0x100
start:
    LDI r1, #0x0
    LUI r1, #0x3000
    LDW r2, [r1, #0]
    HALT
";
        let image = build(&src);
        let mut e = exec_with(&image, vec![], ExhaustPolicy::Zeros);
        match e.run_to_verdict(&ExecLimits::default()) {
            RunVerdict::Crash(f) => {
                assert_eq!(f.kind, FaultKind::MemPerm);
                assert_eq!(f.addr, 0x30000000);
            }
            other => panic!("expected crash, got {other:?}"),
        }
    }

    #[test]
    fn stub_mode_reads_zero_everywhere() {
        let image = build(POLL_THEN_READ);
        let mut e = exec_with(&image, vec![0x41, 0, 0, 0], ExhaustPolicy::Zeros);
        e.bus.stub = true;
        let limits = ExecLimits { max_insns: 2_000_000, hang_blocks: 200 };
        // SR poll never sees 0x80 under the stub: the run hangs in place.
        assert_eq!(e.run_to_verdict(&limits), RunVerdict::Hang);
        assert!(e.bus.model.records().next().is_none(), "stub must not learn");
    }

    #[test]
    fn coverage_and_blocks_accumulate() {
        let image = build(POLL_THEN_READ);
        let mut e = exec_with(&image, vec![0x41, 0, 0, 0], ExhaustPolicy::Zeros);
        let limits = ExecLimits::default();
        let RunStop::Miss(ctx) = e.run(&limits) else { panic!() };
        e.bus.model.install_handler(&ctx, 0x80);
        e.run(&limits);
        assert!(e.bus.coverage.nonzero_count() > 0);
        assert!(!e.bus.blocks.is_empty());
    }

    #[test]
    fn identical_runs_identical_coverage() {
        let image = build(POLL_THEN_READ);
        let run = || {
            let mut e = exec_with(&image, vec![0x41, 0, 0, 0], ExhaustPolicy::Zeros);
            let limits = ExecLimits::default();
            let RunStop::Miss(ctx) = e.run(&limits) else { panic!() };
            e.bus.model.install_handler(&ctx, 0x80);
            e.run(&limits);
            (e.bus.coverage.hash(), e.machine.insn_count, e.bus.debug_out.clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn interrupts_fire_during_run() {
        // Enables IRQ 3, then spins; the ISR sets the exit flag in RAM.
        let src = "\
.org 0x0
.word 0x20010000
.word start
.org 0x8
.word isr
.word isr
.word isr
.word isr3
.org 0x100
start:
    LDI r1, #0x8
    LDI r2, #0xe100
    LUI r2, #0xe000
    STW r1, [r2, #0]
    LDI r4, #0x0
    LUI r4, #0x2000
spin:
    LDW r5, [r4, #0]
    CMP r5, #0
    BEQ spin
    HALT
isr: IRET
isr3:
    LDI r6, #1
    STW r6, [r4, #0]
    IRET
";
        let image = build(&src);
        let mut e = exec_with(&image, vec![], ExhaustPolicy::Zeros);
        assert_eq!(e.run_to_verdict(&ExecLimits::default()), RunVerdict::Ok);
        assert_eq!(e.bus.irq.firing_log.len(), 1);
        assert_eq!(e.bus.irq.firing_log[0].1, 3);
    }
}
