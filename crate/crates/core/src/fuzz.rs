//! Coverage-guided fuzzing over the data-register input channel.
//!
//! Firmware never sees "the fuzzer"; it sees DR reads. Each read consumes
//! the next four input bytes (zero-padded at the tail). A run ends at HALT,
//! a fault, the hang heuristic, input exhaustion, or — in pure-fuzz mode —
//! an unexplored SR context. Inputs earning new edges join the queue;
//! crashes and hangs are bucketed by (kind, faulting pc). All randomness
//! flows from one session seed, so whole campaigns replay bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::exec::{ExecBus, ExecLimits, Execution, RunVerdict};
use crate::hash::{fnv1a, fnv1a_u32, SplitMix64, FNV_OFFSET};
use crate::irq::{FiringStrategy, IrqState};
use crate::machine::{LoadError, MachineState};
use crate::regmodel::RegModel;

/// What a DR read does once the input runs dry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExhaustPolicy {
    /// End the run with `input_exhausted` (fuzzing: length pressure).
    EndRun,
    /// Keep returning zero words (interactive runs proceed).
    Zeros,
}

/// Sequential word-granular reader over an immutable byte buffer.
#[derive(Debug, Clone)]
pub struct InputChannel {
    bytes: Arc<[u8]>,
    cursor: usize,
    policy: ExhaustPolicy,
    /// Words served from actual input bytes (tail padding counts, zeros
    /// after exhaustion do not).
    pub words_consumed: u64,
}

impl InputChannel {
    pub fn new(bytes: Vec<u8>, policy: ExhaustPolicy) -> InputChannel {
        InputChannel { bytes: bytes.into(), cursor: 0, policy, words_consumed: 0 }
    }

    pub fn empty(policy: ExhaustPolicy) -> InputChannel {
        InputChannel::new(Vec::new(), policy)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Copy at the current cursor with a different exhaustion policy.
    /// Consumption on the copy is invisible to the original (worker
    /// isolation); the backing buffer is shared, not duplicated.
    pub fn fork(&self, policy: ExhaustPolicy) -> InputChannel {
        InputChannel {
            bytes: self.bytes.clone(),
            cursor: self.cursor,
            policy,
            words_consumed: self.words_consumed,
        }
    }

    /// Next little-endian word; `None` only under [`ExhaustPolicy::EndRun`].
    pub fn next_word(&mut self) -> Option<u32> {
        if self.cursor >= self.bytes.len() {
            return match self.policy {
                ExhaustPolicy::EndRun => None,
                ExhaustPolicy::Zeros => Some(0),
            };
        }
        let mut b = [0u8; 4];
        let avail = (self.bytes.len() - self.cursor).min(4);
        b[..avail].copy_from_slice(&self.bytes[self.cursor..self.cursor + avail]);
        self.cursor += 4;
        self.words_consumed += 1;
        Some(u32::from_le_bytes(b))
    }
}

pub const COVERAGE_SLOTS: usize = 1 << 16;

/// Edge-hit counters in a fixed 64 KiB byte map.
#[derive(Debug, Clone)]
pub struct CoverageMap {
    slots: Box<[u8; COVERAGE_SLOTS]>,
}

impl Default for CoverageMap {
    fn default() -> Self {
        Self::new()
    }
}

impl CoverageMap {
    pub fn new() -> CoverageMap {
        CoverageMap { slots: vec![0u8; COVERAGE_SLOTS].into_boxed_slice().try_into().unwrap() }
    }

    pub fn clear(&mut self) {
        self.slots.fill(0);
    }

    pub fn edge_index(prev: u32, cur: u32) -> usize {
        (fnv1a_u32(fnv1a_u32(FNV_OFFSET, prev), cur) & 0xffff) as usize
    }

    /// Count the edge; true when its slot was previously empty.
    pub fn record(&mut self, prev: u32, cur: u32) -> bool {
        let slot = &mut self.slots[Self::edge_index(prev, cur)];
        let new = *slot == 0;
        *slot = slot.saturating_add(1);
        new
    }

    pub fn nonzero_count(&self) -> usize {
        self.slots.iter().filter(|&&s| s != 0).count()
    }

    /// Edges hit here but absent from `other`.
    pub fn new_edges_vs(&self, other: &CoverageMap) -> usize {
        self.slots
            .iter()
            .zip(other.slots.iter())
            .filter(|(&mine, &theirs)| mine != 0 && theirs == 0)
            .count()
    }

    /// Slot-wise saturating max; order-independent merge.
    pub fn merge_from(&mut self, other: &CoverageMap) {
        for (mine, &theirs) in self.slots.iter_mut().zip(other.slots.iter()) {
            *mine = (*mine).max(theirs);
        }
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.slots.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct FuzzRunReport {
    pub verdict: RunVerdict,
    pub bb_executed: u64,
    pub insn_executed: u64,
    pub new_edges: usize,
    /// Execution index within the instance that produced this run.
    pub input_ref: u64,
}

/// Crash/hang bucket key: verdict kind name + faulting / hung pc.
pub type BucketKey = (&'static str, u32);

#[derive(Debug, Clone)]
pub struct CrashArtifact {
    pub input: Vec<u8>,
    pub report: FuzzRunReport,
    /// Data address from the fault, when the verdict carried one.
    pub fault_addr: u32,
}

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub execs: u64,
    pub seed: u64,
    pub jobs: u32,
    pub limits: ExecLimits,
    pub irq_interval: u64,
    pub strategy: FiringStrategy,
}

impl Default for FuzzConfig {
    fn default() -> FuzzConfig {
        FuzzConfig {
            execs: 10_000,
            seed: 1,
            jobs: 1,
            limits: ExecLimits::default(),
            irq_interval: crate::irq::DEFAULT_IRQ_INTERVAL,
            strategy: FiringStrategy::RoundRobin,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuzzOutcome {
    pub execs: u64,
    pub coverage: CoverageMap,
    pub blocks: BTreeSet<u32>,
    /// Inputs that earned new edges. Single instance: discovery order.
    /// Merged instances: lexicographic (order-independent content).
    pub queue: Vec<Vec<u8>>,
    pub buckets: BTreeMap<BucketKey, CrashArtifact>,
    pub verdict_counts: BTreeMap<&'static str, u64>,
    /// Instance-local exec index of the first crash, if any.
    pub first_crash_exec: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum FuzzError {
    #[error("fuzzing requires at least one seed input")]
    NoSeeds,
    #[error(transparent)]
    Load(#[from] LoadError),
}

const INTERESTING_WORDS: [u32; 16] = [
    0,
    1,
    2,
    4,
    16,
    64,
    127,
    128,
    255,
    256,
    0x7fff,
    0x8000,
    0xffff,
    0x0001_0000,
    0x7fff_ffff,
    0xffff_ffff,
];

/// One mutation of `base`. `pool` supplies splice partners.
pub fn mutate(base: &[u8], pool: &[Vec<u8>], prng: &mut SplitMix64) -> Vec<u8> {
    let mut out = base.to_vec();
    if out.is_empty() {
        out = vec![0u8; 4 + prng.below(28) as usize];
    }
    let op = prng.below(8);
    apply_op(&mut out, op, pool, prng);
    if op == 7 {
        // havoc: a short burst of additional simple mutations
        for _ in 0..(2 + prng.below(6)) {
            let sub = prng.below(6);
            apply_op(&mut out, sub, pool, prng);
        }
    }
    out
}

fn apply_op(buf: &mut Vec<u8>, op: u64, pool: &[Vec<u8>], prng: &mut SplitMix64) {
    if buf.is_empty() {
        buf.push(0);
    }
    match op {
        // bit flips of 1, 2, and 4 consecutive bits
        0 | 1 | 2 => {
            let width = 1u32 << op;
            let bit = prng.below((buf.len() * 8) as u64) as usize;
            for i in 0..width as usize {
                let b = bit + i;
                if b < buf.len() * 8 {
                    buf[b / 8] ^= 1 << (b % 8);
                }
            }
        }
        3 => {
            let i = prng.below(buf.len() as u64) as usize;
            buf[i] = prng.next_u32() as u8;
        }
        4 => {
            let i = prng.below(buf.len() as u64) as usize;
            let delta = (prng.below(35) as i16 - 17) as i8;
            buf[i] = buf[i].wrapping_add(delta as u8);
        }
        5 => {
            let w = INTERESTING_WORDS[prng.below(INTERESTING_WORDS.len() as u64) as usize];
            if buf.len() >= 4 {
                let i = prng.below((buf.len() - 3) as u64) as usize;
                buf[i..i + 4].copy_from_slice(&w.to_le_bytes());
            } else {
                buf[0] = w as u8;
            }
        }
        6 => {
            // splice: keep a prefix, append a partner's suffix
            let partner: Vec<u8> = if pool.is_empty() {
                buf.clone()
            } else {
                pool[prng.below(pool.len() as u64) as usize].clone()
            };
            let cut_a = prng.below(buf.len() as u64 + 1) as usize;
            let cut_b = prng.below(partner.len() as u64 + 1) as usize;
            let mut spliced = buf[..cut_a].to_vec();
            spliced.extend_from_slice(&partner[cut_b.min(partner.len())..]);
            if spliced.is_empty() {
                spliced.push(0);
            }
            *buf = spliced;
        }
        _ => {}
    }
}

/// One fuzzing instance: owns its machine, model copy, PRNG stream, and
/// coverage state. Instances are independent; see [`fuzz_loop`].
struct FuzzInstance {
    pristine: MachineState,
    /// Working machine, reset from `pristine` between runs via the dirty
    /// RAM bitmap instead of a full copy. `None` only while a run borrows
    /// it.
    machine: Option<MachineState>,
    base_model: RegModel,
    config: FuzzConfig,
    prng: SplitMix64,
    global: CoverageMap,
    blocks: BTreeSet<u32>,
    queue: Vec<Vec<u8>>,
    seeds: Vec<Vec<u8>>,
    buckets: BTreeMap<BucketKey, CrashArtifact>,
    verdict_counts: BTreeMap<&'static str, u64>,
    first_crash_exec: Option<u64>,
    execs_done: u64,
}

impl FuzzInstance {
    fn new(
        image: &[u8],
        model: RegModel,
        seeds: Vec<Vec<u8>>,
        config: FuzzConfig,
        instance_id: u32,
    ) -> Result<FuzzInstance, FuzzError> {
        let pristine = MachineState::load_firmware(image)?;
        let machine = Some(pristine.clone());
        let prng = SplitMix64::derive(config.seed, "fuzz-instance", instance_id as u64);
        Ok(FuzzInstance {
            pristine,
            machine,
            base_model: model,
            config,
            prng,
            global: CoverageMap::new(),
            blocks: BTreeSet::new(),
            queue: Vec::new(),
            seeds,
            buckets: BTreeMap::new(),
            verdict_counts: BTreeMap::new(),
            first_crash_exec: None,
            execs_done: 0,
        })
    }

    fn run_one(&mut self, input: Vec<u8>) -> FuzzRunReport {
        let mut machine = self.machine.take().expect("working machine present");
        machine.restore_from(&self.pristine);
        let bus = ExecBus::new(
            self.base_model.clone(),
            IrqState::new(self.config.irq_interval),
            self.config.strategy.clone(),
            InputChannel::new(input.clone(), ExhaustPolicy::EndRun),
        );
        let mut exec = Execution::from_parts(machine, bus);
        let verdict = exec.run_to_verdict(&self.config.limits);
        let new_edges = exec.bus.coverage.new_edges_vs(&self.global);
        self.global.merge_from(&exec.bus.coverage);
        self.blocks.extend(exec.bus.blocks.iter().copied());
        let report = FuzzRunReport {
            verdict,
            bb_executed: exec.machine.bb_count,
            insn_executed: exec.machine.insn_count,
            new_edges,
            input_ref: self.execs_done,
        };
        let hung_pc = exec.machine.pc();
        self.machine = Some(exec.machine);
        *self.verdict_counts.entry(verdict.name()).or_insert(0) += 1;
        match verdict {
            RunVerdict::Crash(f) => {
                if self.first_crash_exec.is_none() {
                    self.first_crash_exec = Some(self.execs_done);
                }
                self.buckets.entry((f.kind.name(), f.pc)).or_insert(CrashArtifact {
                    input,
                    report: report.clone(),
                    fault_addr: f.addr,
                });
            }
            RunVerdict::Hang => {
                self.buckets.entry(("hang", hung_pc)).or_insert(CrashArtifact {
                    input,
                    report: report.clone(),
                    fault_addr: 0,
                });
            }
            _ => {
                if new_edges > 0 {
                    self.queue.push(input);
                }
            }
        }
        self.execs_done += 1;
        report
    }

    fn run_campaign(&mut self) {
        let seeds = std::mem::take(&mut self.seeds);
        for seed in &seeds {
            if self.execs_done >= self.config.execs {
                break;
            }
            self.run_one(seed.clone());
        }
        self.seeds = seeds;
        while self.execs_done < self.config.execs {
            let base: Vec<u8> = if self.queue.is_empty() {
                self.seeds[self.prng.below(self.seeds.len() as u64) as usize].clone()
            } else {
                self.queue[self.prng.below(self.queue.len() as u64) as usize].clone()
            };
            let input = mutate(&base, &self.queue, &mut self.prng);
            self.run_one(input);
        }
    }

    fn into_outcome(self) -> FuzzOutcome {
        FuzzOutcome {
            execs: self.execs_done,
            coverage: self.global,
            blocks: self.blocks,
            queue: self.queue,
            buckets: self.buckets,
            verdict_counts: self.verdict_counts,
            first_crash_exec: self.first_crash_exec,
        }
    }
}

/// Run a fuzzing campaign. With `jobs > 1`, independent instances (each
/// with its own PRNG stream and exec share) run on threads and their
/// results merge order-independently.
pub fn fuzz_loop(
    image: &[u8],
    model: &RegModel,
    seeds: &[Vec<u8>],
    config: &FuzzConfig,
) -> Result<FuzzOutcome, FuzzError> {
    if seeds.is_empty() {
        return Err(FuzzError::NoSeeds);
    }
    let jobs = config.jobs.max(1);
    if jobs == 1 {
        let mut inst =
            FuzzInstance::new(image, model.clone(), seeds.to_vec(), config.clone(), 0)?;
        inst.run_campaign();
        return Ok(inst.into_outcome());
    }

    let share = config.execs / jobs as u64;
    let mut outcomes: Vec<FuzzOutcome> = Vec::new();
    std::thread::scope(|scope| -> Result<(), FuzzError> {
        let mut handles = Vec::new();
        for id in 0..jobs {
            let mut cfg = config.clone();
            cfg.execs = if id == 0 { config.execs - share * (jobs as u64 - 1) } else { share };
            let mut inst = FuzzInstance::new(image, model.clone(), seeds.to_vec(), cfg, id)?;
            handles.push(scope.spawn(move || {
                inst.run_campaign();
                inst.into_outcome()
            }));
        }
        for h in handles {
            outcomes.push(h.join().expect("fuzz instance panicked"));
        }
        Ok(())
    })?;
    Ok(merge_outcomes(outcomes))
}

fn merge_outcomes(parts: Vec<FuzzOutcome>) -> FuzzOutcome {
    let mut coverage = CoverageMap::new();
    let mut blocks = BTreeSet::new();
    let mut queue_set: BTreeSet<Vec<u8>> = BTreeSet::new();
    let mut buckets: BTreeMap<BucketKey, CrashArtifact> = BTreeMap::new();
    let mut verdict_counts: BTreeMap<&'static str, u64> = BTreeMap::new();
    let mut execs = 0;
    let mut first_crash_exec: Option<u64> = None;
    for part in parts {
        execs += part.execs;
        coverage.merge_from(&part.coverage);
        blocks.extend(part.blocks);
        queue_set.extend(part.queue);
        for (k, v) in part.buckets {
            match buckets.get(&k) {
                // Deterministic pick regardless of merge order: keep the
                // lexicographically smallest input.
                Some(existing) if existing.input <= v.input => {}
                _ => {
                    buckets.insert(k, v);
                }
            }
        }
        for (k, v) in part.verdict_counts {
            *verdict_counts.entry(k).or_insert(0) += v;
        }
        first_crash_exec = match (first_crash_exec, part.first_crash_exec) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
    FuzzOutcome {
        execs,
        coverage,
        blocks,
        queue: queue_set.into_iter().collect(),
        buckets,
        verdict_counts,
        first_crash_exec,
    }
}

/// Distinct-block coverage of one model choice over an input set.
pub fn coverage_blocks(
    image: &[u8],
    model: Option<&RegModel>,
    inputs: &[Vec<u8>],
    limits: &ExecLimits,
    irq_interval: u64,
) -> Result<BTreeSet<u32>, LoadError> {
    let mut blocks = BTreeSet::new();
    for input in inputs {
        let mut exec = Execution::new(
            image,
            model.cloned().unwrap_or_default(),
            IrqState::new(irq_interval),
            if model.is_some() { FiringStrategy::RoundRobin } else { FiringStrategy::None },
            InputChannel::new(input.clone(), ExhaustPolicy::Zeros),
        )?;
        exec.bus.stub = model.is_none();
        exec.run_to_verdict(limits);
        blocks.extend(exec.bus.blocks.iter().copied());
    }
    Ok(blocks)
}

/// Block-coverage ratio of `model_b` over `model_a` (`None` = stub) across
/// one input set.
pub fn coverage_compare(
    image: &[u8],
    model_a: Option<&RegModel>,
    model_b: Option<&RegModel>,
    inputs: &[Vec<u8>],
    limits: &ExecLimits,
    irq_interval: u64,
) -> Result<(usize, usize, f64), LoadError> {
    let a = coverage_blocks(image, model_a, inputs, limits, irq_interval)?.len();
    let b = coverage_blocks(image, model_b, inputs, limits, irq_interval)?.len();
    let ratio = if a == 0 { f64::INFINITY } else { b as f64 / a as f64 };
    Ok((a, b, ratio))
}
