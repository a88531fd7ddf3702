//! MMIO register identification, categorization, and per-category handling.
//!
//! Every MMIO access is attributed to a word-aligned register inside a 1 KiB
//! peripheral block. Registers start `UNKNOWN` and move through a small
//! state machine driven purely by firmware access patterns:
//!
//! ```text
//!   (a) UNKNOWN --write completing a read-modify-write--------------> CR
//!   (b) UNKNOWN --read whose value feeds a comparison--------------> SR
//!   (c) UNKNOWN --write as the very first access-------------------> DR
//!   (d) UNKNOWN --read under an SR-guarded branch, same peripheral-> DR
//!   (e) DR      -->=3 consecutive same-block reads-----------------> SR (locked)
//!   (f) CR      --read whose value feeds a comparison--------------> CSR
//! ```
//!
//! Handling by category: CR reads return the last written value (a plain
//! stored word), DR reads ask the caller for the next input word, SR reads
//! are answered from the explored handler table keyed by
//! `(register, call stack, block, peripheral config)`, and CSR reads mix
//! stored control bits with explored status bits through `cr_bitmask`.
//! SR and DR writes are side-effect free.
//!
//! Mis-categorization is possible by design (non-conforming drivers exist);
//! only edges (e) and (f) ever correct an earlier call, and a record locked
//! by (e) never changes again.

use std::collections::{BTreeMap, BTreeSet};

use crate::hash::{fnv1a_u32, fnv1a_u64, FNV_OFFSET};
use crate::machine::{peripheral_id, AccessEvent, AccessKind};

/// Writes completing a read-modify-write must land within this many
/// instructions of the read, in the same call frame.
pub const RMW_WINDOW_INSNS: u64 = 32;
/// Consecutive same-block reads before a DR is corrected to a polled SR.
pub const POLL_THRESHOLD: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RegCategory {
    Control,
    Status,
    Data,
    ControlStatus,
    Unknown,
}

impl RegCategory {
    pub fn token(self) -> &'static str {
        match self {
            RegCategory::Control => "CR",
            RegCategory::Status => "SR",
            RegCategory::Data => "DR",
            RegCategory::ControlStatus => "CSR",
            RegCategory::Unknown => "UNKNOWN",
        }
    }

    pub fn from_token(s: &str) -> Option<RegCategory> {
        Some(match s {
            "CR" => RegCategory::Control,
            "SR" => RegCategory::Status,
            "DR" => RegCategory::Data,
            "CSR" => RegCategory::ControlStatus,
            "UNKNOWN" => RegCategory::Unknown,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RegRecord {
    pub addr: u32,
    pub category: RegCategory,
    /// Category frozen by the polling correction (e).
    pub locked: bool,
    /// Last written value; the whole read value for CR, the CR-behaving
    /// bits for CSR, provisional storage while UNKNOWN.
    pub stored: u32,
    /// CSR only: which bits behave as control (firmware-written) bits.
    pub cr_bitmask: u32,
    pub read_count: u64,
    pub write_count: u64,
    // -- runtime tracking, not persisted --
    /// Most recent access: kind, frame id, instruction count.
    last_access: Option<(AccessKind, u64, u64)>,
    /// A read value is awaiting possible condition evaluation; armed by the
    /// first UNKNOWN read or any CR read, disarmed by the next access.
    cond_watch: bool,
    /// Consecutive reads of this register from `consec_bbl` with no other
    /// MMIO access in between.
    consec_reads: u32,
    consec_bbl: u32,
    /// Bits ever changed by RMW-style writes while CR; becomes
    /// `cr_bitmask` if the record is promoted to CSR.
    rmw_mask: u32,
}

impl RegRecord {
    fn new(addr: u32) -> RegRecord {
        RegRecord {
            addr,
            category: RegCategory::Unknown,
            locked: false,
            stored: 0,
            cr_bitmask: 0,
            read_count: 0,
            write_count: 0,
            last_access: None,
            cond_watch: false,
            consec_reads: 0,
            consec_bbl: 0,
            rmw_mask: 0,
        }
    }

    pub fn peripheral(&self) -> u32 {
        peripheral_id(self.addr)
    }

    /// Rebuild from persisted fields (model file load). Runtime tracking
    /// state — access counts included — starts fresh.
    pub fn from_persisted(
        addr: u32,
        category: RegCategory,
        locked: bool,
        stored: u32,
        cr_bitmask: u32,
    ) -> RegRecord {
        RegRecord { category, locked, stored, cr_bitmask, ..RegRecord::new(addr) }
    }
}

/// The four-tuple naming one status-register read site; value equality
/// defines handler reuse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SrAccessContext {
    pub addr: u32,
    pub bbl: u32,
    pub cs: u64,
    pub conf: u64,
}

/// One recorded tie-break: the raw PRNG draw that chose `chosen` for
/// `ctx`. Persisted so a reload replays the identical choice history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TieBreakRecord {
    pub ctx: SrAccessContext,
    pub draw: u64,
    pub chosen: u32,
}

/// What the model wants done for an MMIO read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadResponse {
    Value(u32),
    /// Data register: caller supplies the next input word.
    NeedInput,
    /// Status read with no handler for this context: caller must pause and
    /// explore; the access is already recorded and will not be re-counted
    /// when the same instruction re-issues it.
    Miss(SrAccessContext),
}

#[derive(Debug, Clone, Default)]
pub struct RegModel {
    regs: BTreeMap<u32, RegRecord>,
    /// (register, bbl, cs, conf) → explored value; canonical order.
    handlers: BTreeMap<(u32, u32, u64, u64), u32>,
    /// Register touched by the most recent MMIO access (poll-run tracking).
    last_mmio: Option<u32>,
    /// Set when a read missed the handler table: (addr, insn_count). The
    /// re-issued access skips re-recording.
    pending_replay: Option<(u32, u64)>,
    /// frame id → peripherals whose SR guarded a taken branch in that frame.
    guard_events: BTreeMap<u64, BTreeSet<u32>>,
    /// Chronological tie-break draws (persisted with the model).
    tie_breaks: Vec<TieBreakRecord>,
}

impl RegModel {
    pub fn new() -> RegModel {
        RegModel::default()
    }

    /// Rebuild from persisted parts (model file load).
    pub fn from_parts(
        records: impl IntoIterator<Item = RegRecord>,
        handlers: impl IntoIterator<Item = (SrAccessContext, u32)>,
        tie_breaks: impl IntoIterator<Item = TieBreakRecord>,
    ) -> RegModel {
        let mut m = RegModel::new();
        for r in records {
            m.regs.insert(r.addr, r);
        }
        for (ctx, v) in handlers {
            m.handlers.insert((ctx.addr, ctx.bbl, ctx.cs, ctx.conf), v);
        }
        m.tie_breaks = tie_breaks.into_iter().collect();
        m
    }

    /// Append one tie-break draw to the persistent log.
    pub fn push_tie_break(&mut self, rec: TieBreakRecord) {
        self.tie_breaks.push(rec);
    }

    pub fn tie_breaks(&self) -> &[TieBreakRecord] {
        &self.tie_breaks
    }

    pub fn records(&self) -> impl Iterator<Item = &RegRecord> {
        self.regs.values()
    }

    pub fn record(&self, addr: u32) -> Option<&RegRecord> {
        self.regs.get(&addr)
    }

    pub fn handlers(&self) -> impl Iterator<Item = (SrAccessContext, u32)> + '_ {
        self.handlers.iter().map(|(&(addr, bbl, cs, conf), &v)| {
            (SrAccessContext { addr, bbl, cs, conf }, v)
        })
    }

    pub fn handler_count(&self) -> usize {
        self.handlers.len()
    }

    pub fn peripheral_count(&self) -> usize {
        self.regs
            .values()
            .map(|r| r.peripheral())
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Digest over the model's learned structure; used to decide whether a
    /// run changed the model. Access counts are excluded (they grow every
    /// run), and so are stored values: they are runtime device state, and a
    /// firmware that parks a register on a different value each run (a
    /// toggled output latch, say) has not learned us anything new.
    pub fn digest(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for r in self.regs.values() {
            h = fnv1a_u32(h, r.addr);
            h = fnv1a_u32(h, r.category as u32);
            h = fnv1a_u32(h, r.locked as u32);
            h = fnv1a_u32(h, r.cr_bitmask);
        }
        for (&(addr, bbl, cs, conf), &v) in &self.handlers {
            h = fnv1a_u32(h, addr);
            h = fnv1a_u32(h, bbl);
            h = fnv1a_u64(h, cs);
            h = fnv1a_u64(h, conf);
            h = fnv1a_u32(h, v);
        }
        for t in &self.tie_breaks {
            h = fnv1a_u32(h, t.ctx.addr);
            h = fnv1a_u32(h, t.ctx.bbl);
            h = fnv1a_u64(h, t.ctx.cs);
            h = fnv1a_u64(h, t.ctx.conf);
            h = fnv1a_u64(h, t.draw);
            h = fnv1a_u32(h, t.chosen);
        }
        h
    }

    /// Configuration hash of a peripheral block: FNV over the sorted
    /// (address, value) pairs of its CR records and the CR-behaving bits of
    /// its CSR records. No control registers ⇒ the FNV offset constant.
    pub fn config_hash(&self, peripheral: u32) -> u64 {
        let mut h = FNV_OFFSET;
        for r in self.regs.range(peripheral..peripheral + 0x400) {
            let (addr, rec) = r;
            match rec.category {
                RegCategory::Control => {
                    h = fnv1a_u32(h, *addr);
                    h = fnv1a_u32(h, rec.stored);
                }
                RegCategory::ControlStatus => {
                    h = fnv1a_u32(h, *addr);
                    h = fnv1a_u32(h, rec.stored & rec.cr_bitmask);
                }
                _ => {}
            }
        }
        h
    }

    fn context_for(&self, ev: &AccessEvent) -> SrAccessContext {
        SrAccessContext {
            addr: ev.addr,
            bbl: ev.bbl,
            cs: ev.cs,
            conf: self.config_hash(peripheral_id(ev.addr)),
        }
    }

    pub fn lookup_handler(&self, ctx: &SrAccessContext) -> Option<u32> {
        self.handlers.get(&(ctx.addr, ctx.bbl, ctx.cs, ctx.conf)).copied()
    }

    /// Commit an explored value. The table only grows; rewriting an entry
    /// with a different value is a logic error.
    pub fn install_handler(&mut self, ctx: &SrAccessContext, value: u32) {
        let prev = self.handlers.insert((ctx.addr, ctx.bbl, ctx.cs, ctx.conf), value);
        assert!(
            prev.is_none() || prev == Some(value),
            "handler for {ctx:?} rewritten: {prev:?} -> {value:#x}"
        );
    }

    /// Record an MMIO read. The caller turns the response into an actual
    /// value (input word for `NeedInput`, exploration for `Miss`).
    pub fn on_read(&mut self, ev: &AccessEvent) -> ReadResponse {
        debug_assert_eq!(ev.kind, AccessKind::Read);
        if self.pending_replay == Some((ev.addr, ev.insn_count)) {
            // Re-issue of an access that paused on a handler miss: the
            // record side already happened, only the handling reruns.
            self.pending_replay = None;
            return self.handle_read(ev);
        }
        self.pending_replay = None;
        let guarded = self
            .guard_events
            .get(&ev.frame_id)
            .is_some_and(|s| s.contains(&peripheral_id(ev.addr)));
        let rec = self.regs.entry(ev.addr).or_insert_with(|| RegRecord::new(ev.addr));
        let first_access = rec.read_count == 0 && rec.write_count == 0;
        rec.read_count += 1;

        // (d) read of an unknown register while a same-peripheral SR guards
        // this frame: treat as data.
        if rec.category == RegCategory::Unknown && guarded && !rec.locked {
            rec.category = RegCategory::Data;
        }

        // Poll-run tracking: consecutive reads of this register from one
        // block, with no other MMIO access in between.
        if self.last_mmio == Some(ev.addr) && rec.consec_bbl == ev.bbl {
            rec.consec_reads += 1;
        } else {
            rec.consec_reads = 1;
            rec.consec_bbl = ev.bbl;
        }
        self.last_mmio = Some(ev.addr);

        // (e) polling correction: a data register nobody feeds that the
        // firmware keeps re-reading is really a status register.
        if rec.category == RegCategory::Data
            && !rec.locked
            && rec.consec_reads >= POLL_THRESHOLD
        {
            rec.category = RegCategory::Status;
            rec.locked = true;
        }

        // Arm the condition watch for (b)/(f): the window closes at the
        // next access to this register.
        rec.cond_watch = match rec.category {
            RegCategory::Unknown => first_access,
            RegCategory::Control => true,
            _ => false,
        };
        rec.last_access = Some((AccessKind::Read, ev.frame_id, ev.insn_count));
        self.handle_read(ev)
    }

    fn handle_read(&mut self, ev: &AccessEvent) -> ReadResponse {
        let rec = &self.regs[&ev.addr];
        match rec.category {
            // An unwritten control register reads as zero; stored covers
            // both that and the written case. Unknowns read provisionally
            // as their stored value.
            RegCategory::Unknown | RegCategory::Control => ReadResponse::Value(rec.stored),
            RegCategory::Data => ReadResponse::NeedInput,
            RegCategory::Status => {
                let ctx = self.context_for(ev);
                match self.lookup_handler(&ctx) {
                    Some(v) => ReadResponse::Value(v),
                    None => {
                        self.pending_replay = Some((ev.addr, ev.insn_count));
                        ReadResponse::Miss(ctx)
                    }
                }
            }
            RegCategory::ControlStatus => {
                let ctx = self.context_for(ev);
                let (stored, mask) = (rec.stored, rec.cr_bitmask);
                match self.lookup_handler(&ctx) {
                    Some(v) => ReadResponse::Value((stored & mask) | (v & !mask)),
                    None => {
                        self.pending_replay = Some((ev.addr, ev.insn_count));
                        ReadResponse::Miss(ctx)
                    }
                }
            }
        }
    }

    /// Record an MMIO write. Byte writes merge into their containing word.
    pub fn on_write(&mut self, ev: &AccessEvent) {
        debug_assert_eq!(ev.kind, AccessKind::Write);
        self.pending_replay = None;
        let rec = self.regs.entry(ev.addr).or_insert_with(|| RegRecord::new(ev.addr));
        let first_access = rec.read_count == 0 && rec.write_count == 0;
        rec.write_count += 1;
        rec.cond_watch = false;
        rec.consec_reads = 0;
        self.last_mmio = Some(ev.addr);

        let merged = if ev.width == 32 {
            ev.value
        } else {
            let shift = (ev.lane as u32) * 8;
            (rec.stored & !(0xff << shift)) | ((ev.value & 0xff) << shift)
        };

        match rec.category {
            RegCategory::Unknown => {
                if first_access {
                    // (c) write-on-first-access: data register, value not
                    // retained.
                    rec.category = RegCategory::Data;
                } else if matches!(
                    rec.last_access,
                    Some((AccessKind::Read, f, i))
                        if f == ev.frame_id && ev.insn_count - i <= RMW_WINDOW_INSNS
                ) {
                    // (a) read-modify-write: control register.
                    rec.category = RegCategory::Control;
                    rec.rmw_mask |= merged ^ rec.stored;
                    rec.stored = merged;
                } else {
                    // Neither pattern; keep storing provisionally.
                    rec.stored = merged;
                }
            }
            RegCategory::Control => {
                rec.rmw_mask |= merged ^ rec.stored;
                rec.stored = merged;
            }
            RegCategory::ControlStatus => {
                rec.cr_bitmask |= merged ^ rec.stored;
                rec.stored = merged;
            }
            // Status writes (flag acknowledgment) and data writes (TX
            // traffic) do not affect firmware-visible state.
            RegCategory::Status | RegCategory::Data => {}
        }
        rec.last_access = Some((AccessKind::Write, ev.frame_id, ev.insn_count));
    }

    /// A compare consumed a value tainted by `src`; promotes a watched
    /// UNKNOWN to SR (b) or a watched CR to CSR (f).
    pub fn cond_signal(&mut self, src: u32) {
        let Some(rec) = self.regs.get_mut(&src) else { return };
        if !rec.cond_watch || rec.locked {
            return;
        }
        match rec.category {
            RegCategory::Unknown => rec.category = RegCategory::Status,
            RegCategory::Control => {
                rec.category = RegCategory::ControlStatus;
                rec.cr_bitmask = rec.rmw_mask;
            }
            _ => {}
        }
        rec.cond_watch = false;
    }

    /// A taken branch was guarded by flags tainted from `src`. If `src` is
    /// a status register, its peripheral guards `frame_id` from now on
    /// (rule (d) input).
    pub fn guarded_branch_taken(&mut self, src: u32, frame_id: u64) {
        let Some(rec) = self.regs.get(&src) else { return };
        if matches!(rec.category, RegCategory::Status | RegCategory::ControlStatus) {
            self.guard_events
                .entry(frame_id)
                .or_default()
                .insert(peripheral_id(src));
        }
    }

    /// Drop guard events for frames no longer on the call stack.
    pub fn prune_guard_events(&mut self, live: impl Fn(u64) -> bool) {
        self.guard_events.retain(|f, _| live(*f));
    }

    /// True when a handler miss is waiting to be re-issued (used by tests
    /// and the executor to assert pause/replay pairing).
    pub fn replay_pending(&self) -> bool {
        self.pending_replay.is_some()
    }
}
