//! Generated-input checks for the module contracts' "for all inputs"
//! clauses: assembler round-trips, run determinism and input accounting,
//! category state-machine guarantees, interrupt fairness and audit,
//! canonical model serialization, and coverage-map algebra.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::OnceLock;

use proptest::prelude::*;

use perifuzz::asm::{assemble, disassemble};
use perifuzz::corpus::load_dir;
use perifuzz::exec::{ExecLimits, Execution};
use perifuzz::explore::{instantiate, InstantiateConfig};
use perifuzz::fuzz::{CoverageMap, ExhaustPolicy, InputChannel};
use perifuzz::irq::{audit_firings, FiringStrategy, IrqEvent, IrqState, NVIC_ICER, NVIC_ISER};
use perifuzz::machine::{AccessEvent, AccessKind};
use perifuzz::modelstore::{parse, render, ModelFile, FORMAT_VERSION};
use perifuzz::regmodel::{
    ReadResponse, RegCategory, RegModel, RegRecord, SrAccessContext, TieBreakRecord,
};

// ---------------------------------------------------------------- assembler

/// Word generator biased toward well-formed encodings; the remainder are
/// arbitrary bit patterns that mostly decode to nothing.
fn arb_word() -> impl Strategy<Value = u32> {
    let packed = (0u32..=0x24, 0u32..16, 0u32..16, prop_oneof![Just(0u16), any::<u16>()])
        .prop_map(|(op, rd, rs, imm)| op | rd << 8 | rs << 12 | (imm as u32) << 16);
    prop_oneof![3 => packed, 1 => any::<u32>()]
}

proptest! {
    /// Any image disassembles to text that reassembles byte-identically:
    /// decodable words through their single textual form, everything else
    /// through `.word`.
    #[test]
    fn disassembly_reassembles_byte_identical(
        words in proptest::collection::vec(arb_word(), 0..80),
    ) {
        let image: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        let text = disassemble(&image).unwrap();
        let back = assemble(&text).unwrap();
        prop_assert_eq!(back.image, image);
    }
}

// ---------------------------------------------------- whole-firmware runs

/// Instantiated models for a few corpus firmware with distinct bus habits
/// (status-gated one-peripheral driver, interrupt user, parser with a
/// planted bug). Built once; the properties replay runs against them.
fn fixtures() -> &'static Vec<(String, Vec<u8>, RegModel)> {
    static FIX: OnceLock<Vec<(String, Vec<u8>, RegModel)>> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus");
        let entries = load_dir(&dir).expect("corpus builds");
        ["usart_rx", "timer_irq", "plc_modbus"]
            .iter()
            .map(|name| {
                let e = entries.iter().find(|e| &e.spec.name == name).expect("fixture exists");
                let s = instantiate(&e.image, InstantiateConfig::default()).expect("instantiates");
                (e.spec.name.clone(), e.image.clone(), s.model)
            })
            .collect()
    })
}

struct RunSummary {
    verdict: &'static str,
    insns: u64,
    blocks: u64,
    coverage: u64,
    markers: Vec<u8>,
    words_consumed: u64,
}

fn summarize(image: &[u8], model: &RegModel, input: &[u8]) -> RunSummary {
    let mut exec = Execution::new(
        image,
        model.clone(),
        IrqState::new(1000),
        FiringStrategy::RoundRobin,
        InputChannel::new(input.to_vec(), ExhaustPolicy::EndRun),
    )
    .expect("image loads");
    let verdict = exec.run_to_verdict(&ExecLimits::default());
    RunSummary {
        verdict: verdict.name(),
        insns: exec.machine.insn_count,
        blocks: exec.machine.bb_count,
        coverage: exec.bus.coverage.hash(),
        markers: exec.markers().to_vec(),
        words_consumed: exec.bus.input.words_consumed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Fixed (image, model, input, strategy) pins down the whole run:
    /// verdict, instruction and block counts, coverage bitmap, marker
    /// bytes. And the run never takes more input than it was given — at
    /// most one padded tail word past the byte length.
    #[test]
    fn runs_are_deterministic_and_input_conserving(
        which in 0usize..3,
        input in proptest::collection::vec(any::<u8>(), 0..6000),
    ) {
        let (name, image, model) = &fixtures()[which];
        let a = summarize(image, model, &input);
        let b = summarize(image, model, &input);
        prop_assert_eq!(a.verdict, b.verdict, "verdict flapped on {}", name);
        prop_assert_eq!(a.insns, b.insns, "instruction count flapped on {}", name);
        prop_assert_eq!(a.blocks, b.blocks, "block count flapped on {}", name);
        prop_assert_eq!(a.coverage, b.coverage, "coverage hash flapped on {}", name);
        prop_assert_eq!(&a.markers, &b.markers, "markers flapped on {}", name);
        prop_assert_eq!(a.words_consumed, b.words_consumed);
        prop_assert!(
            a.words_consumed * 4 <= input.len() as u64 + 4,
            "{}: {} words consumed from {} input bytes",
            name, a.words_consumed, input.len()
        );
    }
}

// ------------------------------------------------- categorization machine

#[derive(Debug, Clone)]
enum MmioOp {
    Read { reg: u8 },
    Write { reg: u8, value: u32 },
    /// The most recently read value was evaluated in a condition.
    Signal,
    /// A branch guarded by the most recently read register was taken.
    Branch,
    NextBlock,
    NextFrame,
}

fn arb_op() -> impl Strategy<Value = MmioOp> {
    prop_oneof![
        3 => (0u8..6).prop_map(|reg| MmioOp::Read { reg }),
        3 => (0u8..6, any::<u32>()).prop_map(|(reg, value)| MmioOp::Write { reg, value }),
        1 => Just(MmioOp::Signal),
        1 => Just(MmioOp::Branch),
        2 => Just(MmioOp::NextBlock),
        1 => Just(MmioOp::NextFrame),
    ]
}

/// Three registers on one peripheral, two on a second, one far away.
const REG_ADDRS: [u32; 6] =
    [0x4000_0000, 0x4000_0004, 0x4000_0008, 0x4000_0400, 0x4000_0404, 0x5000_0000];

proptest! {
    /// Under arbitrary access traffic: a locked category never changes, a
    /// control register reads back its last written value, writes to
    /// status/data registers leave firmware-visible state alone, data
    /// reads always pull input, and the handler table only grows.
    #[test]
    fn category_state_machine_invariants(
        ops in proptest::collection::vec(arb_op(), 1..120),
    ) {
        let mut m = RegModel::new();
        let mut insn: u64 = 10;
        let mut bbl: u32 = 0x100;
        let mut frame: u64 = 1;
        let mut cs: u64 = 0xcbf2_9ce4_8422_2325;
        let mut shadow: BTreeMap<u32, u32> = BTreeMap::new();
        let mut last_read: Option<u32> = None;
        let mut locked_at: BTreeMap<u32, RegCategory> = BTreeMap::new();
        let mut seen_handlers: BTreeMap<(u32, u32, u64, u64), u32> = BTreeMap::new();
        let ev = |addr: u32, kind: AccessKind, value: u32, bbl: u32, cs: u64, frame: u64, insn: u64| AccessEvent {
            addr,
            kind,
            value,
            width: 32,
            lane: 0,
            pc: bbl,
            bbl,
            cs,
            frame_id: frame,
            insn_count: insn,
        };
        for (i, op) in ops.iter().enumerate() {
            insn += 3;
            match op {
                MmioOp::Read { reg } => {
                    let addr = REG_ADDRS[*reg as usize % REG_ADDRS.len()];
                    let e = ev(addr, AccessKind::Read, 0, bbl, cs, frame, insn);
                    let resp = m.on_read(&e);
                    let cat = m.record(addr).unwrap().category;
                    match resp {
                        ReadResponse::Value(v) => {
                            prop_assert_ne!(cat, RegCategory::Data, "plain value from a data register");
                            if cat == RegCategory::Control {
                                prop_assert_eq!(
                                    v,
                                    shadow.get(&addr).copied().unwrap_or(0),
                                    "control register did not read back its last write"
                                );
                            }
                        }
                        ReadResponse::NeedInput => {
                            prop_assert_eq!(cat, RegCategory::Data, "input pulled for a non-data register");
                        }
                        ReadResponse::Miss(ctx) => {
                            prop_assert!(
                                matches!(cat, RegCategory::Status | RegCategory::ControlStatus),
                                "miss on a {} register",
                                cat.token()
                            );
                            // Install a value and re-issue the paused read:
                            // the same context must now hit its handler. A
                            // control/status hybrid keeps its control bits.
                            let v = 0x5a5a_0000 | i as u32;
                            let r = m.record(addr).unwrap();
                            let expect = match cat {
                                RegCategory::ControlStatus => {
                                    (r.stored & r.cr_bitmask) | (v & !r.cr_bitmask)
                                }
                                _ => v,
                            };
                            m.install_handler(&ctx, v);
                            prop_assert_eq!(m.on_read(&e), ReadResponse::Value(expect));
                        }
                    }
                    last_read = Some(addr);
                }
                MmioOp::Write { reg, value } => {
                    let addr = REG_ADDRS[*reg as usize % REG_ADDRS.len()];
                    let before = m
                        .record(addr)
                        .map(|r| (r.category, r.stored, r.cr_bitmask));
                    m.on_write(&ev(addr, AccessKind::Write, *value, bbl, cs, frame, insn));
                    if let Some((cat, stored, mask)) = before {
                        if cat == RegCategory::Status || cat == RegCategory::Data {
                            let r = m.record(addr).unwrap();
                            prop_assert_eq!(r.category, cat, "write recategorized {}", cat.token());
                            prop_assert_eq!(r.stored, stored, "write to a {} was retained", cat.token());
                            prop_assert_eq!(r.cr_bitmask, mask);
                        }
                    }
                    shadow.insert(addr, *value);
                }
                MmioOp::Signal => {
                    if let Some(addr) = last_read {
                        m.cond_signal(addr);
                    }
                }
                MmioOp::Branch => {
                    if let Some(addr) = last_read {
                        m.guarded_branch_taken(addr, frame);
                    }
                }
                MmioOp::NextBlock => bbl += 0x10,
                MmioOp::NextFrame => {
                    frame += 1;
                    cs = cs.wrapping_mul(0x0100_0000_01b3) ^ frame;
                }
            }
            for r in m.records() {
                if let Some(&cat) = locked_at.get(&r.addr) {
                    prop_assert!(r.locked, "lock released on {:#010x}", r.addr);
                    prop_assert_eq!(r.category, cat, "locked category changed");
                } else if r.locked {
                    locked_at.insert(r.addr, r.category);
                }
            }
            for (ctx, v) in m.handlers() {
                let key = (ctx.addr, ctx.bbl, ctx.cs, ctx.conf);
                match seen_handlers.get(&key) {
                    Some(&old) => prop_assert_eq!(old, v, "handler entry rewritten"),
                    None => {
                        seen_handlers.insert(key, v);
                    }
                }
            }
        }
    }
}

// ------------------------------------------------------------- interrupts

proptest! {
    /// Round-robin over any fixed enable set: replayable, every window of
    /// k consecutive firings hits each enabled line exactly once, firings
    /// are at least an interval apart, and the audit stays clean.
    #[test]
    fn round_robin_is_fair_and_replayable(
        mask in 1u32..,
        interval in 1u64..64,
        blocks in 1u64..2000,
    ) {
        let drive = || {
            let mut st = IrqState::new(interval);
            st.scs_write(NVIC_ISER, mask, 0);
            for bb in 1..=blocks {
                let _ = st.tick(&FiringStrategy::RoundRobin, bb, 0);
            }
            (st.firing_log.clone(), st.event_log.clone())
        };
        let (fires, events) = drive();
        let (fires2, _) = drive();
        prop_assert_eq!(&fires, &fires2, "schedule not replayable");
        prop_assert_eq!(audit_firings(&events, &fires), Ok(()));
        let k = mask.count_ones() as usize;
        for win in fires.windows(k) {
            let lines: BTreeSet<u8> = win.iter().map(|&(_, irq)| irq).collect();
            prop_assert_eq!(lines.len(), k, "window repeats a line before the rotation closes");
        }
        for &(_, irq) in &fires {
            prop_assert!(mask & (1 << irq) != 0, "fired disabled line {irq}");
        }
        for pair in fires.windows(2) {
            prop_assert!(pair[1].0 - pair[0].0 >= interval, "firings closer than the interval");
        }
    }

    /// The never-disabled-fired audit holds under arbitrary enable/disable
    /// traffic mid-run.
    #[test]
    fn audit_holds_under_enable_churn(
        writes in proptest::collection::vec((any::<u32>(), any::<bool>()), 0..24),
        interval in 1u64..32,
        blocks in 1u64..1500,
    ) {
        let mut st = IrqState::new(interval);
        let step = blocks / (writes.len() as u64 + 1) + 1;
        let mut pending = writes.iter().enumerate();
        let mut next = pending.next();
        for bb in 1..=blocks {
            while let Some((i, &(mask, enable))) = next {
                if (i as u64 + 1) * step > bb {
                    break;
                }
                st.scs_write(if enable { NVIC_ISER } else { NVIC_ICER }, mask, bb);
                next = pending.next();
            }
            let _ = st.tick(&FiringStrategy::RoundRobin, bb, 0);
        }
        prop_assert_eq!(audit_firings(&st.event_log, &st.firing_log), Ok(()));
    }
}

// -------------------------------------------------------------- modelstore

const CATS: [RegCategory; 5] = [
    RegCategory::Control,
    RegCategory::Status,
    RegCategory::Data,
    RegCategory::ControlStatus,
    RegCategory::Unknown,
];

fn arb_model_file() -> impl Strategy<Value = ModelFile> {
    let recs = proptest::collection::btree_map(
        0u32..0x0080_0000,
        (0usize..5, any::<bool>(), any::<u32>(), any::<u32>()),
        1..24,
    );
    let picks = proptest::collection::vec(
        (any::<prop::sample::Index>(), any::<u32>(), any::<u64>(), any::<u64>(), any::<u32>()),
        0..12,
    );
    let ties = proptest::collection::vec(
        (0u32..0x0080_0000, any::<u32>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<u32>()),
        0..6,
    );
    let log = proptest::collection::vec((any::<u64>(), any::<bool>(), any::<u32>()), 0..10);
    (recs, picks, ties, log, any::<u64>(), any::<u64>()).prop_map(
        |(recs, picks, ties, log, firmware, seed)| {
            let records: Vec<RegRecord> = recs
                .iter()
                .map(|(&slot, &(c, locked, stored, mask))| {
                    RegRecord::from_persisted(0x4000_0000 + slot * 4, CATS[c], locked, stored, mask)
                })
                .collect();
            // Handlers must reference modeled registers; draw addresses
            // from the record set.
            let mut handlers: BTreeMap<(u32, u32, u64, u64), u32> = BTreeMap::new();
            for (idx, bbl, cs, conf, value) in picks {
                let addr = records[idx.index(records.len())].addr;
                handlers.insert((addr, bbl, cs, conf), value);
            }
            let tie_breaks: Vec<TieBreakRecord> = ties
                .iter()
                .map(|&(slot, bbl, cs, conf, draw, chosen)| TieBreakRecord {
                    ctx: SrAccessContext { addr: 0x4000_0000 + slot * 4, bbl, cs, conf },
                    draw,
                    chosen,
                })
                .collect();
            let interrupt_log: Vec<IrqEvent> =
                log.iter().map(|&(bb, enable, mask)| IrqEvent { bb, enable, mask }).collect();
            let model = RegModel::from_parts(
                records,
                handlers
                    .into_iter()
                    .map(|((addr, bbl, cs, conf), v)| (SrAccessContext { addr, bbl, cs, conf }, v)),
                tie_breaks,
            );
            ModelFile {
                format_version: FORMAT_VERSION,
                firmware,
                session_seed: seed,
                model,
                interrupt_log,
            }
        },
    )
}

proptest! {
    /// Serialization is canonical: render∘parse is the identity on text,
    /// and a parsed file carries exactly the records, handlers, digest,
    /// and interrupt log it was rendered from.
    #[test]
    fn model_files_round_trip_canonically(mf in arb_model_file()) {
        let text = render(&mf);
        let parsed = parse(&text);
        prop_assert!(parsed.is_ok(), "render output failed to parse: {:?}", parsed.err());
        let parsed = parsed.unwrap();
        prop_assert_eq!(render(&parsed), text);
        prop_assert_eq!(parsed.model.digest(), mf.model.digest());
        prop_assert_eq!(parsed.firmware, mf.firmware);
        prop_assert_eq!(parsed.session_seed, mf.session_seed);
        prop_assert_eq!(&parsed.interrupt_log, &mf.interrupt_log);
        let persisted = |m: &RegModel| {
            m.records()
                .map(|r| (r.addr, r.category, r.locked, r.stored, r.cr_bitmask))
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(persisted(&parsed.model), persisted(&mf.model));
    }
}

// ------------------------------------------------------------ coverage map

proptest! {
    /// Recording the same edge sequence twice produces identical maps; a
    /// run split at any point and merged covers exactly the whole run's
    /// edges; `record` returns true once per slot.
    #[test]
    fn coverage_map_is_deterministic_and_merge_consistent(
        edges in proptest::collection::vec((any::<u32>(), any::<u32>()), 0..400),
        split in any::<prop::sample::Index>(),
    ) {
        let mut a = CoverageMap::new();
        let mut b = CoverageMap::new();
        let mut novel = 0usize;
        for &(p, c) in &edges {
            if a.record(p, c) {
                novel += 1;
            }
            b.record(p, c);
        }
        prop_assert_eq!(a.hash(), b.hash());
        prop_assert_eq!(a.nonzero_count(), b.nonzero_count());
        prop_assert_eq!(novel, a.nonzero_count(), "record() true-count != populated slots");
        prop_assert_eq!(a.new_edges_vs(&b), 0);
        let cut = split.index(edges.len() + 1);
        let mut left = CoverageMap::new();
        let mut right = CoverageMap::new();
        for &(p, c) in &edges[..cut] {
            left.record(p, c);
        }
        for &(p, c) in &edges[cut..] {
            right.record(p, c);
        }
        left.merge_from(&right);
        prop_assert_eq!(a.new_edges_vs(&left), 0, "whole run saw edges the merged halves lack");
        prop_assert_eq!(left.new_edges_vs(&a), 0, "merged halves saw edges the whole run lacks");
    }
}
