//! Firmware corpus: manifest parsing, image building, and conformance
//! checking.
//!
//! A corpus directory holds assembly sources plus `manifest.txt`, a
//! sectioned text file that pins everything the checker needs per firmware:
//! source path, image hash, ground-truth register labels, expected marker
//! sequence, conformance class, and optional planted-bug / unlock-word
//! descriptors. [`check_entry`] instantiates a model for one firmware and
//! compares the learned categories, liveness behavior, marker output, and
//! interrupt traffic against those expectations; every divergence lands in
//! the row's `deviations` list rather than aborting, so a report covers the
//! whole corpus even when something regresses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::asm::{assemble, AsmError};
use crate::exec::{ExecLimits, Execution, RunVerdict};
use crate::explore::{instantiate, InstantiateConfig, InstantiateSession};
use crate::fuzz::{mutate, ExhaustPolicy, InputChannel};
use crate::hash::{fnv1a, SplitMix64};
use crate::irq::{audit_firings, FiringStrategy, IrqEvent, IrqState};
use crate::machine::{peripheral_id, MMIO_BASE, MMIO_END};
use crate::regmodel::{RegCategory, RegModel};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// How a firmware's MMIO habits relate to the access-pattern assumptions
/// the categorizer leans on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConformanceClass {
    Conforming,
    /// Writes a status register before ever reading it, so it gets filed
    /// as data.
    Type1NonConforming,
    /// Read-modify-writes a data register, so it gets filed as control.
    Type2NonConforming,
    /// Multiplexes several interrupt sources behind one status register;
    /// replayed values can only ever satisfy one of them.
    IrqMultiplexed,
}

impl ConformanceClass {
    pub fn token(self) -> &'static str {
        match self {
            ConformanceClass::Conforming => "conforming",
            ConformanceClass::Type1NonConforming => "type1_nonconforming",
            ConformanceClass::Type2NonConforming => "type2_nonconforming",
            ConformanceClass::IrqMultiplexed => "irq_multiplexed",
        }
    }

    pub fn from_token(s: &str) -> Option<ConformanceClass> {
        Some(match s {
            "conforming" => ConformanceClass::Conforming,
            "type1_nonconforming" => ConformanceClass::Type1NonConforming,
            "type2_nonconforming" => ConformanceClass::Type2NonConforming,
            "irq_multiplexed" => ConformanceClass::IrqMultiplexed,
            _ => return None,
        })
    }
}

impl fmt::Display for ConformanceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// What a model-backed run of the firmware is expected to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropertyExpectation {
    /// Completes its marker sequence under any input, including none.
    Ok,
    /// Completes under random input but stalls on all-zero input: status
    /// reads were filed as data reads, so progress now gates on input.
    NeedsInput,
    /// Stalls forever regardless of input.
    Hang,
}

impl PropertyExpectation {
    pub fn token(self) -> &'static str {
        match self {
            PropertyExpectation::Ok => "ok",
            PropertyExpectation::NeedsInput => "needs_input",
            PropertyExpectation::Hang => "hang",
        }
    }

    pub fn from_token(s: &str) -> Option<PropertyExpectation> {
        Some(match s {
            "ok" => PropertyExpectation::Ok,
            "needs_input" => PropertyExpectation::NeedsInput,
            "hang" => PropertyExpectation::Hang,
            _ => return None,
        })
    }
}

/// A deliberately planted memory-safety bug: the fault kind a triggering
/// input produces and the source label of the faulting store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedBug {
    pub kind: String,
    pub label: String,
}

/// One expected categorization miss: the register's datasheet-style label
/// and the category the access pattern actually produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mislabel {
    pub addr: u32,
    pub truth: RegCategory,
    pub observed: RegCategory,
}

#[derive(Debug, Clone)]
pub struct FirmwareSpec {
    pub name: String,
    pub source: String,
    pub class: ConformanceClass,
    pub property: PropertyExpectation,
    /// Expected debug-port byte sequence for a completed run.
    pub markers: String,
    /// FNV-1a of the assembled image; load fails if the source drifts.
    pub image_hash: u64,
    /// Datasheet-style labels, addr -> category.
    pub truth: BTreeMap<u32, RegCategory>,
    pub mislabels: Vec<Mislabel>,
    /// Interrupt lines the firmware enables.
    pub irqs: Vec<u8>,
    /// Exact round-robin firing schedule of a completed zero-input run.
    pub firings: Vec<(u64, u8)>,
    pub bug: Option<PlantedBug>,
    /// First input word that routes boot into the on-demand init path.
    pub unlock: Option<u32>,
    /// Marker sequence for the unlock path.
    pub unlock_markers: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("manifest line {line}: {what}")]
    Manifest { line: usize, what: String },
    #[error("{name}: assembly failed: {source}")]
    Asm {
        name: String,
        #[source]
        source: AsmError,
    },
    #[error("{name}: image hash {found:#018x} does not match pinned {expected:#018x}")]
    ImageHash { name: String, expected: u64, found: u64 },
    #[error("{name}: label `{label}` missing from assembled image")]
    MissingLabel { name: String, label: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn bad(line: usize, what: impl Into<String>) -> CorpusError {
    CorpusError::Manifest { line: line + 1, what: what.into() }
}

fn parse_hex32(line: usize, tok: &str) -> Result<u32, CorpusError> {
    tok.strip_prefix("0x")
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| bad(line, format!("expected 0x-prefixed word, got `{tok}`")))
}

fn parse_category(line: usize, tok: &str) -> Result<RegCategory, CorpusError> {
    RegCategory::from_token(tok)
        .ok_or_else(|| bad(line, format!("unknown register category `{tok}`")))
}

/// Parse `manifest.txt`. Validates the invariants the checker depends on:
/// labels live in the MMIO window, marker strings are nonempty, mislabels
/// agree with the ground-truth table and with the declared class.
pub fn parse_manifest(text: &str) -> Result<Vec<FirmwareSpec>, CorpusError> {
    struct Draft {
        line: usize,
        name: String,
        source: Option<String>,
        class: Option<ConformanceClass>,
        property: Option<PropertyExpectation>,
        markers: Option<String>,
        image_hash: Option<u64>,
        truth: BTreeMap<u32, RegCategory>,
        mislabels: Vec<Mislabel>,
        irqs: Vec<u8>,
        firings: Vec<(u64, u8)>,
        bug: Option<PlantedBug>,
        unlock: Option<u32>,
        unlock_markers: Option<String>,
    }

    fn finish(d: Draft) -> Result<FirmwareSpec, CorpusError> {
        let line = d.line;
        let require = |what: &str| bad(line, format!("[firmware {}] missing `{what}`", d.name));
        let spec = FirmwareSpec {
            source: d.source.ok_or_else(|| require("source"))?,
            class: d.class.ok_or_else(|| require("class"))?,
            property: d.property.ok_or_else(|| require("property"))?,
            markers: d.markers.ok_or_else(|| require("markers"))?,
            image_hash: d.image_hash.ok_or_else(|| require("image"))?,
            name: d.name,
            truth: d.truth,
            mislabels: d.mislabels,
            irqs: d.irqs,
            firings: d.firings,
            bug: d.bug,
            unlock: d.unlock,
            unlock_markers: d.unlock_markers,
        };
        for m in &spec.mislabels {
            match spec.truth.get(&m.addr) {
                None => {
                    return Err(bad(
                        line,
                        format!("mislabel {:#010x} has no ground-truth entry", m.addr),
                    ))
                }
                Some(&t) if t != m.truth => {
                    return Err(bad(
                        line,
                        format!("mislabel {:#010x} disagrees with ground truth", m.addr),
                    ))
                }
                Some(_) => {}
            }
        }
        let class_ok = match spec.class {
            ConformanceClass::Conforming | ConformanceClass::IrqMultiplexed => {
                spec.mislabels.is_empty()
            }
            ConformanceClass::Type1NonConforming => spec
                .mislabels
                .iter()
                .all(|m| m.truth == RegCategory::Status && m.observed == RegCategory::Data),
            ConformanceClass::Type2NonConforming => spec
                .mislabels
                .iter()
                .all(|m| m.truth == RegCategory::Data && m.observed == RegCategory::Control),
        };
        if !class_ok || (spec.mislabels.is_empty() && matches!(spec.class, ConformanceClass::Type1NonConforming | ConformanceClass::Type2NonConforming)) {
            return Err(bad(line, format!("mislabels do not fit class {}", spec.class)));
        }
        Ok(spec)
    }

    let mut specs: Vec<FirmwareSpec> = Vec::new();
    let mut cur: Option<Draft> = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("[firmware ") {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| bad(ln, "unterminated section header"))?
                .trim()
                .to_string();
            if name.is_empty() {
                return Err(bad(ln, "empty firmware name"));
            }
            if let Some(d) = cur.take() {
                specs.push(finish(d)?);
            }
            if specs.iter().any(|s| s.name == name) {
                return Err(bad(ln, format!("duplicate firmware `{name}`")));
            }
            cur = Some(Draft {
                line: ln,
                name,
                source: None,
                class: None,
                property: None,
                markers: None,
                image_hash: None,
                truth: BTreeMap::new(),
                mislabels: Vec::new(),
                irqs: Vec::new(),
                firings: Vec::new(),
                bug: None,
                unlock: None,
                unlock_markers: None,
            });
            continue;
        }
        let d = cur
            .as_mut()
            .ok_or_else(|| bad(ln, "directive before first [firmware] section"))?;
        let mut toks = line.split_whitespace();
        let key = toks.next().unwrap();
        let args: Vec<&str> = toks.collect();
        let arity = |n: usize| -> Result<(), CorpusError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(bad(ln, format!("`{key}` takes {n} argument(s)")))
            }
        };
        match key {
            "source" => {
                arity(1)?;
                d.source = Some(args[0].to_string());
            }
            "class" => {
                arity(1)?;
                d.class = Some(
                    ConformanceClass::from_token(args[0])
                        .ok_or_else(|| bad(ln, format!("unknown class `{}`", args[0])))?,
                );
            }
            "property" => {
                arity(1)?;
                d.property = Some(
                    PropertyExpectation::from_token(args[0])
                        .ok_or_else(|| bad(ln, format!("unknown property `{}`", args[0])))?,
                );
            }
            "markers" => {
                arity(1)?;
                d.markers = Some(args[0].to_string());
            }
            "image" => {
                arity(1)?;
                let h = args[0]
                    .strip_prefix("0x")
                    .and_then(|h| u64::from_str_radix(h, 16).ok())
                    .ok_or_else(|| bad(ln, format!("bad image hash `{}`", args[0])))?;
                d.image_hash = Some(h);
            }
            "reg" => {
                arity(2)?;
                let addr = parse_hex32(ln, args[0])?;
                if !(MMIO_BASE..MMIO_END).contains(&addr) {
                    return Err(bad(ln, format!("{addr:#010x} is outside the MMIO window")));
                }
                let cat = parse_category(ln, args[1])?;
                if d.truth.insert(addr, cat).is_some() {
                    return Err(bad(ln, format!("duplicate reg {addr:#010x}")));
                }
            }
            "mislabel" => {
                arity(3)?;
                d.mislabels.push(Mislabel {
                    addr: parse_hex32(ln, args[0])?,
                    truth: parse_category(ln, args[1])?,
                    observed: parse_category(ln, args[2])?,
                });
            }
            "irq" => {
                arity(1)?;
                let n: u8 = args[0]
                    .parse()
                    .ok()
                    .filter(|&n| n < 32)
                    .ok_or_else(|| bad(ln, format!("bad irq line `{}`", args[0])))?;
                d.irqs.push(n);
            }
            "firing" => {
                arity(2)?;
                let bb: u64 = args[0]
                    .parse()
                    .map_err(|_| bad(ln, format!("bad firing block `{}`", args[0])))?;
                let irq: u8 = args[1]
                    .parse()
                    .ok()
                    .filter(|&n| n < 32)
                    .ok_or_else(|| bad(ln, format!("bad firing line `{}`", args[1])))?;
                d.firings.push((bb, irq));
            }
            "bug" => {
                arity(2)?;
                d.bug = Some(PlantedBug { kind: args[0].to_string(), label: args[1].to_string() });
            }
            "unlock" => {
                arity(1)?;
                d.unlock = Some(parse_hex32(ln, args[0])?);
            }
            "unlock_markers" => {
                arity(1)?;
                d.unlock_markers = Some(args[0].to_string());
            }
            other => return Err(bad(ln, format!("unknown directive `{other}`"))),
        }
        if let Some(m) = &d.markers {
            if m.is_empty() {
                return Err(bad(ln, "markers must be nonempty"));
            }
        }
    }
    if let Some(d) = cur.take() {
        specs.push(finish(d)?);
    }
    Ok(specs)
}

/// A buildable corpus member: manifest entry, assembled image, label map.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub spec: FirmwareSpec,
    pub image: Vec<u8>,
    pub labels: BTreeMap<String, u32>,
}

impl CorpusEntry {
    /// Flash address of the planted bug's faulting store, if any.
    pub fn bug_site(&self) -> Option<u32> {
        let bug = self.spec.bug.as_ref()?;
        self.labels.get(&bug.label).copied()
    }
}

/// Read `manifest.txt` from `dir`, assemble every listed source, and verify
/// the pinned image hashes.
pub fn load_dir(dir: &Path) -> Result<Vec<CorpusEntry>, CorpusError> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let specs = parse_manifest(&manifest)?;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let src = fs::read_to_string(dir.join(&spec.source))?;
        let out = assemble(&src)
            .map_err(|source| CorpusError::Asm { name: spec.name.clone(), source })?;
        let found = fnv1a(&out.image);
        if found != spec.image_hash {
            return Err(CorpusError::ImageHash {
                name: spec.name,
                expected: spec.image_hash,
                found,
            });
        }
        if let Some(bug) = &spec.bug {
            if !out.labels.contains_key(&bug.label) {
                return Err(CorpusError::MissingLabel {
                    name: spec.name,
                    label: bug.label.clone(),
                });
            }
        }
        entries.push(CorpusEntry { spec, image: out.image, labels: out.labels });
    }
    Ok(entries)
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    /// Fuzz-mutated inputs per conforming firmware in the liveness suite.
    pub mutated_runs: usize,
    pub limits: ExecLimits,
}

impl Default for CheckOptions {
    fn default() -> CheckOptions {
        CheckOptions { seed: 1, mutated_runs: 100, limits: ExecLimits::default() }
    }
}

/// Everything the checker measured for one firmware, plus every way the
/// measurement diverged from the manifest.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub class: ConformanceClass,
    /// Distinct 1 KiB MMIO groups the model saw.
    pub peripherals: usize,
    /// Registers in the final model.
    pub regs_total: usize,
    /// Registers read at least once (the accuracy denominator).
    pub regs_read: usize,
    /// Read registers whose category disagrees with ground truth, with the
    /// category the model actually assigned.
    pub mismatches: Vec<(u32, RegCategory)>,
    pub accuracy_pct: f64,
    pub sr_handlers: usize,
    pub explorations: usize,
    pub rounds: u32,
    pub runs: u32,
    /// Debug-port bytes from the zero-input liveness run.
    pub markers_zero_input: String,
    pub deviations: Vec<String>,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.deviations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn deviations(&self) -> impl Iterator<Item = (&str, &str)> {
        self.rows.iter().flat_map(|r| {
            r.deviations.iter().map(move |d| (r.name.as_str(), d.as_str()))
        })
    }
}

/// One model-backed liveness run.
struct PropertyRun {
    verdict: RunVerdict,
    markers: String,
    events: Vec<IrqEvent>,
    firings: Vec<(u64, u8)>,
}

fn run_once(
    image: &[u8],
    model: &RegModel,
    input: InputChannel,
    interval: u64,
    limits: &ExecLimits,
) -> PropertyRun {
    let mut exec = Execution::new(
        image,
        model.clone(),
        IrqState::new(interval),
        FiringStrategy::RoundRobin,
        input,
    )
    .expect("corpus image loads");
    let verdict = exec.run_to_verdict(limits);
    PropertyRun {
        verdict,
        markers: String::from_utf8_lossy(exec.markers()).into_owned(),
        events: exec.bus.irq.event_log.clone(),
        firings: exec.bus.irq.firing_log.clone(),
    }
}

/// Little-endian `word` followed by zeros; the shape unlock inputs take.
pub fn word_input(word: u32, len: usize) -> Vec<u8> {
    let mut bytes = vec![0u8; len.max(4)];
    bytes[..4].copy_from_slice(&word.to_le_bytes());
    bytes
}

/// Instantiate a model for one corpus entry and compare everything
/// observable against its manifest entry.
pub fn check_entry(entry: &CorpusEntry, opts: &CheckOptions) -> CheckRow {
    let spec = &entry.spec;
    let mut deviations: Vec<String> = Vec::new();

    let cfg = InstantiateConfig { seed: opts.seed, limits: opts.limits, ..Default::default() };
    let input_len = cfg.input_len;
    let interval = cfg.irq_interval;
    let session: Option<InstantiateSession> = match instantiate(&entry.image, cfg) {
        Ok(mut s) => {
            if !s.stable() {
                deviations.push(format!("model not stable after {} runs", s.runs));
            }
            // The unlock path only runs for a specific first input word;
            // play it once so its registers are in the model too.
            if let Some(word) = spec.unlock {
                match s.run_with_input(&word_input(word, input_len)) {
                    Ok(v) => {
                        if v != RunVerdict::Ok {
                            deviations.push(format!("unlock run ended {}", v.name()));
                        }
                    }
                    Err(e) => deviations.push(format!("unlock run failed: {e}")),
                }
            }
            Some(s)
        }
        Err(e) => {
            deviations.push(format!("instantiation failed: {e}"));
            None
        }
    };

    let Some(session) = session else {
        return CheckRow {
            name: spec.name.clone(),
            class: spec.class,
            peripherals: 0,
            regs_total: 0,
            regs_read: 0,
            mismatches: Vec::new(),
            accuracy_pct: 0.0,
            sr_handlers: 0,
            explorations: 0,
            rounds: 0,
            runs: 0,
            markers_zero_input: String::new(),
            deviations,
        };
    };
    let model = &session.model;

    // Categorization accuracy over registers read at least once.
    let mut regs_read = 0usize;
    let mut mismatches: Vec<(u32, RegCategory)> = Vec::new();
    let mut groups: BTreeSet<u32> = BTreeSet::new();
    for rec in model.records() {
        groups.insert(peripheral_id(rec.addr));
        match spec.truth.get(&rec.addr) {
            None => deviations.push(format!(
                "register {:#010x} ({}) has no ground-truth label",
                rec.addr,
                rec.category.token()
            )),
            Some(&truth) => {
                if rec.read_count >= 1 {
                    regs_read += 1;
                    if rec.category != truth {
                        mismatches.push((rec.addr, rec.category));
                    }
                }
            }
        }
    }
    for addr in spec.truth.keys() {
        if model.record(*addr).is_none() {
            deviations.push(format!("labeled register {addr:#010x} never accessed"));
        }
    }
    let accuracy_pct = if regs_read == 0 {
        100.0
    } else {
        100.0 * (1.0 - mismatches.len() as f64 / regs_read as f64)
    };
    let expected: BTreeSet<(u32, RegCategory)> =
        spec.mislabels.iter().map(|m| (m.addr, m.observed)).collect();
    let observed: BTreeSet<(u32, RegCategory)> = mismatches.iter().copied().collect();
    if observed != expected {
        deviations.push(format!(
            "mismatch set {:?} differs from labeled {:?}",
            observed
                .iter()
                .map(|(a, c)| format!("{a:#010x}->{}", c.token()))
                .collect::<Vec<_>>(),
            expected
                .iter()
                .map(|(a, c)| format!("{a:#010x}->{}", c.token()))
                .collect::<Vec<_>>(),
        ));
    }

    // Liveness suite. All runs pad exhausted input with zeros so completion
    // never depends on input length.
    let zero = || InputChannel::empty(ExhaustPolicy::Zeros);
    let mut random_bytes = vec![0u8; input_len];
    SplitMix64::derive(opts.seed, "corpus-check-random", 0).fill(&mut random_bytes);
    let random = || InputChannel::new(random_bytes.clone(), ExhaustPolicy::Zeros);

    let audit = |what: &str, run: &PropertyRun, devs: &mut Vec<String>| {
        if let Err((bb, irq)) = audit_firings(&run.events, &run.firings) {
            devs.push(format!("{what}: line {irq} fired at block {bb} while disabled"));
        }
    };

    let zero_run = run_once(&entry.image, model, zero(), interval, &opts.limits);
    audit("zero-input run", &zero_run, &mut deviations);
    let markers_zero_input = zero_run.markers.clone();

    let expect_completes = |what: &str, run: &PropertyRun, devs: &mut Vec<String>| {
        if run.verdict != RunVerdict::Ok {
            devs.push(format!("{what}: ended {} (wanted ok)", run.verdict.name()));
        } else if run.markers != spec.markers {
            devs.push(format!(
                "{what}: markers `{}` (wanted `{}`)",
                run.markers, spec.markers
            ));
        }
    };

    match spec.property {
        PropertyExpectation::Ok => {
            expect_completes("zero-input run", &zero_run, &mut deviations);
            // A planted bug means crafted inputs legitimately crash; only
            // the deterministic zero-input run is checked for liveness.
            if spec.bug.is_none() {
                let rand_run = run_once(&entry.image, model, random(), interval, &opts.limits);
                audit("random-input run", &rand_run, &mut deviations);
                expect_completes("random-input run", &rand_run, &mut deviations);

                let mut prng = SplitMix64::derive(opts.seed, &spec.name, 0);
                let pool = vec![vec![0u8; input_len], random_bytes.clone()];
                for i in 0..opts.mutated_runs {
                    let base = &pool[i % pool.len()];
                    let bytes = mutate(base, &pool, &mut prng);
                    let run = run_once(
                        &entry.image,
                        model,
                        InputChannel::new(bytes, ExhaustPolicy::Zeros),
                        interval,
                        &opts.limits,
                    );
                    audit("mutated-input run", &run, &mut deviations);
                    expect_completes(&format!("mutated-input run {i}"), &run, &mut deviations);
                    if !deviations.is_empty() && deviations.len() > 8 {
                        break; // a broken build would otherwise report 100x
                    }
                }
            }
            if !spec.firings.is_empty() && zero_run.firings != spec.firings {
                deviations.push(format!(
                    "firing schedule {:?} (wanted {:?})",
                    zero_run.firings, spec.firings
                ));
            }
        }
        PropertyExpectation::NeedsInput => {
            if zero_run.verdict != RunVerdict::Hang {
                deviations.push(format!(
                    "zero-input run: ended {} (wanted hang)",
                    zero_run.verdict.name()
                ));
            }
            let rand_run = run_once(&entry.image, model, random(), interval, &opts.limits);
            audit("random-input run", &rand_run, &mut deviations);
            expect_completes("random-input run", &rand_run, &mut deviations);
        }
        PropertyExpectation::Hang => {
            if zero_run.verdict != RunVerdict::Hang {
                deviations.push(format!(
                    "zero-input run: ended {} (wanted hang)",
                    zero_run.verdict.name()
                ));
            }
            if zero_run.markers != spec.markers {
                deviations.push(format!(
                    "zero-input run: markers `{}` (wanted `{}`)",
                    zero_run.markers, spec.markers
                ));
            }
        }
    }

    // Unlock path liveness: the alternate marker sequence must come out
    // when the unlock word leads the input.
    if let (Some(word), Some(expected)) = (spec.unlock, &spec.unlock_markers) {
        let run = run_once(
            &entry.image,
            model,
            InputChannel::new(word_input(word, input_len), ExhaustPolicy::Zeros),
            interval,
            &opts.limits,
        );
        audit("unlock run", &run, &mut deviations);
        if run.verdict != RunVerdict::Ok {
            deviations.push(format!("unlock run: ended {} (wanted ok)", run.verdict.name()));
        } else if &run.markers != expected {
            deviations.push(format!(
                "unlock run: markers `{}` (wanted `{}`)",
                run.markers, expected
            ));
        }
    }

    CheckRow {
        name: spec.name.clone(),
        class: spec.class,
        peripherals: groups.len(),
        regs_total: model.records().count(),
        regs_read,
        mismatches,
        accuracy_pct,
        sr_handlers: model.handlers().count(),
        explorations: session.explorations.len(),
        rounds: session.rounds,
        runs: session.runs,
        markers_zero_input,
        deviations,
    }
}

pub fn check(entries: &[CorpusEntry], opts: &CheckOptions) -> CheckReport {
    CheckReport { rows: entries.iter().map(|e| check_entry(e, opts)).collect() }
}
