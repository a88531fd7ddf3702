//! Model file persistence: canonical text serialization, loading, diffing.
//!
//! The on-disk format is line-oriented sectioned text — diffable in review
//! and parseable anywhere. Serialization is canonical: registers sort by
//! address, handlers by (r, bbl, cs, conf), logs keep chronological order,
//! so `save ∘ load ∘ save` is byte-identical. Models are firmware-specific;
//! the image content hash is stored and checked on load.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::hash::fnv1a;
use crate::irq::IrqEvent;
use crate::regmodel::{RegCategory, RegModel, RegRecord, SrAccessContext, TieBreakRecord};

pub const FORMAT_VERSION: u32 = 1;

/// Hash naming the firmware an artifact belongs to.
pub fn firmware_hash(image: &[u8]) -> u64 {
    fnv1a(image)
}

/// A model plus the session facts that travel with it.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub format_version: u32,
    /// Content hash of the firmware image the model was built from.
    pub firmware: u64,
    pub session_seed: u64,
    pub model: RegModel,
    /// Enable/disable writes observed across the instantiation session.
    pub interrupt_log: Vec<IrqEvent>,
}

impl ModelFile {
    pub fn new(
        image: &[u8],
        session_seed: u64,
        model: RegModel,
        interrupt_log: Vec<IrqEvent>,
    ) -> ModelFile {
        ModelFile {
            format_version: FORMAT_VERSION,
            firmware: firmware_hash(image),
            session_seed,
            model,
            interrupt_log,
        }
    }

    /// The model belongs to exactly this image.
    pub fn check_firmware(&self, image: &[u8]) -> Result<(), StoreError> {
        let found = firmware_hash(image);
        if found != self.firmware {
            return Err(StoreError::FirmwareMismatch { expected: self.firmware, found });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("line {line}: {what}")]
    ParseError { line: usize, what: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("line {line}: invariant violated: {what}")]
    InvariantViolation { line: usize, what: String },
    #[error("model was built for firmware {expected:#018x}, image hashes to {found:#018x}")]
    FirmwareMismatch { expected: u64, found: u64 },
    #[error("model file i/o: {0}")]
    Io(#[from] io::Error),
}

/// Canonical text rendering.
pub fn render(mf: &ModelFile) -> String {
    let mut s = String::new();
    s.push_str("[meta]\n");
    let _ = writeln!(s, "format_version {}", mf.format_version);
    let _ = writeln!(s, "firmware {:#018x}", mf.firmware);
    let _ = writeln!(s, "session_seed {:#018x}", mf.session_seed);
    s.push_str("\n[registers]\n");
    for r in mf.model.records() {
        let _ = writeln!(
            s,
            "{:#010x} {} {} {:#010x} {:#010x} {:#010x}",
            r.addr,
            r.category.token(),
            r.locked as u8,
            r.peripheral(),
            r.stored,
            r.cr_bitmask
        );
    }
    s.push_str("\n[sr_handlers]\n");
    for (ctx, v) in mf.model.handlers() {
        let _ = writeln!(
            s,
            "{:#010x} {:#018x} {:#010x} {:#018x} {:#010x}",
            ctx.addr, ctx.cs, ctx.bbl, ctx.conf, v
        );
    }
    s.push_str("\n[interrupt_log]\n");
    for ev in &mf.interrupt_log {
        let _ = writeln!(
            s,
            "{:#018x} {} {:#010x}",
            ev.bb,
            if ev.enable { "enable" } else { "disable" },
            ev.mask
        );
    }
    s.push_str("\n[tie_breaks]\n");
    for t in mf.model.tie_breaks() {
        let _ = writeln!(
            s,
            "{:#010x} {:#018x} {:#010x} {:#018x} {:#018x} {:#010x}",
            t.ctx.addr, t.ctx.cs, t.ctx.bbl, t.ctx.conf, t.draw, t.chosen
        );
    }
    s
}

pub fn save(mf: &ModelFile, path: &Path) -> Result<(), StoreError> {
    fs::write(path, render(mf))?;
    Ok(())
}

fn parse_err(line: usize, what: impl Into<String>) -> StoreError {
    StoreError::ParseError { line, what: what.into() }
}

fn hex_field(tok: &str, line: usize) -> Result<u64, StoreError> {
    let digits = tok
        .strip_prefix("0x")
        .ok_or_else(|| parse_err(line, format!("expected 0x-prefixed hex, got `{tok}`")))?;
    u64::from_str_radix(digits, 16)
        .map_err(|_| parse_err(line, format!("bad hex value `{tok}`")))
}

fn hex32(tok: &str, line: usize) -> Result<u32, StoreError> {
    let v = hex_field(tok, line)?;
    u32::try_from(v).map_err(|_| parse_err(line, format!("value `{tok}` exceeds 32 bits")))
}

/// Parse model text (see `render` for the grammar's canonical producer).
pub fn parse(text: &str) -> Result<ModelFile, StoreError> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Meta,
        Registers,
        SrHandlers,
        InterruptLog,
        TieBreaks,
    }
    let mut section = Section::None;
    let mut format_version: Option<u32> = None;
    let mut firmware: Option<u64> = None;
    let mut session_seed: Option<u64> = None;
    let mut records: Vec<RegRecord> = Vec::new();
    let mut record_lines: Vec<usize> = Vec::new();
    let mut handlers: Vec<(SrAccessContext, u32)> = Vec::new();
    let mut handler_lines: Vec<usize> = Vec::new();
    let mut interrupt_log: Vec<IrqEvent> = Vec::new();
    let mut tie_breaks: Vec<TieBreakRecord> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            section = match name {
                "meta" => Section::Meta,
                "registers" => Section::Registers,
                "sr_handlers" => Section::SrHandlers,
                "interrupt_log" => Section::InterruptLog,
                "tie_breaks" => Section::TieBreaks,
                other => return Err(parse_err(line, format!("unknown section `[{other}]`"))),
            };
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        match section {
            Section::None => return Err(parse_err(line, "record before any section header")),
            Section::Meta => {
                if toks.len() != 2 {
                    return Err(parse_err(line, "meta lines are `key value`"));
                }
                match toks[0] {
                    "format_version" => {
                        let v: u32 = toks[1]
                            .parse()
                            .map_err(|_| parse_err(line, "bad format_version"))?;
                        format_version = Some(v);
                    }
                    "firmware" => firmware = Some(hex_field(toks[1], line)?),
                    "session_seed" => session_seed = Some(hex_field(toks[1], line)?),
                    other => {
                        return Err(parse_err(line, format!("unknown meta key `{other}`")))
                    }
                }
            }
            Section::Registers => {
                if toks.len() != 6 {
                    return Err(parse_err(line, "register lines have 6 fields"));
                }
                let addr = hex32(toks[0], line)?;
                let category = RegCategory::from_token(toks[1])
                    .ok_or_else(|| parse_err(line, format!("bad category `{}`", toks[1])))?;
                let locked = match toks[2] {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(parse_err(line, format!("bad locked flag `{other}`")))
                    }
                };
                let peripheral = hex32(toks[3], line)?;
                let stored = hex32(toks[4], line)?;
                let cr_bitmask = hex32(toks[5], line)?;
                let rec = RegRecord::from_persisted(addr, category, locked, stored, cr_bitmask);
                if rec.peripheral() != peripheral {
                    return Err(StoreError::InvariantViolation {
                        line,
                        what: format!(
                            "register {addr:#010x} is in peripheral {:#010x}, not {peripheral:#010x}",
                            rec.peripheral()
                        ),
                    });
                }
                records.push(rec);
                record_lines.push(line);
            }
            Section::SrHandlers => {
                if toks.len() != 5 {
                    return Err(parse_err(line, "handler lines have 5 fields"));
                }
                let ctx = SrAccessContext {
                    addr: hex32(toks[0], line)?,
                    cs: hex_field(toks[1], line)?,
                    bbl: hex32(toks[2], line)?,
                    conf: hex_field(toks[3], line)?,
                };
                handlers.push((ctx, hex32(toks[4], line)?));
                handler_lines.push(line);
            }
            Section::InterruptLog => {
                if toks.len() != 3 {
                    return Err(parse_err(line, "interrupt log lines have 3 fields"));
                }
                let bb = hex_field(toks[0], line)?;
                let enable = match toks[1] {
                    "enable" => true,
                    "disable" => false,
                    other => {
                        return Err(parse_err(line, format!("bad event kind `{other}`")))
                    }
                };
                interrupt_log.push(IrqEvent { bb, enable, mask: hex32(toks[2], line)? });
            }
            Section::TieBreaks => {
                if toks.len() != 6 {
                    return Err(parse_err(line, "tie-break lines have 6 fields"));
                }
                let ctx = SrAccessContext {
                    addr: hex32(toks[0], line)?,
                    cs: hex_field(toks[1], line)?,
                    bbl: hex32(toks[2], line)?,
                    conf: hex_field(toks[3], line)?,
                };
                tie_breaks.push(TieBreakRecord {
                    ctx,
                    draw: hex_field(toks[4], line)?,
                    chosen: hex32(toks[5], line)?,
                });
            }
        }
    }

    let format_version =
        format_version.ok_or_else(|| parse_err(0, "missing meta key format_version"))?;
    if format_version != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch { found: format_version });
    }
    let firmware = firmware.ok_or_else(|| parse_err(0, "missing meta key firmware"))?;
    let session_seed =
        session_seed.ok_or_else(|| parse_err(0, "missing meta key session_seed"))?;

    // Canonical-order and uniqueness checks, so reload-and-save cannot
    // silently reorder a hand-edited file.
    for (pair, lines) in records.windows(2).zip(record_lines.windows(2)) {
        if pair[0].addr >= pair[1].addr {
            return Err(StoreError::InvariantViolation {
                line: lines[1],
                what: "registers must be strictly ordered by address".into(),
            });
        }
    }
    for (pair, lines) in handlers.windows(2).zip(handler_lines.windows(2)) {
        let key = |h: &(SrAccessContext, u32)| (h.0.addr, h.0.bbl, h.0.cs, h.0.conf);
        if key(&pair[0]) >= key(&pair[1]) {
            return Err(StoreError::InvariantViolation {
                line: lines[1],
                what: "handlers must be strictly ordered by (r, bbl, cs, conf)".into(),
            });
        }
    }
    // Referential closure: a handler's register must be modeled.
    for ((ctx, _), line) in handlers.iter().zip(&handler_lines) {
        if !records.iter().any(|r| r.addr == ctx.addr) {
            return Err(StoreError::InvariantViolation {
                line: *line,
                what: format!("handler references unmodeled register {:#010x}", ctx.addr),
            });
        }
    }

    Ok(ModelFile {
        format_version,
        firmware,
        session_seed,
        model: RegModel::from_parts(records, handlers, tie_breaks),
        interrupt_log,
    })
}

pub fn load(path: &Path) -> Result<ModelFile, StoreError> {
    parse(&fs::read_to_string(path)?)
}

/// Load and bind to a specific firmware image.
pub fn load_for_image(path: &Path, image: &[u8]) -> Result<ModelFile, StoreError> {
    let mf = load(path)?;
    mf.check_firmware(image)?;
    Ok(mf)
}

/// What changed from model `a` to model `b`, canonically ordered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelDiff {
    pub added_regs: Vec<u32>,
    pub removed_regs: Vec<u32>,
    /// (addr, from, to)
    pub recategorized: Vec<(u32, RegCategory, RegCategory)>,
    pub added_handlers: Vec<(SrAccessContext, u32)>,
}

impl ModelDiff {
    pub fn is_empty(&self) -> bool {
        self.added_regs.is_empty()
            && self.removed_regs.is_empty()
            && self.recategorized.is_empty()
            && self.added_handlers.is_empty()
    }
}

/// Diff two model files for the same firmware.
pub fn diff(a: &ModelFile, b: &ModelFile) -> Result<ModelDiff, StoreError> {
    if a.firmware != b.firmware {
        return Err(StoreError::FirmwareMismatch { expected: a.firmware, found: b.firmware });
    }
    Ok(diff_models(&a.model, &b.model))
}

/// Diff two in-memory models (per-round progression reporting).
pub fn diff_models(a: &RegModel, b: &RegModel) -> ModelDiff {
    let mut d = ModelDiff::default();
    for rb in b.records() {
        match a.record(rb.addr) {
            None => d.added_regs.push(rb.addr),
            Some(ra) if ra.category != rb.category => {
                d.recategorized.push((rb.addr, ra.category, rb.category));
            }
            Some(_) => {}
        }
    }
    for ra in a.records() {
        if b.record(ra.addr).is_none() {
            d.removed_regs.push(ra.addr);
        }
    }
    let have: std::collections::BTreeSet<_> =
        a.handlers().map(|(ctx, _)| ctx).collect();
    for (ctx, v) in b.handlers() {
        if !have.contains(&ctx) {
            d.added_handlers.push((ctx, v));
        }
    }
    d
}
