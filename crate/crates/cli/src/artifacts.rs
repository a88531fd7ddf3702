//! Session-directory artifact formats shared by the producing commands
//! (`instantiate`, `fuzz`, `compare`, `corpus-check`) and the consuming one
//! (`report`). Everything here is line-oriented text with fixed key order,
//! so identical inputs produce identical bytes. The one exception is
//! `timing.txt`: it records wall-clock measurements and is the only file a
//! command writes that is not reproducible across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use perifuzz::explore::{ExplorationRecord, RoundEntry};
use perifuzz::irq::IrqEvent;
use perifuzz::modelstore::ModelDiff;
use perifuzz::regmodel::{RegModel, SrAccessContext};

pub const MODEL_FILE: &str = "model.txt";
pub const STATS_FILE: &str = "stats.txt";
pub const ROUNDS_FILE: &str = "rounds.log";
pub const EXPLORE_FILE: &str = "explore.log";
pub const TIMING_FILE: &str = "timing.txt";
pub const FUZZ_STATS_FILE: &str = "fuzz_stats.txt";
pub const COMPARE_FILE: &str = "compare.txt";
pub const CORPUS_CHECK_FILE: &str = "corpus_check.txt";
pub const CRASH_DIR: &str = "crashes";

/// `key value` lines, insertion-ordered on write.
pub fn write_kv<K: AsRef<str>, V: AsRef<str>>(path: &Path, pairs: &[(K, V)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{} {}", k.as_ref(), v.as_ref());
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(' ') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    Ok(map)
}

pub fn ctx_fields(ctx: &SrAccessContext) -> String {
    format!(
        "sr {:#010x} bbl {:#010x} cs {:#018x} conf {:#018x}",
        ctx.addr, ctx.bbl, ctx.cs, ctx.conf
    )
}

/// Human/parseable lines for one model diff. With the newer model at hand,
/// added registers carry their category.
pub fn diff_lines(d: &ModelDiff, newer: Option<&RegModel>) -> Vec<String> {
    let mut out = Vec::new();
    for addr in &d.added_regs {
        let cat = newer
            .and_then(|m| m.record(*addr))
            .map(|r| format!(" {}", r.category.token()))
            .unwrap_or_default();
        out.push(format!("+reg {addr:#010x}{cat}"));
    }
    for addr in &d.removed_regs {
        out.push(format!("-reg {addr:#010x}"));
    }
    for (addr, from, to) in &d.recategorized {
        out.push(format!("~reg {:#010x} {} -> {}", addr, from.token(), to.token()));
    }
    for (ctx, value) in &d.added_handlers {
        out.push(format!("+handler {} value {:#010x}", ctx_fields(ctx), value));
    }
    out
}

/// One `rounds.log` block: the round header plus what the round changed.
pub fn round_block(entry: &RoundEntry, diff: &ModelDiff, newer: &RegModel) -> String {
    let mut s = format!(
        "round {} run {} verdict {} explorations {}\n",
        entry.round, entry.run, entry.verdict, entry.explorations_in_run
    );
    for line in diff_lines(diff, Some(newer)) {
        s.push_str(&line);
        s.push('\n');
    }
    s
}

/// One `explore.log` block: the paused context, all 33 candidate outcomes
/// in worker order, and the winner (with the tie draw when one happened).
pub fn explore_block(rec: &ExplorationRecord) -> String {
    let mut s = format!("explore run {} {}\n", rec.run, ctx_fields(&rec.ctx));
    for cand in &rec.outcome.results {
        let _ = writeln!(
            s,
            "candidate {:#010x} outcome {} dr_access {} sr_dep {}",
            cand.candidate_value,
            cand.outcome.name(),
            cand.dr_access_count,
            cand.sr_dependent_failure
        );
    }
    if let Some(tb) = &rec.outcome.tie_break {
        let tied: Vec<String> = tb.tied.iter().map(|v| format!("{v:#010x}")).collect();
        let _ = writeln!(s, "tie draw {:#018x} among {}", tb.draw, tied.join(" "));
    }
    let _ = writeln!(s, "winner {:#010x}", rec.outcome.winner);
    s
}

pub fn irq_event_line(ev: &IrqEvent) -> String {
    let verb = if ev.enable { "enable" } else { "disable" };
    format!("bb {} {} mask {:#010x}", ev.bb, verb, ev.mask)
}

/// Distinct status-register addresses among the model's handler contexts.
pub fn sr_group_count(model: &RegModel) -> usize {
    let addrs: std::collections::BTreeSet<u32> =
        model.handlers().map(|(ctx, _)| ctx.addr).collect();
    addrs.len()
}
