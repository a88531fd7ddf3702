//! Session-report rendering: an instantiation table (per-firmware model
//! statistics), a fuzzing table (speed and stub-vs-model coverage), and a
//! per-round progression CSV reconstructed from the round logs. All values
//! are copied verbatim from session artifacts, so re-rendering the same
//! session directory is byte-stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::artifacts::{
    read_kv, COMPARE_FILE, CORPUS_CHECK_FILE, FUZZ_STATS_FILE, ROUNDS_FILE, STATS_FILE,
    TIMING_FILE,
};

pub struct Session {
    pub name: String,
    pub dir: PathBuf,
}

/// A session is any directory holding instantiate or fuzz artifacts. The
/// root may be a single session or a parent of per-firmware sessions.
pub fn discover(root: &Path) -> Result<Vec<Session>> {
    fn is_session(dir: &Path) -> bool {
        dir.join(STATS_FILE).is_file() || dir.join(FUZZ_STATS_FILE).is_file()
    }
    fn dir_name(dir: &Path) -> String {
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| ".".into())
    }

    if !root.is_dir() {
        bail!("missing artifacts: {} is not a directory", root.display());
    }
    if is_session(root) {
        return Ok(vec![Session { name: dir_name(root), dir: root.to_path_buf() }]);
    }
    let mut sessions = Vec::new();
    let mut children: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        if is_session(&child) {
            sessions.push(Session { name: dir_name(&child), dir: child });
        }
    }
    if sessions.is_empty() {
        bail!(
            "missing artifacts: no {STATS_FILE} or {FUZZ_STATS_FILE} under {}",
            root.display()
        );
    }
    Ok(sessions)
}

/// `corpus_check.txt` accuracy column, keyed by firmware name.
fn accuracy_index(root: &Path) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let Ok(text) = fs::read_to_string(root.join(CORPUS_CHECK_FILE)) else {
        return map;
    };
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.first() != Some(&"firmware") {
            continue;
        }
        let name = toks.get(1).copied();
        let acc = toks
            .iter()
            .position(|t| *t == "accuracy")
            .and_then(|i| toks.get(i + 1))
            .copied();
        if let (Some(name), Some(acc)) = (name, acc) {
            map.insert(name.to_string(), acc.to_string());
        }
    }
    map
}

/// Rows as cell matrices; the text renderer pads, the CSV renderer joins.
pub struct Tables {
    pub instantiation: Vec<Vec<String>>,
    pub fuzzing: Vec<Vec<String>>,
    pub progression: Vec<Vec<String>>,
}

const INST_HEADER: &[&str] =
    &["firmware", "peripherals", "registers", "accuracy", "sr_groups", "rounds", "time_ms"];
const FUZZ_HEADER: &[&str] = &[
    "firmware",
    "execs",
    "execs_per_sec",
    "blocks_stub",
    "blocks_model",
    "improv",
    "crashes",
];
const PROG_HEADER: &[&str] =
    &["firmware", "round", "run", "new_regs", "new_handlers", "recategorized"];

fn get(kv: &BTreeMap<String, String>, key: &str) -> String {
    kv.get(key).cloned().unwrap_or_else(|| "-".into())
}

pub fn collect(root: &Path) -> Result<Tables> {
    let sessions = discover(root)?;
    let accuracy = accuracy_index(root);
    let mut inst = vec![INST_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let mut fuzz = vec![FUZZ_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let mut prog = vec![PROG_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];

    for s in &sessions {
        let timing = read_kv(&s.dir.join(TIMING_FILE)).unwrap_or_default();
        if s.dir.join(STATS_FILE).is_file() {
            let kv = read_kv(&s.dir.join(STATS_FILE))?;
            inst.push(vec![
                s.name.clone(),
                get(&kv, "peripherals"),
                get(&kv, "registers"),
                accuracy.get(&s.name).cloned().unwrap_or_else(|| "-".into()),
                get(&kv, "sr_groups"),
                get(&kv, "rounds"),
                get(&timing, "elapsed_ms"),
            ]);
            for row in progression_rows(&s.name, &s.dir)? {
                prog.push(row);
            }
        }
        if s.dir.join(FUZZ_STATS_FILE).is_file() {
            let kv = read_kv(&s.dir.join(FUZZ_STATS_FILE))?;
            let cmp = read_kv(&s.dir.join(COMPARE_FILE)).unwrap_or_default();
            fuzz.push(vec![
                s.name.clone(),
                get(&kv, "execs"),
                get(&timing, "execs_per_sec"),
                get(&cmp, "blocks_a"),
                get(&cmp, "blocks_b"),
                get(&cmp, "ratio"),
                get(&kv, "buckets"),
            ]);
        }
    }
    Ok(Tables { instantiation: inst, fuzzing: fuzz, progression: prog })
}

/// One progression row per round: counts of each change kind in the log.
fn progression_rows(name: &str, dir: &Path) -> Result<Vec<Vec<String>>> {
    let path = dir.join(ROUNDS_FILE);
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(Vec::new());
    };
    let mut rows: Vec<Vec<String>> = Vec::new();
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first() {
            Some(&"round") if toks.len() >= 4 => {
                rows.push(vec![
                    name.to_string(),
                    toks[1].to_string(),
                    toks[3].to_string(),
                    "0".into(),
                    "0".into(),
                    "0".into(),
                ]);
            }
            Some(&"+reg") => bump(&mut rows, 3),
            Some(&"+handler") => bump(&mut rows, 4),
            Some(&"~reg") => bump(&mut rows, 5),
            _ => {}
        }
    }
    Ok(rows)
}

fn bump(rows: &mut Vec<Vec<String>>, col: usize) {
    if let Some(row) = rows.last_mut() {
        let n: u64 = row[col].parse().unwrap_or(0);
        row[col] = (n + 1).to_string();
    }
}

pub fn render_aligned(rows: &[Vec<String>]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut widths = vec![0usize; first.len()];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut s = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i + 1 == row.len() {
                line.push_str(cell);
            } else {
                let _ = write!(line, "{:<width$}  ", cell, width = widths[i]);
            }
        }
        let _ = writeln!(s, "{}", line.trim_end());
    }
    s
}

fn render_csv(rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    for row in rows {
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn render_text(t: &Tables) -> String {
    let mut s = String::new();
    s.push_str("model instantiation\n");
    if t.instantiation.len() > 1 {
        s.push_str(&render_aligned(&t.instantiation));
    } else {
        s.push_str("(no instantiation sessions)\n");
    }
    s.push_str("\nfuzzing\n");
    if t.fuzzing.len() > 1 {
        s.push_str(&render_aligned(&t.fuzzing));
    } else {
        s.push_str("(no fuzzing sessions)\n");
    }
    s.push_str("\nround progression\n");
    if t.progression.len() > 1 {
        s.push_str(&render_csv(&t.progression));
    } else {
        s.push_str("(no round logs)\n");
    }
    s
}

pub fn write_csv(t: &Tables, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("instantiation.csv"), render_csv(&t.instantiation))?;
    fs::write(dir.join("fuzzing.csv"), render_csv(&t.fuzzing))?;
    fs::write(dir.join("progression.csv"), render_csv(&t.progression))?;
    Ok(())
}
