//! Command-line front end: assemble firmware, run it against a model (or
//! the stub), build models by instantiation, fuzz, compare coverage,
//! render session reports, inspect/diff model files, and run the corpus
//! conformance check.
//!
//! Exit codes: 0 success, 1 expected-result deviation (failed run, unstable
//! or unmodelable firmware, differing models, corpus deviations), 2 usage
//! or IO error. All file outputs are byte-reproducible for identical inputs
//! and seeds, except `timing.txt`, which records wall-clock measurements.

mod artifacts;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use perifuzz::asm::{assemble, disassemble};
use perifuzz::corpus::{self, CheckOptions};
use perifuzz::exec::{ExecLimits, Execution, RunVerdict};
use perifuzz::explore::{ExploreError, InstantiateConfig, InstantiateError, InstantiateSession};
use perifuzz::fuzz::{
    coverage_compare, fuzz_loop, CoverageMap, ExhaustPolicy, FuzzConfig, FuzzOutcome,
    FuzzRunReport, InputChannel,
};
use perifuzz::hash::fnv1a;
use perifuzz::irq::{FiringStrategy, IrqState, DEFAULT_IRQ_INTERVAL};
use perifuzz::modelstore::{self, diff_models, ModelFile};
use perifuzz::regmodel::RegModel;

use artifacts::{
    ctx_fields, diff_lines, explore_block, irq_event_line, round_block, sr_group_count,
    write_kv, COMPARE_FILE, CRASH_DIR, EXPLORE_FILE, FUZZ_STATS_FILE, MODEL_FILE, ROUNDS_FILE,
    STATS_FILE, TIMING_FILE,
};

#[derive(Parser)]
#[command(
    name = "perifuzz",
    version,
    about = "Hardware-independent firmware execution, peripheral modeling, and fuzzing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct LimitArgs {
    /// Instructions per run before the run is declared hung
    #[arg(long, default_value_t = ExecLimits::default().max_insns)]
    max_insns: u64,
    /// Consecutive progress-free blocks before the run is declared hung
    #[arg(long, default_value_t = ExecLimits::default().hang_blocks)]
    hang_blocks: u64,
}

impl LimitArgs {
    fn limits(&self) -> ExecLimits {
        ExecLimits { max_insns: self.max_insns, hang_blocks: self.hang_blocks }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a source file into a firmware image
    Asm {
        /// Assembly source file
        #[arg(long)]
        src: PathBuf,
        /// Output image path
        #[arg(long)]
        out: PathBuf,
        /// Also write a `0xADDR name` label map
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Disassemble a firmware image to stdout
    Disasm {
        /// Firmware image
        #[arg(long)]
        image: PathBuf,
    },
    /// Execute a firmware image once and report the verdict
    Run {
        /// Firmware image
        #[arg(long)]
        image: PathBuf,
        /// Model file; without one the stub answers all MMIO reads with 0
        /// and interrupts stay off
        #[arg(long)]
        model: Option<PathBuf>,
        /// Input bytes consumed by data-register reads (exhausted reads
        /// return 0)
        #[arg(long)]
        input: Option<PathBuf>,
        /// Blocks between round-robin interrupt firings
        #[arg(long, default_value_t = DEFAULT_IRQ_INTERVAL)]
        interval: u64,
        #[command(flatten)]
        limits: LimitArgs,
    },
    /// Build a model: seeded runs alternate with exploration until the
    /// model holds still for the configured number of runs
    Instantiate {
        /// Firmware image
        #[arg(long)]
        image: PathBuf,
        /// Session directory for model.txt, rounds.log, explore.log,
        /// stats.txt, timing.txt
        #[arg(long)]
        out: PathBuf,
        /// Session seed; all per-run inputs and tie-breaks derive from it
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Consecutive model-quiet runs before the model counts as stable
        #[arg(long, default_value_t = 10)]
        stable_after: u32,
        /// Hard cap on total runs
        #[arg(long, default_value_t = 200)]
        runs_budget: u32,
        /// Bytes of derived input per run
        #[arg(long, default_value_t = 4096)]
        input_len: usize,
        /// Blocks between round-robin interrupt firings
        #[arg(long, default_value_t = DEFAULT_IRQ_INTERVAL)]
        interval: u64,
        #[command(flatten)]
        limits: LimitArgs,
    },
    /// Coverage-guided fuzzing with the built-in mutator, or replay of
    /// externally generated inputs
    Fuzz {
        /// Firmware image
        #[arg(long)]
        image: PathBuf,
        /// Model file (must match the image)
        #[arg(long)]
        model: PathBuf,
        /// Directory of seed inputs, one file each
        #[arg(long, required_unless_present = "input_dir")]
        seeds: Option<PathBuf>,
        /// Replay mode: run every file in this directory instead of
        /// mutating seeds
        #[arg(long, conflicts_with = "seeds")]
        input_dir: Option<PathBuf>,
        /// Session directory for fuzz_stats.txt, crashes/, timing.txt
        #[arg(long)]
        out: PathBuf,
        /// Session seed for the mutation engine
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Total executions across all jobs
        #[arg(long, default_value_t = 10_000)]
        execs: u64,
        /// Independent fuzzing instances (PRNG streams derive from seed +
        /// instance id; merged results are order-independent)
        #[arg(long, default_value_t = 1)]
        jobs: u32,
        /// Blocks between round-robin interrupt firings
        #[arg(long, default_value_t = DEFAULT_IRQ_INTERVAL)]
        interval: u64,
        #[command(flatten)]
        limits: LimitArgs,
    },
    /// Distinct-block coverage of one input set under two models
    Compare {
        /// Firmware image
        #[arg(long)]
        image: PathBuf,
        /// Model file, or the literal `stub` (MMIO reads 0, interrupts off)
        #[arg(long)]
        model_a: String,
        /// Model file, or the literal `stub`
        #[arg(long)]
        model_b: String,
        /// Directory of input files
        #[arg(long)]
        inputs: PathBuf,
        /// Also write compare.txt into this directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Blocks between round-robin interrupt firings (model runs only)
        #[arg(long, default_value_t = DEFAULT_IRQ_INTERVAL)]
        interval: u64,
        #[command(flatten)]
        limits: LimitArgs,
    },
    /// Render instantiation, fuzzing, and round-progression tables from
    /// session artifacts
    Report {
        /// A session directory, or a parent of per-firmware sessions
        #[arg(long)]
        session: PathBuf,
        /// Also write instantiation.csv, fuzzing.csv, progression.csv here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Inspect or compare model files
    #[command(subcommand)]
    Model(ModelCmd),
    /// Assemble the firmware corpus, rebuild every model, and check
    /// categorization, liveness, and interrupt schedules against the
    /// manifest's expected results
    CorpusCheck {
        /// Corpus directory containing manifest.txt and sources
        #[arg(long)]
        dir: PathBuf,
        /// Session seed for instantiation and the mutated-input suite
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Fuzz-mutated liveness runs per conforming firmware
        #[arg(long, default_value_t = 100)]
        mutated: usize,
        /// Also write the line-oriented result records to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Render a model file as aligned tables (or raw canonical text)
    Show {
        /// Model file
        #[arg(long)]
        file: PathBuf,
        /// Print the canonical file format instead of tables
        #[arg(long)]
        raw: bool,
    },
    /// Compare two model files for the same firmware
    Diff {
        /// Baseline model file
        #[arg(long)]
        a: PathBuf,
        /// Model file to compare against the baseline
        #[arg(long)]
        b: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Asm { src, out, labels } => cmd_asm(&src, &out, labels.as_deref()),
        Cmd::Disasm { image } => cmd_disasm(&image),
        Cmd::Run { image, model, input, interval, limits } => {
            cmd_run(&image, model.as_deref(), input.as_deref(), interval, &limits.limits())
        }
        Cmd::Instantiate {
            image,
            out,
            seed,
            stable_after,
            runs_budget,
            input_len,
            interval,
            limits,
        } => {
            let cfg = InstantiateConfig {
                seed,
                stable_after,
                runs_budget,
                input_len,
                limits: limits.limits(),
                irq_interval: interval,
                ..InstantiateConfig::default()
            };
            cmd_instantiate(&image, &out, cfg)
        }
        Cmd::Fuzz { image, model, seeds, input_dir, out, seed, execs, jobs, interval, limits } => {
            cmd_fuzz(
                &image,
                &model,
                seeds.as_deref(),
                input_dir.as_deref(),
                &out,
                seed,
                execs,
                jobs,
                interval,
                &limits.limits(),
            )
        }
        Cmd::Compare { image, model_a, model_b, inputs, out, interval, limits } => cmd_compare(
            &image,
            &model_a,
            &model_b,
            &inputs,
            out.as_deref(),
            interval,
            &limits.limits(),
        ),
        Cmd::Report { session, csv } => cmd_report(&session, csv.as_deref()),
        Cmd::Model(ModelCmd::Show { file, raw }) => cmd_model_show(&file, raw),
        Cmd::Model(ModelCmd::Diff { a, b }) => cmd_model_diff(&a, &b),
        Cmd::CorpusCheck { dir, seed, mutated, out } => {
            cmd_corpus_check(&dir, seed, mutated, out.as_deref())
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// All regular files in `dir`, sorted by name, read whole.
fn read_input_dir(dir: &Path) -> Result<Vec<Vec<u8>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| read_file(p)).collect()
}

fn cmd_asm(src: &Path, out: &Path, labels: Option<&Path>) -> Result<i32> {
    let text = fs::read_to_string(src).with_context(|| format!("reading {}", src.display()))?;
    let assembled = assemble(&text).with_context(|| format!("assembling {}", src.display()))?;
    fs::write(out, &assembled.image).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = labels {
        fs::write(path, assembled.label_map())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{} bytes, {} labels", assembled.image.len(), assembled.labels.len());
    Ok(0)
}

fn cmd_disasm(image: &Path) -> Result<i32> {
    let bytes = read_file(image)?;
    let text = disassemble(&bytes).with_context(|| format!("decoding {}", image.display()))?;
    print!("{text}");
    Ok(0)
}

fn cmd_run(
    image_path: &Path,
    model_path: Option<&Path>,
    input_path: Option<&Path>,
    interval: u64,
    limits: &ExecLimits,
) -> Result<i32> {
    let image = read_file(image_path)?;
    let input = match input_path {
        Some(p) => read_file(p)?,
        None => Vec::new(),
    };
    // Plain runs never end on input exhaustion: drained reads return 0.
    let channel = InputChannel::new(input, ExhaustPolicy::Zeros);
    let (model, strategy, stub) = match model_path {
        Some(p) => {
            let mf = modelstore::load_for_image(p, &image)?;
            (mf.model, FiringStrategy::RoundRobin, false)
        }
        None => (RegModel::new(), FiringStrategy::None, true),
    };
    let mut exec = Execution::new(&image, model, IrqState::new(interval), strategy, channel)?;
    exec.bus.stub = stub;
    let verdict = exec.run_to_verdict(limits);
    println!("verdict {}", verdict.name());
    match &verdict {
        RunVerdict::Crash(f) => {
            println!("fault {} pc {:#010x} addr {:#010x}", f.kind.name(), f.pc, f.addr)
        }
        RunVerdict::ModelMiss(ctx) => println!("context {}", ctx_fields(ctx)),
        _ => {}
    }
    println!("markers {}", String::from_utf8_lossy(exec.markers()));
    println!("blocks {}", exec.bus.blocks.len());
    println!("insns {}", exec.machine.insn_count);
    Ok(if verdict == RunVerdict::Ok { 0 } else { 1 })
}

fn cmd_instantiate(image_path: &Path, out_dir: &Path, cfg: InstantiateConfig) -> Result<i32> {
    let image = read_file(image_path)?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let seed = cfg.seed;
    let runs_budget = cfg.runs_budget;

    let started = Instant::now();
    let mut session = InstantiateSession::new(&image, cfg)?;
    let mut rounds_log = String::new();
    let mut explore_log = String::new();
    let mut prev_model = RegModel::new();
    let mut rounds_seen = 0usize;
    let mut explorations_seen = 0usize;

    let failure = loop {
        if session.stable() || session.runs >= runs_budget {
            break None;
        }
        let result = session.run_once();
        for rec in &session.explorations[explorations_seen..] {
            explore_log.push_str(&explore_block(rec));
        }
        explorations_seen = session.explorations.len();
        while rounds_seen < session.round_log.len() {
            let entry = &session.round_log[rounds_seen];
            let diff = diff_models(&prev_model, &session.model);
            rounds_log.push_str(&round_block(entry, &diff, &session.model));
            prev_model = session.model.clone();
            rounds_seen += 1;
        }
        if let Err(e) = result {
            break Some(e);
        }
    };
    let elapsed = started.elapsed();

    let mf = ModelFile::new(&image, seed, session.model.clone(), session.irq_events.clone());
    modelstore::save(&mf, &out_dir.join(MODEL_FILE))?;
    fs::write(out_dir.join(ROUNDS_FILE), &rounds_log)?;
    fs::write(out_dir.join(EXPLORE_FILE), &explore_log)?;
    write_kv(
        &out_dir.join(STATS_FILE),
        &[
            ("firmware", format!("{:#018x}", mf.firmware)),
            ("seed", seed.to_string()),
            ("runs", session.runs.to_string()),
            ("rounds", session.rounds.to_string()),
            ("explorations", session.explorations.len().to_string()),
            ("peripherals", session.model.peripheral_count().to_string()),
            ("registers", session.model.records().count().to_string()),
            ("sr_handlers", session.model.handler_count().to_string()),
            ("sr_groups", sr_group_count(&session.model).to_string()),
            ("stable", session.stable().to_string()),
        ],
    )?;
    write_kv(
        &out_dir.join(TIMING_FILE),
        &[
            ("elapsed_ms", elapsed.as_millis().to_string()),
            (
                "runs_per_sec",
                format!("{:.2}", session.runs as f64 / elapsed.as_secs_f64().max(1e-9)),
            ),
        ],
    )?;

    if let Some(err) = failure {
        match err {
            InstantiateError::Explore(ExploreError::NoQualifiedCandidate(ctx)) => {
                println!("no qualified candidate: {}", ctx_fields(&ctx));
                return Ok(1);
            }
            other => return Err(other.into()),
        }
    }
    println!(
        "runs {}  rounds {}  explorations {}  registers {}  stable {}",
        session.runs,
        session.rounds,
        session.explorations.len(),
        session.model.records().count(),
        session.stable()
    );
    println!("model written to {}", out_dir.join(MODEL_FILE).display());
    if session.stable() {
        Ok(0)
    } else {
        println!("model not stable after {} runs", session.runs);
        Ok(1)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuzz(
    image_path: &Path,
    model_path: &Path,
    seeds_dir: Option<&Path>,
    input_dir: Option<&Path>,
    out_dir: &Path,
    seed: u64,
    execs: u64,
    jobs: u32,
    interval: u64,
    limits: &ExecLimits,
) -> Result<i32> {
    let image = read_file(image_path)?;
    let mf = modelstore::load_for_image(model_path, &image)?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let (outcome, mode, input_count, elapsed) = match input_dir {
        Some(dir) => {
            let inputs = read_input_dir(dir)?;
            if inputs.is_empty() {
                bail!("replay directory {} contains no input files", dir.display());
            }
            let started = Instant::now();
            let outcome = replay(&image, &mf.model, &inputs, interval, limits)?;
            (outcome, "replay", inputs.len(), started.elapsed())
        }
        None => {
            let dir = seeds_dir.expect("clap enforces --seeds without --input-dir");
            let seeds = read_input_dir(dir)?;
            if seeds.is_empty() {
                bail!("seed directory {} contains no input files", dir.display());
            }
            let config = FuzzConfig {
                execs,
                seed,
                jobs,
                limits: *limits,
                irq_interval: interval,
                strategy: FiringStrategy::RoundRobin,
            };
            let started = Instant::now();
            let outcome = fuzz_loop(&image, &mf.model, &seeds, &config)?;
            (outcome, "mutate", seeds.len(), started.elapsed())
        }
    };

    let mut stats: Vec<(String, String)> = vec![
        ("firmware".into(), format!("{:#018x}", mf.firmware)),
        ("mode".into(), mode.into()),
        ("seed".into(), seed.to_string()),
        ("jobs".into(), jobs.to_string()),
        ("inputs".into(), input_count.to_string()),
        ("execs".into(), outcome.execs.to_string()),
        ("coverage_hash".into(), format!("{:#018x}", outcome.coverage.hash())),
        ("blocks".into(), outcome.blocks.len().to_string()),
        ("edges".into(), outcome.coverage.nonzero_count().to_string()),
        ("queue".into(), outcome.queue.len().to_string()),
        ("buckets".into(), outcome.buckets.len().to_string()),
        (
            "first_crash_exec".into(),
            outcome.first_crash_exec.map_or_else(|| "none".into(), |n| n.to_string()),
        ),
    ];
    for (kind, count) in &outcome.verdict_counts {
        stats.push((format!("verdict_{kind}"), count.to_string()));
    }
    write_kv(&out_dir.join(FUZZ_STATS_FILE), &stats)?;

    let crash_dir = out_dir.join(CRASH_DIR);
    if !outcome.buckets.is_empty() {
        fs::create_dir_all(&crash_dir)?;
    }
    for ((kind, pc), art) in &outcome.buckets {
        let base = format!("{kind}-{pc:#010x}");
        fs::write(crash_dir.join(format!("{base}.bin")), &art.input)?;
        write_kv(
            &crash_dir.join(format!("{base}.txt")),
            &[
                ("kind", kind.to_string()),
                ("pc", format!("{pc:#010x}")),
                ("addr", format!("{:#010x}", art.fault_addr)),
                ("verdict", art.report.verdict.name().to_string()),
                ("bb_executed", art.report.bb_executed.to_string()),
                ("insn_executed", art.report.insn_executed.to_string()),
                ("new_edges", art.report.new_edges.to_string()),
                ("input_ref", art.report.input_ref.to_string()),
                ("input_len", art.input.len().to_string()),
            ],
        )?;
    }
    write_kv(
        &out_dir.join(TIMING_FILE),
        &[
            ("elapsed_ms", elapsed.as_millis().to_string()),
            (
                "execs_per_sec",
                format!("{:.2}", outcome.execs as f64 / elapsed.as_secs_f64().max(1e-9)),
            ),
        ],
    )?;

    println!(
        "execs {}  blocks {}  edges {}  queue {}  crash/hang buckets {}",
        outcome.execs,
        outcome.blocks.len(),
        outcome.coverage.nonzero_count(),
        outcome.queue.len(),
        outcome.buckets.len()
    );
    for ((kind, pc), art) in &outcome.buckets {
        println!("bucket {} pc {:#010x} addr {:#010x}", kind, pc, art.fault_addr);
    }
    Ok(0)
}

/// Replay externally supplied inputs through the harness: same per-run
/// mechanics as the fuzz loop (end-of-input ends the run, crashes and
/// hangs bucket by (kind, pc)), no mutation.
fn replay(
    image: &[u8],
    model: &RegModel,
    inputs: &[Vec<u8>],
    interval: u64,
    limits: &ExecLimits,
) -> Result<FuzzOutcome> {
    let mut coverage = CoverageMap::new();
    let mut blocks = BTreeSet::new();
    let mut queue = Vec::new();
    let mut buckets = BTreeMap::new();
    let mut verdict_counts: BTreeMap<&'static str, u64> = BTreeMap::new();
    let mut first_crash_exec = None;
    for (index, input) in inputs.iter().enumerate() {
        let mut exec = Execution::new(
            image,
            model.clone(),
            IrqState::new(interval),
            FiringStrategy::RoundRobin,
            InputChannel::new(input.clone(), ExhaustPolicy::EndRun),
        )?;
        let verdict = exec.run_to_verdict(limits);
        let new_edges = exec.bus.coverage.new_edges_vs(&coverage);
        coverage.merge_from(&exec.bus.coverage);
        blocks.extend(exec.bus.blocks.iter().copied());
        *verdict_counts.entry(verdict.name()).or_insert(0) += 1;
        let report = FuzzRunReport {
            verdict,
            bb_executed: exec.machine.bb_count,
            insn_executed: exec.machine.insn_count,
            new_edges,
            input_ref: index as u64,
        };
        match verdict {
            RunVerdict::Crash(f) => {
                first_crash_exec.get_or_insert(index as u64);
                buckets.entry((f.kind.name(), f.pc)).or_insert(perifuzz::fuzz::CrashArtifact {
                    input: input.clone(),
                    report,
                    fault_addr: f.addr,
                });
            }
            RunVerdict::Hang => {
                buckets.entry(("hang", exec.machine.pc())).or_insert(
                    perifuzz::fuzz::CrashArtifact {
                        input: input.clone(),
                        report,
                        fault_addr: 0,
                    },
                );
            }
            _ => {
                if new_edges > 0 {
                    queue.push(input.clone());
                }
            }
        }
    }
    Ok(FuzzOutcome {
        execs: inputs.len() as u64,
        coverage,
        blocks,
        queue,
        buckets,
        verdict_counts,
        first_crash_exec,
    })
}

fn cmd_compare(
    image_path: &Path,
    model_a: &str,
    model_b: &str,
    inputs_dir: &Path,
    out_dir: Option<&Path>,
    interval: u64,
    limits: &ExecLimits,
) -> Result<i32> {
    let image = read_file(image_path)?;
    let load_side = |spec: &str| -> Result<(Option<RegModel>, String)> {
        if spec == "stub" {
            return Ok((None, "stub".to_string()));
        }
        let mf = modelstore::load_for_image(Path::new(spec), &image)?;
        let label = format!("{:#018x}", mf.model.digest());
        Ok((Some(mf.model), label))
    };
    let (a, label_a) = load_side(model_a)?;
    let (b, label_b) = load_side(model_b)?;
    let inputs = read_input_dir(inputs_dir)?;
    if inputs.is_empty() {
        bail!("input directory {} contains no input files", inputs_dir.display());
    }
    let (blocks_a, blocks_b, ratio) =
        coverage_compare(&image, a.as_ref(), b.as_ref(), &inputs, limits, interval)?;
    let lines = [
        ("image", format!("{:#018x}", fnv1a(&image))),
        ("model_a", label_a),
        ("model_b", label_b),
        ("inputs", inputs.len().to_string()),
        ("blocks_a", blocks_a.to_string()),
        ("blocks_b", blocks_b.to_string()),
        ("ratio", format!("{ratio:.2}")),
    ];
    for (k, v) in &lines {
        println!("{k} {v}");
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_kv(&dir.join(COMPARE_FILE), &lines)?;
    }
    Ok(0)
}

fn cmd_report(session: &Path, csv: Option<&Path>) -> Result<i32> {
    let tables = report::collect(session)?;
    print!("{}", report::render_text(&tables));
    if let Some(dir) = csv {
        report::write_csv(&tables, dir)?;
    }
    Ok(0)
}

fn cmd_model_show(file: &Path, raw: bool) -> Result<i32> {
    let mf = modelstore::load(file)?;
    if raw {
        print!("{}", modelstore::render(&mf));
        return Ok(0);
    }
    println!(
        "firmware {:#018x}  seed {}  format {}",
        mf.firmware, mf.session_seed, mf.format_version
    );
    let mut handler_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (ctx, _) in mf.model.handlers() {
        *handler_counts.entry(ctx.addr).or_insert(0) += 1;
    }
    let mut rows = vec![vec![
        "addr".to_string(),
        "category".to_string(),
        "locked".to_string(),
        "peripheral".to_string(),
        "stored".to_string(),
        "cr_bitmask".to_string(),
        "handlers".to_string(),
    ]];
    for r in mf.model.records() {
        rows.push(vec![
            format!("{:#010x}", r.addr),
            r.category.token().to_string(),
            if r.locked { "yes".into() } else { "no".into() },
            format!("{:#010x}", r.peripheral()),
            format!("{:#010x}", r.stored),
            format!("{:#010x}", r.cr_bitmask),
            handler_counts.get(&r.addr).copied().unwrap_or(0).to_string(),
        ]);
    }
    println!("\nregisters");
    print!("{}", report::render_aligned(&rows));

    if mf.model.handler_count() > 0 {
        println!("\nsr handlers");
        for (ctx, value) in mf.model.handlers() {
            println!("{} value {:#010x}", ctx_fields(&ctx), value);
        }
    }
    if !mf.model.tie_breaks().is_empty() {
        println!("\ntie breaks");
        for tb in mf.model.tie_breaks() {
            println!("{} draw {:#018x} chosen {:#010x}", ctx_fields(&tb.ctx), tb.draw, tb.chosen);
        }
    }
    if !mf.interrupt_log.is_empty() {
        println!("\ninterrupt log");
        for ev in &mf.interrupt_log {
            println!("{}", irq_event_line(ev));
        }
    }
    println!(
        "\n{} registers, {} peripherals, {} sr handlers",
        mf.model.records().count(),
        mf.model.peripheral_count(),
        mf.model.handler_count()
    );
    Ok(0)
}

fn cmd_model_diff(a: &Path, b: &Path) -> Result<i32> {
    let ma = modelstore::load(a)?;
    let mb = modelstore::load(b)?;
    let diff = modelstore::diff(&ma, &mb)?;
    if diff.is_empty() {
        println!("models identical");
        return Ok(0);
    }
    for line in diff_lines(&diff, Some(&mb.model)) {
        println!("{line}");
    }
    Ok(1)
}

fn cmd_corpus_check(dir: &Path, seed: u64, mutated: usize, out: Option<&Path>) -> Result<i32> {
    let entries = corpus::load_dir(dir)?;
    let opts = CheckOptions { seed, mutated_runs: mutated, ..CheckOptions::default() };
    let report = corpus::check(&entries, &opts);

    let mut rows = vec![vec![
        "firmware".to_string(),
        "class".to_string(),
        "peripherals".to_string(),
        "registers".to_string(),
        "read".to_string(),
        "accuracy".to_string(),
        "sr_handlers".to_string(),
        "explorations".to_string(),
        "rounds".to_string(),
        "runs".to_string(),
        "markers".to_string(),
        "status".to_string(),
    ]];
    let mut records = String::new();
    for row in &report.rows {
        let markers =
            if row.markers_zero_input.is_empty() { "-" } else { row.markers_zero_input.as_str() };
        let status = if row.passed() { "pass" } else { "fail" };
        rows.push(vec![
            row.name.clone(),
            row.class.token().to_string(),
            row.peripherals.to_string(),
            row.regs_total.to_string(),
            row.regs_read.to_string(),
            format!("{:.2}", row.accuracy_pct),
            row.sr_handlers.to_string(),
            row.explorations.to_string(),
            row.rounds.to_string(),
            row.runs.to_string(),
            markers.to_string(),
            status.to_string(),
        ]);
        records.push_str(&format!(
            "firmware {} class {} peripherals {} registers {} read {} accuracy {:.2} \
             sr_handlers {} explorations {} rounds {} runs {} markers {} status {}\n",
            row.name,
            row.class.token(),
            row.peripherals,
            row.regs_total,
            row.regs_read,
            row.accuracy_pct,
            row.sr_handlers,
            row.explorations,
            row.rounds,
            row.runs,
            markers,
            status
        ));
    }
    print!("{}", report::render_aligned(&rows));
    for (name, what) in report.deviations() {
        println!("deviation {name}: {what}");
    }
    if let Some(path) = out {
        fs::write(path, &records).with_context(|| format!("writing {}", path.display()))?;
    }
    if report.passed() {
        println!("corpus check: all {} firmware match expectations", report.rows.len());
        Ok(0)
    } else {
        let failed = report.rows.iter().filter(|r| !r.passed()).count();
        println!(
            "corpus check: {failed} of {} firmware deviate from expectations",
            report.rows.len()
        );
        Ok(1)
    }
}
