//! End-to-end checks of the command-line surface: every subcommand, the
//! artifact layout, byte-reproducibility of session outputs, and the exit
//! code contract (0 ok, 1 expected deviation, 2 usage or IO error).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn perifuzz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perifuzz")).args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[track_caller]
fn assert_code(out: &Output, want: i32) {
    let code = out.status.code().expect("exit code");
    assert_eq!(
        code,
        want,
        "exit {code}, want {want}\nstdout:\n{}stderr:\n{}",
        stdout_of(out),
        stderr_of(out)
    );
}

fn corpus_src(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../corpus")
        .join(name)
        .to_str()
        .expect("utf-8 path")
        .to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Assemble `src` (a path) into `dir/<name>`, asserting success.
fn asm(dir: &Path, src: &str, name: &str) -> PathBuf {
    let img = dir.join(name);
    let out = perifuzz(&["asm", "--src", src, "--out", p(&img)]);
    assert_code(&out, 0);
    img
}

/// Instantiate a model session into `dir/<name>`, asserting stability.
fn instantiate(dir: &Path, image: &Path, name: &str) -> PathBuf {
    let session = dir.join(name);
    let out = perifuzz(&["instantiate", "--image", p(image), "--out", p(&session)]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("stable true"), "session did not stabilize");
    session
}

/// Minimal well-formed firmware: two debug markers, then halt.
const OK_SRC: &str = "\
; Two debug markers and a halt; no peripheral traffic.
.equ DEBUG, 0xE0000000

        .org 0
        .word 0x20010000
        .word start

start:
        LDI  r10, #%lo(DEBUG)
        LUI  r10, #%hi(DEBUG)
        LDI  r11, #'B'
        STB  r11, [r10, #0]
        LDI  r11, #'E'
        STB  r11, [r10, #0]
        HALT
";

/// Firmware whose first block stores one byte past the top of RAM.
const CRASH_SRC: &str = "\
.equ BAD, 0x20010000

        .org 0
        .word 0x20010000
        .word start

start:
        LDI  r1, #%lo(BAD)
        LUI  r1, #%hi(BAD)
        LDI  r2, #1
        STB  r2, [r1, #0]
        HALT
";

#[test]
fn assemble_disassemble_round_trip() {
    let tmp = TempDir::new().unwrap();
    let labels = tmp.path().join("labels.txt");
    let img = tmp.path().join("usart.img");
    let out = perifuzz(&[
        "asm",
        "--src",
        &corpus_src("usart_rx.s"),
        "--out",
        p(&img),
        "--labels",
        p(&labels),
    ]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("bytes"), "asm reports image size");
    assert!(fs::read_to_string(&labels).unwrap().contains("start"), "label map names start");

    let dis = perifuzz(&["disasm", "--image", p(&img)]);
    assert_code(&dis, 0);
    let listing = tmp.path().join("listing.s");
    fs::write(&listing, stdout_of(&dis)).unwrap();
    let img2 = asm(tmp.path(), p(&listing), "usart2.img");
    assert_eq!(fs::read(&img).unwrap(), fs::read(&img2).unwrap(), "listing reassembles");
}

#[test]
fn bare_runs_report_verdicts_and_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let ok_src = tmp.path().join("ok.s");
    let crash_src = tmp.path().join("crash.s");
    fs::write(&ok_src, OK_SRC).unwrap();
    fs::write(&crash_src, CRASH_SRC).unwrap();
    let ok_img = asm(tmp.path(), p(&ok_src), "ok.img");
    let crash_img = asm(tmp.path(), p(&crash_src), "crash.img");

    let out = perifuzz(&["run", "--image", p(&ok_img)]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("verdict ok"), "clean run verdict:\n{text}");
    assert!(text.contains("markers BE"), "marker trace:\n{text}");

    let out = perifuzz(&["run", "--image", p(&crash_img)]);
    assert_code(&out, 1);
    let text = stdout_of(&out);
    assert!(text.contains("verdict crash"), "crash verdict:\n{text}");
    assert!(text.contains("fault mem_perm"), "fault kind:\n{text}");
    assert!(text.contains("addr 0x20010000"), "fault address:\n{text}");
}

#[test]
fn instantiate_outputs_are_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let img = asm(tmp.path(), &corpus_src("usart_rx.s"), "usart.img");
    let s1 = instantiate(tmp.path(), &img, "s1");
    let s2 = instantiate(tmp.path(), &img, "s2");

    // Everything except the wall-clock record must match byte for byte.
    for name in ["model.txt", "stats.txt", "rounds.log", "explore.log"] {
        let a = fs::read(s1.join(name)).unwrap();
        let b = fs::read(s2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical sessions");
    }
    assert!(s1.join("timing.txt").is_file());

    // The built model carries the firmware to a clean halt.
    let model = s1.join("model.txt");
    let out = perifuzz(&["run", "--image", p(&img), "--model", p(&model)]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("verdict ok"));
}

#[test]
fn fuzz_smoke_replay_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let img = asm(tmp.path(), &corpus_src("usart_rx.s"), "usart.img");
    let session = instantiate(tmp.path(), &img, "session");
    let model = session.join("model.txt");

    let seeds = tmp.path().join("seeds");
    fs::create_dir(&seeds).unwrap();
    fs::write(seeds.join("seed0"), [0x41u8; 64]).unwrap();

    let fuzz = |out_name: &str| {
        let out_dir = tmp.path().join(out_name);
        let out = perifuzz(&[
            "fuzz",
            "--image",
            p(&img),
            "--model",
            p(&model),
            "--seeds",
            p(&seeds),
            "--out",
            p(&out_dir),
            "--execs",
            "300",
        ]);
        assert_code(&out, 0);
        assert!(stdout_of(&out).contains("execs 300"), "all executions ran");
        out_dir
    };
    let f1 = fuzz("f1");
    let f2 = fuzz("f2");
    let stats = fs::read_to_string(f1.join("fuzz_stats.txt")).unwrap();
    assert!(stats.contains("mode mutate"));
    assert!(stats.contains("execs 300"));
    assert_eq!(
        stats,
        fs::read_to_string(f2.join("fuzz_stats.txt")).unwrap(),
        "same seed, different campaign statistics"
    );
    assert!(!f1.join("crashes").exists(), "clean firmware produced crash artifacts");

    // Replay mode: one run per input file, no mutation.
    let inputs = tmp.path().join("inputs");
    fs::create_dir(&inputs).unwrap();
    fs::write(inputs.join("a"), [0u8; 32]).unwrap();
    fs::write(inputs.join("b"), [0xffu8; 32]).unwrap();
    let rdir = tmp.path().join("replay");
    let out = perifuzz(&[
        "fuzz",
        "--image",
        p(&img),
        "--model",
        p(&model),
        "--input-dir",
        p(&inputs),
        "--out",
        p(&rdir),
    ]);
    assert_code(&out, 0);
    let stats = fs::read_to_string(rdir.join("fuzz_stats.txt")).unwrap();
    assert!(stats.contains("mode replay"));
    assert!(stats.contains("execs 2"));
}

#[test]
fn compare_reports_model_gain() {
    let tmp = TempDir::new().unwrap();
    let img = asm(tmp.path(), &corpus_src("usart_rx.s"), "usart.img");
    let session = instantiate(tmp.path(), &img, "session");
    let model = session.join("model.txt");

    let inputs = tmp.path().join("inputs");
    fs::create_dir(&inputs).unwrap();
    for i in 0..3u8 {
        fs::write(inputs.join(format!("in{i}")), [i.wrapping_mul(37); 256]).unwrap();
    }
    let out = perifuzz(&[
        "compare",
        "--image",
        p(&img),
        "--model-a",
        "stub",
        "--model-b",
        p(&model),
        "--inputs",
        p(&inputs),
        "--out",
        p(&session),
    ]);
    assert_code(&out, 0);
    let text = fs::read_to_string(session.join("compare.txt")).unwrap();
    let field = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap_or_else(|| panic!("{key} missing from compare.txt:\n{text}"))
            .trim()
            .parse()
            .expect("numeric field")
    };
    assert!(field("blocks_b ") > field("blocks_a "), "model did not widen coverage:\n{text}");
    assert!(field("ratio ") > 1.0);
}

#[test]
fn report_tables_and_csv() {
    let tmp = TempDir::new().unwrap();
    let img = asm(tmp.path(), &corpus_src("usart_rx.s"), "usart.img");
    let root = tmp.path().join("sessions");
    fs::create_dir(&root).unwrap();
    let session = instantiate(&root, &img, "usart_rx");
    let model = session.join("model.txt");

    // Add fuzzing artifacts so the report covers both tables.
    let seeds = tmp.path().join("seeds");
    fs::create_dir(&seeds).unwrap();
    fs::write(seeds.join("seed0"), [0x41u8; 64]).unwrap();
    let out = perifuzz(&[
        "fuzz",
        "--image",
        p(&img),
        "--model",
        p(&model),
        "--seeds",
        p(&seeds),
        "--out",
        p(&session),
        "--execs",
        "200",
    ]);
    assert_code(&out, 0);

    let csv1 = tmp.path().join("csv1");
    let out = perifuzz(&["report", "--session", p(&root), "--csv", p(&csv1)]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("model instantiation"), "report header:\n{text}");
    assert!(text.contains("usart_rx"), "session row:\n{text}");

    let inst = fs::read_to_string(csv1.join("instantiation.csv")).unwrap();
    assert!(inst.lines().any(|l| l.starts_with("usart_rx,")), "csv row:\n{inst}");
    let fuzz = fs::read_to_string(csv1.join("fuzzing.csv")).unwrap();
    assert!(fuzz.lines().any(|l| l.starts_with("usart_rx,200,")), "fuzz row:\n{fuzz}");
    let prog = fs::read_to_string(csv1.join("progression.csv")).unwrap();
    assert!(prog.lines().count() > 1, "round progression rows:\n{prog}");

    // Re-rendering the same session directory is byte-stable.
    let csv2 = tmp.path().join("csv2");
    assert_code(&perifuzz(&["report", "--session", p(&root), "--csv", p(&csv2)]), 0);
    for name in ["instantiation.csv", "fuzzing.csv", "progression.csv"] {
        assert_eq!(
            fs::read(csv1.join(name)).unwrap(),
            fs::read(csv2.join(name)).unwrap(),
            "{name} not byte-stable"
        );
    }

    // A directory without artifacts is a usage error.
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = perifuzz(&["report", "--session", p(&empty)]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("missing artifacts"));
}

#[test]
fn model_show_and_diff() {
    let tmp = TempDir::new().unwrap();
    let usart_img = asm(tmp.path(), &corpus_src("usart_rx.s"), "usart.img");
    let gpio_img = asm(tmp.path(), &corpus_src("gpio_pin.s"), "gpio.img");
    let usart_model = instantiate(tmp.path(), &usart_img, "usart").join("model.txt");
    let gpio_model = instantiate(tmp.path(), &gpio_img, "gpio").join("model.txt");

    // Raw mode echoes the canonical file bytes.
    let out = perifuzz(&["model", "show", "--file", p(&usart_model), "--raw"]);
    assert_code(&out, 0);
    assert_eq!(out.stdout, fs::read(&usart_model).unwrap());

    let out = perifuzz(&["model", "show", "--file", p(&usart_model)]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("registers"), "register table:\n{text}");
    assert!(text.contains("sr handlers"), "handler section:\n{text}");

    let out = perifuzz(&["model", "diff", "--a", p(&usart_model), "--b", p(&usart_model)]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("models identical"));

    // Models of different firmware do not compare.
    let out = perifuzz(&["model", "diff", "--a", p(&usart_model), "--b", p(&gpio_model)]);
    assert_code(&out, 2);
}

#[test]
fn corpus_check_matches_manifest() {
    let tmp = TempDir::new().unwrap();
    let records = tmp.path().join("corpus_check.txt");
    let dir = corpus_src("");
    let out = perifuzz(&[
        "corpus-check",
        "--dir",
        dir.trim_end_matches('/'),
        "--mutated",
        "10",
        "--out",
        p(&records),
    ]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("firmware match expectations"), "summary line:\n{text}");
    let records = fs::read_to_string(&records).unwrap();
    let lines: Vec<&str> = records.lines().collect();
    assert!(lines.len() >= 13, "one record per firmware:\n{records}");
    assert!(lines.iter().all(|l| l.ends_with("status pass")), "all pass:\n{records}");
}

#[test]
fn usage_and_io_errors_exit_2() {
    let tmp = TempDir::new().unwrap();

    // Missing required argument (clap).
    assert_code(&perifuzz(&["run"]), 2);

    // Nonexistent input file.
    let out = perifuzz(&["disasm", "--image", p(&tmp.path().join("nope.img"))]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("error:"));

    // Malformed assembly names the offending line.
    let bad = tmp.path().join("bad.s");
    fs::write(&bad, "        FROB r1, #2\n").unwrap();
    let out = perifuzz(&["asm", "--src", p(&bad), "--out", p(&tmp.path().join("bad.img"))]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("line 1"), "stderr:\n{}", stderr_of(&out));

    // Empty seed directory.
    let img = asm(tmp.path(), &corpus_src("usart_rx.s"), "usart.img");
    let session = instantiate(tmp.path(), &img, "session");
    let model = session.join("model.txt");
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = perifuzz(&[
        "fuzz",
        "--image",
        p(&img),
        "--model",
        p(&model),
        "--seeds",
        p(&empty),
        "--out",
        p(&tmp.path().join("f")),
    ]);
    assert_code(&out, 2);

    // Model built for different firmware.
    let gpio_img = asm(tmp.path(), &corpus_src("gpio_pin.s"), "gpio.img");
    let out = perifuzz(&["run", "--image", p(&gpio_img), "--model", p(&model)]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).to_lowercase().contains("firmware"), "mismatch is named");
}
