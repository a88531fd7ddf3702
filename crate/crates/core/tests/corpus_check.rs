//! Whole-corpus conformance check against the manifest: categorization
//! accuracy, liveness under zero/random/mutated input, marker sequences,
//! and interrupt-schedule expectations, all in one pass.

use std::path::PathBuf;

use perifuzz::asm::assemble;
use perifuzz::corpus::{check, load_dir, CheckOptions, ConformanceClass};
use perifuzz::hash::fnv1a;

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

#[test]
fn corpus_composition() {
    let entries = load_dir(&corpus_dir()).expect("corpus builds");
    assert!(entries.len() >= 10, "only {} firmware in corpus", entries.len());
    let count = |c: ConformanceClass| entries.iter().filter(|e| e.spec.class == c).count();
    assert!(count(ConformanceClass::Conforming) >= 8);
    assert_eq!(count(ConformanceClass::Type1NonConforming), 1);
    assert_eq!(count(ConformanceClass::Type2NonConforming), 1);
    assert_eq!(count(ConformanceClass::IrqMultiplexed), 1);
    assert_eq!(entries.iter().filter(|e| e.spec.bug.is_some()).count(), 1);
    // Planted-bug firmware must resolve its faulting-store label.
    let bugged = entries.iter().find(|e| e.spec.bug.is_some()).unwrap();
    assert!(bugged.bug_site().is_some());
}

#[test]
fn corpus_matches_manifest_expectations() {
    let entries = load_dir(&corpus_dir()).expect("corpus builds");
    let report = check(&entries, &CheckOptions::default());
    for (name, deviation) in report.deviations() {
        eprintln!("{name}: {deviation}");
    }
    assert!(report.passed());
}

/// Maintenance helper, not a test of anything: prints the pinned `image`
/// manifest lines for every source in the corpus directory. Run with
/// `--ignored --nocapture` after editing a source, then paste.
#[test]
#[ignore]
fn regen_manifest_hashes() {
    let dir = corpus_dir();
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.ends_with(".s").then_some(name)
        })
        .collect();
    names.sort();
    for name in names {
        let src = std::fs::read_to_string(dir.join(&name)).unwrap();
        match assemble(&src) {
            Ok(out) => println!("{name}: image 0x{:016x}", fnv1a(&out.image)),
            Err(e) => println!("{name}: DOES NOT ASSEMBLE: {e}"),
        }
    }
}

/// Maintenance helper: prints stub-vs-instantiated block-coverage ratios for
/// every conforming firmware that gates on a status register, over a fixed
/// seeded input set. Used to pin the per-firmware floors asserted elsewhere.
#[test]
#[ignore]
fn measure_coverage_ratios() {
    use perifuzz::exec::ExecLimits;
    use perifuzz::explore::{instantiate, InstantiateConfig};
    use perifuzz::fuzz::coverage_compare;
    use perifuzz::hash::SplitMix64;
    use perifuzz::irq::DEFAULT_IRQ_INTERVAL;
    use perifuzz::regmodel::RegCategory;

    let entries = load_dir(&corpus_dir()).unwrap();
    let inputs: Vec<Vec<u8>> = (0..20)
        .map(|i| {
            let mut buf = vec![0u8; 4096];
            SplitMix64::derive(1, "coverage-ratio", i).fill(&mut buf);
            buf
        })
        .collect();
    let limits = ExecLimits::default();
    for entry in &entries {
        if entry.spec.class != ConformanceClass::Conforming {
            continue;
        }
        if !entry
            .spec
            .truth
            .values()
            .any(|c| *c == RegCategory::Status)
        {
            continue;
        }
        let session = instantiate(&entry.image, InstantiateConfig::default()).unwrap();
        let (stub, modeled, ratio) = coverage_compare(
            &entry.image,
            None,
            Some(&session.model),
            &inputs,
            &limits,
            DEFAULT_IRQ_INTERVAL,
        )
        .unwrap();
        println!(
            "{:<14} stub {:>3}  instantiated {:>3}  ratio {:.2}",
            entry.spec.name, stub, modeled, ratio
        );
    }
}
