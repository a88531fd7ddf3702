//! Hardware-independent firmware execution and fuzzing.
//!
//! The crate boots unmodified firmware images for a small 32-bit MCU-style
//! ISA on a peripheral-agnostic emulator. Instead of modeling any specific
//! peripheral, MMIO registers are categorized on the fly from how the
//! firmware accesses them (control / status / data / mixed), status-register
//! values are found by explorative execution, data registers are wired to a
//! fuzzer's input stream, and interrupts are fired round-robin so handler
//! code runs too. The resulting register model can be saved, diffed, and
//! reused across runs.
//!
//! Module tour:
//!
//! - [`isa`] / [`asm`]: instruction set, assembler, disassembler.
//! - [`machine`]: the deterministic interpreter with memory protection,
//!   taint tracking, interrupts, and faults-as-values.
//! - [`regmodel`]: MMIO register categorization state machine.
//! - [`irq`]: interrupt enable state and firing strategies.
//! - [`exec`]: glues machine + model + interrupts into whole-firmware runs.
//! - [`explore`]: explorative execution for status-register values and the
//!   multi-run instantiation driver.
//! - [`fuzz`]: input channel, coverage map, mutators, fuzzing loop.
//! - [`modelstore`]: text serialization of learned models.
//! - [`corpus`]: test-firmware manifest handling and conformance checks.

pub mod asm;
pub mod corpus;
pub mod exec;
pub mod explore;
pub mod fuzz;
pub mod hash;
pub mod irq;
pub mod isa;
pub mod machine;
pub mod modelstore;
pub mod regmodel;
