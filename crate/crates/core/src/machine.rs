//! Deterministic CPU interpreter and memory system.
//!
//! Memory map:
//!
//! ```text
//!   0x0000_0000 .. 0x0010_0000   flash, R+X (image, zero-filled to 1 MiB)
//!   0x2000_0000 .. 0x2001_0000   RAM, R+W (64 KiB)
//!   0x4000_0000 .. 0x6000_0000   MMIO, reads/writes routed to the bus
//!   0xE000_0000                  debug write port (byte sink)
//!   0xE000_E000 .. 0xE000_F000   system control space, routed to the bus
//!   everything else              no access
//! ```
//!
//! Any word access must be 4-byte aligned. Permission violations,
//! undecodable words, bad interrupt vectors, and shadow-stack mismatches
//! all surface as [`Fault`]s rather than panics, so a fuzzing harness can
//! treat them as run verdicts.
//!
//! The interpreter carries a light single-source taint: the destination of
//! every MMIO read is tagged with the register address it came from, tags
//! flow through ALU ops and MOV, and die on any store (memory is opaque).
//! `CMP` on a tainted operand reports a condition signal to the bus, and a
//! taken conditional branch whose flags are tainted reports a guarded
//! branch. Those two callbacks are what drive status-register inference
//! upstairs.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::hash::{fnv1a_u32, FNV_OFFSET};
use crate::isa::{self, Instr, REG_LR, REG_SP};

pub const FLASH_BASE: u32 = 0x0000_0000;
pub const FLASH_SIZE: u32 = 0x0010_0000;
pub const RAM_BASE: u32 = 0x2000_0000;
pub const RAM_SIZE: u32 = 0x0001_0000;
pub const MMIO_BASE: u32 = 0x4000_0000;
pub const MMIO_END: u32 = 0x6000_0000;
pub const SCS_BASE: u32 = 0xe000_e000;
pub const SCS_END: u32 = 0xe000_f000;
pub const DEBUG_PORT: u32 = 0xe000_0000;

/// Interrupt nesting limit; entering a ninth level is a fault.
pub const MAX_IRQ_DEPTH: u32 = 8;
pub const NUM_IRQS: u8 = 32;

/// MMIO registers are grouped into 1 KiB peripheral blocks.
pub fn peripheral_id(addr: u32) -> u32 {
    addr & !0x3ff
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FaultKind {
    /// Access to unmapped memory, a permission violation, or an unaligned
    /// word access.
    MemPerm,
    /// Undecodable instruction word, or IRET outside an ISR.
    UndefInsn,
    /// Interrupt vector entry is not a valid flash address.
    BadVector,
    /// Interrupt nesting exceeded [`MAX_IRQ_DEPTH`].
    IrqDepth,
    /// Return target disagrees with the shadow call stack.
    ShadowStack,
}

impl FaultKind {
    pub fn name(self) -> &'static str {
        match self {
            FaultKind::MemPerm => "mem_perm",
            FaultKind::UndefInsn => "undef_insn",
            FaultKind::BadVector => "bad_vector",
            FaultKind::IrqDepth => "irq_depth",
            FaultKind::ShadowStack => "shadow_stack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    /// Address of the faulting instruction.
    pub pc: u32,
    /// Data address involved, or 0 when not applicable.
    pub addr: u32,
    /// True when an operand feeding the faulting operation carried
    /// explore-candidate taint (used to classify worker failures).
    pub candidate_tainted: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("image of {0} bytes exceeds flash capacity")]
    ImageTooLarge(usize),
    #[error("malformed vector table: {0}")]
    MalformedVectorTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// One MMIO register access, as seen by the bus. Byte-wide accesses are
/// widened to their containing word-aligned register address; `lane` keeps
/// the original byte position.
#[derive(Debug, Clone, Copy)]
pub struct AccessEvent {
    pub addr: u32,
    pub kind: AccessKind,
    /// Value being written (byte writes: the raw byte). Zero for reads.
    pub value: u32,
    pub width: u8,
    pub lane: u8,
    pub pc: u32,
    /// Basic block (block start address) containing the access.
    pub bbl: u32,
    /// Call-stack signature: FNV over shadow-stack return addresses.
    pub cs: u64,
    pub frame_id: u64,
    pub insn_count: u64,
}

/// Value supplied by the bus for an MMIO read.
#[derive(Debug, Clone, Copy)]
pub struct MmioReadValue {
    pub value: u32,
    /// Marks the value as an explore-candidate injection so its taint can be
    /// told apart from ordinary MMIO taint.
    pub candidate: bool,
}

/// Everything outside the CPU proper: MMIO model, interrupt scheduler,
/// debug sink, and the taint-derived inference callbacks.
pub trait Bus {
    /// Supply a value for an MMIO read, or `None` to pause execution with
    /// the instruction not retired (the machine will re-issue the access).
    fn mmio_read(&mut self, ev: &AccessEvent) -> Option<MmioReadValue>;
    fn mmio_write(&mut self, ev: &AccessEvent);
    fn scs_read(&mut self, addr: u32) -> u32;
    fn scs_write(&mut self, addr: u32, value: u32);
    fn debug_byte(&mut self, byte: u8);
    /// CMP consumed a value tainted by the MMIO register at `src`.
    fn cond_signal(&mut self, src: u32, candidate: bool);
    /// A conditional branch guarded by `src`-tainted flags was taken.
    fn guarded_branch_taken(&mut self, src: u32, frame_id: u64);
    /// A basic-block boundary was crossed. May return an IRQ to enter.
    fn block_crossed(&mut self, prev: u32, cur: u32, bb_count: u64, in_isr: u32) -> Option<u8>;
    /// WFI executed (idle hint).
    fn wfi(&mut self) {}
}

/// Bus that reads zeros and never fires interrupts; handy in tests.
pub struct NullBus;

impl Bus for NullBus {
    fn mmio_read(&mut self, _ev: &AccessEvent) -> Option<MmioReadValue> {
        Some(MmioReadValue { value: 0, candidate: false })
    }
    fn mmio_write(&mut self, _ev: &AccessEvent) {}
    fn scs_read(&mut self, _addr: u32) -> u32 {
        0
    }
    fn scs_write(&mut self, _addr: u32, _value: u32) {}
    fn debug_byte(&mut self, _byte: u8) {}
    fn cond_signal(&mut self, _src: u32, _candidate: bool) {}
    fn guarded_branch_taken(&mut self, _src: u32, _frame_id: u64) {}
    fn block_crossed(&mut self, _p: u32, _c: u32, _b: u64, _i: u32) -> Option<u8> {
        None
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub z: bool,
    pub n: bool,
    pub c: bool,
}

impl Flags {
    fn pack(self) -> u32 {
        self.z as u32 | (self.n as u32) << 1 | (self.c as u32) << 2
    }
    fn unpack(v: u32) -> Flags {
        Flags { z: v & 1 != 0, n: v & 2 != 0, c: v & 4 != 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// One instruction retired.
    Ok,
    /// HALT reached (also returned for every step after it).
    Halted,
    Fault(Fault),
    /// The bus declined an MMIO read; no state changed and the same
    /// instruction will re-execute on the next step.
    Paused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowFrame {
    pub return_address: u32,
    pub frame_id: u64,
}

/// Complete architectural + bookkeeping state of one core.
///
/// `Clone` is the snapshot primitive: flash is behind an `Arc` (it is
/// immutable after load), so cloning copies RAM, registers, and the small
/// tracking structures only, and a clone restored over the original replays
/// identically.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub regs: [u32; 16],
    pub flags: Flags,
    flash: Arc<Vec<u8>>,
    ram: Vec<u8>,
    /// 1 KiB RAM blocks written since the last pristine reset; lets a fuzz
    /// harness restore boot state without copying all of RAM.
    ram_dirty: u64,
    pub bb_count: u64,
    pub insn_count: u64,
    /// Start address of the basic block currently executing.
    pub current_block: u32,
    shadow_stack: Vec<ShadowFrame>,
    next_frame_id: u64,
    pub pending_irqs: BTreeSet<u8>,
    pub in_isr: u32,
    halted: bool,
    /// Per-register taint: source MMIO register address.
    taint_src: [Option<u32>; 16],
    /// Per-register explore-candidate taint.
    taint_cand: [bool; 16],
    flags_taint_src: Option<u32>,
    flags_taint_cand: bool,
}

impl MachineState {
    /// Load a firmware image: word 0 is the initial stack pointer, word 1
    /// the reset handler, words 2..34 the IRQ 0..31 vectors.
    pub fn load_firmware(image: &[u8]) -> Result<MachineState, LoadError> {
        if image.len() > FLASH_SIZE as usize {
            return Err(LoadError::ImageTooLarge(image.len()));
        }
        if image.len() < 8 || image.len() % 4 != 0 {
            return Err(LoadError::MalformedVectorTable(format!(
                "image of {} bytes cannot hold a vector table",
                image.len()
            )));
        }
        let sp = u32::from_le_bytes(image[0..4].try_into().unwrap());
        let reset = u32::from_le_bytes(image[4..8].try_into().unwrap());
        if reset == 0 || reset % 4 != 0 || reset >= FLASH_SIZE {
            return Err(LoadError::MalformedVectorTable(format!(
                "reset handler {reset:#x} is not a valid flash address"
            )));
        }
        let mut regs = [0u32; 16];
        regs[REG_SP as usize] = sp;
        regs[15] = reset;
        Ok(MachineState {
            regs,
            flags: Flags::default(),
            flash: Arc::new(image.to_vec()),
            ram: vec![0u8; RAM_SIZE as usize],
            ram_dirty: 0,
            bb_count: 0,
            insn_count: 0,
            current_block: reset,
            shadow_stack: Vec::new(),
            next_frame_id: 1,
            pending_irqs: BTreeSet::new(),
            in_isr: 0,
            halted: false,
            taint_src: [None; 16],
            taint_cand: [false; 16],
            flags_taint_src: None,
            flags_taint_cand: false,
        })
    }

    pub fn pc(&self) -> u32 {
        self.regs[15]
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn shadow_depth(&self) -> usize {
        self.shadow_stack.len()
    }

    pub fn shadow_stack(&self) -> &[ShadowFrame] {
        &self.shadow_stack
    }

    /// Frame id of the innermost active frame (0 = reset context).
    pub fn frame_id(&self) -> u64 {
        self.shadow_stack.last().map(|f| f.frame_id).unwrap_or(0)
    }

    /// Call-stack signature: FNV-1a over return addresses, outermost first.
    pub fn call_sig(&self) -> u64 {
        self.shadow_stack
            .iter()
            .fold(FNV_OFFSET, |h, f| fnv1a_u32(h, f.return_address))
    }

    /// Candidate-taint status of a register (explore workers use this to
    /// classify faults).
    pub fn reg_candidate_tainted(&self, r: u8) -> bool {
        self.taint_cand[r as usize]
    }

    pub fn reg_taint_src(&self, r: u8) -> Option<u32> {
        self.taint_src[r as usize]
    }

    /// Queue an interrupt request; it is entered at the next block boundary
    /// at which no ISR is active (lowest number first).
    pub fn request_irq(&mut self, irq: u8) {
        if irq < NUM_IRQS {
            self.pending_irqs.insert(irq);
        }
    }

    /// Word from flash; reads beyond the image see zero-filled flash.
    fn flash_word(&self, addr: u32) -> u32 {
        let i = addr as usize;
        if i + 4 <= self.flash.len() {
            u32::from_le_bytes(self.flash[i..i + 4].try_into().unwrap())
        } else if i < self.flash.len() {
            let mut b = [0u8; 4];
            let avail = self.flash.len() - i;
            b[..avail].copy_from_slice(&self.flash[i..]);
            u32::from_le_bytes(b)
        } else {
            0
        }
    }

    fn flash_byte(&self, addr: u32) -> u8 {
        self.flash.get(addr as usize).copied().unwrap_or(0)
    }

    pub fn ram_word(&self, addr: u32) -> Option<u32> {
        if !(RAM_BASE..RAM_BASE + RAM_SIZE).contains(&addr) || addr % 4 != 0 {
            return None;
        }
        let i = (addr - RAM_BASE) as usize;
        Some(u32::from_le_bytes(self.ram[i..i + 4].try_into().unwrap()))
    }

    fn ram_write(&mut self, addr: u32, bytes: &[u8]) {
        let i = (addr - RAM_BASE) as usize;
        self.ram[i..i + bytes.len()].copy_from_slice(bytes);
        self.ram_dirty |= 1 << ((addr - RAM_BASE) >> 10);
    }

    /// Restore this machine to `pristine` (a state cloned from the same
    /// load), copying only RAM blocks either side has dirtied. Used as the
    /// per-run reset in fuzzing loops.
    pub fn restore_from(&mut self, pristine: &MachineState) {
        debug_assert!(Arc::ptr_eq(&self.flash, &pristine.flash));
        let dirty = self.ram_dirty | pristine.ram_dirty;
        let mut bits = dirty;
        while bits != 0 {
            let blk = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let lo = blk << 10;
            let hi = (lo + 1024).min(self.ram.len());
            self.ram[lo..hi].copy_from_slice(&pristine.ram[lo..hi]);
        }
        self.ram_dirty = pristine.ram_dirty;
        self.regs = pristine.regs;
        self.flags = pristine.flags;
        self.bb_count = pristine.bb_count;
        self.insn_count = pristine.insn_count;
        self.current_block = pristine.current_block;
        self.shadow_stack.clear();
        self.shadow_stack.extend_from_slice(&pristine.shadow_stack);
        self.next_frame_id = pristine.next_frame_id;
        self.pending_irqs = pristine.pending_irqs.clone();
        self.in_isr = pristine.in_isr;
        self.halted = pristine.halted;
        self.taint_src = pristine.taint_src;
        self.taint_cand = pristine.taint_cand;
        self.flags_taint_src = pristine.flags_taint_src;
        self.flags_taint_cand = pristine.flags_taint_cand;
    }

    fn fault(&self, kind: FaultKind, addr: u32, cand: bool) -> StepOutcome {
        StepOutcome::Fault(Fault { kind, pc: self.pc(), addr, candidate_tainted: cand })
    }

    fn set_reg(&mut self, r: u8, v: u32, src: Option<u32>, cand: bool) {
        self.regs[r as usize] = v;
        self.taint_src[r as usize] = src;
        self.taint_cand[r as usize] = cand;
    }

    /// Result taint of a two-register ALU op: keep the destination's source
    /// if it has one, else the operand's; candidate taint is sticky.
    fn alu_taint(&self, rd: u8, rs: u8) -> (Option<u32>, bool) {
        let src = self.taint_src[rd as usize].or(self.taint_src[rs as usize]);
        let cand = self.taint_cand[rd as usize] || self.taint_cand[rs as usize];
        (src, cand)
    }

    fn access_event(&self, addr: u32, kind: AccessKind, value: u32, width: u8) -> AccessEvent {
        AccessEvent {
            addr: addr & !3,
            kind,
            value,
            width,
            lane: (addr & 3) as u8,
            pc: self.pc(),
            bbl: self.current_block,
            cs: self.call_sig(),
            frame_id: self.frame_id(),
            insn_count: self.insn_count,
        }
    }

    /// Cross a basic-block boundary into `target`, giving the scheduler a
    /// chance to fire an interrupt. Machine-level pending IRQs are delivered
    /// first (lowest number) whenever no ISR is active.
    fn transfer(&mut self, target: u32, bus: &mut dyn Bus) -> Result<(), Fault> {
        self.bb_count += 1;
        let prev = self.current_block;
        self.current_block = target;
        self.regs[15] = target;
        if self.in_isr == 0 {
            if let Some(&irq) = self.pending_irqs.iter().next() {
                self.pending_irqs.remove(&irq);
                return self.enter_interrupt(irq, bus);
            }
        }
        if let Some(irq) = bus.block_crossed(prev, target, self.bb_count, self.in_isr) {
            return self.enter_interrupt(irq, bus);
        }
        Ok(())
    }

    /// Enter an interrupt handler: stack pc and flags, push a shadow frame,
    /// and jump through the vector table.
    pub fn enter_interrupt(&mut self, irq: u8, bus: &mut dyn Bus) -> Result<(), Fault> {
        let mk = |kind, pc, addr| Fault { kind, pc, addr, candidate_tainted: false };
        if self.in_isr >= MAX_IRQ_DEPTH {
            return Err(mk(FaultKind::IrqDepth, self.pc(), irq as u32));
        }
        let vec_addr = 8 + 4 * irq as u32;
        let handler = self.flash_word(vec_addr);
        if handler == 0 || handler % 4 != 0 || handler >= FLASH_SIZE {
            return Err(mk(FaultKind::BadVector, self.pc(), vec_addr));
        }
        let sp = self.regs[REG_SP as usize].wrapping_sub(8);
        for (slot, value) in [(sp, self.pc()), (sp.wrapping_add(4), self.flags.pack())] {
            if !(RAM_BASE..RAM_BASE + RAM_SIZE - 3).contains(&slot) || slot % 4 != 0 {
                return Err(mk(FaultKind::MemPerm, self.pc(), slot));
            }
            self.ram_write(slot, &value.to_le_bytes());
        }
        self.regs[REG_SP as usize] = sp;
        let frame_id = self.next_frame_id;
        self.next_frame_id += 1;
        self.shadow_stack.push(ShadowFrame { return_address: self.pc(), frame_id });
        self.in_isr += 1;
        self.transfer(handler, bus)
    }

    /// Execute one instruction.
    pub fn step(&mut self, bus: &mut dyn Bus) -> StepOutcome {
        if self.halted {
            return StepOutcome::Halted;
        }
        let pc = self.pc();
        if pc % 4 != 0 || pc >= FLASH_SIZE {
            return self.fault(FaultKind::MemPerm, pc, false);
        }
        let word = self.flash_word(pc);
        let Some(instr) = isa::decode(word) else {
            return self.fault(FaultKind::UndefInsn, pc, false);
        };

        use Instr::*;
        let next_pc = pc.wrapping_add(4);
        let mut transfer_to: Option<u32> = None;

        macro_rules! alu_rr {
            ($rd:expr, $rs:expr, $f:expr) => {{
                let (rd, rs) = ($rd, $rs);
                let v = $f(self.regs[rd as usize], self.regs[rs as usize]);
                let (src, cand) = self.alu_taint(rd, rs);
                self.set_reg(rd, v, src, cand);
            }};
        }
        macro_rules! alu_ri {
            ($rd:expr, $imm:expr, $f:expr) => {{
                let rd = $rd;
                let v = $f(self.regs[rd as usize], $imm as u32);
                let src = self.taint_src[rd as usize];
                let cand = self.taint_cand[rd as usize];
                self.set_reg(rd, v, src, cand);
            }};
        }

        match instr {
            Ldi { rd, imm } => self.set_reg(rd, imm as u32, None, false),
            Lui { rd, imm } => {
                let v = (self.regs[rd as usize] & 0xffff) | (imm as u32) << 16;
                let src = self.taint_src[rd as usize];
                let cand = self.taint_cand[rd as usize];
                self.set_reg(rd, v, src, cand);
            }
            Mov { rd, rs } => {
                let v = self.regs[rs as usize];
                self.set_reg(rd, v, self.taint_src[rs as usize], self.taint_cand[rs as usize]);
            }
            Add { rd, rs } => alu_rr!(rd, rs, u32::wrapping_add),
            AddI { rd, imm } => alu_ri!(rd, imm, u32::wrapping_add),
            Sub { rd, rs } => alu_rr!(rd, rs, u32::wrapping_sub),
            SubI { rd, imm } => alu_ri!(rd, imm, u32::wrapping_sub),
            And { rd, rs } => alu_rr!(rd, rs, |a, b| a & b),
            AndI { rd, imm } => alu_ri!(rd, imm, |a, b| a & b),
            Or { rd, rs } => alu_rr!(rd, rs, |a, b| a | b),
            OrI { rd, imm } => alu_ri!(rd, imm, |a, b| a | b),
            Xor { rd, rs } => alu_rr!(rd, rs, |a, b| a ^ b),
            XorI { rd, imm } => alu_ri!(rd, imm, |a, b| a ^ b),
            Shl { rd, imm } => alu_ri!(rd, imm, |a: u32, b: u32| a << (b & 31)),
            Shr { rd, imm } => alu_ri!(rd, imm, |a: u32, b: u32| a >> (b & 31)),
            Cmp { rd, rs } => {
                let (a, b) = (self.regs[rd as usize], self.regs[rs as usize]);
                self.set_cmp_flags(a, b);
                let (src, cand) = self.alu_taint(rd, rs);
                self.flags_taint_src = src;
                self.flags_taint_cand = cand;
                self.raise_cond_signals(rd, Some(rs), bus);
            }
            CmpI { rd, imm } => {
                let a = self.regs[rd as usize];
                self.set_cmp_flags(a, imm as u32);
                self.flags_taint_src = self.taint_src[rd as usize];
                self.flags_taint_cand = self.taint_cand[rd as usize];
                self.raise_cond_signals(rd, None, bus);
            }
            Ldw { rd, rs, off } => {
                let addr = self.regs[rs as usize].wrapping_add(off as i32 as u32);
                match self.load(addr, 4, rs, bus) {
                    Ok(Some((v, src, cand))) => self.set_reg(rd, v, src, cand),
                    Ok(None) => return StepOutcome::Paused,
                    Err(o) => return o,
                }
            }
            Ldb { rd, rs, off } => {
                let addr = self.regs[rs as usize].wrapping_add(off as i32 as u32);
                match self.load(addr, 1, rs, bus) {
                    Ok(Some((v, src, cand))) => self.set_reg(rd, v, src, cand),
                    Ok(None) => return StepOutcome::Paused,
                    Err(o) => return o,
                }
            }
            Stw { rd, rs, off } => {
                let addr = self.regs[rs as usize].wrapping_add(off as i32 as u32);
                if let Err(o) = self.store(addr, self.regs[rd as usize], 4, rs, bus) {
                    return o;
                }
            }
            Stb { rd, rs, off } => {
                let addr = self.regs[rs as usize].wrapping_add(off as i32 as u32);
                if let Err(o) = self.store(addr, self.regs[rd as usize] & 0xff, 1, rs, bus) {
                    return o;
                }
            }
            Beq { off } => {
                if self.flags.z {
                    transfer_to = Some(self.branch_target(pc, off, bus));
                }
            }
            Bne { off } => {
                if !self.flags.z {
                    transfer_to = Some(self.branch_target(pc, off, bus));
                }
            }
            Blt { off } => {
                if !self.flags.c {
                    transfer_to = Some(self.branch_target(pc, off, bus));
                }
            }
            Bge { off } => {
                if self.flags.c {
                    transfer_to = Some(self.branch_target(pc, off, bus));
                }
            }
            Bal { off } => transfer_to = Some(pc.wrapping_add(4).wrapping_add((off as i32 as u32) << 2)),
            Bl { off } => {
                let ret = pc.wrapping_add(4);
                let frame_id = self.next_frame_id;
                self.next_frame_id += 1;
                self.shadow_stack.push(ShadowFrame { return_address: ret, frame_id });
                self.set_reg(REG_LR, ret, None, false);
                transfer_to = Some(ret.wrapping_add((off as i32 as u32) << 2));
            }
            Ret => {
                let target = self.regs[REG_LR as usize];
                let cand = self.taint_cand[REG_LR as usize];
                match self.shadow_stack.pop() {
                    Some(f) if f.return_address == target => {}
                    _ => return self.fault(FaultKind::ShadowStack, target, cand),
                }
                transfer_to = Some(target);
            }
            Push { rd } => {
                let sp = self.regs[REG_SP as usize].wrapping_sub(4);
                if let Err(o) = self.store(sp, self.regs[rd as usize], 4, REG_SP, bus) {
                    return o;
                }
                self.regs[REG_SP as usize] = sp;
            }
            Pop { rd } => {
                let sp = self.regs[REG_SP as usize];
                match self.load(sp, 4, REG_SP, bus) {
                    Ok(Some((v, _, _))) => {
                        // Memory is taint-opaque: popped values are clean.
                        self.set_reg(rd, v, None, false);
                        self.regs[REG_SP as usize] = sp.wrapping_add(4);
                    }
                    Ok(None) => return StepOutcome::Paused,
                    Err(o) => return o,
                }
            }
            Iret => {
                if self.in_isr == 0 {
                    return self.fault(FaultKind::UndefInsn, pc, false);
                }
                let sp = self.regs[REG_SP as usize];
                let (ret, fl) = match (self.ram_word(sp), self.ram_word(sp.wrapping_add(4))) {
                    (Some(r), Some(f)) => (r, f),
                    _ => return self.fault(FaultKind::MemPerm, sp, false),
                };
                match self.shadow_stack.pop() {
                    Some(f) if f.return_address == ret => {}
                    _ => return self.fault(FaultKind::ShadowStack, ret, false),
                }
                self.regs[REG_SP as usize] = sp.wrapping_add(8);
                self.flags = Flags::unpack(fl);
                self.flags_taint_src = None;
                self.flags_taint_cand = false;
                self.in_isr -= 1;
                transfer_to = Some(ret);
            }
            Wfi => bus.wfi(),
            Nop => {}
            Halt => {
                self.insn_count += 1;
                self.halted = true;
                return StepOutcome::Halted;
            }
        }

        self.insn_count += 1;
        match transfer_to {
            Some(t) => {
                if let Err(f) = self.transfer(t, bus) {
                    return StepOutcome::Fault(f);
                }
            }
            None => self.regs[15] = next_pc,
        }
        StepOutcome::Ok
    }

    fn branch_target(&mut self, pc: u32, off: i16, bus: &mut dyn Bus) -> u32 {
        if let Some(src) = self.flags_taint_src {
            bus.guarded_branch_taken(src, self.frame_id());
        }
        pc.wrapping_add(4).wrapping_add((off as i32 as u32) << 2)
    }

    fn set_cmp_flags(&mut self, a: u32, b: u32) {
        let r = a.wrapping_sub(b);
        self.flags = Flags { z: r == 0, n: r & 0x8000_0000 != 0, c: a >= b };
    }

    fn raise_cond_signals(&mut self, rd: u8, rs: Option<u8>, bus: &mut dyn Bus) {
        let mut seen = None;
        if let Some(src) = self.taint_src[rd as usize] {
            bus.cond_signal(src, self.taint_cand[rd as usize]);
            seen = Some(src);
        }
        if let Some(rs) = rs {
            if let Some(src) = self.taint_src[rs as usize] {
                if seen != Some(src) {
                    bus.cond_signal(src, self.taint_cand[rs as usize]);
                }
            }
        }
    }

    /// Load `width` bytes (1 or 4). `Ok(None)` means the bus paused the
    /// access. The returned taint applies to the destination register.
    #[allow(clippy::type_complexity)]
    fn load(
        &mut self,
        addr: u32,
        width: u8,
        base_reg: u8,
        bus: &mut dyn Bus,
    ) -> Result<Option<(u32, Option<u32>, bool)>, StepOutcome> {
        let cand = self.taint_cand[base_reg as usize];
        if width == 4 && addr % 4 != 0 {
            return Err(self.fault(FaultKind::MemPerm, addr, cand));
        }
        match addr {
            a if a >= FLASH_BASE && a < FLASH_BASE + FLASH_SIZE => Ok(Some((
                if width == 4 { self.flash_word(a) } else { self.flash_byte(a) as u32 },
                None,
                false,
            ))),
            a if a >= RAM_BASE && a < RAM_BASE + RAM_SIZE => {
                let i = (a - RAM_BASE) as usize;
                let v = if width == 4 {
                    u32::from_le_bytes(self.ram[i..i + 4].try_into().unwrap())
                } else {
                    self.ram[i] as u32
                };
                Ok(Some((v, None, false)))
            }
            a if a >= MMIO_BASE && a < MMIO_END => {
                let ev = self.access_event(a, AccessKind::Read, 0, if width == 4 { 32 } else { 8 });
                match bus.mmio_read(&ev) {
                    Some(rv) => {
                        let v = if width == 4 {
                            rv.value
                        } else {
                            (rv.value >> (ev.lane * 8)) & 0xff
                        };
                        Ok(Some((v, Some(ev.addr), rv.candidate)))
                    }
                    None => Ok(None),
                }
            }
            a if a >= SCS_BASE && a < SCS_END => {
                if width != 4 {
                    return Err(self.fault(FaultKind::MemPerm, a, cand));
                }
                Ok(Some((bus.scs_read(a), None, false)))
            }
            a => Err(self.fault(FaultKind::MemPerm, a, cand)),
        }
    }

    fn store(
        &mut self,
        addr: u32,
        value: u32,
        width: u8,
        base_reg: u8,
        bus: &mut dyn Bus,
    ) -> Result<(), StepOutcome> {
        let cand = self.taint_cand[base_reg as usize];
        if width == 4 && addr % 4 != 0 {
            return Err(self.fault(FaultKind::MemPerm, addr, cand));
        }
        match addr {
            a if a >= RAM_BASE && a < RAM_BASE + RAM_SIZE => {
                if width == 4 {
                    self.ram_write(a, &value.to_le_bytes());
                } else {
                    self.ram_write(a, &[value as u8]);
                }
                Ok(())
            }
            a if a >= MMIO_BASE && a < MMIO_END => {
                let ev =
                    self.access_event(a, AccessKind::Write, value, if width == 4 { 32 } else { 8 });
                bus.mmio_write(&ev);
                Ok(())
            }
            a if a == DEBUG_PORT => {
                bus.debug_byte(value as u8);
                Ok(())
            }
            a if a >= SCS_BASE && a < SCS_END => {
                if width != 4 {
                    return Err(self.fault(FaultKind::MemPerm, a, cand));
                }
                bus.scs_write(a, value);
                Ok(())
            }
            a => Err(self.fault(FaultKind::MemPerm, a, cand)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;

    fn boot(src: &str) -> MachineState {
        let full = format!(
            ".org 0x0\n.word 0x20010000\n.word start\n.org 0x100\nstart:\n{src}"
        );
        let out = assemble(&full).unwrap();
        MachineState::load_firmware(&out.image).unwrap()
    }

    fn run_until_halt(m: &mut MachineState, max: usize) -> StepOutcome {
        let mut bus = NullBus;
        for _ in 0..max {
            match m.step(&mut bus) {
                StepOutcome::Ok => {}
                other => return other,
            }
        }
        panic!("did not stop in {max} steps");
    }

    #[test]
    fn load_minimal_image() {
        let mut image = Vec::new();
        image.extend_from_slice(&0x20010000u32.to_le_bytes());
        image.extend_from_slice(&0x88u32.to_le_bytes());
        let m = MachineState::load_firmware(&image).unwrap();
        assert_eq!(m.pc(), 0x88);
        assert_eq!(m.regs[REG_SP as usize], 0x20010000);
        assert_eq!(m.bb_count, 0);
        assert_eq!(m.insn_count, 0);
    }

    #[test]
    fn load_rejects_oversized_image() {
        let image = vec![0u8; (FLASH_SIZE + 4) as usize];
        assert_eq!(
            MachineState::load_firmware(&image).err(),
            Some(LoadError::ImageTooLarge(image.len()))
        );
    }

    #[test]
    fn load_rejects_bad_reset_vector() {
        let mut image = Vec::new();
        image.extend_from_slice(&0x20010000u32.to_le_bytes());
        image.extend_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            MachineState::load_firmware(&image),
            Err(LoadError::MalformedVectorTable(_))
        ));
    }

    #[test]
    fn arithmetic_and_halt() {
        let mut m = boot("LDI r1, #7\nADD r1, #5\nMOV r2, r1\nHALT\n");
        assert_eq!(run_until_halt(&mut m, 10), StepOutcome::Halted);
        assert_eq!(m.regs[1], 12);
        assert_eq!(m.regs[2], 12);
        assert_eq!(m.insn_count, 4);
    }

    #[test]
    fn lui_builds_high_half() {
        let mut m = boot("LDI r1, #0x4400\nLUI r1, #0x4000\nHALT\n");
        run_until_halt(&mut m, 10);
        assert_eq!(m.regs[1], 0x40004400);
    }

    #[test]
    fn taken_branch_counts_block() {
        let mut m = boot("LDI r1, #1\nCMP r1, #1\nBEQ done\nLDI r2, #9\ndone: HALT\n");
        run_until_halt(&mut m, 10);
        assert_eq!(m.regs[2], 0);
        assert_eq!(m.bb_count, 1);
    }

    #[test]
    fn untaken_branch_is_not_a_boundary() {
        let mut m = boot("LDI r1, #1\nCMP r1, #2\nBEQ skip\nskip: HALT\n");
        run_until_halt(&mut m, 10);
        assert_eq!(m.bb_count, 0);
    }

    #[test]
    fn unsigned_compare_flags() {
        // 3 < 5 unsigned: BLT taken.
        let mut m = boot("LDI r1, #3\nCMP r1, #5\nBLT less\nLDI r2, #1\nHALT\nless: LDI r2, #2\nHALT\n");
        run_until_halt(&mut m, 10);
        assert_eq!(m.regs[2], 2);
    }

    #[test]
    fn call_return_shadow_stack() {
        let mut m = boot("BL sub\nLDI r3, #1\nHALT\nsub: LDI r2, #5\nRET\n");
        run_until_halt(&mut m, 10);
        assert_eq!(m.regs[2], 5);
        assert_eq!(m.regs[3], 1);
        assert_eq!(m.shadow_depth(), 0);
        assert_eq!(m.bb_count, 2); // call + return
    }

    #[test]
    fn corrupted_return_address_faults() {
        let src = "BL sub\nHALT\nsub: LDI lr, #0x8\nRET\n";
        let mut m = boot(src);
        match run_until_halt(&mut m, 10) {
            StepOutcome::Fault(f) => assert_eq!(f.kind, FaultKind::ShadowStack),
            o => panic!("expected shadow-stack fault, got {o:?}"),
        }
    }

    #[test]
    fn unaligned_word_access_faults() {
        let mut m = boot("LDI r1, #0x2\nLUI r1, #0x2000\nLDW r2, [r1, #0]\nHALT\n");
        match run_until_halt(&mut m, 10) {
            StepOutcome::Fault(f) => {
                assert_eq!(f.kind, FaultKind::MemPerm);
                assert_eq!(f.addr, 0x20000002);
            }
            o => panic!("expected fault, got {o:?}"),
        }
    }

    #[test]
    fn flash_is_not_writable() {
        let mut m = boot("LDI r1, #0x0\nSTW r1, [r1, #0x10]\nHALT\n");
        match run_until_halt(&mut m, 10) {
            StepOutcome::Fault(f) => assert_eq!(f.kind, FaultKind::MemPerm),
            o => panic!("expected fault, got {o:?}"),
        }
    }

    #[test]
    fn undecodable_word_faults() {
        let mut m = boot(".word 0x000000ff\nHALT\n");
        match run_until_halt(&mut m, 10) {
            StepOutcome::Fault(f) => assert_eq!(f.kind, FaultKind::UndefInsn),
            o => panic!("expected fault, got {o:?}"),
        }
    }

    #[test]
    fn iret_outside_isr_faults() {
        let mut m = boot("IRET\n");
        match run_until_halt(&mut m, 10) {
            StepOutcome::Fault(f) => assert_eq!(f.kind, FaultKind::UndefInsn),
            o => panic!("expected fault, got {o:?}"),
        }
    }

    #[test]
    fn push_pop_roundtrip() {
        let mut m = boot("LDI r1, #42\nPUSH r1\nLDI r1, #0\nPOP r2\nHALT\n");
        run_until_halt(&mut m, 10);
        assert_eq!(m.regs[2], 42);
        assert_eq!(m.regs[REG_SP as usize], 0x20010000);
    }

    #[test]
    fn ram_load_store() {
        let mut m = boot(
            "LDI r1, #0x0\nLUI r1, #0x2000\nLDI r2, #0x1234\nSTW r2, [r1, #0x40]\nLDW r3, [r1, #0x40]\nLDB r4, [r1, #0x41]\nHALT\n",
        );
        run_until_halt(&mut m, 10);
        assert_eq!(m.regs[3], 0x1234);
        assert_eq!(m.regs[4], 0x12);
    }

    fn irq_fixture() -> MachineState {
        // Vector table with IRQ 5 handler; main loops until r4 set by ISR.
        let src = "\
.org 0x0
.word 0x20010000
.word start
.org 0x8
.word isr  ; irq 0
.word isr
.word isr
.word isr
.word isr
.word isr5 ; irq 5
start:
LDI r4, #0
wait:
CMP r4, #0
BEQ wait
HALT
isr: IRET
isr5:
LDI r4, #1
IRET
";
        let out = assemble(src).unwrap();
        MachineState::load_firmware(&out.image).unwrap()
    }

    #[test]
    fn interrupt_entry_and_iret() {
        let mut m = irq_fixture();
        let mut bus = NullBus;
        // Let the wait loop spin a little, then request IRQ 5.
        for _ in 0..10 {
            assert_eq!(m.step(&mut bus), StepOutcome::Ok);
        }
        m.request_irq(5);
        let mut done = false;
        for _ in 0..50 {
            match m.step(&mut bus) {
                StepOutcome::Ok => {}
                StepOutcome::Halted => {
                    done = true;
                    break;
                }
                o => panic!("unexpected {o:?}"),
            }
        }
        assert!(done, "ISR did not release the wait loop");
        assert_eq!(m.regs[4], 1);
        assert_eq!(m.in_isr, 0);
        assert_eq!(m.shadow_depth(), 0);
        assert_eq!(m.regs[REG_SP as usize], 0x20010000);
    }

    #[test]
    fn unset_vector_faults_bad_vector() {
        let mut m = irq_fixture();
        let mut bus = NullBus;
        m.request_irq(31); // vector word is zero
        for _ in 0..5 {
            match m.step(&mut bus) {
                StepOutcome::Ok => {}
                StepOutcome::Fault(f) => {
                    assert_eq!(f.kind, FaultKind::BadVector);
                    return;
                }
                o => panic!("unexpected {o:?}"),
            }
        }
        panic!("bad vector not detected");
    }

    #[test]
    fn nesting_limit_faults() {
        let mut m = irq_fixture();
        let mut bus = NullBus;
        for _ in 0..(MAX_IRQ_DEPTH) {
            m.enter_interrupt(0, &mut bus).unwrap();
        }
        let err = m.enter_interrupt(0, &mut bus).unwrap_err();
        assert_eq!(err.kind, FaultKind::IrqDepth);
    }

    #[test]
    fn debug_port_collects_bytes() {
        struct Dbg(Vec<u8>);
        impl Bus for Dbg {
            fn mmio_read(&mut self, _: &AccessEvent) -> Option<MmioReadValue> {
                Some(MmioReadValue { value: 0, candidate: false })
            }
            fn mmio_write(&mut self, _: &AccessEvent) {}
            fn scs_read(&mut self, _: u32) -> u32 {
                0
            }
            fn scs_write(&mut self, _: u32, _: u32) {}
            fn debug_byte(&mut self, b: u8) {
                self.0.push(b);
            }
            fn cond_signal(&mut self, _: u32, _: bool) {}
            fn guarded_branch_taken(&mut self, _: u32, _: u64) {}
            fn block_crossed(&mut self, _: u32, _: u32, _: u64, _: u32) -> Option<u8> {
                None
            }
        }
        let mut m = boot("LDI r1, #'B'\nLDI r2, #0x0\nLUI r2, #0xe000\nSTB r1, [r2, #0]\nHALT\n");
        let mut bus = Dbg(Vec::new());
        loop {
            match m.step(&mut bus) {
                StepOutcome::Ok => {}
                StepOutcome::Halted => break,
                o => panic!("unexpected {o:?}"),
            }
        }
        assert_eq!(bus.0, b"B");
    }

    #[test]
    fn snapshot_restore_replays_identically() {
        let src = "\
LDI r1, #0
LDI r2, #0x0
LUI r2, #0x2000
loop:
ADD r1, #3
STW r1, [r2, #0x10]
CMP r1, #30
BNE loop
HALT
";
        let mut m = boot(src);
        let mut bus = NullBus;
        for _ in 0..5 {
            m.step(&mut bus);
        }
        let snap = m.clone();
        let mut a = m.clone();
        let mut b = snap.clone();
        let ra = run_until_halt(&mut a, 1000);
        let rb = run_until_halt(&mut b, 1000);
        assert_eq!(ra, rb);
        assert_eq!(a.regs, b.regs);
        assert_eq!(a.insn_count, b.insn_count);
        assert_eq!(a.bb_count, b.bb_count);
        assert_eq!(a.ram_word(0x20000010), b.ram_word(0x20000010));
    }

    #[test]
    fn restore_from_resets_dirty_ram() {
        let mut m = boot("LDI r1, #0x0\nLUI r1, #0x2000\nLDI r2, #7\nSTW r2, [r1, #0x20]\nHALT\n");
        let pristine = m.clone();
        run_until_halt(&mut m, 10);
        assert_eq!(m.ram_word(0x20000020), Some(7));
        m.restore_from(&pristine);
        assert_eq!(m.ram_word(0x20000020), Some(0));
        assert_eq!(m.pc(), pristine.pc());
        assert!(!m.halted());
    }

    #[test]
    fn mmio_taint_reaches_cmp_and_branch() {
        #[derive(Default)]
        struct Spy {
            signals: Vec<(u32, bool)>,
            guarded: Vec<(u32, u64)>,
        }
        impl Bus for Spy {
            fn mmio_read(&mut self, _: &AccessEvent) -> Option<MmioReadValue> {
                Some(MmioReadValue { value: 0, candidate: false })
            }
            fn mmio_write(&mut self, _: &AccessEvent) {}
            fn scs_read(&mut self, _: u32) -> u32 {
                0
            }
            fn scs_write(&mut self, _: u32, _: u32) {}
            fn debug_byte(&mut self, _: u8) {}
            fn cond_signal(&mut self, s: u32, c: bool) {
                self.signals.push((s, c));
            }
            fn guarded_branch_taken(&mut self, s: u32, f: u64) {
                self.guarded.push((s, f));
            }
            fn block_crossed(&mut self, _: u32, _: u32, _: u64, _: u32) -> Option<u8> {
                None
            }
        }
        // Read MMIO, mask, compare, branch on it (taken since value is 0).
        let src = "\
LDI r1, #0x4404
LUI r1, #0x4000
LDW r2, [r1, #0]
AND r2, #0x80
CMP r2, #0
BEQ out
out: HALT
";
        let mut m = boot(src);
        let mut bus = Spy::default();
        loop {
            match m.step(&mut bus) {
                StepOutcome::Ok => {}
                StepOutcome::Halted => break,
                o => panic!("unexpected {o:?}"),
            }
        }
        assert_eq!(bus.signals, vec![(0x40004404, false)]);
        assert_eq!(bus.guarded, vec![(0x40004404, 0)]);
    }

    #[test]
    fn taint_dies_on_untainted_overwrite_and_memory() {
        let src = "\
LDI r1, #0x4404
LUI r1, #0x4000
LDW r2, [r1, #0]
LDI r2, #5      ; overwrite kills taint
LDW r3, [r1, #0]
LDI r4, #0x0
LUI r4, #0x2000
STW r3, [r4, #0]
LDW r5, [r4, #0] ; memory is opaque: r5 clean
HALT
";
        let mut m = boot(src);
        let mut bus = NullBus;
        loop {
            match m.step(&mut bus) {
                StepOutcome::Ok => {}
                StepOutcome::Halted => break,
                o => panic!("unexpected {o:?}"),
            }
        }
        assert_eq!(m.reg_taint_src(2), None);
        assert_eq!(m.reg_taint_src(3), Some(0x40004404));
        assert_eq!(m.reg_taint_src(5), None);
    }
}
