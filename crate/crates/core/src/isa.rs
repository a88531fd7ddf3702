//! Instruction set: fixed 32-bit little-endian words.
//!
//! Word layout (least-significant bits first):
//!
//! ```text
//!   bits  0..8   opcode
//!   bits  8..12  rd
//!   bits 12..16  rs
//!   bits 16..32  imm16
//! ```
//!
//! r13 is the stack pointer, r14 the link register. r15 is the program
//! counter and is not encodable as an operand: control flow is the only way
//! to change it. Decoding is strict — unused fields must be zero and
//! register operands must be < 15 — so every decodable word has exactly one
//! textual form and re-encodes to the same bits.

/// General-purpose register count (r0..r15, r15 = pc, not an operand).
pub const NUM_REGS: usize = 16;
pub const REG_SP: u8 = 13;
pub const REG_LR: u8 = 14;
pub const REG_PC: u8 = 15;

pub const OP_LDI: u8 = 0x01;
pub const OP_LUI: u8 = 0x02;
pub const OP_MOV: u8 = 0x03;
pub const OP_ADD: u8 = 0x04;
pub const OP_ADDI: u8 = 0x05;
pub const OP_SUB: u8 = 0x06;
pub const OP_SUBI: u8 = 0x07;
pub const OP_AND: u8 = 0x08;
pub const OP_ANDI: u8 = 0x09;
pub const OP_OR: u8 = 0x0a;
pub const OP_ORI: u8 = 0x0b;
pub const OP_XOR: u8 = 0x0c;
pub const OP_XORI: u8 = 0x0d;
pub const OP_SHL: u8 = 0x0e;
pub const OP_SHR: u8 = 0x0f;
pub const OP_CMP: u8 = 0x10;
pub const OP_CMPI: u8 = 0x11;
pub const OP_LDW: u8 = 0x12;
pub const OP_LDB: u8 = 0x13;
pub const OP_STW: u8 = 0x14;
pub const OP_STB: u8 = 0x15;
pub const OP_BEQ: u8 = 0x16;
pub const OP_BNE: u8 = 0x17;
pub const OP_BLT: u8 = 0x18;
pub const OP_BGE: u8 = 0x19;
pub const OP_BAL: u8 = 0x1a;
pub const OP_BL: u8 = 0x1b;
pub const OP_RET: u8 = 0x1c;
pub const OP_PUSH: u8 = 0x1d;
pub const OP_POP: u8 = 0x1e;
pub const OP_IRET: u8 = 0x1f;
pub const OP_WFI: u8 = 0x20;
pub const OP_NOP: u8 = 0x21;
pub const OP_HALT: u8 = 0x22;

/// A decoded instruction. Branch offsets are in words relative to the
/// instruction after the branch; load/store offsets are in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    /// rd = zext(imm)
    Ldi { rd: u8, imm: u16 },
    /// rd = (rd & 0xffff) | imm << 16
    Lui { rd: u8, imm: u16 },
    Mov { rd: u8, rs: u8 },
    Add { rd: u8, rs: u8 },
    AddI { rd: u8, imm: u16 },
    Sub { rd: u8, rs: u8 },
    SubI { rd: u8, imm: u16 },
    And { rd: u8, rs: u8 },
    AndI { rd: u8, imm: u16 },
    Or { rd: u8, rs: u8 },
    OrI { rd: u8, imm: u16 },
    Xor { rd: u8, rs: u8 },
    XorI { rd: u8, imm: u16 },
    /// rd = rd << (imm & 31)
    Shl { rd: u8, imm: u16 },
    Shr { rd: u8, imm: u16 },
    /// Sets Z/N/C from rd - rhs. The only flag-setting instruction.
    Cmp { rd: u8, rs: u8 },
    CmpI { rd: u8, imm: u16 },
    /// rd = word [rs + sext(off)]
    Ldw { rd: u8, rs: u8, off: i16 },
    /// rd = zext(byte [rs + sext(off)])
    Ldb { rd: u8, rs: u8, off: i16 },
    Stw { rd: u8, rs: u8, off: i16 },
    Stb { rd: u8, rs: u8, off: i16 },
    Beq { off: i16 },
    Bne { off: i16 },
    Blt { off: i16 },
    Bge { off: i16 },
    Bal { off: i16 },
    /// lr = pc + 4; pc = pc + 4 + off*4
    Bl { off: i16 },
    /// pc = lr
    Ret,
    /// sp -= 4; [sp] = rd
    Push { rd: u8 },
    /// rd = [sp]; sp += 4
    Pop { rd: u8 },
    /// Return from interrupt: pops pc and flags stacked at entry.
    Iret,
    /// Idle hint; execution continues with the next instruction.
    Wfi,
    Nop,
    Halt,
}

fn fields(word: u32) -> (u8, u8, u8, u16) {
    (
        (word & 0xff) as u8,
        ((word >> 8) & 0xf) as u8,
        ((word >> 12) & 0xf) as u8,
        (word >> 16) as u16,
    )
}

fn pack(op: u8, rd: u8, rs: u8, imm: u16) -> u32 {
    (op as u32) | ((rd as u32) << 8) | ((rs as u32) << 12) | ((imm as u32) << 16)
}

pub fn encode(i: Instr) -> u32 {
    use Instr::*;
    match i {
        Ldi { rd, imm } => pack(OP_LDI, rd, 0, imm),
        Lui { rd, imm } => pack(OP_LUI, rd, 0, imm),
        Mov { rd, rs } => pack(OP_MOV, rd, rs, 0),
        Add { rd, rs } => pack(OP_ADD, rd, rs, 0),
        AddI { rd, imm } => pack(OP_ADDI, rd, 0, imm),
        Sub { rd, rs } => pack(OP_SUB, rd, rs, 0),
        SubI { rd, imm } => pack(OP_SUBI, rd, 0, imm),
        And { rd, rs } => pack(OP_AND, rd, rs, 0),
        AndI { rd, imm } => pack(OP_ANDI, rd, 0, imm),
        Or { rd, rs } => pack(OP_OR, rd, rs, 0),
        OrI { rd, imm } => pack(OP_ORI, rd, 0, imm),
        Xor { rd, rs } => pack(OP_XOR, rd, rs, 0),
        XorI { rd, imm } => pack(OP_XORI, rd, 0, imm),
        Shl { rd, imm } => pack(OP_SHL, rd, 0, imm),
        Shr { rd, imm } => pack(OP_SHR, rd, 0, imm),
        Cmp { rd, rs } => pack(OP_CMP, rd, rs, 0),
        CmpI { rd, imm } => pack(OP_CMPI, rd, 0, imm),
        Ldw { rd, rs, off } => pack(OP_LDW, rd, rs, off as u16),
        Ldb { rd, rs, off } => pack(OP_LDB, rd, rs, off as u16),
        Stw { rd, rs, off } => pack(OP_STW, rd, rs, off as u16),
        Stb { rd, rs, off } => pack(OP_STB, rd, rs, off as u16),
        Beq { off } => pack(OP_BEQ, 0, 0, off as u16),
        Bne { off } => pack(OP_BNE, 0, 0, off as u16),
        Blt { off } => pack(OP_BLT, 0, 0, off as u16),
        Bge { off } => pack(OP_BGE, 0, 0, off as u16),
        Bal { off } => pack(OP_BAL, 0, 0, off as u16),
        Bl { off } => pack(OP_BL, 0, 0, off as u16),
        Ret => pack(OP_RET, 0, 0, 0),
        Push { rd } => pack(OP_PUSH, rd, 0, 0),
        Pop { rd } => pack(OP_POP, rd, 0, 0),
        Iret => pack(OP_IRET, 0, 0, 0),
        Wfi => pack(OP_WFI, 0, 0, 0),
        Nop => pack(OP_NOP, 0, 0, 0),
        Halt => pack(OP_HALT, 0, 0, 0),
    }
}

/// Strict decode: `None` for unknown opcodes, nonzero unused fields, or r15
/// operands. Every `Some` result satisfies `encode(decode(w)) == w`.
pub fn decode(word: u32) -> Option<Instr> {
    use Instr::*;
    let (op, rd, rs, imm) = fields(word);
    let gp = |r: u8| r < REG_PC;
    let i = match op {
        OP_LDI if gp(rd) && rs == 0 => Ldi { rd, imm },
        OP_LUI if gp(rd) && rs == 0 => Lui { rd, imm },
        OP_MOV if gp(rd) && gp(rs) && imm == 0 => Mov { rd, rs },
        OP_ADD if gp(rd) && gp(rs) && imm == 0 => Add { rd, rs },
        OP_ADDI if gp(rd) && rs == 0 => AddI { rd, imm },
        OP_SUB if gp(rd) && gp(rs) && imm == 0 => Sub { rd, rs },
        OP_SUBI if gp(rd) && rs == 0 => SubI { rd, imm },
        OP_AND if gp(rd) && gp(rs) && imm == 0 => And { rd, rs },
        OP_ANDI if gp(rd) && rs == 0 => AndI { rd, imm },
        OP_OR if gp(rd) && gp(rs) && imm == 0 => Or { rd, rs },
        OP_ORI if gp(rd) && rs == 0 => OrI { rd, imm },
        OP_XOR if gp(rd) && gp(rs) && imm == 0 => Xor { rd, rs },
        OP_XORI if gp(rd) && rs == 0 => XorI { rd, imm },
        OP_SHL if gp(rd) && rs == 0 => Shl { rd, imm },
        OP_SHR if gp(rd) && rs == 0 => Shr { rd, imm },
        OP_CMP if gp(rd) && gp(rs) && imm == 0 => Cmp { rd, rs },
        OP_CMPI if gp(rd) && rs == 0 => CmpI { rd, imm },
        OP_LDW if gp(rd) && gp(rs) => Ldw { rd, rs, off: imm as i16 },
        OP_LDB if gp(rd) && gp(rs) => Ldb { rd, rs, off: imm as i16 },
        OP_STW if gp(rd) && gp(rs) => Stw { rd, rs, off: imm as i16 },
        OP_STB if gp(rd) && gp(rs) => Stb { rd, rs, off: imm as i16 },
        OP_BEQ if rd == 0 && rs == 0 => Beq { off: imm as i16 },
        OP_BNE if rd == 0 && rs == 0 => Bne { off: imm as i16 },
        OP_BLT if rd == 0 && rs == 0 => Blt { off: imm as i16 },
        OP_BGE if rd == 0 && rs == 0 => Bge { off: imm as i16 },
        OP_BAL if rd == 0 && rs == 0 => Bal { off: imm as i16 },
        OP_BL if rd == 0 && rs == 0 => Bl { off: imm as i16 },
        OP_RET if rd == 0 && rs == 0 && imm == 0 => Ret,
        OP_PUSH if gp(rd) && rs == 0 && imm == 0 => Push { rd },
        OP_POP if gp(rd) && rs == 0 && imm == 0 => Pop { rd },
        OP_IRET if rd == 0 && rs == 0 && imm == 0 => Iret,
        OP_WFI if rd == 0 && rs == 0 && imm == 0 => Wfi,
        OP_NOP if rd == 0 && rs == 0 && imm == 0 => Nop,
        OP_HALT if rd == 0 && rs == 0 && imm == 0 => Halt,
        _ => return None,
    };
    Some(i)
}

/// One row of the opcode reference: (opcode, mnemonic, operand syntax,
/// semantics). This table is the source for `docs/isa.md`; a test keeps the
/// two in sync.
pub const OPCODE_REFERENCE: &[(u8, &str, &str, &str)] = &[
    (OP_LDI, "LDI", "rd, #imm16", "rd = zext(imm16)"),
    (OP_LUI, "LUI", "rd, #imm16", "rd = (rd & 0xffff) | imm16 << 16"),
    (OP_MOV, "MOV", "rd, rs", "rd = rs"),
    (OP_ADD, "ADD", "rd, rs", "rd = rd + rs"),
    (OP_ADDI, "ADD", "rd, #imm16", "rd = rd + zext(imm16)"),
    (OP_SUB, "SUB", "rd, rs", "rd = rd - rs"),
    (OP_SUBI, "SUB", "rd, #imm16", "rd = rd - zext(imm16)"),
    (OP_AND, "AND", "rd, rs", "rd = rd & rs"),
    (OP_ANDI, "AND", "rd, #imm16", "rd = rd & zext(imm16)"),
    (OP_OR, "OR", "rd, rs", "rd = rd | rs"),
    (OP_ORI, "OR", "rd, #imm16", "rd = rd | zext(imm16)"),
    (OP_XOR, "XOR", "rd, rs", "rd = rd ^ rs"),
    (OP_XORI, "XOR", "rd, #imm16", "rd = rd ^ zext(imm16)"),
    (OP_SHL, "SHL", "rd, #imm16", "rd = rd << (imm16 & 31)"),
    (OP_SHR, "SHR", "rd, #imm16", "rd = rd >> (imm16 & 31) (logical)"),
    (OP_CMP, "CMP", "rd, rs", "flags from rd - rs: Z, N, C (C = no borrow)"),
    (OP_CMPI, "CMP", "rd, #imm16", "flags from rd - zext(imm16)"),
    (OP_LDW, "LDW", "rd, [rs, #off]", "rd = word [rs + sext(off)]"),
    (OP_LDB, "LDB", "rd, [rs, #off]", "rd = zext(byte [rs + sext(off)])"),
    (OP_STW, "STW", "rd, [rs, #off]", "word [rs + sext(off)] = rd"),
    (OP_STB, "STB", "rd, [rs, #off]", "byte [rs + sext(off)] = rd & 0xff"),
    (OP_BEQ, "BEQ", "target", "if Z: pc = target (imm16 = signed word offset)"),
    (OP_BNE, "BNE", "target", "if !Z: pc = target"),
    (OP_BLT, "BLT", "target", "if !C: pc = target (unsigned rd < rhs)"),
    (OP_BGE, "BGE", "target", "if C: pc = target (unsigned rd >= rhs)"),
    (OP_BAL, "BAL", "target", "pc = target"),
    (OP_BL, "BL", "target", "lr = pc + 4; pc = target"),
    (OP_RET, "RET", "", "pc = lr"),
    (OP_PUSH, "PUSH", "rd", "sp -= 4; [sp] = rd"),
    (OP_POP, "POP", "rd", "rd = [sp]; sp += 4"),
    (OP_IRET, "IRET", "", "pop pc and flags stacked at interrupt entry"),
    (OP_WFI, "WFI", "", "idle hint; interrupt scheduler runs as usual"),
    (OP_NOP, "NOP", "", "no operation"),
    (OP_HALT, "HALT", "", "stop execution (clean exit)"),
];

impl Instr {
    pub fn opcode(&self) -> u8 {
        (encode(*self) & 0xff) as u8
    }

    /// True for instructions that transfer control when executed (their
    /// target starts a new basic block).
    pub fn is_control_transfer(&self) -> bool {
        use Instr::*;
        matches!(
            self,
            Beq { .. }
                | Bne { .. }
                | Blt { .. }
                | Bge { .. }
                | Bal { .. }
                | Bl { .. }
                | Ret
                | Iret
        )
    }
}
