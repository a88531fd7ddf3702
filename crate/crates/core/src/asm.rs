//! Two-pass assembler and disassembler.
//!
//! Source syntax: one instruction per line, `;` starts a comment, labels end
//! with `:`. Directives: `.org`, `.word`, `.equ`. Literals are decimal,
//! `0x` hex, or `'c'` characters. Expressions allow `+`/`-` over symbols and
//! literals plus `%hi(e)` / `%lo(e)` for splitting 32-bit constants across an
//! LDI/LUI pair. Immediate operands are written with `#`; branch targets are
//! labels or `.+N` / `.-N` byte-relative forms (which is what the
//! disassembler emits, so its output is always reassemblable).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::isa::{self, Instr};

#[derive(Debug, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unresolved symbol `{name}`")]
    UnresolvedLabel { line: usize, name: String },
    #[error("line {line}: value out of range: {msg}")]
    Range { line: usize, msg: String },
    #[error("image length {0} is not a multiple of 4")]
    UnalignedImage(usize),
}

impl AsmError {
    /// Source line the error refers to, when it has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            AsmError::Syntax { line, .. }
            | AsmError::UnresolvedLabel { line, .. }
            | AsmError::Range { line, .. } => Some(*line),
            AsmError::UnalignedImage(_) => None,
        }
    }
}

/// Assembled image plus the label-to-address map (the only debug info kept).
#[derive(Debug, Clone)]
pub struct AsmOutput {
    pub image: Vec<u8>,
    pub labels: BTreeMap<String, u32>,
}

impl AsmOutput {
    /// Sidecar map rendering: one `0xADDR name` line per label, sorted by
    /// address then name.
    pub fn label_map(&self) -> String {
        let mut rows: Vec<(&u32, &String)> = self.labels.iter().map(|(k, v)| (v, k)).collect();
        rows.sort();
        let mut out = String::new();
        for (addr, name) in rows {
            let _ = writeln!(out, "{addr:#010x} {name}");
        }
        out
    }
}

const MAX_IMAGE: usize = 1 << 20;

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax { line, msg: msg.into() }
}

fn range(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Range { line, msg: msg.into() }
}

/// Strip a trailing comment, honoring char literals.
fn strip_comment(s: &str) -> &str {
    let bytes = s.as_bytes();
    let mut in_char = false;
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'\'' => in_char = !in_char,
            b';' if !in_char => return &s[..i],
            _ => {}
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
enum Operand {
    Reg(u8),
    Imm(String),          // expression text, evaluated in pass 2
    Mem(u8, String),      // [reg, #expr]
    Target(String),       // label or .+N/.-N
}

#[derive(Debug, Clone)]
enum Stmt {
    Instr { mnemonic: String, ops: Vec<Operand>, addr: u32, line: usize },
    Word { expr: String, addr: u32, line: usize },
}

fn parse_reg(tok: &str) -> Option<u8> {
    let t = tok.to_ascii_lowercase();
    match t.as_str() {
        "sp" => Some(isa::REG_SP),
        "lr" => Some(isa::REG_LR),
        _ => {
            let n: u8 = t.strip_prefix('r')?.parse().ok()?;
            (n < 15).then_some(n)
        }
    }
}

/// Split an operand list on commas that are outside brackets/quotes.
fn split_operands(s: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut in_char = false;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '\'' => {
                in_char = !in_char;
                cur.push(c);
            }
            '[' | '(' if !in_char => {
                depth += 1;
                cur.push(c);
            }
            ']' | ')' if !in_char => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 && !in_char => {
                parts.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        parts.push(cur.trim().to_string());
    }
    parts
}

fn parse_operand(tok: &str, line: usize) -> Result<Operand, AsmError> {
    if let Some(r) = parse_reg(tok) {
        return Ok(Operand::Reg(r));
    }
    if let Some(imm) = tok.strip_prefix('#') {
        return Ok(Operand::Imm(imm.trim().to_string()));
    }
    if tok.starts_with('[') {
        let inner = tok
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(|| syntax(line, format!("malformed memory operand `{tok}`")))?;
        let parts = split_operands(inner);
        let (reg_part, off_part) = match parts.len() {
            1 => (parts[0].clone(), "#0".to_string()),
            2 => (parts[0].clone(), parts[1].clone()),
            _ => return Err(syntax(line, format!("malformed memory operand `{tok}`"))),
        };
        let reg = parse_reg(&reg_part)
            .ok_or_else(|| syntax(line, format!("bad base register `{reg_part}`")))?;
        let off = off_part
            .strip_prefix('#')
            .ok_or_else(|| syntax(line, format!("offset must be immediate in `{tok}`")))?;
        return Ok(Operand::Mem(reg, off.trim().to_string()));
    }
    // Anything else is a branch target (label or .+N form).
    Ok(Operand::Target(tok.to_string()))
}

struct Evaluator<'a> {
    symbols: &'a BTreeMap<String, i64>,
}

impl Evaluator<'_> {
    fn eval(&self, expr: &str, line: usize) -> Result<i64, AsmError> {
        let mut p = ExprParser { s: expr.as_bytes(), pos: 0, line, syms: self.symbols };
        let v = p.expr()?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(syntax(line, format!("trailing characters in expression `{expr}`")));
        }
        Ok(v)
    }
}

struct ExprParser<'a> {
    s: &'a [u8],
    pos: usize,
    line: usize,
    syms: &'a BTreeMap<String, i64>,
}

impl ExprParser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && (self.s[self.pos] as char).is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<i64, AsmError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = acc.wrapping_add(self.term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = acc.wrapping_sub(self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<i64, AsmError> {
        let c = self
            .peek()
            .ok_or_else(|| syntax(self.line, "expected expression term"))?;
        match c {
            b'-' => {
                self.pos += 1;
                Ok(-self.term()?)
            }
            b'(' => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(syntax(self.line, "missing `)`"));
                }
                self.pos += 1;
                Ok(v)
            }
            b'\'' => {
                // char literal: 'X'
                let rest = &self.s[self.pos..];
                if rest.len() >= 3 && rest[2] == b'\'' {
                    self.pos += 3;
                    Ok(rest[1] as i64)
                } else {
                    Err(syntax(self.line, "malformed char literal"))
                }
            }
            b'%' => {
                let rest = std::str::from_utf8(&self.s[self.pos..]).unwrap();
                let (func, shift): (&str, bool) = if rest.starts_with("%hi(") {
                    ("%hi(", true)
                } else if rest.starts_with("%lo(") {
                    ("%lo(", false)
                } else {
                    return Err(syntax(self.line, "unknown % operator"));
                };
                self.pos += func.len();
                let v = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(syntax(self.line, "missing `)` after %hi/%lo"));
                }
                self.pos += 1;
                let w = v as u32;
                Ok(if shift { (w >> 16) as i64 } else { (w & 0xffff) as i64 })
            }
            b'0'..=b'9' => {
                let start = self.pos;
                let hex = self.s[self.pos..].starts_with(b"0x")
                    || self.s[self.pos..].starts_with(b"0X");
                if hex {
                    self.pos += 2;
                }
                while self.pos < self.s.len()
                    && (self.s[self.pos] as char).is_ascii_alphanumeric()
                {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
                let v = if hex {
                    i64::from_str_radix(&text[2..], 16)
                } else {
                    text.parse()
                };
                v.map_err(|_| syntax(self.line, format!("bad number `{text}`")))
            }
            c if (c as char).is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.s.len() {
                    let ch = self.s[self.pos] as char;
                    if ch.is_ascii_alphanumeric() || ch == '_' {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let name = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
                self.syms.get(name).copied().ok_or(AsmError::UnresolvedLabel {
                    line: self.line,
                    name: name.to_string(),
                })
            }
            other => Err(syntax(self.line, format!("unexpected character `{}`", other as char))),
        }
    }
}

fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {
            chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        }
        _ => false,
    }
}

/// Assemble source text into an image and label map.
pub fn assemble(src: &str) -> Result<AsmOutput, AsmError> {
    // Pass 1: layout. Collect statements with addresses, labels, and .equ
    // symbol values (equ expressions may only use already-defined symbols).
    let mut symbols: BTreeMap<String, i64> = BTreeMap::new();
    let mut labels: BTreeMap<String, u32> = BTreeMap::new();
    let mut stmts: Vec<Stmt> = Vec::new();
    let mut loc: u32 = 0;

    for (idx, raw) in src.lines().enumerate() {
        let line = idx + 1;
        let mut text = strip_comment(raw).trim();
        // Labels (possibly several) at the start of the line.
        while let Some(colon) = text.find(':') {
            let (head, rest) = text.split_at(colon);
            let name = head.trim();
            if name.contains(char::is_whitespace) || !is_label_name(name) {
                break;
            }
            if symbols.contains_key(name) {
                return Err(syntax(line, format!("duplicate symbol `{name}`")));
            }
            symbols.insert(name.to_string(), loc as i64);
            labels.insert(name.to_string(), loc);
            text = rest[1..].trim();
        }
        if text.is_empty() {
            continue;
        }

        let (head, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };

        if let Some(directive) = head.strip_prefix('.') {
            match directive.to_ascii_lowercase().as_str() {
                "equ" => {
                    let parts = split_operands(rest);
                    if parts.len() != 2 {
                        return Err(syntax(line, ".equ takes `name, value`"));
                    }
                    if !is_label_name(&parts[0]) {
                        return Err(syntax(line, format!("bad .equ name `{}`", parts[0])));
                    }
                    if symbols.contains_key(&parts[0]) {
                        return Err(syntax(line, format!("duplicate symbol `{}`", parts[0])));
                    }
                    let v = Evaluator { symbols: &symbols }.eval(&parts[1], line)?;
                    symbols.insert(parts[0].clone(), v);
                }
                "org" => {
                    let v = Evaluator { symbols: &symbols }.eval(rest, line)?;
                    if v < loc as i64 || v % 4 != 0 || v as usize > MAX_IMAGE {
                        return Err(range(
                            line,
                            format!(".org {v:#x} (must be word-aligned, forward, <= 1 MiB)"),
                        ));
                    }
                    loc = v as u32;
                }
                "word" => {
                    stmts.push(Stmt::Word { expr: rest.to_string(), addr: loc, line });
                    loc += 4;
                }
                other => return Err(syntax(line, format!("unknown directive `.{other}`"))),
            }
            continue;
        }

        let ops = split_operands(rest)
            .iter()
            .map(|t| parse_operand(t, line))
            .collect::<Result<Vec<_>, _>>()?;
        stmts.push(Stmt::Instr { mnemonic: head.to_ascii_uppercase(), ops, addr: loc, line });
        loc += 4;
    }

    if loc as usize > MAX_IMAGE {
        return Err(range(0, format!("image size {loc:#x} exceeds 1 MiB")));
    }

    // Pass 2: encode.
    let ev = Evaluator { symbols: &symbols };
    let mut image = vec![0u8; loc as usize];
    for stmt in &stmts {
        let (word, addr) = match stmt {
            Stmt::Word { expr, addr, line } => {
                let v = ev.eval(expr, *line)?;
                if v < -(1i64 << 31) || v > u32::MAX as i64 {
                    return Err(range(*line, format!(".word value {v:#x}")));
                }
                (v as u32, *addr)
            }
            Stmt::Instr { mnemonic, ops, addr, line } => {
                (encode_stmt(mnemonic, ops, *addr, *line, &ev)?, *addr)
            }
        };
        image[addr as usize..addr as usize + 4].copy_from_slice(&word.to_le_bytes());
    }

    Ok(AsmOutput { image, labels })
}

fn imm16(ev: &Evaluator, expr: &str, line: usize) -> Result<u16, AsmError> {
    let v = ev.eval(expr, line)?;
    if !(0..=0xffff).contains(&v) {
        return Err(range(line, format!("immediate {v:#x} does not fit 16 bits")));
    }
    Ok(v as u16)
}

fn off16(ev: &Evaluator, expr: &str, line: usize) -> Result<i16, AsmError> {
    let v = ev.eval(expr, line)?;
    i16::try_from(v).map_err(|_| range(line, format!("offset {v:#x} does not fit i16")))
}

fn branch_off(ev: &Evaluator, target: &str, addr: u32, line: usize) -> Result<i16, AsmError> {
    // Targets: a symbol, or `.+N` / `.-N` relative to this instruction.
    let tgt = if let Some(rest) = target.strip_prefix('.') {
        if rest.is_empty() {
            addr as i64
        } else {
            let rest = rest.strip_prefix('+').unwrap_or(rest);
            addr as i64 + ev.eval(rest, line)?
        }
    } else {
        ev.eval(target, line)?
    };
    let delta = tgt - (addr as i64 + 4);
    if delta % 4 != 0 {
        return Err(range(line, format!("branch target {tgt:#x} not word-aligned")));
    }
    let words = delta / 4;
    i16::try_from(words)
        .map_err(|_| range(line, format!("branch to {tgt:#x} out of range ({words} words)")))
}

fn encode_stmt(
    mnemonic: &str,
    ops: &[Operand],
    addr: u32,
    line: usize,
    ev: &Evaluator,
) -> Result<u32, AsmError> {
    use Operand::*;
    let bad = || syntax(line, format!("bad operands for {mnemonic}"));

    macro_rules! alu {
        ($reg:ident, $imm:ident) => {
            match ops {
                [Reg(rd), Reg(rs)] => Instr::$reg { rd: *rd, rs: *rs },
                [Reg(rd), Imm(e)] => Instr::$imm { rd: *rd, imm: imm16(ev, e, line)? },
                _ => return Err(bad()),
            }
        };
    }
    macro_rules! shift {
        ($var:ident) => {
            match ops {
                [Reg(rd), Imm(e)] => Instr::$var { rd: *rd, imm: imm16(ev, e, line)? },
                _ => return Err(bad()),
            }
        };
    }
    macro_rules! mem {
        ($var:ident) => {
            match ops {
                [Reg(rd), Mem(rs, e)] => {
                    Instr::$var { rd: *rd, rs: *rs, off: off16(ev, e, line)? }
                }
                _ => return Err(bad()),
            }
        };
    }
    macro_rules! branch {
        ($var:ident) => {
            match ops {
                [Target(t)] => Instr::$var { off: branch_off(ev, t, addr, line)? },
                _ => return Err(bad()),
            }
        };
    }
    macro_rules! bare {
        ($var:ident) => {
            match ops {
                [] => Instr::$var,
                _ => return Err(bad()),
            }
        };
    }

    let instr = match mnemonic {
        "LDI" => match ops {
            [Reg(rd), Imm(e)] => Instr::Ldi { rd: *rd, imm: imm16(ev, e, line)? },
            _ => return Err(bad()),
        },
        "LUI" => match ops {
            [Reg(rd), Imm(e)] => Instr::Lui { rd: *rd, imm: imm16(ev, e, line)? },
            _ => return Err(bad()),
        },
        "MOV" => match ops {
            [Reg(rd), Reg(rs)] => Instr::Mov { rd: *rd, rs: *rs },
            _ => return Err(bad()),
        },
        "ADD" => alu!(Add, AddI),
        "SUB" => alu!(Sub, SubI),
        "AND" => alu!(And, AndI),
        "OR" => alu!(Or, OrI),
        "XOR" => alu!(Xor, XorI),
        "CMP" => alu!(Cmp, CmpI),
        "SHL" => shift!(Shl),
        "SHR" => shift!(Shr),
        "LDW" => mem!(Ldw),
        "LDB" => mem!(Ldb),
        "STW" => mem!(Stw),
        "STB" => mem!(Stb),
        "BEQ" => branch!(Beq),
        "BNE" => branch!(Bne),
        "BLT" => branch!(Blt),
        "BGE" => branch!(Bge),
        "BAL" => branch!(Bal),
        "BL" => branch!(Bl),
        "RET" => bare!(Ret),
        "IRET" => bare!(Iret),
        "WFI" => bare!(Wfi),
        "NOP" => bare!(Nop),
        "HALT" => bare!(Halt),
        "PUSH" => match ops {
            [Reg(rd)] => Instr::Push { rd: *rd },
            _ => return Err(bad()),
        },
        "POP" => match ops {
            [Reg(rd)] => Instr::Pop { rd: *rd },
            _ => return Err(bad()),
        },
        other => return Err(syntax(line, format!("unknown mnemonic `{other}`"))),
    };
    Ok(isa::encode(instr))
}

fn reg_name(r: u8) -> String {
    match r {
        isa::REG_SP => "sp".into(),
        isa::REG_LR => "lr".into(),
        n => format!("r{n}"),
    }
}

fn imm_text(v: u16) -> String {
    format!("#{:#x}", v)
}

fn off_text(v: i16) -> String {
    if v < 0 {
        format!("#-{:#x}", -(v as i32))
    } else {
        format!("#{:#x}", v)
    }
}

fn target_text(off: i16) -> String {
    // Byte delta from this instruction's own address.
    let bytes = (off as i32) * 4 + 4;
    if bytes < 0 {
        format!(".-{:#x}", -bytes)
    } else {
        format!(".+{:#x}", bytes)
    }
}

/// Render one instruction in canonical (reassemblable) form.
pub fn render(i: Instr) -> String {
    use Instr::*;
    match i {
        Ldi { rd, imm } => format!("LDI {}, {}", reg_name(rd), imm_text(imm)),
        Lui { rd, imm } => format!("LUI {}, {}", reg_name(rd), imm_text(imm)),
        Mov { rd, rs } => format!("MOV {}, {}", reg_name(rd), reg_name(rs)),
        Add { rd, rs } => format!("ADD {}, {}", reg_name(rd), reg_name(rs)),
        AddI { rd, imm } => format!("ADD {}, {}", reg_name(rd), imm_text(imm)),
        Sub { rd, rs } => format!("SUB {}, {}", reg_name(rd), reg_name(rs)),
        SubI { rd, imm } => format!("SUB {}, {}", reg_name(rd), imm_text(imm)),
        And { rd, rs } => format!("AND {}, {}", reg_name(rd), reg_name(rs)),
        AndI { rd, imm } => format!("AND {}, {}", reg_name(rd), imm_text(imm)),
        Or { rd, rs } => format!("OR {}, {}", reg_name(rd), reg_name(rs)),
        OrI { rd, imm } => format!("OR {}, {}", reg_name(rd), imm_text(imm)),
        Xor { rd, rs } => format!("XOR {}, {}", reg_name(rd), reg_name(rs)),
        XorI { rd, imm } => format!("XOR {}, {}", reg_name(rd), imm_text(imm)),
        Shl { rd, imm } => format!("SHL {}, {}", reg_name(rd), imm_text(imm)),
        Shr { rd, imm } => format!("SHR {}, {}", reg_name(rd), imm_text(imm)),
        Cmp { rd, rs } => format!("CMP {}, {}", reg_name(rd), reg_name(rs)),
        CmpI { rd, imm } => format!("CMP {}, {}", reg_name(rd), imm_text(imm)),
        Ldw { rd, rs, off } => format!("LDW {}, [{}, {}]", reg_name(rd), reg_name(rs), off_text(off)),
        Ldb { rd, rs, off } => format!("LDB {}, [{}, {}]", reg_name(rd), reg_name(rs), off_text(off)),
        Stw { rd, rs, off } => format!("STW {}, [{}, {}]", reg_name(rd), reg_name(rs), off_text(off)),
        Stb { rd, rs, off } => format!("STB {}, [{}, {}]", reg_name(rd), reg_name(rs), off_text(off)),
        Beq { off } => format!("BEQ {}", target_text(off)),
        Bne { off } => format!("BNE {}", target_text(off)),
        Blt { off } => format!("BLT {}", target_text(off)),
        Bge { off } => format!("BGE {}", target_text(off)),
        Bal { off } => format!("BAL {}", target_text(off)),
        Bl { off } => format!("BL {}", target_text(off)),
        Ret => "RET".into(),
        Push { rd } => format!("PUSH {}", reg_name(rd)),
        Pop { rd } => format!("POP {}", reg_name(rd)),
        Iret => "IRET".into(),
        Wfi => "WFI".into(),
        Nop => "NOP".into(),
        Halt => "HALT".into(),
    }
}

/// Disassemble an image. Undecodable words come out as `.word 0x...` lines,
/// so the output always reassembles to the input bytes.
pub fn disassemble(image: &[u8]) -> Result<String, AsmError> {
    if image.len() % 4 != 0 {
        return Err(AsmError::UnalignedImage(image.len()));
    }
    let mut out = String::new();
    for chunk in image.chunks_exact(4) {
        let word = u32::from_le_bytes(chunk.try_into().unwrap());
        match isa::decode(word) {
            Some(i) => {
                let _ = writeln!(out, "{}", render(i));
            }
            None => {
                let _ = writeln!(out, ".word {word:#010x}");
            }
        }
    }
    Ok(out)
}
