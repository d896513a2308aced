// SPDX-License-Identifier: Apache-2.0

//! Textual assembler and disassembler.
//!
//! One instruction per line, `mnemonic dst, src|imm[, offset]`. Comments
//! start with `;` or `#`. Labels are `name:` and may prefix an instruction.
//! Directives:
//!
//! ```text
//! section seccomp|seccomp-sleepable [name]
//! map <name> <array|hash|task_storage|prog_array> <key_size> <value_size> <max_entries>
//! entry <map> <key> <value>
//! ```
//!
//! `entry` seeds a map at load time; for a `prog_array` the value may name a
//! section. Immediates are decimal or `0x` hex; `@name` is the index of a
//! declared map.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use thiserror::Error;

use crate::isa::{AluOp, HelperId, Instruction, JmpCond, Opcode, Operand, NUM_REGS};
use crate::maps::MapKind;
use crate::program::{FilterProgram, MapDef, ProgramBundle, SECTION_SECCOMP, SECTION_SLEEPABLE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub column: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("register r{0} out of range")]
    RegisterOutOfRange(u64),
    #[error("unknown map `{0}`")]
    UnknownMap(String),
    #[error("source holds {0} programs; expected exactly one")]
    ProgramCount(usize),
}

type Result<T> = core::result::Result<T, AsmError>;

#[derive(Clone, Copy)]
struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn err(line: usize, col: usize, kind: AsmErrorKind) -> AsmError {
    AsmError {
        line,
        column: col,
        kind,
    }
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> AsmError {
    err(line, col, AsmErrorKind::Syntax(msg.into()))
}

/// Splits `s` (starting at 1-based column `base`) on `sep`, trimming parts.
fn split_tokens(s: &str, base: usize, sep: char) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in s.char_indices().chain(core::iter::once((s.len(), sep))) {
        if c == sep {
            let raw = &s[start..i];
            let lead = raw.len() - raw.trim_start().len();
            let text = raw.trim();
            if !text.is_empty() || sep == ',' {
                out.push(Tok {
                    text,
                    col: base + start + lead,
                });
            }
            start = i + c.len_utf8();
        }
    }
    out
}

fn parse_int(tok: Tok<'_>, line: usize) -> Result<i64> {
    let t = tok.text;
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let parsed = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse::<u64>().ok()
    } else {
        None
    };
    let v = parsed.ok_or_else(|| syntax(line, tok.col, format!("invalid integer `{t}`")))?;
    Ok(if neg {
        (v as i64).wrapping_neg()
    } else {
        v as i64
    })
}

fn parse_reg(tok: Tok<'_>, line: usize) -> Result<u8> {
    let body = tok
        .text
        .strip_prefix('r')
        .filter(|b| !b.is_empty() && b.bytes().all(|c| c.is_ascii_digit()))
        .ok_or_else(|| syntax(line, tok.col, format!("expected register, found `{}`", tok.text)))?;
    let n: u64 = body
        .parse()
        .map_err(|_| err(line, tok.col, AsmErrorKind::RegisterOutOfRange(u64::MAX)))?;
    if n as usize >= NUM_REGS {
        return Err(err(line, tok.col, AsmErrorKind::RegisterOutOfRange(n)));
    }
    Ok(n as u8)
}

fn is_reg(tok: Tok<'_>) -> bool {
    tok.text.len() > 1 && tok.text.starts_with('r') && tok.text[1..].bytes().all(|b| b.is_ascii_digit())
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

enum Imm<'a> {
    Value(i64),
    Map(Tok<'a>),
}

enum Target<'a> {
    Offset(i16),
    Label(Tok<'a>),
}

struct PendingInsn<'a> {
    insn: Instruction,
    line: usize,
    imm: Option<Imm<'a>>,
    target: Option<Target<'a>>,
}

struct Section<'a> {
    name: String,
    sleepable: bool,
    insns: Vec<PendingInsn<'a>>,
    labels: BTreeMap<&'a str, usize>,
}

struct Parsed<'a> {
    sections: Vec<Section<'a>>,
    maps: Vec<MapDef>,
    /// Prog-array entries naming a section: (map index, entry index, name, line, col).
    section_refs: Vec<(usize, usize, Tok<'a>, usize)>,
}

fn imm_operand<'a>(tok: Tok<'a>, line: usize) -> Result<Imm<'a>> {
    if let Some(name) = tok.text.strip_prefix('@') {
        if !is_ident(name) {
            return Err(syntax(line, tok.col, "invalid map reference"));
        }
        return Ok(Imm::Map(tok));
    }
    parse_int(tok, line).map(Imm::Value)
}

fn target_operand<'a>(tok: Tok<'a>, line: usize) -> Result<Target<'a>> {
    if tok.text.starts_with(['+', '-']) || tok.text.bytes().next().is_some_and(|b| b.is_ascii_digit()) {
        let v = parse_int(tok, line)?;
        let off = i16::try_from(v).map_err(|_| syntax(line, tok.col, "jump offset out of range"))?;
        return Ok(Target::Offset(off));
    }
    if !is_ident(tok.text) {
        return Err(syntax(line, tok.col, format!("invalid label `{}`", tok.text)));
    }
    Ok(Target::Label(tok))
}

fn expect_ops<'a>(ops: &[Tok<'a>], n: usize, line: usize, col: usize, mnemonic: &str) -> Result<()> {
    if ops.len() != n || ops.iter().any(|t| t.text.is_empty()) {
        return Err(syntax(
            line,
            col,
            format!("`{mnemonic}` takes {n} operand(s), found {}", ops.iter().filter(|t| !t.text.is_empty()).count()),
        ));
    }
    Ok(())
}

fn parse_instruction<'a>(mn: Tok<'a>, ops: &[Tok<'a>], line: usize) -> Result<PendingInsn<'a>> {
    let m = mn.text;
    let mut p = PendingInsn {
        insn: Instruction::exit(),
        line,
        imm: None,
        target: None,
    };
    if let Some(op) = AluOp::ALL.iter().copied().find(|o| o.mnemonic() == m) {
        expect_ops(ops, 2, line, mn.col, m)?;
        let dst = parse_reg(ops[0], line)?;
        if is_reg(ops[1]) {
            p.insn = Instruction::alu_reg(op, dst, parse_reg(ops[1], line)?);
        } else {
            p.insn = Instruction::new(Opcode::Alu(op, Operand::Imm), dst, 0, 0, 0);
            p.imm = Some(imm_operand(ops[1], line)?);
        }
        return Ok(p);
    }
    if let Some(cond) = JmpCond::ALL.iter().copied().find(|c| c.mnemonic() == m) {
        expect_ops(ops, 3, line, mn.col, m)?;
        let dst = parse_reg(ops[0], line)?;
        if is_reg(ops[1]) {
            p.insn = Instruction::new(Opcode::Jmp(cond, Operand::Reg), dst, parse_reg(ops[1], line)?, 0, 0);
        } else {
            p.insn = Instruction::new(Opcode::Jmp(cond, Operand::Imm), dst, 0, 0, 0);
            p.imm = Some(imm_operand(ops[1], line)?);
        }
        p.target = Some(target_operand(ops[2], line)?);
        return Ok(p);
    }
    match m {
        "ja" | "jmp" => {
            expect_ops(ops, 1, line, mn.col, m)?;
            p.insn = Instruction::new(Opcode::Ja, 0, 0, 0, 0);
            p.target = Some(target_operand(ops[0], line)?);
        }
        "ld_imm64" => {
            expect_ops(ops, 2, line, mn.col, m)?;
            p.insn = Instruction::ld_imm64(parse_reg(ops[0], line)?, 0);
            p.imm = Some(imm_operand(ops[1], line)?);
        }
        "ld_ctx" => {
            expect_ops(ops, 3, line, mn.col, m)?;
            let dst = parse_reg(ops[0], line)?;
            let width = parse_int(ops[1], line)?;
            let off = i16::try_from(parse_int(ops[2], line)?)
                .map_err(|_| syntax(line, ops[2].col, "offset out of range"))?;
            p.insn = Instruction::ld_ctx(dst, width, off);
        }
        "ld_map" | "st_map" => {
            expect_ops(ops, 3, line, mn.col, m)?;
            let dst = parse_reg(ops[0], line)?;
            let src = parse_reg(ops[1], line)?;
            let off = i16::try_from(parse_int(ops[2], line)?)
                .map_err(|_| syntax(line, ops[2].col, "offset out of range"))?;
            let opc = if m == "ld_map" { Opcode::LdMap } else { Opcode::StMap };
            p.insn = Instruction::new(opc, dst, src, off, 0);
        }
        "call" => {
            expect_ops(ops, 1, line, mn.col, m)?;
            let id = match HelperId::from_name(ops[0].text) {
                Some(h) => h as i64,
                None => parse_int(ops[0], line)?,
            };
            p.insn = Instruction::new(Opcode::Call, 0, 0, 0, id);
        }
        "tail_call" => {
            expect_ops(ops, 2, line, mn.col, m)?;
            p.insn = Instruction::new(Opcode::TailCall, parse_reg(ops[0], line)?, 0, 0, 0);
            p.imm = Some(imm_operand(ops[1], line)?);
        }
        "exit" => {
            if !(ops.is_empty() || (ops.len() == 1 && ops[0].text.is_empty())) {
                return Err(syntax(line, mn.col, "`exit` takes no operands"));
            }
        }
        other => {
            return Err(err(line, mn.col, AsmErrorKind::UnknownMnemonic(other.to_string())));
        }
    }
    Ok(p)
}

fn parse(source: &str) -> Result<Parsed<'_>> {
    let mut parsed = Parsed {
        sections: Vec::new(),
        maps: Vec::new(),
        section_refs: Vec::new(),
    };
    let mut entry_tokens: Vec<(usize, Tok<'_>, Tok<'_>, Tok<'_>)> = Vec::new();

    for (idx, raw_line) in source.lines().enumerate() {
        let line = idx + 1;
        let code = match raw_line.find([';', '#']) {
            Some(i) => &raw_line[..i],
            None => raw_line,
        };
        let mut rest = code;
        let mut base = 1;
        // label prefix
        if let Some(colon) = rest.find(':') {
            let label = rest[..colon].trim();
            let lead = rest.len() - rest.trim_start().len();
            if !is_ident(label) {
                return Err(syntax(line, base + lead, format!("invalid label `{label}`")));
            }
            if parsed.sections.is_empty() {
                parsed.sections.push(default_section());
            }
            let sec = parsed.sections.last_mut().expect("section");
            let at = sec.insns.len();
            if sec.labels.insert(label, at).is_some() {
                return Err(syntax(line, base + lead, format!("duplicate label `{label}`")));
            }
            base += colon + 1;
            rest = &rest[colon + 1..];
        }
        let lead = rest.len() - rest.trim_start().len();
        let body = rest.trim();
        if body.is_empty() {
            continue;
        }
        let col = base + lead;
        let (mn_text, operands) = match body.find(char::is_whitespace) {
            Some(i) => (&body[..i], &body[i..]),
            None => (body, ""),
        };
        let mn = Tok { text: mn_text, col };
        let ops_base = col + mn_text.len();
        match mn_text {
            "section" => {
                let words = split_tokens(operands, ops_base, ' ');
                let kind = words.first().ok_or_else(|| syntax(line, col, "section needs a name"))?;
                let sleepable = match kind.text {
                    SECTION_SECCOMP => false,
                    SECTION_SLEEPABLE => true,
                    other => {
                        return Err(syntax(line, kind.col, format!("unknown section `{other}`")));
                    }
                };
                if words.len() > 2 {
                    return Err(syntax(line, words[2].col, "unexpected token"));
                }
                let name = match words.get(1) {
                    Some(t) if is_ident(t.text) => t.text.to_string(),
                    Some(t) => return Err(syntax(line, t.col, "invalid section label")),
                    None if parsed.sections.is_empty() => "main".to_string(),
                    None => format!("prog{}", parsed.sections.len()),
                };
                // an implicit default section with nothing in it is replaced
                if parsed.sections.len() == 1
                    && parsed.sections[0].insns.is_empty()
                    && parsed.sections[0].labels.is_empty()
                    && parsed.sections[0].name.is_empty()
                {
                    parsed.sections.clear();
                }
                if parsed.sections.iter().any(|s| s.name == name) {
                    return Err(syntax(line, col, format!("duplicate section `{name}`")));
                }
                parsed.sections.push(Section {
                    name,
                    sleepable,
                    insns: Vec::new(),
                    labels: BTreeMap::new(),
                });
            }
            "map" => {
                let w = split_tokens(operands, ops_base, ' ');
                if w.len() != 5 {
                    return Err(syntax(line, col, "map takes <name> <kind> <key_size> <value_size> <max_entries>"));
                }
                if !is_ident(w[0].text) {
                    return Err(syntax(line, w[0].col, "invalid map name"));
                }
                if parsed.maps.iter().any(|m| m.name == w[0].text) {
                    return Err(syntax(line, w[0].col, format!("duplicate map `{}`", w[0].text)));
                }
                let kind = MapKind::from_name(w[1].text)
                    .ok_or_else(|| syntax(line, w[1].col, format!("unknown map kind `{}`", w[1].text)))?;
                let size = |t: Tok<'_>| -> Result<u32> {
                    let v = parse_int(t, line)?;
                    u32::try_from(v).map_err(|_| syntax(line, t.col, "size out of range"))
                };
                parsed.maps.push(MapDef::new(w[0].text, kind, size(w[2])?, size(w[3])?, size(w[4])?));
            }
            "entry" => {
                let w = split_tokens(operands, ops_base, ' ');
                if w.len() != 3 {
                    return Err(syntax(line, col, "entry takes <map> <key> <value>"));
                }
                entry_tokens.push((line, w[0], w[1], w[2]));
            }
            _ => {
                let ops = if operands.trim().is_empty() {
                    Vec::new()
                } else {
                    split_tokens(operands, ops_base, ',')
                };
                let insn = parse_instruction(mn, &ops, line)?;
                if parsed.sections.is_empty() {
                    parsed.sections.push(default_section());
                }
                parsed.sections.last_mut().expect("section").insns.push(insn);
            }
        }
    }

    for (line, map_tok, key_tok, val_tok) in entry_tokens {
        let mi = parsed
            .maps
            .iter()
            .position(|m| m.name == map_tok.text)
            .ok_or_else(|| err(line, map_tok.col, AsmErrorKind::UnknownMap(map_tok.text.into())))?;
        let key = parse_int(key_tok, line)? as u64;
        let value = if parsed.maps[mi].kind == MapKind::ProgArray && is_ident(val_tok.text) {
            parsed.section_refs.push((mi, parsed.maps[mi].entries.len(), val_tok, line));
            0
        } else {
            parse_int(val_tok, line)? as u64
        };
        parsed.maps[mi].entries.push((key, value));
    }
    Ok(parsed)
}

fn default_section<'a>() -> Section<'a> {
    Section {
        name: String::new(),
        sleepable: false,
        insns: Vec::new(),
        labels: BTreeMap::new(),
    }
}

fn resolve(parsed: Parsed<'_>) -> Result<ProgramBundle> {
    let Parsed {
        mut sections,
        mut maps,
        section_refs,
    } = parsed;
    if sections.is_empty() {
        sections.push(default_section());
    }
    for s in sections.iter_mut() {
        if s.name.is_empty() {
            s.name = "main".into();
        }
    }
    for (mi, ei, tok, line) in section_refs {
        let idx = sections
            .iter()
            .position(|s| s.name == tok.text)
            .ok_or_else(|| err(line, tok.col, AsmErrorKind::UnresolvedLabel(tok.text.into())))?;
        maps[mi].entries[ei].1 = idx as u64;
    }
    let mut programs = Vec::with_capacity(sections.len());
    for sec in sections {
        let mut instructions = Vec::with_capacity(sec.insns.len());
        for (pc, p) in sec.insns.iter().enumerate() {
            let mut insn = p.insn;
            match &p.imm {
                Some(Imm::Value(v)) => insn.imm = *v,
                Some(Imm::Map(tok)) => {
                    let name = &tok.text[1..];
                    let mi = maps
                        .iter()
                        .position(|m| m.name == name)
                        .ok_or_else(|| err(p.line, tok.col, AsmErrorKind::UnknownMap(name.into())))?;
                    insn.imm = mi as i64;
                }
                None => {}
            }
            match &p.target {
                Some(Target::Offset(o)) => insn.offset = *o,
                Some(Target::Label(tok)) => {
                    let at = *sec
                        .labels
                        .get(tok.text)
                        .ok_or_else(|| err(p.line, tok.col, AsmErrorKind::UnresolvedLabel(tok.text.into())))?;
                    let off = at as i64 - pc as i64 - 1;
                    insn.offset = i16::try_from(off)
                        .map_err(|_| syntax(p.line, tok.col, "jump distance exceeds 16 bits"))?;
                }
                None => {}
            }
            instructions.push(insn);
        }
        let mut prog = FilterProgram::new(instructions, sec.sleepable);
        prog.name = sec.name;
        programs.push(prog);
    }
    for p in programs.iter_mut() {
        p.maps = maps.clone();
    }
    Ok(ProgramBundle { programs })
}

/// Assembles a single-program source.
pub fn assemble(source: &str) -> Result<FilterProgram> {
    let bundle = assemble_bundle(source)?;
    if bundle.programs.len() != 1 {
        return Err(err(1, 1, AsmErrorKind::ProgramCount(bundle.programs.len())));
    }
    Ok(bundle.programs.into_iter().next().expect("one program"))
}

/// Assembles a source that may contain several sections sharing one map table.
pub fn assemble_bundle(source: &str) -> Result<ProgramBundle> {
    resolve(parse(source)?)
}

fn fmt_imm(v: i64) -> String {
    if (0..0x1000).contains(&v) || (-0x1000..0).contains(&v) {
        format!("{v}")
    } else if v < 0 {
        format!("-{:#x}", (v as i128).unsigned_abs())
    } else {
        format!("{v:#x}")
    }
}

fn write_maps(out: &mut String, maps: &[MapDef]) {
    for m in maps {
        let _ = writeln!(
            out,
            "map {} {} {} {} {}",
            m.name,
            m.kind.name(),
            m.key_size,
            m.value_size,
            m.max_entries
        );
    }
    for m in maps {
        for (k, v) in &m.entries {
            let _ = writeln!(out, "entry {} {} {}", m.name, k, v);
        }
    }
}

fn write_body(out: &mut String, prog: &FilterProgram) {
    let n = prog.instructions.len();
    let mut targets = BTreeMap::new();
    for (pc, insn) in prog.instructions.iter().enumerate() {
        if let Some(t) = insn.jump_target(pc) {
            if (0..=n as i64).contains(&t) {
                let next = targets.len();
                targets.entry(t as usize).or_insert(next);
            }
        }
    }
    // renumber labels in address order
    let mut order: Vec<usize> = targets.keys().copied().collect();
    order.sort_unstable();
    let labels: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, pc)| (*pc, i)).collect();

    for (pc, insn) in prog.instructions.iter().enumerate() {
        if let Some(l) = labels.get(&pc) {
            let _ = writeln!(out, "L{l}:");
        }
        let target = |insn: &Instruction| match insn.jump_target(pc).and_then(|t| labels.get(&(t as usize)).filter(|_| t >= 0)) {
            Some(l) => format!("L{l}"),
            None => format!("{:+}", insn.offset),
        };
        let text = match insn.opcode {
            Opcode::Alu(op, Operand::Imm) => format!("{} r{}, {}", op.mnemonic(), insn.dst, fmt_imm(insn.imm)),
            Opcode::Alu(op, Operand::Reg) => format!("{} r{}, r{}", op.mnemonic(), insn.dst, insn.src),
            Opcode::Jmp(c, Operand::Imm) => {
                format!("{} r{}, {}, {}", c.mnemonic(), insn.dst, fmt_imm(insn.imm), target(insn))
            }
            Opcode::Jmp(c, Operand::Reg) => {
                format!("{} r{}, r{}, {}", c.mnemonic(), insn.dst, insn.src, target(insn))
            }
            Opcode::Ja => format!("ja {}", target(insn)),
            Opcode::LdImm64 => format!("ld_imm64 r{}, {}", insn.dst, fmt_imm(insn.imm)),
            Opcode::LdCtx => format!("ld_ctx r{}, {}, {}", insn.dst, insn.imm, insn.offset),
            Opcode::LdMap => format!("ld_map r{}, r{}, {}", insn.dst, insn.src, insn.offset),
            Opcode::StMap => format!("st_map r{}, r{}, {}", insn.dst, insn.src, insn.offset),
            Opcode::Call => match HelperId::from_id(insn.imm) {
                Some(h) => format!("call {}", h.name()),
                None => format!("call {}", insn.imm),
            },
            Opcode::TailCall => format!("tail_call r{}, {}", insn.dst, insn.imm),
            Opcode::Exit => "exit".into(),
        };
        let _ = writeln!(out, "  {text}");
    }
    if let Some(l) = labels.get(&n) {
        let _ = writeln!(out, "L{l}:");
    }
}

/// Renders a program as assembly accepted by [`assemble`].
///
/// Register fields an opcode does not use are not printed, so programs
/// produced by the assembler round-trip exactly.
pub fn disassemble(program: &FilterProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "section {}", program.section_name);
    write_maps(&mut out, &program.maps);
    write_body(&mut out, program);
    out
}

pub fn disassemble_bundle(bundle: &ProgramBundle) -> String {
    let mut out = String::new();
    write_maps(&mut out, bundle.maps());
    for p in &bundle.programs {
        let _ = writeln!(out, "section {} {}", p.section_name, p.name);
        write_body(&mut out, p);
    }
    out
}
