//! Best-effort reader for Intel-syntax listings (objdump `-M intel` or
//! IDA-style text), one instruction per line.
//!
//! Reference classes are recovered from a [`SectionMap`] of address
//! ranges, since the listing alone cannot tell a `.bss` variable from a
//! constant.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use super::{
    Compiler, FunctionRecord, InstructionRecord, MemExpr, OperandKind, OperandMeta, OptLevel,
    RefClass,
};
use crate::error::{Error, Result};
use crate::normalizer::{is_call, is_jump, register_token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SectionKind {
    Text,
    PltGot,
    Bss,
    Data,
    RodataString,
}

/// Address-range hints used to classify address-valued operands.
#[derive(Clone, Debug, Default)]
pub struct SectionMap {
    ranges: Vec<(Range<u64>, SectionKind)>,
    libc: BTreeSet<String>,
    symbols: BTreeMap<u64, String>,
    strings: BTreeMap<u64, String>,
    function_start: Option<u64>,
}

impl SectionMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_range(mut self, range: Range<u64>, kind: SectionKind) -> Self {
        self.ranges.push((range, kind));
        self
    }

    /// Names treated as libc functions when they are call targets.
    pub fn with_libc<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.libc.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn with_symbol(mut self, addr: u64, name: &str) -> Self {
        self.symbols.insert(addr, name.to_string());
        self
    }

    pub fn with_string(mut self, addr: u64, s: &str) -> Self {
        self.strings.insert(addr, s.to_string());
        self
    }

    pub fn with_function_start(mut self, addr: u64) -> Self {
        self.function_start = Some(addr);
        self
    }

    fn kinds_at(&self, addr: u64) -> Vec<SectionKind> {
        let mut kinds: Vec<_> = self
            .ranges
            .iter()
            .filter(|(r, _)| r.contains(&addr))
            .map(|(_, k)| *k)
            .collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }
}

struct Ctx<'a> {
    hints: &'a SectionMap,
    function_start: u64,
    warnings: Vec<String>,
    bos_consts: Vec<i64>,
    bos_strings: Vec<String>,
}

impl Ctx<'_> {
    /// Section kind for an address; overlapping hints resolve to the first
    /// kind in call > jump > reference order and leave a warning.
    fn kind(&mut self, addr: u64, prefer_code: bool) -> Option<SectionKind> {
        let kinds = self.hints.kinds_at(addr);
        if kinds.len() > 1 {
            self.warnings.push(format!(
                "address {addr:#x} matches several sections {kinds:?}"
            ));
            if prefer_code {
                return kinds.into_iter().next();
            }
            return kinds
                .into_iter()
                .find(|k| !matches!(k, SectionKind::Text | SectionKind::PltGot));
        }
        kinds.into_iter().next()
    }

    fn call_class(&mut self, addr: u64, annotation: Option<&str>) -> RefClass {
        let name = annotation
            .map(|a| a.split('@').next().unwrap_or(a).to_string())
            .or_else(|| self.hints.symbols.get(&addr).cloned());
        if let Some(name) = name {
            if self.hints.libc.contains(&name) {
                return RefClass::Libc(name);
            }
        }
        if addr == self.function_start {
            return RefClass::SelfCall;
        }
        match self.kind(addr, true) {
            Some(SectionKind::Text) => RefClass::InnerFunc,
            Some(SectionKind::PltGot) => RefClass::ExternFunc,
            _ => RefClass::None,
        }
    }

    fn data_class(&mut self, addr: u64) -> RefClass {
        let class = match self.kind(addr, false) {
            Some(SectionKind::RodataString) => RefClass::StringRef,
            Some(SectionKind::Bss) => RefClass::BssRef,
            Some(SectionKind::Data) => RefClass::DataRef,
            Some(SectionKind::Text) | Some(SectionKind::PltGot) => {
                self.warnings.push(format!(
                    "code address {addr:#x} used as a value; classified as none"
                ));
                RefClass::None
            }
            None => RefClass::None,
        };
        if class == RefClass::StringRef {
            if let Some(s) = self.hints.strings.get(&addr) {
                self.bos_strings.push(s.clone());
            }
        }
        class
    }
}

const PREFIXES: [&str; 12] = [
    "rep", "repe", "repz", "repne", "repnz", "lock", "bnd", "notrack", "data16", "addr32", "xacquire",
    "xrelease",
];

/// Parses one function listing.
pub fn parse_asm_text(text: &str, hints: &SectionMap) -> Result<FunctionRecord> {
    parse_asm_text_with_warnings(text, hints).map(|(r, _)| r)
}

/// As [`parse_asm_text`], also returning classification warnings (for
/// example addresses matched by more than one section hint).
pub fn parse_asm_text_with_warnings(
    text: &str,
    hints: &SectionMap,
) -> Result<(FunctionRecord, Vec<String>)> {
    let mut function_name = String::new();
    let mut lines = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        // objdump function header: "0000000000401126 <main>:"
        if line.ends_with(">:") {
            if let (Some(a), Some(b)) = (line.find('<'), line.rfind('>')) {
                function_name = line[a + 1..b].to_string();
            }
            continue;
        }
        lines.push(split_line(line)?);
    }

    let function_start = hints
        .function_start
        .or_else(|| lines.iter().find_map(|l| l.address))
        .unwrap_or(0);
    let mut ctx = Ctx {
        hints,
        function_start,
        warnings: Vec::new(),
        bos_consts: Vec::new(),
        bos_strings: Vec::new(),
    };

    let mut instructions = Vec::new();
    let mut next_addr = function_start;
    for line in &lines {
        let address = line.address.unwrap_or(next_addr);
        next_addr = address + 1;
        instructions.push(parse_instruction(address, line, &mut ctx)?);
    }

    if function_name.is_empty() {
        if let Some(name) = hints.symbols.get(&function_start) {
            function_name = name.clone();
        }
    }
    let record = FunctionRecord {
        binary_id: String::new(),
        testsuite: String::new(),
        compiler: Compiler::Other(String::new()),
        opt_level: OptLevel::Unknown,
        function_name,
        instructions,
        bos_constants: ctx.bos_consts,
        bos_strings: ctx.bos_strings,
    };
    Ok((record, ctx.warnings))
}

struct Line {
    address: Option<u64>,
    body: String,
    /// Target printed in a trailing `# 0x...` comment (rip-relative).
    comment_target: Option<u64>,
    /// Symbol printed as `<name>` after a branch target.
    annotation: Option<String>,
}

fn split_line(line: &str) -> Result<Line> {
    let mut rest = line;
    let mut address = None;
    if let Some(colon) = rest.find(':') {
        let head = rest[..colon].trim();
        let head = head.strip_prefix("0x").unwrap_or(head);
        if !head.is_empty() && head.chars().all(|c| c.is_ascii_hexdigit()) {
            address = u64::from_str_radix(head, 16).ok();
            rest = &rest[colon + 1..];
        }
    }
    // objdump "addr:\tbytes\tinstruction"
    let parts: Vec<&str> = rest.split('\t').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.len() >= 2 && is_byte_dump(parts[0]) {
        rest = parts[1];
    } else {
        rest = rest.trim();
    }

    let mut comment_target = None;
    let mut body = rest;
    for marker in ['#', ';'] {
        if let Some(pos) = body.find(marker) {
            let comment = body[pos + 1..].trim();
            let first = comment.split_whitespace().next().unwrap_or("");
            comment_target = comment_target.or_else(|| parse_hex_address(first, marker == '#'));
            body = &body[..pos];
        }
    }
    let mut annotation = None;
    let mut clean = String::new();
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '<' {
            let name: String = chars.by_ref().take_while(|&c| c != '>').collect();
            annotation = Some(name);
        } else {
            clean.push(c);
        }
    }
    Ok(Line {
        address,
        body: clean.trim().to_string(),
        comment_target,
        annotation,
    })
}

fn is_byte_dump(s: &str) -> bool {
    s.split_whitespace()
        .all(|b| b.len() == 2 && b.chars().all(|c| c.is_ascii_hexdigit()))
}

/// Hex address; objdump's `#` comments print it without `0x`, which is
/// accepted only when `bare` is set.
fn parse_hex_address(s: &str, bare: bool) -> Option<u64> {
    let s = match s.strip_prefix("0x") {
        Some(h) => h,
        None if bare => s,
        None => return None,
    };
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(s, 16).ok()
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()?
    } else if let Some(h) = body.strip_suffix('h').filter(|h| h.chars().all(|c| c.is_ascii_hexdigit())) {
        u64::from_str_radix(h, 16).ok()?
    } else {
        body.parse::<u64>().ok()?
    } as i64;
    Some(if neg { v.wrapping_neg() } else { v })
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_instruction(address: u64, line: &Line, ctx: &mut Ctx) -> Result<InstructionRecord> {
    let mut words = line.body.split_whitespace().peekable();
    let mut mnemonic_parts = Vec::new();
    while let Some(w) = words.peek() {
        let lw = w.to_ascii_lowercase();
        let is_prefix = PREFIXES.contains(&lw.as_str()) || lw.starts_with("rex");
        mnemonic_parts.push(lw);
        words.next();
        if !is_prefix {
            break;
        }
    }
    if mnemonic_parts.is_empty() {
        return Err(Error::Operand {
            text: line.body.clone(),
            reason: "no mnemonic".into(),
        });
    }
    let mnemonic = mnemonic_parts.join(" ");
    let operand_text: String = words.collect::<Vec<_>>().join(" ");
    let call = is_call(&mnemonic);
    let jump = is_jump(&mnemonic);
    let is_lea = mnemonic.ends_with("lea");

    let mut operands = Vec::new();
    for (i, text) in split_operands(&operand_text).into_iter().enumerate() {
        let branch_target = i == 0 && (call || jump);
        let mut op = parse_operand(&text, branch_target)?;
        match op.kind {
            OperandKind::Immediate => {
                let value = op.value.unwrap_or_default();
                op.ref_class = if branch_target && call {
                    ctx.call_class(value as u64, line.annotation.as_deref())
                } else if branch_target {
                    RefClass::JmpDst
                } else {
                    ctx.data_class(value as u64)
                };
                if op.ref_class == RefClass::None {
                    ctx.bos_consts.push(value);
                }
            }
            OperandKind::Memory => {
                let mem = op.mem_expr.as_mut().expect("memory operand");
                let rip = mem
                    .base
                    .as_deref()
                    .is_some_and(|b| b.eq_ignore_ascii_case("rip"));
                let target = if rip {
                    line.comment_target
                } else {
                    mem.displacement.map(|d| d as u64)
                };
                if let Some(t) = target {
                    mem.disp_ref = ctx.data_class(t);
                }
                if is_lea && i == 1 {
                    op.size_bytes = None;
                }
            }
            OperandKind::Register => {}
        }
        operands.push(op);
    }
    Ok(InstructionRecord {
        address,
        mnemonic,
        operands,
        basic_block_id: None,
    })
}

const SIZE_WORDS: [(&str, u8); 10] = [
    ("byte", 1),
    ("word", 2),
    ("dword", 4),
    ("qword", 8),
    ("tbyte", 10),
    ("xword", 16),
    ("oword", 16),
    ("xmmword", 16),
    ("ymmword", 32),
    ("zmmword", 64),
];

fn parse_operand(text: &str, branch_target: bool) -> Result<OperandMeta> {
    let err = |reason: &str| Error::Operand {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    let lower = text.trim().to_ascii_lowercase();
    if lower.is_empty() {
        return Err(err("empty operand"));
    }

    // size keyword
    let mut rest = lower.as_str();
    let mut size = None;
    if let Some(ptr) = rest.find(" ptr") {
        let word = rest[..ptr].trim();
        size = Some(
            SIZE_WORDS
                .iter()
                .find(|(w, _)| *w == word)
                .map(|(_, s)| *s)
                .ok_or_else(|| err("unknown size keyword"))?,
        );
        rest = rest[ptr + 4..].trim();
    }

    // segment override: "fs:[...]" or "fs:0x28"
    let mut segment = None;
    if let Some(colon) = rest.find(':') {
        let seg = &rest[..colon];
        if matches!(seg, "cs" | "ds" | "es" | "fs" | "gs" | "ss") {
            segment = Some(seg.to_string());
            rest = rest[colon + 1..].trim();
        }
    }

    if rest.starts_with('[') || size.is_some() || segment.is_some() {
        let inner = rest.trim_start_matches('[').trim_end_matches(']');
        let mem = parse_mem_expr(inner).map_err(|r| err(&r))?;
        let mut op = OperandMeta::memory(text.trim(), size, mem);
        op.segment_prefix = segment;
        return Ok(op);
    }

    if register_token(rest).is_some() {
        return Ok(OperandMeta::register(rest));
    }
    // objdump prints branch targets as bare hex
    let bare_hex = || u64::from_str_radix(rest, 16).ok().map(|v| v as i64);
    let value = if branch_target {
        bare_hex().or_else(|| parse_number(rest))
    } else {
        parse_number(rest)
    };
    match value {
        Some(v) => {
            let mut op = OperandMeta::immediate(v, RefClass::None);
            op.raw_text = text.trim().to_string();
            Ok(op)
        }
        None => Err(err("not a register, immediate or memory operand")),
    }
}

fn parse_mem_expr(inner: &str) -> std::result::Result<MemExpr, String> {
    let mut mem = MemExpr::default();
    let mut disp: Option<i64> = None;
    let mut term = String::new();
    let mut sign = 1i64;
    let mut terms = Vec::new();
    for c in inner.chars().filter(|c| !c.is_whitespace()) {
        if c == '+' || c == '-' {
            if !term.is_empty() {
                terms.push((sign, std::mem::take(&mut term)));
            }
            sign = if c == '-' { -1 } else { 1 };
        } else {
            term.push(c);
        }
    }
    if !term.is_empty() {
        terms.push((sign, term));
    }
    for (sign, t) in terms {
        if let Some((reg, scale)) = t.split_once('*') {
            let (reg, scale) = if register_token(reg).is_some() {
                (reg, scale)
            } else {
                (scale, reg)
            };
            if register_token(reg).is_none() {
                return Err(format!("bad index term {t}"));
            }
            let s = parse_number(scale).ok_or_else(|| format!("bad scale {scale}"))?;
            if ![1, 2, 4, 8].contains(&s) {
                return Err(format!("scale {s} not in {{1,2,4,8}}"));
            }
            mem.index = Some(reg.to_string());
            mem.scale = Some(s as u8);
        } else if register_token(&t).is_some() {
            if sign < 0 {
                return Err(format!("negated register {t}"));
            }
            if mem.base.is_none() {
                mem.base = Some(t);
            } else if mem.index.is_none() {
                mem.index = Some(t);
            } else {
                return Err("more than two registers".into());
            }
        } else {
            let v = parse_number(&t).ok_or_else(|| format!("bad term {t}"))?;
            disp = Some(disp.unwrap_or(0).wrapping_add(sign.wrapping_mul(v)));
        }
    }
    if mem.base.is_none() && mem.index.is_none() && disp.is_none() {
        return Err("empty memory expression".into());
    }
    mem.displacement = disp;
    Ok(mem)
}
