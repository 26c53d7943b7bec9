//! Rewrites each disassembled instruction into a single token string.
//!
//! Three granularities are supported. `Balanced` keeps register widths,
//! the role of every address-valued immediate (libc call, recursive call,
//! call inside or outside the binary, jump destination, string / bss /
//! data reference) and the shape of pointer expressions, while collapsing
//! raw values. `Coarse` reduces immediates to `immval` and memory operands
//! to `ptr`. `Fine` only replaces immediates and keeps everything else as
//! disassembled.
//!
//! The opcode is never rewritten: the token always starts with the
//! mnemonic (prefixes included) with whitespace removed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    Compiler, FunctionRecord, InstructionRecord, MemExpr, OperandKind, OperandMeta, OptLevel,
    RefClass,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Balanced,
    Coarse,
    Fine,
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(NormMode::Balanced),
            "coarse" => Ok(NormMode::Coarse),
            "fine" => Ok(NormMode::Fine),
            other => Err(Error::UnknownLiteral {
                what: "mode",
                literal: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Balanced => "balanced",
            NormMode::Coarse => "coarse",
            NormMode::Fine => "fine",
        })
    }
}

/// Role of an immediate operand within its instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperandContext {
    CallTarget,
    JumpTarget,
    Other,
}

/// Normalization settings; `Normalizer::new` gives the standard ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mode: NormMode,
    /// Displacements with magnitude up to this value are kept as literals
    /// (`[bp8-8]`), larger ones become `disp`.
    pub small_disp_limit: u64,
    /// When set, bss and data displacements inside pointer expressions get
    /// their own tokens (`dispbss`, `dispdata`); otherwise only string
    /// references are distinguished from plain `disp`.
    pub tag_data_refs_in_pointers: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer::new(NormMode::Balanced)
    }
}

/// Identity of a function across the pipeline.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FunctionId {
    pub binary_id: String,
    pub testsuite: String,
    pub function_name: String,
    pub compiler: Compiler,
    pub opt_level: OptLevel,
}

impl FunctionId {
    pub fn of(f: &FunctionRecord) -> Self {
        FunctionId {
            binary_id: f.binary_id.clone(),
            testsuite: f.testsuite.clone(),
            function_name: f.function_name.clone(),
            compiler: f.compiler.clone(),
            opt_level: f.opt_level,
        }
    }

    /// Build label such as `GO3` (gcc, -O3).
    pub fn build_tag(&self) -> String {
        format!("{}{}", self.compiler.tag(), self.opt_level)
    }
}

/// A function as an ordered list of normalized-instruction tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedFunction {
    pub id: FunctionId,
    pub tokens: Vec<String>,
    #[serde(rename = "bos_consts", default)]
    pub bos_constants: Vec<i64>,
    #[serde(default)]
    pub bos_strings: Vec<String>,
}

impl NormalizedFunction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Register class token, or `None` for names outside the x86-64 register file.
pub fn register_token(name: &str) -> Option<String> {
    let n = name.trim().to_ascii_lowercase().replace([' ', '(', ')'], "");
    let fixed = match n.as_str() {
        "rsp" => "sp8",
        "esp" => "sp4",
        "sp" => "sp2",
        "spl" => "sp1",
        "rbp" => "bp8",
        "ebp" => "bp4",
        "bp" => "bp2",
        "bpl" => "bp1",
        "rip" => "ip8",
        "eip" => "ip4",
        "ip" => "ip2",
        "rax" | "rbx" | "rcx" | "rdx" | "rsi" | "rdi" => "reg8",
        "eax" | "ebx" | "ecx" | "edx" | "esi" | "edi" => "reg4",
        "ax" | "bx" | "cx" | "dx" | "si" | "di" => "reg2",
        "al" | "bl" | "cl" | "dl" | "ah" | "bh" | "ch" | "dh" | "sil" | "dil" => "reg1",
        "cs" | "ds" | "es" | "fs" | "gs" | "ss" => return Some(format!("reg{n}")),
        "st" => "regst",
        _ => "",
    };
    if !fixed.is_empty() {
        return Some(fixed.to_string());
    }
    let numbered = |prefix: &str, max: u32| -> bool {
        n.strip_prefix(prefix)
            .and_then(|d| (!d.is_empty() && d.len() <= 2).then(|| d.parse::<u32>().ok()))
            .flatten()
            .is_some_and(|i| i <= max)
    };
    // r8..r15 with optional width suffix
    if let Some(rest) = n.strip_prefix('r') {
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if let Ok(i) = digits.parse::<u32>() {
            if (8..=15).contains(&i) {
                let width = match &rest[digits.len()..] {
                    "" => "reg8",
                    "d" => "reg4",
                    "w" => "reg2",
                    "b" | "l" => "reg1",
                    _ => return None,
                };
                return Some(width.to_string());
            }
        }
    }
    if numbered("cr", 15) {
        return Some("regcr".into());
    }
    if numbered("dr", 15) {
        return Some("regdr".into());
    }
    if numbered("st", 7) {
        return Some("regst".into());
    }
    for v in ["xmm", "ymm", "zmm"] {
        if numbered(v, 31) {
            return Some(format!("reg{v}"));
        }
    }
    if numbered("mm", 7) {
        return Some("regmm".into());
    }
    None
}

pub fn normalize_register(name: &str) -> Result<String> {
    register_token(name).ok_or_else(|| Error::UnknownRegister(name.to_string()))
}

/// Token for an immediate operand. Call-target classes win over the jump
/// class, which wins over reference classes, which win over `immval`.
pub fn normalize_immediate(op: &OperandMeta, ctx: OperandContext) -> Result<String> {
    if op.kind != OperandKind::Immediate {
        return Err(Error::InvalidOperand(format!(
            "{:?} is not an immediate",
            op.raw_text
        )));
    }
    if ctx == OperandContext::CallTarget {
        match &op.ref_class {
            RefClass::Libc(name) => return Ok(format!("libc{}", sanitize(name))),
            RefClass::SelfCall => return Ok("self".into()),
            RefClass::InnerFunc => return Ok("innerfunc".into()),
            RefClass::ExternFunc => return Ok("externfunc".into()),
            _ => {}
        }
    }
    if ctx == OperandContext::JumpTarget {
        return Ok("jmpdst".into());
    }
    Ok(match op.ref_class {
        RefClass::StringRef => "dispstr",
        RefClass::BssRef => "dispbss",
        RefClass::DataRef => "dispdata",
        _ => "immval",
    }
    .into())
}

pub fn normalize_memory(op: &OperandMeta, is_lea_src: bool, mode: NormMode) -> Result<String> {
    Normalizer::new(mode).memory(op, is_lea_src)
}

pub fn normalize_instruction(ins: &InstructionRecord, mode: NormMode) -> Result<String> {
    Normalizer::new(mode).instruction(ins)
}

pub fn normalize_function(f: &FunctionRecord, mode: NormMode) -> Result<NormalizedFunction> {
    Normalizer::new(mode).function(f)
}

/// `call` family (last word of the mnemonic, so prefixed forms count too).
pub fn is_call(mnemonic: &str) -> bool {
    let op = last_word(mnemonic);
    op == "call" || op == "callq"
}

/// Unconditional, conditional and loop jumps.
pub fn is_jump(mnemonic: &str) -> bool {
    let op = last_word(mnemonic);
    op.starts_with('j') || op.starts_with("loop")
}

fn last_word(mnemonic: &str) -> String {
    mnemonic
        .split_whitespace()
        .last()
        .unwrap_or_default()
        .to_ascii_lowercase()
}

fn sanitize(s: &str) -> String {
    s.to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect()
}

/// Verbatim operand text restricted to the token alphabet.
fn verbatim(s: &str) -> String {
    s.to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || "[]+*:.-".contains(*c))
        .collect()
}

fn size_word(op: &OperandMeta) -> Option<&'static str> {
    const WORDS: [&str; 9] = [
        "xmmword", "ymmword", "zmmword", "xword", "tbyte", "qword", "dword", "word", "byte",
    ];
    let raw = op.raw_text.to_ascii_lowercase();
    let raw = raw.trim_start();
    if let Some(w) = WORDS.iter().find(|w| raw.starts_with(**w)) {
        return Some(w);
    }
    Some(match op.size_bytes? {
        1 => "byte",
        2 => "word",
        4 => "dword",
        8 => "qword",
        10 => "tbyte",
        16 => "xmmword",
        32 => "ymmword",
        64 => "zmmword",
        _ => return None,
    })
}

impl Normalizer {
    pub fn new(mode: NormMode) -> Self {
        Normalizer {
            mode,
            small_disp_limit: 8,
            tag_data_refs_in_pointers: false,
        }
    }

    fn disp_token(&self, magnitude: u64, disp_ref: &RefClass) -> String {
        if magnitude <= self.small_disp_limit {
            return magnitude.to_string();
        }
        match disp_ref {
            RefClass::StringRef => "dispstr".into(),
            RefClass::BssRef if self.tag_data_refs_in_pointers => "dispbss".into(),
            RefClass::DataRef if self.tag_data_refs_in_pointers => "dispdata".into(),
            _ => "disp".into(),
        }
    }

    fn render_expr(&self, mem: &MemExpr) -> Result<String> {
        let mut out = String::new();
        if let Some(base) = &mem.base {
            out.push_str(&normalize_register(base)?);
        }
        if let Some(index) = &mem.index {
            if !out.is_empty() {
                out.push('+');
            }
            out.push_str(&normalize_register(index)?);
            match mem.scale {
                Some(s) if s != 1 => {
                    out.push('*');
                    out.push_str(&s.to_string());
                }
                _ => {}
            }
        }
        match mem.displacement {
            Some(d) if d != 0 || out.is_empty() => {
                if d < 0 {
                    out.push('-');
                } else if !out.is_empty() {
                    out.push('+');
                }
                out.push_str(&self.disp_token(d.unsigned_abs(), &mem.disp_ref));
            }
            _ => {}
        }
        if out.is_empty() {
            return Err(Error::InvalidOperand(
                "memory operand with neither base, index nor displacement".into(),
            ));
        }
        Ok(out)
    }

    pub fn memory(&self, op: &OperandMeta, is_lea_src: bool) -> Result<String> {
        let Some(mem) = (op.kind == OperandKind::Memory)
            .then_some(op.mem_expr.as_ref())
            .flatten()
        else {
            return Err(Error::InvalidOperand(format!(
                "{:?} is not a memory operand",
                op.raw_text
            )));
        };
        match self.mode {
            NormMode::Coarse => return Ok("ptr".into()),
            NormMode::Fine => return Ok(verbatim(&op.raw_text)),
            NormMode::Balanced => {}
        }
        let expr = self.render_expr(mem)?;
        if is_lea_src {
            return Ok(format!("[{expr}]"));
        }
        let mut prefix = String::new();
        if let Some(w) = size_word(op) {
            prefix.push_str(w);
            prefix.push_str("ptr");
        }
        if let Some(seg) = &op.segment_prefix {
            prefix.push_str(&sanitize(seg));
            prefix.push(':');
        }
        Ok(format!("{prefix}[{expr}]"))
    }

    pub fn operand(&self, op: &OperandMeta, ctx: OperandContext, is_lea_src: bool) -> Result<String> {
        match op.kind {
            OperandKind::Immediate => match self.mode {
                NormMode::Balanced => normalize_immediate(op, ctx),
                NormMode::Coarse | NormMode::Fine => {
                    normalize_immediate(op, ctx)?;
                    Ok("immval".into())
                }
            },
            OperandKind::Register => match self.mode {
                NormMode::Fine => {
                    normalize_register(&op.raw_text)?;
                    Ok(verbatim(&op.raw_text))
                }
                _ => normalize_register(&op.raw_text),
            },
            OperandKind::Memory => self.memory(op, is_lea_src),
        }
    }

    pub fn instruction(&self, ins: &InstructionRecord) -> Result<String> {
        let mnemonic: String = ins
            .mnemonic
            .split_whitespace()
            .collect::<String>()
            .to_ascii_lowercase();
        if mnemonic.is_empty() || !mnemonic.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(Error::InvalidOperand(format!(
                "mnemonic {:?} is not alphanumeric",
                ins.mnemonic
            )));
        }
        let lead_ctx = if is_call(&ins.mnemonic) {
            OperandContext::CallTarget
        } else if is_jump(&ins.mnemonic) {
            OperandContext::JumpTarget
        } else {
            OperandContext::Other
        };
        let is_lea = last_word(&ins.mnemonic) == "lea";
        let mut token = mnemonic;
        for (i, op) in ins.operands.iter().enumerate() {
            let ctx = if i == 0 { lead_ctx } else { OperandContext::Other };
            token.push('_');
            token.push_str(&self.operand(op, ctx, is_lea && i == 1)?);
        }
        Ok(token)
    }

    pub fn function(&self, f: &FunctionRecord) -> Result<NormalizedFunction> {
        let tokens = f
            .instructions
            .iter()
            .enumerate()
            .map(|(index, ins)| {
                self.instruction(ins).map_err(|e| Error::Instruction {
                    index,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NormalizedFunction {
            id: FunctionId::of(f),
            tokens,
            bos_constants: f.bos_constants.clone(),
            bos_strings: f.bos_strings.clone(),
        })
    }
}
