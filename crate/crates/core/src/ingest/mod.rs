//! Disassembled-function records and the two ways of getting them into the
//! toolkit: the canonical JSONL format and a best-effort Intel-syntax
//! listing adapter.

mod asm;
mod jsonl;

use std::fmt;
use std::str::FromStr;

pub use asm::{parse_asm_text, parse_asm_text_with_warnings, SectionKind, SectionMap};
pub use jsonl::{parse_records, read_records, record_to_json, write_records};

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperandKind {
    Immediate,
    Register,
    Memory,
}

/// What an address-valued operand refers to, as recovered by the
/// disassembler.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub enum RefClass {
    Libc(String),
    SelfCall,
    InnerFunc,
    ExternFunc,
    JmpDst,
    StringRef,
    BssRef,
    DataRef,
    #[default]
    None,
}

impl RefClass {
    /// Wire literal; `None` has no literal and is encoded by omission.
    pub fn literal(&self) -> Option<&'static str> {
        Some(match self {
            RefClass::Libc(_) => "libc",
            RefClass::SelfCall => "self",
            RefClass::InnerFunc => "inner",
            RefClass::ExternFunc => "extern",
            RefClass::JmpDst => "jmp",
            RefClass::StringRef => "str",
            RefClass::BssRef => "bss",
            RefClass::DataRef => "data",
            RefClass::None => return None,
        })
    }

    pub fn from_literal(lit: &str, name: Option<&str>) -> Result<Self, Error> {
        Ok(match lit {
            "libc" => RefClass::Libc(name.unwrap_or_default().to_string()),
            "self" => RefClass::SelfCall,
            "inner" => RefClass::InnerFunc,
            "extern" => RefClass::ExternFunc,
            "jmp" => RefClass::JmpDst,
            "str" => RefClass::StringRef,
            "bss" => RefClass::BssRef,
            "data" => RefClass::DataRef,
            "none" => RefClass::None,
            other => {
                return Err(Error::UnknownLiteral {
                    what: "ref",
                    literal: other.to_string(),
                })
            }
        })
    }

    /// Call-target or jump-target classes describe code addresses rather
    /// than constants.
    pub fn is_code_address(&self) -> bool {
        matches!(
            self,
            RefClass::Libc(_)
                | RefClass::SelfCall
                | RefClass::InnerFunc
                | RefClass::ExternFunc
                | RefClass::JmpDst
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MemExpr {
    pub base: Option<String>,
    pub index: Option<String>,
    pub scale: Option<u8>,
    pub displacement: Option<i64>,
    pub disp_ref: RefClass,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperandMeta {
    pub raw_text: String,
    pub kind: OperandKind,
    pub value: Option<i64>,
    pub size_bytes: Option<u8>,
    pub ref_class: RefClass,
    pub segment_prefix: Option<String>,
    pub mem_expr: Option<MemExpr>,
}

pub const VALID_SIZES: [u8; 8] = [1, 2, 4, 8, 10, 16, 32, 64];
pub const VALID_SCALES: [u8; 4] = [1, 2, 4, 8];

impl OperandMeta {
    pub fn register(name: &str) -> Self {
        OperandMeta {
            raw_text: name.to_string(),
            kind: OperandKind::Register,
            value: None,
            size_bytes: None,
            ref_class: RefClass::None,
            segment_prefix: None,
            mem_expr: None,
        }
    }

    pub fn immediate(value: i64, ref_class: RefClass) -> Self {
        OperandMeta {
            raw_text: format_hex(value),
            kind: OperandKind::Immediate,
            value: Some(value),
            size_bytes: None,
            ref_class,
            segment_prefix: None,
            mem_expr: None,
        }
    }

    pub fn memory(raw_text: &str, size_bytes: Option<u8>, mem: MemExpr) -> Self {
        OperandMeta {
            raw_text: raw_text.to_string(),
            kind: OperandKind::Memory,
            value: None,
            size_bytes,
            ref_class: RefClass::None,
            segment_prefix: None,
            mem_expr: Some(mem),
        }
    }

    pub fn with_segment(mut self, seg: &str) -> Self {
        self.segment_prefix = Some(seg.to_string());
        self
    }

    /// Checks the per-kind invariants of an operand.
    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            OperandKind::Immediate => {
                if self.value.is_none() {
                    return Err("immediate operand without value".into());
                }
                if self.mem_expr.is_some() {
                    return Err("immediate operand with memory expression".into());
                }
            }
            OperandKind::Memory => {
                let Some(mem) = &self.mem_expr else {
                    return Err("memory operand without memory expression".into());
                };
                if let Some(scale) = mem.scale {
                    if !VALID_SCALES.contains(&scale) {
                        return Err(format!("scale {scale} not in {{1,2,4,8}}"));
                    }
                }
            }
            OperandKind::Register => {}
        }
        if let Some(size) = self.size_bytes {
            if !VALID_SIZES.contains(&size) {
                return Err(format!("size {size} not a valid access width"));
            }
        }
        Ok(())
    }
}

pub(crate) fn format_hex(value: i64) -> String {
    if value < 0 {
        format!("-0x{:x}", value.unsigned_abs())
    } else {
        format!("0x{value:x}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionRecord {
    pub address: u64,
    pub mnemonic: String,
    pub operands: Vec<OperandMeta>,
    pub basic_block_id: Option<u64>,
}

impl InstructionRecord {
    pub fn new(address: u64, mnemonic: &str, operands: Vec<OperandMeta>) -> Self {
        InstructionRecord {
            address,
            mnemonic: mnemonic.to_string(),
            operands,
            basic_block_id: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Compiler {
    Gcc,
    Clang,
    Other(String),
}

impl Compiler {
    pub fn as_str(&self) -> &str {
        match self {
            Compiler::Gcc => "gcc",
            Compiler::Clang => "clang",
            Compiler::Other(s) => s,
        }
    }

    /// Single-letter tag used in build-pair keys such as `(CO0,GO3)`.
    pub fn tag(&self) -> String {
        match self {
            Compiler::Gcc => "G".into(),
            Compiler::Clang => "C".into(),
            Compiler::Other(s) => s
                .chars()
                .next()
                .map(|c| c.to_ascii_uppercase().to_string())
                .unwrap_or_else(|| "X".into()),
        }
    }
}

impl fmt::Display for Compiler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<&str> for Compiler {
    fn from(s: &str) -> Self {
        match s {
            "gcc" => Compiler::Gcc,
            "clang" => Compiler::Clang,
            other => Compiler::Other(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum OptLevel {
    O0,
    O1,
    O2,
    O3,
    Unknown,
}

impl OptLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptLevel::O0 => "O0",
            OptLevel::O1 => "O1",
            OptLevel::O2 => "O2",
            OptLevel::O3 => "O3",
            OptLevel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<String> for Compiler {
    fn from(s: String) -> Self {
        Compiler::from(s.as_str())
    }
}

impl From<Compiler> for String {
    fn from(c: Compiler) -> Self {
        c.as_str().to_string()
    }
}

impl From<OptLevel> for String {
    fn from(o: OptLevel) -> Self {
        o.as_str().to_string()
    }
}

impl TryFrom<String> for OptLevel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl FromStr for OptLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "O0" => OptLevel::O0,
            "O1" => OptLevel::O1,
            "O2" => OptLevel::O2,
            "O3" => OptLevel::O3,
            "unknown" => OptLevel::Unknown,
            other => {
                return Err(Error::UnknownLiteral {
                    what: "opt_level",
                    literal: other.to_string(),
                })
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionRecord {
    pub binary_id: String,
    pub testsuite: String,
    pub compiler: Compiler,
    pub opt_level: OptLevel,
    pub function_name: String,
    pub instructions: Vec<InstructionRecord>,
    pub bos_constants: Vec<i64>,
    pub bos_strings: Vec<String>,
}

impl FunctionRecord {
    pub fn new(
        binary_id: &str,
        testsuite: &str,
        compiler: Compiler,
        opt_level: OptLevel,
        function_name: &str,
    ) -> Self {
        FunctionRecord {
            binary_id: binary_id.to_string(),
            testsuite: testsuite.to_string(),
            compiler,
            opt_level,
            function_name: function_name.to_string(),
            instructions: Vec::new(),
            bos_constants: Vec::new(),
            bos_strings: Vec::new(),
        }
    }
}
