//! Synthetic corpora for demos and tests.
//!
//! Two generators live here. The token grammar emits normalized functions
//! directly: a prologue, a random sequence of fixed basic blocks and a
//! compiler-specific epilogue, all drawn from frequent real normalized
//! instructions. Every token occurs at a single block position, so a masked
//! token is recoverable from its neighbours. The record generator lowers
//! small random "source" skeletons to instruction records differently per
//! compiler and optimization level, giving the cross-build variation that
//! pair mining needs.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{bos_cosine, encode, BosVector, PairExample, ToolchainExample, Vocabulary};
use crate::error::Result;
use crate::ingest::{Compiler, FunctionRecord, InstructionRecord, MemExpr, OperandMeta, OptLevel, RefClass};
use crate::normalizer::{FunctionId, NormalizedFunction};
use crate::rng;

pub const PROLOGUE: [&str; 3] = ["push_bp8", "mov_bp8_sp8", "sub_sp8_immval"];
pub const EPILOGUE_GCC: [&str; 2] = ["leave", "ret"];
pub const EPILOGUE_CLANG: [&str; 3] = ["add_sp8_immval", "pop_bp8", "ret"];

pub const BLOCKS: [[&str; 5]; 8] = [
    [
        "mov_dwordptr[bp8-disp]_immval",
        "mov_reg4_dwordptr[bp8-disp]",
        "cmp_reg4_immval",
        "jg_jmpdst",
        "add_reg4_immval",
    ],
    [
        "mov_reg8_qwordptr[bp8-disp]",
        "mov_reg8_qwordptr[reg8+disp]",
        "test_reg8_reg8",
        "je_jmpdst",
        "call_innerfunc",
    ],
    [
        "mov_reg4_dispstr",
        "mov_reg8_reg8",
        "call_externfunc",
        "test_reg4_reg4",
        "jne_jmpdst",
    ],
    [
        "lea_reg8_[reg8+reg8*8]",
        "mov_reg8_qwordptr[reg8+reg8*8]",
        "add_reg8_reg8",
        "cmp_reg8_reg8",
        "jl_jmpdst",
    ],
    [
        "movzx_reg4_byteptr[reg8]",
        "cmp_reg1_immval",
        "sete_reg1",
        "movzx_reg4_reg1",
        "jmp_jmpdst",
    ],
    [
        "pxor_regxmm_regxmm",
        "vmovsd_regxmm_qwordptr[sp8+disp]",
        "mulsd_regxmm_regxmm",
        "addsd_regxmm_regxmm",
        "vmovsd_qwordptr[sp8+disp]_regxmm",
    ],
    [
        "mov_reg8_qwordptrfs:[disp]",
        "mov_qwordptr[bp8-8]_reg8",
        "xor_reg4_reg4",
        "xor_reg8_qwordptrfs:[disp]",
        "jae_jmpdst",
    ],
    [
        "shl_reg8_immval",
        "sar_reg8_immval",
        "and_reg4_immval",
        "movsxd_reg8_reg4",
        "cdqe",
    ],
];

/// Block planted in functions that should be recognized as similar.
pub const MOTIF: [&str; 4] = ["movabs_reg8_dispstr", "call_reg8", "push_immval", "setne_reg1"];

/// Tokens of one function: prologue, `blocks` random blocks (with the motif
/// block at a random slot when `motif`), epilogue.
pub fn token_function(r: &mut ChaCha8Rng, blocks: usize, motif: bool, compiler: &Compiler) -> Vec<String> {
    let mut out: Vec<String> = PROLOGUE.iter().map(|s| s.to_string()).collect();
    let motif_at = motif.then(|| r.random_range(0..=blocks));
    for i in 0..=blocks {
        if motif_at == Some(i) {
            out.extend(MOTIF.iter().map(|s| s.to_string()));
        }
        if i < blocks {
            let b = BLOCKS.choose(r).expect("blocks");
            out.extend(b.iter().map(|s| s.to_string()));
        }
    }
    let epilogue: &[&str] = match compiler {
        Compiler::Clang => &EPILOGUE_CLANG,
        _ => &EPILOGUE_GCC,
    };
    out.extend(epilogue.iter().map(|s| s.to_string()));
    out
}

fn synthetic_nf(name: String, compiler: Compiler, opt: OptLevel, tokens: Vec<String>, consts: Vec<i64>) -> NormalizedFunction {
    NormalizedFunction {
        id: FunctionId {
            binary_id: format!("synth-{compiler}-{opt}"),
            testsuite: "synth".into(),
            function_name: name,
            compiler,
            opt_level: opt,
        },
        tokens,
        bos_constants: consts,
        bos_strings: Vec::new(),
    }
}

/// `n` normalized functions from the block grammar, alternating gcc and
/// clang epilogues; roughly one in four carries the motif block.
pub fn pretrain_corpus(n: usize, seed: u64) -> Vec<NormalizedFunction> {
    let mut r = rng::stream(seed, &[rng::tag::SYNTH, 1]);
    (0..n)
        .map(|i| {
            let compiler = if i % 2 == 0 { Compiler::Gcc } else { Compiler::Clang };
            let blocks = r.random_range(2..=7);
            let motif = r.random_bool(0.25);
            let tokens = token_function(&mut r, blocks, motif, &compiler);
            let consts = (0..3).map(|_| r.random_range(0..16)).collect();
            synthetic_nf(format!("f{i}"), compiler, OptLevel::O0, tokens, consts)
        })
        .collect()
}

/// Labeled pairs where a positive has the motif block in both functions and
/// a negative in at most one. The BoS similarity is computed from random
/// constants and carries no label information.
pub fn binsim_toy(n_pairs: usize, vocab: &Vocabulary, max_seq: usize, seed: u64) -> Result<Vec<PairExample>> {
    let mut r = rng::stream(seed, &[rng::tag::SYNTH, 2]);
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let label = (i % 2) as u8;
        let (ma, mb) = if label == 1 {
            (true, true)
        } else {
            match r.random_range(0..3) {
                0 => (false, false),
                1 => (true, false),
                _ => (false, true),
            }
        };
        let mut side = |motif: bool| {
            let compiler = if r.random_bool(0.5) { Compiler::Gcc } else { Compiler::Clang };
            let blocks = r.random_range(2..=6);
            let tokens = token_function(&mut r, blocks, motif, &compiler);
            let consts: Vec<i64> = (0..4).map(|_| r.random_range(0..6)).collect();
            (tokens, BosVector::from_parts(&consts, std::iter::empty::<&String>()))
        };
        let (ta, ba) = side(ma);
        let (tb, bb) = side(mb);
        out.push(PairExample {
            a: encode(&ta, vocab, max_seq)?,
            b: encode(&tb, vocab, max_seq)?,
            bos_sim: bos_cosine(&ba, &bb),
            label,
            group: "(synth,synth)".into(),
        });
    }
    Ok(out)
}

/// Two-class compiler examples: label 0 = gcc epilogue, 1 = clang epilogue.
pub fn toolchain_toy(n: usize, vocab: &Vocabulary, max_seq: usize, seed: u64) -> Result<Vec<ToolchainExample>> {
    let mut r = rng::stream(seed, &[rng::tag::SYNTH, 3]);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let compiler = if label == 0 { Compiler::Gcc } else { Compiler::Clang };
            let blocks = r.random_range(2..=6);
            let motif = r.random_bool(0.25);
            let tokens = token_function(&mut r, blocks, motif, &compiler);
            Ok(ToolchainExample {
                x: encode(&tokens, vocab, max_seq)?,
                label,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Instruction-record generator

const TEXT_BASE: u64 = 0x401000;
const PLT_BASE: u64 = 0x400400;
const RODATA_BASE: u64 = 0x4a0000;
const DATA_BASE: u64 = 0x4b0000;
const BSS_BASE: u64 = 0x4c0000;
const LIBC: [&str; 6] = ["puts", "printf", "malloc", "free", "strlen", "memcpy"];
const EXTERN: [&str; 3] = ["xmalloc", "error", "quotearg"];

/// Address ranges used by [`synthetic_records`], for building matching
/// section hints.
pub fn section_layout() -> [(std::ops::Range<u64>, &'static str); 5] {
    [
        (PLT_BASE..TEXT_BASE, "plt_got"),
        (TEXT_BASE..0x480000, "text"),
        (RODATA_BASE..DATA_BASE, "rodata_string"),
        (DATA_BASE..BSS_BASE, "data"),
        (BSS_BASE..0x4d0000, "bss"),
    ]
}

#[derive(Clone, Debug)]
enum Op {
    Store { slot: u8, value: i64 },
    Update { slot: u8, value: i64 },
    Libc(usize),
    Inner(usize),
    SelfCall,
    Extern(usize),
    Str(usize),
    Global { bss: bool, index: u64 },
    Branch { slot: u8, value: i64 },
    Index { scale: u8 },
    Canary,
    Float,
}

fn skeleton(r: &mut ChaCha8Rng, n_functions: usize) -> Vec<Op> {
    let len = r.random_range(4..=9);
    (0..len)
        .map(|_| match r.random_range(0..12) {
            0 => Op::Store {
                slot: r.random_range(1..6),
                value: r.random_range(0..400),
            },
            1 => Op::Update {
                slot: r.random_range(1..6),
                value: r.random_range(1..64),
            },
            2 => Op::Libc(r.random_range(0..LIBC.len())),
            3 => Op::Inner(r.random_range(0..n_functions)),
            4 => Op::SelfCall,
            5 => Op::Extern(r.random_range(0..EXTERN.len())),
            6 => Op::Str(r.random_range(0..8)),
            7 => Op::Global {
                bss: r.random_bool(0.5),
                index: r.random_range(0..16),
            },
            8 => Op::Branch {
                slot: r.random_range(1..6),
                value: r.random_range(0..100),
            },
            9 => Op::Index {
                scale: *[1u8, 2, 4, 8].choose(r).expect("scales"),
            },
            10 => Op::Canary,
            _ => Op::Float,
        })
        .collect()
}

fn reg(name: &str) -> OperandMeta {
    OperandMeta::register(name)
}

fn imm(v: i64) -> OperandMeta {
    OperandMeta::immediate(v, RefClass::None)
}

fn size_word(size: u8) -> &'static str {
    match size {
        1 => "BYTE",
        2 => "WORD",
        4 => "DWORD",
        _ => "QWORD",
    }
}

fn mem(size: Option<u8>, base: Option<&str>, index: Option<(&str, u8)>, disp: i64, disp_ref: RefClass) -> OperandMeta {
    let mut inner = String::new();
    if let Some(b) = base {
        inner.push_str(b);
    }
    if let Some((i, s)) = index {
        if !inner.is_empty() {
            inner.push('+');
        }
        inner.push_str(&format!("{i}*{s}"));
    }
    if disp != 0 || inner.is_empty() {
        if inner.is_empty() {
            inner = format!("{disp:#x}");
        } else if disp < 0 {
            inner.push_str(&format!("-{:#x}", disp.unsigned_abs()));
        } else {
            inner.push_str(&format!("+{disp:#x}"));
        }
    }
    let raw = match size {
        Some(s) => format!("{} PTR [{inner}]", size_word(s)),
        None => format!("[{inner}]"),
    };
    OperandMeta::memory(
        &raw,
        size,
        MemExpr {
            base: base.map(str::to_string),
            index: index.map(|(i, _)| i.to_string()),
            scale: index.map(|(_, s)| s),
            displacement: (disp != 0).then_some(disp),
            disp_ref,
        },
    )
}

struct Lowering<'a> {
    compiler: &'a Compiler,
    opt: OptLevel,
    fn_addr: u64,
    inner_addrs: &'a [u64],
    ins: Vec<InstructionRecord>,
    consts: Vec<i64>,
    strings: Vec<String>,
    addr: u64,
}

impl Lowering<'_> {
    fn emit(&mut self, mnemonic: &str, ops: Vec<OperandMeta>) {
        for o in &ops {
            if o.ref_class == RefClass::None {
                if let Some(v) = o.value {
                    self.consts.push(v);
                }
            }
        }
        self.ins.push(InstructionRecord::new(self.addr, mnemonic, ops));
        self.addr += 4;
    }

    fn jump(&mut self, mnemonic: &str) {
        let target = self.addr as i64 + 0x20;
        self.emit(mnemonic, vec![OperandMeta::immediate(target, RefClass::JmpDst)]);
    }

    fn framed(&self) -> bool {
        self.opt == OptLevel::O0
    }

    fn gcc(&self) -> bool {
        *self.compiler == Compiler::Gcc
    }

    /// Scratch registers (32-bit, 64-bit) preferred by the compiler.
    fn scratch(&self) -> (&'static str, &'static str) {
        if self.gcc() {
            ("eax", "rax")
        } else {
            ("ecx", "rcx")
        }
    }

    fn slot(&self, slot: u8) -> OperandMeta {
        if self.framed() {
            mem(Some(4), Some("rbp"), None, -4 * (slot as i64 + 2), RefClass::None)
        } else {
            mem(Some(4), Some("rsp"), None, 4 * slot as i64 + 8, RefClass::None)
        }
    }

    fn lower(&mut self, op: &Op, strings: &[String]) {
        let (r32, r64) = self.scratch();
        match op {
            Op::Store { slot, value } => {
                if self.framed() {
                    let s = self.slot(*slot);
                    self.emit("mov", vec![s, imm(*value)]);
                } else {
                    self.emit("mov", vec![reg(if self.gcc() { "esi" } else { "edx" }), imm(*value)]);
                }
            }
            Op::Update { slot, value } => {
                if self.framed() {
                    let s = self.slot(*slot);
                    self.emit("mov", vec![reg(r32), s.clone()]);
                    self.emit("add", vec![reg(r32), imm(*value)]);
                    self.emit("mov", vec![s, reg(r32)]);
                } else if self.opt == OptLevel::O1 {
                    self.emit("add", vec![reg(r32), imm(*value)]);
                } else {
                    self.emit("lea", vec![reg(r32), mem(None, Some("rdi"), None, *value, RefClass::None)]);
                }
            }
            Op::Libc(i) => {
                if self.framed() {
                    self.emit("mov", vec![reg("rdi"), reg(r64)]);
                }
                let name = LIBC[*i];
                let target = PLT_BASE + 0x10 * (*i as u64 + 1);
                self.emit("call", vec![OperandMeta::immediate(target as i64, RefClass::Libc(name.into()))]);
            }
            Op::Inner(j) => {
                let target = self.inner_addrs[*j];
                let class = if target == self.fn_addr {
                    RefClass::SelfCall
                } else {
                    RefClass::InnerFunc
                };
                self.emit("call", vec![OperandMeta::immediate(target as i64, class)]);
            }
            Op::SelfCall => {
                if self.framed() {
                    self.emit("mov", vec![reg("edi"), reg(r32)]);
                } else {
                    self.emit("sub", vec![reg("edi"), imm(1)]);
                }
                self.emit("call", vec![OperandMeta::immediate(self.fn_addr as i64, RefClass::SelfCall)]);
            }
            Op::Extern(i) => {
                let target = PLT_BASE + 0x100 + 0x10 * *i as u64;
                self.emit("call", vec![OperandMeta::immediate(target as i64, RefClass::ExternFunc)]);
                self.emit("test", vec![reg("eax"), reg("eax")]);
                self.jump("je");
            }
            Op::Str(k) => {
                let addr = RODATA_BASE + 0x20 * *k as u64;
                self.strings.push(strings[*k].clone());
                match (self.gcc(), self.framed()) {
                    (true, true) => self.emit("mov", vec![reg("edi"), OperandMeta::immediate(addr as i64, RefClass::StringRef)]),
                    (false, true) => self.emit("movabs", vec![reg("rdi"), OperandMeta::immediate(addr as i64, RefClass::StringRef)]),
                    (true, false) => self.emit("lea", vec![reg("rdi"), mem(None, Some("rip"), None, 0x1f00 + 0x20 * *k as i64, RefClass::StringRef)]),
                    (false, false) => self.emit("mov", vec![reg("esi"), OperandMeta::immediate(addr as i64, RefClass::StringRef)]),
                }
            }
            Op::Global { bss, index } => {
                let (base, class) = if *bss {
                    (BSS_BASE, RefClass::BssRef)
                } else {
                    (DATA_BASE, RefClass::DataRef)
                };
                if self.framed() && !self.gcc() {
                    self.emit("mov", vec![reg(r32), OperandMeta::immediate((base + 8 * index) as i64, class)]);
                } else {
                    self.emit("mov", vec![reg(r32), mem(Some(4), Some("rip"), None, 0x2000 + 8 * *index as i64, class)]);
                }
            }
            Op::Branch { slot, value } => {
                if self.framed() {
                    let s = self.slot(*slot);
                    self.emit("cmp", vec![s, imm(*value)]);
                    self.jump(if self.gcc() { "jle" } else { "jg" });
                } else {
                    self.emit("cmp", vec![reg("edi"), imm(*value)]);
                    self.jump(if self.gcc() { "jg" } else { "jle" });
                }
            }
            Op::Index { scale } => {
                let scale = *scale;
                let size = scale.clamp(4, 8);
                if self.framed() {
                    self.emit("mov", vec![reg("rax"), mem(Some(8), Some("rbp"), None, -0x18, RefClass::None)]);
                    self.emit("mov", vec![reg("edx"), mem(Some(4), Some("rbp"), None, -0x1c, RefClass::None)]);
                    self.emit("movsxd", vec![reg("rdx"), reg("edx")]);
                }
                let dst = if size == 8 { r64 } else { r32 };
                self.emit("mov", vec![reg(dst), mem(Some(size), Some("rax"), Some(("rdx", scale)), 0, RefClass::None)]);
                if !self.framed() {
                    self.emit("add", vec![reg("rdx"), imm(1)]);
                    self.emit("cmp", vec![reg("rdx"), reg("rsi")]);
                    self.jump("jne");
                }
            }
            Op::Canary => {
                let fs = mem(Some(8), None, None, 0x28, RefClass::None).with_segment("fs");
                self.emit("mov", vec![reg(r64), fs.clone()]);
                let spill = if self.framed() {
                    mem(Some(8), Some("rbp"), None, -8, RefClass::None)
                } else {
                    mem(Some(8), Some("rsp"), None, 8, RefClass::None)
                };
                self.emit("mov", vec![spill, reg(r64)]);
                self.emit("xor", vec![reg(r32), reg(r32)]);
            }
            Op::Float => {
                if self.framed() {
                    self.emit("movsd", vec![reg("xmm0"), mem(Some(8), Some("rbp"), None, -0x28, RefClass::None)]);
                }
                self.emit("mulsd", vec![reg("xmm0"), reg("xmm1")]);
                if !self.gcc() {
                    self.emit("addsd", vec![reg("xmm0"), reg("xmm2")]);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordSpec {
    pub programs: usize,
    pub functions: usize,
}

/// Builds in the generated corpus.
pub const BUILDS: [(Compiler, OptLevel); 6] = [
    (Compiler::Gcc, OptLevel::O0),
    (Compiler::Gcc, OptLevel::O1),
    (Compiler::Gcc, OptLevel::O3),
    (Compiler::Clang, OptLevel::O0),
    (Compiler::Clang, OptLevel::O1),
    (Compiler::Clang, OptLevel::O3),
];

/// Function records for `spec.programs × spec.functions` skeletons, each
/// lowered under every build in [`BUILDS`].
pub fn synthetic_records(spec: RecordSpec, seed: u64) -> Vec<FunctionRecord> {
    let strings: Vec<String> = (0..8).map(|i| format!("message {i}: %s\n")).collect();
    let mut out = Vec::new();
    for p in 0..spec.programs {
        let skeletons: Vec<Vec<Op>> = (0..spec.functions)
            .map(|f| skeleton(&mut rng::stream(seed, &[rng::tag::SYNTH, 4, p as u64, f as u64]), spec.functions))
            .collect();
        let inner_addrs: Vec<u64> = (0..spec.functions)
            .map(|f| TEXT_BASE + 0x1000 * (p as u64 * 64 + f as u64 + 1))
            .collect();
        for (compiler, opt) in &BUILDS {
            for (f, ops) in skeletons.iter().enumerate() {
                let mut lw = Lowering {
                    compiler,
                    opt: *opt,
                    fn_addr: inner_addrs[f],
                    inner_addrs: &inner_addrs,
                    ins: Vec::new(),
                    consts: Vec::new(),
                    strings: Vec::new(),
                    addr: inner_addrs[f],
                };
                if lw.framed() {
                    lw.emit("push", vec![reg("rbp")]);
                    lw.emit("mov", vec![reg("rbp"), reg("rsp")]);
                    lw.emit("sub", vec![reg("rsp"), imm(0x30)]);
                } else if *opt == OptLevel::O1 {
                    lw.emit("push", vec![reg("rbx")]);
                } else if !lw.gcc() {
                    lw.emit("push", vec![reg("r14")]);
                }
                for op in ops {
                    lw.lower(op, &strings);
                }
                if lw.framed() {
                    if lw.gcc() {
                        lw.emit("leave", vec![]);
                    } else {
                        lw.emit("add", vec![reg("rsp"), imm(0x30)]);
                        lw.emit("pop", vec![reg("rbp")]);
                    }
                } else if *opt == OptLevel::O1 {
                    lw.emit("pop", vec![reg("rbx")]);
                } else if !lw.gcc() {
                    lw.emit("pop", vec![reg("r14")]);
                }
                lw.emit("ret", vec![]);
                let mut rec = FunctionRecord::new(
                    &format!("prog{p}-{compiler}-{opt}"),
                    "synth",
                    compiler.clone(),
                    *opt,
                    &format!("p{p}_fn{f}"),
                );
                rec.instructions = lw.ins;
                rec.bos_constants = lw.consts;
                rec.bos_strings = lw.strings;
                out.push(rec);
            }
        }
    }
    out
}
