//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.
//!
//!     cargo test -p binsem --test acceptance

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use binsem::corpus::{
    bos_cosine, encode, BosVector, PairExample, TokenSequence, Vocabulary, EOS, MASK, NUM_SPECIAL, PAD, SOS, UNK,
};
use binsem::encoder::{
    attention, evaluate_mlm, mask_sequence, mlm_loss, mlm_loss_and_grads, pretrain, read_log, Checkpoint,
    EncoderConfig, EncoderModel, MLMBatch, Mat, OptimizerConfig,
};
use binsem::heads::{finetune, EvalReport, TaskCheckpoint, TaskData};
use binsem::ingest::{
    parse_asm_text, read_records, InstructionRecord, MemExpr, OperandMeta, RefClass, SectionKind, SectionMap,
};
use binsem::metrics::{confusion, report_by_pair, roc_auc, summarize, ConfusionMatrix, GroupedPrediction};
use binsem::normalizer::{
    normalize_function, normalize_immediate, normalize_instruction, normalize_memory, normalize_register, NormMode,
    OperandContext,
};
use binsem::pipeline::{read_corpus, read_jsonl, read_vocab, DatasetMeta, SPLIT_FILES};
use binsem::rng;
use binsem::synth::{binsim_toy, pretrain_corpus, toolchain_toy};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took < limit, "{what} took {took:.1?}, limit {limit:?}");
    Ok(())
}

// ---------------------------------------------------------------- normalization

fn normalization_examples() -> Outcome {
    let start = Instant::now();
    let e = |r: binsem::Result<String>| r.map_err(|e| e.to_string());
    let worked = [
        (e(normalize_register("r14"))?, "reg8"),
        (e(normalize_register("ebp"))?, "bp4"),
        (e(normalize_register("eax"))?, "reg4"),
        (e(normalize_immediate(&OperandMeta::immediate(0x38, RefClass::None), OperandContext::Other))?, "immval"),
        (
            e(normalize_immediate(&OperandMeta::immediate(0x401d00, RefClass::ExternFunc), OperandContext::CallTarget))?,
            "externfunc",
        ),
        (
            e(normalize_immediate(&OperandMeta::immediate(0x425530, RefClass::InnerFunc), OperandContext::CallTarget))?,
            "innerfunc",
        ),
        (e(normalize_immediate(&OperandMeta::immediate(0x425530, RefClass::BssRef), OperandContext::Other))?, "dispbss"),
        (
            e(normalize_memory(
                &OperandMeta::memory(
                    "DWORD PTR [r14]",
                    Some(4),
                    MemExpr {
                        base: Some("r14".into()),
                        ..Default::default()
                    },
                ),
                false,
                NormMode::Balanced,
            ))?,
            "dwordptr[reg8]",
        ),
    ];
    for (got, want) in &worked {
        ensure!(got == want, "worked example: got {got}, want {want}");
    }

    // instruction-level tokens from the most frequent normalized forms
    let hints = SectionMap::new()
        .with_range(0x401020..0x401100, SectionKind::PltGot)
        .with_range(0x401100..0x402000, SectionKind::Text)
        .with_range(0x402000..0x403000, SectionKind::RodataString)
        .with_range(0x404000..0x404100, SectionKind::Bss)
        .with_range(0x405000..0x405100, SectionKind::Data)
        .with_function_start(0x401136);
    let cases = [
        ("push rbp", "push_bp8"),
        ("pop rbp", "pop_bp8"),
        ("mov rbp, rsp", "mov_bp8_sp8"),
        ("sub rsp, 0x20", "sub_sp8_immval"),
        ("mov rax, QWORD PTR [rbp-0x18]", "mov_reg8_qwordptr[bp8-disp]"),
        ("mov QWORD PTR [rbp-0x8], rax", "mov_qwordptr[bp8-8]_reg8"),
        ("mov DWORD PTR [rbp-0x14], 0x0", "mov_dwordptr[bp8-disp]_immval"),
        ("call 0x401500", "call_innerfunc"),
        ("call 0x401030", "call_externfunc"),
        ("call rax", "call_reg8"),
        ("je 0x401200", "je_jmpdst"),
        ("jmp 0x401210", "jmp_jmpdst"),
        ("lea rax, [rdx+rax*8]", "lea_reg8_[reg8+reg8*8]"),
        ("mov rax, QWORD PTR [rax+rdx*8]", "mov_reg8_qwordptr[reg8+reg8*8]"),
        ("mov rax, QWORD PTR fs:0x28", "mov_reg8_qwordptrfs:[disp]"),
        ("xor rdx, QWORD PTR fs:0x28", "xor_reg8_qwordptrfs:[disp]"),
        ("pxor xmm0, xmm0", "pxor_regxmm_regxmm"),
        ("vmovsd xmm0, QWORD PTR [rsp+0x18]", "vmovsd_regxmm_qwordptr[sp8+disp]"),
        ("mov eax, 0x404040", "mov_reg4_dispbss"),
        ("mov eax, 0x405010", "mov_reg4_dispdata"),
        ("mov edi, 0x402004", "mov_reg4_dispstr"),
        ("movabs rdi, 0x402004", "movabs_reg8_dispstr"),
        ("mov QWORD PTR [rax], 0x405010", "mov_qwordptr[reg8]_dispdata"),
        ("movzx eax, BYTE PTR [rax]", "movzx_reg4_byteptr[reg8]"),
        ("cmp al, 0x20", "cmp_reg1_immval"),
        ("setne al", "setne_reg1"),
        ("test rax, rax", "test_reg8_reg8"),
        ("movsxd rdx, eax", "movsxd_reg8_reg4"),
        ("push 0x0", "push_immval"),
        ("cdqe", "cdqe"),
        ("leave", "leave"),
        ("ret", "ret"),
    ];
    for (asm, want) in cases {
        let rec = parse_asm_text(&format!("401140: {asm}"), &hints).map_err(|e| format!("{asm}: {e}"))?;
        let got = normalize_instruction(&rec.instructions[0], NormMode::Balanced).map_err(|e| e.to_string())?;
        ensure!(got == want, "{asm}: got {got}, want {want}");
    }

    // the same shapes from hand-built records, without the listing parser
    let direct = [
        (
            InstructionRecord::new(
                0,
                "mov",
                vec![
                    OperandMeta::register("rax"),
                    OperandMeta::memory(
                        "QWORD PTR [rbp-0x18]",
                        Some(8),
                        MemExpr {
                            base: Some("rbp".into()),
                            displacement: Some(-0x18),
                            ..Default::default()
                        },
                    ),
                ],
            ),
            "mov_reg8_qwordptr[bp8-disp]",
        ),
        (
            InstructionRecord::new(0, "call", vec![OperandMeta::immediate(0x425530, RefClass::InnerFunc)]),
            "call_innerfunc",
        ),
        (
            InstructionRecord::new(
                0,
                "lea",
                vec![
                    OperandMeta::register("rax"),
                    OperandMeta::memory(
                        "[rdx+rax*8]",
                        None,
                        MemExpr {
                            base: Some("rdx".into()),
                            index: Some("rax".into()),
                            scale: Some(8),
                            ..Default::default()
                        },
                    ),
                ],
            ),
            "lea_reg8_[reg8+reg8*8]",
        ),
        (
            InstructionRecord::new(
                0,
                "mov",
                vec![
                    OperandMeta::register("rax"),
                    OperandMeta::memory(
                        "QWORD PTR fs:0x28",
                        Some(8),
                        MemExpr {
                            displacement: Some(0x28),
                            ..Default::default()
                        },
                    )
                    .with_segment("fs"),
                ],
            ),
            "mov_reg8_qwordptrfs:[disp]",
        ),
    ];
    for (ins, want) in &direct {
        let got = normalize_instruction(ins, NormMode::Balanced).map_err(|e| e.to_string())?;
        ensure!(got == *want, "record {ins:?}: got {got}, want {want}");
    }
    within(start, Duration::from_secs(1), "normalization suite")?;
    Ok(format!(
        "{} worked examples, {} table tokens from listings, {} from records",
        worked.len(),
        cases.len(),
        direct.len()
    ))
}

fn mode_ordering() -> Outcome {
    let start = Instant::now();
    let records = read_records(&fixture("corpus.jsonl")).map_err(|e| e.to_string())?;
    let n_ins: usize = records.iter().map(|r| r.instructions.len()).sum();
    ensure!(n_ins >= 1000, "fixture holds only {n_ins} instructions");
    let mut counts = Vec::new();
    for mode in [NormMode::Coarse, NormMode::Balanced, NormMode::Fine] {
        let mut distinct = BTreeSet::new();
        for r in &records {
            let nf = normalize_function(r, mode).map_err(|e| e.to_string())?;
            distinct.extend(nf.tokens);
        }
        counts.push(distinct.len());
    }
    ensure!(
        counts[0] < counts[1] && counts[1] < counts[2],
        "coarse {} / balanced {} / fine {} not strictly increasing",
        counts[0],
        counts[1],
        counts[2]
    );
    within(start, Duration::from_secs(1), "mode ordering")?;
    Ok(format!(
        "{n_ins} instructions: coarse {} < balanced {} < fine {}",
        counts[0], counts[1], counts[2]
    ))
}

// ---------------------------------------------------------------- bag of strings and constants

fn bag(counts: &[(i64, u32)]) -> BosVector {
    let consts: Vec<i64> = counts.iter().flat_map(|&(k, c)| std::iter::repeat_n(k, c as usize)).collect();
    BosVector::from_parts(&consts, std::iter::empty::<&String>())
}

fn bos_similarity() -> Outcome {
    let v = bag(&[(1, 1), (2, 1), (3, 3), (4, 1)]);
    let w = bag(&[(1, 0), (2, 1), (3, 2), (4, 1)]);
    let s = bos_cosine(&v, &w);
    ensure!((s - 0.943).abs() < 1e-3, "example similarity {s}");

    let mut r = rng::stream(42, &[]);
    for i in 0..10_000 {
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            let keys = r.random_range(0..6);
            let consts: Vec<i64> = (0..keys * 3).map(|_| r.random_range(0..8)).collect();
            let strings: Vec<String> = (0..r.random_range(0..4)).map(|_| format!("s{}", r.random_range(0..3))).collect();
            BosVector::from_parts(&consts, &strings)
        };
        let (a, b) = (draw(&mut r), draw(&mut r));
        let (ab, ba) = (bos_cosine(&a, &b), bos_cosine(&b, &a));
        ensure!(ab == ba, "bag {i}: asymmetric {ab} vs {ba}");
        ensure!((0.0..=1.0).contains(&ab), "bag {i}: similarity {ab} outside [0,1]");
    }
    Ok(format!("example {s:.4}; 10000 random pairs symmetric and bounded"))
}

// ---------------------------------------------------------------- masking

fn masking_statistics() -> Outcome {
    let vocab_size = 1000usize;
    let rate = 0.15;
    let max_seq = 64;
    let mut r = rng::stream(3, &[]);
    let (mut eligible, mut selected, mut to_mask, mut kept) = (0usize, 0usize, 0usize, 0usize);
    for s in 0..2000 {
        let mut active = vec![SOS];
        let len = r.random_range(10..max_seq - 1);
        for _ in 0..len {
            // a few in-body specials, which must never be selected
            let id = if r.random::<f64>() < 0.05 {
                [UNK, MASK][r.random_range(0..2)]
            } else {
                r.random_range(NUM_SPECIAL as u32..vocab_size as u32)
            };
            active.push(id);
        }
        active.push(EOS);
        let seq = TokenSequence::from_active(active, max_seq).map_err(|e| e.to_string())?;
        let m = mask_sequence(&seq, rate, vocab_size, &mut rng::stream(9, &[s]));
        for t in 0..max_seq {
            let id = seq.ids[t];
            if (id as usize) < NUM_SPECIAL {
                ensure!(!m.mask_positions[t], "special {id} selected in row {s} at {t}");
                ensure!(m.inputs[t] == id, "special {id} altered in row {s} at {t}");
                ensure!(t < seq.true_len || id == PAD, "padding holds {id}");
                continue;
            }
            eligible += 1;
            if !m.mask_positions[t] {
                ensure!(m.inputs[t] == id, "unselected token changed");
                continue;
            }
            selected += 1;
            ensure!(m.targets[t] == id, "target differs from original token");
            if m.inputs[t] == MASK {
                to_mask += 1;
            } else if m.inputs[t] == id {
                kept += 1;
            } else {
                ensure!((m.inputs[t] as usize) >= NUM_SPECIAL, "random replacement is a special token");
            }
        }
    }
    ensure!(eligible >= 10_000, "only {eligible} eligible positions");
    let three_sigma = |n: usize, p: f64, k: usize, what: &str| -> Result<(), String> {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        ensure!(
            (k as f64 - mean).abs() <= 3.0 * sd,
            "{what}: {k} of {n}, expected {mean:.1} ± {:.1}",
            3.0 * sd
        );
        Ok(())
    };
    three_sigma(eligible, rate, selected, "selected")?;
    three_sigma(selected, 0.8, to_mask, "[MASK]")?;
    // a random draw can return the original token
    let p_keep = 0.1 + 0.1 / (vocab_size - NUM_SPECIAL) as f64;
    three_sigma(selected, p_keep, kept, "unchanged")?;
    three_sigma(selected, 1.0 - 0.8 - p_keep, selected - to_mask - kept, "random")?;
    Ok(format!(
        "{eligible} eligible, {selected} selected ({:.4}); mask {:.3} / random {:.3} / keep {:.3}",
        selected as f64 / eligible as f64,
        to_mask as f64 / selected as f64,
        (selected - to_mask - kept) as f64 / selected as f64,
        kept as f64 / selected as f64
    ))
}

// ---------------------------------------------------------------- attention and gradients

fn attention_oracle(q: &[[f64; 2]; 2], k: &[[f64; 2]; 2], v: &[[f64; 2]; 2]) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let mut w = [[0.0; 2]; 2];
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        let mut s = [0.0; 2];
        for j in 0..2 {
            for d in 0..2 {
                s[j] += q[i][d] * k[j][d];
            }
            s[j] /= 2f64.sqrt();
        }
        let z = s[0].exp() + s[1].exp();
        for j in 0..2 {
            w[i][j] = s[j].exp() / z;
        }
        for d in 0..2 {
            for j in 0..2 {
                out[i][d] += w[i][j] * v[j][d];
            }
        }
    }
    (w, out)
}

fn mat(rows: &[[f64; 2]; 2]) -> Mat {
    Mat::from_vec(2, 2, rows.iter().flatten().copied().collect())
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 9,
        d_embed: 4,
        d_hidden: 4,
        n_layers: 2,
        n_heads: 2,
        max_seq: 8,
        d_ffn: 8,
        conv_enabled: true,
        conv_kernel: 3,
        n_conv_layers: 3,
        dropout_pos: 0.0,
        dropout_conv: 0.0,
        dropout_ffn: 0.0,
        dropout_attn: 0.0,
        mask_rate: 0.4,
    }
}

fn attention_numerics() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(17, &[]);

    // row sums on random inputs with masked keys
    for _ in 0..200 {
        let (n, m, d) = (r.random_range(1..12), r.random_range(1..12), r.random_range(1..9));
        let mut fill = |rows: usize, cols: usize| {
            Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-4.0..4.0)).collect())
        };
        let (q, k, v) = (fill(n, d), fill(m, d), fill(m, 3));
        let mut valid: Vec<bool> = (0..m).map(|_| r.random::<f64>() < 0.7).collect();
        valid[0] = true;
        let out = attention(&q, &k, &v, Some(&valid)).map_err(|e| e.to_string())?;
        for i in 0..n {
            let sum: f64 = out.weights.row(i).iter().sum();
            ensure!((sum - 1.0).abs() <= 1e-6, "row {i} sums to {sum}");
            for j in 0..m {
                ensure!(valid[j] || out.weights.at(i, j) == 0.0, "masked key {j} has weight");
            }
        }
    }

    let q = [[0.3, -1.2], [2.0, 0.5]];
    let k = [[1.1, 0.4], [-0.7, 1.9]];
    let v = [[0.25, -3.0], [1.5, 0.75]];
    let (w_ref, out_ref) = attention_oracle(&q, &k, &v);
    let out = attention(&mat(&q), &mat(&k), &mat(&v), None).map_err(|e| e.to_string())?;
    for i in 0..2 {
        for j in 0..2 {
            ensure!((out.weights.at(i, j) - w_ref[i][j]).abs() <= 1e-9, "weight ({i},{j})");
            ensure!((out.context.at(i, j) - out_ref[i][j]).abs() <= 1e-9, "context ({i},{j})");
        }
    }

    // finite differences over every parameter of a small encoder
    let cfg = tiny_config();
    let mut model = EncoderModel::new(cfg.clone(), 11).map_err(|e| e.to_string())?;
    for t in model.params.tensors_mut() {
        if t.shape.len() == 1 {
            t.data.iter_mut().for_each(|x| *x += r.random_range(-0.5..0.5));
        } else if t.name.contains("attn") {
            t.data.iter_mut().for_each(|x| *x *= 3.0);
        }
    }
    let n_params = model.param_count();
    ensure!(n_params <= 1000, "{n_params} parameters");
    let rows = [vec![SOS, 5, 6, 7, 8, 5, EOS], vec![SOS, 8, 7, 6, EOS]].into_iter().enumerate().map(|(i, ids)| {
        let seq = TokenSequence::from_active(ids, cfg.max_seq).expect("sequence");
        let mut m = mask_sequence(&seq, 0.0, cfg.vocab_size, &mut rng::stream(0, &[]));
        // one [MASK], one random replacement and one kept token per row
        for (t, input) in [(1usize, Some(MASK)), (3, Some(6 - i as u32)), (2, None)] {
            m.mask_positions[t] = true;
            m.targets[t] = seq.ids[t];
            if let Some(x) = input {
                m.inputs[t] = x;
            }
        }
        m
    });
    let batch = MLMBatch::from_rows(rows);
    let (grads, _) = mlm_loss_and_grads(&model, &batch, None).map_err(|e| e.to_string())?;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for ti in 0..model.params.len() {
        for j in 0..model.params.get(ti).len() {
            let orig = model.params.get(ti)[j];
            let mut at = |dx: f64| {
                model.params.get_mut(ti)[j] = orig + dx;
                mlm_loss(&model, &batch).expect("loss")
            };
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            model.params.get_mut(ti)[j] = orig;
            let analytic = grads.0[ti][j];
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < 1e-7 {
                (analytic - numeric).abs()
            } else {
                (analytic - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    ensure!(worst < 1e-4, "max relative gradient error {worst:e}");
    within(start, Duration::from_secs(30), "attention and gradient checks")?;
    Ok(format!("2x2 oracle within 1e-9; {n_params} parameters, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- desk training

fn desk_pretrain(out: &mut Option<Checkpoint>) -> Outcome {
    let start = Instant::now();
    let nfs = pretrain_corpus(200, 7);
    let vocab = Vocabulary::build(&nfs);
    let cfg = EncoderConfig::desk(vocab.len());
    let seqs = nfs
        .iter()
        .map(|f| encode(&f.tokens, &vocab, cfg.max_seq))
        .collect::<binsem::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let opt = OptimizerConfig::desk();
    let run = || pretrain(&seqs, &cfg, &opt, 7, |_, _| Ok(())).map_err(|e| e.to_string());
    let (model, log) = run()?;
    let (model2, log2) = run()?;
    ensure!(log.len() >= 5, "only {} epochs", log.len());
    let (l1, l5) = (log[0].loss, log[4].loss);
    ensure!(l5 < 0.5 * l1, "epoch-5 loss {l5:.4} not below half of epoch-1 loss {l1:.4}");
    let acc = evaluate_mlm(&model, &seqs, 7).map_err(|e| e.to_string())?.accuracy();
    ensure!(acc >= 0.9, "training-set masked accuracy {acc:.3}");
    let bits = |l: &[binsem::encoder::EpochLog]| -> Vec<[u64; 3]> {
        l.iter().map(|e| [e.loss.to_bits(), e.lr.to_bits(), e.accuracy.to_bits()]).collect()
    };
    ensure!(bits(&log) == bits(&log2), "same-seed runs logged different values");
    ensure!(model.params == model2.params, "same-seed runs ended with different weights");
    within(start, Duration::from_secs(300), "two desk pre-training runs")?;
    let msg = format!(
        "vocabulary {}, loss {l1:.3} -> {l5:.3} by epoch 5, accuracy {acc:.3}, two runs identical, {:.1?}",
        vocab.len(),
        start.elapsed()
    );
    *out = Some(Checkpoint::new(model, opt, 7, vocab, log));
    Ok(msg)
}

fn desk_finetune(parent: Option<&Checkpoint>) -> Outcome {
    let parent = parent.ok_or("no pre-trained checkpoint")?;
    let max_seq = parent.model.cfg.max_seq;
    let e = |err: binsem::Error| err.to_string();

    let start = Instant::now();
    let held_out = binsim_toy(100, &parent.vocab, max_seq, 2).map_err(e)?;
    let data = TaskData::BinSim {
        train: binsim_toy(100, &parent.vocab, max_seq, 1).map_err(e)?,
        valid: Vec::new(),
    };
    let task = finetune(parent, &data, &OptimizerConfig::desk(), false, 3).map_err(e)?;
    let f1 = task.evaluate_pairs(&held_out).map_err(e)?.f1;
    ensure!(f1 >= 0.9, "held-out binsim F1 {f1:.3}");
    within(start, Duration::from_secs(300), "binsim fine-tuning")?;
    let t_binsim = start.elapsed();

    let start = Instant::now();
    let task_kind = binsem::corpus::ToolchainTask::Compiler;
    let held_out = toolchain_toy(100, &parent.vocab, max_seq, 5).map_err(e)?;
    let data = TaskData::Toolchain {
        task: task_kind,
        classes: task_kind.classes(),
        train: toolchain_toy(100, &parent.vocab, max_seq, 4).map_err(e)?,
        valid: Vec::new(),
    };
    let task = finetune(parent, &data, &OptimizerConfig::desk(), false, 6).map_err(e)?;
    let acc = task.evaluate_toolchain(&held_out).map_err(e)?.accuracy;
    ensure!(acc >= 0.9, "held-out toolchain accuracy {acc:.3}");
    within(start, Duration::from_secs(300), "toolchain fine-tuning")?;
    Ok(format!(
        "binsim held-out F1 {f1:.3} ({t_binsim:.1?}); compiler held-out accuracy {acc:.3} ({:.1?})",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- metrics

fn brute_auc(s: &[(f64, u8)]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for p in s.iter().filter(|x| x.1 == 1) {
        for n in s.iter().filter(|x| x.1 == 0) {
            pairs += 1.0;
            num += if p.0 > n.0 {
                1.0
            } else if p.0 == n.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn metrics_oracle() -> Outcome {
    let mut r = rng::stream(23, &[]);
    for trial in 0..50 {
        // coarse scores so that ties occur
        let mut s: Vec<(f64, u8)> =
            (0..100).map(|_| ((r.random_range(0..20) as f64) / 20.0, r.random_range(0..2u8))).collect();
        s[0].1 = 0;
        s[1].1 = 1;
        let got = roc_auc(&s).map_err(|e| e.to_string())?;
        let want = brute_auc(&s);
        ensure!((got - want).abs() <= 1e-9, "trial {trial}: auc {got} vs brute force {want}");
    }

    // (label, truth): 3 TP, 1 FP, 4 TN, 2 FN
    let preds = [(1, 1), (1, 1), (1, 1), (1, 0), (0, 0), (0, 0), (0, 0), (0, 0), (0, 1), (0, 1)];
    let cm = confusion(&preds).map_err(|e| e.to_string())?;
    ensure!(
        cm == ConfusionMatrix {
            tp: 3,
            fp: 1,
            tn: 4,
            fn_: 2
        },
        "confusion {cm:?}"
    );
    let rep = summarize(&cm);
    let exact = [
        ("precision", rep.precision, 3.0 / 4.0),
        ("recall", rep.recall, 3.0 / 5.0),
        ("tpr", rep.tpr, 3.0 / 5.0),
        ("fpr", rep.fpr, 1.0 / 5.0),
        ("accuracy", rep.accuracy, 7.0 / 10.0),
        ("f1", rep.f1, 2.0 * 0.75 * 0.6 / (0.75 + 0.6)),
    ];
    for (name, got, want) in exact {
        ensure!(got == want, "{name}: {got} vs {want}");
    }
    let empty = summarize(&ConfusionMatrix {
        tp: 0,
        fp: 0,
        tn: 5,
        fn_: 0,
    });
    ensure!(
        empty.precision == 0.0 && empty.recall == 0.0 && empty.f1 == 0.0 && empty.undefined.contains(&"f1".to_string()),
        "undefined ratios not reported: {empty:?}"
    );

    // two groups of different size: the average is not size-weighted
    let g = |group: &str, label: u8, truth: u8| GroupedPrediction {
        group: group.into(),
        label,
        truth,
        score: label as f64,
    };
    let mut preds = vec![g("a", 1, 1), g("a", 0, 0)];
    preds.extend([g("b", 1, 1), g("b", 1, 0), g("b", 0, 1), g("b", 0, 0), g("b", 1, 1), g("b", 0, 0)]);
    let report = report_by_pair(&preds, false).map_err(|e| e.to_string())?;
    let mean = report.rows.iter().map(|r| r.f1).sum::<f64>() / report.rows.len() as f64;
    ensure!((report.average.f1 - mean).abs() < 1e-12, "average f1 {} vs mean {mean}", report.average.f1);
    ensure!((mean - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12, "group f1s {:?}", report.rows);
    Ok("AUC matches brute force on 50×100 samples; confusion fixtures exact; unweighted pair average".into())
}

// ---------------------------------------------------------------- command line

fn binsem(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_binsem"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.code() == Some(0),
        "binsem {} exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn pipeline_end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let path = |p: &str| d.join(p).to_string_lossy().into_owned();
    let fx = |p: &str| fixture(p).to_string_lossy().into_owned();
    let config = fx("cli.json");
    let e = |err: binsem::Error| err.to_string();

    binsem(
        &["ingest", &fx("corpus.jsonl"), &fx("listing.asm"), "--hints", &fx("hints.json"), "-o", &path("records.jsonl")],
        d,
    )?;
    let records = read_records(&d.join("records.jsonl")).map_err(e)?;
    ensure!(
        records.iter().any(|r| r.function_name == "count_words"),
        "listing function missing from ingested records"
    );

    binsem(&["normalize", &path("records.jsonl"), "-o", &path("corpus.jsonl")], d)?;
    let corpus = read_corpus(&d.join("corpus.jsonl")).map_err(e)?;
    ensure!(!corpus.is_empty(), "empty normalized corpus");

    binsem(&["vocab", &path("corpus.jsonl"), "-o", &path("vocab.tsv")], d)?;
    let vocab = read_vocab(&d.join("vocab.tsv")).map_err(e)?;
    for (id, tok) in binsem::corpus::SPECIAL_TOKENS.iter().enumerate() {
        ensure!(vocab.id_of(tok) == Some(id as u32), "{tok} not at id {id}");
    }

    binsem(
        &["--config", &config, "pretrain", &path("corpus.jsonl"), "--vocab", &path("vocab.tsv"), "-o", &path("ckpt")],
        d,
    )?;
    let ckpt = Checkpoint::load(&d.join("ckpt")).map_err(e)?;
    ensure!(ckpt.model.cfg.d_hidden == 64 && ckpt.model.cfg.n_layers == 2, "not the desk profile");
    let log = read_log(&d.join("ckpt/training_log.jsonl")).map_err(e)?;
    ensure!(log.len() == 3 && log.iter().all(|l| l.loss.is_finite()), "training log {log:?}");

    binsem(
        &["--config", &config, "make-dataset", &path("corpus.jsonl"), "--vocab", &path("vocab.tsv"), "-o", &path("data")],
        d,
    )?;
    for name in SPLIT_FILES {
        let file = d.join("data").join(name);
        let meta: DatasetMeta = serde_json::from_str(
            &std::fs::read_to_string(d.join("data").join(format!("{name}.meta.json"))).map_err(|e| e.to_string())?,
        )
        .map_err(|e| format!("{name} meta: {e}"))?;
        let pairs: Vec<PairExample> = read_jsonl(&file).map_err(e)?;
        ensure!(meta.count == pairs.len() && meta.vocab_hash == vocab.hash(), "{name} meta {meta:?}");
        ensure!(pairs.iter().all(|p| p.label <= 1), "{name} labels");
    }

    binsem(&["--config", &config, "finetune", &path("ckpt"), &path("data"), "-o", &path("task")], d)?;
    let task = TaskCheckpoint::load(&d.join("task")).map_err(e)?;
    ensure!(task.log.len() == 2, "fine-tune log {:?}", task.log);

    binsem(&["eval", &path("task"), &path("data/test.jsonl"), "-o", &path("report.json")], d)?;
    let text = std::fs::read_to_string(d.join("report.json")).map_err(|e| e.to_string())?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    for key in ["task", "n", "loss", "accuracy", "f1", "auc", "binary"] {
        ensure!(raw.get(key).is_some(), "report lacks {key}");
    }
    let report: EvalReport = serde_json::from_value(raw).map_err(|e| e.to_string())?;
    ensure!(report.auc.is_some_and(|a| (0.0..=1.0).contains(&a)), "report AUC {:?}", report.auc);
    ensure!(d.join("report.json.pairs.csv").exists(), "no per-pair CSV");
    Ok(format!(
        "{} records, {} functions, vocabulary {}, test F1 {:.3} AUC {:.3}, {:.1?}",
        records.len(),
        corpus.len(),
        vocab.len(),
        report.f1,
        report.auc.unwrap_or(f64::NAN),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- driver

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Err(why) => {
            println!("FAIL  {name}: {why}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and similar harness flags
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut checkpoint = None;
    let results = [
        run("normalization examples", normalization_examples),
        run("normalization mode ordering", mode_ordering),
        run("bag-of-strings similarity", bos_similarity),
        run("masking statistics", masking_statistics),
        run("attention and gradient numerics", attention_numerics),
        run("desk pre-training", || desk_pretrain(&mut checkpoint)),
        run("desk fine-tuning", || desk_finetune(checkpoint.as_ref())),
        run("metrics oracle", metrics_oracle),
        run("command-line pipeline", pipeline_end_to_end),
    ];
    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
