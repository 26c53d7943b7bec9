use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde_json::{json, Map, Value};

use super::{
    Compiler, FunctionRecord, InstructionRecord, MemExpr, OperandKind, OperandMeta, OptLevel,
    RefClass,
};
use crate::error::{Error, Result};

/// Parses a JSONL stream of function records, one object per non-blank line.
pub fn parse_records(stream: impl BufRead) -> Result<Vec<FunctionRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in stream.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::schema(lineno, format!("invalid JSON: {e}")))?;
        let record = record_from_value(&value).map_err(|e| match e {
            FieldError::Schema(msg) => Error::schema(lineno, msg),
            FieldError::Literal(e) => e,
        })?;
        let key = (
            record.binary_id.clone(),
            record.function_name.clone(),
            record.compiler.clone(),
            record.opt_level,
        );
        if !seen.insert(key) {
            return Err(Error::schema(
                lineno,
                format!(
                    "duplicate function {} in binary {} for {}-{}",
                    record.function_name, record.binary_id, record.compiler, record.opt_level
                ),
            ));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_records(path: &std::path::Path) -> Result<Vec<FunctionRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    parse_records(std::io::BufReader::new(file))
}

pub fn write_records<'a>(
    mut w: impl Write,
    records: impl IntoIterator<Item = &'a FunctionRecord>,
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &record_to_json(r))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

enum FieldError {
    Schema(String),
    Literal(Error),
}

impl From<Error> for FieldError {
    fn from(e: Error) -> Self {
        FieldError::Literal(e)
    }
}

type FResult<T> = std::result::Result<T, FieldError>;

fn missing(field: &str, path: &str) -> FieldError {
    if path.is_empty() {
        FieldError::Schema(format!("missing field {field}"))
    } else {
        FieldError::Schema(format!("missing field {field} at {path}"))
    }
}

fn wrong_type(field: &str, path: &str, want: &str) -> FieldError {
    let at = if path.is_empty() {
        String::new()
    } else {
        format!(" at {path}")
    };
    FieldError::Schema(format!("field {field}{at} must be {want}"))
}

fn req<'a>(obj: &'a Map<String, Value>, field: &str, path: &str) -> FResult<&'a Value> {
    match obj.get(field) {
        Some(Value::Null) | None => Err(missing(field, path)),
        Some(v) => Ok(v),
    }
}

fn opt<'a>(obj: &'a Map<String, Value>, field: &str) -> Option<&'a Value> {
    obj.get(field).filter(|v| !v.is_null())
}

fn as_str<'a>(v: &'a Value, field: &str, path: &str) -> FResult<&'a str> {
    v.as_str().ok_or_else(|| wrong_type(field, path, "a string"))
}

fn as_u64(v: &Value, field: &str, path: &str) -> FResult<u64> {
    v.as_u64()
        .ok_or_else(|| wrong_type(field, path, "an unsigned integer"))
}

/// Signed 64-bit integers; values above `i64::MAX` are taken as two's
/// complement, which is how disassemblers print negative immediates.
fn as_i64(v: &Value, field: &str, path: &str) -> FResult<i64> {
    if let Some(i) = v.as_i64() {
        return Ok(i);
    }
    v.as_u64()
        .map(|u| u as i64)
        .ok_or_else(|| wrong_type(field, path, "an integer"))
}

fn as_obj<'a>(v: &'a Value, field: &str, path: &str) -> FResult<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| wrong_type(field, path, "an object"))
}

fn as_arr<'a>(v: &'a Value, field: &str, path: &str) -> FResult<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| wrong_type(field, path, "an array"))
}

fn record_from_value(v: &Value) -> FResult<FunctionRecord> {
    let obj = v
        .as_object()
        .ok_or_else(|| FieldError::Schema("record must be a JSON object".into()))?;
    let s = |field: &str| -> FResult<String> { Ok(as_str(req(obj, field, "")?, field, "")?.to_string()) };

    let binary_id = s("binary_id")?;
    let testsuite = s("testsuite")?;
    let compiler = Compiler::from(s("compiler")?.as_str());
    let opt_level: OptLevel = s("opt_level")?.parse()?;
    let function_name = s("function_name")?;

    let mut instructions = Vec::new();
    for (i, ins) in as_arr(req(obj, "instructions", "")?, "instructions", "")?
        .iter()
        .enumerate()
    {
        instructions.push(instruction_from_value(ins, i)?);
    }

    let mut bos_constants = Vec::new();
    if let Some(arr) = opt(obj, "bos_consts") {
        for c in as_arr(arr, "bos_consts", "")? {
            bos_constants.push(as_i64(c, "bos_consts", "")?);
        }
    }
    let mut bos_strings = Vec::new();
    if let Some(arr) = opt(obj, "bos_strings") {
        for c in as_arr(arr, "bos_strings", "")? {
            bos_strings.push(as_str(c, "bos_strings", "")?.to_string());
        }
    }

    Ok(FunctionRecord {
        binary_id,
        testsuite,
        compiler,
        opt_level,
        function_name,
        instructions,
        bos_constants,
        bos_strings,
    })
}

fn instruction_from_value(v: &Value, index: usize) -> FResult<InstructionRecord> {
    let path = format!("instruction {index}");
    let obj = as_obj(v, "instructions", &path)?;
    let address = as_u64(req(obj, "address", &path)?, "address", &path)?;
    let mnemonic = as_str(req(obj, "mnemonic", &path)?, "mnemonic", &path)?.to_string();
    if mnemonic.trim().is_empty() {
        return Err(FieldError::Schema(format!("empty mnemonic at {path}")));
    }
    let basic_block_id = opt(obj, "bb").map(|b| as_u64(b, "bb", &path)).transpose()?;
    let mut operands = Vec::new();
    if let Some(ops) = opt(obj, "operands") {
        for (j, op) in as_arr(ops, "operands", &path)?.iter().enumerate() {
            operands.push(operand_from_value(op, &format!("{path} operand {j}"))?);
        }
    }
    Ok(InstructionRecord {
        address,
        mnemonic,
        operands,
        basic_block_id,
    })
}

fn ref_from(obj: &Map<String, Value>, field: &str, path: &str) -> FResult<RefClass> {
    match opt(obj, field) {
        None => Ok(RefClass::None),
        Some(v) => {
            let lit = as_str(v, field, path)?;
            let name = opt(obj, "ref_name")
                .map(|n| as_str(n, "ref_name", path))
                .transpose()?;
            Ok(RefClass::from_literal(lit, name)?)
        }
    }
}

fn operand_from_value(v: &Value, path: &str) -> FResult<OperandMeta> {
    let obj = as_obj(v, "operands", path)?;
    let raw_text = as_str(req(obj, "raw", path)?, "raw", path)?.to_string();
    let kind = match as_str(req(obj, "kind", path)?, "kind", path)? {
        "imm" => OperandKind::Immediate,
        "reg" => OperandKind::Register,
        "mem" => OperandKind::Memory,
        other => {
            return Err(Error::UnknownLiteral {
                what: "kind",
                literal: other.to_string(),
            }
            .into())
        }
    };
    let value = opt(obj, "value").map(|x| as_i64(x, "value", path)).transpose()?;
    let size_bytes = opt(obj, "size")
        .map(|x| {
            as_u64(x, "size", path).and_then(|s| {
                u8::try_from(s).map_err(|_| wrong_type("size", path, "a valid access width"))
            })
        })
        .transpose()?;
    let ref_class = ref_from(obj, "ref", path)?;
    let segment_prefix = opt(obj, "seg")
        .map(|x| as_str(x, "seg", path).map(str::to_string))
        .transpose()?;
    let mem_expr = match opt(obj, "mem") {
        None => None,
        Some(m) => {
            let mpath = format!("{path} mem");
            let m = as_obj(m, "mem", path)?;
            let reg = |field: &str| -> FResult<Option<String>> {
                opt(m, field)
                    .map(|x| as_str(x, field, &mpath).map(str::to_string))
                    .transpose()
            };
            Some(MemExpr {
                base: reg("base")?,
                index: reg("index")?,
                scale: opt(m, "scale")
                    .map(|x| {
                        as_u64(x, "scale", &mpath)
                            .map(|s| u8::try_from(s).unwrap_or(u8::MAX))
                    })
                    .transpose()?,
                displacement: opt(m, "disp")
                    .map(|x| as_i64(x, "disp", &mpath))
                    .transpose()?,
                disp_ref: match opt(m, "disp_ref") {
                    None => RefClass::None,
                    Some(x) => RefClass::from_literal(as_str(x, "disp_ref", &mpath)?, None)?,
                },
            })
        }
    };
    let op = OperandMeta {
        raw_text,
        kind,
        value,
        size_bytes,
        ref_class,
        segment_prefix,
        mem_expr,
    };
    op.validate()
        .map_err(|msg| FieldError::Schema(format!("{msg} at {path}")))?;
    Ok(op)
}

/// Canonical JSON object for one record; absent optional fields are omitted.
pub fn record_to_json(r: &FunctionRecord) -> Value {
    let instructions: Vec<Value> = r
        .instructions
        .iter()
        .map(|ins| {
            let mut o = Map::new();
            o.insert("address".into(), json!(ins.address));
            o.insert("mnemonic".into(), json!(ins.mnemonic));
            if let Some(bb) = ins.basic_block_id {
                o.insert("bb".into(), json!(bb));
            }
            o.insert(
                "operands".into(),
                Value::Array(ins.operands.iter().map(operand_to_json).collect()),
            );
            Value::Object(o)
        })
        .collect();
    json!({
        "binary_id": r.binary_id,
        "testsuite": r.testsuite,
        "compiler": r.compiler.as_str(),
        "opt_level": r.opt_level.as_str(),
        "function_name": r.function_name,
        "instructions": instructions,
        "bos_consts": r.bos_constants,
        "bos_strings": r.bos_strings,
    })
}

fn operand_to_json(op: &OperandMeta) -> Value {
    let mut o = Map::new();
    o.insert("raw".into(), json!(op.raw_text));
    o.insert(
        "kind".into(),
        json!(match op.kind {
            OperandKind::Immediate => "imm",
            OperandKind::Register => "reg",
            OperandKind::Memory => "mem",
        }),
    );
    if let Some(v) = op.value {
        o.insert("value".into(), json!(v));
    }
    if let Some(s) = op.size_bytes {
        o.insert("size".into(), json!(s));
    }
    if let Some(lit) = op.ref_class.literal() {
        o.insert("ref".into(), json!(lit));
    }
    if let RefClass::Libc(name) = &op.ref_class {
        o.insert("ref_name".into(), json!(name));
    }
    if let Some(seg) = &op.segment_prefix {
        o.insert("seg".into(), json!(seg));
    }
    if let Some(m) = &op.mem_expr {
        let mut mo = Map::new();
        if let Some(b) = &m.base {
            mo.insert("base".into(), json!(b));
        }
        if let Some(i) = &m.index {
            mo.insert("index".into(), json!(i));
        }
        if let Some(s) = m.scale {
            mo.insert("scale".into(), json!(s));
        }
        if let Some(d) = m.displacement {
            mo.insert("disp".into(), json!(d));
        }
        if let Some(lit) = m.disp_ref.literal() {
            mo.insert("disp_ref".into(), json!(lit));
        }
        o.insert("mem".into(), Value::Object(mo));
    }
    Value::Object(o)
}
