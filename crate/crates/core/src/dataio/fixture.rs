//! JSON Lines feature fixtures with a `.meta.json` sidecar.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// One utterance: speech and text feature sequences plus its emotion label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// `m x d_z`
    pub speech_seq: Tensor,
    /// `n x d_z`
    pub text_seq: Tensor,
    pub label: usize,
}

impl FeatureRecord {
    pub fn d_z(&self) -> usize {
        self.speech_seq.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    #[serde(rename = "C")]
    pub classes: usize,
    pub d_z: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks shapes, finiteness and label range for every record.
    pub fn validate(&self) -> Result<()> {
        let d_z = self.meta.d_z;
        if self.meta.classes == 0 || d_z == 0 {
            return Err(Error::Data("metadata needs C >= 1 and d_z >= 1".into()));
        }
        for r in &self.records {
            for (name, seq) in [("speech_seq", &r.speech_seq), ("text_seq", &r.text_seq)] {
                if seq.shape().len() != 2 || seq.cols() != d_z {
                    return Err(Error::Data(format!(
                        "record `{}`: {name} has shape {:?}, expected [len, {d_z}]",
                        r.id,
                        seq.shape()
                    )));
                }
                if !seq.is_finite() {
                    return Err(Error::Data(format!("record `{}`: non-finite {name}", r.id)));
                }
            }
            if r.label >= self.meta.classes {
                return Err(Error::Data(format!(
                    "record `{}`: label {} outside [0, {})",
                    r.id, r.label, self.meta.classes
                )));
            }
        }
        Ok(())
    }
}

/// Sidecar path: the fixture path with `.meta.json` appended.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        Error::Fixture {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}

/// JSON has no NaN or infinity literals; lines that use them are parsed a
/// second time with the literals turned into marker strings so the error
/// can say which feature is non-finite instead of just "invalid JSON".
fn parse_line(text: &str, ctx: &LineCtx) -> Result<Value> {
    match serde_json::from_str(text) {
        Ok(v) => Ok(v),
        Err(e) => {
            let patched = text
                .replace("-Infinity", "\u{1}")
                .replace("Infinity", "\"Infinity\"")
                .replace('\u{1}', "\"-Infinity\"")
                .replace("NaN", "\"NaN\"");
            serde_json::from_str(&patched).map_err(|_| ctx.err("<line>", format!("malformed JSON: {e}")))
        }
    }
}

fn parse_seq(v: Option<&Value>, field: &str, ctx: &LineCtx) -> Result<Tensor> {
    let rows = v
        .ok_or_else(|| ctx.err(field, "missing"))?
        .as_array()
        .ok_or_else(|| ctx.err(field, "expected an array of rows"))?;
    if rows.is_empty() {
        return Err(ctx.err(field, "sequence must have at least one row"));
    }
    let mut width = None;
    let mut data = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| ctx.err(field, format!("row {i} is not an array")))?;
        match width {
            None if row.is_empty() => return Err(ctx.err(field, "rows must be non-empty")),
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(ctx.err(field, format!("row {i} has {} values, expected {w}", row.len())))
            }
            _ => {}
        }
        for (j, x) in row.iter().enumerate() {
            match x {
                Value::Number(n) => {
                    let f = n
                        .as_f64()
                        .ok_or_else(|| ctx.err(field, format!("[{i}][{j}] is not a float")))?;
                    if !f.is_finite() {
                        return Err(ctx.err(field, format!("[{i}][{j}] is not finite")));
                    }
                    data.push(f);
                }
                Value::String(s) if matches!(s.as_str(), "NaN" | "Infinity" | "-Infinity") => {
                    return Err(ctx.err(field, format!("[{i}][{j}] is not finite ({s})")));
                }
                _ => return Err(ctx.err(field, format!("[{i}][{j}] is not a number"))),
            }
        }
    }
    let w = width.expect("non-empty");
    Tensor::matrix(rows.len(), w, data)
}

/// Reads a JSONL fixture and its metadata sidecar, validating every record.
pub fn load_fixture(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mpath = meta_path(path);
    let meta_text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
    if meta.classes == 0 || meta.d_z == 0 {
        return Err(Error::Data(format!("{}: C and d_z must be positive", mpath.display())));
    }
    if meta.class_names.len() != meta.classes {
        return Err(Error::Data(format!(
            "{}: {} class names for C = {}",
            mpath.display(),
            meta.class_names.len(),
            meta.classes
        )));
    }

    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<FeatureRecord> = Vec::new();
    // (line, id) of the record that fixed the dataset width.
    let mut width_source: Option<(usize, String, usize)> = None;
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx { path, line: idx + 1 };
        let v = parse_line(raw, &ctx)?;
        let obj = v.as_object().ok_or_else(|| ctx.err("<line>", "expected a JSON object"))?;
        if let Some(k) = obj
            .keys()
            .find(|k| !matches!(k.as_str(), "id" | "label" | "speech_seq" | "text_seq"))
        {
            return Err(ctx.err(k, "unknown field"));
        }
        let id = obj
            .get("id")
            .ok_or_else(|| ctx.err("id", "missing"))?
            .as_str()
            .ok_or_else(|| ctx.err("id", "expected a string"))?
            .to_string();
        let label = obj
            .get("label")
            .ok_or_else(|| ctx.err("label", "missing"))?
            .as_u64()
            .ok_or_else(|| ctx.err("label", "expected a non-negative integer"))?
            as usize;
        if label >= meta.classes {
            return Err(ctx.err(
                "label",
                format!("label {label} out of range [0, {})", meta.classes),
            ));
        }
        let speech_seq = parse_seq(obj.get("speech_seq"), "speech_seq", &ctx)?;
        let text_seq = parse_seq(obj.get("text_seq"), "text_seq", &ctx)?;
        if speech_seq.cols() != text_seq.cols() {
            return Err(ctx.err(
                "text_seq",
                format!(
                    "d_z {} differs from speech_seq d_z {}",
                    text_seq.cols(),
                    speech_seq.cols()
                ),
            ));
        }
        let d = speech_seq.cols();
        match &width_source {
            None => width_source = Some((ctx.line, id.clone(), d)),
            Some((line, first, w)) if *w != d => {
                return Err(Error::Data(format!(
                    "{}: inconsistent d_z: record `{first}` (line {line}) has {w}, record `{id}` (line {}) has {d}",
                    path.display(),
                    ctx.line
                )));
            }
            _ => {}
        }
        records.push(FeatureRecord {
            id,
            speech_seq,
            text_seq,
            label,
        });
    }
    if let Some((line, first, w)) = &width_source {
        if *w != meta.d_z {
            return Err(Error::Data(format!(
                "{}: record `{first}` (line {line}) has d_z {w} but metadata says {}",
                path.display(),
                meta.d_z
            )));
        }
    }
    Ok(Dataset { meta, records })
}

fn rows_json(t: &Tensor) -> Value {
    Value::Array(
        (0..t.rows())
            .map(|i| Value::Array(t.row(i).iter().map(|&x| Value::from(x)).collect()))
            .collect(),
    )
}

/// Writes the dataset as JSONL plus sidecar. Floats use the shortest
/// representation that reads back to the identical value.
pub fn write_fixture(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &dataset.records {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), Value::from(r.id.clone()));
        obj.insert("label".into(), Value::from(r.label));
        obj.insert("speech_seq".into(), rows_json(&r.speech_seq));
        obj.insert("text_seq".into(), rows_json(&r.text_seq));
        serde_json::to_writer(&mut out, &Value::Object(obj))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;

    let mpath = meta_path(path);
    let meta = serde_json::to_string_pretty(&dataset.meta)?;
    fs::write(&mpath, meta + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}
