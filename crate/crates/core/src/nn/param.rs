use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use super::Tensor;
use crate::{Error, Result};

/// Named tensor with a freezing flag. Optimizers never touch frozen values.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter { name: name.into(), value, trainable: true }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

pub const CHECKPOINT_VERSION: &str = "v1";
const CHECKPOINT_MAGIC: &str = "eac-checkpoint";

/// Decoded checkpoint: header metadata and named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Text checkpoint: `eac-checkpoint v1 key=value ...`, then one line per
/// parameter `name d0xd1x... v0 v1 ...`. Values use the shortest decimal
/// form that parses back to the same `f64`.
pub fn encode_checkpoint<'a>(meta: &[(&str, String)], params: impl IntoIterator<Item = &'a Parameter>) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push(' ');
    out.push_str(CHECKPOINT_VERSION);
    for (k, v) in meta {
        let _ = write!(out, " {k}={v}");
    }
    out.push('\n');
    for p in params {
        out.push_str(&p.name);
        out.push(' ');
        out.push_str(&encode_shape(p.value.shape()));
        for v in p.value.data() {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    out
}

fn encode_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "-".to_string();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn decode_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, reason: "empty checkpoint".into() })?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Parse { line: 1, reason: format!("not a checkpoint header: `{header}`") });
    }
    match fields.next() {
        Some(CHECKPOINT_VERSION) => {}
        Some(other) => return Err(Error::Version(other.to_string())),
        None => return Err(Error::Parse { line: 1, reason: "missing version".into() }),
    }
    let meta = fields
        .map(|f| {
            f.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse { line: 1, reason: format!("bad metadata `{f}`") })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tensors = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let shape_text = parts.next().ok_or(Error::Parse { line: line_no, reason: "missing shape".into() })?;
        let shape = decode_shape(shape_text).ok_or_else(|| Error::Parse { line: line_no, reason: format!("bad shape `{shape_text}`") })?;
        let data = parts
            .map(|v| v.parse::<f64>().map_err(|_| Error::Parse { line: line_no, reason: format!("bad value `{v}`") }))
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, data).map_err(|_| Error::Parse { line: line_no, reason: format!("truncated values for `{name}`") })?;
        tensors.push((name, tensor));
    }
    Ok(Checkpoint { meta, tensors })
}

fn decode_shape(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}
