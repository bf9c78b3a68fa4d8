//! Weight checkpoints.
//!
//! Layout: magic `ARWCKPT1`, a little-endian `u64` header length, a JSON
//! header (`format`, encoder `config`, reuse `pattern` codes, and the ordered
//! list of tensor `name`/`shape` entries), then every tensor's values as
//! little-endian `f64` in header order. Saving a loaded checkpoint reproduces
//! the original bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{ProjectionHead, Student};
use crate::encoder::{Encoder, EncoderConfig, Leaves};
use crate::error::{Error, Result};
use crate::reuse::ReusePattern;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ARWCKPT1";
const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    config: EncoderConfig,
    pattern: Vec<usize>,
    has_projection: bool,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn collect<'a>(encoder: &'a Encoder, projection: Option<&'a ProjectionHead>) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    encoder.weights.visit("", &mut |n, t| out.push((n, t)));
    if let Some(p) = projection {
        p.visit("projection", &mut |n, t| out.push((n, t)));
    }
    out
}

pub fn to_bytes(encoder: &Encoder, projection: Option<&ProjectionHead>) -> Result<Vec<u8>> {
    let tensors = collect(encoder, projection);
    let header = Header {
        format: FORMAT,
        config: encoder.config.clone(),
        pattern: encoder.pattern.codes(),
        has_projection: projection.is_some(),
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Encoder, Option<ProjectionHead>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", header.format)));
    }
    let pattern = ReusePattern::from_codes(&header.pattern);
    let mut encoder = Encoder::zeros(&header.config, &pattern)?;
    let mut projection = header
        .has_projection
        .then(|| ProjectionHead::identity(header.config.num_layers, 1));
    if let Some(p) = &mut projection {
        let (d, dt) = (header.config.model_width, header.config.teacher_width);
        for l in &mut p.layers {
            l.weight = Tensor::zeros(&[d, dt]);
            l.bias = Some(Tensor::zeros(&[dt]));
        }
    }

    let mut data = &bytes[16 + hlen..];
    let mut entries = header.tensors.iter();
    let mut fill = |name: String, t: &mut Tensor| -> Result<()> {
        let e = entries.next().ok_or_else(|| bad("header lists too few tensors"))?;
        if e.name != name || e.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "expected {name} {:?}, header has {} {:?}",
                t.shape(),
                e.name,
                e.shape
            )));
        }
        let need = 8 * t.len();
        if data.len() < need {
            return Err(bad("truncated tensor data"));
        }
        for (v, c) in t.data_mut().iter_mut().zip(data[..need].chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        data = &data[need..];
        Ok(())
    };
    let mut status = Ok(());
    encoder.weights.visit_mut("", &mut |n, t| {
        if status.is_ok() {
            status = fill(n, t);
        }
    });
    if let Some(p) = &mut projection {
        p.visit_mut("projection", &mut |n, t| {
            if status.is_ok() {
                status = fill(n, t);
            }
        });
    }
    status?;
    if entries.next().is_some() || !data.is_empty() {
        return Err(bad("trailing tensors or data"));
    }
    Ok((encoder, projection))
}

pub fn save(path: &Path, encoder: &Encoder, projection: Option<&ProjectionHead>) -> Result<()> {
    std::fs::write(path, to_bytes(encoder, projection)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Encoder, Option<ProjectionHead>)> {
    from_bytes(&std::fs::read(path)?)
}

pub fn save_student(path: &Path, student: &Student) -> Result<()> {
    save(path, &student.encoder(), Some(&student.params.projection))
}

pub fn load_student(path: &Path) -> Result<Student> {
    let (enc, proj) = load(path)?;
    let proj = proj.ok_or_else(|| Error::Checkpoint("checkpoint has no projection head".into()))?;
    Ok(Student::from_parts(enc.config, enc.pattern, enc.weights, proj))
}
