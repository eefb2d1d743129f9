//! Self-describing text checkpoint format.
//!
//! Layout (one record per line):
//!
//! ```text
//! deforma-checkpoint v1
//! meta <key> <value...>
//! param <name> <constraint> <ndims> <d0> <d1> ...
//! <hex-encoded f64 bit patterns, space separated, one line per tensor>
//! end
//! ```
//!
//! Values are stored as raw IEEE-754 bit patterns, so round-trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::optim::{Constraint, Parameter};
use crate::nn::tensor::Tensor;

const MAGIC: &str = "deforma-checkpoint v1";

pub fn save(path: &Path, meta: &BTreeMap<String, String>, params: &[Parameter]) -> Result<()> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (key, value) in meta {
        if key.contains(char::is_whitespace) {
            return Err(Error::argument(format!("meta key '{key}' contains whitespace")));
        }
        out.push_str(&format!("meta {key} {value}\n"));
    }
    for p in params {
        if p.name.contains(char::is_whitespace) {
            return Err(Error::argument(format!("param name '{}' contains whitespace", p.name)));
        }
        out.push_str(&format!(
            "param {} {} {}",
            p.name,
            p.constraint.tag(),
            p.value.shape.len()
        ));
        for d in &p.value.shape {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
        let mut first = true;
        for v in &p.value.data {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{:016x}", v.to_bits()));
            first = false;
        }
        out.push('\n');
    }
    out.push_str("end\n");
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(BTreeMap<String, String>, Vec<Parameter>)> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Parse {
            row: path.display().to_string(),
            reason: "missing checkpoint magic".to_string(),
        });
    }
    let mut meta = BTreeMap::new();
    let mut params = Vec::new();
    while let Some(line) = lines.next() {
        if line == "end" {
            return Ok((meta, params));
        }
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("meta") => {
                let key = fields.next().ok_or_else(|| malformed(path, "meta key"))?;
                let value = fields.collect::<Vec<_>>().join(" ");
                meta.insert(key.to_string(), value);
            }
            Some("param") => {
                let name = fields.next().ok_or_else(|| malformed(path, "param name"))?;
                let constraint = Constraint::from_tag(
                    fields.next().ok_or_else(|| malformed(path, "constraint"))?,
                )?;
                let ndims: usize = fields
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| malformed(path, "ndims"))?;
                let mut shape = Vec::with_capacity(ndims);
                for _ in 0..ndims {
                    shape.push(
                        fields
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| malformed(path, "shape dim"))?,
                    );
                }
                let data_line = lines.next().ok_or_else(|| malformed(path, "tensor data"))?;
                let data: Vec<f64> = data_line
                    .split_whitespace()
                    .map(|h| {
                        u64::from_str_radix(h, 16)
                            .map(f64::from_bits)
                            .map_err(|_| malformed(path, "hex value"))
                    })
                    .collect::<Result<_>>()?;
                params.push(Parameter::new(name, Tensor::new(shape, data)?, constraint));
            }
            _ => return Err(malformed(path, "unknown record")),
        }
    }
    Err(malformed(path, "missing end marker"))
}

fn malformed(path: &Path, what: &str) -> Error {
    Error::Parse {
        row: path.display().to_string(),
        reason: format!("malformed checkpoint ({what})"),
    }
}
