//! Plain-text key→tensor checkpoints.
//!
//! ```text
//! csa-checkpoint 1
//! meta <key> <single-line value>
//! tensor <name> <rank> <dim_0> ... <dim_{rank-1}>
//! <row-major values separated by single spaces>
//! ```
//!
//! Values are written in Rust's shortest round-trip notation, so a
//! save/load cycle reproduces every `f64` bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CsaError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "csa-checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(CsaError::InvalidConfig(format!("checkpoint meta entry {k:?} is not serialisable")));
            }
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            if !valid_token(name) {
                return Err(CsaError::InvalidConfig(format!("checkpoint tensor name {name:?} is not serialisable")));
            }
            let _ = write!(s, "tensor {name} {}", t.rank());
            for d in t.shape() {
                let _ = write!(s, " {d}");
            }
            s.push('\n');
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{v:?}");
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| CsaError::format("checkpoint", reason);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(bad(format!("missing header {MAGIC:?}"))),
        }
        let mut ck = Checkpoint::default();
        while let Some((no, line)) = lines.next() {
            let no = no + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let Some(rest) = line.strip_prefix("tensor ") else {
                return Err(bad(format!("line {no}: unexpected record")));
            };
            let fields: Vec<&str> = rest.split(' ').collect();
            let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("line {no}: bad integer {s:?}")));
            if fields.len() < 2 {
                return Err(bad(format!("line {no}: truncated tensor header")));
            }
            let rank = parse_usize(fields[1])?;
            if fields.len() != 2 + rank {
                return Err(bad(format!("line {no}: expected {rank} dims")));
            }
            let shape = fields[2..].iter().map(|s| parse_usize(s)).collect::<Result<Vec<_>>>()?;
            let (_, values) = lines
                .next()
                .ok_or_else(|| bad(format!("line {no}: tensor {} has no data", fields[0])))?;
            let data = values
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| bad(format!("tensor {}: bad value {s:?}", fields[0]))))
                .collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {}: {e}", fields[0])))?;
            ck.tensors.push((fields[0].to_string(), tensor));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
