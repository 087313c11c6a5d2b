//! Trace text format and synthetic workloads.
//!
//! One operation per line: `R <addr>` or `W <addr> <hex-seed>`. Text after
//! `#` is a comment. A write's payload is expanded from its seed.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::controller::Request;
use crate::error::{OramError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceOp {
    pub kind: OpKind,
    pub addr: u64,
    /// Payload seed, present exactly for writes.
    pub seed: Option<u64>,
}

impl TraceOp {
    pub fn read(addr: u64) -> Self {
        TraceOp {
            kind: OpKind::Read,
            addr,
            seed: None,
        }
    }

    pub fn write(addr: u64, seed: u64) -> Self {
        TraceOp {
            kind: OpKind::Write,
            addr,
            seed: Some(seed),
        }
    }

    pub fn request(&self, block_size: usize) -> Request {
        match self.seed {
            Some(seed) => Request::Write(self.addr, payload_from_seed(seed, block_size)),
            None => Request::Read(self.addr),
        }
    }
}

/// Deterministic payload bytes for a write seed.
pub fn payload_from_seed(seed: u64, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill(&mut out[..]);
    out
}

/// Strict parse. `blocks` bounds the addresses when given.
pub fn parse_trace(text: &str, blocks: Option<u64>) -> Result<Vec<TraceOp>> {
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let err = |column: usize, message: String| OramError::Parse {
            line: i + 1,
            column,
            message,
        };
        let mut fields = Vec::new();
        let mut pos = 0;
        for tok in line.split_whitespace() {
            let col = line[pos..].find(tok).unwrap() + pos;
            pos = col + tok.len();
            fields.push((col + 1, tok));
        }
        let Some(&(col, kind)) = fields.first() else {
            continue;
        };
        let addr = |fields: &[(usize, &str)]| -> Result<u64> {
            let &(c, tok) = fields
                .get(1)
                .ok_or_else(|| err(line.len() + 1, "missing address".into()))?;
            let a: u64 = tok
                .parse()
                .map_err(|_| err(c, format!("bad address `{tok}`")))?;
            if let Some(n) = blocks {
                if a >= n {
                    return Err(err(c, format!("address {a} not below {n}")));
                }
            }
            Ok(a)
        };
        let op = match kind {
            "R" => {
                if let Some(&(c, _)) = fields.get(2) {
                    return Err(err(c, "unexpected field after read address".into()));
                }
                TraceOp::read(addr(&fields)?)
            }
            "W" => {
                let a = addr(&fields)?;
                let &(c, tok) = fields
                    .get(2)
                    .ok_or_else(|| err(line.len() + 1, "missing payload seed".into()))?;
                let seed = u64::from_str_radix(tok, 16)
                    .map_err(|_| err(c, format!("bad hex seed `{tok}`")))?;
                if let Some(&(c, _)) = fields.get(3) {
                    return Err(err(c, "unexpected field after seed".into()));
                }
                TraceOp::write(a, seed)
            }
            other => return Err(err(col, format!("unknown operation `{other}`"))),
        };
        ops.push(op);
    }
    Ok(ops)
}

pub fn format_trace(ops: &[TraceOp]) -> String {
    let mut out = String::new();
    for op in ops {
        match op.seed {
            Some(s) => writeln!(out, "W {} {:x}", op.addr, s).unwrap(),
            None => writeln!(out, "R {}", op.addr).unwrap(),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthKind {
    Uniform,
    Zipf(f64),
    Sequential,
    SingleHot,
}

impl SynthKind {
    /// `uniform`, `zipf:<s>`, `sequential` or `single-hot`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || OramError::Config(format!("unknown trace kind `{s}`"));
        match s {
            "uniform" => Ok(SynthKind::Uniform),
            "sequential" => Ok(SynthKind::Sequential),
            "single-hot" => Ok(SynthKind::SingleHot),
            _ => {
                let exp = s.strip_prefix("zipf:").ok_or_else(bad)?;
                let e: f64 = exp.parse().map_err(|_| bad())?;
                Ok(SynthKind::Zipf(e))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            SynthKind::Uniform => "uniform".into(),
            SynthKind::Zipf(s) => format!("zipf:{s}"),
            SynthKind::Sequential => "sequential".into(),
            SynthKind::SingleHot => "single-hot".into(),
        }
    }
}

/// `count` operations over `blocks` addresses, half of them writes.
pub fn synth_trace(kind: SynthKind, count: usize, blocks: u64, seed: u64) -> Result<Vec<TraceOp>> {
    if count == 0 || blocks == 0 {
        return Err(OramError::Config("synthetic trace needs count > 0 and blocks > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = match kind {
        SynthKind::Zipf(s) => Some(
            Zipf::new(blocks, s)
                .map_err(|e| OramError::Config(format!("zipf exponent {s}: {e}")))?,
        ),
        _ => None,
    };
    let mut ops = Vec::with_capacity(count);
    for i in 0..count {
        let addr = match kind {
            SynthKind::Uniform => rng.gen_range(0..blocks),
            SynthKind::Zipf(_) => zipf.as_ref().unwrap().sample(&mut rng) as u64 - 1,
            SynthKind::Sequential => i as u64 % blocks,
            SynthKind::SingleHot => 0,
        };
        ops.push(if rng.gen_bool(0.5) {
            TraceOp::write(addr, rng.gen())
        } else {
            TraceOp::read(addr)
        });
    }
    Ok(ops)
}
