//! Plain-text head checkpoints. Line one is a magic version header, then
//! `key=value` metadata in a fixed order, a `params:` marker, and one
//! parameter per line. Floats are written with the shortest representation
//! that parses back to the identical bits, so save followed by load is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use trinity_core::heads::{Head, HeadConfig, HeadKind, OutputMode, TieBreak};
use trinity_core::rng::RngStream;

pub const MAGIC: &str = "TRINITY-CKPT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: expected header {MAGIC:?}, found {0:?}")]
    Version(String),
    #[error("checkpoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint does not fit the template: {0}")]
    Mismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

fn kind_name(kind: HeadKind) -> String {
    kind.name()
}

fn parse_kind(s: &str) -> Option<HeadKind> {
    match s {
        "linear" => Some(HeadKind::Linear),
        "low-rank" => Some(HeadKind::LowRank),
        "sparse" => Some(HeadKind::Sparse),
        _ => {
            let b: usize = s.strip_prefix("block-diagonal-")?.parse().ok()?;
            Some(HeadKind::BlockDiagonal(b))
        }
    }
}

pub fn serialize(head: &Head, seed: u64) -> String {
    let cfg = &head.cfg;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "kind={}", kind_name(head.kind));
    let _ = writeln!(out, "d_h={}", cfg.d_h);
    let _ = writeln!(out, "L={}", cfg.agents);
    let _ = writeln!(out, "r={}", cfg.r);
    let _ = writeln!(out, "elu_alpha={}", cfg.elu_alpha);
    let _ = writeln!(out, "fixed_scale={}", cfg.fixed_scale);
    let _ = writeln!(out, "gumbel_temperature={}", cfg.gumbel_temperature);
    let _ = writeln!(
        out,
        "output_mode={}",
        match cfg.output_mode {
            OutputMode::Softmax => "softmax",
            OutputMode::Argmax => "argmax",
        }
    );
    let _ = writeln!(
        out,
        "tie_break={}",
        match cfg.tie_break {
            TieBreak::UniformRandom => "uniform",
            TieBreak::LowestIndex => "lowest_index",
        }
    );
    let _ = writeln!(out, "repr_scale={}", cfg.repr_scale_enabled);
    let _ = writeln!(out, "seed={seed}");
    let _ = writeln!(out, "params:");
    for p in head.to_vector() {
        let _ = writeln!(out, "{p}");
    }
    out
}

pub fn save(head: &Head, seed: u64, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, serialize(head, seed))?;
    Ok(())
}

struct Meta {
    kind: HeadKind,
    cfg: HeadConfig,
    seed: u64,
    body_start: usize,
}

fn parse_meta(text: &str) -> Result<(Meta, Vec<&str>), CheckpointError> {
    let lines: Vec<&str> = text.lines().collect();
    match lines.first() {
        Some(&l) if l == MAGIC => {}
        other => return Err(CheckpointError::Version(other.copied().unwrap_or("").to_string())),
    }
    let mut kind = None;
    let mut cfg = HeadConfig::default();
    let mut seed = 0u64;
    let mut body_start = None;
    for (i, raw) in lines.iter().enumerate().skip(1) {
        let line = i + 1;
        if *raw == "params:" {
            body_start = Some(i + 1);
            break;
        }
        let (key, value) = raw.split_once('=').ok_or_else(|| CheckpointError::Parse {
            line,
            msg: format!("expected key=value, found {raw:?}"),
        })?;
        let bad = |msg: String| CheckpointError::Parse { line, msg };
        match key {
            "kind" => {
                kind = Some(
                    parse_kind(value).ok_or_else(|| bad(format!("unknown kind {value:?}")))?,
                )
            }
            "d_h" => cfg.d_h = value.parse().map_err(|_| bad(format!("bad d_h {value:?}")))?,
            "L" => cfg.agents = value.parse().map_err(|_| bad(format!("bad L {value:?}")))?,
            "r" => cfg.r = value.parse().map_err(|_| bad(format!("bad r {value:?}")))?,
            "elu_alpha" => {
                cfg.elu_alpha = value.parse().map_err(|_| bad(format!("bad elu_alpha {value:?}")))?
            }
            "fixed_scale" => {
                cfg.fixed_scale =
                    value.parse().map_err(|_| bad(format!("bad fixed_scale {value:?}")))?
            }
            "gumbel_temperature" => {
                cfg.gumbel_temperature = value
                    .parse()
                    .map_err(|_| bad(format!("bad gumbel_temperature {value:?}")))?
            }
            "output_mode" => {
                cfg.output_mode = match value {
                    "softmax" => OutputMode::Softmax,
                    "argmax" => OutputMode::Argmax,
                    _ => return Err(bad(format!("unknown output_mode {value:?}"))),
                }
            }
            "tie_break" => {
                cfg.tie_break = match value {
                    "uniform" => TieBreak::UniformRandom,
                    "lowest_index" => TieBreak::LowestIndex,
                    _ => return Err(bad(format!("unknown tie_break {value:?}"))),
                }
            }
            "repr_scale" => {
                cfg.repr_scale_enabled =
                    value.parse().map_err(|_| bad(format!("bad repr_scale {value:?}")))?
            }
            "seed" => seed = value.parse().map_err(|_| bad(format!("bad seed {value:?}")))?,
            _ => return Err(bad(format!("unknown key {key:?}"))),
        }
    }
    let kind = kind.ok_or(CheckpointError::Parse {
        line: lines.len(),
        msg: "missing kind".into(),
    })?;
    let body_start = body_start.ok_or(CheckpointError::Parse {
        line: lines.len(),
        msg: "missing params: marker".into(),
    })?;
    Ok((
        Meta {
            kind,
            cfg,
            seed,
            body_start,
        },
        lines,
    ))
}

fn parse_params(lines: &[&str], body_start: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut params = Vec::with_capacity(lines.len().saturating_sub(body_start));
    for (i, raw) in lines.iter().enumerate().skip(body_start) {
        if raw.is_empty() {
            continue;
        }
        let v: f64 = raw.parse().map_err(|_| CheckpointError::Parse {
            line: i + 1,
            msg: format!("bad parameter {raw:?}"),
        })?;
        params.push(v);
    }
    Ok(params)
}

/// Rebuild the head from its own metadata.
pub fn deserialize(text: &str) -> Result<(Head, u64), CheckpointError> {
    let (meta, lines) = parse_meta(text)?;
    let params = parse_params(&lines, meta.body_start)?;
    // Any seed works here; every parameter is overwritten below.
    let template = Head::init(meta.kind, &meta.cfg, &mut RngStream::root(0))
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    if params.len() != template.param_len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} parameters for a {} head expecting {}",
            params.len(),
            kind_name(meta.kind),
            template.param_len()
        )));
    }
    let head = Head::from_vector(&template, params)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    Ok((head, meta.seed))
}

pub fn load(path: &Path) -> Result<(Head, u64), CheckpointError> {
    deserialize(&fs::read_to_string(path)?)
}

/// Load parameters into an existing template, insisting the stored shape
/// matches it exactly.
pub fn load_into_template(path: &Path, template: &Head) -> Result<(Head, u64), CheckpointError> {
    let text = fs::read_to_string(path)?;
    let (meta, lines) = parse_meta(&text)?;
    if meta.kind != template.kind {
        return Err(CheckpointError::Mismatch(format!(
            "kind {} vs template {}",
            kind_name(meta.kind),
            kind_name(template.kind)
        )));
    }
    for (name, stored, expected) in [
        ("d_h", meta.cfg.d_h, template.cfg.d_h),
        ("L", meta.cfg.agents, template.cfg.agents),
        ("r", meta.cfg.r, template.cfg.r),
    ] {
        if stored != expected {
            return Err(CheckpointError::Mismatch(format!(
                "{name} {stored} vs template {expected}"
            )));
        }
    }
    if meta.cfg.repr_scale_enabled != template.cfg.repr_scale_enabled {
        return Err(CheckpointError::Mismatch(
            "repr_scale flag differs from template".into(),
        ));
    }
    let params = parse_params(&lines, meta.body_start)?;
    if params.len() != template.param_len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} parameters, template holds {}",
            params.len(),
            template.param_len()
        )));
    }
    let head = Head::from_vector(template, params)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    Ok((head, meta.seed))
}
