//! Binary checkpoint: `ADVSTEG1`, u32 LE version, u32 LE header length, a
//! UTF-8 `key=value` header with one `tensor <name> <shape>` line per stored
//! tensor, then every tensor as little-endian f64 in header order.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{NetConfig, Nets, Network};
use crate::tensor::{OptimState, Tensor};

pub const MAGIC: &[u8; 8] = b"ADVSTEG1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything needed to resume or reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub nets: Nets,
    /// Generator, discriminator, steganalyzer.
    pub optim: [OptimState; 3],
    /// Number of training steps already taken.
    pub step: u64,
}

impl Checkpoint {
    pub fn fresh(nets: Nets) -> Self {
        let optim = [
            OptimState::for_params(nets.generator.tensors()),
            OptimState::for_params(nets.discriminator.tensors()),
            OptimState::for_params(nets.steganalyzer.tensors()),
        ];
        Checkpoint { nets, optim, step: 0 }
    }

    /// (name, tensor) in storage order.
    fn manifest(&self) -> Vec<(String, &Tensor)> {
        let n = &self.nets;
        let mut out = Vec::new();
        let groups: [(&str, Vec<String>, Vec<&Tensor>); 3] = [
            ("generator", n.generator.tensor_names(), n.generator.tensors()),
            ("discriminator", n.discriminator.tensor_names(), n.discriminator.tensors()),
            ("steganalyzer", n.steganalyzer.tensor_names(), n.steganalyzer.tensors()),
        ];
        for (prefix, names, tensors) in &groups {
            for (name, t) in names.iter().zip(tensors) {
                out.push((format!("{prefix}.{name}"), *t));
            }
        }
        for ((prefix, names, _), state) in groups.iter().zip(&self.optim) {
            for (name, t) in names.iter().zip(&state.mean_square) {
                out.push((format!("optim.{prefix}.{name}"), t));
            }
        }
        out
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<(), CheckpointError> {
    let cfg = &ckpt.nets.config;
    let [og, od, os] = &ckpt.optim;
    if og.decay != od.decay || og.decay != os.decay || og.epsilon != od.epsilon || og.epsilon != os.epsilon {
        return Err(CheckpointError::Malformed("optimizer hyperparameters differ between networks".into()));
    }
    let mut header = String::new();
    // Display on f64 prints the shortest string that parses back exactly.
    let _ = writeln!(header, "image_side={}", cfg.image_side);
    let _ = writeln!(header, "message_len={}", cfg.message_len);
    let _ = writeln!(header, "base_channels={}", cfg.base_channels);
    let _ = writeln!(header, "leaky_slope={}", cfg.leaky_slope);
    let _ = writeln!(header, "step={}", ckpt.step);
    let _ = writeln!(header, "rmsprop_decay={}", og.decay);
    let _ = writeln!(header, "rmsprop_epsilon={}", og.epsilon);
    let manifest = ckpt.manifest();
    for (name, t) in &manifest {
        let _ = writeln!(header, "tensor {name} {}", shape_text(t.shape()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::new();
    for (_, t) in &manifest {
        buf.clear();
        buf.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(CheckpointError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

fn field<T: std::str::FromStr>(lines: &[(&str, &str)], key: &str) -> Result<T, CheckpointError> {
    let (_, v) = lines
        .iter()
        .find(|(k, _)| *k == key)
        .ok_or_else(|| CheckpointError::Malformed(format!("missing header field {key}")))?;
    v.parse()
        .map_err(|_| CheckpointError::Malformed(format!("bad value {v:?} for {key}")))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut at = 0;
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated {
                expected: MAGIC.len(),
                found: bytes.len(),
            }
        } else {
            CheckpointError::BadMagic
        });
    }
    if take(bytes, &mut at, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes")) as usize;
    let header = std::str::from_utf8(take(bytes, &mut at, header_len)?)
        .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;

    let mut fields = Vec::new();
    let mut listed = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let (name, shape) = rest
                .split_once(' ')
                .ok_or_else(|| CheckpointError::Malformed(format!("bad tensor line {line:?}")))?;
            listed.push((name, shape));
        } else if let Some(kv) = line.split_once('=') {
            fields.push(kv);
        } else {
            return Err(CheckpointError::Malformed(format!("bad header line {line:?}")));
        }
    }
    let config = NetConfig {
        image_side: field(&fields, "image_side")?,
        message_len: field(&fields, "message_len")?,
        base_channels: field(&fields, "base_channels")?,
        leaky_slope: field(&fields, "leaky_slope")?,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let decay: f64 = field(&fields, "rmsprop_decay")?;
    let epsilon: f64 = field(&fields, "rmsprop_epsilon")?;
    let mut ckpt = Checkpoint::fresh(Nets::zeroed(&config));
    ckpt.step = field(&fields, "step")?;
    for s in &mut ckpt.optim {
        s.decay = decay;
        s.epsilon = epsilon;
    }

    // The config fixes every shape; the manifest must agree with it exactly.
    let expected: Vec<(String, Vec<usize>)> = ckpt
        .manifest()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if listed.len() != expected.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} tensors listed, config implies {}",
            listed.len(),
            expected.len()
        )));
    }
    for ((name, shape), (want_name, want_shape)) in listed.iter().zip(&expected) {
        if name != want_name || *shape != shape_text(want_shape) {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name} {shape} where {want_name} {} was expected",
                shape_text(want_shape)
            )));
        }
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let need = at + 8 * total;
    if bytes.len() < need {
        return Err(CheckpointError::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    if bytes.len() > need {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - need)));
    }

    let mut targets: Vec<&mut Tensor> = Vec::new();
    let Checkpoint { nets, optim, .. } = &mut ckpt;
    targets.extend(nets.generator.tensors_mut());
    targets.extend(nets.discriminator.tensors_mut());
    targets.extend(nets.steganalyzer.tensors_mut());
    for s in optim.iter_mut() {
        targets.extend(s.mean_square.iter_mut());
    }
    for t in targets {
        let raw = take(bytes, &mut at, 8 * t.len())?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Malformed("non-finite value stored".into()));
        }
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(ckpt, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}
