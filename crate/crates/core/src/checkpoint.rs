//! Binary checkpoints of a training state.
//!
//! Layout: the magic line `prnuda-ckpt-v1\n`, a little-endian `u64` header
//! length, a JSON header, then every parameter and optimizer moment as
//! little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{Arch, ModelState, OptimState};
use crate::selftrain::{TeacherState, TrainState};

const MAGIC: &[u8] = b"prnuda-ckpt-v1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: u64,
    pub seg_arch: Arch,
    pub prn_arch: Arch,
    pub ema_beta: f64,
    pub student_opt_step: u64,
    pub prn_opt_step: u64,
    /// Lengths of the payload sections, in order: student, teacher, prn,
    /// student m, student v, prn m, prn v.
    pub sections: Vec<usize>,
}

fn sections(s: &TrainState) -> [&[f64]; 7] {
    [
        &s.student.params,
        &s.teacher.model.params,
        &s.prn.params,
        &s.student_opt.m,
        &s.student_opt.v,
        &s.prn_opt.m,
        &s.prn_opt.v,
    ]
}

pub fn to_bytes(s: &TrainState) -> Result<Vec<u8>> {
    let secs = sections(s);
    let header = CheckpointHeader {
        step: s.step,
        seg_arch: s.student.arch.clone(),
        prn_arch: s.prn.arch.clone(),
        ema_beta: s.teacher.beta,
        student_opt_step: s.student_opt.step,
        prn_opt_step: s.prn_opt.step,
        sections: secs.iter().map(|v| v.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = secs.iter().map(|v| v.len()).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for sec in secs {
        for v in sec {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads only the header.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("missing magic line".into()));
    }
    let mut at = MAGIC.len();
    let len_bytes: [u8; 8] = bytes
        .get(at..at + 8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("truncated header length".into()))?;
    at += 8;
    let n = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(at..at + n)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    Ok((header, at + n))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let (h, mut at) = read_header(bytes)?;
    if h.sections.len() != 7 {
        return Err(Error::Checkpoint(format!("expected 7 sections, found {}", h.sections.len())));
    }
    let mut secs = Vec::with_capacity(7);
    for &n in &h.sections {
        let raw = bytes
            .get(at..at + 8 * n)
            .ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
        secs.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f64>>(),
        );
        at += 8 * n;
    }
    if at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - at)));
    }
    let mut it = secs.into_iter();
    let mut next = || it.next().unwrap();
    let student = ModelState::from_params(h.seg_arch.clone(), next())?;
    let teacher = ModelState::from_params(h.seg_arch.clone(), next())?;
    let prn = ModelState::from_params(h.prn_arch.clone(), next())?;
    let mut opt = |len: usize, step: u64| -> Result<OptimState> {
        let (m, v) = (next(), next());
        if m.len() != len || v.len() != len {
            return Err(Error::Checkpoint("optimizer state does not match its model".into()));
        }
        Ok(OptimState { m, v, step })
    };
    let student_opt = opt(student.len(), h.student_opt_step)?;
    let prn_opt = opt(prn.len(), h.prn_opt_step)?;
    Ok(TrainState {
        teacher: TeacherState {
            model: teacher,
            beta: h.ema_beta,
        },
        student,
        prn,
        student_opt,
        prn_opt,
        step: h.step,
    })
}

pub fn save(s: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(s)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
