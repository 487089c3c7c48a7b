//! Binary checkpoint and loss-history files.
//!
//! Checkpoint layout (little-endian): magic `ORLC`, `u32` version, 32-byte
//! configuration digest, then until end of file one record per tensor:
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `f32` values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::loss::LossBreakdown;
use super::network::{Architecture, NetworkParams};
use crate::embedding::ByteReader;
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ORLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub online: NetworkParams,
    pub target: NetworkParams,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        for (prefix, net) in [("online", &self.online), ("target", &self.target)] {
            for (name, dims, values) in net.tensors() {
                let name = format!("{prefix}.{name}");
                put_u32(&mut out, name.len())?;
                out.extend_from_slice(name.as_bytes());
                put_u32(&mut out, dims.len())?;
                for d in dims {
                    put_u32(&mut out, d)?;
                }
                for &v in values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        while !r.at_end() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= bytes.len())
                .ok_or_else(|| Error::Format(format!("tensor {name} dims {dims:?}")))?;
            let values = (0..count).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            if tensors.insert(name.clone(), (dims, values)).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        let arch = architecture_of(&tensors)?;
        let mut online = NetworkParams::init(&arch, &mut rng::stream(0, &[]))?;
        let mut target = online.target_copy();
        fill(&mut online, "online", &mut tensors)?;
        fill(&mut target, "target", &mut tensors)?;
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(Self { digest, online, target })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn dims_of<'a>(t: &'a TensorMap, name: &str) -> Result<&'a [usize]> {
    t.get(name)
        .map(|(d, _)| d.as_slice())
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
}

fn architecture_of(t: &TensorMap) -> Result<Architecture> {
    let mut widths = Vec::new();
    let mut grid = 0;
    while let Ok(d) = dims_of(t, &format!("online.backbone.{}.weight", widths.len())) {
        if d.len() != 2 {
            return Err(Error::Format("backbone weight is not a matrix".into()));
        }
        if widths.is_empty() {
            grid = ((d[1] / 3) as f64).sqrt().round() as usize;
            if grid * grid * 3 != d[1] {
                return Err(Error::Format(format!("backbone input width {}", d[1])));
            }
        }
        widths.push(d[0]);
    }
    let first = |name: &str| -> Result<usize> {
        dims_of(t, name)?
            .first()
            .copied()
            .ok_or_else(|| Error::Format(format!("tensor {name} has rank 0")))
    };
    Ok(Architecture {
        grid,
        backbone_widths: widths,
        proj_hidden: first("online.projector.fc1.weight")?,
        proj_out: first("online.projector.fc2.weight")?,
        pred_hidden: first("online.predictor.global.fc1.weight")?,
    })
}

fn fill(net: &mut NetworkParams, prefix: &str, t: &mut TensorMap) -> Result<()> {
    for (name, dims, dst) in net.tensors_mut() {
        let full = format!("{prefix}.{name}");
        let (d, values) = t
            .remove(&full)
            .ok_or_else(|| Error::Format(format!("missing tensor {full}")))?;
        if d != dims {
            return Err(Error::Format(format!("tensor {full}: dims {d:?}, expected {dims:?}")));
        }
        dst.copy_from_slice(&values);
    }
    Ok(())
}

/// Loss and schedule values of one optimization step (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub losses: LossBreakdown,
}

pub const HISTORY_HEADER: &str = "step\tlr\ttau\ttotal\tL_image\tL_intra\tL_inter";

/// Tab-separated history, one header line then one line per step.
pub fn write_history<W: Write>(mut w: W, history: &[StepRecord]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in history {
        let l = &r.losses;
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.step, r.lr, r.tau, l.total, l.image, l.intra, l.inter
        )?;
    }
    Ok(())
}

pub fn parse_history(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Format("loss history header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("loss history line {line:?}")))
            };
            if f.len() != 7 {
                return Err(Error::Format(format!("loss history line {line:?}")));
            }
            Ok(StepRecord {
                step: f[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("loss history line {line:?}")))?,
                lr: num(1)?,
                tau: num(2)?,
                losses: LossBreakdown {
                    total: num(3)?,
                    image: num(4)?,
                    intra: num(5)?,
                    inter: num(6)?,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture {
            grid: 2,
            backbone_widths: vec![5, 4],
            proj_hidden: 3,
            proj_out: 2,
            pred_hidden: 3,
        }
    }

    #[test]
    fn checkpoint_round_trips_at_f32() {
        let online = NetworkParams::init(&small(), &mut rng::stream(5, &[])).unwrap();
        let ck = Checkpoint {
            digest: [7; 32],
            target: online.target_copy(),
            online,
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ORLC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.digest, [7; 32]);
        assert_eq!(back.online.architecture(), small());
        for ((_, _, a), (_, _, b)) in ck.online.tensors().iter().zip(back.online.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"ORLE").is_err());
    }

    #[test]
    fn history_round_trips() {
        let h = vec![StepRecord {
            step: 1,
            lr: 0.1,
            tau: 0.99,
            losses: LossBreakdown {
                total: 3.5,
                image: 1.0,
                intra: 2.0,
                inter: 0.5,
            },
        }];
        let mut buf = Vec::new();
        write_history(&mut buf, &h).unwrap();
        assert_eq!(parse_history(std::str::from_utf8(&buf).unwrap()).unwrap(), h);
    }
}
