//! Versioned text encoding of a mask at one point of training.
//!
//! ```text
//! dstlab-mask v1
//! step=800
//! criterion=magnitude
//! growth=random
//! seed=3
//! density=0.05
//! layers=2
//! layer name=fc1 shape=24x256 active=3
//! 0 17 4095
//! layer name=fc2 shape=256x256 active=0
//!
//! ```
//!
//! Every line ends in `\n`, indices are ascending decimal integers separated by
//! single spaces, and `density` is written with Rust's shortest round-trip
//! float formatting, so equal masks always encode to equal bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{DstError, Result};
use crate::topology::{LayerMask, Mask};

pub const MAGIC: &str = "dstlab-mask v1";

/// A mask plus the run coordinates it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSnapshot {
    pub step: u64,
    pub criterion: String,
    pub growth: String,
    pub seed: u64,
    pub density: f64,
    pub mask: Mask,
}

impl MaskSnapshot {
    pub fn encode(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC}").unwrap();
        writeln!(s, "step={}", self.step).unwrap();
        writeln!(s, "criterion={}", self.criterion).unwrap();
        writeln!(s, "growth={}", self.growth).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "density={}", self.density).unwrap();
        writeln!(s, "layers={}", self.mask.num_layers()).unwrap();
        for lm in self.mask.layers() {
            let shape: Vec<String> = lm.shape().iter().map(usize::to_string).collect();
            writeln!(
                s,
                "layer name={} shape={} active={}",
                lm.name(),
                shape.join("x"),
                lm.active_count()
            )
            .unwrap();
            let idx: Vec<String> = lm.active_indices().iter().map(usize::to_string).collect();
            writeln!(s, "{}", idx.join(" ")).unwrap();
        }
        s
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let mut line_no = 0usize;
        let mut next = |what: &str| -> Result<&str> {
            line_no += 1;
            lines
                .next()
                .ok_or_else(|| DstError::Snapshot(format!("unexpected end of file, expected {what} on line {line_no}")))
        };
        let magic = next("header")?;
        if magic != MAGIC {
            return Err(DstError::Snapshot(format!("unsupported header '{magic}', expected '{MAGIC}'")));
        }
        fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| DstError::Snapshot(format!("expected '{key}=', found '{line}'")))
        }
        fn num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
            v.parse().map_err(|_| DstError::Snapshot(format!("bad {key} value '{v}'")))
        }
        let step = num(field(next("step")?, "step")?, "step")?;
        let criterion = field(next("criterion")?, "criterion")?.to_string();
        let growth = field(next("growth")?, "growth")?.to_string();
        let seed = num(field(next("seed")?, "seed")?, "seed")?;
        let density = num(field(next("density")?, "density")?, "density")?;
        let count: usize = num(field(next("layers")?, "layers")?, "layers")?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let head = next("layer header")?;
            let rest = head
                .strip_prefix("layer ")
                .ok_or_else(|| DstError::Snapshot(format!("expected layer header, found '{head}'")))?;
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 3 {
                return Err(DstError::Snapshot(format!("malformed layer header '{head}'")));
            }
            let name = field(parts[0], "name")?;
            let shape: Vec<usize> = field(parts[1], "shape")?
                .split('x')
                .map(|d| num(d, "shape"))
                .collect::<Result<_>>()?;
            let active: usize = num(field(parts[2], "active")?, "active")?;
            let body = next("index list")?;
            let idx: Vec<usize> = if body.is_empty() {
                Vec::new()
            } else {
                body.split(' ').map(|t| num(t, "index")).collect::<Result<_>>()?
            };
            if idx.len() != active {
                return Err(DstError::Snapshot(format!(
                    "layer {name}: header says {active} active, found {}",
                    idx.len()
                )));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(DstError::Snapshot(format!("layer {name}: indices not strictly ascending")));
            }
            let lm = LayerMask::from_active(name, shape, &idx).map_err(|e| DstError::Snapshot(e.to_string()))?;
            layers.push(lm);
        }
        match (lines.next(), lines.next()) {
            (Some(""), None) => {}
            _ => return Err(DstError::Snapshot("trailing content after last layer".into())),
        }
        Ok(MaskSnapshot {
            step,
            criterion,
            growth,
            seed,
            density,
            mask: Mask::new(layers),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        MaskSnapshot::decode(&text).map_err(|e| DstError::Snapshot(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> MaskSnapshot {
        MaskSnapshot {
            step: 800,
            criterion: "magnitude".into(),
            growth: "random".into(),
            seed: 3,
            density: 0.05,
            mask: Mask::new(vec![
                LayerMask::from_active("fc1", vec![4, 3], &[0, 5, 11]).unwrap(),
                LayerMask::from_active("fc2", vec![3, 1], &[]).unwrap(),
            ]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = fixture();
        let text = s.encode();
        assert_eq!(
            text,
            "dstlab-mask v1\nstep=800\ncriterion=magnitude\ngrowth=random\nseed=3\ndensity=0.05\nlayers=2\n\
             layer name=fc1 shape=4x3 active=3\n0 5 11\nlayer name=fc2 shape=3x1 active=0\n\n"
        );
        let back = MaskSnapshot::decode(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.encode(), text);
    }

    #[test]
    fn rejects_corruption() {
        let text = fixture().encode();
        assert!(MaskSnapshot::decode(&text.replace("v1", "v9")).is_err());
        assert!(MaskSnapshot::decode(&text.replace("active=3", "active=2")).is_err());
        assert!(MaskSnapshot::decode(&text.replace("0 5 11", "5 0 11")).is_err());
        assert!(MaskSnapshot::decode(&text.replace("0 5 11", "0 5 12")).is_err());
        assert!(MaskSnapshot::decode(&text[..text.len() - 1]).is_err());
        assert!(MaskSnapshot::decode(&format!("{text}x")).is_err());
    }
}
