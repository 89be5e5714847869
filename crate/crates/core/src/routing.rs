//! The routing map: per-block starting indices smoothed by an exponential
//! moving average during training and frozen for inference.

use serde::{Deserialize, Serialize};

use crate::bytes::{ByteReader, ByteWriter};
use crate::epitome::{IndexSet, LayerPlan};
use crate::error::{NesError, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.97;

const MAGIC: &[u8; 4] = b"NESM";
const VERSION: u32 = 1;

/// A block of the logical weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Input(usize),
    Filter(usize),
}

/// Starts returned by [`RoutingMap::lookup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Starts {
    Input([f64; 3]),
    Filter(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingMap {
    r_cin: usize,
    r_cout: usize,
    momentum: f64,
    frozen: bool,
    /// Exclusive upper bound of each flat entry.
    limits: Vec<f64>,
    /// Flat entries: `(p, q, c_in)` per input block, then `c_out` per filter block.
    entries: Vec<f64>,
}

fn check_range(values: &[f64], limits: &[f64]) -> Result<()> {
    for (k, (&v, &l)) in values.iter().zip(limits).enumerate() {
        if !v.is_finite() || v < 0.0 || v >= l {
            return Err(NesError::OutOfRange {
                index: vec![k],
                shape: vec![l as usize],
            });
        }
    }
    Ok(())
}

impl RoutingMap {
    /// A map initialised to `indices`, with momentum [`DEFAULT_MOMENTUM`].
    pub fn from_indices(plan: &LayerPlan, indices: &IndexSet) -> Result<Self> {
        indices.validate(plan)?;
        let limits = plan.index_limits();
        let entries = indices.to_flat();
        check_range(&entries, &limits)?;
        Ok(RoutingMap {
            r_cin: plan.r_cin(),
            r_cout: plan.r_cout(),
            momentum: DEFAULT_MOMENTUM,
            frozen: false,
            limits,
            entries,
        })
    }

    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(NesError::config(format!("momentum {momentum} outside [0, 1]")));
        }
        self.momentum = momentum;
        Ok(self)
    }

    pub fn r_cin(&self) -> usize {
        self.r_cin
    }

    pub fn r_cout(&self) -> usize {
        self.r_cout
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn limits(&self) -> &[f64] {
        &self.limits
    }

    /// Number of stored numbers, `3 R_cin + R_cout`.
    pub fn stored_numbers(&self) -> usize {
        self.entries.len()
    }

    /// Checks that the map was built for a plan of this shape.
    pub fn matches(&self, plan: &LayerPlan) -> Result<()> {
        if self.r_cin != plan.r_cin() || self.r_cout != plan.r_cout() || self.limits != plan.index_limits() {
            return Err(NesError::DimensionMismatch {
                op: "routing map vs plan",
                left: vec![self.r_cin, self.r_cout],
                right: vec![plan.r_cin(), plan.r_cout()],
            });
        }
        Ok(())
    }

    /// `entry <- mu * entry + (1 - mu) * fresh` for every entry.
    pub fn update(&mut self, fresh: &IndexSet) -> Result<()> {
        if self.frozen {
            return Err(NesError::state("routing map is frozen"));
        }
        let flat = fresh.to_flat();
        if flat.len() != self.entries.len() {
            return Err(NesError::DimensionMismatch {
                op: "routing map update",
                left: vec![flat.len()],
                right: vec![self.entries.len()],
            });
        }
        check_range(&flat, &self.limits)?;
        let mu = self.momentum;
        for ((e, f), l) in self.entries.iter_mut().zip(&flat).zip(&self.limits) {
            let v = mu * *e + (1.0 - mu) * f;
            // rounding can land exactly on the bound when both operands sit just below it
            *e = if v >= *l { e.max(*f) } else { v };
        }
        Ok(())
    }

    pub fn lookup(&self, block: Block) -> Result<Starts> {
        match block {
            Block::Input(m) if m < self.r_cin => Ok(Starts::Input([
                self.entries[3 * m],
                self.entries[3 * m + 1],
                self.entries[3 * m + 2],
            ])),
            Block::Filter(r) if r < self.r_cout => Ok(Starts::Filter(self.entries[3 * self.r_cin + r])),
            Block::Input(m) => Err(NesError::OutOfRange {
                index: vec![m],
                shape: vec![self.r_cin],
            }),
            Block::Filter(r) => Err(NesError::OutOfRange {
                index: vec![r],
                shape: vec![self.r_cout],
            }),
        }
    }

    /// All entries as an [`IndexSet`].
    pub fn indices(&self) -> IndexSet {
        IndexSet {
            input: self
                .entries
                .chunks(3)
                .take(self.r_cin)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            filter: self.entries[3 * self.r_cin..].to_vec(),
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn require_frozen(&self) -> Result<()> {
        if !self.frozen {
            return Err(NesError::state("routing map must be frozen for inference"));
        }
        Ok(())
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.usize(self.r_cin);
        w.usize(self.r_cout);
        w.f64(self.momentum);
        w.u8(self.frozen as u8);
        w.f64s(&self.limits);
        w.f64s(&self.entries);
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect(MAGIC, "routing map magic")?;
        let at = r.position();
        let version = r.u32("routing map version")?;
        if version != VERSION {
            return Err(NesError::parse(at, format!("unsupported routing map version {version}")));
        }
        let r_cin = r.count(0, "r_cin")?;
        let r_cout = r.count(0, "r_cout")?;
        let at = r.position();
        let momentum = r.f64("momentum")?;
        if !(0.0..=1.0).contains(&momentum) {
            return Err(NesError::parse(at, format!("momentum {momentum} outside [0, 1]")));
        }
        let frozen = r.bool("frozen")?;
        let n = r_cin
            .checked_mul(3)
            .and_then(|v| v.checked_add(r_cout))
            .filter(|&n| n.checked_mul(16).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| r.error("routing map entry count exceeds remaining input"))?;
        let at = r.position();
        let limits = r.f64s(n, "limits")?;
        if limits.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(NesError::parse(at, "routing map limits must be positive"));
        }
        let at = r.position();
        let entries = r.f64s(n, "entries")?;
        check_range(&entries, &limits)
            .map_err(|e| NesError::parse(at, format!("routing map entry out of range: {e}")))?;
        Ok(RoutingMap {
            r_cin,
            r_cout,
            momentum,
            frozen,
            limits,
            entries,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.write(&mut w);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let m = Self::read(&mut r)?;
        r.finish()?;
        Ok(m)
    }
}
