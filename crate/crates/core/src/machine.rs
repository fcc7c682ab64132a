//! Target machine description: cache hierarchy, access costs and
//! micro-kernel shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_line_bytes() -> u64 {
    64
}
fn default_cost_l2() -> u64 {
    12
}
fn default_cost_l3() -> u64 {
    40
}
fn default_cost_dram() -> u64 {
    200
}
fn default_fraction() -> f64 {
    0.9
}
fn default_dt_bytes() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub l1_bytes: u64,
    pub l2_bytes: u64,
    pub l3_bytes: u64,
    /// Cache line size.
    #[serde(default = "default_line_bytes")]
    pub line_bytes: u64,
    /// Cycles per line loaded from L2.
    #[serde(default = "default_cost_l2")]
    pub cost_l2: u64,
    #[serde(default = "default_cost_l3")]
    pub cost_l3: u64,
    #[serde(default = "default_cost_dram")]
    pub cost_dram: u64,
    /// Usable fraction of L1 for tiles.
    #[serde(default = "default_fraction")]
    pub alpha: f64,
    #[serde(default = "default_fraction")]
    pub beta: f64,
    #[serde(default = "default_fraction")]
    pub gamma: f64,
    /// Filters per micro-kernel call.
    pub nf: usize,
    /// Windows per micro-kernel call.
    pub nwin: usize,
    #[serde(default = "default_dt_bytes")]
    pub dt_bytes: usize,
}

impl MachineSpec {
    /// 32 kB / 1 MB / 4 MB hierarchy with an 8x16 outer-product kernel.
    pub fn power10() -> Self {
        MachineSpec {
            l1_bytes: 32 * 1024,
            l2_bytes: 1024 * 1024,
            l3_bytes: 4 * 1024 * 1024,
            line_bytes: default_line_bytes(),
            cost_l2: default_cost_l2(),
            cost_l3: default_cost_l3(),
            cost_dram: default_cost_dram(),
            alpha: 0.9,
            beta: 0.9,
            gamma: 0.9,
            nf: 8,
            nwin: 16,
            dt_bytes: 4,
        }
    }

    /// Same hierarchy with the 24x16 AVX-512 kernel shape.
    pub fn x86_avx512() -> Self {
        MachineSpec {
            nf: 24,
            ..Self::power10()
        }
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let machine: MachineSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            record: None,
            message: e.to_string(),
        })?;
        machine.validate()?;
        Ok(machine)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidMachine {
                field,
                reason: reason.to_string(),
            })
        };
        if self.line_bytes == 0 {
            return bad("line_bytes", "must be positive");
        }
        if self.l1_bytes == 0 {
            return bad("l1_bytes", "must be positive");
        }
        if self.l1_bytes >= self.l2_bytes {
            return bad("l2_bytes", "must exceed l1_bytes");
        }
        if self.l2_bytes >= self.l3_bytes {
            return bad("l3_bytes", "must exceed l2_bytes");
        }
        for (field, cap) in [("l1_bytes", self.l1_bytes), ("l2_bytes", self.l2_bytes), ("l3_bytes", self.l3_bytes)] {
            if cap % self.line_bytes != 0 {
                return bad(field, "must be a multiple of line_bytes");
            }
        }
        for (field, frac) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(frac > 0.0 && frac <= 1.0) {
                return bad(field, "must lie in (0, 1]");
            }
        }
        if self.nf == 0 {
            return bad("nf", "must be at least 1");
        }
        if self.nwin == 0 {
            return bad("nwin", "must be at least 1");
        }
        if self.dt_bytes == 0 {
            return bad("dt_bytes", "must be positive");
        }
        Ok(())
    }

    /// Usable L1 bytes, `floor(alpha * l1)`.
    pub fn l1_budget(&self) -> u64 {
        scaled(self.l1_bytes, self.alpha)
    }

    pub fn l2_budget(&self) -> u64 {
        scaled(self.l2_bytes, self.beta)
    }

    pub fn l3_budget(&self) -> u64 {
        scaled(self.l3_bytes, self.gamma)
    }

    /// Whole cache lines touched by an object of `bytes` bytes.
    pub fn lines(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.line_bytes)
    }
}

fn scaled(capacity: u64, fraction: f64) -> u64 {
    (capacity as f64 * fraction).floor() as u64
}
