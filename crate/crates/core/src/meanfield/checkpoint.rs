//! Storage of the forward densities needed by the backward sweep: everything
//! in memory when it fits, otherwise every k-th snapshot (in memory or on
//! disk) with the steps in between recomputed segment by segment.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::grid::PhaseGrid;
use crate::error::{Error, Result};
use crate::harness::snapshot::{read_snapshot, write_snapshot};

/// Full-size work arrays alive during a backward step besides the store: the
/// three replayed stages, two cotangent fields, the final density and the
/// two scratch fields of a recomputed forward step.
pub const WORK_FIELDS: u64 = 8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StorageConfig {
    /// Upper bound on the estimated bytes held by density fields.
    pub budget_bytes: Option<u64>,
    /// Directory for checkpoints that do not have to stay in memory.
    pub spill_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoragePlan {
    /// Snapshot stride; 1 keeps every step.
    pub every: usize,
    pub on_disk: bool,
    /// Estimated peak bytes of all density fields held at once.
    pub peak_bytes: u64,
}

fn peak_fields(snapshots: usize, every: usize, on_disk: bool) -> u64 {
    let stored = if on_disk { 0 } else { snapshots.div_ceil(every) as u64 };
    let buffer = if every == 1 && !on_disk { 0 } else { every as u64 };
    stored + buffer + WORK_FIELDS
}

/// Smallest stride whose estimated peak fits the budget.
pub fn plan_storage(snapshots: usize, field_bytes: u64, config: &StorageConfig) -> Result<StoragePlan> {
    let on_disk = config.spill_dir.is_some();
    let Some(budget) = config.budget_bytes else {
        return Ok(StoragePlan {
            every: 1,
            on_disk,
            peak_bytes: peak_fields(snapshots, 1, on_disk) * field_bytes,
        });
    };
    let mut best = u64::MAX;
    for every in 1..=snapshots.max(1) {
        let peak = peak_fields(snapshots, every, on_disk) * field_bytes;
        if peak <= budget {
            return Ok(StoragePlan {
                every,
                on_disk,
                peak_bytes: peak,
            });
        }
        best = best.min(peak);
    }
    Err(Error::Budget { budget, need: best })
}

enum Slot {
    Memory(Vec<f64>),
    Disk(PathBuf),
}

pub(crate) struct SnapshotStore {
    plan: StoragePlan,
    grid: PhaseGrid,
    slots: Vec<Slot>,
    dir: Option<PathBuf>,
    tag: u64,
}

static STORE_ID: AtomicU64 = AtomicU64::new(0);

impl SnapshotStore {
    pub fn new(plan: StoragePlan, grid: PhaseGrid, config: &StorageConfig) -> Result<Self> {
        let dir = if plan.on_disk {
            let d = config.spill_dir.clone().unwrap();
            std::fs::create_dir_all(&d)?;
            Some(d)
        } else {
            None
        };
        Ok(SnapshotStore {
            plan,
            grid,
            slots: Vec::new(),
            dir,
            tag: STORE_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn plan(&self) -> StoragePlan {
        self.plan
    }

    pub fn every(&self) -> usize {
        self.plan.every
    }

    /// Offers snapshot `n`; kept if it falls on the stride.
    pub fn offer(&mut self, n: usize, values: &[f64], time: f64) -> Result<()> {
        if !n.is_multiple_of(self.plan.every) {
            return Ok(());
        }
        debug_assert_eq!(self.slots.len(), n / self.plan.every);
        let slot = match &self.dir {
            Some(dir) => {
                let path = dir.join(format!("ckpt-{}-{}-{n}.bin", std::process::id(), self.tag));
                write_snapshot(&path, &self.grid, values, time)?;
                Slot::Disk(path)
            }
            None => Slot::Memory(values.to_vec()),
        };
        self.slots.push(slot);
        Ok(())
    }

    /// Kept snapshot with index `c · every`, copied into `out`.
    pub fn load(&self, c: usize, out: &mut Vec<f64>) -> Result<()> {
        match &self.slots[c] {
            Slot::Memory(v) => {
                out.clear();
                out.extend_from_slice(v);
            }
            Slot::Disk(path) => {
                let (f, _) = read_snapshot(path)?;
                *out = f.values;
            }
        }
        Ok(())
    }

    /// Borrow a kept snapshot when it lives in memory.
    pub fn borrow(&self, c: usize) -> Option<&[f64]> {
        match &self.slots[c] {
            Slot::Memory(v) => Some(v),
            Slot::Disk(_) => None,
        }
    }
}

impl Drop for SnapshotStore {
    fn drop(&mut self) {
        for slot in &self.slots {
            if let Slot::Disk(path) = slot {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}
