//! Momentum memory bank of instance embeddings.
//!
//! Each slot keeps two values: the raw momentum accumulator following
//! z_t = m·z_{t−1} + (1−m)·z̄_t, and the L2-normalized view of it that
//! similarity distributions consume. Blending unit vectors does not yield a
//! unit vector, so the normalized view is re-derived after every blend; the
//! raw accumulator is never re-normalized, which keeps the closed form
//! m^t·z_0 + (1−m^t)·z* exact under repeated updates.
//!
//! Two populations are supported: one fixed slot per labeled instance
//! (similarity-matching mode), and a FIFO ring of recently seen instances
//! (graph-matching mode). In the ring, re-pushing a known instance id
//! momentum-updates its existing slot, so ids stay unique.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug)]
pub struct MemoryBank {
    dim: usize,
    momentum: f64,
    /// Raw momentum accumulators, one row per slot.
    raw: Vec<Vec<f64>>,
    /// Normalized view of `raw`, kept in lockstep.
    unit: Vec<Vec<f64>>,
    /// Per-slot class distribution for labeled-instance banks.
    labels: Option<Vec<Vec<f64>>>,
    ids: Vec<u64>,
    id_to_slot: HashMap<u64, usize>,
    /// FIFO bookkeeping; `None` for fixed banks.
    fifo: Option<Fifo>,
}

#[derive(Clone, Debug)]
struct Fifo {
    capacity: usize,
    order: VecDeque<usize>,
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument("bank momentum must lie in [0, 1]"));
    }
    Ok(())
}

fn check_unit(z: &[f64], context: &'static str) -> Result<()> {
    let n = tensor::norm(z);
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(context));
    }
    Ok(())
}

impl MemoryBank {
    /// Fixed bank with one slot per labeled instance. `embeddings` is
    /// `[K, d_z]` row-normalized, `labels` is `[K, C]` row-stochastic.
    pub fn new_fixed(
        embeddings: &Tensor,
        labels: &Tensor,
        ids: &[u64],
        momentum: f64,
    ) -> Result<MemoryBank> {
        check_momentum(momentum)?;
        let k = embeddings.rows();
        if k == 0 {
            return Err(Error::EmptySet("memory bank"));
        }
        if labels.rows() != k || ids.len() != k {
            return Err(Error::shape(
                "MemoryBank::new_fixed",
                format!("{k} labels and ids"),
                format!("{} labels, {} ids", labels.rows(), ids.len()),
            ));
        }
        let mut raw = Vec::with_capacity(k);
        let mut unit = Vec::with_capacity(k);
        let mut id_to_slot = HashMap::with_capacity(k);
        for i in 0..k {
            check_unit(embeddings.row(i), "bank slots must be normalized")?;
            raw.push(embeddings.row(i).to_vec());
            unit.push(embeddings.row(i).to_vec());
            if id_to_slot.insert(ids[i], i).is_some() {
                return Err(Error::InvalidArgument("bank slot ids must be unique"));
            }
        }
        Ok(MemoryBank {
            dim: embeddings.cols(),
            momentum,
            raw,
            unit,
            labels: Some((0..k).map(|i| labels.row(i).to_vec()).collect()),
            ids: ids.to_vec(),
            id_to_slot,
            fifo: None,
        })
    }

    /// Empty FIFO bank holding up to `capacity` recent embeddings.
    pub fn new_fifo(capacity: usize, dim: usize, momentum: f64) -> Result<MemoryBank> {
        check_momentum(momentum)?;
        if capacity == 0 {
            return Err(Error::InvalidArgument("fifo bank capacity must be >= 1"));
        }
        Ok(MemoryBank {
            dim,
            momentum,
            raw: Vec::new(),
            unit: Vec::new(),
            labels: None,
            ids: Vec::new(),
            id_to_slot: HashMap::new(),
            fifo: Some(Fifo { capacity, order: VecDeque::new() }),
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn slot_of(&self, id: u64) -> Option<usize> {
        self.id_to_slot.get(&id).copied()
    }

    /// Raw momentum accumulator of a slot (pre-normalization value).
    pub fn raw_slot(&self, slot: usize) -> &[f64] {
        &self.raw[slot]
    }

    /// Normalized slot value used for similarities.
    pub fn unit_slot(&self, slot: usize) -> &[f64] {
        &self.unit[slot]
    }

    /// Label distribution of a slot, for labeled banks.
    pub fn label_of(&self, slot: usize) -> Option<&[f64]> {
        self.labels.as_ref().map(|l| l[slot].as_slice())
    }

    /// All normalized slots as a `[K, d_z]` matrix (a snapshot copy).
    pub fn matrix(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::EmptyBank);
        }
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for row in &self.unit {
            data.extend_from_slice(row);
        }
        Ok(Tensor::from_raw(vec![self.len(), self.dim], data))
    }

    fn check_query(&self, z: &Tensor, rows: bool) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyBank);
        }
        let ok = if rows {
            z.ndim() == 2 && z.cols() == self.dim
        } else {
            z.ndim() == 1 && z.len() == self.dim
        };
        if !ok {
            return Err(Error::shape(
                "similarity query",
                format!("dim {}", self.dim),
                format!("{:?}", z.shape()),
            ));
        }
        Ok(())
    }

    fn blend(&mut self, slot: usize, z: &Tensor) -> Result<()> {
        check_unit(z.data(), "bank update expects a normalized embedding")?;
        let m = self.momentum;
        for (r, &v) in self.raw[slot].iter_mut().zip(z.data()) {
            *r = m * *r + (1.0 - m) * v;
        }
        tensor::normalize_into(&mut self.unit[slot], &self.raw[slot])?;
        Ok(())
    }

    /// Momentum-updates the slot owned by `slot_id` with a new embedding.
    pub fn update(&mut self, slot_id: u64, z: &Tensor) -> Result<()> {
        let slot = self.slot_of(slot_id).ok_or(Error::UnknownSlot(slot_id))?;
        self.blend(slot, z)
    }

    /// FIFO insert: updates the existing slot when the id is known,
    /// otherwise appends, evicting the oldest slot once at capacity.
    pub fn push(&mut self, id: u64, z: &Tensor) -> Result<()> {
        if self.fifo.is_none() {
            return Err(Error::InvalidArgument("push is only valid on a fifo bank"));
        }
        if z.ndim() != 1 || z.len() != self.dim {
            return Err(Error::shape("bank push", format!("[{}]", self.dim), format!("{:?}", z.shape())));
        }
        if let Some(slot) = self.slot_of(id) {
            return self.blend(slot, z);
        }
        check_unit(z.data(), "bank push expects a normalized embedding")?;
        let fifo = self.fifo.as_mut().unwrap();
        if self.raw.len() < fifo.capacity {
            let slot = self.raw.len();
            self.raw.push(z.data().to_vec());
            self.unit.push(z.data().to_vec());
            self.ids.push(id);
            self.id_to_slot.insert(id, slot);
            fifo.order.push_back(slot);
        } else {
            let slot = fifo.order.pop_front().expect("non-empty ring");
            self.id_to_slot.remove(&self.ids[slot]);
            self.raw[slot].copy_from_slice(z.data());
            self.unit[slot].copy_from_slice(z.data());
            self.ids[slot] = id;
            self.id_to_slot.insert(id, slot);
            fifo.order.push_back(slot);
        }
        Ok(())
    }

    /// Ring capacity, `None` for fixed banks.
    pub fn capacity(&self) -> Option<usize> {
        self.fifo.as_ref().map(|f| f.capacity)
    }

    /// Eviction order front to back, `None` for fixed banks.
    pub(crate) fn fifo_order(&self) -> Option<Vec<usize>> {
        self.fifo.as_ref().map(|f| f.order.iter().copied().collect())
    }

    /// Rebuilds a bank from persisted parts, re-deriving the id index.
    /// The stored unit rows are trusted as-is: re-normalizing `raw` would
    /// not reproduce slots that were seeded directly from unit embeddings.
    pub(crate) fn from_saved(
        dim: usize,
        momentum: f64,
        raw: Vec<Vec<f64>>,
        unit: Vec<Vec<f64>>,
        labels: Option<Vec<Vec<f64>>>,
        ids: Vec<u64>,
        fifo: Option<(usize, Vec<usize>)>,
    ) -> Result<MemoryBank> {
        check_momentum(momentum)?;
        let k = raw.len();
        if unit.len() != k || ids.len() != k {
            return Err(Error::InvalidArgument("bank parts disagree on slot count"));
        }
        if raw.iter().chain(&unit).any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("bank rows disagree on dimension"));
        }
        if let Some(l) = &labels {
            if l.len() != k {
                return Err(Error::InvalidArgument("bank parts disagree on slot count"));
            }
        }
        let mut id_to_slot = HashMap::with_capacity(k);
        for (slot, &id) in ids.iter().enumerate() {
            if id_to_slot.insert(id, slot).is_some() {
                return Err(Error::InvalidArgument("bank slot ids must be unique"));
            }
        }
        let fifo = match fifo {
            None => {
                if k == 0 {
                    return Err(Error::EmptySet("memory bank"));
                }
                None
            }
            Some((capacity, order)) => {
                if capacity == 0 {
                    return Err(Error::InvalidArgument("fifo bank capacity must be >= 1"));
                }
                if order.len() != k || k > capacity {
                    return Err(Error::InvalidArgument("fifo order must cover every slot"));
                }
                let mut seen = vec![false; k];
                for &s in &order {
                    if s >= k || seen[s] {
                        return Err(Error::InvalidArgument("fifo order must cover every slot"));
                    }
                    seen[s] = true;
                }
                Some(Fifo { capacity, order: order.into() })
            }
        };
        Ok(MemoryBank { dim, momentum, raw, unit, labels, ids, id_to_slot, fifo })
    }

    /// q_i = exp(z·z_i/T) / Σ_k exp(z·z_k/T) over the K slots.
    pub fn similarity_dist(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.check_query(z, false)?;
        let sims: Vec<f64> = self.unit.iter().map(|s| tensor::dot(z.data(), s)).collect();
        tensor::softmax_t(&Tensor::from_raw(vec![self.len()], sims), t)
    }

    /// Batch version: `[B, d_z]` queries to `[B, K]` distributions.
    pub fn similarity_rows(&self, zs: &Tensor, t: f64) -> Result<Tensor> {
        self.check_query(zs, true)?;
        let (b, k) = (zs.rows(), self.len());
        let mut sims = Vec::with_capacity(b * k);
        for i in 0..b {
            for s in &self.unit {
                sims.push(tensor::dot(zs.row(i), s));
            }
        }
        tensor::softmax_t(&Tensor::from_raw(vec![b, k], sims), t)
    }
}
