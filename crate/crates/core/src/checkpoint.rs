//! Binary trainer checkpoints.
//!
//! Layout: an 8-byte magic, then seven tagged sections in fixed order
//! (config JSON, step counter, model, EMA shadow, memory bank, alignment
//! state, optimizer velocities). Each section is a 4-byte ASCII tag, a
//! u64 payload length, and the payload; every multi-byte value is
//! little-endian and every parameter is stored as raw f64 bits. A
//! save/load round trip is therefore bit-exact, and a resumed run
//! reproduces the records the uninterrupted run would have produced.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::DaState;
use crate::membank::MemoryBank;
use crate::model::{init, EmaState, ModelState};
use crate::tensor::Tensor;
use crate::trainer::{RunConfig, SgdState, Trainer};

pub const MAGIC: &[u8; 8] = b"EPASSCK1";

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        put_f64(out, v);
    }
}

fn put_tensors(out: &mut Vec<u8>, ts: &[&Tensor]) {
    put_u64(out, ts.len() as u64);
    for t in ts {
        put_tensor(out, t);
    }
}

fn put_rows(out: &mut Vec<u8>, rows: impl Iterator<Item = impl AsRef<[f64]>>) {
    for row in rows {
        for &v in row.as_ref() {
            put_f64(out, v);
        }
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: Vec<u8>) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(&payload);
}

fn bank_section(bank: &MemoryBank) -> Vec<u8> {
    let mut b = Vec::new();
    let k = bank.len();
    b.push(u8::from(bank.capacity().is_some()));
    put_u64(&mut b, bank.dim() as u64);
    put_f64(&mut b, bank.momentum());
    put_u64(&mut b, k as u64);
    for &id in bank.ids() {
        put_u64(&mut b, id);
    }
    put_rows(&mut b, (0..k).map(|s| bank.raw_slot(s)));
    put_rows(&mut b, (0..k).map(|s| bank.unit_slot(s)));
    let has_labels = k > 0 && bank.label_of(0).is_some();
    b.push(u8::from(has_labels));
    if has_labels {
        put_u64(&mut b, bank.label_of(0).unwrap().len() as u64);
        put_rows(&mut b, (0..k).map(|s| bank.label_of(s).unwrap()));
    }
    if let Some(capacity) = bank.capacity() {
        put_u64(&mut b, capacity as u64);
        let order = bank.fifo_order().unwrap();
        put_u64(&mut b, order.len() as u64);
        for s in order {
            put_u64(&mut b, s as u64);
        }
    }
    b
}

/// Serializes the complete trainer state.
pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);

    let conf = serde_json::to_vec(trainer.config())
        .map_err(|e| Error::InvalidConfig(format!("unserializable config: {e}")))?;
    section(&mut out, b"CONF", conf);

    let mut b = Vec::new();
    put_u64(&mut b, trainer.step());
    section(&mut out, b"STEP", b);

    let model = trainer.model();
    let mut b = Vec::new();
    put_u64(&mut b, model.projector_seeds.len() as u64);
    for &s in &model.projector_seeds {
        put_u64(&mut b, s);
    }
    put_tensors(&mut b, &model.params());
    section(&mut out, b"MODL", b);

    let ema = trainer.ema();
    let mut b = Vec::new();
    put_f64(&mut b, ema.m_ema);
    put_tensors(&mut b, &ema.model.params());
    section(&mut out, b"EMAS", b);

    section(&mut out, b"BANK", bank_section(trainer.bank()));

    let da = trainer.da();
    let mut b = Vec::new();
    put_u64(&mut b, da.window as u64);
    put_u64(&mut b, da.target.len() as u64);
    put_rows(&mut b, std::iter::once(&da.target));
    put_u64(&mut b, da.history.len() as u64);
    put_rows(&mut b, da.history.iter());
    put_u64(&mut b, da.clamp_events);
    section(&mut out, b"DAST", b);

    let sgd = &trainer.sgd;
    let mut b = Vec::new();
    put_f64(&mut b, sgd.momentum);
    put_f64(&mut b, sgd.weight_decay);
    put_tensors(&mut b, &sgd.velocities.iter().collect::<Vec<_>>());
    section(&mut out, b"SGDV", b);

    Ok(out)
}

/// Writes a checkpoint file.
pub fn save(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(trainer)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Rd<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!(
                "{what}: wanted {n} bytes at offset {}, only {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A count of elements that follow in the stream; the remaining bytes
    /// must be able to satisfy it at `elem_size` bytes per element.
    fn count(&mut self, elem_size: usize, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n > left / elem_size.max(1) as u64 {
            return Err(corrupt(format!("{what}: count {n} exceeds remaining data")));
        }
        Ok(n as usize)
    }

    /// A stored size that does not correspond to following stream elements
    /// (capacities, windows).
    fn size(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| corrupt(format!("{what}: implausible size {n}")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn rows(&mut self, k: usize, width: usize, what: &str) -> Result<Vec<Vec<f64>>> {
        (0..k).map(|_| self.floats(width, what)).collect()
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let ndim = self.u32(what)? as usize;
        if ndim > 4 {
            return Err(corrupt(format!("{what}: implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut n = 1usize;
        for _ in 0..ndim {
            let d = self.u64(what)?;
            if d > u32::MAX as u64 {
                return Err(corrupt(format!("{what}: implausible dimension {d}")));
            }
            n = n
                .checked_mul(d as usize)
                .ok_or_else(|| corrupt(format!("{what}: element count overflow")))?;
            shape.push(d as usize);
        }
        let data = self.floats(n, what)?;
        Tensor::new(shape, data).map_err(|e| corrupt(format!("{what}: {e}")))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Rd<'a>> {
        let name = std::str::from_utf8(tag).unwrap();
        let got = self.take(4, "section tag")?;
        if got != tag {
            return Err(corrupt(format!(
                "expected section {name}, found {:?}",
                String::from_utf8_lossy(got)
            )));
        }
        let len = self.count(1, name)?;
        let body = self.take(len, name)?;
        Ok(Rd { buf: body, pos: 0 })
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt(format!(
                "{what}: {} unread bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Overwrites a model scaffold's parameters with stored tensors.
fn fill_params(model: &mut ModelState, rd: &mut Rd, what: &str) -> Result<()> {
    let stored = rd.count(4, what)?;
    let expected = model.params().len();
    if stored != expected {
        return Err(corrupt(format!("{what}: {stored} tensors, model has {expected}")));
    }
    for slot in model.params_mut() {
        let t = rd.tensor(what)?;
        if t.shape() != slot.shape() {
            return Err(corrupt(format!(
                "{what}: tensor shape {:?} does not match model shape {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

fn read_bank(rd: &mut Rd) -> Result<MemoryBank> {
    let kind = rd.u8("bank kind")?;
    if kind > 1 {
        return Err(corrupt(format!("bank kind must be 0 or 1, found {kind}")));
    }
    let dim = rd.count(8, "bank dim")?;
    let momentum = rd.f64("bank momentum")?;
    let k = rd.count(8, "bank slots")?;
    let mut ids = Vec::with_capacity(k);
    for _ in 0..k {
        ids.push(rd.u64("bank ids")?);
    }
    let raw = rd.rows(k, dim, "bank raw rows")?;
    let unit = rd.rows(k, dim, "bank unit rows")?;
    let labels = match rd.u8("bank label flag")? {
        0 => None,
        1 => {
            let c = rd.count(8, "bank label width")?;
            Some(rd.rows(k, c, "bank labels")?)
        }
        v => return Err(corrupt(format!("bank label flag must be 0 or 1, found {v}"))),
    };
    let fifo = if kind == 1 {
        let capacity = rd.size("fifo capacity")?;
        let n = rd.count(8, "fifo order")?;
        let mut order = Vec::with_capacity(n);
        for _ in 0..n {
            order.push(rd.u64("fifo order")? as usize);
        }
        Some((capacity, order))
    } else {
        None
    };
    MemoryBank::from_saved(dim, momentum, raw, unit, labels, ids, fifo)
        .map_err(|e| corrupt(format!("bank: {e}")))
}

/// Rebuilds a trainer from checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut rd = Rd { buf: bytes, pos: 0 };
    if rd.take(8, "magic")? != MAGIC {
        return Err(corrupt("bad magic, not a checkpoint file"));
    }

    let conf = rd.section(b"CONF")?;
    let config: RunConfig = serde_json::from_slice(conf.buf)
        .map_err(|e| corrupt(format!("config: {e}")))?;
    config.validate().map_err(|e| corrupt(format!("config failed validation: {e}")))?;

    let mut s = rd.section(b"STEP")?;
    let step = s.u64("step")?;
    s.finish("STEP")?;

    let mut s = rd.section(b"MODL")?;
    let n_seeds = s.count(8, "projector seeds")?;
    if n_seeds != config.spec.projectors {
        return Err(corrupt(format!(
            "{n_seeds} projector seeds for {} heads",
            config.spec.projectors
        )));
    }
    let mut seeds = Vec::with_capacity(n_seeds);
    for _ in 0..n_seeds {
        seeds.push(s.u64("projector seeds")?);
    }
    let mut model = init(&config.spec, config.seed)?;
    model.projector_seeds = seeds.clone();
    fill_params(&mut model, &mut s, "model params")?;
    s.finish("MODL")?;

    let mut s = rd.section(b"EMAS")?;
    let m_ema = s.f64("ema momentum")?;
    if !(0.0..=1.0).contains(&m_ema) {
        return Err(corrupt(format!("ema momentum {m_ema} outside [0, 1]")));
    }
    let mut shadow = model.clone();
    fill_params(&mut shadow, &mut s, "ema params")?;
    s.finish("EMAS")?;
    let ema = EmaState { model: shadow, m_ema };

    let mut s = rd.section(b"BANK")?;
    let bank = read_bank(&mut s)?;
    s.finish("BANK")?;
    if bank.dim() != config.spec.proj_dim {
        return Err(corrupt(format!(
            "bank dimension {} does not match projector dimension {}",
            bank.dim(),
            config.spec.proj_dim
        )));
    }

    let mut s = rd.section(b"DAST")?;
    let window = s.size("alignment window")?;
    let c = s.count(8, "alignment classes")?;
    let target = s.floats(c, "alignment target")?;
    let hist_len = s.count(1, "alignment history")?;
    let history = s.rows(hist_len, c, "alignment history")?;
    let clamp_events = s.u64("alignment clamp count")?;
    s.finish("DAST")?;
    if c != config.spec.num_classes {
        return Err(corrupt(format!(
            "alignment over {c} classes, config says {}",
            config.spec.num_classes
        )));
    }
    let mut da = DaState::with_target(target, window)
        .map_err(|e| corrupt(format!("alignment state: {e}")))?;
    if history.len() > window {
        return Err(corrupt("alignment history longer than its window"));
    }
    da.history = history.into();
    da.clamp_events = clamp_events;

    let mut s = rd.section(b"SGDV")?;
    let momentum = s.f64("sgd momentum")?;
    let weight_decay = s.f64("weight decay")?;
    let n = s.count(4, "velocities")?;
    let params = model.params();
    if n != params.len() {
        return Err(corrupt(format!("{n} velocity tensors for {} params", params.len())));
    }
    let mut velocities = Vec::with_capacity(n);
    for p in &params {
        let t = s.tensor("velocities")?;
        if t.shape() != p.shape() {
            return Err(corrupt(format!(
                "velocity shape {:?} does not match param shape {:?}",
                t.shape(),
                p.shape()
            )));
        }
        velocities.push(t);
    }
    s.finish("SGDV")?;
    let sgd = SgdState { momentum, weight_decay, velocities };

    rd.finish("checkpoint")?;
    Ok(Trainer::from_parts(config, model, ema, bank, da, sgd, step))
}

/// Reads a checkpoint file.
pub fn load(path: impl AsRef<Path>) -> Result<Trainer> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugmentPolicy, VectorAugment};
    use crate::data::{gen_two_moons, split, BatchStream, Dataset, SplitSpec};
    use crate::trainer::Algorithm;

    fn setup(algorithm: Algorithm, k_steps: u64) -> (RunConfig, Dataset, Dataset) {
        let ds = gen_two_moons(60, 0.08, 5).unwrap();
        let (l, u) = split(&ds, &SplitSpec { labels_per_class: 4, seed: 3 }).unwrap();
        let config = RunConfig {
            algorithm,
            spec: crate::NetworkSpec {
                encoder_layers: vec![2, 16, 16],
                num_classes: 2,
                proj_hidden: 8,
                proj_dim: 4,
                projectors: 2,
            },
            k_steps,
            batch: 4,
            mu: 2,
            da_window: 8,
            bank_capacity: 16,
            seed: 7,
            ..RunConfig::default()
        };
        (config, l, u)
    }

    fn stream<'a>(config: &RunConfig, l: &'a Dataset, u: &'a Dataset) -> BatchStream<'a> {
        let policy = AugmentPolicy::Vector(VectorAugment::from_weak(0.05));
        BatchStream::new(l, u, config.batch, config.mu, config.seed, policy).unwrap()
    }

    fn assert_same_state(a: &Trainer, b: &Trainer) {
        assert_eq!(a.step(), b.step());
        assert_eq!(a.model().params(), b.model().params());
        assert_eq!(a.model().projector_seeds, b.model().projector_seeds);
        assert_eq!(a.ema().m_ema, b.ema().m_ema);
        assert_eq!(a.ema().model.params(), b.ema().model.params());
        assert_eq!(a.bank().ids(), b.bank().ids());
        for s in 0..a.bank().len() {
            assert_eq!(a.bank().raw_slot(s), b.bank().raw_slot(s));
            assert_eq!(a.bank().unit_slot(s), b.bank().unit_slot(s));
            assert_eq!(a.bank().label_of(s), b.bank().label_of(s));
        }
        assert_eq!(a.bank().capacity(), b.bank().capacity());
        assert_eq!(a.bank().fifo_order(), b.bank().fifo_order());
        assert_eq!(a.da().running_mean(), b.da().running_mean());
        assert_eq!(a.da.history, b.da.history);
        assert_eq!(a.da.clamp_events, b.da.clamp_events);
        assert_eq!(a.sgd.momentum, b.sgd.momentum);
        assert_eq!(a.sgd.weight_decay, b.sgd.weight_decay);
        assert_eq!(a.sgd.velocities, b.sgd.velocities);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for algorithm in [Algorithm::SimMatch, Algorithm::CoMatch] {
            let (config, l, u) = setup(algorithm, 4);
            let mut trainer = Trainer::new(config.clone(), &l).unwrap();
            let s = stream(&config, &l, &u);
            for k in 0..3 {
                let (lb, ub) = s.at(k).unwrap();
                trainer.train_step(&lb, &ub).unwrap();
            }
            let bytes = to_bytes(&trainer).unwrap();
            let loaded = from_bytes(&bytes).unwrap();
            assert_same_state(&trainer, &loaded);
        }
    }

    #[test]
    fn round_trip_before_any_step() {
        // CoMatch starts with an empty ring bank; that state must survive too.
        let (config, l, _) = setup(Algorithm::CoMatch, 2);
        let trainer = Trainer::new(config, &l).unwrap();
        assert!(trainer.bank().is_empty());
        let loaded = from_bytes(&to_bytes(&trainer).unwrap()).unwrap();
        assert_same_state(&trainer, &loaded);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        for algorithm in [Algorithm::SimMatch, Algorithm::CoMatch] {
            let (config, l, u) = setup(algorithm, 6);
            let mut full = Trainer::new(config.clone(), &l).unwrap();
            let records_full = full.run(&mut stream(&config, &l, &u)).unwrap();

            let mut half = Trainer::new(config.clone(), &l).unwrap();
            let s = stream(&config, &l, &u);
            for k in 0..3 {
                let (lb, ub) = s.at(k).unwrap();
                half.train_step(&lb, &ub).unwrap();
            }
            let mut resumed = from_bytes(&to_bytes(&half).unwrap()).unwrap();
            let tail = resumed.run(&mut stream(&config, &l, &u)).unwrap();
            assert_eq!(tail, records_full[3..].to_vec());
            assert_eq!(resumed.model().params(), full.model().params());
            assert_eq!(resumed.ema().model.params(), full.ema().model.params());
        }
    }

    #[test]
    fn corruption_is_reported() {
        let (config, l, _) = setup(Algorithm::SimMatch, 2);
        let trainer = Trainer::new(config, &l).unwrap();
        let bytes = to_bytes(&trainer).unwrap();

        // Truncation at several depths.
        for cut in [4, 9, bytes.len() / 2, bytes.len() - 1] {
            match from_bytes(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint(_)) => {}
                Err(e) => panic!("truncation at {cut} gave wrong error {e:?}"),
                Ok(_) => panic!("truncation at {cut} unexpectedly parsed"),
            }
        }
        // Wrong magic.
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        // Wrong section tag.
        let mut bad = bytes.clone();
        bad[8] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        // Trailing garbage.
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let (config, l, u) = setup(Algorithm::SimMatch, 2);
        let mut trainer = Trainer::new(config.clone(), &l).unwrap();
        let (lb, ub) = stream(&config, &l, &u).at(0).unwrap();
        trainer.train_step(&lb, &ub).unwrap();
        let dir = std::env::temp_dir().join(format!("epass-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.bin");
        save(&trainer, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_same_state(&trainer, &loaded);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
