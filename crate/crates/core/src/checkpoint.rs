//! Binary checkpoints of the full training state.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "CRCLCKPT" | version u32 | body | crc32(magic..body) u32
//! body = config text | num_scenes | epoch
//!      | parameters (name, shape, f64 data) | memory (k, items)
//!      | clusters (flag, centers) | Adam (step, lr, betas, eps, m, v) | epoch log
//! ```
//!
//! Shuffling and K-means seeds are pure functions of `(seed, epoch)`, so the
//! config and epoch counter are the whole random state.

use std::fs;
use std::path::Path;

use crate::cic::ClusterModel;
use crate::config::TrainConfig;
use crate::error::{CrclError, Result};
use crate::memory::MemoryPool;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::train::{EpochLog, LossBreakdown, Phase, Trainer};

pub const MAGIC: &[u8; 8] = b"CRCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.usize(t.shape().len());
        for &d in t.shape() {
            self.usize(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> CrclError {
    CrclError::Checkpoint(format!("corrupt checkpoint: {what}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("unexpected end"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        if rank > 8 {
            return Err(corrupt("tensor rank"));
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor size"))?;
        if len > (self.buf.len() - self.pos) / 8 {
            return Err(corrupt("tensor size"));
        }
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data)
    }
}

fn write_breakdown(w: &mut Writer, b: &LossBreakdown) {
    for v in [b.total, b.l_c, b.compact, b.separate, b.cluster, b.cs, b.cm, b.kl, b.t] {
        w.f64(v);
    }
}

fn read_breakdown(r: &mut Reader) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        total: r.f64()?,
        l_c: r.f64()?,
        compact: r.f64()?,
        separate: r.f64()?,
        cluster: r.f64()?,
        cs: r.f64()?,
        cm: r.f64()?,
        kl: r.f64()?,
        t: r.f64()?,
    })
}

/// Serialize the training state.
pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let model = &trainer.model;
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&model.cfg.to_text());
    w.usize(model.num_scenes);
    w.usize(trainer.epoch);

    w.usize(model.store.len());
    for (name, t) in model.store.names().iter().zip(model.store.tensors()) {
        w.str(name);
        w.tensor(t);
    }
    w.usize(model.memory.k());
    w.tensor(model.memory.items());
    match &model.clusters {
        Some(c) => {
            w.u8(1);
            w.tensor(c.centers());
        }
        None => w.u8(0),
    }

    let a = &trainer.adam;
    w.u64(a.step);
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        w.f64(v);
    }
    w.usize(a.m.len());
    for t in a.m.iter().chain(&a.v) {
        w.tensor(t);
    }

    w.usize(trainer.log.len());
    for e in &trainer.log {
        w.usize(e.epoch);
        w.u8(e.phase.number());
        write_breakdown(&mut w, &e.mean);
        w.usize(e.batch_totals.len());
        for &v in &e.batch_totals {
            w.f64(v);
        }
    }

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

/// Rebuild the training state from [`encode`] output.
pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CrclError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let mut r = Reader { buf: payload, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CrclError::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    if crc32fast::hash(payload) != stored {
        return Err(CrclError::Checkpoint("checksum mismatch (file truncated or corrupted)".into()));
    }

    let cfg = TrainConfig::parse_str(&r.str()?, &[])?;
    let num_scenes = r.usize()?;
    let epoch = r.usize()?;
    let mut trainer = Trainer::new(&cfg, num_scenes)?;
    trainer.epoch = epoch;

    let count = r.usize()?;
    if count != trainer.model.store.len() {
        return Err(corrupt(&format!("{count} parameters, architecture has {}", trainer.model.store.len())));
    }
    for i in 0..count {
        let name = r.str()?;
        let t = r.tensor()?;
        if name != trainer.model.store.names()[i] || t.shape() != trainer.model.store.tensors()[i].shape() {
            return Err(corrupt(&format!("parameter `{name}` {:?} does not match the architecture", t.shape())));
        }
        trainer.model.store.tensors_mut()[i] = t;
    }
    let k = r.usize()?;
    trainer.model.memory = MemoryPool::from_matrix(r.tensor()?, k)?;
    trainer.model.clusters = match r.u8()? {
        0 => None,
        1 => Some(ClusterModel::from_centers(r.tensor()?)?),
        _ => return Err(corrupt("cluster flag")),
    };

    let step = r.u64()?;
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let moments = r.usize()?;
    if moments != count {
        return Err(corrupt("optimizer moment count"));
    }
    let m = (0..moments).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let v = (0..moments).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    trainer.adam = Adam { lr, beta1, beta2, eps, step, m, v };

    let entries = r.usize()?;
    for _ in 0..entries {
        let epoch = r.usize()?;
        let phase = match r.u8()? {
            1 => Phase::One,
            2 => Phase::Two,
            _ => return Err(corrupt("phase")),
        };
        let mean = read_breakdown(&mut r)?;
        let n = r.usize()?;
        let batch_totals = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        trainer.log.push(EpochLog { epoch, phase, mean, batch_totals });
    }
    if r.pos != payload.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(trainer)
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CrclError::io(dir, e))?;
    }
    fs::write(path, encode(trainer)).map_err(|e| CrclError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    decode(&fs::read(path).map_err(|e| CrclError::io(path, e))?)
}
