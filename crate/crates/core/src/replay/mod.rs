//! Reservoir-sampled replay buffer.

use std::cell::Cell;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::nn::{Model, ModelError};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("logit length {got} does not match {expected} classes")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("inconsistent sample length in buffer: {expected} vs {got}")]
    InputMismatch { expected: usize, got: usize },
    #[error("bad buffer file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BufferError>;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferItem {
    pub input: Vec<f64>,
    pub label: usize,
    /// Model logits captured when the item entered the buffer.
    pub logits: Option<Vec<f64>>,
    pub insertion_step: u64,
}

impl BufferItem {
    pub fn new(input: Vec<f64>, label: usize, insertion_step: u64) -> Self {
        Self {
            input,
            label,
            logits: None,
            insertion_step,
        }
    }
}

/// Record `z = forward(model, x)` in eval mode. Stored logits are never refreshed.
pub fn attach_logits(mut item: BufferItem, model: &Model) -> Result<BufferItem> {
    let x = Tensor::new(vec![1, item.input.len()], item.input.clone()).map_err(ModelError::from)?;
    let z = model.predict(&x)?;
    let classes = model.spec().num_classes;
    if z.len() != classes {
        return Err(BufferError::ShapeMismatch {
            expected: classes,
            got: z.len(),
        });
    }
    item.logits = Some(z.into_data());
    Ok(item)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<BufferItem>,
    seen: u64,
    rng: Rng,
    /// Items handed out by sampling, for auditing which phases touch the buffer.
    reads: Cell<u64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: Rng) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
            rng,
            reads: Cell::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[BufferItem] {
        &self.items
    }

    /// Total items returned by [`sample_batch`](Self::sample_batch) and [`gather`](Self::gather).
    pub fn reads(&self) -> u64 {
        self.reads.get()
    }

    /// Count one offered example and decide where it goes: `Some(slot)` when
    /// the reservoir accepts it, `None` when it is dropped. The caller must
    /// then [`place`](Self::place) the item in that slot.
    pub fn offer(&mut self) -> Option<usize> {
        let slot = if (self.seen as usize) < self.capacity {
            Some(self.seen as usize)
        } else {
            // Inclusive upper bound: the (S+1)-th item is kept with probability capacity/(S+1).
            let k = self
                .rng
                .uniform_int(0, self.seen as i64)
                .expect("nonempty range") as usize;
            (k < self.capacity).then_some(k)
        };
        self.seen += 1;
        slot
    }

    pub fn place(&mut self, slot: usize, item: BufferItem) {
        if slot == self.items.len() {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
    }

    /// Reservoir insertion; returns the slot the item landed in, if any.
    pub fn reservoir_insert(&mut self, item: BufferItem) -> Option<usize> {
        let slot = self.offer()?;
        self.place(slot, item);
        Some(slot)
    }

    /// Uniform sample without replacement; the whole buffer when it holds at
    /// most `batch_size` items.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<&BufferItem>> {
        if self.items.is_empty() {
            return Err(BufferError::EmptyBuffer);
        }
        if batch_size >= self.items.len() {
            self.reads.set(self.reads.get() + self.items.len() as u64);
            return Ok(self.items.iter().collect());
        }
        Ok(self.gather(&rng.sample_indices(self.items.len(), batch_size)))
    }

    /// Items at the given slots.
    pub fn gather(&self, rows: &[usize]) -> Vec<&BufferItem> {
        self.reads.set(self.reads.get() + rows.len() as u64);
        rows.iter().map(|&i| &self.items[i]).collect()
    }

    /// Stack items into `(inputs [n, d], labels, logits)`. Logits are `None`
    /// unless every item carries them.
    pub fn stack(items: &[&BufferItem]) -> Result<(Tensor, Vec<usize>, Option<Tensor>)> {
        let d = items.first().map_or(0, |i| i.input.len());
        let mut xs = Vec::with_capacity(items.len() * d);
        for it in items {
            if it.input.len() != d {
                return Err(BufferError::InputMismatch {
                    expected: d,
                    got: it.input.len(),
                });
            }
            xs.extend_from_slice(&it.input);
        }
        let labels = items.iter().map(|i| i.label).collect();
        let logits = if items.iter().all(|i| i.logits.is_some()) && !items.is_empty() {
            let c = items[0].logits.as_ref().map_or(0, Vec::len);
            let z: Vec<f64> = items
                .iter()
                .flat_map(|i| i.logits.clone().unwrap())
                .collect();
            Some(Tensor::new(vec![items.len(), c], z).map_err(ModelError::from)?)
        } else {
            None
        };
        let inputs = Tensor::new(vec![items.len(), d], xs).map_err(ModelError::from)?;
        Ok((inputs, labels, logits))
    }

    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(BUFFER_VERSION)?;
        w.write_u64::<LittleEndian>(self.capacity as u64)?;
        w.write_u64::<LittleEndian>(self.seen)?;
        let st = self.rng.state();
        w.write_u64::<LittleEndian>(st.seed)?;
        w.write_u128::<LittleEndian>(st.word_pos)?;
        w.write_u64::<LittleEndian>(self.items.len() as u64)?;
        for it in &self.items {
            w.write_u64::<LittleEndian>(it.label as u64)?;
            w.write_u64::<LittleEndian>(it.insertion_step)?;
            write_vec(w, &it.input)?;
            match &it.logits {
                Some(z) => {
                    w.write_u8(1)?;
                    write_vec(w, z)?;
                }
                None => w.write_u8(0)?,
            }
        }
        Ok(())
    }

    pub fn restore<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(BufferError::BadFile("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != BUFFER_VERSION {
            return Err(BufferError::BadFile(format!(
                "unsupported version {version}"
            )));
        }
        let capacity = r.read_u64::<LittleEndian>()? as usize;
        let seen = r.read_u64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let word_pos = r.read_u128::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        if n > capacity || n as u64 > seen {
            return Err(BufferError::BadFile(format!(
                "{n} items for capacity {capacity}"
            )));
        }
        let mut items = Vec::with_capacity(capacity);
        for _ in 0..n {
            let label = r.read_u64::<LittleEndian>()? as usize;
            let insertion_step = r.read_u64::<LittleEndian>()?;
            let input = read_vec(r)?;
            let logits = match r.read_u8()? {
                0 => None,
                1 => Some(read_vec(r)?),
                b => return Err(BufferError::BadFile(format!("bad logits flag {b}"))),
            };
            items.push(BufferItem {
                input,
                label,
                logits,
                insertion_step,
            });
        }
        Ok(Self {
            capacity,
            items,
            seen,
            rng: Rng::from_state(RngState { seed, word_pos }),
            reads: Cell::new(0),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.dump(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::restore(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub const BUFFER_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FLRB";

fn write_vec<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    v.iter().try_for_each(|x| w.write_f64::<LittleEndian>(*x))
}

fn read_vec<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n > 1 << 28 {
        return Err(BufferError::BadFile(format!("vector length {n}")));
    }
    (0..n).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect()
}

#[cfg(test)]
mod tests;
