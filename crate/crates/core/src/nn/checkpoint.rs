//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//! `b"FLCK"`, version `u32`, task `u32`, epoch `u32` (0 when untagged),
//! spec JSON length `u32` + bytes, tensor count `u32`, then per tensor:
//! name length `u32` + UTF-8 bytes, rank `u32`, dims `u64` each, values `f64` each.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Model, ModelError, ModelSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FLCK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `(task, epoch)` when the checkpoint marks an epoch boundary.
    pub position: Option<(usize, usize)>,
    pub spec: ModelSpec,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, position: Option<(usize, usize)>) -> Self {
        Self {
            position,
            spec: model.spec().clone(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model, ModelError> {
        let mut model = Model::new(self.spec.clone(), &mut Rng::new(0))?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let (t, n) = ckpt.position.unwrap_or((0, 0));
    w.write_u32::<LittleEndian>(t as u32)?;
    w.write_u32::<LittleEndian>(n as u32)?;
    let spec =
        serde_json::to_vec(&ckpt.spec).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    w.write_u32::<LittleEndian>(spec.len() as u32)?;
    w.write_all(&spec)?;
    w.write_u32::<LittleEndian>(ckpt.params.len() as u32)?;
    for (name, t) in &ckpt.params {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, ModelError> {
    let bad = |m: String| ModelError::BadCheckpoint(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let t = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut spec = vec![0u8; len];
    r.read_exact(&mut spec)?;
    let spec: ModelSpec = serde_json::from_slice(&spec).map_err(|e| bad(e.to_string()))?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint {
        position: (t > 0).then_some((t, n)),
        spec,
        params,
    })
}

impl Model {
    pub fn save(
        &self,
        path: &std::path::Path,
        position: Option<(usize, usize)>,
    ) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, &Checkpoint::from_model(self, position))?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<(Model, Option<(usize, usize)>), ModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck = read_checkpoint(&mut f)?;
        Ok((ck.to_model()?, ck.position))
    }
}
