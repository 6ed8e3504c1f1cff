//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "3DSE" | u16 version
//! config: u32 x 20 (input dims, in channels, conv channels, kernels, pools,
//!         se reduction, fc hidden, classes) | f32 x 2 (intensity window)
//! meta:   u64 seed | u32 epoch | f64 validation metric
//! u32 tensor count, then per tensor:
//!   u32 name length | name bytes | u32 rank | u32 dims... | f32 payload
//! ```

use std::io::Write;
use std::path::Path;

use super::{CheckpointMeta, ModelCheckpoint, ModelConfig, ModelError, Network, Result, PARAM_NAMES};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"3DSE";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(ckpt: &ModelCheckpoint, w: &mut impl Write) -> Result<()> {
    let c = ckpt.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let mut ints: Vec<usize> = c.input_dims.to_vec();
    ints.push(c.in_channels);
    ints.extend(c.conv_channels);
    ints.extend(c.kernels.iter().flatten());
    ints.extend(c.pools.iter().flatten());
    ints.extend([c.se_reduction, c.fc_hidden, c.num_classes]);
    for v in ints {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in c.intensity_window {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&ckpt.meta.seed.to_le_bytes())?;
    w.write_all(&ckpt.meta.epoch.to_le_bytes())?;
    w.write_all(&ckpt.meta.val_metric.to_le_bytes())?;
    w.write_all(&(ckpt.network.params.len() as u32).to_le_bytes())?;
    for (name, t) in PARAM_NAMES.iter().zip(&ckpt.network.params) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("bad magic (expected \"3DSE\")".into()));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let mut ints = [0usize; 20];
    for v in ints.iter_mut() {
        *v = r.u32("config")? as usize;
    }
    let int3 = |i: usize| [ints[i], ints[i + 1], ints[i + 2]];
    let config = ModelConfig {
        input_dims: int3(0),
        in_channels: ints[3],
        conv_channels: [ints[4], ints[5]],
        kernels: [int3(6), int3(9)],
        pools: [int3(12), int3(15)],
        se_reduction: ints[18],
        fc_hidden: ints[19],
        num_classes: 0,
        intensity_window: [0.0, 0.0],
    };
    let config = ModelConfig {
        num_classes: r.u32("config")? as usize,
        intensity_window: [r.f32("config")?, r.f32("config")?],
        ..config
    };
    config.validate()?;
    let meta = CheckpointMeta {
        seed: r.u64("meta")?,
        epoch: r.u32("meta")?,
        val_metric: r.f64("meta")?,
    };
    let count = r.u32("tensor count")? as usize;
    if count != PARAM_NAMES.len() {
        return Err(ModelError::Corrupt(format!("expected {} tensors, found {count}", PARAM_NAMES.len())));
    }
    let mut params = Vec::with_capacity(count);
    for expected in PARAM_NAMES {
        let len = r.u32("name length")? as usize;
        let name = r.take(len, "name")?;
        if name != expected.as_bytes() {
            return Err(ModelError::Corrupt(format!(
                "expected tensor '{expected}', found '{}'",
                String::from_utf8_lossy(name)
            )));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(ModelError::Corrupt(format!("{expected}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| ModelError::Corrupt("size overflow".into()))?, expected)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        params.push(Tensor::new(shape, data).map_err(|e| ModelError::Corrupt(format!("{expected}: {e}")))?);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelCheckpoint {
        network: Network::new(config, params)?,
        meta,
    })
}

pub fn save(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelCheckpoint> {
    read_checkpoint(&std::fs::read(path)?)
}
