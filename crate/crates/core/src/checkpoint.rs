//! Binary checkpoint format.
//!
//! All integers are little-endian `u64`, all reals little-endian IEEE-754
//! `f64`:
//!
//! ```text
//! magic        7 bytes  "OSMCAA1"
//! input hidden embed classes
//! epoch
//! lr momentum
//! parameters   w1, b1, w2, b2, ctx (row-major)
//! velocities   same layout
//! echo_len     then echo_len bytes of UTF-8 config text
//! ```

use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, OptimizerState};

pub const MAGIC: &[u8; 7] = b"OSMCAA1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn dims(&self) -> ModelDims {
        self.params.dims()
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let dims = ckpt.dims();
    let mut out = Vec::with_capacity(7 + 8 * (7 + 2 * dims.num_params()) + ckpt.config_echo.len());
    out.extend_from_slice(MAGIC);
    for v in [
        dims.input,
        dims.hidden,
        dims.embed,
        dims.classes,
        ckpt.epoch,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in [ckpt.optimizer.lr, ckpt.optimizer.momentum] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in ckpt
        .params
        .tensors()
        .into_iter()
        .chain(ckpt.optimizer.velocity.tensors())
    {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(ckpt.config_echo.len() as u64).to_le_bytes());
    out.extend_from_slice(ckpt.config_echo.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let v = f64::from_bits(self.u64(what)?);
        if !v.is_finite() {
            return Err(Error::Checkpoint(format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        match usize::try_from(v) {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Checkpoint(format!("invalid {what} {v}"))),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let dims = ModelDims {
        input: r.dim("input dimension")?,
        hidden: r.dim("hidden dimension")?,
        embed: r.dim("embedding dimension")?,
        classes: r.dim("class count")?,
    };
    let epoch =
        usize::try_from(r.u64("epoch")?).map_err(|_| Error::Checkpoint("epoch overflow".into()))?;
    let lr = r.f64("learning rate")?;
    let momentum = r.f64("momentum")?;

    // Size check before allocating anything proportional to the header.
    let count = [
        dims.hidden.checked_mul(dims.input),
        Some(dims.hidden),
        dims.embed.checked_mul(dims.hidden),
        Some(dims.embed),
        dims.classes.checked_mul(dims.embed),
    ]
    .into_iter()
    .try_fold(0usize, |acc, n| n.and_then(|n| acc.checked_add(n)))
    .ok_or_else(|| Error::Checkpoint("dimensions overflow".into()))?;
    let tensor_bytes = count
        .checked_mul(16)
        .filter(|&n| n <= bytes.len().saturating_sub(r.pos))
        .ok_or_else(|| Error::Checkpoint("truncated parameter block".into()))?;

    let block = r.take(tensor_bytes, "parameters")?;
    let mut values = Vec::with_capacity(2 * count);
    for chunk in block.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        values.push(v);
    }
    let params = ModelParams::from_flat(dims, &values[..count])?;
    let velocity = ModelParams::from_flat(dims, &values[count..])?;

    let echo_len = usize::try_from(r.u64("config length")?)
        .map_err(|_| Error::Checkpoint("config length overflow".into()))?;
    let echo = r.take(echo_len, "config echo")?;
    let config_echo = std::str::from_utf8(echo)
        .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?
        .to_string();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut optimizer =
        OptimizerState::new(lr, momentum, dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
    optimizer.velocity = velocity;
    Ok(Checkpoint {
        epoch,
        params,
        optimizer,
        config_echo,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ckpt))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let dims = ModelDims {
            input: 3,
            hidden: 5,
            embed: 2,
            classes: 4,
        };
        let mut rng = Rng::new(12);
        let params = init_params(dims, &mut rng).unwrap();
        let mut optimizer = OptimizerState::new(0.001, 0.9, dims).unwrap();
        optimizer.velocity = init_params(dims, &mut rng).unwrap();
        Checkpoint {
            epoch: 7,
            params,
            optimizer,
            config_echo: "seed = 1\n".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let bytes = encode(&ckpt);
        assert_eq!(&bytes[..7], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&sample(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&[bytes.as_slice(), b"x"].concat()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        // Absurd dimensions must fail without allocating.
        let mut huge = bytes.clone();
        huge[7..15].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
        let mut zero = bytes;
        zero[7..15].copy_from_slice(&0u64.to_le_bytes());
        assert!(decode(&zero).is_err());
        assert!(decode(&[]).is_err());
    }
}
