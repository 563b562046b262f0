//! Binary model artifact.
//!
//! Layout (all integers u64 and floats f64, little-endian):
//! magic `HEAENCDR`, format version (u32), encoder config, freeze scope and
//! per-layer trainable flags, feature scaler, target scaler, vocabulary hash,
//! then one block per parameter: name, rank, dims, values.

use std::io::{Read, Write};

use super::{EncoderConfig, EncoderError, EncoderModel, EncoderParams, EncoderState, FreezeScope};
use crate::evaluate::ScalerParams;
use crate::numerics::Tensor;
use crate::tokenize::Vocabulary;

pub const MAGIC: &[u8; 8] = b"HEAENCDR";
pub const FORMAT_VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }

    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.u64(b.len() as u64)?;
        self.0.write_all(b)
    }

    fn floats(&mut self, v: &[f64]) -> std::io::Result<()> {
        self.u64(v.len() as u64)?;
        v.iter().try_for_each(|x| self.f64(*x))
    }

    fn scaler(&mut self, s: Option<&ScalerParams>) -> std::io::Result<()> {
        match s {
            None => self.0.write_all(&[0]),
            Some(s) => {
                self.0.write_all(&[1])?;
                self.floats(&s.mean)?;
                self.floats(&s.std)
            }
        }
    }
}

pub fn save_model<W: Write>(model: &EncoderModel, out: W) -> Result<(), EncoderError> {
    let mut w = Writer(out);
    let c = &model.state.config;
    w.0.write_all(MAGIC)?;
    w.0.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_ff,
        c.max_len,
        c.vocab_size,
    ] {
        w.u64(v as u64)?;
    }
    w.f64(c.mask_prob)?;
    w.u64(c.seed)?;
    w.0.write_all(&[match model.state.freeze_scope {
        FreezeScope::Block => 0,
        FreezeScope::AttentionOnly => 1,
    }])?;
    let flags: Vec<u8> = model.state.trainable.iter().map(|&b| u8::from(b)).collect();
    w.bytes(&flags)?;
    w.scaler(model.feature_scaler.as_ref())?;
    w.scaler(model.target_scaler.as_ref())?;
    w.bytes(model.vocab.hash().as_bytes())?;
    let infos = model.state.params.infos();
    w.u64(infos.len() as u64)?;
    let mut result = Ok(());
    model.state.params.for_each(|info, t| {
        if result.is_err() {
            return;
        }
        result = (|| {
            w.bytes(info.name.as_bytes())?;
            w.u64(t.shape().len() as u64)?;
            for d in t.shape() {
                w.u64(*d as u64)?;
            }
            t.data().iter().try_for_each(|x| w.f64(*x))
        })();
    });
    result?;
    w.0.flush()?;
    Ok(())
}

struct Reader<R: Read>(R);

fn bad(msg: impl Into<String>) -> EncoderError {
    EncoderError::Artifact(msg.into())
}

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self) -> Result<[u8; N], EncoderError> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| bad(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.exact()?))
    }

    fn usize(&mut self, limit: u64, what: &str) -> Result<usize, EncoderError> {
        let v = self.u64()?;
        if v > limit {
            return Err(bad(format!("{what} {v} exceeds limit {limit}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64, EncoderError> {
        Ok(f64::from_le_bytes(self.exact()?))
    }

    fn bytes(&mut self, limit: u64) -> Result<Vec<u8>, EncoderError> {
        let n = self.usize(limit, "byte string length")?;
        let mut b = vec![0u8; n];
        self.0
            .read_exact(&mut b)
            .map_err(|e| bad(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn floats(&mut self) -> Result<Vec<f64>, EncoderError> {
        let n = self.usize(1 << 20, "scaler width")?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn scaler(&mut self) -> Result<Option<ScalerParams>, EncoderError> {
        match self.exact::<1>()?[0] {
            0 => Ok(None),
            1 => {
                let mean = self.floats()?;
                let std = self.floats()?;
                if mean.len() != std.len() {
                    return Err(bad("scaler mean/std widths differ"));
                }
                Ok(Some(ScalerParams { mean, std }))
            }
            t => Err(bad(format!("bad scaler tag {t}"))),
        }
    }
}

/// Reads an artifact, checking every block name and shape against the stored
/// config and the vocabulary hash against `vocab`.
pub fn load_model<R: Read>(input: R, vocab: &Vocabulary) -> Result<EncoderModel, EncoderError> {
    let mut r = Reader(input);
    if &r.exact::<8>()? != MAGIC {
        return Err(bad("not a model artifact (bad magic)"));
    }
    let version = u32::from_le_bytes(r.exact()?);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let dim = |r: &mut Reader<R>, what| r.usize(1 << 24, what);
    let config = EncoderConfig {
        n_layers: dim(&mut r, "n_layers")?,
        n_heads: dim(&mut r, "n_heads")?,
        d_model: dim(&mut r, "d_model")?,
        d_ff: dim(&mut r, "d_ff")?,
        max_len: dim(&mut r, "max_len")?,
        vocab_size: dim(&mut r, "vocab_size")?,
        mask_prob: r.f64()?,
        seed: r.u64()?,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    let freeze_scope = match r.exact::<1>()?[0] {
        0 => FreezeScope::Block,
        1 => FreezeScope::AttentionOnly,
        t => return Err(bad(format!("bad freeze scope tag {t}"))),
    };
    let trainable: Vec<bool> = r.bytes(1 << 16)?.into_iter().map(|b| b != 0).collect();
    if trainable.len() != config.n_layers {
        return Err(bad("trainable flags do not cover every layer"));
    }
    let feature_scaler = r.scaler()?;
    let target_scaler = r.scaler()?;
    let hash = String::from_utf8(r.bytes(256)?).map_err(|_| bad("vocabulary hash is not UTF-8"))?;
    if hash != vocab.hash() {
        return Err(bad(
            "vocabulary hash does not match the supplied vocabulary",
        ));
    }
    if vocab.len() != config.vocab_size {
        return Err(bad(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }

    let mut params = EncoderParams::zeros(&config);
    let infos = params.infos();
    let count = r.u64()?;
    if count != infos.len() as u64 {
        return Err(bad(format!(
            "expected {} parameter blocks, found {count}",
            infos.len()
        )));
    }
    let mut result = Ok(());
    params.for_each_mut(|info, t| {
        if result.is_err() {
            return;
        }
        result = (|| {
            let name =
                String::from_utf8(r.bytes(256)?).map_err(|_| bad("parameter name is not UTF-8"))?;
            if name != info.name {
                return Err(bad(format!(
                    "expected block '{}', found '{name}'",
                    info.name
                )));
            }
            let rank = r.usize(4, "rank")?;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.usize(1 << 32, "dimension"))
                .collect::<Result<_, _>>()?;
            if shape != t.shape() {
                return Err(bad(format!(
                    "block '{name}' has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            let data: Vec<f64> = (0..t.len()).map(|_| r.f64()).collect::<Result<_, _>>()?;
            *t = Tensor::from_vec(&shape, data)?;
            Ok(())
        })();
    });
    result?;
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after the last parameter block"));
    }
    Ok(EncoderModel {
        state: EncoderState {
            config,
            params,
            trainable,
            freeze_scope,
        },
        vocab: vocab.clone(),
        feature_scaler,
        target_scaler,
    })
}
