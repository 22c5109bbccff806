//! Binary model checkpoints.
//!
//! Layout: `NGRAMCK1`, a u32 flag word (bit 0: N-Grammer present, bit 1:
//! frozen), then for models with the layer the codebook, hash-family, table
//! and layer-norm segments, and finally the `NGRAMDP1` dense segment: a u32
//! tensor count, then per tensor its name (u32 length + UTF-8), rank and
//! extents (u32) and values (f64). Everything is little-endian.

use std::io::{Read, Write};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::hash::HashFamily;
use crate::layer::{LayerNormParams, Mode, NGrammerState};
use crate::lm::model::{ModelConfig, Param, TransformerLm};
use crate::table::BigramTable;
use crate::tensor::Tensor;
use crate::wire::{expect_magic, get_f64s, get_u32, put_f64s, put_len, put_u32};

const MAGIC: &[u8; 8] = b"NGRAMCK1";
const DENSE_MAGIC: &[u8; 8] = b"NGRAMDP1";
const HAS_LAYER: u32 = 1;
const FROZEN: u32 = 2;

pub fn write_checkpoint(model: &TransformerLm, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let mut flags = 0;
    if let Some(ng) = model.ngrammer() {
        flags |= HAS_LAYER;
        if ng.mode() == Mode::Frozen {
            flags |= FROZEN;
        }
    }
    put_u32(w, flags)?;
    if let Some(ng) = model.ngrammer() {
        let cb = ng
            .codebook()
            .ok_or_else(|| Error::State("cannot checkpoint an N-Grammer layer without a codebook".into()))?;
        cb.write_to(w)?;
        ng.hash().write_to(w)?;
        ng.table().write_to(w)?;
        LayerNormParams::write_pair(w, ng.ln_uni(), ng.ln_bi())?;
    }
    w.write_all(DENSE_MAGIC)?;
    put_len(w, "dense parameters", model.params().len())?;
    for p in model.params() {
        put_len(w, "dense parameters", p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        put_len(w, "dense parameters", p.value.rank())?;
        for &e in p.value.shape() {
            put_len(w, "dense parameters", e)?;
        }
        put_f64s(w, p.value.data())?;
    }
    Ok(())
}

pub fn checkpoint_bytes(model: &TransformerLm) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    Ok(buf)
}

/// Reads a checkpoint written for `cfg`.
pub fn read_checkpoint(cfg: &ModelConfig, r: &mut impl Read) -> Result<TransformerLm> {
    expect_magic(r, MAGIC, "checkpoint")?;
    let flags = get_u32(r)?;
    let ngrammer = if flags & HAS_LAYER != 0 {
        let ng_cfg = cfg.ngrammer.clone().ok_or_else(|| {
            Error::Config("checkpoint has an N-Grammer layer but the config does not".into())
        })?;
        let codebook = Codebook::read_from(r)?;
        let hash = HashFamily::read_from(r)?;
        let table = BigramTable::read_from(r)?;
        let (uni, bi) = LayerNormParams::read_pair(r)?;
        let mode = if flags & FROZEN != 0 {
            Mode::Frozen
        } else {
            Mode::Training
        };
        Some(NGrammerState::from_parts(ng_cfg, Some(codebook), hash, table, uni, bi, mode)?)
    } else {
        None
    };
    expect_magic(r, DENSE_MAGIC, "dense parameters")?;
    let count = get_u32(r)? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format {
            what: "dense parameters",
            detail: e.to_string(),
        })?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank).map(|_| get_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let data = get_f64s(r, shape.iter().product())?;
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    TransformerLm::from_parts(cfg, params, ngrammer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::NGrammerConfig;
    use crate::lm::model::build_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            vocab: 10,
            seq_len: 4,
            ngrammer: Some(NGrammerConfig {
                k: 3,
                v: 7,
                heads: 2,
                dim: 3,
                bigram_dim: 1,
                ..NGrammerConfig::default()
            }),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut m = build_model(&cfg(), 1).unwrap();
        m.prime_codebook_from_embeddings().unwrap();
        m.freeze().unwrap();
        let bytes = checkpoint_bytes(&m).unwrap();
        let back = read_checkpoint(&cfg(), &mut bytes.as_slice()).unwrap();
        assert_eq!(back.params(), m.params());
        let (a, b) = (back.ngrammer().unwrap(), m.ngrammer().unwrap());
        assert_eq!(a.mode(), Mode::Frozen);
        assert_eq!(a.codebook().unwrap().fingerprint(), b.codebook().unwrap().fingerprint());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.table(), b.table());
        assert_eq!((a.ln_uni(), a.ln_bi()), (b.ln_uni(), b.ln_bi()));
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        assert_eq!(&bytes[12..20], b"NGRAMCB1");
    }

    #[test]
    fn plain_model_and_mismatches() {
        let mut plain = cfg();
        plain.ngrammer = None;
        let m = build_model(&plain, 2).unwrap();
        let bytes = checkpoint_bytes(&m).unwrap();
        assert_eq!(read_checkpoint(&plain, &mut bytes.as_slice()).unwrap().params(), m.params());
        let mut wider = plain.clone();
        wider.width = 10;
        assert!(read_checkpoint(&wider, &mut bytes.as_slice()).is_err());
        assert!(read_checkpoint(&plain, &mut &bytes[..bytes.len() - 3]).is_err());

        let unprimed = build_model(&cfg(), 3).unwrap();
        assert!(matches!(checkpoint_bytes(&unprimed), Err(Error::State(_))));
    }
}
