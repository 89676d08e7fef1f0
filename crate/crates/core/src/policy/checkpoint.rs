//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           8  bytes  b"MOSECKPT"
//! version         u32       currently 1
//! stage           u8        0 backbone | 1 expert | 2 unified
//! variant_flags   u8        expert stage: bit0 O, bit1 B, bit2 L, bit3 TW;
//!                           0xff otherwise
//! config          d_model u32, n_heads u32, n_layers u32, d_ff u32,
//!                 rank_frozen u32, rank_free u32, activation u8,
//!                 routing u8, adapt_flags u8 (bit0 enc-mha, bit1 enc-ff,
//!                 bit2 decoder), logit_clip f64
//! tensor_count    u32
//! tensors         name_len u32, name bytes, dtype u8 (0 = f64),
//!                 ndim u32, dims u64 * ndim, payload f64 * prod(dims)
//! frozen bitmap   ceil(tensor_count / 8) bytes, LSB-first per tensor
//! moments flag    u8        1 if Adam moments follow (resumable training)
//! moments         per tensor: m then v payloads, f64 * prod(dims)
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::policy::config::{AdaptTargets, GateActivation, PolicyConfig, Routing, Stage};
use crate::policy::model::Policy;
use crate::policy::store::ParamStore;
use crate::training::optimizer::Adam;
use crate::vrp::variant::VariantId;

const MAGIC: &[u8; 8] = b"MOSECKPT";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

fn stage_byte(stage: Stage) -> (u8, u8) {
    match stage {
        Stage::Backbone => (0, 0xff),
        Stage::Expert(v) => (1, variant_flags(v)),
        Stage::Unified => (2, 0xff),
    }
}

fn variant_flags(v: VariantId) -> u8 {
    u8::from(v.open)
        | (u8::from(v.backhaul) << 1)
        | (u8::from(v.duration_limit) << 2)
        | (u8::from(v.time_window) << 3)
}

fn variant_from_flags(flags: u8) -> VariantId {
    VariantId::new(flags & 1 != 0, flags & 2 != 0, flags & 4 != 0, flags & 8 != 0)
}

pub fn save_checkpoint(policy: &Policy, path: &Path, moments: Option<&Adam>) -> Result<()> {
    let bytes = checkpoint_bytes(policy, moments)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn checkpoint_bytes(policy: &Policy, moments: Option<&Adam>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_all(&VERSION.to_le_bytes())?;
    let (stage, vflags) = stage_byte(policy.stage);
    out.push(stage);
    out.push(vflags);

    let cfg = &policy.cfg;
    for v in [
        cfg.d_model as u32,
        cfg.n_heads as u32,
        cfg.n_layers as u32,
        cfg.d_ff as u32,
        cfg.rank_frozen as u32,
        cfg.rank_free as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.push(match cfg.activation {
        GateActivation::Softmax => 0,
        GateActivation::NormSoftplus => 1,
        GateActivation::Sigmoid => 2,
    });
    out.push(match cfg.routing {
        Routing::Dense => 0,
        Routing::VariantTopK => 1,
        Routing::VariantExact => 2,
    });
    out.push(
        u8::from(cfg.adapt.encoder_mha)
            | (u8::from(cfg.adapt.encoder_ff) << 1)
            | (u8::from(cfg.adapt.decoder) << 2),
    );
    out.write_all(&cfg.logit_clip.to_le_bytes())?;

    out.write_all(&(policy.store.len() as u32).to_le_bytes())?;
    for (_, p) in policy.store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.extend_from_slice(p.name.as_bytes());
        out.push(0); // dtype f64
        out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for d in p.value.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }

    let mut bitmap = vec![0u8; policy.store.len().div_ceil(8)];
    for (i, p) in policy.store.iter() {
        if p.frozen {
            bitmap[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bitmap);

    match moments {
        Some(adam) => {
            out.push(1);
            for (i, p) in policy.store.iter() {
                let (m, v) = adam.moments(i, p.value.len());
                for x in m {
                    out.write_all(&x.to_le_bytes())?;
                }
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            out.write_all(&adam.step_count().to_le_bytes())?;
        }
        None => out.push(0),
    }
    Ok(out)
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf).map_err(|_| bad("truncated checkpoint"))
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cur, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u8(cur: &mut Cursor<&[u8]>) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(cur, &mut b)?;
    Ok(b[0])
}

fn read_f64(cur: &mut Cursor<&[u8]>) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(cur, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<(Policy, Option<Adam>)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Policy, Option<Adam>)> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    read_exact(&mut cur, &mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut cur)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let stage_byte = read_u8(&mut cur)?;
    let vflags = read_u8(&mut cur)?;
    let stage = match stage_byte {
        0 => Stage::Backbone,
        1 => Stage::Expert(variant_from_flags(vflags)),
        2 => Stage::Unified,
        other => return Err(bad(format!("unknown stage tag {other}"))),
    };

    let d_model = read_u32(&mut cur)? as usize;
    let n_heads = read_u32(&mut cur)? as usize;
    let n_layers = read_u32(&mut cur)? as usize;
    let d_ff = read_u32(&mut cur)? as usize;
    let rank_frozen = read_u32(&mut cur)? as usize;
    let rank_free = read_u32(&mut cur)? as usize;
    let activation = match read_u8(&mut cur)? {
        0 => GateActivation::Softmax,
        1 => GateActivation::NormSoftplus,
        2 => GateActivation::Sigmoid,
        other => return Err(bad(format!("unknown activation tag {other}"))),
    };
    let routing = match read_u8(&mut cur)? {
        0 => Routing::Dense,
        1 => Routing::VariantTopK,
        2 => Routing::VariantExact,
        other => return Err(bad(format!("unknown routing tag {other}"))),
    };
    let adapt_flags = read_u8(&mut cur)?;
    let logit_clip = read_f64(&mut cur)?;
    let cfg = PolicyConfig {
        d_model,
        n_heads,
        n_layers,
        d_ff,
        logit_clip,
        rank_frozen,
        rank_free,
        activation,
        routing,
        adapt: AdaptTargets {
            encoder_mha: adapt_flags & 1 != 0,
            encoder_ff: adapt_flags & 2 != 0,
            decoder: adapt_flags & 4 != 0,
        },
    };
    cfg.validate()
        .map_err(|e| bad(format!("checkpoint config rejected: {e}")))?;

    let count = read_u32(&mut cur)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut cur)? as usize;
        if name_len > 4096 {
            return Err(bad("unreasonable tensor name length"));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut cur, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name not utf-8"))?;
        let dtype = read_u8(&mut cur)?;
        if dtype != 0 {
            return Err(bad(format!("unsupported dtype {dtype}")));
        }
        let ndim = read_u32(&mut cur)? as usize;
        if ndim > 8 {
            return Err(bad("unreasonable tensor rank"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut cur)? as usize);
        }
        let len: usize = shape.iter().product();
        if len > bytes.len() {
            return Err(bad("tensor payload larger than file"));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(&mut cur)?);
        }
        store.insert(name, Tensor::new(shape, data));
    }

    let mut bitmap = vec![0u8; count.div_ceil(8)];
    read_exact(&mut cur, &mut bitmap)?;
    for i in 0..count {
        if bitmap[i / 8] & (1 << (i % 8)) != 0 {
            store.set_frozen(i, true);
        }
    }

    let policy = Policy { cfg, stage, store };

    let moments = match read_u8(&mut cur)? {
        0 => None,
        1 => {
            let mut adam = Adam::new(policy.store.len());
            for (i, p) in policy.store.iter() {
                let len = p.value.len();
                let mut m = Vec::with_capacity(len);
                for _ in 0..len {
                    m.push(read_f64(&mut cur)?);
                }
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    v.push(read_f64(&mut cur)?);
                }
                adam.set_moments(i, m, v);
            }
            adam.set_step_count(read_u64(&mut cur)?);
            Some(adam)
        }
        other => return Err(bad(format!("bad moments flag {other}"))),
    };

    Ok((policy, moments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_byte_exact() {
        let policy = Policy::init_backbone(PolicyConfig::tiny(), 5).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        save_checkpoint(&policy, &path, None).unwrap();
        let first = std::fs::read(&path).unwrap();

        let (loaded, moments) = load_checkpoint(&path).unwrap();
        assert!(moments.is_none());
        assert_eq!(loaded.cfg, policy.cfg);
        assert_eq!(loaded.stage, policy.stage);

        let path2 = dir.path().join("bb2.ckpt");
        save_checkpoint(&loaded, &path2, None).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second, "save -> load -> save must be identical");
    }

    #[test]
    fn frozen_flags_survive() {
        let mut policy = Policy::init_backbone(PolicyConfig::tiny(), 6).unwrap();
        policy.add_expert_params(VariantId::VRPL, 7).unwrap();
        policy.stage = Stage::Expert(VariantId::VRPL);
        policy.apply_stage_freezing();

        let dir = tempdir().unwrap();
        let path = dir.path().join("ex.ckpt");
        save_checkpoint(&policy, &path, None).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.stage, Stage::Expert(VariantId::VRPL));
        for ((_, a), (_, b)) in policy.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn tampered_dimension_is_rejected() {
        let policy = Policy::init_backbone(PolicyConfig::tiny(), 8).unwrap();
        let mut bytes = checkpoint_bytes(&policy, None).unwrap();
        // d_model field sits right after magic+version+stage+flags.
        let off = 8 + 4 + 1 + 1;
        bytes[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let policy = Policy::init_backbone(PolicyConfig::tiny(), 9).unwrap();
        let bytes = checkpoint_bytes(&policy, None).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(checkpoint_from_bytes(cut).is_err());
    }
}
