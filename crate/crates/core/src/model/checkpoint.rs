//! Model checkpoints.
//!
//! ```text
//! magic    b"CPLMCKPT"
//! version  u32 = 1
//! hdr_len  u32
//! header   JSON (config, LoRA and adapter structure, trainable flags)
//! base     parameter block
//! lora     parameter block (possibly empty)
//! adapter  parameter block (possibly empty)
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LoraTarget, ModelConfig, ParamBlock, ParamKind, Reader, TinyTransformer};
use crate::error::{Error, Result};
use crate::numerics::Parameterized;

const MAGIC: &[u8; 8] = b"CPLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lora_rank: Option<usize>,
    lora_targets: Vec<LoraTarget>,
    adapter_bottleneck: Option<usize>,
    trainable: Vec<bool>,
}

impl TinyTransformer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            lora_rank: self.lora_rank(),
            lora_targets: self.lora_targets(),
            adapter_bottleneck: self.adapter_bottleneck(),
            trainable: self.trainable_flags(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for kind in [ParamKind::Base, ParamKind::Lora, ParamKind::Adapter] {
            out.extend_from_slice(&self.block_of(kind).encode());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Wire("not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Wire(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;

        // Initial values are overwritten below; the seed only fixes shapes.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TinyTransformer::new(header.config, &mut rng)?;
        if let Some(rank) = header.lora_rank {
            model.attach_lora(&header.lora_targets, rank, &mut rng)?;
        }
        if let Some(bottleneck) = header.adapter_bottleneck {
            model.attach_domain_adapters(bottleneck, &mut rng)?;
        }
        for kind in [ParamKind::Base, ParamKind::Lora, ParamKind::Adapter] {
            let (block, used) = ParamBlock::decode_prefix(&bytes[r.pos..])?;
            r.pos += used;
            model.load_block(kind, &block)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Wire(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        if header.trainable.len() != model.trainable_flags().len() {
            return Err(Error::Wire("trainable flag count mismatch".into()));
        }
        let mut flags = header.trainable.into_iter();
        model.visit_params_mut(&mut |_, p| p.trainable = flags.next().unwrap_or(false));
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
