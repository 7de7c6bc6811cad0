//! Binary checkpoints: magic, version, config, then named `f64` blobs until
//! end of file. All integers are little-endian `u32`.

use std::fs;
use std::path::Path;

use super::{Design, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::io::{self, ByteReader, FORMAT_VERSION};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSTRCKPT";
const WHAT: &str = "checkpoint";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    io::put_u32(out, v, WHAT)
}

impl ModelParams {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = self.config();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize)?;
        for v in [
            c.feature_dim,
            c.short_len,
            c.long_len,
            c.stage1_tokens,
            c.stage2_tokens,
            c.encoder_layers,
            c.decoder_layers,
            c.heads,
            c.classes,
            c.ff_width,
            c.design.code() as usize,
        ] {
            put_u32(&mut out, v)?;
        }
        for (name, m) in self.store().iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, m.rows())?;
            put_u32(&mut out, m.cols())?;
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteReader::new(bytes, WHAT);
        cur.header(CHECKPOINT_MAGIC)?;
        let mut f = [0usize; 11];
        for v in &mut f {
            *v = cur.u32()?;
        }
        let design = Design::from_code(f[10] as u32)
            .ok_or_else(|| Error::format(WHAT, format!("unknown design code {}", f[10])))?;
        let config = ModelConfig {
            feature_dim: f[0],
            short_len: f[1],
            long_len: f[2],
            stage1_tokens: f[3],
            stage2_tokens: f[4],
            encoder_layers: f[5],
            decoder_layers: f[6],
            heads: f[7],
            classes: f[8],
            ff_width: f[9],
            design,
        };
        let mut blobs = Vec::new();
        while !cur.at_end() {
            let len = cur.u32()?;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::format(WHAT, "blob name is not UTF-8"))?
                .to_string();
            let (rows, cols) = (cur.u32()?, cur.u32()?);
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format(WHAT, format!("`{name}` is too large")))?;
            let raw = cur.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::format(WHAT, "overflow"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs.push((name, Matrix::new(rows, cols, data)?));
        }
        ModelParams::from_blobs(&config, blobs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
