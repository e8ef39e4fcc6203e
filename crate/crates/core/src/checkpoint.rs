//! Versioned binary checkpoint container.
//!
//! Layout: fixed header (magic, version, config hash, step, body length,
//! body SHA-256) followed by the body (resolved config text, vocabulary,
//! named parameters as row-major f64, optional optimizer state). Writes are
//! canonical — parameters serialize in `ParamSet` order — so save → load →
//! save is byte-identical and any payload tamper fails the checksum.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{AdamState, PTensor, ParamSet};

const MAGIC: &[u8; 8] = b"RTDCKPT\x01";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// SHA-256 of the canonical run-config serialization that produced this
    /// checkpoint; resume refuses on mismatch.
    pub config_hash: [u8; 32],
    pub step: u64,
    /// Resolved run config, embedded so a checkpoint alone can rebuild the
    /// model for analysis.
    pub config_toml: String,
    /// Non-special vocabulary tokens in id order.
    pub vocab_tokens: Vec<String>,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

pub fn hash_hex(h: &[u8; 32]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated at offset {} (wanted {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Data(format!("checkpoint contains invalid utf-8: {e}")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();

        let cfg = self.config_toml.as_bytes();
        body.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        body.extend_from_slice(cfg);

        body.extend_from_slice(&(self.vocab_tokens.len() as u32).to_le_bytes());
        for tok in &self.vocab_tokens {
            let b = tok.as_bytes();
            body.extend_from_slice(&(b.len() as u16).to_le_bytes());
            body.extend_from_slice(b);
        }

        body.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            let nb = name.as_bytes();
            body.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            body.extend_from_slice(nb);
            body.push(p.shape.len() as u8);
            for &d in &p.shape {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }

        match &self.adam {
            None => body.push(0),
            Some(a) => {
                body.push(1);
                body.extend_from_slice(&a.beta1.to_le_bytes());
                body.extend_from_slice(&a.beta2.to_le_bytes());
                body.extend_from_slice(&a.eps.to_le_bytes());
                body.extend_from_slice(&a.step.to_le_bytes());
                for (m, v) in a.m.iter().zip(&a.v) {
                    for &x in m {
                        body.extend_from_slice(&x.to_le_bytes());
                    }
                    for &x in v {
                        body.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }

        let digest: [u8; 32] = Sha256::digest(&body).into();

        let mut out = Vec::with_capacity(body.len() + 96);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let body_len = r.u64()? as usize;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let body = r.take(body_len)?;
        let actual: [u8; 32] = Sha256::digest(body).into();
        if actual != digest {
            return Err(Error::Data(format!(
                "checkpoint checksum mismatch: stored {} actual {}",
                hash_hex(&digest),
                hash_hex(&actual)
            )));
        }

        let mut r = Reader { buf: body, pos: 0 };
        let cfg_len = r.u32()? as usize;
        let config_toml = r.string(cfg_len)?;

        let vocab_count = r.u32()? as usize;
        let mut vocab_tokens = Vec::with_capacity(vocab_count);
        for _ in 0..vocab_count {
            let len = r.u16()? as usize;
            vocab_tokens.push(r.string(len)?);
        }

        let param_count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..param_count {
            let nlen = r.u16()? as usize;
            let name = r.string(nlen)?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64_vec(numel)?;
            params.insert(name, PTensor { shape, data });
        }

        let adam = match r.u8()? {
            0 => None,
            1 => {
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let astep = r.u64()?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (_, p) in params.iter() {
                    m.push(r.f64_vec(p.data.len())?);
                    v.push(r.f64_vec(p.data.len())?);
                }
                Some(AdamState {
                    beta1,
                    beta2,
                    eps,
                    step: astep,
                    m,
                    v,
                })
            }
            k => return Err(Error::Data(format!("bad optimizer-state tag {k}"))),
        };

        Ok(Checkpoint {
            config_hash,
            step,
            config_toml,
            vocab_tokens,
            params,
            adam,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&buf)
    }
}

/// SHA-256 over arbitrary bytes (config hashing).
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.insert(
            "embed.table",
            PTensor {
                shape: vec![3, 2],
                data: vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6],
            },
        );
        params.insert("d.out.b", PTensor::zeros(vec![1]));
        let adam = AdamState::new(&params);
        Checkpoint {
            config_hash: sha256(b"cfg"),
            step: 42,
            config_toml: "seed = 7\n".into(),
            vocab_tokens: vec!["alpha".into(), "beta".into()],
            params,
            adam: Some(adam),
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = sample();
        let bytes1 = ck.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes1).unwrap();
        let bytes2 = loaded.to_bytes();
        assert_eq!(bytes1, bytes2);
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.vocab_tokens, ck.vocab_tokens);
        assert_eq!(loaded.params, ck.params);
        assert_eq!(loaded.adam, ck.adam);
    }

    #[test]
    fn tampered_payload_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 5] ^= 0xff; // flip a bit inside a parameter payload
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }
}
