//! Trained-model bundle: embedding, operators and (once trained) the value.
//!
//! Layout: magic `KEECBND1`, format version (u32), environment name, the
//! embedding, the operators, a has-value flag (u8) with the value section,
//! then a CRC32 of everything before it. All numbers little-endian.

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{KeecError, Result};
use crate::koopman::{EmbeddingModel, LatentOperators};
use crate::valuectl::ValueModel;

const MAGIC: &[u8; 8] = b"KEECBND1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub env_name: String,
    pub model: EmbeddingModel,
    pub operators: LatentOperators,
    pub value: Option<ValueModel>,
}

impl Bundle {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.env_name);
        self.model.write(&mut w);
        self.operators.write(&mut w);
        match &self.value {
            Some(v) => {
                w.u8(1);
                v.write(&mut w);
            }
            None => w.u8(0),
        }
        w.finish_with_crc()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(KeecError::Format("not a model bundle (bad magic)".into()));
        }
        let mut r = ByteReader::checked(bytes)?;
        r.take(MAGIC.len())?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(KeecError::Format(format!("unsupported bundle version {version}")));
        }
        let env_name = r.str()?;
        let model = EmbeddingModel::read(&mut r)?;
        let operators = LatentOperators::read(&mut r)?;
        if operators.n() != model.n {
            return Err(KeecError::Format("operator and embedding dimensions differ".into()));
        }
        let value = match r.u8()? {
            0 => None,
            1 => Some(ValueModel::read(&mut r)?),
            f => return Err(KeecError::Format(format!("bad value flag {f}"))),
        };
        if let Some(v) = &value {
            if v.n() != model.n {
                return Err(KeecError::Format("value and embedding dimensions differ".into()));
            }
        }
        r.expect_end()?;
        Ok(Bundle { env_name, model, operators, value })
    }

    /// Writes through a temporary file so a failed run never leaves a partial bundle.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn require_value(&self) -> Result<&ValueModel> {
        self.value
            .as_ref()
            .ok_or_else(|| KeecError::State("bundle has no trained value function".into()))
    }

    pub fn require_env(&self, name: &str) -> Result<()> {
        if self.env_name == name {
            Ok(())
        } else {
            Err(KeecError::State(format!(
                "bundle was trained on {}, config selects {name}",
                self.env_name
            )))
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
