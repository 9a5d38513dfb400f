//! Binary container shared by model checkpoints and memory dumps.
//!
//! Layout: the 8-byte magic `ACLBLOB1`, a little-endian `u64` header length,
//! that many bytes of UTF-8 JSON, then the value blocks as little-endian
//! `f64`s in header order. The header's `blocks` array lists each block's
//! `name` and `shape`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ACLBLOB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Writes `header` (which gains a `blocks` field) followed by `blocks`.
pub fn write(
    mut out: impl Write,
    mut header: Value,
    blocks: &[(BlockInfo, &[f64])],
) -> Result<()> {
    for (info, data) in blocks {
        if info.len() != data.len() {
            return Err(Error::Contract(format!(
                "block {} has {} values but shape {:?}",
                info.name,
                data.len(),
                info.shape
            )));
        }
    }
    let infos: Vec<&BlockInfo> = blocks.iter().map(|(i, _)| i).collect();
    let Value::Object(map) = &mut header else {
        return Err(Error::Contract("container header must be a JSON object".into()));
    };
    map.insert("blocks".into(), serde_json::to_value(infos)?);
    let bytes = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(bytes.len() as u64).to_le_bytes())?;
    out.write_all(&bytes)?;
    for (_, data) in blocks {
        let mut buf = Vec::with_capacity(data.len() * 8);
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a container back into its header and named blocks.
pub fn read(mut input: impl Read) -> Result<(Value, Vec<(BlockInfo, Vec<f64>)>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Length {
            expected: 16,
            actual: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad container magic {:?}",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16 + header_len;
    if bytes.len() < body {
        return Err(Error::Length {
            expected: body,
            actual: bytes.len(),
        });
    }
    let header: Value = serde_json::from_slice(&bytes[16..body])?;
    let infos: Vec<BlockInfo> = serde_json::from_value(
        header
            .get("blocks")
            .cloned()
            .ok_or_else(|| Error::Format("container header lacks `blocks`".into()))?,
    )?;
    let total: usize = infos.iter().map(BlockInfo::len).sum();
    let expected = body + total * 8;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let mut offset = body;
    let blocks = infos
        .into_iter()
        .map(|info| {
            let data = bytes[offset..offset + info.len() * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += info.len() * 8;
            (info, data)
        })
        .collect();
    Ok((header, blocks))
}
