//! Binary checkpoint format.
//!
//! ```text
//! "CLU1"
//! u32 entry count
//! per entry:  u32 name length, name (UTF-8),
//!             u32 rank, u64 per dimension,
//!             row-major f64 values
//! u64 CRC-64/XZ of every byte between the magic and the checksum
//! ```
//!
//! All integers and floats are little-endian. Besides the parameters the file
//! carries `meta.*` scalars (dropout settings and the decoder start token).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use ndarray::Array2;

use super::{ClutchModel, DropoutSettings, InputLayer, InputSpec};
use crate::dropout::ConcreteDropoutLayer;
use crate::error::{Error, Result};
use crate::substrate::{EmbeddingTable, GruCell, Parameter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLU1";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

fn push_entry(buf: &mut Vec<u8>, name: &str, value: &Array2<f64>) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend(2u32.to_le_bytes());
    buf.extend((value.nrows() as u64).to_le_bytes());
    buf.extend((value.ncols() as u64).to_le_bytes());
    for v in value.iter() {
        buf.extend(v.to_le_bytes());
    }
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

pub fn encode_checkpoint(model: &ClutchModel) -> Vec<u8> {
    let d = &model.dropout[0];
    let mut entries: Vec<(String, Array2<f64>)> = vec![
        ("meta.temperature".into(), scalar(d.temperature)),
        ("meta.weight_reg".into(), scalar(d.weight_reg)),
        ("meta.dropout_reg".into(), scalar(d.dropout_reg)),
    ];
    if let InputLayer::Tokens { start_token, .. } = &model.input {
        entries.push(("meta.start_token".into(), scalar(*start_token as f64)));
    }
    for p in model.params() {
        entries.push((p.name.clone(), p.value.clone()));
    }

    let mut payload = Vec::new();
    payload.extend((entries.len() as u32).to_le_bytes());
    for (name, value) in &entries {
        push_entry(&mut payload, name, value);
    }
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend(CHECKPOINT_MAGIC);
    out.extend(&payload);
    out.extend(CRC64.checksum(&payload).to_le_bytes());
    out
}

pub fn save_checkpoint(model: &ClutchModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClutchModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointCorrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads every entry of a checkpoint into a name → tensor map after
/// verifying magic and checksum.
pub fn read_entries(bytes: &[u8]) -> Result<BTreeMap<String, Array2<f64>>> {
    if bytes.len() < 4 {
        return Err(Error::CheckpointCorrupt("file shorter than the magic header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointVersion(
            String::from_utf8_lossy(&bytes[..4]).into_owned(),
        ));
    }
    if bytes.len() < 4 + 4 + 8 {
        return Err(Error::CheckpointCorrupt("truncated".into()));
    }
    let (payload, crc) = bytes[4..].split_at(bytes.len() - 12);
    let stored = u64::from_le_bytes(crc.try_into().expect("8 bytes"));
    let mut reader = Reader { bytes: payload, pos: 0 };
    let count = reader.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = reader.u32()? as usize;
        let name = std::str::from_utf8(reader.take(name_len)?)
            .map_err(|_| Error::CheckpointCorrupt("entry name is not UTF-8".into()))?
            .to_owned();
        let rank = reader.u32()?;
        if rank != 2 {
            return Err(Error::CheckpointCorrupt(format!("entry {name} has rank {rank}")));
        }
        let rows = reader.u64()? as usize;
        let cols = reader.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= payload.len()))
            .ok_or_else(|| Error::CheckpointCorrupt(format!("entry {name} has an impossible shape")))?;
        let raw = reader.take(len * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        out.insert(name, value);
    }
    if reader.pos != payload.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes after entries".into()));
    }
    if CRC64.checksum(payload) != stored {
        return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ClutchModel> {
    let mut entries = read_entries(bytes)?;
    let mut take = |name: &str| {
        entries
            .remove(name)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing entry {name}")))
    };
    let mut meta = |name: &str| -> Result<f64> { Ok(take(name)?[[0, 0]]) };
    let settings = DropoutSettings {
        initial_p: 0.5,
        temperature: meta("meta.temperature")?,
        weight_reg: meta("meta.weight_reg")?,
        dropout_reg: meta("meta.dropout_reg")?,
    };

    let input = if let Ok(table) = take("input.embedding") {
        let start = take("meta.start_token")?[[0, 0]] as usize;
        InputLayer::Tokens {
            table: EmbeddingTable::from_rows(Parameter::from_value("input.embedding", table)),
            start_token: start,
        }
    } else {
        InputLayer::Dense {
            weight: Parameter::from_value("input.weight", take("input.weight")?),
            bias: Parameter::from_value("input.bias", take("input.bias")?),
            start: Parameter::from_value("input.start", take("input.start")?),
        }
    };
    let mut gru = |prefix: &str| -> Result<GruCell> {
        let mut p = |s: &str| -> Result<Parameter> {
            let name = format!("{prefix}.{s}");
            let value = take(&name)?;
            Ok(Parameter::from_value(name, value))
        };
        Ok(GruCell {
            wz: p("wz")?,
            uz: p("uz")?,
            bz: p("bz")?,
            wr: p("wr")?,
            ur: p("ur")?,
            br: p("br")?,
            wh: p("wh")?,
            uh: p("uh")?,
            bh: p("bh")?,
        })
    };
    let encoder = gru("encoder")?;
    let decoder = gru("decoder")?;
    let mut param = |name: &str| -> Result<Parameter> { Ok(Parameter::from_value(name, take(name)?)) };
    let w1 = param("attn.w1")?;
    let w2 = param("attn.w2")?;
    let v_reward = param("head.v_reward")?;
    let v_logvar = param("head.v_logvar")?;
    let attention = w1.value.nrows();
    let mut layers = Vec::with_capacity(4);
    for i in 0..4 {
        let name = format!("dropout.{i}.p_logit");
        let mut layer = ConcreteDropoutLayer::new(
            name.clone(),
            attention,
            settings.initial_p,
            settings.temperature,
            settings.weight_reg,
            settings.dropout_reg,
        )?;
        layer.p_logit = param(&name)?;
        layers.push(layer);
    }
    let dropout: [ConcreteDropoutLayer; 4] = layers.try_into().expect("four layers");
    let model = ClutchModel {
        input,
        encoder,
        decoder,
        w1,
        w2,
        v_reward,
        v_logvar,
        dropout,
    };
    if let Some(extra) = entries.keys().next() {
        return Err(Error::CheckpointCorrupt(format!("unexpected entry {extra}")));
    }
    validate_shapes(&model)?;
    Ok(model)
}

fn validate_shapes(model: &ClutchModel) -> Result<()> {
    let dims = model.dims();
    let (e, h, a) = (dims.embed_dim, dims.hidden_dim, dims.attention_dim);
    let mut expected: Vec<(String, (usize, usize))> = Vec::new();
    match model.input_spec() {
        InputSpec::Tokens {
            vocab_size,
            start_token,
        } => {
            if start_token >= vocab_size {
                return Err(Error::CheckpointCorrupt("start token outside vocabulary".into()));
            }
        }
        InputSpec::Dense { .. } => {
            expected.push(("input.bias".into(), (1, e)));
            expected.push(("input.start".into(), (1, e)));
        }
    }
    for prefix in ["encoder", "decoder"] {
        for (s, shape) in [
            ("wz", (h, e)),
            ("uz", (h, h)),
            ("bz", (1, h)),
            ("wr", (h, e)),
            ("ur", (h, h)),
            ("br", (1, h)),
            ("wh", (h, e)),
            ("uh", (h, h)),
            ("bh", (1, h)),
        ] {
            expected.push((format!("{prefix}.{s}"), shape));
        }
    }
    for (name, shape) in [
        ("attn.w1", (a, h)),
        ("attn.w2", (a, h)),
        ("head.v_reward", (1, a)),
        ("head.v_logvar", (1, a)),
    ] {
        expected.push((name.into(), shape));
    }
    let actual: BTreeMap<&str, (usize, usize)> = model.params().iter().map(|p| (p.name.as_str(), p.shape())).collect();
    for (name, shape) in expected {
        if actual.get(name.as_str()) != Some(&shape) {
            return Err(Error::CheckpointCorrupt(format!("entry {name} has the wrong shape")));
        }
    }
    if model.dropout.iter().any(|d| d.p_logit.shape() != (1, 1)) {
        return Err(Error::CheckpointCorrupt("dropout logits must be scalars".into()));
    }
    Ok(())
}
