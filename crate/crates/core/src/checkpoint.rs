//! Binary checkpoint of a model plus its training history.
//!
//! Layout: magic, format version (u32 LE), metadata length (u64 LE), JSON
//! metadata, parameter value count (u64 LE), raw f64 LE values (each
//! parameter's weight then bias, in layout order), then a SHA-256 of every
//! preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VaeModel};
use crate::subsetting::FeaturePartition;
use crate::tensor::{Matrix, Param, ParamGroup, ParamStore};
use crate::trainer::TrainHistory;

const MAGIC: &[u8; 8] = b"OMVAECKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    partition: FeaturePartition,
    layout: Vec<ParamEntry>,
    history: TrainHistory,
}

/// Serializes to bytes; see the module docs for the layout.
pub fn to_bytes(model: &VaeModel, history: &TrainHistory) -> Result<Vec<u8>> {
    let layout: Vec<ParamEntry> = model
        .params()
        .iter()
        .map(|p| ParamEntry {
            name: p.name.clone(),
            group: p.group,
            rows: p.weight.rows(),
            cols: p.weight.cols(),
        })
        .collect();
    let meta = Metadata {
        config: model.config().clone(),
        partition: model.partition().clone(),
        layout,
        history: history.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(format!("encoding metadata: {e}")))?;
    let count = model.params().scalar_count();

    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 + 8 * count + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in model.params().iter() {
        for v in p.weight.data().iter().chain(p.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses bytes produced by [`to_bytes`]. Nothing is constructed unless
/// the checksum, version and layout all verify.
pub fn from_bytes(bytes: &[u8]) -> Result<(VaeModel, TrainHistory)> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let json_len = usize::try_from(r.u64("metadata length")?)
        .map_err(|_| Error::Checkpoint("metadata length overflows".into()))?;
    let meta: Metadata = serde_json::from_slice(r.take(json_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("decoding metadata: {e}")))?;
    let count = r.u64("value count")? as usize;
    let expected: usize = meta.layout.iter().map(|e| e.rows * e.cols + e.rows).sum();
    if count != expected {
        return Err(Error::Checkpoint(format!("value count {count} does not match layout ({expected})")));
    }
    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("value count overflows".into()))?, "values")?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter values".into()));
    }
    let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));

    let mut params = ParamStore::new();
    for e in &meta.layout {
        let w: Vec<f64> = values.by_ref().take(e.rows * e.cols).collect();
        let b: Vec<f64> = values.by_ref().take(e.rows).collect();
        params.insert(Param::new(e.name.clone(), e.group, Matrix::new(e.rows, e.cols, w)?, b))?;
    }
    let model = VaeModel::from_parts(meta.config, meta.partition, params)?;
    Ok((model, meta.history))
}

/// Writes atomically: the bytes go to a sibling temporary file which is
/// then renamed over `path`.
pub fn save_checkpoint(model: &VaeModel, history: &TrainHistory, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, history)?;
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(VaeModel, TrainHistory)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy() -> VaeModel {
        let mut c = ModelConfig::new(vec![8, 4], 3);
        c.subset_count = 2;
        c.use_subset_identity = true;
        c.latent_dim = 3;
        c.branch_hidden = 6;
        c.trunk_hidden = 5;
        c.downstream_hidden = 4;
        c.shuffle_features = true;
        VaeModel::build(c, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = toy();
        let h = TrainHistory::default();
        let (back, hist) = from_bytes(&to_bytes(&m, &h).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(hist, h);
    }

    #[test]
    fn truncation_and_corruption_fail() {
        let bytes = to_bytes(&toy(), &TrainHistory::default()).unwrap();
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_fails() {
        let mut bytes = to_bytes(&toy(), &TrainHistory::default()).unwrap();
        bytes[8] = 99;
        let n = bytes.len() - DIGEST_LEN;
        let d = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&d);
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = toy();
        save_checkpoint(&m, &TrainHistory::default(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().0, m);
        assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
    }
}
