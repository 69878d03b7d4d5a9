//! On-disk formats: weight checkpoints, per-slide embedding stores, tile and
//! corpus manifests, and the small JSON/CSV records written by each stage.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::preprocess::{Coord, TileStatus};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"VITMILCK";
pub const EMBEDDING_MAGIC: [u8; 8] = *b"VITMILEM";
pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Self-describing weight file. `config` is stored verbatim as JSON text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, params: ParamStore) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_string(config)?,
            params,
        })
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.config.as_bytes())
    }

    pub fn parse_config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_str(&self.config)?)
    }

    /// Fails with a version error unless the checkpoint is of kind `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Version {
                expected: format!("checkpoint kind {kind}"),
                found: format!("checkpoint kind {}", self.kind),
            });
        }
        Ok(())
    }

    /// Layout: magic, version, kind, config, tensor count, then per tensor
    /// name, rank, dims and little-endian f64 data. Strings and counts are
    /// u32/u64 little-endian length prefixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.numel() * 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(&CHECKPOINT_MAGIC)?;
        r.version()?;
        let kind = r.string()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            if params.index_of(&name).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate tensor {name}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?;
            let data = r.f64s(numel)?;
            params.push(name, Tensor::new(&shape, data)?);
        }
        r.finish()?;
        Ok(Self { kind, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Per-slide instance embeddings, row-major `n_instances x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub slide_id: String,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl EmbeddingFile {
    pub fn n_instances(&self) -> usize {
        self.rows.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.rows.len() * 8);
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.slide_id);
        out.extend_from_slice(&(self.n_instances() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for &v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "embedding file");
        r.magic(&EMBEDDING_MAGIC)?;
        r.version()?;
        let slide_id = r.string()?;
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let count = n
            .checked_mul(dim)
            .ok_or_else(|| Error::format("embedding file", "size overflows"))?;
        let rows = r.f64s(count)?;
        r.finish()?;
        Ok(Self { slide_id, dim, rows })
    }
}

/// JSON sidecar of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub slide_id: String,
    /// SHA-256 of the checkpoint file that produced the embeddings.
    pub embedder_hash: String,
    pub k_last: usize,
    pub patch_size: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub coords: Vec<Coord>,
    pub label: Option<u8>,
    pub instance_labels: Option<Vec<u8>>,
}

pub fn embedding_path(dir: &Path, slide_id: &str) -> std::path::PathBuf {
    dir.join(format!("{slide_id}.emb"))
}

pub fn sidecar_path(dir: &Path, slide_id: &str) -> std::path::PathBuf {
    dir.join(format!("{slide_id}.coords.json"))
}

pub fn write_embeddings(dir: &Path, file: &EmbeddingFile, sidecar: &EmbeddingSidecar) -> Result<()> {
    if sidecar.coords.len() != file.n_instances() {
        return Err(Error::dim("write_embeddings", &[file.n_instances()], &[sidecar.coords.len()]));
    }
    write_bytes(&embedding_path(dir, &file.slide_id), &file.to_bytes())?;
    write_json(&sidecar_path(dir, &file.slide_id), sidecar)
}

pub fn read_embeddings(dir: &Path, slide_id: &str) -> Result<(EmbeddingFile, EmbeddingSidecar)> {
    let file = EmbeddingFile::from_bytes(&fs::read(embedding_path(dir, slide_id))?)?;
    let sidecar: EmbeddingSidecar = read_json(&sidecar_path(dir, slide_id))?;
    if file.slide_id != slide_id || sidecar.slide_id != slide_id {
        return Err(Error::format("embedding file", format!("expected slide {slide_id}")));
    }
    if sidecar.coords.len() != file.n_instances() {
        return Err(Error::dim("read_embeddings", &[file.n_instances()], &[sidecar.coords.len()]));
    }
    Ok((file, sidecar))
}

/// Slide ids with an embedding file in `dir`, sorted.
pub fn list_embeddings(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".emb") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub row: u32,
    pub col: u32,
    pub file: String,
    pub instance_label: Option<u8>,
}

/// `manifest.json` of one slide's tile directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub slide_id: String,
    pub patch_size: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub otsu_threshold: u8,
    pub status: TileStatus,
    pub label: Option<u8>,
    pub normalized: bool,
    pub tiles: Vec<TileEntry>,
}

impl TileManifest {
    pub fn coords(&self) -> Vec<Coord> {
        self.tiles.iter().map(|t| (t.row, t.col)).collect()
    }

    /// Per-tile labels if every tile carries one.
    pub fn instance_labels(&self) -> Option<Vec<u8>> {
        self.tiles.iter().map(|t| t.instance_label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSlide {
    pub slide_id: String,
    pub file: String,
    pub label: u8,
    pub split: Split,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub cell_size: u32,
    /// Row-major over the full grid.
    pub instance_labels: Vec<u8>,
}

/// `manifest.json` of a synthetic slide corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub slides: Vec<CorpusSlide>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split {s:?} (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub slide_id: String,
    pub label: u8,
    pub split: Split,
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    write_bytes(path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<LabelRow>, _>>().map_err(csv_error)?;
    if let Some(bad) = rows.iter().find(|r| r.label > 1) {
        return Err(Error::Validation(format!("label {} for {} is not 0/1", bad.label, bad.slide_id)));
    }
    Ok(rows)
}

/// Serialises `rows` as CSV with a header taken from the field names.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format("csv", format!("{other:?}")),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut text = String::new();
    fs::File::open(path)?.read_to_string(&mut text)?;
    Ok(serde_json::from_str(&text)?)
}

/// Creates parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        if self.take(8)? != expected {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Version {
                expected: format!("format version {FORMAT_VERSION}"),
                found: format!("format version {v}"),
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::format(self.what, e.to_string()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::format(self.what, "size overflows"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.what, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::vit::{Vit, VitConfig};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let vit = Vit::new(VitConfig::desk(), &mut seeded(3, 0)).unwrap();
        let mut params = vit.params().clone();
        // values whose bit patterns must survive
        params.tensor_mut(0).data_mut()[0] = -0.0;
        params.tensor_mut(0).data_mut()[1] = f64::MIN_POSITIVE / 4.0;
        params.tensor_mut(0).data_mut()[2] = 1.0 + f64::EPSILON;
        let ck = Checkpoint::new("vit", &VitConfig::desk(), params).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, "vit");
        assert_eq!(back.config, ck.config);
        assert_eq!(back.params.names(), ck.params.names());
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_bytes(), bytes);
        let cfg: VitConfig = back.parse_config().unwrap();
        assert_eq!(cfg, VitConfig::desk());
        Vit::from_params(cfg, back.params).unwrap();
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let mut params = ParamStore::new();
        params.push("w", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bytes = Checkpoint::new("mil", &serde_json::json!({"dim": 2}), params).unwrap().to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn kind_mismatch_names_both() {
        let ck = Checkpoint::new("vit", &1, ParamStore::new()).unwrap();
        let err = ck.expect_kind("mil").unwrap_err().to_string();
        assert!(err.contains("vit") && err.contains("mil"));
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = EmbeddingFile {
            slide_id: "slide_000001".into(),
            dim: 3,
            rows: vec![0.1, -2.0, 3.5, 1e-300, 7.0, -0.0],
        };
        let sidecar = EmbeddingSidecar {
            slide_id: file.slide_id.clone(),
            embedder_hash: "abc".into(),
            k_last: 4,
            patch_size: 32,
            grid_rows: 2,
            grid_cols: 2,
            coords: vec![(0, 1), (1, 0)],
            label: Some(1),
            instance_labels: Some(vec![0, 1]),
        };
        write_embeddings(dir.path(), &file, &sidecar).unwrap();
        let (f, s) = read_embeddings(dir.path(), "slide_000001").unwrap();
        assert_eq!(f, file);
        assert_eq!(s, sidecar);
        assert_eq!(list_embeddings(dir.path()).unwrap(), vec!["slide_000001".to_string()]);

        let bad = EmbeddingSidecar {
            coords: vec![(0, 0)],
            ..sidecar
        };
        assert!(write_embeddings(dir.path(), &file, &bad).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let rows = vec![
            LabelRow {
                slide_id: "a".into(),
                label: 1,
                split: Split::Train,
            },
            LabelRow {
                slide_id: "b".into(),
                label: 0,
                split: Split::Test,
            },
        ];
        write_labels(&path, &rows).unwrap();
        assert_eq!(read_labels(&path).unwrap(), rows);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().next(), Some("slide_id,label,split"));
        fs::write(&path, "slide_id,label,split\na,3,train\n").unwrap();
        assert!(matches!(read_labels(&path), Err(Error::Validation(_))));
        assert!(matches!(read_labels(&dir.path().join("missing.csv")), Err(Error::Io(_))));
    }
}
