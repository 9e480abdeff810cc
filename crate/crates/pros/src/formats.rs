//! On-disk formats: manifest (TSV), split (JSON), image samples and
//! embeddings (little-endian binary), checkpoints and reports (JSON).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use pros_core::protocol::{DatasetManifest, ManifestItem, ProtocolSplit};
use pros_core::{Checkpoint, EmbeddingGallery, FeatureMode, Matrix};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "#pros-manifest v1";
pub const SPLIT_HEADER: &str = "#pros-split v1";
const SAMPLES_MAGIC: &[u8; 8] = b"PROSIMG\0";
const EMBEDDINGS_MAGIC: &[u8; 8] = b"PROSEMB\0";
const BINARY_VERSION: u32 = 1;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn manifest_to_string(m: &DatasetManifest) -> Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for it in &m.items {
        for field in [&it.id, &it.source, &it.domain, &it.class] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(Error::Precondition(format!("manifest field {field:?} contains a tab or newline")));
            }
        }
        out.push_str(&format!("{}\t{}\t{}\t{}\n", it.id, it.source, it.domain, it.class));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    write_bytes(path, manifest_to_string(m)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(path, format!("missing '{MANIFEST_HEADER}' header")));
    }
    let mut items = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 tab-separated fields, got {}", n + 2, f.len())));
        }
        items.push(ManifestItem { id: f[0].into(), source: f[1].into(), domain: f[2].into(), class: f[3].into() });
    }
    DatasetManifest::new(items).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_split(path: &Path, split: &ProtocolSplit) -> Result<()> {
    let body = serde_json::to_string_pretty(split).expect("split serializes");
    write_bytes(path, format!("{SPLIT_HEADER}\n{body}\n").as_bytes())
}

pub fn read_split(path: &Path) -> Result<ProtocolSplit> {
    let text = read_text(path)?;
    let body = text
        .strip_prefix(SPLIT_HEADER)
        .ok_or_else(|| Error::format(path, format!("missing '{SPLIT_HEADER}' header")))?;
    serde_json::from_str(body).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value).expect("value serializes");
    body.push('\n');
    write_bytes(path, body.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_json(path)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "record too large"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }

    fn header(&mut self, magic: &[u8; 8], what: &str) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format(self.path, format!("not a {what} file")));
        }
        let v = self.u32()?;
        if v != BINARY_VERSION {
            return Err(Error::format(self.path, format!("unsupported {what} version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend((*x as f32).to_le_bytes());
    }
}

/// Raw image grids keyed by sample id, stored as 32-bit floats.
pub fn write_samples(path: &Path, rows: usize, cols: usize, samples: &BTreeMap<String, Matrix>) -> Result<()> {
    let mut out = Vec::with_capacity(24 + samples.len() * (16 + rows * cols * 4));
    out.extend(SAMPLES_MAGIC);
    out.extend(BINARY_VERSION.to_le_bytes());
    out.extend((rows as u32).to_le_bytes());
    out.extend((cols as u32).to_le_bytes());
    out.extend((samples.len() as u64).to_le_bytes());
    for (id, m) in samples {
        if m.shape() != (rows, cols) {
            return Err(Error::Precondition(format!("sample {id} is {:?}, expected ({rows}, {cols})", m.shape())));
        }
        put_str(&mut out, id);
        put_f32s(&mut out, m.as_slice());
    }
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&out).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<BTreeMap<String, Matrix>> {
    let bytes = read_bytes(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    r.header(SAMPLES_MAGIC, "samples")?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let count = r.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let id = r.string()?;
        let data = r.f32s(rows * cols)?;
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(path, e.to_string()))?;
        if out.insert(id.clone(), m).is_some() {
            return Err(Error::format(path, format!("duplicate sample id {id}")));
        }
    }
    r.finish()?;
    Ok(out)
}

fn mode_name(mode: FeatureMode) -> &'static str {
    match mode {
        FeatureMode::Simulated => "simulated",
        FeatureMode::Units => "units",
        FeatureMode::Frozen => "frozen",
    }
}

fn parse_mode(name: &str) -> Option<FeatureMode> {
    [FeatureMode::Simulated, FeatureMode::Units, FeatureMode::Frozen].into_iter().find(|m| mode_name(*m) == name)
}

/// Embeddings tagged with the feature path that produced them.
pub fn embeddings_to_bytes(g: &EmbeddingGallery, mode: FeatureMode) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + g.len() * (32 + g.dim * 4));
    out.extend(EMBEDDINGS_MAGIC);
    out.extend(BINARY_VERSION.to_le_bytes());
    put_str(&mut out, mode_name(mode));
    out.extend((g.dim as u32).to_le_bytes());
    out.extend((g.len() as u64).to_le_bytes());
    for i in 0..g.len() {
        put_str(&mut out, &g.ids[i]);
        put_str(&mut out, &g.classes[i]);
        put_str(&mut out, &g.domains[i]);
        put_f32s(&mut out, &g.vectors[i]);
    }
    out
}

pub fn write_embeddings(path: &Path, g: &EmbeddingGallery, mode: FeatureMode) -> Result<()> {
    write_bytes(path, &embeddings_to_bytes(g, mode))
}

/// Reads an embedding file; vectors are renormalized after the 32-bit
/// round trip.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingGallery, FeatureMode)> {
    let bytes = read_bytes(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    r.header(EMBEDDINGS_MAGIC, "embeddings")?;
    let name = r.string()?;
    let mode = parse_mode(&name).ok_or_else(|| Error::format(path, format!("unknown feature mode {name:?}")))?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut g = EmbeddingGallery::new(dim);
    for _ in 0..count {
        let id = r.string()?;
        let class = r.string()?;
        let domain = r.string()?;
        let v = r.f32s(dim)?;
        g.push(&id, &class, &domain, &v).map_err(|e| Error::format(path, e.to_string()))?;
    }
    r.finish()?;
    Ok((g, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let m = DatasetManifest::new(vec![
            ManifestItem { id: "a".into(), source: "synth:0:0:0".into(), domain: "real".into(), class: "x".into() },
            ManifestItem { id: "b".into(), source: "synth:1:0:0".into(), domain: "sketch".into(), class: "y".into() },
        ])
        .unwrap();
        write_manifest(&p, &m).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("#pros-manifest v1\na\t"));
        assert_eq!(read_manifest(&p).unwrap(), m);
    }

    #[test]
    fn manifest_without_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "a\tb\tc\td\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }

    #[test]
    fn samples_round_trip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let mut s = BTreeMap::new();
        s.insert("a".to_string(), Matrix::from_vec(2, 2, vec![0.5, -1.0, 2.25, 3.0]).unwrap());
        write_samples(&p, 2, 2, &s).unwrap();
        assert_eq!(read_samples(&p).unwrap(), s);
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.emb");
        let mut g = EmbeddingGallery::new(3);
        g.push("a", "x", "real", &[1.0, 2.0, 2.0]).unwrap();
        g.push("b", "y", "real", &[0.0, 0.0, 1.0]).unwrap();
        write_embeddings(&p, &g, FeatureMode::Units).unwrap();
        let (back, mode) = read_embeddings(&p).unwrap();
        assert_eq!(mode, FeatureMode::Units);
        assert_eq!(back.ids, g.ids);
        assert_eq!(back.classes, g.classes);
        for (a, b) in back.vectors.iter().zip(&g.vectors) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        back.validate().unwrap();
    }

    #[test]
    fn truncated_embeddings_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.emb");
        let mut g = EmbeddingGallery::new(2);
        g.push("a", "x", "real", &[1.0, 0.0]).unwrap();
        let bytes = embeddings_to_bytes(&g, FeatureMode::Frozen);
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_embeddings(&p).is_err());
    }
}
