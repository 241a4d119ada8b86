//! On-disk layout: immutable per-stream snapshots, checksummed JSON-lines
//! journals and a small state file replaced atomically.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{CompositeKey, ConsumerCategory, Consumption, DataStream, HourStamp, Reading};

pub const STATE_FILE: &str = "state.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"HCS1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{path}: {reason}")]
    Corrupt { path: String, reason: String },
}

fn corrupt(path: &Path, reason: impl Into<String>) -> StoreError {
    StoreError::Corrupt { path: path.display().to_string(), reason: reason.into() }
}

/// What has been committed. Everything on disk beyond these counts is debris
/// from an interrupted run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreState {
    pub phase_completed: Option<u8>,
    pub snapshot: String,
    pub events: u64,
    pub verdicts: u64,
    pub reports: u64,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    write_atomic(path, &serde_json::to_vec(value).map_err(io::Error::other)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| corrupt(path, e.to_string()))
}

fn line_checksum(body: &[u8]) -> String {
    hex::encode(&Sha256::digest(body)[..8])
}

/// Append-only JSON lines, each prefixed by a truncated SHA-256 of its body.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    lines: u64,
}

impl Journal {
    /// Opens the journal keeping only its first `committed` lines.
    pub fn open<T: DeserializeOwned>(path: &Path, committed: u64) -> Result<(Journal, Vec<T>), StoreError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        let mut records = Vec::with_capacity(committed as usize);
        let mut offset = 0usize;
        while (records.len() as u64) < committed {
            let Some(nl) = raw[offset..].iter().position(|b| *b == b'\n') else {
                return Err(corrupt(path, format!("{} committed lines expected, {} found", committed, records.len())));
            };
            let line = &raw[offset..offset + nl];
            let (sum, body) = line
                .iter()
                .position(|b| *b == b' ')
                .map(|i| (&line[..i], &line[i + 1..]))
                .ok_or_else(|| corrupt(path, format!("line {} has no checksum", records.len() + 1)))?;
            if sum != line_checksum(body).as_bytes() {
                return Err(corrupt(path, format!("checksum mismatch on line {}", records.len() + 1)));
            }
            records.push(serde_json::from_slice(body).map_err(|e| corrupt(path, e.to_string()))?);
            offset += nl + 1;
        }
        if raw.len() > offset {
            tracing::warn!(path = %path.display(), bytes = raw.len() - offset, "discarding uncommitted journal tail");
            file.set_len(offset as u64)?;
            file.sync_all()?;
        }
        Ok((Journal { path: path.to_path_buf(), file, lines: committed }, records))
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> io::Result<()> {
        let body = serde_json::to_vec(record).map_err(io::Error::other)?;
        let mut line = Vec::with_capacity(body.len() + 18);
        line.extend_from_slice(line_checksum(&body).as_bytes());
        line.push(b' ');
        line.extend_from_slice(&body);
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.lines += 1;
        Ok(())
    }

    pub fn sync(&self) -> io::Result<()> {
        self.file.sync_data()
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Serialize, Deserialize)]
struct StreamHeader {
    key: CompositeKey,
    category: Option<ConsumerCategory>,
    unit_label: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    key: CompositeKey,
    file: String,
    readings: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    /// Verdict journal lines already folded into this snapshot.
    pub verdicts_applied: u64,
}

/// `HCS1`, header length, JSON header, count, stamp column, value column, SHA-256.
pub fn encode_stream(s: &DataStream) -> Vec<u8> {
    let header = serde_json::to_vec(&StreamHeader {
        key: s.key.clone(),
        category: s.category.clone(),
        unit_label: s.unit_label.clone(),
    })
    .expect("header serializes");
    let n = s.len();
    let mut out = Vec::with_capacity(4 + 4 + header.len() + 8 + 16 * n + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for r in s.readings() {
        out.extend_from_slice(&r.at.hours().to_le_bytes());
    }
    for r in s.readings() {
        out.extend_from_slice(&r.value.litres().to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_stream(bytes: &[u8]) -> Result<DataStream, String> {
    if bytes.len() < 4 + 4 + 8 + 32 || &bytes[..4] != MAGIC {
        return Err("not a stream file".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch".into());
    }
    let word = |at: usize| -> Result<[u8; 8], String> {
        body.get(at..at + 8).and_then(|b| b.try_into().ok()).ok_or_else(|| "truncated".to_string())
    };
    let hlen = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let header: StreamHeader =
        serde_json::from_slice(body.get(8..8 + hlen).ok_or("truncated header")?).map_err(|e| e.to_string())?;
    let mut at = 8 + hlen;
    let n = u64::from_le_bytes(word(at)?) as usize;
    at += 8;
    if body.len() != at + 16 * n {
        return Err("column length mismatch".into());
    }
    let mut readings = Vec::with_capacity(n);
    for i in 0..n {
        let t = i64::from_le_bytes(word(at + 8 * i)?);
        let v = i64::from_le_bytes(word(at + 8 * (n + i))?);
        readings.push(Reading::new(HourStamp::from_hours(t), Consumption::from_litres(v)));
    }
    let mut s = DataStream::new(header.key, readings);
    s.category = header.category;
    s.unit_label = header.unit_label;
    Ok(s)
}

/// Writes `streams` as snapshot `name` under `root`, replacing any earlier one.
pub fn write_snapshot(root: &Path, name: &str, streams: &[DataStream], verdicts_applied: u64) -> Result<(), StoreError> {
    let dir = root.join(name);
    let tmp = root.join(format!("{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let entries: Vec<ManifestEntry> = streams
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let file = format!("s{i:06}.hcs");
            let mut f = File::create(tmp.join(&file))?;
            f.write_all(&encode_stream(s))?;
            f.sync_all()?;
            Ok(ManifestEntry { key: s.key.clone(), file, readings: s.len() as u64 })
        })
        .collect::<io::Result<_>>()?;
    write_json(&tmp.join(MANIFEST_FILE), &Manifest { entries, verdicts_applied })?;
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::rename(&tmp, &dir)?;
    File::open(root)?.sync_all()?;
    Ok(())
}

pub fn read_snapshot(root: &Path, name: &str) -> Result<(Vec<DataStream>, Manifest), StoreError> {
    let dir = root.join(name);
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let streams = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let s = decode_stream(&fs::read(&path)?).map_err(|r| corrupt(&path, r))?;
            if s.key != e.key || s.len() as u64 != e.readings {
                return Err(corrupt(&path, "does not match manifest"));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    Ok((streams, manifest))
}

/// Removes snapshot directories other than `keep`.
pub fn prune_snapshots(root: &Path, keep: &[&str]) -> io::Result<()> {
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let is_snapshot = name.starts_with("snap-") || name.ends_with(".partial");
        if entry.file_type()?.is_dir() && is_snapshot && !keep.contains(&name.as_str()) {
            fs::remove_dir_all(entry.path())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(values: &[(i64, i64)]) -> DataStream {
        let key = CompositeKey::new("a1", "m1", "d1").unwrap();
        DataStream::new(
            key,
            values.iter().map(|(t, v)| Reading::new(HourStamp::from_hours(*t), Consumption::from_litres(*v))).collect(),
        )
    }

    proptest! {
        #[test]
        fn stream_codec_roundtrip(values in prop::collection::vec((0i64..100_000, -1_000_000i64..1_000_000), 0..200)) {
            let s = stream(&values);
            prop_assert_eq!(decode_stream(&encode_stream(&s)).unwrap(), s);
        }
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = encode_stream(&stream(&[(1, 5), (2, 7)]));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(decode_stream(&bytes).is_err());
    }

    #[test]
    fn journal_drops_uncommitted_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let (mut j, none) = Journal::open::<u32>(&path, 0).unwrap();
        assert!(none.is_empty());
        for i in 0..5u32 {
            j.append(&i).unwrap();
        }
        drop(j);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"0123abcd {\"torn").unwrap();
        drop(f);
        let (mut j, got) = Journal::open::<u32>(&path, 3).unwrap();
        assert_eq!(got, vec![0, 1, 2]);
        j.append(&9u32).unwrap();
        drop(j);
        let (_, got) = Journal::open::<u32>(&path, 4).unwrap();
        assert_eq!(got, vec![0, 1, 2, 9]);
        assert!(Journal::open::<u32>(&path, 5).is_err());
    }

    #[test]
    fn journal_rejects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let (mut j, _) = Journal::open::<u32>(&path, 0).unwrap();
        j.append(&41u32).unwrap();
        drop(j);
        let text = fs::read_to_string(&path).unwrap().replace("41", "42");
        fs::write(&path, text).unwrap();
        assert!(matches!(Journal::open::<u32>(&path, 1), Err(StoreError::Corrupt { .. })));
    }

    #[test]
    fn snapshot_roundtrip_and_replace() {
        let dir = tempfile::tempdir().unwrap();
        let a = vec![stream(&[(1, 1), (2, 2)])];
        write_snapshot(dir.path(), "snap-0", &a, 0).unwrap();
        let b = vec![stream(&[(1, 3)])];
        write_snapshot(dir.path(), "snap-0", &b, 2).unwrap();
        let (got, m) = read_snapshot(dir.path(), "snap-0").unwrap();
        assert_eq!(got, b);
        assert_eq!(m.verdicts_applied, 2);
        write_snapshot(dir.path(), "snap-1", &a, 0).unwrap();
        prune_snapshots(dir.path(), &["snap-1"]).unwrap();
        assert!(!dir.path().join("snap-0").exists());
        assert!(dir.path().join("snap-1").exists());
    }
}
