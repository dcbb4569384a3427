//! Shard files.
//!
//! ```text
//! offset 0   "NEBS"                      4 bytes
//!            version                     u16
//!            episode_count               u64
//!            records                     episode_count x (u64 payload_len, payload)
//! index_off  index                       episode_count x (u64 record_offset, u64 payload_len, u32 crc32c)
//! end - 8    index_offset                u64
//! ```
//!
//! All integers little-endian. `record_offset` points at the record's length
//! prefix; the CRC covers the payload only.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::{decode_episode, encode_episode};
use super::manifest::EpisodeSummary;
use super::StorageError;
use crate::episode::{validate_episode, EmbodimentConfig, Episode};

pub const MAGIC: [u8; 4] = *b"NEBS";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 4 + 2 + 8;
pub const INDEX_ENTRY_LEN: u64 = 8 + 8 + 4;
pub const FOOTER_LEN: u64 = 8;
const RECORD_PREFIX_LEN: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub magic: [u8; 4],
    pub format_version: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Offset of the record's length prefix.
    pub byte_offset: u64,
    /// Payload length, excluding the prefix.
    pub byte_length: u64,
    pub crc32c: u32,
}

impl IndexEntry {
    fn record_end(&self) -> u64 {
        self.byte_offset + RECORD_PREFIX_LEN + self.byte_length
    }
}

/// In-memory view of a finalized shard: header and index, no records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub path: PathBuf,
    pub header: ShardHeader,
    pub index: Vec<IndexEntry>,
    pub episode_count: u64,
}

/// Appends validated episodes to a new shard file.
pub struct ShardWriter {
    path: PathBuf,
    out: BufWriter<File>,
    offset: u64,
    index: Vec<IndexEntry>,
    summaries: Vec<EpisodeSummary>,
    embodiments: BTreeMap<String, EmbodimentConfig>,
}

/// What [`ShardWriter::finish`] hands back for manifest building.
#[derive(Debug, Clone)]
pub struct WrittenShard {
    pub shard: Shard,
    pub summaries: Vec<EpisodeSummary>,
    pub embodiments: Vec<EmbodimentConfig>,
}

impl ShardWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)?;
        let mut out = BufWriter::new(file);
        out.write_all(&MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        // Patched in finish().
        out.write_all(&0u64.to_le_bytes())?;
        Ok(ShardWriter {
            path,
            out,
            offset: HEADER_LEN,
            index: Vec::new(),
            summaries: Vec::new(),
            embodiments: BTreeMap::new(),
        })
    }

    pub fn append(&mut self, ep: &Episode) -> Result<(), StorageError> {
        let report = validate_episode(ep);
        if !report.is_valid() {
            return Err(StorageError::InvalidEpisode {
                episode_id: ep.episode_id.clone(),
                report,
            });
        }
        let payload = encode_episode(ep);
        let entry = IndexEntry {
            byte_offset: self.offset,
            byte_length: payload.len() as u64,
            crc32c: crc32c::crc32c(&payload),
        };
        self.out.write_all(&entry.byte_length.to_le_bytes())?;
        self.out.write_all(&payload)?;
        self.offset = entry.record_end();
        self.index.push(entry);
        self.summaries.push(EpisodeSummary::of(ep));
        self.embodiments
            .entry(ep.embodiment.robot_id.clone())
            .or_insert_with(|| ep.embodiment.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Writes the index and footer, patches the header count, and syncs.
    pub fn finish(mut self) -> Result<WrittenShard, StorageError> {
        let index_offset = self.offset;
        for entry in &self.index {
            self.out.write_all(&entry.byte_offset.to_le_bytes())?;
            self.out.write_all(&entry.byte_length.to_le_bytes())?;
            self.out.write_all(&entry.crc32c.to_le_bytes())?;
        }
        self.out.write_all(&index_offset.to_le_bytes())?;
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        let count = self.index.len() as u64;
        file.seek(SeekFrom::Start(6))?;
        file.write_all(&count.to_le_bytes())?;
        file.sync_all()?;
        Ok(WrittenShard {
            shard: Shard {
                path: self.path,
                header: ShardHeader {
                    magic: MAGIC,
                    format_version: FORMAT_VERSION,
                },
                index: self.index,
                episode_count: count,
            },
            summaries: self.summaries,
            embodiments: self.embodiments.into_values().collect(),
        })
    }
}

/// Writes `episodes` to a new shard at `path`.
pub fn write_shard(episodes: &[Episode], path: impl AsRef<Path>) -> Result<Shard, StorageError> {
    // Validate everything before touching the file system.
    for ep in episodes {
        let report = validate_episode(ep);
        if !report.is_valid() {
            return Err(StorageError::InvalidEpisode {
                episode_id: ep.episode_id.clone(),
                report,
            });
        }
    }
    let mut writer = ShardWriter::create(path)?;
    for ep in episodes {
        writer.append(ep)?;
    }
    Ok(writer.finish()?.shard)
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Shard {
    /// Reads header, footer and index. Records are not touched.
    pub fn open(path: impl AsRef<Path>) -> Result<Shard, StorageError> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        if file_len < HEADER_LEN + FOOTER_LEN {
            return Err(StorageError::IndexTruncated(format!(
                "file is {file_len} bytes, smaller than header and footer"
            )));
        }
        let mut head = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut head)?;
        let magic: [u8; 4] = head[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(StorageError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(head[4..6].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(StorageError::FormatVersionUnsupported(version));
        }
        let count = u64::from_le_bytes(head[6..14].try_into().unwrap());

        file.seek(SeekFrom::Start(file_len - FOOTER_LEN))?;
        let index_offset = read_u64(&mut file)?;
        let expected = count
            .checked_mul(INDEX_ENTRY_LEN)
            .and_then(|n| n.checked_add(index_offset))
            .and_then(|n| n.checked_add(FOOTER_LEN));
        if expected != Some(file_len) || index_offset < HEADER_LEN {
            return Err(StorageError::IndexTruncated(format!(
                "index at {index_offset} with {count} entries does not end at file length {file_len}"
            )));
        }
        file.seek(SeekFrom::Start(index_offset))?;
        let mut raw = vec![0u8; (count * INDEX_ENTRY_LEN) as usize];
        file.read_exact(&mut raw)?;
        let index = raw
            .chunks_exact(INDEX_ENTRY_LEN as usize)
            .map(|c| IndexEntry {
                byte_offset: u64::from_le_bytes(c[0..8].try_into().unwrap()),
                byte_length: u64::from_le_bytes(c[8..16].try_into().unwrap()),
                crc32c: u32::from_le_bytes(c[16..20].try_into().unwrap()),
            })
            .collect::<Vec<_>>();
        if let Some(problem) = index_layout_problem(&index, index_offset) {
            return Err(StorageError::IndexCorrupt(problem));
        }
        Ok(Shard {
            path,
            header: ShardHeader {
                magic,
                format_version: version,
            },
            index,
            episode_count: count,
        })
    }

    /// Decodes record `i`, verifying its checksum first.
    pub fn read_episode(&self, i: u64) -> Result<Episode, StorageError> {
        let mut file = File::open(&self.path)?;
        self.read_episode_from(&mut file, i)
    }

    /// Like [`Shard::read_episode`] over an already-open reader of the same file.
    ///
    /// Reads exactly the record's length prefix and payload.
    pub fn read_episode_from<R: Read + Seek>(
        &self,
        reader: &mut R,
        i: u64,
    ) -> Result<Episode, StorageError> {
        if self.header.format_version != FORMAT_VERSION {
            return Err(StorageError::FormatVersionUnsupported(
                self.header.format_version,
            ));
        }
        let entry = *self
            .index
            .get(usize::try_from(i).unwrap_or(usize::MAX))
            .ok_or(StorageError::IndexOutOfRange {
                index: i,
                count: self.episode_count,
            })?;
        reader.seek(SeekFrom::Start(entry.byte_offset))?;
        let prefix = read_u64(reader)?;
        if prefix != entry.byte_length {
            return Err(StorageError::RecordCorrupt {
                index: i,
                reason: format!(
                    "length prefix {prefix} disagrees with index length {}",
                    entry.byte_length
                ),
            });
        }
        let mut payload = vec![0u8; entry.byte_length as usize];
        reader.read_exact(&mut payload)?;
        if crc32c::crc32c(&payload) != entry.crc32c {
            return Err(StorageError::ChecksumMismatch { index: i });
        }
        decode_episode(&payload).map_err(|e| StorageError::RecordCorrupt {
            index: i,
            reason: e.0,
        })
    }

    /// Sequential iterator over all episodes.
    pub fn episodes(&self) -> impl Iterator<Item = Result<Episode, StorageError>> + '_ {
        let mut file: Option<File> = None;
        (0..self.episode_count).map(move |i| {
            if file.is_none() {
                file = Some(File::open(&self.path)?);
            }
            self.read_episode_from(file.as_mut().unwrap(), i)
        })
    }
}

/// Records must start right after the header, be contiguous, and end at the index.
fn index_layout_problem(index: &[IndexEntry], index_offset: u64) -> Option<String> {
    let mut cursor = HEADER_LEN;
    for (i, e) in index.iter().enumerate() {
        if e.byte_offset != cursor {
            return Some(format!(
                "record {i} starts at {} but previous record ends at {cursor}",
                e.byte_offset
            ));
        }
        cursor = match e.byte_offset.checked_add(RECORD_PREFIX_LEN + e.byte_length) {
            Some(end) if end <= index_offset => end,
            _ => return Some(format!("record {i} runs past the index")),
        };
    }
    if cursor != index_offset {
        return Some(format!(
            "records end at {cursor} but index starts at {index_offset}"
        ));
    }
    None
}

/// Integrity failure codes reported by [`verify_shard`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntegrityCode {
    BadMagic,
    VersionUnsupported,
    IndexTruncated,
    IndexOrder,
    RecordLength,
    Checksum,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityFailure {
    pub code: IntegrityCode,
    pub record: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub episode_count: Option<u64>,
    pub failures: Vec<IntegrityFailure>,
}

impl IntegrityReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn has(&self, code: IntegrityCode) -> bool {
        self.failures.iter().any(|f| f.code == code)
    }

    fn fail(&mut self, code: IntegrityCode, record: Option<u64>, detail: impl Into<String>) {
        self.failures.push(IntegrityFailure {
            code,
            record,
            detail: detail.into(),
        });
    }
}

/// Full integrity scan: magic, version, footer/index consistency, index
/// layout, and every record's length prefix, checksum and decodability.
///
/// Only I/O failures are errors; every format problem becomes a listed failure.
pub fn verify_shard(path: impl AsRef<Path>) -> io::Result<IntegrityReport> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    Ok(verify_bytes(&bytes))
}

pub(crate) fn verify_bytes(bytes: &[u8]) -> IntegrityReport {
    let mut report = IntegrityReport::default();
    let len = bytes.len() as u64;
    if len < HEADER_LEN + FOOTER_LEN {
        report.fail(
            IntegrityCode::IndexTruncated,
            None,
            format!("file is only {len} bytes"),
        );
        if bytes.len() >= 4 && bytes[0..4] != MAGIC {
            report.fail(IntegrityCode::BadMagic, None, "magic mismatch");
        }
        return report;
    }
    if bytes[0..4] != MAGIC {
        report.fail(
            IntegrityCode::BadMagic,
            None,
            format!("expected {:?}, found {:?}", MAGIC, &bytes[0..4]),
        );
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        report.fail(
            IntegrityCode::VersionUnsupported,
            None,
            format!("format version {version}"),
        );
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    report.episode_count = Some(count);
    let index_offset =
        u64::from_le_bytes(bytes[(len - FOOTER_LEN) as usize..].try_into().unwrap());
    let index_end = count
        .checked_mul(INDEX_ENTRY_LEN)
        .and_then(|n| n.checked_add(index_offset));
    if index_end != Some(len - FOOTER_LEN) || index_offset < HEADER_LEN {
        report.fail(
            IntegrityCode::IndexTruncated,
            None,
            format!("index at {index_offset} for {count} entries does not fit file of {len} bytes"),
        );
        return report;
    }
    let index: Vec<IndexEntry> = bytes[index_offset as usize..(len - FOOTER_LEN) as usize]
        .chunks_exact(INDEX_ENTRY_LEN as usize)
        .map(|c| IndexEntry {
            byte_offset: u64::from_le_bytes(c[0..8].try_into().unwrap()),
            byte_length: u64::from_le_bytes(c[8..16].try_into().unwrap()),
            crc32c: u32::from_le_bytes(c[16..20].try_into().unwrap()),
        })
        .collect();
    if let Some(problem) = index_layout_problem(&index, index_offset) {
        report.fail(IntegrityCode::IndexOrder, None, problem);
    }
    for (i, e) in index.iter().enumerate() {
        let i = i as u64;
        let Some(payload_start) = e.byte_offset.checked_add(RECORD_PREFIX_LEN) else {
            continue;
        };
        let Some(payload_end) = payload_start.checked_add(e.byte_length) else {
            continue;
        };
        if payload_end > index_offset || e.byte_offset < HEADER_LEN {
            // Already covered by IndexOrder; the record cannot be located.
            continue;
        }
        let prefix = u64::from_le_bytes(
            bytes[e.byte_offset as usize..payload_start as usize]
                .try_into()
                .unwrap(),
        );
        if prefix != e.byte_length {
            report.fail(
                IntegrityCode::RecordLength,
                Some(i),
                format!("length prefix {prefix}, index says {}", e.byte_length),
            );
        }
        let payload = &bytes[payload_start as usize..payload_end as usize];
        if crc32c::crc32c(payload) != e.crc32c {
            report.fail(IntegrityCode::Checksum, Some(i), "crc32c mismatch");
        } else if let Err(err) = decode_episode(payload) {
            report.fail(IntegrityCode::Decode, Some(i), err.0);
        }
    }
    report
}
