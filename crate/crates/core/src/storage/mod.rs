//! On-disk shard format, integrity checking and dataset manifests.

mod codec;
mod manifest;
mod shard;

use thiserror::Error;

use crate::episode::ValidationReport;

pub use codec::{decode_episode, encode_episode, DecodeError};
pub use manifest::{
    locate_manifest, Dataset, DatasetWriter, EpisodeRef, EpisodeSummary, Manifest, ShardEntry,
    MANIFEST_SUFFIX, SCHEMA_VERSION,
};
pub use shard::{
    verify_shard, write_shard, IndexEntry, IntegrityCode, IntegrityFailure, IntegrityReport,
    Shard, ShardHeader, ShardWriter, WrittenShard, FOOTER_LEN, FORMAT_VERSION, HEADER_LEN,
    INDEX_ENTRY_LEN, MAGIC,
};


#[derive(Debug, Error)]
pub enum StorageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("episode {episode_id} is invalid: {report}")]
    InvalidEpisode {
        episode_id: String,
        report: ValidationReport,
    },
    #[error("episode index {index} out of range for {count} episodes")]
    IndexOutOfRange { index: u64, count: u64 },
    #[error("checksum mismatch in record {index}")]
    ChecksumMismatch { index: u64 },
    #[error("unsupported shard format version {0}")]
    FormatVersionUnsupported(u16),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("index truncated: {0}")]
    IndexTruncated(String),
    #[error("index corrupt: {0}")]
    IndexCorrupt(String),
    #[error("record {index} corrupt: {reason}")]
    RecordCorrupt { index: u64, reason: String },
    #[error("manifest invalid: {0}")]
    ManifestInvalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
