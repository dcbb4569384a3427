//! Dataset manifests: the JSON sidecar listing shards, per-episode metadata,
//! per-family counts and the embodiment table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shard::{Shard, ShardWriter, WrittenShard};
use super::StorageError;
use crate::episode::{EmbodimentConfig, Episode, Family, Tier};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SUFFIX: &str = ".manifest.json";

/// Queryable metadata for one stored episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: String,
    pub family: Family,
    pub tier: Tier,
    pub template_id: u8,
    pub seed: u64,
    pub variant_tag: String,
    pub instruction: String,
    pub final_success: bool,
    pub step_count: u32,
    pub embodiment_id: String,
}

impl EpisodeSummary {
    pub fn of(ep: &Episode) -> Self {
        EpisodeSummary {
            episode_id: ep.episode_id.clone(),
            family: ep.task_meta.family,
            tier: ep.task_meta.tier,
            template_id: ep.task_meta.template_id,
            seed: ep.task_meta.seed,
            variant_tag: ep.task_meta.variant_tag.clone(),
            instruction: ep.instruction.clone(),
            final_success: ep.final_success,
            step_count: ep.steps.len() as u32,
            embodiment_id: ep.embodiment.robot_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub episode_count: u64,
    pub episodes: Vec<EpisodeSummary>,
}

/// Position of an episode inside a manifested dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EpisodeRef {
    pub shard: usize,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub schema_version: u32,
    pub shards: Vec<ShardEntry>,
    pub family_counts: BTreeMap<Family, u64>,
    pub embodiments: Vec<EmbodimentConfig>,
}

impl Manifest {
    pub fn new(dataset_name: impl Into<String>) -> Self {
        Manifest {
            dataset_name: dataset_name.into(),
            schema_version: SCHEMA_VERSION,
            shards: Vec::new(),
            family_counts: BTreeMap::new(),
            embodiments: Vec::new(),
        }
    }

    /// Registers a finished shard; `rel_path` is stored verbatim.
    pub fn add_shard(&mut self, rel_path: impl Into<String>, written: &WrittenShard) {
        for s in &written.summaries {
            *self.family_counts.entry(s.family).or_default() += 1;
        }
        for emb in &written.embodiments {
            if !self.embodiments.iter().any(|e| e.robot_id == emb.robot_id) {
                self.embodiments.push(emb.clone());
            }
        }
        self.shards.push(ShardEntry {
            path: rel_path.into(),
            episode_count: written.shard.episode_count,
            episodes: written.summaries.clone(),
        });
    }

    pub fn episode_count(&self) -> u64 {
        self.shards.iter().map(|s| s.episode_count).sum()
    }

    /// Every episode in (shard, index) order.
    pub fn entries(&self) -> impl Iterator<Item = (EpisodeRef, &EpisodeSummary)> {
        self.shards.iter().enumerate().flat_map(|(si, shard)| {
            shard.episodes.iter().enumerate().map(move |(i, s)| {
                (
                    EpisodeRef {
                        shard: si,
                        index: i as u64,
                    },
                    s,
                )
            })
        })
    }

    pub fn summary(&self, r: EpisodeRef) -> Option<&EpisodeSummary> {
        self.shards.get(r.shard)?.episodes.get(r.index as usize)
    }

    /// Invariant violations; empty means consistent.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!("schema_version {} unsupported", self.schema_version));
        }
        let mut counts: BTreeMap<Family, u64> = BTreeMap::new();
        for (i, shard) in self.shards.iter().enumerate() {
            if shard.episodes.len() as u64 != shard.episode_count {
                out.push(format!(
                    "shard {i} lists {} episodes but declares {}",
                    shard.episodes.len(),
                    shard.episode_count
                ));
            }
            for s in &shard.episodes {
                *counts.entry(s.family).or_default() += 1;
                if !self.embodiments.iter().any(|e| e.robot_id == s.embodiment_id) {
                    out.push(format!(
                        "episode {} references unknown embodiment {}",
                        s.episode_id, s.embodiment_id
                    ));
                }
            }
        }
        let declared: BTreeMap<Family, u64> = self
            .family_counts
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(f, n)| (*f, *n))
            .collect();
        if declared != counts {
            out.push(format!(
                "family_counts {declared:?} disagree with shard contents {counts:?}"
            ));
        }
        out
    }

    pub fn file_name(&self) -> String {
        format!("{}{MANIFEST_SUFFIX}", self.dataset_name)
    }

    /// Writes `<dir>/<dataset_name>.manifest.json` and returns its path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf, StorageError> {
        let path = dir.as_ref().join(self.file_name());
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(&path, json)?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let text = fs::read_to_string(path.as_ref())?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let problems = manifest.validate();
        if !problems.is_empty() {
            return Err(StorageError::ManifestInvalid(problems.join("; ")));
        }
        Ok(manifest)
    }
}

/// Resolves a dataset argument: either a manifest file or a directory
/// holding exactly one `*.manifest.json`.
pub fn locate_manifest(path: impl AsRef<Path>) -> Result<PathBuf, StorageError> {
    let path = path.as_ref();
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let mut found: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(MANIFEST_SUFFIX))
        })
        .collect();
    found.sort();
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => Err(StorageError::ManifestInvalid(format!(
            "no {MANIFEST_SUFFIX} in {}",
            path.display()
        ))),
        n => Err(StorageError::ManifestInvalid(format!(
            "{n} manifests in {}; pass one explicitly",
            path.display()
        ))),
    }
}

/// A manifest plus the directory its shard paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let manifest_path = locate_manifest(path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Dataset {
            root,
            manifest: Manifest::load(&manifest_path)?,
        })
    }

    pub fn shard_path(&self, shard: usize) -> Option<PathBuf> {
        self.manifest
            .shards
            .get(shard)
            .map(|s| self.root.join(&s.path))
    }

    pub fn open_shard(&self, shard: usize) -> Result<Shard, StorageError> {
        let path = self.shard_path(shard).ok_or(StorageError::IndexOutOfRange {
            index: shard as u64,
            count: self.manifest.shards.len() as u64,
        })?;
        Shard::open(path)
    }

    pub fn read(&self, r: EpisodeRef) -> Result<Episode, StorageError> {
        self.open_shard(r.shard)?.read_episode(r.index)
    }
}

/// Streams episodes into `<dir>/<name>-NNNNN.nebs` shards of at most
/// `shard_size` episodes, then writes the manifest.
pub struct DatasetWriter {
    dir: PathBuf,
    manifest: Manifest,
    shard_size: usize,
    current: Option<ShardWriter>,
}

impl DatasetWriter {
    pub fn new(
        dir: impl AsRef<Path>,
        name: impl Into<String>,
        shard_size: usize,
    ) -> Result<Self, StorageError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(DatasetWriter {
            dir,
            manifest: Manifest::new(name),
            shard_size: shard_size.max(1),
            current: None,
        })
    }

    fn shard_name(&self, n: usize) -> String {
        format!("{}-{n:05}.nebs", self.manifest.dataset_name)
    }

    pub fn append(&mut self, ep: &Episode) -> Result<(), StorageError> {
        if self.current.as_ref().is_some_and(|w| w.len() >= self.shard_size) {
            self.close_current()?;
        }
        if self.current.is_none() {
            let name = self.shard_name(self.manifest.shards.len());
            self.current = Some(ShardWriter::create(self.dir.join(name))?);
        }
        self.current.as_mut().unwrap().append(ep)
    }

    fn close_current(&mut self) -> Result<(), StorageError> {
        if let Some(w) = self.current.take() {
            let name = self.shard_name(self.manifest.shards.len());
            let written = w.finish()?;
            self.manifest.add_shard(name, &written);
        }
        Ok(())
    }

    /// Finalizes the open shard and saves the manifest. An empty dataset
    /// still gets one (empty) shard so readers have something to open.
    pub fn finish(mut self) -> Result<(Manifest, PathBuf), StorageError> {
        if self.current.is_none() && self.manifest.shards.is_empty() {
            let name = self.shard_name(0);
            self.current = Some(ShardWriter::create(self.dir.join(name))?);
        }
        self.close_current()?;
        let path = self.manifest.save(&self.dir)?;
        Ok((self.manifest, path))
    }
}
