//! On-disk clip cache: one little-endian f32 blob per item plus a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{item_seed, RawClip, Split, SyntheticDomain};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: usize,
    /// Global item index (validation items follow the training items).
    pub index: usize,
    pub label: usize,
    /// Per-item generator seed.
    pub seed: u64,
    /// `[T, C, H, W]`.
    pub shape: [usize; 4],
    pub dtype: String,
    /// SHA-256 of the blob.
    pub checksum: String,
    /// Digest of the generator settings; entries from other settings are stale.
    pub generator: String,
    pub file: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

#[derive(Debug)]
pub struct ClipCache {
    dir: PathBuf,
    entries: BTreeMap<(usize, usize), ManifestEntry>,
    dirty: bool,
    hits: usize,
    misses: usize,
}

fn generator_digest(d: &SyntheticDomain) -> String {
    let key = serde_json::json!({
        "kind": d.kind,
        "classes": d.num_classes,
        "geometry": d.geometry,
        "seed": d.seed,
        "style": d.style,
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

fn encode(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl ClipCache {
    /// Opens (or creates) a cache directory, reading any existing manifest.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str::<Manifest>(&text)?
        } else {
            Manifest::default()
        };
        let entries = manifest.entries.into_iter().map(|e| ((e.domain, e.index), e)).collect();
        Ok(ClipCache {
            dir,
            entries,
            dirty: false,
            hits: 0,
            misses: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.values()
    }

    /// Returns the cached item when its manifest entry and checksum are
    /// valid; otherwise regenerates it and stores it.
    pub fn item(&mut self, domain: &SyntheticDomain, split: Split, index: usize) -> Result<(RawClip, usize)> {
        let global = domain.global_index(split, index);
        let digest = generator_digest(domain);
        if let Some(entry) = self.entries.get(&(domain.id, global)) {
            if entry.generator == digest {
                if let Some(clip) = self.load(entry)? {
                    self.hits += 1;
                    return Ok((clip, entry.label));
                }
            }
        }
        self.misses += 1;
        let (clip, label) = domain.item(split, index)?;
        let bytes = encode(&clip.data);
        let file = format!("d{}_{:06}.bin", domain.id, global);
        let path = self.dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.insert(
            (domain.id, global),
            ManifestEntry {
                domain: domain.id,
                index: global,
                label,
                seed: item_seed(domain.seed, global as u64),
                shape: [clip.frames, clip.channels, clip.height, clip.width],
                dtype: "f32".into(),
                checksum: hex::encode(Sha256::digest(&bytes)),
                generator: digest,
                file,
            },
        );
        self.dirty = true;
        Ok((clip, label))
    }

    fn load(&self, entry: &ManifestEntry) -> Result<Option<RawClip>> {
        let path = self.dir.join(&entry.file);
        let Ok(bytes) = fs::read(&path) else {
            return Ok(None);
        };
        let [t, c, h, w] = entry.shape;
        if entry.dtype != "f32" || bytes.len() != 4 * t * c * h * w {
            return Ok(None);
        }
        if hex::encode(Sha256::digest(&bytes)) != entry.checksum {
            return Ok(None);
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Some(RawClip {
            frames: t,
            channels: c,
            height: h,
            width: w,
            data,
        }))
    }

    /// Writes the manifest if anything changed.
    pub fn flush(&mut self) -> Result<()> {
        if !self.dirty {
            return Ok(());
        }
        let manifest = Manifest {
            entries: self.entries.values().cloned().collect(),
        };
        let path = self.dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        self.dirty = false;
        Ok(())
    }
}

impl Drop for ClipCache {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
