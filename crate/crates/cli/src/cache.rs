use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mobs_core::io::{load_volume, payload_path, save_volume, VolumeKind};
use mobs_core::search::{response_map, StackedKernel};
use mobs_core::{Sample, Volume};
use sha2::{Digest, Sha256};

/// Response maps on disk, keyed by a SHA-256 of kernel taps and phantom data.
pub struct MapCache {
    dir: PathBuf,
}

fn hash_volume<T: Sample>(h: &mut Sha256, v: &Volume<T>) {
    for n in v.dims().as_array() {
        h.update((n as u64).to_le_bytes());
    }
    for x in v.data() {
        h.update(x.to_f64().to_le_bytes());
    }
}

pub fn key(phantom: &Volume<f32>, kernel: &StackedKernel) -> String {
    let mut h = Sha256::new();
    h.update(b"response-map/1");
    h.update((kernel.taps().len() as u64).to_le_bytes());
    for (w, k) in kernel.taps() {
        h.update(w.to_le_bytes());
        hash_volume(&mut h, k);
    }
    hash_volume(&mut h, phantom);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl MapCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.f32"))
    }

    pub fn response_map(&self, phantom: &Volume<f32>, kernel: &StackedKernel) -> Result<Volume<f32>> {
        let path = self.path_for(&key(phantom, kernel));
        if payload_path(&path).exists() {
            match load_volume(&path) {
                Ok(v) if v.dims() == phantom.dims() => {
                    log::debug!("cache hit {}", path.display());
                    return Ok(v);
                }
                _ => log::warn!("discarding unreadable cache entry {}", path.display()),
            }
        }
        let map = response_map(phantom, kernel)?;
        store(&self.dir, &path, &map)?;
        Ok(map)
    }
}

fn store(dir: &Path, path: &Path, map: &Volume<f32>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_volume(map, path, VolumeKind::Response)?;
    Ok(())
}
