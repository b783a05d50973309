//! Volume file pairs: `<name>.f32` (raw little-endian binary32, x-fastest)
//! plus a `<name>.json` sidecar with dims, spacing and kind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Sample, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Prob,
    Mask,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub kind: VolumeKind,
}

/// Payload path for a volume name; `foo`, `foo.f32` and `foo.json` all map
/// to `foo.f32`.
pub fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("f32")
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_volume<T: Sample>(v: &Volume<T>, path: &Path, kind: VolumeKind) -> Result<()> {
    let payload = payload_path(path);
    let sidecar = sidecar_path(path);
    let meta = VolumeMeta { dims: v.dims().as_array(), spacing_mm: v.spacing_mm(), kind };
    let file = fs::File::create(&payload).map_err(|e| Error::io(&payload, e))?;
    let mut w = BufWriter::new(file);
    for x in v.data() {
        w.write_all(&(x.to_f64() as f32).to_le_bytes()).map_err(|e| Error::io(&payload, e))?;
    }
    w.flush().map_err(|e| Error::io(&payload, e))?;
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume<f32>> {
    load_volume_with_meta(path).map(|(v, _)| v)
}

pub fn read_meta(path: &Path) -> Result<VolumeMeta> {
    let sidecar = sidecar_path(path);
    let text = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Metadata { path: sidecar, message: e.to_string() })
}

pub fn load_volume_with_meta(path: &Path) -> Result<(Volume<f32>, VolumeMeta)> {
    let meta = read_meta(path)?;
    let dims = Dims::from_array(meta.dims)?;
    let payload = payload_path(path);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    if bytes.len() != 4 * dims.len() {
        return Err(Error::dims(
            format!("{} scalars for {dims} (sidecar)", dims.len()),
            format!("{} bytes in {}", bytes.len(), payload.display()),
        ));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let v = Volume::new(dims, meta.spacing_mm, data)?;
    Ok((v, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.f32");
        let v = Volume::<f32>::zeros(Dims::d2(4, 4));
        save_volume(&v, &p, VolumeKind::Image).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes, vec![0u8; 64]);
        let meta = read_meta(&p).unwrap();
        assert_eq!(meta.dims, [4, 4, 1]);
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn random_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = Volume::from_fn(Dims::d3(8, 8, 3), |_, _, _| rng.random::<f32>() * 1e3 - 500.0)
            .with_spacing([0.1, 0.1, 1.0])
            .unwrap();
        save_volume(&v, &p, VolumeKind::Response).unwrap();
        let (back, meta) = load_volume_with_meta(&p).unwrap();
        assert_eq!(meta.kind, VolumeKind::Response);
        assert_eq!(back.spacing_mm(), [0.1, 0.1, 1.0]);
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn byte_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.f32");
        fs::write(&p, vec![0u8; 7 * 4]).unwrap();
        let meta = VolumeMeta { dims: [2, 2, 2], spacing_mm: [1.0; 3], kind: VolumeKind::Image };
        fs::write(sidecar_path(&p), serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn missing_sidecar_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nometa.f32");
        fs::write(&p, vec![0u8; 16]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Io { .. })));

        let q = dir.path().join("nan.f32");
        let mut bytes = Vec::new();
        for x in [0.0f32, f32::INFINITY, 1.0, 2.0] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(&q, bytes).unwrap();
        let meta = VolumeMeta { dims: [2, 2, 1], spacing_mm: [1.0; 3], kind: VolumeKind::Image };
        fs::write(sidecar_path(&q), serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(load_volume(&q), Err(Error::NonFinite(1))));
    }

    #[test]
    fn unwritable_destination_names_path() {
        let p = Path::new("/nonexistent-dir-for-mobs/sub/v.f32");
        let err = save_volume(&Volume::<f32>::zeros(Dims::d2(2, 2)), p, VolumeKind::Image).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir-for-mobs/sub/v.f32"));
    }
}
