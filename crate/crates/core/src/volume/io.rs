use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelMap, Spacing, Volume};
use crate::error::{Error, Result};

/// JSON sidecar stored next to every `.raw` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub spacing_mm: Vec<f64>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

fn read_sidecar(path: &Path, dtype: &str) -> Result<(Sidecar, Spacing)> {
    let sc_path = sidecar_path(path);
    let text = match fs::read(&sc_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingSidecar(sc_path))
        }
        Err(e) => return Err(e.into()),
    };
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::BadSidecar {
        path: sc_path.clone(),
        reason: e.to_string(),
    })?;
    if sidecar.dtype != dtype {
        return Err(Error::BadSidecar {
            path: sc_path,
            reason: format!("dtype {} where {dtype} was expected", sidecar.dtype),
        });
    }
    let spacing = Spacing::new(sidecar.spacing_mm.clone())?;
    Ok((sidecar, spacing))
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected {
        return Err(Error::ByteCount {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

/// Writes `<path>` as little-endian float32 plus `<path>.json` sidecar.
pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(vol.len() * 4);
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    write_sidecar(
        path,
        &Sidecar {
            shape: vol.shape().to_vec(),
            spacing_mm: vol.spacing().as_slice().to_vec(),
            dtype: "float32".into(),
            num_classes: None,
        },
    )
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (sc, spacing) = read_sidecar(path, "float32")?;
    let n: usize = sc.shape.iter().product();
    let bytes = read_payload(path, n * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(sc.shape, spacing, data)
}

/// Writes a label map as uint8 plus sidecar carrying `num_classes`.
pub fn save_labels(lab: &LabelMap, path: &Path) -> Result<()> {
    fs::write(path, lab.data())?;
    write_sidecar(
        path,
        &Sidecar {
            shape: lab.shape().to_vec(),
            spacing_mm: lab.spacing().as_slice().to_vec(),
            dtype: "uint8".into(),
            num_classes: Some(lab.num_classes()),
        },
    )
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let (sc, spacing) = read_sidecar(path, "uint8")?;
    let n: usize = sc.shape.iter().product();
    let data = read_payload(path, n)?;
    let num_classes = match sc.num_classes {
        Some(c) => c,
        None => data.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2)),
    };
    LabelMap::new(sc.shape, spacing, num_classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let data = (0..24).map(|i| (i as f32 * 0.37).cos() * 1e3).collect();
        Volume::new(vec![2, 3, 4], Spacing::new(vec![0.5, 1.25, 3.0]).unwrap(), data).unwrap()
    }

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.raw");
        let v = sample();
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lab.raw");
        let l = LabelMap::new(vec![2, 2], Spacing::isotropic(1.0, 2).unwrap(), 4, vec![0, 3, 1, 0])
            .unwrap();
        save_labels(&l, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);
    }

    #[test]
    fn zero_spacing_in_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.raw");
        save_volume(&sample(), &p).unwrap();
        let sc = r#"{"shape":[2,3,4],"spacing_mm":[0.5,0.0,3.0],"dtype":"float32"}"#;
        fs::write(p.with_extension("json"), sc).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonPositiveSpacing(_))));
    }

    #[test]
    fn truncated_payload_is_a_byte_count_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.raw");
        save_volume(&sample(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_volume(&p),
            Err(Error::ByteCount { expected: 96, actual: 93, .. })
        ));
    }

    #[test]
    fn missing_sidecar_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.raw");
        fs::write(&p, [0u8; 4]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::MissingSidecar(_))));
    }
}
