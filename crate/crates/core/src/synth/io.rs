use std::fs;
use std::io::Write;
use std::path::Path;

use pirt_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::render::Rect;
use super::{Dataset, Split, SynthConfig, SynthSample};
use crate::error::{PirtError, Result};
use crate::pose::Keypoint;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";
const MAGIC: &[u8; 4] = b"PDAT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: SynthConfig,
    samples: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    identity: usize,
    camera: usize,
    split: Split,
    keypoints: Vec<Keypoint>,
    occluders: Vec<Rect>,
    offset: u64,
}

/// Writes `manifest.json` and `payload.bin` (single-precision images).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PirtError::io(format!("creating {}", dir.display()), e))?;
    let mut payload = Vec::new();
    payload.extend_from_slice(MAGIC);
    payload.extend_from_slice(&VERSION.to_le_bytes());
    let mut records = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        records.push(Record {
            identity: s.identity,
            camera: s.camera,
            split: s.split,
            keypoints: s.keypoints.clone(),
            occluders: s.occluders.clone(),
            offset: payload.len() as u64,
        });
        s.image.write_to(&mut payload).expect("vec write");
    }
    let manifest = Manifest {
        version: VERSION,
        config: dataset.config.clone(),
        samples: records,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    for (name, bytes) in [(PAYLOAD_FILE, payload.as_slice()), (MANIFEST_FILE, text.as_bytes())] {
        let path = dir.join(name);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(bytes))
            .map_err(|e| PirtError::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| PirtError::io(format!("reading {}", mpath.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| PirtError::Format {
        offset: offset_of(&text, e.line(), e.column()),
        msg: format!("{}: {e}", MANIFEST_FILE),
    })?;
    if manifest.version != VERSION {
        return Err(PirtError::Format {
            offset: 0,
            msg: format!("{MANIFEST_FILE}: unsupported version {}", manifest.version),
        });
    }
    manifest.config.validate()?;
    let ppath = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&ppath).map_err(|e| PirtError::io(format!("reading {}", ppath.display()), e))?;
    if payload.len() < 8 || &payload[..4] != MAGIC {
        return Err(PirtError::Format {
            offset: 0,
            msg: format!("{PAYLOAD_FILE}: bad magic"),
        });
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(PirtError::Format {
            offset: 4,
            msg: format!("{PAYLOAD_FILE}: unsupported version {version}"),
        });
    }
    let (h, w) = (manifest.config.height, manifest.config.width);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, r) in manifest.samples.into_iter().enumerate() {
        if r.offset < 8 || r.offset > payload.len() as u64 {
            return Err(PirtError::Format {
                offset: r.offset,
                msg: format!("sample {i} points outside {PAYLOAD_FILE}"),
            });
        }
        let mut cursor = &payload[r.offset as usize..];
        let image: Tensor<f32> = Tensor::read_from(&mut cursor, r.offset)?;
        if image.shape() != [h, w, 3] {
            return Err(PirtError::Format {
                offset: r.offset,
                msg: format!("sample {i} image has shape {:?}, expected [{h}, {w}, 3]", image.shape()),
            });
        }
        samples.push(SynthSample {
            image,
            identity: r.identity,
            camera: r.camera,
            split: r.split,
            keypoints: r.keypoints,
            occluders: r.occluders,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        samples,
    })
}

/// Byte offset of a 1-based line/column position.
fn offset_of(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn small() -> Dataset {
        generate_dataset(&SynthConfig {
            n_identities: 4,
            images_per_identity: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(m["samples"].as_array().unwrap().len(), d.samples.len());
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join(PAYLOAD_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
        match load_dataset(dir.path()) {
            Err(PirtError::Format { offset, .. }) => {
                assert!(offset > 0 && offset <= bytes.len() as u64)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_is_a_format_error_at_zero() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join(PAYLOAD_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[1] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(PirtError::Format { offset: 0, .. })));
    }
}
