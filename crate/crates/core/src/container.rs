//! Binary persistence: the named-tensor container used for checkpoints and
//! observation tensors, run-length-encoded ground-truth masks, and the
//! scenario file wrapping both plus the canonical TOML config.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic  8  b"NTENSOR\0"
//! u32       format version (1)
//! u64       tensor count
//! repeat:
//!   u32         name length, then that many UTF-8 bytes
//!   u32         rank, then rank x u64 extents
//!   f64 x prod  row-major little-endian values
//! ```
//!
//! Scenario files start with `b"CTSCENE\0"`, a u32 version, the
//! length-prefixed config TOML, the RLE-encoded ground-truth tracks, the
//! per-frame detection-to-object maps, and finally the observation tensors as
//! an embedded named-tensor container. Saving a loaded scenario reproduces
//! the file byte for byte.

use crate::context::InstanceObservation;
use crate::error::{Error, Result};
use crate::scenario::{GroundTruthTrack, Mask, Scenario, ScenarioConfig, ScenarioFrame};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 8] = b"NTENSOR\0";
pub const SCENARIO_MAGIC: &[u8; 8] = b"CTSCENE\0";
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

// ---------------------------------------------------------------------------
// named tensors
// ---------------------------------------------------------------------------

/// Serializes named tensors in the given order.
pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, tensors.len() as u64);
    for (name, tensor) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, tensor.shape().len() as u32);
        for &d in tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(data: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(data);
    decode_tensors_from(&mut r)
}

fn decode_tensors_from(r: &mut Reader) -> Result<Vec<(String, Tensor)>> {
    if r.take(8)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor container magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor container version {version}"
        )));
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    atomic_write(path, &encode_tensors(tensors))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let data = std::fs::read(path)?;
    decode_tensors(&data)
}

pub fn to_map(tensors: Vec<(String, Tensor)>) -> BTreeMap<String, Tensor> {
    tensors.into_iter().collect()
}

/// Writes via a temp file in the same directory plus an atomic rename, so
/// interrupted runs leave either no file or a complete one.
pub fn atomic_write(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// run-length encoding for binary masks
// ---------------------------------------------------------------------------

/// Alternating run lengths starting with a zero-run (may be 0).
pub fn rle_encode(mask: &[f64]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false; // runs start with zeros
    let mut len = 0u32;
    for &v in mask {
        let on = v > 0.5;
        if on == current {
            len += 1;
        } else {
            runs.push(len);
            current = on;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[u32], len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut on = false;
    for &run in runs {
        for _ in 0..run {
            out.push(f64::from(on));
        }
        on = !on;
    }
    if out.len() != len {
        return Err(Error::Format(format!(
            "rle decodes to {} pixels, want {len}",
            out.len()
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// scenario files
// ---------------------------------------------------------------------------

fn frame_tensor_names(t: usize) -> [String; 4] {
    [
        format!("f{t:03}.features"),
        format!("f{t:03}.core"),
        format!("f{t:03}.masks"),
        format!("f{t:03}.classes"),
    ]
}

pub fn encode_scenario(scenario: &Scenario) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SCENARIO_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let config_toml = toml::to_string(&scenario.config)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    put_u32(&mut out, config_toml.len() as u32);
    out.extend_from_slice(config_toml.as_bytes());

    put_u64(&mut out, scenario.tracks.len() as u64);
    for track in &scenario.tracks {
        put_u64(&mut out, track.id as u64);
        put_u64(&mut out, track.class as u64);
        put_u64(&mut out, track.first_appearance as u64);
        put_u64(&mut out, track.masks.len() as u64);
        for mask in &track.masks {
            match mask {
                None => out.push(0u8),
                Some(m) => {
                    out.push(1u8);
                    let runs = rle_encode(m.data());
                    put_u64(&mut out, runs.len() as u64);
                    for &r in &runs {
                        put_u32(&mut out, r);
                    }
                }
            }
        }
    }

    put_u64(&mut out, scenario.frames.len() as u64);
    for frame in &scenario.frames {
        put_u64(&mut out, frame.detection_object.len() as u64);
        for &o in &frame.detection_object {
            put_u64(&mut out, o as u64);
        }
    }

    let mut tensors = Vec::new();
    for (t, frame) in scenario.frames.iter().enumerate() {
        let names = frame_tensor_names(t);
        let obs = &frame.observation;
        tensors.push((names[0].clone(), obs.features.clone()));
        tensors.push((names[1].clone(), obs.core.clone()));
        tensors.push((names[2].clone(), obs.masks.clone()));
        tensors.push((names[3].clone(), obs.class_scores.clone()));
    }
    let blob = encode_tensors(&tensors);
    put_u64(&mut out, blob.len() as u64);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_scenario(data: &[u8]) -> Result<Scenario> {
    let mut r = Reader::new(data);
    if r.take(8)? != SCENARIO_MAGIC {
        return Err(Error::Format("bad scenario magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported scenario version {version}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_toml = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config: ScenarioConfig = toml::from_str(config_toml)
        .map_err(|e| Error::Format(format!("config parse: {e}")))?;
    let (h, w) = (config.height, config.width);

    let track_count = r.u64()? as usize;
    let mut tracks = Vec::with_capacity(track_count);
    for _ in 0..track_count {
        let id = r.u64()? as usize;
        let class = r.u64()? as usize;
        let first_appearance = r.u64()? as usize;
        let frames = r.u64()? as usize;
        let mut masks = Vec::with_capacity(frames);
        for _ in 0..frames {
            match r.u8()? {
                0 => masks.push(None),
                1 => {
                    let run_count = r.u64()? as usize;
                    let mut runs = Vec::with_capacity(run_count);
                    for _ in 0..run_count {
                        runs.push(r.u32()?);
                    }
                    masks.push(Some(Mask::new(h, w, rle_decode(&runs, h * w)?)));
                }
                other => {
                    return Err(Error::Format(format!("bad mask presence byte {other}")))
                }
            }
        }
        let track = GroundTruthTrack {
            id,
            class,
            first_appearance,
            masks,
        };
        tracks.push(track);
    }

    let frame_count = r.u64()? as usize;
    let mut detection_maps = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let n = r.u64()? as usize;
        let mut map = Vec::with_capacity(n);
        for _ in 0..n {
            map.push(r.u64()? as usize);
        }
        detection_maps.push(map);
    }

    let blob_len = r.u64()? as usize;
    let blob = r.take(blob_len)?;
    if !r.done() {
        return Err(Error::Format("trailing bytes after scenario".into()));
    }
    let tensors = to_map(decode_tensors(blob)?);
    let mut frames = Vec::with_capacity(frame_count);
    for (t, detection_object) in detection_maps.into_iter().enumerate() {
        let names = frame_tensor_names(t);
        let get = |name: &str| {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("scenario missing tensor {name}")))
        };
        frames.push(ScenarioFrame {
            observation: InstanceObservation {
                features: get(&names[0])?,
                core: get(&names[1])?,
                masks: get(&names[2])?,
                class_scores: get(&names[3])?,
            },
            detection_object,
        });
    }
    Ok(Scenario {
        config,
        tracks,
        frames,
    })
}

pub fn save_scenario(path: &Path, scenario: &Scenario) -> Result<()> {
    atomic_write(path, &encode_scenario(scenario)?)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let data = std::fs::read(path)?;
    decode_scenario(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ObjectSpec, Shape};

    #[test]
    fn tensors_round_trip() {
        let tensors = vec![
            ("alpha".to_string(), Tensor::new(&[2, 3], (0..6).map(|i| i as f64 * 0.5).collect()).unwrap()),
            ("beta.gamma".to_string(), Tensor::scalar(-7.25)),
            ("empty".to_string(), Tensor::zeros(&[0])),
        ];
        let bytes = encode_tensors(&tensors);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(tensors.len(), back.len());
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn truncated_container_is_a_format_error() {
        let tensors = vec![("t".to_string(), Tensor::zeros(&[4, 4]))];
        let bytes = encode_tensors(&tensors);
        assert!(matches!(
            decode_tensors(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn rle_round_trips_and_handles_edges() {
        let cases: Vec<Vec<f64>> = vec![
            vec![],
            vec![0.0; 7],
            vec![1.0; 5],
            vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0, 0.0],
        ];
        for mask in cases {
            let runs = rle_encode(&mask);
            let back = rle_decode(&runs, mask.len()).unwrap();
            assert_eq!(mask, back);
        }
    }

    #[test]
    fn rle_length_mismatch_is_rejected() {
        assert!(rle_decode(&[2, 2], 5).is_err());
    }

    fn small_scenario() -> Scenario {
        let config = ScenarioConfig {
            height: 10,
            width: 12,
            channels: 4,
            classes: 2,
            frames: 3,
            objects: vec![
                ObjectSpec {
                    shape: Shape::Disc { radius: 1.5 },
                    start: (3.0, 3.0),
                    velocity: (0.0, 1.0),
                    class: 0,
                    appearance: None,
                },
                ObjectSpec {
                    shape: Shape::Rectangle {
                        half_width: 1.0,
                        half_height: 1.0,
                    },
                    start: (7.0, 8.0),
                    velocity: (0.0, -1.0),
                    class: 1,
                    appearance: None,
                },
            ],
            twin_groups: vec![],
            occlusions: vec![],
            noise_sigma: 0.05,
            pos_scale: 0.02,
            appearance_scale: 2.0,
            seed: 77,
        };
        generate_scenario(&config).unwrap()
    }

    #[test]
    fn scenario_files_round_trip_byte_identically() {
        let scenario = small_scenario();
        let bytes = encode_scenario(&scenario).unwrap();
        let loaded = decode_scenario(&bytes).unwrap();
        let bytes2 = encode_scenario(&loaded).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(loaded.tracks.len(), scenario.tracks.len());
        for (a, b) in scenario.frames.iter().zip(&loaded.frames) {
            assert_eq!(a.detection_object, b.detection_object);
            assert_eq!(a.observation.features.data(), b.observation.features.data());
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = std::env::temp_dir().join("context-track-test-atomic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("out.bin");
        atomic_write(&path, b"payload").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"payload");
        assert!(!path.with_extension("tmp").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
