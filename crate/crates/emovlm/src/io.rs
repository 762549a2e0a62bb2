//! Text-based file formats.
//!
//! Everything the pipeline reads or writes is line-delimited JSON or a
//! single JSON document, so fixtures stay language-agnostic and diffable.
//! Formats:
//!
//! * landmarks (`landmarks.jsonl`): one record per frame —
//!   `{"frame": 0, "time_s": 0.0, "points": [[x, y], ...]}` with exactly 468
//!   `[x, y]` pairs in `[0, 1]`.
//! * regions (`regions.json`): `{"regions": [{"name": "...", "indices": [...]}]}`.
//! * utterances (`utterances.jsonl`): one record per segment —
//!   `{"start_s": 0.0, "end_s": 2.0, "transcript": "..."}`.
//! * label records (`*.jsonl`): `{"id": "...", "labels": ["...", ...]}`.
//! * checkpoint (`checkpoint.json`): seed, config hash, and every named
//!   parameter with its shape and row-major data; the JSON float encoding
//!   round-trips f64 exactly.
//! * training log (`train_log.jsonl`): one record per step.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{FaceRegion, Landmark, MESH_POINTS};
use crate::model::Model;
use crate::params::ParamStore;
use crate::video::UtteranceSegment;
use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Data(format!("serialize {}: {e}", path.display())))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

// ---- landmarks --------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LandmarkRecord {
    frame: usize,
    time_s: f64,
    points: Vec<(f64, f64)>,
}

pub fn write_landmarks(path: &Path, frames: &[(f64, Vec<Landmark>)]) -> Result<()> {
    let records: Vec<LandmarkRecord> = frames
        .iter()
        .enumerate()
        .map(|(i, (t, lms))| LandmarkRecord {
            frame: i,
            time_s: *t,
            points: lms.iter().map(|l| (l.x, l.y)).collect(),
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn read_landmarks(path: &Path) -> Result<Vec<(f64, Vec<Landmark>)>> {
    let records: Vec<LandmarkRecord> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if r.frame != i {
            return Err(Error::Data(format!(
                "{}: frame index {} at line {}",
                path.display(),
                r.frame,
                i + 1
            )));
        }
        if r.points.len() != MESH_POINTS {
            return Err(Error::Data(format!(
                "{}: frame {} has {} landmarks, expected {MESH_POINTS}",
                path.display(),
                i,
                r.points.len()
            )));
        }
        let lms = r
            .points
            .into_iter()
            .map(|(x, y)| Landmark::new(x, y))
            .collect::<Result<Vec<_>>>()?;
        out.push((r.time_s, lms));
    }
    Ok(out)
}

// ---- regions ----------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RegionFile {
    regions: Vec<FaceRegion>,
}

pub fn write_regions(path: &Path, regions: &[FaceRegion]) -> Result<()> {
    write_json(
        path,
        &RegionFile {
            regions: regions.to_vec(),
        },
    )
}

pub fn read_regions(path: &Path) -> Result<Vec<FaceRegion>> {
    let file: RegionFile = read_json(path)?;
    Ok(file.regions)
}

// ---- utterances -------------------------------------------------------------

pub fn write_utterances(path: &Path, utterances: &[UtteranceSegment]) -> Result<()> {
    write_jsonl(path, utterances)
}

pub fn read_utterances(path: &Path) -> Result<Vec<UtteranceSegment>> {
    let utterances: Vec<UtteranceSegment> = read_jsonl(path)?;
    for u in &utterances {
        u.validate()?;
    }
    Ok(utterances)
}

// ---- label records ----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub labels: Vec<String>,
}

// ---- checkpoint -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    seed: u64,
    config_hash: String,
    params: BTreeMap<String, CheckpointEntry>,
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let params = model
        .store
        .iter()
        .map(|(name, value)| {
            (
                name.to_string(),
                CheckpointEntry {
                    shape: [value.nrows(), value.ncols()],
                    data: value.iter().copied().collect(),
                },
            )
        })
        .collect();
    write_json(
        path,
        &Checkpoint {
            seed: model.config.seed,
            config_hash: model.config.hash(),
            params,
        },
    )
}

/// Load a checkpoint saved for exactly this configuration.
pub fn load_checkpoint(path: &Path, config: &RunConfig) -> Result<Model> {
    let ckpt: Checkpoint = read_json(path)?;
    if ckpt.config_hash != config.hash() {
        return Err(Error::Data(format!(
            "{}: checkpoint config hash {} does not match current config {}",
            path.display(),
            ckpt.config_hash,
            config.hash()
        )));
    }
    let mut store = ParamStore::new();
    for (name, entry) in ckpt.params {
        let [r, c] = entry.shape;
        if entry.data.len() != r * c {
            return Err(Error::Data(format!(
                "{}: parameter {name} carries {} values for shape {r}x{c}",
                path.display(),
                entry.data.len()
            )));
        }
        let arr = Array2::from_shape_vec((r, c), entry.data)
            .map_err(|e| Error::Data(format!("{}: {name}: {e}", path.display())))?;
        store.insert(name, arr);
    }
    Ok(Model {
        config: config.clone(),
        store,
    })
}

// ---- training log -----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub n_answer_tokens: usize,
    /// L2 norms of each tuned parameter group after the update.
    pub tuned_norms: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::canonical_face_regions;
    use tempfile::tempdir;

    #[test]
    fn region_and_utterance_round_trip() {
        let dir = tempdir().unwrap();
        let rpath = dir.path().join("regions.json");
        let regions = canonical_face_regions();
        write_regions(&rpath, &regions).unwrap();
        assert_eq!(read_regions(&rpath).unwrap(), regions);

        let upath = dir.path().join("utterances.jsonl");
        let utts = vec![
            UtteranceSegment::new(0.0, 2.0, "i am happy today").unwrap(),
            UtteranceSegment::new(2.0, 5.0, "this is terrible news").unwrap(),
        ];
        write_utterances(&upath, &utts).unwrap();
        assert_eq!(read_utterances(&upath).unwrap(), utts);
    }

    #[test]
    fn landmarks_enforce_mesh_size() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("landmarks.jsonl");
        let short = vec![(0.0, vec![Landmark { x: 0.5, y: 0.5 }; 10])];
        write_landmarks(&path, &short).unwrap();
        assert!(matches!(read_landmarks(&path), Err(Error::Data(_))));

        let full = vec![
            (0.0, vec![Landmark { x: 0.25, y: 0.75 }; MESH_POINTS]),
            (1.0, vec![Landmark { x: 0.5, y: 0.125 }; MESH_POINTS]),
        ];
        write_landmarks(&path, &full).unwrap();
        let back = read_landmarks(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, 1.0);
        assert_eq!(back[0].1[3].x, 0.25);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = RunConfig::grad_check_defaults();
        let model = Model::init(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path, &cfg).unwrap();
        for (name, value) in model.store.iter() {
            assert_eq!(back.store.get(name), value, "{name} must round-trip exactly");
        }

        // config mismatch is rejected
        let other = RunConfig {
            n_queries: cfg.n_queries + 1,
            ..cfg
        };
        assert!(matches!(
            load_checkpoint(&path, &other),
            Err(Error::Data(_))
        ));
    }
}
