//! Line-delimited JSON dataset files.
//!
//! The first line is the manifest record, every following line one sample.
//! Labels are written compactly as `[row, col, dir, facing_blocked]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, DatasetManifest, Sample};
use crate::gridworld::{Direction, LatentLabel};

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    schema: String,
    #[serde(flatten)]
    manifest: DatasetManifest,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    seed: u64,
    n: usize,
    tokens: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<[u8; 4]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    bound_mask: Vec<bool>,
}

fn io_err(line: Option<usize>, e: impl ToString) -> CorpusError {
    CorpusError::Io {
        line,
        message: e.to_string(),
    }
}

fn pack(l: &LatentLabel) -> [u8; 4] {
    [
        l.row as u8,
        l.col as u8,
        l.dir.index() as u8,
        l.facing_blocked as u8,
    ]
}

fn unpack(v: [u8; 4], line: usize) -> Result<LatentLabel, CorpusError> {
    let dir = Direction::from_index(v[2] as usize)
        .ok_or_else(|| io_err(Some(line), "bad direction in label"))?;
    if v[0] >= 8 || v[1] >= 8 || v[3] > 1 {
        return Err(io_err(Some(line), "label out of range"));
    }
    Ok(LatentLabel {
        row: v[0] as usize,
        col: v[1] as usize,
        dir,
        facing_blocked: v[3] == 1,
    })
}

pub fn persist_dataset(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| io_err(None, e))?;
    let mut w = BufWriter::new(file);
    let header = ManifestRecord {
        schema: SCHEMA_VERSION.to_string(),
        manifest: dataset.manifest.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| io_err(Some(1), e))?;
    w.write_all(b"\n").map_err(|e| io_err(Some(1), e))?;
    for (k, s) in dataset.samples.iter().enumerate() {
        let rec = SampleRecord {
            id: s.id,
            seed: s.sample_seed,
            n: s.program_len(),
            tokens: s.tokens.clone(),
            labels: s.labels.iter().map(pack).collect(),
            bound_mask: s.bound_mask.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| io_err(Some(k + 2), e))?;
        w.write_all(b"\n").map_err(|e| io_err(Some(k + 2), e))?;
    }
    w.flush().map_err(|e| io_err(None, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(None, format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| io_err(Some(1), "empty dataset file"))?
        .map_err(|e| io_err(Some(1), e))?;
    let probe: serde_json::Value = serde_json::from_str(&first).map_err(|e| io_err(Some(1), e))?;
    let found = probe
        .get("schema")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if found != SCHEMA_VERSION {
        return Err(CorpusError::SchemaVersionMismatch {
            expected: SCHEMA_VERSION.into(),
            found: found.into(),
        });
    }
    let header: ManifestRecord = serde_json::from_value(probe).map_err(|e| io_err(Some(1), e))?;
    let manifest = header.manifest;

    let mut samples = Vec::with_capacity(manifest.count);
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|e| io_err(Some(lineno), e))?;
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| io_err(Some(lineno), e))?;
        let labels = rec
            .labels
            .into_iter()
            .map(|v| unpack(v, lineno))
            .collect::<Result<Vec<_>, _>>()?;
        let sample = Sample {
            id: rec.id,
            sample_seed: rec.seed,
            tokens: rec.tokens,
            labels,
            bound_mask: rec.bound_mask,
        };
        if sample.tokens.len() < super::PROGRAM_START + 1 || sample.program_len() != rec.n {
            return Err(io_err(
                Some(lineno),
                "token count disagrees with program length",
            ));
        }
        samples.push(sample);
    }
    if samples.len() != manifest.count {
        return Err(io_err(
            Some(samples.len() + 2),
            format!(
                "truncated dataset: manifest declares {} samples, found {}",
                manifest.count,
                samples.len()
            ),
        ));
    }
    Ok(Dataset { manifest, samples })
}
