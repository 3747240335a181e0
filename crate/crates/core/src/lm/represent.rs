//! Layer-averaged hidden states at program-token positions.

use std::io::{Read, Write};

use super::{LmError, LmModel};
use crate::corpus::{Dataset, Sample};

const EXTRACT_CHUNK: usize = 32;

/// Probe input for state `s_i` of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationVector {
    pub values: Vec<f32>,
    pub state_index: usize,
    pub sample_id: u64,
    pub checkpoint_step: u64,
}

/// Per-layer block outputs (`layers × len × model_dim`) for one sequence.
pub fn layer_hidden_states(model: &LmModel, tokens: &[u8]) -> Result<Vec<Vec<f32>>, LmError> {
    let cache = model.forward(&[tokens], None)?;
    Ok(cache.layers.into_iter().map(|l| l.x_out).collect())
}

fn average_rows(model: &LmModel, cache: &super::model::ForwardCache, row: usize, out: &mut [f32]) {
    let d = model.config.model_dim;
    out.fill(0.0);
    let mut count = 0;
    if model.config.average_includes_embedding {
        out.iter_mut()
            .zip(&cache.embed[row * d..(row + 1) * d])
            .for_each(|(o, v)| *o += v);
        count += 1;
    }
    for l in &cache.layers {
        out.iter_mut()
            .zip(&l.x_out[row * d..(row + 1) * d])
            .for_each(|(o, v)| *o += v);
        count += 1;
    }
    let inv = 1.0 / count as f32;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// One vector per program token: the mean over layers of the hidden state at
/// the position of `p_i`, standing for state `s_i`.
pub fn extract_representations(
    model: &LmModel,
    sample: &Sample,
) -> Result<Vec<RepresentationVector>, LmError> {
    let cache = model.forward(&[&sample.tokens], None)?;
    let d = model.config.model_dim;
    Ok((1..=sample.program_len())
        .map(|i| {
            let mut values = vec![0.0; d];
            average_rows(model, &cache, Sample::position_of_state(i), &mut values);
            RepresentationVector {
                values,
                state_index: i,
                sample_id: sample.id,
                checkpoint_step: model.step,
            }
        })
        .collect())
}

/// Row-major feature table with the `(sample_id, state_index)` of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
    pub keys: Vec<(u64, u8)>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.keys.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `u64 rows, u64 dim`, then per row `u64 sample_id, u8 state_index`,
    /// then the f32 data, all little-endian.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.rows() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.rows() * 9 + self.data.len() * 4);
        for &(id, i) in &self.keys {
            buf.extend_from_slice(&id.to_le_bytes());
            buf.push(i);
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let rows = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dim = u64::from_le_bytes(b8) as usize;
        let mut keys = Vec::with_capacity(rows);
        let mut kb = vec![0u8; rows * 9];
        r.read_exact(&mut kb)?;
        for c in kb.chunks_exact(9) {
            keys.push((u64::from_le_bytes(c[..8].try_into().unwrap()), c[8]));
        }
        let mut db = vec![0u8; rows * dim * 4];
        r.read_exact(&mut db)?;
        let data = db
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dim, data, keys })
    }
}

/// Representations for every `(sample, state)` of an auxiliary dataset, in
/// sample order then state order.
pub fn extract_dataset(model: &LmModel, dataset: &Dataset) -> Result<FeatureMatrix, LmError> {
    let d = model.config.model_dim;
    let total: usize = dataset.samples.iter().map(|s| s.program_len()).sum();
    let mut data = Vec::with_capacity(total * d);
    let mut keys = Vec::with_capacity(total);
    let mut buf = vec![0.0f32; d];
    for chunk in dataset.samples.chunks(EXTRACT_CHUNK) {
        let batch: Vec<&[u8]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let cache = model.forward(&batch, None)?;
        for (sample, &(start, _)) in chunk.iter().zip(&cache.seqs) {
            for i in 1..=sample.program_len() {
                average_rows(
                    model,
                    &cache,
                    start + Sample::position_of_state(i),
                    &mut buf,
                );
                data.extend_from_slice(&buf);
                keys.push((sample.id, i as u8));
            }
        }
    }
    Ok(FeatureMatrix { dim: d, data, keys })
}
