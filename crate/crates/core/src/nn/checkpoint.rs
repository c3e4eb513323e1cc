//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MlpArch, MlpModel};
use crate::dataset::NormStats;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `(rows, cols)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub objective: String,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: MlpArch,
    pub norm_stats: NormStats,
    /// Multiplier applied to the network's linear output.
    pub output_scale: f64,
    pub layers: Vec<LayerParams>,
    pub training_meta: Option<TrainingMeta>,
}

impl Checkpoint {
    pub fn from_model(model: &MlpModel, meta: Option<TrainingMeta>) -> Self {
        let layers = (0..model.n_layers())
            .map(|l| {
                let (rows, cols) = model.layer_shape(l);
                LayerParams {
                    rows,
                    cols,
                    weights: model.weights(l).to_vec(),
                    bias: model.bias(l).to_vec(),
                }
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            arch: *model.arch(),
            norm_stats: *model.norm(),
            output_scale: model.output_scale(),
            layers,
            training_meta: meta,
        }
    }

    pub fn to_model(&self) -> Result<MlpModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(self.format_version));
        }
        let dims = self.arch.layer_dims();
        if self.layers.len() != dims.len() - 1 {
            return Err(Error::Parse(format!(
                "checkpoint has {} layers, architecture implies {}",
                self.layers.len(),
                dims.len() - 1
            )));
        }
        let mut params = Vec::with_capacity(self.arch.n_params());
        for (l, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = (dims[l + 1], dims[l]);
            if layer.rows != rows
                || layer.cols != cols
                || layer.weights.len() != rows * cols
                || layer.bias.len() != rows
            {
                return Err(Error::Parse(format!("layer {l} does not match a {rows}x{cols} shape")));
            }
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        MlpModel::from_parts(self.arch, self.norm_stats, self.output_scale, params)
    }
}

pub fn write_checkpoint<W: Write>(model: &MlpModel, meta: Option<TrainingMeta>, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, &Checkpoint::from_model(model, meta))?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(MlpModel, Option<TrainingMeta>)> {
    let ck: Checkpoint = serde_json::from_reader(r)?;
    Ok((ck.to_model()?, ck.training_meta))
}

pub fn save_checkpoint(model: &MlpModel, meta: Option<TrainingMeta>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, meta, f)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MlpModel, Option<TrainingMeta>)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
