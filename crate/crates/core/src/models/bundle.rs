//! The persisted model bundle and its checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "QPPCKPT\0"
//! 8       4     format version (u32)
//! 12      8     meta length M in bytes (u64)
//! 20      M     meta: the bundle structure as UTF-8 JSON with every
//!               parameter buffer emptied (shapes retained)
//! 20+M    8     total parameter count P (u64)
//! 28+M    8*P   parameter values as f64, little-endian, concatenated in
//!               the canonical matrix order of the structure (cost
//!               predictors by type name, then mappers, attention layers,
//!               convolution layers, readout)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::encoder::{CostStats, FeatureEncoder};
use crate::models::gat::GatParams;
use crate::models::mlp::{MatrixData, MlpParams};
use crate::models::ocp::OcpParams;
use crate::models::tcn::TcnParams;
use crate::models::ModelDims;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"QPPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ablation switches baked into a trained bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Skip the attention adjustment; expanded competition matrices enter
    /// the fusion directly.
    pub no_res_attn: bool,
    /// Skip the cost predictors; raw encoded features feed the cost mapper.
    pub no_ocp: bool,
}

/// Latency label normalization (log-space z-score) plus the training
/// median used by the constant baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub log_mean: f64,
    pub log_std: f64,
    pub median_secs: f64,
}

impl LabelStats {
    pub fn normalize(&self, latency_secs: f64) -> f64 {
        (latency_secs.ln() - self.log_mean) / self.log_std
    }

    pub fn denormalize(&self, norm: f64) -> f64 {
        (norm * self.log_std + self.log_mean).exp()
    }
}

/// The two input mappers feeding the calibrator: cost vectors and vertex
/// features are projected to the shared hidden width and summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperParams {
    pub cost_w: MatrixData,
    pub cost_b: MatrixData,
    pub vertex_w: MatrixData,
    pub vertex_b: MatrixData,
}

/// Everything trained in the query-level stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub mapper: MapperParams,
    /// Fusion weights `[adjacency, cpu, mem, io]`.
    pub fusion: [f64; 4],
    pub gat: GatParams,
    pub tcn: TcnParams,
}

/// The persisted checkpoint: encoder statistics, cost predictors, the
/// query-level predictor, and label normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub dims: ModelDims,
    pub flags: AblationFlags,
    pub encoder: FeatureEncoder,
    pub cost_stats: CostStats,
    pub ocp: Option<OcpParams>,
    pub predictor: Option<PredictorParams>,
    pub label_stats: Option<LabelStats>,
}

impl ModelBundle {
    pub fn require_predictor(&self) -> Result<(&PredictorParams, &LabelStats)> {
        match (&self.predictor, &self.label_stats) {
            (Some(p), Some(l)) => Ok((p, l)),
            _ => Err(Error::NotFitted(
                "bundle has no trained query-level predictor".to_string(),
            )),
        }
    }

    pub fn require_ocp(&self) -> Result<&OcpParams> {
        self.ocp
            .as_ref()
            .ok_or_else(|| Error::NotFitted("bundle has no trained cost predictors".to_string()))
    }

    fn mlp_matrices(mlp: &MlpParams) -> Vec<&MatrixData> {
        mlp.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn mlp_matrices_mut(mlp: &mut MlpParams) -> Vec<&mut MatrixData> {
        mlp.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    /// Every parameter matrix in canonical order.
    fn matrices(&self) -> Vec<&MatrixData> {
        let mut out = Vec::new();
        if let Some(ocp) = &self.ocp {
            for mlp in ocp.models.values() {
                out.extend(Self::mlp_matrices(mlp));
            }
        }
        if let Some(p) = &self.predictor {
            out.extend([&p.mapper.cost_w, &p.mapper.cost_b, &p.mapper.vertex_w, &p.mapper.vertex_b]);
            for layer in &p.gat.layers {
                for head in &layer.heads {
                    out.extend([&head.w, &head.a_src, &head.a_dst]);
                }
            }
            for layer in &p.tcn.layers {
                out.extend([&layer.w_top, &layer.w_left, &layer.w_right, &layer.bias]);
            }
            out.extend(Self::mlp_matrices(&p.tcn.readout));
        }
        out
    }

    fn matrices_mut(&mut self) -> Vec<&mut MatrixData> {
        let mut out = Vec::new();
        if let Some(ocp) = &mut self.ocp {
            for mlp in ocp.models.values_mut() {
                out.extend(Self::mlp_matrices_mut(mlp));
            }
        }
        if let Some(p) = &mut self.predictor {
            out.extend([
                &mut p.mapper.cost_w,
                &mut p.mapper.cost_b,
                &mut p.mapper.vertex_w,
                &mut p.mapper.vertex_b,
            ]);
            for layer in &mut p.gat.layers {
                for head in &mut layer.heads {
                    out.extend([&mut head.w, &mut head.a_src, &mut head.a_dst]);
                }
            }
            for layer in &mut p.tcn.layers {
                out.extend([&mut layer.w_top, &mut layer.w_left, &mut layer.w_right, &mut layer.bias]);
            }
            out.extend(Self::mlp_matrices_mut(&mut p.tcn.readout));
        }
        out
    }

    /// Serialize to the binary checkpoint format.
    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let mut stripped = self.clone();
        for m in stripped.matrices_mut() {
            m.data = Vec::new();
        }
        let meta = serde_json::to_vec(&stripped)?;

        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;

        let matrices = self.matrices();
        let total: u64 = matrices.iter().map(|m| m.data.len() as u64).sum();
        w.write_all(&total.to_le_bytes())?;
        for m in matrices {
            if m.data.len() != m.rows * m.cols {
                return Err(Error::Checkpoint(format!(
                    "matrix buffer {}x{} has {} values",
                    m.rows,
                    m.cols,
                    m.data.len()
                )));
            }
            for v in &m.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a checkpoint written by [`ModelBundle::write`].
    pub fn read<R: Read>(reader: R) -> Result<ModelBundle> {
        let mut r = BufReader::new(reader);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for header".to_string()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".to_string()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let meta_len = u64::from_le_bytes(u64buf) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)
            .map_err(|_| Error::Checkpoint("truncated metadata".to_string()))?;
        let mut bundle: ModelBundle = serde_json::from_slice(&meta)
            .map_err(|e| Error::Checkpoint(format!("corrupt metadata: {e}")))?;

        r.read_exact(&mut u64buf)?;
        let declared = u64::from_le_bytes(u64buf);
        let mut loaded = 0u64;
        for m in bundle.matrices_mut() {
            let n = m.rows * m.cols;
            let mut data = Vec::with_capacity(n);
            let mut f64buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut f64buf)
                    .map_err(|_| Error::Checkpoint("truncated parameter data".to_string()))?;
                data.push(f64::from_le_bytes(f64buf));
            }
            loaded += n as u64;
            m.data = data;
        }
        if loaded != declared {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: header says {declared}, structure needs {loaded}"
            )));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<ModelBundle> {
        Self::read(File::open(path)?)
    }
}
