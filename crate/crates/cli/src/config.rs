//! Declarative run configuration.
//!
//! Everything that influences an experiment lives in one TOML file; the
//! command line only selects the action and the paths. Every section's seed
//! is mandatory so no run depends on implicit entropy.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use qpp_core::harness::TrainConfig;
use qpp_core::models::{AblationFlags, ModelDims};
use qpp_core::runner::WorkloadSpec;
use qpp_core::tracesim::{CostGroundTruthModel, ResourceCoeffs, SimulatorConfig, WorkloadTemplate};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub workload: WorkloadSection,
    pub simulator: SimulatorSection,
    pub model: ModelSection,
    pub training: TrainingSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub templates: u64,
    pub queries_per_template: u64,
    pub seed: u64,
    pub depth: (u32, u32),
    pub joins: (u32, u32),
    pub table_rows: (u64, u64),
    pub columns: (u32, u32),
    pub selectivity: (f64, f64),
    pub join_multiplier: (f64, f64),
    pub group_counts: (u64, u64),
    pub dop: (u32, u32),
    pub modification_prob: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSection {
    pub seed: u64,
    pub chunk_rows: u64,
    /// Background load intensity range `[low, high]`.
    pub background: (f64, f64),
    pub probe_chunks: u64,
    pub noise_scale: f64,
    pub penalty: CoeffsSection,
    pub util_sens: CoeffsSection,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffsSection {
    pub cpu: f64,
    pub mem: f64,
    pub io: f64,
}

impl From<CoeffsSection> for ResourceCoeffs {
    fn from(c: CoeffsSection) -> ResourceCoeffs {
        ResourceCoeffs { cpu: c.cpu, mem: c.mem, io: c.io }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub gat_heads: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    pub ocp_epochs: u32,
    pub qpp_epochs: u32,
    pub batch_size: usize,
    pub learning_rate_ocp: f64,
    pub learning_rate_qpp: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub held_out_templates: Vec<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: RunConfig =
            toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.workload.templates < 1 || self.workload.queries_per_template < 1 {
            bail!("workload needs at least one template and one query per template");
        }
        for &id in &self.training.held_out_templates {
            if id >= self.workload.templates {
                bail!("held-out template {id} does not exist (templates: {})", self.workload.templates);
            }
        }
        let mut dedup = self.training.held_out_templates.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != self.training.held_out_templates.len() {
            bail!("held-out template ids contain duplicates");
        }
        if self.simulator.probe_chunks < 1 {
            bail!("simulator.probe_chunks must be >= 1");
        }
        self.template_bounds().validate().map_err(|e| anyhow::anyhow!(e))?;
        self.train_config(AblationFlags::default()).validate().map_err(|e| anyhow::anyhow!(e))?;
        Ok(())
    }

    /// Output directory, overridable through `QPP_OUT_DIR`.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os("QPP_OUT_DIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    fn template_bounds(&self) -> WorkloadTemplate {
        let w = &self.workload;
        WorkloadTemplate {
            template_id: 0,
            depth: w.depth,
            joins: w.joins,
            table_rows: w.table_rows,
            columns: w.columns,
            selectivity: w.selectivity,
            join_multiplier: w.join_multiplier,
            group_counts: w.group_counts,
            dop: w.dop,
            modification_prob: w.modification_prob,
        }
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            n_templates: self.workload.templates,
            queries_per_template: self.workload.queries_per_template,
            seed: self.workload.seed,
            bounds: self.template_bounds(),
        }
    }

    pub fn simulator_config(&self) -> SimulatorConfig {
        SimulatorConfig {
            chunk_rows: self.simulator.chunk_rows,
            background_low: self.simulator.background.0,
            background_high: self.simulator.background.1,
        }
    }

    pub fn cost_model(&self) -> CostGroundTruthModel {
        CostGroundTruthModel {
            penalty: self.simulator.penalty.into(),
            util_sens: self.simulator.util_sens.into(),
            noise_scale: self.simulator.noise_scale,
            ..CostGroundTruthModel::default_for_catalog()
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            hidden: self.model.hidden,
            gat_heads: self.model.gat_heads,
            ..ModelDims::default()
        }
    }

    pub fn train_config(&self, flags: AblationFlags) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            ocp_epochs: t.ocp_epochs,
            qpp_epochs: t.qpp_epochs,
            batch_size: t.batch_size,
            learning_rate_ocp: t.learning_rate_ocp,
            learning_rate_qpp: t.learning_rate_qpp,
            momentum: t.momentum,
            clip_norm: t.clip_norm,
            seed: t.seed,
            flags,
            held_out_templates: t.held_out_templates.clone(),
        }
    }
}
