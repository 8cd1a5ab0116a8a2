//! Seeded quantization runs and comparison grids.
//!
//! Every run samples its own calibration segments, quantizes a fixed
//! floating-point model and scores the exported checkpoint on held-out
//! chunks. The seed drives calibration sampling, compensation initialisation
//! and batch order.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{output_kl, perplexity_of_chunks, reconstruction_error};
use crate::io::{sample_segments, QuantizedCheckpoint};
use crate::model::ModelParams;
use crate::qmodel::{QuantSettings, QuantizedModel};
use crate::recon::{run_pipeline, DistanceKind, PipelineReport, ReconSettings};

/// One quantization recipe. `recon = None` skips optimisation entirely.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub quant: QuantSettings,
    pub recon: Option<ReconSettings>,
}

impl Variant {
    pub fn new(name: impl Into<String>, quant: QuantSettings, recon: Option<ReconSettings>) -> Self {
        Variant {
            name: name.into(),
            quant,
            recon,
        }
    }
}

/// Fixed model and data shared by all runs of a comparison.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub fp: ModelParams,
    /// Stream calibration segments are sampled from.
    pub calib_stream: Vec<u32>,
    pub calib_count: usize,
    pub eval_chunks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub perplexity: f64,
    /// Reconstruction distance (L2 plus KL) between the floating-point and
    /// quantized last-block outputs on the evaluation chunks.
    pub recon_error: f64,
    /// Mean per-token KL from the floating-point to the quantized
    /// next-token distribution on the evaluation chunks.
    pub output_kl: f64,
    pub report: Option<PipelineReport>,
    pub model: QuantizedModel,
    pub checkpoint: QuantizedCheckpoint,
}

impl RunOutcome {
    /// Mean final window loss, if the run optimised anything.
    pub fn final_loss(&self) -> Option<f64> {
        self.report.as_ref().map(|r| {
            let n = r.windows.len() as f64;
            r.windows.iter().map(|w| w.final_loss).sum::<f64>() / n
        })
    }
}

impl Experiment {
    pub fn calibration(&self, seed: u64) -> Result<Vec<Vec<usize>>> {
        let calib = sample_segments(&self.calib_stream, self.fp.config.seq_len, self.calib_count, seed)?;
        if calib.is_empty() {
            return Err(Error::data("calibration set is empty"));
        }
        Ok(calib)
    }

    pub fn run(&self, variant: &Variant, seed: u64) -> Result<RunOutcome> {
        let calib = self.calibration(seed)?;
        let quant = QuantSettings {
            seed,
            ..variant.quant
        };
        let mut model = QuantizedModel::prepare(&self.fp, &calib, &quant)?;
        let report = match &variant.recon {
            Some(r) => Some(run_pipeline(&mut model, &calib, &ReconSettings { seed, ..*r })?),
            None => None,
        };
        let checkpoint = model.export()?;
        Ok(RunOutcome {
            seed,
            perplexity: perplexity_of_chunks(&checkpoint, &self.eval_chunks)?,
            recon_error: reconstruction_error(&self.fp, &checkpoint, &self.eval_chunks, DistanceKind::L2Kl)?,
            output_kl: output_kl(&self.fp, &checkpoint, &self.eval_chunks)?,
            report,
            model,
            checkpoint,
        })
    }

    pub fn row(&self, variant: &Variant, seeds: &[u64]) -> Result<AblationRow> {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            runs.push(self.run(variant, seed)?);
        }
        Ok(AblationRow::from_runs(&variant.name, &runs))
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub recon_error: Vec<f64>,
    pub output_kl: Vec<f64>,
    pub perplexity: Vec<f64>,
    pub final_loss: Vec<Option<f64>>,
    pub median_recon_error: f64,
    pub median_output_kl: f64,
    pub median_perplexity: f64,
}

impl AblationRow {
    pub fn from_runs(name: &str, runs: &[RunOutcome]) -> Self {
        let kl: Vec<f64> = runs.iter().map(|r| r.output_kl).collect();
        let ppl: Vec<f64> = runs.iter().map(|r| r.perplexity).collect();
        let rec: Vec<f64> = runs.iter().map(|r| r.recon_error).collect();
        AblationRow {
            name: name.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            median_recon_error: median(&rec),
            recon_error: rec,
            median_output_kl: median(&kl),
            median_perplexity: median(&ppl),
            output_kl: kl,
            perplexity: ppl,
            final_loss: runs.iter().map(RunOutcome::final_loss).collect(),
        }
    }
}
