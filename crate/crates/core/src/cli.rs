//! Command-line front end.
//!
//! Every subcommand validates its whole configuration before touching any
//! file. Failures print `error category=<category> message=<text>` to stderr
//! and exit with the category's code.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ablation::{AblationRow, Experiment, Variant};
use crate::error::{Error, Result};
use crate::eval::{block_errors, eval_chunks, perplexity, LanguageModel};
use crate::io::{
    load_calibration, load_model, read_file, read_tokens, save_model, save_quantized, write_file, write_tokens,
    QuantizedCheckpoint, TokenFile,
};
use crate::model::ModelParams;
use crate::outlier::OutlierConfig;
use crate::qmodel::{QuantSettings, QuantizedModel};
use crate::recon::{build_schedule, run_pipeline, DistanceKind, ReconSettings};
use crate::rounding::RegularizerSchedule;
use crate::toy::ToySettings;

#[derive(Debug, Parser)]
#[command(name = "cbq", version, about = "Cross-block reconstruction post-training quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy model and write it with calibration and evaluation streams.
    MakeToy(MakeToyArgs),
    /// Pre-process, initialise, optimise window by window and export.
    Quantize(QuantizeArgs),
    /// Perplexity of a floating-point or quantized checkpoint.
    Eval(EvalArgs),
    /// Run a grid of configurations over several seeds.
    Ablate(AblateArgs),
    /// Print the outlier reports of every weight and activation site as JSON.
    InspectOutliers(InspectArgs),
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    /// Floating-point checkpoint to write.
    #[arg(long)]
    pub out_model: PathBuf,
    /// Token file for calibration.
    #[arg(long)]
    pub out_calib: PathBuf,
    /// Token file for evaluation.
    #[arg(long)]
    pub out_eval: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub train_steps: usize,
    #[arg(long, default_value_t = 50_000)]
    pub calib_tokens: usize,
    #[arg(long, default_value_t = 4096)]
    pub eval_tokens: usize,
}

/// Quantizer, pre-processing and optimiser settings shared by `quantize`
/// and `ablate`.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 4)]
    pub bits_weight: u32,
    #[arg(long, default_value_t = 8)]
    pub bits_act: u32,
    /// Blocks per reconstruction window.
    #[arg(long, default_value_t = 2)]
    pub window_size: usize,
    /// Blocks shared by consecutive windows.
    #[arg(long, default_value_t = 1)]
    pub overlap: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Compensation rank; per-layer default min(d, k)/8 when omitted.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coarse outlier threshold multiplier.
    #[arg(long, default_value_t = 1.5)]
    pub lambda1: f64,
    /// Weight of the intra-set variance in the fine split.
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    /// Step-size learning rate, relative to each step tensor's mean.
    #[arg(long, default_value_t = 1e-2)]
    pub lr_step: f64,
    /// Learning rate of the compensation factors.
    #[arg(long, default_value_t = 0.1)]
    pub lr_factors: f64,
    /// Rounding regulariser weight.
    #[arg(long, default_value_t = 1e-3)]
    pub k_reg: f64,
    /// Calibration segments sampled from the calibration file.
    #[arg(long, default_value_t = 32)]
    pub calib_count: usize,
    /// Skip outlier pre-processing.
    #[arg(long)]
    pub no_cfp: bool,
    /// Plain floor rounding instead of learned compensation.
    #[arg(long)]
    pub no_lora_rounding: bool,
    /// Drop the homologous reconstruction term.
    #[arg(long)]
    pub no_homologous: bool,
    /// Drop the KL term of the distance.
    #[arg(long)]
    pub no_kl: bool,
}

impl RunArgs {
    pub fn quant_settings(&self) -> QuantSettings {
        QuantSettings {
            weight_bits: self.bits_weight,
            act_bits: self.bits_act,
            rank: self.rank,
            cfp: !self.no_cfp,
            lora_rounding: !self.no_lora_rounding,
            nearest_weights: false,
            outlier: OutlierConfig {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            seed: self.seed,
        }
    }

    pub fn recon_settings(&self) -> ReconSettings {
        ReconSettings {
            window_size: self.window_size,
            overlap: self.overlap,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_step: self.lr_step,
            lr_factors: self.lr_factors,
            regularizer: RegularizerSchedule {
                k_reg: self.k_reg,
                ..RegularizerSchedule::default()
            },
            distance: if self.no_kl { DistanceKind::L2 } else { DistanceKind::L2Kl },
            homologous: !self.no_homologous,
            seed: self.seed,
        }
    }

    /// Checks everything that does not need the model; the window size is
    /// checked against the block count once the model is loaded.
    pub fn validate(&self) -> Result<()> {
        self.quant_settings().validate()?;
        if self.calib_count == 0 {
            return Err(Error::config("calibration count must be at least 1"));
        }
        if self.rank == Some(0) {
            return Err(Error::config("rank must be at least 1"));
        }
        self.recon_settings().validate(self.window_size)
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Floating-point checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration token file.
    #[arg(long)]
    pub calib: PathBuf,
    /// Quantized checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log; defaults to the checkpoint path with `.metrics` appended.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Optional CSV of per-iteration losses for plotting.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Floating-point or quantized checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation token file.
    #[arg(long)]
    pub eval: PathBuf,
    /// Floating-point reference for per-block reconstruction errors.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    /// Seeds every valid configuration is run with.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub overlaps: Vec<usize>,
    /// Distances to compare: `l2+kl`, `l2`, `kl`.
    #[arg(long, value_delimiter = ',', default_value = "l2+kl")]
    pub losses: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "on")]
    pub homologous: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "on")]
    pub cfp: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "on")]
    pub lora: Vec<String>,
    /// Tokens of the evaluation file used for scoring.
    #[arg(long, default_value_t = 4096)]
    pub eval_tokens: usize,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub calib_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.5)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    match run(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error category={} message={:?}", e.category(), e.to_string());
            e.category().exit_code()
        }
    }
}

pub fn run(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::MakeToy(a) => make_toy(a, out),
        Command::Quantize(a) => quantize(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::InspectOutliers(a) => inspect_outliers(a, out),
    }
}

fn make_toy(a: &MakeToyArgs, out: &mut dyn Write) -> Result<()> {
    if a.train_steps == 0 || a.calib_tokens == 0 || a.eval_tokens == 0 {
        return Err(Error::config("training steps and token counts must be positive"));
    }
    let mut toy = ToySettings::default();
    toy.train.steps = a.train_steps;
    let model = toy.build()?;
    save_model(&a.out_model, &model)?;
    let vocab = toy.config.vocab as u32;
    write_tokens(
        &a.out_calib,
        &TokenFile {
            vocab,
            tokens: toy.calibration_stream(a.calib_tokens)?,
        },
    )?;
    write_tokens(
        &a.out_eval,
        &TokenFile {
            vocab,
            tokens: toy.eval_stream(a.eval_tokens)?,
        },
    )?;
    writeln!(out, "model={}", a.out_model.display())?;
    writeln!(out, "calib={}", a.out_calib.display())?;
    writeln!(out, "eval={}", a.out_eval.display())?;
    writeln!(out, "parameters={}", model.parameter_count())?;
    Ok(())
}

fn check_vocab(file: &TokenFile, model: &ModelParams, path: &Path) -> Result<()> {
    if file.vocab as usize != model.config.vocab {
        return Err(Error::data(format!(
            "{} has vocabulary {} but the model expects {}",
            path.display(),
            file.vocab,
            model.config.vocab
        )));
    }
    Ok(())
}

fn quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    a.run.validate()?;
    let fp = load_model(&a.model)?;
    let recon = a.run.recon_settings();
    recon.validate(fp.config.blocks)?;
    let calib = load_calibration(&a.calib, fp.config.seq_len, a.run.calib_count, a.run.seed)?;
    if calib.vocab != fp.config.vocab {
        return Err(Error::data(format!(
            "calibration vocabulary {} does not match the model's {}",
            calib.vocab, fp.config.vocab
        )));
    }
    let mut qm = QuantizedModel::prepare(&fp, &calib.sequences, &a.run.quant_settings())?;
    let report = run_pipeline(&mut qm, &calib.sequences, &recon)?;
    let ckpt = qm.export()?;
    save_quantized(&a.out, &ckpt)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics");
        PathBuf::from(p)
    });
    write_file(&metrics, report.metrics_log())?;
    if let Some(t) = &a.trajectory {
        write_file(t, report.trajectory_csv())?;
    }
    writeln!(out, "checkpoint={}", a.out.display())?;
    writeln!(out, "metrics={}", metrics.display())?;
    for w in &report.windows {
        writeln!(
            out,
            "window={} initial_loss={} final_loss={}",
            w.window, w.initial_loss, w.final_loss
        )?;
    }
    Ok(())
}

enum AnyModel {
    Fp(ModelParams),
    Quantized(QuantizedCheckpoint),
}

fn load_any(path: &Path) -> Result<AnyModel> {
    let bytes = read_file(path)?;
    match bytes.get(..4) {
        Some(b"CBQQ") => Ok(AnyModel::Quantized(QuantizedCheckpoint::from_bytes(&bytes)?)),
        _ => Ok(AnyModel::Fp(crate::io::checkpoint::model_from_bytes(&bytes)?)),
    }
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_any(&a.checkpoint)?;
    let reference = a.reference.as_deref().map(load_model).transpose()?;
    let tokens = read_tokens(&a.eval)?;
    let cfg = model.config();
    let kind = match &model {
        AnyModel::Fp(_) => "float",
        AnyModel::Quantized(_) => "quantized",
    };
    if tokens.vocab as usize != cfg.vocab {
        return Err(Error::data(format!(
            "evaluation vocabulary {} does not match the model's {}",
            tokens.vocab, cfg.vocab
        )));
    }
    let ppl = perplexity(&model, &tokens.tokens)?;
    writeln!(out, "checkpoint={}", a.checkpoint.display())?;
    writeln!(out, "kind={kind}")?;
    writeln!(out, "tokens={}", tokens.tokens.len())?;
    writeln!(out, "perplexity={ppl}")?;
    if let (Some(r), AnyModel::Quantized(q)) = (&reference, &model) {
        if r.config != q.config {
            return Err(Error::data("reference model configuration differs from the checkpoint"));
        }
        let chunks = eval_chunks(&tokens.tokens, cfg.seq_len);
        for (b, e) in block_errors(r, q, &chunks, DistanceKind::L2Kl)?.iter().enumerate() {
            writeln!(out, "block={} recon_error={e}", b + 1)?;
        }
    }
    Ok(())
}

fn parse_switch(values: &[String], flag: &str) -> Result<Vec<bool>> {
    values
        .iter()
        .map(|v| match v.as_str() {
            "on" => Ok(true),
            "off" => Ok(false),
            _ => Err(Error::config(format!("--{flag} takes on/off, got {v:?}"))),
        })
        .collect()
}

fn parse_distance(v: &str) -> Result<DistanceKind> {
    match v {
        "l2+kl" => Ok(DistanceKind::L2Kl),
        "l2" => Ok(DistanceKind::L2),
        "kl" => Ok(DistanceKind::Kl),
        _ => Err(Error::config(format!("unknown distance {v:?}; use l2+kl, l2 or kl"))),
    }
}

/// A grid cell: either a runnable variant or the reason it was rejected.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub window: usize,
    pub overlap: usize,
    pub loss: String,
    pub homologous: bool,
    pub cfp: bool,
    pub lora: bool,
    pub rejected: Option<String>,
}

impl GridCell {
    fn key(&self) -> String {
        format!(
            "window={} overlap={} loss={} homologous={} cfp={} lora={}",
            self.window,
            self.overlap,
            self.loss,
            on_off(self.homologous),
            on_off(self.cfp),
            on_off(self.lora)
        )
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Cartesian product of the grid axes, each cell checked against the
/// schedule rules for a model with `blocks` blocks.
pub fn ablation_grid(a: &AblateArgs, blocks: usize) -> Result<Vec<GridCell>> {
    let losses = a.losses.iter().map(|l| parse_distance(l).map(|_| l.clone())).collect::<Result<Vec<_>>>()?;
    let homologous = parse_switch(&a.homologous, "homologous")?;
    let cfp = parse_switch(&a.cfp, "cfp")?;
    let lora = parse_switch(&a.lora, "lora")?;
    let mut cells = Vec::new();
    for &window in &a.windows {
        for &overlap in &a.overlaps {
            for loss in &losses {
                for &h in &homologous {
                    for &c in &cfp {
                        for &l in &lora {
                            cells.push(GridCell {
                                window,
                                overlap,
                                loss: loss.clone(),
                                homologous: h,
                                cfp: c,
                                lora: l,
                                rejected: build_schedule(blocks, window, overlap).err().map(|e| e.to_string()),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Serialize)]
struct AblationTable<'a> {
    cells: &'a [GridCell],
    rows: &'a [AblationRow],
}

fn ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    a.run.validate_grid()?;
    if a.seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let fp = load_model(&a.model)?;
    let cells = ablation_grid(a, fp.config.blocks)?;
    let calib = read_tokens(&a.calib)?;
    let eval = read_tokens(&a.eval)?;
    check_vocab(&calib, &fp, &a.calib)?;
    check_vocab(&eval, &fp, &a.eval)?;
    let n_eval = a.eval_tokens.min(eval.tokens.len());
    let exp = Experiment {
        eval_chunks: eval_chunks(&eval.tokens[..n_eval], fp.config.seq_len),
        fp,
        calib_stream: calib.tokens,
        calib_count: a.run.calib_count,
    };
    let seeds = a.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    writeln!(
        out,
        "# bits_weight={} bits_act={} seeds={seeds}",
        a.run.bits_weight, a.run.bits_act
    )?;
    let mut rows = Vec::new();
    for cell in &cells {
        if let Some(reason) = &cell.rejected {
            writeln!(out, "rejected {} reason={reason:?}", cell.key())?;
            continue;
        }
        let mut run = a.run.clone();
        run.window_size = cell.window;
        run.overlap = cell.overlap;
        run.no_kl = false;
        run.no_homologous = !cell.homologous;
        run.no_cfp = !cell.cfp;
        run.no_lora_rounding = !cell.lora;
        let mut recon = run.recon_settings();
        recon.distance = parse_distance(&cell.loss)?;
        let variant = Variant::new(cell.key(), run.quant_settings(), Some(recon));
        let row = exp.row(&variant, &a.seeds)?;
        let fmt = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        writeln!(
            out,
            "row {} seeds={seeds} median_recon_error={} median_output_kl={} median_perplexity={} recon_error={} output_kl={} perplexity={}",
            cell.key(),
            row.median_recon_error,
            row.median_output_kl,
            row.median_perplexity,
            fmt(&row.recon_error),
            fmt(&row.output_kl),
            fmt(&row.perplexity),
        )?;
        rows.push(row);
    }
    if let Some(path) = &a.json {
        let table = AblationTable { cells: &cells, rows: &rows };
        write_file(path, serde_json::to_string_pretty(&table).map_err(|e| Error::data(e.to_string()))?)?;
    }
    Ok(())
}

impl RunArgs {
    /// Validation for `ablate`, where window and overlap come from the grid.
    fn validate_grid(&self) -> Result<()> {
        let mut base = self.clone();
        base.window_size = 2;
        base.overlap = 0;
        base.validate()
    }
}

#[derive(Debug, Serialize)]
struct SiteReport<'a> {
    block: usize,
    tensor: String,
    report: &'a crate::outlier::OutlierReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    scales: Option<&'a [f64]>,
}

fn inspect_outliers(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = OutlierConfig {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
    };
    cfg.validate()?;
    if a.calib_count == 0 {
        return Err(Error::config("calibration count must be at least 1"));
    }
    let fp = load_model(&a.model)?;
    let calib = load_calibration(&a.calib, fp.config.seq_len, a.calib_count, a.seed)?;
    let settings = QuantSettings {
        lora_rounding: false,
        outlier: cfg,
        ..QuantSettings::cbq(8, 8)
    };
    let qm = QuantizedModel::prepare(&fp, &calib.sequences, &settings)?;
    let mut entries = Vec::new();
    for (b, block) in qm.blocks.iter().enumerate() {
        for (l, lin) in crate::model::Linear::ALL.iter().zip(&block.linears) {
            if let Some(r) = &lin.report {
                entries.push(SiteReport {
                    block: b + 1,
                    tensor: format!("weight.{}", l.name()),
                    report: r,
                    scales: None,
                });
            }
        }
        for (s, site) in crate::model::Site::ALL.iter().zip(&block.sites) {
            if let Some(r) = &site.report {
                entries.push(SiteReport {
                    block: b + 1,
                    tensor: format!("activation.{}", s.name()),
                    report: r,
                    scales: Some(&site.scales.s),
                });
            }
        }
    }
    let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::data(e.to_string()))?;
    writeln!(out, "{json}")?;
    Ok(())
}

impl LanguageModel for AnyModel {
    fn config(&self) -> crate::model::ModelConfig {
        match self {
            AnyModel::Fp(m) => m.config,
            AnyModel::Quantized(q) => q.config,
        }
    }

    fn logits(&self, batch: &[Vec<usize>]) -> Result<crate::tensor::Tensor> {
        match self {
            AnyModel::Fp(m) => m.logits(batch),
            AnyModel::Quantized(q) => q.logits(batch),
        }
    }

    fn final_hidden(&self, batch: &[Vec<usize>]) -> Result<crate::tensor::Tensor> {
        match self {
            AnyModel::Fp(m) => m.final_hidden(batch),
            AnyModel::Quantized(q) => q.final_hidden(batch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("cbq").chain(args.iter().copied())).unwrap().command
    }

    #[test]
    fn quantize_defaults_match_the_library() {
        let Command::Quantize(q) = parse(&["quantize", "--model", "m", "--calib", "c", "--out", "o"]) else {
            panic!("wrong subcommand");
        };
        assert_eq!(q.run.quant_settings(), QuantSettings::cbq(4, 8));
        assert_eq!(q.run.recon_settings(), ReconSettings::default());
        assert!(q.run.validate().is_ok());
    }

    #[test]
    fn switches_map_to_settings() {
        let Command::Quantize(q) = parse(&[
            "quantize", "--model", "m", "--calib", "c", "--out", "o", "--no-cfp", "--no-kl", "--no-homologous",
            "--window-size", "3", "--overlap", "2",
        ]) else {
            panic!("wrong subcommand");
        };
        let (qs, rs) = (q.run.quant_settings(), q.run.recon_settings());
        assert!(!qs.cfp && qs.lora_rounding);
        assert_eq!(rs.distance, DistanceKind::L2);
        assert!(!rs.homologous);
        assert_eq!((rs.window_size, rs.overlap), (3, 2));
    }

    #[test]
    fn overlap_must_be_below_window() {
        let Command::Quantize(q) = parse(&["quantize", "--model", "m", "--calib", "c", "--out", "o", "--overlap", "2"])
        else {
            panic!("wrong subcommand");
        };
        assert_eq!(q.run.validate().unwrap_err().category().exit_code(), 2);
    }

    #[test]
    fn grid_rejects_bad_switches_and_schedules() {
        let Command::Ablate(a) = parse(&[
            "ablate", "--model", "m", "--calib", "c", "--eval", "e", "--windows", "1,2", "--overlaps", "0,1", "--cfp",
            "on,off",
        ]) else {
            panic!("wrong subcommand");
        };
        let cells = ablation_grid(&a, 6).unwrap();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells.iter().filter(|c| c.rejected.is_some()).count(), 2);
        assert!(cells.iter().all(|c| c.rejected.is_none() || c.window == 1 && c.overlap == 1));

        assert!(parse_switch(&["maybe".to_string()], "cfp").is_err());
        assert!(parse_distance("l1").is_err());
    }
}
