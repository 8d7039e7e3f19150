//! Command-line harness. Every command takes an optional JSON config, applies
//! flag overrides, and writes its resolved config and a digest manifest next
//! to its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::layers::{
    covariance_update_alignment, decoder_layer_inputs, layer_correlation, CovarianceUpdateAlignment,
};
use crate::analysis::pca::{pca_pc1_map, ProjectionSpec};
use crate::analysis::spectral::energy_fraction;
use crate::error::{Error, Result};
use crate::experiments::{
    default_projection_labels, efficacy, held_out_set, median, pretraining_population, projection_ablation,
    rank_sweep, SceneConfig, DEFAULT_RANKS, HELD_OUT_SEED,
};
use crate::io::{save_pfm, sha256_hex, write_csv, write_csv_with_header, write_json, write_manifest};
use crate::model::{
    aligned_rmse_report, load_weights, pretrain, save_weights, write_weights, DepthModel, LayerId, ModelConfig,
    PretrainConfig, RmseReport,
};
use crate::tensor::Tensor;
use crate::theory::{self, GridCell, TheoryReport};
use crate::tto::{adapt, scope_sweep, sensor_truth, zero_shot_baseline, AdaptConfig, Scope};
use crate::world::{SceneKind, SparseObservation};

/// Exit code for invalid input, configuration or I/O.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for numerical failures, including failed verification.
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ltto", version, about = "Low-rank test-time optimization for sparse depth completion")]
pub struct Cli {
    /// JSON config for the chosen command; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a scene and sample sparse measurements.
    Generate(GenerateArgs),
    /// Train the frozen model on synthetic scenes.
    Pretrain(PretrainArgs),
    /// Adapt the decoder to one scene's sparse measurements.
    Adapt(AdaptArgs),
    /// Layer and spectral analyses of a finished adaptation, plus ablations.
    Analyze(AnalyzeArgs),
    /// Numerical checks of the subspace rank bounds and local linearity.
    Verify(VerifyArgs),
    /// Compare adaptation scopes over held-out scenes.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Default)]
pub struct SceneArgs {
    /// planes, spheres, steps or mixed.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of sparse measurements.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub sensor_scale: Option<f64>,
    #[arg(long)]
    pub sensor_shift: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

impl SceneArgs {
    fn apply(&self, c: &mut SceneConfig) -> Result<()> {
        if let Some(k) = &self.kind {
            c.kind = k.parse().map_err(|_| Error::invalid(format!("kind: unknown scene kind `{k}`")))?;
        }
        set(&mut c.height, self.height);
        set(&mut c.width, self.width);
        set(&mut c.points, self.points);
        set(&mut c.sensor_scale, self.sensor_scale);
        set(&mut c.sensor_shift, self.sensor_shift);
        set(&mut c.noise, self.noise);
        Ok(())
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub seed: u64,
    pub scene: SceneConfig,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Number of training scenes.
    #[arg(long)]
    pub population: Option<usize>,
    /// Number of held-out scenes for the report.
    #[arg(long)]
    pub validation: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainRunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub training: PretrainConfig,
    pub population: usize,
    pub validation: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for PretrainRunConfig {
    fn default() -> Self {
        PretrainRunConfig {
            seed: 0,
            model: ModelConfig::default(),
            training: PretrainConfig::default(),
            population: 200,
            validation: 20,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained weights from `pretrain`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Treat the fitted scale and shift as constants in the gradient.
    #[arg(long)]
    pub detach: bool,
    /// Re-encode the image every iteration.
    #[arg(long)]
    pub no_cache: bool,
    /// Feature projection such as `top_8`, `orth_8`, `rand_16`.
    #[arg(long)]
    pub projection: Option<String>,
    /// Comma-separated point counts; one metrics row per count.
    #[arg(long, value_delimiter = ',')]
    pub sweep_sparsity: Option<Vec<usize>>,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptRunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub adapt: AdaptConfig,
    pub sweep_sparsity: Vec<usize>,
    /// Digest of the weights file, filled in at run time.
    pub model_sha256: String,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory of a finished `adapt` run.
    #[arg(long)]
    pub trace: PathBuf,
    /// Held-out scenes per ablation setting.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Subspace dimension of the alignment report.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub projections: Option<Vec<String>>,
    /// Skip the projection and rank ablations.
    #[arg(long)]
    pub no_ablations: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub seed: u64,
    pub scenes: usize,
    pub k: usize,
    pub ranks: Vec<usize>,
    pub projections: Vec<String>,
    pub ablations: bool,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            seed: 0,
            scenes: 20,
            k: 8,
            ranks: DEFAULT_RANKS.to_vec(),
            projections: default_projection_labels(),
            ablations: true,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict the grid, e.g. `d=16 r=1`; keys d, r, m, t.
    #[arg(long)]
    pub grid: Option<String>,
    /// Scale of injected off-subspace residuals.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Assert the exact rank bound even with residuals.
    #[arg(long)]
    pub strict: bool,
    /// Weights for the model checks; a fresh model is used otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scenes for the linearity probe.
    #[arg(long)]
    pub probe_scenes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub grid: Option<String>,
    pub eps: f64,
    pub strict: bool,
    pub probe_scenes: usize,
    pub model_sha256: Option<String>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            grid: None,
            eps: 0.0,
            strict: false,
            probe_scenes: 10,
            model_sha256: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub scopes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub iters: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seed: u64,
    pub scenes: usize,
    pub scene: SceneConfig,
    pub scopes: Vec<Scope>,
    pub iterations: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub model_sha256: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed: 0,
            scenes: 8,
            scene: SceneConfig::default(),
            scopes: Scope::ALL.to_vec(),
            iterations: vec![40],
            learning_rates: vec![0.01],
            model_sha256: String::new(),
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => EXIT_NUMERICAL,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. }
        | Error::NonFinite(_)
        | Error::Divergence { .. }
        | Error::DegeneratePrediction { .. }
        | Error::NonSymmetric(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let bytes = fs::read(p)?;
            serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))
        }
        None => Ok(T::default()),
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn finish(out: &Path, config: &impl Serialize) -> Result<()> {
    write_json(&out.join("config.json"), config)?;
    write_manifest(out)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(DepthModel, String)> {
    let bytes = fs::read(path).map_err(|e| Error::invalid(format!("model {}: {e}", path.display())))?;
    let model = load_weights(path)?;
    Ok((model, sha256_hex(&bytes)))
}

/// Returns `Ok(false)` when a verification ran but did not pass.
fn dispatch(cli: &Cli) -> Result<bool> {
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Generate(a) => {
            let mut c: GenerateConfig = load_config(cfg)?;
            set(&mut c.seed, cli.seed);
            a.scene.apply(&mut c.scene)?;
            cmd_generate(&c, &a.out)?;
        }
        Command::Pretrain(a) => {
            let mut c: PretrainRunConfig = load_config(cfg)?;
            set(&mut c.seed, cli.seed);
            c.training.seed = c.seed;
            set(&mut c.training.epochs, a.epochs);
            set(&mut c.training.learning_rate, a.lr);
            set(&mut c.training.batch_size, a.batch_size);
            set(&mut c.population, a.population);
            set(&mut c.validation, a.validation);
            cmd_pretrain(&c, &a.out)?;
        }
        Command::Adapt(a) => {
            let mut c: AdaptRunConfig = load_config(cfg)?;
            set(&mut c.seed, cli.seed);
            c.adapt.seed = c.seed;
            a.scene.apply(&mut c.scene)?;
            if let Some(s) = &a.scope {
                c.adapt.scope = s.parse().map_err(|_| Error::invalid(format!("scope: unknown scope `{s}`")))?;
            }
            set(&mut c.adapt.iterations, a.iters);
            set(&mut c.adapt.learning_rate, a.lr);
            set(&mut c.adapt.rank, a.rank);
            if a.alpha.is_some() {
                c.adapt.alpha = a.alpha;
            }
            set(&mut c.adapt.momentum, a.momentum);
            c.adapt.detach_alignment |= a.detach;
            c.adapt.use_cache &= !a.no_cache;
            if let Some(p) = &a.projection {
                let spec: ProjectionSpec = p.parse().map_err(|e| Error::invalid(format!("projection: {e}")))?;
                c.adapt.projection = Some(spec).filter(|s| s.label() != "none");
            }
            set(&mut c.sweep_sparsity, a.sweep_sparsity.clone());
            cmd_adapt(&mut c, &a.model, &a.out)?;
        }
        Command::Analyze(a) => {
            let mut c: AnalyzeConfig = load_config(cfg)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.scenes, a.scenes);
            set(&mut c.k, a.k);
            set(&mut c.ranks, a.ranks.clone());
            set(&mut c.projections, a.projections.clone());
            c.ablations &= !a.no_ablations;
            cmd_analyze(&c, &a.model, &a.trace, &a.out)?;
        }
        Command::Verify(a) => {
            let mut c: VerifyConfig = load_config(cfg)?;
            set(&mut c.seed, cli.seed);
            if a.grid.is_some() {
                c.grid = a.grid.clone();
            }
            set(&mut c.eps, a.eps);
            c.strict |= a.strict;
            set(&mut c.probe_scenes, a.probe_scenes);
            return cmd_verify(&mut c, a.model.as_deref(), &a.out);
        }
        Command::Sweep(a) => {
            let mut c: SweepConfig = load_config(cfg)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.scenes, a.scenes);
            if let Some(s) = &a.scopes {
                c.scopes = s
                    .iter()
                    .map(|x| x.parse().map_err(|_| Error::invalid(format!("scopes: unknown scope `{x}`"))))
                    .collect::<Result<_>>()?;
            }
            set(&mut c.iterations, a.iters.clone());
            set(&mut c.learning_rates, a.lrs.clone());
            cmd_sweep(&mut c, &a.model, &a.out)?;
        }
    }
    Ok(true)
}

#[derive(Serialize)]
struct ObservationRow {
    row: usize,
    col: usize,
    value: f64,
}

#[derive(Serialize)]
struct SceneInfo {
    kind: SceneKind,
    seed: u64,
    height: usize,
    width: usize,
    tone_gamma: f64,
    sensor_scale: f64,
    sensor_shift: f64,
    noise_sigma: f64,
    points: usize,
}

fn observation_rows(obs: &SparseObservation) -> Vec<ObservationRow> {
    obs.omega
        .iter()
        .zip(&obs.values)
        .map(|(&(row, col), &value)| ObservationRow { row, col, value })
        .collect()
}

pub fn cmd_generate(c: &GenerateConfig, out: &Path) -> Result<()> {
    let (scene, obs) = c.scene.sample(c.seed)?;
    prepare_out(out)?;
    save_pfm(&scene.image, &out.join("image.pfm"))?;
    save_pfm(&scene.depth, &out.join("depth.pfm"))?;
    write_csv(&out.join("observations.csv"), &observation_rows(&obs))?;
    write_json(
        &out.join("scene.json"),
        &SceneInfo {
            kind: scene.kind,
            seed: c.seed,
            height: scene.height(),
            width: scene.width(),
            tone_gamma: scene.tone_gamma,
            sensor_scale: obs.sensor_scale,
            sensor_shift: obs.sensor_shift,
            noise_sigma: obs.noise_sigma,
            points: obs.len(),
        },
    )?;
    finish(out, c)
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
}

#[derive(Serialize)]
struct PretrainSummary {
    report: RmseReport,
    final_loss: f64,
    model_sha256: String,
}

pub fn cmd_pretrain(c: &PretrainRunConfig, out: &Path) -> Result<()> {
    let population = pretraining_population(c.population, c.height, c.width)?;
    let (model, report) = pretrain(c.model.clone(), &population, &c.training)?;
    let scene_cfg = SceneConfig {
        height: c.height,
        width: c.width,
        ..SceneConfig::default()
    };
    let validation: Vec<_> = held_out_set(&scene_cfg, HELD_OUT_SEED, c.validation)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let rmse = aligned_rmse_report(&model, &validation)?;
    prepare_out(out)?;
    save_weights(&model, &out.join("model.ltto"))?;
    let mut bytes = Vec::new();
    write_weights(&model, &mut bytes)?;
    let rows: Vec<_> = report
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| EpochRow { epoch, loss })
        .collect();
    write_csv_with_header(&out.join("loss.csv"), &["epoch", "loss"], &rows)?;
    write_json(
        &out.join("report.json"),
        &PretrainSummary {
            report: rmse,
            final_loss: report.epoch_loss.last().copied().unwrap_or(f64::NAN),
            model_sha256: sha256_hex(&bytes),
        },
    )?;
    finish(out, c)
}

pub const TRACE_HEADER: [&str; 5] = ["t", "loss", "a", "b", "fallback"];

/// Dense `ΔW` of one layer in `deltas.json`.
#[derive(Serialize, Deserialize)]
struct StoredDelta {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize)]
struct AdaptMetrics {
    baseline_mae: f64,
    baseline_rmse: f64,
    mae: f64,
    rmse: f64,
    scale: f64,
    shift: f64,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    encoder_calls: u64,
    decode_flops: u64,
    encoder_flops: u64,
    forward_flops: u64,
    backward_flops: u64,
}

#[derive(Serialize)]
struct SparsityRow {
    points: usize,
    baseline_mae: f64,
    baseline_rmse: f64,
    mae: f64,
    rmse: f64,
    initial_loss: f64,
    final_loss: f64,
}

pub fn cmd_adapt(c: &mut AdaptRunConfig, model_path: &Path, out: &Path) -> Result<()> {
    c.adapt.validate()?;
    let (model, digest) = load_model(model_path)?;
    c.model_sha256 = digest;
    let (scene, obs) = c.scene.sample(c.seed)?;
    let truth = sensor_truth(&scene, &obs);
    let base = zero_shot_baseline(&model, &scene.image, &obs)?.evaluate(&truth)?;
    let mut r = adapt(&model, &scene.image, &obs, &c.adapt)?;
    let m = r.evaluate(&truth)?;

    prepare_out(out)?;
    save_pfm(&r.aligned, &out.join("aligned.pfm"))?;
    let err = r.aligned.sub(&truth)?.map(f64::abs);
    save_pfm(&err, &out.join("error.pfm"))?;
    write_csv_with_header(&out.join("trace.csv"), &TRACE_HEADER, &r.trace.records)?;
    let deltas: BTreeMap<String, StoredDelta> = r
        .trace
        .final_deltas
        .iter()
        .map(|(id, d)| {
            (
                id.to_string(),
                StoredDelta {
                    rows: d.rows(),
                    cols: d.cols(),
                    data: d.data().to_vec(),
                },
            )
        })
        .collect();
    write_json(&out.join("deltas.json"), &deltas)?;
    let recs = &r.trace.records;
    write_json(
        &out.join("metrics.json"),
        &AdaptMetrics {
            baseline_mae: base.mae,
            baseline_rmse: base.rmse,
            mae: m.mae,
            rmse: m.rmse,
            scale: r.scale_shift.a,
            shift: r.scale_shift.b,
            initial_loss: recs.first().map(|x| x.loss),
            final_loss: recs.last().map(|x| x.loss),
            encoder_calls: r.trace.encoder_call_count,
            decode_flops: r.trace.decode_flops,
            encoder_flops: r.trace.encoder_flops,
            forward_flops: r.trace.flops.forward,
            backward_flops: r.trace.flops.backward,
        },
    )?;

    if !c.sweep_sparsity.is_empty() {
        let mut rows = Vec::new();
        for &points in &c.sweep_sparsity {
            let sc = SceneConfig { points, ..c.scene.clone() };
            let (scene, obs) = sc.sample(c.seed)?;
            let truth = sensor_truth(&scene, &obs);
            let base = zero_shot_baseline(&model, &scene.image, &obs)?.evaluate(&truth)?;
            let mut r = adapt(&model, &scene.image, &obs, &c.adapt)?;
            let m = r.evaluate(&truth)?;
            let recs = &r.trace.records;
            rows.push(SparsityRow {
                points,
                baseline_mae: base.mae,
                baseline_rmse: base.rmse,
                mae: m.mae,
                rmse: m.rmse,
                initial_loss: recs.first().map_or(f64::NAN, |x| x.loss),
                final_loss: recs.last().map_or(f64::NAN, |x| x.loss),
            });
        }
        write_csv(&out.join("sparsity.csv"), &rows)?;
    }
    finish(out, c)
}

#[derive(Serialize)]
struct EnergyRow {
    layer: String,
    rank: usize,
    energy: f64,
}

#[derive(Serialize)]
struct AlignmentRow {
    layer: String,
    k: usize,
    feature_energy: f64,
    update_energy: f64,
    affinity: f64,
}

#[derive(Serialize)]
struct AnalyzeIndex {
    reports: Vec<String>,
    pc1_maps: Vec<String>,
}

fn read_trace(dir: &Path) -> Result<(AdaptRunConfig, BTreeMap<LayerId, Tensor>)> {
    let cfg_path = dir.join("config.json");
    if !cfg_path.is_file() {
        return Err(Error::invalid(format!("trace: {} holds no adaptation run", dir.display())));
    }
    let cfg: AdaptRunConfig = crate::io::read_json(&cfg_path)?;
    let stored: BTreeMap<String, StoredDelta> = crate::io::read_json(&dir.join("deltas.json"))?;
    let mut deltas = BTreeMap::new();
    for (k, d) in stored {
        deltas.insert(k.parse()?, Tensor::matrix(d.rows, d.cols, d.data)?);
    }
    Ok((cfg, deltas))
}

pub fn cmd_analyze(c: &AnalyzeConfig, model_path: &Path, trace_dir: &Path, out: &Path) -> Result<()> {
    let (run, deltas) = read_trace(trace_dir)?;
    let (model, digest) = load_model(model_path)?;
    if !run.model_sha256.is_empty() && run.model_sha256 != digest {
        return Err(Error::invalid("model: weights differ from those of the adaptation run"));
    }
    let (scene, _) = run.scene.sample(run.seed)?;
    let features = model.encode(&scene.image)?;
    prepare_out(out)?;
    let mut reports = Vec::new();
    let mut pc1_maps = Vec::new();

    write_csv(&out.join("layers.csv"), &layer_correlation(&model, &scene.image)?)?;
    reports.push("layers.csv".to_string());

    fs::create_dir_all(out.join("pc1"))?;
    let (_, acts) = model.decode_traced(&features, None, None)?;
    for (i, t) in acts.stage_out.iter().enumerate() {
        if let Ok(p) = pca_pc1_map(t, acts.stage_grid[i], 1) {
            let name = format!("pc1/{}.pfm", LayerId::Decoder(i));
            save_pfm(&p.map, &out.join(&name))?;
            pc1_maps.push(name);
        }
    }

    let mut energy = Vec::new();
    for (id, d) in &deltas {
        for rank in 1..=d.rows().min(d.cols()).min(16) {
            let e = if d.frobenius_norm() > 0.0 { energy_fraction(d, rank)? } else { f64::NAN };
            energy.push(EnergyRow {
                layer: id.to_string(),
                rank,
                energy: e,
            });
        }
    }
    write_csv_with_header(&out.join("energy.csv"), &["layer", "rank", "energy"], &energy)?;
    reports.push("energy.csv".to_string());

    let inputs = decoder_layer_inputs(&model, &features)?;
    let mut alignment = Vec::new();
    for (id, d) in &deltas {
        let Some(f) = inputs.get(id) else { continue };
        let k = c.k.min(f.cols());
        if d.frobenius_norm() == 0.0 {
            continue;
        }
        match covariance_update_alignment(f, d, k) {
            Ok(CovarianceUpdateAlignment {
                feature_energy,
                update_energy,
                affinity,
            }) => alignment.push(AlignmentRow {
                layer: id.to_string(),
                k,
                feature_energy,
                update_energy,
                affinity,
            }),
            // A dead layer has no covariance to compare against.
            Err(Error::InvalidArgument(_)) => {}
            Err(e) => return Err(e),
        }
    }
    write_csv_with_header(
        &out.join("alignment.csv"),
        &["layer", "k", "feature_energy", "update_energy", "affinity"],
        &alignment,
    )?;
    reports.push("alignment.csv".to_string());

    if c.ablations {
        let scenes = held_out_set(&run.scene, HELD_OUT_SEED, c.scenes)?;
        let specs = c
            .projections
            .iter()
            .map(|l| {
                let mut s: ProjectionSpec = l.parse().map_err(|e| Error::invalid(format!("projections: {e}")))?;
                s.seed = c.seed;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        write_csv(&out.join("projection.csv"), &projection_ablation(&model, &scenes, &specs, &run.adapt)?)?;
        write_csv(&out.join("rank.csv"), &rank_sweep(&model, &scenes, &c.ranks, &run.adapt)?)?;
        let rows = efficacy(&model, &scenes, &run.adapt)?;
        write_csv(&out.join("efficacy.csv"), &rows)?;
        reports.extend(["projection.csv", "rank.csv", "efficacy.csv"].map(String::from));
    }
    write_json(&out.join("index.json"), &AnalyzeIndex { reports, pc1_maps })?;
    finish(out, c)
}

/// Parses a grid filter such as `d=16 r=1` (spaces or commas).
pub fn parse_grid_filter(spec: &str) -> Result<Vec<GridCell>> {
    let mut keep: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in spec.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("grid: expected key=value, got `{tok}`")))?;
        let v: usize = v.parse().map_err(|_| Error::invalid(format!("grid: bad value in `{tok}`")))?;
        match k {
            "d" | "r" | "m" | "t" => {
                keep.insert(k, v);
            }
            _ => return Err(Error::invalid(format!("grid: unknown key `{k}`"))),
        }
    }
    let cells: Vec<GridCell> = theory::default_grid()
        .into_iter()
        .filter(|c| {
            keep.iter().all(|(&k, &v)| match k {
                "d" => c.d == v,
                "r" => c.r == v,
                "m" => c.m == v,
                _ => c.steps == v,
            })
        })
        .collect();
    // A fully specified cell outside the default grid is still allowed.
    if cells.is_empty() {
        if let (Some(&d), Some(&r), Some(&m)) = (keep.get("d"), keep.get("r"), keep.get("m")) {
            let steps = keep.get("t").copied().unwrap_or(1);
            return Ok(vec![GridCell { d, r, m, steps }]);
        }
        return Err(Error::invalid(format!("grid: `{spec}` selects no cells")));
    }
    // Collapse unspecified T to a single cell per (d, r, m) when only d and r are given.
    if keep.contains_key("d") && keep.contains_key("r") && !keep.contains_key("m") && !keep.contains_key("t") {
        let mut seen = std::collections::BTreeSet::new();
        return Ok(cells.into_iter().filter(|c| seen.insert((c.d, c.r))).collect());
    }
    Ok(cells)
}

#[derive(Serialize)]
struct CellRow {
    d: usize,
    r: usize,
    m: usize,
    steps: usize,
    gradient_rank_sigma_ratio: f64,
    gradient_rank_row_leak: f64,
    decomposition_identity: f64,
    decomposition_decomposition: f64,
    trajectory_sigma_ratio: f64,
    trajectory_row_leak: f64,
    off_subspace: f64,
    off_bound: f64,
    pass: bool,
}

#[derive(Serialize)]
struct ModelChecks {
    model: String,
    probe_scenes: usize,
    linear_scenes: usize,
    linear_fraction: f64,
    radii: Vec<Option<f64>>,
    /// Smallest second difference over scenes when a kink is crossed.
    kink_second_difference: f64,
    /// `1 − energy_fraction(ΔW, 4)` of a first-stage fine-tune on rank-4 features.
    confined_energy_gap: f64,
    pass: bool,
}

#[derive(Serialize)]
struct Verdict<'a> {
    pass: bool,
    theory: &'a TheoryReport,
    model: ModelChecks,
}

fn model_checks(model: &DepthModel, name: String, c: &VerifyConfig) -> Result<ModelChecks> {
    use crate::analysis::layers::{confine_to_span, fine_tune_layer};
    use crate::analysis::pca::feature_pca;
    use crate::model::FeatureMap;
    let scenes = held_out_set(&SceneConfig::default(), HELD_OUT_SEED, c.probe_scenes.max(1))?;
    let mut radii = Vec::new();
    let mut kink = f64::INFINITY;
    for (i, (s, _)) in scenes.iter().enumerate() {
        let f = model.encode(&s.image)?;
        radii.push(theory::linearity_probe(model, &f, 1.0, c.seed + i as u64)?.delta);
        kink = kink.min(theory::kink_crossing_control(model, &f)?);
    }
    let linear_scenes = radii.iter().filter(|r| r.is_some()).count();
    let linear_fraction = linear_scenes as f64 / radii.len() as f64;
    let (s, obs) = &scenes[0];
    let f = model.encode(&s.image)?;
    let basis = feature_pca(&[&f.features])?.top_k(4);
    let confined = FeatureMap {
        features: confine_to_span(&f.features, &basis)?,
        grid: f.grid,
    };
    let ft = fine_tune_layer(model, &confined, obs, LayerId::Decoder(0), None, 40, 0.01)?;
    let gap = 1.0 - energy_fraction(&ft.delta, 4)?;
    Ok(ModelChecks {
        model: name,
        probe_scenes: radii.len(),
        linear_scenes,
        linear_fraction,
        radii,
        kink_second_difference: kink,
        confined_energy_gap: gap,
        pass: linear_fraction >= 0.9 && kink > 1e-6 && gap.abs() < theory::RANK_TOL,
    })
}

pub fn cmd_verify(c: &mut VerifyConfig, model_path: Option<&Path>, out: &Path) -> Result<bool> {
    let cells = match &c.grid {
        Some(g) => parse_grid_filter(g)?,
        None => theory::default_grid(),
    };
    if !(c.eps >= 0.0 && c.eps.is_finite()) {
        return Err(Error::invalid("eps: must be a non-negative number"));
    }
    let (model, name) = match model_path {
        Some(p) => {
            let (m, d) = load_model(p)?;
            c.model_sha256 = Some(d.clone());
            (m, d)
        }
        None => (DepthModel::init(ModelConfig::default(), c.seed)?, format!("fresh(seed={})", c.seed)),
    };
    let report = theory::run_grid(&cells, c.eps, c.strict, c.seed)?;
    let checks = model_checks(&model, name, c)?;
    let pass = report.pass && checks.pass;
    prepare_out(out)?;
    let rows: Vec<CellRow> = report
        .cells
        .iter()
        .map(|r| CellRow {
            d: r.cell.d,
            r: r.cell.r,
            m: r.cell.m,
            steps: r.cell.steps,
            gradient_rank_sigma_ratio: r.gradient_rank.sigma_ratio,
            gradient_rank_row_leak: r.gradient_rank.row_leak,
            decomposition_identity: r.decomposition.identity_violation,
            decomposition_decomposition: r.decomposition.decomposition_error,
            trajectory_sigma_ratio: r.trajectory.rank.sigma_ratio,
            trajectory_row_leak: r.trajectory.rank.row_leak,
            off_subspace: r.trajectory.off_subspace,
            off_bound: r.trajectory.off_bound,
            pass: r.pass,
        })
        .collect();
    write_csv(&out.join("cells.csv"), &rows)?;
    write_json(
        &out.join("verdict.json"),
        &Verdict {
            pass,
            theory: &report,
            model: checks,
        },
    )?;
    finish(out, c)?;
    if !pass {
        eprintln!("verification failed; see {}", out.join("verdict.json").display());
    }
    Ok(pass)
}

pub fn cmd_sweep(c: &mut SweepConfig, model_path: &Path, out: &Path) -> Result<()> {
    let (model, digest) = load_model(model_path)?;
    c.model_sha256 = digest;
    let scenes = held_out_set(&c.scene, HELD_OUT_SEED, c.scenes)?;
    let mut configs = Vec::new();
    for &scope in &c.scopes {
        for &iterations in &c.iterations {
            for &learning_rate in &c.learning_rates {
                configs.push(AdaptConfig {
                    scope,
                    iterations,
                    learning_rate,
                    seed: c.seed,
                    ..AdaptConfig::default()
                });
            }
        }
    }
    for cfg in &configs {
        cfg.validate()?;
    }
    let rows = scope_sweep(&model, &scenes, &configs)?;
    prepare_out(out)?;
    write_csv(&out.join("scope.csv"), &rows)?;
    let maes: Vec<f64> = rows.iter().map(|r| r.mean_mae).filter(|x| x.is_finite()).collect();
    write_json(&out.join("summary.json"), &serde_json::json!({ "rows": rows.len(), "median_of_means": median(&maes) }))?;
    finish(out, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_filter_selects_cells() {
        let cells = parse_grid_filter("d=16 r=1").unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].d, cells[0].r), (16, 1));
        assert_eq!(parse_grid_filter("d=64,m=32").unwrap().len(), 9);
        assert!(parse_grid_filter("q=1").is_err());
        assert!(parse_grid_filter("d=7").is_err());
        assert_eq!(parse_grid_filter("d=7 r=2 m=3").unwrap()[0].steps, 1);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 1, "colour": 2}"#).unwrap();
        assert!(load_config::<GenerateConfig>(Some(&p)).is_err());
        fs::write(&p, r#"{"scene": {"points": 5}}"#).unwrap();
        let c: GenerateConfig = load_config(Some(&p)).unwrap();
        assert_eq!(c.scene.points, 5);
        assert_eq!(c.scene.height, 32);
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["ltto", "frobnicate"]), EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("g");
        assert_eq!(
            run(["ltto", "generate", "--out", out.to_str().unwrap(), "--kind", "caves"]),
            EXIT_USAGE
        );
    }
}
