use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, Vector3};
use serde_json::{json, Value};

use vox3d_core::audio::{log_mel, per_bin_normalize, random_crop, read_wav, MelConfig};
use vox3d_core::distill::{kd_grad, kd_loss, KdConfig};
use vox3d_core::faceio::{
    array_to_doc, export_obj, import_obj, load_array, load_batch, load_dataset, load_landmark_spec, load_model,
    load_params, load_weights, params_to_doc, report_to_doc, save_array, save_dataset, save_landmark_spec,
    save_model, save_params, save_report, save_weights, Dataset,
};
use vox3d_core::fitting::{fit, FitConfig};
use vox3d_core::metrics::{evaluate, Line, Provenance};
use vox3d_core::model::{ParamVector, RigidTransform};
use vox3d_core::regressor::{forward, initial_weights, mean_loss, pairs_from_samples, train, TrainConfig};
use vox3d_core::registration::IcpConfig;
use vox3d_core::synthetic::{gen_dataset, gen_landmark_spec, gen_model, SyntheticConfig};
use vox3d_core::{Error, ErrorKind, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Morphable face models, landmark fitting, face metrics and distillation losses.
#[derive(Parser)]
#[command(name = "vox3d", version)]
struct Cli {
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Primary output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shape of the summary written to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Structured,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a mesh from coefficients and write it as OBJ.
    Synth(SynthArgs),
    /// Fit coefficients to 3D landmarks.
    Fit(FitArgs),
    /// Compare a predicted mesh with a reference mesh.
    Eval(EvalArgs),
    /// Evaluate the distillation losses.
    KdLoss(KdArgs),
    /// Generate a synthetic model, landmark spec or dataset.
    Gen(GenArgs),
    /// Train the linear coefficient decoder.
    Train(TrainArgs),
    /// Decode an embedding into a mesh.
    Predict(PredictArgs),
    /// Compute a log-mel spectrogram from a WAV file.
    Audio(AudioArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw (unnormalized) coefficients; normalized ones are mapped through the model statistics.
    #[arg(long, conflicts_with = "zero", required_unless_present = "zero")]
    params: Option<PathBuf>,
    /// Use the mean face.
    #[arg(long)]
    zero: bool,
    /// Rotation vector (radians) and translation: `rx,ry,rz,tx,ty,tz`.
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    /// 68×3 array document of target landmark positions.
    #[arg(long)]
    landmarks: PathBuf,
    /// Shape regularization weight.
    #[arg(long, default_value_t = 0.0)]
    reg: f64,
    /// Expression regularization weight; defaults to `--reg`.
    #[arg(long)]
    expr_reg: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    /// Report destination; defaults to `--out`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = IcpConfig::default().max_iters)]
    icp_iters: usize,
}

#[derive(Args)]
struct KdArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    teacher_params: PathBuf,
    #[arg(long)]
    student_params: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    divergence_weight: f64,
    /// Also write the gradients with respect to the student to this file.
    #[arg(long)]
    grad_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Model,
    Spec,
    Dataset,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Existing model to build a spec or dataset on; generated from the flags below otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Existing landmark spec for a dataset; generated from the model otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = SyntheticConfig::default().n_vertices)]
    vertices: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().shape_dim)]
    shape_dim: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().expr_dim)]
    expr_dim: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().n_identities)]
    identities: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().embedding_dim)]
    embedding_dim: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().noise_sigma)]
    noise: f64,
    #[arg(long, default_value_t = SyntheticConfig::default().hidden_map_scale)]
    hidden_scale: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().iters)]
    iters: usize,
    /// Weights destination; defaults to `--out`.
    #[arg(long)]
    weights_out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Array document; one embedding per row.
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long)]
    model: PathBuf,
    /// Also write the predicted raw coefficients.
    #[arg(long)]
    params_out: Option<PathBuf>,
}

#[derive(Args)]
struct AudioArgs {
    /// Mono WAV file, 16-bit integer or 32-bit float samples.
    #[arg(long = "in", alias = "input")]
    input: PathBuf,
    /// Random crop length range in seconds, `min:max`.
    #[arg(long)]
    crop: Option<String>,
    /// Skip per-bin normalization.
    #[arg(long)]
    raw: bool,
}

struct Ctx {
    seed: u64,
    out: Option<PathBuf>,
    format: Format,
}

impl Ctx {
    fn out(&self, specific: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
        specific
            .or(self.out.as_ref())
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("{what} needs an output path (--out)")))
    }

    fn emit(&self, text: String, structured: Value) {
        match self.format {
            Format::Text => println!("{text}"),
            Format::Structured => println!("{}", serde_json::to_string_pretty(&structured).unwrap()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out,
        format: cli.format,
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Fit(a) => fit_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::KdLoss(a) => kd(&ctx, a),
        Command::Gen(a) => gen(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Audio(a) => audio(&ctx, a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => EXIT_VALIDATION,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            })
        }
    }
}

fn parse_floats(text: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Invalid(format!("{what}: {e}")))?;
    if values.len() != n || !values.iter().all(|v| v.is_finite()) {
        return Err(Error::Invalid(format!("{what} needs {n} finite comma-separated numbers")));
    }
    Ok(values)
}

fn parse_pose(text: &str) -> Result<RigidTransform> {
    let v = parse_floats(text, 6, "--pose")?;
    let rot = Vector3::new(v[0], v[1], v[2]);
    let shift = Vector3::new(v[3], v[4], v[5]);
    let angle = rot.norm();
    if angle == 0.0 {
        return RigidTransform::new(nalgebra::Matrix3::identity(), shift);
    }
    Ok(RigidTransform::from_axis_angle(&(rot / angle), angle, shift))
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let params = match &a.params {
        Some(path) => {
            let p = load_params(path)?;
            if p.normalized {
                model.denormalize_params(&p)?
            } else {
                p
            }
        }
        None => model.zero_params(),
    };
    let mut mesh = model.synthesize(&params)?;
    if let Some(pose) = &a.pose {
        mesh = mesh.apply_pose(&parse_pose(pose)?);
    }
    let out = ctx.out(None, "synth")?;
    export_obj(&mesh, &out)?;
    ctx.emit(
        format!("wrote {} vertices, {} triangles to {}", mesh.n_vertices(), mesh.triangles.len(), display(&out)),
        json!({"command": "synth", "path": display(&out), "n_vertices": mesh.n_vertices(), "n_triangles": mesh.triangles.len()}),
    );
    Ok(())
}

fn fit_cmd(ctx: &Ctx, a: FitArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (spec, _) = load_landmark_spec(&a.spec)?;
    let lm = load_array(&a.landmarks)?;
    if lm.ncols() != 3 {
        return Err(Error::Invalid(format!("landmark array must have 3 columns, found {}", lm.ncols())));
    }
    let targets: Vec<Vector3<f64>> = lm.row_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect();
    let cfg = FitConfig::new(a.reg, a.expr_reg.unwrap_or(a.reg))?;
    let result = fit(&model, &spec, &targets, &cfg)?;
    if let Some(out) = &ctx.out {
        save_params(out, &result.params)?;
    }
    ctx.emit(
        format!(
            "residual {:.6e}\nshape {:?}\nexpr {:?}",
            result.residual, result.params.shape, result.params.expr
        ),
        json!({"command": "fit", "residual": result.residual, "params": params_to_doc(&result.params)}),
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let pred = import_obj(&a.pred)?;
    let reference = import_obj(&a.reference)?;
    let (spec, _) = load_landmark_spec(&a.spec)?;
    let cfg = IcpConfig {
        max_iters: a.icp_iters,
        ..IcpConfig::default()
    };
    let provenance = Provenance {
        pred: display(&a.pred),
        reference: display(&a.reference),
    };
    let report = evaluate(&pred, &reference, &spec, &cfg, provenance)?;
    if let Some(out) = a.report.as_ref().or(ctx.out.as_ref()) {
        save_report(out, &report)?;
    }
    let mut text = String::from("ARE");
    for line in Line::ALL {
        text += &format!(" {}={:.6e}", line.key(), report.are.get(line));
    }
    text += &format!(" mean={:.6e}\nNME {:.6e}\nholistic RMSE {:.6e}", report.are.mean, report.nme, report.holistic_rmse);
    for (region, v) in &report.part_rmse {
        text += &format!("\n{region} RMSE {v:.6e}");
    }
    ctx.emit(text, report_to_doc(&report));
    Ok(())
}

fn kd(ctx: &Ctx, a: KdArgs) -> Result<()> {
    let teacher = load_batch(&a.teacher)?;
    let student = load_batch(&a.student)?;
    let tp = load_params(&a.teacher_params)?;
    let sp = load_params(&a.student_params)?;
    let cfg = KdConfig {
        divergence_weight: a.divergence_weight,
    };
    let loss = kd_loss(&teacher, &student, &tp, &sp, &cfg)?;
    if let Some(path) = &a.grad_out {
        let g = kd_grad(&teacher, &student, &tp, &sp, &cfg)?;
        let doc = json!({
            "format": "vox3d.kd_gradient",
            "version": 1,
            "embedding": array_to_doc(&g.embedding),
            "params": params_to_doc(&g.params),
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    ctx.emit(
        format!(
            "pseudo_gt {:.12e}\ndivergence {:.12e}\ntotal {:.12e}",
            loss.pseudo_gt, loss.divergence, loss.total
        ),
        json!({"command": "kd-loss", "pseudo_gt": loss.pseudo_gt, "divergence": loss.divergence, "total": loss.total}),
    );
    Ok(())
}

fn gen(ctx: &Ctx, a: GenArgs) -> Result<()> {
    let mut cfg = SyntheticConfig {
        seed: ctx.seed,
        n_vertices: a.vertices,
        shape_dim: a.shape_dim,
        expr_dim: a.expr_dim,
        n_identities: a.identities,
        embedding_dim: a.embedding_dim,
        noise_sigma: a.noise,
        hidden_map_scale: a.hidden_scale,
    };
    let out = ctx.out(None, "gen")?;
    let model = match &a.model {
        Some(path) => {
            let m = load_model(path)?;
            cfg.n_vertices = m.n_vertices();
            cfg.shape_dim = m.shape_dim();
            cfg.expr_dim = m.expr_dim();
            m
        }
        None => gen_model(&cfg)?,
    };
    let summary = match a.kind {
        Kind::Model => {
            save_model(&out, &model, Some(cfg.seed))?;
            format!("model: {} vertices, {}+{} coefficients", model.n_vertices(), model.shape_dim(), model.expr_dim())
        }
        Kind::Spec => {
            save_landmark_spec(&out, &gen_landmark_spec(&model)?, model.n_vertices())?;
            "landmark spec".to_string()
        }
        Kind::Dataset => {
            let spec = match &a.spec {
                Some(path) => load_landmark_spec(path)?.0,
                None => gen_landmark_spec(&model)?,
            };
            let samples = gen_dataset(&model, &spec, &cfg)?;
            let ds = Dataset::new(cfg.shape_dim, cfg.expr_dim, cfg.embedding_dim, samples)?;
            save_dataset(&out, &ds)?;
            format!("dataset: {} samples", ds.samples.len())
        }
    };
    ctx.emit(
        format!("wrote {summary} to {}", display(&out)),
        json!({"command": "gen", "path": display(&out), "seed": cfg.seed}),
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let data = pairs_from_samples(&ds.samples);
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        iters: a.iters,
        seed: ctx.seed,
    };
    cfg.validate()?;
    let out = ctx.out(a.weights_out.as_ref(), "train")?;
    let initial = mean_loss(&initial_weights(ds.shape_dim, ds.expr_dim, ds.embedding_dim, cfg.seed), &data)?;
    let result = train(&data, &cfg)?;
    let last = mean_loss(&result.weights, &data)?;
    save_weights(&out, &result.weights)?;
    ctx.emit(
        format!(
            "initial loss {initial:.6e}\nfinal loss {last:.6e}\nratio {:.3e}\nwrote {}",
            last / initial,
            display(&out)
        ),
        json!({"command": "train", "initial_loss": initial, "final_loss": last, "iters": cfg.iters, "path": display(&out)}),
    );
    Ok(())
}

fn predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let w = load_weights(&a.weights)?;
    let emb = load_array(&a.embedding)?;
    if a.row >= emb.nrows() {
        return Err(Error::Invalid(format!("row {} out of range for {} embeddings", a.row, emb.nrows())));
    }
    let row: Vec<f64> = emb.row(a.row).iter().copied().collect();
    let model = load_model(&a.model)?;
    let raw: ParamVector = model.denormalize_params(&forward(&row, &w)?)?;
    let mesh = model.synthesize(&raw)?;
    let out = ctx.out(None, "predict")?;
    export_obj(&mesh, &out)?;
    if let Some(path) = &a.params_out {
        save_params(path, &raw)?;
    }
    ctx.emit(
        format!("wrote predicted mesh to {}", display(&out)),
        json!({"command": "predict", "path": display(&out), "params": params_to_doc(&raw)}),
    );
    Ok(())
}

fn audio(ctx: &Ctx, a: AudioArgs) -> Result<()> {
    let mut wave = read_wav(&a.input)?;
    if let Some(range) = &a.crop {
        let (lo, hi) = range
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("--crop expects min:max seconds, got '{range}'")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Invalid(format!("--crop: {e}")))
        };
        wave = random_crop(&wave, parse(lo)?, parse(hi)?, ctx.seed)?;
    }
    let mut spec = log_mel(&wave, &MelConfig::default())?;
    if !a.raw {
        spec = per_bin_normalize(&spec)?;
    }
    let frames: &DMatrix<f64> = &spec.frames;
    let out = ctx.out(None, "audio")?;
    save_array(&out, frames)?;
    ctx.emit(
        format!(
            "{} samples at {} Hz -> {} frames x {} mel bins, wrote {}",
            wave.len(),
            wave.sample_rate(),
            frames.nrows(),
            frames.ncols(),
            display(&out)
        ),
        json!({"command": "audio", "path": display(&out), "samples": wave.len(), "frames": frames.nrows(), "n_mels": frames.ncols()}),
    );
    Ok(())
}
