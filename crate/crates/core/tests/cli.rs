use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use tempfile::TempDir;
use vox3d_core::audio::{write_wav, WavEncoding, Waveform};
use vox3d_core::distill::{kd_loss, EmbeddingBatch, KdConfig};
use vox3d_core::faceio::*;
use vox3d_core::fitting::LandmarkSpec;
use vox3d_core::metrics::are;
use vox3d_core::model::{MorphableModel, ParamVector};
use vox3d_core::regressor::initial_weights;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Run {
        let out = Command::new(env!("CARGO_BIN_EXE_vox3d"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap();
        Run {
            code: out.status.code().unwrap(),
            stdout: String::from_utf8(out.stdout).unwrap(),
            stderr: String::from_utf8(out.stderr).unwrap(),
        }
    }

    fn ok(&self, args: &[&str]) -> Run {
        let r = self.run(args);
        assert_eq!(r.code, 0, "{args:?}: {}", r.stderr);
        r
    }

    /// Small model and spec in `m.v3dm` / `s.json`.
    fn assets(&self) -> (MorphableModel, LandmarkSpec) {
        self.ok(&["gen", "--kind", "model", "--vertices", "300", "--shape-dim", "12", "--expr-dim", "4", "--out", "m.v3dm"]);
        self.ok(&["gen", "--kind", "spec", "--model", "m.v3dm", "--out", "s.json"]);
        (
            load_model(&self.path("m.v3dm")).unwrap(),
            load_landmark_spec(&self.path("s.json")).unwrap().0,
        )
    }
}

fn landmark_array(spec: &LandmarkSpec, verts: &[Vector3<f64>]) -> DMatrix<f64> {
    let pts = spec.landmark_points(verts);
    DMatrix::from_fn(pts.len(), 3, |i, j| pts[i][j])
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn usage_errors_exit_one() {
    let w = Work::new();
    let r = w.run(&["fit", "--bogus"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.stderr.trim().lines().count(), 1);
    assert_eq!(w.run(&["frobnicate"]).code, 1);
    assert_eq!(w.run(&["synth", "--zero"]).code, 1);
    assert_eq!(w.run(&["--format", "yaml", "gen", "--kind", "model"]).code, 1);
    let help = w.run(&["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("eval"));
}

#[test]
fn missing_model_is_a_validation_failure() {
    let w = Work::new();
    let r = w.run(&["synth", "--model", "absent.v3dm", "--zero", "--out", "x.obj"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("absent.v3dm"));
    assert_eq!(r.stderr.trim().lines().count(), 1);
}

#[test]
fn zero_synthesis_is_mean_face() {
    let w = Work::new();
    let (model, _) = w.assets();
    w.ok(&["synth", "--model", "m.v3dm", "--zero", "--out", "mean.obj"]);
    let text = std::fs::read_to_string(w.path("mean.obj")).unwrap();
    assert_eq!(text, write_obj(&model.mean_mesh()));
}

#[test]
fn pose_moves_the_mesh() {
    let w = Work::new();
    let (model, _) = w.assets();
    w.ok(&["synth", "--model", "m.v3dm", "--zero", "--pose", "0,0,0,1,-2,0.5", "--out", "p.obj"]);
    let moved = import_obj(&w.path("p.obj")).unwrap();
    for (a, b) in moved.vertices.iter().zip(&model.mean_mesh().vertices) {
        assert!((a - b - Vector3::new(1.0, -2.0, 0.5)).amax() < 1e-8);
    }
    assert_eq!(w.run(&["synth", "--model", "m.v3dm", "--zero", "--pose", "1,2", "--out", "p.obj"]).code, 2);
}

#[test]
fn fit_recovers_synthesized_params() {
    let w = Work::new();
    let (model, spec) = w.assets();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = ParamVector::new(gauss_vec(&mut rng, 12), gauss_vec(&mut rng, 4), false);
    save_params(&w.path("truth.json"), &truth).unwrap();
    w.ok(&["synth", "--model", "m.v3dm", "--params", "truth.json", "--out", "t.obj"]);
    let mesh = import_obj(&w.path("t.obj")).unwrap();
    let exact = model.synthesize(&truth).unwrap();
    assert!(mesh.vertices.iter().zip(&exact.vertices).all(|(a, b)| (a - b).amax() < 1e-8));

    save_array(&w.path("lm.json"), &landmark_array(&spec, &exact.vertices)).unwrap();
    let r = w.ok(&["fit", "--model", "m.v3dm", "--spec", "s.json", "--landmarks", "lm.json", "--out", "fit.json", "--format", "structured"]);
    let got = load_params(&w.path("fit.json")).unwrap();
    for (g, t) in got.stacked().iter().zip(truth.stacked()) {
        assert!((g - t).abs() < 1e-8, "{g} {t} {}", g - t);
    }
    assert_eq!(params_from_doc(&r.json()["params"]).unwrap(), got);
    assert!(r.json()["residual"].as_f64().unwrap() < 1e-16);
}

#[test]
fn mean_landmarks_fit_to_zero() {
    let w = Work::new();
    let (model, spec) = w.assets();
    save_array(&w.path("lm.json"), &landmark_array(&spec, &model.mean_mesh().vertices)).unwrap();
    w.ok(&["fit", "--model", "m.v3dm", "--spec", "s.json", "--landmarks", "lm.json", "--reg", "1e-3", "--out", "fit.json"]);
    assert!(load_params(&w.path("fit.json")).unwrap().stacked().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn rank_deficient_fit_is_numerical_failure() {
    let w = Work::new();
    let (model, spec) = w.assets();
    let mut doc = landmark_spec_to_doc(&spec, model.n_vertices());
    doc["landmarks"] = Value::from(vec![0; 68]);
    std::fs::write(w.path("bad.json"), doc.to_string()).unwrap();
    save_array(&w.path("lm.json"), &DMatrix::zeros(68, 3)).unwrap();
    let r = w.run(&["fit", "--model", "m.v3dm", "--spec", "bad.json", "--landmarks", "lm.json"]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("rank-deficient"));
}

#[test]
fn eval_of_identical_meshes_is_zero() {
    let w = Work::new();
    w.assets();
    w.ok(&["synth", "--model", "m.v3dm", "--zero", "--out", "a.obj"]);
    let r = w.ok(&["eval", "--pred", "a.obj", "--ref", "a.obj", "--spec", "s.json", "--report", "r.json", "--format", "structured"]);
    let report = report_from_doc(&r.json()).unwrap();
    assert_eq!(report, load_report(&w.path("r.json")).unwrap());
    assert_eq!(report.are.mean, 0.0);
    assert_eq!(report.nme, 0.0);
    assert!(report.holistic_rmse < 1e-9);
    assert!(report.part_rmse.values().all(|&v| v < 1e-9));
    assert_eq!(report.provenance.pred, "a.obj");
}

#[test]
fn eval_of_scaled_pred() {
    let w = Work::new();
    let (model, _) = w.assets();
    let mesh = model.mean_mesh();
    export_obj(&mesh, &w.path("ref.obj")).unwrap();
    export_obj(&mesh.scaled(1.25), &w.path("big.obj")).unwrap();
    let r = w.ok(&["eval", "--pred", "big.obj", "--ref", "ref.obj", "--spec", "s.json", "--format", "structured"]);
    let report = report_from_doc(&r.json()).unwrap();
    assert!(report.are.mean < 1e-7);
    assert!(report.holistic_rmse > 1e-4);
    assert!(report.nme > 1e-3);
}

#[test]
fn eval_er_knob() {
    let w = Work::new();
    let (model, spec) = w.assets();
    let mut shape = vec![0.0; 12];
    shape[0] = 2.0;
    let pred = model.synthesize(&ParamVector::new(shape, vec![0.0; 4], false)).unwrap();
    let reference = model.mean_mesh();
    export_obj(&pred, &w.path("p.obj")).unwrap();
    export_obj(&reference, &w.path("r.obj")).unwrap();
    let r = w.ok(&["eval", "--pred", "p.obj", "--ref", "r.obj", "--spec", "s.json", "--format", "structured"]);
    let want = are(&pred, &reference, &spec).unwrap();
    let got = report_from_doc(&r.json()).unwrap();
    assert!(want.er > 1e-2);
    assert!((got.are.er - want.er).abs() < 1e-6);
}

#[test]
fn kd_loss_cases() {
    let w = Work::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = EmbeddingBatch::new(DMatrix::from_fn(6, 5, |_, _| rng.sample(StandardNormal))).unwrap();
    let s = EmbeddingBatch::new(DMatrix::from_fn(6, 5, |_, _| rng.sample(StandardNormal))).unwrap();
    let tp = ParamVector::new(gauss_vec(&mut rng, 3), gauss_vec(&mut rng, 2), true);
    let sp = ParamVector::new(gauss_vec(&mut rng, 3), gauss_vec(&mut rng, 2), true);
    save_batch(&w.path("t.json"), &t).unwrap();
    save_batch(&w.path("s.json"), &s).unwrap();
    save_params(&w.path("tp.json"), &tp).unwrap();
    save_params(&w.path("sp.json"), &sp).unwrap();
    let run = |a: &str, b: &str, c: &str, d: &str| {
        w.ok(&["kd-loss", "--teacher", a, "--student", b, "--teacher-params", c, "--student-params", d, "--format", "structured"])
            .json()
    };
    let same = run("t.json", "t.json", "tp.json", "tp.json");
    assert!(same["total"].as_f64().unwrap().abs() < 1e-10);
    let params_only = run("t.json", "t.json", "tp.json", "sp.json");
    assert!((params_only["total"].as_f64().unwrap() - params_only["pseudo_gt"].as_f64().unwrap()).abs() < 1e-10);
    let full = run("t.json", "s.json", "tp.json", "sp.json");
    let want = kd_loss(&t, &s, &tp, &sp, &KdConfig::default()).unwrap();
    assert_eq!(full["total"].as_f64().unwrap(), want.total);
    assert_eq!(full["divergence"].as_f64().unwrap(), want.divergence);

    w.ok(&["kd-loss", "--teacher", "t.json", "--student", "s.json", "--teacher-params", "tp.json", "--student-params", "sp.json", "--grad-out", "g.json"]);
    let g: Value = serde_json::from_str(&std::fs::read_to_string(w.path("g.json")).unwrap()).unwrap();
    assert_eq!(array_from_doc(&g["embedding"]).unwrap().shape(), (6, 5));
}

#[test]
fn gen_is_deterministic_per_seed() {
    let w = Work::new();
    for (seed, name) in [("3", "a"), ("3", "b"), ("4", "c")] {
        for kind in ["model", "spec", "dataset"] {
            w.ok(&["gen", "--kind", kind, "--seed", seed, "--vertices", "120", "--shape-dim", "6", "--expr-dim", "2", "--identities", "5", "--out", &format!("{name}_{kind}")]);
        }
    }
    let read = |n: &str| std::fs::read(w.path(n)).unwrap();
    for kind in ["model", "spec", "dataset"] {
        assert_eq!(read(&format!("a_{kind}")), read(&format!("b_{kind}")));
    }
    assert_ne!(read("a_model"), read("c_model"));
    let (model, header) = load_model_with_header(&w.path("a_model")).unwrap();
    assert_eq!(header.seed, Some(3));
    let (spec, n) = load_landmark_spec(&w.path("a_spec")).unwrap();
    spec.validate(model.n_vertices()).unwrap();
    assert_eq!(n, 120);
    assert_eq!(load_dataset(&w.path("a_dataset")).unwrap().samples.len(), 5);
}

#[test]
fn train_and_predict() {
    let w = Work::new();
    w.assets();
    w.ok(&["gen", "--kind", "dataset", "--model", "m.v3dm", "--spec", "s.json", "--identities", "200", "--embedding-dim", "24", "--out", "d.json"]);
    let r = w.ok(&["train", "--dataset", "d.json", "--iters", "2000", "--weights-out", "w.json", "--seed", "5", "--format", "structured"]);
    let summary = r.json();
    assert!(summary["final_loss"].as_f64().unwrap() < 1e-4 * summary["initial_loss"].as_f64().unwrap());

    w.ok(&["train", "--dataset", "d.json", "--iters", "0", "--seed", "5", "--out", "w0.json"]);
    assert_eq!(load_weights(&w.path("w0.json")).unwrap(), initial_weights(12, 4, 24, 5));

    let model = load_model(&w.path("m.v3dm")).unwrap();
    let spec = load_landmark_spec(&w.path("s.json")).unwrap().0;
    let ds = load_dataset(&w.path("d.json")).unwrap();
    let (mut trained, mut untrained) = (0.0, 0.0);
    for k in 0..20 {
        let sample = &ds.samples[k];
        save_array(&w.path("e.json"), &DMatrix::from_row_slice(1, 24, &sample.embedding)).unwrap();
        let truth = model.synthesize(&model.denormalize_params(&sample.params).unwrap()).unwrap();
        for (weights, acc) in [("w.json", &mut trained), ("w0.json", &mut untrained)] {
            w.ok(&["predict", "--weights", weights, "--embedding", "e.json", "--model", "m.v3dm", "--out", "p.obj"]);
            *acc += are(&import_obj(&w.path("p.obj")).unwrap(), &truth, &spec).unwrap().mean;
        }
    }
    assert!(trained < untrained, "{trained} vs {untrained}");
}

fn write_tone(path: &Path, seconds: f64, amp: f64) {
    let n = (seconds * 16000.0) as usize;
    let samples = (0..n).map(|i| amp * (i as f64 * 0.3).sin()).collect();
    write_wav(path, &Waveform::new(samples, 16000).unwrap(), WavEncoding::Float32).unwrap();
}

#[test]
fn audio_pipeline() {
    let w = Work::new();
    write_tone(&w.path("silence.wav"), 1.0, 0.0);
    w.ok(&["audio", "--in", "silence.wav", "--raw", "--out", "sil.json"]);
    let sil = load_array(&w.path("sil.json")).unwrap();
    assert_eq!(sil.shape(), (98, 64));
    assert!(sil.iter().all(|&v| v == 1e-10f64.ln()));

    write_tone(&w.path("tone.wav"), 10.0, 0.5);
    let a = w.ok(&["audio", "--in", "tone.wav", "--crop", "3:8", "--seed", "11", "--out", "a.json", "--format", "structured"]);
    w.ok(&["audio", "--in", "tone.wav", "--crop", "3:8", "--seed", "11", "--out", "b.json"]);
    assert_eq!(std::fs::read(w.path("a.json")).unwrap(), std::fs::read(w.path("b.json")).unwrap());
    let info = a.json();
    let samples = info["samples"].as_u64().unwrap() as usize;
    assert!((48000..=128000).contains(&samples));
    assert_eq!(info["frames"].as_u64().unwrap() as usize, 1 + (samples - 400) / 160);
    let spec = load_array(&w.path("a.json")).unwrap();
    for col in spec.column_iter() {
        assert!(col.mean().abs() < 1e-9);
    }
    assert_eq!(w.run(&["audio", "--in", "tone.wav", "--crop", "3-8", "--out", "c.json"]).code, 2);
}
