use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vox3d_core::fitting::{fit, regularized_objective, residual, Anchors, FitConfig, LandmarkSpec, Region, LANDMARK_COUNT};
use vox3d_core::model::{normalize_params, denormalize_params, FaceMesh, MorphableModel, ParamStats, ParamVector, RigidTransform};
use vox3d_core::synthetic::{gen_dataset, gen_landmark_spec, gen_model, SyntheticConfig};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gauss(rng)).collect()
}

fn dense_model(rng: &mut ChaCha8Rng, n: usize, ps: usize, pe: usize) -> MorphableModel {
    MorphableModel::new(
        DVector::from_vec(gauss_vec(rng, 3 * n)),
        DMatrix::from_vec(3 * n, ps, gauss_vec(rng, 3 * n * ps)),
        DMatrix::from_vec(3 * n, pe, gauss_vec(rng, 3 * n * pe)),
        vec![],
        None,
    )
    .unwrap()
}

fn naive_synthesis(model: &MorphableModel, p: &ParamVector) -> Vec<f64> {
    let (mean, vs, ve) = (model.mean_face(), model.shape_basis(), model.expr_basis());
    let mut out = vec![0.0; mean.len()];
    for (r, slot) in out.iter_mut().enumerate() {
        let mut acc = mean[r];
        for c in 0..vs.ncols() {
            acc += vs[(r, c)] * p.shape[c];
        }
        for c in 0..ve.ncols() {
            acc += ve[(r, c)] * p.expr[c];
        }
        *slot = acc;
    }
    out
}

/// Landmark spec whose landmarks are the first 68 vertices.
fn prefix_spec(n: usize) -> LandmarkSpec {
    let regions: BTreeMap<Region, Vec<usize>> = Region::ALL.into_iter().map(|r| (r, vec![])).collect();
    LandmarkSpec::new(Anchors::from_array([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]), (0..LANDMARK_COUNT).collect(), regions, n)
        .unwrap()
}

fn landmarks(model: &MorphableModel, spec: &LandmarkSpec, p: &ParamVector) -> Vec<Vector3<f64>> {
    spec.landmark_points(&model.synthesize(p).unwrap().vertices)
}

/// Ridge solution through the normal equations, by Gaussian elimination.
fn normal_equations_oracle(model: &MorphableModel, spec: &LandmarkSpec, targets: &[Vector3<f64>], lambda: &[f64]) -> Vec<f64> {
    let p = lambda.len();
    let ps = model.shape_dim();
    let column = |c: usize, row: usize| {
        if c < ps {
            model.shape_basis()[(row, c)]
        } else {
            model.expr_basis()[(row, c - ps)]
        }
    };
    let mut a = vec![vec![0.0; p + 1]; p];
    for (k, &v) in spec.landmarks().iter().enumerate() {
        for axis in 0..3 {
            let row = 3 * v + axis;
            let rhs = targets[k][axis] - model.mean_face()[row];
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += column(i, row) * column(j, row);
                }
                a[i][p] += column(i, row) * rhs;
            }
        }
    }
    for (i, l) in lambda.iter().enumerate() {
        a[i][i] += l;
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

#[test]
fn synthesis_matches_naive_mat_vec() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = dense_model(&mut rng, 50, 8, 4);
        let p = ParamVector::new(gauss_vec(&mut rng, 8), gauss_vec(&mut rng, 4), false);
        let got = model.synthesize(&p).unwrap().to_flat();
        for (g, w) in got.iter().zip(naive_synthesis(&model, &p)) {
            assert!((g - w).abs() < 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn icosphere_normals_are_radial() {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|v| Vector3::from(*v).normalize())
    .collect();
    let mut tris: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2],
        [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5],
        [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..2 {
        let mut mid = BTreeMap::new();
        let mut next = Vec::new();
        for [a, b, c] in tris {
            let mut m = |i: u32, j: u32| {
                *mid.entry((i.min(j), i.max(j))).or_insert_with(|| {
                    verts.push(((verts[i as usize] + verts[j as usize]) / 2.0).normalize());
                    verts.len() as u32 - 1
                })
            };
            let (ab, bc, ca) = (m(a, b), m(b, c), m(c, a));
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    let mesh = FaceMesh::new(verts, tris).unwrap();
    let normals = mesh.vertex_normals().unwrap();
    for (v, n) in mesh.vertices.iter().zip(&normals) {
        assert!(n.angle(v).to_degrees() < 5.0);
    }
}

#[test]
fn compose_matches_sequential_application() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let mut xf = || {
            let axis = Vector3::from_fn(|_, _| gauss(&mut rng));
            RigidTransform::from_axis_angle(&axis, rng.random_range(-3.0..3.0), Vector3::from_fn(|_, _| gauss(&mut rng)))
        };
        let (first, second) = (xf(), xf());
        let p = Vector3::from_fn(|_, _| gauss(&mut rng));
        let both = second.compose(&first);
        assert!((both.apply(&p) - second.apply(&first.apply(&p))).amax() < 1e-12);
    }
}

#[test]
fn fitting_recovers_generating_params() {
    for seed in 0..20 {
        let cfg = SyntheticConfig {
            seed,
            n_vertices: 300,
            shape_dim: 20,
            expr_dim: 6,
            ..SyntheticConfig::default()
        };
        let model = gen_model(&cfg).unwrap();
        let spec = gen_landmark_spec(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let truth = ParamVector::new(gauss_vec(&mut rng, 20), gauss_vec(&mut rng, 6), false);
        let targets = landmarks(&model, &spec, &truth);
        let got = fit(&model, &spec, &targets, &FitConfig::new(0.0, 0.0).unwrap()).unwrap();
        let oracle = normal_equations_oracle(&model, &spec, &targets, &[0.0; 26]);
        for ((g, t), o) in got.params.stacked().iter().zip(truth.stacked()).zip(oracle) {
            assert!((g - t).abs() < 1e-8, "seed {seed}: {g} vs {t}");
            assert!((g - o).abs() < 1e-8);
        }
        assert!(got.residual < 1e-16);
    }
}

#[test]
fn ridge_fit_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = dense_model(&mut rng, 80, 12, 5);
    let spec = prefix_spec(80);
    let targets: Vec<_> = (0..LANDMARK_COUNT).map(|_| Vector3::from_fn(|_, _| gauss(&mut rng))).collect();
    let cfg = FitConfig::new(0.3, 2.0).unwrap();
    let got = fit(&model, &spec, &targets, &cfg).unwrap();
    let lambda: Vec<f64> = (0..17).map(|k| if k < 12 { 0.3 } else { 2.0 }).collect();
    for (g, o) in got.params.stacked().iter().zip(normal_equations_oracle(&model, &spec, &targets, &lambda)) {
        assert!((g - o).abs() < 1e-9 * (1.0 + o.abs()));
    }
}

#[test]
fn noisy_fit_beats_zero_params() {
    let cfg = SyntheticConfig::default();
    let model = gen_model(&cfg).unwrap();
    let spec = gen_landmark_spec(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let truth = ParamVector::new(gauss_vec(&mut rng, 40), gauss_vec(&mut rng, 10), false);
    let targets: Vec<_> = landmarks(&model, &spec, &truth)
        .into_iter()
        .map(|p| p + Vector3::from_fn(|_, _| 0.01 * gauss(&mut rng)))
        .collect();
    let got = fit(&model, &spec, &targets, &FitConfig::new(1e-3, 1e-3).unwrap()).unwrap();
    assert!(got.residual < residual(&model, &spec, &targets, &model.zero_params()).unwrap());
}

#[test]
fn heavy_regularization_shrinks_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = dense_model(&mut rng, 70, 6, 3);
    let spec = prefix_spec(70);
    let targets: Vec<_> = (0..LANDMARK_COUNT).map(|_| Vector3::from_fn(|_, _| gauss(&mut rng))).collect();
    let mut last = f64::INFINITY;
    for lambda in [0.0, 1e-2, 1.0, 1e2, 1e4, 1e6, 1e10] {
        let got = fit(&model, &spec, &targets, &FitConfig::new(lambda, 1.0).unwrap()).unwrap();
        let norm = got.params.shape.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= last * (1.0 + 1e-12));
        last = norm;
    }
    let got = fit(&model, &spec, &targets, &FitConfig::new(1e12, 1e12).unwrap()).unwrap();
    assert!(got.params.stacked().iter().all(|v| v.abs() < 1e-8));
}

#[test]
fn noiseless_dataset_embeddings_refit_linearly() {
    let cfg = SyntheticConfig {
        n_identities: 200,
        ..SyntheticConfig::default()
    };
    let model = gen_model(&cfg).unwrap();
    let spec = gen_landmark_spec(&model).unwrap();
    let samples = gen_dataset(&model, &spec, &cfg).unwrap();
    let p = cfg.shape_dim + cfg.expr_dim;
    let x = DMatrix::from_fn(samples.len(), p, |i, j| samples[i].params.stacked()[j]);
    let y = DMatrix::from_fn(samples.len(), cfg.embedding_dim, |i, j| samples[i].embedding[j]);
    let map = x.clone().svd(true, true).solve(&y, 0.0).unwrap();
    assert!((&x * map - &y).amax() < 1e-8);
    for s in &samples {
        let raw = model.denormalize_params(&s.params).unwrap();
        for (a, b) in s.landmarks.iter().zip(landmarks(&model, &spec, &raw)) {
            assert!((a - b).amax() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn synthesis_is_linear(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = dense_model(&mut rng, 20, 4, 3);
        let p = ParamVector::new(gauss_vec(&mut rng, 4), gauss_vec(&mut rng, 3), false);
        let q = ParamVector::new(gauss_vec(&mut rng, 4), gauss_vec(&mut rng, 3), false);
        let combo = |u: &[f64], w: &[f64]| u.iter().zip(w).map(|(x, y)| a * x + b * y).collect::<Vec<_>>();
        let mean = model.mean_face().as_slice().to_vec();
        let delta = |v: &ParamVector| -> Vec<f64> {
            model.synthesize(v).unwrap().to_flat().iter().zip(&mean).map(|(x, m)| x - m).collect()
        };
        for (shape_only, expr_only) in [(true, false), (false, true)] {
            let pick = |v: &ParamVector| ParamVector::new(
                if shape_only { v.shape.clone() } else { vec![0.0; 4] },
                if expr_only { v.expr.clone() } else { vec![0.0; 3] },
                false,
            );
            let (pp, qq) = (pick(&p), pick(&q));
            let lhs = delta(&ParamVector::new(combo(&pp.shape, &qq.shape), combo(&pp.expr, &qq.expr), false));
            let rhs = combo(&delta(&pp), &delta(&qq));
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pose_preserves_distances(seed in any::<u64>(), angle in -3.14..3.14f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let verts: Vec<_> = (0..30).map(|_| Vector3::from_fn(|_, _| gauss(&mut rng))).collect();
        let mesh = FaceMesh::new(verts, vec![]).unwrap();
        let axis = Vector3::from_fn(|_, _| gauss(&mut rng));
        let xf = RigidTransform::from_axis_angle(&axis, angle, Vector3::from_fn(|_, _| 5.0 * gauss(&mut rng)));
        let moved = mesh.apply_pose(&xf);
        for i in 0..30 {
            for j in 0..i {
                let before = (mesh.vertices[i] - mesh.vertices[j]).norm();
                let after = (moved.vertices[i] - moved.vertices[j]).norm();
                prop_assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normals_are_unit_and_flip(seed in any::<u64>()) {
        let model = gen_model(&SyntheticConfig { seed, n_vertices: 80, shape_dim: 3, expr_dim: 2, ..SyntheticConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ParamVector::new(gauss_vec(&mut rng, 3), gauss_vec(&mut rng, 2), false);
        let mesh = model.synthesize(&p).unwrap();
        let n = mesh.vertex_normals().unwrap();
        let f = mesh.flipped().vertex_normals().unwrap();
        for (a, b) in n.iter().zip(&f) {
            prop_assert!((a.norm() - 1.0).abs() < 1e-12);
            prop_assert!((a + b).amax() < 1e-12);
        }
    }

    #[test]
    fn normalization_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = ParamStats {
            shape_mean: gauss_vec(&mut rng, 5),
            shape_std: (0..5).map(|_| rng.random_range(0.01..10.0)).collect(),
            expr_mean: gauss_vec(&mut rng, 2),
            expr_std: (0..2).map(|_| rng.random_range(0.01..10.0)).collect(),
        };
        let p = ParamVector::new(gauss_vec(&mut rng, 5), gauss_vec(&mut rng, 2), false);
        let back = denormalize_params(&normalize_params(&p, Some(&stats)).unwrap(), Some(&stats)).unwrap();
        prop_assert!(!back.normalized);
        for (a, b) in back.stacked().iter().zip(p.stacked()) {
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn fit_is_a_global_minimum(seed in any::<u64>(), ls in 0.0..1.0f64, le in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = dense_model(&mut rng, 70, 5, 3);
        let spec = prefix_spec(70);
        let targets: Vec<_> = (0..LANDMARK_COUNT).map(|_| Vector3::from_fn(|_, _| gauss(&mut rng))).collect();
        let cfg = FitConfig::new(ls, le).unwrap();
        let best = fit(&model, &spec, &targets, &cfg).unwrap().params;
        let at = |p: &ParamVector| regularized_objective(&model, &spec, &targets, p, &cfg).unwrap();
        let base = at(&best);
        let values = best.stacked();
        for k in 0..values.len() {
            for h in [-1e-3, 1e-3] {
                let mut v = values.clone();
                v[k] += h;
                prop_assert!(at(&ParamVector::from_stacked(&v, 5, false)) >= base);
            }
        }
    }
}
