mod common;

use common::*;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tma_core::admm::{epoch, prox_group_soft_threshold, TrainerConfig};
use tma_core::eval::{cmc, mean_average_precision, ScoreMatrix};
use tma_core::metric::{dissimilarity, objective, similarity};
use tma_core::{Label, ModelState};

#[test]
fn subgradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (state, pair) = active_instance(&mut rng);
        let err = finite_difference_error(&state, &pair, 1e-6);
        assert!(err <= 1e-5, "relative error {err}");
    }
}

#[test]
fn prox_matches_numeric_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = gaussian_matrix(&mut rng, 5, 4);
    let dual = Array2::zeros((5, 4));
    let out = prox_group_soft_threshold(&m, &dual, 1.0, 0.3).unwrap();
    for i in 0..5 {
        let expected = numeric_prox(&m.row(i).to_owned(), 1.0, 0.3);
        for (a, b) in out.row(i).iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-6, "row {i}: {a} vs {b}");
        }
    }
    // rows inside the ball of radius weight/ρ vanish
    let small = Array2::from_elem((2, 3), 0.05);
    let out = prox_group_soft_threshold(&small, &Array2::zeros((2, 3)), 2.0, 0.3).unwrap();
    assert!(out.iter().all(|&x| x == 0.0));
    assert!(numeric_prox(&small.row(0).to_owned(), 2.0, 0.3).iter().all(|&x| x == 0.0));
}

fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn column(x: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.len(), 1), |(i, _)| x[i])
}

fn row(x: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((1, x.len()), |(_, j)| x[j])
}

/// Hinge gradients written out from the margin's definition.
fn grads(k: &Array2<f64>, p: &Array2<f64>, xp: &Array1<f64>, xg: &Array1<f64>, y: f64) -> (Array2<f64>, Array2<f64>) {
    let (kxp, kxg) = (matmul(k, &column(xp)), matmul(k, &column(xg)));
    let delta = xp - xg;
    let pd = matmul(p, &column(&delta));
    let sim: f64 = (0..kxp.nrows()).map(|i| kxp[[i, 0]] * kxg[[i, 0]]).sum();
    let dis: f64 = (0..pd.nrows()).map(|i| pd[[i, 0]] * pd[[i, 0]]).sum();
    if y * (sim - 0.5 * dis) >= 1.0 {
        return (Array2::zeros(k.dim()), Array2::zeros(p.dim()));
    }
    let gk = (matmul(&kxp, &row(xg)) + matmul(&kxg, &row(xp))) * -y;
    let gp = matmul(&pd, &row(&delta)) * y;
    (gk, gp)
}

fn shrink_rows(m: &Array2<f64>, dual: &Array2<f64>, rho: f64, weight: f64) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    for i in 0..m.nrows() {
        let v: Vec<f64> = (0..m.ncols()).map(|j| m[[i, j]] + dual[[i, j]] / rho).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            let factor = (1.0 - weight / (rho * norm)).max(0.0);
            for j in 0..m.ncols() {
                out[[i, j]] = v[j] * factor;
            }
        }
    }
    out
}

#[test]
fn single_pair_single_iteration_epoch_by_hand() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (r, d) = (3, 4);
    let mut checked = 0;
    while checked < 10 {
        let mut state = ModelState::from_projections(gaussian_matrix(&mut rng, r, d) * 0.3, gaussian_matrix(&mut rng, r, d) * 0.3).unwrap();
        state.u = gaussian_matrix(&mut rng, r, d) * 0.3;
        state.v = gaussian_matrix(&mut rng, r, d) * 0.3;
        state.lambda = gaussian_matrix(&mut rng, r, d) * 0.1;
        state.psi = gaussian_matrix(&mut rng, r, d) * 0.1;
        let (xp, xg) = (gaussian_vector(&mut rng, d), gaussian_vector(&mut rng, d));
        let label = if rng.random_bool(0.5) { Label::Same } else { Label::Different };
        let y = label.sign();
        let cfg = TrainerConfig {
            alpha: 0.05,
            beta: 0.02,
            eta: 0.3,
            rho: 1.5,
            iters_per_epoch: tma_core::admm::Iterations::Fixed(1),
            ..Default::default()
        };

        // snapshot: with one pair the average gradient is that pair's gradient
        let (sk, sp) = grads(&state.k, &state.p, &xp, &xg, y);
        // K̃ step at (K, P); the sampled term and its control variate cancel
        let (gk_now, _) = grads(&state.k, &state.p, &xp, &xg, y);
        let dir_k = &sk + &gk_now - &sk + (&state.k - &state.u) * cfg.rho + &state.lambda;
        let k1 = &state.k - &(dir_k * cfg.eta);
        // P̃ step with the sampled gradient at the new K̃
        let (_, gp_now) = grads(&k1, &state.p, &xp, &xg, y);
        let dir_p = &sp + &gp_now - &sp + (&state.p - &state.v) * cfg.rho + &state.psi;
        let p1 = &state.p - &(dir_p * cfg.eta);
        let u = shrink_rows(&k1, &state.lambda, cfg.rho, cfg.alpha);
        let v = shrink_rows(&p1, &state.psi, cfg.rho, cfg.beta);
        let lambda = &state.lambda + &((&k1 - &u) * cfg.rho);
        let psi = &state.psi + &((&p1 - &v) * cfg.rho);

        let data = vec![labeled(xp.clone(), xg.clone(), label)];
        let got = epoch(&state, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (name, a, b) in [("K", &got.k, &k1), ("P", &got.p, &p1), ("U", &got.u, &u), ("V", &got.v, &v), ("Λ", &got.lambda, &lambda), ("Ψ", &got.psi, &psi)] {
            for (x, z) in a.iter().zip(b.iter()) {
                assert!((x - z).abs() <= 1e-12 * (1.0 + z.abs()), "{name}: {x} vs {z}");
            }
        }
        checked += 1;
    }
}

#[test]
fn margin_parts_match_quadratic_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let k = gaussian_matrix(&mut rng, 3, 4);
    let (xp, xg) = (gaussian_vector(&mut rng, 4), gaussian_vector(&mut rng, 4));
    let m = matmul(&k.t().to_owned(), &k);
    let mut expected = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            expected += xp[i] * m[[i, j]] * xg[j];
        }
    }
    let got = similarity(k.view(), xp.view(), xg.view()).unwrap();
    assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    let delta = &xp - &xg;
    let mut expected = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            expected += delta[i] * m[[i, j]] * delta[j];
        }
    }
    let got = dissimilarity(k.view(), xp.view(), xg.view()).unwrap();
    assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
}

#[test]
fn objective_matches_resummation() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let state = ModelState::from_projections(gaussian_matrix(&mut rng, 2, 3), gaussian_matrix(&mut rng, 2, 3)).unwrap();
    let data: Vec<_> = (0..7)
        .map(|i| labeled(gaussian_vector(&mut rng, 3), gaussian_vector(&mut rng, 3), Label::from_match(i % 3 == 0)))
        .collect();
    let mut loss = 0.0;
    for pair in &data {
        let (xp, xg) = (&pair.probe.feature, &pair.gallery.feature);
        let sim = similarity(state.k.view(), xp.view(), xg.view()).unwrap();
        let dis = dissimilarity(state.p.view(), xp.view(), xg.view()).unwrap();
        loss += (1.0 - pair.y() * (sim - 0.5 * dis)).max(0.0);
    }
    let row_norms = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>();
    let expected = loss / 7.0 + 0.01 * row_norms(&state.k) + 0.02 * row_norms(&state.p);
    let got = objective(&state, &data, 0.01, 0.02).unwrap();
    assert!((got - expected).abs() <= 1e-12 * expected);
}

#[test]
fn cmc_and_map_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let (np, ng) = (rng.random_range(1..=12), rng.random_range(1..=20));
        let probe_ids: Vec<String> = (0..np).map(|_| rng.random_range(0..6).to_string()).collect();
        let gallery_ids: Vec<String> = (0..ng).map(|_| rng.random_range(0..6).to_string()).collect();
        let scores = Array2::from_shape_simple_fn((np, ng), || rng.random_range(0..4) as f64);
        let m = ScoreMatrix::new(probe_ids.clone(), gallery_ids.clone(), scores.clone()).unwrap();
        let (rates, map) = brute_force_cmc_map(&scores, &probe_ids, &gallery_ids);
        assert_eq!(cmc(&m).rates, rates);
        assert!((mean_average_precision(&m).0 - map).abs() <= 1e-12);
    }
}

#[test]
fn three_matches_per_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let probe_ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let gallery_ids: Vec<String> = (0..30).map(|j| (j % 10).to_string()).collect();
    let scores = Array2::from_shape_simple_fn((10, 30), || rng.random_range(-1.0..1.0));
    let m = ScoreMatrix::new(probe_ids.clone(), gallery_ids.clone(), scores.clone()).unwrap();
    let (_, map) = brute_force_cmc_map(&scores, &probe_ids, &gallery_ids);
    assert!((mean_average_precision(&m).0 - map).abs() <= 1e-12);
}

#[test]
fn duplicate_scores_follow_gallery_index() {
    // gallery 1 and 2 tie; the match sits at index 2 so it ranks second
    let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let scores = Array2::from_shape_vec((1, 3), vec![0.1, 0.5, 0.5]).unwrap();
    let m = ScoreMatrix::new(ids(&["a"]), ids(&["c", "b", "a"]), scores).unwrap();
    assert_eq!(cmc(&m).rates, vec![0.0, 1.0, 1.0]);
    // swapping the tied columns moves the match to the front
    let scores = Array2::from_shape_vec((1, 3), vec![0.1, 0.5, 0.5]).unwrap();
    let m = ScoreMatrix::new(ids(&["a"]), ids(&["c", "a", "b"]), scores).unwrap();
    assert_eq!(cmc(&m).rates, vec![1.0, 1.0, 1.0]);
    assert_eq!(mean_average_precision(&m).0, 1.0);
}
