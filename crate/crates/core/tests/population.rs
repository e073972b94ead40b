use attn_stages::critical::find_kappa1;
use attn_stages::markov::StationaryDistribution;
use attn_stages::model::init_params;
use attn_stages::population::{
    entropy_floor, param_gradient_population, population_forward, population_from_mphi, population_loss,
    proxy_attention_phi,
};
use attn_stages::reduced::RankOneState;
use attn_stages::{build_stationary, build_transition, Mat, MarkovSpec, ModelParams};
use proptest::prelude::*;

fn spec_from(pi: &[f64], lambda: f64) -> MarkovSpec {
    build_transition(StationaryDistribution::from_probs(pi).unwrap(), lambda).unwrap()
}

fn two_group(d: usize, pi1: f64, lambda: f64) -> MarkovSpec {
    build_transition(build_stationary(d, pi1, &vec![0.0; d - 1], 0.0).unwrap(), lambda).unwrap()
}

#[test]
fn scalar_attention_example() {
    let phi = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let a = proxy_attention_phi(&phi, &[0.75, 0.25]);
    let e = std::f64::consts::E;
    let want = 0.75 * e / (0.75 * e + 0.25);
    assert!((a[(0, 0)] - want).abs() < 1e-15);
    assert!((a[(0, 0)] - 0.8907).abs() < 1e-4);
    assert!((a[(1, 0)] - 0.75).abs() < 1e-15);
}

#[test]
fn origin_gradients() {
    let pi = [0.6, 0.3, 0.1];
    let spec = spec_from(&pi, 0.7);
    let st = population_forward(&ModelParams::zeros(3, 4), &spec).unwrap();
    for k in 0..3 {
        for j in 0..3 {
            let want = -pi[k] * (pi[j] - 1.0 / 3.0);
            assert!((st.g_m[(k, j)] - want).abs() < 1e-15);
            assert_eq!(st.g_phi[(k, j)], 0.0);
        }
    }
    let g = param_gradient_population(&ModelParams::zeros(3, 4), &spec).unwrap();
    assert!(g.to_flat().iter().all(|&x| x == 0.0));
}

#[test]
fn second_critical_point_phi_gradient() {
    for (d, pi1, lambda) in [(2, 0.75, 0.8), (3, 0.75, 0.8), (4, 0.6, 0.5)] {
        let spec = two_group(d, pi1, lambda);
        let cp = find_kappa1(&spec, 4, None).unwrap();
        let k = cp.kappa1.unwrap();
        let st = population_forward(&cp.params, &spec).unwrap();
        assert!(st.g_m.norm() < 1e-10);
        let pi = spec.pi();
        let var = Mat::from_fn(d, d, |i, j| if i == j { pi[i] } else { 0.0 } - pi[i] * pi[j]);
        let v: Vec<f64> = pi.iter().map(|p| p - 1.0 / d as f64).collect();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pn = pi.iter().map(|x| x * x).sum::<f64>().sqrt();
        let uq = Mat::from_fn(d, d, |i, j| v[i] / vn * pi[j] / pn);
        let want = &var * uq * &var * (-lambda * k * k);
        assert!((&st.g_phi - want).amax() < 1e-8, "d={d}");
    }
}

#[test]
fn one_hot_attention_kills_phi_gradient() {
    let spec = spec_from(&[0.5, 0.3, 0.2], 0.6);
    let phi = Mat::from_row_slice(3, 3, &[2000.0, 0.0, 0.0, 2000.0, 0.0, 0.0, 0.0, 0.0, 2000.0]);
    let mm = Mat::from_row_slice(3, 3, &[1.0, -2.0, 0.5, 0.3, 0.1, -1.0, 2.0, 0.0, 1.0]);
    let st = population_from_mphi(&mm, &phi, &spec);
    assert!(st.g_phi.amax() < 1e-12);
}

#[test]
fn attention_focuses_far_along_the_ray() {
    let spec = two_group(3, 0.75, 0.8);
    let pi = spec.pi();
    let pn2: f64 = pi.iter().map(|x| x * x).sum();
    let s = 40.0 / (pn2 * pi[0]);
    let phi = Mat::from_fn(3, 3, |i, j| s * pi[i] * pi[j]);
    let a = proxy_attention_phi(&phi, pi);
    // rows weighted by smaller π_i focus less; the first row gets the full level
    assert!(a[(0, 0)] > 0.99);
    for i in 0..3 {
        assert!(a[(i, 0)] > pi[0]);
    }
}

fn arb_pi() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, 2..6).prop_map(|mut w| {
        w.sort_by(|a, b| b.total_cmp(a));
        w[0] *= 1.5;
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    })
}

fn permute_low(p: &ModelParams, perm: &[usize]) -> ModelParams {
    let mut q = p.clone();
    for (i, &j) in perm.iter().enumerate() {
        for a in 0..p.m {
            q.w0[(j, a)] = p.w0[(i, a)];
            q.w1[(a, j)] = p.w1[(a, i)];
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rows_are_stochastic_and_loss_is_bounded(pi in arb_pi(), lambda in 0.0f64..0.95, seed in 0u64..1000, scale in 0.01f64..3.0) {
        let d = pi.len();
        let spec = spec_from(&pi, lambda);
        let p = init_params(d, 4, scale, seed).unwrap();
        let st = population_forward(&p, &spec).unwrap();
        for i in 0..d {
            prop_assert!((st.a.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert!((st.pm.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert!(st.a.row(i).iter().chain(st.pm.row(i).iter()).all(|&x| x >= 0.0));
        }
        prop_assert!(st.loss >= entropy_floor(&spec) - 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..1000, scale in 0.05f64..0.8) {
        let spec = spec_from(&[0.55, 0.3, 0.15], 0.7);
        let p = init_params(3, 4, scale, seed).unwrap();
        let g = param_gradient_population(&p, &spec).unwrap().to_flat();
        let h = 1e-5;
        for i in 0..g.len() {
            let mut e = vec![0.0; g.len()];
            e[i] = 1.0;
            let fd = (population_loss(&p.offset(h, &e), &spec).unwrap()
                - population_loss(&p.offset(-h, &e), &spec).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6f64.max(1e-4 * g[i].abs()), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn relabelling_low_tokens_leaves_loss_unchanged(pi in arb_pi(), seed in 0u64..1000) {
        let d = pi.len();
        prop_assume!(d >= 3);
        // reverse the low-frequency tokens, keep token 1 in place
        let perm: Vec<usize> = (0..d).map(|i| if i == 0 { 0 } else { d - i }).collect();
        let mut pi2 = vec![0.0; d];
        for (i, &j) in perm.iter().enumerate() {
            pi2[j] = pi[i];
        }
        let a = population_loss(&init_params(d, 3, 0.7, seed).unwrap(), &spec_from(&pi, 0.6)).unwrap();
        let b = population_loss(&permute_low(&init_params(d, 3, 0.7, seed).unwrap(), &perm), &spec_from(&pi2, 0.6)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_tangent_to_rank_one_manifold(
        g in prop::collection::vec(-1.0f64..1.0, 3),
        b in prop::collection::vec(-1.0f64..1.0, 3),
        eta in -2.0f64..2.0,
    ) {
        let spec = two_group(3, 0.7, 0.8);
        let m = 4;
        let s = RankOneState::balanced(g, b, eta, m).unwrap();
        let grad = param_gradient_population(&s.lift(), &spec).unwrap();
        let a = attn_stages::linalg::Vec64::from_column_slice(&s.alpha1);
        let at = attn_stages::linalg::Vec64::from_column_slice(&s.alpha1_tilde);
        let pa = &a * a.transpose();
        let pat = &at * at.transpose();
        let eye = Mat::identity(m, m);
        let normal = [
            (&grad.gw0 * (&eye - &pa)).norm(),
            ((&eye - &pa) * &grad.gw1).norm(),
            (&grad.gwq - &pa * &grad.gwq * &pat).norm(),
            (&grad.gwk - &pa * &grad.gwk * &pat).norm(),
        ];
        prop_assert!(normal.iter().all(|&x| x < 1e-10), "{normal:?}");
    }
}
