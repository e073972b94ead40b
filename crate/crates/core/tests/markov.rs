use attn_stages::markov::{empirical_frequencies, sample_dataset, StationaryDistribution};
use attn_stages::{build_stationary, build_transition, Dataset, Error};
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn symmetric_low_tokens_share_mass() {
    let dist = build_stationary(4, 0.75, &[0.0, 0.0, 0.0], 0.0).unwrap();
    assert!(close(&dist.pi, &[0.75, 1.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0], 1e-15));
}

#[test]
fn perturbation_moves_mass_between_low_tokens() {
    let dist = build_stationary(3, 0.75, &[1.0, -1.0], 0.01).unwrap();
    assert!(close(&dist.pi, &[0.75, 0.135, 0.115], 1e-12), "{:?}", dist.pi);
}

#[test]
fn perturbation_too_large_is_rejected() {
    let err = build_stationary(3, 0.75, &[1.0, -1.0], 0.2).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { .. }), "{err}");
}

#[test]
fn two_state_chain_matches_hand_computation() {
    let dist = StationaryDistribution::from_probs(&[0.75, 0.25]).unwrap();
    let spec = build_transition(dist, 0.8).unwrap();
    let want = [[0.95, 0.05], [0.15, 0.85]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((spec.p[(i, j)] - want[i][j]).abs() < 1e-15);
        }
    }
}

#[test]
fn sticky_chain_rarely_switches() {
    let dist = build_stationary(3, 0.5, &[0.0, 0.0], 0.0).unwrap();
    let lambda = 0.999;
    let spec = build_transition(dist, lambda).unwrap();
    let (n, s) = (1000, 1000);
    let data = sample_dataset(&spec, n, s, 11).unwrap();
    let mut switches = 0usize;
    for i in 0..n {
        let x = data.sequence(i);
        switches += x.windows(2).filter(|w| w[0] != w[1]).count();
    }
    // a switch needs a fresh draw (prob 1−λ) that lands on another token
    let pi: &[f64] = spec.pi();
    let p_other = 1.0 - pi.iter().map(|p| p * p).sum::<f64>();
    let expected = (n * (s - 1)) as f64 * (1.0 - lambda) * p_other;
    let rel = (switches as f64 - expected).abs() / expected;
    assert!(rel < 0.15, "switches {switches}, expected {expected}");
}

#[test]
fn labels_follow_transition_rows() {
    let dist = build_stationary(3, 0.6, &[0.0, 0.0], 0.0).unwrap();
    let spec = build_transition(dist, 0.5).unwrap();
    let data = sample_dataset(&spec, 40_000, 4, 5).unwrap();
    let mut counts = [[0f64; 3]; 3];
    for i in 0..data.n {
        let last = *data.sequence(i).last().unwrap() as usize;
        counts[last][data.labels[i] as usize] += 1.0;
    }
    for (i, row) in counts.iter().enumerate() {
        let tot: f64 = row.iter().sum();
        for j in 0..3 {
            let p = spec.p[(i, j)];
            let se = (p * (1.0 - p) / tot).sqrt();
            assert!((row[j] / tot - p).abs() < 5.0 * se, "P[{i},{j}]");
        }
    }
}

#[test]
fn sampling_is_reproducible() {
    let spec = build_transition(build_stationary(4, 0.7, &[0.0; 3], 0.0).unwrap(), 0.8).unwrap();
    let a = sample_dataset(&spec, 50, 20, 9).unwrap();
    let b = sample_dataset(&spec, 50, 20, 9).unwrap();
    let c = sample_dataset(&spec, 50, 20, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.sequences, c.sequences);
}

#[test]
fn truncated_binary_is_rejected() {
    let spec = build_transition(build_stationary(3, 0.7, &[0.0; 2], 0.0).unwrap(), 0.8).unwrap();
    let data = sample_dataset(&spec, 5, 6, 1).unwrap();
    let mut buf = Vec::new();
    data.write_binary(&mut buf).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(Dataset::read_binary(&buf[..]).is_err());
    assert!(Dataset::read_binary(&b"XXXX"[..]).is_err());
}

fn arb_pi() -> impl Strategy<Value = Vec<f64>> {
    // the first token is the most frequent one
    prop::collection::vec(0.01f64..1.0, 2..7).prop_map(|mut w| {
        w.sort_by(|a, b| b.total_cmp(a));
        w[0] *= 1.5;
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_is_stochastic_and_stationary(pi in arb_pi(), lambda in 0.0f64..0.999) {
        let spec = build_transition(StationaryDistribution::from_probs(&pi).unwrap(), lambda).unwrap();
        let d = pi.len();
        for i in 0..d {
            let row: f64 = (0..d).map(|j| spec.p[(i, j)]).sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
            for j in 0..d {
                prop_assert!(spec.p[(i, j)] >= 0.0);
            }
        }
        prop_assert!(spec.stationarity_residual() < 1e-12);
    }

    #[test]
    fn perturbed_distribution_sums_to_one(d in 3usize..7, pi1 in 0.3f64..0.9, delta in 0.0f64..0.01, seed in 0u64..1000) {
        let mut c: Vec<f64> = (0..d - 1).map(|k| ((seed + k as u64) % 7) as f64 - 3.0).collect();
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        c.iter_mut().for_each(|x| *x -= mean);
        if let Ok(dist) = build_stationary(d, pi1, &c, delta) {
            prop_assert!((dist.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((dist.pi[0] - pi1).abs() < 1e-15);
            prop_assert!(dist.pi.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn datasets_survive_both_formats(pi in arb_pi(), n in 1usize..20, s in 1usize..12, seed in any::<u64>()) {
        let spec = build_transition(StationaryDistribution::from_probs(&pi).unwrap(), 0.7).unwrap();
        let data = sample_dataset(&spec, n, s, seed).unwrap();
        prop_assert!(data.sequences.iter().chain(&data.labels).all(|&t| (t as usize) < pi.len()));
        let back = Dataset::from_json(&data.to_json()).unwrap();
        prop_assert_eq!(&back, &data);
        let mut buf = Vec::new();
        data.write_binary(&mut buf).unwrap();
        prop_assert_eq!(&Dataset::read_binary(&buf[..]).unwrap(), &data);
        let f = empirical_frequencies(&data);
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
