//! Tabular checks against independent computations: value iteration,
//! Monte-Carlo returns, truncated visitation series and direct double sums.

use dsppo_core::oracle::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn value_iteration(mdp: &TabularMdp, pi: &TabularPolicy, iters: usize) -> Vec<f64> {
    let (s, a) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; s];
    for _ in 0..iters {
        v = (0..s)
            .map(|i| {
                (0..a)
                    .map(|j| {
                        let next: f64 = (0..s).map(|k| mdp.prob(i, j, k) * v[k]).sum();
                        pi.prob(i, j) * (mdp.reward(i, j) + mdp.gamma * next)
                    })
                    .sum()
            })
            .collect();
    }
    v
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[test]
fn exact_value_matches_value_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for gamma in [0.5, 0.9, 0.95] {
        let mdp = random_mdp(5, 3, gamma, &mut rng).unwrap();
        let pi = random_policy(5, 3, &mut rng);
        let exact = exact_value(&mdp, &pi).unwrap();
        let vi = value_iteration(&mdp, &pi, 10_000);
        for (x, y) in exact.iter().zip(&vi) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }
}

#[test]
fn eta_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mdp = random_mdp(4, 2, 0.5, &mut rng).unwrap();
    let pi = random_policy(4, 2, &mut rng);
    // geometric episode termination gives an unbiased estimate of the discounted return
    let mut returns = Vec::new();
    let mut steps = 0usize;
    while steps < 1_000_000 {
        let mut s = sample(&mdp.rho0, &mut rng);
        let mut total = 0.0;
        loop {
            let a = sample(pi.row(s), &mut rng);
            total += mdp.reward(s, a);
            steps += 1;
            if rng.gen::<f64>() >= mdp.gamma {
                break;
            }
            let row: Vec<f64> = (0..mdp.n_states).map(|k| mdp.prob(s, a, k)).collect();
            s = sample(&row, &mut rng);
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let exact = eta(&mdp, &pi).unwrap();
    assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
}

#[test]
fn visitation_matches_truncated_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mdp = random_mdp(6, 3, 0.9, &mut rng).unwrap();
    let pi = random_policy(6, 3, &mut rng);
    let s = mdp.n_states;
    let mut dist = mdp.rho0.clone();
    let mut series = vec![0.0; s];
    let mut w = 1.0;
    for _ in 0..=1000 {
        for i in 0..s {
            series[i] += w * dist[i];
        }
        let mut next = vec![0.0; s];
        for i in 0..s {
            for a in 0..mdp.n_actions {
                for k in 0..s {
                    next[k] += dist[i] * pi.prob(i, a) * mdp.prob(i, a, k);
                }
            }
        }
        dist = next;
        w *= mdp.gamma;
    }
    let rho = discounted_visitation(&mdp, &pi).unwrap();
    assert!((rho.sum() - 1.0).abs() < 1e-10);
    for (x, y) in rho.iter().zip(&series) {
        assert!((x - (1.0 - mdp.gamma) * y).abs() < 1e-8);
    }
}

#[test]
fn surrogate_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..20 {
        let mdp = random_mdp(5, 3, 0.9, &mut rng).unwrap();
        let (pi1, pi2) = (random_policy(5, 3, &mut rng), random_policy(5, 3, &mut rng));
        let v = value_iteration(&mdp, &pi1, 2000);
        let rho = discounted_visitation(&mdp, &pi1).unwrap();
        let mut acc = 0.0;
        for s in 0..5 {
            for a in 0..3 {
                let q = mdp.reward(s, a) + mdp.gamma * (0..5).map(|k| mdp.prob(s, a, k) * v[k]).sum::<f64>();
                acc += rho[s] * pi2.prob(s, a) * (q - v[s]);
            }
        }
        let eta1: f64 = mdp.rho0.iter().zip(&v).map(|(p, x)| p * x).sum();
        let direct = eta1 + acc / (1.0 - mdp.gamma);
        assert!((surrogate(&mdp, &pi1, &pi2).unwrap() - direct).abs() < 1e-12 * direct.abs().max(1.0) * 100.0);
    }
}

#[test]
fn greedy_improvement_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..20 {
        let mdp = random_mdp(5, 3, 0.9, &mut rng).unwrap();
        let pi = random_policy(5, 3, &mut rng);
        let g = greedy(&exact_q(&mdp, &pi).unwrap());
        assert!(eta(&mdp, &g).unwrap() >= eta(&mdp, &pi).unwrap() - 1e-12);
        assert!(perf_diff_check(&mdp, &pi, &g).unwrap() < 1e-8);
    }
}

#[test]
fn improvement_holds_for_greedy_on_many_mdps() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mdp = random_mdp(rng.gen_range(2..=8), rng.gen_range(2..=4), [0.5, 0.9, 0.95][seed as usize % 3], &mut rng)
            .unwrap();
        let pi1 = random_policy(mdp.n_states, mdp.n_actions, &mut rng);
        let g = greedy(&exact_advantage(&mdp, &pi1).unwrap());
        let t = improvement_check(&mdp, &pi1, &g).unwrap().expect("greedy improves the surrogate");
        assert!(t.holds, "seed {seed}: slack {}", t.slack);
    }
}

#[test]
fn near_deterministic_small_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mdp = random_mdp(4, 3, 0.9, &mut rng).unwrap();
    let base = TabularPolicy::deterministic(3, &[0, 1, 2, 0]);
    let pi1 = base.mix(&TabularPolicy::uniform(4, 3), 1e-3);
    let g = greedy(&exact_advantage(&mdp, &pi1).unwrap());
    let pi2 = pi1.mix(&g, 1e-4);
    let t = improvement_check(&mdp, &pi1, &pi2).unwrap().unwrap();
    assert!(t.holds && t.slack < 1e-2, "{t:?}");
}

#[test]
fn full_suite_on_1000_instances() {
    let start = std::time::Instant::now();
    let rep = run_suite(1000, 7).unwrap();
    println!("{}", rep.render());
    assert!(rep.passed());
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn tv_max_matches_brute_force(seed in 0u64..10_000, s in 1usize..6, a in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = (random_policy(s, a, &mut rng), random_policy(s, a, &mut rng));
        let mut best = 0.0f64;
        for i in 0..s {
            let mut d = 0.0;
            for j in 0..a {
                d += (p.prob(i, j) - q.prob(i, j)).abs();
            }
            best = best.max(d / 2.0);
        }
        prop_assert_eq!(tv_max(&p, &q), best);
        prop_assert!((0.0..=1.0).contains(&best));
    }

    #[test]
    fn performance_difference_holds(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(4, 3, 0.9, &mut rng).unwrap();
        let (p, q) = (random_policy(4, 3, &mut rng), random_policy(4, 3, &mut rng));
        prop_assert!(perf_diff_check(&mdp, &p, &q).unwrap() < 1e-8);
        let g = gap_bound_check(&mdp, &p, &q).unwrap();
        prop_assert!(g.linear_ok);
    }
}
