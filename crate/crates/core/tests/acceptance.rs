//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary (`harness = false`) so the lines
//! are always printed:
//!
//! ```text
//! cargo test -p dsppo-core --test acceptance
//! ```
//!
//! The learning criterion trains nine 150-episode runs and dominates the
//! runtime; set `DSPPO_SKIP_LEARNING=1` to report it as SKIP.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use dsppo_core::channel::discretize_delay;
use dsppo_core::config::{ExperimentConfig, Mode};
use dsppo_core::constellation::{build_constellation, select_cluster};
use dsppo_core::dsppo::{final_mean, run_baseline, run_training, Baseline};
use dsppo_core::env::{
    power_penalty, rate_level, stage1_reward, stage2_reward, trend, Environment, JointAction, RewardThresholds,
};
use dsppo_core::flops::{episode_flops, ArchSpec, PUBLISHED};
use dsppo_core::oracle::run_suite;
use dsppo_core::ppo::{gae, total_loss, ActorCritic, Batch};
use dsppo_core::precoding::{project_power, trace_power, CMatrix, Tpm};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LEARNING_PROFILE: &str = include_str!("../../../configs/acceptance_learning.toml");

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass: Some(pass), detail: detail.into() }
    }
}

fn cmat(m: usize, k: usize, scale: f64, rng: &mut ChaCha8Rng) -> CMatrix {
    CMatrix::from_fn(m, k, |_, _| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * scale)
}

fn frob(a: &CMatrix) -> f64 {
    trace_power(a).sqrt()
}

// 1 ------------------------------------------------------------------------

fn golden_projection(v: &CMatrix, radius: f64) -> CMatrix {
    let f = |t: f64| {
        let p = v * Complex64::new(t, 0.0);
        frob(&(v - &p)) + 1e6 * (frob(&p) - radius).max(0.0)
    };
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    v * Complex64::new((a + b) / 2.0, 0.0)
}

fn projection() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut worst, mut idem, mut inside_ok, mut inside) = (0.0f64, 0.0f64, true, 0);
    for _ in 0..1000 {
        let (m, k) = (rng.gen_range(1..=12), rng.gen_range(1..=6));
        let radius: f64 = rng.gen_range(0.1..5.0);
        let v = cmat(m, k, rng.gen_range(0.01..3.0), &mut rng);
        let p = project_power(&v, radius);
        worst = worst.max(frob(&(&p - golden_projection(&v, radius))));
        idem = idem.max(frob(&(project_power(&p, radius) - &p)));
        if frob(&v) <= radius {
            inside += 1;
            inside_ok &= p == v;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && idem < 1e-12 && inside_ok && secs < 5.0;
    Outcome::new(
        pass,
        format!("1000 matrices, max distance to line-search optimum {worst:.2e}, idempotence {idem:.1e}, {inside} inside the ball unchanged: {inside_ok}, {secs:.2}s"),
    )
}

// 2 ------------------------------------------------------------------------

fn quantizer_oracle(c: f64) -> f64 {
    let xi = [120.0, 150.0, 210.0, 270.0, 360.0];
    if c <= xi[0] {
        -2.0
    } else if c <= xi[1] {
        -1.0
    } else if c <= xi[2] {
        0.0
    } else if c <= xi[3] {
        1.0
    } else if c <= xi[4] {
        2.0
    } else {
        2.0 + c.ceil() - xi[4]
    }
}

fn with_power(power: f64, rng: &mut ChaCha8Rng) -> CMatrix {
    let v = cmat(9, 2, 1.0, rng);
    &v * Complex64::new((power / trace_power(&v)).sqrt(), 0.0)
}

fn rewards() -> Outcome {
    let th = RewardThresholds::default();
    let eps = 1e-6;
    let mut points = vec![400.0];
    for b in [120.0, 150.0, 210.0, 270.0, 360.0] {
        points.extend([b - eps, b, b + eps]);
    }
    let f_bad = points.iter().filter(|&&c| rate_level(c, &th) != quantizer_oracle(c)).count();
    let at400 = rate_level(400.0, &th);

    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let budget = 10.0;
    let mut grid_bad = 0;
    for i in 0..50 {
        let c: f64 = rng.gen_range(1.0..500.0);
        let c_prev = match i % 3 {
            0 => c,
            1 => c + rng.gen_range(0.1..50.0),
            _ => c - rng.gen_range(0.1..0.9) * c,
        };
        let power = budget * rng.gen_range(0.0..1.5);
        let v = with_power(power, &mut rng);
        let tr = trace_power(&v);
        let sign = if c > c_prev {
            1.0
        } else if c < c_prev {
            -1.0
        } else {
            0.0
        };
        let g = sign * 1.5 - 0.5;
        let p = 0.3 * (tr - budget).abs();
        let step = if c_prev < c { 1.0 } else { -1.0 };
        let r2 = c.max(1e-6).ln() - p + step;
        let ok = trend(c, c_prev) == g
            && power_penalty(&v, budget) == p
            && stage1_reward(c, c_prev, &v, &th, budget) == quantizer_oracle(c) + g - p
            && (stage2_reward(c, c_prev, &v, budget) - r2).abs() == 0.0;
        grid_bad += usize::from(!ok);
    }
    Outcome::new(
        f_bad == 0 && at400 == 42.0 && grid_bad == 0,
        format!("{} boundary points with {f_bad} mismatches, f(400) = {at400}, {grid_bad}/50 grid cases differ from g and p formulas", points.len()),
    )
}

// 3 ------------------------------------------------------------------------

fn gae_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.gen_range(1..=64);
        let r: Vec<f64> = (0..t).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..t).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let last = rng.gen_range(-5.0..5.0);
        let (g, l) = (rng.gen_range(0.5..1.0), rng.gen_range(0.0..1.0));
        let fast = gae(&r, &v, last, g, l);
        for (i, a) in fast.iter().enumerate() {
            let mut acc = 0.0;
            let mut w = 1.0;
            for j in i..t {
                let next = if j + 1 < t { v[j + 1] } else { last };
                acc += w * (r[j] + g * next - v[j]);
                w *= g * l;
            }
            worst = worst.max((a - acc).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(worst < 1e-12 && secs < 1.0, format!("100 rollouts, max |error| {worst:.2e}, {secs:.3}s"))
}

// 4 ------------------------------------------------------------------------

fn gradients() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (obs, act) = (rng.gen_range(2..=8), rng.gen_range(1..=4));
        let mut ac = ActorCritic::new(obs, act, &[6, 5], &[7, 4], &mut rng).unwrap();
        let mut flat = ac.flat_params();
        flat.iter_mut().for_each(|w| *w += rng.gen_range(-0.3..0.3));
        ac.set_flat_params(&flat);
        let b = 7;
        let states = DMatrix::from_fn(b, obs, |_, _| rng.gen_range(-1.0..1.0));
        let mut actions = DMatrix::zeros(b, act);
        let mut old = Vec::new();
        for r in 0..b {
            let s: Vec<f64> = states.row(r).iter().copied().collect();
            let (a, lp) = ac.policy.sample(&s, &mut rng).unwrap();
            for (i, x) in a.iter().enumerate() {
                actions[(r, i)] = *x;
            }
            old.push(lp + rng.gen_range(-0.3..0.3));
        }
        let batch = Batch {
            states,
            actions,
            old_log_probs: old,
            advantages: (0..b).map(|_| rng.sample(StandardNormal)).collect(),
            value_targets: (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let (eps, c1, c2) = (0.2, 0.5, 0.01);
        let out = total_loss(&batch, &ac, eps, c1, c2).unwrap();
        let base = ac.flat_params();
        for i in 0..base.len() {
            let shifted = |d: f64| {
                let mut p = base.clone();
                p[i] += d;
                let mut n = ac.clone();
                n.set_flat_params(&p);
                total_loss(&batch, &n, eps, c1, c2).unwrap().loss
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            worst = worst.max((fd - out.grad[i]).abs() / fd.abs().max(out.grad[i].abs()).max(1e-6));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-4 && secs < 30.0,
        format!("20 seeds, {checked} parameters, max relative error {worst:.2e}, {secs:.2}s"),
    )
}

// 5 ------------------------------------------------------------------------

fn verification() -> Outcome {
    let start = Instant::now();
    let rep = run_suite(1000, 7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        rep.passed() && secs < 60.0,
        format!(
            "{} MDPs, bound violations {}, PDL residual {:.1e}, surrogate self-residual {:.1e}, {} improving pairs with {} violations, {} linear-bound violations, {secs:.1}s",
            rep.instances,
            rep.bound_violations,
            rep.max_pdl_residual,
            rep.max_surrogate_self_residual,
            rep.improvement_checked,
            rep.improvement_violations,
            rep.linear_violations
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn flops_table() -> Outcome {
    let start = Instant::now();
    let mut per = Vec::new();
    let mut within = true;
    let mut min_share = f64::INFINITY;
    let mut min_training = f64::INFINITY;
    let mut get = |l: usize, k: usize| {
        let r = episode_flops(&ArchSpec::new(9, k, l).unwrap(), 512, 30, 10);
        min_share = min_share.min(r.neural_share());
        min_training = min_training.min(r.training_share());
        r.episode as f64 / 1e9
    };
    for &(l, k, published, _) in PUBLISHED.iter().take(6) {
        let g = get(l, k);
        within &= (g / published - 1.0).abs() <= 0.2;
        per.push(format!("({l},{k}) {g:.2} vs {published}"));
    }
    let ratio = get(6, 2) / get(4, 2);
    let ratio_ok = (1.45..=1.60).contains(&ratio);
    let share_ok = min_share > 0.99;
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        within && ratio_ok && share_ok && secs < 1.0,
        format!(
            "GFLOPS/episode {} (within 20%: {within}); (6,2)/(4,2) = {ratio:.3} (in band: {ratio_ok}); network share min {:.3}% (training term alone {:.2}%)",
            per.join(", "),
            100.0 * min_share,
            100.0 * min_training
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn learning_config(seed: u64, td: u64, mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(LEARNING_PROFILE).expect("acceptance learning profile is valid");
    cfg.train.seed = seed;
    cfg.train.mode = mode;
    cfg.env.td = Some(td);
    cfg.train.checkpoint_every = 0;
    cfg
}

fn learning() -> Outcome {
    if std::env::var_os("DSPPO_SKIP_LEARNING").is_some() {
        return Outcome { pass: None, detail: "skipped (DSPPO_SKIP_LEARNING set)".into() };
    }
    let start = Instant::now();
    let probe = learning_config(1, 3, Mode::Dsppo);
    let env = &probe.env;
    let shape_ok = probe.env.radio == Default::default()
        && env.l == 4
        && env.k == 2
        && env.m() == 9
        && env.steps_per_episode == 512
        && probe.train.episodes >= 150;
    let seeds = [1u64, 2, 3];
    let tmp = tempfile::tempdir().unwrap();
    let run = |seed: u64, td: u64, mode: Mode| -> f64 {
        let cfg = learning_config(seed, td, mode);
        let dir = tmp.path().join(format!("{mode:?}-td{td}-s{seed}"));
        let s = run_training(&cfg, &dir).unwrap();
        eprintln!("  learning: {mode:?} T_d={td} seed {seed}: final-20% mean {:.1} Mbps", s.final_mean);
        s.final_mean
    };
    let mut a_ok = true;
    let (mut d3, mut d0, mut ip) = (Vec::new(), Vec::new(), Vec::new());
    let mut lines = Vec::new();
    for &seed in &seeds {
        let cfg = learning_config(seed, 3, Mode::Dsppo);
        let random = final_mean(&run_baseline(&cfg, Baseline::Random, cfg.train.episodes).unwrap(), 0.2);
        let x3 = run(seed, 3, Mode::Dsppo);
        let x0 = run(seed, 0, Mode::Dsppo);
        let xi = run(seed, 3, Mode::Ippo);
        a_ok &= x3 >= 2.0 * random;
        lines.push(format!("seed {seed}: random {random:.1}, DS-PPO {x3:.1} (T_d=0 {x0:.1}), IPPO {xi:.1}"));
        d3.push(x3);
        d0.push(x0);
        ip.push(xi);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = (mean(&d3) - mean(&d0)).abs() / mean(&d0);
    let b_ok = gap < 0.15;
    let ratio = mean(&d3) / mean(&ip);
    let c_ok = ratio >= 1.2;
    let secs = start.elapsed().as_secs_f64();
    let time_ok = secs <= 7200.0;
    Outcome::new(
        shape_ok && a_ok && b_ok && c_ok && time_ok,
        format!(
            "{}; (a) >= 2x random on every seed: {a_ok}; (b) T_d gap {:.1}% < 15%: {b_ok}; (c) DS-PPO/IPPO {ratio:.2} >= 1.2: {c_ok}; default radio and shape: {shape_ok}; {:.0} min",
            lines.join("; "),
            100.0 * gap,
            secs / 60.0
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn delay_and_handover() -> Outcome {
    let start = Instant::now();
    let td = discretize_delay(2.5e-3, 1e-3);
    let mut cfg = ExperimentConfig::default().env;
    cfg.td = Some(0);
    let mut env = Environment::reset(&cfg, 11).unwrap();
    let sats = build_constellation(&cfg.scenario.shells).unwrap();
    let steps = (300.0 / cfg.dt_s).round() as usize;
    let (m, k, p) = (cfg.m(), cfg.k, cfg.budget());
    let (mut cluster_bad, mut checked, mut events_bad, mut events) = (0, 0, 0, 0);
    let (mut flags_bad, mut expect_flag) = (0, false);
    for i in 0..steps {
        if i % 250 == 0 {
            let t = env.time();
            let states: Vec<_> = sats.iter().map(|s| s.propagate(t)).collect();
            let brute = select_cluster(&states, &env.center(), cfg.l, env.epoch()).unwrap();
            let want: BTreeSet<usize> = brute.members.into_iter().collect();
            let got: BTreeSet<usize> = env.slots().iter().copied().collect();
            cluster_bad += usize::from(want != got);
            checked += 1;
        }
        let before: BTreeSet<usize> = env.slots().iter().copied().collect();
        let logged = env.handovers().len();
        let zeros: Vec<Tpm> = env.slots().iter().map(|&s| Tpm::zeros(s, m, k, p)).collect();
        let (_, rec) = env.step(JointAction { stage1: zeros.clone(), stage2: zeros }).unwrap();
        flags_bad += usize::from(rec.handover != expect_flag);
        let after: BTreeSet<usize> = env.slots().iter().copied().collect();
        let new_events = &env.handovers()[logged..];
        let left: BTreeSet<usize> = new_events.iter().map(|(_, e)| e.left).collect();
        let joined: BTreeSet<usize> = new_events.iter().map(|(_, e)| e.joined).collect();
        let want_left: BTreeSet<usize> = before.difference(&after).copied().collect();
        let want_joined: BTreeSet<usize> = after.difference(&before).copied().collect();
        events_bad += usize::from(left != want_left || joined != want_joined || new_events.len() != want_left.len());
        events += new_events.len();
        // the record of the following epoch carries the membership change
        expect_flag = !new_events.is_empty();
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        td == 3 && cluster_bad == 0 && events_bad == 0 && flags_bad == 0,
        format!(
            "T_d(2.5 ms at 1 ms) = {td}; {checked} brute-force cluster checks, {cluster_bad} mismatches; {events} handover events over 5 min, {events_bad} steps disagree with membership differences, {flags_bad} misflagged records; {secs:.1}s"
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.train.episodes = 3;
    cfg.train.checkpoint_every = 0;
    cfg.train.seed = 17;
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_training(&cfg, &a).unwrap();
    run_training(&cfg, &b).unwrap();
    let fa = std::fs::read(a.join("episodic_rate.csv")).unwrap();
    let fb = std::fs::read(b.join("episodic_rate.csv")).unwrap();
    Outcome::new(
        fa == fb && !fa.is_empty(),
        format!("two 3-episode default runs, {} bytes each, identical: {}", fa.len(), fa == fb),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("projection correctness", projection),
        ("reward-table reproduction", rewards),
        ("GAE oracle equivalence", gae_oracle),
        ("gradient checks", gradients),
        ("tabular verification suite", verification),
        ("FLOPS table", flops_table),
        ("desk-scale learning", learning),
        ("delay and handover mechanics", delay_and_handover),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let out = check();
        let tag = match out.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{tag} [{}] {name}: {}", i + 1, out.detail);
    }
    println!("acceptance: {} of {} criteria failed", failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
