//! Exact policy-improvement quantities on small tabular MDPs: values,
//! advantages, discounted visitation, the surrogate objective and the
//! improvement bounds, plus a randomized verification suite.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Finite MDP with an exact transition tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p[(s * A + a) * S + s2]`
    pub p: Vec<f64>,
    /// `r[s * A + a]`
    pub r: Vec<f64>,
    pub gamma: f64,
    pub rho0: Vec<f64>,
}

/// Stochastic policy `pi[s * A + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub pi: Vec<f64>,
}

fn check_distribution(what: &str, row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::Config(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
        rho0: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self { n_states, n_actions, p, r, gamma, rho0 };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 {
            return Err(Error::Config("mdp needs at least one state and one action".into()));
        }
        if self.p.len() != s * a * s || self.r.len() != s * a || self.rho0.len() != s {
            return Err(Error::Dimension(format!("mdp tensors do not match S={s}, A={a}")));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        for sa in 0..s * a {
            check_distribution(&format!("P[{}][{}]", sa / a, sa % a), &self.p[sa * s..(sa + 1) * s])?;
        }
        check_distribution("rho0", &self.rho0)?;
        if self.r.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("rewards must be finite".into()));
        }
        Ok(())
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.n_actions + a]
    }

    pub fn r_max(&self) -> f64 {
        self.r.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// State-to-state transition matrix and expected reward under `pi`.
    fn induced(&self, pi: &TabularPolicy) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_states;
        let mut p = DMatrix::zeros(n, n);
        let mut r = DVector::zeros(n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = pi.prob(s, a);
                r[s] += w * self.reward(s, a);
                for s2 in 0..n {
                    p[(s, s2)] += w * self.prob(s, a, s2);
                }
            }
        }
        (p, r)
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states != self.n_states || pi.n_actions != self.n_actions {
            return Err(Error::Dimension("policy shape does not match the mdp".into()));
        }
        Ok(())
    }
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, pi: Vec<f64>) -> Result<Self> {
        let p = Self { n_states, n_actions, pi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi.len() != self.n_states * self.n_actions {
            return Err(Error::Dimension("policy table has the wrong size".into()));
        }
        for s in 0..self.n_states {
            check_distribution(&format!("pi[{s}]"), self.row(s))?;
        }
        Ok(())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, pi: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    /// Deterministic policy picking `actions[s]`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut pi = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            pi[s * n_actions + a] = 1.0;
        }
        Self { n_states: actions.len(), n_actions, pi }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.pi[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.pi[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `(1 - w) * self + w * other`.
    pub fn mix(&self, other: &TabularPolicy, w: f64) -> TabularPolicy {
        let pi = self.pi.iter().zip(&other.pi).map(|(x, y)| (1.0 - w) * x + w * y).collect();
        TabularPolicy { n_states: self.n_states, n_actions: self.n_actions, pi }
    }
}

/// V^pi from `(I - gamma P_pi) V = R_pi`.
pub fn exact_value(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<DVector<f64>> {
    mdp.check_policy(pi)?;
    let (p, r) = mdp.induced(pi);
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - p * mdp.gamma;
    a.lu().solve(&r).ok_or_else(|| Error::Numerical("singular policy-evaluation system".into()))
}

/// Expected discounted return from `rho0`.
pub fn eta(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let v = exact_value(mdp, pi)?;
    Ok(mdp.rho0.iter().zip(v.iter()).map(|(p, v)| p * v).sum())
}

/// Q^pi as an S x A matrix.
pub fn exact_q(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<DMatrix<f64>> {
    let v = exact_value(mdp, pi)?;
    Ok(DMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        mdp.reward(s, a) + mdp.gamma * (0..mdp.n_states).map(|s2| mdp.prob(s, a, s2) * v[s2]).sum::<f64>()
    }))
}

/// A^pi = Q^pi - V^pi as an S x A matrix.
pub fn exact_advantage(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<DMatrix<f64>> {
    let v = exact_value(mdp, pi)?;
    let q = exact_q(mdp, pi)?;
    Ok(DMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| q[(s, a)] - v[s]))
}

/// Normalized discounted state visitation `(1 - gamma) rho0^T (I - gamma P_pi)^-1`.
pub fn discounted_visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<DVector<f64>> {
    mdp.check_policy(pi)?;
    let (p, _) = mdp.induced(pi);
    let n = mdp.n_states;
    let a = (DMatrix::identity(n, n) - p * mdp.gamma).transpose();
    let x = a
        .lu()
        .solve(&DVector::from_column_slice(&mdp.rho0))
        .ok_or_else(|| Error::Numerical("singular visitation system".into()))?;
    Ok(x * (1.0 - mdp.gamma))
}

/// `(1 / (1 - gamma)) sum_s rho(s) sum_a pi2(a|s) A(s, a)`.
fn weighted_advantage(mdp: &TabularMdp, rho: &DVector<f64>, pi2: &TabularPolicy, adv: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for s in 0..mdp.n_states {
        let abar: f64 = (0..mdp.n_actions).map(|a| pi2.prob(s, a) * adv[(s, a)]).sum();
        acc += rho[s] * abar;
    }
    acc / (1.0 - mdp.gamma)
}

/// |eta(pi~) - eta(pi) - (1/(1-gamma)) sum_s rho_pi~(s) sum_a pi~(a|s) A^pi(s,a)|.
pub fn perf_diff_check(mdp: &TabularMdp, pi: &TabularPolicy, pi_new: &TabularPolicy) -> Result<f64> {
    let lhs = eta(mdp, pi_new)? - eta(mdp, pi)?;
    let rho = discounted_visitation(mdp, pi_new)?;
    let rhs = weighted_advantage(mdp, &rho, pi_new, &exact_advantage(mdp, pi)?);
    Ok((lhs - rhs).abs())
}

/// L_{pi1}(pi2): eta(pi1) plus pi2's advantage under pi1's visitation.
pub fn surrogate(mdp: &TabularMdp, pi1: &TabularPolicy, pi2: &TabularPolicy) -> Result<f64> {
    let rho = discounted_visitation(mdp, pi1)?;
    Ok(eta(mdp, pi1)? + weighted_advantage(mdp, &rho, pi2, &exact_advantage(mdp, pi1)?))
}

/// Maximum over states of the total variation distance.
pub fn tv_max(pi1: &TabularPolicy, pi2: &TabularPolicy) -> f64 {
    (0..pi1.n_states)
        .map(|s| 0.5 * pi1.row(s).iter().zip(pi2.row(s)).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `max |A^pi1(s, a)|`.
pub fn epsilon_max(adv: &DMatrix<f64>) -> f64 {
    adv.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `coef * gamma / (1 - gamma)^2`.
fn horizon_factor(gamma: f64) -> f64 {
    gamma / ((1.0 - gamma) * (1.0 - gamma))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovementOutcome {
    pub holds: bool,
    /// eta(pi2) minus the lower bound.
    pub slack: f64,
}

/// `eta(pi2) >= eta(pi1) - 4 eps gamma alpha^2 / (1-gamma)^2`, checked only
/// when pi2 does not decrease the surrogate (`None` otherwise).
pub fn improvement_check(mdp: &TabularMdp, pi1: &TabularPolicy, pi2: &TabularPolicy) -> Result<Option<ImprovementOutcome>> {
    let eta1 = eta(mdp, pi1)?;
    if surrogate(mdp, pi1, pi2)? < surrogate(mdp, pi1, pi1)? {
        return Ok(None);
    }
    let eps = epsilon_max(&exact_advantage(mdp, pi1)?);
    let alpha = tv_max(pi1, pi2);
    let bound = eta1 - 4.0 * eps * horizon_factor(mdp.gamma) * alpha * alpha;
    let slack = eta(mdp, pi2)? - bound;
    Ok(Some(ImprovementOutcome { holds: slack >= -1e-10, slack }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapOutcome {
    pub gap: f64,
    pub linear_bound: f64,
    pub quadratic_bound: f64,
    pub linear_ok: bool,
    pub quadratic_ok: bool,
}

/// |eta(pi2) - L_{pi1}(pi2)| against the linear and quadratic bounds.
pub fn gap_bound_check(mdp: &TabularMdp, pi1: &TabularPolicy, pi2: &TabularPolicy) -> Result<GapOutcome> {
    let gap = (eta(mdp, pi2)? - surrogate(mdp, pi1, pi2)?).abs();
    let eps = epsilon_max(&exact_advantage(mdp, pi1)?);
    let alpha = tv_max(pi1, pi2);
    let h = horizon_factor(mdp.gamma);
    let linear_bound = 2.0 * eps * h * alpha;
    let quadratic_bound = 4.0 * eps * h * alpha * alpha;
    Ok(GapOutcome {
        gap,
        linear_bound,
        quadratic_bound,
        linear_ok: gap <= linear_bound + 1e-10,
        quadratic_ok: gap <= quadratic_bound + 1e-10,
    })
}

/// Relative mismatch between the directional derivatives of eta and
/// L_{pi1} at pi1 along a zero-sum perturbation `dir` (central differences).
pub fn gradient_match(mdp: &TabularMdp, pi1: &TabularPolicy, dir: &[f64], h: f64) -> Result<f64> {
    let shifted = |t: f64| TabularPolicy {
        n_states: pi1.n_states,
        n_actions: pi1.n_actions,
        pi: pi1.pi.iter().zip(dir).map(|(p, d)| p + t * d).collect(),
    };
    let (plus, minus) = (shifted(h), shifted(-h));
    let d_eta = (eta(mdp, &plus)? - eta(mdp, &minus)?) / (2.0 * h);
    let d_sur = (surrogate(mdp, pi1, &plus)? - surrogate(mdp, pi1, &minus)?) / (2.0 * h);
    Ok((d_eta - d_sur).abs() / d_eta.abs().max(d_sur.abs()).max(1e-12))
}

/// Greedy deterministic policy on a Q or advantage table.
pub fn greedy(table: &DMatrix<f64>) -> TabularPolicy {
    let actions: Vec<usize> = (0..table.nrows())
        .map(|s| (0..table.ncols()).fold(0, |best, a| if table[(s, a)] > table[(s, best)] { a } else { best }))
        .collect();
    TabularPolicy::deterministic(table.ncols(), &actions)
}

fn dirichlet_one<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-300).collect();
    let sum: f64 = x.iter().sum();
    let mut out: Vec<f64> = x.iter().map(|v| v / sum).collect();
    // fold the rounding residue into the largest entry so rows sum to 1 within 1e-12
    let resid = 1.0 - out.iter().sum::<f64>();
    let big = (0..n).fold(0, |b, i| if out[i] > out[b] { i } else { b });
    out[big] += resid;
    out
}

/// Random MDP: Dirichlet(1) transition rows and initial distribution,
/// rewards uniform in [-1, 1].
pub fn random_mdp<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<TabularMdp> {
    let mut p = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        p.extend(dirichlet_one(n_states, rng));
    }
    let r = (0..n_states * n_actions).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let rho0 = dirichlet_one(n_states, rng);
    TabularMdp::new(n_states, n_actions, p, r, gamma, rho0)
}

pub fn random_policy<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> TabularPolicy {
    let mut pi = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        pi.extend(dirichlet_one(n_actions, rng));
    }
    TabularPolicy { n_states, n_actions, pi }
}

/// Zero-sum-per-state direction scaled so that `pi + h * dir` stays a
/// distribution for `|h| <= 1` whenever every entry of `pi` is at least `floor`.
pub fn random_direction<R: Rng + ?Sized>(pi: &TabularPolicy, floor: f64, rng: &mut R) -> Vec<f64> {
    let mut d = Vec::with_capacity(pi.pi.len());
    for _ in 0..pi.n_states {
        let raw: Vec<f64> = (0..pi.n_actions).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let centred: Vec<f64> = raw.iter().map(|x| x - mean).collect();
        let peak = centred.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        d.extend(centred.iter().map(|x| x * floor / peak));
    }
    d
}

/// One verification instance: an MDP and a policy pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub label: String,
    pub mdp: TabularMdp,
    pub pi1: TabularPolicy,
    pub pi2: TabularPolicy,
}

fn push_row(out: &mut String, key: &str, xs: &[f64]) {
    let _ = write!(out, "{key}");
    for x in xs {
        // round-trip exact: Rust prints the shortest representation that parses back
        let _ = write!(out, " {x:?}");
    }
    out.push('\n');
}

impl Instance {
    /// Replayable plain-text form.
    pub fn to_text(&self) -> String {
        let m = &self.mdp;
        let mut out = String::new();
        let _ = writeln!(out, "instance {}", self.label);
        let _ = writeln!(out, "shape {} {}", m.n_states, m.n_actions);
        let _ = writeln!(out, "gamma {:?}", m.gamma);
        push_row(&mut out, "rho0", &m.rho0);
        push_row(&mut out, "reward", &m.r);
        push_row(&mut out, "transition", &m.p);
        push_row(&mut out, "pi1", &self.pi1.pi);
        push_row(&mut out, "pi2", &self.pi2.pi);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut label = String::new();
        let (mut shape, mut gamma) = (None, None);
        let mut rows: std::collections::HashMap<String, Vec<f64>> = Default::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("instance field {key}: {e}"));
            match key {
                "instance" => label = rest.to_string(),
                "shape" => {
                    let v: Vec<usize> = rest
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(&e))?;
                    if v.len() != 2 {
                        return Err(bad(&"expected two integers"));
                    }
                    shape = Some((v[0], v[1]));
                }
                "gamma" => gamma = Some(rest.trim().parse::<f64>().map_err(|e| bad(&e))?),
                "rho0" | "reward" | "transition" | "pi1" | "pi2" => {
                    let v: Vec<f64> = rest
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(&e))?;
                    rows.insert(key.to_string(), v);
                }
                other => return Err(Error::Config(format!("unknown instance field {other:?}"))),
            }
        }
        let (s, a) = shape.ok_or_else(|| Error::Config("instance is missing its shape".into()))?;
        let gamma = gamma.ok_or_else(|| Error::Config("instance is missing gamma".into()))?;
        let mut take = |k: &str| rows.remove(k).ok_or_else(|| Error::Config(format!("instance is missing {k}")));
        let mdp = TabularMdp::new(s, a, take("transition")?, take("reward")?, gamma, take("rho0")?)?;
        let pi1 = TabularPolicy::new(s, a, take("pi1")?)?;
        let pi2 = TabularPolicy::new(s, a, take("pi2")?)?;
        Ok(Self { label, mdp, pi1, pi2 })
    }
}

/// Outcome of the randomized verification suite.
#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub instances: usize,
    pub bound_violations: usize,
    pub max_pdl_residual: f64,
    pub max_surrogate_self_residual: f64,
    pub improvement_checked: usize,
    pub improvement_violations: usize,
    pub min_improvement_slack: f64,
    pub linear_violations: usize,
    pub quadratic_violations: usize,
    pub max_linear_ratio: f64,
    pub max_quadratic_ratio: f64,
    pub gradient_checked: usize,
    pub max_gradient_rel_err: f64,
    pub counterexamples: Vec<Instance>,
}

pub const PDL_TOL: f64 = 1e-8;
pub const SURROGATE_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-3;
pub const GRADIENT_STEP: f64 = 1e-5;

impl VerifyReport {
    /// Every hard check passed (quadratic-bound violations are reported, not failed).
    pub fn passed(&self) -> bool {
        self.instances > 0
            && self.bound_violations == 0
            && self.max_pdl_residual < PDL_TOL
            && self.max_surrogate_self_residual <= SURROGATE_TOL
            && self.improvement_violations == 0
            && self.linear_violations == 0
            && self.max_gradient_rel_err < GRADIENT_TOL
    }

    pub fn render(&self) -> String {
        let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut out = String::new();
        let _ = writeln!(out, "tabular verification over {} random MDP instances", self.instances);
        let _ = writeln!(
            out,
            "{} value/advantage bounds: {} violations",
            mark(self.bound_violations == 0),
            self.bound_violations
        );
        let _ = writeln!(
            out,
            "{} performance difference: max residual {:.3e} (< {PDL_TOL:e})",
            mark(self.max_pdl_residual < PDL_TOL),
            self.max_pdl_residual
        );
        let _ = writeln!(
            out,
            "{} surrogate at pi1 equals eta: max residual {:.3e} (<= {SURROGATE_TOL:e})",
            mark(self.max_surrogate_self_residual <= SURROGATE_TOL),
            self.max_surrogate_self_residual
        );
        let _ = writeln!(
            out,
            "{} improvement inequality: {} surrogate-improving pairs, {} violations, min slack {:.3e}",
            mark(self.improvement_violations == 0),
            self.improvement_checked,
            self.improvement_violations,
            self.min_improvement_slack
        );
        let _ = writeln!(
            out,
            "{} linear gap bound: {} violations, max gap/bound {:.3}",
            mark(self.linear_violations == 0),
            self.linear_violations,
            self.max_linear_ratio
        );
        let _ = writeln!(
            out,
            "{} quadratic gap bound: {} violations, max gap/bound {:.3}",
            if self.quadratic_violations == 0 { "PASS" } else { "NOTE" },
            self.quadratic_violations,
            self.max_quadratic_ratio
        );
        let _ = writeln!(
            out,
            "{} surrogate gradient match: {} directions, max relative error {:.3e} (< {GRADIENT_TOL:e})",
            mark(self.max_gradient_rel_err < GRADIENT_TOL),
            self.gradient_checked,
            self.max_gradient_rel_err
        );
        let _ = writeln!(out, "overall: {}", mark(self.passed()));
        out
    }
}

const GAMMAS: [f64; 3] = [0.5, 0.9, 0.95];

/// Candidate second policies for a base policy: random, greedy on its
/// advantage, and mixtures toward the greedy policy.
fn candidates<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    pi1: &TabularPolicy,
    rng: &mut R,
) -> Result<Vec<(&'static str, TabularPolicy)>> {
    let g = greedy(&exact_advantage(mdp, pi1)?);
    let w = rng.gen_range(0.0..0.3);
    Ok(vec![
        ("random", random_policy(mdp.n_states, mdp.n_actions, rng)),
        ("greedy", g.clone()),
        ("mixed", pi1.mix(&g, w)),
        ("self", pi1.clone()),
    ])
}

/// Pair-level checks (performance difference, improvement inequality, gap
/// bounds) for one instance; failures are kept as counterexamples.
fn check_pair(rep: &mut VerifyReport, inst: Instance) -> Result<()> {
    let (mdp, pi1, pi2) = (&inst.mdp, &inst.pi1, &inst.pi2);
    rep.max_pdl_residual = rep.max_pdl_residual.max(perf_diff_check(mdp, pi1, pi2)?);
    let mut failed = false;
    if let Some(t) = improvement_check(mdp, pi1, pi2)? {
        rep.improvement_checked += 1;
        rep.min_improvement_slack = rep.min_improvement_slack.min(t.slack);
        if !t.holds {
            rep.improvement_violations += 1;
            failed = true;
        }
    }
    let g = gap_bound_check(mdp, pi1, pi2)?;
    let ratio = |b: f64| {
        if b > 0.0 {
            g.gap / b
        } else if g.gap > 1e-10 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    rep.max_linear_ratio = rep.max_linear_ratio.max(ratio(g.linear_bound));
    rep.max_quadratic_ratio = rep.max_quadratic_ratio.max(ratio(g.quadratic_bound));
    if !g.linear_ok {
        rep.linear_violations += 1;
        failed = true;
    }
    if !g.quadratic_ok {
        rep.quadratic_violations += 1;
        failed = true;
    }
    if failed {
        rep.counterexamples.push(inst);
    }
    Ok(())
}

/// Replays saved instances through the pair-level checks.
pub fn check_instances(instances: &[Instance]) -> Result<VerifyReport> {
    let mut rep = VerifyReport { min_improvement_slack: f64::INFINITY, ..Default::default() };
    for inst in instances {
        rep.instances += 1;
        let eta1 = eta(&inst.mdp, &inst.pi1)?;
        let self_res = (surrogate(&inst.mdp, &inst.pi1, &inst.pi1)? - eta1).abs();
        rep.max_surrogate_self_residual = rep.max_surrogate_self_residual.max(self_res);
        check_pair(&mut rep, inst.clone())?;
    }
    if rep.improvement_checked == 0 {
        rep.min_improvement_slack = 0.0;
    }
    Ok(rep)
}

/// Runs every check on `n` random instances drawn from `seed`.
pub fn run_suite(n: usize, seed: u64) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = VerifyReport { min_improvement_slack: f64::INFINITY, ..Default::default() };
    for i in 0..n {
        let s = rng.gen_range(1..=8);
        let a = rng.gen_range(1..=4);
        let gamma = GAMMAS[i % GAMMAS.len()];
        let mdp = random_mdp(s, a, gamma, &mut rng)?;
        let pi1 = random_policy(s, a, &mut rng);
        rep.instances += 1;

        let r_max = mdp.r_max();
        let v = exact_value(&mdp, &pi1)?;
        let adv = exact_advantage(&mdp, &pi1)?;
        let v_bound = r_max / (1.0 - gamma) + 1e-12;
        if v.iter().any(|x| x.abs() > v_bound) || adv.iter().any(|x| x.abs() > 2.0 * v_bound) {
            rep.bound_violations += 1;
        }
        let eta1 = eta(&mdp, &pi1)?;
        rep.max_surrogate_self_residual =
            rep.max_surrogate_self_residual.max((surrogate(&mdp, &pi1, &pi1)? - eta1).abs());

        for (kind, pi2) in candidates(&mdp, &pi1, &mut rng)? {
            check_pair(&mut rep, Instance { label: format!("{i}-{kind}"), mdp: mdp.clone(), pi1: pi1.clone(), pi2 })?;
        }

        // directional derivative match at an interior pi1
        if a > 1 {
            let floor = pi1.pi.iter().fold(1.0f64, |m, x| m.min(*x));
            if floor > 1e-3 {
                let dir = random_direction(&pi1, floor, &mut rng);
                let err = gradient_match(&mdp, &pi1, &dir, GRADIENT_STEP)?;
                rep.gradient_checked += 1;
                rep.max_gradient_rel_err = rep.max_gradient_rel_err.max(err);
            }
        }
    }
    if rep.improvement_checked == 0 {
        rep.min_improvement_slack = 0.0;
    }
    Ok(rep)
}
