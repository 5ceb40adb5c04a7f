//! Exchange-method solver for the perturbed problems, multiplier
//! extraction, the j-sweep, and residuals of the necessary conditions.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    argmin_rows, assemble_hamiltonians, fiber_table, integrate_adjoint, limit_sweep, non_cauchy, AdjointMatrices,
    AtomPolicy, HamiltonianTable, MultiplierSet, OmegaAtom, CAUCHY_FLOOR,
};
use crate::control::{build_dense_family, FiberPolicy, RelaxedControl};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::trajectory::{integrate_schedule, joint_schedule, relaxed_schedule, ControlTag, FieldSet, ProximityConstants, Trajectory, TrajectoryKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Adversary picks a relaxed control, blind to player 1's value.
    Relaxed,
    /// Adversary picks a fiber policy conditioned on player 1's value.
    Hyperrelaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StepRule {
    /// `γ = 2/(k + 2)`.
    OpenLoop,
    Fixed { gamma: f64 },
    /// Golden-section search on the augmented objective.
    LineSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub mode: Mode,
    pub j_values: Vec<u32>,
    /// Frank–Wolfe stops when the dual gap is below `fw_tol · sup|G|`.
    pub fw_tol: f64,
    pub max_fw_iters: usize,
    pub step_rule: StepRule,
    pub tol_exchange: f64,
    pub tol_fiber: f64,
    /// Min-condition tolerance relative to `sup|H|`.
    pub min_condition_tol: f64,
    pub max_atoms: usize,
    pub max_exchange: usize,
    pub br_iters: usize,
    pub mu0: f64,
    pub mu_growth: f64,
    pub penalty_rounds: usize,
    pub dense_members: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hyperrelaxed,
            j_values: vec![5, 10, 20, 40],
            fw_tol: 1e-6,
            max_fw_iters: 200,
            step_rule: StepRule::LineSearch,
            tol_exchange: 1e-5,
            tol_fiber: 1e-6,
            min_condition_tol: 1e-4,
            max_atoms: 8,
            max_exchange: 10,
            br_iters: 20,
            mu0: 10.0,
            mu_growth: 10.0,
            penalty_rounds: 4,
            dense_members: 16,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn check(&self) -> Result<()> {
        if self.j_values.is_empty() {
            return Err(Error::EmptyJSequence);
        }
        if self.j_values[0] == 0 || self.j_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(format!(
                "j-sequence {:?} must be positive and strictly increasing",
                self.j_values
            )));
        }
        let positive = [self.fw_tol, self.tol_exchange, self.tol_fiber, self.min_condition_tol, self.mu0];
        if positive.iter().any(|x| !(*x > 0.0) || !x.is_finite()) || !(self.mu_growth >= 1.0) {
            return Err(Error::Invalid("tolerances and penalties must be positive".into()));
        }
        if self.max_atoms == 0 || self.max_exchange == 0 || self.penalty_rounds == 0 || self.max_fw_iters == 0 {
            return Err(Error::Invalid("iteration limits must be positive".into()));
        }
        if let StepRule::Fixed { gamma } = self.step_rule {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return Err(Error::Invalid(format!("fixed step {gamma} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// The problem at index `j`: mollified data, the equality shift `aʲ` and the
/// inequality tightening `c_ĥ/j`.
#[derive(Debug, Clone)]
pub struct PerturbedProblem<'a> {
    pub spec: &'a ProblemSpec,
    pub j: u32,
    pub fields: FieldSet,
    pub a_j: Vec<f64>,
    pub constraint_shift: f64,
    pub constants: ProximityConstants,
}

impl<'a> PerturbedProblem<'a> {
    pub fn new(spec: &'a ProblemSpec, j: u32) -> Result<Self> {
        if j == 0 {
            return Err(Error::Invalid("mollification index must be positive".into()));
        }
        let fields = FieldSet::new(spec, Some(j))?;
        let constants = ProximityConstants::new(spec);
        let jf = j as f64;
        let a_j = match (&spec.h1, &fields.h1) {
            (Some(_), Some(h1j)) => {
                let incumbent = spec.incumbent_or_default();
                let exact_fields = FieldSet::new(spec, None)?;
                let exact = exact_fields.player(spec, &incumbent, &spec.b_bar)?;
                let moll = fields.player(spec, &incumbent, &spec.b_bar)?;
                let hv = exact_fields.h1.as_ref().expect("exact h1").vector(exact.final_state())?;
                let hjv = h1j.vector(moll.final_state())?;
                let window = constants.c_h1 / jf;
                let mut a = Vec::with_capacity(hv.len());
                for (x, y) in hjv.iter().zip(&hv) {
                    let raw = x - y;
                    if raw.abs() > window * (1.0 + 1e-9) + 1e-12 {
                        return Err(Error::InfeasibleStart {
                            j,
                            reason: format!("equality shift {raw:.3e} outside the window ±{window:.3e}"),
                        });
                    }
                    a.push(raw.clamp(-window, window));
                }
                a
            }
            _ => Vec::new(),
        };
        Ok(Self { spec, j, fields, a_j, constraint_shift: constants.c_h_hat / jf, constants })
    }

    fn b_hat(&self, b: &[f64]) -> Vec<f64> {
        let mut v = b.to_vec();
        v.extend_from_slice(&self.spec.b_tilde_bar);
        v
    }

    /// `Ĥʲ = ĥʲ + c_ĥ/j` at the end of a joint trajectory.
    fn constraint(&self, traj: &Trajectory) -> Result<f64> {
        Ok(self.fields.h_hat.scalar(traj.final_state())? + self.constraint_shift)
    }

    fn joint(&self, sigma: &RelaxedControl, atom: &AtomPolicy, b: &[f64]) -> Result<Trajectory> {
        self.fields.joint(self.spec, &atom.adversary().compose(sigma)?, &self.b_hat(b))
    }
}

/// PHR penalty `(max(0, ω + μg)² − ω²) / 2μ`.
fn phr(g: f64, omega: f64, mu: f64) -> f64 {
    let s = (omega + mu * g).max(0.0);
    (s * s - omega * omega) / (2.0 * mu)
}

#[derive(Debug, Clone, PartialEq)]
struct Penalty {
    lambda: Vec<f64>,
    omega: Vec<f64>,
    mu: f64,
}

impl Penalty {
    fn w1(&self, h1: &[f64]) -> Vec<f64> {
        self.lambda.iter().zip(h1).map(|(l, h)| l + self.mu * h).collect()
    }
    fn omega_eff(&self, h_hat: &[f64]) -> Vec<f64> {
        self.omega.iter().zip(h_hat).map(|(w, g)| (w + self.mu * g).max(0.0)).collect()
    }
}

#[derive(Debug, Clone)]
struct Iterate {
    sigma: RelaxedControl,
    b: Vec<f64>,
    h0: f64,
    h1: Vec<f64>,
    h_hat: Vec<f64>,
    value: f64,
}

/// Root of `1 − Σ max(0, ω_a + μ(c_a − α))` clamped to `[lo, hi]`.
fn optimal_epigraph(c: &[f64], omega: &[f64], mu: f64, lo: f64, hi: f64, current: f64) -> f64 {
    if c.is_empty() {
        return if lo.is_finite() { lo } else { current };
    }
    let slope = |a: f64| 1.0 - c.iter().zip(omega).map(|(c, w)| (w + mu * (c - a)).max(0.0)).sum::<f64>();
    let mut right = c.iter().zip(omega).map(|(c, w)| c + w / mu).fold(f64::NEG_INFINITY, f64::max);
    let mut left = right - 1.0 / mu;
    for _ in 0..200 {
        let mid = 0.5 * (left + right);
        if mid == left || mid == right {
            break;
        }
        if slope(mid) < 0.0 {
            left = mid;
        } else {
            right = mid;
        }
    }
    right.clamp(lo, hi)
}

fn evaluate(pp: &PerturbedProblem<'_>, sigma: &RelaxedControl, atoms: &[AtomPolicy], pen: &Penalty, b: &[f64]) -> Result<Iterate> {
    let spec = pp.spec;
    let mut b = b.to_vec();
    let player = pp.fields.player(spec, sigma, &b)?;
    let joint: Vec<Trajectory> = atoms.par_iter().map(|a| pp.joint(sigma, a, &b)).collect::<Result<_>>()?;
    let mut h0 = pp.fields.h0.scalar(player.final_state())?;
    let h1 = match &pp.fields.h1 {
        Some(h) => h.vector(player.final_state())?.iter().zip(&pp.a_j).map(|(x, a)| x - a).collect(),
        None => Vec::new(),
    };
    let mut h_hat = joint.iter().map(|t| pp.constraint(t)).collect::<Result<Vec<_>>>()?;
    if let Some(e) = spec.epigraph {
        let a0 = b[e];
        let c: Vec<f64> = h_hat.iter().map(|h| h + a0).collect();
        let a = optimal_epigraph(&c, &pen.omega, pen.mu, spec.b_set.lo[e], spec.b_set.hi[e], a0);
        let d = a - a0;
        // the epigraph coordinate is a constant of motion entering h0 as
        // itself and the constraint with a minus sign
        if d != 0.0 {
            h0 += d;
            h_hat.iter_mut().for_each(|h| *h -= d);
            b[e] = a;
        }
    }
    let mut value = h0;
    for (q, h) in h1.iter().enumerate() {
        value += pen.lambda[q] * h + 0.5 * pen.mu * h * h;
    }
    for (g, w) in h_hat.iter().zip(&pen.omega) {
        value += phr(*g, *w, pen.mu);
    }
    Ok(Iterate { sigma: sigma.clone(), b, h0, h1, h_hat, value })
}

fn endpoint_grads(pp: &PerturbedProblem<'_>, player: &Trajectory) -> Result<(Vec<f64>, Vec<f64>)> {
    let h0 = pp.fields.h0.endpoint_grad(player.final_state())?;
    let h1 = match &pp.fields.h1 {
        Some(h) => h.endpoint_grad(player.final_state())?,
        None => Vec::new(),
    };
    Ok((h0, h1))
}

/// Multipliers, their atoms and the Hamiltonian table at an iterate.
fn hamiltonian_at(
    pp: &PerturbedProblem<'_>,
    sigma: &RelaxedControl,
    b: &[f64],
    l0: f64,
    l1: Vec<f64>,
    weighted: Vec<(AtomPolicy, f64)>,
) -> Result<(MultiplierSet, HamiltonianTable)> {
    let spec = pp.spec;
    let policies: Vec<AtomPolicy> = weighted.iter().map(|(p, _)| p.clone()).collect();
    let (adj, player, trajs) = AdjointMatrices::compute(spec, &pp.fields, sigma, &policies, b)?;
    let (h0_grad, h1_grad) = endpoint_grads(pp, &player)?;
    let mut omega = Vec::with_capacity(weighted.len());
    for ((policy, w), tr) in weighted.into_iter().zip(&trajs) {
        omega.push(OmegaAtom { policy, weight: w, h_hat_grad: pp.fields.h_hat.endpoint_grad(tr.final_state())? });
    }
    let nm = spec.n + spec.m;
    let mut mult = MultiplierSet { l0, l1, omega, h0_grad, h1_grad, lambda: vec![0.0; nm] };
    let table = assemble_hamiltonians(spec, &pp.fields, &mult, &adj, &player, &trajs)?;
    for (a, atom) in mult.omega.iter().enumerate() {
        for i in 0..nm {
            mult.lambda[i] += atom.weight * table.k_hat[a][i];
        }
    }
    Ok((mult, table))
}

/// Rowwise-argmin Dirac control of a `[n_steps] × n_u` table.
pub fn greedy_control(spec: &ProblemSpec, table: &[f64]) -> Result<RelaxedControl> {
    RelaxedControl::dirac(&spec.grid_u, &argmin_rows(spec, table))
}

/// `Σ_t Σ_u G(t,u) (σ − σ_greedy)(t)(u)`, nonnegative by construction.
pub fn dual_gap(table: &[f64], sigma: &RelaxedControl, greedy: &RelaxedControl) -> f64 {
    table
        .iter()
        .zip(sigma.weights())
        .zip(greedy.weights())
        .map(|((g, s), d)| g * (s - d))
        .sum::<f64>()
        .max(0.0)
}

/// Conditional-gradient step `σ⁺ = (1 − γ)σ + γ σ_greedy`.
pub fn player_step(spec: &ProblemSpec, sigma: &RelaxedControl, table: &[f64], gamma: f64) -> Result<RelaxedControl> {
    let greedy = greedy_control(spec, table)?;
    sigma.mix(&greedy, gamma)
}

/// Best response read off a step-integrated fiber table
/// `[n_steps] × n_u × n_v`; ties go to the lowest admissible index.
pub fn best_response_from_table(spec: &ProblemSpec, mode: Mode, sigma: &RelaxedControl, fiber: &[f64]) -> Result<AtomPolicy> {
    let (n_u, n_v) = (spec.grid_u.len(), spec.grid_v.len());
    let pick = |k: usize, score: &dyn Fn(usize) -> f64| -> usize {
        let mut best: Option<(usize, f64)> = None;
        for v in 0..n_v {
            if !spec.grid_v.admissible(k, v) {
                continue;
            }
            let s = score(v);
            match best {
                Some((_, b)) if s <= b => {}
                _ => best = Some((v, s)),
            }
        }
        best.map_or(0, |(v, _)| v)
    };
    match mode {
        Mode::Hyperrelaxed => {
            let p = FiberPolicy::from_choice(&spec.grid_u, &spec.grid_v, |k, u| {
                pick(k, &|v| fiber[(k * n_u + u) * n_v + v])
            })?;
            Ok(AtomPolicy::Fiber(p))
        }
        Mode::Relaxed => {
            let choice: Vec<usize> = (0..spec.n_steps())
                .map(|k| {
                    pick(k, &|v| {
                        (0..n_u).map(|u| sigma.row(k)[u] * fiber[(k * n_u + u) * n_v + v]).sum::<f64>()
                    })
                })
                .collect();
            Ok(AtomPolicy::Relaxed(RelaxedControl::dirac(&spec.grid_v, &choice)?))
        }
    }
}

fn fiber_of(pp: &PerturbedProblem<'_>, sigma: &RelaxedControl, atom: &AtomPolicy, traj: &Trajectory) -> Result<Vec<f64>> {
    let spec = pp.spec;
    let zh = integrate_adjoint(spec, &pp.fields.f_hat, &joint_schedule(&atom.adversary().compose(sigma)?), traj)?;
    let grad = pp.fields.h_hat.endpoint_grad(traj.final_state())?;
    Ok(fiber_table(spec, &pp.fields, &zh, &grad, traj)?.1)
}

/// One best-response step against `atom`: the policy maximizing
/// `k̂(atom)·f̂ʲ` at every `(t, u)`.
pub fn adversary_best_response(
    pp: &PerturbedProblem<'_>,
    mode: Mode,
    sigma: &RelaxedControl,
    b: &[f64],
    atom: &AtomPolicy,
) -> Result<AtomPolicy> {
    let traj = pp.joint(sigma, atom, b)?;
    best_response_from_table(pp.spec, mode, sigma, &fiber_of(pp, sigma, atom, &traj)?)
}

/// Best-response iteration from `start`; stops at a fixed point or when the
/// constraint value stops increasing.
fn improve_adversary(
    pp: &PerturbedProblem<'_>,
    cfg: &SolverConfig,
    sigma: &RelaxedControl,
    b: &[f64],
    start: AtomPolicy,
) -> Result<(AtomPolicy, f64)> {
    let mut policy = start;
    let mut traj = pp.joint(sigma, &policy, b)?;
    let mut value = pp.constraint(&traj)?;
    for _ in 0..cfg.br_iters {
        let next = best_response_from_table(pp.spec, cfg.mode, sigma, &fiber_of(pp, sigma, &policy, &traj)?)?;
        if next == policy {
            break;
        }
        let next_traj = pp.joint(sigma, &next, b)?;
        let next_value = pp.constraint(&next_traj)?;
        if next_value <= value + 1e-15 * value.abs().max(1.0) {
            break;
        }
        policy = next;
        traj = next_traj;
        value = next_value;
    }
    Ok((policy, value))
}

fn uniform_atom(spec: &ProblemSpec, mode: Mode) -> AtomPolicy {
    match mode {
        Mode::Hyperrelaxed => AtomPolicy::Fiber(FiberPolicy::uniform(&spec.grid_u, &spec.grid_v)),
        Mode::Relaxed => AtomPolicy::Relaxed(RelaxedControl::uniform(&spec.grid_v)),
    }
}

/// Worst adversary found by best-response iteration from the uniform policy
/// and from the strongest incumbent atom.
fn worst_adversary(
    pp: &PerturbedProblem<'_>,
    cfg: &SolverConfig,
    sigma: &RelaxedControl,
    b: &[f64],
    atoms: &[AtomPolicy],
    values: &[f64],
) -> Result<(AtomPolicy, f64)> {
    let mut starts = vec![uniform_atom(pp.spec, cfg.mode)];
    let best = values
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
            Some((_, bv)) if v <= bv => acc,
            _ => Some((i, v)),
        });
    if let Some((i, _)) = best {
        if atoms[i] != starts[0] {
            starts.push(atoms[i].clone());
        }
    }
    let results: Vec<(AtomPolicy, f64)> = starts
        .into_par_iter()
        .map(|s| improve_adversary(pp, cfg, sigma, b, s))
        .collect::<Result<_>>()?;
    let mut out: Option<(AtomPolicy, f64)> = None;
    for r in results {
        match &out {
            Some((_, v)) if r.1 <= *v => {}
            _ => out = Some(r),
        }
    }
    Ok(out.expect("at least one start"))
}

/// Descent direction table: Hamiltonian of the augmented objective with
/// each atom's own fibers.
fn descent_table(pp: &PerturbedProblem<'_>, it: &Iterate, atoms: &[AtomPolicy], pen: &Penalty) -> Result<Vec<f64>> {
    let omega = pen.omega_eff(&it.h_hat);
    let weighted: Vec<(AtomPolicy, f64)> = atoms
        .iter()
        .zip(&omega)
        .filter(|(_, w)| **w > 0.0)
        .map(|(a, w)| (a.clone(), *w))
        .collect();
    let policies: Vec<AtomPolicy> = weighted.iter().map(|(a, _)| a.clone()).collect();
    let (_, table) = hamiltonian_at(pp, &it.sigma, &it.b, 1.0, pen.w1(&it.h1), weighted)?;
    Ok(table.relaxed_h(&policies))
}

fn sup_admissible(spec: &ProblemSpec, table: &[f64]) -> f64 {
    let n_u = spec.grid_u.len();
    let mut s = 0.0f64;
    for k in 0..spec.n_steps() {
        for u in 0..n_u {
            if spec.grid_u.admissible(k, u) {
                s = s.max(table[k * n_u + u].abs());
            }
        }
    }
    s
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn line_search(
    pp: &PerturbedProblem<'_>,
    sigma: &RelaxedControl,
    greedy: &RelaxedControl,
    atoms: &[AtomPolicy],
    pen: &Penalty,
    b: &[f64],
) -> Result<Iterate> {
    let eval = |g: f64| -> Result<Iterate> { evaluate(pp, &sigma.mix(greedy, g)?, atoms, pen, b) };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = eval(x1)?;
    let mut f2 = eval(x2)?;
    while hi - lo > 1e-10 {
        if f1.value <= f2.value {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = eval(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = eval(x2)?;
        }
    }
    let inner = if f1.value <= f2.value { f1 } else { f2 };
    let full = eval(1.0)?;
    Ok(if full.value <= inner.value { full } else { inner })
}

/// Frank–Wolfe on the augmented objective with the atom set fixed.
fn minimize(
    pp: &PerturbedProblem<'_>,
    cfg: &SolverConfig,
    start: Iterate,
    atoms: &[AtomPolicy],
    pen: &Penalty,
    iterations: &mut usize,
) -> Result<(Iterate, f64, bool)> {
    let spec = pp.spec;
    let mut it = start;
    let mut gap = f64::INFINITY;
    for k in 0..cfg.max_fw_iters {
        *iterations += 1;
        let g = descent_table(pp, &it, atoms, pen)?;
        let greedy = greedy_control(spec, &g)?;
        gap = dual_gap(&g, &it.sigma, &greedy);
        if gap <= cfg.fw_tol * sup_admissible(spec, &g) || gap <= 1e-15 {
            return Ok((it, gap, true));
        }
        let next = match cfg.step_rule {
            StepRule::LineSearch => line_search(pp, &it.sigma, &greedy, atoms, pen, &it.b)?,
            StepRule::OpenLoop => evaluate(pp, &it.sigma.mix(&greedy, 2.0 / (k as f64 + 2.0))?, atoms, pen, &it.b)?,
            StepRule::Fixed { gamma } => evaluate(pp, &it.sigma.mix(&greedy, gamma)?, atoms, pen, &it.b)?,
        };
        if matches!(cfg.step_rule, StepRule::LineSearch) && next.value >= it.value {
            return Ok((it, gap, false));
        }
        it = next;
    }
    Ok((it, gap, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
}

/// Solution of one perturbed problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub j: u32,
    pub sigma: RelaxedControl,
    /// Player-1 initial state, including the solved epigraph coordinate.
    pub b: Vec<f64>,
    pub atoms: Vec<AtomPolicy>,
    /// Penalty multipliers after the last round, unnormalized.
    pub raw_omega: Vec<f64>,
    pub raw_lambda: Vec<f64>,
    /// Normalized; `ω` keeps the positive-weight atoms only.
    pub multipliers: MultiplierSet,
    /// `h₀ʲ` at the solution.
    pub objective: f64,
    pub equality_residual: Vec<f64>,
    /// `Ĥʲ` per atom of the working set.
    pub constraint_values: Vec<f64>,
    pub fw_gap: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

impl Solution {
    pub fn alpha(&self, spec: &ProblemSpec) -> Option<f64> {
        spec.epigraph.map(|e| self.b[e])
    }
}

/// Exchange loop inside a fixed penalty schedule. `warm` supplies the
/// starting control, atoms and multiplier estimates.
pub fn solve_perturbed(pp: &PerturbedProblem<'_>, cfg: &SolverConfig, warm: Option<&Solution>) -> Result<Solution> {
    cfg.check()?;
    let spec = pp.spec;
    let n_eq = spec.n_eq();
    let mut sigma = warm.map_or_else(|| spec.incumbent_or_default(), |w| w.sigma.clone());
    let mut b = warm.map_or_else(|| spec.b_bar.clone(), |w| w.b.clone());
    let mut atoms: Vec<AtomPolicy> = warm.map_or_else(Vec::new, |w| w.atoms.clone());
    let mut pen = Penalty {
        lambda: warm.map_or_else(|| vec![0.0; n_eq], |w| w.raw_lambda.clone()),
        omega: warm.map_or_else(Vec::new, |w| w.raw_omega.clone()),
        mu: cfg.mu0,
    };
    if atoms.is_empty() {
        let (a, _) = worst_adversary(pp, cfg, &sigma, &b, &[], &[])?;
        atoms.push(a);
        pen.omega.push(0.0);
    }
    let mut born: Vec<usize> = (0..atoms.len()).collect();
    let mut clock = atoms.len();
    let mut iterations = 0usize;
    let mut converged = true;
    let mut gap = 0.0;
    let mut it = evaluate(pp, &sigma, &atoms, &pen, &b)?;
    for round in 0..cfg.penalty_rounds {
        let mut settled = false;
        let mut fw_ok = false;
        for _ in 0..cfg.max_exchange {
            let (next, g, ok) = minimize(pp, cfg, it, &atoms, &pen, &mut iterations)?;
            it = next;
            gap = g;
            fw_ok = ok;
            sigma = it.sigma.clone();
            b = it.b.clone();
            let (fresh, value) = worst_adversary(pp, cfg, &sigma, &b, &atoms, &it.h_hat)?;
            let incumbent = it.h_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if value > incumbent + cfg.tol_exchange && !atoms.contains(&fresh) {
                atoms.push(fresh);
                pen.omega.push(0.0);
                born.push(clock);
                clock += 1;
                if atoms.len() > cfg.max_atoms {
                    let eff = pen.omega_eff(&it.h_hat);
                    let last = atoms.len() - 1;
                    let victim = (0..last)
                        .filter(|&i| pen.omega[i] == 0.0 && eff.get(i).copied().unwrap_or(0.0) == 0.0)
                        .min_by_key(|&i| born[i])
                        .unwrap_or_else(|| (0..last).min_by_key(|&i| born[i]).expect("non-empty"));
                    atoms.remove(victim);
                    pen.omega.remove(victim);
                    born.remove(victim);
                }
                it = evaluate(pp, &sigma, &atoms, &pen, &b)?;
                continue;
            }
            settled = true;
            break;
        }
        converged &= settled && fw_ok;
        let w1 = pen.w1(&it.h1);
        let eff = pen.omega_eff(&it.h_hat);
        let change = w1.iter().zip(&pen.lambda).map(|(a, b)| (a - b).abs()).sum::<f64>()
            + eff.iter().zip(&pen.omega).map(|(a, b)| (a - b).abs()).sum::<f64>();
        pen.lambda = w1;
        pen.omega = eff;
        let last_round = round + 1 == cfg.penalty_rounds;
        if change <= 1e-12 * (1.0 + pen.omega.iter().sum::<f64>()) || last_round {
            break;
        }
        pen.mu *= cfg.mu_growth;
        it = evaluate(pp, &sigma, &atoms, &pen, &b)?;
    }

    let weighted: Vec<(AtomPolicy, f64)> = atoms
        .iter()
        .zip(&pen.omega)
        .filter(|(_, w)| **w > 0.0)
        .map(|(a, w)| (a.clone(), *w))
        .collect();
    let (raw, _) = hamiltonian_at(pp, &sigma, &b, 1.0, pen.lambda.clone(), weighted)?;
    let multipliers = raw.normalized()?;
    Ok(Solution {
        j: pp.j,
        sigma,
        b,
        atoms,
        raw_omega: pen.omega,
        raw_lambda: pen.lambda,
        multipliers,
        objective: it.h0,
        equality_residual: it.h1,
        constraint_values: it.h_hat,
        fw_gap: gap,
        iterations,
        status: if converged { SolveStatus::Converged } else { SolveStatus::MaxIterations },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Residual {
    fn new(value: f64, tol: f64) -> Self {
        let value = finite(value);
        Self { value, tol: finite(tol), pass: value <= tol }
    }
}

fn finite(x: f64) -> f64 {
    if x.is_nan() {
        f64::MAX
    } else {
        x.clamp(-f64::MAX, f64::MAX)
    }
}

/// Residuals of the necessary conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `l₀ + |l₁| + ω(𝒫)`; passes when in `(0, 1]` with nonnegative parts.
    pub normalization: Residual,
    pub min_condition: Residual,
    pub fiber_condition: Residual,
    pub active_constraint: Residual,
    pub transversality: Residual,
    /// Worst violation of `∫∫H(σ − σ̄) ≥ 0` over the dense family.
    pub variational: Residual,
    pub sup_h: f64,
}

impl ResidualReport {
    pub fn passed(&self) -> bool {
        self.entries().iter().all(|(_, r)| r.pass)
    }

    pub fn entries(&self) -> [(&'static str, Residual); 6] {
        [
            ("normalization", self.normalization),
            ("min_condition", self.min_condition),
            ("fiber_condition", self.fiber_condition),
            ("active_constraint", self.active_constraint),
            ("transversality", self.transversality),
            ("variational", self.variational),
        ]
    }
}

/// Residual of the min condition for a control against a Hamiltonian table.
pub fn min_condition_residual(spec: &ProblemSpec, h: &[f64], sigma: &RelaxedControl) -> f64 {
    let n_u = spec.grid_u.len();
    let best = argmin_rows(spec, h);
    (0..spec.n_steps())
        .map(|k| {
            let avg: f64 = (0..n_u).map(|u| sigma.row(k)[u] * h[k * n_u + u]).sum();
            (avg - h[k * n_u + best[k]]).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Evaluates every residual at `solution`, using `multipliers` (normally
/// `solution.multipliers`).
pub fn verify_conditions(
    pp: &PerturbedProblem<'_>,
    cfg: &SolverConfig,
    solution: &Solution,
    multipliers: &MultiplierSet,
) -> Result<ResidualReport> {
    let spec = pp.spec;
    let (n, m) = (spec.n, spec.m);
    let sigma = &solution.sigma;
    let policies: Vec<AtomPolicy> = multipliers.omega.iter().map(|a| a.policy.clone()).collect();
    let (adj, player, trajs) = AdjointMatrices::compute(spec, &pp.fields, sigma, &policies, &solution.b)?;
    let table = assemble_hamiltonians(spec, &pp.fields, multipliers, &adj, &player, &trajs)?;
    let n_u = spec.grid_u.len();
    let sup_h = table.sup_abs(spec);

    let normalization = Residual {
        value: finite(multipliers.total()),
        tol: 1.0,
        pass: multipliers.is_normalized(),
    };
    let min_condition = Residual::new(
        min_condition_residual(spec, &table.h, sigma),
        cfg.min_condition_tol * sup_h,
    );

    let mut fiber = 0.0f64;
    for (a, policy) in policies.iter().enumerate() {
        for k in 0..spec.n_steps() {
            let row = sigma.row(k);
            match cfg.mode {
                Mode::Hyperrelaxed => {
                    for u in 0..n_u {
                        if row[u] > 1e-8 {
                            let r = table.frak_h(a, k, u) - table.fiber_average(a, k, u, policy.fiber(k, u));
                            fiber = fiber.max(r);
                        }
                    }
                }
                Mode::Relaxed => {
                    let avg = |v: usize| (0..n_u).map(|u| row[u] * table.fiber_value(a, k, u, v)).sum::<f64>();
                    let best = (0..spec.grid_v.len())
                        .filter(|&v| spec.grid_v.admissible(k, v))
                        .map(avg)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let held: f64 = policy.fiber(k, 0).iter().enumerate().map(|(v, w)| w * avg(v)).sum();
                    fiber = fiber.max(best - held);
                }
            }
        }
    }
    let fiber_condition = Residual::new(fiber, cfg.tol_fiber);

    let mut active = 0.0f64;
    for tr in &trajs {
        active = active.max(pp.constraint(tr)?.abs());
    }
    let mut working = Vec::with_capacity(solution.atoms.len());
    for a in &solution.atoms {
        working.push(pp.constraint(&pp.joint(sigma, a, &solution.b)?)?);
    }
    let incumbent = working.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (_, fresh) = worst_adversary(pp, cfg, sigma, &solution.b, &solution.atoms, &working)?;
    if incumbent.is_finite() {
        active = active.max(fresh - incumbent);
    }
    let active_constraint = Residual::new(active, cfg.tol_exchange);

    let mut coef: Vec<f64> = table.k[..n].to_vec();
    coef.extend(std::iter::repeat(0.0).take(m));
    for i in 0..n + m {
        coef[i] += multipliers.lambda[i];
    }
    let point = pp.b_hat(&solution.b);
    let bx = spec.b_hat_set();
    let mut at_point = 0.0;
    let mut minimum = 0.0;
    let mut scale = 0.0;
    for i in 0..n + m {
        let c = coef[i];
        at_point += c * point[i];
        scale += (c * point[i]).abs();
        if c.abs() <= 1e-12 || bx.lo[i] == bx.hi[i] {
            minimum += c * point[i];
            continue;
        }
        let end = if c > 0.0 { bx.lo[i] } else { bx.hi[i] };
        minimum += c * end;
    }
    let transversality = Residual::new(at_point - minimum, 1e-6 * scale.max(1.0));

    let family = build_dense_family(sigma, &spec.grid_u, spec.horizon, cfg.dense_members, cfg.seed);
    let base: f64 = table.h.iter().zip(sigma.weights()).map(|(h, s)| h * s).sum();
    let mut variational = 0.0f64;
    for member in &family.members {
        let v: f64 = table.h.iter().zip(member.weights()).map(|(h, s)| h * s).sum();
        variational = variational.max(base - v);
    }
    let variational = Residual::new(variational, cfg.min_condition_tol * sup_h * spec.n_steps() as f64);

    Ok(ResidualReport {
        normalization,
        min_condition,
        fiber_condition,
        active_constraint,
        transversality,
        variational,
        sup_h,
    })
}

/// Per-index record of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JRecord {
    pub j: u32,
    pub error: Option<String>,
    pub solver_status: Option<SolveStatus>,
    pub objective: Option<f64>,
    pub alpha: Option<f64>,
    pub a_j: Vec<f64>,
    pub constraint_shift: f64,
    pub l0: f64,
    pub l1: Vec<f64>,
    pub omega_weights: Vec<f64>,
    pub omega_mass: f64,
    pub h0_grad: Vec<f64>,
    pub h1_grad: Vec<f64>,
    pub h_hat_grads: Vec<Vec<f64>>,
    pub residuals: Option<ResidualReport>,
    pub fw_gap: f64,
    pub iterations: usize,
}

impl JRecord {
    fn failed(j: u32, err: &Error) -> Self {
        Self {
            j,
            error: Some(err.to_string()),
            solver_status: None,
            objective: None,
            alpha: None,
            a_j: Vec::new(),
            constraint_shift: 0.0,
            l0: 0.0,
            l1: Vec::new(),
            omega_weights: Vec::new(),
            omega_mass: 0.0,
            h0_grad: Vec::new(),
            h1_grad: Vec::new(),
            h_hat_grads: Vec::new(),
            residuals: None,
            fw_gap: 0.0,
            iterations: 0,
        }
    }

    fn solved(pp: &PerturbedProblem<'_>, sol: &Solution, residuals: ResidualReport) -> Self {
        let mult = &sol.multipliers;
        Self {
            j: pp.j,
            error: None,
            solver_status: Some(sol.status),
            objective: Some(sol.objective),
            alpha: sol.alpha(pp.spec),
            a_j: pp.a_j.clone(),
            constraint_shift: pp.constraint_shift,
            l0: mult.l0,
            l1: mult.l1.clone(),
            omega_weights: mult.omega.iter().map(|a| a.weight).collect(),
            omega_mass: mult.omega_mass(),
            h0_grad: mult.h0_grad.clone(),
            h1_grad: mult.h1_grad.clone(),
            h_hat_grads: mult.omega.iter().map(|a| a.h_hat_grad.clone()).collect(),
            residuals: Some(residuals),
            fw_gap: sol.fw_gap,
            iterations: sol.iterations,
        }
    }

    pub fn is_solved(&self) -> bool {
        self.error.is_none()
    }

    fn multiplier_vector(&self) -> Vec<f64> {
        let mut v = vec![self.l0];
        v.extend_from_slice(&self.l1);
        v.push(self.omega_mass);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauchyReport {
    pub multiplier_increments: Vec<f64>,
    pub z_increments: Vec<f64>,
    pub z_hat_increments: Vec<f64>,
    pub non_cauchy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CertificateStatus {
    Certified,
    Flagged { reasons: Vec<String> },
}

/// Outcome of a j-sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NCCertificate {
    pub problem: String,
    pub mode: Mode,
    pub n_steps: usize,
    pub j_values: Vec<u32>,
    /// Unperturbed objective at `σ̄`; for epigraph problems the epigraph
    /// variable is set to the exact worst-case constraint value.
    pub value: Option<f64>,
    /// Largest exact constraint value over the final atoms.
    pub worst_constraint: Option<f64>,
    pub alpha: Option<f64>,
    /// Player-1 initial state at which `value` is evaluated.
    pub initial_state: Option<Vec<f64>>,
    pub multipliers: Option<MultiplierSet>,
    pub residuals: Option<ResidualReport>,
    pub sigma_bar: Option<RelaxedControl>,
    pub j_history: Vec<JRecord>,
    pub cauchy: CauchyReport,
    pub status: CertificateStatus,
}

impl NCCertificate {
    pub fn is_certified(&self) -> bool {
        matches!(self.status, CertificateStatus::Certified)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate fields serialize")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// One row per solved index.
    pub fn convergence_csv(&self) -> String {
        let mut s = String::from("j,l0,l1_norm,omega_mass,min_residual,fiber_residual,active_residual\n");
        for r in self.j_history.iter().filter(|r| r.is_solved()) {
            let l1 = r.l1.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (mn, fb, ac) = r.residuals.map_or((0.0, 0.0, 0.0), |res| {
                (res.min_condition.value, res.fiber_condition.value, res.active_constraint.value)
            });
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.j, r.l0, l1, r.omega_mass, mn, fb, ac);
        }
        s
    }
}

/// Exact (unmollified) objective at `σ̄`, with the epigraph coordinate set to
/// the exact worst case over `atoms`.
fn unperturbed_value(spec: &ProblemSpec, sol: &Solution) -> Result<(f64, f64, Vec<f64>)> {
    let exact = FieldSet::new(spec, None)?;
    let mut b = sol.b.clone();
    let b_hat = |b: &[f64]| {
        let mut v = b.to_vec();
        v.extend_from_slice(&spec.b_tilde_bar);
        v
    };
    let mut worst = f64::NEG_INFINITY;
    for a in &sol.atoms {
        let tr = exact.joint(spec, &a.adversary().compose(&sol.sigma)?, &b_hat(&b))?;
        worst = worst.max(exact.h_hat.scalar(tr.final_state())?);
    }
    if let Some(e) = spec.epigraph {
        b[e] += worst;
        worst = 0.0;
    }
    let player = exact.player(spec, &sol.sigma, &b)?;
    Ok((exact.h0.scalar(player.final_state())?, worst, b))
}

/// Solves the perturbed problem for every `j`, warm-starting each from the
/// previous solution, and certifies the largest solved index.
pub fn run_j_sweep(spec: &ProblemSpec, cfg: &SolverConfig) -> Result<NCCertificate> {
    cfg.check()?;
    let mut history = Vec::with_capacity(cfg.j_values.len());
    let mut solved: Vec<Solution> = Vec::new();
    let mut reasons = Vec::new();
    for &j in &cfg.j_values {
        let attempt = PerturbedProblem::new(spec, j).and_then(|pp| {
            let sol = solve_perturbed(&pp, cfg, solved.last())?;
            let res = verify_conditions(&pp, cfg, &sol, &sol.multipliers)?;
            Ok((JRecord::solved(&pp, &sol, res), sol))
        });
        match attempt {
            Ok((rec, sol)) => {
                history.push(rec);
                solved.push(sol);
            }
            Err(e) => {
                reasons.push(format!("j = {j} failed: {e}"));
                history.push(JRecord::failed(j, &e));
            }
        }
    }
    let Some(last) = solved.last() else {
        reasons.push("no index of the sweep was solved".into());
        return Ok(NCCertificate {
            problem: spec.name.clone(),
            mode: cfg.mode,
            n_steps: spec.n_steps(),
            j_values: cfg.j_values.clone(),
            value: None,
            worst_constraint: None,
            alpha: None,
            initial_state: None,
            multipliers: None,
            residuals: None,
            sigma_bar: None,
            j_history: history,
            cauchy: CauchyReport {
                multiplier_increments: Vec::new(),
                z_increments: Vec::new(),
                z_hat_increments: Vec::new(),
                non_cauchy: false,
            },
            status: CertificateStatus::Flagged { reasons },
        });
    };

    let solved_records: Vec<&JRecord> = history.iter().filter(|r| r.is_solved()).collect();
    let multiplier_increments: Vec<f64> = solved_records
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].multiplier_vector(), w[1].multiplier_vector());
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .collect();
    let js: Vec<u32> = solved.iter().map(|s| s.j).collect();
    let sigmas: Vec<RelaxedControl> = solved.iter().map(|s| s.sigma.clone()).collect();
    let initial: Vec<Vec<f64>> = solved.iter().map(|s| s.b.clone()).collect();
    let final_atoms: Vec<AtomPolicy> = last.multipliers.omega.iter().map(|a| a.policy.clone()).collect();
    let sweep = limit_sweep(spec, &js, &sigmas, &initial, &final_atoms)?;
    let flagged = non_cauchy(&multiplier_increments, CAUCHY_FLOOR) || sweep.non_cauchy;
    let cauchy = CauchyReport {
        multiplier_increments,
        z_increments: sweep.z_increments,
        z_hat_increments: sweep.z_hat_increments,
        non_cauchy: flagged,
    };

    let residuals = history.iter().rev().find_map(|r| r.residuals).expect("solved record has residuals");
    for (name, r) in residuals.entries() {
        if !r.pass {
            reasons.push(format!("{name} residual {:.3e} exceeds {:.3e}", r.value, r.tol));
        }
    }
    if last.status != SolveStatus::Converged {
        reasons.push(format!("solver did not converge at j = {}", last.j));
    }
    if cauchy.non_cauchy {
        reasons.push("increments between consecutive indices grew (NonCauchy)".into());
    }
    let (value, worst, b) = unperturbed_value(spec, last)?;
    let status = if reasons.is_empty() {
        CertificateStatus::Certified
    } else {
        CertificateStatus::Flagged { reasons }
    };
    Ok(NCCertificate {
        problem: spec.name.clone(),
        mode: cfg.mode,
        n_steps: spec.n_steps(),
        j_values: cfg.j_values.clone(),
        value: Some(finite(value)),
        worst_constraint: Some(finite(worst)),
        alpha: spec.epigraph.map(|e| finite(b[e])),
        initial_state: Some(b.into_iter().map(finite).collect()),
        multipliers: Some(last.multipliers.clone()),
        residuals: Some(residuals),
        sigma_bar: Some(last.sigma.clone()),
        j_history: history,
        cauchy,
        status,
    })
}

/// Exact trajectory of `σ̄` for export.
pub fn final_trajectory(spec: &ProblemSpec, sigma: &RelaxedControl, b: &[f64]) -> Result<Trajectory> {
    let exact = FieldSet::new(spec, None)?;
    integrate_schedule(spec, &exact.f, &relaxed_schedule(sigma), b, ControlTag { kind: TrajectoryKind::Relaxed, j: None })
}
