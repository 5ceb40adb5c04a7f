//! Backward adjoint matrices `Z`, `Ẑ(π)`, the multiplier set, and the
//! Hamiltonian tables built from them.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{FiberPolicy, RelaxedControl};
use crate::error::{Error, Result};
use crate::mollify::{Controls, Smoothed, MAX_OUT};
use crate::problem::ProblemSpec;
use crate::trajectory::{joint_schedule, relaxed_schedule, Adversary, FieldSet, StepAtoms, Trajectory};

/// Simpson weights for (left node, midpoint, right node) of a step.
pub const SIMPSON: [f64; 3] = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];

/// Increments below this are treated as integrator noise by the Cauchy test.
pub const CAUCHY_FLOOR: f64 = 1e-8;

/// Row-major `d × d` matrices on the grid nodes and step midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub dim: usize,
    pub nodes: Vec<f64>,
    pub mids: Vec<f64>,
}

impl AdjointPath {
    pub fn n_steps(&self) -> usize {
        self.nodes.len() / (self.dim * self.dim) - 1
    }
    pub fn node(&self, k: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.nodes[k * s..(k + 1) * s]
    }
    pub fn mid(&self, k: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.mids[k * s..(k + 1) * s]
    }

    /// Largest spectral norm over nodes and midpoints.
    pub fn sup_norm(&self) -> f64 {
        let d = self.dim;
        self.nodes
            .chunks(d * d)
            .chain(self.mids.chunks(d * d))
            .map(|m| DMatrix::from_row_slice(d, d, m).singular_values().max())
            .fold(0.0, f64::max)
    }

    /// Largest entry-wise difference.
    pub fn sup_distance(&self, other: &AdjointPath) -> f64 {
        self.nodes
            .iter()
            .zip(&other.nodes)
            .chain(self.mids.iter().zip(&other.mids))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `c · Z` at node `k` (row vector times matrix).
    pub fn row_times(&self, c: &[f64], m: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = (0..d).map(|r| c[r] * m[r * d + i]).sum();
        }
    }
}

/// `1 + (t₁ − t₀)·L·e^{t₁−t₀}`.
pub fn gronwall_bound(horizon: (f64, f64), lipschitz: f64) -> f64 {
    let len = horizon.1 - horizon.0;
    1.0 + len * lipschitz * len.exp()
}

fn averaged_jacobian(
    spec: &ProblemSpec,
    field: &Smoothed,
    t: f64,
    x: &[f64],
    atoms: &[(usize, Option<usize>, f64)],
    out: &mut [f64],
) -> Result<()> {
    let d = field.field().dim_state();
    out[..d * d].iter_mut().for_each(|v| *v = 0.0);
    let mut val = [0.0; MAX_OUT];
    let mut jac = [0.0; MAX_OUT * MAX_OUT];
    for &(u, v, w) in atoms {
        let ctrl = Controls {
            u: spec.grid_u.point(u),
            v: v.map_or(&[][..], |v| spec.grid_v.point(v)),
        };
        field.value_grad_into(t, x, &ctrl, &mut val[..d], &mut jac[..d * d])?;
        for i in 0..d * d {
            out[i] += w * jac[i];
        }
    }
    Ok(())
}

fn mat_mul_into(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = (0..d).map(|i| a[r * d + i] * b[i * d + c]).sum();
        }
    }
}

/// Backward RK4 for `Z′ = −Z A(t)`, `Z(t₁) = I`, where `A` is the
/// control-averaged Jacobian of the mollified field along `traj`.
pub fn integrate_adjoint(
    spec: &ProblemSpec,
    field: &Smoothed,
    schedule: &[StepAtoms],
    traj: &Trajectory,
) -> Result<AdjointPath> {
    let d = field.field().dim_state();
    if traj.dim != d || field.field().dim_out() != d {
        return Err(Error::ShapeMismatch(format!(
            "adjoint of a {d}-dimensional field along a {}-dimensional trajectory",
            traj.dim
        )));
    }
    let n_steps = spec.n_steps();
    if schedule.len() != n_steps || traj.n_steps() != n_steps {
        return Err(Error::ShapeMismatch("schedule, trajectory and grid disagree on the step count".into()));
    }
    let dt = spec.dt();
    let s = d * d;
    let mut nodes = vec![0.0; (n_steps + 1) * s];
    let mut mids = vec![0.0; n_steps * s];
    let mut z = vec![0.0; s];
    for i in 0..d {
        z[i * d + i] = 1.0;
    }
    nodes[n_steps * s..].copy_from_slice(&z);
    let (mut a1, mut am, mut a0) = (vec![0.0; s], vec![0.0; s], vec![0.0; s]);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; s], vec![0.0; s], vec![0.0; s], vec![0.0; s]);
    let mut tmp = vec![0.0; s];
    for k in (0..n_steps).rev() {
        let atoms = &schedule[k];
        let t = spec.time(k);
        averaged_jacobian(spec, field, t + dt, traj.state(k + 1), atoms, &mut a1)?;
        averaged_jacobian(spec, field, t + 0.5 * dt, traj.mid(k), atoms, &mut am)?;
        averaged_jacobian(spec, field, t, traj.state(k), atoms, &mut a0)?;
        mat_mul_into(&z, &a1, d, &mut k1);
        for i in 0..s {
            tmp[i] = z[i] + 0.5 * dt * k1[i];
        }
        mat_mul_into(&tmp, &am, d, &mut k2);
        for i in 0..s {
            tmp[i] = z[i] + 0.5 * dt * k2[i];
        }
        mat_mul_into(&tmp, &am, d, &mut k3);
        for i in 0..s {
            tmp[i] = z[i] + dt * k3[i];
        }
        mat_mul_into(&tmp, &a0, d, &mut k4);
        for i in 0..s {
            mids[k * s + i] = z[i] + dt * (5.0 / 24.0 * k1[i] + (k2[i] + k3[i]) / 6.0 - k4[i] / 24.0);
            z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        nodes[k * s..(k + 1) * s].copy_from_slice(&z);
    }
    Ok(AdjointPath { dim: d, nodes, mids })
}

/// `Zʲ` along the player-1 trajectory of `σ`.
pub fn integrate_z(spec: &ProblemSpec, fields: &FieldSet, sigma: &RelaxedControl, traj: &Trajectory) -> Result<AdjointPath> {
    integrate_adjoint(spec, &fields.f, &relaxed_schedule(sigma), traj)
}

/// `Ẑʲ` along the joint trajectory of `σ` composed with the adversary.
pub fn integrate_z_hat(
    spec: &ProblemSpec,
    fields: &FieldSet,
    sigma: &RelaxedControl,
    adversary: Adversary<'_>,
    traj: &Trajectory,
) -> Result<AdjointPath> {
    integrate_adjoint(spec, &fields.f_hat, &joint_schedule(&adversary.compose(sigma)?), traj)
}

/// An adversary atom of `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomPolicy {
    Fiber(FiberPolicy),
    Relaxed(RelaxedControl),
}

impl AtomPolicy {
    pub fn adversary(&self) -> Adversary<'_> {
        match self {
            AtomPolicy::Fiber(p) => Adversary::Fiber(p),
            AtomPolicy::Relaxed(s) => Adversary::Relaxed(s),
        }
    }

    /// Fiber weights over V at step `k` and player-1 index `u`.
    pub fn fiber(&self, k: usize, u: usize) -> &[f64] {
        match self {
            AtomPolicy::Fiber(p) => p.fiber(k, u),
            AtomPolicy::Relaxed(s) => s.row(k),
        }
    }
}

/// Adjoint matrices at one mollification index.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointMatrices {
    pub j: Option<u32>,
    pub z: AdjointPath,
    pub z_hat: Vec<AdjointPath>,
}

impl AdjointMatrices {
    /// Player and per-atom joint trajectories from player-1 initial state `b`
    /// plus their adjoints.
    pub fn compute(
        spec: &ProblemSpec,
        fields: &FieldSet,
        sigma: &RelaxedControl,
        atoms: &[AtomPolicy],
        b: &[f64],
    ) -> Result<(Self, Trajectory, Vec<Trajectory>)> {
        let mut b_hat = b.to_vec();
        b_hat.extend_from_slice(&spec.b_tilde_bar);
        let player = fields.player(spec, sigma, b)?;
        let z = integrate_z(spec, fields, sigma, &player)?;
        let joint: Vec<(Trajectory, AdjointPath)> = atoms
            .par_iter()
            .map(|a| {
                let joint = a.adversary().compose(sigma)?;
                let tr = fields.joint(spec, &joint, &b_hat)?;
                let zh = integrate_adjoint(spec, &fields.f_hat, &joint_schedule(&joint), &tr)?;
                Ok((tr, zh))
            })
            .collect::<Result<_>>()?;
        let (trajs, z_hat): (Vec<_>, Vec<_>) = joint.into_iter().unzip();
        Ok((Self { j: fields.j, z, z_hat }, player, trajs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaAtom {
    pub policy: AtomPolicy,
    pub weight: f64,
    /// `ℋ̂(π)`: gradient of the constraint function at the atom's endpoint.
    pub h_hat_grad: Vec<f64>,
}

/// `(l₀, l₁, ω)` with the endpoint gradients they multiply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    pub l0: f64,
    pub l1: Vec<f64>,
    pub omega: Vec<OmegaAtom>,
    /// `ℋ₀`, length `n`.
    pub h0_grad: Vec<f64>,
    /// `ℋ₁`, row-major `n_eq × n`.
    pub h1_grad: Vec<f64>,
    /// `∫ k̂(π)(t₀) ω(dπ)`, length `n + m`.
    pub lambda: Vec<f64>,
}

impl MultiplierSet {
    pub fn l1_norm(&self) -> f64 {
        self.l1.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn omega_mass(&self) -> f64 {
        self.omega.iter().map(|a| a.weight).sum()
    }

    pub fn total(&self) -> f64 {
        self.l0 + self.l1_norm() + self.omega_mass()
    }

    /// `0 < l₀ + |l₁| + ω(𝒫) ≤ 1` with nonnegative `l₀` and weights.
    pub fn is_normalized(&self) -> bool {
        let t = self.total();
        self.l0 >= 0.0 && self.omega.iter().all(|a| a.weight >= 0.0) && t > 0.0 && t <= 1.0 + 1e-12
    }

    /// Positive rescaling of every multiplier.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.l0 *= s;
        out.l1.iter_mut().for_each(|x| *x *= s);
        out.omega.iter_mut().for_each(|a| a.weight *= s);
        out.lambda.iter_mut().for_each(|x| *x *= s);
        out
    }

    /// Rescaled to unit total; errors on the zero multiplier.
    pub fn normalized(&self) -> Result<Self> {
        let t = self.total();
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("multiplier total {t} cannot be normalized")));
        }
        Ok(self.scaled(1.0 / t))
    }

    /// The row vector `l₀ℋ₀ + l₁ℋ₁`.
    pub fn endpoint_row(&self) -> Vec<f64> {
        let n = self.h0_grad.len();
        let mut c: Vec<f64> = self.h0_grad.iter().map(|g| self.l0 * g).collect();
        for (q, l) in self.l1.iter().enumerate() {
            for i in 0..n {
                c[i] += l * self.h1_grad[q * n + i];
            }
        }
        c
    }
}

/// Step-integrated Hamiltonian data; step integrals use Simpson's rule on
/// the stored nodes and midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianTable {
    pub n_steps: usize,
    pub n_u: usize,
    pub n_v: usize,
    /// `k(t)` at nodes, `[n_steps + 1] × n`.
    pub k: Vec<f64>,
    /// `k̂(π)(t)` at nodes per atom, `[n_steps + 1] × (n + m)`.
    pub k_hat: Vec<Vec<f64>>,
    /// `∫_step k·f(u)`, `[n_steps] × n_u`.
    pub player: Vec<f64>,
    /// `∫_step k̂·f̂(u, v)` per atom, `[n_steps] × n_u × n_v`.
    pub fiber: Vec<Vec<f64>>,
    /// `𝔥(π, t, u)`: max over admissible v of `fiber`, `[n_steps] × n_u`.
    pub frak_h: Vec<Vec<f64>>,
    /// `H = player + Σ ω 𝔥`, `[n_steps] × n_u`.
    pub h: Vec<f64>,
    pub weights: Vec<f64>,
}

impl HamiltonianTable {
    pub fn h(&self, k: usize, u: usize) -> f64 {
        self.h[k * self.n_u + u]
    }
    pub fn frak_h(&self, a: usize, k: usize, u: usize) -> f64 {
        self.frak_h[a][k * self.n_u + u]
    }
    pub fn fiber_value(&self, a: usize, k: usize, u: usize, v: usize) -> f64 {
        self.fiber[a][(k * self.n_u + u) * self.n_v + v]
    }

    /// `∫∫ k̂·f̂ π(t,u)(dv)` for the atom's own fibers.
    pub fn fiber_average(&self, a: usize, k: usize, u: usize, fiber: &[f64]) -> f64 {
        fiber.iter().enumerate().map(|(v, w)| w * self.fiber_value(a, k, u, v)).sum()
    }

    /// Hamiltonian with `𝔥` replaced by the relaxed-adversary average
    /// `Σ_v σ_P(t)(v) ∫k̂·f̂(u, v)`.
    pub fn relaxed_h(&self, atoms: &[AtomPolicy]) -> Vec<f64> {
        let mut g = self.player.clone();
        for (a, policy) in atoms.iter().enumerate() {
            let w = self.weights[a];
            if w == 0.0 {
                continue;
            }
            for k in 0..self.n_steps {
                for u in 0..self.n_u {
                    g[k * self.n_u + u] += w * self.fiber_average(a, k, u, policy.fiber(k, u));
                }
            }
        }
        g
    }

    /// Largest `|H|` over admissible cells.
    pub fn sup_abs(&self, spec: &ProblemSpec) -> f64 {
        let mut s = 0.0f64;
        for k in 0..self.n_steps {
            for u in 0..self.n_u {
                if spec.grid_u.admissible(k, u) {
                    s = s.max(self.h(k, u).abs());
                }
            }
        }
        s
    }
}

/// Rowwise argmin of a `[n_steps] × n_u` table over admissible points;
/// ties go to the lowest index.
pub fn argmin_rows(spec: &ProblemSpec, table: &[f64]) -> Vec<usize> {
    let n_u = spec.grid_u.len();
    (0..spec.n_steps())
        .map(|k| {
            let mut best = spec.grid_u.first_admissible(k);
            for u in 0..n_u {
                if spec.grid_u.admissible(k, u) && table[k * n_u + u] < table[k * n_u + best] {
                    best = u;
                }
            }
            best
        })
        .collect()
}

fn step_points<'a>(traj: &'a Trajectory, k: usize) -> [&'a [f64]; 3] {
    [traj.state(k), traj.mid(k), traj.state(k + 1)]
}

fn adjoint_rows(path: &AdjointPath, c: &[f64], k: usize, out: &mut [[f64; MAX_OUT]; 3]) {
    path.row_times(c, path.node(k), &mut out[0]);
    path.row_times(c, path.mid(k), &mut out[1]);
    path.row_times(c, path.node(k + 1), &mut out[2]);
}

/// `k̂ = ℋ̂ Ẑ` at nodes, the step-integrated fiber integrand
/// `[n_steps] × n_u × n_v`, and `𝔥` (its max over admissible `v`).
pub fn fiber_table(
    spec: &ProblemSpec,
    fields: &FieldSet,
    zh: &AdjointPath,
    grad: &[f64],
    traj: &Trajectory,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let nm = spec.n + spec.m;
    let n_steps = spec.n_steps();
    let (n_u, n_v) = (spec.grid_u.len(), spec.grid_v.len());
    if grad.len() != nm || zh.dim != nm || traj.dim != nm {
        return Err(Error::ShapeMismatch("fiber table needs joint-dimension data".into()));
    }
    let dt = spec.dt();
    let mut kh = vec![0.0; (n_steps + 1) * nm];
    for s in 0..=n_steps {
        zh.row_times(grad, zh.node(s), &mut kh[s * nm..(s + 1) * nm]);
    }
    let rows: Vec<Vec<f64>> = (0..n_steps)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let mut kr = [[0.0; MAX_OUT]; 3];
            adjoint_rows(zh, grad, s, &mut kr);
            let pts = step_points(traj, s);
            let t = spec.time(s);
            let times = [t, t + 0.5 * dt, t + dt];
            let mut out = vec![0.0; n_u * n_v];
            let mut val = [0.0; MAX_OUT];
            for u in 0..n_u {
                for v in 0..n_v {
                    let ctrl = Controls { u: spec.grid_u.point(u), v: spec.grid_v.point(v) };
                    let mut acc = 0.0;
                    for q in 0..3 {
                        fields.f_hat.value_into(times[q], pts[q], &ctrl, &mut val[..nm])?;
                        acc += SIMPSON[q] * (0..nm).map(|i| kr[q][i] * val[i]).sum::<f64>();
                    }
                    out[u * n_v + v] = dt * acc;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let fib: Vec<f64> = rows.concat();
    let mut fh = vec![0.0; n_steps * n_u];
    for s in 0..n_steps {
        for u in 0..n_u {
            let cell = &fib[(s * n_u + u) * n_v..(s * n_u + u + 1) * n_v];
            fh[s * n_u + u] = (0..n_v)
                .filter(|&v| spec.grid_v.admissible(s, v))
                .map(|v| cell[v])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok((kh, fib, fh))
}

/// Assembles `k`, `k̂`, `𝔥` and `H` for the given multipliers. `atom_trajs`
/// and `adjoints.z_hat` are indexed like `multipliers.omega`.
pub fn assemble_hamiltonians(
    spec: &ProblemSpec,
    fields: &FieldSet,
    multipliers: &MultiplierSet,
    adjoints: &AdjointMatrices,
    player: &Trajectory,
    atom_trajs: &[Trajectory],
) -> Result<HamiltonianTable> {
    let (n, m) = (spec.n, spec.m);
    let nm = n + m;
    let n_steps = spec.n_steps();
    let (n_u, n_v) = (spec.grid_u.len(), spec.grid_v.len());
    let n_atoms = multipliers.omega.len();
    if adjoints.z_hat.len() != n_atoms || atom_trajs.len() != n_atoms {
        return Err(Error::ShapeMismatch(format!(
            "{n_atoms} ω-atoms but {} adjoints and {} trajectories",
            adjoints.z_hat.len(),
            atom_trajs.len()
        )));
    }
    if adjoints.z.dim != n || player.dim != n || multipliers.h0_grad.len() != n {
        return Err(Error::ShapeMismatch("player-1 adjoint or gradient has the wrong dimension".into()));
    }
    if multipliers.h1_grad.len() != multipliers.l1.len() * n || multipliers.l1.len() != spec.n_eq() {
        return Err(Error::ShapeMismatch("equality multiplier and gradient disagree".into()));
    }
    for (a, atom) in multipliers.omega.iter().enumerate() {
        if atom.h_hat_grad.len() != nm || adjoints.z_hat[a].dim != nm || atom_trajs[a].dim != nm {
            return Err(Error::ShapeMismatch(format!("ω-atom {a} has the wrong joint dimension")));
        }
    }
    let dt = spec.dt();
    let c = multipliers.endpoint_row();

    let mut k = vec![0.0; (n_steps + 1) * n];
    for s in 0..=n_steps {
        adjoints.z.row_times(&c, adjoints.z.node(s), &mut k[s * n..(s + 1) * n]);
    }
    let player_rows: Vec<Vec<f64>> = (0..n_steps)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let mut rows = [[0.0; MAX_OUT]; 3];
            adjoint_rows(&adjoints.z, &c, s, &mut rows);
            let pts = step_points(player, s);
            let t = spec.time(s);
            let times = [t, t + 0.5 * dt, t + dt];
            let mut out = vec![0.0; n_u];
            let mut val = [0.0; MAX_OUT];
            for (u, o) in out.iter_mut().enumerate() {
                let ctrl = Controls { u: spec.grid_u.point(u), v: &[] };
                for q in 0..3 {
                    fields.f.value_into(times[q], pts[q], &ctrl, &mut val[..n])?;
                    *o += dt * SIMPSON[q] * (0..n).map(|i| rows[q][i] * val[i]).sum::<f64>();
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let player_table: Vec<f64> = player_rows.concat();

    let mut k_hat = Vec::with_capacity(n_atoms);
    let mut fiber = Vec::with_capacity(n_atoms);
    let mut frak_h = Vec::with_capacity(n_atoms);
    for (a, atom) in multipliers.omega.iter().enumerate() {
        let (kh, fib, fh) = fiber_table(spec, fields, &adjoints.z_hat[a], &atom.h_hat_grad, &atom_trajs[a])?;
        k_hat.push(kh);
        fiber.push(fib);
        frak_h.push(fh);
    }

    let weights: Vec<f64> = multipliers.omega.iter().map(|a| a.weight).collect();
    let mut h = player_table.clone();
    for (a, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            for (hv, fv) in h.iter_mut().zip(&frak_h[a]) {
                *hv += w * fv;
            }
        }
    }
    Ok(HamiltonianTable { n_steps, n_u, n_v, k, k_hat, player: player_table, fiber, frak_h, h, weights })
}

/// Per-atom best response: the admissible `v` maximizing the step-integrated
/// fiber integrand at every `(t, u)`, lowest index on ties.
pub fn fiber_argmax(spec: &ProblemSpec, table: &HamiltonianTable, a: usize) -> Vec<Vec<usize>> {
    (0..table.n_steps)
        .map(|k| {
            (0..table.n_u)
                .map(|u| {
                    let mut best: Option<usize> = None;
                    for v in 0..table.n_v {
                        if !spec.grid_v.admissible(k, v) {
                            continue;
                        }
                        match best {
                            Some(b) if table.fiber_value(a, k, u, v) <= table.fiber_value(a, k, u, b) => {}
                            _ => best = Some(v),
                        }
                    }
                    best.unwrap_or(0)
                })
                .collect()
        })
        .collect()
}

/// Adjoints across the j-sequence with sup-norm increments.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitSweep {
    pub j_values: Vec<u32>,
    /// Largest-j matrices, the surrogate of the limit.
    pub limit: AdjointMatrices,
    pub z_increments: Vec<f64>,
    /// Largest increment over atoms between consecutive j.
    pub z_hat_increments: Vec<f64>,
    pub non_cauchy: bool,
}

/// True when an increment grows past the previous one by more than the
/// noise floor. The first comparison is skipped: the coarsest index is a
/// pre-asymptotic warm-up.
pub fn non_cauchy(increments: &[f64], floor: f64) -> bool {
    increments.windows(2).skip(1).any(|w| w[1] > w[0].max(floor) + floor)
}

/// Recomputes `Zʲ` along each `σʲ` (from player-1 initial state `bʲ`) and
/// `Ẑʲ` for the fixed `atoms`.
pub fn limit_sweep(
    spec: &ProblemSpec,
    j_values: &[u32],
    sigmas: &[RelaxedControl],
    initial: &[Vec<f64>],
    atoms: &[AtomPolicy],
) -> Result<LimitSweep> {
    if j_values.is_empty() {
        return Err(Error::EmptyJSequence);
    }
    if sigmas.len() != j_values.len() || initial.len() != j_values.len() {
        return Err(Error::ShapeMismatch(format!("{} controls for {} indices", sigmas.len(), j_values.len())));
    }
    let mut per_j = Vec::with_capacity(j_values.len());
    for ((&j, sigma), b) in j_values.iter().zip(sigmas).zip(initial) {
        let fields = FieldSet::new(spec, Some(j))?;
        let (adj, _, _) = AdjointMatrices::compute(spec, &fields, sigma, atoms, b)?;
        per_j.push(adj);
    }
    let mut z_increments = Vec::new();
    let mut z_hat_increments = Vec::new();
    for w in per_j.windows(2) {
        z_increments.push(w[0].z.sup_distance(&w[1].z));
        let zh = w[0]
            .z_hat
            .iter()
            .zip(&w[1].z_hat)
            .map(|(a, b)| a.sup_distance(b))
            .fold(0.0, f64::max);
        z_hat_increments.push(zh);
    }
    let flagged = non_cauchy(&z_increments, CAUCHY_FLOOR) || non_cauchy(&z_hat_increments, CAUCHY_FLOOR);
    Ok(LimitSweep {
        j_values: j_values.to_vec(),
        limit: per_j.pop().expect("non-empty"),
        z_increments,
        z_hat_increments,
        non_cauchy: flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::FiberPolicy;
    use crate::library;

    fn expm(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        (a * t).exp()
    }

    #[test]
    fn constant_dynamics_give_identity() {
        let spec = library::abs_minimax_with_steps(50);
        let fields = FieldSet::new(&spec, Some(5)).unwrap();
        let sigma = spec.incumbent_or_default();
        let tr = fields.player(&spec, &sigma, &spec.b_bar).unwrap();
        let z = integrate_z(&spec, &fields, &sigma, &tr).unwrap();
        assert!(z.nodes.iter().chain(&z.mids).all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let spec = library::scalar_linear(-0.5, 2000);
        let fields = FieldSet::new(&spec, Some(10)).unwrap();
        let sigma = spec.incumbent_or_default();
        let tr = fields.player(&spec, &sigma, &spec.b_bar).unwrap();
        let z = integrate_z(&spec, &fields, &sigma, &tr).unwrap();
        assert_eq!(z.node(2000), &[1.0]);
        for k in (0..=2000).step_by(50) {
            let t = spec.time(k);
            assert!((z.node(k)[0] - (-0.5 * (1.0 - t)).exp()).abs() < 1e-6);
        }
        for k in (0..2000).step_by(50) {
            let t = spec.time(k) + 0.5 * spec.dt();
            assert!((z.mid(k)[0] - (-0.5 * (1.0 - t)).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn joint_linear_adjoint_is_a_matrix_exponential() {
        let spec = library::linear_pair(400);
        let fields = FieldSet::new(&spec, Some(7)).unwrap();
        let sigma = spec.incumbent_or_default();
        let pi = FiberPolicy::uniform(&spec.grid_u, &spec.grid_v);
        let tr = fields.joint(&spec, &crate::control::fiber_compose(&sigma, &pi).unwrap(), &spec.b_hat()).unwrap();
        let zh = integrate_z_hat(&spec, &fields, &sigma, Adversary::Fiber(&pi), &tr).unwrap();
        let a = library::LINEAR_PAIR_A;
        let c = library::LINEAR_PAIR_C;
        let ahat = DMatrix::from_row_slice(3, 3, &[a[0][0], a[0][1], 0.0, a[1][0], a[1][1], 0.0, c[0], c[1], c[2]]);
        for k in (0..=400).step_by(40) {
            let want = expm(&ahat, 1.0 - spec.time(k));
            let got = DMatrix::from_row_slice(3, 3, zh.node(k));
            assert!((want - got).amax() < 1e-8, "step {k}");
        }
    }

    #[test]
    fn decoupled_joint_adjoint_is_block_diagonal() {
        let spec = library::abs_minimax_with_steps(100);
        let fields = FieldSet::new(&spec, Some(5)).unwrap();
        let sigma = spec.incumbent_or_default();
        let pi = FiberPolicy::uniform(&spec.grid_u, &spec.grid_v);
        let tr = fields.joint(&spec, &crate::control::fiber_compose(&sigma, &pi).unwrap(), &spec.b_hat()).unwrap();
        let zh = integrate_z_hat(&spec, &fields, &sigma, Adversary::Fiber(&pi), &tr).unwrap();
        // α does not feed ỹ and ỹ does not feed α
        for k in 0..=100 {
            assert!(zh.node(k)[1].abs() < 1e-14 && zh.node(k)[2].abs() < 1e-14);
        }
        assert_eq!(zh.node(100), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gronwall_and_derivative_bounds_hold() {
        for spec in [library::kink_crossing(400), library::kink_equality(400), library::linear_pair(400)] {
            let fields = FieldSet::new(&spec, Some(10)).unwrap();
            let sigma = spec.incumbent_or_default();
            let tr = fields.player(&spec, &sigma, &spec.b_bar).unwrap();
            let z = integrate_z(&spec, &fields, &sigma, &tr).unwrap();
            let l = spec.f.lipschitz_const();
            assert!(z.sup_norm() <= gronwall_bound(spec.horizon, l));
            let d = z.dim;
            let dt = spec.dt();
            for k in 0..400 {
                let a = DMatrix::from_row_slice(d, d, z.node(k));
                let b = DMatrix::from_row_slice(d, d, z.node(k + 1));
                let rate = (&b - &a).norm() / dt;
                assert!(rate <= a.norm().max(b.norm()) * l * (1.0 + 1e-6), "{} step {k}", spec.name);
            }
        }
    }

    #[test]
    fn pure_pontryagin_hamiltonian() {
        let spec = library::linear_pair(200);
        let fields = FieldSet::new(&spec, Some(5)).unwrap();
        let sigma = spec.incumbent_or_default();
        let (adj, player, _) = AdjointMatrices::compute(&spec, &fields, &sigma, &[], &spec.b_bar).unwrap();
        let h0_grad = fields.h0.endpoint_grad(player.final_state()).unwrap();
        let mult = MultiplierSet {
            l0: 1.0,
            l1: vec![],
            omega: vec![],
            h0_grad: h0_grad.clone(),
            h1_grad: vec![],
            lambda: vec![0.0; 3],
        };
        let table = assemble_hamiltonians(&spec, &fields, &mult, &adj, &player, &[]).unwrap();
        // H(t,u) integrates ℋ₀ Z(t) f(t, y, u); f = Ay + Bu, so H differences
        // in u are ∫ ℋ₀ Z(t) B du dt.
        let dt = spec.dt();
        for k in [0, 77, 199] {
            let t_mid = spec.time(k) + 0.5 * dt;
            let a = library::LINEAR_PAIR_A;
            let am = DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]);
            let z = expm(&am, 1.0 - t_mid);
            let g = DMatrix::from_row_slice(1, 2, &h0_grad) * z * DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
            let diff = table.h(k, 2) - table.h(k, 0);
            assert!((diff - 2.0 * dt * g[(0, 0)]).abs() < 1e-7, "{diff}");
        }
    }

    #[test]
    fn abs_bilinear_fiber_hamiltonian_is_u_independent() {
        let spec = library::abs_minimax_with_steps(200);
        let fields = FieldSet::new(&spec, Some(10)).unwrap();
        let sigma = spec.incumbent_or_default();
        let copy = FiberPolicy::from_choice(&spec.grid_u, &spec.grid_v, |_, u| u).unwrap();
        let atoms = vec![AtomPolicy::Fiber(copy)];
        let (adj, player, trajs) = AdjointMatrices::compute(&spec, &fields, &sigma, &atoms, &spec.b_bar).unwrap();
        let grad = fields.h_hat.endpoint_grad(trajs[0].final_state()).unwrap();
        let mult = MultiplierSet {
            l0: 0.5,
            l1: vec![],
            omega: vec![OmegaAtom { policy: atoms[0].clone(), weight: 0.5, h_hat_grad: grad }],
            h0_grad: fields.h0.endpoint_grad(player.final_state()).unwrap(),
            h1_grad: vec![],
            lambda: vec![0.0; 2],
        };
        let table = assemble_hamiltonians(&spec, &fields, &mult, &adj, &player, &trajs).unwrap();
        let dt = spec.dt();
        for k in 0..200 {
            let a = table.frak_h(0, k, 0);
            assert!((a - table.frak_h(0, k, 1)).abs() < 1e-12);
            // 𝔥 = ∫ |ỹ| |k̂_ỹ| over the step; here k̂_ỹ = e^{1−t} and ỹ = e^t.
            assert!((a - dt * 1f64.exp()).abs() < 1e-6 * dt, "{a}");
            assert!((table.h(k, 0) - table.h(k, 1)).abs() < 1e-12);
        }
        let br = fiber_argmax(&spec, &table, 0);
        assert!(br.iter().all(|row| row == &vec![0, 1]));
    }

    #[test]
    fn single_v_needs_no_max() {
        let spec = library::scalar_linear(-0.2, 20);
        let fields = FieldSet::new(&spec, Some(3)).unwrap();
        let sigma = spec.incumbent_or_default();
        let pi = FiberPolicy::uniform(&spec.grid_u, &spec.grid_v);
        let atoms = vec![AtomPolicy::Fiber(pi)];
        let (adj, player, trajs) = AdjointMatrices::compute(&spec, &fields, &sigma, &atoms, &spec.b_bar).unwrap();
        let mult = MultiplierSet {
            l0: 1.0,
            l1: vec![],
            omega: vec![OmegaAtom { policy: atoms[0].clone(), weight: 0.0, h_hat_grad: vec![0.3] }],
            h0_grad: vec![1.0],
            h1_grad: vec![],
            lambda: vec![0.0],
        };
        let table = assemble_hamiltonians(&spec, &fields, &mult, &adj, &player, &trajs).unwrap();
        for k in 0..20 {
            assert_eq!(table.frak_h(0, k, 0), table.fiber_value(0, k, 0, 0));
        }
    }

    #[test]
    fn multiplier_normalization() {
        let m = MultiplierSet {
            l0: 2.0,
            l1: vec![-1.0],
            omega: vec![],
            h0_grad: vec![1.0],
            h1_grad: vec![1.0],
            lambda: vec![0.0],
        };
        assert!(!m.is_normalized());
        let n = m.normalized().unwrap();
        assert!(n.is_normalized());
        assert!((n.total() - 1.0).abs() < 1e-15);
        assert!(m.scaled(0.0).normalized().is_err());
    }

    #[test]
    fn cauchy_rule_skips_the_first_comparison() {
        assert!(!non_cauchy(&[1e-3, 2e-3, 1e-3], 1e-8));
        assert!(non_cauchy(&[1e-2, 1e-3, 2e-3], 1e-8));
        assert!(!non_cauchy(&[1e-12, 1e-3, 5e-9, 9e-9], 1e-8));
        assert!(!non_cauchy(&[1.0], 1e-8));
    }

    #[test]
    fn limit_sweep_on_smooth_data_is_inert() {
        let spec = library::linear_pair(200);
        let sigma = spec.incumbent_or_default();
        let pi = AtomPolicy::Fiber(FiberPolicy::uniform(&spec.grid_u, &spec.grid_v));
        let js = [5, 10, 20];
        let sweep = limit_sweep(&spec, &js, &vec![sigma; 3], &vec![spec.b_bar.clone(); 3], &[pi]).unwrap();
        assert!(sweep.z_increments.iter().chain(&sweep.z_hat_increments).all(|&d| d < 1e-10));
        assert!(!sweep.non_cauchy);
        assert_eq!(sweep.limit.j, Some(20));
        let single = limit_sweep(&spec, &[5], &[spec.incumbent_or_default()], &[spec.b_bar.clone()], &[]).unwrap();
        assert!(single.z_increments.is_empty() && !single.non_cauchy);
        assert!(matches!(limit_sweep(&spec, &[], &[], &[], &[]), Err(Error::EmptyJSequence)));
    }
}
