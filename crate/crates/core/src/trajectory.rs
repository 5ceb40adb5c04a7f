//! Fixed-step RK4 for the relaxed, product and fiber-composed dynamics, in
//! exact and mollified form, and the measured-versus-certified proximity
//! bounds between the two.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::control::{fiber_compose, product, FiberPolicy, JointControl, RelaxedControl};
use crate::error::{Error, Result};
use crate::mollify::{Controls, Smoothed, MAX_OUT};
use crate::problem::ProblemSpec;

/// Largest admissible `dt·L` before the integrator refuses to run.
pub const STABILITY_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Relaxed,
    Product,
    Fiber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlTag {
    pub kind: TrajectoryKind,
    /// Mollification index, `None` for the exact dynamics.
    pub j: Option<u32>,
}

/// States on the uniform grid plus RK4 dense-output midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub dim: usize,
    /// `[n_steps + 1] × dim`, row-major.
    pub states: Vec<f64>,
    /// `[n_steps] × dim`, state at the middle of each step.
    pub mid_states: Vec<f64>,
    pub tag: ControlTag,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }
    pub fn mid(&self, k: usize) -> &[f64] {
        &self.mid_states[k * self.dim..(k + 1) * self.dim]
    }
    pub fn final_state(&self) -> &[f64] {
        self.state(self.n_steps())
    }

    /// Sup over nodes and midpoints of the Euclidean distance.
    pub fn sup_distance(&self, other: &Trajectory) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let nodes = (0..=self.n_steps()).map(|k| d(self.state(k), other.state(k)));
        let mids = (0..self.n_steps()).map(|k| d(self.mid(k), other.mid(k)));
        nodes.chain(mids).fold(0.0, f64::max)
    }

    /// CSV with header `t,x0,x1,…`, one row per grid node.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for i in 0..self.dim {
            let _ = write!(s, ",x{i}");
        }
        s.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in self.state(k) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// One positive-weight control atom of a step: `(u index, v index, weight)`.
/// Player-1 schedules carry no `v`.
pub type StepAtoms = Vec<(usize, Option<usize>, f64)>;

pub fn relaxed_schedule(sigma: &RelaxedControl) -> Vec<StepAtoms> {
    (0..sigma.n_steps())
        .map(|k| sigma.support(k).map(|(u, w)| (u, None, w)).collect())
        .collect()
}

pub fn joint_schedule(joint: &JointControl) -> Vec<StepAtoms> {
    (0..joint.n_steps())
        .map(|k| joint.atoms(k).into_iter().map(|(u, v, w)| (u, Some(v), w)).collect())
        .collect()
}

/// `∫ field(t, x, ·) d(step measure)` as an exact finite sum.
pub fn averaged_drift(
    spec: &ProblemSpec,
    field: &Smoothed,
    t: f64,
    x: &[f64],
    atoms: &[(usize, Option<usize>, f64)],
    out: &mut [f64],
) -> Result<()> {
    let k = field.field().dim_out();
    out[..k].iter_mut().for_each(|v| *v = 0.0);
    let mut tmp = [0.0; MAX_OUT];
    for &(u, v, w) in atoms {
        let ctrl = Controls {
            u: spec.grid_u.point(u),
            v: v.map_or(&[][..], |v| spec.grid_v.point(v)),
        };
        field.value_into(t, x, &ctrl, &mut tmp[..k])?;
        for i in 0..k {
            out[i] += w * tmp[i];
        }
    }
    Ok(())
}

/// RK4 on the measure-averaged right-hand side.
pub fn integrate_schedule(
    spec: &ProblemSpec,
    field: &Smoothed,
    schedule: &[StepAtoms],
    b: &[f64],
    tag: ControlTag,
) -> Result<Trajectory> {
    let dim = field.field().dim_state();
    if b.len() != dim || field.field().dim_out() != dim {
        return Err(Error::ShapeMismatch(format!(
            "initial state of length {} for a field {} → {}",
            b.len(),
            dim,
            field.field().dim_out()
        )));
    }
    let n_steps = spec.n_steps();
    if schedule.len() != n_steps {
        return Err(Error::ShapeMismatch(format!(
            "control with {} steps on a grid of {n_steps}",
            schedule.len()
        )));
    }
    let dt = spec.dt();
    let dt_l = dt * field.field().lipschitz_const();
    if dt_l > STABILITY_LIMIT {
        return Err(Error::StepCountTooSmall { dt_l });
    }
    let mut states = Vec::with_capacity((n_steps + 1) * dim);
    let mut mid_states = Vec::with_capacity(n_steps * dim);
    states.extend_from_slice(b);
    let (mut k1, mut k2, mut k3, mut k4) = ([0.0; MAX_OUT], [0.0; MAX_OUT], [0.0; MAX_OUT], [0.0; MAX_OUT]);
    let mut x = b.to_vec();
    let mut tmp = vec![0.0; dim];
    for (k, atoms) in schedule.iter().enumerate() {
        let t = spec.time(k);
        averaged_drift(spec, field, t, &x, atoms, &mut k1)?;
        for i in 0..dim {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        averaged_drift(spec, field, t + 0.5 * dt, &tmp, atoms, &mut k2)?;
        for i in 0..dim {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        averaged_drift(spec, field, t + 0.5 * dt, &tmp, atoms, &mut k3)?;
        for i in 0..dim {
            tmp[i] = x[i] + dt * k3[i];
        }
        averaged_drift(spec, field, t + dt, &tmp, atoms, &mut k4)?;
        for i in 0..dim {
            mid_states.push(
                x[i] + dt * (5.0 / 24.0 * k1[i] + (k2[i] + k3[i]) / 6.0 - k4[i] / 24.0),
            );
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        states.extend_from_slice(&x);
    }
    Ok(Trajectory {
        times: (0..=n_steps).map(|k| spec.time(k)).collect(),
        dim,
        states,
        mid_states,
        tag,
    })
}

/// The data of the problem at a fixed mollification index (or exact).
#[derive(Debug, Clone)]
pub struct FieldSet {
    pub j: Option<u32>,
    pub f: Smoothed,
    pub f_hat: Smoothed,
    pub h0: Smoothed,
    pub h1: Option<Smoothed>,
    pub h_hat: Smoothed,
}

impl FieldSet {
    pub fn new(spec: &ProblemSpec, j: Option<u32>) -> Result<Self> {
        Ok(Self {
            j,
            f: Smoothed::new(&spec.f, j)?,
            f_hat: Smoothed::new(&spec.joint_field(), j)?,
            h0: Smoothed::new(&spec.h0, j)?,
            h1: spec.h1.as_ref().map(|h| Smoothed::new(h, j)).transpose()?,
            h_hat: Smoothed::new(&spec.h_hat, j)?,
        })
    }

    pub fn player(&self, spec: &ProblemSpec, sigma: &RelaxedControl, b: &[f64]) -> Result<Trajectory> {
        let tag = ControlTag { kind: TrajectoryKind::Relaxed, j: self.j };
        integrate_schedule(spec, &self.f, &relaxed_schedule(sigma), b, tag)
    }

    pub fn joint(&self, spec: &ProblemSpec, joint: &JointControl, b_hat: &[f64]) -> Result<Trajectory> {
        let kind = match joint.provenance() {
            crate::control::Provenance::Product => TrajectoryKind::Product,
            crate::control::Provenance::Fiber => TrajectoryKind::Fiber,
        };
        integrate_schedule(spec, &self.f_hat, &joint_schedule(joint), b_hat, ControlTag { kind, j: self.j })
    }
}

/// The adversary half of a joint control.
#[derive(Debug, Clone, Copy)]
pub enum Adversary<'a> {
    Relaxed(&'a RelaxedControl),
    Fiber(&'a FiberPolicy),
}

impl Adversary<'_> {
    pub fn compose(&self, sigma: &RelaxedControl) -> Result<JointControl> {
        match self {
            Adversary::Relaxed(sp) => product(sigma, sp),
            Adversary::Fiber(pi) => fiber_compose(sigma, pi),
        }
    }
}

pub fn integrate_relaxed(spec: &ProblemSpec, sigma: &RelaxedControl, b: &[f64]) -> Result<Trajectory> {
    FieldSet::new(spec, None)?.player(spec, sigma, b)
}

pub fn integrate_fiber(
    spec: &ProblemSpec,
    sigma: &RelaxedControl,
    pi: &FiberPolicy,
    b_hat: &[f64],
) -> Result<Trajectory> {
    FieldSet::new(spec, None)?.joint(spec, &fiber_compose(sigma, pi)?, b_hat)
}

pub fn integrate_product(
    spec: &ProblemSpec,
    sigma: &RelaxedControl,
    sigma_p: &RelaxedControl,
    b_hat: &[f64],
) -> Result<Trajectory> {
    FieldSet::new(spec, None)?.joint(spec, &product(sigma, sigma_p)?, b_hat)
}

/// Joint trajectory under `f̂ʲ`.
pub fn integrate_perturbed(
    spec: &ProblemSpec,
    j: u32,
    sigma: &RelaxedControl,
    adversary: Adversary<'_>,
    b_hat: &[f64],
) -> Result<Trajectory> {
    let fields = FieldSet::new(spec, Some(j))?;
    fields.joint(spec, &adversary.compose(sigma)?, b_hat)
}

/// Certified constants of the proximity lemma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximityConstants {
    /// `∫χ`.
    pub alpha: f64,
    pub l_f_hat: f64,
    pub c_y_hat: f64,
    pub c_h0: f64,
    pub c_h1: f64,
    pub c_h_hat: f64,
}

impl ProximityConstants {
    pub fn new(spec: &ProblemSpec) -> Self {
        let alpha = spec.alpha();
        let l_f_hat = spec.joint_lipschitz();
        let c_y_hat = l_f_hat + alpha * alpha.exp();
        let l_h1 = spec.h1.as_ref().map_or(0.0, |h| h.lipschitz_const());
        Self {
            alpha,
            l_f_hat,
            c_y_hat,
            c_h0: spec.h0.lipschitz_const() * (c_y_hat + 1.0),
            c_h1: l_h1 * (c_y_hat + 1.0),
            c_h_hat: spec.h_hat.lipschitz_const() * (c_y_hat + 1.0),
        }
    }

    /// Recomputes the derived constants and compares.
    pub fn is_consistent(&self, spec: &ProblemSpec) -> bool {
        let fresh = Self::new(spec);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
        close(self.c_y_hat, self.l_f_hat + self.alpha * self.alpha.exp())
            && close(self.c_y_hat, fresh.c_y_hat)
            && close(self.c_h0, fresh.c_h0)
            && close(self.c_h1, fresh.c_h1)
            && close(self.c_h_hat, fresh.c_h_hat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityGap {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub j: u32,
    pub constants: ProximityConstants,
    /// Richardson estimate of the RK4 error on the exact joint trajectory.
    pub integrator_tol: f64,
    pub gaps: Vec<ProximityGap>,
}

impl ProximityReport {
    pub fn passed(&self) -> bool {
        self.gaps.iter().all(|g| g.pass)
    }
    pub fn gap(&self, name: &str) -> Option<&ProximityGap> {
        self.gaps.iter().find(|g| g.name == name)
    }
}

fn sup_scalar_gap(
    exact: &Trajectory,
    approx: &Trajectory,
    h: &Smoothed,
    hj: &Smoothed,
) -> Result<f64> {
    let q = h.field().dim_out();
    let mut gap = 0.0f64;
    let mut a = vec![0.0; q];
    let mut b = vec![0.0; q];
    let points = (0..=exact.n_steps())
        .map(|k| (exact.state(k), approx.state(k)))
        .chain((0..exact.n_steps()).map(|k| (exact.mid(k), approx.mid(k))));
    for (x, xj) in points {
        h.value_into(0.0, x, &Controls::NONE, &mut a)?;
        hj.value_into(0.0, xj, &Controls::NONE, &mut b)?;
        let d = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        gap = gap.max(d);
    }
    Ok(gap)
}

/// Richardson estimate `|y_N − y_{N/2}| / 15` of the endpoint error.
fn integrator_error(spec: &ProblemSpec, fields: &FieldSet, joint: &JointControl, b_hat: &[f64], fine: &Trajectory) -> Result<f64> {
    let n = spec.n_steps();
    if n % 2 != 0 {
        return Ok(0.0);
    }
    let mut coarse_spec = spec.clone();
    let half = |g: &crate::control::ControlGrid| {
        let mask = (0..n / 2).map(|k| g.mask()[2 * k].clone()).collect();
        crate::control::ControlGrid::with_mask(g.points().to_vec(), mask)
    };
    coarse_spec.grid_u = half(&spec.grid_u)?;
    coarse_spec.grid_v = half(&spec.grid_v)?;
    let sched = joint_schedule(joint);
    let coarse: Vec<StepAtoms> = (0..n / 2).map(|k| sched[2 * k].clone()).collect();
    // Piecewise-constant controls that change between paired steps make
    // the estimate meaningless; fall back to zero slack in that case.
    if (0..n / 2).any(|k| sched[2 * k] != sched[2 * k + 1]) {
        return Ok(0.0);
    }
    let tr = integrate_schedule(&coarse_spec, &fields.f_hat, &coarse, b_hat, fine.tag)?;
    let d = tr
        .final_state()
        .iter()
        .zip(fine.final_state())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(d / 15.0)
}

/// Measured sup-gaps between exact and mollified quantities along the
/// trajectories of `(σ, adversary)`, against `c/j` plus ten times the
/// integrator tolerance.
pub fn proximity_report(
    spec: &ProblemSpec,
    j: u32,
    sigma: &RelaxedControl,
    adversary: Adversary<'_>,
    b_hat: &[f64],
) -> Result<ProximityReport> {
    let exact = FieldSet::new(spec, None)?;
    let mollified = FieldSet::new(spec, Some(j))?;
    let joint = adversary.compose(sigma)?;
    let y_hat = exact.joint(spec, &joint, b_hat)?;
    let y_hat_j = mollified.joint(spec, &joint, b_hat)?;
    let b = &b_hat[..spec.n];
    let y = exact.player(spec, sigma, b)?;
    let y_j = mollified.player(spec, sigma, b)?;

    let constants = ProximityConstants::new(spec);
    let integrator_tol = integrator_error(spec, &exact, &joint, b_hat, &y_hat)?.max(1e-12);
    let slack = 10.0 * integrator_tol;
    let jf = j as f64;
    let mut gaps = Vec::new();
    let mut push = |name: &str, measured: f64, c: f64| {
        let bound = c / jf;
        gaps.push(ProximityGap { name: name.into(), measured, bound, pass: measured <= bound + slack });
    };
    push("state", y_hat.sup_distance(&y_hat_j), constants.c_y_hat);
    push("h0", sup_scalar_gap(&y, &y_j, &exact.h0, &mollified.h0)?, constants.c_h0);
    if let (Some(h1), Some(h1j)) = (&exact.h1, &mollified.h1) {
        push("h1", sup_scalar_gap(&y, &y_j, h1, h1j)?, constants.c_h1);
    }
    push("h_hat", sup_scalar_gap(&y_hat, &y_hat_j, &exact.h_hat, &mollified.h_hat)?, constants.c_h_hat);
    Ok(ProximityReport { j, constants, integrator_tol, gaps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlGrid;
    use crate::library;

    #[test]
    fn zero_dynamics_keep_the_initial_state() {
        let spec = library::scalar_linear(0.0, 100);
        let sigma = RelaxedControl::uniform(&spec.grid_u);
        let tr = integrate_relaxed(&spec, &sigma, &[0.7]).unwrap();
        assert!(tr.states.iter().all(|&x| x == 0.7));
        assert_eq!(tr.state(0), &[0.7]);
    }

    #[test]
    fn symmetric_mixture_cancels_the_drift() {
        // ẏ = y·u with σ = ½δ₋₁ + ½δ₊₁
        let spec = library::bilinear_scalar(100);
        let sigma = RelaxedControl::uniform(&spec.grid_u);
        let tr = integrate_relaxed(&spec, &sigma, &[1.3]).unwrap();
        assert!(tr.states.iter().all(|&x| (x - 1.3).abs() < 1e-15));
    }

    #[test]
    fn abs_growth_reaches_e() {
        let spec = library::abs_minimax_with_steps(1000);
        let sigma = RelaxedControl::constant_dirac(&spec.grid_u, 1).unwrap();
        let pi = FiberPolicy::from_choice(&spec.grid_u, &spec.grid_v, |_, u| u).unwrap();
        let tr = integrate_fiber(&spec, &sigma, &pi, &spec.b_hat()).unwrap();
        let y1 = tr.final_state()[1];
        assert!((y1 - std::f64::consts::E).abs() < 1e-6, "{y1}");
    }

    #[test]
    fn adversary_playing_minus_one_gives_inverse_e() {
        let spec = library::abs_minimax_with_steps(1000);
        let sigma = RelaxedControl::constant_dirac(&spec.grid_u, 1).unwrap();
        let pi = FiberPolicy::from_choice(&spec.grid_u, &spec.grid_v, |_, _| 0).unwrap();
        let tr = integrate_fiber(&spec, &sigma, &pi, &spec.b_hat()).unwrap();
        assert!((tr.final_state()[1] - (-1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn u_independent_fiber_matches_product() {
        let spec = library::abs_minimax_with_steps(200);
        let sigma = RelaxedControl::new(&spec.grid_u, vec![vec![0.3, 0.7]; 200]).unwrap();
        let rho = RelaxedControl::new(&spec.grid_v, vec![vec![0.6, 0.4]; 200]).unwrap();
        let pi = FiberPolicy::broadcast(&rho, 2);
        let a = integrate_fiber(&spec, &sigma, &pi, &spec.b_hat()).unwrap();
        let b = integrate_product(&spec, &sigma, &rho, &spec.b_hat()).unwrap();
        assert!(a.sup_distance(&b) < 1e-14);
    }

    #[test]
    fn stability_guard_trips() {
        let spec = library::scalar_linear(-600.0, 1000);
        let sigma = RelaxedControl::uniform(&spec.grid_u);
        assert!(matches!(integrate_relaxed(&spec, &sigma, &[1.0]), Err(Error::StepCountTooSmall { .. })));
    }

    #[test]
    fn dense_midpoints_are_accurate_for_exponential_growth() {
        let spec = library::scalar_linear(1.0, 50);
        let sigma = RelaxedControl::uniform(&spec.grid_u);
        let tr = integrate_relaxed(&spec, &sigma, &[1.0]).unwrap();
        for k in 0..50 {
            let t = spec.time(k) + 0.5 * spec.dt();
            assert!((tr.mid(k)[0] - t.exp()).abs() < 1e-7);
        }
    }

    #[test]
    fn affine_dynamics_are_unchanged_by_mollification() {
        let spec = library::linear_pair(400);
        let sigma = RelaxedControl::uniform(&spec.grid_u);
        let pi = FiberPolicy::uniform(&spec.grid_u, &spec.grid_v);
        let exact = integrate_fiber(&spec, &sigma, &pi, &spec.b_hat()).unwrap();
        for j in [1, 5, 40] {
            let tr = integrate_perturbed(&spec, j, &sigma, Adversary::Fiber(&pi), &spec.b_hat()).unwrap();
            assert!(tr.sup_distance(&exact) < 1e-10, "j={j}");
            assert_eq!(tr.tag.j, Some(j));
        }
    }

    #[test]
    fn proximity_constants_are_recomputed() {
        let spec = library::abs_minimax_with_steps(100);
        let c = ProximityConstants::new(&spec);
        assert!((c.c_y_hat - (1.0 + 3.0 * 3f64.exp())).abs() < 1e-12);
        assert!(c.is_consistent(&spec));
        let mut bad = c;
        bad.c_h_hat *= 1.01;
        assert!(!bad.is_consistent(&spec));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let spec = library::scalar_linear(0.0, 4);
        let sigma = RelaxedControl::uniform(&spec.grid_u);
        let tr = integrate_relaxed(&spec, &sigma, &[2.0]).unwrap();
        let csv = tr.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,x0");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[5], "1,2");
    }

    #[test]
    fn schedule_skips_zero_weights() {
        let g = ControlGrid::new(vec![vec![0.0], vec![1.0]], 2).unwrap();
        let s = RelaxedControl::new(&g, vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let sched = relaxed_schedule(&s);
        assert_eq!(sched[0], vec![(0, None, 1.0)]);
        assert_eq!(sched[1].len(), 2);
    }
}
