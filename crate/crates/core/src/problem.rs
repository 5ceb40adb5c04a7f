//! Problem data, randomized checks of the standing hypotheses, and the time
//! rescaling that brings the state-Lipschitz bound of the joint dynamics
//! down to one.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{ControlGrid, RelaxedControl};
use crate::error::{Error, Result};
use crate::mollify::{Controls, LipschitzField, MAX_OUT};
use crate::state_box::StateBox;

/// Piecewise-constant function of time. `values[i]` holds on the interval
/// ending at `breaks[i]`; the last value holds after the last break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Constant(f64),
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
}

impl Profile {
    pub fn check(&self) -> Result<()> {
        match self {
            Profile::Constant(c) if !c.is_finite() || *c < 0.0 => {
                Err(Error::Invalid(format!("profile constant {c} must be finite and nonnegative")))
            }
            Profile::Constant(_) => Ok(()),
            Profile::Piecewise { breaks, values } => {
                if values.len() != breaks.len() + 1 {
                    return Err(Error::ShapeMismatch(format!(
                        "piecewise profile with {} breaks needs {} values, got {}",
                        breaks.len(),
                        breaks.len() + 1,
                        values.len()
                    )));
                }
                if breaks.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Invalid("profile breaks must increase strictly".into()));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Invalid("profile values must be finite and nonnegative".into()));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Profile::Constant(c) => *c,
            Profile::Piecewise { breaks, values } => {
                let i = breaks.partition_point(|b| *b <= t);
                values[i]
            }
        }
    }

    /// Breakpoints strictly inside `(a, b)`.
    pub fn breaks_in(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            Profile::Constant(_) => Vec::new(),
            Profile::Piecewise { breaks, .. } => breaks.iter().copied().filter(|x| *x > a && *x < b).collect(),
        }
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return -self.integral(b, a);
        }
        let mut pts = vec![a];
        pts.extend(self.breaks_in(a, b));
        pts.push(b);
        pts.windows(2).map(|w| (w[1] - w[0]) * self.eval(0.5 * (w[0] + w[1]))).sum()
    }

    pub fn sup_on(&self, a: f64, b: f64) -> f64 {
        let mut pts = vec![a];
        pts.extend(self.breaks_in(a, b));
        pts.push(b);
        pts.windows(2).map(|w| self.eval(0.5 * (w[0] + w[1]))).fold(0.0, f64::max)
    }

    pub fn inf_on(&self, a: f64, b: f64) -> f64 {
        let mut pts = vec![a];
        pts.extend(self.breaks_in(a, b));
        pts.push(b);
        pts.windows(2).map(|w| self.eval(0.5 * (w[0] + w[1]))).fold(f64::INFINITY, f64::min)
    }
}

/// Full data of the adverse control problem.
///
/// The player-1 state has dimension `n`, the adversary state dimension `m`.
/// `f_tilde` and `h_hat` act on the joint state `(y, ỹ)`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub f: LipschitzField,
    pub f_tilde: LipschitzField,
    pub h0: LipschitzField,
    pub h1: Option<LipschitzField>,
    pub h_hat: LipschitzField,
    pub grid_u: ControlGrid,
    pub grid_v: ControlGrid,
    pub b_set: StateBox,
    pub b_tilde_set: StateBox,
    pub b_bar: Vec<f64>,
    pub b_tilde_bar: Vec<f64>,
    pub horizon: (f64, f64),
    pub psi: Profile,
    pub chi: Profile,
    /// Working box `Ω̂` for hypothesis sampling.
    pub sample_box: StateBox,
    /// Index of a player-1 state component that acts as an epigraph variable.
    pub epigraph: Option<usize>,
    /// Incumbent control `σ̄_init` used to place the equality shift.
    pub incumbent: Option<RelaxedControl>,
}

impl ProblemSpec {
    pub fn n_steps(&self) -> usize {
        self.grid_u.n_steps()
    }

    pub fn dt(&self) -> f64 {
        (self.horizon.1 - self.horizon.0) / self.n_steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon.0 + k as f64 * self.dt()
    }

    pub fn n_eq(&self) -> usize {
        self.h1.as_ref().map_or(0, |h| h.dim_out())
    }

    pub fn b_hat(&self) -> Vec<f64> {
        let mut b = self.b_bar.clone();
        b.extend_from_slice(&self.b_tilde_bar);
        b
    }

    pub fn b_hat_set(&self) -> StateBox {
        self.b_set.product(&self.b_tilde_set)
    }

    pub fn incumbent_or_default(&self) -> RelaxedControl {
        self.incumbent
            .clone()
            .unwrap_or_else(|| RelaxedControl::uniform(&self.grid_u))
    }

    /// `∫χ` over the horizon.
    pub fn alpha(&self) -> f64 {
        self.chi.integral(self.horizon.0, self.horizon.1)
    }

    /// Structural consistency of every piece of data.
    pub fn check(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let expect = |what: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                Err(Error::ShapeMismatch(format!("{what}: dimension {got}, expected {want}")))
            } else {
                Ok(())
            }
        };
        if n == 0 {
            return Err(Error::Invalid("player-1 state dimension must be positive".into()));
        }
        expect("f state", self.f.dim_state(), n)?;
        expect("f output", self.f.dim_out(), n)?;
        expect("f_tilde state", self.f_tilde.dim_state(), n + m)?;
        expect("f_tilde output", self.f_tilde.dim_out(), m)?;
        expect("h0 state", self.h0.dim_state(), n)?;
        expect("h0 output", self.h0.dim_out(), 1)?;
        if let Some(h1) = &self.h1 {
            expect("h1 state", h1.dim_state(), n)?;
        }
        expect("h_hat state", self.h_hat.dim_state(), n + m)?;
        expect("h_hat output", self.h_hat.dim_out(), 1)?;
        expect("B", self.b_set.dim(), n)?;
        expect("B tilde", self.b_tilde_set.dim(), m)?;
        expect("b bar", self.b_bar.len(), n)?;
        expect("b tilde bar", self.b_tilde_bar.len(), m)?;
        expect("sample box", self.sample_box.dim(), n + m)?;
        if n + m > MAX_OUT {
            return Err(Error::UnsupportedDimension(n + m));
        }
        if self.grid_u.n_steps() != self.grid_v.n_steps() {
            return Err(Error::ShapeMismatch("U and V grids have different step counts".into()));
        }
        if !(self.horizon.0 < self.horizon.1) {
            return Err(Error::Invalid(format!("empty horizon {:?}", self.horizon)));
        }
        if !self.b_set.contains(&self.b_bar) || !self.b_tilde_set.contains(&self.b_tilde_bar) {
            return Err(Error::Invalid("initial state outside its box".into()));
        }
        self.psi.check()?;
        self.chi.check()?;
        if let Some(e) = self.epigraph {
            if e >= n {
                return Err(Error::Invalid(format!("epigraph index {e} outside the player-1 state")));
            }
        }
        if let Some(s) = &self.incumbent {
            if s.n_steps() != self.n_steps() || s.n_controls() != self.grid_u.len() {
                return Err(Error::ShapeMismatch("incumbent does not match the U grid".into()));
            }
        }
        Ok(())
    }

    /// `f̂ = (f, f̃)` on the joint state.
    pub fn joint_field(&self) -> LipschitzField {
        let (n, m) = (self.n, self.m);
        let f = self.f.clone();
        let ft = self.f_tilde.clone();
        let lip = self.f.lipschitz_const().hypot(self.f_tilde.lipschitz_const());
        let bound = self.f.bound().hypot(self.f_tilde.bound());
        let field = LipschitzField::new(
            format!("({}, {})", self.f.name(), self.f_tilde.name()),
            n + m,
            n + m,
            lip,
            bound,
            move |t, x, c, out| {
                f.eval_into(t, &x[..n], c, &mut out[..n]);
                ft.eval_into(t, x, c, &mut out[n..n + m]);
            },
        );
        let lifted = self.f.domain().product(&StateBox::unbounded(m));
        let domain = lifted
            .intersect(self.f_tilde.domain())
            .unwrap_or_else(|| self.f_tilde.domain().clone());
        field.with_domain(domain).expect("dimensions agree")
    }

    /// Declared `L_f̂`.
    pub fn joint_lipschitz(&self) -> f64 {
        self.f.lipschitz_const().hypot(self.f_tilde.lipschitz_const())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotChecked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub hypothesis: String,
    pub status: CheckStatus,
    /// Largest sampled ratio; a pass means it does not exceed one.
    pub worst_ratio: Option<f64>,
    pub samples: usize,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_samples: usize,
    pub seed: u64,
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.status != CheckStatus::Fail)
    }

    pub fn entry(&self, name: &str) -> Option<&ValidationEntry> {
        self.entries.iter().find(|e| e.hypothesis == name)
    }
}

const RATIO_SLACK: f64 = 1e-6;

struct RatioTracker {
    name: String,
    worst: f64,
    samples: usize,
    note: String,
}

impl RatioTracker {
    fn new(name: &str, note: &str) -> Self {
        Self { name: name.into(), worst: 0.0, samples: 0, note: note.into() }
    }

    fn push(&mut self, num: f64, den: f64) {
        self.samples += 1;
        let r = if num == 0.0 {
            0.0
        } else if den <= 0.0 {
            f64::MAX
        } else {
            num / den
        };
        if r > self.worst || r.is_nan() {
            self.worst = if r.is_nan() { f64::MAX } else { r };
        }
    }

    fn finish(self) -> ValidationEntry {
        ValidationEntry {
            status: if self.worst <= 1.0 + RATIO_SLACK { CheckStatus::Pass } else { CheckStatus::Fail },
            hypothesis: self.name,
            worst_ratio: Some(self.worst),
            samples: self.samples,
            note: self.note,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Working box used for sampling: the declared box where bounded, else a
/// unit collar around the initial state.
fn sampling_box(spec: &ProblemSpec) -> StateBox {
    let b = spec.b_hat();
    let lo = spec
        .sample_box
        .lo
        .iter()
        .zip(&b)
        .map(|(l, c)| if l.is_finite() { *l } else { c - 1.0 })
        .collect();
    let hi = spec
        .sample_box
        .hi
        .iter()
        .zip(&b)
        .map(|(h, c)| if h.is_finite() { *h } else { c + 1.0 })
        .collect();
    StateBox { lo, hi }
}

fn sample_point(rng: &mut ChaCha8Rng, bx: &StateBox) -> Vec<f64> {
    bx.lo
        .iter()
        .zip(&bx.hi)
        .map(|(a, b)| if a == b { *a } else { rng.gen_range(*a..=*b) })
        .collect()
}

/// Nearby point at a log-uniform distance, kept inside the box.
fn sample_partner(rng: &mut ChaCha8Rng, bx: &StateBox, x: &[f64]) -> Vec<f64> {
    let diam = bx.lo.iter().zip(&bx.hi).map(|(a, b)| b - a).fold(0.0, f64::max).max(1e-3);
    let scale = diam * 10f64.powf(rng.gen_range(-4.0..0.0));
    let mut y: Vec<f64> = x.iter().map(|v| v + scale * rng.gen_range(-1.0..1.0)).collect();
    bx.clamp(&mut y);
    y
}

/// Randomized checks of the measurability, Lipschitz and bound hypotheses.
/// Never fails; every problem found becomes a report entry.
pub fn validate(spec: &ProblemSpec, n_samples: usize, seed: u64) -> ValidationReport {
    let mut entries = vec![ValidationEntry {
        hypothesis: "H1_measurability".into(),
        status: CheckStatus::NotChecked,
        worst_ratio: None,
        samples: 0,
        note: "measurability in t cannot be verified numerically; assumed".into(),
    }];
    if let Err(e) = spec.check() {
        entries.push(ValidationEntry {
            hypothesis: "shapes".into(),
            status: CheckStatus::Fail,
            worst_ratio: None,
            samples: 0,
            note: e.to_string(),
        });
        return ValidationReport { n_samples, seed, entries };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (spec.n, spec.m);
    let bx = sampling_box(spec);
    let fhat = spec.joint_field();
    let (t0, t1) = spec.horizon;
    let n_steps = spec.n_steps();

    let mut h2_lip = RatioTracker::new("H2_lipschitz", "|f̂(t,x) − f̂(t,x′)| / (ψ(t)|x − x′|)");
    let mut h2_bound = RatioTracker::new("H2_bound", "|f̂(t,x)| / χ(t)");
    let mut lip_f = RatioTracker::new("declared_lipschitz_f", "|Δf| / (L_f |Δy|)");
    let mut lip_ft = RatioTracker::new("declared_lipschitz_f_tilde", "|Δf̃| / (L_f̃ |Δŷ|)");
    let mut h3_0 = RatioTracker::new("H3_h0", "|Δh₀| / (L_h₀ |Δy|)");
    let mut h3_1 = spec.h1.as_ref().map(|_| RatioTracker::new("H3_h1", "|Δh₁| / (L_h₁ |Δy|)"));
    let mut h3_hat = RatioTracker::new("H3_h_hat", "|Δĥ| / (L_ĥ |Δŷ|)");

    let mut a = [0.0; MAX_OUT];
    let mut b = [0.0; MAX_OUT];
    let nm = n + m;
    for _ in 0..n_samples {
        let t = rng.gen_range(t0..=t1);
        let k = (((t - t0) / (t1 - t0)) * n_steps as f64).floor().min(n_steps as f64 - 1.0) as usize;
        let admissible_u: Vec<usize> = (0..spec.grid_u.len()).filter(|&i| spec.grid_u.admissible(k, i)).collect();
        let admissible_v: Vec<usize> = (0..spec.grid_v.len()).filter(|&i| spec.grid_v.admissible(k, i)).collect();
        let u = admissible_u[rng.gen_range(0..admissible_u.len())];
        let v = admissible_v[rng.gen_range(0..admissible_v.len())];
        let ctrl = Controls { u: spec.grid_u.point(u), v: spec.grid_v.point(v) };
        let x = sample_point(&mut rng, &bx);
        let y = sample_partner(&mut rng, &bx, &x);
        let dx = dist(&x, &y);

        fhat.eval_into(t, &x, &ctrl, &mut a[..nm]);
        fhat.eval_into(t, &y, &ctrl, &mut b[..nm]);
        h2_bound.push(norm(&a[..nm]), spec.chi.eval(t));
        if dx > 0.0 {
            h2_lip.push(dist(&a[..nm], &b[..nm]), spec.psi.eval(t) * dx);
            let dxn = dist(&x[..n], &y[..n]);
            if dxn > 0.0 {
                lip_f.push(dist(&a[..n], &b[..n]), spec.f.lipschitz_const() * dxn);
            }
            lip_ft.push(dist(&a[n..nm], &b[n..nm]), spec.f_tilde.lipschitz_const() * dx);
        }

        let ctrl0 = Controls::NONE;
        let dxn = dist(&x[..n], &y[..n]);
        if dxn > 0.0 {
            h3_0.push((spec.h0.eval_scalar(&x[..n]) - spec.h0.eval_scalar(&y[..n])).abs(), spec.h0.lipschitz_const() * dxn);
            if let (Some(h1), Some(tr)) = (&spec.h1, h3_1.as_mut()) {
                let q = h1.dim_out();
                h1.eval_into(0.0, &x[..n], &ctrl0, &mut a[..q]);
                h1.eval_into(0.0, &y[..n], &ctrl0, &mut b[..q]);
                tr.push(dist(&a[..q], &b[..q]), h1.lipschitz_const() * dxn);
            }
        }
        if dx > 0.0 {
            h3_hat.push(
                (spec.h_hat.eval_scalar(&x) - spec.h_hat.eval_scalar(&y)).abs(),
                spec.h_hat.lipschitz_const() * dx,
            );
        }
    }
    entries.push(h2_lip.finish());
    entries.push(h2_bound.finish());
    entries.push(lip_f.finish());
    entries.push(lip_ft.finish());
    entries.push(h3_0.finish());
    if let Some(tr) = h3_1 {
        entries.push(tr.finish());
    }
    entries.push(h3_hat.finish());
    if spec.epigraph.is_some() {
        entries.push(check_epigraph(spec, &bx, n_samples.min(1000), &mut rng));
    }
    ValidationReport { n_samples, seed, entries }
}

/// The epigraph variable must be constant along trajectories, equal the
/// objective, and enter the constraint as `g(ỹ) − α`.
fn check_epigraph(spec: &ProblemSpec, bx: &StateBox, samples: usize, rng: &mut ChaCha8Rng) -> ValidationEntry {
    let e = spec.epigraph.expect("caller checked");
    let (n, m) = (spec.n, spec.m);
    let mut worst = 0.0f64;
    let mut out = [0.0; MAX_OUT];
    for _ in 0..samples {
        let x = sample_point(rng, bx);
        let t = rng.gen_range(spec.horizon.0..=spec.horizon.1);
        let u = rng.gen_range(0..spec.grid_u.len());
        let ctrl = Controls { u: spec.grid_u.point(u), v: spec.grid_v.point(0) };
        spec.f.eval_into(t, &x[..n], &ctrl, &mut out[..n]);
        worst = worst.max(out[e].abs());
        worst = worst.max((spec.h0.eval_scalar(&x[..n]) - x[e]).abs());
        let mut shifted = x.clone();
        shifted[e] += 1.0;
        let d = spec.h_hat.eval_scalar(&shifted) - spec.h_hat.eval_scalar(&x);
        worst = worst.max((d + 1.0).abs());
        let mut other = [0.0; MAX_OUT];
        spec.f.eval_into(t, &shifted[..n], &ctrl, &mut other[..n]);
        worst = worst.max(dist(&out[..n], &other[..n]));
        spec.f_tilde.eval_into(t, &x, &ctrl, &mut out[..m]);
        spec.f_tilde.eval_into(t, &shifted, &ctrl, &mut other[..m]);
        worst = worst.max(dist(&out[..m], &other[..m]));
        if let Some(h1) = &spec.h1 {
            let q = h1.dim_out();
            h1.eval_into(0.0, &x[..n], &Controls::NONE, &mut out[..q]);
            h1.eval_into(0.0, &shifted[..n], &Controls::NONE, &mut other[..q]);
            worst = worst.max(dist(&out[..q], &other[..q]));
        }
    }
    ValidationEntry {
        hypothesis: "epigraph_structure".into(),
        status: if worst <= 1e-9 { CheckStatus::Pass } else { CheckStatus::Fail },
        worst_ratio: Some(worst),
        samples,
        note: "max of |f_α|, |h₀ − α|, |∂_α ĥ + 1| and the α-sensitivity of f, f̃ and h₁".into(),
    }
}

/// Monotone map `t(τ) = t₀ + ∫_{τ₀}^{τ} φ` with `φ = max(1, ψ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeRescaling {
    /// `φ` as a function of the original time `τ`.
    pub phi: Profile,
    pub tau_horizon: (f64, f64),
    pub t_horizon: (f64, f64),
    /// `(τ, t)` at every break of `φ` including both ends.
    knots: Vec<(f64, f64)>,
}

impl TimeRescaling {
    pub fn new(psi: &Profile, tau_horizon: (f64, f64)) -> Self {
        let phi = match psi {
            Profile::Constant(c) => Profile::Constant(c.max(1.0)),
            Profile::Piecewise { breaks, values } => Profile::Piecewise {
                breaks: breaks.clone(),
                values: values.iter().map(|v| v.max(1.0)).collect(),
            },
        };
        let (a, b) = tau_horizon;
        let mut taus = vec![a];
        taus.extend(phi.breaks_in(a, b));
        taus.push(b);
        let mut knots = Vec::with_capacity(taus.len());
        let mut t = a;
        knots.push((a, a));
        for w in taus.windows(2) {
            t += (w[1] - w[0]) * phi.eval(0.5 * (w[0] + w[1]));
            knots.push((w[1], t));
        }
        let t_horizon = (a, t);
        Self { phi, tau_horizon, t_horizon, knots }
    }

    pub fn is_identity(&self) -> bool {
        self.phi.sup_on(self.tau_horizon.0, self.tau_horizon.1) <= 1.0
    }

    pub fn t_of_tau(&self, tau: f64) -> f64 {
        let i = self.knots.partition_point(|(k, _)| *k <= tau).clamp(1, self.knots.len() - 1);
        let (ta, ua) = self.knots[i - 1];
        let (tb, ub) = self.knots[i];
        ua + (tau - ta) * (ub - ua) / (tb - ta)
    }

    pub fn tau_of_t(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|(_, k)| *k <= t).clamp(1, self.knots.len() - 1);
        let (ta, ua) = self.knots[i - 1];
        let (tb, ub) = self.knots[i];
        ta + (t - ua) * (tb - ta) / (ub - ua)
    }

    /// `φ(τ(t))`.
    pub fn phi_at_t(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|(_, k)| *k <= t).clamp(1, self.knots.len() - 1);
        let (ta, _) = self.knots[i - 1];
        let (tb, _) = self.knots[i];
        self.phi.eval(0.5 * (ta + tb))
    }

    /// A profile of `τ` re-expressed in `t` and divided by `φ`.
    fn rescale_profile(&self, p: &Profile) -> Profile {
        let (a, b) = self.tau_horizon;
        let mut taus: Vec<f64> = self.phi.breaks_in(a, b);
        taus.extend(p.breaks_in(a, b));
        taus.sort_by(|x, y| x.partial_cmp(y).expect("finite breaks"));
        taus.dedup();
        let mut pts = vec![a];
        pts.extend(&taus);
        pts.push(b);
        let values: Vec<f64> = pts
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                p.eval(mid) / self.phi.eval(mid)
            })
            .collect();
        if taus.is_empty() {
            Profile::Constant(values[0])
        } else {
            Profile::Piecewise { breaks: taus.iter().map(|x| self.t_of_tau(*x)).collect(), values }
        }
    }

    fn wrap(self: &Arc<Self>, field: &LipschitzField, lipschitz: f64, bound: f64) -> LipschitzField {
        let base = field.clone();
        let map = Arc::clone(self);
        let k = field.dim_out();
        LipschitzField::new(
            format!("{}/φ", field.name()),
            field.dim_state(),
            field.dim_out(),
            lipschitz,
            bound,
            move |t, x, c, out| {
                let tau = map.tau_of_t(t);
                base.eval_into(tau, x, c, out);
                let phi = map.phi_at_t(t);
                out[..k].iter_mut().for_each(|v| *v /= phi);
            },
        )
        .with_domain(field.domain().clone())
        .expect("same dimension")
    }
}

/// Rescales time so that the new `ψ` is at most one. Identity when `ψ ≤ 1`.
pub fn normalize_time(spec: &ProblemSpec) -> (ProblemSpec, TimeRescaling) {
    let map = TimeRescaling::new(&spec.psi, spec.horizon);
    if map.is_identity() {
        return (spec.clone(), map);
    }
    let map = Arc::new(map);
    let (a, b) = spec.horizon;
    let phi_min = map.phi.inf_on(a, b);
    let psi_new = map.rescale_profile(&spec.psi);
    let chi_new = map.rescale_profile(&spec.chi);
    let (t0, t1) = map.t_horizon;
    let psi_sup = psi_new.sup_on(t0, t1);
    let chi_sup = chi_new.sup_on(t0, t1);
    let f = map.wrap(
        &spec.f,
        (spec.f.lipschitz_const() / phi_min).min(psi_sup),
        (spec.f.bound() / phi_min).min(chi_sup),
    );
    let f_tilde = map.wrap(
        &spec.f_tilde,
        (spec.f_tilde.lipschitz_const() / phi_min).min(psi_sup),
        (spec.f_tilde.bound() / phi_min).min(chi_sup),
    );

    // New uniform steps take the mask row of the original step containing
    // the image of their midpoint.
    let n_steps = spec.n_steps();
    let new_dt = (t1 - t0) / n_steps as f64;
    let old_dt = spec.dt();
    let source: Vec<usize> = (0..n_steps)
        .map(|k| {
            let tau = map.tau_of_t(t0 + (k as f64 + 0.5) * new_dt);
            (((tau - a) / old_dt).floor() as usize).min(n_steps - 1)
        })
        .collect();
    let remap_grid = |g: &ControlGrid| {
        let mask = source.iter().map(|&s| g.mask()[s].clone()).collect();
        ControlGrid::with_mask(g.points().to_vec(), mask).expect("rows copied from a valid grid")
    };
    let grid_u = remap_grid(&spec.grid_u);
    let grid_v = remap_grid(&spec.grid_v);
    let incumbent = spec.incumbent.as_ref().map(|s| {
        let rows = source.iter().map(|&k| s.row(k).to_vec()).collect();
        RelaxedControl::new(&grid_u, rows).expect("rows copied from a valid control")
    });

    let out = ProblemSpec {
        f,
        f_tilde,
        grid_u,
        grid_v,
        horizon: map.t_horizon,
        psi: psi_new,
        chi: chi_new,
        incumbent,
        ..spec.clone()
    };
    let map = Arc::try_unwrap(map).unwrap_or_else(|m| (*m).clone());
    (out, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_spec(f: LipschitzField, psi: Profile, chi: Profile) -> ProblemSpec {
        let n_steps = 10;
        let grid_u = ControlGrid::new(vec![vec![0.0]], n_steps).unwrap();
        let grid_v = ControlGrid::new(vec![vec![0.0]], n_steps).unwrap();
        ProblemSpec {
            name: "scalar".into(),
            n: 1,
            m: 0,
            f,
            f_tilde: LipschitzField::new("zero", 1, 0, 0.0, 0.0, |_, _, _, _| {}),
            h0: LipschitzField::new("id", 1, 1, 1.0, f64::INFINITY, |_, x, _, o| o[0] = x[0]),
            h1: None,
            h_hat: LipschitzField::new("neg", 1, 1, 0.0, 1.0, |_, _, _, o| o[0] = -1.0),
            grid_u,
            grid_v,
            b_set: StateBox::point(&[0.5]),
            b_tilde_set: StateBox::point(&[]),
            b_bar: vec![0.5],
            b_tilde_bar: vec![],
            horizon: (0.0, 1.0),
            psi,
            chi,
            sample_box: StateBox::new(vec![-2.0], vec![2.0]).unwrap(),
            epigraph: None,
            incumbent: None,
        }
    }

    #[test]
    fn profile_integral_and_eval() {
        let p = Profile::Piecewise { breaks: vec![0.5], values: vec![2.0, 4.0] };
        assert_eq!(p.eval(0.2), 2.0);
        assert_eq!(p.eval(0.5), 4.0);
        assert!((p.integral(0.0, 1.0) - 3.0).abs() < 1e-15);
        assert_eq!(p.sup_on(0.0, 0.4), 2.0);
        assert!(Profile::Piecewise { breaks: vec![0.5], values: vec![1.0] }.check().is_err());
    }

    #[test]
    fn sine_with_unit_constant_passes() {
        let f = LipschitzField::new("sin", 1, 1, 1.0, 1.0, |_, x, _, o| o[0] = x[0].sin());
        let spec = scalar_spec(f, Profile::Constant(1.0), Profile::Constant(1.0));
        let r = validate(&spec, 10_000, 7);
        assert!(r.passed(), "{r:#?}");
        assert_eq!(r.entry("H1_measurability").unwrap().status, CheckStatus::NotChecked);
        assert!(r.entry("H2_lipschitz").unwrap().worst_ratio.unwrap() > 0.99);
    }

    #[test]
    fn underdeclared_lipschitz_constant_fails_with_ratio_two() {
        let f = LipschitzField::new("2y", 1, 1, 1.0, 4.0, |_, x, _, o| o[0] = 2.0 * x[0]);
        let spec = scalar_spec(f, Profile::Constant(1.0), Profile::Constant(4.0));
        let r = validate(&spec, 10_000, 7);
        assert!(!r.passed());
        for name in ["H2_lipschitz", "declared_lipschitz_f"] {
            let e = r.entry(name).unwrap();
            assert_eq!(e.status, CheckStatus::Fail);
            assert!((e.worst_ratio.unwrap() - 2.0).abs() < 1e-9, "{e:?}");
        }
    }

    #[test]
    fn constant_dynamics_bound_ratio_is_one() {
        let f = LipschitzField::new("c", 1, 1, 0.0, 0.7, |_, _, _, o| o[0] = -0.7);
        let spec = scalar_spec(f, Profile::Constant(1.0), Profile::Constant(0.7));
        let r = validate(&spec, 1_000, 1);
        let e = r.entry("H2_bound").unwrap();
        assert_eq!(e.status, CheckStatus::Pass);
        assert!((e.worst_ratio.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn validation_is_seed_deterministic() {
        let f = LipschitzField::new("sin", 1, 1, 1.0, 1.0, |_, x, _, o| o[0] = x[0].sin());
        let spec = scalar_spec(f, Profile::Constant(1.0), Profile::Constant(1.0));
        assert_eq!(validate(&spec, 500, 3), validate(&spec, 500, 3));
    }

    #[test]
    fn normalization_is_identity_when_psi_at_most_one() {
        let f = LipschitzField::new("sin", 1, 1, 1.0, 1.0, |_, x, _, o| o[0] = x[0].sin());
        let spec = scalar_spec(f, Profile::Constant(0.5), Profile::Constant(1.0));
        let (out, map) = normalize_time(&spec);
        assert!(map.is_identity());
        assert_eq!(out.horizon, spec.horizon);
        assert_eq!(out.psi, spec.psi);
        assert_eq!(out.f.name(), spec.f.name());
    }

    #[test]
    fn constant_psi_two_doubles_the_horizon() {
        let f = LipschitzField::new("2y", 1, 1, 2.0, 4.0, |_, x, _, o| o[0] = 2.0 * x[0]);
        let spec = scalar_spec(f, Profile::Constant(2.0), Profile::Constant(4.0));
        let (out, map) = normalize_time(&spec);
        assert_eq!(out.horizon, (0.0, 2.0));
        assert_eq!(out.psi, Profile::Constant(1.0));
        assert_eq!(out.chi, Profile::Constant(2.0));
        assert_eq!(out.f.lipschitz_const(), 1.0);
        let g = out.f.eval(1.3, &[0.25], &Controls::NONE)[0];
        assert!((g - 0.25).abs() < 1e-15);
        assert!((map.tau_of_t(2.0) - 1.0).abs() < 1e-15);
        assert!((map.t_of_tau(0.25) - 0.5).abs() < 1e-15);
        let (again, map2) = normalize_time(&out);
        assert!(map2.is_identity());
        assert_eq!(again.horizon, out.horizon);
    }

    #[test]
    fn piecewise_rescaling_preserves_the_integral_identity() {
        let psi = Profile::Piecewise { breaks: vec![0.4], values: vec![3.0, 0.5] };
        let map = TimeRescaling::new(&psi, (0.0, 1.0));
        // ∫φ = 0.4·3 + 0.6·1
        assert!((map.t_horizon.1 - 1.8).abs() < 1e-15);
        for tau in [0.0, 0.1, 0.4, 0.77, 1.0] {
            assert!((map.tau_of_t(map.t_of_tau(tau)) - tau).abs() < 1e-14);
        }
        // ∫ g(t) dt = ∫ f(τ) dτ for g = f(τ(t))/φ(τ(t)), by midpoint sums
        let f = |tau: f64| (3.0 * tau).cos();
        let n = 200_000;
        let (t0, t1) = map.t_horizon;
        let h = (t1 - t0) / n as f64;
        let lhs: f64 = (0..n)
            .map(|i| {
                let t = t0 + (i as f64 + 0.5) * h;
                f(map.tau_of_t(t)) / map.phi_at_t(t) * h
            })
            .sum();
        let rhs = (3.0f64).sin() / 3.0;
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
    }
}
