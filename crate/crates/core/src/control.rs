//! Relaxed controls on a uniform time grid: player-1 measures `σ`, adversary
//! measures `σ_P`, fiber policies `π(t, u)`, their joint compositions and the
//! countable family used for the variational inequality.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Finite control set with a per-step admissibility mask (`U(t)` or `V(t)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    points: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

impl ControlGrid {
    /// Every point admissible at every step.
    pub fn new(points: Vec<Vec<f64>>, n_steps: usize) -> Result<Self> {
        let n = points.len();
        Self::with_mask(points, vec![vec![true; n]; n_steps])
    }

    pub fn with_mask(points: Vec<Vec<f64>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("control grid without points".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::ShapeMismatch("control points of unequal dimension".into()));
        }
        if mask.is_empty() {
            return Err(Error::Invalid("control grid with zero time steps".into()));
        }
        for (k, row) in mask.iter().enumerate() {
            if row.len() != points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "mask row {k} has {} entries for {} points",
                    row.len(),
                    points.len()
                )));
            }
            if !row.iter().any(|&a| a) {
                return Err(Error::Invalid(format!("no admissible control at step {k}")));
            }
        }
        Ok(Self { points, mask })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn n_steps(&self) -> usize {
        self.mask.len()
    }
    pub fn point_dim(&self) -> usize {
        self.points[0].len()
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
    pub fn admissible(&self, step: usize, i: usize) -> bool {
        self.mask[step][i]
    }
    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }
    /// Lowest admissible index at a step.
    pub fn first_admissible(&self, step: usize) -> usize {
        self.mask[step].iter().position(|&a| a).expect("checked on construction")
    }
    /// Largest Euclidean norm over the points.
    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

fn check_row(row: &[f64], step: usize, grid: &ControlGrid, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for (i, &w) in row.iter().enumerate() {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Invalid(format!("{what}: weight {w} at step {step}")));
        }
        if w > 0.0 && !grid.admissible(step, i) {
            return Err(Error::Invalid(format!(
                "{what}: mass on inadmissible point {i} at step {step}"
            )));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Invalid(format!("{what}: row {step} sums to {sum}")));
    }
    Ok(())
}

/// Row-stochastic `[n_steps × n_controls]` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedControl {
    n_steps: usize,
    n_controls: usize,
    weights: Vec<f64>,
}

impl RelaxedControl {
    pub fn new(grid: &ControlGrid, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != grid.n_steps() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows for a grid of {} steps",
                rows.len(),
                grid.n_steps()
            )));
        }
        let n = grid.len();
        let mut weights = Vec::with_capacity(rows.len() * n);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::ShapeMismatch(format!("row {k} has {} entries, expected {n}", row.len())));
            }
            check_row(row, k, grid, "relaxed control")?;
            weights.extend_from_slice(row);
        }
        Ok(Self { n_steps: rows.len(), n_controls: n, weights })
    }

    /// `δ_{u_k}` at every step.
    pub fn dirac(grid: &ControlGrid, indices: &[usize]) -> Result<Self> {
        if indices.len() != grid.n_steps() {
            return Err(Error::ShapeMismatch(format!(
                "{} indices for a grid of {} steps",
                indices.len(),
                grid.n_steps()
            )));
        }
        let n = grid.len();
        let mut weights = vec![0.0; indices.len() * n];
        for (k, &i) in indices.iter().enumerate() {
            if i >= n || !grid.admissible(k, i) {
                return Err(Error::Invalid(format!("Dirac index {i} inadmissible at step {k}")));
            }
            weights[k * n + i] = 1.0;
        }
        Ok(Self { n_steps: indices.len(), n_controls: n, weights })
    }

    pub fn constant_dirac(grid: &ControlGrid, index: usize) -> Result<Self> {
        Self::dirac(grid, &vec![index; grid.n_steps()])
    }

    /// Uniform over the admissible points of each step.
    pub fn uniform(grid: &ControlGrid) -> Self {
        let n = grid.len();
        let mut weights = vec![0.0; grid.n_steps() * n];
        for k in 0..grid.n_steps() {
            let count = (0..n).filter(|&i| grid.admissible(k, i)).count() as f64;
            for i in 0..n {
                if grid.admissible(k, i) {
                    weights[k * n + i] = 1.0 / count;
                }
            }
        }
        Self { n_steps: grid.n_steps(), n_controls: n, weights }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn n_controls(&self) -> usize {
        self.n_controls
    }
    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n_controls..(k + 1) * self.n_controls]
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(1−γ)·self + γ·other`.
    pub fn mix(&self, other: &RelaxedControl, gamma: f64) -> Result<Self> {
        if self.n_steps != other.n_steps || self.n_controls != other.n_controls {
            return Err(Error::ShapeMismatch("mixing controls of different shapes".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Invalid(format!("mixing weight {gamma} outside [0, 1]")));
        }
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| {
                if gamma == 1.0 {
                    *b
                } else if gamma == 0.0 {
                    *a
                } else {
                    (1.0 - gamma) * a + gamma * b
                }
            })
            .collect();
        Ok(Self { n_steps: self.n_steps, n_controls: self.n_controls, weights })
    }

    /// Per-step `(index, weight)` pairs with positive weight.
    pub fn support(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row(k).iter().copied().enumerate().filter(|(_, w)| *w > 0.0)
    }

    /// Rowwise index of largest weight, ties to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.n_steps)
            .map(|k| {
                let row = self.row(k);
                let mut best = 0;
                for i in 1..row.len() {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &RelaxedControl) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Conditional weights `π[t, u, ·]` over the V grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberPolicy {
    n_steps: usize,
    n_u: usize,
    n_v: usize,
    weights: Vec<f64>,
}

impl FiberPolicy {
    /// `tensor[k][u]` is the fiber over V at step `k` and player-1 point `u`.
    pub fn new(grid_u: &ControlGrid, grid_v: &ControlGrid, tensor: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if grid_u.n_steps() != grid_v.n_steps() || tensor.len() != grid_v.n_steps() {
            return Err(Error::ShapeMismatch("fiber policy step counts disagree".into()));
        }
        let (n_u, n_v) = (grid_u.len(), grid_v.len());
        let mut weights = Vec::with_capacity(tensor.len() * n_u * n_v);
        for (k, slab) in tensor.iter().enumerate() {
            if slab.len() != n_u {
                return Err(Error::ShapeMismatch(format!("step {k} has {} fibers, expected {n_u}", slab.len())));
            }
            for fiber in slab {
                if fiber.len() != n_v {
                    return Err(Error::ShapeMismatch(format!("fiber of length {}, expected {n_v}", fiber.len())));
                }
                check_row(fiber, k, grid_v, "fiber policy")?;
                weights.extend_from_slice(fiber);
            }
        }
        Ok(Self { n_steps: tensor.len(), n_u, n_v, weights })
    }

    /// Dirac fibers `π(t_k, u) = δ_{choice(k, u)}`.
    pub fn from_choice<F>(grid_u: &ControlGrid, grid_v: &ControlGrid, choice: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> usize,
    {
        let (n_u, n_v, n_steps) = (grid_u.len(), grid_v.len(), grid_v.n_steps());
        if grid_u.n_steps() != n_steps {
            return Err(Error::ShapeMismatch("fiber policy step counts disagree".into()));
        }
        let mut weights = vec![0.0; n_steps * n_u * n_v];
        for k in 0..n_steps {
            for u in 0..n_u {
                let v = choice(k, u);
                if v >= n_v || !grid_v.admissible(k, v) {
                    return Err(Error::Invalid(format!("fiber choice {v} inadmissible at step {k}")));
                }
                weights[(k * n_u + u) * n_v + v] = 1.0;
            }
        }
        Ok(Self { n_steps, n_u, n_v, weights })
    }

    /// The same row `σ_P(t)` on every fiber: a relaxed adversary seen as a policy.
    pub fn broadcast(sigma_p: &RelaxedControl, n_u: usize) -> Self {
        let n_v = sigma_p.n_controls();
        let mut weights = Vec::with_capacity(sigma_p.n_steps() * n_u * n_v);
        for k in 0..sigma_p.n_steps() {
            for _ in 0..n_u {
                weights.extend_from_slice(sigma_p.row(k));
            }
        }
        Self { n_steps: sigma_p.n_steps(), n_u, n_v, weights }
    }

    pub fn uniform(grid_u: &ControlGrid, grid_v: &ControlGrid) -> Self {
        Self::broadcast(&RelaxedControl::uniform(grid_v), grid_u.len())
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_v(&self) -> usize {
        self.n_v
    }
    pub fn fiber(&self, k: usize, u: usize) -> &[f64] {
        let start = (k * self.n_u + u) * self.n_v;
        &self.weights[start..start + self.n_v]
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// True when every fiber at a step equals the first one.
    pub fn is_u_independent(&self) -> bool {
        (0..self.n_steps).all(|k| (1..self.n_u).all(|u| self.fiber(k, u) == self.fiber(k, 0)))
    }

    /// Largest-weight index of every fiber, `[k][u]`.
    pub fn argmax(&self) -> Vec<Vec<usize>> {
        (0..self.n_steps)
            .map(|k| {
                (0..self.n_u)
                    .map(|u| {
                        let f = self.fiber(k, u);
                        let mut best = 0;
                        for v in 1..f.len() {
                            if f[v] > f[best] {
                                best = v;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &FiberPolicy) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Product,
    Fiber,
}

/// Joint weights `[n_steps × n_u × n_v]`, each time slice a probability.
#[derive(Debug, Clone, PartialEq)]
pub struct JointControl {
    n_steps: usize,
    n_u: usize,
    n_v: usize,
    weights: Vec<f64>,
    provenance: Provenance,
}

impl JointControl {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_v(&self) -> usize {
        self.n_v
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn weight(&self, k: usize, u: usize, v: usize) -> f64 {
        self.weights[(k * self.n_u + u) * self.n_v + v]
    }
    /// Row-major `n_u × n_v` slice at step `k`.
    pub fn slice(&self, k: usize) -> &[f64] {
        let s = self.n_u * self.n_v;
        &self.weights[k * s..(k + 1) * s]
    }

    /// Marginal over V.
    pub fn marginal_u(&self, k: usize) -> Vec<f64> {
        (0..self.n_u)
            .map(|u| (0..self.n_v).map(|v| self.weight(k, u, v)).sum())
            .collect()
    }

    /// Marginal over U.
    pub fn marginal_v(&self, k: usize) -> Vec<f64> {
        (0..self.n_v)
            .map(|v| (0..self.n_u).map(|u| self.weight(k, u, v)).sum())
            .collect()
    }

    /// Whether slice `k` equals the outer product of its marginals.
    pub fn is_rank_one(&self, k: usize, tol: f64) -> bool {
        let mu = self.marginal_u(k);
        let mv = self.marginal_v(k);
        (0..self.n_u).all(|u| (0..self.n_v).all(|v| (self.weight(k, u, v) - mu[u] * mv[v]).abs() <= tol))
    }

    /// Positive-weight atoms of step `k`, in lexicographic `(u, v)` order.
    pub fn atoms(&self, k: usize) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for u in 0..self.n_u {
            for v in 0..self.n_v {
                let w = self.weight(k, u, v);
                if w > 0.0 {
                    out.push((u, v, w));
                }
            }
        }
        out
    }
}

/// `σ × σ_P`: independent product of two relaxed controls.
pub fn product(sigma: &RelaxedControl, sigma_p: &RelaxedControl) -> Result<JointControl> {
    if sigma.n_steps() != sigma_p.n_steps() {
        return Err(Error::ShapeMismatch(format!(
            "product of controls with {} and {} steps",
            sigma.n_steps(),
            sigma_p.n_steps()
        )));
    }
    let (n_u, n_v) = (sigma.n_controls(), sigma_p.n_controls());
    let mut weights = Vec::with_capacity(sigma.n_steps() * n_u * n_v);
    for k in 0..sigma.n_steps() {
        for &a in sigma.row(k) {
            for &b in sigma_p.row(k) {
                weights.push(a * b);
            }
        }
    }
    Ok(JointControl { n_steps: sigma.n_steps(), n_u, n_v, weights, provenance: Provenance::Product })
}

/// `σ ⊗ π`: slice `[u, v] = σ(t)[u] · π(t, u)[v]`.
pub fn fiber_compose(sigma: &RelaxedControl, pi: &FiberPolicy) -> Result<JointControl> {
    if sigma.n_steps() != pi.n_steps() || sigma.n_controls() != pi.n_u() {
        return Err(Error::ShapeMismatch(format!(
            "composing σ [{}×{}] with π [{}×{}×{}]",
            sigma.n_steps(),
            sigma.n_controls(),
            pi.n_steps(),
            pi.n_u(),
            pi.n_v()
        )));
    }
    let (n_u, n_v) = (pi.n_u(), pi.n_v());
    let mut weights = Vec::with_capacity(sigma.n_steps() * n_u * n_v);
    for k in 0..sigma.n_steps() {
        for (u, &a) in sigma.row(k).iter().enumerate() {
            for &b in pi.fiber(k, u) {
                weights.push(a * b);
            }
        }
    }
    Ok(JointControl { n_steps: sigma.n_steps(), n_u, n_v, weights, provenance: Provenance::Fiber })
}

/// A generator of the countable family: a constant grid control on a dyadic
/// interval `[num/den, (num+1)/den]` of the normalized horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseAtom {
    pub control_index: usize,
    pub num: u64,
    pub den: u64,
}

impl DenseAtom {
    /// Interval endpoints in absolute time.
    pub fn interval(&self, horizon: (f64, f64)) -> (f64, f64) {
        let len = horizon.1 - horizon.0;
        (
            horizon.0 + len * self.num as f64 / self.den as f64,
            horizon.0 + len * (self.num + 1) as f64 / self.den as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseFamily {
    pub base: RelaxedControl,
    pub atoms: Vec<DenseAtom>,
    /// `members[0]` is the base; `members[i + 1]` is built from `atoms[i]`.
    pub members: Vec<RelaxedControl>,
}

/// Applies one generator to `base`: Dirac rows on steps whose midpoint lies in
/// the interval, base rows elsewhere and where the point is inadmissible.
pub fn dense_member(
    base: &RelaxedControl,
    grid: &ControlGrid,
    horizon: (f64, f64),
    atom: &DenseAtom,
) -> RelaxedControl {
    let n = base.n_controls();
    let dt = (horizon.1 - horizon.0) / base.n_steps() as f64;
    let (a, b) = atom.interval(horizon);
    let mut weights = base.weights.clone();
    for k in 0..base.n_steps() {
        let mid = horizon.0 + (k as f64 + 0.5) * dt;
        if mid >= a && mid <= b && grid.admissible(k, atom.control_index) {
            let row = &mut weights[k * n..(k + 1) * n];
            row.iter_mut().for_each(|w| *w = 0.0);
            row[atom.control_index] = 1.0;
        }
    }
    RelaxedControl { n_steps: base.n_steps(), n_controls: n, weights }
}

/// Enumerates dyadic levels `2⁰, 2¹, …`; each level lists every (interval,
/// grid point) pair in a seeded random order. The first `n_atoms` pairs form
/// the family.
pub fn build_dense_family(
    base: &RelaxedControl,
    grid: &ControlGrid,
    horizon: (f64, f64),
    n_atoms: usize,
    seed: u64,
) -> DenseFamily {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut atoms = Vec::with_capacity(n_atoms);
    let mut den = 1u64;
    while atoms.len() < n_atoms {
        let mut level: Vec<DenseAtom> = (0..den)
            .flat_map(|num| (0..grid.len()).map(move |c| DenseAtom { control_index: c, num, den }))
            .collect();
        level.shuffle(&mut rng);
        let take = (n_atoms - atoms.len()).min(level.len());
        atoms.extend_from_slice(&level[..take]);
        den *= 2;
    }
    let mut members = Vec::with_capacity(n_atoms + 1);
    members.push(base.clone());
    members.extend(atoms.iter().map(|a| dense_member(base, grid, horizon, a)));
    DenseFamily { base: base.clone(), atoms, members }
}

/// `ζ̃`: the measure `dt·σ(t)(du)` on time × U.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseMeasure {
    pub n_controls: usize,
    pub density: Vec<f64>,
}

impl BaseMeasure {
    pub fn cell(&self, k: usize, u: usize) -> f64 {
        self.density[k * self.n_controls + u]
    }
    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum()
    }
}

pub fn base_measure(reference: &RelaxedControl, dt: f64) -> BaseMeasure {
    BaseMeasure {
        n_controls: reference.n_controls(),
        density: reference.weights().iter().map(|w| w * dt).collect(),
    }
}
