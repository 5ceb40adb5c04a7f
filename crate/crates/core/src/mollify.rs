//! Fredholm approximations: convolution of Lipschitz fields with the scaled
//! bump mollifier `ϱʲ(x) = jⁿ ϱ(jx)`, supported on the ball of radius `1/j`.
//!
//! The convolution integral is evaluated with a tensor-product Gauss–Legendre
//! rule on the bounding cube of the unit ball. Only nodes strictly inside the
//! ball are kept, and the kernel-masked weights are rescaled to unit mass so
//! that constants are reproduced exactly and `|φʲ − φ| ≤ L/j` holds for the
//! discrete operator itself. Derivative weights are rescaled so that affine
//! fields are differentiated exactly.
//!
//! Only the state argument is smoothed; time and controls pass through.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature::{composite, gauss_legendre};
use crate::state_box::StateBox;

/// Largest state dimension accepted by the mollifier.
pub const MAX_DIM: usize = 3;
/// Largest output dimension of a field evaluated through the mollifier.
pub const MAX_OUT: usize = 8;

/// Control values handed to a field. Player-1 fields ignore `v`.
#[derive(Debug, Clone, Copy)]
pub struct Controls<'a> {
    pub u: &'a [f64],
    pub v: &'a [f64],
}

impl Controls<'static> {
    pub const NONE: Controls<'static> = Controls { u: &[], v: &[] };
}

type EvalFn = dyn Fn(f64, &[f64], &Controls<'_>, &mut [f64]) + Send + Sync;

/// A field `(t, x, controls) ↦ ℝᵏ`, Lipschitz in `x` with a declared constant
/// and a declared pointwise bound.
#[derive(Clone)]
pub struct LipschitzField {
    name: String,
    dim_state: usize,
    dim_out: usize,
    lipschitz: f64,
    bound: f64,
    domain: StateBox,
    eval: Arc<EvalFn>,
}

impl fmt::Debug for LipschitzField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LipschitzField")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_out", &self.dim_out)
            .field("lipschitz", &self.lipschitz)
            .field("bound", &self.bound)
            .finish()
    }
}

impl LipschitzField {
    pub fn new<F>(
        name: impl Into<String>,
        dim_state: usize,
        dim_out: usize,
        lipschitz: f64,
        bound: f64,
        eval: F,
    ) -> Self
    where
        F: Fn(f64, &[f64], &Controls<'_>, &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dim_out <= MAX_OUT, "field output dimension {dim_out} > {MAX_OUT}");
        Self {
            name: name.into(),
            dim_state,
            dim_out,
            lipschitz,
            bound,
            domain: StateBox::unbounded(dim_state),
            eval: Arc::new(eval),
        }
    }

    /// Declares the open domain `Ω′` on which the field may be evaluated.
    pub fn with_domain(mut self, domain: StateBox) -> Result<Self> {
        if domain.dim() != self.dim_state {
            return Err(Error::ShapeMismatch(format!(
                "domain of dimension {} for field '{}' of state dimension {}",
                domain.dim(),
                self.name,
                self.dim_state
            )));
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn with_constants(mut self, lipschitz: f64, bound: f64) -> Self {
        self.lipschitz = lipschitz;
        self.bound = bound;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim_state(&self) -> usize {
        self.dim_state
    }
    pub fn dim_out(&self) -> usize {
        self.dim_out
    }
    pub fn lipschitz_const(&self) -> f64 {
        self.lipschitz
    }
    pub fn bound(&self) -> f64 {
        self.bound
    }
    pub fn domain(&self) -> &StateBox {
        &self.domain
    }

    #[inline]
    pub fn eval_into(&self, t: f64, x: &[f64], ctrl: &Controls<'_>, out: &mut [f64]) {
        (self.eval)(t, x, ctrl, out)
    }

    pub fn eval(&self, t: f64, x: &[f64], ctrl: &Controls<'_>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_out];
        self.eval_into(t, x, ctrl, &mut out);
        out
    }

    /// Scalar convenience for endpoint functions.
    pub fn eval_scalar(&self, x: &[f64]) -> f64 {
        let mut out = [0.0; MAX_OUT];
        self.eval_into(0.0, x, &Controls::NONE, &mut out[..self.dim_out]);
        out[0]
    }
}

/// `ϱ̄(x) = exp(−1/(1−|x|²))` inside the open unit ball, zero elsewhere.
fn bump(r2: f64) -> f64 {
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// One tensor-product node inside the unit ball.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureNode {
    pub point: [f64; MAX_DIM],
    /// Raw product Gauss–Legendre weight.
    pub weight: f64,
}

/// The normalized bump mollifier on the unit ball of ℝⁿ with its quadrature.
#[derive(Debug, Clone)]
pub struct Mollifier {
    dim: usize,
    order: usize,
    normalization: f64,
    nodes: Vec<QuadratureNode>,
    value_weights: Vec<f64>,
    grad_weights: Vec<[f64; MAX_DIM]>,
    raw_mass: f64,
}

impl Mollifier {
    pub fn default_order(dim: usize) -> usize {
        match dim {
            1 => 64,
            2 => 32,
            _ => 16,
        }
    }

    /// Declared quadrature tolerance.
    pub fn default_tolerance(dim: usize) -> f64 {
        if dim <= 2 {
            1e-6
        } else {
            1e-4
        }
    }

    pub fn new(dim: usize) -> Result<Self> {
        Self::with_order(dim, Self::default_order(dim))
    }

    pub fn with_order(dim: usize, order: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::UnsupportedDimension(dim));
        }
        if order < 2 {
            return Err(Error::Invalid(format!("quadrature order {order} < 2")));
        }
        let normalization = ball_integral_of_bump(dim);
        let (x, w) = gauss_legendre(order);

        let mut nodes = Vec::new();
        let mut idx = vec![0usize; dim];
        loop {
            let mut point = [0.0; MAX_DIM];
            let mut weight = 1.0;
            for (d, &i) in idx.iter().enumerate() {
                point[d] = x[i];
                weight *= w[i];
            }
            let r2: f64 = point.iter().map(|p| p * p).sum();
            if r2 < 1.0 && bump(r2) > 0.0 {
                nodes.push(QuadratureNode { point, weight });
            }
            // odometer
            let mut d = 0;
            loop {
                if d == dim {
                    break;
                }
                idx[d] += 1;
                if idx[d] < order {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == dim {
                break;
            }
        }

        let mut value_weights: Vec<f64> = nodes
            .iter()
            .map(|n| {
                let r2: f64 = n.point.iter().map(|p| p * p).sum();
                n.weight * bump(r2) / normalization
            })
            .collect();
        let raw_mass: f64 = value_weights.iter().sum();
        for v in &mut value_weights {
            *v /= raw_mass;
        }

        let mut grad_weights: Vec<[f64; MAX_DIM]> = nodes
            .iter()
            .map(|n| {
                let r2: f64 = n.point.iter().map(|p| p * p).sum();
                let s = 1.0 - r2;
                let scale = n.weight * bump(r2) / normalization * (-2.0 / (s * s));
                let mut g = [0.0; MAX_DIM];
                for d in 0..dim {
                    g[d] = scale * n.point[d];
                }
                g
            })
            .collect();
        // ∫ ∂ᵢϱ(z) z_k dz = −δᵢₖ; the rule is symmetric so one diagonal entry fixes all.
        let moment: f64 = grad_weights
            .iter()
            .zip(&nodes)
            .map(|(g, n)| -g[0] * n.point[0])
            .sum();
        for g in &mut grad_weights {
            for c in g.iter_mut() {
                *c /= moment;
            }
        }

        Ok(Self {
            dim,
            order,
            normalization,
            nodes,
            value_weights,
            grad_weights,
            raw_mass,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn order(&self) -> usize {
        self.order
    }
    /// `∫_B ϱ̄`.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }
    pub fn nodes(&self) -> &[QuadratureNode] {
        &self.nodes
    }
    /// Quadrature of the normalized kernel before the unit-mass rescaling.
    pub fn raw_mass(&self) -> f64 {
        self.raw_mass
    }
    /// Mass of the kernel under the weights actually used for convolution.
    pub fn mass(&self) -> f64 {
        self.value_weights.iter().sum()
    }

    pub fn kernel_value(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        bump(r2) / self.normalization
    }

    pub fn kernel_grad(&self, x: &[f64]) -> Vec<f64> {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        if r2 >= 1.0 {
            return vec![0.0; x.len()];
        }
        let s = 1.0 - r2;
        let scale = self.kernel_value(x) * (-2.0 / (s * s));
        x.iter().map(|v| scale * v).collect()
    }
}

/// `ϱ(x) = ϱ̄(x)/∫_B ϱ̄`; zero outside the open unit ball.
pub fn kernel_value(x: &[f64], mollifier: &Mollifier) -> f64 {
    mollifier.kernel_value(x)
}

/// `∫_B ϱ̄ = |S^{n−1}| ∫₀¹ ϱ̄(r) r^{n−1} dr`, by a composite radial rule.
fn ball_integral_of_bump(dim: usize) -> f64 {
    let sphere = match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!(),
    };
    let radial: f64 = composite(0.0, 1.0, 16, 32)
        .into_iter()
        .map(|(r, w)| w * bump(r * r) * r.powi(dim as i32 - 1))
        .sum();
    sphere * radial
}

/// `φʲ = φ ∗ ϱʲ`, smoothing in the state variable only.
#[derive(Debug, Clone)]
pub struct FredholmApprox {
    base: LipschitzField,
    j: u32,
    mollifier: Arc<Mollifier>,
}

impl FredholmApprox {
    pub fn new(base: LipschitzField, j: u32, mollifier: Arc<Mollifier>) -> Result<Self> {
        if j == 0 {
            return Err(Error::Invalid("mollification index j must be positive".into()));
        }
        if base.dim_state() != mollifier.dim() {
            return Err(Error::ShapeMismatch(format!(
                "field '{}' has state dimension {} but mollifier dimension is {}",
                base.name(),
                base.dim_state(),
                mollifier.dim()
            )));
        }
        Ok(Self { base, j, mollifier })
    }

    pub fn base(&self) -> &LipschitzField {
        &self.base
    }
    pub fn j(&self) -> u32 {
        self.j
    }
    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }
    /// Support radius of `ϱʲ`.
    pub fn radius(&self) -> f64 {
        1.0 / self.j as f64
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.base.dim_state() {
            return Err(Error::ShapeMismatch(format!(
                "state of length {} for field '{}' of dimension {}",
                x.len(),
                self.base.name(),
                self.base.dim_state()
            )));
        }
        if !self.base.domain().contains_ball(x, self.radius()) {
            return Err(Error::Domain(format!(
                "ball of radius 1/{} around {:?} leaves the domain of '{}'",
                self.j,
                x,
                self.base.name()
            )));
        }
        Ok(())
    }

    /// Writes `φʲ(t, x, ctrl)` into `val` and, when requested, the row-major
    /// `k × d` Jacobian `∂ₓφʲ` into `jac`.
    pub fn eval_into(
        &self,
        t: f64,
        x: &[f64],
        ctrl: &Controls<'_>,
        val: &mut [f64],
        mut jac: Option<&mut [f64]>,
    ) -> Result<()> {
        self.check_domain(x)?;
        let d = self.base.dim_state();
        let k = self.base.dim_out();
        let h = self.radius();
        val[..k].iter_mut().for_each(|v| *v = 0.0);
        if let Some(jac) = jac.as_deref_mut() {
            jac[..k * d].iter_mut().for_each(|v| *v = 0.0);
        }
        let mut shifted = [0.0; MAX_DIM];
        let mut phi = [0.0; MAX_OUT];
        let m = &*self.mollifier;
        for (i, node) in m.nodes.iter().enumerate() {
            for c in 0..d {
                shifted[c] = x[c] - h * node.point[c];
            }
            self.base.eval_into(t, &shifted[..d], ctrl, &mut phi[..k]);
            let wv = m.value_weights[i];
            for r in 0..k {
                val[r] += wv * phi[r];
            }
            if let Some(jac) = jac.as_deref_mut() {
                let g = &m.grad_weights[i];
                for r in 0..k {
                    for c in 0..d {
                        jac[r * d + c] += g[c] * phi[r];
                    }
                }
            }
        }
        if let Some(jac) = jac {
            let scale = self.j as f64;
            jac[..k * d].iter_mut().for_each(|v| *v *= scale);
        }
        Ok(())
    }

    pub fn value(&self, t: f64, x: &[f64], ctrl: &Controls<'_>) -> Result<Vec<f64>> {
        let mut val = vec![0.0; self.base.dim_out()];
        self.eval_into(t, x, ctrl, &mut val, None)?;
        Ok(val)
    }

    /// Row-major `k × d` Jacobian.
    pub fn grad(&self, t: f64, x: &[f64], ctrl: &Controls<'_>) -> Result<Vec<f64>> {
        let k = self.base.dim_out();
        let d = self.base.dim_state();
        let mut val = vec![0.0; k];
        let mut jac = vec![0.0; k * d];
        self.eval_into(t, x, ctrl, &mut val, Some(&mut jac))?;
        Ok(jac)
    }
}

pub fn fredholm_value(
    fa: &FredholmApprox,
    t: f64,
    x: &[f64],
    ctrl: &Controls<'_>,
) -> Result<Vec<f64>> {
    fa.value(t, x, ctrl)
}

pub fn fredholm_grad(
    fa: &FredholmApprox,
    t: f64,
    x: &[f64],
    ctrl: &Controls<'_>,
) -> Result<Vec<f64>> {
    fa.grad(t, x, ctrl)
}

/// Either the exact field or its Fredholm approximation at a fixed `j`.
#[derive(Debug, Clone)]
pub enum Smoothed {
    Exact(LipschitzField),
    Mollified(FredholmApprox),
}

impl Smoothed {
    pub fn new(field: &LipschitzField, j: Option<u32>) -> Result<Self> {
        match j {
            None => Ok(Smoothed::Exact(field.clone())),
            Some(j) => {
                let m = shared_mollifier(field.dim_state())?;
                Ok(Smoothed::Mollified(FredholmApprox::new(field.clone(), j, m)?))
            }
        }
    }

    pub fn field(&self) -> &LipschitzField {
        match self {
            Smoothed::Exact(f) => f,
            Smoothed::Mollified(fa) => fa.base(),
        }
    }

    pub fn j(&self) -> Option<u32> {
        match self {
            Smoothed::Exact(_) => None,
            Smoothed::Mollified(fa) => Some(fa.j()),
        }
    }

    #[inline]
    pub fn value_into(&self, t: f64, x: &[f64], ctrl: &Controls<'_>, out: &mut [f64]) -> Result<()> {
        match self {
            Smoothed::Exact(f) => {
                if !f.domain().contains(x) {
                    return Err(Error::Domain(format!(
                        "state {:?} outside the domain of '{}'",
                        x,
                        f.name()
                    )));
                }
                f.eval_into(t, x, ctrl, out);
                Ok(())
            }
            Smoothed::Mollified(fa) => fa.eval_into(t, x, ctrl, out, None),
        }
    }

    /// Value and Jacobian; only defined for the mollified variant since the
    /// base field is merely Lipschitz.
    pub fn value_grad_into(
        &self,
        t: f64,
        x: &[f64],
        ctrl: &Controls<'_>,
        val: &mut [f64],
        jac: &mut [f64],
    ) -> Result<()> {
        match self {
            Smoothed::Exact(f) => Err(Error::Invalid(format!(
                "Jacobian of '{}' requested without mollification",
                f.name()
            ))),
            Smoothed::Mollified(fa) => fa.eval_into(t, x, ctrl, val, Some(jac)),
        }
    }

    pub fn scalar(&self, x: &[f64]) -> Result<f64> {
        let mut out = [0.0; MAX_OUT];
        let k = self.field().dim_out();
        self.value_into(0.0, x, &Controls::NONE, &mut out[..k])?;
        Ok(out[0])
    }

    pub fn vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.field().dim_out()];
        self.value_into(0.0, x, &Controls::NONE, &mut out)?;
        Ok(out)
    }

    /// Gradient (row-major `k × d`) of an endpoint function.
    pub fn endpoint_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.field();
        let mut val = vec![0.0; f.dim_out()];
        let mut jac = vec![0.0; f.dim_out() * f.dim_state()];
        self.value_grad_into(0.0, x, &Controls::NONE, &mut val, &mut jac)?;
        Ok(jac)
    }
}

/// Default-order mollifiers are immutable and shared process-wide.
pub fn shared_mollifier(dim: usize) -> Result<Arc<Mollifier>> {
    use std::sync::OnceLock;
    static CACHE: [OnceLock<Arc<Mollifier>>; MAX_DIM] =
        [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::UnsupportedDimension(dim));
    }
    Ok(CACHE[dim - 1]
        .get_or_init(|| Arc::new(Mollifier::new(dim).expect("valid dimension")))
        .clone())
}

/// Sequence `{Φʲ}` of time-integrated mollified Jacobians along a path.
#[derive(Debug, Clone)]
pub struct RelaxedDerivative {
    pub j_values: Vec<u32>,
    /// Row-major `k × d` matrices, one per `j`.
    pub matrices: Vec<Vec<f64>>,
    /// Max-norm differences between consecutive entries of `matrices`.
    pub increments: Vec<f64>,
    /// Set when the increments fail to shrink; informational only.
    pub non_convergent: bool,
}

impl RelaxedDerivative {
    /// `Φʲ` for the largest requested `j`.
    pub fn limit(&self) -> &[f64] {
        self.matrices.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `Φʲ = ∫ ∂ₓφʲ(t, η(t), ctrl) dt` for every approximation in `approxes`
/// (ordered by increasing `j`).
pub fn relaxed_derivative<P>(
    approxes: &[FredholmApprox],
    eta: P,
    horizon: (f64, f64),
    ctrl: &Controls<'_>,
) -> Result<RelaxedDerivative>
where
    P: Fn(f64) -> Vec<f64>,
{
    if approxes.is_empty() {
        return Err(Error::EmptyJSequence);
    }
    let rule = composite(horizon.0, horizon.1, 512, 4);
    let path: Vec<(f64, f64, Vec<f64>)> = rule.iter().map(|&(t, w)| (t, w, eta(t))).collect();
    let mut matrices = Vec::with_capacity(approxes.len());
    for fa in approxes {
        let k = fa.base().dim_out();
        let d = fa.base().dim_state();
        let mut acc = vec![0.0; k * d];
        let mut val = vec![0.0; k];
        let mut jac = vec![0.0; k * d];
        for (t, w, x) in &path {
            fa.eval_into(*t, x, ctrl, &mut val, Some(&mut jac))?;
            for (a, g) in acc.iter_mut().zip(&jac) {
                *a += w * g;
            }
        }
        matrices.push(acc);
    }
    let increments: Vec<f64> = matrices
        .windows(2)
        .map(|p| {
            p[0].iter()
                .zip(&p[1])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let non_convergent = increments.windows(2).any(|p| p[1] > p[0] + 1e-12);
    Ok(RelaxedDerivative {
        j_values: approxes.iter().map(FredholmApprox::j).collect(),
        matrices,
        increments,
        non_convergent,
    })
}
