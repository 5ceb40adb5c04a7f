//! Built-in analytic fields, addressed by registry name, and the problem
//! corpus used by the tests and the bundled examples.

use serde::{Deserialize, Serialize};

use crate::control::{ControlGrid, RelaxedControl};
use crate::error::{Error, Result};
use crate::mollify::LipschitzField;
use crate::problem::{Profile, ProblemSpec};
use crate::state_box::StateBox;

/// Which control values multiply an absolute-value term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlFactor {
    None,
    U(usize),
    V(usize),
    Uv(usize, usize),
}

/// `coef · |x[index] − shift| · factor` added to output `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsTerm {
    pub out: usize,
    pub index: usize,
    #[serde(default)]
    pub shift: f64,
    pub coef: f64,
    #[serde(default = "no_factor")]
    pub control: ControlFactor,
}

fn no_factor() -> ControlFactor {
    ControlFactor::None
}

fn one() -> f64 {
    1.0
}

/// Registry of analytic fields. Dynamics take `(t, x, u, v)`; endpoint
/// functions ignore everything but `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    /// `A x + B_u u + B_v v + c`.
    Affine {
        a: Vec<Vec<f64>>,
        #[serde(default)]
        b_u: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        b_v: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        c: Option<Vec<f64>>,
    },
    /// `scale · |x[index]| · u₀ · v₀`, scalar output.
    AbsBilinear {
        index: usize,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Affine part plus a sum of absolute-value terms.
    AbsAffine {
        #[serde(default)]
        a: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        b_u: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        b_v: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        c: Option<Vec<f64>>,
        terms: Vec<AbsTerm>,
    },
    /// `w·x + offset`.
    Linear {
        weights: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// `Σ wᵢ (xᵢ − rᵢ)²`; Lipschitz only on bounded sets, so the constant is declared.
    Quadratic {
        target: Vec<f64>,
        weights: Vec<f64>,
        lipschitz: f64,
    },
    /// `scale · |x[index] − shift| + offset`.
    Abs {
        index: usize,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
}

/// Control-grid magnitudes needed for Lipschitz and bound estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildContext {
    pub u_dim: usize,
    pub v_dim: usize,
    /// Largest absolute value of any single control component.
    pub u_max: f64,
    pub v_max: f64,
}

impl BuildContext {
    pub fn from_grids(u: &ControlGrid, v: &ControlGrid) -> Self {
        let comp_max = |g: &ControlGrid| g.points().iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        Self { u_dim: u.point_dim(), v_dim: v.point_dim(), u_max: comp_max(u), v_max: comp_max(v) }
    }

    pub fn endpoint() -> Self {
        Self { u_dim: 0, v_dim: 0, u_max: 0.0, v_max: 0.0 }
    }
}

fn frobenius(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_matrix(name: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch(format!("{name} must be {rows}×{cols}")));
    }
    Ok(())
}

fn matvec_add(m: &[Vec<f64>], x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl FieldSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            FieldSpec::Zero => "zero",
            FieldSpec::Affine { .. } => "affine",
            FieldSpec::AbsBilinear { .. } => "abs_bilinear",
            FieldSpec::AbsAffine { .. } => "abs_affine",
            FieldSpec::Linear { .. } => "linear",
            FieldSpec::Quadratic { .. } => "quadratic",
            FieldSpec::Abs { .. } => "abs",
        }
    }

    /// Builds the field with the given shape. Declared constants are upper
    /// bounds derived from the parameters; the bound is infinite unless the
    /// field is globally bounded.
    pub fn build(&self, dim_state: usize, dim_out: usize, ctx: &BuildContext) -> Result<LipschitzField> {
        let name = self.kind();
        let opt_mat = |m: &Option<Vec<Vec<f64>>>, cols: usize, what: &str| -> Result<Option<Vec<Vec<f64>>>> {
            match m {
                None => Ok(None),
                Some(m) => {
                    check_matrix(what, m, dim_out, cols)?;
                    Ok(Some(m.clone()))
                }
            }
        };
        let opt_vec = |c: &Option<Vec<f64>>| -> Result<Vec<f64>> {
            match c {
                None => Ok(vec![0.0; dim_out]),
                Some(c) if c.len() == dim_out => Ok(c.clone()),
                Some(c) => Err(Error::ShapeMismatch(format!("offset of length {} for output {dim_out}", c.len()))),
            }
        };
        let field = match self {
            FieldSpec::Zero => LipschitzField::new(name, dim_state, dim_out, 0.0, 0.0, move |_, _, _, out| {
                out[..dim_out].iter_mut().for_each(|v| *v = 0.0)
            }),
            FieldSpec::Affine { a, b_u, b_v, c } => {
                check_matrix("a", a, dim_out, dim_state)?;
                let a = a.clone();
                let b_u = opt_mat(b_u, ctx.u_dim, "b_u")?;
                let b_v = opt_mat(b_v, ctx.v_dim, "b_v")?;
                let c = opt_vec(c)?;
                let lip = frobenius(&a);
                let bound = if lip == 0.0 {
                    let bu = b_u.as_ref().map_or(0.0, |m| frobenius(m) * ctx.u_max * (ctx.u_dim as f64).sqrt());
                    let bv = b_v.as_ref().map_or(0.0, |m| frobenius(m) * ctx.v_max * (ctx.v_dim as f64).sqrt());
                    c.iter().map(|x| x * x).sum::<f64>().sqrt() + bu + bv
                } else {
                    f64::INFINITY
                };
                LipschitzField::new(name, dim_state, dim_out, lip, bound, move |_, x, ctl, out| {
                    out[..dim_out].copy_from_slice(&c);
                    matvec_add(&a, x, out);
                    if let Some(b) = &b_u {
                        matvec_add(b, ctl.u, out);
                    }
                    if let Some(b) = &b_v {
                        matvec_add(b, ctl.v, out);
                    }
                })
            }
            FieldSpec::AbsBilinear { index, scale } => {
                if dim_out != 1 || *index >= dim_state || ctx.u_dim == 0 || ctx.v_dim == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "abs_bilinear needs scalar output, index < {dim_state} and scalar controls"
                    )));
                }
                let (i, s) = (*index, *scale);
                let lip = s.abs() * ctx.u_max * ctx.v_max;
                LipschitzField::new(name, dim_state, 1, lip, f64::INFINITY, move |_, x, ctl, out| {
                    out[0] = s * x[i].abs() * ctl.u[0] * ctl.v[0];
                })
            }
            FieldSpec::AbsAffine { a, b_u, b_v, c, terms } => {
                let a = opt_mat(a, dim_state, "a")?;
                let b_u = opt_mat(b_u, ctx.u_dim, "b_u")?;
                let b_v = opt_mat(b_v, ctx.v_dim, "b_v")?;
                let c = opt_vec(c)?;
                let mut lip = a.as_ref().map_or(0.0, |m| frobenius(m));
                for t in terms {
                    if t.out >= dim_out || t.index >= dim_state {
                        return Err(Error::ShapeMismatch(format!(
                            "abs term ({}, {}) outside a {dim_out}×{dim_state} field",
                            t.out, t.index
                        )));
                    }
                    let factor = match t.control {
                        ControlFactor::None => 1.0,
                        ControlFactor::U(i) if i < ctx.u_dim => ctx.u_max,
                        ControlFactor::V(i) if i < ctx.v_dim => ctx.v_max,
                        ControlFactor::Uv(i, k) if i < ctx.u_dim && k < ctx.v_dim => ctx.u_max * ctx.v_max,
                        _ => return Err(Error::ShapeMismatch("abs term control index out of range".into())),
                    };
                    lip += t.coef.abs() * factor;
                }
                let terms = terms.clone();
                LipschitzField::new(name, dim_state, dim_out, lip, f64::INFINITY, move |_, x, ctl, out| {
                    out[..dim_out].copy_from_slice(&c);
                    if let Some(m) = &a {
                        matvec_add(m, x, out);
                    }
                    if let Some(b) = &b_u {
                        matvec_add(b, ctl.u, out);
                    }
                    if let Some(b) = &b_v {
                        matvec_add(b, ctl.v, out);
                    }
                    for t in &terms {
                        let factor = match t.control {
                            ControlFactor::None => 1.0,
                            ControlFactor::U(i) => ctl.u[i],
                            ControlFactor::V(i) => ctl.v[i],
                            ControlFactor::Uv(i, k) => ctl.u[i] * ctl.v[k],
                        };
                        out[t.out] += t.coef * (x[t.index] - t.shift).abs() * factor;
                    }
                })
            }
            FieldSpec::Linear { weights, offset } => {
                if weights.len() != dim_state || dim_out != 1 {
                    return Err(Error::ShapeMismatch(format!(
                        "linear functional with {} weights on dimension {dim_state}",
                        weights.len()
                    )));
                }
                let w = weights.clone();
                let off = *offset;
                let lip = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                LipschitzField::new(name, dim_state, 1, lip, f64::INFINITY, move |_, x, _, out| {
                    out[0] = off + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                })
            }
            FieldSpec::Quadratic { target, weights, lipschitz } => {
                if target.len() != dim_state || weights.len() != dim_state || dim_out != 1 {
                    return Err(Error::ShapeMismatch("quadratic needs target and weights of state length".into()));
                }
                let (r, w) = (target.clone(), weights.clone());
                LipschitzField::new(name, dim_state, 1, *lipschitz, f64::INFINITY, move |_, x, _, out| {
                    out[0] = x.iter().zip(&r).zip(&w).map(|((x, r), w)| w * (x - r) * (x - r)).sum();
                })
            }
            FieldSpec::Abs { index, shift, scale, offset } => {
                if *index >= dim_state || dim_out != 1 {
                    return Err(Error::ShapeMismatch(format!("abs index {index} on dimension {dim_state}")));
                }
                let (i, s, k, o) = (*index, *shift, *scale, *offset);
                LipschitzField::new(name, dim_state, 1, k.abs(), f64::INFINITY, move |_, x, _, out| {
                    out[0] = k * (x[i] - s).abs() + o;
                })
            }
        };
        Ok(field)
    }
}

/// Declarative description of a problem; every registry-based problem,
/// including those read from files, goes through this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemData {
    pub name: String,
    pub state_dim: usize,
    pub adversary_dim: usize,
    pub horizon: (f64, f64),
    pub n_steps: usize,
    pub u_grid: Vec<Vec<f64>>,
    pub v_grid: Vec<Vec<f64>>,
    pub f: FieldSpec,
    pub f_tilde: FieldSpec,
    pub h0: FieldSpec,
    #[serde(default)]
    pub h1: Option<FieldSpec>,
    #[serde(default)]
    pub h1_dim: Option<usize>,
    pub h_hat: FieldSpec,
    pub b_bar: Vec<f64>,
    pub b_tilde_bar: Vec<f64>,
    #[serde(default)]
    pub b_box: Option<StateBox>,
    #[serde(default)]
    pub b_tilde_box: Option<StateBox>,
    pub psi: Profile,
    pub chi: Profile,
    pub sample_box: StateBox,
    #[serde(default)]
    pub epigraph: Option<usize>,
    /// Constant Dirac incumbent, as an index into `u_grid`.
    #[serde(default)]
    pub incumbent: Option<usize>,
    /// Optional overrides of the declared Lipschitz constants by field name.
    #[serde(default)]
    pub lipschitz: Option<LipschitzOverrides>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzOverrides {
    pub f: Option<f64>,
    pub f_tilde: Option<f64>,
    pub h0: Option<f64>,
    pub h1: Option<f64>,
    pub h_hat: Option<f64>,
}

impl ProblemData {
    pub fn build(&self) -> Result<ProblemSpec> {
        let (n, m) = (self.state_dim, self.adversary_dim);
        if self.n_steps == 0 {
            return Err(Error::Invalid("n_steps must be positive".into()));
        }
        let grid_u = ControlGrid::new(self.u_grid.clone(), self.n_steps)?;
        let grid_v = ControlGrid::new(self.v_grid.clone(), self.n_steps)?;
        let ctx = BuildContext::from_grids(&grid_u, &grid_v);
        let end = BuildContext::endpoint();
        let over = self.lipschitz.clone().unwrap_or_default();
        let apply = |f: LipschitzField, l: Option<f64>| match l {
            Some(l) => {
                let b = f.bound();
                f.with_constants(l, b)
            }
            None => f,
        };
        let f = apply(self.f.build(n, n, &ctx)?, over.f);
        let f_tilde = apply(self.f_tilde.build(n + m, m, &ctx)?, over.f_tilde);
        let h0 = apply(self.h0.build(n, 1, &end)?, over.h0);
        let h1 = match &self.h1 {
            Some(h) => Some(apply(h.build(n, self.h1_dim.unwrap_or(1), &end)?, over.h1)),
            None => None,
        };
        let h_hat = apply(self.h_hat.build(n + m, 1, &end)?, over.h_hat);
        let incumbent = self.incumbent.map(|i| RelaxedControl::constant_dirac(&grid_u, i)).transpose()?;
        let spec = ProblemSpec {
            name: self.name.clone(),
            n,
            m,
            f,
            f_tilde,
            h0,
            h1,
            h_hat,
            grid_u,
            grid_v,
            b_set: self.b_box.clone().unwrap_or_else(|| StateBox::point(&self.b_bar)),
            b_tilde_set: self.b_tilde_box.clone().unwrap_or_else(|| StateBox::point(&self.b_tilde_bar)),
            b_bar: self.b_bar.clone(),
            b_tilde_bar: self.b_tilde_bar.clone(),
            horizon: self.horizon,
            psi: self.psi.clone(),
            chi: self.chi.clone(),
            sample_box: self.sample_box.clone(),
            epigraph: self.epigraph,
            incumbent,
        };
        spec.check()?;
        Ok(spec)
    }
}

fn sbox(lo: &[f64], hi: &[f64]) -> StateBox {
    StateBox::new(lo.to_vec(), hi.to_vec()).expect("static box")
}

/// Minimize the worst-case endpoint of `ẏ = |y| u v`, `y(0) = 1`,
/// `u, v ∈ {−1, 1}` on `[0, 1]`, written with an epigraph variable `α` as the
/// player-1 state and `y` as the adversary state.
pub fn abs_minimax_data(n_steps: usize) -> ProblemData {
    ProblemData {
        name: "abs_bilinear_minimax".into(),
        state_dim: 1,
        adversary_dim: 1,
        horizon: (0.0, 1.0),
        n_steps,
        u_grid: vec![vec![-1.0], vec![1.0]],
        v_grid: vec![vec![-1.0], vec![1.0]],
        f: FieldSpec::Zero,
        f_tilde: FieldSpec::AbsBilinear { index: 1, scale: 1.0 },
        h0: FieldSpec::Linear { weights: vec![1.0], offset: 0.0 },
        h1: None,
        h1_dim: None,
        h_hat: FieldSpec::Linear { weights: vec![-1.0, 1.0], offset: 0.0 },
        b_bar: vec![3.0],
        b_tilde_bar: vec![1.0],
        b_box: Some(sbox(&[-50.0], &[50.0])),
        b_tilde_box: None,
        psi: Profile::Constant(1.0),
        chi: Profile::Constant(3.0),
        sample_box: sbox(&[0.0, -3.0], &[30.0, 3.0]),
        epigraph: Some(0),
        incumbent: Some(1),
        lipschitz: None,
    }
}

pub fn abs_minimax() -> ProblemSpec {
    abs_minimax_with_steps(2000)
}

pub fn abs_minimax_with_steps(n_steps: usize) -> ProblemSpec {
    abs_minimax_data(n_steps).build().expect("built-in problem")
}

/// `ẏ = u − ½|y − ½|`, `ỹ' = 0.8 + v|ỹ − 0.4|`; both paths cross their kinks.
/// The objective `|y(1) − 0.2|` has a strict argmin at the smaller control.
pub fn kink_crossing_data(n_steps: usize) -> ProblemData {
    ProblemData {
        name: "kink_crossing".into(),
        state_dim: 1,
        adversary_dim: 1,
        horizon: (0.0, 1.0),
        n_steps,
        u_grid: vec![vec![1.0], vec![2.0]],
        v_grid: vec![vec![-0.5], vec![0.5]],
        f: FieldSpec::AbsAffine {
            a: None,
            b_u: Some(vec![vec![1.0]]),
            b_v: None,
            c: None,
            terms: vec![AbsTerm { out: 0, index: 0, shift: 0.5, coef: -0.5, control: ControlFactor::None }],
        },
        f_tilde: FieldSpec::AbsAffine {
            a: None,
            b_u: None,
            b_v: None,
            c: Some(vec![0.8]),
            terms: vec![AbsTerm { out: 0, index: 1, shift: 0.4, coef: 1.0, control: ControlFactor::V(0) }],
        },
        h0: FieldSpec::Abs { index: 0, shift: 0.2, scale: 1.0, offset: 0.0 },
        h1: None,
        h1_dim: None,
        h_hat: FieldSpec::Linear { weights: vec![0.0, 1.0], offset: -1000.0 },
        b_bar: vec![0.0],
        b_tilde_bar: vec![0.0],
        b_box: None,
        b_tilde_box: None,
        psi: Profile::Constant(1.0),
        chi: Profile::Constant(5.0),
        sample_box: sbox(&[-1.0, -1.0], &[4.0, 4.0]),
        epigraph: None,
        incumbent: Some(1),
        lipschitz: None,
    }
}

pub fn kink_crossing(n_steps: usize) -> ProblemSpec {
    kink_crossing_data(n_steps).build().expect("built-in problem")
}

/// `ẏ = 0.6(1 − |y|)` from `y(0) = −0.2` crosses zero at `t = ln(1.25)/0.6`;
/// the equality `|y(1)| = 1 − 1.25 e^{−0.6}` holds for every control.
pub fn kink_equality_data(n_steps: usize) -> ProblemData {
    let target = 1.0 - 1.25 * (-0.6f64).exp();
    ProblemData {
        name: "kink_equality".into(),
        state_dim: 1,
        adversary_dim: 1,
        horizon: (0.0, 1.0),
        n_steps,
        u_grid: vec![vec![-1.0], vec![1.0]],
        v_grid: vec![vec![-1.0], vec![1.0]],
        f: FieldSpec::AbsAffine {
            a: None,
            b_u: None,
            b_v: None,
            c: Some(vec![0.6]),
            terms: vec![AbsTerm { out: 0, index: 0, shift: 0.0, coef: -0.6, control: ControlFactor::None }],
        },
        f_tilde: FieldSpec::AbsAffine {
            a: None,
            b_u: None,
            b_v: None,
            c: None,
            terms: vec![
                AbsTerm { out: 0, index: 0, shift: 0.0, coef: 0.5, control: ControlFactor::Uv(0, 0) },
                AbsTerm { out: 0, index: 1, shift: 0.0, coef: -0.5, control: ControlFactor::None },
            ],
        },
        h0: FieldSpec::Linear { weights: vec![1.0], offset: 0.0 },
        h1: Some(FieldSpec::Abs { index: 0, shift: 0.0, scale: 1.0, offset: -target }),
        h1_dim: Some(1),
        h_hat: FieldSpec::Linear { weights: vec![0.0, 1.0], offset: -50.0 },
        b_bar: vec![-0.2],
        b_tilde_bar: vec![0.3],
        b_box: None,
        b_tilde_box: None,
        psi: Profile::Constant(1.0),
        chi: Profile::Constant(3.0),
        sample_box: sbox(&[-2.0, -2.0], &[2.0, 2.0]),
        epigraph: None,
        incumbent: Some(0),
        lipschitz: None,
    }
}

pub fn kink_equality(n_steps: usize) -> ProblemSpec {
    kink_equality_data(n_steps).build().expect("built-in problem")
}

/// Player 1: `ẏ = A y + B u` in ℝ²; adversary: `ỹ' = C ŷ + d v`. Smooth.
pub fn linear_pair_data(n_steps: usize) -> ProblemData {
    ProblemData {
        name: "linear_pair".into(),
        state_dim: 2,
        adversary_dim: 1,
        horizon: (0.0, 1.0),
        n_steps,
        u_grid: vec![vec![-1.0], vec![0.0], vec![1.0]],
        v_grid: vec![vec![-1.0], vec![1.0]],
        f: FieldSpec::Affine {
            a: LINEAR_PAIR_A.iter().map(|r| r.to_vec()).collect(),
            b_u: Some(vec![vec![1.0], vec![0.5]]),
            b_v: None,
            c: None,
        },
        f_tilde: FieldSpec::Affine {
            a: vec![LINEAR_PAIR_C.to_vec()],
            b_u: None,
            b_v: Some(vec![vec![0.4]]),
            c: None,
        },
        h0: FieldSpec::Linear { weights: vec![1.0, 0.5], offset: 0.0 },
        h1: None,
        h1_dim: None,
        h_hat: FieldSpec::Linear { weights: vec![0.0, 0.0, 1.0], offset: -1000.0 },
        b_bar: vec![0.5, -0.25],
        b_tilde_bar: vec![0.1],
        b_box: None,
        b_tilde_box: None,
        psi: Profile::Constant(1.0),
        chi: Profile::Constant(5.0),
        sample_box: sbox(&[-3.0, -3.0, -3.0], &[3.0, 3.0, 3.0]),
        epigraph: None,
        incumbent: Some(1),
        lipschitz: None,
    }
}

pub const LINEAR_PAIR_A: [[f64; 2]; 2] = [[-0.3, 0.4], [-0.4, -0.2]];
pub const LINEAR_PAIR_C: [f64; 3] = [0.2, -0.1, -0.3];

pub fn linear_pair(n_steps: usize) -> ProblemSpec {
    linear_pair_data(n_steps).build().expect("built-in problem")
}

/// Scalar `ẏ = a y` with a single dummy control.
pub fn scalar_linear(a: f64, n_steps: usize) -> ProblemSpec {
    ProblemData {
        name: "scalar_linear".into(),
        state_dim: 1,
        adversary_dim: 0,
        horizon: (0.0, 1.0),
        n_steps,
        u_grid: vec![vec![0.0]],
        v_grid: vec![vec![0.0]],
        f: FieldSpec::Affine { a: vec![vec![a]], b_u: None, b_v: None, c: None },
        f_tilde: FieldSpec::Zero,
        h0: FieldSpec::Linear { weights: vec![1.0], offset: 0.0 },
        h1: None,
        h1_dim: None,
        h_hat: FieldSpec::Linear { weights: vec![0.0], offset: -1.0 },
        b_bar: vec![1.0],
        b_tilde_bar: vec![],
        b_box: None,
        b_tilde_box: None,
        psi: Profile::Constant(a.abs()),
        chi: Profile::Constant(10.0 * a.abs().max(1.0)),
        sample_box: sbox(&[-3.0], &[3.0]),
        epigraph: None,
        incumbent: None,
        lipschitz: None,
    }
    .build()
    .expect("built-in problem")
}

/// Scalar `ẏ = y u`, `u ∈ {−1, 1}`.
pub fn bilinear_scalar(n_steps: usize) -> ProblemSpec {
    ProblemData {
        name: "bilinear_scalar".into(),
        state_dim: 1,
        adversary_dim: 0,
        horizon: (0.0, 1.0),
        n_steps,
        u_grid: vec![vec![-1.0], vec![1.0]],
        v_grid: vec![vec![0.0]],
        f: FieldSpec::AbsAffine {
            a: None,
            b_u: None,
            b_v: None,
            c: None,
            terms: vec![],
        },
        f_tilde: FieldSpec::Zero,
        h0: FieldSpec::Linear { weights: vec![1.0], offset: 0.0 },
        h1: None,
        h1_dim: None,
        h_hat: FieldSpec::Linear { weights: vec![0.0], offset: -1.0 },
        b_bar: vec![1.0],
        b_tilde_bar: vec![],
        b_box: None,
        b_tilde_box: None,
        psi: Profile::Constant(1.0),
        chi: Profile::Constant(3.0),
        sample_box: sbox(&[-3.0], &[3.0]),
        epigraph: None,
        incumbent: None,
        lipschitz: None,
    }
    .build()
    .map(|mut spec| {
        spec.f = LipschitzField::new("y*u", 1, 1, 1.0, f64::INFINITY, |_, x, c, o| o[0] = x[0] * c.u[0]);
        spec
    })
    .expect("built-in problem")
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyObjective {
    Linear(f64),
    /// `(y − r)²`.
    Quadratic(f64),
}

/// `ẏ = a y + b u + c u²` with a trivial adversary. Growth bounds hold for
/// `|a|, |b|, |c| ≤ 1`, `|u| ≤ 1.5` on `|y| ≤ 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineToy {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub u_points: Vec<f64>,
    pub n_v: usize,
    pub y0: f64,
    pub objective: ToyObjective,
    pub n_steps: usize,
}

impl AffineToy {
    pub fn spec(&self) -> ProblemSpec {
        let h0 = match self.objective {
            ToyObjective::Linear(w) => FieldSpec::Linear { weights: vec![w], offset: 0.0 },
            ToyObjective::Quadratic(r) => FieldSpec::Quadratic {
                target: vec![r],
                weights: vec![1.0],
                lipschitz: 2.0 * (3.0 + r.abs()),
            },
        };
        ProblemData {
            name: "affine_toy".into(),
            state_dim: 1,
            adversary_dim: 1,
            horizon: (0.0, 1.0),
            n_steps: self.n_steps,
            u_grid: self.u_points.iter().map(|&u| vec![u, u * u]).collect(),
            v_grid: (0..self.n_v).map(|v| vec![v as f64]).collect(),
            f: FieldSpec::Affine {
                a: vec![vec![self.a]],
                b_u: Some(vec![vec![self.b, self.c]]),
                b_v: None,
                c: None,
            },
            f_tilde: FieldSpec::Zero,
            h0,
            h1: None,
            h1_dim: None,
            h_hat: FieldSpec::Linear { weights: vec![0.0, 1.0], offset: -1.0e6 },
            b_bar: vec![self.y0],
            b_tilde_bar: vec![0.0],
            b_box: None,
            b_tilde_box: None,
            psi: Profile::Constant(self.a.abs().max(1e-12)),
            chi: Profile::Constant(8.0),
            sample_box: sbox(&[-3.0, -1.0], &[3.0, 1.0]),
            epigraph: None,
            incumbent: Some(0),
            lipschitz: None,
        }
        .build()
        .expect("toy problem")
    }
}
