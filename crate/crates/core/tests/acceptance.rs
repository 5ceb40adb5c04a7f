//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use adverse_nc::adjoint::{integrate_z, integrate_z_hat, AtomPolicy};
use adverse_nc::control::{FiberPolicy, RelaxedControl};
use adverse_nc::library::{self, AffineToy, ToyObjective, LINEAR_PAIR_A, LINEAR_PAIR_C};
use adverse_nc::mollify::{Controls, LipschitzField, Smoothed};
use adverse_nc::problem::{validate, ProblemSpec};
use adverse_nc::solver::{
    run_j_sweep, solve_perturbed, verify_conditions, Mode, NCCertificate, PerturbedProblem, SolverConfig,
};
use adverse_nc::trajectory::{proximity_report, Adversary, FieldSet};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn corpus(n_steps: usize) -> Vec<ProblemSpec> {
    vec![
        library::abs_minimax_with_steps(n_steps),
        library::kink_crossing(n_steps),
        library::kink_equality(n_steps),
        library::linear_pair(n_steps),
        library::scalar_linear(0.7, n_steps),
        library::bilinear_scalar(n_steps),
    ]
}

// ---- 1 ------------------------------------------------------------------

fn abs_minimax_value(certs: &mut Vec<NCCertificate>) -> Outcome {
    let start = Instant::now();
    let spec = library::abs_minimax();
    let cfg = SolverConfig { mode: Mode::Hyperrelaxed, j_values: vec![5, 10, 20, 40], ..Default::default() };
    let cert = match run_j_sweep(&spec, &cfg) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    // ẏ = |y|, y(0) = 1 on [0, 1]
    let oracle = 1f64.exp();
    let value = cert.value.unwrap_or(f64::NAN);
    let n_u = spec.grid_u.len();
    let mut best_match = 0.0f64;
    for atom in cert.multipliers.iter().flat_map(|m| &m.omega) {
        if let AtomPolicy::Fiber(p) = &atom.policy {
            let cells = spec.n_steps() * n_u;
            let hits = (0..spec.n_steps())
                .flat_map(|k| (0..n_u).map(move |u| (k, u)))
                .filter(|&(k, u)| p.fiber(k, u)[u] >= 1.0 - 1e-12)
                .count();
            best_match = best_match.max(hits as f64 / cells as f64);
        }
    }
    let pass = (value - oracle).abs() <= 1e-3 && cert.is_certified() && best_match >= 0.99 && secs < 60.0;
    let detail = format!(
        "value {value:.9} vs e {oracle:.9} (|Δ| {:.2e}), certified {}, copy-policy match {:.1}%, {secs:.1}s",
        (value - oracle).abs(),
        cert.is_certified(),
        100.0 * best_match
    );
    certs.push(cert);
    outcome(pass, detail)
}

// ---- 2 ------------------------------------------------------------------

fn test_fields() -> Vec<LipschitzField> {
    let scalar = |name: &str, d: usize, l: f64, f: fn(&[f64]) -> f64| {
        LipschitzField::new(name, d, 1, l, f64::INFINITY, move |_, x, _, out| out[0] = f(x))
    };
    vec![
        scalar("abs", 1, 1.0, |x| x[0].abs()),
        scalar("max2", 2, 1.0, |x| x[0].max(x[1])),
        scalar("norm3", 3, 1.0, |x| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()),
        scalar("sin_abs", 2, 10f64.sqrt(), |x| (3.0 * x[0]).sin() + x[1].abs()),
        scalar("two_kinks", 3, 6f64.sqrt(), |x| 2.0 * (x[0] - 0.3).abs() - (x[1] + x[2]).abs()),
    ]
}

fn mollification_bounds() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut cases, mut ok) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for field in test_fields() {
        let d = field.dim_state();
        let l = field.lipschitz_const();
        for _ in 0..20 {
            // points concentrated near the kinks
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.6..0.6)).collect();
            let exact = field.eval_scalar(&x);
            for j in [2u32, 5, 10, 50] {
                let sm = Smoothed::new(&field, Some(j)).expect("mollified");
                let mut val = [0.0];
                let mut jac = vec![0.0; d];
                sm.value_grad_into(0.0, &x, &Controls::NONE, &mut val, &mut jac).expect("evaluates");
                let gap = (val[0] - exact).abs() - l / j as f64;
                let slope = jac.iter().map(|g| g * g).sum::<f64>().sqrt() - l;
                worst = worst.max(gap).max(slope);
                cases += 1;
                if gap <= 1e-6 && slope <= 1e-6 {
                    ok += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ok == cases && secs < 10.0,
        format!("{ok}/{cases} cases within bounds, worst excess {worst:.2e}, {secs:.1}s"),
    )
}

// ---- 3 ------------------------------------------------------------------

fn proximity_suite() -> Outcome {
    let start = Instant::now();
    let problems = [library::abs_minimax(), library::kink_crossing(400), library::kink_equality(400)];
    let (mut total, mut ok) = (0usize, 0usize);
    let mut failures = Vec::new();
    for spec in &problems {
        let sigmas = [spec.incumbent_or_default(), RelaxedControl::uniform(&spec.grid_u)];
        let uniform = FiberPolicy::uniform(&spec.grid_u, &spec.grid_v);
        let first_v = RelaxedControl::constant_dirac(&spec.grid_v, 0).expect("admissible");
        for sigma in &sigmas {
            for adversary in [Adversary::Fiber(&uniform), Adversary::Relaxed(&first_v)] {
                for j in [5u32, 10, 20, 40] {
                    let report = proximity_report(spec, j, sigma, adversary, &spec.b_hat()).expect("report");
                    for g in &report.gaps {
                        total += 1;
                        if g.pass {
                            ok += 1;
                        } else {
                            failures.push(format!("{} j={j} {} {:.2e}>{:.2e}", spec.name, g.name, g.measured, g.bound));
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("{ok}/{total} gaps within c/j + 10·tol_int, {secs:.1}s");
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first failure {f}"));
    }
    outcome(ok == total && secs < 30.0, detail)
}

// ---- 4 ------------------------------------------------------------------

fn expm(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    (m * t).exp()
}

fn path_error(path: &adverse_nc::adjoint::AdjointPath, m: &DMatrix<f64>, spec: &ProblemSpec) -> f64 {
    let d = path.dim;
    let (t1, dt) = (spec.horizon.1, spec.dt());
    let mut worst = 0.0f64;
    for k in 0..=spec.n_steps() {
        let e = expm(m, t1 - spec.time(k));
        for (i, z) in path.node(k).iter().enumerate() {
            worst = worst.max((z - e[(i / d, i % d)]).abs());
        }
        if k < spec.n_steps() {
            let e = expm(m, t1 - spec.time(k) - 0.5 * dt);
            for (i, z) in path.mid(k).iter().enumerate() {
                worst = worst.max((z - e[(i / d, i % d)]).abs());
            }
        }
    }
    worst
}

fn adjoint_oracle() -> Outcome {
    let spec = library::linear_pair(2000);
    let fields = FieldSet::new(&spec, Some(5)).expect("fields");
    let sigma = spec.incumbent_or_default();
    let traj = fields.player(&spec, &sigma, &spec.b_bar).expect("player");
    let z = integrate_z(&spec, &fields, &sigma, &traj).expect("Z");
    let a = DMatrix::from_fn(2, 2, |i, j| LINEAR_PAIR_A[i][j]);
    let z_err = path_error(&z, &a, &spec);

    let uniform = FiberPolicy::uniform(&spec.grid_u, &spec.grid_v);
    let adv = Adversary::Fiber(&uniform);
    let joint = fields.joint(&spec, &adv.compose(&sigma).expect("compose"), &spec.b_hat()).expect("joint");
    let zh = integrate_z_hat(&spec, &fields, &sigma, adv, &joint).expect("Ẑ");
    let m = DMatrix::from_fn(3, 3, |i, j| if i < 2 { if j < 2 { LINEAR_PAIR_A[i][j] } else { 0.0 } } else { LINEAR_PAIR_C[j] });
    let zh_err = path_error(&zh, &m, &spec);

    // sup-norm bound 1 + T·L·e^T across the corpus
    let mut violations = 0usize;
    let mut checks = 0usize;
    let mut tightest = 0.0f64;
    for spec in corpus(400) {
        let t = spec.horizon.1 - spec.horizon.0;
        let bound = |l: f64| 1.0 + t * l * t.exp();
        let uniform = FiberPolicy::uniform(&spec.grid_u, &spec.grid_v);
        for j in [5u32, 40] {
            let fields = FieldSet::new(&spec, Some(j)).expect("fields");
            for sigma in [spec.incumbent_or_default(), RelaxedControl::uniform(&spec.grid_u)] {
                let traj = fields.player(&spec, &sigma, &spec.b_bar).expect("player");
                let z = integrate_z(&spec, &fields, &sigma, &traj).expect("Z");
                let adv = Adversary::Fiber(&uniform);
                let joint = fields.joint(&spec, &adv.compose(&sigma).expect("compose"), &spec.b_hat()).expect("joint");
                let zh = integrate_z_hat(&spec, &fields, &sigma, adv, &joint).expect("Ẑ");
                for (norm, l) in [(z.sup_norm(), spec.f.lipschitz_const()), (zh.sup_norm(), spec.joint_lipschitz())] {
                    checks += 1;
                    tightest = tightest.max(norm / bound(l));
                    if norm > bound(l) {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(
        z_err <= 1e-6 && zh_err <= 1e-6 && violations == 0,
        format!(
            "|Z − e^(A(1−t))| {z_err:.2e}, |Ẑ − e^(M(1−t))| {zh_err:.2e}, Gronwall {}/{checks} held (max ratio {tightest:.3})",
            checks - violations
        ),
    )
}

// ---- 5 ------------------------------------------------------------------

/// One RK4 step of `ẏ = a y + g` with constant `g` is `y ↦ R y + S g`.
fn rk4_coefficients(a: f64, dt: f64) -> (f64, f64) {
    let z = a * dt;
    let r = 1.0 + z + z * z / 2.0 + z * z * z / 6.0 + z * z * z * z / 24.0;
    let s = dt * (1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0);
    (r, s)
}

fn dirac_endpoints(toy: &AffineToy) -> Vec<f64> {
    let dt = 1.0 / toy.n_steps as f64;
    let (r, s) = rk4_coefficients(toy.a, dt);
    let g: Vec<f64> = toy.u_points.iter().map(|u| toy.b * u + toy.c * u * u).collect();
    let mut ends = vec![toy.y0];
    for _ in 0..toy.n_steps {
        ends = ends.iter().flat_map(|y| g.iter().map(move |gi| r * y + s * gi)).collect();
    }
    ends
}

fn toy_cost(objective: &ToyObjective, y: f64) -> f64 {
    match objective {
        ToyObjective::Linear(w) => w * y,
        ToyObjective::Quadratic(r) => (y - r) * (y - r),
    }
}

fn random_toy(rng: &mut ChaCha8Rng, i: usize) -> AffineToy {
    let n_u = rng.gen_range(2..=3);
    let mut u_points: Vec<f64> = Vec::new();
    while u_points.len() < n_u {
        let u: f64 = rng.gen_range(-1.5..1.5);
        if u_points.iter().all(|p| (p - u).abs() > 0.2) {
            u_points.push(u);
        }
    }
    let mut toy = AffineToy {
        a: rng.gen_range(-1.0..1.0),
        b: rng.gen_range(-1.0..1.0),
        c: rng.gen_range(-1.0..1.0),
        u_points,
        n_v: rng.gen_range(1..=2),
        y0: rng.gen_range(-1.0..1.0),
        objective: ToyObjective::Linear(0.0),
        n_steps: 8,
    };
    toy.objective = if i % 2 == 0 {
        let w: f64 = rng.gen_range(0.5..2.0);
        ToyObjective::Linear(if rng.gen_bool(0.5) { w } else { -w })
    } else {
        // a target outside the reachable interval
        let ends = dirac_endpoints(&toy);
        let (lo, hi) = ends.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(*y), b.max(*y)));
        ToyObjective::Quadratic(if rng.gen_bool(0.5) { hi + 0.3 } else { lo - 0.3 })
    };
    toy
}

fn brute_force(certs: &mut Vec<NCCertificate>) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ok, mut worst) = (0usize, 0.0f64);
    let mut notes = Vec::new();
    for i in 0..10 {
        let toy = random_toy(&mut rng, i);
        let oracle = dirac_endpoints(&toy).iter().map(|y| toy_cost(&toy.objective, *y)).fold(f64::INFINITY, f64::min);
        let spec = toy.spec();
        if !validate(&spec, 500, i as u64).passed() {
            notes.push(format!("toy {i} fails validation"));
            continue;
        }
        let cfg = SolverConfig { seed: i as u64, ..Default::default() };
        match run_j_sweep(&spec, &cfg) {
            Ok(cert) => {
                let err = (cert.value.unwrap_or(f64::NAN) - oracle).abs();
                worst = worst.max(err);
                if err <= 1e-6 {
                    ok += 1;
                } else {
                    notes.push(format!("toy {i}: {err:.2e}"));
                }
                certs.push(cert);
            }
            Err(e) => notes.push(format!("toy {i}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("{ok}/10 toys within 1e-6 of enumeration (worst {worst:.2e}), {secs:.1}s");
    if !notes.is_empty() {
        detail.push_str(&format!("; {}", notes.join(", ")));
    }
    outcome(ok == 10 && secs < 20.0, detail)
}

// ---- 6 ------------------------------------------------------------------

fn soundness_and_sensitivity(certs: &[NCCertificate]) -> Outcome {
    let mut checked = 0usize;
    let mut bad = Vec::new();
    for c in certs.iter().filter(|c| c.is_certified()) {
        let r = c.residuals.expect("certified certificate has residuals");
        checked += 1;
        if r.min_condition.value > 1e-4 * r.sup_h || r.fiber_condition.value > 1e-6 {
            bad.push(c.problem.clone());
        }
    }

    // strict argmin problem: move 10% of the mass off the argmin
    let spec = library::kink_crossing(400);
    let cfg = SolverConfig::default();
    let pp = PerturbedProblem::new(&spec, 40).expect("perturbed problem");
    let sol = solve_perturbed(&pp, &cfg, None).expect("solves");
    let base = verify_conditions(&pp, &cfg, &sol, &sol.multipliers).expect("residuals");
    let chosen = sol.sigma.argmax_rows();
    let other: Vec<usize> = chosen.iter().map(|&u| 1 - u).collect();
    let off = RelaxedControl::dirac(&spec.grid_u, &other).expect("admissible");
    let mut perturbed = sol.clone();
    perturbed.sigma = sol.sigma.mix(&off, 0.1).expect("mix");
    let after = verify_conditions(&pp, &cfg, &perturbed, &sol.multipliers).expect("residuals");
    let ratio = after.min_condition.value / after.min_condition.tol;
    let pass = bad.is_empty() && checked > 0 && base.min_condition.pass && ratio > 10.0;
    outcome(
        pass,
        format!(
            "{}/{checked} certified solutions within tolerance; 10% perturbation: residual {:.2e} = {ratio:.0}× tol (unperturbed {:.2e})",
            checked - bad.len(),
            after.min_condition.value,
            base.min_condition.value
        ),
    )
}

// ---- 7 ------------------------------------------------------------------

fn convergence_diagnostics(certs: &mut Vec<NCCertificate>) -> Outcome {
    let mut flagged = Vec::new();
    let mut total = 0;
    let mut worst_growth = f64::NEG_INFINITY;
    for spec in corpus(400).into_iter().skip(1) {
        for mode in [Mode::Hyperrelaxed, Mode::Relaxed] {
            let cfg = SolverConfig { mode, ..Default::default() };
            let cert = run_j_sweep(&spec, &cfg).expect("sweep");
            total += 1;
            for incs in [&cert.cauchy.multiplier_increments, &cert.cauchy.z_increments, &cert.cauchy.z_hat_increments] {
                for w in incs.windows(2).skip(1) {
                    worst_growth = worst_growth.max(w[1] - w[0]);
                }
            }
            if cert.cauchy.non_cauchy {
                flagged.push(format!("{} {mode:?}", spec.name));
            }
            certs.push(cert);
        }
    }
    // the headline sweep from criterion 1
    if let Some(c) = certs.first() {
        total += 1;
        if c.cauchy.non_cauchy {
            flagged.push(c.problem.clone());
        }
    }
    outcome(
        flagged.is_empty(),
        format!(
            "NonCauchy flagged on {}/{total} sweeps{}; largest increment growth {worst_growth:.2e}",
            flagged.len(),
            if flagged.is_empty() { String::new() } else { format!(" ({})", flagged.join(", ")) }
        ),
    )
}

// ---- 8 ------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut same = true;
    let mut bytes = 0;
    for spec in [library::abs_minimax_with_steps(400), library::kink_equality(200)] {
        let cfg = SolverConfig::default();
        let a = run_j_sweep(&spec, &cfg).expect("sweep").to_json();
        let b = run_j_sweep(&spec, &cfg).expect("sweep").to_json();
        same &= a == b;
        bytes += a.len();
    }
    outcome(same, format!("two runs byte-identical: {same} ({bytes} bytes compared)"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut certs = Vec::new();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("1 abs-minimax value and certificate", abs_minimax_value(&mut certs)));
    results.push(("2 mollification bounds", mollification_bounds()));
    results.push(("3 proximity gaps", proximity_suite()));
    results.push(("4 adjoint oracle and Gronwall bound", adjoint_oracle()));
    results.push(("5 brute-force equivalence", brute_force(&mut certs)));
    let convergence = convergence_diagnostics(&mut certs);
    results.push(("6 condition soundness and sensitivity", soundness_and_sensitivity(&certs)));
    results.push(("7 convergence diagnostics", convergence));
    results.push(("8 determinism", determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
