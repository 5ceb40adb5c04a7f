//! Batch front end: problem ingestion, validation, the j-sweep and artifact
//! output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adverse_nc::library::ProblemData;
use adverse_nc::problem::{normalize_time, validate, ProblemSpec, ValidationReport};
use adverse_nc::solver::{final_trajectory, run_j_sweep, CertificateStatus, Mode, NCCertificate, SolverConfig};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const EXIT_CERTIFIED: i32 = 0;
pub const EXIT_FLAGGED_REPORT: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub fw: f64,
    pub exchange: f64,
    pub fiber: f64,
    pub min_condition: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self { fw: d.fw_tol, exchange: d.tol_exchange, fiber: d.tol_fiber, min_condition: d.min_condition_tol }
    }
}

/// Run settings; the config file holds any subset of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub j_sequence: Vec<u32>,
    /// Overrides the step count of the problem file.
    pub n_steps: Option<usize>,
    pub tolerances: Tolerances,
    pub seed: u64,
    pub out: PathBuf,
    pub validation_samples: usize,
    pub max_atoms: usize,
    pub penalty_rounds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            mode: d.mode,
            j_sequence: d.j_values,
            n_steps: None,
            tolerances: Tolerances::default(),
            seed: 0,
            out: PathBuf::from("out"),
            validation_samples: 10_000,
            max_atoms: d.max_atoms,
            penalty_rounds: d.penalty_rounds,
        }
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub j_sequence: Option<Vec<u32>>,
    pub n_steps: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(m) = overrides.mode {
            cfg.mode = m;
        }
        if let Some(j) = &overrides.j_sequence {
            cfg.j_sequence = j.clone();
        }
        if let Some(n) = overrides.n_steps {
            cfg.n_steps = Some(n);
        }
        if let Some(t) = overrides.tol {
            cfg.tolerances.fw = t;
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.j_sequence.is_empty() {
            bail!("j_sequence is empty");
        }
        if self.j_sequence[0] == 0 || self.j_sequence.windows(2).any(|w| w[1] <= w[0]) {
            bail!("j_sequence {:?} must be positive and strictly increasing", self.j_sequence);
        }
        if let Some(n) = self.n_steps {
            if n < 10 {
                bail!("n_steps = {n} is below the minimum of 10");
            }
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            mode: self.mode,
            j_values: self.j_sequence.clone(),
            fw_tol: self.tolerances.fw,
            tol_exchange: self.tolerances.exchange,
            tol_fiber: self.tolerances.fiber,
            min_condition_tol: self.tolerances.min_condition,
            max_atoms: self.max_atoms,
            penalty_rounds: self.penalty_rounds,
            seed: self.seed,
            ..SolverConfig::default()
        }
    }
}

/// Parses and builds a problem file; unknown registry names surface in the
/// error message.
pub fn load_problem(path: &Path, n_steps: Option<usize>) -> Result<ProblemSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading problem {}", path.display()))?;
    let mut data: ProblemData =
        serde_json::from_str(&text).with_context(|| format!("parsing problem {}", path.display()))?;
    if let Some(n) = n_steps {
        data.n_steps = n;
    }
    if data.n_steps < 10 {
        bail!("n_steps = {} is below the minimum of 10", data.n_steps);
    }
    data.build().with_context(|| format!("building problem {}", path.display()))
}

#[derive(Debug, Serialize)]
struct ValidationArtifact<'a> {
    problem: &'a str,
    time_rescaled: bool,
    report: &'a ValidationReport,
}

/// What `run` did; `code` is the process exit status.
#[derive(Debug)]
pub struct RunOutcome {
    pub code: i32,
    pub message: String,
    pub certificate: Option<NCCertificate>,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Ingest, validate, normalize, solve, and write artifacts into `cfg.out`.
/// Parse failures leave the output directory untouched.
pub fn run(problem: &Path, cfg: &RunConfig) -> RunOutcome {
    let spec = match load_problem(problem, cfg.n_steps) {
        Ok(s) => s,
        Err(e) => return RunOutcome { code: EXIT_PARSE, message: format!("{e:#}"), certificate: None },
    };
    match solve_and_write(&spec, cfg) {
        Ok(o) => o,
        Err(e) => RunOutcome { code: EXIT_SOLVER, message: format!("{e:#}"), certificate: None },
    }
}

fn solve_and_write(spec: &ProblemSpec, cfg: &RunConfig) -> Result<RunOutcome> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let report = validate(spec, cfg.validation_samples, cfg.seed);
    let (normalized, rescaling) = normalize_time(spec);
    let artifact = ValidationArtifact { problem: &spec.name, time_rescaled: !rescaling.is_identity(), report: &report };
    write(&cfg.out, "validation.json", &serde_json::to_string_pretty(&artifact)?)?;
    if !report.passed() {
        let failed: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| e.status == adverse_nc::problem::CheckStatus::Fail)
            .map(|e| e.hypothesis.as_str())
            .collect();
        return Ok(RunOutcome {
            code: EXIT_VALIDATION,
            message: format!("validation failed: {}", failed.join(", ")),
            certificate: None,
        });
    }

    let cert = run_j_sweep(&normalized, &cfg.solver())?;
    write(&cfg.out, "certificate.json", &cert.to_json())?;
    for rec in &cert.j_history {
        write(&cfg.out, &format!("certificate_j{:03}.json", rec.j), &serde_json::to_string_pretty(rec)?)?;
    }
    write(&cfg.out, "convergence.csv", &cert.convergence_csv())?;
    if let (Some(sigma), Some(b)) = (&cert.sigma_bar, &cert.initial_state) {
        let traj = final_trajectory(&normalized, sigma, b)?;
        write(&cfg.out, "trajectory.csv", &traj.to_csv())?;
    }
    let (code, message) = match &cert.status {
        CertificateStatus::Certified => (
            EXIT_CERTIFIED,
            format!("certified: value {}", cert.value.map_or("n/a".into(), |v| format!("{v:.9}"))),
        ),
        CertificateStatus::Flagged { reasons } => (EXIT_SOLVER, format!("flagged: {}", reasons.join("; "))),
    };
    Ok(RunOutcome { code, message, certificate: Some(cert) })
}

/// Human-readable summary of a certificate file and the exit status.
pub fn report(path: &Path) -> (i32, String) {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return (EXIT_PARSE, format!("reading {}: {e}", path.display())),
    };
    let cert = match NCCertificate::from_json(&text) {
        Ok(c) => c,
        Err(e) => return (EXIT_PARSE, format!("parsing {}: {e}", path.display())),
    };
    summarize(&cert)
}

pub fn summarize(cert: &NCCertificate) -> (i32, String) {
    let mut s = String::new();
    let _ = writeln!(s, "problem    {}", cert.problem);
    let _ = writeln!(s, "mode       {:?}", cert.mode);
    let _ = writeln!(s, "steps      {}", cert.n_steps);
    let _ = writeln!(s, "j          {:?}", cert.j_values);
    if cert.j_history.is_empty() {
        let _ = writeln!(s, "no sweep data");
        return (EXIT_FLAGGED_REPORT, s);
    }
    if let Some(v) = cert.value {
        let _ = writeln!(s, "value      {v:.9}");
    }
    if let Some(a) = cert.alpha {
        let _ = writeln!(s, "alpha      {a:.9}");
    }
    if let Some(m) = &cert.multipliers {
        let _ = writeln!(s, "l0         {:.6e}", m.l0);
        let _ = writeln!(s, "l1         {:?}", m.l1);
        let _ = writeln!(s, "omega      {} atom(s), mass {:.6e}", m.omega.len(), m.omega_mass());
        for (i, a) in m.omega.iter().enumerate() {
            let _ = writeln!(s, "  atom {i}   weight {:.6e}", a.weight);
        }
    }
    if let Some(r) = &cert.residuals {
        let _ = writeln!(s, "residuals  (sup|H| = {:.3e})", r.sup_h);
        for (name, x) in r.entries() {
            let mark = if x.pass { "  " } else { "!!" };
            let _ = writeln!(s, "{mark} {name:<18} {:.3e}  tol {:.3e}", x.value, x.tol);
        }
    }
    let c = &cert.cauchy;
    let _ = writeln!(s, "cauchy     multiplier increments {:?}", c.multiplier_increments);
    let _ = writeln!(s, "           Z increments {:?}", c.z_increments);
    let _ = writeln!(s, "           Ẑ increments {:?}", c.z_hat_increments);
    let _ = writeln!(s, "           non-Cauchy {}", c.non_cauchy);
    for rec in cert.j_history.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(s, "!! j = {} failed: {}", rec.j, rec.error.as_deref().unwrap_or(""));
    }
    match &cert.status {
        CertificateStatus::Certified => {
            let _ = writeln!(s, "status     certified");
            (EXIT_CERTIFIED, s)
        }
        CertificateStatus::Flagged { reasons } => {
            let _ = writeln!(s, "status     flagged");
            for r in reasons {
                let _ = writeln!(s, "!! {r}");
            }
            (EXIT_FLAGGED_REPORT, s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"mode":"relaxed","j_sequence":[2,4],"seed":9,"tolerances":{"fw":1e-3}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!((cfg.mode, cfg.j_sequence.clone(), cfg.seed), (Mode::Relaxed, vec![2, 4], 9));
        assert_eq!(cfg.tolerances.fw, 1e-3);
        assert_eq!(cfg.tolerances.fiber, Tolerances::default().fiber);

        let flags = Overrides { mode: Some(Mode::Hyperrelaxed), tol: Some(1e-8), seed: Some(1), ..Default::default() };
        let cfg = RunConfig::load(Some(&path), &flags).unwrap();
        assert_eq!((cfg.mode, cfg.seed), (Mode::Hyperrelaxed, 1));
        assert_eq!(cfg.solver().fw_tol, 1e-8);
        assert_eq!(cfg.solver().j_values, vec![2, 4]);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let bad = |o: Overrides| RunConfig::load(None, &o).is_err();
        assert!(bad(Overrides { j_sequence: Some(vec![]), ..Default::default() }));
        assert!(bad(Overrides { j_sequence: Some(vec![3, 3]), ..Default::default() }));
        assert!(bad(Overrides { n_steps: Some(9), ..Default::default() }));
        assert!(!bad(Overrides { n_steps: Some(10), ..Default::default() }));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"warp":1}"#).unwrap();
        let err = RunConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("warp"));
    }
}
