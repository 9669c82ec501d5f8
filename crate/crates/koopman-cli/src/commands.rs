//! Implementations of the five subcommands. Each returns the lines it wants
//! printed on success so `main` owns all terminal output.

use crate::config::ExperimentConfig;
use koopman::basis::{Basis, BasisFamily, BasisSpec};
use koopman::edmd::{
    extract_bilinear, extract_linear, extract_nonlinear, fit_koopman, KoopmanMatrix,
};
use koopman::error::{Error, Result};
use koopman::io;
use koopman::model::Model;
use koopman::mpc::{
    block_m_reference, run_closed_loop, Controller, KbmpcController, KmpcController,
    KnmpcController, ReferenceTrajectory,
};
use koopman::plant::{collect_snapshots, split_validation, SnapshotDataset};
use koopman::theory::{
    check_bilinear, check_linear, parse_field_text, PolyControlAffineField, Polynomial,
    RealizationCertificate, Verdict,
};
use std::fs;
use std::path::{Path, PathBuf};

/// Validation data uses a different stream than training so held-out
/// episodes never coincide with the fit set under the same master seed.
const VALIDATION_SEED_OFFSET: u64 = 1;
/// Closed-loop runs likewise get their own stream.
const CONTROL_SEED_OFFSET: u64 = 2;

fn model_file_name(family: BasisFamily, rho: u32) -> String {
    format!("model-{}-rho{}.txt", family.name(), rho)
}

fn default_data_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("snapshots.csv")
}

fn load_dataset(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
) -> Result<(SnapshotDataset, koopman::plant::ArmParameters)> {
    let path = data
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_data_path(cfg));
    io::read_snapshots(&path)
}

/// `collect`: simulate the arm under random excitation and persist the
/// snapshot dataset.
pub fn collect(cfg: &ExperimentConfig, count: Option<usize>) -> Result<Vec<String>> {
    let params = cfg.arm_parameters();
    let excitation = cfg.excitation();
    let count = count.unwrap_or(cfg.collect.count);
    let dataset = collect_snapshots(&params, &excitation, count, cfg.collect.ts, cfg.seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = default_data_path(cfg);
    io::write_snapshots(&path, &dataset, &params)?;
    Ok(vec![format!(
        "wrote {} ({} rows, ts={}, seed={})",
        path.display(),
        dataset.len(),
        dataset.ts,
        dataset.seed
    )])
}

fn fit_one(
    dataset: &SnapshotDataset,
    cfg: &ExperimentConfig,
    family: BasisFamily,
    rho: u32,
) -> Result<(Model, KoopmanMatrix)> {
    let n = dataset.snapshots[0].p.len();
    let m = dataset.snapshots[0].u.len();
    let basis = Basis::new(BasisSpec::new(family, n, m, rho)?)?;
    let fit = fit_koopman(dataset, &basis, cfg.ridge()?)?;
    let model = match family {
        BasisFamily::Linear => Model::Linear(extract_linear(&fit)?),
        BasisFamily::Bilinear => Model::Bilinear(extract_bilinear(&fit)?),
        BasisFamily::Nonlinear => Model::Nonlinear(extract_nonlinear(&fit)?),
    };
    Ok((model, fit))
}

/// `fit`: identify one model (when `--family` is given) or the configured
/// sweep, writing each model file atomically.
pub fn fit(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    family: Option<BasisFamily>,
    rho: Option<u32>,
) -> Result<Vec<String>> {
    let (dataset, _) = load_dataset(cfg, data)?;
    let targets: Vec<(BasisFamily, u32)> = match (family, rho) {
        (Some(f), Some(r)) => vec![(f, r)],
        (Some(f), None) => cfg
            .sweep()
            .into_iter()
            .filter(|(sf, _)| *sf == f)
            .collect(),
        (None, Some(_)) => {
            return Err(Error::Invalid("--rho requires --family".into()));
        }
        (None, None) => cfg.sweep(),
    };
    if targets.is_empty() {
        return Err(Error::Invalid("no models requested".into()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut lines = Vec::new();
    for (f, r) in targets {
        let (model, _) = fit_one(&dataset, cfg, f, r)?;
        let path = cfg.out_dir.join(model_file_name(f, r));
        io::write_model(&path, &model)?;
        lines.push(format!(
            "wrote {} (family={}, rho={}, M={})",
            path.display(),
            f.name(),
            r,
            model.dim()
        ));
    }
    Ok(lines)
}

/// `eval`: fit the configured sweep and score every model on held-out
/// episodes, writing the error report CSV (plus the model files).
pub fn eval(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<String>> {
    let (dataset, _) = load_dataset(cfg, data)?;
    let (training, episodes) = split_validation(
        &dataset,
        cfg.eval.episodes,
        cfg.eval.horizon,
        cfg.seed.wrapping_add(VALIDATION_SEED_OFFSET),
    )?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (family, rho) in cfg.sweep() {
        let (model, _) = fit_one(&training, cfg, family, rho)?;
        io::write_model(&cfg.out_dir.join(model_file_name(family, rho)), &model)?;
        // A model whose open-loop rollout leaves the space of finite values
        // has unbounded prediction error; record it as such rather than
        // aborting the rest of the sweep.
        let (report, note) = match koopman::model::prediction_error(&model, &episodes) {
            Ok(r) => (Some(r), String::new()),
            Err(Error::Diverged { step }) => {
                (None, format!(" (rollout diverged at step {step})"))
            }
            Err(e) => return Err(e),
        };
        let (raw, norm, one_raw, one_norm) = match &report {
            Some(r) => (
                r.raw_mean_error,
                r.normalized_error,
                r.one_step_raw,
                r.one_step_normalized,
            ),
            None => (
                f64::INFINITY,
                f64::INFINITY,
                f64::INFINITY,
                f64::INFINITY,
            ),
        };
        lines.push(format!(
            "{}-rho{}: M={}, normalized_error={:.6}, one_step={:.6}{}",
            family.name(),
            rho,
            model.dim(),
            norm,
            one_norm,
            note
        ));
        rows.push(io::ErrorRow {
            model: format!("{}-rho{}", family.name(), rho),
            family,
            rho,
            m_dim: model.dim(),
            raw_error: raw,
            normalized_error: norm,
            one_step_raw: one_raw,
            one_step_normalized: one_norm,
        });
    }
    let path = cfg.out_dir.join("errors.csv");
    io::write_error_report(&path, &rows)?;
    lines.push(format!("wrote {}", path.display()));
    Ok(lines)
}

fn load_reference(
    cfg: &ExperimentConfig,
    reference: Option<&Path>,
    ts: f64,
) -> Result<(ReferenceTrajectory, bool)> {
    match reference {
        Some(path) => Ok((io::read_reference(path)?, false)),
        None => {
            let traj = block_m_reference(
                cfg.reference.scale,
                (cfg.reference.center[0], cfg.reference.center[1]),
                cfg.reference.duration,
                ts,
            )?;
            Ok((traj, true))
        }
    }
}

/// `control`: run one controller against the simulated arm over the
/// reference trajectory and persist the closed-loop log.
pub fn control(
    cfg: &ExperimentConfig,
    name: &str,
    model_path: Option<&Path>,
    reference: Option<&Path>,
) -> Result<Vec<String>> {
    let family = match name {
        "kmpc" => BasisFamily::Linear,
        "kbmpc" => BasisFamily::Bilinear,
        "knmpc" => BasisFamily::Nonlinear,
        other => {
            return Err(Error::Invalid(format!(
                "unknown controller {other:?} (expected kmpc, kbmpc or knmpc)"
            )))
        }
    };
    let path = model_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(model_file_name(family, cfg.mpc.rho)));
    let model = io::read_model(&path)?;
    let mpc_cfg = cfg.mpc_config(model.ts());
    let mut controller: Box<dyn Controller> = match (name, model) {
        ("kmpc", Model::Linear(m)) => Box::new(KmpcController::new(m, mpc_cfg)?),
        ("kbmpc", Model::Bilinear(m)) => Box::new(KbmpcController::new(m, mpc_cfg)?),
        ("knmpc", Model::Nonlinear(m)) => Box::new(KnmpcController::new(m, mpc_cfg)?),
        (_, model) => {
            return Err(Error::WrongFamily {
                expected: family.name(),
                actual: model.family().name(),
            })
        }
    };
    let (traj, generated) = load_reference(cfg, reference, controller.ts())?;
    let params = cfg.arm_parameters();
    let log = run_closed_loop(
        &params,
        controller.as_mut(),
        &traj,
        cfg.seed.wrapping_add(CONTROL_SEED_OFFSET),
    )?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut lines = Vec::new();
    if generated {
        let ref_path = cfg.out_dir.join("reference.csv");
        io::write_reference(&ref_path, &traj)?;
        lines.push(format!("wrote {}", ref_path.display()));
    }
    let log_path = cfg.out_dir.join(format!("control-{name}.csv"));
    io::write_control_log(&log_path, &log)?;
    lines.push(format!(
        "wrote {} ({} steps, mean_tracking_error={:.6}, mean_solve_time={:.6}s)",
        log_path.display(),
        log.steps.len(),
        log.mean_tracking_error,
        log.mean_solve_time
    ));
    Ok(lines)
}

fn poly(n: usize, terms: &[(&[u32], f64)]) -> Polynomial {
    let owned: Vec<(Vec<u32>, f64)> = terms.iter().map(|(e, c)| (e.to_vec(), *c)).collect();
    Polynomial::from_terms(n, &owned).expect("fixture polynomial")
}

/// Built-in vector fields for `theory`, selectable by name.
fn builtin_field(name: &str) -> Option<PolyControlAffineField> {
    let field = match name {
        // dx1 = -0.7 x1 + 0.2 x2 + 1.3 u, dx2 = -0.5 x2 + 0.4 u
        "linear" => PolyControlAffineField::new(
            vec![
                poly(2, &[(&[1, 0], -0.7), (&[0, 1], 0.2)]),
                poly(2, &[(&[0, 1], -0.5)]),
            ],
            vec![vec![Polynomial::constant(2, 1.3), Polynomial::constant(2, 0.4)]],
        ),
        // dx = -x + x u: bilinear but not linear in any monomial dictionary.
        "bilinear" => PolyControlAffineField::new(
            vec![poly(1, &[(&[1], -1.0)])],
            vec![vec![poly(1, &[(&[1], 1.0)])]],
        ),
        // dx = x^2: escapes every finite monomial dictionary.
        "quadratic" => PolyControlAffineField::new(vec![poly(1, &[(&[2], 1.0)])], vec![]),
        // Duffing oscillator with a force input on the velocity equation.
        "duffing" => PolyControlAffineField::new(
            vec![
                poly(2, &[(&[0, 1], 1.0)]),
                poly(2, &[(&[1, 0], -1.0), (&[3, 0], -1.0)]),
            ],
            vec![vec![Polynomial::zero(2), Polynomial::constant(2, 1.0)]],
        ),
        _ => return None,
    };
    Some(field.expect("fixture field"))
}

/// Parse a field file: the term-per-line format of
/// [`koopman::theory::parse_field_text`] plus one required `dims <n> <m>`
/// line declaring the state and input dimensions.
fn parse_field_file(text: &str, path: &Path) -> Result<PolyControlAffineField> {
    let mut dims: Option<(usize, usize)> = None;
    let mut body = String::new();
    for (idx, line) in text.lines().enumerate() {
        let stripped = line.split('#').next().unwrap_or("").trim();
        if let Some(rest) = stripped.strip_prefix("dims") {
            if dims.is_some() {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: idx + 1,
                    msg: "duplicate dims line".into(),
                });
            }
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let parsed = (parts.len() == 2)
                .then(|| {
                    Some((
                        parts[0].parse::<usize>().ok()?,
                        parts[1].parse::<usize>().ok()?,
                    ))
                })
                .flatten();
            match parsed {
                Some(d) => dims = Some(d),
                None => {
                    return Err(Error::Parse {
                        file: path.display().to_string(),
                        line: idx + 1,
                        msg: format!("expected `dims <n> <m>`, found {stripped:?}"),
                    })
                }
            }
            // Keep line numbering aligned for errors in the term lines.
            body.push('\n');
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let (n, m) = dims.ok_or_else(|| Error::Parse {
        file: path.display().to_string(),
        line: 1,
        msg: "field file needs a `dims <n> <m>` line".into(),
    })?;
    parse_field_text(&body, n, m).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            file: path.display().to_string(),
            line,
            msg,
        },
        other => other,
    })
}

/// Decide realizability of `field` at degree `rho`: Linear beats Bilinear
/// when both hold; the returned certificate carries the winning coefficients
/// or, for Neither, the monomials whose Lie derivatives escape.
pub fn classify(field: &PolyControlAffineField, rho: u32) -> Result<RealizationCertificate> {
    let linear = check_linear(field, rho)?;
    if linear.verdict == Verdict::Linear {
        return Ok(linear);
    }
    check_bilinear(field, rho)
}

/// `theory`: run the realizability check on a named fixture or a field file
/// and persist the certificate.
pub fn theory(cfg: &ExperimentConfig, system: &str, rho: u32) -> Result<Vec<String>> {
    let (field, label) = match builtin_field(system) {
        Some(f) => (f, system.to_string()),
        None => {
            let path = Path::new(system);
            if !path.exists() {
                return Err(Error::Invalid(format!(
                    "unknown system {system:?}: not a built-in fixture \
                     (linear, bilinear, quadratic, duffing) and no such file"
                )));
            }
            let text = fs::read_to_string(path)?;
            let field = parse_field_file(&text, path)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "field".into());
            (field, stem)
        }
    };
    let cert = classify(&field, rho)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("certificate-{label}-rho{rho}.txt"));
    io::write_certificate(&path, &cert)?;
    let mut lines = vec![format!(
        "verdict {} (rho={}, dictionary size {})",
        cert.verdict,
        cert.rho,
        cert.dictionary.len()
    )];
    if cert.residual_monomials.is_empty() {
        lines.push("all Lie derivatives stay in the dictionary span".into());
    } else {
        let shown: Vec<String> = cert
            .residual_monomials
            .iter()
            .map(|m| m.to_string())
            .collect();
        lines.push(format!("residual monomials: {}", shown.join(", ")));
    }
    lines.push(format!("wrote {}", path.display()));
    Ok(lines)
}
