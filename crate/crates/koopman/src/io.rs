//! Text persistence for every artifact the toolkit produces.
//!
//! All files are plain text: CSV for tabular data, a line-oriented
//! `key value` format for models and certificates, and `key = value`
//! sidecars for dataset metadata. Floats are printed with 17 significant
//! digits (`{:.16e}`), which round-trips every finite `f64` bit-exactly.
//! Writes go through a temporary file in the same directory followed by a
//! rename, so readers never observe partial files.

use crate::basis::{Basis, BasisFamily, BasisSpec, MultiIndex, ORDERING_VERSION};
use crate::error::{Error, Result};
use crate::model::{Model, ModelBilinear, ModelLinear, ModelNonlinear};
use crate::mpc::{ControlLog, ControlStep, ReferenceTrajectory};
use crate::plant::{ArmParameters, Snapshot, SnapshotDataset};
use crate::theory::{RealizationCertificate, RealizationCoefficients, Verdict};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Print a float with 17 significant digits; `parse::<f64>()` of the result
/// recovers the exact bits of any finite input.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `contents` to `path` atomically (temp file + rename in the same
/// directory).
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("path {} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file_label(path),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("bad float for {field}: {raw:?}")))
}

fn parse_usize(path: &Path, line: usize, field: &str, raw: &str) -> Result<usize> {
    raw.trim()
        .parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("bad integer for {field}: {raw:?}")))
}

/// Sidecar path for a snapshot CSV: the same file with `.meta` appended.
pub fn metadata_path(csv_path: &Path) -> std::path::PathBuf {
    let mut name = csv_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".meta");
    csv_path.with_file_name(name)
}

/// Write a snapshot dataset as CSV plus a `key = value` metadata sidecar
/// holding the sample period, seed, and plant parameters.
pub fn write_snapshots(
    path: &Path,
    dataset: &SnapshotDataset,
    params: &ArmParameters,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyData("snapshot dataset".into()));
    }
    let n = dataset.snapshots[0].p.len();
    let m = dataset.snapshots[0].u.len();
    let mut csv = String::new();
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("p{i}")));
    header.extend((1..=n).map(|i| format!("q{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    csv.push_str(&header.join(","));
    csv.push('\n');
    for (k, snap) in dataset.snapshots.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(snap.p.iter().map(|v| fmt_f64(*v)));
        row.extend(snap.q.iter().map(|v| fmt_f64(*v)));
        row.extend(snap.u.iter().map(|v| fmt_f64(*v)));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_atomic(path, &csv)?;

    let fmt_triple = |v: &[f64; 3]| {
        format!("{} {} {}", fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(v[2]))
    };
    let mut meta = String::new();
    let _ = writeln!(meta, "ts = {}", fmt_f64(dataset.ts));
    let _ = writeln!(meta, "seed = {}", dataset.seed);
    let _ = writeln!(meta, "rows = {}", dataset.len());
    let _ = writeln!(meta, "masses = {}", fmt_triple(&params.masses));
    let _ = writeln!(meta, "lengths = {}", fmt_triple(&params.lengths));
    let _ = writeln!(meta, "stiffness = {}", fmt_triple(&params.stiffness));
    let _ = writeln!(meta, "damping = {}", fmt_triple(&params.damping));
    let _ = writeln!(meta, "gravity = {}", fmt_f64(params.gravity));
    write_atomic(&metadata_path(path), &meta)
}

/// Read a snapshot dataset and its metadata sidecar.
pub fn read_snapshots(path: &Path) -> Result<(SnapshotDataset, ArmParameters)> {
    let csv = fs::read_to_string(path)?;
    let mut lines = csv.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty snapshot file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"k") {
        return Err(parse_err(path, 1, "header must start with column k"));
    }
    let n = cols.iter().filter(|c| c.starts_with('p')).count();
    let m = cols.iter().filter(|c| c.starts_with('u')).count();
    let q_count = cols.iter().filter(|c| c.starts_with('q')).count();
    if n == 0 || q_count != n || cols.len() != 1 + 2 * n + m {
        return Err(parse_err(path, 1, format!("malformed header {header:?}")));
    }
    let mut snapshots = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let mut values = Vec::with_capacity(fields.len() - 1);
        for (c, raw) in fields.iter().enumerate().skip(1) {
            values.push(parse_f64(path, lineno, cols[c], raw)?);
        }
        snapshots.push(Snapshot {
            p: DVector::from_column_slice(&values[..n]),
            q: DVector::from_column_slice(&values[n..2 * n]),
            u: DVector::from_column_slice(&values[2 * n..]),
        });
    }
    if snapshots.is_empty() {
        return Err(parse_err(path, 1, "snapshot file has no data rows"));
    }

    let meta_path = metadata_path(path);
    let meta = fs::read_to_string(&meta_path)?;
    let mut ts = None;
    let mut seed = None;
    let mut params = ArmParameters::default();
    for (idx, line) in meta.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(&meta_path, lineno, "expected key = value"))?;
        let (key, value) = (key.trim(), value.trim());
        let triple = |field: &str| -> Result<[f64; 3]> {
            let parts: Vec<&str> = value.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(parse_err(
                    &meta_path,
                    lineno,
                    format!("{field} needs 3 values"),
                ));
            }
            Ok([
                parse_f64(&meta_path, lineno, field, parts[0])?,
                parse_f64(&meta_path, lineno, field, parts[1])?,
                parse_f64(&meta_path, lineno, field, parts[2])?,
            ])
        };
        match key {
            "ts" => ts = Some(parse_f64(&meta_path, lineno, "ts", value)?),
            "seed" => {
                seed = Some(value.parse::<u64>().map_err(|_| {
                    parse_err(&meta_path, lineno, format!("bad seed {value:?}"))
                })?)
            }
            "rows" => {
                let rows = parse_usize(&meta_path, lineno, "rows", value)?;
                if rows != snapshots.len() {
                    return Err(parse_err(
                        &meta_path,
                        lineno,
                        format!("metadata says {rows} rows, file has {}", snapshots.len()),
                    ));
                }
            }
            "masses" => params.masses = triple("masses")?,
            "lengths" => params.lengths = triple("lengths")?,
            "stiffness" => params.stiffness = triple("stiffness")?,
            "damping" => params.damping = triple("damping")?,
            "gravity" => params.gravity = parse_f64(&meta_path, lineno, "gravity", value)?,
            other => {
                return Err(parse_err(
                    &meta_path,
                    lineno,
                    format!("unknown metadata key {other:?}"),
                ))
            }
        }
    }
    let ts = ts.ok_or_else(|| parse_err(&meta_path, 1, "metadata missing ts"))?;
    let seed = seed.ok_or_else(|| parse_err(&meta_path, 1, "metadata missing seed"))?;
    Ok((SnapshotDataset { ts, seed, snapshots }, params))
}

fn push_matrix(out: &mut String, name: &str, matrix: &DMatrix<f64>) {
    let _ = writeln!(out, "matrix {name} {} {}", matrix.nrows(), matrix.ncols());
    for r in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols()).map(|c| fmt_f64(matrix[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

struct LineReader<'a> {
    path: &'a Path,
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> LineReader<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        LineReader {
            path,
            lines: text.lines().collect(),
            pos: 0,
        }
    }

    fn lineno(&self) -> usize {
        self.pos
    }

    fn next(&mut self) -> Result<&'a str> {
        while self.pos < self.lines.len() {
            let line = self.lines[self.pos].trim();
            self.pos += 1;
            if !line.is_empty() {
                return Ok(line);
            }
        }
        Err(parse_err(self.path, self.lines.len(), "unexpected end of file"))
    }

    /// Next line split as `key rest`, requiring the given key.
    fn keyword(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        if head != key {
            return Err(parse_err(
                self.path,
                self.lineno(),
                format!("expected {key:?}, found {head:?}"),
            ));
        }
        Ok(rest.trim())
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let dims = self.keyword("matrix")?;
        let mut parts = dims.split_whitespace();
        let found = parts.next().unwrap_or("");
        if found != name {
            return Err(parse_err(
                self.path,
                self.lineno(),
                format!("expected matrix {name:?}, found {found:?}"),
            ));
        }
        let rows = parse_usize(
            self.path,
            self.lineno(),
            "matrix rows",
            parts.next().unwrap_or(""),
        )?;
        let cols = parse_usize(
            self.path,
            self.lineno(),
            "matrix cols",
            parts.next().unwrap_or(""),
        )?;
        let mut out = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let line = self.next()?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != cols {
                return Err(parse_err(
                    self.path,
                    self.lineno(),
                    format!("matrix {name} row {r} has {} of {cols} entries", values.len()),
                ));
            }
            for (c, raw) in values.iter().enumerate() {
                out[(r, c)] = parse_f64(self.path, self.lineno(), "matrix entry", raw)?;
            }
        }
        Ok(out)
    }
}

/// Write a fitted model as structured text (round-trips bit-exactly).
pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    let basis = model.basis();
    let mut out = String::new();
    let _ = writeln!(out, "koopman-model-v1");
    let _ = writeln!(out, "family {}", model.family().name());
    let _ = writeln!(out, "n {}", basis.state_dim());
    let _ = writeln!(out, "m {}", basis.input_dim());
    let _ = writeln!(out, "rho {}", basis.rho());
    let _ = writeln!(out, "ts {}", fmt_f64(model.ts()));
    let _ = writeln!(out, "ordering {ORDERING_VERSION}");
    match model {
        Model::Linear(m) => {
            push_matrix(&mut out, "a", &m.a);
            push_matrix(&mut out, "b", &m.b);
            push_matrix(&mut out, "c", &m.c);
        }
        Model::Bilinear(m) => {
            push_matrix(&mut out, "a", &m.a);
            for (j, hj) in m.h.iter().enumerate() {
                push_matrix(&mut out, &format!("h{}", j + 1), hj);
            }
            push_matrix(&mut out, "b", &m.b);
            push_matrix(&mut out, "c", &m.c);
        }
        Model::Nonlinear(m) => {
            push_matrix(&mut out, "c_psi", &m.c_psi);
        }
    }
    let _ = writeln!(out, "end");
    write_atomic(path, &out)
}

/// Read a model written by [`write_model`].
pub fn read_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader::new(path, &text);
    let magic = r.next()?;
    if magic != "koopman-model-v1" {
        return Err(parse_err(path, r.lineno(), format!("bad magic {magic:?}")));
    }
    let family: BasisFamily = r
        .keyword("family")?
        .parse()
        .map_err(|e: Error| parse_err(path, r.lineno(), e.to_string()))?;
    let n = parse_usize(path, r.lineno(), "n", r.keyword("n")?)?;
    let m = parse_usize(path, r.lineno(), "m", r.keyword("m")?)?;
    let rho_raw = r.keyword("rho")?;
    let rho: u32 = rho_raw
        .parse()
        .map_err(|_| parse_err(path, r.lineno(), format!("bad rho {rho_raw:?}")))?;
    let ts = parse_f64(path, r.lineno(), "ts", r.keyword("ts")?)?;
    let ordering = r.keyword("ordering")?;
    if ordering != ORDERING_VERSION {
        return Err(parse_err(
            path,
            r.lineno(),
            format!("ordering {ordering:?} is not {ORDERING_VERSION:?}"),
        ));
    }
    let basis = Basis::new(BasisSpec::new(family, n, m, rho)?)?;
    let model = match family {
        BasisFamily::Linear => {
            let a = r.matrix("a")?;
            let b = r.matrix("b")?;
            let c = r.matrix("c")?;
            Model::Linear(ModelLinear { a, b, c, basis, ts })
        }
        BasisFamily::Bilinear => {
            let a = r.matrix("a")?;
            let mut h = Vec::with_capacity(m);
            for j in 0..m {
                h.push(r.matrix(&format!("h{}", j + 1))?);
            }
            let b = r.matrix("b")?;
            let c = r.matrix("c")?;
            Model::Bilinear(ModelBilinear { a, h, b, c, basis, ts })
        }
        BasisFamily::Nonlinear => {
            let c_psi = r.matrix("c_psi")?;
            Model::Nonlinear(ModelNonlinear { c_psi, basis, ts })
        }
    };
    let end = r.next()?;
    if end != "end" {
        return Err(parse_err(path, r.lineno(), format!("expected end, found {end:?}")));
    }
    model.validate()?;
    Ok(model)
}

/// One row of the prediction-error report.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    /// Model label, e.g. `linear-rho2`.
    pub model: String,
    pub family: BasisFamily,
    pub rho: u32,
    /// Dictionary size.
    pub m_dim: usize,
    /// Multi-step (40-step rollout) errors.
    pub raw_error: f64,
    pub normalized_error: f64,
    /// Single-step errors over the same episodes.
    pub one_step_raw: f64,
    pub one_step_normalized: f64,
}

/// Write the error-report CSV: one row per evaluated model, multi-step and
/// one-step errors side by side.
pub fn write_error_report(path: &Path, rows: &[ErrorRow]) -> Result<()> {
    let mut out =
        String::from("model,family,rho,M,raw_error,normalized_error,one_step_raw,one_step_normalized\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.model,
            row.family.name(),
            row.rho,
            row.m_dim,
            fmt_f64(row.raw_error),
            fmt_f64(row.normalized_error),
            fmt_f64(row.one_step_raw),
            fmt_f64(row.one_step_normalized),
        );
    }
    write_atomic(path, &out)
}

/// Read back an error report written by [`write_error_report`].
pub fn read_error_report(path: &Path) -> Result<Vec<ErrorRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if idx == 0 {
            if !line.starts_with("model,family,rho,M,raw_error,normalized_error") {
                return Err(parse_err(path, 1, "unrecognized error-report header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(path, lineno, format!("expected 8 fields, found {}", f.len())));
        }
        let family: BasisFamily = f[1]
            .parse()
            .map_err(|e: Error| parse_err(path, lineno, e.to_string()))?;
        rows.push(ErrorRow {
            model: f[0].to_string(),
            family,
            rho: f[2]
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad rho {:?}", f[2])))?,
            m_dim: parse_usize(path, lineno, "M", f[3])?,
            raw_error: parse_f64(path, lineno, "raw_error", f[4])?,
            normalized_error: parse_f64(path, lineno, "normalized_error", f[5])?,
            one_step_raw: parse_f64(path, lineno, "one_step_raw", f[6])?,
            one_step_normalized: parse_f64(path, lineno, "one_step_normalized", f[7])?,
        });
    }
    Ok(rows)
}

/// Write a closed-loop log: one CSV row per control step plus a trailing
/// summary comment with the means and the seed.
pub fn write_control_log(path: &Path, log: &ControlLog) -> Result<()> {
    let mut out = String::from("t,ref_x,ref_y,ee_x,ee_y,err,u1,u2,u3,solve_time,flag\n");
    for s in &log.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.t,
            fmt_f64(s.reference.x),
            fmt_f64(s.reference.y),
            fmt_f64(s.output.x),
            fmt_f64(s.output.y),
            fmt_f64(s.tracking_error),
            fmt_f64(s.input[0]),
            fmt_f64(s.input[1]),
            fmt_f64(s.input[2]),
            fmt_f64(s.solve_time),
            u8::from(s.failed),
        );
    }
    let _ = writeln!(
        out,
        "# mean_tracking_error={} mean_solve_time={} seed={}",
        fmt_f64(log.mean_tracking_error),
        fmt_f64(log.mean_solve_time),
        log.seed
    );
    write_atomic(path, &out)
}

/// Read a control log written by [`write_control_log`].
pub fn read_control_log(path: &Path) -> Result<ControlLog> {
    let text = fs::read_to_string(path)?;
    let mut steps = Vec::new();
    let mut summary = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if idx == 0 {
            if line != "t,ref_x,ref_y,ee_x,ee_y,err,u1,u2,u3,solve_time,flag" {
                return Err(parse_err(path, 1, "unrecognized control-log header"));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut mean_err = None;
            let mut mean_time = None;
            let mut seed = None;
            for part in rest.split_whitespace() {
                if let Some((k, v)) = part.split_once('=') {
                    match k {
                        "mean_tracking_error" => {
                            mean_err = Some(parse_f64(path, lineno, k, v)?)
                        }
                        "mean_solve_time" => mean_time = Some(parse_f64(path, lineno, k, v)?),
                        "seed" => {
                            seed = Some(v.parse::<u64>().map_err(|_| {
                                parse_err(path, lineno, format!("bad seed {v:?}"))
                            })?)
                        }
                        _ => {}
                    }
                }
            }
            match (mean_err, mean_time, seed) {
                (Some(e), Some(t), Some(s)) => summary = Some((e, t, s)),
                _ => return Err(parse_err(path, lineno, "incomplete summary line")),
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(parse_err(path, lineno, format!("expected 11 fields, found {}", f.len())));
        }
        steps.push(ControlStep {
            t: parse_usize(path, lineno, "t", f[0])?,
            reference: Vector2::new(
                parse_f64(path, lineno, "ref_x", f[1])?,
                parse_f64(path, lineno, "ref_y", f[2])?,
            ),
            output: Vector2::new(
                parse_f64(path, lineno, "ee_x", f[3])?,
                parse_f64(path, lineno, "ee_y", f[4])?,
            ),
            tracking_error: parse_f64(path, lineno, "err", f[5])?,
            input: Vector3::new(
                parse_f64(path, lineno, "u1", f[6])?,
                parse_f64(path, lineno, "u2", f[7])?,
                parse_f64(path, lineno, "u3", f[8])?,
            ),
            solve_time: parse_f64(path, lineno, "solve_time", f[9])?,
            failed: match f[10].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(parse_err(path, lineno, format!("bad flag {other:?}")))
                }
            },
        });
    }
    let (mean_tracking_error, mean_solve_time, seed) =
        summary.ok_or_else(|| parse_err(path, text.lines().count(), "missing summary line"))?;
    if steps.is_empty() {
        return Err(parse_err(path, 1, "control log has no steps"));
    }
    Ok(ControlLog {
        steps,
        mean_tracking_error,
        mean_solve_time,
        seed,
    })
}

/// Write a reference trajectory: a `# ts=` comment, an `x,y` header, and
/// one row per sample.
pub fn write_reference(path: &Path, traj: &ReferenceTrajectory) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# ts={}", fmt_f64(traj.ts));
    out.push_str("x,y\n");
    for s in &traj.samples {
        let _ = writeln!(out, "{},{}", fmt_f64(s.x), fmt_f64(s.y));
    }
    write_atomic(path, &out)
}

/// Read a reference trajectory written by [`write_reference`].
pub fn read_reference(path: &Path) -> Result<ReferenceTrajectory> {
    let text = fs::read_to_string(path)?;
    let mut ts = None;
    let mut samples = Vec::new();
    let mut saw_header = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            for part in rest.split_whitespace() {
                if let Some(v) = part.strip_prefix("ts=") {
                    ts = Some(parse_f64(path, lineno, "ts", v)?);
                }
            }
            continue;
        }
        if line == "x,y" {
            saw_header = true;
            continue;
        }
        let (x, y) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, lineno, "expected x,y pair"))?;
        samples.push(Vector2::new(
            parse_f64(path, lineno, "x", x)?,
            parse_f64(path, lineno, "y", y)?,
        ));
    }
    if !saw_header {
        return Err(parse_err(path, 1, "missing x,y header"));
    }
    let ts = ts.ok_or_else(|| parse_err(path, 1, "missing # ts= comment"))?;
    if samples.is_empty() {
        return Err(parse_err(path, 1, "reference has no samples"));
    }
    Ok(ReferenceTrajectory { ts, samples })
}

fn fmt_multi_index(m: &MultiIndex) -> String {
    let exps: Vec<String> = m.exponents().iter().map(|e| e.to_string()).collect();
    format!("{} # {}", exps.join(" "), m)
}

fn parse_multi_index(path: &Path, lineno: usize, line: &str) -> Result<MultiIndex> {
    let raw = line.split('#').next().unwrap_or("").trim();
    let exps: Vec<u32> = raw
        .split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| parse_err(path, lineno, format!("bad exponent {t:?}")))
        })
        .collect::<Result<_>>()?;
    if exps.is_empty() {
        return Err(parse_err(path, lineno, "empty multi-index"));
    }
    Ok(MultiIndex::new(exps))
}

/// Write a realizability certificate as structured text: verdict, the
/// dictionary (exponent rows with a human-readable comment), coefficient
/// tables when the verdict is not Neither, and the escaping monomials
/// otherwise.
pub fn write_certificate(path: &Path, cert: &RealizationCertificate) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "koopman-certificate-v1");
    let _ = writeln!(out, "verdict {}", cert.verdict);
    let _ = writeln!(out, "rho {}", cert.rho);
    let _ = writeln!(out, "dictionary {}", cert.dictionary.len());
    for m in &cert.dictionary {
        let _ = writeln!(out, "{}", fmt_multi_index(m));
    }
    if let Some(coeffs) = &cert.coefficients {
        let _ = writeln!(out, "inputs {}", coeffs.h.len());
        push_matrix(&mut out, "a", &coeffs.a);
        push_matrix(&mut out, "b", &coeffs.b);
        for (j, hj) in coeffs.h.iter().enumerate() {
            push_matrix(&mut out, &format!("h{}", j + 1), hj);
        }
    } else {
        let _ = writeln!(out, "inputs 0");
    }
    let _ = writeln!(out, "residuals {}", cert.residual_monomials.len());
    for m in &cert.residual_monomials {
        let _ = writeln!(out, "{}", fmt_multi_index(m));
    }
    let _ = writeln!(out, "end");
    write_atomic(path, &out)
}

/// Read a certificate written by [`write_certificate`].
pub fn read_certificate(path: &Path) -> Result<RealizationCertificate> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader::new(path, &text);
    let magic = r.next()?;
    if magic != "koopman-certificate-v1" {
        return Err(parse_err(path, r.lineno(), format!("bad magic {magic:?}")));
    }
    let verdict = match r.keyword("verdict")? {
        "Linear" => Verdict::Linear,
        "Bilinear" => Verdict::Bilinear,
        "Neither" => Verdict::Neither,
        other => {
            return Err(parse_err(path, r.lineno(), format!("bad verdict {other:?}")))
        }
    };
    let rho_raw = r.keyword("rho")?;
    let rho: u32 = rho_raw
        .parse()
        .map_err(|_| parse_err(path, r.lineno(), format!("bad rho {rho_raw:?}")))?;
    let dict_len = parse_usize(path, r.lineno(), "dictionary", r.keyword("dictionary")?)?;
    let mut dictionary = Vec::with_capacity(dict_len);
    for _ in 0..dict_len {
        let line = r.next()?;
        dictionary.push(parse_multi_index(path, r.lineno(), line)?);
    }
    let inputs = parse_usize(path, r.lineno(), "inputs", r.keyword("inputs")?)?;
    let coefficients = if verdict != Verdict::Neither {
        let a = r.matrix("a")?;
        let b = r.matrix("b")?;
        let mut h = Vec::with_capacity(inputs);
        for j in 0..inputs {
            h.push(r.matrix(&format!("h{}", j + 1))?);
        }
        Some(RealizationCoefficients { a, b, h })
    } else {
        None
    };
    let res_len = parse_usize(path, r.lineno(), "residuals", r.keyword("residuals")?)?;
    let mut residual_monomials = Vec::with_capacity(res_len);
    for _ in 0..res_len {
        let line = r.next()?;
        residual_monomials.push(parse_multi_index(path, r.lineno(), line)?);
    }
    let end = r.next()?;
    if end != "end" {
        return Err(parse_err(path, r.lineno(), format!("expected end, found {end:?}")));
    }
    Ok(RealizationCertificate {
        verdict,
        rho,
        dictionary,
        coefficients,
        residual_monomials,
    })
}
