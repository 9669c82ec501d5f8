//! Monomial dictionaries and lifting maps.
//!
//! Three dictionary families are supported for a plant with `n` states and
//! `m` inputs at maximum degree `rho`:
//!
//! * **linear** — all state monomials of degree `<= rho` plus the raw input
//!   projections `u_1..u_m`; size `M = C(n + rho, rho) + m`;
//! * **bilinear** — the same state monomials, then each of them multiplied by
//!   each input `u_j`; size `M = C(n + rho, rho) * (m + 1)` (the constant
//!   entry of the `u_j` block is the projection `u_j` itself);
//! * **nonlinear** — every monomial in the joint variables `(x, u)` of
//!   degree `<= rho`; size `M = C(n + m + rho, rho)`.
//!
//! All enumerations share one ordering convention (`grlex-v1`): the degree-1
//! state projections `x_1..x_n` come first, then the constant `1`, then the
//! remaining monomials graded by total degree with a lexicographic order
//! inside each degree (`x_1^2, x_1 x_2, x_2^2, ...`). Identified models store
//! this tag so that persisted coefficient matrices stay interpretable.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::fmt;

/// Ordering convention implemented by [`enumerate_monomials`].
pub const ORDERING_VERSION: &str = "grlex-v1";

/// Largest accepted maximum degree. Beyond this the dictionary sizes explode
/// and exponent arithmetic in `u32` would not be worth auditing.
pub const MAX_DEGREE: u32 = 12;

/// Exponent vector of a monomial: `x^alpha = prod_i x_i^{alpha_i}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    exponents: Vec<u32>,
}

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self { exponents }
    }

    /// The zero multi-index (the constant monomial `1`).
    pub fn zeros(len: usize) -> Self {
        Self {
            exponents: vec![0; len],
        }
    }

    /// Unit multi-index for variable `var` (the projection `x_var`).
    pub fn unit(len: usize, var: usize) -> Self {
        assert!(var < len, "variable index out of range");
        let mut exponents = vec![0; len];
        exponents[var] = 1;
        Self { exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    /// Total degree `|alpha|`.
    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    /// Evaluate `x^alpha` at a point.
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.exponents.len());
        self.exponents
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }

    /// Partial derivative with respect to variable `var`:
    /// returns `(alpha_var, alpha - e_var)`, or `None` if the monomial does
    /// not depend on that variable.
    pub fn partial(&self, var: usize) -> Option<(f64, MultiIndex)> {
        let e = self.exponents[var];
        if e == 0 {
            return None;
        }
        let mut exponents = self.exponents.clone();
        exponents[var] = e - 1;
        Some((f64::from(e), MultiIndex { exponents }))
    }

    /// Product of two monomials over the same variables.
    pub fn product(&self, other: &MultiIndex) -> MultiIndex {
        assert_eq!(self.exponents.len(), other.exponents.len());
        let exponents = self
            .exponents
            .iter()
            .zip(&other.exponents)
            .map(|(a, b)| a + b)
            .collect();
        MultiIndex { exponents }
    }
}

impl fmt::Display for MultiIndex {
    /// Renders like `x1^2*x3`; the constant renders as `1`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (i, &e) in self.exponents.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        if first {
            write!(f, "1")?;
        }
        Ok(())
    }
}

/// Binomial coefficient, exact in `u128` for every size this crate accepts.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    usize::try_from(acc).expect("binomial overflows usize")
}

/// All monomials in `n` variables of total degree `<= rho`, in the crate
/// ordering: projections `x_1..x_n`, the constant, then degrees `2..=rho`
/// with a lexicographic order (descending exponent tuples) inside each
/// degree. The result has `C(n + rho, rho)` entries.
pub fn enumerate_monomials(n: usize, rho: u32) -> Result<Vec<MultiIndex>> {
    if n == 0 {
        return Err(Error::Invalid("monomial enumeration needs n >= 1".into()));
    }
    if rho > MAX_DEGREE {
        return Err(Error::Invalid(format!(
            "maximum degree {rho} exceeds the supported limit {MAX_DEGREE}"
        )));
    }
    let mut out = Vec::with_capacity(binomial(n + rho as usize, rho as usize));
    if rho >= 1 {
        for v in 0..n {
            out.push(MultiIndex::unit(n, v));
        }
    }
    out.push(MultiIndex::zeros(n));
    let mut scratch = vec![0u32; n];
    for degree in 2..=rho {
        push_degree(&mut out, &mut scratch, 0, degree, n);
    }
    debug_assert_eq!(out.len(), binomial(n + rho as usize, rho as usize));
    Ok(out)
}

/// Emit all exponent tuples of exactly `remaining` total degree into
/// positions `var..n`, in descending lexicographic order.
fn push_degree(
    out: &mut Vec<MultiIndex>,
    scratch: &mut Vec<u32>,
    var: usize,
    remaining: u32,
    n: usize,
) {
    if var == n - 1 {
        scratch[var] = remaining;
        out.push(MultiIndex::new(scratch.clone()));
        scratch[var] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        scratch[var] = e;
        push_degree(out, scratch, var + 1, remaining - e, n);
        scratch[var] = 0;
    }
}

/// Dictionary family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisFamily {
    Linear,
    Bilinear,
    Nonlinear,
}

impl BasisFamily {
    pub fn name(&self) -> &'static str {
        match self {
            BasisFamily::Linear => "linear",
            BasisFamily::Bilinear => "bilinear",
            BasisFamily::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BasisFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BasisFamily::Linear),
            "bilinear" => Ok(BasisFamily::Bilinear),
            "nonlinear" => Ok(BasisFamily::Nonlinear),
            other => Err(Error::Invalid(format!(
                "unknown basis family `{other}` (expected linear, bilinear or nonlinear)"
            ))),
        }
    }
}

/// Full specification of a dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisSpec {
    pub family: BasisFamily,
    /// Number of plant states observed through the degree-1 projections.
    pub n: usize,
    /// Number of inputs.
    pub m: usize,
    /// Maximum monomial degree.
    pub rho: u32,
}

impl BasisSpec {
    pub fn new(family: BasisFamily, n: usize, m: usize, rho: u32) -> Result<Self> {
        let spec = Self { family, n, m, rho };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Invalid("basis needs n >= 1 state".into()));
        }
        if self.rho == 0 {
            return Err(Error::Invalid("basis needs maximum degree >= 1".into()));
        }
        if self.rho > MAX_DEGREE {
            return Err(Error::Invalid(format!(
                "maximum degree {} exceeds the supported limit {}",
                self.rho, MAX_DEGREE
            )));
        }
        Ok(())
    }

    /// Number of state-only monomials `N = C(n + rho, rho)`.
    pub fn state_monomial_count(&self) -> usize {
        binomial(self.n + self.rho as usize, self.rho as usize)
    }

    /// Total dictionary size `M` for this family.
    pub fn dimension(&self) -> usize {
        let n_mono = self.state_monomial_count();
        match self.family {
            BasisFamily::Linear => n_mono + self.m,
            BasisFamily::Bilinear => n_mono * (self.m + 1),
            BasisFamily::Nonlinear => {
                binomial(self.n + self.m + self.rho as usize, self.rho as usize)
            }
        }
    }
}

/// One dictionary entry: a monomial in the state times a monomial in the
/// input, `psi(x, u) = x^alpha * u^beta`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BasisEntry {
    pub state: MultiIndex,
    pub input: MultiIndex,
}

impl BasisEntry {
    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        self.state.eval(x) * self.input.eval(u)
    }

    pub fn degree(&self) -> u32 {
        self.state.degree() + self.input.degree()
    }
}

impl fmt::Display for BasisEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state_const = self.state.degree() == 0;
        let input_const = self.input.degree() == 0;
        match (state_const, input_const) {
            (true, true) => write!(f, "1"),
            (false, true) => write!(f, "{}", self.state),
            (true, false) => write!(f, "{}", rename_vars(&self.input, 'u')),
            (false, false) => write!(f, "{}*{}", self.state, rename_vars(&self.input, 'u')),
        }
    }
}

fn rename_vars(idx: &MultiIndex, letter: char) -> String {
    let mut s = String::new();
    for (i, &e) in idx.exponents().iter().enumerate() {
        if e == 0 {
            continue;
        }
        if !s.is_empty() {
            s.push('*');
        }
        if e == 1 {
            s.push_str(&format!("{letter}{}", i + 1));
        } else {
            s.push_str(&format!("{letter}{}^{}", i + 1, e));
        }
    }
    if s.is_empty() {
        s.push('1');
    }
    s
}

/// A fully enumerated dictionary with its lifting maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    spec: BasisSpec,
    entries: Vec<BasisEntry>,
}

impl Basis {
    pub fn new(spec: BasisSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n;
        let m = spec.m;
        let entries = match spec.family {
            BasisFamily::Linear => {
                let mut entries: Vec<BasisEntry> = enumerate_monomials(n, spec.rho)?
                    .into_iter()
                    .map(|state| BasisEntry {
                        state,
                        input: MultiIndex::zeros(m),
                    })
                    .collect();
                for j in 0..m {
                    entries.push(BasisEntry {
                        state: MultiIndex::zeros(n),
                        input: MultiIndex::unit(m, j),
                    });
                }
                entries
            }
            BasisFamily::Bilinear => {
                let monos = enumerate_monomials(n, spec.rho)?;
                let mut entries: Vec<BasisEntry> = monos
                    .iter()
                    .map(|state| BasisEntry {
                        state: state.clone(),
                        input: MultiIndex::zeros(m),
                    })
                    .collect();
                for j in 0..m {
                    for state in &monos {
                        entries.push(BasisEntry {
                            state: state.clone(),
                            input: MultiIndex::unit(m, j),
                        });
                    }
                }
                entries
            }
            BasisFamily::Nonlinear => enumerate_monomials(n + m, spec.rho)?
                .into_iter()
                .map(|joint| {
                    let exps = joint.exponents();
                    BasisEntry {
                        state: MultiIndex::new(exps[..n].to_vec()),
                        input: MultiIndex::new(exps[n..].to_vec()),
                    }
                })
                .collect(),
        };
        debug_assert_eq!(entries.len(), spec.dimension());
        Ok(Self { spec, entries })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn family(&self) -> BasisFamily {
        self.spec.family
    }

    /// Dictionary size `M`.
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn state_dim(&self) -> usize {
        self.spec.n
    }

    pub fn input_dim(&self) -> usize {
        self.spec.m
    }

    pub fn rho(&self) -> u32 {
        self.spec.rho
    }

    /// Number of input-free entries `N`. For the linear and bilinear
    /// families these form the leading block of the dictionary and carry the
    /// realization state.
    pub fn state_monomial_count(&self) -> usize {
        self.spec.state_monomial_count()
    }

    /// Position of the constant entry: right after the state projections for
    /// the linear and bilinear families, after all `n + m` projections for
    /// the joint nonlinear enumeration.
    pub fn constant_index(&self) -> usize {
        match self.spec.family {
            BasisFamily::Linear | BasisFamily::Bilinear => self.spec.n,
            BasisFamily::Nonlinear => self.spec.n + self.spec.m,
        }
    }

    pub fn entries(&self) -> &[BasisEntry] {
        &self.entries
    }

    fn check_point(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.spec.n {
            return Err(Error::Dimension {
                what: "state passed to lift".into(),
                expected: self.spec.n,
                actual: x.len(),
            });
        }
        if u.len() != self.spec.m {
            return Err(Error::Dimension {
                what: "input passed to lift".into(),
                expected: self.spec.m,
                actual: u.len(),
            });
        }
        Ok(())
    }

    /// Evaluate the full lifting `psi(x, u)` (length `M`).
    pub fn lift(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        self.check_point(x, u)?;
        Ok(DVector::from_iterator(
            self.entries.len(),
            self.entries.iter().map(|e| e.eval(x, u)),
        ))
    }

    /// Evaluate only the input-free state block (length `N`). This is the
    /// lifted state of the linear and bilinear realizations.
    pub fn lift_state(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.spec.n {
            return Err(Error::Dimension {
                what: "state passed to lift_state".into(),
                expected: self.spec.n,
                actual: x.len(),
            });
        }
        let n_state = self.state_monomial_count();
        Ok(DVector::from_iterator(
            n_state,
            self.entries[..n_state].iter().map(|e| e.state.eval(x)),
        ))
    }

    /// Jacobians of the lifting with respect to the state (`M x n`) and the
    /// input (`M x m`).
    pub fn lift_jacobians(&self, x: &[f64], u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_point(x, u)?;
        let m_dim = self.entries.len();
        let mut jx = DMatrix::zeros(m_dim, self.spec.n);
        let mut ju = DMatrix::zeros(m_dim, self.spec.m);
        for (row, entry) in self.entries.iter().enumerate() {
            let sx = entry.state.eval(x);
            let su = entry.input.eval(u);
            for v in 0..self.spec.n {
                if let Some((coef, reduced)) = entry.state.partial(v) {
                    jx[(row, v)] = coef * reduced.eval(x) * su;
                }
            }
            for v in 0..self.spec.m {
                if let Some((coef, reduced)) = entry.input.partial(v) {
                    ju[(row, v)] = coef * sx * reduced.eval(u);
                }
            }
        }
        Ok((jx, ju))
    }
}
