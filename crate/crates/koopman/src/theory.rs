//! Exact realizability checks for polynomial control-affine systems.
//!
//! For a field `dx/dt = F_x(x) + Σ_j F_u^j(x) u_j` with polynomial entries
//! and the dictionary of all state monomials of degree ≤ ρ, membership of a
//! Lie derivative in the lifted span is a finite, exact question about
//! polynomial coefficients. [`check_linear`] and [`check_bilinear`] decide it
//! and, on success, return the realization coefficients as an explicit
//! certificate; on failure they list the dictionary monomials whose image
//! under the generator escapes the span.
//!
//! Everything here is symbolic up to floating-point coefficient arithmetic:
//! "exact" means coefficient residuals below `1e-12` of the largest
//! coefficient magnitude involved, far below anything numeric noise can
//! produce at the degrees of interest.

use crate::basis::{enumerate_monomials, MultiIndex};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use std::fmt;

/// Relative coefficient tolerance for span-membership and certificate
/// soundness comparisons.
pub const COEFF_TOL: f64 = 1e-12;

/// A real polynomial in `n` state variables with sparse monomial support.
///
/// Zero coefficients are never stored, so structural equality of the maps is
/// polynomial equality.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    n: usize,
    terms: BTreeMap<MultiIndex, f64>,
}

impl Polynomial {
    /// The zero polynomial in `n` variables.
    pub fn zero(n: usize) -> Self {
        Polynomial {
            n,
            terms: BTreeMap::new(),
        }
    }

    /// The constant polynomial `c`.
    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(n);
        p.add_term(MultiIndex::zeros(n), c);
        p
    }

    /// The single variable `x_{var}` (zero-based).
    pub fn variable(n: usize, var: usize) -> Self {
        let mut p = Polynomial::zero(n);
        p.add_term(MultiIndex::unit(n, var), 1.0);
        p
    }

    /// Build from explicit `(exponents, coefficient)` terms.
    pub fn from_terms(n: usize, terms: &[(Vec<u32>, f64)]) -> Result<Self> {
        let mut p = Polynomial::zero(n);
        for (exps, coeff) in terms {
            if exps.len() != n {
                return Err(Error::Dimension {
                    what: "polynomial term exponents".into(),
                    expected: n,
                    actual: exps.len(),
                });
            }
            p.add_term(MultiIndex::new(exps.clone()), *coeff);
        }
        Ok(p)
    }

    /// Number of state variables.
    pub fn vars(&self) -> usize {
        self.n
    }

    /// Iterate over `(monomial, coefficient)` terms in monomial order.
    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    /// Add `coeff * monomial`, dropping the entry if it cancels to zero.
    pub fn add_term(&mut self, monomial: MultiIndex, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let slot = self.terms.entry(monomial).or_insert(0.0);
        *slot += coeff;
        if *slot == 0.0 {
            let key = self
                .terms
                .iter()
                .find(|(_, v)| **v == 0.0)
                .map(|(k, _)| k.clone());
            if let Some(key) = key {
                self.terms.remove(&key);
            }
        }
    }

    /// Coefficient of a monomial (zero if absent).
    pub fn coefficient(&self, monomial: &MultiIndex) -> f64 {
        self.terms.get(monomial).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// True when the polynomial has no non-constant terms.
    pub fn is_constant(&self) -> bool {
        self.terms.keys().all(|m| m.degree() == 0)
    }

    /// Total degree (zero polynomial reports 0).
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    /// Largest coefficient magnitude (0 for the zero polynomial).
    pub fn max_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |acc, c| acc.max(c.abs()))
    }

    /// Evaluate at a point.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.eval(x)).sum()
    }

    /// Partial derivative with respect to `x_{var}`.
    pub fn partial(&self, var: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.n);
        for (m, c) in &self.terms {
            if let Some((factor, reduced)) = m.partial(var) {
                out.add_term(reduced, c * factor);
            }
        }
        out
    }

    /// Exact product.
    pub fn multiply(&self, other: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero(self.n);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.product(mb), ca * cb);
            }
        }
        out
    }

    /// Sum of two polynomials.
    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), *c);
        }
        out
    }

    /// Scale every coefficient.
    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.n);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * s);
        }
        out
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (m, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            if m.degree() == 0 {
                write!(f, "{c}")?;
            } else {
                write!(f, "{c}*{m}")?;
            }
        }
        Ok(())
    }
}

/// Polynomial control-affine vector field
/// `dx/dt = F_x(x) + Σ_j F_u^j(x) u_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyControlAffineField {
    /// Drift components, one polynomial per state variable.
    pub fx: Vec<Polynomial>,
    /// Input columns: `fu[j]` holds the `n` components multiplying `u_j`.
    pub fu: Vec<Vec<Polynomial>>,
}

impl PolyControlAffineField {
    pub fn new(fx: Vec<Polynomial>, fu: Vec<Vec<Polynomial>>) -> Result<Self> {
        if fx.is_empty() {
            return Err(Error::Invalid("field needs at least one state".into()));
        }
        let n = fx[0].vars();
        for p in &fx {
            if p.vars() != n {
                return Err(Error::Dimension {
                    what: "drift component variable count".into(),
                    expected: n,
                    actual: p.vars(),
                });
            }
        }
        for col in &fu {
            if col.len() != fx.len() {
                return Err(Error::Dimension {
                    what: "input column length".into(),
                    expected: fx.len(),
                    actual: col.len(),
                });
            }
            for p in col {
                if p.vars() != n {
                    return Err(Error::Dimension {
                        what: "input column variable count".into(),
                        expected: n,
                        actual: p.vars(),
                    });
                }
            }
        }
        Ok(PolyControlAffineField { fx, fu })
    }

    pub fn state_dim(&self) -> usize {
        self.fx.len()
    }

    pub fn input_dim(&self) -> usize {
        self.fu.len()
    }

    /// Evaluate `dx/dt` at a state/input pair.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                what: "field state".into(),
                expected: self.state_dim(),
                actual: x.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "field input".into(),
                expected: self.input_dim(),
                actual: u.len(),
            });
        }
        let mut dx: Vec<f64> = self.fx.iter().map(|p| p.eval(x)).collect();
        for (j, col) in self.fu.iter().enumerate() {
            for (i, p) in col.iter().enumerate() {
                dx[i] += p.eval(x) * u[j];
            }
        }
        Ok(dx)
    }
}

/// Lie derivative of `z` along a field column: `Σ_k (∂z/∂x_k) field[k]`.
pub fn lie_derivative(z: &Polynomial, field_column: &[Polynomial]) -> Result<Polynomial> {
    let n = z.vars();
    if field_column.len() != n {
        return Err(Error::Dimension {
            what: "field column length".into(),
            expected: n,
            actual: field_column.len(),
        });
    }
    let mut out = Polynomial::zero(n);
    for (k, fk) in field_column.iter().enumerate() {
        if fk.vars() != n {
            return Err(Error::Dimension {
                what: "field column variable count".into(),
                expected: n,
                actual: fk.vars(),
            });
        }
        out = out.add(&z.partial(k).multiply(fk));
    }
    Ok(out)
}

/// Realizability verdict over the degree-ρ monomial dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Linear,
    Bilinear,
    Neither,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Linear => "Linear",
            Verdict::Bilinear => "Bilinear",
            Verdict::Neither => "Neither",
        };
        write!(f, "{s}")
    }
}

/// Explicit realization coefficients witnessing a non-`Neither` verdict.
///
/// With `z` the dictionary vector, the witnessed generator dynamics are
/// `d z / dt = A z + Σ_j u_j H_j z + B u`. A `Linear` certificate has all
/// `H_j = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationCoefficients {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: Vec<DMatrix<f64>>,
}

/// Result of [`check_linear`] / [`check_bilinear`].
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationCertificate {
    pub verdict: Verdict,
    /// Degree bound of the dictionary the check ran over.
    pub rho: u32,
    /// Dictionary monomials, in basis order.
    pub dictionary: Vec<MultiIndex>,
    /// Present exactly when `verdict != Neither`.
    pub coefficients: Option<RealizationCoefficients>,
    /// Dictionary monomials whose Lie derivative escapes the span; empty
    /// exactly when `verdict != Neither`.
    pub residual_monomials: Vec<MultiIndex>,
}

impl RealizationCertificate {
    /// Rebuild every Lie derivative from the certificate coefficients and
    /// compare against the symbolic Lie derivative. Returns the largest
    /// relative coefficient mismatch (0 for a `Neither` certificate).
    pub fn soundness_residual(&self, field: &PolyControlAffineField) -> Result<f64> {
        let Some(coeffs) = &self.coefficients else {
            return Ok(0.0);
        };
        let n = field.state_dim();
        let m = field.input_dim();
        let mut worst = 0.0_f64;
        for (i, zi) in self.dictionary.iter().enumerate() {
            let zi_poly = monomial_poly(n, zi);
            // Drift: Lie derivative must equal Σ_j a[i][j] z_j.
            let ld = lie_derivative(&zi_poly, &field.fx)?;
            let mut rebuilt = Polynomial::zero(n);
            for (j, zj) in self.dictionary.iter().enumerate() {
                rebuilt.add_term(zj.clone(), coeffs.a[(i, j)]);
            }
            worst = worst.max(poly_mismatch(&ld, &rebuilt));
            // Inputs: Lie derivative must equal b[i][j] + Σ_k h_j[i][k] z_k.
            for j in 0..m {
                let ld_u = lie_derivative(&zi_poly, &field.fu[j])?;
                let mut rebuilt_u = Polynomial::constant(n, coeffs.b[(i, j)]);
                for (k, zk) in self.dictionary.iter().enumerate() {
                    rebuilt_u.add_term(zk.clone(), coeffs.h[j][(i, k)]);
                }
                worst = worst.max(poly_mismatch(&ld_u, &rebuilt_u));
            }
        }
        Ok(worst)
    }
}

fn monomial_poly(n: usize, m: &MultiIndex) -> Polynomial {
    let mut p = Polynomial::zero(n);
    p.add_term(m.clone(), 1.0);
    p
}

/// Largest coefficient difference between two polynomials, relative to the
/// largest coefficient magnitude involved.
fn poly_mismatch(a: &Polynomial, b: &Polynomial) -> f64 {
    let scale = a.max_coeff().max(b.max_coeff()).max(1.0);
    let mut worst = 0.0_f64;
    for (m, c) in a.terms() {
        worst = worst.max((c - b.coefficient(m)).abs());
    }
    for (m, c) in b.terms() {
        worst = worst.max((c - a.coefficient(m)).abs());
    }
    worst / scale
}

/// Write a Lie derivative's coefficients into row `i` of the certificate
/// matrices; returns false (and does not touch the matrices' validity) if a
/// term of degree > ρ appears.
fn read_off_row(
    ld: &Polynomial,
    index_of: &BTreeMap<MultiIndex, usize>,
    rho: u32,
    row: usize,
    target: &mut DMatrix<f64>,
) -> bool {
    for (m, c) in ld.terms() {
        if m.degree() > rho {
            return false;
        }
        let col = index_of[m];
        target[(row, col)] = c;
    }
    true
}

fn dictionary_and_index(n: usize, rho: u32) -> Result<(Vec<MultiIndex>, BTreeMap<MultiIndex, usize>)> {
    let dictionary = enumerate_monomials(n, rho)?;
    let index_of: BTreeMap<MultiIndex, usize> = dictionary
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, m)| (m, i))
        .collect();
    Ok((dictionary, index_of))
}

/// Decide whether the field admits an exact *linear* lifted realization over
/// the degree-ρ monomial dictionary: every drift Lie derivative stays in the
/// span and every input Lie derivative is constant.
pub fn check_linear(field: &PolyControlAffineField, rho: u32) -> Result<RealizationCertificate> {
    if rho == 0 {
        return Err(Error::Invalid("rho must be >= 1".into()));
    }
    let n = field.state_dim();
    let m = field.input_dim();
    let (dictionary, index_of) = dictionary_and_index(n, rho)?;
    let d = dictionary.len();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, m);
    let mut residual = Vec::new();
    for (i, zi) in dictionary.iter().enumerate() {
        let zi_poly = monomial_poly(n, zi);
        let mut escapes = false;
        let ld = lie_derivative(&zi_poly, &field.fx)?;
        if !read_off_row(&ld, &index_of, rho, i, &mut a) {
            escapes = true;
        }
        for j in 0..m {
            let ld_u = lie_derivative(&zi_poly, &field.fu[j])?;
            if ld_u.is_constant() {
                b[(i, j)] = ld_u.coefficient(&MultiIndex::zeros(n));
            } else {
                escapes = true;
            }
        }
        if escapes {
            residual.push(zi.clone());
        }
    }
    if residual.is_empty() {
        Ok(RealizationCertificate {
            verdict: Verdict::Linear,
            rho,
            dictionary,
            coefficients: Some(RealizationCoefficients {
                a,
                b,
                h: vec![DMatrix::zeros(d, d); m],
            }),
            residual_monomials: residual,
        })
    } else {
        Ok(RealizationCertificate {
            verdict: Verdict::Neither,
            rho,
            dictionary,
            coefficients: None,
            residual_monomials: residual,
        })
    }
}

/// Decide whether the field admits an exact *bilinear* lifted realization
/// over the degree-ρ monomial dictionary: every drift and input Lie
/// derivative stays in the span (input derivatives get multiplied by `u_j`,
/// landing in the `z·u` part of the bilinear span).
pub fn check_bilinear(field: &PolyControlAffineField, rho: u32) -> Result<RealizationCertificate> {
    if rho == 0 {
        return Err(Error::Invalid("rho must be >= 1".into()));
    }
    let n = field.state_dim();
    let m = field.input_dim();
    let (dictionary, index_of) = dictionary_and_index(n, rho)?;
    let d = dictionary.len();
    let constant_row = MultiIndex::zeros(n);
    let mut a = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, m);
    let mut h = vec![DMatrix::zeros(d, d); m];
    let mut residual = Vec::new();
    for (i, zi) in dictionary.iter().enumerate() {
        let zi_poly = monomial_poly(n, zi);
        let mut escapes = false;
        let ld = lie_derivative(&zi_poly, &field.fx)?;
        if !read_off_row(&ld, &index_of, rho, i, &mut a) {
            escapes = true;
        }
        for j in 0..m {
            let ld_u = lie_derivative(&zi_poly, &field.fu[j])?;
            if !read_off_row(&ld_u, &index_of, rho, i, &mut h[j]) {
                escapes = true;
            } else {
                // The constant part of the derivative produces a pure `u_j`
                // term: move it from H to B so H acts on the state part only.
                let const_col = index_of[&constant_row];
                b[(i, j)] = h[j][(i, const_col)];
                h[j][(i, const_col)] = 0.0;
            }
        }
        if escapes {
            residual.push(zi.clone());
        }
    }
    if residual.is_empty() {
        Ok(RealizationCertificate {
            verdict: Verdict::Bilinear,
            rho,
            dictionary,
            coefficients: Some(RealizationCoefficients { a, b, h }),
            residual_monomials: residual,
        })
    } else {
        Ok(RealizationCertificate {
            verdict: Verdict::Neither,
            rho,
            dictionary,
            coefficients: None,
            residual_monomials: residual,
        })
    }
}

/// Parse the field text format: one term per line,
/// `component : coefficient [* x1^e1 ...] [* u_j]`, with `#` comments.
/// Components are 1-based; a line with a `u_j` factor contributes to input
/// column `j`, otherwise to the drift. `n` and `m` are inferred from the
/// largest indices mentioned; pass explicit dims to fix them.
pub fn parse_field_text(text: &str, n: usize, m: usize) -> Result<PolyControlAffineField> {
    let mut fx = vec![Polynomial::zero(n); n];
    let mut fu = vec![vec![Polynomial::zero(n); n]; m];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            file: "field".into(),
            line: lineno + 1,
            msg,
        };
        let (comp_str, rest) = line
            .split_once(':')
            .ok_or_else(|| err("missing ':' separator".into()))?;
        let comp: usize = comp_str
            .trim()
            .parse()
            .map_err(|_| err(format!("bad component index {:?}", comp_str.trim())))?;
        if comp == 0 || comp > n {
            return Err(err(format!("component {comp} out of range 1..={n}")));
        }
        let mut coeff: Option<f64> = None;
        let mut exps = vec![0u32; n];
        let mut input: Option<usize> = None;
        for factor in rest.split('*') {
            let factor = factor.trim();
            if factor.is_empty() {
                return Err(err("empty factor".into()));
            }
            if let Some(rest) = factor.strip_prefix('x') {
                let (var_str, exp_str) = match rest.split_once('^') {
                    Some((v, e)) => (v, Some(e)),
                    None => (rest, None),
                };
                let var: usize = var_str
                    .parse()
                    .map_err(|_| err(format!("bad variable {factor:?}")))?;
                if var == 0 || var > n {
                    return Err(err(format!("variable x{var} out of range 1..={n}")));
                }
                let exp: u32 = match exp_str {
                    Some(e) => e
                        .parse()
                        .map_err(|_| err(format!("bad exponent in {factor:?}")))?,
                    None => 1,
                };
                exps[var - 1] += exp;
            } else if let Some(rest) = factor.strip_prefix('u') {
                let j: usize = rest
                    .parse()
                    .map_err(|_| err(format!("bad input {factor:?}")))?;
                if j == 0 || j > m {
                    return Err(err(format!("input u{j} out of range 1..={m}")));
                }
                if input.replace(j - 1).is_some() {
                    return Err(err("more than one input factor on a line".into()));
                }
            } else {
                let c: f64 = factor
                    .parse()
                    .map_err(|_| err(format!("bad factor {factor:?}")))?;
                coeff = Some(coeff.unwrap_or(1.0) * c);
            }
        }
        let coeff = coeff.unwrap_or(1.0);
        let target = match input {
            Some(j) => &mut fu[j][comp - 1],
            None => &mut fx[comp - 1],
        };
        target.add_term(MultiIndex::new(exps), coeff);
    }
    PolyControlAffineField::new(fx, fu)
}

/// Render a field in the text format accepted by [`parse_field_text`].
pub fn field_to_text(field: &PolyControlAffineField) -> String {
    let mut out = String::new();
    let render = |out: &mut String, comp: usize, p: &Polynomial, input: Option<usize>| {
        for (mono, coeff) in p.terms() {
            out.push_str(&format!("{} : {:.16e}", comp + 1, coeff));
            for (var, e) in mono.exponents().iter().enumerate() {
                if *e > 0 {
                    out.push_str(&format!(" * x{}^{}", var + 1, e));
                }
            }
            if let Some(j) = input {
                out.push_str(&format!(" * u{}", j + 1));
            }
            out.push('\n');
        }
    };
    for (comp, p) in field.fx.iter().enumerate() {
        render(&mut out, comp, p, None);
    }
    for (j, col) in field.fu.iter().enumerate() {
        for (comp, p) in col.iter().enumerate() {
            render(&mut out, comp, p, Some(j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{Basis, BasisFamily, BasisSpec};
    use crate::edmd::{extract_bilinear, fit_koopman, Ridge};
    use crate::model::{prediction_error, Model, PredictionEpisode};
    use crate::plant::{Snapshot, SnapshotDataset};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poly(n: usize, terms: &[(&[u32], f64)]) -> Polynomial {
        Polynomial::from_terms(
            n,
            &terms
                .iter()
                .map(|(e, c)| (e.to_vec(), *c))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    /// Rotation field: z = x1 along (x2, -x1) gives x2.
    #[test]
    fn lie_derivative_of_projection() {
        let z = Polynomial::variable(2, 0);
        let field = vec![Polynomial::variable(2, 1), poly(2, &[(&[1, 0], -1.0)])];
        let ld = lie_derivative(&z, &field).unwrap();
        assert_eq!(ld, Polynomial::variable(2, 1));
    }

    /// Power rule: z = x^2 along (-x) gives -2x^2.
    #[test]
    fn lie_derivative_power_rule() {
        let z = poly(1, &[(&[2], 1.0)]);
        let field = vec![poly(1, &[(&[1], -1.0)])];
        let ld = lie_derivative(&z, &field).unwrap();
        assert_eq!(ld, poly(1, &[(&[2], -2.0)]));
    }

    /// Symbolic Lie derivative matches the numeric directional derivative
    /// d/dt z(x(t)) = ∇z(x)·f(x) at random points.
    #[test]
    fn lie_derivative_matches_numeric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 3;
        let monos = enumerate_monomials(n, 3).unwrap();
        let mut rand_poly = || {
            let mut p = Polynomial::zero(n);
            for m in &monos {
                p.add_term(m.clone(), rng.gen_range(-1.0..1.0));
            }
            p
        };
        let z = rand_poly();
        let field: Vec<Polynomial> = (0..n).map(|_| rand_poly()).collect();
        let ld = lie_derivative(&z, &field).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng2.gen_range(-1.0..1.0)).collect();
            // Centered finite difference of z along the flow direction.
            let f: Vec<f64> = field.iter().map(|p| p.eval(&x)).collect();
            let h = 1e-6;
            let xp: Vec<f64> = x.iter().zip(&f).map(|(xi, fi)| xi + h * fi).collect();
            let xm: Vec<f64> = x.iter().zip(&f).map(|(xi, fi)| xi - h * fi).collect();
            let numeric = (z.eval(&xp) - z.eval(&xm)) / (2.0 * h);
            assert_abs_diff_eq!(ld.eval(&x), numeric, epsilon = 1e-8);
        }
    }

    /// dx/dt = a x + b u is Linear at rho = 1 with the coefficients read off.
    #[test]
    fn linear_system_certified_linear() {
        let (a, b) = (-0.7, 1.3);
        let field = PolyControlAffineField::new(
            vec![poly(1, &[(&[1], a)])],
            vec![vec![Polynomial::constant(1, b)]],
        )
        .unwrap();
        let cert = check_linear(&field, 1).unwrap();
        assert_eq!(cert.verdict, Verdict::Linear);
        assert!(cert.residual_monomials.is_empty());
        let coeffs = cert.coefficients.as_ref().unwrap();
        // Dictionary order: x, 1.
        assert_eq!(cert.dictionary[0], MultiIndex::new(vec![1]));
        assert_eq!(coeffs.a[(0, 0)], a);
        assert_eq!(coeffs.b[(0, 0)], b);
        assert!(coeffs.h[0].iter().all(|v| *v == 0.0));
        assert!(cert.soundness_residual(&field).unwrap() <= COEFF_TOL);
        // Linear systems are bilinear too.
        let cert_b = check_bilinear(&field, 1).unwrap();
        assert_eq!(cert_b.verdict, Verdict::Bilinear);
        assert!(cert_b.soundness_residual(&field).unwrap() <= COEFF_TOL);
    }

    /// dx/dt = -x + x u: the input Lie derivative of x is x (non-constant),
    /// so not linear, but degree 1 keeps it in the bilinear span.
    #[test]
    fn multiplicative_input_is_bilinear_not_linear() {
        let field = PolyControlAffineField::new(
            vec![poly(1, &[(&[1], -1.0)])],
            vec![vec![poly(1, &[(&[1], 1.0)])]],
        )
        .unwrap();
        let lin = check_linear(&field, 1).unwrap();
        assert_eq!(lin.verdict, Verdict::Neither);
        assert!(lin.coefficients.is_none());
        assert_eq!(lin.residual_monomials, vec![MultiIndex::new(vec![1])]);
        let bil = check_bilinear(&field, 1).unwrap();
        assert_eq!(bil.verdict, Verdict::Bilinear);
        let coeffs = bil.coefficients.as_ref().unwrap();
        assert_eq!(coeffs.a[(0, 0)], -1.0);
        assert_eq!(coeffs.h[0][(0, 0)], 1.0);
        assert_eq!(coeffs.b[(0, 0)], 0.0);
        assert!(bil.soundness_residual(&field).unwrap() <= COEFF_TOL);
    }

    /// dx/dt = x^2 escapes every finite monomial degree: the derivative of
    /// x^rho has degree rho + 1.
    #[test]
    fn quadratic_drift_is_never_realizable() {
        let field = PolyControlAffineField::new(vec![poly(1, &[(&[2], 1.0)])], vec![]).unwrap();
        for rho in 1..=6 {
            let lin = check_linear(&field, rho).unwrap();
            let bil = check_bilinear(&field, rho).unwrap();
            assert_eq!(lin.verdict, Verdict::Neither, "linear at rho={rho}");
            assert_eq!(bil.verdict, Verdict::Neither, "bilinear at rho={rho}");
            // The escaping entry is exactly the top-degree monomial x^rho.
            assert_eq!(bil.residual_monomials, vec![MultiIndex::new(vec![rho])]);
        }
    }

    /// dx/dt = -x + 0.5 x u + u at rho = 1: bilinear with a = -1, h = 0.5,
    /// b = 1.
    #[test]
    fn affine_bilinear_read_off() {
        let field = PolyControlAffineField::new(
            vec![poly(1, &[(&[1], -1.0)])],
            vec![vec![poly(1, &[(&[1], 0.5), (&[0], 1.0)])]],
        )
        .unwrap();
        let lin = check_linear(&field, 1).unwrap();
        assert_eq!(lin.verdict, Verdict::Neither);
        let bil = check_bilinear(&field, 1).unwrap();
        assert_eq!(bil.verdict, Verdict::Bilinear);
        let coeffs = bil.coefficients.as_ref().unwrap();
        assert_eq!(coeffs.a[(0, 0)], -1.0);
        assert_eq!(coeffs.h[0][(0, 0)], 0.5);
        assert_eq!(coeffs.b[(0, 0)], 1.0);
        // Constant column of H was moved to B.
        assert_eq!(coeffs.h[0][(0, 1)], 0.0);
        assert!(bil.soundness_residual(&field).unwrap() <= COEFF_TOL);
    }

    /// Duffing with input: dx1/dt = x2, dx2/dt = -x1 - x1^3 + u. At rho = 3
    /// the cubic drift pushes several dictionary monomials out of the span;
    /// x1^2 x2 is among them (its drift derivative contains x1^5).
    #[test]
    fn duffing_escapes_at_rho_three() {
        let field = PolyControlAffineField::new(
            vec![
                Polynomial::variable(2, 1),
                poly(2, &[(&[1, 0], -1.0), (&[3, 0], -1.0)]),
            ],
            vec![vec![Polynomial::zero(2), Polynomial::constant(2, 1.0)]],
        )
        .unwrap();
        let cert = check_bilinear(&field, 3).unwrap();
        assert_eq!(cert.verdict, Verdict::Neither);
        assert!(cert.coefficients.is_none());
        let residuals: Vec<String> = cert
            .residual_monomials
            .iter()
            .map(|m| format!("{m}"))
            .collect();
        assert!(
            cert.residual_monomials.contains(&MultiIndex::new(vec![2, 1])),
            "x1^2*x2 should escape; residuals: {residuals:?}"
        );
        // Exactly the monomials with an x2 factor and degree >= 2 escape.
        let expected: Vec<MultiIndex> = [
            vec![1, 1],
            vec![0, 2],
            vec![2, 1],
            vec![1, 2],
            vec![0, 3],
        ]
        .into_iter()
        .map(MultiIndex::new)
        .collect();
        let mut got = cert.residual_monomials.clone();
        let mut want = expected;
        got.sort();
        want.sort();
        assert_eq!(got, want);
        // The linear check fails as well.
        assert_eq!(check_linear(&field, 3).unwrap().verdict, Verdict::Neither);
    }

    /// Two-state linear system: certified Linear at rho 1 and 2, and the
    /// certificate reproduces all Lie derivatives.
    #[test]
    fn certificate_soundness_multistate() {
        // dx1/dt = -x1 + 2 x2 + u1; dx2/dt = 0.5 x1 - x2 + 3 u2.
        let field = PolyControlAffineField::new(
            vec![
                poly(2, &[(&[1, 0], -1.0), (&[0, 1], 2.0)]),
                poly(2, &[(&[1, 0], 0.5), (&[0, 1], -1.0)]),
            ],
            vec![
                vec![Polynomial::constant(2, 1.0), Polynomial::zero(2)],
                vec![Polynomial::zero(2), Polynomial::constant(2, 3.0)],
            ],
        )
        .unwrap();
        for rho in [1, 2] {
            let lin = check_linear(&field, rho).unwrap();
            // At rho = 2, the derivative of x1^2 contains x1*u1 terms:
            // d(x1^2)/dt = 2 x1 (-x1 + 2 x2 + u1) — the input part is 2 x1,
            // non-constant, so rho = 2 is only bilinear.
            if rho == 1 {
                assert_eq!(lin.verdict, Verdict::Linear);
                assert!(lin.soundness_residual(&field).unwrap() <= COEFF_TOL);
            } else {
                assert_eq!(lin.verdict, Verdict::Neither);
            }
            let bil = check_bilinear(&field, rho).unwrap();
            assert_eq!(bil.verdict, Verdict::Bilinear);
            assert!(bil.soundness_residual(&field).unwrap() <= COEFF_TOL);
            assert!(bil.residual_monomials.is_empty());
        }
    }

    /// Residual set is empty exactly when the verdict is not Neither.
    #[test]
    fn residuals_empty_iff_realizable() {
        let fields = [
            PolyControlAffineField::new(
                vec![poly(1, &[(&[1], -0.3)])],
                vec![vec![Polynomial::constant(1, 1.0)]],
            )
            .unwrap(),
            PolyControlAffineField::new(
                vec![poly(1, &[(&[1], -1.0)])],
                vec![vec![poly(1, &[(&[1], 1.0)])]],
            )
            .unwrap(),
            PolyControlAffineField::new(vec![poly(1, &[(&[2], 1.0)])], vec![]).unwrap(),
        ];
        for field in &fields {
            for rho in 1..=4 {
                for cert in [
                    check_linear(field, rho).unwrap(),
                    check_bilinear(field, rho).unwrap(),
                ] {
                    assert_eq!(
                        cert.residual_monomials.is_empty(),
                        cert.verdict != Verdict::Neither
                    );
                    assert_eq!(cert.coefficients.is_some(), cert.verdict != Verdict::Neither);
                }
            }
        }
    }

    /// Test-local RK4 rollout of a polynomial field with held inputs.
    fn rollout(
        field: &PolyControlAffineField,
        x0: &[f64],
        us: &[Vec<f64>],
        ts: f64,
        substeps: usize,
    ) -> Vec<Vec<f64>> {
        let n = field.state_dim();
        let dt = ts / substeps as f64;
        let mut xs = vec![x0.to_vec()];
        let mut x = x0.to_vec();
        for u in us {
            for _ in 0..substeps {
                let k1 = field.eval(&x, u).unwrap();
                let mid1: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * k1[i]).collect();
                let k2 = field.eval(&mid1, u).unwrap();
                let mid2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * k2[i]).collect();
                let k3 = field.eval(&mid2, u).unwrap();
                let end: Vec<f64> = (0..n).map(|i| x[i] + dt * k3[i]).collect();
                let k4 = field.eval(&end, u).unwrap();
                for i in 0..n {
                    x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            xs.push(x.clone());
        }
        xs
    }

    /// A field certified Bilinear, once sampled fast enough, is identified
    /// by EDMD + bilinear extraction with small open-loop error.
    #[test]
    fn bilinear_certificate_cross_validates_with_edmd() {
        let field = PolyControlAffineField::new(
            vec![poly(1, &[(&[1], -1.0)])],
            vec![vec![poly(1, &[(&[1], 0.5), (&[0], 1.0)])]],
        )
        .unwrap();
        let rho = 1;
        assert_eq!(check_bilinear(&field, rho).unwrap().verdict, Verdict::Bilinear);

        let ts = 0.002;
        let substeps = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut snaps = Vec::new();
        for _ in 0..60 {
            let x0 = vec![rng.gen_range(-1.5..1.5)];
            let mut x = x0;
            for _ in 0..5 {
                let u = vec![rng.gen_range(-1.0..1.0)];
                let next = rollout(&field, &x, std::slice::from_ref(&u), ts, substeps);
                snaps.push(Snapshot {
                    p: DVector::from_column_slice(&x),
                    q: DVector::from_column_slice(&next[1]),
                    u: DVector::from_column_slice(&u),
                });
                x = next[1].clone();
            }
        }
        let dataset = SnapshotDataset {
            ts,
            seed: 23,
            snapshots: snaps,
        };
        let basis = Basis::new(BasisSpec::new(BasisFamily::Bilinear, 1, 1, rho).unwrap()).unwrap();
        let k = fit_koopman(&dataset, &basis, Ridge::Auto).unwrap();
        let model = Model::Bilinear(extract_bilinear(&k).unwrap());

        // Fresh validation episodes.
        let mut episodes = Vec::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..5 {
            let x0 = vec![rng2.gen_range(0.5..1.5)];
            let us: Vec<Vec<f64>> = (0..20).map(|_| vec![rng2.gen_range(-1.0..1.0)]).collect();
            let xs = rollout(&field, &x0, &us, ts, substeps);
            episodes.push(PredictionEpisode {
                x0: DVector::from_column_slice(&x0),
                u_seq: us.iter().map(|u| DVector::from_column_slice(u)).collect(),
                x_true: xs.iter().map(|x| DVector::from_column_slice(x)).collect(),
            });
        }
        let report = prediction_error(&model, &episodes).unwrap();
        assert!(
            report.normalized_error < 1e-4,
            "normalized error {} too large",
            report.normalized_error
        );
    }

    #[test]
    fn field_text_round_trip() {
        let text = "\
# Duffing with input
1 : 1 * x2
2 : -1 * x1
2 : -1 * x1^3
2 : 1 * u1
";
        let field = parse_field_text(text, 2, 1).unwrap();
        assert_eq!(field.fx[0], Polynomial::variable(2, 1));
        assert_eq!(
            field.fx[1],
            poly(2, &[(&[1, 0], -1.0), (&[3, 0], -1.0)])
        );
        assert_eq!(field.fu[0][1], Polynomial::constant(2, 1.0));
        assert!(field.fu[0][0].is_zero());
        let rendered = field_to_text(&field);
        let reparsed = parse_field_text(&rendered, 2, 1).unwrap();
        assert_eq!(reparsed, field);
    }

    #[test]
    fn field_text_errors_name_the_line() {
        let bad = "1 : 1 * x9";
        match parse_field_text(bad, 2, 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_field_text("nonsense", 2, 1).is_err());
        assert!(parse_field_text("1 : 1 * u1 * u1", 2, 1).is_err());
    }

    #[test]
    fn polynomial_algebra_basics() {
        let p = poly(2, &[(&[1, 0], 2.0), (&[0, 1], -1.0)]);
        let q = poly(2, &[(&[1, 0], 1.0), (&[0, 0], 3.0)]);
        let prod = p.multiply(&q);
        // (2x1 - x2)(x1 + 3) = 2x1^2 - x1 x2 + 6 x1 - 3 x2.
        assert_eq!(prod.coefficient(&MultiIndex::new(vec![2, 0])), 2.0);
        assert_eq!(prod.coefficient(&MultiIndex::new(vec![1, 1])), -1.0);
        assert_eq!(prod.coefficient(&MultiIndex::new(vec![1, 0])), 6.0);
        assert_eq!(prod.coefficient(&MultiIndex::new(vec![0, 1])), -3.0);
        assert_eq!(prod.degree(), 2);
        // Cancellation removes entries.
        let mut r = p.clone();
        r.add_term(MultiIndex::new(vec![1, 0]), -2.0);
        assert_eq!(r.coefficient(&MultiIndex::new(vec![1, 0])), 0.0);
        assert_eq!(r.terms().count(), 1);
        // Display is stable.
        assert_eq!(format!("{}", Polynomial::zero(2)), "0");
    }
}
