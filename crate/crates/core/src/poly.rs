//! Real multivariate polynomials in the graded monomial order used for all
//! moment-matrix row and column labels.
//!
//! Within one total degree, exponent vectors are sorted lexicographically
//! descending with the first variable most significant, so for two variables
//! and degree two the basis reads `1, X1, X2, X1^2, X1 X2, X2^2`.

use std::cmp::Ordering;
use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Exponent vector of a monomial `X^alpha`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(n: usize) -> Self {
        Monomial(vec![0; n])
    }

    /// The monomial `X_i` (zero based index).
    pub fn var(n: usize, i: usize) -> Self {
        let mut e = vec![0; n];
        e[i] = 1;
        Monomial(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `X^alpha * X^beta = X^(alpha + beta)`.
    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(&e, &xi)| xi.powi(e as i32)).product()
    }
}

/// Graded order: lower total degree first, then lexicographically descending.
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree().cmp(&other.degree()).then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.degree() == 0 {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            write!(f, "X{}", i + 1)?;
            if e > 1 {
                write!(f, "^{e}")?;
            }
        }
        Ok(())
    }
}

/// Sparse real polynomial; zero coefficients are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    n: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(n: usize) -> Self {
        Polynomial {
            n,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(n);
        p.add_term(Monomial::one(n), c);
        p
    }

    pub fn var(n: usize, i: usize) -> Self {
        let mut p = Polynomial::zero(n);
        p.add_term(Monomial::var(n, i), 1.0);
        p
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let mut p = Polynomial::zero(m.nvars());
        p.add_term(m, c);
        p
    }

    /// Builds a polynomial from `(exponents, coefficient)` pairs; repeated
    /// monomials are summed.
    pub fn from_terms<I>(n: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let mut p = Polynomial::zero(n);
        for (e, c) in terms {
            if e.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: e.len(),
                });
            }
            if !c.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite coefficient {c}")));
            }
            p.add_term(Monomial(e), c);
        }
        Ok(p)
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.nvars(), self.n);
        match self.terms.entry(m) {
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
            Entry::Vacant(v) => {
                if c != 0.0 {
                    v.insert(c);
                }
            }
        }
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; `None` stands for the zero polynomial (degree -inf).
    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(Monomial::degree).max()
    }

    /// Degree with the zero polynomial mapped to 0, for bookkeeping where a
    /// zero polynomial imposes no bound.
    pub fn degree_or_zero(&self) -> u32 {
        self.degree().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |acc, c| acc.max(c.abs()))
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.n);
        for (m, c) in self.terms() {
            out.add_term(m.clone(), s * c);
        }
        out
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        Ok(self.terms().map(|(m, c)| c * m.evaluate(x)).sum())
    }

    fn check_same_n(&self, other: &Polynomial) {
        assert_eq!(self.n, other.n, "polynomials over different variable counts");
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;

    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.check_same_n(rhs);
        let mut out = self.clone();
        for (m, c) in rhs.terms() {
            out.add_term(m.clone(), c);
        }
        out
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;

    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.check_same_n(rhs);
        let mut out = self.clone();
        for (m, c) in rhs.terms() {
            out.add_term(m.clone(), -c);
        }
        out
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;

    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.check_same_n(rhs);
        let mut out = Polynomial::zero(self.n);
        for (ma, ca) in self.terms() {
            for (mb, cb) in rhs.terms() {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;

    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        for (i, (m, c)) in self.terms().enumerate() {
            if i > 0 {
                write!(f, " {} ", if c < 0.0 { '-' } else { '+' })?;
            } else if c < 0.0 {
                write!(f, "-")?;
            }
            if m.degree() == 0 {
                write!(f, "{}", c.abs())?;
            } else if c.abs() == 1.0 {
                write!(f, "{m}")?;
            } else {
                write!(f, "{}*{m}", c.abs())?;
            }
        }
        Ok(())
    }
}

/// Number of monomials of degree at most `d` in `n` variables, `C(n+d, n)`.
pub fn basis_size(n: usize, d: u32) -> usize {
    binomial(n + d as usize, n)
}

/// Number of monomials of degree exactly `d` in `n` variables.
pub fn forms_count(n: usize, d: u32) -> usize {
    binomial(n + d as usize - 1, n - 1)
}

fn binomial(a: usize, b: usize) -> usize {
    let b = b.min(a - b);
    (0..b).fold(1usize, |acc, i| acc * (a - i) / (i + 1))
}

/// The ordered monomial basis of polynomials of degree at most `d`.
#[derive(Debug, Clone)]
pub struct MonomialBasis {
    n: usize,
    d: u32,
    monomials: Vec<Monomial>,
    index: HashMap<Monomial, usize>,
}

impl MonomialBasis {
    pub fn new(n: usize, d: u32) -> Self {
        assert!(n >= 1, "at least one variable is required");
        let mut monomials = Vec::with_capacity(basis_size(n, d));
        for t in 0..=d {
            let mut buf = vec![0u32; n];
            push_forms(&mut monomials, &mut buf, 0, t);
        }
        let index = monomials.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        MonomialBasis { n, d, monomials, index }
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> u32 {
        self.d
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn get(&self, i: usize) -> &Monomial {
        &self.monomials[i]
    }

    pub fn index_of(&self, m: &Monomial) -> Option<usize> {
        self.index.get(m).copied()
    }

    /// Number of basis elements of degree at most `t` (a prefix length).
    pub fn prefix_len(&self, t: u32) -> usize {
        basis_size(self.n, t.min(self.d))
    }

    /// `V_d(x)`: every basis monomial evaluated at `x`.
    pub fn evaluate(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.monomials.iter().map(|m| m.evaluate(x)))
    }
}

fn push_forms(out: &mut Vec<Monomial>, buf: &mut [u32], pos: usize, remaining: u32) {
    if pos + 1 == buf.len() {
        buf[pos] = remaining;
        out.push(Monomial(buf.to_vec()));
        return;
    }
    for e in (0..=remaining).rev() {
        buf[pos] = e;
        push_forms(out, buf, pos + 1, remaining - e);
    }
    buf[pos] = 0;
}

/// The `V_d` monomial ordering for `n` variables up to degree `d`.
pub fn monomials_up_to(n: usize, d: u32) -> MonomialBasis {
    MonomialBasis::new(n, d)
}

/// Coefficient vector of `p` in `basis`.
pub fn vectorize(p: &Polynomial, basis: &MonomialBasis) -> Result<DVector<f64>> {
    if p.nvars() != basis.nvars() {
        return Err(Error::DimensionMismatch {
            expected: basis.nvars(),
            got: p.nvars(),
        });
    }
    if let Some(deg) = p.degree() {
        if deg > basis.degree() {
            return Err(Error::DegreeOverflow {
                degree: deg,
                bound: basis.degree(),
            });
        }
    }
    let mut v = DVector::zeros(basis.len());
    for (m, c) in p.terms() {
        // degree checked above, so every monomial is present
        v[basis.index_of(m).expect("monomial within degree bound")] = c;
    }
    Ok(v)
}

/// Inverse of [`vectorize`]; exact zeros are dropped.
pub fn devectorize(v: &DVector<f64>, basis: &MonomialBasis) -> Polynomial {
    let mut p = Polynomial::zero(basis.nvars());
    for (i, &c) in v.iter().enumerate().take(basis.len()) {
        if c != 0.0 {
            p.add_term(basis.get(i).clone(), c);
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(b: &MonomialBasis) -> Vec<String> {
        b.monomials().iter().map(|m| m.to_string()).collect()
    }

    #[test]
    fn univariate_basis() {
        let b = monomials_up_to(1, 2);
        assert_eq!(labels(&b), ["1", "X1", "X1^2"]);
    }

    #[test]
    fn bivariate_basis_order() {
        let b = monomials_up_to(2, 2);
        assert_eq!(labels(&b), ["1", "X1", "X2", "X1^2", "X1*X2", "X2^2"]);
    }

    #[test]
    fn trivariate_basis_order() {
        let b = monomials_up_to(3, 2);
        assert_eq!(
            labels(&b),
            ["1", "X1", "X2", "X3", "X1^2", "X1*X2", "X1*X3", "X2^2", "X2*X3", "X3^2"]
        );
    }

    #[test]
    fn basis_sizes() {
        for n in 1..=4 {
            for d in 0..=6 {
                assert_eq!(monomials_up_to(n, d).len(), basis_size(n, d));
            }
        }
        assert_eq!(basis_size(2, 4), 15);
        assert_eq!(forms_count(2, 4), 5);
        assert_eq!(forms_count(3, 3), 10);
    }

    #[test]
    fn order_is_sorted() {
        let b = monomials_up_to(3, 4);
        assert!(b.monomials().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(b.prefix_len(2), 10);
    }

    #[test]
    fn motzkin_at_one_one() {
        let f = Polynomial::from_terms(
            2,
            [
                (vec![4, 2], 1.0),
                (vec![2, 4], 1.0),
                (vec![2, 2], -3.0),
                (vec![0, 0], 1.0),
            ],
        )
        .unwrap();
        assert_eq!(f.evaluate(&[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_polynomial() {
        let z = Polynomial::zero(3);
        assert_eq!(z.evaluate(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(z.degree(), None);
        let p = Polynomial::var(3, 0);
        assert!((&p - &p).is_zero());
    }

    #[test]
    fn objective_at_reported_minimizer() {
        let f = Polynomial::from_terms(2, [(vec![1, 0], -12.0), (vec![0, 1], -7.0), (vec![0, 2], 1.0)]).unwrap();
        let v = f.evaluate(&[0.7175, 1.4698]).unwrap();
        assert!((v - (-16.7389)).abs() < 1e-3, "{v}");
    }

    #[test]
    fn evaluate_dimension_mismatch() {
        let p = Polynomial::var(2, 0);
        assert!(matches!(p.evaluate(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn vectorize_unit_vectors() {
        let b = monomials_up_to(2, 2);
        let one = vectorize(&Polynomial::constant(2, 1.0), &b).unwrap();
        assert_eq!(one.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let x1 = &Polynomial::var(2, 0) * &Polynomial::constant(2, 1.0);
        let v = vectorize(&x1, &b).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn vectorize_degree_overflow() {
        let b = monomials_up_to(2, 1);
        let p = Polynomial::monomial(Monomial::new(vec![1, 1]), 1.0);
        assert!(matches!(
            vectorize(&p, &b),
            Err(Error::DegreeOverflow { degree: 2, bound: 1 })
        ));
    }

    #[test]
    fn cancellation_removes_terms() {
        let mut p = Polynomial::var(2, 1);
        p.add_term(Monomial::var(2, 1), -1.0);
        assert!(p.is_zero());
        assert_eq!(p.degree(), None);
    }

    #[test]
    fn display_roundtrip_readable() {
        let p = Polynomial::from_terms(2, [(vec![0, 0], -1.0), (vec![2, 1], 3.0)]).unwrap();
        assert_eq!(p.to_string(), "-1 + 3*X1^2*X2");
    }
}
