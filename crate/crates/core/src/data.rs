//! Data containers, balancing designs and estimating functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A sample with always-observed covariates and an outcome that is missing
/// for nonrespondents.
///
/// Covariates are stored row-major. The response indicator and the outcome
/// mask always agree: `y(i)` is `Some` exactly when `delta(i)` is true.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    n: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<Option<f64>>,
    delta: Vec<bool>,
    covariate_names: Vec<String>,
}

impl Sample {
    /// Build a sample whose response indicator is the presence of `y`.
    pub fn from_rows(rows: &[Vec<f64>], y: Vec<Option<f64>>) -> Result<Self> {
        let delta = y.iter().map(Option::is_some).collect();
        Self::with_indicator(rows, y, delta)
    }

    /// Build a sample with an explicit response indicator. Outcomes of units
    /// with `delta = false` are masked.
    pub fn with_indicator(rows: &[Vec<f64>], y: Vec<Option<f64>>, delta: Vec<bool>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut x = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} covariates, expected {d}",
                    r.len()
                )));
            }
            x.extend_from_slice(r);
        }
        Self::from_flat(n, d, x, y, delta)
    }

    /// Build from row-major covariates.
    pub fn from_flat(
        n: usize,
        d: usize,
        x: Vec<f64>,
        y: Vec<Option<f64>>,
        delta: Vec<bool>,
    ) -> Result<Self> {
        if x.len() != n * d || y.len() != n || delta.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "n = {n}, d = {d}: got {} covariate cells, {} outcomes, {} indicators",
                x.len(),
                y.len(),
                delta.len()
            )));
        }
        let mut y = y;
        for (yi, &di) in y.iter_mut().zip(&delta) {
            if !di {
                *yi = None;
            }
        }
        let sample = Sample {
            n,
            d,
            x,
            y,
            delta,
            covariate_names: (1..=d).map(|j| format!("x{j}")).collect(),
        };
        validate(&sample)?;
        Ok(sample)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {} covariates",
                names.len(),
                self.d
            )));
        }
        self.covariate_names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self, i: usize) -> Option<f64> {
        self.y[i]
    }

    pub fn delta(&self, i: usize) -> bool {
        self.delta[i]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Indices of respondents in increasing order.
    pub fn respondents(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.delta[i]).collect()
    }

    pub fn n_respondents(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    pub fn n_nonrespondents(&self) -> usize {
        self.n - self.n_respondents()
    }

    /// Covariates as an `n x d` matrix.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.x)
    }

    /// Sample made of the given units (with repetition allowed), e.g. a
    /// bootstrap replicate.
    pub fn subset(&self, idx: &[usize]) -> Result<Sample> {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        let mut y = Vec::with_capacity(idx.len());
        let mut delta = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
            y.push(self.y[i]);
            delta.push(self.delta[i]);
        }
        let mut s = Sample::from_flat(idx.len(), self.d, x, y, delta)?;
        s.covariate_names = self.covariate_names.clone();
        Ok(s)
    }

    /// Same sample with the outcome replaced by `f(y)` on respondents.
    pub fn map_outcome(&self, f: impl Fn(f64) -> f64) -> Sample {
        let mut s = self.clone();
        for v in s.y.iter_mut().flatten() {
            *v = f(*v);
        }
        s
    }
}

/// Check the coding invariants of a sample.
pub fn validate(sample: &Sample) -> Result<()> {
    if sample.n == 0 {
        return Err(Error::EmptyRespondents);
    }
    for i in 0..sample.n {
        match (sample.delta[i], sample.y[i]) {
            (true, None) => return Err(Error::MissingObservedOutcome { index: i }),
            (true, Some(v)) if !v.is_finite() => {
                return Err(Error::NonFinite(format!("outcome of unit {i}")))
            }
            _ => {}
        }
    }
    if let Some(pos) = sample.x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "covariate {} of unit {}",
            pos % sample.d.max(1),
            pos / sample.d.max(1)
        )));
    }
    if !sample.delta.iter().any(|&d| d) {
        return Err(Error::EmptyRespondents);
    }
    Ok(())
}

/// One balancing function of the covariate vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// The covariate itself.
    Column(usize),
    /// `x[column]^exponent`.
    Power { column: usize, exponent: i32 },
    /// `x[a] * x[b]`.
    Product(usize, usize),
    /// A fixed linear projection `w . x`.
    Linear(Vec<f64>),
}

impl Basis {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Basis::Column(j) => x[*j],
            Basis::Power { column, exponent } => x[*column].powi(*exponent),
            Basis::Product(a, b) => x[*a] * x[*b],
            Basis::Linear(w) => linalg::dot(w, x),
        }
    }

    /// Largest covariate index read by this function, if any.
    fn max_index(&self) -> Option<usize> {
        match self {
            Basis::Column(j) | Basis::Power { column: j, .. } => Some(*j),
            Basis::Product(a, b) => Some(*a.max(b)),
            Basis::Linear(w) => w.len().checked_sub(1),
        }
    }

    /// Covariate indices with a nonzero influence on the value.
    pub fn columns(&self) -> Vec<usize> {
        match self {
            Basis::Column(j) | Basis::Power { column: j, .. } => vec![*j],
            Basis::Product(a, b) => vec![*a, *b],
            Basis::Linear(w) => (0..w.len()).filter(|&j| w[j] != 0.0).collect(),
        }
    }

    pub fn label(&self, names: &[String]) -> String {
        let name = |j: usize| names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
        match self {
            Basis::Column(j) => name(*j),
            Basis::Power { column, exponent } => format!("{}^{}", name(*column), exponent),
            Basis::Product(a, b) => format!("{}*{}", name(*a), name(*b)),
            Basis::Linear(w) => {
                let terms: Vec<String> = w
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| **c != 0.0)
                    .map(|(j, c)| format!("{c}*{}", name(j)))
                    .collect();
                terms.join("+")
            }
        }
    }
}

/// Ordered balancing functions `b_1..b_L`; the intercept is implicit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BalancingDesign {
    pub basis: Vec<Basis>,
}

impl BalancingDesign {
    pub fn new(basis: Vec<Basis>) -> Self {
        BalancingDesign { basis }
    }

    pub fn intercept_only() -> Self {
        BalancingDesign::default()
    }

    /// `b(x) = (x_c)` for the given columns, in order.
    pub fn linear(columns: &[usize]) -> Self {
        BalancingDesign::new(columns.iter().map(|&j| Basis::Column(j)).collect())
    }

    /// `b(x) = x`.
    pub fn identity(d: usize) -> Self {
        Self::linear(&(0..d).collect::<Vec<_>>())
    }

    /// Number of balancing functions `L` (excluding the intercept).
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, b) in out.iter_mut().zip(&self.basis) {
            *o = b.eval(x);
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|b| b.eval(x)).collect()
    }

    pub fn check_dimension(&self, d: usize) -> Result<()> {
        for b in &self.basis {
            if let Some(j) = b.max_index() {
                if j >= d {
                    return Err(Error::DimensionMismatch(format!(
                        "balancing function reads covariate {j} but only {d} are available"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self, names: &[String]) -> Vec<String> {
        self.basis.iter().map(|b| b.label(names)).collect()
    }

    /// Parse comma-separated terms such as `x1,x2^2,x1*x3` against covariate names.
    pub fn parse(spec: &str, names: &[String]) -> Result<Self> {
        let lookup = |s: &str| -> Result<usize> {
            let s = s.trim();
            names
                .iter()
                .position(|n| n == s)
                .ok_or_else(|| Error::BadColumn(s.to_string()))
        };
        let mut basis = Vec::new();
        for term in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if let Some((a, b)) = term.split_once('*') {
                basis.push(Basis::Product(lookup(a)?, lookup(b)?));
            } else if let Some((a, e)) = term.split_once('^') {
                let exponent = e.trim().parse::<i32>().map_err(|_| {
                    Error::InvalidArgument(format!("bad exponent in balancing term `{term}`"))
                })?;
                basis.push(Basis::Power {
                    column: lookup(a)?,
                    exponent,
                });
            } else {
                basis.push(Basis::Column(lookup(term)?));
            }
        }
        Ok(BalancingDesign { basis })
    }
}

/// Rows `z_i = (1, b(x_i))`, optionally restricted to respondents.
///
/// Fails with `RankDeficient` when the respondent rows do not have full
/// column rank `L + 1`.
pub fn design_matrix(
    sample: &Sample,
    design: &BalancingDesign,
    respondents_only: bool,
) -> Result<DMatrix<f64>> {
    design.check_dimension(sample.d())?;
    let k = design.len() + 1;
    let fill = |rows: &[usize]| {
        let mut z = DMatrix::zeros(rows.len(), k);
        let mut buf = vec![0.0; design.len()];
        for (r, &i) in rows.iter().enumerate() {
            z[(r, 0)] = 1.0;
            design.eval_into(sample.x_row(i), &mut buf);
            for (j, v) in buf.iter().enumerate() {
                z[(r, j + 1)] = *v;
            }
        }
        z
    };
    let resp = sample.respondents();
    let zr = fill(&resp);
    check_full_rank(&zr)?;
    if respondents_only {
        Ok(zr)
    } else {
        Ok(fill(&(0..sample.n()).collect::<Vec<_>>()))
    }
}

pub(crate) fn check_full_rank(z: &DMatrix<f64>) -> Result<()> {
    let k = z.ncols();
    if z.nrows() < k {
        return Err(Error::RankDeficient {
            rank: z.nrows(),
            required: k,
        });
    }
    let rank = linalg::column_scaled_rank(z);
    if rank < k {
        return Err(Error::RankDeficient { rank, required: k });
    }
    Ok(())
}

/// An estimating function `U(theta; x, y)` defining the target parameter as
/// the root of `E{U} = 0`.
pub trait EstimatingFunction: Send + Sync {
    /// Parameter dimension `p`.
    fn dim(&self) -> usize;

    fn eval(&self, theta: &[f64], x: &[f64], y: &[f64]) -> DVector<f64>;

    /// `dU / dtheta^T`, a `p x p` matrix.
    fn jacobian(&self, theta: &[f64], x: &[f64], y: &[f64]) -> DMatrix<f64>;

    fn initial_guess(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn name(&self) -> String;
}

/// `U = y - theta` componentwise over the first `p` outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct Mean {
    p: usize,
}

impl Mean {
    pub fn new(p: usize) -> Self {
        Mean { p }
    }

    pub fn scalar() -> Self {
        Mean { p: 1 }
    }
}

impl EstimatingFunction for Mean {
    fn dim(&self) -> usize {
        self.p
    }

    fn eval(&self, theta: &[f64], _x: &[f64], y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.p, (0..self.p).map(|k| y[k] - theta[k]))
    }

    fn jacobian(&self, _theta: &[f64], _x: &[f64], _y: &[f64]) -> DMatrix<f64> {
        -DMatrix::identity(self.p, self.p)
    }

    fn name(&self) -> String {
        "mean".into()
    }
}

/// `U = 1(y_a <= y_b) - theta`, e.g. the probability `P(Y_a <= Y_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Indicator {
    pub a: usize,
    pub b: usize,
}

impl EstimatingFunction for Indicator {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, theta: &[f64], _x: &[f64], y: &[f64]) -> DVector<f64> {
        let ind = if y[self.a] <= y[self.b] { 1.0 } else { 0.0 };
        DVector::from_element(1, ind - theta[0])
    }

    fn jacobian(&self, _theta: &[f64], _x: &[f64], _y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -1.0)
    }

    fn name(&self) -> String {
        format!("P(y{} <= y{})", self.a + 1, self.b + 1)
    }
}

/// Least-squares normal equations `U = (1, x) (y - (1, x)^T theta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LeastSquares {
    d: usize,
}

impl LeastSquares {
    pub fn new(d: usize) -> Self {
        LeastSquares { d }
    }
}

impl EstimatingFunction for LeastSquares {
    fn dim(&self) -> usize {
        self.d + 1
    }

    fn eval(&self, theta: &[f64], x: &[f64], y: &[f64]) -> DVector<f64> {
        let fit = theta[0] + linalg::dot(&theta[1..], &x[..self.d]);
        let r = y[0] - fit;
        DVector::from_iterator(self.d + 1, std::iter::once(r).chain(x[..self.d].iter().map(|v| v * r)))
    }

    fn jacobian(&self, _theta: &[f64], x: &[f64], _y: &[f64]) -> DMatrix<f64> {
        let mut xt = Vec::with_capacity(self.d + 1);
        xt.push(1.0);
        xt.extend_from_slice(&x[..self.d]);
        let v = DVector::from_vec(xt);
        -(&v * v.transpose())
    }

    fn name(&self) -> String {
        "least_squares".into()
    }
}

/// Outcomes for several study variables with per-cell missingness, plus
/// optional fully observed covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSample {
    n: usize,
    p: usize,
    y: Vec<Option<f64>>,
    d: usize,
    x: Vec<f64>,
    outcome_names: Vec<String>,
    covariate_names: Vec<String>,
}

impl MultiSample {
    /// `y` is row-major `n x p`; `x` is row-major `n x d` (use `d = 0` for none).
    pub fn new(n: usize, p: usize, y: Vec<Option<f64>>, d: usize, x: Vec<f64>) -> Result<Self> {
        if y.len() != n * p || x.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "n = {n}, p = {p}, d = {d}: got {} outcome cells and {} covariate cells",
                y.len(),
                x.len()
            )));
        }
        if p == 0 || p > 63 {
            return Err(Error::InvalidArgument(format!(
                "number of outcomes must be in 1..=63, got {p}"
            )));
        }
        if y.iter().flatten().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("multivariate sample".into()));
        }
        let ms = MultiSample {
            n,
            p,
            y,
            d,
            x,
            outcome_names: (1..=p).map(|k| format!("y{k}")).collect(),
            covariate_names: (1..=d).map(|k| format!("x{k}")).collect(),
        };
        if !(0..n).any(|i| ms.is_complete(i)) {
            return Err(Error::NoCompleteCases);
        }
        Ok(ms)
    }

    pub fn with_names(mut self, outcomes: Vec<String>, covariates: Vec<String>) -> Result<Self> {
        if outcomes.len() != self.p || covariates.len() != self.d {
            return Err(Error::DimensionMismatch("column names".into()));
        }
        self.outcome_names = outcomes;
        self.covariate_names = covariates;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn y_cell(&self, i: usize, k: usize) -> Option<f64> {
        self.y[i * self.p + k]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn is_complete(&self, i: usize) -> bool {
        (0..self.p).all(|k| self.y_cell(i, k).is_some())
    }

    /// Bitmask of observed outcomes (bit `k` set when `Y_k` is observed).
    pub fn observed_mask(&self, i: usize) -> u64 {
        (0..self.p).fold(0u64, |m, k| {
            if self.y_cell(i, k).is_some() {
                m | (1 << k)
            } else {
                m
            }
        })
    }

    /// Outcome vector of a complete row.
    pub fn y_complete(&self, i: usize) -> Vec<f64> {
        (0..self.p).map(|k| self.y_cell(i, k).unwrap_or(f64::NAN)).collect()
    }

    /// Concatenated `(x, y)` with unobserved outcomes set to NaN. Pattern
    /// designs index into this vector.
    pub fn joint_row(&self, i: usize) -> Vec<f64> {
        let mut v = self.x_row(i).to_vec();
        v.extend((0..self.p).map(|k| self.y_cell(i, k).unwrap_or(f64::NAN)));
        v
    }

    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Names of the joint `(x, y)` vector.
    pub fn joint_names(&self) -> Vec<String> {
        self.covariate_names
            .iter()
            .chain(&self.outcome_names)
            .cloned()
            .collect()
    }
}
