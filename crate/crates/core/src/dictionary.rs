//! Candidate feature libraries and the linear right-hand side they span.
//!
//! A library is an ordered list of scalar features `g_j: R^d -> R`. The
//! vector field is `f(x) = theta^T g(x)` with `theta` an `s x d` coefficient
//! matrix, one column per state dimension.
//!
//! Polynomial features come first in graded-lexicographic exponent order
//! (degree ascending; within a degree, larger powers of earlier coordinates
//! first), then the per-coordinate `exp`, `sin` and `cos` blocks.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySpec {
    pub poly_order: u32,
    #[serde(rename = "exp", default)]
    pub include_exp: bool,
    #[serde(rename = "sin", default)]
    pub include_sin: bool,
    #[serde(rename = "cos", default)]
    pub include_cos: bool,
    #[serde(rename = "dim")]
    pub dim: usize,
}

impl LibrarySpec {
    pub fn poly(poly_order: u32, dim: usize) -> Self {
        LibrarySpec {
            poly_order,
            include_exp: false,
            include_sin: false,
            include_cos: false,
            dim,
        }
    }

    pub fn with_exp(mut self) -> Self {
        self.include_exp = true;
        self
    }

    pub fn with_trig(mut self) -> Self {
        self.include_sin = true;
        self.include_cos = true;
        self
    }

    /// Number of features the spec produces.
    pub fn size(&self) -> usize {
        let per_coord = [self.include_exp, self.include_sin, self.include_cos]
            .iter()
            .filter(|&&b| b)
            .count();
        binomial(self.poly_order as usize + self.dim, self.poly_order as usize)
            + per_coord * self.dim
    }
}

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Feature {
    /// Product of coordinate powers; `exponents.len() == d`.
    Monomial(Vec<u32>),
    Exp(usize),
    Sin(usize),
    Cos(usize),
}

impl Feature {
    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Feature::Monomial(e) => e
                .iter()
                .zip(x)
                .filter(|(&p, _)| p > 0)
                .fold(1.0, |acc, (&p, &v)| acc * v.powi(p as i32)),
            Feature::Exp(k) => x[*k].exp(),
            Feature::Sin(k) => x[*k].sin(),
            Feature::Cos(k) => x[*k].cos(),
        }
    }

    /// Adds `w * grad g(x)` into `out`.
    #[inline]
    fn add_scaled_grad(&self, x: &[f64], w: f64, out: &mut [f64]) {
        match self {
            Feature::Monomial(e) => {
                for k in 0..e.len() {
                    if e[k] == 0 {
                        continue;
                    }
                    let mut g = e[k] as f64 * x[k].powi(e[k] as i32 - 1);
                    for (m, (&p, &v)) in e.iter().zip(x).enumerate() {
                        if m != k && p > 0 {
                            g *= v.powi(p as i32);
                        }
                    }
                    out[k] += w * g;
                }
            }
            Feature::Exp(k) => out[*k] += w * x[*k].exp(),
            Feature::Sin(k) => out[*k] += w * x[*k].cos(),
            Feature::Cos(k) => out[*k] -= w * x[*k].sin(),
        }
    }

    fn name(&self) -> String {
        match self {
            Feature::Monomial(e) => {
                let parts: Vec<String> = e
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0)
                    .map(|(k, &p)| {
                        if p == 1 {
                            format!("x{}", k + 1)
                        } else {
                            format!("x{}^{}", k + 1, p)
                        }
                    })
                    .collect();
                if parts.is_empty() {
                    "1".to_string()
                } else {
                    parts.join("*")
                }
            }
            Feature::Exp(k) => format!("exp(x{})", k + 1),
            Feature::Sin(k) => format!("sin(x{})", k + 1),
            Feature::Cos(k) => format!("cos(x{})", k + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateLibrary {
    dim: usize,
    features: Vec<Feature>,
    names: Vec<String>,
}

/// Exponent vectors of total degree `deg` in `d` variables, earlier
/// coordinates taking the larger powers first.
fn exponents_of_degree(d: usize, deg: u32) -> Vec<Vec<u32>> {
    if d == 1 {
        return vec![vec![deg]];
    }
    let mut out = Vec::new();
    for first in (0..=deg).rev() {
        for mut rest in exponents_of_degree(d - 1, deg - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

pub fn build_library(spec: &LibrarySpec) -> CandidateLibrary {
    let d = spec.dim;
    let mut features: Vec<Feature> = (0..=spec.poly_order)
        .flat_map(|deg| exponents_of_degree(d, deg))
        .map(Feature::Monomial)
        .collect();
    if spec.include_exp {
        features.extend((0..d).map(Feature::Exp));
    }
    if spec.include_sin {
        features.extend((0..d).map(Feature::Sin));
    }
    if spec.include_cos {
        features.extend((0..d).map(Feature::Cos));
    }
    CandidateLibrary::from_features(d, features).expect("generated library is valid")
}

impl CandidateLibrary {
    pub fn from_features(dim: usize, features: Vec<Feature>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("library dimension must be >= 1".into()));
        }
        if features.is_empty() {
            return Err(Error::Domain("library must hold at least one feature".into()));
        }
        for f in &features {
            let ok = match f {
                Feature::Monomial(e) => e.len() == dim,
                Feature::Exp(k) | Feature::Sin(k) | Feature::Cos(k) => *k < dim,
            };
            if !ok {
                return Err(Error::Shape(format!("feature {f:?} does not fit dimension {dim}")));
            }
        }
        let names: Vec<String> = features.iter().map(Feature::name).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Domain(format!("duplicate feature `{n}`")));
            }
        }
        Ok(CandidateLibrary {
            dim,
            features,
            names,
        })
    }

    /// Library made of the named features of `self`, in the given order.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let features = names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .map(|j| self.features[j].clone())
                    .ok_or_else(|| Error::Domain(format!("no feature named `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        CandidateLibrary::from_features(self.dim, features)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Writes `g(x)` into `out` without checking finiteness.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.features) {
            *o = f.eval(x);
        }
    }

    pub fn eval_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_point(x, self.dim)?;
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        if let Some(j) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                what: format!("feature `{}`", self.names[j]),
            });
        }
        Ok(out)
    }

    /// `s x d` matrix of feature gradients at `x`.
    pub fn feature_jacobian(&self, x: &[f64]) -> Array2<f64> {
        let mut jac = Array2::zeros((self.len(), self.dim));
        for (j, f) in self.features.iter().enumerate() {
            let mut row = vec![0.0; self.dim];
            f.add_scaled_grad(x, 1.0, &mut row);
            for (k, v) in row.into_iter().enumerate() {
                jac[[j, k]] = v;
            }
        }
        jac
    }

    /// `out = sum_j w_j grad g_j(x)` (vector-Jacobian product of the features).
    #[inline]
    pub fn features_vjp(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (f, &wj) in self.features.iter().zip(w) {
            if wj != 0.0 {
                f.add_scaled_grad(x, wj, out);
            }
        }
    }

    /// `out = theta^T g(x)`; `scratch` must hold `s` entries.
    #[inline]
    pub fn rhs_into(&self, theta: ArrayView2<f64>, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.eval_into(x, scratch);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &g) in scratch.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = theta.row(j);
            for (o, &t) in out.iter_mut().zip(row.iter()) {
                *o += t * g;
            }
        }
    }

    /// `out = J_f(x)^T a` where `J_f` is the Jacobian of the vector field.
    #[inline]
    pub fn rhs_vjp_into(&self, theta: ArrayView2<f64>, x: &[f64], a: &[f64], w: &mut [f64], out: &mut [f64]) {
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = theta.row(j).iter().zip(a).map(|(t, v)| t * v).sum();
        }
        self.features_vjp(x, w, out);
    }

    pub fn eval_rhs(&self, theta: &CoefficientMatrix, x: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let g = self.eval_features(x)?;
        let mut out = vec![0.0; self.dim];
        for (j, gj) in g.iter().enumerate() {
            for (k, o) in out.iter_mut().enumerate() {
                *o += theta.values()[[j, k]] * gj;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                what: "right-hand side".into(),
            });
        }
        Ok(out)
    }

    /// `d x d` Jacobian, entry `(i, k) = d f_i / d x_k`.
    pub fn rhs_jacobian(&self, theta: &CoefficientMatrix, x: &[f64]) -> Result<Array2<f64>> {
        self.check_theta(theta)?;
        check_point(x, self.dim)?;
        let gj = self.feature_jacobian(x);
        let jac = theta.values().t().dot(&gj);
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                what: "right-hand-side Jacobian".into(),
            });
        }
        Ok(jac)
    }

    pub fn check_theta(&self, theta: &CoefficientMatrix) -> Result<()> {
        let (s, d) = theta.values().dim();
        if s != self.len() || d != self.dim {
            return Err(Error::Shape(format!(
                "coefficients are {s}x{d}, library needs {}x{}",
                self.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Re-expresses `theta` (over `from`) in this library by feature name.
    /// Fails if a nonzero coefficient has no counterpart here.
    pub fn embed(&self, theta: &CoefficientMatrix, from: &CandidateLibrary) -> Result<CoefficientMatrix> {
        from.check_theta(theta)?;
        if from.dim != self.dim {
            return Err(Error::Shape("libraries have different dimensions".into()));
        }
        let mut out = CoefficientMatrix::zeros(self.len(), self.dim);
        for (j, name) in from.names.iter().enumerate() {
            let row = theta.values().row(j);
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            let target = self
                .index_of(name)
                .ok_or_else(|| Error::Domain(format!("feature `{name}` is not in the target library")))?;
            out.values_mut().row_mut(target).assign(&row);
        }
        Ok(out)
    }
}

fn check_point(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::Shape(format!("point has length {}, expected {d}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("point has non-finite entries".into()));
    }
    Ok(())
}

/// `s x d` coefficient matrix; column `k` holds the weights of `f_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMatrix(Array2<f64>);

impl CoefficientMatrix {
    pub fn zeros(s: usize, d: usize) -> Self {
        CoefficientMatrix(Array2::zeros((s, d)))
    }

    pub fn from_array(values: Array2<f64>) -> Self {
        CoefficientMatrix(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    /// Nonzero entries as `(feature, dimension)` pairs, row-major.
    pub fn support(&self) -> Vec<(usize, usize)> {
        self.0
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|(ix, _)| ix)
            .collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    /// Human-readable equations, one per state dimension.
    pub fn describe(&self, lib: &CandidateLibrary) -> Vec<String> {
        (0..self.cols())
            .map(|k| {
                let terms: Vec<String> = (0..self.rows())
                    .filter(|&j| self.0[[j, k]] != 0.0)
                    .map(|j| format!("{:+.6}*{}", self.0[[j, k]], lib.names()[j]))
                    .collect();
                let rhs = if terms.is_empty() { "0".to_string() } else { terms.join(" ") };
                format!("dx{}/dt = {}", k + 1, rhs)
            })
            .collect()
    }
}

impl fmt::Display for CoefficientMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// On-disk form of a coefficient matrix: feature names plus one row of `d`
/// weights per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaFile {
    pub names: Vec<String>,
    pub theta: Vec<Vec<f64>>,
}

impl CoefficientMatrix {
    pub fn to_file(&self, lib: &CandidateLibrary) -> ThetaFile {
        ThetaFile {
            names: lib.names().to_vec(),
            theta: self.0.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    /// Rebuilds the matrix for `lib`; names must match the library exactly.
    pub fn from_file(file: &ThetaFile, lib: &CandidateLibrary) -> Result<Self> {
        if file.names != lib.names() {
            return Err(Error::Shape("coefficient file names do not match the library".into()));
        }
        let d = lib.dim();
        if file.theta.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("every coefficient row must have {d} entries")));
        }
        let flat: Vec<f64> = file.theta.iter().flatten().copied().collect();
        let m = Array2::from_shape_vec((lib.len(), d), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(CoefficientMatrix(m))
    }

    pub fn save_json(&self, lib: &CandidateLibrary, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file(lib))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(lib: &CandidateLibrary, path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ThetaFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        Self::from_file(&file, lib)
    }
}
