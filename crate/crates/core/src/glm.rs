//! Logistic regression by IRLS with inferential output.
//!
//! Each Newton step solves the weighted least-squares problem
//! `min ‖√W X δ − (y − p)/√W‖` through a tall-skinny QR: row chunks are
//! factorized independently (in parallel when enabled) and their R factors are
//! stacked and factorized again. Chunk results are always combined in chunk
//! order, so sequential and parallel runs agree bit for bit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

use crate::formula::{ColumnRole, DesignMatrix};
use crate::par::{self, Execution};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;

const WEIGHT_FLOOR: f64 = 1e-20;
const PIN_EPS: f64 = 1e-10;
const ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GlmError {
    #[error("design has {rows} rows but response has {len} values")]
    DimensionMismatch { rows: usize, len: usize },
    #[error("response value {value} at row {row} is not 0 or 1")]
    NonBinaryResponse { row: usize, value: f64 },
    #[error("need more rows than parameters (n = {n}, p = {p})")]
    TooFewRows { n: usize, p: usize },
    #[error("non-finite value in design matrix at row {row}")]
    NonFiniteDesign { row: usize },
    #[error("separation detected after {iterations} iterations (max |beta| = {max_abs_beta:.3})")]
    SeparationDetected { iterations: usize, max_abs_beta: f64 },
    #[error("X'WX is numerically singular (condition number {condition:.3e})")]
    SingularHessian { condition: f64 },
    #[error("did not converge in {iterations} iterations (gradient inf-norm {gradient:.3e})")]
    NotConverged { iterations: usize, gradient: f64 },
    #[error("null model log-likelihood was not computed")]
    NullNotFitted,
    #[error("design columns do not match the fitted model (expected {expected:?}, got {got:?})")]
    ColumnMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("covariance block for term `{0}` is singular")]
    SingularBlock(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Converged when the gradient inf-norm falls below this.
    pub gradient_tolerance: f64,
    /// Also converged when |Δℓ| is below this and the gradient inf-norm is
    /// below `relaxed_gradient_tolerance`.
    pub loglik_tolerance: f64,
    pub relaxed_gradient_tolerance: f64,
    pub max_step_halvings: u32,
    pub separation_bound: f64,
    pub condition_limit: f64,
    /// L2 penalty on every non-intercept coefficient. Zero disables it.
    pub ridge: f64,
    pub fit_null: bool,
    pub chunk_rows: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            loglik_tolerance: 1e-8,
            relaxed_gradient_tolerance: 1e-6,
            max_step_halvings: 10,
            separation_bound: 30.0,
            condition_limit: 1e12,
            ridge: 0.0,
            fit_null: true,
            chunk_rows: 4096,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub column_names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Row-major p×p inverse observed information.
    pub covariance: Vec<f64>,
    pub loglik: f64,
    pub loglik_null: Option<f64>,
    pub n_obs: usize,
    pub n_params: usize,
    pub converged: bool,
    pub n_iterations: usize,
    pub gradient_inf_norm: f64,
    pub ridge: f64,
}

impl FitResult {
    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.n_params + j]
    }

    pub fn std_error(&self, i: usize) -> f64 {
        self.cov(i, i).sqrt()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_params, self.n_params, &self.covariance)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bernoulli log-likelihood Σ yη − log(1 + e^η).
pub fn log_likelihood(x: &DesignMatrix, y: &[f64], beta: &[f64]) -> f64 {
    (0..x.n_rows())
        .map(|i| {
            let eta = dot(x.row(i), beta);
            y[i] * eta - softplus(eta)
        })
        .sum()
}

/// Score vector Xᵀ(y − p).
pub fn gradient(x: &DesignMatrix, y: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.n_cols()];
    for (i, &yi) in y.iter().enumerate().take(x.n_rows()) {
        let row = x.row(i);
        let r = yi - sigmoid(dot(row, beta));
        for (gj, xj) in g.iter_mut().zip(row) {
            *gj += xj * r;
        }
    }
    g
}

struct Problem<'a> {
    x: &'a DesignMatrix,
    y: &'a [f64],
    /// Per column: penalized or not.
    penalized: Vec<bool>,
    ridge: f64,
    opts: &'a FitOptions,
}

struct ChunkEval {
    loglik: f64,
    grad: Vec<f64>,
    r: Option<DMatrix<f64>>,
    pinned: bool,
}

impl Problem<'_> {
    fn p(&self) -> usize {
        self.x.n_cols()
    }

    fn penalty(&self, beta: &[f64]) -> f64 {
        if self.ridge == 0.0 {
            return 0.0;
        }
        0.5 * self.ridge
            * beta
                .iter()
                .zip(&self.penalized)
                .filter(|(_, &pen)| pen)
                .map(|(b, _)| b * b)
                .sum::<f64>()
    }

    fn eval_chunk(&self, beta: &[f64], start: usize, end: usize, factor: bool) -> ChunkEval {
        let p = self.p();
        let mut loglik = 0.0;
        let mut grad = vec![0.0; p];
        let mut pinned = true;
        let mut aug = if factor {
            Vec::with_capacity((end - start) * (p + 1))
        } else {
            Vec::new()
        };
        for i in start..end {
            let row = self.x.row(i);
            let eta = dot(row, beta);
            let mu = sigmoid(eta);
            let q = sigmoid(-eta);
            loglik += self.y[i] * eta - softplus(eta);
            let resid = self.y[i] - mu;
            for (gj, xj) in grad.iter_mut().zip(row) {
                *gj += xj * resid;
            }
            pinned &= mu.min(q) < PIN_EPS;
            if factor {
                let sw = (mu * q).max(WEIGHT_FLOOR).sqrt();
                aug.extend(row.iter().map(|xj| xj * sw));
                aug.push(resid / sw);
            }
        }
        let r = factor.then(|| DMatrix::from_row_slice(end - start, p + 1, &aug).qr().r());
        ChunkEval {
            loglik,
            grad,
            r,
            pinned,
        }
    }

    /// Penalized log-likelihood, penalized gradient, all-pinned flag and,
    /// when asked, the R factor of the augmented weighted system.
    fn evaluate(&self, beta: &[f64], factor: bool) -> (f64, Vec<f64>, bool, Option<DMatrix<f64>>) {
        let p = self.p();
        let chunks = par::map_row_chunks(
            self.opts.execution,
            self.x.n_rows(),
            self.opts.chunk_rows.max(1),
            |s, e| self.eval_chunk(beta, s, e, factor),
        );
        let mut loglik = 0.0;
        let mut grad = vec![0.0; p];
        let mut pinned = true;
        let mut stacked: Vec<DMatrix<f64>> = Vec::new();
        for c in chunks {
            loglik += c.loglik;
            for (g, cg) in grad.iter_mut().zip(&c.grad) {
                *g += cg;
            }
            pinned &= c.pinned;
            if let Some(r) = c.r {
                stacked.push(r);
            }
        }
        loglik -= self.penalty(beta);
        for j in 0..p {
            if self.penalized[j] {
                grad[j] -= self.ridge * beta[j];
            }
        }
        let r = factor.then(|| {
            let sqrt_l = self.ridge.sqrt();
            let n_pen = if self.ridge > 0.0 {
                self.penalized.iter().filter(|&&b| b).count()
            } else {
                0
            };
            let rows: usize = stacked.iter().map(|m| m.nrows()).sum::<usize>() + n_pen;
            let mut all = DMatrix::zeros(rows, p + 1);
            let mut at = 0;
            for m in &stacked {
                all.view_mut((at, 0), (m.nrows(), p + 1)).copy_from(m);
                at += m.nrows();
            }
            if n_pen > 0 {
                for j in (0..p).filter(|&j| self.penalized[j]) {
                    all[(at, j)] = sqrt_l;
                    all[(at, p)] = -sqrt_l * beta[j];
                    at += 1;
                }
            }
            all.qr().r()
        });
        (loglik, grad, pinned, r)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Squared condition number of R, i.e. that of RᵀR.
fn condition(r: &DMatrix<f64>) -> f64 {
    let sv = r.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        (max / min).powi(2)
    }
}

fn solve_step(raug: &DMatrix<f64>, p: usize, limit: f64) -> Result<(Vec<f64>, DMatrix<f64>), GlmError> {
    let r = raug.view((0, 0), (p, p)).into_owned();
    let cond = condition(&r);
    if cond > limit {
        return Err(GlmError::SingularHessian { condition: cond });
    }
    let c = DVector::from_iterator(p, (0..p).map(|i| raug[(i, p)]));
    let delta = r
        .solve_upper_triangular(&c)
        .ok_or(GlmError::SingularHessian { condition: cond })?;
    Ok((delta.iter().copied().collect(), r))
}

/// (RᵀR)⁻¹ = R⁻¹R⁻ᵀ, assembled so that it is exactly symmetric.
fn covariance_from_r(r: &DMatrix<f64>) -> Option<Vec<f64>> {
    let p = r.nrows();
    let rinv = r.solve_upper_triangular(&DMatrix::identity(p, p))?;
    let mut cov = vec![0.0; p * p];
    for i in 0..p {
        for j in i..p {
            let v: f64 = (0..p).map(|k| rinv[(i, k)] * rinv[(j, k)]).sum();
            cov[i * p + j] = v;
            cov[j * p + i] = v;
        }
    }
    Some(cov)
}

fn validate(x: &DesignMatrix, y: &[f64]) -> Result<(), GlmError> {
    if x.n_rows() != y.len() {
        return Err(GlmError::DimensionMismatch {
            rows: x.n_rows(),
            len: y.len(),
        });
    }
    if let Some((row, &value)) = y.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(GlmError::NonBinaryResponse { row, value });
    }
    if x.n_rows() <= x.n_cols() {
        return Err(GlmError::TooFewRows {
            n: x.n_rows(),
            p: x.n_cols(),
        });
    }
    if let Some(row) = (0..x.n_rows()).find(|&i| x.row(i).iter().any(|v| !v.is_finite())) {
        return Err(GlmError::NonFiniteDesign { row });
    }
    Ok(())
}

fn irls(problem: &Problem<'_>) -> Result<FitResult, GlmError> {
    let opts = problem.opts;
    let p = problem.p();
    let mut beta = vec![0.0; p];
    let (mut ll, mut grad, mut pinned, mut raug) = problem.evaluate(&beta, true);
    let mut iterations = 0;
    let separation = |beta: &[f64], pinned: bool, iterations: usize| {
        let max_abs_beta = inf_norm(beta);
        (max_abs_beta > opts.separation_bound || pinned).then_some(GlmError::SeparationDetected {
            iterations,
            max_abs_beta,
        })
    };
    let mut converged = inf_norm(&grad) < opts.gradient_tolerance;

    while !converged {
        if iterations >= opts.max_iterations {
            return Err(GlmError::NotConverged {
                iterations,
                gradient: inf_norm(&grad),
            });
        }
        let factor = raug.take().expect("factor computed");
        let (delta, _) = match solve_step(&factor, p, opts.condition_limit) {
            Ok(s) => s,
            Err(e) => return Err(separation(&beta, pinned, iterations).unwrap_or(e)),
        };
        iterations += 1;

        // changes below summation round-off are not treated as decreases
        let slack = ROUNDOFF * (ll.abs() + 1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_step_halvings {
            let cand: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + t * d).collect();
            let (cll, _, _, _) = problem.evaluate(&cand, false);
            if cll >= ll - slack {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        let prev = ll;
        let stalled = accepted.is_none();
        if let Some(next) = accepted {
            beta = next;
        }
        let eval = problem.evaluate(&beta, true);
        (ll, grad, pinned, raug) = eval;
        if let Some(e) = separation(&beta, pinned, iterations) {
            return Err(e);
        }
        let g = inf_norm(&grad);
        converged = g < opts.gradient_tolerance
            || ((ll - prev).abs() < opts.loglik_tolerance && g < opts.relaxed_gradient_tolerance);
        if stalled && !converged {
            // no ascent along the Newton direction and still not stationary
            return Err(GlmError::NotConverged {
                iterations,
                gradient: g,
            });
        }
    }

    let factor = raug.expect("factor computed");
    let r = factor.view((0, 0), (p, p)).into_owned();
    let cond = condition(&r);
    if cond > opts.condition_limit {
        return Err(separation(&beta, pinned, iterations).unwrap_or(GlmError::SingularHessian { condition: cond }));
    }
    let covariance = covariance_from_r(&r).ok_or(GlmError::SingularHessian { condition: cond })?;
    Ok(FitResult {
        column_names: problem.x.column_names.clone(),
        coefficients: beta,
        covariance,
        loglik: ll,
        loglik_null: None,
        n_obs: problem.x.n_rows(),
        n_params: p,
        converged: true,
        n_iterations: iterations,
        gradient_inf_norm: inf_norm(&grad),
        ridge: problem.ridge,
    })
}

/// Maximum-likelihood logistic regression of `y` on `x`.
///
/// With a ridge penalty, `loglik` is the penalized objective and the
/// covariance is the inverse penalized information.
pub fn fit_logistic(x: &DesignMatrix, y: &[f64], opts: &FitOptions) -> Result<FitResult, GlmError> {
    validate(x, y)?;
    let penalized = x.columns.iter().map(|c| *c != ColumnRole::Intercept).collect();
    let problem = Problem {
        x,
        y,
        penalized,
        ridge: opts.ridge.max(0.0),
        opts,
    };
    let mut fit = irls(&problem)?;
    if opts.fit_null {
        let ones = DesignMatrix::from_rows(x.n_rows(), vec!["Intercept".into()], vec![1.0; x.n_rows()]);
        let null_opts = FitOptions {
            fit_null: false,
            ridge: 0.0,
            ..*opts
        };
        let null = irls(&Problem {
            x: &ones,
            y,
            penalized: vec![false],
            ridge: 0.0,
            opts: &null_opts,
        })?;
        // an intercept-only model is its own null model
        fit.loglik_null = Some(if is_intercept_only(x) { fit.loglik } else { null.loglik });
    }
    Ok(fit)
}

fn is_intercept_only(x: &DesignMatrix) -> bool {
    x.n_cols() == 1 && (0..x.n_rows()).all(|i| x.get(i, 0) == 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub mcfadden_r2: f64,
    pub aic: f64,
}

/// McFadden pseudo-R² = 1 − ℓ/ℓ₀ and AIC = 2p − 2ℓ.
pub fn model_stats(fit: &FitResult) -> Result<ModelStats, GlmError> {
    let null = fit.loglik_null.ok_or(GlmError::NullNotFitted)?;
    Ok(ModelStats {
        mcfadden_r2: mcfadden_r2(fit.loglik, null),
        aic: aic(fit.loglik, fit.n_params),
    })
}

pub fn mcfadden_r2(loglik: f64, loglik_null: f64) -> f64 {
    1.0 - loglik / loglik_null
}

pub fn aic(loglik: f64, n_params: usize) -> f64 {
    2.0 * n_params as f64 - 2.0 * loglik
}

/// R-style significance code.
pub fn significance_symbol(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 {
        "."
    } else {
        ""
    }
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    let n = Normal::standard();
    2.0 * n.sf(z.abs())
}

/// Each coefficient re-expressed relative to the reference level: a level
/// row adds the intercept, an interaction row adds its numeric main effect
/// (when that column exists). Other rows are unchanged.
pub fn conditional_coefficients(columns: &[ColumnRole], beta: &[f64]) -> Vec<f64> {
    let intercept = columns.iter().position(|c| *c == ColumnRole::Intercept);
    let main = |label: &str| {
        columns
            .iter()
            .position(|c| matches!(c, ColumnRole::Numeric { label: l } if l == label))
    };
    columns
        .iter()
        .zip(beta)
        .map(|(c, &b)| match c {
            ColumnRole::Level { .. } => b + intercept.map_or(0.0, |i| beta[i]),
            ColumnRole::Interaction { numeric, .. } => b + main(numeric).map_or(0.0, |i| beta[i]),
            _ => b,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub beta: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p_value: f64,
    pub symbol: String,
    pub odds_ratio: f64,
    pub odds_ratio_ci_low: f64,
    pub odds_ratio_ci_high: f64,
    pub conditional: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub rows: Vec<CoefficientRow>,
}

pub fn coefficient_table(fit: &FitResult, design: &DesignMatrix) -> Result<CoefficientTable, GlmError> {
    check_columns(fit, design)?;
    let conditional = conditional_coefficients(&design.columns, &fit.coefficients);
    let rows = (0..fit.n_params)
        .map(|j| {
            let beta = fit.coefficients[j];
            let se = fit.std_error(j);
            let z = beta / se;
            let p_value = two_sided_p(z);
            let (lo, hi) = (beta - Z_975 * se, beta + Z_975 * se);
            CoefficientRow {
                name: fit.column_names[j].clone(),
                beta,
                std_error: se,
                ci_low: lo,
                ci_high: hi,
                z,
                p_value,
                symbol: significance_symbol(p_value).into(),
                odds_ratio: beta.exp(),
                odds_ratio_ci_low: lo.exp(),
                odds_ratio_ci_high: hi.exp(),
                conditional: conditional[j],
            }
        })
        .collect();
    Ok(CoefficientTable { rows })
}

impl CoefficientTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "term",
            "coef",
            "std_err",
            "ci_0.025",
            "ci_0.975",
            "z",
            "p_value",
            "symbol",
            "odds_ratio",
            "or_ci_0.025",
            "or_ci_0.975",
            "conditional_coef",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.name.clone(),
                r.beta.to_string(),
                r.std_error.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.z.to_string(),
                r.p_value.to_string(),
                r.symbol.clone(),
                r.odds_ratio.to_string(),
                r.odds_ratio_ci_low.to_string(),
                r.odds_ratio_ci_high.to_string(),
                r.conditional.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub term: String,
    pub df: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub symbol: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTable {
    pub rows: Vec<WaldRow>,
}

impl WaldTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["term", "df", "stat", "p_value", "symbol"])?;
        for r in &self.rows {
            out.write_record([
                r.term.clone(),
                r.df.to_string(),
                r.statistic.to_string(),
                r.p_value.to_string(),
                r.symbol.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Upper-tail χ² p-value.
pub fn chi2_sf(statistic: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64).expect("df > 0").sf(statistic)
}

/// Joint Wald χ² test W = β_Tᵀ C_TT⁻¹ β_T for every term group.
pub fn wald_term_tests(fit: &FitResult, design: &DesignMatrix) -> Result<WaldTable, GlmError> {
    check_columns(fit, design)?;
    let mut rows = Vec::with_capacity(design.term_groups.len());
    for g in &design.term_groups {
        if g.len == 0 {
            continue;
        }
        let idx: Vec<usize> = g.columns().collect();
        let block = DMatrix::from_fn(g.len, g.len, |a, b| fit.cov(idx[a], idx[b]));
        let b = DVector::from_iterator(g.len, idx.iter().map(|&i| fit.coefficients[i]));
        let chol = block
            .cholesky()
            .ok_or_else(|| GlmError::SingularBlock(g.name.clone()))?;
        let statistic = b.dot(&chol.solve(&b)).max(0.0);
        let p_value = chi2_sf(statistic, g.len);
        rows.push(WaldRow {
            term: g.name.clone(),
            df: g.len,
            statistic,
            p_value,
            symbol: significance_symbol(p_value).into(),
        });
    }
    Ok(WaldTable { rows })
}

fn check_columns(fit: &FitResult, design: &DesignMatrix) -> Result<(), GlmError> {
    if fit.column_names != design.column_names {
        return Err(GlmError::ColumnMismatch {
            expected: fit.column_names.clone(),
            got: design.column_names.clone(),
        });
    }
    Ok(())
}

/// Fitted probabilities for new rows.
pub fn predict(fit: &FitResult, x: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    check_columns(fit, x)?;
    Ok((0..x.n_rows())
        .map(|i| sigmoid(dot(x.row(i), &fit.coefficients)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design(cols: &[&str], rows: &[Vec<f64>]) -> DesignMatrix {
        DesignMatrix::from_rows(
            rows.len(),
            cols.iter().map(|s| s.to_string()).collect(),
            rows.iter().flatten().copied().collect(),
        )
    }

    #[test]
    fn intercept_only_is_logit_mean() {
        let y: Vec<f64> = (0..40).map(|i| f64::from(u8::from(i % 4 == 0))).collect();
        let x = design(&["Intercept"], &vec![vec![1.0]; 40]);
        let fit = fit_logistic(&x, &y, &FitOptions::default()).unwrap();
        let ybar: f64 = 0.25;
        assert!((fit.coefficients[0] - (ybar / (1.0 - ybar)).ln()).abs() < 1e-10);
        assert_eq!(model_stats(&fit).unwrap().mcfadden_r2, 0.0);
    }

    #[test]
    fn separable_is_reported() {
        let xs: Vec<f64> = (-10..10).map(|i| f64::from(i) + 0.5).collect();
        let y: Vec<f64> = xs.iter().map(|&v| f64::from(u8::from(v > 0.0))).collect();
        let x = design(
            &["Intercept", "x"],
            &xs.iter().map(|&v| vec![1.0, v]).collect::<Vec<_>>(),
        );
        let err = fit_logistic(&x, &y, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, GlmError::SeparationDetected { .. }), "{err:?}");
    }

    #[test]
    fn collinear_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                vec![1.0, v, 2.0 * v]
            })
            .collect();
        let y: Vec<f64> = (0..50).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let x = design(&["Intercept", "a", "b"], &rows);
        assert!(matches!(
            fit_logistic(&x, &y, &FitOptions::default()),
            Err(GlmError::SingularHessian { .. })
        ));
    }

    #[test]
    fn input_validation() {
        let x = design(&["Intercept"], &[vec![1.0], vec![1.0]]);
        assert!(matches!(
            fit_logistic(&x, &[0.0], &FitOptions::default()),
            Err(GlmError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            fit_logistic(&x, &[0.0, 0.5], &FitOptions::default()),
            Err(GlmError::NonBinaryResponse { row: 1, .. })
        ));
        let x1 = design(&["Intercept"], &[vec![1.0]]);
        assert!(matches!(
            fit_logistic(&x1, &[1.0], &FitOptions::default()),
            Err(GlmError::TooFewRows { .. })
        ));
    }

    #[test]
    fn aic_and_symbols() {
        assert_eq!(aic(-100.0, 64), 328.0);
        let got: Vec<&str> = [0.0005, 0.005, 0.03, 0.07, 0.2]
            .iter()
            .map(|&p| significance_symbol(p))
            .collect();
        assert_eq!(got, vec!["***", "**", "*", ".", ""]);
        assert_eq!(significance_symbol(chi2_sf(16.08, 1)), "***");
    }

    #[test]
    fn covariance_is_symmetric_and_single_df_wald_is_z_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..400).map(|_| vec![1.0, rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| f64::from(u8::from(rng.random::<f64>() < sigmoid(-0.5 + r[1]))))
            .collect();
        let x = design(&["Intercept", "x"], &rows);
        let fit = fit_logistic(&x, &y, &FitOptions::default()).unwrap();
        assert_eq!(fit.cov(0, 1).to_bits(), fit.cov(1, 0).to_bits());
        let wald = wald_term_tests(&fit, &x).unwrap();
        let table = coefficient_table(&fit, &x).unwrap();
        for (w, c) in wald.rows.iter().zip(&table.rows) {
            assert!((w.statistic - c.z * c.z).abs() < 1e-9 * w.statistic.max(1.0));
        }
    }

    #[test]
    fn ridge_shrinks_slope_but_not_intercept_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| vec![1.0, rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| f64::from(u8::from(rng.random::<f64>() < sigmoid(0.3 + 1.5 * r[1]))))
            .collect();
        let x = design(&["Intercept", "x"], &rows);
        let plain = fit_logistic(&x, &y, &FitOptions::default()).unwrap();
        let ridge = fit_logistic(
            &x,
            &y,
            &FitOptions {
                ridge: 50.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(ridge.coefficients[1].abs() < plain.coefficients[1].abs());
        assert_eq!(ridge.ridge, 50.0);
        // penalized gradient vanishes
        let g = gradient(&x, &y, &ridge.coefficients);
        assert!(g[0].abs() < 1e-6);
        assert!((g[1] - 50.0 * ridge.coefficients[1]).abs() < 1e-6);
    }

    #[test]
    fn predict_checks_columns() {
        let fit = FitResult {
            column_names: vec!["Intercept".into()],
            coefficients: vec![0.0],
            covariance: vec![1.0],
            loglik: 0.0,
            loglik_null: None,
            n_obs: 1,
            n_params: 1,
            converged: true,
            n_iterations: 0,
            gradient_inf_norm: 0.0,
            ridge: 0.0,
        };
        let x = design(&["Intercept"], &[vec![1.0], vec![1.0]]);
        assert_eq!(predict(&fit, &x).unwrap(), vec![0.5, 0.5]);
        let other = design(&["a"], &[vec![1.0]]);
        assert!(matches!(predict(&fit, &other), Err(GlmError::ColumnMismatch { .. })));
        assert_eq!(model_stats(&fit), Err(GlmError::NullNotFitted));
        assert!(sigmoid(30.0) > 1.0 - 1e-13);
    }
}
