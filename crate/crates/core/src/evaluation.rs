//! Held-out evaluation, category filtering, ablations and per-category
//! diagnostics (binned correctness curves and kernel density estimates).

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{
    build_design_matrix, build_with_encoding, parse_formula, Column, DesignMatrix, DesignOptions, FormulaAst,
    FormulaError, Frame,
};
use crate::glm::{self, FitOptions, FitResult, GlmError};
use crate::par;

pub const RESPONSE: &str = "correct";
pub const CATEGORY: &str = "QCat";
pub const DEFAULT_SEED: u64 = 20240;
pub const DEFAULT_FORMULA: &str = "correct ~ QCat*log(SPop) + QCat*SCons + QCat*Cert";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("split would leave a class empty ({n_pos} positives, {n_neg} negatives, {n_test} test rows)")]
    DegenerateClass { n_pos: usize, n_neg: usize, n_test: usize },
    #[error("response must be 0/1, found {0}")]
    NonBinaryResponse(f64),
    #[error("variable `{0}` is not numeric")]
    NonNumericVariable(String),
    #[error("category `{category}` has fewer than two distinct values of `{variable}`")]
    DegenerateSample { category: String, variable: String },
    #[error("frame has no rows")]
    EmptyFrame,
    #[error("unknown predictor `{0}` (expected SPop, QCat, SCons or Cert)")]
    UnknownPredictor(String),
    #[error("predictor subset is empty")]
    EmptySubset,
    #[error("subset {subset}: {source}")]
    Subset { subset: String, source: Box<EvalError> },
}

/// Row indices of a stratified split, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn response(frame: &Frame) -> Result<&[f64], EvalError> {
    let y = frame.numeric(RESPONSE)?;
    if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(EvalError::NonBinaryResponse(bad));
    }
    Ok(y)
}

/// Stratified on the response: |test| = round(n·f) and the test positives are
/// round(|test|·n_pos/n). Each class is shuffled with its own draw from a
/// ChaCha8 stream seeded by `seed`.
pub fn split_indices(y: &[f64], test_fraction: f64, seed: u64) -> Result<SplitIndices, EvalError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(EvalError::InvalidFraction(test_fraction));
    }
    let n = y.len();
    let mut pos: Vec<usize> = (0..n).filter(|&i| y[i] == 1.0).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| y[i] != 1.0).collect();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_test_pos = (n_test as f64 * pos.len() as f64 / n.max(1) as f64).round() as usize;
    let n_test_neg = n_test.saturating_sub(n_test_pos);
    let degenerate = EvalError::DegenerateClass {
        n_pos: pos.len(),
        n_neg: neg.len(),
        n_test,
    };
    if n_test_pos == 0 || n_test_neg == 0 || n_test_pos >= pos.len() || n_test_neg >= neg.len() {
        return Err(degenerate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut test: Vec<usize> = pos[..n_test_pos].iter().chain(&neg[..n_test_neg]).copied().collect();
    let mut train: Vec<usize> = pos[n_test_pos..].iter().chain(&neg[n_test_neg..]).copied().collect();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn train_test_split(frame: &Frame, test_fraction: f64, seed: u64) -> Result<(Frame, Frame), EvalError> {
    let idx = split_indices(response(frame)?, test_fraction, seed)?;
    Ok((frame.take_rows(&idx.train), frame.take_rows(&idx.test)))
}

/// 100·(accuracy − baseline)/baseline.
pub fn relative_improvement(accuracy: f64, baseline: f64) -> f64 {
    100.0 * (accuracy - baseline) / baseline
}

/// Accuracy of the constant majority-class predictor.
pub fn majority_baseline(y: &[f64]) -> f64 {
    let pos = y.iter().filter(|&&v| v == 1.0).count();
    pos.max(y.len() - pos) as f64 / y.len() as f64
}

/// Accuracy of thresholding `probabilities` at 0.5.
pub fn accuracy(probabilities: &[f64], y: &[f64]) -> f64 {
    let hits = probabilities
        .iter()
        .zip(y)
        .filter(|(&p, &t)| (p >= 0.5) == (t == 1.0))
        .count();
    hits as f64 / y.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub formula: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub test_accuracy: f64,
    pub majority_baseline: f64,
    pub relative_improvement_pct: f64,
}

/// Scores `fit` on the test frame, encoded like the training design.
pub fn evaluate_fit(
    fit: &FitResult,
    ast: &FormulaAst,
    train_design: &DesignMatrix,
    test: &Frame,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let (x, y) = build_with_encoding(ast, test, &train_design.encoding)?;
    let p = glm::predict(fit, &x)?;
    let test_accuracy = accuracy(&p, &y);
    let baseline = majority_baseline(&y);
    Ok(EvalReport {
        formula: ast.to_string(),
        seed,
        n_train: fit.n_obs,
        n_test: y.len(),
        test_accuracy,
        majority_baseline: baseline,
        relative_improvement_pct: relative_improvement(test_accuracy, baseline),
    })
}

/// A fitted and evaluated model.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub ast: FormulaAst,
    pub design: DesignMatrix,
    pub fit: FitResult,
    pub eval: EvalReport,
}

/// Splits, standardizes on the training rows, fits and evaluates.
pub fn fit_and_evaluate(
    frame: &Frame,
    formula: &str,
    test_fraction: f64,
    seed: u64,
    opts: &FitOptions,
) -> Result<ModelRun, EvalError> {
    let idx = split_indices(response(frame)?, test_fraction, seed)?;
    fit_on_split(frame, formula, &idx, seed, opts)
}

fn fit_on_split(
    frame: &Frame,
    formula: &str,
    idx: &SplitIndices,
    seed: u64,
    opts: &FitOptions,
) -> Result<ModelRun, EvalError> {
    let ast = parse_formula(formula, frame)?;
    let train = frame.take_rows(&idx.train);
    let test = frame.take_rows(&idx.test);
    let (design, y) = build_design_matrix(&ast, &train, DesignOptions::default())?;
    let fit = glm::fit_logistic(&design, &y, opts)?;
    let eval = evaluate_fit(&fit, &ast, &design, &test, seed)?;
    Ok(ModelRun { ast, design, fit, eval })
}

/// Mean correctness per category over the whole frame.
pub fn category_means(frame: &Frame) -> Result<BTreeMap<String, f64>, EvalError> {
    let y = response(frame)?;
    let cats = frame.categorical(CATEGORY)?;
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (c, &v) in cats.iter().zip(y) {
        let e = acc.entry(c).or_default();
        e.0 += v;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(c, (s, n))| (c.to_string(), s / n as f64))
        .collect())
}

/// Keeps rows whose category mean correctness is strictly above `threshold`.
pub fn filter_categories(frame: &Frame, threshold: f64) -> Result<Frame, EvalError> {
    let means = category_means(frame)?;
    let cats = frame.categorical(CATEGORY)?;
    Ok(frame.filter_rows(|i| means[&cats[i]] > threshold))
}

/// Predictors available to ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Predictor {
    SPop,
    QCat,
    SCons,
    Cert,
}

impl Predictor {
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s.trim() {
            "SPop" => Ok(Predictor::SPop),
            "QCat" => Ok(Predictor::QCat),
            "SCons" => Ok(Predictor::SCons),
            "Cert" => Ok(Predictor::Cert),
            other => Err(EvalError::UnknownPredictor(other.to_string())),
        }
    }

    fn term(self) -> &'static str {
        match self {
            Predictor::SPop => "log(SPop)",
            Predictor::QCat => CATEGORY,
            Predictor::SCons => "SCons",
            Predictor::Cert => "Cert",
        }
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Predictor::SPop => "SPop",
            Predictor::QCat => "QCat",
            Predictor::SCons => "SCons",
            Predictor::Cert => "Cert",
        })
    }
}

/// A set of predictors, kept in the order given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSet(pub Vec<Predictor>);

impl PredictorSet {
    /// Parses `"SPop,QCat,SCons"` or `"{SPop, QCat}"`.
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        let inner = s.trim().trim_start_matches('{').trim_end_matches('}');
        let mut out: Vec<Predictor> = Vec::new();
        for part in inner.split(',').filter(|p| !p.trim().is_empty()) {
            let p = Predictor::parse(part)?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        if out.is_empty() {
            return Err(EvalError::EmptySubset);
        }
        Ok(PredictorSet(out))
    }

    /// QCat interacts with every retained numeric; without QCat the numerics
    /// enter additively.
    pub fn formula(&self) -> String {
        let has_cat = self.0.contains(&Predictor::QCat);
        let numerics: Vec<&str> = [Predictor::SPop, Predictor::SCons, Predictor::Cert]
            .into_iter()
            .filter(|p| self.0.contains(p))
            .map(Predictor::term)
            .collect();
        let rhs = match (has_cat, numerics.is_empty()) {
            (true, true) => CATEGORY.to_string(),
            (true, false) => numerics
                .iter()
                .map(|n| format!("{CATEGORY}*{n}"))
                .collect::<Vec<_>>()
                .join(" + "),
            (false, _) => numerics.join(" + "),
        };
        format!("{RESPONSE} ~ {rhs}")
    }
}

impl fmt::Display for PredictorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.0.iter().map(Predictor::to_string).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

/// The six predictor combinations of the published ablation.
pub fn standard_subsets() -> Vec<PredictorSet> {
    use Predictor::*;
    vec![
        PredictorSet(vec![SPop, QCat, SCons, Cert]),
        PredictorSet(vec![QCat, SCons, Cert]),
        PredictorSet(vec![SPop, SCons, Cert]),
        PredictorSet(vec![SCons, Cert]),
        PredictorSet(vec![Cert]),
        PredictorSet(vec![SCons]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub predictors: String,
    pub formula: String,
    pub mcfadden_r2: f64,
    pub test_accuracy: f64,
    pub majority_baseline: f64,
    pub relative_improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "predictors",
            "formula",
            "seed",
            "mcfadden_r2",
            "test_accuracy",
            "majority_baseline",
            "relative_improvement_pct",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.predictors.clone(),
                r.formula.clone(),
                self.seed.to_string(),
                r.mcfadden_r2.to_string(),
                r.test_accuracy.to_string(),
                r.majority_baseline.to_string(),
                r.relative_improvement_pct.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fits every subset on one shared split. Subsets run concurrently under
/// parallel execution; the report keeps the requested order.
pub fn run_ablation(
    frame: &Frame,
    subsets: &[PredictorSet],
    test_fraction: f64,
    seed: u64,
    opts: &FitOptions,
) -> Result<AblationReport, EvalError> {
    let idx = split_indices(response(frame)?, test_fraction, seed)?;
    let results = par::map(opts.execution, subsets, |s| {
        let formula = s.formula();
        let annotate = |e: EvalError| EvalError::Subset {
            subset: s.to_string(),
            source: Box::new(e),
        };
        let run = fit_on_split(frame, &formula, &idx, seed, opts).map_err(annotate)?;
        let stats = glm::model_stats(&run.fit).map_err(|e| annotate(e.into()))?;
        Ok(AblationRow {
            predictors: s.to_string(),
            formula: run.eval.formula,
            mcfadden_r2: stats.mcfadden_r2,
            test_accuracy: run.eval.test_accuracy,
            majority_baseline: run.eval.majority_baseline,
            relative_improvement_pct: run.eval.relative_improvement_pct,
        })
    });
    Ok(AblationReport {
        seed,
        rows: results.into_iter().collect::<Result<Vec<_>, EvalError>>()?,
    })
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and nonempty.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub category: String,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    pub n: usize,
    pub mean_correct: f64,
    pub logit_mean_correct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticBins {
    pub variable: String,
    pub n_bins: usize,
    pub central_mass: f64,
    pub rows: Vec<BinRow>,
}

impl DiagnosticBins {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        write_bins_csv(std::slice::from_ref(self), w)
    }
}

/// Writes several variables' bins into one table.
pub fn write_bins_csv<W: std::io::Write>(all: &[DiagnosticBins], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "variable",
        "category",
        "bin",
        "lower",
        "upper",
        "midpoint",
        "n",
        "mean_correct",
        "logit_mean_correct",
        "central_mass",
    ])?;
    for d in all {
        for r in &d.rows {
            out.write_record([
                d.variable.clone(),
                r.category.clone(),
                r.bin.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
                r.midpoint.to_string(),
                r.n.to_string(),
                r.mean_correct.to_string(),
                r.logit_mean_correct.to_string(),
                d.central_mass.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// logit(p) with p clipped to [1/(2n), 1 − 1/(2n)].
pub fn clipped_logit(p: f64, n: usize) -> f64 {
    let eps = 1.0 / (2.0 * n as f64);
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

fn numeric_var<'a>(frame: &'a Frame, variable: &str) -> Result<&'a [f64], EvalError> {
    match frame.column(variable) {
        Some(Column::Numeric(v)) => Ok(v),
        Some(Column::Categorical(_)) => Err(EvalError::NonNumericVariable(variable.to_string())),
        None => Err(FormulaError::MissingVariable(variable.to_string()).into()),
    }
}

fn by_category<'a>(frame: &'a Frame, values: &'a [f64]) -> Result<BTreeMap<&'a str, Vec<usize>>, EvalError> {
    let cats = frame.categorical(CATEGORY)?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in cats.iter().enumerate() {
        if values[i].is_finite() {
            groups.entry(c.as_str()).or_default().push(i);
        }
    }
    Ok(groups)
}

/// Per category: keeps the central `central_mass` quantile interval of the
/// variable, cuts it into `n_bins` equal-width bins (the upper edge belongs to
/// the last bin) and reports the mean correctness of each nonempty bin.
pub fn binned_diagnostics(
    frame: &Frame,
    variable: &str,
    n_bins: usize,
    central_mass: f64,
) -> Result<DiagnosticBins, EvalError> {
    if frame.n_rows() == 0 {
        return Err(EvalError::EmptyFrame);
    }
    let x = numeric_var(frame, variable)?;
    let y = response(frame)?;
    let n_bins = n_bins.max(1);
    let tail = (1.0 - central_mass.clamp(0.0, 1.0)) / 2.0;
    let mut rows = Vec::new();
    for (category, idx) in by_category(frame, x)? {
        let mut sorted: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        sorted.sort_by(f64::total_cmp);
        let lo = quantile_type7(&sorted, tail);
        let hi = quantile_type7(&sorted, 1.0 - tail);
        let width = (hi - lo) / n_bins as f64;
        let mut sums = vec![(0usize, 0.0f64); n_bins];
        for &i in &idx {
            let v = x[i];
            if v < lo || v > hi {
                continue;
            }
            let b = if width > 0.0 {
                (((v - lo) / width).floor() as usize).min(n_bins - 1)
            } else {
                0
            };
            sums[b].0 += 1;
            sums[b].1 += y[i];
        }
        for (b, &(n, s)) in sums.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let lower = lo + b as f64 * width;
            let upper = if b + 1 == n_bins {
                hi
            } else {
                lo + (b + 1) as f64 * width
            };
            let mean = s / n as f64;
            rows.push(BinRow {
                category: category.to_string(),
                bin: b,
                lower,
                upper,
                midpoint: 0.5 * (lower + upper),
                n,
                mean_correct: mean,
                logit_mean_correct: clipped_logit(mean, n),
            });
        }
    }
    Ok(DiagnosticBins {
        variable: variable.to_string(),
        n_bins,
        central_mass,
        rows,
    })
}

pub const KDE_POINTS: usize = 200;

/// Silverman's rule: 0.9·min(σ, IQR/1.34)·n^(−1/5), using σ alone when the
/// IQR is zero.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile_type7(sorted, 0.75) - quantile_type7(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian KDE evaluated at `n_points` evenly spaced points from
/// min − 3h to max + 3h, so that nearly all mass lies on the grid.
pub fn kde_curve(values: &[f64], n_points: usize) -> Option<Vec<(f64, f64)>> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let distinct = sorted.windows(2).any(|w| w[0] != w[1]);
    if sorted.len() < 2 || !distinct {
        return None;
    }
    let h = silverman_bandwidth(&sorted);
    let (a, b) = (sorted[0] - 3.0 * h, sorted[sorted.len() - 1] + 3.0 * h);
    let n = sorted.len() as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let step = (b - a) / (n_points.max(2) - 1) as f64;
    Some(
        (0..n_points.max(2))
            .map(|k| {
                let t = a + k as f64 * step;
                let d: f64 = sorted.iter().map(|v| (-0.5 * ((t - v) / h).powi(2)).exp()).sum();
                (t, d * norm)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdePoint {
    pub category: String,
    pub x: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeSummary {
    pub variable: String,
    pub points: Vec<KdePoint>,
}

/// Writes several variables' curves into one table.
pub fn write_kde_csv<W: std::io::Write>(all: &[KdeSummary], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variable", "category", "x", "density"])?;
    for s in all {
        for p in &s.points {
            out.write_record([
                s.variable.clone(),
                p.category.clone(),
                p.x.to_string(),
                p.density.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-category density curves of `variable`.
pub fn kde_summary(frame: &Frame, variable: &str) -> Result<KdeSummary, EvalError> {
    let x = numeric_var(frame, variable)?;
    let mut points = Vec::new();
    for (category, idx) in by_category(frame, x)? {
        let values: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let curve = kde_curve(&values, KDE_POINTS).ok_or_else(|| EvalError::DegenerateSample {
            category: category.to_string(),
            variable: variable.to_string(),
        })?;
        points.extend(curve.into_iter().map(|(x, density)| KdePoint {
            category: category.to_string(),
            x,
            density,
        }));
    }
    Ok(KdeSummary {
        variable: variable.to_string(),
        points,
    })
}

/// Trapezoid-rule integral of a sampled curve.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_determinism() {
        let y: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i % 10 < 3))).collect();
        let a = split_indices(&y, 0.2, 5).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (80, 20));
        assert_eq!(a, split_indices(&y, 0.2, 5).unwrap());
        let pos = a.test.iter().filter(|&&i| y[i] == 1.0).count();
        assert_eq!(pos, 6);
        assert!(matches!(split_indices(&y, 1.0, 5), Err(EvalError::InvalidFraction(_))));
        let one = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            split_indices(&one, 0.2, 5),
            Err(EvalError::DegenerateClass { .. })
        ));
    }

    #[test]
    fn improvement_arithmetic() {
        assert!((relative_improvement(0.915, 0.874) - 4.69).abs() < 0.01);
        assert!((relative_improvement(0.936, 0.912) - 2.63).abs() < 0.01);
        assert_eq!(relative_improvement(0.8, 0.8), 0.0);
        assert_eq!(majority_baseline(&[0.0, 0.0, 1.0, 0.0]), 0.75);
    }

    #[test]
    fn ablation_formulas() {
        let f: Vec<String> = standard_subsets().iter().map(PredictorSet::formula).collect();
        assert_eq!(f[0], DEFAULT_FORMULA);
        assert_eq!(f[1], "correct ~ QCat*SCons + QCat*Cert");
        assert_eq!(f[2], "correct ~ log(SPop) + SCons + Cert");
        assert_eq!(f[4], "correct ~ Cert");
        assert_eq!(PredictorSet::parse("{QCat}").unwrap().formula(), "correct ~ QCat");
        assert_eq!(PredictorSet::parse("Cert, SCons").unwrap().to_string(), "{Cert, SCons}");
        assert!(matches!(
            PredictorSet::parse("Foo"),
            Err(EvalError::UnknownPredictor(_))
        ));
        assert_eq!(PredictorSet::parse("{}"), Err(EvalError::EmptySubset));
    }

    #[test]
    fn filter_rule() {
        let f = Frame::new()
            .with_categorical(
                CATEGORY,
                vec!["a"; 20].into_iter().chain(vec!["b"; 20]).collect::<Vec<_>>(),
            )
            .unwrap()
            .with_numeric(
                RESPONSE,
                (0..40)
                    .map(|i| f64::from(u8::from(i == 0 || (20..23).contains(&i))))
                    .collect(),
            )
            .unwrap();
        let g = filter_categories(&f, 0.1).unwrap();
        assert_eq!(g.n_rows(), 20);
        assert!(g.categorical(CATEGORY).unwrap().iter().all(|c| c == "b"));
        assert_eq!(filter_categories(&g, 0.1).unwrap(), g);
        assert_eq!(filter_categories(&f, 0.0).unwrap(), f);
    }

    #[test]
    fn quantiles_and_logit() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&s, 0.0), 1.0);
        assert_eq!(quantile_type7(&s, 1.0), 4.0);
        assert_eq!(quantile_type7(&s, 0.5), 2.5);
        assert_eq!(clipped_logit(0.5, 4), 0.0);
        assert!((clipped_logit(1.0, 4) - (0.875f64 / 0.125).ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_bins_have_width_one_fifteenth() {
        let n = 151;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let f = Frame::new()
            .with_categorical(CATEGORY, vec!["a"; n])
            .unwrap()
            .with_numeric("x", x)
            .unwrap()
            .with_numeric(RESPONSE, (0..n).map(|i| f64::from(u8::from(i % 2 == 0))).collect())
            .unwrap();
        let d = binned_diagnostics(&f, "x", 15, 1.0).unwrap();
        assert_eq!(d.rows.len(), 15);
        for r in &d.rows {
            assert!((r.upper - r.lower - 1.0 / 15.0).abs() < 1e-12);
        }
        assert_eq!(d.rows.iter().map(|r| r.n).sum::<usize>(), n);
        assert!(matches!(
            binned_diagnostics(&f, CATEGORY, 15, 1.0),
            Err(EvalError::NonNumericVariable(_))
        ));
    }

    #[test]
    fn kde_normalization_and_degenerate() {
        let c = kde_curve(&[0.0, 1.0], KDE_POINTS).unwrap();
        assert_eq!(c.len(), KDE_POINTS);
        assert!((trapezoid(&c) - 1.0).abs() < 0.01);
        assert!(kde_curve(&[2.0, 2.0, 2.0], KDE_POINTS).is_none());
    }
}
