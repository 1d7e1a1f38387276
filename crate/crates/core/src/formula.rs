//! Model formulas, tabular frames and design matrices.
//!
//! Supported notation: `response ~ term + term + ...` where a term is a
//! variable, `log(variable)`, `a*b` (both main effects and their interaction)
//! or `a:b` (interaction only). Interactions pair one categorical with one
//! numeric variable. The intercept is always included.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FormulaError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown transform `{0}` (only `log` is supported)")]
    UnknownTransform(String),
    #[error("unsupported term `{0}`: interactions must pair one categorical with one numeric variable")]
    UnsupportedTerm(String),
    #[error("variable `{0}` not found")]
    MissingVariable(String),
    #[error("column `{column}` has the wrong type: expected {expected}")]
    WrongType { column: String, expected: &'static str },
    #[error("categorical `{0}` has fewer than two levels")]
    SingleLevelCategorical(String),
    #[error("categorical `{column}` has level `{level}` not seen when the design was fitted")]
    UnseenLevel { column: String, level: String },
    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("log of non-positive value in column `{0}`")]
    NonPositiveLog(String),
    #[error("column `{column}` has {got} rows, frame has {expected}")]
    RaggedColumn {
        column: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("frame has no rows")]
    EmptyFrame,
    #[error("csv: {0}")]
    Csv(String),
}

/// One column of a [`Frame`].
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn take(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Numeric,
    Categorical,
}

/// Named, equal-length columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    names: Vec<String>,
    columns: Vec<Column>,
}

impl Frame {
    pub fn new() -> Self {
        Frame::default()
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn with_column(mut self, name: impl Into<String>, column: Column) -> Result<Self, FormulaError> {
        self.push(name, column)?;
        Ok(self)
    }

    pub fn with_numeric(self, name: impl Into<String>, values: Vec<f64>) -> Result<Self, FormulaError> {
        self.with_column(name, Column::Numeric(values))
    }

    pub fn with_categorical<S: Into<String>>(
        self,
        name: impl Into<String>,
        values: Vec<S>,
    ) -> Result<Self, FormulaError> {
        self.with_column(name, Column::Categorical(values.into_iter().map(Into::into).collect()))
    }

    pub fn push(&mut self, name: impl Into<String>, column: Column) -> Result<(), FormulaError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(FormulaError::DuplicateColumn(name));
        }
        if !self.columns.is_empty() && column.len() != self.n_rows() {
            return Err(FormulaError::RaggedColumn {
                column: name,
                expected: self.n_rows(),
                got: column.len(),
            });
        }
        self.names.push(name);
        self.columns.push(column);
        Ok(())
    }

    /// Replaces an existing column or appends a new one.
    pub fn set(&mut self, name: &str, column: Column) -> Result<(), FormulaError> {
        match self.names.iter().position(|n| n == name) {
            Some(i) => {
                if column.len() != self.n_rows() {
                    return Err(FormulaError::RaggedColumn {
                        column: name.to_string(),
                        expected: self.n_rows(),
                        got: column.len(),
                    });
                }
                self.columns[i] = column;
                Ok(())
            }
            None => self.push(name, column),
        }
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.names.iter().position(|n| n == name).map(|i| &self.columns[i])
    }

    pub fn kind(&self, name: &str) -> Option<VarKind> {
        self.column(name).map(|c| match c {
            Column::Numeric(_) => VarKind::Numeric,
            Column::Categorical(_) => VarKind::Categorical,
        })
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], FormulaError> {
        match self.column(name) {
            Some(Column::Numeric(v)) => Ok(v),
            Some(_) => Err(FormulaError::WrongType {
                column: name.to_string(),
                expected: "numeric",
            }),
            None => Err(FormulaError::MissingVariable(name.to_string())),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&[String], FormulaError> {
        match self.column(name) {
            Some(Column::Categorical(v)) => Ok(v),
            Some(_) => Err(FormulaError::WrongType {
                column: name.to_string(),
                expected: "categorical",
            }),
            None => Err(FormulaError::MissingVariable(name.to_string())),
        }
    }

    /// New frame with the given rows, in the given order.
    pub fn take_rows(&self, rows: &[usize]) -> Frame {
        Frame {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.take(rows)).collect(),
        }
    }

    pub fn filter_rows(&self, keep: impl Fn(usize) -> bool) -> Frame {
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&i| keep(i)).collect();
        self.take_rows(&rows)
    }

    /// Reads a CSV with a header row. Columns listed in `categorical` are kept
    /// as strings; all others must parse as numbers.
    pub fn read_csv(path: &Path, categorical: &[&str]) -> Result<Frame, FormulaError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| FormulaError::Csv(e.to_string()))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| FormulaError::Csv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for rec in reader.records() {
            let rec = rec.map_err(|e| FormulaError::Csv(e.to_string()))?;
            for (j, field) in rec.iter().enumerate() {
                raw[j].push(field.to_string());
            }
        }
        let mut frame = Frame::new();
        for (name, values) in headers.into_iter().zip(raw) {
            let column = if categorical.contains(&name.as_str()) {
                Column::Categorical(values)
            } else {
                let parsed = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v.trim().parse::<f64>().map_err(|_| {
                            FormulaError::Csv(format!("column `{name}` row {}: not a number: {v:?}", i + 1))
                        })
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                Column::Numeric(parsed)
            };
            frame.push(name, column)?;
        }
        Ok(frame)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), FormulaError> {
        let mut writer = csv::Writer::from_writer(w);
        let err = |e: csv::Error| FormulaError::Csv(e.to_string());
        writer.write_record(&self.names).map_err(err)?;
        for i in 0..self.n_rows() {
            let row: Vec<String> = self
                .columns
                .iter()
                .map(|c| match c {
                    Column::Numeric(v) => v[i].to_string(),
                    Column::Categorical(v) => v[i].clone(),
                })
                .collect();
            writer.write_record(&row).map_err(err)?;
        }
        writer.flush().map_err(|e| FormulaError::Csv(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transform {
    Identity,
    Log,
}

/// A numeric predictor, possibly log-transformed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NumericVar {
    pub name: String,
    pub transform: Transform,
}

impl NumericVar {
    /// Column label, e.g. `log_SPop`.
    pub fn label(&self) -> String {
        match self.transform {
            Transform::Identity => self.name.clone(),
            Transform::Log => format!("log_{}", self.name),
        }
    }

    /// Formula spelling, e.g. `log(SPop)`.
    pub fn formula_text(&self) -> String {
        match self.transform {
            Transform::Identity => self.name.clone(),
            Transform::Log => format!("log({})", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Intercept,
    Categorical(String),
    Numeric(NumericVar),
    Interaction { factor: String, numeric: NumericVar },
}

impl Term {
    /// Name used for term groups and column prefixes (`QCat:log_SPop`).
    pub fn label(&self) -> String {
        match self {
            Term::Intercept => "Intercept".into(),
            Term::Categorical(c) => c.clone(),
            Term::Numeric(v) => v.label(),
            Term::Interaction { factor, numeric } => format!("{}:{}", factor, numeric.label()),
        }
    }

    /// Formula spelling (`QCat:log(SPop)`).
    pub fn formula_text(&self) -> String {
        match self {
            Term::Intercept => "1".into(),
            Term::Categorical(c) => c.clone(),
            Term::Numeric(v) => v.formula_text(),
            Term::Interaction { factor, numeric } => format!("{}:{}", factor, numeric.formula_text()),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Term::Intercept => 0,
            Term::Categorical(_) => 1,
            Term::Numeric(_) => 2,
            Term::Interaction { .. } => 3,
        }
    }
}

/// A parsed, expanded and deduplicated formula. Terms are ordered intercept,
/// categoricals, numerics, interactions, each in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaAst {
    pub response: String,
    pub terms: Vec<Term>,
}

impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rhs: Vec<String> = self
            .terms
            .iter()
            .filter(|t| **t != Term::Intercept)
            .map(Term::formula_text)
            .collect();
        if rhs.is_empty() {
            write!(f, "{} ~ 1", self.response)
        } else {
            write!(f, "{} ~ {}", self.response, rhs.join(" + "))
        }
    }
}

/// Variable kinds for formula resolution.
pub trait Schema {
    fn kind_of(&self, name: &str) -> Option<VarKind>;
}

impl Schema for Frame {
    fn kind_of(&self, name: &str) -> Option<VarKind> {
        self.kind(name)
    }
}

impl Schema for BTreeMap<String, VarKind> {
    fn kind_of(&self, name: &str) -> Option<VarKind> {
        self.get(name).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Tilde,
    Plus,
    Star,
    Colon,
    LParen,
    RParen,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, FormulaError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        let tok = match c {
            c if c.is_whitespace() => {
                chars.next();
                continue;
            }
            '~' => Tok::Tilde,
            '+' => Tok::Plus,
            '*' => Tok::Star,
            ':' => Tok::Colon,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            c if c.is_alphanumeric() || c == '_' || c == '.' => {
                let mut s = String::new();
                while let Some(&(_, c)) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' || c == '.' {
                        s.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push((i, Tok::Ident(s)));
                continue;
            }
            other => {
                return Err(FormulaError::Parse {
                    offset: i,
                    message: format!("unexpected character {other:?}"),
                })
            }
        };
        chars.next();
        out.push((i, tok));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Factor {
    One,
    Var { name: String, transform: Transform },
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, FormulaError> {
        Err(FormulaError::Parse {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn ident(&mut self) -> Result<String, FormulaError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err("expected a variable name"),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), FormulaError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn factor(&mut self) -> Result<Factor, FormulaError> {
        let name = self.ident()?;
        if self.peek() == Some(&Tok::LParen) {
            if name != "log" {
                return Err(FormulaError::UnknownTransform(name));
            }
            self.pos += 1;
            let inner = self.ident()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(Factor::Var {
                name: inner,
                transform: Transform::Log,
            });
        }
        if name == "1" {
            return Ok(Factor::One);
        }
        if name.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            return Err(FormulaError::Parse {
                offset: self.toks[self.pos - 1].0,
                message: format!("unsupported constant `{name}`"),
            });
        }
        Ok(Factor::Var {
            name,
            transform: Transform::Identity,
        })
    }

    /// A product: factors joined by `*` or `:`. Returns the factors and
    /// whether any `*` appeared.
    fn product(&mut self) -> Result<(usize, Vec<Factor>, bool), FormulaError> {
        let start = self.offset();
        let mut factors = vec![self.factor()?];
        let mut star = false;
        loop {
            match self.peek() {
                Some(Tok::Star) => star = true,
                Some(Tok::Colon) => {}
                _ => break,
            }
            self.pos += 1;
            factors.push(self.factor()?);
        }
        Ok((start, factors, star))
    }
}

/// Parses `text` and resolves variable kinds against `schema`.
pub fn parse_formula(text: &str, schema: &dyn Schema) -> Result<FormulaAst, FormulaError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        end: text.len(),
    };
    let response = p.ident()?;
    p.expect(Tok::Tilde, "`~`")?;

    let mut products = vec![p.product()?];
    while p.peek() == Some(&Tok::Plus) {
        p.pos += 1;
        products.push(p.product()?);
    }
    if p.peek().is_some() {
        return p.err("unexpected token");
    }

    let classify = |f: &Factor| -> Result<Option<Term>, FormulaError> {
        match f {
            Factor::One => Ok(None),
            Factor::Var { name, transform } => {
                if *name == response {
                    return Err(FormulaError::Parse {
                        offset: 0,
                        message: format!("response `{name}` appears on the right-hand side"),
                    });
                }
                match (schema.kind_of(name), transform) {
                    (None, Transform::Log) => {
                        // a precomputed log column stands in for the raw one
                        let label = format!("log_{name}");
                        match schema.kind_of(&label) {
                            Some(VarKind::Numeric) => Ok(Some(Term::Numeric(NumericVar {
                                name: name.clone(),
                                transform: Transform::Log,
                            }))),
                            _ => Err(FormulaError::MissingVariable(name.clone())),
                        }
                    }
                    (None, _) => Err(FormulaError::MissingVariable(name.clone())),
                    (Some(VarKind::Categorical), Transform::Log) => Err(FormulaError::WrongType {
                        column: name.clone(),
                        expected: "numeric",
                    }),
                    (Some(VarKind::Categorical), _) => Ok(Some(Term::Categorical(name.clone()))),
                    (Some(VarKind::Numeric), t) => Ok(Some(Term::Numeric(NumericVar {
                        name: name.clone(),
                        transform: *t,
                    }))),
                }
            }
        }
    };

    let mut terms: Vec<(usize, Term)> = vec![(0, Term::Intercept)];
    let mut order = 1;
    let mut add = |t: Term, terms: &mut Vec<(usize, Term)>| {
        if !terms.iter().any(|(_, x)| *x == t) {
            terms.push((order, t));
            order += 1;
        }
    };
    for (offset, factors, star) in products {
        let resolved: Vec<Term> = factors
            .iter()
            .map(&classify)
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        match resolved.len() {
            0 => {}
            1 if factors.len() == 1 => add(resolved.into_iter().next().unwrap(), &mut terms),
            2 if factors.len() == 2 => {
                let text = factors_text(&resolved);
                let (factor, numeric) = match (&resolved[0], &resolved[1]) {
                    (Term::Categorical(c), Term::Numeric(n)) | (Term::Numeric(n), Term::Categorical(c)) => {
                        (c.clone(), n.clone())
                    }
                    _ => return Err(FormulaError::UnsupportedTerm(text)),
                };
                if star {
                    for t in resolved {
                        add(t, &mut terms);
                    }
                }
                add(Term::Interaction { factor, numeric }, &mut terms);
            }
            _ => {
                let _ = offset;
                return Err(FormulaError::UnsupportedTerm(factors_text(&resolved)));
            }
        }
    }
    terms.sort_by_key(|(i, t)| (t.rank(), *i));
    Ok(FormulaAst {
        response,
        terms: terms.into_iter().map(|(_, t)| t).collect(),
    })
}

fn factors_text(terms: &[Term]) -> String {
    terms.iter().map(Term::formula_text).collect::<Vec<_>>().join(":")
}

/// Mean and population standard deviation of a column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn fit(column: &str, values: &[f64]) -> Result<Self, FormulaError> {
        if values.is_empty() {
            return Err(FormulaError::EmptyFrame);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0 && std.is_finite()) {
            return Err(FormulaError::ZeroVariance(column.to_string()));
        }
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Standardizes numeric `columns`. With `params`, those are applied unchanged;
/// otherwise they are computed from the frame. Returns the params used.
pub fn standardize(
    frame: &Frame,
    columns: &[&str],
    params: Option<&BTreeMap<String, Standardization>>,
) -> Result<(Frame, BTreeMap<String, Standardization>), FormulaError> {
    let mut out = frame.clone();
    let mut used = BTreeMap::new();
    for &name in columns {
        let values = frame.numeric(name)?;
        let s = match params {
            Some(p) => *p
                .get(name)
                .ok_or_else(|| FormulaError::MissingVariable(name.to_string()))?,
            None => Standardization::fit(name, values)?,
        };
        out.set(name, Column::Numeric(values.iter().map(|&v| s.apply(v)).collect()))?;
        used.insert(name.to_string(), s);
    }
    Ok((out, used))
}

/// What a design column holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnRole {
    Intercept,
    Level {
        factor: String,
        level: String,
    },
    Numeric {
        label: String,
    },
    Interaction {
        factor: String,
        level: String,
        numeric: String,
    },
}

impl ColumnRole {
    pub fn name(&self) -> String {
        match self {
            ColumnRole::Intercept => "Intercept".into(),
            ColumnRole::Level { factor, level } => format!("{factor}[T.{level}]"),
            ColumnRole::Numeric { label } => label.clone(),
            ColumnRole::Interaction { factor, level, numeric } => format!("{factor}[T.{level}]:{numeric}"),
        }
    }
}

/// Contiguous columns belonging to one term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl TermGroup {
    pub fn columns(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Everything needed to encode new rows the same way as the fitted design:
/// categorical levels (first one is the omitted reference) and numeric
/// standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEncoding {
    pub levels: BTreeMap<String, Vec<String>>,
    pub standardization: BTreeMap<String, Standardization>,
    pub standardize: bool,
}

impl DesignEncoding {
    pub fn reference_levels(&self) -> BTreeMap<String, String> {
        self.levels.iter().map(|(k, v)| (k.clone(), v[0].clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignOptions {
    pub standardize: bool,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { standardize: true }
    }
}

/// Dense row-major model matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_rows: usize,
    values: Vec<f64>,
    pub columns: Vec<ColumnRole>,
    pub column_names: Vec<String>,
    pub term_groups: Vec<TermGroup>,
    pub encoding: DesignEncoding,
}

impl DesignMatrix {
    /// Wraps a raw row-major matrix, one term group per column.
    pub fn from_rows(n_rows: usize, column_names: Vec<String>, values: Vec<f64>) -> Self {
        let p = column_names.len();
        assert_eq!(values.len(), n_rows * p, "values must be n_rows * n_cols");
        let columns: Vec<ColumnRole> = column_names
            .iter()
            .map(|n| {
                if n == "Intercept" {
                    ColumnRole::Intercept
                } else {
                    ColumnRole::Numeric { label: n.clone() }
                }
            })
            .collect();
        let term_groups = column_names
            .iter()
            .enumerate()
            .map(|(i, n)| TermGroup {
                name: n.clone(),
                start: i,
                len: 1,
            })
            .collect();
        DesignMatrix {
            n_rows,
            values,
            columns,
            column_names,
            term_groups,
            encoding: DesignEncoding {
                levels: BTreeMap::new(),
                standardization: BTreeMap::new(),
                standardize: false,
            },
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols() + j]
    }

    pub fn reference_levels(&self) -> BTreeMap<String, String> {
        self.encoding.reference_levels()
    }

    pub fn take_rows(&self, rows: &[usize]) -> DesignMatrix {
        let p = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        DesignMatrix {
            n_rows: rows.len(),
            values,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> DesignMatrix {
        DesignMatrix {
            n_rows: 0,
            values: Vec::new(),
            columns: self.columns.clone(),
            column_names: self.column_names.clone(),
            term_groups: self.term_groups.clone(),
            encoding: self.encoding.clone(),
        }
    }
}

fn numeric_series(frame: &Frame, var: &NumericVar) -> Result<Vec<f64>, FormulaError> {
    match var.transform {
        Transform::Identity => Ok(frame.numeric(&var.name)?.to_vec()),
        Transform::Log => {
            let label = var.label();
            if let Some(Column::Numeric(v)) = frame.column(&label) {
                return Ok(v.clone());
            }
            frame
                .numeric(&var.name)?
                .iter()
                .map(|&x| {
                    if x > 0.0 {
                        Ok(x.ln())
                    } else {
                        Err(FormulaError::NonPositiveLog(var.name.clone()))
                    }
                })
                .collect()
        }
    }
}

fn numeric_vars(ast: &FormulaAst) -> Vec<NumericVar> {
    let mut out: Vec<NumericVar> = Vec::new();
    for t in &ast.terms {
        let v = match t {
            Term::Numeric(v) | Term::Interaction { numeric: v, .. } => v,
            _ => continue,
        };
        if !out.contains(v) {
            out.push(v.clone());
        }
    }
    out
}

fn factor_names(ast: &FormulaAst) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in &ast.terms {
        let f = match t {
            Term::Categorical(f) | Term::Interaction { factor: f, .. } => f,
            _ => continue,
        };
        if !out.contains(f) {
            out.push(f.clone());
        }
    }
    out
}

/// Fits an encoding on `frame`: levels sorted lexicographically, numeric
/// standardization from the frame when `options.standardize`.
pub fn fit_encoding(ast: &FormulaAst, frame: &Frame, options: DesignOptions) -> Result<DesignEncoding, FormulaError> {
    if frame.n_rows() == 0 {
        return Err(FormulaError::EmptyFrame);
    }
    let mut levels = BTreeMap::new();
    for f in factor_names(ast) {
        let set: BTreeSet<&str> = frame.categorical(&f)?.iter().map(String::as_str).collect();
        if set.len() < 2 {
            return Err(FormulaError::SingleLevelCategorical(f));
        }
        levels.insert(f, set.into_iter().map(str::to_string).collect());
    }
    let mut standardization = BTreeMap::new();
    if options.standardize {
        for v in numeric_vars(ast) {
            let series = numeric_series(frame, &v)?;
            standardization.insert(v.label(), Standardization::fit(&v.label(), &series)?);
        }
    }
    Ok(DesignEncoding {
        levels,
        standardization,
        standardize: options.standardize,
    })
}

/// Builds the design matrix and response vector, fitting the encoding on
/// `frame`.
pub fn build_design_matrix(
    ast: &FormulaAst,
    frame: &Frame,
    options: DesignOptions,
) -> Result<(DesignMatrix, Vec<f64>), FormulaError> {
    let encoding = fit_encoding(ast, frame, options)?;
    build_with_encoding(ast, frame, &encoding)
}

/// Builds the design matrix with a previously fitted encoding. Levels absent
/// from the encoding are an error.
pub fn build_with_encoding(
    ast: &FormulaAst,
    frame: &Frame,
    encoding: &DesignEncoding,
) -> Result<(DesignMatrix, Vec<f64>), FormulaError> {
    let n = frame.n_rows();
    if n == 0 {
        return Err(FormulaError::EmptyFrame);
    }
    let response = frame.numeric(&ast.response)?.to_vec();

    // level index per row (0 = reference) for each factor
    let mut level_idx: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for f in factor_names(ast) {
        let levels = encoding
            .levels
            .get(&f)
            .ok_or_else(|| FormulaError::MissingVariable(f.clone()))?;
        let lookup: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let idx = frame
            .categorical(&f)?
            .iter()
            .map(|v| {
                lookup
                    .get(v.as_str())
                    .copied()
                    .ok_or_else(|| FormulaError::UnseenLevel {
                        column: f.clone(),
                        level: v.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        level_idx.insert(f, idx);
    }
    let mut numerics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for v in numeric_vars(ast) {
        let mut series = numeric_series(frame, &v)?;
        if encoding.standardize {
            let s = encoding
                .standardization
                .get(&v.label())
                .ok_or_else(|| FormulaError::MissingVariable(v.label()))?;
            series.iter_mut().for_each(|x| *x = s.apply(*x));
        }
        numerics.insert(v.label(), series);
    }

    let mut columns = Vec::new();
    let mut term_groups = Vec::new();
    for t in &ast.terms {
        let start = columns.len();
        match t {
            Term::Intercept => columns.push(ColumnRole::Intercept),
            Term::Categorical(f) => {
                for level in &encoding.levels[f][1..] {
                    columns.push(ColumnRole::Level {
                        factor: f.clone(),
                        level: level.clone(),
                    });
                }
            }
            Term::Numeric(v) => columns.push(ColumnRole::Numeric { label: v.label() }),
            Term::Interaction { factor, numeric } => {
                for level in &encoding.levels[factor][1..] {
                    columns.push(ColumnRole::Interaction {
                        factor: factor.clone(),
                        level: level.clone(),
                        numeric: numeric.label(),
                    });
                }
            }
        }
        term_groups.push(TermGroup {
            name: t.label(),
            start,
            len: columns.len() - start,
        });
    }

    // resolve each column to (factor row-levels, level index, numeric series)
    enum Src<'a> {
        One,
        Level(&'a [usize], usize),
        Num(&'a [f64]),
        Inter(&'a [usize], usize, &'a [f64]),
    }
    let level_pos = |factor: &str, level: &str| {
        encoding.levels[factor]
            .iter()
            .position(|l| l == level)
            .expect("level in encoding")
    };
    let sources: Vec<Src<'_>> = columns
        .iter()
        .map(|c| match c {
            ColumnRole::Intercept => Src::One,
            ColumnRole::Level { factor, level } => Src::Level(&level_idx[factor], level_pos(factor, level)),
            ColumnRole::Numeric { label } => Src::Num(&numerics[label]),
            ColumnRole::Interaction { factor, level, numeric } => {
                Src::Inter(&level_idx[factor], level_pos(factor, level), &numerics[numeric])
            }
        })
        .collect();

    let p = columns.len();
    let mut values = Vec::with_capacity(n * p);
    for i in 0..n {
        for s in &sources {
            values.push(match *s {
                Src::One => 1.0,
                Src::Level(idx, l) => f64::from(u8::from(idx[i] == l)),
                Src::Num(x) => x[i],
                Src::Inter(idx, l, x) => {
                    if idx[i] == l {
                        x[i]
                    } else {
                        0.0
                    }
                }
            });
        }
    }

    let column_names = columns.iter().map(ColumnRole::name).collect();
    Ok((
        DesignMatrix {
            n_rows: n,
            values,
            columns,
            column_names,
            term_groups,
            encoding: encoding.clone(),
        },
        response,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(cats: &[&str], nums: &[&str]) -> BTreeMap<String, VarKind> {
        cats.iter()
            .map(|c| (c.to_string(), VarKind::Categorical))
            .chain(nums.iter().map(|n| (n.to_string(), VarKind::Numeric)))
            .collect()
    }

    fn texts(ast: &FormulaAst) -> Vec<String> {
        ast.terms
            .iter()
            .map(|t| {
                if *t == Term::Intercept {
                    "Intercept".into()
                } else {
                    t.formula_text()
                }
            })
            .collect()
    }

    #[test]
    fn parses_full_model() {
        let s = schema(&["QCat"], &["correct", "SPop", "SCons", "Cert"]);
        let ast = parse_formula("correct ~ QCat*log(SPop) + QCat*SCons + QCat*Cert", &s).unwrap();
        assert_eq!(ast.response, "correct");
        assert_eq!(
            texts(&ast),
            vec![
                "Intercept",
                "QCat",
                "log(SPop)",
                "SCons",
                "Cert",
                "QCat:log(SPop)",
                "QCat:SCons",
                "QCat:Cert"
            ]
        );
        assert_eq!(
            ast.to_string(),
            "correct ~ QCat + log(SPop) + SCons + Cert + QCat:log(SPop) + QCat:SCons + QCat:Cert"
        );
    }

    #[test]
    fn minimal_and_colon_only() {
        let s = schema(&["A"], &["y", "x"]);
        assert_eq!(texts(&parse_formula("y ~ x", &s).unwrap()), vec!["Intercept", "x"]);
        assert_eq!(texts(&parse_formula("y~A:x", &s).unwrap()), vec!["Intercept", "A:x"]);
        assert_eq!(
            texts(&parse_formula("y ~ 1 + x + x", &s).unwrap()),
            vec!["Intercept", "x"]
        );
        assert_eq!(
            texts(&parse_formula("y ~ x*A", &s).unwrap()),
            vec!["Intercept", "A", "x", "A:x"]
        );
    }

    #[test]
    fn log_resolves_precomputed_column() {
        let s = schema(&[], &["y", "log_SPop"]);
        let ast = parse_formula("y ~ log(SPop)", &s).unwrap();
        assert_eq!(ast.terms[1].label(), "log_SPop");
    }

    #[test]
    fn parse_errors() {
        let s = schema(&["A", "B"], &["y", "x", "z"]);
        assert!(matches!(
            parse_formula("y x", &s),
            Err(FormulaError::Parse { offset: 2, .. })
        ));
        assert!(matches!(
            parse_formula("y ~ x +", &s),
            Err(FormulaError::Parse { offset: 7, .. })
        ));
        assert!(matches!(
            parse_formula("y ~ x $ z", &s),
            Err(FormulaError::Parse { offset: 6, .. })
        ));
        assert_eq!(
            parse_formula("y ~ exp(x)", &s),
            Err(FormulaError::UnknownTransform("exp".into()))
        );
        assert_eq!(
            parse_formula("y ~ w", &s),
            Err(FormulaError::MissingVariable("w".into()))
        );
        assert!(matches!(
            parse_formula("y ~ x*z", &s),
            Err(FormulaError::UnsupportedTerm(_))
        ));
        assert!(matches!(
            parse_formula("y ~ A:B", &s),
            Err(FormulaError::UnsupportedTerm(_))
        ));
        assert!(matches!(
            parse_formula("y ~ A*x*z", &s),
            Err(FormulaError::UnsupportedTerm(_))
        ));
        assert!(matches!(
            parse_formula("y ~ x + y", &s),
            Err(FormulaError::Parse { .. })
        ));
    }

    #[test]
    fn standardize_population() {
        let f = Frame::new().with_numeric("x", vec![1.0, 2.0, 3.0]).unwrap();
        let (g, p) = standardize(&f, &["x"], None).unwrap();
        let x = g.numeric("x").unwrap();
        let e = 1.5f64.sqrt();
        assert!((x[0] + e).abs() < 1e-12 && x[1].abs() < 1e-12 && (x[2] - e).abs() < 1e-12);
        assert!((x[2] - 1.2247).abs() < 1e-4);
        // fixed point
        let (h, p2) = standardize(&g, &["x"], None).unwrap();
        assert!((p2["x"].mean).abs() < 1e-15 && (p2["x"].std - 1.0).abs() < 1e-12);
        assert!(h
            .numeric("x")
            .unwrap()
            .iter()
            .zip(x)
            .all(|(a, b)| (a - b).abs() < 1e-12));
        // supplied params are reused as-is
        let t = Frame::new().with_numeric("x", vec![2.0]).unwrap();
        let (t2, echoed) = standardize(&t, &["x"], Some(&p)).unwrap();
        assert_eq!(t2.numeric("x").unwrap(), &[0.0]);
        assert_eq!(echoed, p);
        let c = Frame::new().with_numeric("x", vec![4.0, 4.0]).unwrap();
        assert_eq!(
            standardize(&c, &["x"], None).unwrap_err(),
            FormulaError::ZeroVariance("x".into())
        );
    }

    #[test]
    fn smallest_interaction_design() {
        let f = Frame::new()
            .with_numeric("y", vec![0.0, 1.0, 1.0, 0.0])
            .unwrap()
            .with_categorical("A", vec!["a", "b", "b", "a"])
            .unwrap()
            .with_numeric("x", vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let ast = parse_formula("y ~ A*x", &f).unwrap();
        let (d, y) = build_design_matrix(&ast, &f, DesignOptions { standardize: false }).unwrap();
        assert_eq!(d.column_names, vec!["Intercept", "A[T.b]", "x", "A[T.b]:x"]);
        assert_eq!(y, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d.row(1), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(d.row(3), &[1.0, 0.0, 4.0, 0.0]);
        assert_eq!(d.reference_levels()["A"], "a");
        let dfs: Vec<usize> = d.term_groups.iter().map(|g| g.len).collect();
        assert_eq!(dfs, vec![1, 1, 1, 1]);
    }

    #[test]
    fn unseen_level_and_single_level() {
        let f = Frame::new()
            .with_numeric("y", vec![0.0, 1.0])
            .unwrap()
            .with_categorical("A", vec!["a", "b"])
            .unwrap();
        let ast = parse_formula("y ~ A", &f).unwrap();
        let (d, _) = build_design_matrix(&ast, &f, DesignOptions::default()).unwrap();
        let g = Frame::new()
            .with_numeric("y", vec![0.0])
            .unwrap()
            .with_categorical("A", vec!["c"])
            .unwrap();
        assert!(matches!(
            build_with_encoding(&ast, &g, &d.encoding),
            Err(FormulaError::UnseenLevel { .. })
        ));
        let h = Frame::new()
            .with_numeric("y", vec![0.0, 1.0])
            .unwrap()
            .with_categorical("A", vec!["a", "a"])
            .unwrap();
        assert_eq!(
            build_design_matrix(&ast, &h, DesignOptions::default()).unwrap_err(),
            FormulaError::SingleLevelCategorical("A".into())
        );
    }

    #[test]
    fn csv_round_trip() {
        let f = Frame::new()
            .with_categorical("QCat", vec!["capital of", "sport"])
            .unwrap()
            .with_numeric("x", vec![0.1, -2.5e-7])
            .unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(Frame::read_csv(&path, &["QCat"]).unwrap(), f);
    }
}
