//! Candidate-function library Θ(s, a).
//!
//! A [`LibrarySpec`] declares which families of basis functions are offered
//! to the sparse regression: an optional constant, total-degree polynomial
//! monomials, sine/cosine pairs at fixed frequencies and guarded reciprocals.
//! Columns always come out in one canonical order:
//!
//! 1. bias,
//! 2. polynomial monomials in graded lexicographic order,
//! 3. trig pairs grouped by frequency, then by input (`sin` before `cos`),
//! 4. rational terms by input.
//!
//! Inputs are the state dimensions followed by the encoded action. The last
//! `discrete_inputs` inputs are action indicators: they enter only linearly,
//! alone or multiplied by a single continuous input, and never inside trig
//! or rational terms.
//!
//! When a [`NormStats`] is supplied, polynomial terms see z-scored inputs
//! while trig and rational terms see the raw values, so that a term such as
//! `cos(3*position)` keeps its physical meaning.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Smallest standard deviation a normalized input may have.
pub const STD_FLOOR: f64 = 1e-8;

/// Default ε of the rational guard `1/(x + ε·sign₀(x))`.
pub const DEFAULT_RATIONAL_GUARD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("invalid library spec: {0}")]
    InvalidSpec(String),
    #[error("input has {found} columns but the library expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("non-finite input value {value} at row {row}, column {column} ({name})")]
    NonFinite {
        row: usize,
        column: usize,
        name: String,
        value: f64,
    },
    #[error("normalization has {found} entries but the library expects {expected}")]
    NormWidth { expected: usize, found: usize },
}

/// Declarative description of a feature library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibrarySpec {
    pub include_bias: bool,
    pub poly_degree: u32,
    pub trig_frequencies: Vec<f64>,
    pub rational_enabled: bool,
    pub rational_guard: f64,
    /// State labels followed by encoded-action labels.
    pub input_names: Vec<String>,
    /// Number of trailing inputs that are one-hot action indicators.
    pub discrete_inputs: usize,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        Self {
            include_bias: true,
            poly_degree: 1,
            trig_frequencies: Vec::new(),
            rational_enabled: false,
            rational_guard: DEFAULT_RATIONAL_GUARD,
            input_names: Vec::new(),
            discrete_inputs: 0,
        }
    }
}

impl LibrarySpec {
    /// Bias plus all monomials up to `degree`.
    pub fn polynomial(degree: u32) -> Self {
        Self {
            poly_degree: degree,
            ..Self::default()
        }
    }

    pub fn with_trig(mut self, frequencies: &[f64]) -> Self {
        self.trig_frequencies = frequencies.to_vec();
        self
    }

    pub fn with_rational(mut self) -> Self {
        self.rational_enabled = true;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.include_bias = false;
        self
    }

    pub fn with_inputs<S: AsRef<str>>(mut self, names: &[S], discrete_inputs: usize) -> Self {
        self.input_names = names.iter().map(|s| s.as_ref().to_string()).collect();
        self.discrete_inputs = discrete_inputs;
        self
    }

    pub fn n_inputs(&self) -> usize {
        self.input_names.len()
    }

    pub fn n_continuous(&self) -> usize {
        self.input_names.len().saturating_sub(self.discrete_inputs)
    }

    /// Short identifier such as `poly2+trig[1,2,3]+rational`.
    pub fn identifier(&self) -> String {
        let mut id = format!("poly{}", self.poly_degree);
        if !self.include_bias {
            id.push_str("-nobias");
        }
        if !self.trig_frequencies.is_empty() {
            let ks: Vec<String> = self.trig_frequencies.iter().map(|k| k.to_string()).collect();
            id.push_str(&format!("+trig[{}]", ks.join(",")));
        }
        if self.rational_enabled {
            id.push_str("+rational");
        }
        id
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidSpec(m));
        if self.input_names.is_empty() {
            return bad("library has no inputs".into());
        }
        if self.discrete_inputs > self.input_names.len() {
            return bad(format!(
                "{} discrete inputs declared but only {} inputs",
                self.discrete_inputs,
                self.input_names.len()
            ));
        }
        if self.poly_degree > 8 {
            return bad(format!("polynomial degree {} too large", self.poly_degree));
        }
        if let Some(k) = self.trig_frequencies.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return bad(format!("trig frequency {k} must be positive and finite"));
        }
        if !(self.rational_guard.is_finite() && self.rational_guard > 0.0) {
            return bad(format!(
                "rational guard {} must be positive and finite",
                self.rational_guard
            ));
        }
        if feature_count(self, self.n_inputs(), self.n_continuous()) == 0 {
            return bad("library produces no features".into());
        }
        Ok(())
    }
}

/// One column of the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Bias,
    /// Product of inputs raised to powers, `(input index, power)` ascending by index.
    Monomial(Vec<(usize, u32)>),
    Sin {
        input: usize,
        frequency: f64,
    },
    Cos {
        input: usize,
        frequency: f64,
    },
    Rational {
        input: usize,
    },
}

impl Term {
    pub fn label(&self, names: &[String]) -> String {
        match self {
            Term::Bias => "1".to_string(),
            Term::Monomial(factors) => factors
                .iter()
                .map(|&(i, p)| {
                    if p == 1 {
                        names[i].clone()
                    } else {
                        format!("{}^{}", names[i], p)
                    }
                })
                .collect::<Vec<_>>()
                .join("*"),
            Term::Sin { input, frequency } => {
                format!("sin({}{})", freq_prefix(*frequency), names[*input])
            }
            Term::Cos { input, frequency } => {
                format!("cos({}{})", freq_prefix(*frequency), names[*input])
            }
            Term::Rational { input } => format!("1/({})", names[*input]),
        }
    }

    /// Total polynomial degree (0 for non-polynomial terms).
    pub fn degree(&self) -> u32 {
        match self {
            Term::Monomial(f) => f.iter().map(|&(_, p)| p).sum(),
            _ => 0,
        }
    }
}

fn freq_prefix(k: f64) -> String {
    if k == 1.0 {
        String::new()
    } else {
        format!("{k}*")
    }
}

/// Enumerates the library's terms in canonical order.
pub fn terms(spec: &LibrarySpec) -> Vec<Term> {
    let n = spec.n_inputs();
    let n_cont = spec.n_continuous();
    let mut out = Vec::new();
    if spec.include_bias {
        out.push(Term::Bias);
    }
    for degree in 1..=spec.poly_degree as usize {
        let mut idx = Vec::with_capacity(degree);
        push_monomials(n, n_cont, degree, 0, &mut idx, &mut out);
    }
    for &k in &spec.trig_frequencies {
        for input in 0..n_cont {
            out.push(Term::Sin { input, frequency: k });
            out.push(Term::Cos { input, frequency: k });
        }
    }
    if spec.rational_enabled {
        for input in 0..n_cont {
            out.push(Term::Rational { input });
        }
    }
    out
}

// Nondecreasing index tuples of length `degree`, i.e. graded lex order.
fn push_monomials(n: usize, n_cont: usize, degree: usize, start: usize, idx: &mut Vec<usize>, out: &mut Vec<Term>) {
    if idx.len() == degree {
        let discrete = idx.iter().filter(|&&i| i >= n_cont).count();
        if discrete > 1 || (discrete == 1 && degree > 2) {
            return;
        }
        let mut factors: Vec<(usize, u32)> = Vec::new();
        for &i in idx.iter() {
            match factors.last_mut() {
                Some((j, p)) if *j == i => *p += 1,
                _ => factors.push((i, 1)),
            }
        }
        out.push(Term::Monomial(factors));
        return;
    }
    for i in start..n {
        idx.push(i);
        push_monomials(n, n_cont, degree, i, idx, out);
        idx.pop();
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of columns [`evaluate`] produces for `n_inputs` inputs of which the
/// first `n_continuous` are continuous.
pub fn feature_count(spec: &LibrarySpec, n_inputs: usize, n_continuous: usize) -> usize {
    assert!(n_inputs >= 1, "library needs at least one input");
    assert!(n_continuous <= n_inputs, "more continuous inputs than inputs");
    let d = spec.poly_degree as u64;
    let c = n_continuous as u64;
    let discrete = (n_inputs - n_continuous) as u64;
    let mut count = u64::from(spec.include_bias);
    count += binomial(c + d, d) - 1;
    if d >= 1 {
        count += discrete;
    }
    if d >= 2 {
        count += discrete * c;
    }
    count += 2 * spec.trig_frequencies.len() as u64 * c;
    if spec.rational_enabled {
        count += c;
    }
    count as usize
}

/// Human-readable label of every column, in canonical order.
pub fn term_names(spec: &LibrarySpec) -> Vec<String> {
    terms(spec).iter().map(|t| t.label(&spec.input_names)).collect()
}

/// Per-input affine normalization: `z = (x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> NormStats<T> {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![T::zero(); n],
            std: vec![T::one(); n],
        }
    }

    /// Z-score statistics of the columns of `inputs`. The trailing
    /// `discrete_inputs` columns keep the identity transform.
    pub fn fit(inputs: ArrayView2<T>, discrete_inputs: usize) -> Self {
        let (m, n) = inputs.dim();
        let n_cont = n.saturating_sub(discrete_inputs);
        let floor = T::lit(STD_FLOOR);
        let mut stats = Self::identity(n);
        if m == 0 {
            return stats;
        }
        let count = T::from_count(m);
        for j in 0..n_cont {
            let col = inputs.column(j);
            let mean = col.iter().copied().sum::<T>() / count;
            let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / count;
            stats.mean[j] = mean;
            stats.std[j] = var.sqrt().max(floor);
        }
        stats
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    #[inline]
    pub fn normalize_into(&self, raw: &[T], out: &mut [T]) {
        for ((o, &x), (&mu, &sd)) in out.iter_mut().zip(raw).zip(self.mean.iter().zip(&self.std)) {
            *o = (x - mu) / sd;
        }
    }
}

/// A library compiled for repeated row evaluation.
#[derive(Debug, Clone)]
pub struct FeatureLibrary {
    spec: LibrarySpec,
    terms: Vec<Term>,
}

impl FeatureLibrary {
    pub fn new(spec: &LibrarySpec) -> Result<Self, FeatureError> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            terms: terms(spec),
        })
    }

    pub fn spec(&self) -> &LibrarySpec {
        &self.spec
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Value of a single term. `raw` feeds trig and rational terms, `scaled`
    /// feeds polynomial terms.
    #[inline]
    pub fn term_value<T: Real>(&self, term: &Term, raw: &[T], scaled: &[T]) -> T {
        match term {
            Term::Bias => T::one(),
            Term::Monomial(factors) => factors
                .iter()
                .fold(T::one(), |acc, &(i, p)| acc * scaled[i].powi(p as i32)),
            Term::Sin { input, frequency } => (T::lit(*frequency) * raw[*input]).sin(),
            Term::Cos { input, frequency } => (T::lit(*frequency) * raw[*input]).cos(),
            Term::Rational { input } => {
                let x = raw[*input];
                let guard = T::lit(self.spec.rational_guard);
                let signed = if x >= T::zero() { guard } else { -guard };
                T::one() / (x + signed)
            }
        }
    }

    /// Evaluates every term for one input row.
    pub fn eval_row<T: Real>(&self, raw: &[T], scaled: &[T], out: &mut [T]) {
        for (o, term) in out.iter_mut().zip(&self.terms) {
            *o = self.term_value(term, raw, scaled);
        }
    }

    /// Evaluates the full matrix Θ for `inputs`, applying `norm` to the
    /// polynomial terms.
    pub fn evaluate<T: Real>(&self, inputs: ArrayView2<T>, norm: &NormStats<T>) -> Result<Array2<T>, FeatureError> {
        let (m, n) = inputs.dim();
        if n != self.spec.n_inputs() {
            return Err(FeatureError::InputWidth {
                expected: self.spec.n_inputs(),
                found: n,
            });
        }
        if norm.len() != n {
            return Err(FeatureError::NormWidth {
                expected: n,
                found: norm.len(),
            });
        }
        for ((row, column), &v) in inputs.indexed_iter() {
            if !v.is_finite() {
                return Err(FeatureError::NonFinite {
                    row,
                    column,
                    name: self.spec.input_names[column].clone(),
                    value: v.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        let p = self.terms.len();
        let mut out = Array2::<T>::zeros((m, p));
        let mut raw = vec![T::zero(); n];
        let mut scaled = vec![T::zero(); n];
        for (i, row) in inputs.outer_iter().enumerate() {
            for (r, &x) in raw.iter_mut().zip(row.iter()) {
                *r = x;
            }
            norm.normalize_into(&raw, &mut scaled);
            let mut out_row = out.row_mut(i);
            for (o, term) in out_row.iter_mut().zip(&self.terms) {
                *o = self.term_value(term, &raw, &scaled);
            }
        }
        Ok(out)
    }
}

/// Evaluates Θ on un-normalized inputs.
pub fn evaluate<T: Real>(spec: &LibrarySpec, inputs: ArrayView2<T>) -> Result<Array2<T>, FeatureError> {
    FeatureLibrary::new(spec)?.evaluate(inputs, &NormStats::identity(spec.n_inputs()))
}

/// Evaluates Θ with polynomial terms on z-scored inputs.
pub fn evaluate_scaled<T: Real>(
    spec: &LibrarySpec,
    inputs: ArrayView2<T>,
    norm: &NormStats<T>,
) -> Result<Array2<T>, FeatureError> {
    FeatureLibrary::new(spec)?.evaluate(inputs, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn xy(spec: LibrarySpec) -> LibrarySpec {
        spec.with_inputs(&["x", "y"], 0)
    }

    #[test]
    fn counts_match_small_cases() {
        let s = xy(LibrarySpec::polynomial(1));
        assert_eq!(feature_count(&s, 2, 2), 3);
        let s = xy(LibrarySpec::polynomial(2));
        assert_eq!(feature_count(&s, 2, 2), 6);
        let s = LibrarySpec::polynomial(0)
            .without_bias()
            .with_trig(&[1.0, 2.0, 3.0])
            .with_inputs(&["x"], 0);
        assert_eq!(feature_count(&s, 1, 1), 6);
        assert_eq!(
            term_names(&s),
            ["sin(x)", "cos(x)", "sin(2*x)", "cos(2*x)", "sin(3*x)", "cos(3*x)"]
        );
    }

    #[test]
    fn degree_two_row() {
        let s = xy(LibrarySpec::polynomial(2));
        let out = evaluate(&s, array![[2.0, 3.0]].view()).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(term_names(&s), ["1", "x", "y", "x^2", "x*y", "y^2"]);
    }

    #[test]
    fn trig_at_zero_and_names() {
        let s = LibrarySpec::polynomial(0)
            .without_bias()
            .with_trig(&[3.0])
            .with_inputs(&["x"], 0);
        let out = evaluate(&s, array![[0.0]].view()).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.0, 1.0]);
        let s = LibrarySpec::polynomial(1).with_trig(&[3.0]).with_inputs(&["x"], 0);
        assert_eq!(term_names(&s), ["1", "x", "sin(3*x)", "cos(3*x)"]);
    }

    #[test]
    fn rational_guard_at_zero() {
        let s = LibrarySpec::polynomial(0)
            .without_bias()
            .with_rational()
            .with_inputs(&["y"], 0);
        let out = evaluate(&s, array![[0.0], [-0.5]].view()).unwrap();
        assert_eq!(out[[0, 0]], 1.0 / 1e-6);
        assert_eq!(out[[1, 0]], 1.0 / (-0.5 - 1e-6));
        assert_eq!(term_names(&s), ["1/(y)"]);
    }

    #[test]
    fn non_finite_input_names_location() {
        let s = xy(LibrarySpec::polynomial(1));
        let err = evaluate(&s, array![[0.0, 1.0], [2.0, f64::NAN]].view()).unwrap_err();
        match err {
            FeatureError::NonFinite { row, column, name, .. } => {
                assert_eq!((row, column, name.as_str()), (1, 1, "y"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn discrete_inputs_only_enter_linearly() {
        // two states, three indicators
        let s = LibrarySpec::polynomial(3)
            .with_trig(&[1.0])
            .with_rational()
            .with_inputs(&["x", "v", "a0", "a1", "a2"], 3);
        let names = term_names(&s);
        assert_eq!(names.len(), feature_count(&s, 5, 2));
        assert!(names.contains(&"x*a1".to_string()));
        assert!(!names.iter().any(|n| n.contains("a0^2") || n.contains("a0*a1")));
        assert!(!names.iter().any(|n| n.contains("x^2*a0") || n.contains("x*v*a2")));
        assert!(!names.iter().any(|n| n.contains("(a")));
    }

    #[test]
    fn zero_rows_leave_only_the_bias() {
        let s = LibrarySpec::polynomial(3).with_inputs(&["a", "b", "c"], 0);
        let out = evaluate(&s, Array2::<f64>::zeros((2, 3)).view()).unwrap();
        for row in out.outer_iter() {
            assert_eq!(row[0], 1.0);
            assert!(row.iter().skip(1).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scaled_evaluation_keeps_trig_in_raw_units() {
        let s = LibrarySpec::polynomial(1).with_trig(&[3.0]).with_inputs(&["p"], 0);
        let norm = NormStats {
            mean: vec![-0.5],
            std: vec![0.25],
        };
        let out = evaluate_scaled(&s, array![[0.0]].view(), &norm).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![1.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn f32_evaluation() {
        let s = xy(LibrarySpec::polynomial(2));
        let out = evaluate(&s, array![[2.0f32, 3.0]].view()).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![1.0f32, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn norm_stats_floor_and_discrete_identity() {
        let x = array![[1.0, 0.0], [1.0, 1.0], [1.0, 0.0]];
        let stats = NormStats::fit(x.view(), 1);
        assert_eq!(stats.mean, vec![1.0, 0.0]);
        assert_eq!(stats.std, vec![STD_FLOOR, 1.0]);
    }

    // Independent symbolic re-evaluation of each label.
    fn eval_label(label: &str, names: &[&str], x: &[f64]) -> f64 {
        let var = |s: &str| x[names.iter().position(|n| *n == s).unwrap()];
        let arg = |s: &str| -> f64 {
            match s.split_once('*') {
                Some((k, v)) => k.parse::<f64>().unwrap() * var(v),
                None => var(s),
            }
        };
        if label == "1" {
            return 1.0;
        }
        if let Some(inner) = label.strip_prefix("sin(") {
            return arg(inner.trim_end_matches(')')).sin();
        }
        if let Some(inner) = label.strip_prefix("cos(") {
            return arg(inner.trim_end_matches(')')).cos();
        }
        if let Some(inner) = label.strip_prefix("1/(") {
            let v = var(inner.trim_end_matches(')'));
            return 1.0 / (v + if v >= 0.0 { 1e-6 } else { -1e-6 });
        }
        label
            .split('*')
            .map(|f| match f.split_once('^') {
                Some((v, p)) => var(v).powi(p.parse().unwrap()),
                None => var(f),
            })
            .product()
    }

    proptest! {
        #[test]
        fn columns_match_their_labels(
            degree in 0u32..4,
            bias in any::<bool>(),
            trig in proptest::sample::subsequence(vec![1.0, 2.0, 3.0], 0..=3),
            rational in any::<bool>(),
            rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 1..6),
        ) {
            let mut spec = LibrarySpec::polynomial(degree).with_trig(&trig).with_inputs(&["x", "v", "a"], 1);
            spec.include_bias = bias;
            spec.rational_enabled = rational;
            prop_assume!(spec.validate().is_ok());
            let names = ["x", "v", "a"];
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let inputs = Array2::from_shape_vec((rows.len(), 3), flat).unwrap();
            let out = evaluate(&spec, inputs.view()).unwrap();
            let labels = term_names(&spec);
            prop_assert_eq!(out.ncols(), feature_count(&spec, 3, 2));
            prop_assert_eq!(labels.len(), out.ncols());
            for (i, row) in rows.iter().enumerate() {
                for (j, label) in labels.iter().enumerate() {
                    let expected = eval_label(label, &names, row);
                    prop_assert!((out[[i, j]] - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                        "{} at row {}: {} vs {}", label, i, out[[i, j]], expected);
                }
            }
        }
    }
}
