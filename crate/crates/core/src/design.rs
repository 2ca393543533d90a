//! Random-intercept model formulas and indicator design matrices.
//!
//! A design is stored as one level index per row and term, which is the
//! sparse form of an `N x F_c` 0/1 matrix with exactly one 1 per row. The
//! residual term is always the identity and is kept implicit.

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::MixedModelData;
use crate::error::{Error, Result};

/// A random-intercept term: a single factor or an interaction `f1:f2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    factors: Vec<String>,
}

impl Term {
    pub fn single(name: impl Into<String>) -> Self {
        Self {
            factors: vec![name.into()],
        }
    }

    pub fn interaction(a: impl Into<String>, b: impl Into<String>) -> Self {
        Self {
            factors: vec![a.into(), b.into()],
        }
    }

    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    pub fn name(&self) -> String {
        self.factors.join(":")
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Parsed `resp ~ (1|t1) + (1|t2) + ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    response: String,
    terms: Vec<Term>,
}

impl ModelSpec {
    pub fn new(response: impl Into<String>, terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidData("model needs at least one random term".into()));
        }
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].contains(t) {
                return Err(Error::InvalidData(format!("duplicate term ({})", t)));
            }
        }
        Ok(Self {
            response: response.into(),
            terms,
        })
    }

    pub fn response(&self) -> &str {
        &self.response
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Number of random terms `C` (the residual is not counted).
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}~", self.response)?;
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "(1|{t})")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_formula(s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn expect(&mut self, byte: u8) -> Result<()> {
        match self.peek() {
            Some(b) if b == byte => {
                self.pos += 1;
                Ok(())
            }
            Some(b) => self.error(format!("expected `{}`, found `{}`", byte as char, b as char)),
            None => self.error(format!("expected `{}`, found end of input", byte as char)),
        }
    }

    fn name(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while let Some(&b) = self.src.get(self.pos) {
            let ok = if self.pos == start {
                b.is_ascii_alphabetic() || b == b'_' || b == b'.'
            } else {
                b.is_ascii_alphanumeric() || b == b'_' || b == b'.'
            };
            if !ok {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return self.error("expected a name");
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn group(&mut self) -> Result<Term> {
        self.expect(b'(')?;
        let group_start = self.pos;
        self.skip_ws();
        let lhs_start = self.pos;
        let bar = self.src[self.pos..]
            .iter()
            .position(|&b| b == b'|' || b == b')')
            .map(|i| self.pos + i);
        match bar {
            Some(i) if self.src[i] == b'|' => {
                let lhs = std::str::from_utf8(&self.src[lhs_start..i])
                    .unwrap_or("")
                    .trim();
                if lhs != "1" {
                    return Err(Error::RandomSlope { offset: group_start });
                }
                self.pos = i + 1;
            }
            _ => return self.error("expected `1|` inside random term"),
        }
        let first = self.name()?;
        let term = if self.peek() == Some(b':') {
            self.pos += 1;
            let second = self.name()?;
            Term::interaction(first, second)
        } else {
            Term::single(first)
        };
        self.expect(b')')?;
        Ok(term)
    }
}

/// Parses `resp ~ (1|a) + (1|b) + (1|a:b)`; whitespace is ignored.
pub fn parse_formula(text: &str) -> Result<ModelSpec> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let response = p.name()?;
    p.expect(b'~')?;
    let mut terms = vec![p.group()?];
    while let Some(b) = p.peek() {
        if b != b'+' {
            return p.error(format!("expected `+` or end of input, found `{}`", b as char));
        }
        p.pos += 1;
        let start = p.pos;
        let term = p.group()?;
        if terms.contains(&term) {
            return Err(Error::Syntax {
                offset: start,
                message: format!("duplicate term ({term})"),
            });
        }
        terms.push(term);
    }
    ModelSpec::new(response, terms)
}

/// Indicator matrix of one random term, stored as the column index of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignTerm {
    pub name: String,
    row_levels: Vec<usize>,
    n_columns: usize,
    level_labels: Vec<String>,
}

impl DesignTerm {
    pub fn new(name: impl Into<String>, row_levels: Vec<usize>, n_columns: usize) -> Result<Self> {
        let name = name.into();
        if let Some(&bad) = row_levels.iter().find(|&&l| l >= n_columns) {
            return Err(Error::InvalidData(format!(
                "term `{name}`: level {bad} outside {n_columns} columns"
            )));
        }
        let level_labels = (1..=n_columns).map(|i| i.to_string()).collect();
        Ok(Self {
            name,
            row_levels,
            n_columns,
            level_labels,
        })
    }

    /// Column index (level) of every row.
    pub fn row_levels(&self) -> &[usize] {
        &self.row_levels
    }

    /// `F_c`, the number of columns.
    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    pub fn level_labels(&self) -> &[String] {
        &self.level_labels
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.row_levels.len(), self.n_columns);
        for (i, &l) in self.row_levels.iter().enumerate() {
            z[(i, l)] = 1.0;
        }
        z
    }
}

/// The per-term indicator matrices `Z_c` of one layout, in model term order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    n_rows: usize,
    terms: Vec<DesignTerm>,
}

impl DesignMatrices {
    pub fn new(n_rows: usize, terms: Vec<DesignTerm>) -> Result<Self> {
        if n_rows == 0 {
            return Err(Error::InvalidData("design has no rows".into()));
        }
        for t in &terms {
            if t.row_levels.len() != n_rows {
                return Err(Error::InvalidData(format!(
                    "term `{}` has {} rows, expected {n_rows}",
                    t.name,
                    t.row_levels.len()
                )));
            }
        }
        Ok(Self { n_rows, terms })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn terms(&self) -> &[DesignTerm] {
        &self.terms
    }

    pub fn term(&self, name: &str) -> Option<&DesignTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Total random-effect columns `F = Σ F_c`.
    pub fn total_columns(&self) -> usize {
        self.terms.iter().map(|t| t.n_columns).sum()
    }

    pub fn residual(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n_rows, self.n_rows)
    }

    /// Marginal covariance `Σ_c σ²_c Z_c Z_cᵀ + σ²_res I`; `sigma2` has the residual last.
    pub fn covariance(&self, sigma2: &[f64]) -> DMatrix<f64> {
        assert_eq!(sigma2.len(), self.terms.len() + 1);
        let n = self.n_rows;
        let mut v = DMatrix::identity(n, n) * sigma2[self.terms.len()];
        for (t, &s2) in self.terms.iter().zip(sigma2) {
            for i in 0..n {
                for j in 0..n {
                    if t.row_levels[i] == t.row_levels[j] {
                        v[(i, j)] += s2;
                    }
                }
            }
        }
        v
    }

    /// Reorders the terms to follow `spec`, matching by term name.
    pub fn aligned_to(&self, spec: &ModelSpec) -> Result<Self> {
        if self.terms.len() != spec.n_terms() {
            return Err(Error::TaskMismatch(format!(
                "future design has {} terms, model has {}",
                self.terms.len(),
                spec.n_terms()
            )));
        }
        let terms = spec
            .terms()
            .iter()
            .map(|t| {
                let name = t.name();
                self.term(&name).cloned().ok_or_else(|| {
                    Error::TaskMismatch(format!("future design lacks term `{name}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.n_rows, terms)
    }
}

/// Builds `Z_c` for every term of `spec`; levels are numbered by first appearance.
pub fn build_design_matrices(data: &MixedModelData, spec: &ModelSpec) -> Result<DesignMatrices> {
    let n = data.n_rows();
    let mut terms = Vec::with_capacity(spec.n_terms());
    for term in spec.terms() {
        let columns = term
            .factors()
            .iter()
            .map(|f| data.factor(f).ok_or_else(|| Error::UnknownFactor(f.clone())))
            .collect::<Result<Vec<_>>>()?;
        let interaction = columns.len() > 1;
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut level_labels = Vec::new();
        let mut row_levels = Vec::with_capacity(n);
        for row in 0..n {
            let label = if interaction {
                let parts: Vec<&str> = columns.iter().map(|c| c.labels[row].as_str()).collect();
                if let Some(p) = parts.iter().find(|p| p.contains(':')) {
                    return Err(Error::InvalidData(format!(
                        "label `{p}` contains `:` and collides with interaction labels"
                    )));
                }
                parts.join(":")
            } else {
                columns[0].labels[row].clone()
            };
            let next = index.len();
            let level = *index.entry(label.clone()).or_insert_with(|| {
                level_labels.push(label);
                next
            });
            row_levels.push(level);
        }
        terms.push(DesignTerm {
            name: term.name(),
            n_columns: level_labels.len(),
            row_levels,
            level_labels,
        });
    }
    DesignMatrices::new(n, terms)
}

/// Keeps the rows named by 1-based `futvec`; all columns are retained.
pub fn subset_rows(dm: &DesignMatrices, futvec: &[usize]) -> Result<DesignMatrices> {
    if futvec.is_empty() {
        return Err(Error::InvalidData("futvec is empty".into()));
    }
    for (i, &r) in futvec.iter().enumerate() {
        if r == 0 || r > dm.n_rows {
            return Err(Error::RowOutOfRange {
                index: r,
                rows: dm.n_rows,
            });
        }
        if futvec[..i].contains(&r) {
            return Err(Error::InvalidData(format!("futvec repeats row {r}")));
        }
    }
    let terms = dm
        .terms
        .iter()
        .map(|t| DesignTerm {
            name: t.name.clone(),
            row_levels: futvec.iter().map(|&r| t.row_levels[r - 1]).collect(),
            n_columns: t.n_columns,
            level_labels: t.level_labels.clone(),
        })
        .collect();
    DesignMatrices::new(futvec.len(), terms)
}

/// What is to be predicted.
#[derive(Debug, Clone, PartialEq)]
pub enum FutureDesign {
    /// `M` future observations drawn from the historical layout.
    Unstructured(usize),
    /// 1-based rows of the historical data that mimic the future layout.
    RowSubset(Vec<usize>),
    /// Explicit future design matrices.
    ExplicitMatrices(DesignMatrices),
    /// Future binomial cluster sizes `n*_m`.
    ClusterSizes(Vec<u64>),
    /// `M` future counts.
    CountRepeats(usize),
}

impl FutureDesign {
    /// Number of future observations `M`.
    pub fn n_slots(&self) -> usize {
        match self {
            FutureDesign::Unstructured(m) | FutureDesign::CountRepeats(m) => *m,
            FutureDesign::RowSubset(rows) => rows.len(),
            FutureDesign::ExplicitMatrices(dm) => dm.n_rows(),
            FutureDesign::ClusterSizes(sizes) => sizes.len(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FutmatFile {
    terms: Vec<FutmatTerm>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FutmatTerm {
    name: String,
    matrix: Vec<Vec<f64>>,
}

/// Parses a futmat_list JSON document `{"terms":[{"name":..,"matrix":[[..],..]},..]}`.
///
/// A `Residual` entry is accepted if it is an identity and then dropped.
pub fn futmat_from_json(text: &str) -> Result<DesignMatrices> {
    let file: FutmatFile = serde_json::from_str(text)
        .map_err(|e| Error::InvalidData(format!("futmat_list JSON: {e}")))?;
    let mut n_rows: Option<usize> = None;
    let mut terms = Vec::new();
    for t in file.terms {
        let rows = t.matrix.len();
        if *n_rows.get_or_insert(rows) != rows {
            return Err(Error::InvalidData(format!(
                "futmat term `{}` has {rows} rows, earlier terms have {}",
                t.name,
                n_rows.unwrap()
            )));
        }
        if t.name == "Residual" {
            let identity = t.matrix.iter().enumerate().all(|(i, row)| {
                row.len() == rows
                    && row
                        .iter()
                        .enumerate()
                        .all(|(j, &v)| v == if i == j { 1.0 } else { 0.0 })
            });
            if !identity {
                return Err(Error::InvalidData("futmat `Residual` must be an identity".into()));
            }
            continue;
        }
        if terms.iter().any(|x: &DesignTerm| x.name == t.name) {
            return Err(Error::InvalidData(format!("futmat term `{}` repeated", t.name)));
        }
        let cols = t.matrix.first().map_or(0, Vec::len);
        let mut row_levels = Vec::with_capacity(rows);
        for (i, row) in t.matrix.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::InvalidData(format!(
                    "futmat term `{}` row {} has {} columns, expected {cols}",
                    t.name,
                    i + 1,
                    row.len()
                )));
            }
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidData(format!(
                    "futmat term `{}` row {} has non 0/1 entries",
                    t.name,
                    i + 1
                )));
            }
            let ones: Vec<usize> = (0..cols).filter(|&j| row[j] == 1.0).collect();
            if ones.len() != 1 {
                return Err(Error::InvalidData(format!(
                    "futmat term `{}` row {} must contain exactly one 1",
                    t.name,
                    i + 1
                )));
            }
            row_levels.push(ones[0]);
        }
        terms.push(DesignTerm::new(t.name, row_levels, cols)?);
    }
    let n_rows = n_rows.ok_or_else(|| Error::InvalidData("futmat_list has no terms".into()))?;
    DesignMatrices::new(n_rows, terms)
}

/// Serializes `dm` in the futmat_list JSON layout (residual omitted).
pub fn futmat_to_json(dm: &DesignMatrices) -> String {
    let file = FutmatFile {
        terms: dm
            .terms
            .iter()
            .map(|t| {
                let z = t.to_dense();
                FutmatTerm {
                    name: t.name.clone(),
                    matrix: z.row_iter().map(|r| r.iter().copied().collect()).collect(),
                }
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("futmat serialization")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FactorColumn;
    use proptest::prelude::*;

    fn col(name: &str, labels: &[&str]) -> FactorColumn {
        FactorColumn {
            name: name.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn parses_crossed_model() {
        let spec = parse_formula("y_ijk~(1|a)+(1|b)+(1|a:b)").unwrap();
        assert_eq!(spec.response(), "y_ijk");
        let names: Vec<String> = spec.terms().iter().map(Term::name).collect();
        assert_eq!(names, ["a", "b", "a:b"]);
    }

    #[test]
    fn parses_single_term_with_whitespace() {
        let spec = parse_formula("  y ~ ( 1 | lab ) ").unwrap();
        assert_eq!(spec.response(), "y");
        assert_eq!(spec.terms(), &[Term::single("lab")]);
    }

    #[test]
    fn rejects_random_slopes() {
        let err = parse_formula("y~(x|a)").unwrap_err();
        assert!(err.to_string().contains("only random intercepts supported"));
        assert!(matches!(
            parse_formula("y~(1|a)+(1+x|b)"),
            Err(Error::RandomSlope { .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse_formula("y~(1|a)+") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        match parse_formula("y(1|a)") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_formula("y~(1|a)+(1|a)").is_err());
        assert!(parse_formula("y~(1|a:b:c)").is_err());
    }

    #[test]
    fn smallest_design() {
        let data = MixedModelData::new("y", vec![3.0], vec![col("a", &["x"])]).unwrap();
        let dm = build_design_matrices(&data, &parse_formula("y~(1|a)").unwrap()).unwrap();
        assert_eq!(dm.terms()[0].to_dense(), DMatrix::from_element(1, 1, 1.0));
        assert_eq!(dm.residual(), DMatrix::identity(1, 1));
    }

    #[test]
    fn unknown_factor() {
        let data = MixedModelData::new("y", vec![3.0, 4.0], vec![col("a", &["x", "y"])]).unwrap();
        let err = build_design_matrices(&data, &parse_formula("y~(1|b)").unwrap()).unwrap_err();
        assert_eq!(err, Error::UnknownFactor("b".into()));
    }

    #[test]
    fn colon_in_label_rejected_for_interactions() {
        let data = MixedModelData::new(
            "y",
            vec![1.0, 2.0],
            vec![col("a", &["1:2", "3"]), col("b", &["1", "1"])],
        )
        .unwrap();
        assert!(build_design_matrices(&data, &parse_formula("y~(1|a:b)").unwrap()).is_err());
        assert!(build_design_matrices(&data, &parse_formula("y~(1|a)").unwrap()).is_ok());
    }

    #[test]
    fn levels_in_order_of_first_appearance() {
        let data = MixedModelData::new(
            "y",
            vec![1.0, 2.0, 3.0],
            vec![col("a", &["z", "a", "z"])],
        )
        .unwrap();
        let dm = build_design_matrices(&data, &parse_formula("y~(1|a)").unwrap()).unwrap();
        assert_eq!(dm.terms()[0].level_labels(), ["z", "a"]);
        assert_eq!(dm.terms()[0].row_levels(), [0, 1, 0]);
    }

    #[test]
    fn subset_rejects_bad_indices() {
        let data = MixedModelData::new("y", vec![1.0, 2.0], vec![col("a", &["1", "2"])]).unwrap();
        let dm = build_design_matrices(&data, &parse_formula("y~(1|a)").unwrap()).unwrap();
        assert!(matches!(subset_rows(&dm, &[3]), Err(Error::RowOutOfRange { .. })));
        assert!(subset_rows(&dm, &[0]).is_err());
        assert!(subset_rows(&dm, &[1, 1]).is_err());
        let one = subset_rows(&dm, &[2]).unwrap();
        assert_eq!(one.n_rows(), 1);
        assert_eq!(one.terms()[0].n_columns(), 2);
    }

    #[test]
    fn futmat_validation() {
        assert!(futmat_from_json(r#"{"terms":[{"name":"a","matrix":[[1,1],[0,1]]}]}"#).is_err());
        assert!(futmat_from_json(r#"{"terms":[{"name":"a","matrix":[[2],[1]]}]}"#).is_err());
        assert!(futmat_from_json(r#"{"terms":[{"name":"a","matrix":[[1],[1]]},{"name":"b","matrix":[[1]]}]}"#).is_err());
        assert!(futmat_from_json(r#"{"terms":[{"name":"a","matrix":[[1],[1]]},{"name":"Residual","matrix":[[1,1],[0,1]]}]}"#).is_err());
        let ok = futmat_from_json(
            r#"{"terms":[{"name":"a","matrix":[[1],[1]]},{"name":"Residual","matrix":[[1,0],[0,1]]}]}"#,
        )
        .unwrap();
        assert_eq!(ok.n_rows(), 2);
        assert_eq!(ok.terms().len(), 1);
    }

    fn name_strategy() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,5}"
    }

    proptest! {
        #[test]
        fn formula_round_trip(
            resp in name_strategy(),
            names in proptest::collection::vec(name_strategy(), 1..4),
            with_interaction in any::<bool>(),
        ) {
            let mut terms: Vec<Term> = Vec::new();
            for n in &names {
                let t = Term::single(n.clone());
                if !terms.contains(&t) {
                    terms.push(t);
                }
            }
            if with_interaction && names.len() > 1 && names[0] != names[1] {
                terms.push(Term::interaction(names[0].clone(), names[1].clone()));
            }
            let spec = ModelSpec::new(resp, terms).unwrap();
            let printed = spec.to_string();
            prop_assert_eq!(parse_formula(&printed).unwrap(), spec);
        }

        #[test]
        fn indicator_structure(
            a in proptest::collection::vec(0u8..4, 1..30),
            seed in proptest::collection::vec(0u8..3, 30),
            pick in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let n = a.len();
            let b: Vec<u8> = seed[..n].to_vec();
            let data = MixedModelData::new(
                "y",
                vec![0.0; n],
                vec![
                    FactorColumn { name: "a".into(), labels: a.iter().map(|v| v.to_string()).collect() },
                    FactorColumn { name: "b".into(), labels: b.iter().map(|v| v.to_string()).collect() },
                ],
            ).unwrap();
            let dm = build_design_matrices(&data, &parse_formula("y~(1|a)+(1|b)+(1|a:b)").unwrap()).unwrap();
            let mut rows: Vec<usize> = (1..=n).filter(|&i| pick[i - 1]).collect();
            if rows.is_empty() {
                rows.push(1);
            }
            let sub = subset_rows(&dm, &rows).unwrap();
            for design in [&dm, &sub] {
                for t in design.terms() {
                    let z = t.to_dense();
                    for r in z.row_iter() {
                        prop_assert_eq!(r.sum(), 1.0);
                    }
                    let zzt = &z * z.transpose();
                    for i in 0..design.n_rows() {
                        for j in 0..design.n_rows() {
                            let same = t.row_levels()[i] == t.row_levels()[j];
                            prop_assert_eq!(zzt[(i, j)], if same { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            // F_c counts observed levels
            let distinct_a = a.iter().collect::<std::collections::HashSet<_>>().len();
            prop_assert_eq!(dm.term("a").unwrap().n_columns(), distinct_a);
            // futmat JSON preserves the design
            prop_assert_eq!(futmat_from_json(&futmat_to_json(&sub)).unwrap().terms().len(), 3);
        }
    }
}
