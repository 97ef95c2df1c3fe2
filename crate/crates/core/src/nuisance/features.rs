use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One column of a design matrix, named against the dataset's variables
/// (`a`, `s`, `b`, and covariate names).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Term {
    Intercept,
    Raw(String),
    Square(String),
    Interaction(String, String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "1"),
            Term::Raw(n) => write!(f, "{n}"),
            Term::Square(n) => write!(f, "{n}^2"),
            Term::Interaction(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    /// `1`/`intercept`, `name`, `name^2`, or `left:right`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(invalid("empty feature term"));
        }
        if s == "1" || s.eq_ignore_ascii_case("intercept") {
            return Ok(Term::Intercept);
        }
        if let Some(base) = s.strip_suffix("^2") {
            return Ok(Term::Square(base.trim().to_string()));
        }
        if let Some((l, r)) = s.split_once(':') {
            return Ok(Term::Interaction(l.trim().to_string(), r.trim().to_string()));
        }
        Ok(Term::Raw(s.to_string()))
    }
}

impl TryFrom<String> for Term {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.to_string()
    }
}

/// Ordered list of covariate transformations.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSpec {
    pub terms: Vec<Term>,
}

impl FeatureSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        let spec = Self { terms };
        if spec.terms.iter().filter(|t| **t == Term::Intercept).count() > 1 {
            return Err(invalid("intercept may appear at most once"));
        }
        if spec.terms.is_empty() {
            return Err(invalid("feature spec has no terms"));
        }
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn intercept_only() -> Self {
        Self { terms: vec![Term::Intercept] }
    }
}

impl FromStr for FeatureSpec {
    type Err = Error;

    /// Comma-separated terms, e.g. `1,b,a,x1,x2^2`.
    fn from_str(s: &str) -> Result<Self> {
        let terms = s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?;
        FeatureSpec::new(terms)
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(Term::to_string).collect();
        write!(f, "{}", parts.join(","))
    }
}

// Variable slots: a, s, b, then covariates.
pub(crate) const SLOT_A: usize = 0;
pub(crate) const SLOT_S: usize = 1;
pub(crate) const SLOT_B: usize = 2;
const SLOT_X0: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slotted {
    Intercept,
    Raw(usize),
    Square(usize),
    Interaction(usize, usize),
}

/// A [`FeatureSpec`] resolved against a dataset's variable layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledFeatures {
    terms: Vec<Slotted>,
}

impl CompiledFeatures {
    /// Resolves names; `allowed` lists the structural variables this model may use.
    pub(crate) fn compile(
        spec: &FeatureSpec,
        covariate_names: &[String],
        allowed: &[&str],
        model: &str,
    ) -> Result<Self> {
        let slot = |name: &str| -> Result<usize> {
            match name {
                "a" | "s" | "b" if !allowed.contains(&name) => Err(invalid(format!(
                    "{model} model may not use variable '{name}'"
                ))),
                "a" => Ok(SLOT_A),
                "s" => Ok(SLOT_S),
                "b" => Ok(SLOT_B),
                other => covariate_names
                    .iter()
                    .position(|c| c == other)
                    .map(|i| SLOT_X0 + i)
                    .ok_or_else(|| invalid(format!("{model} model: unknown variable '{other}'"))),
            }
        };
        let terms = spec
            .terms
            .iter()
            .map(|t| {
                Ok(match t {
                    Term::Intercept => Slotted::Intercept,
                    Term::Raw(n) => Slotted::Raw(slot(n)?),
                    Term::Square(n) => Slotted::Square(slot(n)?),
                    Term::Interaction(l, r) => Slotted::Interaction(slot(l)?, slot(r)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if terms.iter().filter(|t| **t == Slotted::Intercept).count() > 1 {
            return Err(invalid("intercept may appear at most once"));
        }
        Ok(Self { terms })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    #[inline]
    fn value(term: Slotted, vars: &Vars<'_>) -> f64 {
        match term {
            Slotted::Intercept => 1.0,
            Slotted::Raw(i) => vars.get(i),
            Slotted::Square(i) => {
                let v = vars.get(i);
                v * v
            }
            Slotted::Interaction(i, j) => vars.get(i) * vars.get(j),
        }
    }

    pub(crate) fn row(&self, vars: &Vars<'_>, out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = Self::value(*t, vars);
        }
    }

    #[inline]
    pub(crate) fn linear(&self, coef: &[f64], vars: &Vars<'_>) -> f64 {
        self.terms
            .iter()
            .zip(coef)
            .map(|(t, c)| c * Self::value(*t, vars))
            .sum()
    }
}

/// Borrowed view of one evaluation point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Vars<'a> {
    pub a: f64,
    pub s: f64,
    pub b: f64,
    pub x: &'a [f64],
}

impl Vars<'_> {
    #[inline]
    fn get(&self, slot: usize) -> f64 {
        match slot {
            SLOT_A => self.a,
            SLOT_S => self.s,
            SLOT_B => self.b,
            k => self.x[k - SLOT_X0],
        }
    }
}
