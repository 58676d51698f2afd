//! Attribute query language.
//!
//! ```text
//! query  := clause ( AND clause )*
//! clause := name op literal
//! name   := bare word | "quoted"
//! op     := = | > | < | like
//! ```
//!
//! Integers become INT literals, numbers with a decimal point or exponent
//! become FLOAT, double-quoted strings become TEXT. Clauses are combined
//! with AND.

mod oracle;
mod parse;

pub use oracle::{oracle_scan, oracle_triples, OracleContext};
pub use parse::parse_query;

use std::cmp::Ordering;
use std::fmt;

use crate::sdf::AttributeValue;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("syntax error at {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("type error in clause {clause}: {message}")]
    Type { clause: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Eq,
    Gt,
    Lt,
    Like,
}

impl Op {
    pub fn code(self) -> u8 {
        match self {
            Op::Eq => 1,
            Op::Gt => 2,
            Op::Lt => 3,
            Op::Like => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Op::Eq),
            2 => Some(Op::Gt),
            3 => Some(Op::Lt),
            4 => Some(Op::Like),
            _ => None,
        }
    }

    fn token(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Gt => ">",
            Op::Lt => "<",
            Op::Like => "like",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Clause {
    pub attribute: String,
    pub op: Op,
    pub literal: AttributeValue,
}

impl Clause {
    pub fn new(attribute: impl Into<String>, op: Op, literal: AttributeValue) -> Result<Self, QueryError> {
        let c = Clause {
            attribute: attribute.into(),
            op,
            literal,
        };
        c.check(0)?;
        Ok(c)
    }

    fn check(&self, idx: usize) -> Result<(), QueryError> {
        let bad = |m: &str| {
            Err(QueryError::Type {
                clause: idx,
                message: m.to_owned(),
            })
        };
        match (self.op, &self.literal) {
            (Op::Like, AttributeValue::Text(_)) => Ok(()),
            (Op::Like, _) => bad("like requires a text literal"),
            (Op::Gt | Op::Lt, AttributeValue::Text(_)) => bad("ordering requires a numeric literal"),
            _ => Ok(()),
        }
    }

    /// Whether a stored value satisfies this clause.
    ///
    /// EQ compares tag and value exactly. GT/LT compare numbers; an INT value
    /// is widened to FLOAT only when the literal is FLOAT.
    pub fn matches(&self, value: &AttributeValue) -> bool {
        use AttributeValue::*;
        match self.op {
            Op::Eq => match (value, &self.literal) {
                (Int(a), Int(b)) => a == b,
                (Float(a), Float(b)) => a == b,
                (Text(a), Text(b)) => a == b,
                _ => false,
            },
            Op::Gt | Op::Lt => {
                let ord = match (value, &self.literal) {
                    (Int(a), Int(b)) => Some(a.cmp(b)),
                    (Float(a), Float(b)) => a.partial_cmp(b),
                    (Int(a), Float(b)) => (*a as f64).partial_cmp(b),
                    _ => None,
                };
                let want = if self.op == Op::Gt {
                    Ordering::Greater
                } else {
                    Ordering::Less
                };
                ord == Some(want)
            }
            Op::Like => match (value, &self.literal) {
                (Text(s), Text(pattern)) => like_match(pattern, s),
                _ => false,
            },
        }
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {} {}", self.attribute, self.op.token(), self.literal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Predicate {
    clauses: Vec<Clause>,
}

impl Predicate {
    pub fn new(clauses: Vec<Clause>) -> Result<Self, QueryError> {
        if clauses.is_empty() {
            return Err(QueryError::Syntax {
                position: 0,
                expected: "at least one clause".into(),
            });
        }
        for (i, c) in clauses.iter().enumerate() {
            c.check(i)?;
        }
        Ok(Predicate { clauses })
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    /// Evaluates against a lookup of a file's attribute values.
    pub fn matches_with<'v>(&self, lookup: impl Fn(&str) -> Option<&'v AttributeValue>) -> bool {
        self.clauses
            .iter()
            .all(|c| lookup(&c.attribute).is_some_and(|v| c.matches(v)))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// SQL-style LIKE: `%` matches any run of characters, `_` exactly one.
/// Case-sensitive.
pub fn like_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '_' || p[pi] == t[ti]) && p[pi] != '%' {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '%' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '%')
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use AttributeValue::*;

    #[test]
    fn like_semantics() {
        assert!(like_match("2016%", "2016-05-01"));
        assert!(!like_match("2016%", "2015-05-01"));
        assert!(like_match("%Pac%", "SouthPacific"));
        assert!(like_match("a_c", "abc"));
        assert!(!like_match("a_c", "ac"));
        assert!(like_match("%", ""));
        assert!(!like_match("_", ""));
        assert!(!like_match("abc", "ABC"));
        assert!(like_match("a%b%c", "aXXbYYc"));
        assert!(!like_match("a%b%c", "aXXbYY"));
        assert!(like_match("é_", "éz"));
    }

    // Exponential-time reference used only to check the linear matcher.
    fn like_reference(p: &[char], t: &[char]) -> bool {
        match p.split_first() {
            None => t.is_empty(),
            Some(('%', rest)) => (0..=t.len()).any(|i| like_reference(rest, &t[i..])),
            Some(('_', rest)) => !t.is_empty() && like_reference(rest, &t[1..]),
            Some((c, rest)) => t.first() == Some(c) && like_reference(rest, &t[1..]),
        }
    }

    proptest! {
        #[test]
        fn like_agrees_with_reference(p in "[ab%_]{0,7}", t in "[ab]{0,8}") {
            let pc: Vec<char> = p.chars().collect();
            let tc: Vec<char> = t.chars().collect();
            prop_assert_eq!(like_match(&p, &t), like_reference(&pc, &tc));
        }
    }

    #[test]
    fn numeric_comparison_rules() {
        let gt_int = Clause::new("x", Op::Gt, Int(5)).unwrap();
        assert!(gt_int.matches(&Int(6)));
        assert!(!gt_int.matches(&Float(6.0)), "INT literal does not widen");
        let gt_float = Clause::new("x", Op::Gt, Float(5.5)).unwrap();
        assert!(gt_float.matches(&Int(6)));
        assert!(gt_float.matches(&Float(5.6)));
        assert!(!gt_float.matches(&Text("9".into())));
        let eq = Clause::new("x", Op::Eq, Int(1)).unwrap();
        assert!(!eq.matches(&Float(1.0)), "EQ is exact on tag");
        assert!(Clause::new("x", Op::Like, Int(1)).is_err());
        assert!(Clause::new("x", Op::Lt, Text("a".into())).is_err());
    }
}
