use super::{Clause, Op, Predicate, QueryError};
use crate::sdf::AttributeValue;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Int(i64),
    Float(f64),
    Eq,
    Gt,
    Lt,
}

fn syntax(position: usize, expected: impl Into<String>) -> QueryError {
    QueryError::Syntax {
        position,
        expected: expected.into(),
    }
}

fn is_word_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '.' | '-')
}

fn lex(input: &str) -> Result<Vec<(usize, Tok)>, QueryError> {
    let chars: Vec<(usize, char)> = input.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '=' => {
                out.push((pos, Tok::Eq));
                i += 1;
            }
            '>' => {
                out.push((pos, Tok::Gt));
                i += 1;
            }
            '<' => {
                out.push((pos, Tok::Lt));
                i += 1;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    let Some(&(_, c)) = chars.get(i) else {
                        return Err(syntax(input.len(), "closing '\"'"));
                    };
                    i += 1;
                    match c {
                        '"' => break,
                        '\\' => {
                            let Some(&(epos, e)) = chars.get(i) else {
                                return Err(syntax(input.len(), "escaped character"));
                            };
                            i += 1;
                            match e {
                                '"' | '\\' => s.push(e),
                                _ => return Err(syntax(epos, "'\"' or '\\' after backslash")),
                            }
                        }
                        c => s.push(c),
                    }
                }
                out.push((pos, Tok::Quoted(s)));
            }
            c if c == '-' || c.is_ascii_digit() => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || matches!(chars[i].1, '.' | '+' | '-')) {
                    // a sign is only part of the number right after an exponent marker
                    if matches!(chars[i].1, '+' | '-') && !matches!(chars[i - 1].1, 'e' | 'E') {
                        break;
                    }
                    i += 1;
                }
                let end = chars.get(i).map(|&(p, _)| p).unwrap_or(input.len());
                let text = &input[pos..end];
                out.push((pos, number(text, chars[start].0)?));
            }
            c if is_word_start(c) => {
                let start = pos;
                while i < chars.len() && is_word_char(chars[i].1) {
                    i += 1;
                }
                let end = chars.get(i).map(|&(p, _)| p).unwrap_or(input.len());
                out.push((start, Tok::Word(input[start..end].to_owned())));
            }
            _ => return Err(syntax(pos, format!("a token, found {c:?}"))),
        }
    }
    Ok(out)
}

fn number(text: &str, pos: usize) -> Result<Tok, QueryError> {
    let digits = text.strip_prefix('-').unwrap_or(text);
    if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
        return text
            .parse::<i64>()
            .map(Tok::Int)
            .map_err(|_| syntax(pos, "an integer within 64-bit range"));
    }
    // decimal: digits with a point and/or exponent
    let valid = {
        let (mantissa, exp) = match digits.find(['e', 'E']) {
            Some(i) => (&digits[..i], Some(&digits[i + 1..])),
            None => (digits, None),
        };
        let (int_part, frac) = match mantissa.split_once('.') {
            Some((a, b)) => (a, Some(b)),
            None => (mantissa, None),
        };
        let all_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
        all_digits(int_part)
            && frac.is_none_or(all_digits)
            && exp.is_none_or(|e| all_digits(e.strip_prefix(['+', '-']).unwrap_or(e)))
            && (frac.is_some() || exp.is_some())
    };
    if !valid {
        return Err(syntax(pos, "a number"));
    }
    text.parse::<f64>().map(Tok::Float).map_err(|_| syntax(pos, "a number"))
}

pub fn parse_query(q: &str) -> Result<Predicate, QueryError> {
    let toks = lex(q)?;
    let mut it = toks.into_iter().peekable();
    let mut clauses = Vec::new();
    loop {
        let (pos, name) = match it.next() {
            Some((p, Tok::Word(w))) => (p, w),
            Some((p, Tok::Quoted(w))) => (p, w),
            Some((p, _)) => return Err(syntax(p, "attribute name")),
            None => return Err(syntax(q.len(), "attribute name")),
        };
        let _ = pos;
        let op = match it.next() {
            Some((_, Tok::Eq)) => Op::Eq,
            Some((_, Tok::Gt)) => Op::Gt,
            Some((_, Tok::Lt)) => Op::Lt,
            Some((_, Tok::Word(w))) if w.eq_ignore_ascii_case("like") => Op::Like,
            Some((p, _)) => return Err(syntax(p, "one of '=', '>', '<', 'like'")),
            None => return Err(syntax(q.len(), "one of '=', '>', '<', 'like'")),
        };
        let literal = match it.next() {
            Some((_, Tok::Int(v))) => AttributeValue::Int(v),
            Some((_, Tok::Float(v))) => AttributeValue::Float(v),
            Some((_, Tok::Quoted(s))) => AttributeValue::Text(s),
            Some((p, _)) => return Err(syntax(p, "a literal")),
            None => return Err(syntax(q.len(), "a literal")),
        };
        let clause = Clause {
            attribute: name,
            op,
            literal,
        };
        clause.check(clauses.len())?;
        clauses.push(clause);
        match it.next() {
            None => break,
            Some((_, Tok::Word(w))) if w.eq_ignore_ascii_case("and") => continue,
            Some((p, _)) => return Err(syntax(p, "AND or end of query")),
        }
    }
    Predicate::new(clauses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use AttributeValue::*;

    #[test]
    fn single_text_clause() {
        let p = parse_query(r#"Location = "Pacific""#).unwrap();
        assert_eq!(p.clauses().len(), 1);
        let c = &p.clauses()[0];
        assert_eq!((c.attribute.as_str(), c.op), ("Location", Op::Eq));
        assert_eq!(c.literal, Text("Pacific".into()));
    }

    #[test]
    fn conjunction_and_case_insensitive_keywords() {
        let p = parse_query(r#"DayNight = 1 AND Date like "2016%""#).unwrap();
        assert_eq!(p.clauses().len(), 2);
        assert_eq!(p.clauses()[1].op, Op::Like);
        let p = parse_query(r#"a=1 and b LIKE "x""#).unwrap();
        assert_eq!(p.clauses().len(), 2);
    }

    #[test]
    fn literal_typing() {
        let lit = |q: &str| parse_query(q).unwrap().clauses()[0].literal.clone();
        assert_eq!(lit("x = -42"), Int(-42));
        assert_eq!(lit("x > 1.5"), Float(1.5));
        assert_eq!(lit("x < 2e3"), Float(2000.0));
        assert_eq!(lit("x < -2.5E-1"), Float(-0.25));
        assert_eq!(lit(r#"x = "a \"q\" b""#), Text("a \"q\" b".into()));
        assert_eq!(
            parse_query(r#""odd name" = 1"#).unwrap().clauses()[0].attribute,
            "odd name"
        );
        assert_eq!(parse_query("fs.size > 10").unwrap().clauses()[0].attribute, "fs.size");
    }

    #[test]
    fn type_errors() {
        assert!(matches!(
            parse_query(r#"Location > "abc""#),
            Err(QueryError::Type { .. })
        ));
        assert!(matches!(parse_query("x like 3"), Err(QueryError::Type { .. })));
    }

    #[test]
    fn syntax_errors_carry_position() {
        for (q, pos) in [
            ("", 0),
            ("x =", 3),
            ("x 1", 2),
            ("x = 1 y = 2", 6),
            ("x = 1 AND", 9),
            (r#"x = "open"#, 9),
            ("x = 1.", 4),
            ("x = 99999999999999999999", 4),
            ("x = 1 ; y", 6),
        ] {
            match parse_query(q) {
                Err(QueryError::Syntax { position, .. }) => assert_eq!(position, pos, "{q:?}"),
                other => panic!("{q:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn display_reparses() {
        let p = parse_query(r#"a = 1 AND "b c" like "x%" AND d > 2.5"#).unwrap();
        assert_eq!(parse_query(&p.to_string()).unwrap(), p);
    }
}
