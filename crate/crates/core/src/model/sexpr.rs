//! S-expression syntax for pattern trees:
//! `(seq (atom 0) (atom 0) (atom 1))`, `(and (atom cpu) (atom 3 stock IBM))`.

use thiserror::Error;

use super::{PatternAst, TypeId};

#[derive(Debug, Error, PartialEq)]
pub enum SexprError {
    #[error("unexpected end of input")]
    Eof,
    #[error("unexpected token `{0}`")]
    Unexpected(String),
    #[error("unknown node kind `{0}`")]
    UnknownKind(String),
    #[error("`atom` takes a type and an optional attribute/value pair")]
    AtomArity,
    #[error("trailing input after pattern: `{0}`")]
    Trailing(String),
    #[error("atom `{0}` does not name a numeric type")]
    NotNumeric(String),
}

/// Atom as written in the source text, before type resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomRef {
    pub ty: String,
    pub property: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawAst {
    Atom(AtomRef),
    Seq(Vec<RawAst>),
    And(Vec<RawAst>),
    Or(Vec<RawAst>),
}

impl RawAst {
    /// Resolves every atom with `resolve`; used by the topology loader.
    pub fn resolve<E>(&self, resolve: &mut dyn FnMut(&AtomRef) -> Result<TypeId, E>) -> Result<PatternAst, E> {
        fn all<E>(c: &[RawAst], r: &mut dyn FnMut(&AtomRef) -> Result<TypeId, E>) -> Result<Vec<PatternAst>, E> {
            c.iter().map(|x| x.resolve(&mut *r)).collect()
        }
        Ok(match self {
            RawAst::Atom(a) => PatternAst::Atom(resolve(a)?),
            RawAst::Seq(c) => PatternAst::Seq(all(c, resolve)?),
            RawAst::And(c) => PatternAst::And(all(c, resolve)?),
            RawAst::Or(c) => PatternAst::Or(all(c, resolve)?),
        })
    }

    /// Converts a tree whose atoms are all plain numeric type ids.
    pub fn to_plain_ast(&self) -> Result<PatternAst, SexprError> {
        self.resolve(&mut |a: &AtomRef| match (&a.property, a.ty.parse::<u32>()) {
            (None, Ok(id)) => Ok(TypeId(id)),
            _ => Err(SexprError::NotNumeric(a.ty.clone())),
        })
    }
}

fn tokenize(input: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in input.chars() {
        match ch {
            '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

struct Parser {
    tokens: Vec<String>,
    pos: usize,
}

impl Parser {
    fn next(&mut self) -> Result<String, SexprError> {
        let t = self.tokens.get(self.pos).cloned().ok_or(SexprError::Eof)?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn expect_open(&mut self) -> Result<(), SexprError> {
        match self.next()? {
            t if t == "(" => Ok(()),
            t => Err(SexprError::Unexpected(t)),
        }
    }

    fn node(&mut self) -> Result<RawAst, SexprError> {
        self.expect_open()?;
        let kind = self.next()?;
        if kind == "atom" {
            let mut words = Vec::new();
            loop {
                match self.next()? {
                    t if t == ")" => break,
                    t if t == "(" => return Err(SexprError::Unexpected(t)),
                    t => words.push(t),
                }
            }
            return match words.as_slice() {
                [ty] => Ok(RawAst::Atom(AtomRef {
                    ty: ty.clone(),
                    property: None,
                })),
                [ty, attr, value] => Ok(RawAst::Atom(AtomRef {
                    ty: ty.clone(),
                    property: Some((attr.clone(), value.clone())),
                })),
                _ => Err(SexprError::AtomArity),
            };
        }
        let mut children = Vec::new();
        while self.peek() == Some("(") {
            children.push(self.node()?);
        }
        match self.next()? {
            t if t == ")" => {}
            t => return Err(SexprError::Unexpected(t)),
        }
        match kind.as_str() {
            "seq" => Ok(RawAst::Seq(children)),
            "and" => Ok(RawAst::And(children)),
            "or" => Ok(RawAst::Or(children)),
            _ => Err(SexprError::UnknownKind(kind)),
        }
    }
}

/// Parses one pattern expression. Arity rules are checked by validation,
/// not here.
pub fn parse_pattern(input: &str) -> Result<RawAst, SexprError> {
    let mut p = Parser {
        tokens: tokenize(input),
        pos: 0,
    };
    let ast = p.node()?;
    if p.pos != p.tokens.len() {
        return Err(SexprError::Trailing(p.tokens[p.pos..].join(" ")));
    }
    Ok(ast)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_expression() {
        let ast = parse_pattern("(and (atom 1) (or (atom 2) (atom x)))").unwrap();
        let RawAst::And(children) = ast else { panic!() };
        assert_eq!(children.len(), 2);
        assert!(matches!(&children[1], RawAst::Or(c) if c.len() == 2));
    }

    #[test]
    fn parses_property_atom() {
        let ast = parse_pattern("(atom 0 stock IBM)").unwrap();
        assert_eq!(
            ast,
            RawAst::Atom(AtomRef {
                ty: "0".into(),
                property: Some(("stock".into(), "IBM".into()))
            })
        );
    }

    #[test]
    fn rejects_malformed_input() {
        assert_eq!(parse_pattern("(seq (atom 0)"), Err(SexprError::Eof));
        assert_eq!(
            parse_pattern("(xor (atom 0) (atom 1))"),
            Err(SexprError::UnknownKind("xor".into()))
        );
        assert_eq!(parse_pattern("(atom 0 stock)"), Err(SexprError::AtomArity));
        assert!(matches!(
            parse_pattern("(atom 0) (atom 1)"),
            Err(SexprError::Trailing(_))
        ));
    }
}
