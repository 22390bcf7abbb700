//! First-order terms, their textual grammar, and the matching primitives
//! (`matches`, `apply`, `get_bindings`) that transitions and messages build on.
//!
//! A term is a constant, a variable or a function of sub-terms. Variables come
//! in three flavours: the anonymous wildcard `?`, immutable-context `?name`
//! and mutable-context `??name`. Matching is one-way: patterns may contain
//! variables, the values they are matched against must be ground.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// How a named variable occurrence behaves once it has a bound value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mutability {
    /// `?name`: after binding, only the bound value matches for the rest of
    /// the conversation.
    Immutable,
    /// `??name`: matches anything and overwrites any previous binding.
    Mutable,
}

/// A first-order term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    /// A constant token such as `ready`, `doc123` or a quoted string.
    Constant(String),
    /// The anonymous variable `?`: matches any value, never binds.
    Anonymous,
    /// A named variable: `?name` (immutable context) or `??name` (mutable).
    Variable {
        name: String,
        mutability: Mutability,
    },
    /// A function application `functor(arg1, ..., argN)`, arity >= 1.
    Function { functor: String, args: Vec<Term> },
}

impl Term {
    /// Builds a constant. The text must be non-empty.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        assert!(!text.is_empty(), "constant text must be non-empty");
        Term::Constant(text)
    }

    /// Builds an immutable-context variable. The name must be a bare
    /// identifier (`[A-Za-z0-9_.-]+`).
    pub fn variable(name: impl Into<String>) -> Self {
        Self::named_variable(name, Mutability::Immutable)
    }

    /// Builds a mutable-context variable. The name must be a bare identifier.
    pub fn mutable_variable(name: impl Into<String>) -> Self {
        Self::named_variable(name, Mutability::Mutable)
    }

    fn named_variable(name: impl Into<String>, mutability: Mutability) -> Self {
        let name = name.into();
        assert!(
            is_bare_ident(&name),
            "variable name must be a bare identifier"
        );
        Term::Variable { name, mutability }
    }

    /// Builds a function application. The functor must be a bare identifier
    /// and the argument list non-empty.
    pub fn function(functor: impl Into<String>, args: Vec<Term>) -> Self {
        let functor = functor.into();
        assert!(is_bare_ident(&functor), "functor must be a bare identifier");
        assert!(!args.is_empty(), "function arity must be >= 1");
        Term::Function { functor, args }
    }

    /// True when the term contains no variables, anonymous or named.
    pub fn is_ground(&self) -> bool {
        match self {
            Term::Constant(_) => true,
            Term::Anonymous | Term::Variable { .. } => false,
            Term::Function { args, .. } => args.iter().all(Term::is_ground),
        }
    }

    /// The text of a constant, if this term is one.
    pub fn as_constant(&self) -> Option<&str> {
        match self {
            Term::Constant(text) => Some(text),
            _ => None,
        }
    }
}

/// Errors raised by the matching primitives.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TermError {
    /// `matches` was handed a value containing variables.
    #[error("value `{0}` is not ground")]
    NonGroundValue(Term),
    /// `get_bindings` was called on a pair that does not match.
    #[error("pattern `{pattern}` does not match value `{value}`")]
    NotAMatch { pattern: Term, value: Term },
}

/// Tests whether `pattern` matches the ground term `value`.
///
/// Constants match equal constants, any variable matches any value, and
/// functions match functions with the same functor, the same arity and
/// pairwise-matching arguments. Within one call, repeated occurrences of the
/// same named variable must match equal values.
///
/// A non-ground `value` is rejected: it signals a malformed message.
pub fn matches(pattern: &Term, value: &Term) -> Result<bool, TermError> {
    if !value.is_ground() {
        return Err(TermError::NonGroundValue(value.clone()));
    }
    let mut seen: BTreeMap<&str, &Term> = BTreeMap::new();
    Ok(matches_consistent(pattern, value, &mut seen))
}

fn matches_consistent<'t>(
    pattern: &'t Term,
    value: &'t Term,
    seen: &mut BTreeMap<&'t str, &'t Term>,
) -> bool {
    match pattern {
        Term::Constant(text) => matches!(value, Term::Constant(v) if v == text),
        Term::Anonymous => true,
        Term::Variable { name, .. } => match seen.get(name.as_str()) {
            // First occurrence fixed the value for the rest of this match.
            Some(prev) => *prev == value,
            None => {
                seen.insert(name, value);
                true
            }
        },
        Term::Function { functor, args } => match value {
            Term::Function {
                functor: value_functor,
                args: value_args,
            } => {
                functor == value_functor
                    && args.len() == value_args.len()
                    && args
                        .iter()
                        .zip(value_args)
                        .all(|(p, v)| matches_consistent(p, v, seen))
            }
            _ => false,
        },
    }
}

/// Applies a binding set to a term.
///
/// Immutable-context variables with an entry in `bindings` are replaced by
/// their bound value; mutable variables, anonymous variables, unbound
/// variables and constants are returned unaltered. Functions are rebuilt with
/// the substitution mapped over their arguments.
pub fn apply(bindings: &BindingSet, term: &Term) -> Term {
    match term {
        Term::Variable {
            name,
            mutability: Mutability::Immutable,
        } => bindings.get(name).cloned().unwrap_or_else(|| term.clone()),
        Term::Function { functor, args } => Term::Function {
            functor: functor.clone(),
            args: args.iter().map(|arg| apply(bindings, arg)).collect(),
        },
        _ => term.clone(),
    }
}

/// Collects a binding for every named variable occurrence in `pattern`,
/// paired with the value sub-term it matched.
///
/// Anonymous variables contribute nothing; mutable and immutable variables
/// are treated identically here. The pair must match (`matches(pattern,
/// value)` true); calling this on a non-matching pair is an error.
pub fn get_bindings(pattern: &Term, value: &Term) -> Result<BindingSet, TermError> {
    if !matches(pattern, value)? {
        return Err(TermError::NotAMatch {
            pattern: pattern.clone(),
            value: value.clone(),
        });
    }
    let mut bindings = BindingSet::new();
    collect_bindings(pattern, value, &mut bindings);
    Ok(bindings)
}

fn collect_bindings(pattern: &Term, value: &Term, out: &mut BindingSet) {
    match pattern {
        Term::Variable { name, .. } => {
            out.insert(name.clone(), value.clone());
        }
        Term::Function { args, .. } => {
            if let Term::Function {
                args: value_args, ..
            } = value
            {
                for (p, v) in args.iter().zip(value_args) {
                    collect_bindings(p, v, out);
                }
            }
        }
        Term::Constant(_) | Term::Anonymous => {}
    }
}

/// Renders a term in its canonical textual form. `parse_term` of the result
/// yields an equal term.
pub fn render_term(term: &Term) -> String {
    term.to_string()
}

/// A set of variable-name to ground-term bindings, scoped to one conversation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindingSet {
    map: BTreeMap<String, Term>,
}

impl BindingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Term> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Inserts or overwrites a binding. The value must be ground and the name
    /// non-empty: the anonymous variable never acquires a binding.
    pub fn insert(&mut self, name: impl Into<String>, value: Term) {
        let name = name.into();
        assert!(!name.is_empty(), "the anonymous variable may not be bound");
        debug_assert!(value.is_ground(), "bound values must be ground");
        self.map.insert(name, value);
    }

    /// Folds `other` into `self`, overwriting existing entries.
    pub fn merge(&mut self, other: BindingSet) {
        self.map.extend(other.map);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Term)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl FromIterator<(String, Term)> for BindingSet {
    fn from_iter<I: IntoIterator<Item = (String, Term)>>(iter: I) -> Self {
        let mut set = BindingSet::new();
        for (name, value) in iter {
            set.insert(name, value);
        }
        set
    }
}

impl fmt::Display for BindingSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (name, value)) in self.map.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{name}={value}")?;
        }
        write!(f, "}}")
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Constant(text) => {
                if is_bare_ident(text) {
                    f.write_str(text)
                } else {
                    write!(f, "\"")?;
                    for c in text.chars() {
                        match c {
                            '"' => f.write_str("\\\"")?,
                            '\\' => f.write_str("\\\\")?,
                            other => write!(f, "{other}")?,
                        }
                    }
                    write!(f, "\"")
                }
            }
            Term::Anonymous => f.write_str("?"),
            Term::Variable { name, mutability } => match mutability {
                Mutability::Immutable => write!(f, "?{name}"),
                Mutability::Mutable => write!(f, "??{name}"),
            },
            Term::Function { functor, args } => {
                write!(f, "{functor}(")?;
                for (i, arg) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{arg}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl FromStr for Term {
    type Err = TermParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_term(s)
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')
}

pub(crate) fn is_bare_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_ident_char)
}

/// A syntax error in the textual term grammar, with a 1-based character
/// position into the input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at position {position}: {kind}")]
pub struct TermParseError {
    pub position: usize,
    pub kind: TermParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TermParseErrorKind {
    #[error("empty input")]
    EmptyInput,
    #[error("unexpected character `{0}`")]
    UnexpectedChar(char),
    #[error("unexpected end of input, expected {0}")]
    UnexpectedEnd(&'static str),
    #[error("`??` must be followed by a variable name")]
    BareDoubleQuestion,
    #[error("unexpected trailing input")]
    TrailingInput,
    #[error("unterminated quoted constant")]
    UnterminatedString,
    #[error("quoted constant is empty")]
    EmptyQuotedConstant,
    #[error("unknown escape `\\{0}`")]
    UnknownEscape(char),
}

/// Parses a term from its textual form.
///
/// Grammar: an identifier is `[A-Za-z0-9_.-]+`; a constant is an identifier
/// or a double-quoted string (escapes `\"` and `\\`); an immutable variable
/// is `?` + identifier; a mutable variable is `??` + identifier; the
/// anonymous variable is exactly `?`; a function is
/// `identifier "(" term ("," term)* ")"`. Whitespace between tokens is
/// ignored.
pub fn parse_term(input: &str) -> Result<Term, TermParseError> {
    let mut parser = Parser::new(input);
    parser.skip_ws();
    if parser.at_end() {
        return Err(parser.error(TermParseErrorKind::EmptyInput));
    }
    let term = parser.term()?;
    parser.skip_ws();
    if !parser.at_end() {
        return Err(parser.error(TermParseErrorKind::TrailingInput));
    }
    Ok(term)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn new(input: &str) -> Self {
        Parser {
            chars: input.chars().collect(),
            pos: 0,
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.chars.len()
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn error(&self, kind: TermParseErrorKind) -> TermParseError {
        TermParseError {
            position: self.pos + 1,
            kind,
        }
    }

    fn term(&mut self) -> Result<Term, TermParseError> {
        match self.peek() {
            Some('?') => self.variable(),
            Some('"') => self.quoted_constant(),
            Some(c) if is_ident_char(c) => {
                let name = self.ident();
                self.skip_ws();
                if self.peek() == Some('(') {
                    self.function(name)
                } else {
                    Ok(Term::Constant(name))
                }
            }
            Some(c) => Err(self.error(TermParseErrorKind::UnexpectedChar(c))),
            None => Err(self.error(TermParseErrorKind::UnexpectedEnd("a term"))),
        }
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if is_ident_char(c)) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    // No whitespace is allowed between `?`/`??` and the name.
    fn variable(&mut self) -> Result<Term, TermParseError> {
        self.bump();
        match self.peek() {
            Some('?') => {
                self.bump();
                match self.peek() {
                    Some(c) if is_ident_char(c) => Ok(Term::Variable {
                        name: self.ident(),
                        mutability: Mutability::Mutable,
                    }),
                    _ => Err(self.error(TermParseErrorKind::BareDoubleQuestion)),
                }
            }
            Some(c) if is_ident_char(c) => Ok(Term::Variable {
                name: self.ident(),
                mutability: Mutability::Immutable,
            }),
            _ => Ok(Term::Anonymous),
        }
    }

    fn quoted_constant(&mut self) -> Result<Term, TermParseError> {
        self.bump();
        let mut text = String::new();
        loop {
            match self.bump() {
                Some('"') => break,
                Some('\\') => match self.bump() {
                    Some('"') => text.push('"'),
                    Some('\\') => text.push('\\'),
                    Some(c) => return Err(self.error(TermParseErrorKind::UnknownEscape(c))),
                    None => return Err(self.error(TermParseErrorKind::UnterminatedString)),
                },
                Some(c) => text.push(c),
                None => return Err(self.error(TermParseErrorKind::UnterminatedString)),
            }
        }
        if text.is_empty() {
            return Err(self.error(TermParseErrorKind::EmptyQuotedConstant));
        }
        Ok(Term::Constant(text))
    }

    fn function(&mut self, functor: String) -> Result<Term, TermParseError> {
        self.bump();
        let mut args = Vec::new();
        loop {
            self.skip_ws();
            args.push(self.term()?);
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some(')') => {
                    self.bump();
                    return Ok(Term::Function { functor, args });
                }
                Some(c) => return Err(self.error(TermParseErrorKind::UnexpectedChar(c))),
                None => return Err(self.error(TermParseErrorKind::UnexpectedEnd("`,` or `)`"))),
            }
        }
    }
}
