use std::fmt;

use super::SpecError;

/// Node of a co-safe LTL formula. Negation is only representable on atomic
/// propositions, so every value of this type is inside the co-safe fragment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expr {
    True,
    False,
    Ap(usize),
    Not(usize),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Next(Box<Expr>),
    Until(Box<Expr>, Box<Expr>),
    Eventually(Box<Expr>),
}

impl Expr {
    pub fn and(a: Expr, b: Expr) -> Expr {
        Expr::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Expr, b: Expr) -> Expr {
        Expr::Or(Box::new(a), Box::new(b))
    }

    pub fn next(a: Expr) -> Expr {
        Expr::Next(Box::new(a))
    }

    pub fn until(a: Expr, b: Expr) -> Expr {
        Expr::Until(Box::new(a), Box::new(b))
    }

    pub fn eventually(a: Expr) -> Expr {
        Expr::Eventually(Box::new(a))
    }

    /// Largest AP index referenced, if any.
    pub fn max_ap(&self) -> Option<usize> {
        match self {
            Expr::True | Expr::False => None,
            Expr::Ap(i) | Expr::Not(i) => Some(*i),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Until(a, b) => a.max_ap().max(b.max_ap()),
            Expr::Next(a) | Expr::Eventually(a) => a.max_ap(),
        }
    }

    pub(crate) fn write_with(&self, aps: &[String], f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = |i: &usize| aps.get(*i).cloned().unwrap_or_else(|| format!("ap{i}"));
        match self {
            Expr::True => write!(f, "true"),
            Expr::False => write!(f, "false"),
            Expr::Ap(i) => write!(f, "{}", name(i)),
            Expr::Not(i) => write!(f, "!{}", name(i)),
            Expr::And(a, b) => {
                write!(f, "(")?;
                a.write_with(aps, f)?;
                write!(f, " & ")?;
                b.write_with(aps, f)?;
                write!(f, ")")
            }
            Expr::Or(a, b) => {
                write!(f, "(")?;
                a.write_with(aps, f)?;
                write!(f, " | ")?;
                b.write_with(aps, f)?;
                write!(f, ")")
            }
            Expr::Next(a) => {
                write!(f, "X ")?;
                a.write_with(aps, f)
            }
            Expr::Until(a, b) => {
                write!(f, "(")?;
                a.write_with(aps, f)?;
                write!(f, " U ")?;
                b.write_with(aps, f)?;
                write!(f, ")")
            }
            Expr::Eventually(a) => {
                write!(f, "F ")?;
                a.write_with(aps, f)
            }
        }
    }
}

/// A parsed scLTL formula together with its ordered list of AP names.
///
/// Letters over this formula are AP bitmasks: bit `i` set means `aps[i]` holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub root: Expr,
    pub aps: Vec<String>,
}

impl Formula {
    pub fn new(root: Expr, aps: Vec<String>) -> Result<Self, SpecError> {
        if let Some(max) = root.max_ap() {
            if max >= aps.len() {
                return Err(SpecError::UnknownProposition(format!("ap{max}")));
            }
        }
        if aps.len() > super::MAX_APS {
            return Err(SpecError::TooManyPropositions(aps.len()));
        }
        Ok(Self { root, aps })
    }

    pub fn num_letters(&self) -> usize {
        1 << self.aps.len()
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.write_with(&self.aps, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Not,
    And,
    Or,
    Until,
    Next,
    Eventually,
    Always,
    Release,
    Implies,
    Equiv,
    True,
    False,
    LParen,
    RParen,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Not => "'!'".into(),
            Tok::And => "'&'".into(),
            Tok::Or => "'|'".into(),
            Tok::Until => "'U'".into(),
            Tok::Next => "'X'".into(),
            Tok::Eventually => "'F'".into(),
            Tok::Always => "'G'".into(),
            Tok::Release => "'R'".into(),
            Tok::Implies => "'->'".into(),
            Tok::Equiv => "'<->'".into(),
            Tok::True => "'true'".into(),
            Tok::False => "'false'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, SpecError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let two = text.get(i..i + 2);
        let three = text.get(i..i + 3);
        let tok = match c {
            '(' => {
                i += 1;
                Tok::LParen
            }
            ')' => {
                i += 1;
                Tok::RParen
            }
            '!' => {
                i += 1;
                Tok::Not
            }
            '&' => {
                i += if two == Some("&&") { 2 } else { 1 };
                Tok::And
            }
            '|' => {
                i += if two == Some("||") { 2 } else { 1 };
                Tok::Or
            }
            '-' if two == Some("->") => {
                i += 2;
                Tok::Implies
            }
            '<' if three == Some("<->") => {
                i += 3;
                Tok::Equiv
            }
            '[' if two == Some("[]") => {
                i += 2;
                Tok::Always
            }
            '<' if two == Some("<>") => {
                i += 2;
                Tok::Eventually
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                match &text[start..i] {
                    "U" => Tok::Until,
                    "X" => Tok::Next,
                    "F" => Tok::Eventually,
                    "G" => Tok::Always,
                    "R" | "V" => Tok::Release,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    s => Tok::Ident(s.to_string()),
                }
            }
            _ => {
                return Err(SpecError::Syntax {
                    position: start,
                    found: c.to_string(),
                    expected: vec!["proposition".into(), "operator".into(), "'('".into()],
                })
            }
        };
        out.push((start, tok));
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    aps: &'a [String],
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn error(&self, expected: &[&str]) -> SpecError {
        SpecError::Syntax {
            position: self.offset(),
            found: self.peek().map(Tok::describe).unwrap_or_else(|| "end of input".into()),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn not_cosafe(&self, what: impl Into<String>) -> SpecError {
        SpecError::NotCosafe(what.into())
    }

    fn parse_or(&mut self) -> Result<Expr, SpecError> {
        let mut lhs = self.parse_and()?;
        loop {
            match self.peek() {
                Some(Tok::Or) => {
                    self.pos += 1;
                    let rhs = self.parse_and()?;
                    lhs = Expr::or(lhs, rhs);
                }
                Some(Tok::Implies) => return Err(self.not_cosafe("implication '->'")),
                Some(Tok::Equiv) => return Err(self.not_cosafe("equivalence '<->'")),
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_and(&mut self) -> Result<Expr, SpecError> {
        let mut lhs = self.parse_until()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            let rhs = self.parse_until()?;
            lhs = Expr::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn parse_until(&mut self) -> Result<Expr, SpecError> {
        let lhs = self.parse_unary()?;
        match self.peek() {
            Some(Tok::Until) => {
                self.pos += 1;
                let rhs = self.parse_until()?;
                Ok(Expr::until(lhs, rhs))
            }
            Some(Tok::Release) => Err(self.not_cosafe("release operator")),
            _ => Ok(lhs),
        }
    }

    fn parse_unary(&mut self) -> Result<Expr, SpecError> {
        match self.peek() {
            Some(Tok::Not) => {
                let at = self.offset();
                self.pos += 1;
                let inner = self.parse_unary()?;
                match inner {
                    Expr::Ap(i) => Ok(Expr::Not(i)),
                    Expr::Not(i) => Ok(Expr::Ap(i)),
                    Expr::True => Ok(Expr::False),
                    Expr::False => Ok(Expr::True),
                    other => {
                        let shown = Formula { root: other, aps: self.aps.to_vec() };
                        Err(self.not_cosafe(format!("negation of non-atomic subformula at {at}: !{shown}")))
                    }
                }
            }
            Some(Tok::Next) => {
                self.pos += 1;
                Ok(Expr::next(self.parse_unary()?))
            }
            Some(Tok::Eventually) => {
                self.pos += 1;
                Ok(Expr::eventually(self.parse_unary()?))
            }
            Some(Tok::Always) => Err(self.not_cosafe("always operator 'G'")),
            _ => self.parse_primary(),
        }
    }

    fn parse_primary(&mut self) -> Result<Expr, SpecError> {
        match self.peek().cloned() {
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.parse_or()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(self.error(&["')'", "'&'", "'|'", "'U'"]));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(Tok::True) => {
                self.pos += 1;
                Ok(Expr::True)
            }
            Some(Tok::False) => {
                self.pos += 1;
                Ok(Expr::False)
            }
            Some(Tok::Ident(name)) => {
                let position = self.offset();
                self.pos += 1;
                self.aps
                    .iter()
                    .position(|a| *a == name)
                    .map(Expr::Ap)
                    .ok_or(SpecError::UnknownPropositionAt { name, position })
            }
            _ => Err(self.error(&["proposition", "'('", "'!'", "'X'", "'F'", "'true'"])),
        }
    }
}

/// Parses a formula in LTL2BA-style syntax (`! & | U X F`, parentheses,
/// `true`/`false`) over the given AP names.
///
/// Binding strength, loosest first: `|`, `&`, `U` (right associative), unary.
pub fn parse_scltl(text: &str, aps: &[&str]) -> Result<Formula, SpecError> {
    let aps: Vec<String> = aps.iter().map(|s| s.to_string()).collect();
    if text.trim().is_empty() {
        return Err(SpecError::Syntax { position: 0, found: "end of input".into(), expected: vec!["formula".into()] });
    }
    if aps.len() > super::MAX_APS {
        return Err(SpecError::TooManyPropositions(aps.len()));
    }
    let toks = tokenize(text)?;
    let mut p = Parser { toks, pos: 0, end: text.len(), aps: &aps };
    let root = p.parse_or()?;
    if p.pos != p.toks.len() {
        return Err(p.error(&["'&'", "'|'", "'U'", "end of input"]));
    }
    Formula::new(root, aps)
}
