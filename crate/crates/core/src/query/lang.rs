//! Condition language for rich queries over state values.
//!
//! ```text
//! expr  := or
//! or    := and ("OR" and)*
//! and   := unary ("AND" unary)*
//! unary := "NOT"? ("(" expr ")" | cond)
//! cond  := path op literal
//! path  := ident ("." ident)*
//! op    := "=" | "!=" | "<" | "<=" | ">" | ">=" | "CONTAINS"
//! ```
//!
//! Keywords are case-insensitive. String literals are double-quoted with JSON
//! escapes.

use std::fmt;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Contains,
}

impl CmpOp {
    pub const ALL: [CmpOp; 7] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Contains];

    pub fn is_ordering(self) -> bool {
        matches!(self, CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Contains => "CONTAINS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Literal {
    String(String),
    Number(f64),
    Bool(bool),
    Null,
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::String(s) => f.write_str(&serde_json::to_string(s).expect("strings serialize")),
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Bool(b) => write!(f, "{b}"),
            Literal::Null => f.write_str("null"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub path: Vec<String>,
    pub op: CmpOp,
    pub literal: Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryExpr {
    Cond(Condition),
    And(Box<QueryExpr>, Box<QueryExpr>),
    Or(Box<QueryExpr>, Box<QueryExpr>),
    Not(Box<QueryExpr>),
}

impl QueryExpr {
    pub fn cond(path: &[&str], op: CmpOp, literal: Literal) -> Self {
        QueryExpr::Cond(Condition {
            path: path.iter().map(|s| s.to_string()).collect(),
            op,
            literal,
        })
    }

    pub fn and(l: QueryExpr, r: QueryExpr) -> Self {
        QueryExpr::And(Box::new(l), Box::new(r))
    }

    pub fn or(l: QueryExpr, r: QueryExpr) -> Self {
        QueryExpr::Or(Box::new(l), Box::new(r))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(e: QueryExpr) -> Self {
        QueryExpr::Not(Box::new(e))
    }
}

/// Renders text that parses back to the same tree.
impl fmt::Display for QueryExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn operand(e: &QueryExpr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match e {
                QueryExpr::Cond(_) | QueryExpr::Not(_) => write!(f, "{e}"),
                _ => write!(f, "({e})"),
            }
        }
        match self {
            QueryExpr::Cond(c) => write!(f, "{} {} {}", c.path.join("."), c.op.symbol(), c.literal),
            QueryExpr::And(l, r) => {
                operand(l, f)?;
                f.write_str(" AND ")?;
                operand(r, f)
            }
            QueryExpr::Or(l, r) => {
                operand(l, f)?;
                f.write_str(" OR ")?;
                operand(r, f)
            }
            QueryExpr::Not(e) => match e.as_ref() {
                QueryExpr::Cond(_) => write!(f, "NOT {e}"),
                _ => write!(f, "NOT ({e})"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize)]
#[error("syntax error at offset {offset}: expected {expected}, found {found}")]
pub struct SyntaxError {
    pub offset: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    Op(CmpOp),
    Dot,
    LParen,
    RParen,
    And,
    Or,
    Not,
    True,
    False,
    Null,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::Num(_) => "number".into(),
            Tok::Op(op) => format!("`{}`", op.symbol()),
            Tok::Dot => "`.`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::And => "AND".into(),
            Tok::Or => "OR".into(),
            Tok::Not => "NOT".into(),
            Tok::True | Tok::False => "boolean".into(),
            Tok::Null => "null".into(),
            Tok::End => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, offset: usize, expected: &str, found: impl Into<String>) -> SyntaxError {
        SyntaxError {
            offset,
            expected: expected.into(),
            found: found.into(),
        }
    }

    fn peek_char(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn tokens(mut self) -> Result<Vec<(usize, Tok)>, SyntaxError> {
        let mut out = Vec::new();
        loop {
            while self.peek_char().is_some_and(char::is_whitespace) {
                self.pos += self.peek_char().map_or(0, char::len_utf8);
            }
            let start = self.pos;
            let Some(c) = self.peek_char() else {
                out.push((start, Tok::End));
                return Ok(out);
            };
            let tok = match c {
                '.' => self.single(Tok::Dot),
                '(' => self.single(Tok::LParen),
                ')' => self.single(Tok::RParen),
                '=' => self.single(Tok::Op(CmpOp::Eq)),
                '!' => {
                    if self.src[self.pos..].starts_with("!=") {
                        self.pos += 2;
                        Tok::Op(CmpOp::Ne)
                    } else {
                        return Err(self.err(start, "`!=`", "`!`"));
                    }
                }
                '<' | '>' => {
                    self.pos += 1;
                    let eq = self.peek_char() == Some('=');
                    if eq {
                        self.pos += 1;
                    }
                    Tok::Op(match (c, eq) {
                        ('<', false) => CmpOp::Lt,
                        ('<', true) => CmpOp::Le,
                        ('>', false) => CmpOp::Gt,
                        _ => CmpOp::Ge,
                    })
                }
                '"' => Tok::Str(self.string()?),
                '-' | '0'..='9' => Tok::Num(self.number()?),
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let end = self.src[self.pos..]
                        .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                        .map_or(self.src.len(), |i| self.pos + i);
                    let word = &self.src[self.pos..end];
                    self.pos = end;
                    match word.to_ascii_uppercase().as_str() {
                        "AND" => Tok::And,
                        "OR" => Tok::Or,
                        "NOT" => Tok::Not,
                        "CONTAINS" => Tok::Op(CmpOp::Contains),
                        "TRUE" => Tok::True,
                        "FALSE" => Tok::False,
                        "NULL" => Tok::Null,
                        _ => Tok::Ident(word.to_string()),
                    }
                }
                other => return Err(self.err(start, "token", format!("`{other}`"))),
            };
            out.push((start, tok));
        }
    }

    fn single(&mut self, t: Tok) -> Tok {
        self.pos += 1;
        t
    }

    fn string(&mut self) -> Result<String, SyntaxError> {
        self.pos += 1;
        let mut out = String::new();
        loop {
            let Some(c) = self.peek_char() else {
                return Err(self.err(self.pos, "closing `\"`", "end of input"));
            };
            let at = self.pos;
            self.pos += c.len_utf8();
            match c {
                '"' => return Ok(out),
                '\\' => {
                    let Some(e) = self.peek_char() else {
                        return Err(self.err(self.pos, "escape character", "end of input"));
                    };
                    self.pos += e.len_utf8();
                    match e {
                        '"' => out.push('"'),
                        '\\' => out.push('\\'),
                        '/' => out.push('/'),
                        'n' => out.push('\n'),
                        't' => out.push('\t'),
                        'r' => out.push('\r'),
                        'b' => out.push('\u{8}'),
                        'f' => out.push('\u{c}'),
                        'u' => out.push(self.unicode_escape(at)?),
                        other => return Err(self.err(at, "valid escape", format!("`\\{other}`"))),
                    }
                }
                c if (c as u32) < 0x20 => return Err(self.err(at, "printable character", "control character")),
                c => out.push(c),
            }
        }
    }

    fn hex4(&mut self, at: usize) -> Result<u32, SyntaxError> {
        let digits = self.src.get(self.pos..self.pos + 4).unwrap_or("");
        let v = u32::from_str_radix(digits, 16)
            .ok()
            .filter(|_| digits.len() == 4 && digits.bytes().all(|b| b.is_ascii_hexdigit()))
            .ok_or_else(|| self.err(at, "four hex digits after \\u", digits.to_string()))?;
        self.pos += 4;
        Ok(v)
    }

    fn unicode_escape(&mut self, at: usize) -> Result<char, SyntaxError> {
        let hi = self.hex4(at)?;
        let code = if (0xD800..0xDC00).contains(&hi) {
            if !self.src[self.pos..].starts_with("\\u") {
                return Err(self.err(self.pos, "low surrogate escape", "other"));
            }
            self.pos += 2;
            let lo = self.hex4(at)?;
            if !(0xDC00..0xE000).contains(&lo) {
                return Err(self.err(at, "low surrogate", format!("{lo:04x}")));
            }
            0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00)
        } else {
            hi
        };
        char::from_u32(code).ok_or_else(|| self.err(at, "unicode scalar value", format!("{code:x}")))
    }

    fn number(&mut self) -> Result<f64, SyntaxError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        let digits = |i: &mut usize| {
            let s = *i;
            while *i < bytes.len() && bytes[*i].is_ascii_digit() {
                *i += 1;
            }
            *i > s
        };
        if bytes[i] == b'-' {
            i += 1;
        }
        if !digits(&mut i) {
            return Err(self.err(i, "digit", "other"));
        }
        if i < bytes.len() && bytes[i] == b'.' {
            i += 1;
            if !digits(&mut i) {
                return Err(self.err(i, "digit after `.`", "other"));
            }
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            i += 1;
            if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
                i += 1;
            }
            if !digits(&mut i) {
                return Err(self.err(i, "exponent digits", "other"));
            }
        }
        self.pos = i;
        self.src[start..i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(start, "finite number", self.src[start..i].to_string()))
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn offset(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expected(&self, what: &str) -> SyntaxError {
        SyntaxError {
            offset: self.offset(),
            expected: what.into(),
            found: self.peek().describe(),
        }
    }

    fn or(&mut self) -> Result<QueryExpr, SyntaxError> {
        let mut left = self.and()?;
        while *self.peek() == Tok::Or {
            self.bump();
            left = QueryExpr::or(left, self.and()?);
        }
        Ok(left)
    }

    fn and(&mut self) -> Result<QueryExpr, SyntaxError> {
        let mut left = self.unary()?;
        while *self.peek() == Tok::And {
            self.bump();
            left = QueryExpr::and(left, self.unary()?);
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<QueryExpr, SyntaxError> {
        let negate = *self.peek() == Tok::Not;
        if negate {
            self.bump();
        }
        let inner = if *self.peek() == Tok::LParen {
            self.bump();
            let e = self.or()?;
            if *self.peek() != Tok::RParen {
                return Err(self.expected("`)`"));
            }
            self.bump();
            e
        } else {
            self.cond()?
        };
        Ok(if negate { QueryExpr::not(inner) } else { inner })
    }

    fn cond(&mut self) -> Result<QueryExpr, SyntaxError> {
        let mut path = Vec::new();
        loop {
            match self.peek().clone() {
                Tok::Ident(name) => {
                    self.bump();
                    path.push(name);
                }
                _ if path.is_empty() => return Err(self.expected("path or `(`")),
                _ => return Err(self.expected("identifier")),
            }
            if *self.peek() != Tok::Dot {
                break;
            }
            self.bump();
        }
        let op = match self.peek() {
            Tok::Op(op) => *op,
            _ => return Err(self.expected("comparison operator")),
        };
        self.bump();
        let literal_at = self.offset();
        let literal = match self.peek().clone() {
            Tok::Str(s) => Literal::String(s),
            Tok::Num(n) => Literal::Number(n),
            Tok::True => Literal::Bool(true),
            Tok::False => Literal::Bool(false),
            Tok::Null => Literal::Null,
            _ => return Err(self.expected("literal")),
        };
        if op.is_ordering() && !matches!(literal, Literal::String(_) | Literal::Number(_)) {
            return Err(SyntaxError {
                offset: literal_at,
                expected: "number or string literal".into(),
                found: self.peek().describe(),
            });
        }
        self.bump();
        Ok(QueryExpr::Cond(Condition { path, op, literal }))
    }
}

pub fn parse_query(text: &str) -> Result<QueryExpr, SyntaxError> {
    let toks = Lexer { src: text, pos: 0 }.tokens()?;
    let mut p = Parser { toks, at: 0 };
    let expr = p.or()?;
    if *p.peek() != Tok::End {
        return Err(p.expected("AND, OR or end of input"));
    }
    Ok(expr)
}
