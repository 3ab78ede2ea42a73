//! Tokenizer shared by the policy, workload and rule-notation front ends.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Sym(&'static str),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(v) => write!(f, "`{v}`"),
            Tok::Str(s) => write!(f, "string {s:?}"),
            Tok::Sym(s) => write!(f, "`{s}`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub tok: Tok,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{pos}: {msg}")]
pub struct LexError {
    pub pos: Pos,
    pub msg: String,
}

const TWO_CHAR: [&str; 8] = ["==", "!=", "<=", ">=", "++", "->", "=>", "&&"];
const ONE_CHAR: &str = "{}()[],=<>+-*/^!$:|;.";

fn one_char_sym(c: char) -> Option<&'static str> {
    let idx = ONE_CHAR.find(c)?;
    Some(&ONE_CHAR[idx..idx + 1])
}

/// Tokenizes `src`. `#` starts a comment running to end of line. The arrows
/// `→`, `⇒` and `¬` are accepted as `->`, `=>` and `!`.
pub fn tokenize(src: &str) -> Result<Vec<Token>, LexError> {
    tokenize_from(src, 1)
}

pub fn tokenize_from(src: &str, first_line: usize) -> Result<Vec<Token>, LexError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, first_line, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            out.push(Token { tok: Tok::Ident(s), pos });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            let v = s.parse::<i64>().map_err(|_| LexError { pos, msg: format!("integer literal {s} out of range") })?;
            out.push(Token { tok: Tok::Int(v), pos });
            continue;
        }
        if c == '"' {
            i += 1;
            col += 1;
            let mut s = String::new();
            loop {
                let Some(&ch) = chars.get(i) else {
                    return Err(LexError { pos, msg: "unterminated string".into() });
                };
                i += 1;
                col += 1;
                match ch {
                    '"' => break,
                    '\n' => return Err(LexError { pos, msg: "unterminated string".into() }),
                    '\\' => {
                        let esc = chars.get(i).copied();
                        i += 1;
                        col += 1;
                        match esc {
                            Some('n') => s.push('\n'),
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            other => return Err(LexError { pos, msg: format!("bad escape {other:?} in string") }),
                        }
                    }
                    other => s.push(other),
                }
            }
            out.push(Token { tok: Tok::Str(s), pos });
            continue;
        }
        let unicode = match c {
            '→' => Some("->"),
            '⇒' => Some("=>"),
            '¬' => Some("!"),
            '≠' => Some("!="),
            '≤' => Some("<="),
            '≥' => Some(">="),
            _ => None,
        };
        if let Some(sym) = unicode {
            i += 1;
            col += 1;
            out.push(Token { tok: Tok::Sym(sym), pos });
            continue;
        }
        if i + 1 < chars.len() {
            let pair: String = chars[i..i + 2].iter().collect();
            if let Some(sym) = TWO_CHAR.iter().find(|s| **s == pair) {
                i += 2;
                col += 2;
                out.push(Token { tok: Tok::Sym(sym), pos });
                continue;
            }
        }
        if let Some(sym) = one_char_sym(c) {
            i += 1;
            col += 1;
            out.push(Token { tok: Tok::Sym(sym), pos });
            continue;
        }
        return Err(LexError { pos, msg: format!("unexpected character {c:?}") });
    }
    out.push(Token { tok: Tok::Eof, pos: Pos { line, col } });
    Ok(out)
}

/// Cursor over a token vector with the small lookahead helpers every
/// front end needs.
pub(crate) struct Cursor {
    toks: Vec<Token>,
    idx: usize,
}

impl Cursor {
    pub fn new(toks: Vec<Token>) -> Self {
        Cursor { toks, idx: 0 }
    }

    pub fn peek(&self) -> &Tok {
        &self.toks[self.idx].tok
    }

    pub fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.idx + n).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    pub fn pos(&self) -> Pos {
        self.toks[self.idx].pos
    }

    pub fn next(&mut self) -> Token {
        let t = self.toks[self.idx].clone();
        if self.idx + 1 < self.toks.len() {
            self.idx += 1;
        }
        t
    }

    pub fn at_eof(&self) -> bool {
        matches!(self.peek(), Tok::Eof)
    }

    pub fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    pub fn is_ident(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x == s)
    }

    pub fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.next();
            true
        } else {
            false
        }
    }

    pub fn eat_ident(&mut self, s: &str) -> bool {
        if self.is_ident(s) {
            self.next();
            true
        } else {
            false
        }
    }
}
