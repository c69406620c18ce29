//! Recursive-descent parser for the textual formula syntax.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! formula   := or
//! or        := and ( "or" and )*
//! and       := unary ( "and" unary )*
//! unary     := "not" unary
//!            | ("F" | "G") "[" number "," number "]" "(" formula ")"
//!            | "(" formula ")"
//!            | predicate
//! predicate := ( "abs" "(" ident ")" | ident ) ("<=" | ">=") number
//! ```
//!
//! `not`, `and`, `or` and `abs` are reserved words; any other identifier
//! names a trace channel. `F` and `G` act as temporal operators only when
//! directly followed by `[`. Numbers are ordinary decimal floats with an
//! optional sign.

use super::{CmpOp, Formula, StlError, TimeInterval};
use crate::scalar::{real, Real};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Le,
    Ge,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

fn syntax(pos: usize, msg: impl Into<String>) -> StlError {
    StlError::Syntax {
        pos,
        msg: msg.into(),
    }
}

impl<'a> Lexer<'a> {
    fn tokenize(src: &'a str) -> Result<Vec<(Tok, usize)>, StlError> {
        let mut lx = Lexer {
            src: src.as_bytes(),
            pos: 0,
        };
        let mut out = Vec::new();
        while let Some(tok) = lx.next_token()? {
            out.push(tok);
        }
        Ok(out)
    }

    fn next_token(&mut self) -> Result<Option<(Tok, usize)>, StlError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let b = self.src[self.pos];
        let tok = match b {
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'[' => {
                self.pos += 1;
                Tok::LBracket
            }
            b']' => {
                self.pos += 1;
                Tok::RBracket
            }
            b',' => {
                self.pos += 1;
                Tok::Comma
            }
            b'<' | b'>' => {
                if self.pos + 1 >= self.src.len() || self.src[self.pos + 1] != b'=' {
                    return Err(syntax(start, format!("expected `{}=`", b as char)));
                }
                self.pos += 2;
                if b == b'<' {
                    Tok::Le
                } else {
                    Tok::Ge
                }
            }
            b'-' | b'+' | b'0'..=b'9' | b'.' => self.lex_number()?,
            _ if b.is_ascii_alphabetic() || b == b'_' => {
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                Tok::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
            }
            _ => return Err(syntax(start, format!("unexpected character `{}`", b as char))),
        };
        Ok(Some((tok, start)))
    }

    fn lex_number(&mut self) -> Result<Tok, StlError> {
        let start = self.pos;
        if matches!(self.src[self.pos], b'-' | b'+') {
            self.pos += 1;
        }
        let mut saw_digit = false;
        while self.pos < self.src.len() {
            match self.src[self.pos] {
                b'0'..=b'9' => {
                    saw_digit = true;
                    self.pos += 1;
                }
                b'.' => self.pos += 1,
                b'e' | b'E' => {
                    self.pos += 1;
                    if self.pos < self.src.len() && matches!(self.src[self.pos], b'-' | b'+') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos])
            .map_err(|_| syntax(start, "invalid number"))?;
        if !saw_digit {
            return Err(syntax(start, "invalid number"));
        }
        text.parse::<f64>()
            .map(Tok::Number)
            .map_err(|_| syntax(start, format!("invalid number `{text}`")))
    }
}

struct Parser<T> {
    toks: Vec<(Tok, usize)>,
    at: usize,
    end_pos: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Parser<T> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(t, _)| t)
    }

    fn pos(&self) -> usize {
        self.toks
            .get(self.at)
            .map(|&(_, p)| p)
            .unwrap_or(self.end_pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.at).map(|(t, _)| t.clone());
        if t.is_some() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), StlError> {
        let pos = self.pos();
        match self.bump() {
            Some(t) if t == want => Ok(()),
            Some(t) => Err(syntax(pos, format!("expected {what}, found {t:?}"))),
            None => Err(syntax(pos, format!("expected {what}, found end of input"))),
        }
    }

    fn number(&mut self, what: &str) -> Result<f64, StlError> {
        let pos = self.pos();
        match self.bump() {
            Some(Tok::Number(x)) => Ok(x),
            Some(t) => Err(syntax(pos, format!("expected {what}, found {t:?}"))),
            None => Err(syntax(pos, format!("expected {what}, found end of input"))),
        }
    }

    fn formula(&mut self) -> Result<Formula<T>, StlError> {
        let mut lhs = self.and_expr()?;
        while matches!(self.peek(), Some(Tok::Ident(w)) if w == "or") {
            self.bump();
            let rhs = self.and_expr()?;
            lhs = Formula::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Formula<T>, StlError> {
        let mut lhs = self.unary()?;
        while matches!(self.peek(), Some(Tok::Ident(w)) if w == "and") {
            self.bump();
            let rhs = self.unary()?;
            lhs = Formula::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Formula<T>, StlError> {
        let pos = self.pos();
        match self.peek() {
            Some(Tok::Ident(w)) if w == "not" => {
                self.bump();
                Ok(Formula::not(self.unary()?))
            }
            Some(Tok::Ident(w))
                if (w == "F" || w == "G")
                    && matches!(self.toks.get(self.at + 1), Some((Tok::LBracket, _))) =>
            {
                let eventually = w == "F";
                self.bump();
                self.expect(Tok::LBracket, "`[`")?;
                let a = self.number("interval start")?;
                self.expect(Tok::Comma, "`,`")?;
                let b = self.number("interval end")?;
                self.expect(Tok::RBracket, "`]`")?;
                let iv = TimeInterval::new(real::<T>(a), real::<T>(b))?;
                self.expect(Tok::LParen, "`(`")?;
                let sub = self.formula()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(if eventually {
                    Formula::eventually(iv, sub)
                } else {
                    Formula::globally(iv, sub)
                })
            }
            Some(Tok::LParen) => {
                self.bump();
                let sub = self.formula()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(sub)
            }
            Some(Tok::Ident(_)) => self.predicate(),
            Some(t) => Err(syntax(pos, format!("expected a formula, found {t:?}"))),
            None => Err(syntax(pos, "expected a formula, found end of input")),
        }
    }

    fn predicate(&mut self) -> Result<Formula<T>, StlError> {
        let pos = self.pos();
        let first = match self.bump() {
            Some(Tok::Ident(w)) => w,
            _ => return Err(syntax(pos, "expected an identifier")),
        };
        let (channel, abs) = if first == "abs" {
            self.expect(Tok::LParen, "`(` after abs")?;
            let chan_pos = self.pos();
            let chan = match self.bump() {
                Some(Tok::Ident(w)) => w,
                _ => return Err(syntax(chan_pos, "expected a channel name inside abs(...)")),
            };
            self.expect(Tok::RParen, "`)`")?;
            (chan, true)
        } else {
            (first, false)
        };
        if matches!(channel.as_str(), "not" | "and" | "or" | "abs") {
            return Err(syntax(
                pos,
                format!("`{channel}` is a reserved word, not a channel name"),
            ));
        }
        let op_pos = self.pos();
        let op = match self.bump() {
            Some(Tok::Le) => CmpOp::Le,
            Some(Tok::Ge) => CmpOp::Ge,
            Some(t) => return Err(syntax(op_pos, format!("expected `<=` or `>=`, found {t:?}"))),
            None => return Err(syntax(op_pos, "expected `<=` or `>=`, found end of input")),
        };
        let threshold = self.number("a numeric threshold")?;
        Ok(Formula::pred(channel, abs, op, real::<T>(threshold)))
    }
}

/// Parses the documented formula syntax into an AST. Pretty-printing the
/// result with `Display` re-parses to an equal formula.
pub fn parse_formula<T: Real>(text: &str) -> Result<Formula<T>, StlError> {
    let toks = Lexer::tokenize(text)?;
    let mut parser = Parser {
        toks,
        at: 0,
        end_pos: text.len(),
        _marker: std::marker::PhantomData,
    };
    let formula = parser.formula()?;
    if parser.at != parser.toks.len() {
        return Err(syntax(parser.pos(), "unexpected trailing input"));
    }
    Ok(formula)
}
