//! Shared helpers for the line-oriented text formats.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 17 significant digits: enough for an exact `f64` round trip.
pub fn push_f64(out: &mut String, x: f64) {
    let _ = write!(out, " {x:.16e}");
}

pub fn push_all(out: &mut String, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        push_f64(out, x);
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Tokenizing line reader that skips blank lines and `#` comments.
pub struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    pub line: usize,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate(), line: 0 }
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    /// Next record as tokens.
    pub fn next_record(&mut self) -> Result<Record<'a>> {
        for (i, raw) in self.inner.by_ref() {
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            self.line = i + 1;
            return Ok(Record { tokens: t.split_whitespace().collect(), pos: 0, line: i + 1 });
        }
        Err(self.error("unexpected end of file"))
    }

    /// Next record, which must start with `tag`.
    pub fn expect(&mut self, tag: &str) -> Result<Record<'a>> {
        let mut rec = self.next_record()?;
        let got = rec.word()?;
        if got != tag {
            return Err(rec.error(format!("expected `{tag}`, found `{got}`")));
        }
        Ok(rec)
    }
}

pub struct Record<'a> {
    tokens: Vec<&'a str>,
    pos: usize,
    line: usize,
}

impl<'a> Record<'a> {
    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    pub fn word(&mut self) -> Result<&'a str> {
        let t = self.tokens.get(self.pos).copied().ok_or_else(|| self.error("missing field"))?;
        self.pos += 1;
        Ok(t)
    }

    pub fn parse<T: FromStr>(&mut self) -> Result<T> {
        let w = self.word()?;
        w.parse().map_err(|_| self.error(format!("cannot parse `{w}`")))
    }

    pub fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.parse::<f64>()).collect()
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.tokens.len() {
            return Err(self.error(format!("{} trailing fields", self.tokens.len() - self.pos)));
        }
        Ok(())
    }
}
