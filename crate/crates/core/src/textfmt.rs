//! Small helpers for the line-oriented text formats.

use crate::error::{Error, Result};

/// Seventeen significant digits; parses back to the identical f64.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn reals<'a>(xs: impl IntoIterator<Item = &'a f64>) -> String {
    xs.into_iter().map(|v| real(*v)).collect::<Vec<_>>().join(" ")
}

/// Cursor over non-empty, non-comment lines.
pub struct Lines<'a> {
    inner: std::iter::Peekable<Box<dyn Iterator<Item = &'a str> + 'a>>,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = &'a str> + 'a> = Box::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        );
        Self { inner: it.peekable() }
    }

    pub fn next_line(&mut self) -> Result<&'a str> {
        self.inner
            .next()
            .ok_or_else(|| Error::Parse("unexpected end of input".into()))
    }

    pub fn peek(&mut self) -> Option<&'a str> {
        self.inner.peek().copied()
    }

    /// Next line must start with `key`; returns the remaining tokens.
    pub fn expect(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some(k) if k == key => Ok(toks.collect()),
            other => Err(Error::Parse(format!("expected `{key}`, found `{}`", other.unwrap_or("")))),
        }
    }

    pub fn expect_usize(&mut self, key: &str) -> Result<usize> {
        let toks = self.expect(key)?;
        parse_one(&toks)
    }

    pub fn expect_real(&mut self, key: &str) -> Result<f64> {
        let toks = self.expect(key)?;
        parse_one(&toks)
    }

    pub fn expect_reals(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let toks = self.expect(key)?;
        parse_reals(&toks, len)
    }

    /// A line holding exactly `len` reals and nothing else.
    pub fn row(&mut self, len: usize) -> Result<Vec<f64>> {
        let toks: Vec<&str> = self.next_line()?.split_whitespace().collect();
        parse_reals(&toks, len)
    }
}

fn parse_one<T: std::str::FromStr>(toks: &[&str]) -> Result<T> {
    match toks {
        [one] => one.parse().map_err(|_| Error::Parse(format!("bad value `{one}`"))),
        _ => Err(Error::Parse(format!("expected one value, found {}", toks.len()))),
    }
}

pub fn parse_reals(toks: &[&str], len: usize) -> Result<Vec<f64>> {
    if toks.len() != len {
        return Err(Error::Parse(format!("expected {len} values, found {}", toks.len())));
    }
    toks.iter()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad real `{t}`"))))
        .collect()
}
