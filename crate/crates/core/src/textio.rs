//! Helpers shared by the plain-text persistence formats.
//!
//! Reals are written like C's `%.17g`, which is enough digits to round-trip
//! every finite `f64` exactly.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Format `x` the way `printf("%.17g", x)` does.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_owned();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_owned();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.to_owned();
    }

    const PRECISION: i32 = 17;
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");

    if (-4..PRECISION).contains(&exp) {
        let decimals = (PRECISION - 1 - exp) as usize;
        strip_zeros(format!("{:.*}", decimals, x))
    } else {
        let mut out = strip_zeros(mantissa.to_owned());
        let sign = if exp < 0 { '-' } else { '+' };
        let _ = write!(out, "e{}{:02}", sign, exp.abs());
        out
    }
}

fn strip_zeros(mut s: String) -> String {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Space-joined `%.17g` rendering of a slice.
pub fn join_g17<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut out = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&fmt_g17(*v));
    }
    out
}

pub fn parse_f64(token: &str, line: usize) -> Result<f64> {
    token
        .parse::<f64>()
        .map_err(|_| Error::parse(line, format!("expected a real number, found {token:?}")))
}

pub fn parse_reals(text: &str, line: usize) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| parse_f64(t, line))
        .collect()
}

pub fn parse_usize(token: &str, line: usize) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| Error::parse(line, format!("expected a non-negative integer, found {token:?}")))
}

/// Parse `key=value` tokens out of a header line such as
/// `opds v1 m=100 d=1 count=5000`.
pub fn header_field(header: &str, key: &str, line: usize) -> Result<usize> {
    header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::parse(line, format!("header is missing `{key}=`")))
        .and_then(|v| parse_usize(v, line))
}

/// Line cursor with 1-based line numbers for error messages.
pub struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    pub fn next_line(&mut self) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(Error::parse(self.last + 1, "unexpected end of input")),
        }
    }

    pub fn expect_tag(&mut self, tag: &str) -> Result<()> {
        let (n, l) = self.next_line()?;
        if l.trim() == tag {
            Ok(())
        } else {
            Err(Error::parse(n, format!("expected `{tag}`, found {:?}", l.trim())))
        }
    }
}
