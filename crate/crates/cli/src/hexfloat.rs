//! Exact base-16 text encoding of `f64` in the C99 `%a` style:
//! `0x1.8p+1`, `-0x0.0000000000001p-1022`, `inf`, `-inf`, `nan`.

pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i32;
    let mantissa = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 { (0, -1022) } else { (1, exp_bits - 1023) };
    let mut digits = format!("{mantissa:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let frac = if digits.is_empty() { String::new() } else { format!(".{digits}") };
    format!("{sign}0x{lead}{frac}p{exp:+}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError(pub String);

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "bad hex float `{}`", self.0)
    }
}

impl std::error::Error for ParseError {}

/// Parses the output of [`format`]. Only the canonical form is accepted:
/// leading digit 0 or 1, at most 13 fraction digits, exponent in range.
pub fn parse(s: &str) -> Result<f64, ParseError> {
    let err = || ParseError(s.to_string());
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let body = body.strip_prefix("0x").ok_or_else(err)?;
    let (mant, exp) = body.split_once('p').ok_or_else(err)?;
    let exp: i32 = exp.parse().map_err(|_| err())?;
    let (lead, frac) = match mant.split_once('.') {
        Some((l, f)) if !f.is_empty() => (l, f),
        Some(_) => return Err(err()),
        None => (mant, ""),
    };
    if frac.len() > 13 || !frac.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(err());
    }
    let frac_bits = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).map_err(|_| err())? << (4 * (13 - frac.len()))
    };
    let sign = (neg as u64) << 63;
    let bits = match lead {
        "0" if frac_bits == 0 && exp == 0 => sign,
        "0" if exp == -1022 => sign | frac_bits,
        "1" if (-1022..=1023).contains(&exp) => sign | (((exp + 1023) as u64) << 52) | frac_bits,
        _ => return Err(err()),
    };
    Ok(f64::from_bits(bits))
}
