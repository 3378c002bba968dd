//! Lossless text encoding of `f64` in C99 hex-float form (`%a`).
//!
//! Only the canonical form produced by [`format`] is accepted by [`parse`]:
//! `[-]0x1.<hex>p<exp>` for normal numbers, `[-]0x0.<hex>p-1022` for
//! subnormals, and `0x0p+0` / `-0x0p+0` for zeros. Non-finite values are not
//! representable.

const FRAC_BITS: u32 = 52;
const FRAC_MASK: u64 = (1 << FRAC_BITS) - 1;

pub fn format(x: f64) -> Option<String> {
    if !x.is_finite() {
        return None;
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let biased = ((bits >> FRAC_BITS) & 0x7ff) as i32;
    let frac = bits & FRAC_MASK;
    if biased == 0 && frac == 0 {
        return Some(format!("{sign}0x0p+0"));
    }
    let (lead, exp) = if biased == 0 {
        (0, -1022)
    } else {
        (1, biased - 1023)
    };
    let mut digits = format!("{frac:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let dot = if digits.is_empty() {
        String::new()
    } else {
        format!(".{digits}")
    };
    let esign = if exp >= 0 { "+" } else { "-" };
    Some(format!("{sign}0x{lead}{dot}p{esign}{}", exp.abs()))
}

pub fn parse(s: &str) -> Result<f64, String> {
    let bad = || format!("malformed hex float `{s}`");
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mantissa, exp) = rest.split_once('p').ok_or_else(bad)?;
    let (esign, edigits) = exp.split_at(exp.len().min(1));
    if !matches!(esign, "+" | "-")
        || edigits.is_empty()
        || !edigits.bytes().all(|b| b.is_ascii_digit())
        || (edigits.len() > 1 && edigits.starts_with('0'))
    {
        return Err(bad());
    }
    let exp: i32 = edigits.parse().map_err(|_| bad())?;
    let exp = if esign == "-" { -exp } else { exp };
    let (lead, frac_digits) = match mantissa.split_once('.') {
        Some((l, f)) => {
            if f.is_empty() || f.len() > 13 || f.ends_with('0') {
                return Err(bad());
            }
            (l, f)
        }
        None => (mantissa, ""),
    };
    if !frac_digits
        .bytes()
        .all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
    {
        return Err(bad());
    }
    let frac = if frac_digits.is_empty() {
        0
    } else {
        u64::from_str_radix(frac_digits, 16).map_err(|_| bad())? << (4 * (13 - frac_digits.len()))
    };
    let sign_bit = (neg as u64) << 63;
    let bits = match lead {
        "1" => {
            if !(-1022..=1023).contains(&exp) {
                return Err(bad());
            }
            sign_bit | (((exp + 1023) as u64) << FRAC_BITS) | frac
        }
        "0" if frac == 0 => {
            if exp != 0 {
                return Err(bad());
            }
            sign_bit
        }
        "0" => {
            if exp != -1022 {
                return Err(bad());
            }
            sign_bit | frac
        }
        _ => return Err(bad()),
    };
    Ok(f64::from_bits(bits))
}
