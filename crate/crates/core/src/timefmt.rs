//! Conversions between decimal-second text and microsecond values.
//!
//! Text files speak seconds, the library speaks microseconds. Conversion is
//! done by shifting the decimal exponent of the text rather than multiplying
//! floats, so `parse(format(x)) == x` holds bit-for-bit.

/// Parses decimal seconds (plain or scientific notation) into microseconds.
///
/// Returns `None` for anything that is not a finite, non-negative number.
pub fn parse_seconds_as_us(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if raw.is_empty() || raw.starts_with('-') {
        return None;
    }
    let (mantissa, exponent) = match raw.find(['e', 'E']) {
        Some(pos) => (&raw[..pos], raw[pos + 1..].parse::<i32>().ok()?),
        None => (raw, 0),
    };
    if mantissa.is_empty()
        || !mantissa
            .chars()
            .all(|c| c.is_ascii_digit() || c == '.' || c == '+')
    {
        return None;
    }
    let value: f64 = format!("{mantissa}e{}", exponent.checked_add(6)?)
        .parse()
        .ok()?;
    value.is_finite().then_some(value)
}

/// Formats microseconds as exact decimal seconds using the shortest digit
/// string that round-trips through [`parse_seconds_as_us`].
pub fn format_us_as_seconds(us: f64) -> String {
    debug_assert!(us.is_finite() && us >= 0.0);
    if us == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{us:e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific formatting");
    let exp: i32 = exp.parse().expect("exponent");
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    // Number of digits before the decimal point once expressed in seconds.
    let int_len = exp - 6 + 1;
    if int_len <= 0 {
        format!("0.{}{}", "0".repeat((-int_len) as usize), digits)
    } else if int_len as usize >= digits.len() {
        format!("{}{}", digits, "0".repeat(int_len as usize - digits.len()))
    } else {
        let (int_part, frac_part) = digits.split_at(int_len as usize);
        format!("{int_part}.{frac_part}")
    }
}

/// Formats integer microseconds as seconds with six fractional digits.
pub fn format_int_us_as_seconds(us: u64) -> String {
    format!("{}.{:06}", us / 1_000_000, us % 1_000_000)
}

/// Rounds a microsecond value to the nearest integer microsecond.
pub fn round_us(us: f64) -> Option<u64> {
    let r = us.round();
    (r >= 0.0 && r < u64::MAX as f64).then_some(r as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_plain_and_scientific() {
        assert_eq!(parse_seconds_as_us("1.5"), Some(1_500_000.0));
        assert_eq!(parse_seconds_as_us("0.000001"), Some(1.0));
        assert_eq!(parse_seconds_as_us("2e-6"), Some(2.0));
        assert_eq!(parse_seconds_as_us("3"), Some(3_000_000.0));
        assert_eq!(parse_seconds_as_us("1.000001"), Some(1_000_001.0));
        assert_eq!(parse_seconds_as_us("-1"), None);
        assert_eq!(parse_seconds_as_us("abc"), None);
        assert_eq!(parse_seconds_as_us(""), None);
        assert_eq!(parse_seconds_as_us("inf"), None);
    }

    #[test]
    fn formats_exact_decimals() {
        assert_eq!(format_us_as_seconds(22.5), "0.0000225");
        assert_eq!(format_us_as_seconds(1_500_000.0), "1.5");
        assert_eq!(format_us_as_seconds(20_000_000.0), "20");
        assert_eq!(format_int_us_as_seconds(1_000_001), "1.000001");
        assert_eq!(format_int_us_as_seconds(0), "0.000000");
    }

    proptest! {
        #[test]
        fn float_round_trip(us in 0.0f64..1e13) {
            let text = format_us_as_seconds(us);
            prop_assert_eq!(parse_seconds_as_us(&text), Some(us));
        }

        #[test]
        fn integer_round_trip(us in 0u64..(1u64 << 50)) {
            let text = format_int_us_as_seconds(us);
            prop_assert_eq!(parse_seconds_as_us(&text).and_then(round_us), Some(us));
        }
    }
}
