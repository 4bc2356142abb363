//! Fixed-format float printing and small CSV helpers.
//!
//! All artifacts use C-style `%.12e` floats so that repeated runs produce
//! byte-identical files.

use std::fmt::Write as _;

/// Formats `x` like C's `%.12e`: 12 fractional digits, explicit exponent
/// sign, at least two exponent digits.
pub fn format_e(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let raw = format!("{:.12e}", x);
    // Rust renders e.g. "1.234567890123e2" / "-1.5e-3"; rewrite the exponent.
    let (mantissa, exp) = raw.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("exponent digits");
    let mut out = String::with_capacity(20);
    out.push_str(mantissa);
    let _ = write!(out, "e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    out
}

/// Writes one CSV row of floats (after optional leading columns).
pub fn push_float_row(buf: &mut String, lead: &[&str], values: &[f64]) {
    let mut first = true;
    for l in lead {
        if !first {
            buf.push(',');
        }
        buf.push_str(l);
        first = false;
    }
    for v in values {
        if !first {
            buf.push(',');
        }
        buf.push_str(&format_e(*v));
        first = false;
    }
    buf.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_like_c_printf() {
        assert_eq!(format_e(0.0), "0.000000000000e+00");
        assert_eq!(format_e(1.0), "1.000000000000e+00");
        assert_eq!(format_e(-123.456), "-1.234560000000e+02");
        assert_eq!(format_e(6.02214076e23), "6.022140760000e+23");
        assert_eq!(format_e(1.5e-3), "1.500000000000e-03");
        assert_eq!(format_e(f64::INFINITY), "inf");
        assert_eq!(format_e(f64::NEG_INFINITY), "-inf");
        assert_eq!(format_e(f64::NAN), "nan");
    }

    #[test]
    fn row_layout() {
        let mut buf = String::new();
        push_float_row(&mut buf, &["ok"], &[1.0, 2.0]);
        assert_eq!(buf, "ok,1.000000000000e+00,2.000000000000e+00\n");
    }

    proptest::proptest! {
        #[test]
        fn round_trips_through_parse(x in -1e12_f64..1e12) {
            let rendered = format_e(x);
            let back: f64 = rendered.parse().unwrap();
            let err = (back - x).abs();
            proptest::prop_assert!(err <= 5e-13 * x.abs().max(1e-300));
        }

        #[test]
        fn rendering_is_deterministic(x in proptest::num::f64::NORMAL) {
            proptest::prop_assert_eq!(format_e(x), format_e(x));
        }
    }
}
