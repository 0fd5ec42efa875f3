//! Text formatting of floats that survives a write/read cycle bit-exactly.

/// 17 significant digits in scientific notation (valid JSON and CSV).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_vec(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| fmt_f64(*x)).collect();
    format!("[{}]", parts.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn seventeen_digits_round_trip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let back: f64 = fmt_f64(x).parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
            let json: f64 = serde_json::from_str(&fmt_f64(x)).unwrap();
            prop_assert_eq!(json.to_bits(), x.to_bits());
        }
    }
}
