//! Float helpers shared by the JSON encodings.
//!
//! JSON has no infinity, so metric values that may be unbounded (MTTC,
//! MTTA, attack cost with no path) are written as the string `"inf"`.

use serde::de::{self, Visitor};
use serde::{Deserializer, Serializer};
use std::fmt;

pub const INF_TOKEN: &str = "inf";
pub const NEG_INF_TOKEN: &str = "-inf";

pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if value.is_infinite() {
        serializer.serialize_str(if *value > 0.0 { INF_TOKEN } else { NEG_INF_TOKEN })
    } else {
        serializer.serialize_f64(*value)
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    struct FloatOrInf;

    impl Visitor<'_> for FloatOrInf {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(f, "a number or \"{INF_TOKEN}\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            if v == INF_TOKEN {
                Ok(f64::INFINITY)
            } else if v == NEG_INF_TOKEN {
                Ok(f64::NEG_INFINITY)
            } else {
                Err(E::invalid_value(de::Unexpected::Str(v), &self))
            }
        }
    }

    deserializer.deserialize_any(FloatOrInf)
}

/// Same encoding for map values.
pub mod map {
    use serde::ser::SerializeMap;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "super")] f64);

    pub fn serialize<K, S>(value: &BTreeMap<K, f64>, serializer: S) -> Result<S::Ok, S::Error>
    where
        K: Serialize,
        S: Serializer,
    {
        let mut map = serializer.serialize_map(Some(value.len()))?;
        for (k, v) in value {
            map.serialize_entry(k, &Wrapped(*v))?;
        }
        map.end()
    }

    pub fn deserialize<'de, K, D>(deserializer: D) -> Result<BTreeMap<K, f64>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        D: Deserializer<'de>,
    {
        let raw: BTreeMap<K, Wrapped> = BTreeMap::deserialize(deserializer)?;
        Ok(raw.into_iter().map(|(k, Wrapped(v))| (k, v)).collect())
    }
}

/// Round to `digits` significant digits; non-finite values pass through.
pub fn round_sig(value: f64, digits: usize) -> f64 {
    if !value.is_finite() || value == 0.0 {
        return value;
    }
    let text = format!("{:.*e}", digits.saturating_sub(1), value);
    text.parse().unwrap_or(value)
}

/// Relative comparison with an absolute floor for values near zero.
pub fn approx_eq(a: f64, b: f64, rel: f64) -> bool {
    if a == b {
        return true;
    }
    if a.is_infinite() || b.is_infinite() || a.is_nan() || b.is_nan() {
        return false;
    }
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::{Deserialize, Serialize};

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Holder(#[serde(with = "super")] f64);

    #[test]
    fn infinity_round_trips_as_string() {
        let text = serde_json::to_string(&Holder(f64::INFINITY)).unwrap();
        assert_eq!(text, "\"inf\"");
        assert_eq!(serde_json::from_str::<Holder>(&text).unwrap(), Holder(f64::INFINITY));
        assert_eq!(serde_json::from_str::<Holder>("3").unwrap(), Holder(3.0));
        let neg = serde_json::to_string(&Holder(f64::NEG_INFINITY)).unwrap();
        assert_eq!(serde_json::from_str::<Holder>(&neg).unwrap(), Holder(f64::NEG_INFINITY));
        assert!(serde_json::from_str::<Holder>("\"nan\"").is_err());
    }

    #[test]
    fn significant_digit_rounding() {
        assert_eq!(round_sig(4.0 / 3.0, 6), 1.33333);
        assert_eq!(round_sig(0.1 + 0.2, 6), 0.3);
        assert_eq!(round_sig(123456789.0, 6), 123457000.0);
        assert_eq!(round_sig(f64::INFINITY, 6), f64::INFINITY);
        assert_eq!(round_sig(0.0, 6), 0.0);
    }
}
