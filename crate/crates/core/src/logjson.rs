//! Serde helpers for log-domain values: non-finite values travel as the
//! strings `"-inf"`, `"inf"` and `"nan"` since JSON has no encoding for them.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Str(String),
}

fn to_repr(v: f64) -> Result<f64, &'static str> {
    if v.is_finite() {
        Ok(v)
    } else if v.is_nan() {
        Err("nan")
    } else if v > 0.0 {
        Err("inf")
    } else {
        Err("-inf")
    }
}

fn from_repr<E: serde::de::Error>(repr: Repr) -> Result<f64, E> {
    match repr {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) => match s.as_str() {
            "-inf" => Ok(f64::NEG_INFINITY),
            "inf" => Ok(f64::INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(E::custom(format!("unexpected log value {other:?}"))),
        },
    }
}

struct Value(f64);

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match to_repr(self.0) {
            Ok(v) => s.serialize_f64(v),
            Err(text) => s.serialize_str(text),
        }
    }
}

pub mod value {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        Value(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

pub mod values {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(vs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(vs.len()))?;
        for &v in vs {
            seq.serialize_element(&Value(v))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(from_repr::<D::Error>)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Rec {
        #[serde(with = "super::value")]
        one: f64,
        #[serde(with = "super::values")]
        many: Vec<f64>,
    }

    #[test]
    fn infinities_are_strings() {
        let rec = Rec {
            one: f64::INFINITY,
            many: vec![-1.5, f64::NEG_INFINITY, 0.0],
        };
        let text = serde_json::to_string(&rec).unwrap();
        assert_eq!(text, r#"{"one":"inf","many":[-1.5,"-inf",0.0]}"#);
        assert_eq!(serde_json::from_str::<Rec>(&text).unwrap(), rec);
    }

    #[test]
    fn unknown_string_rejected() {
        assert!(serde_json::from_str::<Rec>(r#"{"one":"big","many":[]}"#).is_err());
    }
}
