//! Exact rationals at the JSON boundary.
//!
//! Times and fractions are written as decimal strings when the value has a
//! finite decimal expansion and as `p/q` otherwise, so every value read back
//! is identical to the one written. Reading also accepts plain JSON numbers,
//! taken at their literal decimal value.

use std::fmt;

use detshare_core::rational::{exact_decimal, parse_decimal};
use detshare_core::Rational;
use serde::de::{self, Visitor};
use serde::{Deserializer, Serializer};

/// Lossless text form of `q`.
pub fn exact(q: &Rational) -> String {
    exact_decimal(q).unwrap_or_else(|| format!("{}/{}", q.numer(), q.denom()))
}

pub fn parse(text: &str) -> Result<Rational, String> {
    parse_decimal(text).map_err(|e| e.to_string())
}

struct RationalVisitor;

impl Visitor<'_> for RationalVisitor {
    type Value = Rational;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a decimal string such as \"1.25\", a fraction \"p/q\", or a number")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Rational, E> {
        parse(v).map_err(E::custom)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rational, E> {
        Ok(Rational::from_integer(v.into()))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rational, E> {
        Ok(Rational::from_integer(v.into()))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Rational, E> {
        // Shortest round-trip text is the literal the user wrote.
        if !v.is_finite() {
            return Err(E::custom("non-finite number"));
        }
        parse(&format!("{v:?}")).map_err(E::custom)
    }
}

pub fn serialize<S: Serializer>(q: &Rational, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&exact(q))
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
    d.deserialize_any(RationalVisitor)
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(q: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        match q {
            Some(q) => s.serialize_str(&exact(q)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        struct Opt;
        impl<'de> Visitor<'de> for Opt {
            type Value = Option<Rational>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a rational or null")
            }

            fn visit_none<E: de::Error>(self) -> Result<Self::Value, E> {
                Ok(None)
            }

            fn visit_unit<E: de::Error>(self) -> Result<Self::Value, E> {
                Ok(None)
            }

            fn visit_some<D: Deserializer<'de>>(self, d: D) -> Result<Self::Value, D::Error> {
                super::deserialize(d).map(Some)
            }
        }
        d.deserialize_option(Opt)
    }
}

pub mod list {
    use super::*;
    use serde::de::SeqAccess;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(qs: &[Rational], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(qs.len()))?;
        for q in qs {
            seq.serialize_element(&exact(q))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rational>, D::Error> {
        struct Seq;
        impl<'de> Visitor<'de> for Seq {
            type Value = Vec<Rational>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a list of rationals")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut a: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(q) = a.next_element::<Wrapped>()? {
                    out.push(q.0);
                }
                Ok(out)
            }
        }
        d.deserialize_seq(Seq)
    }

    struct Wrapped(Rational);

    impl<'de> serde::Deserialize<'de> for Wrapped {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            super::deserialize(d).map(Wrapped)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use detshare_core::rational::ratio;

    #[test]
    fn exact_text_round_trips() {
        for q in [ratio(1, 3), ratio(-5, 4), ratio(7, 1), ratio(1, 1_000_000)] {
            assert_eq!(parse(&exact(&q)).unwrap(), q);
        }
        assert_eq!(exact(&ratio(1, 3)), "1/3");
        assert_eq!(exact(&ratio(5, 4)), "1.25");
    }

    #[test]
    fn numbers_are_read_at_face_value() {
        #[derive(serde::Deserialize)]
        struct T {
            #[serde(with = "super")]
            x: Rational,
        }
        let t: T = serde_json::from_str(r#"{"x": 0.1}"#).unwrap();
        assert_eq!(t.x, ratio(1, 10));
        let t: T = serde_json::from_str(r#"{"x": "3/4"}"#).unwrap();
        assert_eq!(t.x, ratio(3, 4));
        assert!(serde_json::from_str::<T>(r#"{"x": "abc"}"#).is_err());
    }
}
