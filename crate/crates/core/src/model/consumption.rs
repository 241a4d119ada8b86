use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

pub const LITRES_PER_M3: i64 = 1000;

/// A water volume held as whole litres.
///
/// Sums are exact integer arithmetic. Text and JSON forms are cubic metres
/// with three decimals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Consumption(i64);

impl Consumption {
    pub const ZERO: Consumption = Consumption(0);

    pub const fn from_litres(litres: i64) -> Self {
        Consumption(litres)
    }

    pub const fn litres(self) -> i64 {
        self.0
    }

    /// Rounds to the nearest litre.
    pub fn from_m3(m3: f64) -> Self {
        Consumption((m3 * LITRES_PER_M3 as f64).round() as i64)
    }

    pub fn m3(self) -> f64 {
        self.0 as f64 / LITRES_PER_M3 as f64
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn abs(self) -> Self {
        Consumption(self.0.abs())
    }

    /// `self * factor`, rounded half away from zero to whole litres.
    pub fn scale(self, factor: f64) -> Self {
        Consumption((self.0 as f64 * factor).round() as i64)
    }

    /// Parses a decimal cubic-metre string such as `-12.345`.
    ///
    /// Digits past the third decimal are rounded half away from zero.
    pub fn parse_m3(s: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::BadConsumption(s.to_string());
        let t = s.trim();
        let (negative, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(bad());
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let whole: i64 = if int_part.is_empty() { 0 } else { int_part.parse().map_err(|_| bad())? };
        let mut frac_litres = 0i64;
        for (i, b) in frac_part.bytes().take(3).enumerate() {
            frac_litres += i64::from(b - b'0') * 10i64.pow(2 - i as u32);
        }
        if let Some(b) = frac_part.bytes().nth(3) {
            if b >= b'5' {
                frac_litres += 1;
            }
        }
        let litres = whole
            .checked_mul(LITRES_PER_M3)
            .and_then(|w| w.checked_add(frac_litres))
            .ok_or_else(bad)?;
        Ok(Consumption(if negative { -litres } else { litres }))
    }
}

impl fmt::Display for Consumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{}{}.{:03}", sign, abs / 1000, abs % 1000)
    }
}

impl FromStr for Consumption {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Consumption::parse_m3(s)
    }
}

impl Add for Consumption {
    type Output = Consumption;
    fn add(self, rhs: Consumption) -> Consumption {
        Consumption(self.0 + rhs.0)
    }
}

impl AddAssign for Consumption {
    fn add_assign(&mut self, rhs: Consumption) {
        self.0 += rhs.0;
    }
}

impl Sub for Consumption {
    type Output = Consumption;
    fn sub(self, rhs: Consumption) -> Consumption {
        Consumption(self.0 - rhs.0)
    }
}

impl SubAssign for Consumption {
    fn sub_assign(&mut self, rhs: Consumption) {
        self.0 -= rhs.0;
    }
}

impl Neg for Consumption {
    type Output = Consumption;
    fn neg(self) -> Consumption {
        Consumption(-self.0)
    }
}

impl Sum for Consumption {
    fn sum<I: Iterator<Item = Consumption>>(iter: I) -> Consumption {
        Consumption(iter.map(|c| c.0).sum())
    }
}

impl<'a> Sum<&'a Consumption> for Consumption {
    fn sum<I: Iterator<Item = &'a Consumption>>(iter: I) -> Consumption {
        Consumption(iter.map(|c| c.0).sum())
    }
}

impl Serialize for Consumption {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.m3())
    }
}

impl<'de> Deserialize<'de> for Consumption {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let m3 = f64::deserialize(deserializer)?;
        if !m3.is_finite() {
            return Err(serde::de::Error::custom("non-finite consumption"));
        }
        Ok(Consumption::from_m3(m3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_decimal_m3() {
        assert_eq!(Consumption::parse_m3("1.234").unwrap().litres(), 1234);
        assert_eq!(Consumption::parse_m3("-980").unwrap().litres(), -980_000);
        assert_eq!(Consumption::parse_m3("0.5").unwrap().litres(), 500);
        assert_eq!(Consumption::parse_m3(".25").unwrap().litres(), 250);
        assert_eq!(Consumption::parse_m3("2.0005").unwrap().litres(), 2001);
        assert_eq!(Consumption::parse_m3(" 7 ").unwrap().litres(), 7000);
        for bad in ["abc", "", "-", "1e3", "1.2.3", "--1", "."] {
            assert!(Consumption::parse_m3(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn displays_three_decimals() {
        assert_eq!(Consumption::from_litres(1234).to_string(), "1.234");
        assert_eq!(Consumption::from_litres(-5).to_string(), "-0.005");
        assert_eq!(Consumption::from_litres(50_000).to_string(), "50.000");
    }

    proptest! {
        #[test]
        fn text_and_json_round_trip(l in -1_000_000_000_000i64..1_000_000_000_000i64) {
            let c = Consumption::from_litres(l);
            prop_assert_eq!(c.to_string().parse::<Consumption>().unwrap(), c);
            let json = serde_json::to_string(&c).unwrap();
            prop_assert_eq!(serde_json::from_str::<Consumption>(&json).unwrap(), c);
        }

        #[test]
        fn sums_are_exact(values in proptest::collection::vec(-10_000_000i64..10_000_000, 0..2000)) {
            let total: Consumption = values.iter().map(|&l| Consumption::from_litres(l)).sum();
            prop_assert_eq!(total.litres(), values.iter().sum::<i64>());
        }
    }
}
