use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

const SEPARATOR: char = '|';

/// Reconstructed identity of one meter: account, meter and recording device.
///
/// Fields are trimmed and lower-cased on construction. The text form joins the
/// three fields with `|`, which is therefore not allowed inside a field.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CompositeKey {
    account_id: String,
    meter_id: String,
    device_id: String,
}

pub fn normalize_field(raw: &str) -> String {
    raw.trim().to_lowercase()
}

impl CompositeKey {
    pub fn new(account_id: &str, meter_id: &str, device_id: &str) -> Result<Self, ModelError> {
        let fields = [account_id, meter_id, device_id].map(normalize_field);
        for f in &fields {
            if f.is_empty() {
                return Err(ModelError::BadKey(format!("{account_id}|{meter_id}|{device_id}")));
            }
            if f.contains(SEPARATOR) {
                return Err(ModelError::BadKey(f.clone()));
            }
        }
        let [account_id, meter_id, device_id] = fields;
        Ok(CompositeKey { account_id, meter_id, device_id })
    }

    pub fn account_id(&self) -> &str {
        &self.account_id
    }

    pub fn meter_id(&self) -> &str {
        &self.meter_id
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn fields(&self) -> [&str; 3] {
        [&self.account_id, &self.meter_id, &self.device_id]
    }
}

impl fmt::Display for CompositeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{SEPARATOR}{}{SEPARATOR}{}", self.account_id, self.meter_id, self.device_id)
    }
}

impl FromStr for CompositeKey {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(SEPARATOR).collect();
        match parts.as_slice() {
            [a, m, d] => CompositeKey::new(a, m, d),
            _ => Err(ModelError::BadKey(s.to_string())),
        }
    }
}

impl Serialize for CompositeKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CompositeKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
