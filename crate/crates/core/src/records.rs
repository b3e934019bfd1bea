//! Measurement records and their canonical JSON wire encoding.
//!
//! Every record travels as a single JSON object carrying a `"type"`
//! discriminator:
//!
//! ```text
//! {"type":"active-power","identifier":"s1","timestamp":1234,"valueInW":12.5}
//! {"type":"aggregated-active-power","identifier":"g","timestamp":1234,"count":3,
//!  "sumInW":30.0,"averageInW":10.0,"minInW":5.0,"maxInW":15.0}
//! ```
//!
//! Floats are written in their shortest round-trip decimal form, so
//! `decode(encode(r)) == r` holds bit for bit.

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const ACTIVE_POWER_TYPE: &str = "active-power";
pub const AGGREGATED_ACTIVE_POWER_TYPE: &str = "aggregated-active-power";

const MAX_SENSOR_ID_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidSensorId {
    #[error("sensor identifier is empty")]
    Empty,
    #[error("sensor identifier exceeds {MAX_SENSOR_ID_LEN} characters")]
    TooLong,
    #[error("sensor identifier {0:?} contains whitespace")]
    Whitespace(String),
}

/// Identifier of a machine sensor or an aggregated sensor group.
///
/// Non-empty, at most 128 characters, no whitespace. Used verbatim as the
/// message key in the log.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SensorId(String);

impl SensorId {
    pub fn new(id: impl Into<String>) -> Result<Self, InvalidSensorId> {
        let id = id.into();
        if id.is_empty() {
            return Err(InvalidSensorId::Empty);
        }
        if id.chars().count() > MAX_SENSOR_ID_LEN {
            return Err(InvalidSensorId::TooLong);
        }
        if id.chars().any(char::is_whitespace) {
            return Err(InvalidSensorId::Whitespace(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl TryFrom<String> for SensorId {
    type Error = InvalidSensorId;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl TryFrom<&str> for SensorId {
    type Error = InvalidSensorId;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<SensorId> for String {
    fn from(id: SensorId) -> Self {
        id.0
    }
}

impl AsRef<str> for SensorId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Borrow<str> for SensorId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One measurement of a single sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivePowerRecord {
    pub identifier: SensorId,
    /// Milliseconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub value_in_w: f64,
}

impl ActivePowerRecord {
    pub fn new(identifier: SensorId, timestamp: i64, value_in_w: f64) -> Result<Self, RecordError> {
        let record = Self {
            identifier,
            timestamp,
            value_in_w,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        check_timestamp(self.timestamp)?;
        check_finite("valueInW", self.value_in_w)
    }

    /// Negative readings are legal (bidirectional meters) but not plausible
    /// for a pure consumer.
    pub fn is_plausible(&self) -> bool {
        self.value_in_w.is_finite() && self.value_in_w >= 0.0
    }
}

/// Statistics over the latest values of all leaves below a sensor group.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedActivePowerRecord {
    pub identifier: SensorId,
    /// Timestamp of the record that triggered this aggregate.
    pub timestamp: i64,
    pub count: u64,
    pub sum_in_w: f64,
    pub average_in_w: f64,
    pub min_in_w: f64,
    pub max_in_w: f64,
}

impl AggregatedActivePowerRecord {
    /// Builds the statistics over `values`. Returns `None` for an empty input.
    pub fn from_values<I>(identifier: SensorId, timestamp: i64, values: I) -> Option<Self>
    where
        I: IntoIterator<Item = f64>,
    {
        let mut count = 0u64;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            count += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        if count == 0 {
            return None;
        }
        Some(Self {
            identifier,
            timestamp,
            count,
            sum_in_w: sum,
            average_in_w: sum / count as f64,
            min_in_w: min,
            max_in_w: max,
        })
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        check_timestamp(self.timestamp)?;
        if self.count == 0 {
            return Err(RecordError::InvalidField {
                field: "count",
                reason: "must be at least 1".into(),
            });
        }
        check_finite("sumInW", self.sum_in_w)?;
        check_finite("averageInW", self.average_in_w)?;
        check_finite("minInW", self.min_in_w)?;
        check_finite("maxInW", self.max_in_w)?;
        if self.min_in_w > self.max_in_w {
            return Err(RecordError::InvalidField {
                field: "minInW",
                reason: "greater than maxInW".into(),
            });
        }
        Ok(())
    }
}

/// Either record kind, as carried on the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    ActivePower(ActivePowerRecord),
    Aggregated(AggregatedActivePowerRecord),
}

impl Record {
    pub fn identifier(&self) -> &SensorId {
        match self {
            Record::ActivePower(r) => &r.identifier,
            Record::Aggregated(r) => &r.identifier,
        }
    }

    pub fn timestamp(&self) -> i64 {
        match self {
            Record::ActivePower(r) => r.timestamp,
            Record::Aggregated(r) => r.timestamp,
        }
    }

    /// The consumption this record stands for: the measured value of a
    /// machine sensor or the summed value of a group.
    pub fn power_in_w(&self) -> f64 {
        match self {
            Record::ActivePower(r) => r.value_in_w,
            Record::Aggregated(r) => r.sum_in_w,
        }
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        match self {
            Record::ActivePower(r) => r.validate(),
            Record::Aggregated(r) => r.validate(),
        }
    }

    pub fn type_tag(&self) -> &'static str {
        match self {
            Record::ActivePower(_) => ACTIVE_POWER_TYPE,
            Record::Aggregated(_) => AGGREGATED_ACTIVE_POWER_TYPE,
        }
    }
}

impl From<ActivePowerRecord> for Record {
    fn from(r: ActivePowerRecord) -> Self {
        Record::ActivePower(r)
    }
}

impl From<AggregatedActivePowerRecord> for Record {
    fn from(r: AggregatedActivePowerRecord) -> Self {
        Record::Aggregated(r)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("record must be a JSON object")]
    NotAnObject,
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unknown record type {0:?}")]
    UnknownType(String),
}

impl RecordError {
    /// The wire field the error refers to, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            RecordError::MissingField(f) | RecordError::InvalidField { field: f, .. } => Some(f),
            RecordError::UnknownField(f) => Some(f),
            RecordError::UnknownType(_) => Some("type"),
            _ => None,
        }
    }
}

fn check_timestamp(ts: i64) -> Result<(), RecordError> {
    if ts < 0 {
        return Err(RecordError::InvalidField {
            field: "timestamp",
            reason: "must not be negative".into(),
        });
    }
    Ok(())
}

fn check_finite(field: &'static str, v: f64) -> Result<(), RecordError> {
    if !v.is_finite() {
        return Err(RecordError::InvalidField {
            field,
            reason: format!("{v} is not finite"),
        });
    }
    Ok(())
}

// Field order here is the canonical order on the wire.
#[derive(Serialize)]
#[serde(tag = "type")]
enum WireRef<'a> {
    #[serde(rename = "active-power")]
    ActivePower {
        identifier: &'a str,
        timestamp: i64,
        #[serde(rename = "valueInW")]
        value_in_w: f64,
    },
    #[serde(rename = "aggregated-active-power")]
    Aggregated {
        identifier: &'a str,
        timestamp: i64,
        count: u64,
        #[serde(rename = "sumInW")]
        sum_in_w: f64,
        #[serde(rename = "averageInW")]
        average_in_w: f64,
        #[serde(rename = "minInW")]
        min_in_w: f64,
        #[serde(rename = "maxInW")]
        max_in_w: f64,
    },
}

impl<'a> From<&'a Record> for WireRef<'a> {
    fn from(r: &'a Record) -> Self {
        match r {
            Record::ActivePower(r) => WireRef::ActivePower {
                identifier: r.identifier.as_str(),
                timestamp: r.timestamp,
                value_in_w: r.value_in_w,
            },
            Record::Aggregated(r) => WireRef::Aggregated {
                identifier: r.identifier.as_str(),
                timestamp: r.timestamp,
                count: r.count,
                sum_in_w: r.sum_in_w,
                average_in_w: r.average_in_w,
                min_in_w: r.min_in_w,
                max_in_w: r.max_in_w,
            },
        }
    }
}

impl Serialize for Record {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireRef::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Record {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        record_from_value(value).map_err(serde::de::Error::custom)
    }
}

impl Serialize for ActivePowerRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireRef::ActivePower {
            identifier: self.identifier.as_str(),
            timestamp: self.timestamp,
            value_in_w: self.value_in_w,
        }
        .serialize(serializer)
    }
}

impl Serialize for AggregatedActivePowerRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireRef::Aggregated {
            identifier: self.identifier.as_str(),
            timestamp: self.timestamp,
            count: self.count,
            sum_in_w: self.sum_in_w,
            average_in_w: self.average_in_w,
            min_in_w: self.min_in_w,
            max_in_w: self.max_in_w,
        }
        .serialize(serializer)
    }
}

/// Encodes a record into its canonical JSON bytes.
pub fn encode_record(record: &Record) -> Result<Vec<u8>, RecordError> {
    record.validate()?;
    serde_json::to_vec(&WireRef::from(record)).map_err(|e| RecordError::Syntax(e.to_string()))
}

pub fn encode_active_power(record: &ActivePowerRecord) -> Result<Vec<u8>, RecordError> {
    record.validate()?;
    serde_json::to_vec(record).map_err(|e| RecordError::Syntax(e.to_string()))
}

pub fn encode_aggregated(record: &AggregatedActivePowerRecord) -> Result<Vec<u8>, RecordError> {
    record.validate()?;
    serde_json::to_vec(record).map_err(|e| RecordError::Syntax(e.to_string()))
}

/// Decodes canonical JSON bytes into a record of either kind.
pub fn decode_record(bytes: &[u8]) -> Result<Record, RecordError> {
    if bytes.is_empty() {
        return Err(RecordError::Syntax("empty input".into()));
    }
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| RecordError::Syntax(e.to_string()))?;
    record_from_value(value)
}

/// Decodes bytes that must hold a plain measurement.
pub fn decode_active_power(bytes: &[u8]) -> Result<ActivePowerRecord, RecordError> {
    match decode_record(bytes)? {
        Record::ActivePower(r) => Ok(r),
        Record::Aggregated(_) => Err(RecordError::InvalidField {
            field: "type",
            reason: format!("expected {ACTIVE_POWER_TYPE:?}"),
        }),
    }
}

pub fn record_from_value(value: Value) -> Result<Record, RecordError> {
    let Value::Object(mut obj) = value else {
        return Err(RecordError::NotAnObject);
    };
    let tag = match obj.remove("type") {
        Some(Value::String(s)) => s,
        Some(_) => {
            return Err(RecordError::InvalidField {
                field: "type",
                reason: "must be a string".into(),
            })
        }
        None => return Err(RecordError::MissingField("type")),
    };
    let record = match tag.as_str() {
        ACTIVE_POWER_TYPE => {
            let r = ActivePowerRecord {
                identifier: take_id(&mut obj)?,
                timestamp: take_timestamp(&mut obj)?,
                value_in_w: take_f64(&mut obj, "valueInW")?,
            };
            reject_leftovers(&obj)?;
            Record::ActivePower(r)
        }
        AGGREGATED_ACTIVE_POWER_TYPE => {
            let r = AggregatedActivePowerRecord {
                identifier: take_id(&mut obj)?,
                timestamp: take_timestamp(&mut obj)?,
                count: take_u64(&mut obj, "count")?,
                sum_in_w: take_f64(&mut obj, "sumInW")?,
                average_in_w: take_f64(&mut obj, "averageInW")?,
                min_in_w: take_f64(&mut obj, "minInW")?,
                max_in_w: take_f64(&mut obj, "maxInW")?,
            };
            reject_leftovers(&obj)?;
            Record::Aggregated(r)
        }
        _ => return Err(RecordError::UnknownType(tag)),
    };
    record.validate()?;
    Ok(record)
}

fn take(obj: &mut Map<String, Value>, field: &'static str) -> Result<Value, RecordError> {
    obj.remove(field).ok_or(RecordError::MissingField(field))
}

fn take_id(obj: &mut Map<String, Value>) -> Result<SensorId, RecordError> {
    match take(obj, "identifier")? {
        Value::String(s) => SensorId::new(s).map_err(|e| RecordError::InvalidField {
            field: "identifier",
            reason: e.to_string(),
        }),
        _ => Err(RecordError::InvalidField {
            field: "identifier",
            reason: "must be a string".into(),
        }),
    }
}

fn take_timestamp(obj: &mut Map<String, Value>) -> Result<i64, RecordError> {
    match take(obj, "timestamp")? {
        Value::Number(n) if n.is_i64() || n.is_u64() => n.as_i64().ok_or(RecordError::InvalidField {
            field: "timestamp",
            reason: "out of range".into(),
        }),
        _ => Err(RecordError::InvalidField {
            field: "timestamp",
            reason: "must be an integer".into(),
        }),
    }
}

fn take_u64(obj: &mut Map<String, Value>, field: &'static str) -> Result<u64, RecordError> {
    match take(obj, field)? {
        Value::Number(n) => n.as_u64().ok_or(RecordError::InvalidField {
            field,
            reason: "must be a non-negative integer".into(),
        }),
        _ => Err(RecordError::InvalidField {
            field,
            reason: "must be a non-negative integer".into(),
        }),
    }
}

fn take_f64(obj: &mut Map<String, Value>, field: &'static str) -> Result<f64, RecordError> {
    match take(obj, field)? {
        Value::Number(n) => n.as_f64().ok_or(RecordError::InvalidField {
            field,
            reason: "not representable as a float".into(),
        }),
        _ => Err(RecordError::InvalidField {
            field,
            reason: "must be a number".into(),
        }),
    }
}

fn reject_leftovers(obj: &Map<String, Value>) -> Result<(), RecordError> {
    match obj.keys().next() {
        Some(k) => Err(RecordError::UnknownField(k.clone())),
        None => Ok(()),
    }
}
