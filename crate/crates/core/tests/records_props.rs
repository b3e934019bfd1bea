use proptest::prelude::*;
use serde_json::{json, Value};
use wattflow::records::{
    decode_active_power, decode_record, encode_record, ActivePowerRecord, AggregatedActivePowerRecord, Record,
    RecordError, SensorId,
};

fn sensor_id() -> impl Strategy<Value = SensorId> {
    "[A-Za-z0-9._/:-]{1,40}".prop_map(|s| SensorId::new(s).unwrap())
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e12..1e12f64, Just(0.0), Just(-0.0), Just(f64::MAX), Just(f64::MIN_POSITIVE)]
}

fn active() -> impl Strategy<Value = ActivePowerRecord> {
    (sensor_id(), 0..i64::MAX, finite()).prop_map(|(id, ts, v)| ActivePowerRecord::new(id, ts, v).unwrap())
}

fn aggregated() -> impl Strategy<Value = AggregatedActivePowerRecord> {
    (sensor_id(), 0..i64::MAX, prop::collection::vec(-1e9..1e9f64, 1..20))
        .prop_map(|(id, ts, vs)| AggregatedActivePowerRecord::from_values(id, ts, vs).unwrap())
}

fn record() -> impl Strategy<Value = Record> {
    prop_oneof![active().prop_map(Record::from), aggregated().prop_map(Record::from)]
}

proptest! {
    #[test]
    fn encoding_round_trips(r in record()) {
        let bytes = encode_record(&r).unwrap();
        let back = decode_record(&bytes).unwrap();
        // Bit-exact, including the sign of zero.
        prop_assert_eq!(back.power_in_w().to_bits(), r.power_in_w().to_bits());
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(encode_record(&back).unwrap(), bytes);
    }

    #[test]
    fn field_order_is_irrelevant(r in active()) {
        let text = format!(
            r#"{{"valueInW":{},"timestamp":{},"identifier":{},"type":"active-power"}}"#,
            serde_json::to_string(&r.value_in_w).unwrap(),
            r.timestamp,
            serde_json::to_string(r.identifier.as_str()).unwrap()
        );
        prop_assert_eq!(decode_active_power(text.as_bytes()).unwrap(), r);
    }

    #[test]
    fn aggregate_fields_agree_with_values(vs in prop::collection::vec(-1e6..1e6f64, 1..50)) {
        let a = AggregatedActivePowerRecord::from_values(SensorId::new("g").unwrap(), 1, vs.clone()).unwrap();
        let sum: f64 = vs.iter().sum();
        prop_assert_eq!(a.count, vs.len() as u64);
        prop_assert!((a.sum_in_w - sum).abs() <= 1e-9 * sum.abs().max(1.0));
        prop_assert!(a.min_in_w <= a.average_in_w + 1e-9 && a.average_in_w <= a.max_in_w + 1e-9);
        prop_assert!(vs.contains(&a.min_in_w) && vs.contains(&a.max_in_w));
    }

    #[test]
    fn ids_with_whitespace_are_rejected(prefix in "[a-z]{0,5}", ws in "[ \t\n]", suffix in "[a-z]{0,5}") {
        let id = format!("{prefix}{ws}{suffix}");
        prop_assert!(SensorId::new(id).is_err());
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_record(&bytes);
    }
}

fn decode_value(v: Value) -> Result<Record, RecordError> {
    decode_record(v.to_string().as_bytes())
}

#[test]
fn malformed_inputs_name_the_field() {
    let base = json!({"type": "active-power", "identifier": "s", "timestamp": 1, "valueInW": 1.0});
    let cases: Vec<(Value, &str)> = vec![
        (json!({"type": "active-power", "timestamp": 1, "valueInW": 1.0}), "identifier"),
        (json!({"type": "active-power", "identifier": "s", "valueInW": 1.0}), "timestamp"),
        (json!({"type": "active-power", "identifier": "s", "timestamp": 1}), "valueInW"),
        (json!({"type": "active-power", "identifier": "s", "timestamp": -1, "valueInW": 1.0}), "timestamp"),
        (json!({"type": "active-power", "identifier": "s", "timestamp": 1.5, "valueInW": 1.0}), "timestamp"),
        (json!({"type": "active-power", "identifier": "s", "timestamp": 1, "valueInW": "1"}), "valueInW"),
        (json!({"type": "active-power", "identifier": "", "timestamp": 1, "valueInW": 1.0}), "identifier"),
        (json!({"type": "bogus", "identifier": "s", "timestamp": 1, "valueInW": 1.0}), "type"),
        (json!({"identifier": "s", "timestamp": 1, "valueInW": 1.0}), "type"),
    ];
    assert!(decode_value(base).is_ok());
    for (v, field) in cases {
        let err = decode_value(v.clone()).unwrap_err();
        assert_eq!(err.field(), Some(field), "{v} gave {err}");
    }
    assert!(decode_record(b"").is_err());
    assert!(decode_record(b"[1]").is_err());
    assert!(decode_record(b"{\"type\":").is_err());
}

#[test]
fn aggregate_invariants_are_checked_on_decode() {
    let ok = json!({"type": "aggregated-active-power", "identifier": "g", "timestamp": 5, "count": 2,
        "sumInW": 3.0, "averageInW": 1.5, "minInW": 1.0, "maxInW": 2.0});
    assert!(matches!(decode_value(ok.clone()).unwrap(), Record::Aggregated(_)));
    let mut zero = ok.clone();
    zero["count"] = json!(0);
    assert_eq!(decode_value(zero).unwrap_err().field(), Some("count"));
    let mut inverted = ok;
    inverted["minInW"] = json!(9.0);
    assert_eq!(decode_value(inverted).unwrap_err().field(), Some("minInW"));
}
