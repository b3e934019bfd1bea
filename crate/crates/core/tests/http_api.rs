mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{wait_drained, Server};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use wattflow::node::{Node, NodeConfig};

fn node() -> Arc<Node> {
    Arc::new(
        Node::start(NodeConfig {
            partitions: 4,
            workers: vec!["w0".into(), "w1".into()],
            ..NodeConfig::default()
        })
        .unwrap(),
    )
}

fn hierarchy() -> Value {
    json!({"root": {"identifier": "root", "children": [
        {"identifier": "rack-a", "children": [{"identifier": "m1"}, {"identifier": "m2"}]},
        {"identifier": "m3"}
    ]}})
}

fn get(client: &Client, url: String) -> (StatusCode, Value) {
    let r = client.get(url).send().unwrap();
    let status = r.status();
    (status, r.json().unwrap_or(Value::Null))
}

#[test]
fn end_to_end_over_http() {
    let node = node();
    let server = Server::start(node.router());
    let client = Client::new();

    let r = client.put(server.url("/api/hierarchy")).json(&hierarchy()).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let version = r.json::<Value>().unwrap()["version"].as_u64().unwrap();
    let (status, h) = get(&client, server.url("/api/hierarchy"));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(h["version"], version);
    assert_eq!(h["root"]["children"][0]["identifier"], "rack-a");

    let ingest = |batch: &[(&str, i64, f64)]| {
        let records: Vec<Value> = batch
            .iter()
            .map(|(id, ts, v)| json!({"type": "active-power", "identifier": id, "timestamp": ts, "valueInW": v}))
            .collect();
        let r = client.post(server.url("/ingest/records")).json(&records).send().unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        assert_eq!(r.json::<Value>().unwrap()["published"], batch.len());
        assert!(wait_drained(node.broker(), Duration::from_secs(20)));
    };
    ingest(&[("m1", 1000, 100.0), ("m2", 1000, 50.0), ("m3", 1000, 25.0)]);
    ingest(&[("m1", 2000, 300.0)]);

    let (_, latest) = get(&client, server.url("/api/power/root/latest"));
    assert_eq!(latest["type"], "aggregated-active-power");
    assert_eq!(latest["timestamp"], 2000);
    assert_eq!(latest["count"], 3);
    assert_eq!(latest["sumInW"], 375.0);

    let (_, range) = get(&client, server.url("/api/power/m1?from=0&to=5000"));
    assert_eq!(range.as_array().unwrap().len(), 2);
    assert_eq!(range[1]["valueInW"], 300.0);

    let (_, stats) = get(&client, server.url("/api/power/m1/stats?from=0&to=1500"));
    assert_eq!(stats, json!({"count": 1, "sumInW": 100.0, "averageInW": 100.0, "minInW": 100.0, "maxInW": 100.0}));

    let (_, trend) = get(&client, server.url("/api/power/m1/trend?windowMs=1000&now=2500"));
    assert_eq!(trend["ratio"], 3.0);

    let (_, hist) = get(&client, server.url("/api/power/m1/histogram?bins=2"));
    assert_eq!(hist, json!([
        {"bucketLower": 100.0, "bucketUpper": 200.0, "count": 1},
        {"bucketLower": 200.0, "bucketUpper": 300.0, "count": 1}
    ]));

    let (status, dist) = get(&client, server.url("/api/power/rack-a/distribution?at=1500"));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dist, json!([
        {"identifier": "m1", "valueInW": 100.0, "share": 100.0 / 150.0},
        {"identifier": "m2", "valueInW": 50.0, "share": 50.0 / 150.0}
    ]));

    let metrics = client.get(server.url("/metrics")).send().unwrap().text().unwrap();
    assert!(metrics.lines().any(|l| l == "processed_records_total 4"), "{metrics}");
    assert_eq!(client.get(server.url("/healthz")).send().unwrap().status(), StatusCode::OK);

    drop(server);
    node.shutdown().unwrap();
}

#[test]
fn errors_have_proper_status_codes() {
    let node = node();
    let server = Server::start(node.router());
    let client = Client::new();
    let put = |body: &str| {
        client
            .put(server.url("/api/hierarchy"))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .unwrap()
    };

    assert_eq!(put("{not json").status(), StatusCode::BAD_REQUEST);
    let r = put(r#"{"nodes":[{"identifier":"a"},{"identifier":"b"}]}"#);
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = r.json().unwrap();
    assert_eq!(body["violations"][0]["violation"], "multiple-roots");

    assert_eq!(get(&client, server.url("/api/power/x/stats?from=9&to=1")).0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&client, server.url("/api/power/x/histogram?bins=0")).0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&client, server.url("/api/power/x/trend?windowMs=0")).0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&client, server.url("/api/power/ghost/distribution")).0, StatusCode::NOT_FOUND);
    let (status, body) = get(&client, server.url("/api/power/ghost/latest"));
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    // An unknown sensor simply has no history.
    assert_eq!(get(&client, server.url("/api/power/ghost")).1, json!([]));

    let bad_batch = r#"[{"type":"active-power","identifier":"m","timestamp":1,"valueInW":1.0},{"type":"active-power"}]"#;
    let r = client.post(server.url("/ingest/records")).body(bad_batch).send().unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(node.broker().end_offsets("records").unwrap().iter().sum::<u64>(), 0, "all or nothing");

    let ndjson = "{\"type\":\"active-power\",\"identifier\":\"m\",\"timestamp\":1,\"valueInW\":1.0}\n{\"type\":\"active-power\",\"identifier\":\"n\",\"timestamp\":1,\"valueInW\":2.0}\n";
    assert_eq!(client.post(server.url("/ingest/records")).body(ndjson).send().unwrap().status(), StatusCode::OK);
    assert_eq!(node.broker().end_offsets("records").unwrap().iter().sum::<u64>(), 2);

    let pdu = json!({"pduId": "p1", "outlets": [{"outletId": "o1", "samples": [
        {"timestamp": 5, "metric": "active-power", "value": 12.0},
        {"timestamp": 5, "metric": "voltage", "value": 230.0}
    ]}]});
    let r = client.post(server.url("/ingest/pdu")).json(&pdu).send().unwrap();
    assert_eq!(r.json::<Value>().unwrap(), json!({"published": 1}));
    assert_eq!(client.post(server.url("/ingest/pdu")).body("{").send().unwrap().status(), StatusCode::BAD_REQUEST);

    drop(server);
    node.shutdown().unwrap();
}
