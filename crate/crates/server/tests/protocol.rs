mod common;

use common::{assert_valid_line, schema, validate};
use multigail_server::protocol::{parse_server, ErrorCode, SCHEMA};
use multigail_server::{ClientMessage, ServerMessage, PROTOCOL_VERSION};
use serde_json::json;

#[test]
fn schema_parses_and_is_versioned() {
    let s = schema();
    assert_eq!(s["version"], json!(PROTOCOL_VERSION));
    assert_eq!(
        s["$defs"]["server"]["hello"]["properties"]["protocol"]["const"],
        json!(PROTOCOL_VERSION)
    );
    assert!(SCHEMA.contains("\"set_alpha\""));
}

#[test]
fn client_messages_round_trip_and_validate() {
    for m in [ClientMessage::SetAlpha { values: vec![1.0, 0.0] }, ClientMessage::Reset] {
        let line = m.to_line();
        assert!(line.ends_with('\n') && !line.trim_end().contains('\n'));
        assert_valid_line(&line);
        assert_eq!(ClientMessage::parse(&line).unwrap(), m);
    }
    assert!(ClientMessage::parse(r#"{"type":"set_alpha"}"#).is_err());
    assert!(ClientMessage::parse(r#"{"type":"launch"}"#).is_err());
    assert!(ClientMessage::parse(r#"{"type":"set_alpha","values":[1],"x":2}"#).is_err());
}

#[test]
fn schema_rejects_malformed_messages() {
    let root = schema();
    for bad in [
        json!({"type": "set_alpha", "values": [1.5]}),
        json!({"type": "ack", "values": [1.0]}),
        json!({"type": "error", "code": "oops", "msg": "x"}),
        json!({"type": "reset", "now": true}),
    ] {
        assert!(validate(&root, &root, &bad, "$").is_err(), "{bad}");
    }
}

#[test]
fn error_and_ack_lines_validate() {
    for m in [
        ServerMessage::error(ErrorCode::AlphaRange, "alpha[0] = 1.5 outside [0, 1]"),
        ServerMessage::Ack {
            values: vec![0.5, 0.5],
            effective_tick: 3,
        },
    ] {
        let line = m.to_line();
        assert_valid_line(&line);
        assert_eq!(parse_server(&line).unwrap(), m);
    }
}
