#![allow(dead_code)]

use multigail::envs::{EnvConfig, EnvId};
use multigail::nn::NetworkConfig;
use multigail::policy::TrainedModel;
use multigail_server::protocol::SCHEMA;
use multigail_server::ServedModel;
use serde_json::Value;

pub fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        embedding_size: 8,
        attention_heads: 2,
        conv_filters: vec![4, 4],
        voxel_embedding_size: 2,
        head_hidden: 8,
        ..Default::default()
    }
}

pub fn model(env: EnvId) -> ServedModel {
    let cfg = EnvConfig::reference(env);
    let personas: Vec<String> = match env {
        EnvId::Driving => vec!["careful".into(), "reckless".into()],
        EnvId::Navigation => vec!["jump".into(), "zigzag".into(), "strafe".into()],
    };
    let m = TrainedModel::untrained(&cfg, &personas, tiny_net(), 5).unwrap();
    ServedModel::new(m, None).unwrap()
}

pub fn schema() -> Value {
    serde_json::from_str(SCHEMA).unwrap()
}

fn resolve<'a>(root: &'a Value, pointer: &str) -> &'a Value {
    root.pointer(pointer.trim_start_matches('#'))
        .unwrap_or_else(|| panic!("dangling $ref {pointer}"))
}

/// Checks `v` against the subset of JSON Schema the protocol file uses.
pub fn validate(root: &Value, schema: &Value, v: &Value, path: &str) -> Result<(), String> {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        return validate(root, resolve(root, r), v, path);
    }
    if let Some(alts) = schema.get("oneOf").and_then(Value::as_array) {
        let ok = alts.iter().filter(|s| validate(root, s, v, path).is_ok()).count();
        return if ok == 1 {
            Ok(())
        } else {
            Err(format!("{path}: matches {ok} alternatives"))
        };
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            return Err(format!("{path}: expected {c}, got {v}"));
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            return Err(format!("{path}: {v} not in {e:?}"));
        }
    }
    match schema.get("type").and_then(Value::as_str) {
        Some("object") => {
            let obj = v.as_object().ok_or(format!("{path}: not an object"))?;
            let props = schema.get("properties").and_then(Value::as_object);
            for req in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
                let k = req.as_str().unwrap();
                if !obj.contains_key(k) {
                    return Err(format!("{path}: missing `{k}`"));
                }
            }
            for (k, val) in obj {
                match props.and_then(|p| p.get(k)) {
                    Some(s) => validate(root, s, val, &format!("{path}.{k}"))?,
                    None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                        return Err(format!("{path}: unexpected `{k}`"))
                    }
                    None => {}
                }
            }
        }
        Some("array") => {
            let arr = v.as_array().ok_or(format!("{path}: not an array"))?;
            if let Some(n) = schema.get("minItems").and_then(Value::as_u64) {
                if (arr.len() as u64) < n {
                    return Err(format!("{path}: fewer than {n} items"));
                }
            }
            if let Some(n) = schema.get("maxItems").and_then(Value::as_u64) {
                if (arr.len() as u64) > n {
                    return Err(format!("{path}: more than {n} items"));
                }
            }
            if let Some(items) = schema.get("items") {
                for (i, x) in arr.iter().enumerate() {
                    validate(root, items, x, &format!("{path}[{i}]"))?;
                }
            }
        }
        Some("number") | Some("integer") => {
            let x = v.as_f64().ok_or(format!("{path}: not a number"))?;
            if schema["type"] == "integer" && !(v.is_u64() || v.is_i64()) {
                return Err(format!("{path}: not an integer"));
            }
            if let Some(m) = schema.get("minimum").and_then(Value::as_f64) {
                if x < m {
                    return Err(format!("{path}: {x} < {m}"));
                }
            }
            if let Some(m) = schema.get("maximum").and_then(Value::as_f64) {
                if x > m {
                    return Err(format!("{path}: {x} > {m}"));
                }
            }
            if let Some(m) = schema.get("exclusiveMinimum").and_then(Value::as_f64) {
                if x <= m {
                    return Err(format!("{path}: {x} <= {m}"));
                }
            }
        }
        Some("string") => {
            v.as_str().ok_or(format!("{path}: not a string"))?;
        }
        Some("boolean") => {
            v.as_bool().ok_or(format!("{path}: not a boolean"))?;
        }
        _ => {}
    }
    Ok(())
}

pub fn assert_valid_line(line: &str) {
    let root = schema();
    let v: Value = serde_json::from_str(line.trim()).unwrap();
    if let Err(e) = validate(&root, &root, &v, "$") {
        panic!("{e}\n{line}");
    }
}
