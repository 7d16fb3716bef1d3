//! Keeps the shipped JSON schema documents honest: every artifact the
//! pipeline emits must validate against its schema in `schemas/`.
//!
//! The checker implements exactly the JSON Schema subset those documents
//! use (types, const/enum, required/properties/additionalProperties,
//! items, bounds, oneOf, propertyNames, local $ref) and fails loudly on
//! anything it does not understand, so extending a schema forces a
//! matching extension here.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn load_json(path: &Path) -> Value {
    let text =
        std::fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn check(schema_name: &str, instance: &Value) {
    let schema = load_json(&schema_dir().join(schema_name));
    let mut errors = Vec::new();
    validate(&schema, &schema, instance, "$", &mut errors);
    assert!(
        errors.is_empty(),
        "{schema_name} violations:\n{}",
        errors.join("\n")
    );
}

fn resolve<'a>(root: &'a Value, reference: &str) -> &'a Value {
    let path = reference
        .strip_prefix("#/")
        .unwrap_or_else(|| panic!("unsupported $ref {reference}"));
    let mut node = root;
    for part in path.split('/') {
        node = node
            .get(part)
            .unwrap_or_else(|| panic!("$ref {reference} not found"));
    }
    node
}

fn type_matches(expected: &str, v: &Value) -> bool {
    match expected {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "integer" => v.is_i64() || v.is_u64(),
        "number" => v.is_number(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        other => panic!("unsupported type keyword {other}"),
    }
}

fn validate(root: &Value, schema: &Value, v: &Value, at: &str, errors: &mut Vec<String>) {
    let obj = schema.as_object().expect("schema node must be an object");

    if let Some(r) = obj.get("$ref").and_then(Value::as_str) {
        return validate(root, resolve(root, r), v, at, errors);
    }
    if let Some(variants) = obj.get("oneOf").and_then(Value::as_array) {
        let hits = variants
            .iter()
            .filter(|alt| {
                let mut sub = Vec::new();
                validate(root, alt, v, at, &mut sub);
                sub.is_empty()
            })
            .count();
        if hits != 1 {
            errors.push(format!(
                "{at}: matched {hits} oneOf variants, expected exactly 1"
            ));
        }
        return;
    }
    if let Some(c) = obj.get("const") {
        if v != c {
            errors.push(format!("{at}: expected const {c}, got {v}"));
        }
        return;
    }
    if let Some(allowed) = obj.get("enum").and_then(Value::as_array) {
        if !allowed.contains(v) {
            errors.push(format!("{at}: {v} not in enum {allowed:?}"));
        }
        return;
    }

    match obj.get("type") {
        Some(Value::String(t)) => {
            if !type_matches(t, v) {
                errors.push(format!("{at}: expected {t}, got {v}"));
                return;
            }
        }
        Some(Value::Array(ts)) => {
            if !ts
                .iter()
                .any(|t| type_matches(t.as_str().expect("type name"), v))
            {
                errors.push(format!("{at}: expected one of {ts:?}, got {v}"));
                return;
            }
        }
        Some(other) => panic!("unsupported type form {other}"),
        None => {}
    }

    if let Some(n) = v.as_f64() {
        for key in ["minimum", "exclusiveMinimum", "maximum", "exclusiveMaximum"] {
            if let Some(bound) = obj.get(key).and_then(Value::as_f64) {
                let ok = match key {
                    "minimum" => n >= bound,
                    "exclusiveMinimum" => n > bound,
                    "maximum" => n <= bound,
                    _ => n < bound,
                };
                if !ok {
                    errors.push(format!("{at}: {n} violates {key} {bound}"));
                }
            }
        }
    }

    if let Some(map) = v.as_object() {
        if let Some(required) = obj.get("required").and_then(Value::as_array) {
            for r in required {
                let name = r.as_str().unwrap();
                if !map.contains_key(name) {
                    errors.push(format!("{at}: missing required field {name}"));
                }
            }
        }
        let props = obj.get("properties").and_then(Value::as_object);
        let additional = obj.get("additionalProperties");
        if let Some(names) = obj.get("propertyNames") {
            let pattern = names
                .get("pattern")
                .and_then(Value::as_str)
                .expect("propertyNames.pattern");
            assert_eq!(
                pattern, "^(0|[1-9][0-9]*)$",
                "extend the checker for new patterns"
            );
            for key in map.keys() {
                let numeric = !key.is_empty()
                    && key.chars().all(|c| c.is_ascii_digit())
                    && (key == "0" || !key.starts_with('0'));
                if !numeric {
                    errors.push(format!("{at}: key {key} does not match {pattern}"));
                }
            }
        }
        for (key, val) in map {
            let sub = props.and_then(|p| p.get(key));
            match (sub, additional) {
                (Some(s), _) => validate(root, s, val, &format!("{at}.{key}"), errors),
                (None, Some(Value::Bool(false))) => {
                    errors.push(format!("{at}: unexpected field {key}"));
                }
                (None, Some(s)) if s.is_object() => {
                    validate(root, s, val, &format!("{at}.{key}"), errors)
                }
                (None, _) => {}
            }
        }
    }

    if let Some(items) = v.as_array() {
        if let Some(min) = obj.get("minItems").and_then(Value::as_u64) {
            if (items.len() as u64) < min {
                errors.push(format!("{at}: {} items, minItems {min}", items.len()));
            }
        }
        if let Some(max) = obj.get("maxItems").and_then(Value::as_u64) {
            if (items.len() as u64) > max {
                errors.push(format!("{at}: {} items, maxItems {max}", items.len()));
            }
        }
        match obj.get("items") {
            Some(Value::Array(tuple)) => {
                for (i, item) in items.iter().enumerate() {
                    let s = tuple
                        .get(i)
                        .unwrap_or_else(|| panic!("{at}: tuple schema too short for item {i}"));
                    validate(root, s, item, &format!("{at}[{i}]"), errors);
                }
            }
            Some(s) if s.is_object() => {
                for (i, item) in items.iter().enumerate() {
                    validate(root, s, item, &format!("{at}[{i}]"), errors);
                }
            }
            _ => {}
        }
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_storysumm"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().expect("spawn storysumm");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Drive the whole pipeline once and validate every emitted JSON artifact
/// against its shipped schema.
#[test]
fn emitted_artifacts_match_shipped_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let synth_cfg = dir.path().join("synth.json");
    std::fs::write(
        &synth_cfg,
        r#"{ "seed": 5, "num_shots": 24, "num_utterances": 10,
             "planted_segments": 2, "segment_width": [1, 1], "noise_sigma": 0.0 }"#,
    )
    .unwrap();
    let data = dir.path().join("data");
    run_ok(&[
        "synth",
        "--config",
        synth_cfg.to_str().unwrap(),
        "--out-dir",
        data.to_str().unwrap(),
    ]);

    let episode = data.join("episode/manifest.json");
    check("manifest.schema.json", &load_json(&episode));
    check(
        "manifest.schema.json",
        &load_json(&data.join("recap/manifest.json")),
    );
    check(
        "labels.schema.json",
        &load_json(&data.join("episode/labels.json")),
    );

    let matches = dir.path().join("matches.json");
    run_ok(&[
        "match",
        "--episode",
        episode.to_str().unwrap(),
        "--recap",
        data.join("recap/manifest.json").to_str().unwrap(),
        "--out",
        matches.to_str().unwrap(),
    ]);
    check("matches.schema.json", &load_json(&matches));

    let labels = dir.path().join("labels.json");
    run_ok(&[
        "smooth",
        "--matches",
        matches.to_str().unwrap(),
        "--episode",
        episode.to_str().unwrap(),
        "--out",
        labels.to_str().unwrap(),
    ]);
    check("labels.schema.json", &load_json(&labels));

    let report = dir.path().join("report.json");
    run_ok(&[
        "eval",
        "--scores",
        labels.to_str().unwrap(),
        "--labels",
        data.join("episode/labels.json").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    check("eval_report.schema.json", &load_json(&report));

    let agreement = dir.path().join("agreement.json");
    run_ok(&[
        "consistency",
        "--labels",
        labels.to_str().unwrap(),
        data.join("episode/labels.json").to_str().unwrap(),
        "--no-timestamp",
        "--out",
        agreement.to_str().unwrap(),
    ]);
    check("agreement_report.schema.json", &load_json(&agreement));

    let train_list = dir.path().join("train.txt");
    std::fs::write(&train_list, "data/episode/manifest.json\n").unwrap();
    let ckpt = dir.path().join("ckpt");
    run_ok(&[
        "train",
        "--train-list",
        train_list.to_str().unwrap(),
        "--model-config",
        data.join("model_config.json").to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    check(
        "checkpoint_index.schema.json",
        &load_json(&ckpt.join("index.json")),
    );

    let scores = dir.path().join("scores.json");
    run_ok(&[
        "predict",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--episode",
        episode.to_str().unwrap(),
        "--out",
        scores.to_str().unwrap(),
    ]);
    check("scores.schema.json", &load_json(&scores));

    let summary = dir.path().join("summary.json");
    run_ok(&[
        "select",
        "--scores",
        scores.to_str().unwrap(),
        "--episode",
        episode.to_str().unwrap(),
        "--budget",
        "0.2",
        "--out",
        summary.to_str().unwrap(),
    ]);
    check("summary.schema.json", &load_json(&summary));
}

/// The split-spec format is an input, not an output; validate the
/// documented example shape.
#[test]
fn split_spec_example_matches_schema() {
    let spec = serde_json::json!({
        "style": "intra",
        "splits": {
            "fold-0": {
                "train": ["ep0", "ep1", "ep2"],
                "val": ["ep3"],
                "test": ["ep4"]
            },
            "fold-1": {
                "train": ["ep3", "ep4"],
                "val": [],
                "test": ["ep0"]
            }
        }
    });
    check("splits.schema.json", &spec);

    // And the checker itself rejects violations.
    let bad = serde_json::json!({ "style": "sideways", "splits": {} });
    let schema = load_json(&schema_dir().join("splits.schema.json"));
    let mut errors = Vec::new();
    validate(&schema, &schema, &bad, "$", &mut errors);
    assert!(!errors.is_empty());
}
