use std::fs;
use std::path::Path;

use pmsfl::harness::{AttackConfig, RunConfig};
use serde_json::Value;

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs"))
}

#[test]
fn schema_defaults_match_run_config() {
    let schema: Value = serde_json::from_str(&fs::read_to_string(configs_dir().join("run_config.schema.json")).unwrap()).unwrap();
    let props = schema["properties"].as_object().unwrap();
    let defaults = serde_json::to_value(RunConfig::default()).unwrap();
    let defaults = defaults.as_object().unwrap();
    let mut a: Vec<_> = props.keys().collect();
    let mut b: Vec<_> = defaults.keys().collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    for (k, v) in defaults {
        assert_eq!(&props[k]["default"], v, "default of {k}");
    }
}

#[test]
fn shipped_configs_load() {
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.ends_with(".schema.json") {
            continue;
        }
        if name == "attack.json" {
            AttackConfig::load(&path).unwrap();
        } else {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
