//! Line-delimited JSON events on stderr.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};

use serde_json::{Map, Value};

static QUIET: AtomicBool = AtomicBool::new(false);

pub fn set_quiet(quiet: bool) {
    QUIET.store(quiet, Ordering::Relaxed);
}

/// Emits `{"event": name, ...fields}`; `fields` should be a JSON object.
pub fn event(name: &str, fields: Value) {
    if QUIET.load(Ordering::Relaxed) {
        return;
    }
    let mut obj = Map::new();
    obj.insert("event".into(), Value::from(name));
    if let Value::Object(m) = fields {
        obj.extend(m);
    }
    let line = Value::Object(obj).to_string();
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}
