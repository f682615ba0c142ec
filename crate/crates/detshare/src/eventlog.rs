//! Event logs as JSON Lines: one object per engine event with its time
//! `t` (exact decimal string), sequence number `seq`, `kind`, and the
//! event's own fields.

use std::io::Write;

use detshare_core::report::{LogEntry, LogValue};
use serde_json::{Map, Value};

use crate::decimal::exact;

fn value(v: &LogValue) -> Value {
    match v {
        LogValue::Int(i) => Value::from(*i),
        LogValue::Text(s) => Value::from(s.as_str()),
        LogValue::Time(q) => Value::from(exact(q)),
        LogValue::Bool(b) => Value::from(*b),
        LogValue::List(xs) => Value::Array(xs.iter().map(value).collect()),
    }
}

pub fn entry_json(e: &LogEntry) -> Value {
    let mut m = Map::new();
    m.insert("t".into(), Value::from(exact(&e.time)));
    m.insert("seq".into(), Value::from(e.seq));
    m.insert("kind".into(), Value::from(e.kind));
    for (k, v) in &e.fields {
        m.insert((*k).into(), value(v));
    }
    Value::Object(m)
}

pub fn write_event_log(entries: &[LogEntry], mut out: impl Write) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, &entry_json(e))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
