//! JSON Lines cycle trace.
//!
//! Every record starts with `sys_cycle`, `phy_cycle`, `module` and `kind`, in
//! that order, followed by kind-specific fields in a fixed order. The bridge
//! writes exactly one `ISSUE`, `HOLD`, `IDLE` or `DROP` record per subsystem
//! cycle, which is what [`crate::sim::RunReport::from_trace`] counts.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub sys_cycle: u64,
    pub phy_cycle: u64,
    pub module: String,
    pub kind: String,
    pub fields: Vec<(String, Value)>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

impl TraceRecord {
    pub fn new(sys_cycle: u64, phy_cycle: u64, module: &str, kind: &str) -> Self {
        Self { sys_cycle, phy_cycle, module: module.into(), kind: kind.into(), fields: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.fields.push((key.into(), value.into()));
        self
    }

    pub fn field(&self, key: &str) -> Option<&Value> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn u64_field(&self, key: &str) -> Option<u64> {
        self.field(key).and_then(Value::as_u64)
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.field(key).and_then(Value::as_str)
    }

    pub fn bool_field(&self, key: &str) -> Option<bool> {
        self.field(key).and_then(Value::as_bool)
    }

    pub fn to_json_line(&self) -> String {
        let mut s = format!(
            "{{\"sys_cycle\":{},\"phy_cycle\":{},\"module\":{},\"kind\":{}",
            self.sys_cycle,
            self.phy_cycle,
            Value::from(self.module.as_str()),
            Value::from(self.kind.as_str())
        );
        for (k, v) in &self.fields {
            s.push(',');
            s.push_str(&Value::from(k.as_str()).to_string());
            s.push(':');
            s.push_str(&v.to_string());
        }
        s.push('}');
        s
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self, TraceError> {
        let err = |msg: &str| TraceError::Malformed { line: line_no, msg: msg.to_string() };
        let value: Value = serde_json::from_str(line).map_err(|e| err(&e.to_string()))?;
        let Value::Object(map) = value else { return Err(err("record is not an object")) };
        let sys_cycle = map.get("sys_cycle").and_then(Value::as_u64).ok_or_else(|| err("missing sys_cycle"))?;
        let phy_cycle = map.get("phy_cycle").and_then(Value::as_u64).ok_or_else(|| err("missing phy_cycle"))?;
        let module = map.get("module").and_then(Value::as_str).ok_or_else(|| err("missing module"))?.to_string();
        let kind = map.get("kind").and_then(Value::as_str).ok_or_else(|| err("missing kind"))?.to_string();
        let fields = map
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "sys_cycle" | "phy_cycle" | "module" | "kind"))
            .collect();
        Ok(Self { sys_cycle, phy_cycle, module, kind, fields })
    }
}

/// Parses a whole JSONL trace, skipping blank lines.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| TraceRecord::parse(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leading_keys_are_fixed() {
        let r = TraceRecord::new(3, 6, "bridge", "ISSUE").with("slot", 4u64).with("word", "0x10");
        let line = r.to_json_line();
        assert_eq!(line, r#"{"sys_cycle":3,"phy_cycle":6,"module":"bridge","kind":"ISSUE","slot":4,"word":"0x10"}"#);
        let back = TraceRecord::parse(&line, 1).unwrap();
        assert_eq!(back.u64_field("slot"), Some(4));
        assert_eq!(back.kind, "ISSUE");
    }

    #[test]
    fn malformed_lines_report_position() {
        let err = parse_trace("{\"sys_cycle\":0,\"phy_cycle\":0,\"module\":\"x\",\"kind\":\"Y\"}\n\nnot json").unwrap_err();
        assert!(err.to_string().starts_with("trace line 3"));
    }
}
