// SPDX-License-Identifier: MIT OR Apache-2.0

//! Canonical JSON: object keys sorted, no insignificant whitespace beyond a
//! trailing newline, floats printed as `{:.9e}` (10 significant digits).
//! Integers stay integers. Every report carries `schema_version`.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;

/// Formats one float. Non-finite values are rejected upstream.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        // Collapse -0.0 so equal values print equally.
        return "0.000000000e0".to_string();
    }
    format!("{x:.9e}")
}

fn write_value(out: &mut String, v: &Value) -> Result<()> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                write!(out, "{u}").expect("string write");
            } else if let Some(i) = n.as_i64() {
                write!(out, "{i}").expect("string write");
            } else {
                let f = n
                    .as_f64()
                    .ok_or_else(|| Error::Format("unrepresentable number".into()))?;
                if !f.is_finite() {
                    return Err(Error::Format("non-finite float in report".into()));
                }
                out.push_str(&format_float(f));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(xs) => {
            out.push('[');
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, x)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json's default map is ordered by key.
            out.push('{');
            for (i, (k, x)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k)?);
                out.push(':');
                write_value(out, x)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

/// Canonical text of any serializable value (no schema field added).
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v)?;
    Ok(out)
}

/// Canonical text with `schema_version` merged into a top-level object.
pub fn report_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        Value::Object(map) => {
            map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
        }
        other => {
            let inner = std::mem::take(other);
            let mut map = serde_json::Map::new();
            map.insert("data".into(), inner);
            map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
            *other = Value::Object(map);
        }
    }
    let mut out = String::new();
    write_value(&mut out, &v)?;
    out.push('\n');
    Ok(out)
}

/// Writes a canonical, schema-versioned report.
pub fn write_report<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, report_string(value)?)?;
    Ok(())
}

/// Re-canonicalises an existing JSON document.
pub fn recanonicalize(text: &str) -> Result<String> {
    let v: Value = serde_json::from_str(text)?;
    let mut out = String::new();
    write_value(&mut out, &v)?;
    out.push('\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_sorted_and_floats_fixed() {
        let mut m = HashMap::new();
        m.insert("b", 1.5f64);
        m.insert("a", -0.000123456789012f64);
        let s = to_string(&m).unwrap();
        assert_eq!(s, r#"{"a":-1.234567890e-4,"b":1.500000000e0}"#);
    }

    #[test]
    fn write_read_rewrite_is_stable() {
        #[derive(Serialize)]
        struct R {
            x: Vec<f64>,
            n: u32,
            name: &'static str,
        }
        let r = R {
            x: vec![std::f64::consts::PI, 1e-300, -2.5e17, 0.0, -0.0],
            n: 7,
            name: "t\"q",
        };
        let s1 = report_string(&r).unwrap();
        let s2 = recanonicalize(&s1).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.contains("\"schema_version\":1"));
    }

    #[test]
    fn same_bits_same_text() {
        let x = f64::from_bits(0x3FF0_0000_0000_0001);
        assert_eq!(format_float(x), format_float(f64::from_bits(x.to_bits())));
        assert_eq!(format_float(1.0), "1.000000000e0");
        assert_eq!(format_float(-0.0), format_float(0.0));
    }

    #[test]
    fn non_finite_rejected() {
        // serde_json maps NaN to null before we see it; never to a bare token.
        let s = to_string(&vec![f64::NAN]);
        assert!(s.map(|t| !t.contains("NaN")).unwrap_or(true));
    }
}
