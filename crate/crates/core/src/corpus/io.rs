use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use super::TaskExample;
use crate::error::{Error, Result};

const REQUIRED_FIELDS: [&str; 5] = ["task", "text_a", "text_b", "label", "language"];

/// Reads line-delimited JSON records. Blank lines are ignored; any other
/// malformed line fails the whole load with its 1-based line number.
pub fn load_examples(path: &Path) -> Result<Vec<TaskExample>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            line: line_no,
            message,
        };
        let mut value: Value =
            serde_json::from_str(line).map_err(|e| schema(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| schema("record is not an object".into()))?;
        for field in REQUIRED_FIELDS {
            if !obj.contains_key(field) {
                return Err(schema(format!("missing required field \"{field}\"")));
            }
        }
        obj.entry("id")
            .or_insert_with(|| Value::String(format!("line{line_no}")));
        let ex: TaskExample = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
        ex.validate().map_err(|e| schema(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_examples(path: &Path, examples: &[TaskExample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex).expect("examples always serialise");
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}
