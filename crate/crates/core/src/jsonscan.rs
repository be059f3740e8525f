//! Locating JSON fragments inside free-form controller output.
//!
//! Controllers are asked for bare JSON but routinely wrap it in prose or
//! code fences. The scanners here walk the text left to right and return the
//! first balanced fragment that actually decodes.

use serde_json::Value;

/// Returns the end index (exclusive) of the balanced fragment opening at
/// `start`, honouring JSON string literals and escapes.
fn balanced_end(bytes: &[u8], start: usize, open: u8, close: u8) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            _ if b == open => depth += 1,
            _ if b == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Iterates over every balanced `open … close` span in `text`, in order of
/// their opening position.
fn balanced_spans(text: &str, open: u8, close: u8) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    (0..bytes.len())
        .filter(move |&i| bytes[i] == open)
        .filter_map(move |i| balanced_end(bytes, i, open, close).map(|end| &text[i..end]))
}

/// The first balanced `[...]` span that parses as a JSON array.
pub fn first_json_array(text: &str) -> Option<&str> {
    balanced_spans(text, b'[', b']').find(|span| matches!(serde_json::from_str::<Value>(span), Ok(Value::Array(_))))
}

/// The first balanced `{...}` span that parses as a JSON object containing
/// `key` at top level.
pub fn first_json_object_with_key(text: &str, key: &str) -> Option<serde_json::Map<String, Value>> {
    balanced_spans(text, b'{', b'}').find_map(|span| match serde_json::from_str::<Value>(span) {
        Ok(Value::Object(map)) if map.contains_key(key) => Some(map),
        _ => None,
    })
}
