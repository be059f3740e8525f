//! Client for experts served behind an HTTP inference endpoint.
//!
//! Request body: `{"model_id", "task", "args"}`. Response body:
//! `{"payload": <json>, "resources": {"<kind>": "<text or url>" | {"data_base64", "ext"}}}`.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use super::stubs::{ExpertOutput, InferenceRequest, ResourceData};
use crate::taskgraph::ArgKind;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RemoteResource {
    Plain(String),
    Inline { data_base64: String, ext: String },
}

#[derive(Debug, Deserialize)]
struct RemoteReply {
    #[serde(default)]
    payload: Value,
    #[serde(default)]
    resources: BTreeMap<ArgKind, RemoteResource>,
}

fn describe(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        "timeout".to_string()
    } else {
        format!("remote endpoint error: {e}")
    }
}

fn extension_of(url: &str, kind: ArgKind) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let file = path.rsplit('/').next().unwrap_or("");
    match file.rsplit_once('.') {
        Some((_, ext)) if !ext.is_empty() && ext.len() <= 5 => ext.to_ascii_lowercase(),
        _ => match kind {
            ArgKind::Image => "png",
            ArgKind::Audio => "wav",
            ArgKind::Video => "mp4",
            ArgKind::Text => "txt",
        }
        .to_string(),
    }
}

/// Calls one remote expert. Errors are human-readable failure messages; a
/// timed-out call yields exactly `"timeout"`.
pub async fn call_remote(
    client: &reqwest::Client,
    url: &str,
    timeout: Duration,
    request: &InferenceRequest,
) -> Result<ExpertOutput, String> {
    let body = json!({
        "model_id": request.model_id,
        "task": request.task_type,
        "args": request.args,
    });
    let exchange = async {
        let resp = client.post(url).json(&body).send().await.map_err(|e| describe(&e))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(format!("remote endpoint returned {status}: {}", text.trim()));
        }
        let reply: RemoteReply = resp.json().await.map_err(|e| format!("malformed remote reply: {e}"))?;

        let mut resources = BTreeMap::new();
        for (kind, res) in reply.resources {
            let data = match res {
                RemoteResource::Inline { data_base64, ext } => {
                    let bytes = base64::engine::general_purpose::STANDARD
                        .decode(data_base64.as_bytes())
                        .map_err(|e| format!("bad base64 for {kind} resource: {e}"))?;
                    ResourceData::File { ext, bytes }
                }
                RemoteResource::Plain(s) if kind == ArgKind::Text => ResourceData::Text(s),
                RemoteResource::Plain(s) if s.starts_with("http://") || s.starts_with("https://") => {
                    let resp = client.get(&s).send().await.map_err(|e| describe(&e))?;
                    if !resp.status().is_success() {
                        return Err(format!("cannot fetch {s}: {}", resp.status()));
                    }
                    let bytes = resp.bytes().await.map_err(|e| describe(&e))?;
                    ResourceData::File {
                        ext: extension_of(&s, kind),
                        bytes: bytes.to_vec(),
                    }
                }
                RemoteResource::Plain(s) => ResourceData::Locator(s),
            };
            resources.insert(kind, data);
        }
        Ok(ExpertOutput {
            payload: reply.payload,
            resources,
        })
    };
    match tokio::time::timeout(timeout, exchange).await {
        Ok(r) => r,
        Err(_) => Err("timeout".to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extensions() {
        assert_eq!(extension_of("http://h/a/b.JPG?x=1", ArgKind::Image), "jpg");
        assert_eq!(extension_of("http://h/a/b", ArgKind::Audio), "wav");
        assert_eq!(extension_of("http://h/", ArgKind::Video), "mp4");
    }

    #[test]
    fn reply_shapes() {
        let r: RemoteReply = serde_json::from_str(
            r#"{"payload": {"x": 1}, "resources": {"text": "hi", "image": {"data_base64": "AAE=", "ext": "png"}}}"#,
        )
        .unwrap();
        assert!(matches!(r.resources[&ArgKind::Text], RemoteResource::Plain(ref s) if s == "hi"));
        assert!(matches!(r.resources[&ArgKind::Image], RemoteResource::Inline { .. }));
    }
}
