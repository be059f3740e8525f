//! Deterministic stand-ins for expert models.
//!
//! Every stub derives its output from a hash of the task type and resolved
//! arguments, so identical inputs always give identical payloads and files.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use image::codecs::gif::GifEncoder;
use image::{Delay, Frame, ImageFormat, Rgb, RgbImage, Rgba, RgbaImage};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::taskgraph::{ArgKind, TaskManifest};

/// Raw resource produced by an expert before it is stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResourceData {
    /// Text is stored inline; its locator is the text itself.
    Text(String),
    /// A file written to the artifacts directory as `<task_id>.<ext>`.
    File { ext: String, bytes: Vec<u8> },
    /// Already addressable elsewhere (e.g. a URL); kept as is.
    Locator(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput {
    pub payload: Value,
    pub resources: BTreeMap<ArgKind, ResourceData>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceRequest {
    pub task_id: u64,
    pub task_type: String,
    pub model_id: String,
    pub args: BTreeMap<ArgKind, String>,
}

impl InferenceRequest {
    /// Stable seed over task type and arguments.
    pub fn seed(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.task_type.as_bytes());
        for (k, v) in &self.args {
            h.update([0]);
            h.update(k.as_str().as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
        }
        h.finalize().into()
    }
}

/// A locally deployed expert.
#[async_trait]
pub trait ExpertHandler: Send + Sync {
    async fn infer(&self, request: &InferenceRequest) -> Result<ExpertOutput, String>;
}

/// The built-in stub for one task type.
#[derive(Debug, Clone)]
pub struct DefaultStub {
    output: ArgKind,
}

impl DefaultStub {
    pub fn new(output: ArgKind) -> Self {
        Self { output }
    }

    pub fn for_task(manifest: &TaskManifest, task_type: &str) -> Option<Self> {
        manifest.get(task_type).map(|t| Self::new(t.output))
    }

    fn run(&self, request: &InferenceRequest) -> ExpertOutput {
        let seed = request.seed();
        let text_arg = request.args.get(&ArgKind::Text).map(String::as_str).unwrap_or("");
        let (payload, text) = stub_payload(&request.task_type, text_arg);
        let resource = match self.output {
            ArgKind::Text => ResourceData::Text(text),
            kind => media_file(kind, &seed),
        };
        ExpertOutput {
            payload,
            resources: BTreeMap::from([(self.output, resource)]),
        }
    }
}

#[async_trait]
impl ExpertHandler for DefaultStub {
    async fn infer(&self, request: &InferenceRequest) -> Result<ExpertOutput, String> {
        Ok(self.run(request))
    }
}

fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// Structured payload and the text summary a stub reports for `task_type`.
fn stub_payload(task_type: &str, text: &str) -> (Value, String) {
    match task_type {
        "object-detection" => {
            let boxes = json!([
                {"label": "person", "score": 0.998, "box": {"xmin": 12, "ymin": 30, "xmax": 180, "ymax": 410}},
                {"label": "dog", "score": 0.991, "box": {"xmin": 200, "ymin": 240, "xmax": 390, "ymax": 420}},
                {"label": "kite", "score": 0.957, "box": {"xmin": 260, "ymin": 20, "xmax": 330, "ymax": 90}}
            ]);
            (json!({"predicted": boxes}), "3 objects: person, dog, kite".into())
        }
        "image-cls" => (
            json!([{"label": "golden retriever", "score": 0.912}, {"label": "Labrador retriever", "score": 0.054}]),
            "golden retriever".into(),
        ),
        "image-to-text" => {
            let caption = "a boy and his dog flying a kite in a park";
            (json!({"generated_text": caption}), caption.into())
        }
        "visual-question-answering" => (
            json!([{"answer": "running", "score": 0.874}, {"answer": "playing", "score": 0.102}]),
            "running".into(),
        ),
        "document-question-answering" => (
            json!([{"answer": "$1,024.00", "score": 0.903, "start": 41, "end": 42}]),
            "$1,024.00".into(),
        ),
        "image-segmentation" => (
            json!({"segments": [{"label": "person", "score": 0.994}, {"label": "grass", "score": 0.971}]}),
            "person, grass".into(),
        ),
        "pose-detection" => (
            json!({"keypoints": [{"part": "nose", "x": 101, "y": 52}, {"part": "left_wrist", "x": 64, "y": 170}]}),
            "pose keypoints".into(),
        ),
        "text-to-speech" => (json!({"generated audio": text}), text.into()),
        "automatic-speech-recognition" => {
            let t = "hello everyone and welcome to the meeting";
            (json!({"text": t}), t.into())
        }
        "audio-cls" => (json!([{"label": "en: English", "score": 0.931}]), "en: English".into()),
        "video-cls" => (
            json!([{"label": "playing guitar", "score": 0.812}]),
            "playing guitar".into(),
        ),
        "text-cls" => (json!([{"label": "positive", "score": 0.987}]), "positive".into()),
        "tabular-cls" => (json!([{"label": "blast", "score": 0.77}]), "blast".into()),
        "token-cls" => {
            let entities: Vec<Value> = text
                .split_whitespace()
                .filter(|w| w.chars().next().is_some_and(char::is_uppercase))
                .map(|w| json!({"word": w, "entity_group": "MISC", "score": 0.9}))
                .collect();
            let summary = format!("{} entities", entities.len());
            (json!(entities), summary)
        }
        "summarization" => {
            let s = format!("Summary: {}", first_words(text, 12));
            (json!({"summary_text": s}), s)
        }
        "translation" => {
            let s = format!("[translated] {text}");
            (json!({"translation_text": s}), s)
        }
        "question-answering" => (
            json!({"answer": first_words(text, 3), "score": 0.66}),
            first_words(text, 3),
        ),
        "text2text-generation" | "text-generation" | "conversational" => {
            let s = format!("{} ...", first_words(text, 24));
            (json!({"generated_text": s}), s)
        }
        other => (json!({"task": other, "input": text}), format!("{other} result")),
    }
}

fn rgb(seed: &[u8; 32], offset: usize) -> [u8; 3] {
    [seed[offset % 32], seed[(offset + 1) % 32], seed[(offset + 2) % 32]]
}

/// A placeholder file of the given modality, fully determined by `seed`.
pub fn media_file(kind: ArgKind, seed: &[u8; 32]) -> ResourceData {
    match kind {
        ArgKind::Image => ResourceData::File {
            ext: "png".into(),
            bytes: placeholder_png(seed),
        },
        ArgKind::Audio => ResourceData::File {
            ext: "wav".into(),
            bytes: placeholder_wav(seed),
        },
        ArgKind::Video => ResourceData::File {
            ext: "gif".into(),
            bytes: placeholder_gif(seed),
        },
        ArgKind::Text => ResourceData::Text(seed.iter().take(4).map(|b| format!("{b:02x}")).collect()),
    }
}

fn placeholder_png(seed: &[u8; 32]) -> Vec<u8> {
    let (a, b) = (rgb(seed, 0), rgb(seed, 3));
    let img = RgbImage::from_fn(
        64,
        64,
        |x, y| if ((x / 8) + (y / 8)) % 2 == 0 { Rgb(a) } else { Rgb(b) },
    );
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    out.into_inner()
}

fn placeholder_gif(seed: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = GifEncoder::new(&mut out);
        let frames = (0..4).map(|i| {
            let c = rgb(seed, i * 3);
            let img = RgbaImage::from_fn(32, 32, |x, _| {
                if x / 8 == i as u32 {
                    Rgba([255, 255, 255, 255])
                } else {
                    Rgba([c[0], c[1], c[2], 255])
                }
            });
            Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(100, 1))
        });
        encoder.encode_frames(frames).expect("in-memory gif");
    }
    out
}

/// 0.25 s of 8 kHz mono 16-bit PCM sine.
fn placeholder_wav(seed: &[u8; 32]) -> Vec<u8> {
    const RATE: u32 = 8000;
    let samples = RATE / 4;
    let freq = 220.0 + f64::from(seed[0]) * 2.0;
    let data_len = samples * 2;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&RATE.to_le_bytes());
    out.extend_from_slice(&(RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for i in 0..samples {
        let t = f64::from(i) / f64::from(RATE);
        let s = ((t * freq * std::f64::consts::TAU).sin() * 8000.0) as i16;
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// One entry of a stub fixtures file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default)]
pub struct FixtureBehavior {
    /// Payload to report instead of the built-in one.
    pub payload: Option<Value>,
    /// Text resource to report for text-producing tasks.
    pub text: Option<String>,
    /// Artificial latency.
    pub delay_ms: u64,
    /// When set, the stub fails with this message.
    pub fail: Option<String>,
}

/// A stub whose behaviour comes from a fixtures file, falling back to the
/// built-in stub for anything left unspecified.
#[derive(Debug, Clone)]
pub struct FixtureStub {
    base: DefaultStub,
    behavior: FixtureBehavior,
}

impl FixtureStub {
    pub fn new(output: ArgKind, behavior: FixtureBehavior) -> Self {
        Self {
            base: DefaultStub::new(output),
            behavior,
        }
    }
}

#[async_trait]
impl ExpertHandler for FixtureStub {
    async fn infer(&self, request: &InferenceRequest) -> Result<ExpertOutput, String> {
        if self.behavior.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.behavior.delay_ms)).await;
        }
        if let Some(msg) = &self.behavior.fail {
            return Err(msg.clone());
        }
        let mut out = self.base.run(request);
        if let Some(p) = &self.behavior.payload {
            out.payload = p.clone();
        }
        if let (Some(t), Some(ResourceData::Text(slot))) = (&self.behavior.text, out.resources.get_mut(&ArgKind::Text))
        {
            *slot = t.clone();
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
struct FixtureFile {
    stubs: BTreeMap<String, FixtureBehavior>,
}

/// Parses a fixtures file: `{"stubs": {"<task type>": {behavior}}}`.
pub fn load_fixtures(path: &Path) -> Result<BTreeMap<String, FixtureBehavior>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_fixtures(&text)
}

pub fn parse_fixtures(text: &str) -> Result<BTreeMap<String, FixtureBehavior>, String> {
    serde_json::from_str::<FixtureFile>(text)
        .map(|f| f.stubs)
        .map_err(|e| e.to_string())
}
