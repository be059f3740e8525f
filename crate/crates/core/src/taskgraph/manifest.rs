use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TaskGraphError;

const BUILTIN_MANIFEST: &str = include_str!("../../assets/tasks.json");

/// Argument and resource modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgKind {
    Text,
    Image,
    Audio,
    Video,
}

impl ArgKind {
    pub const ALL: [ArgKind; 4] = [ArgKind::Text, ArgKind::Image, ArgKind::Audio, ArgKind::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            ArgKind::Text => "text",
            ArgKind::Image => "image",
            ArgKind::Audio => "audio",
            ArgKind::Video => "video",
        }
    }

    /// Guess the modality of a file from its extension. Unknown extensions
    /// are treated as text documents.
    pub fn from_extension(path: &str) -> ArgKind {
        let ext = path.rsplit('.').next().unwrap_or_default().to_ascii_lowercase();
        match ext.as_str() {
            "jpg" | "jpeg" | "png" | "gif" | "bmp" | "webp" | "svg" => ArgKind::Image,
            "wav" | "mp3" | "flac" | "ogg" | "m4a" => ArgKind::Audio,
            "mp4" | "avi" | "mov" | "mkv" | "webm" => ArgKind::Video,
            _ => ArgKind::Text,
        }
    }
}

impl fmt::Display for ArgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArgKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArgKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown argument kind {s:?}"))
    }
}

/// One supported task: its name, the argument keys it requires and the
/// modality of the resource it produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskType {
    pub name: String,
    #[serde(default)]
    pub domain: String,
    pub args: BTreeSet<ArgKind>,
    pub output: ArgKind,
}

#[derive(Debug, Deserialize)]
struct ManifestFile {
    tasks: Vec<TaskType>,
}

/// The closed list of task types a plan may use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskManifest {
    tasks: Vec<TaskType>,
}

impl TaskManifest {
    /// The manifest packaged with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_MANIFEST).expect("packaged task manifest is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, TaskGraphError> {
        let file: ManifestFile = serde_json::from_str(text).map_err(|e| TaskGraphError::Manifest(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for task in &file.tasks {
            if task.args.is_empty() {
                return Err(TaskGraphError::Manifest(format!(
                    "task {:?} declares no arguments",
                    task.name
                )));
            }
            if !seen.insert(task.name.as_str()) {
                return Err(TaskGraphError::Manifest(format!("task {:?} listed twice", task.name)));
            }
        }
        Ok(Self { tasks: file.tasks })
    }

    pub fn load(path: &Path) -> Result<Self, TaskGraphError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TaskGraphError::Manifest(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn get(&self, name: &str) -> Option<&TaskType> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.name.as_str())
    }

    pub fn tasks(&self) -> &[TaskType] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

impl Default for TaskManifest {
    fn default() -> Self {
        Self::builtin()
    }
}
