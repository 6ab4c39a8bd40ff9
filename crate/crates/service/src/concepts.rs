use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dreampaint_core::{Checkpoint, ModelKind, RunDir};
use serde::{Deserialize, Serialize};

/// File inside a run directory's `samples/` shown as the concept thumbnail.
pub const PREVIEW_FILE: &str = "preview.png";

/// A loaded fine-tuned checkpoint, immutable once loaded.
#[derive(Debug)]
pub struct Concept {
    pub concept_id: String,
    pub token: String,
    pub class_noun: String,
    pub checkpoint: Checkpoint,
    pub run_dir: PathBuf,
}

impl Concept {
    pub fn preview_path(&self) -> PathBuf {
        self.run_dir.join("samples").join(PREVIEW_FILE)
    }

    pub fn summary(&self) -> ConceptSummary {
        ConceptSummary {
            concept_id: self.concept_id.clone(),
            token: self.token.clone(),
            class_noun: self.class_noun.clone(),
            preview_png_url: format!("/api/concepts/{}/preview", self.concept_id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSummary {
    pub concept_id: String,
    pub token: String,
    pub class_noun: String,
    pub preview_png_url: String,
}

/// Loads every fine-tuned run under `runs_root` that is not in `known`.
/// Unreadable or base checkpoints are skipped; only a failure to list the
/// directory is an error.
pub fn scan_new(
    runs_root: &Path,
    known: &BTreeMap<String, Arc<Concept>>,
) -> std::io::Result<Vec<Concept>> {
    let mut found = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(runs_root)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let id = entry.file_name().to_string_lossy().into_owned();
        if id.starts_with(['.', '_']) || known.contains_key(&id) {
            continue;
        }
        let ckpt_path = entry.path().join(RunDir::CHECKPOINT_FILE);
        if !ckpt_path.is_file() {
            continue;
        }
        match Checkpoint::load(&ckpt_path) {
            Ok(checkpoint) if checkpoint.kind != ModelKind::FinetunedInpaint => {}
            Ok(checkpoint) => {
                let token = checkpoint.meta.token.clone().unwrap_or_default();
                let class_noun = checkpoint.meta.class_noun.clone().unwrap_or_default();
                found.push(Concept {
                    concept_id: id,
                    token,
                    class_noun,
                    checkpoint,
                    run_dir: entry.path(),
                });
            }
            Err(e) => log::warn!("skipping {}: {e}", ckpt_path.display()),
        }
    }
    Ok(found)
}
