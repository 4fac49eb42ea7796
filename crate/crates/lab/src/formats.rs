//! JSON-lines dumps of training data and evaluation suites.
//!
//! One caption per line. Fields, in order: `scene_id`, `role`, `category`,
//! `token_ids`, `surface_text`, `template`, then `caption` (index within the
//! scene's caption set) for dataset files or `item_id` for suite files.
//! Suite files open every item with a line of role `image` holding the
//! visual tokens; the item's captions follow.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use read_core::world::vocab::surface_text;
use read_core::world::{
    parse_caption, BenchmarkItem, CaptionRecord, Dataset, ImageRendering, NegCategory, Role, Scene, SceneEntry,
    TokenId, VISUAL_OFFSET,
};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const IMAGE_ROLE: &str = "image";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub scene_id: u64,
    pub role: String,
    pub category: Option<String>,
    pub token_ids: Vec<TokenId>,
    pub surface_text: String,
    pub template: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<u64>,
}

impl CaptionLine {
    fn from_record(r: &CaptionRecord) -> Self {
        Self {
            scene_id: r.scene_id,
            role: r.role.as_str().into(),
            category: r.category.map(|c| c.as_str().into()),
            token_ids: r.tokens.clone(),
            surface_text: surface_text(&r.tokens),
            template: r.template,
            caption: None,
            item_id: None,
        }
    }

    fn to_record(&self, path: &Path) -> Result<CaptionRecord> {
        let role = Role::parse(&self.role).ok_or_else(|| LabError::format(path, format!("unknown role {:?}", self.role)))?;
        let category = match &self.category {
            None => None,
            Some(c) => Some(
                NegCategory::parse(c).ok_or_else(|| LabError::format(path, format!("unknown category {c:?}")))?,
            ),
        };
        Ok(CaptionRecord {
            tokens: self.token_ids.clone(),
            template: self.template,
            role,
            category,
            scene_id: self.scene_id,
        })
    }
}

/// Visual tokens have no words; they print as `v<index>`.
pub fn image_text(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|t| format!("v{}", t.saturating_sub(VISUAL_OFFSET)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = CaptionLine>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        let s = serde_json::to_string(&line).map_err(|e| LabError::format(path, e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<CaptionLine>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| LabError::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn dataset_lines(dataset: &Dataset) -> Vec<CaptionLine> {
    let mut out = Vec::new();
    for e in &dataset.entries {
        for (c, cap) in e.captions.iter().enumerate() {
            let tagged = |r: &CaptionRecord| CaptionLine {
                caption: Some(c),
                ..CaptionLine::from_record(r)
            };
            out.push(tagged(cap));
            out.extend(e.paraphrases[c].iter().map(tagged));
            out.extend(e.negatives[c].iter().map(tagged));
        }
    }
    out
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_lines(path, dataset_lines(dataset))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let lines = read_lines(path)?;
    let mut entries: Vec<SceneEntry> = Vec::new();
    let mut current: Option<u64> = None;
    for line in &lines {
        let c = line
            .caption
            .ok_or_else(|| LabError::format(path, "dataset line without caption index"))?;
        let rec = line.to_record(path)?;
        if current != Some(line.scene_id) {
            if rec.role != Role::Original || c != 0 {
                return Err(LabError::format(path, format!("scene {} does not open with its first caption", line.scene_id)));
            }
            let parsed = parse_caption(&rec.tokens)
                .ok_or_else(|| LabError::format(path, format!("scene {}: caption off grammar", line.scene_id)))?;
            let scene = Scene::new(line.scene_id, parsed.first, parsed.relation, parsed.second)?;
            entries.push(SceneEntry {
                scene,
                captions: Vec::new(),
                paraphrases: Vec::new(),
                negatives: Vec::new(),
            });
            current = Some(line.scene_id);
        }
        let e = entries.last_mut().expect("entry opened above");
        match rec.role {
            Role::Original if c == e.captions.len() => {
                e.captions.push(rec);
                e.paraphrases.push(Vec::new());
                e.negatives.push(Vec::new());
            }
            Role::Paraphrase if c + 1 == e.captions.len() => e.paraphrases[c].push(rec),
            Role::HardNegative if c + 1 == e.captions.len() => e.negatives[c].push(rec),
            _ => {
                return Err(LabError::format(
                    path,
                    format!("scene {}: unexpected {} line for caption {c}", line.scene_id, line.role),
                ))
            }
        }
    }
    if entries.is_empty() {
        return Err(LabError::format(path, "empty dataset"));
    }
    Ok(Dataset { entries })
}

pub fn suite_lines(items: &[BenchmarkItem]) -> Vec<CaptionLine> {
    let mut out = Vec::new();
    for item in items {
        out.push(CaptionLine {
            scene_id: item.image.scene_id,
            role: IMAGE_ROLE.into(),
            category: Some(item.category_label().into()),
            token_ids: item.image.tokens.to_vec(),
            surface_text: image_text(&item.image.tokens),
            template: 0,
            caption: None,
            item_id: Some(item.item_id),
        });
        for r in item.positives.iter().chain(&item.negatives) {
            out.push(CaptionLine {
                item_id: Some(item.item_id),
                ..CaptionLine::from_record(r)
            });
        }
    }
    out
}

pub fn write_suite(path: &Path, items: &[BenchmarkItem]) -> Result<()> {
    write_lines(path, suite_lines(items))
}

pub fn read_suite(path: &Path) -> Result<Vec<BenchmarkItem>> {
    let lines = read_lines(path)?;
    let mut items: Vec<BenchmarkItem> = Vec::new();
    for line in &lines {
        let id = line
            .item_id
            .ok_or_else(|| LabError::format(path, "suite line without item_id"))?;
        if line.role == IMAGE_ROLE {
            let tokens: [TokenId; 6] = line
                .token_ids
                .as_slice()
                .try_into()
                .map_err(|_| LabError::format(path, format!("item {id}: image needs 6 tokens")))?;
            let category = match line.category.as_deref() {
                None | Some("paraphrase") => None,
                Some(c) => Some(
                    NegCategory::parse(c).ok_or_else(|| LabError::format(path, format!("unknown category {c:?}")))?,
                ),
            };
            items.push(BenchmarkItem {
                item_id: id,
                image: ImageRendering {
                    scene_id: line.scene_id,
                    tokens,
                },
                positives: Vec::new(),
                negatives: Vec::new(),
                category,
            });
            continue;
        }
        let item = items
            .last_mut()
            .filter(|it| it.item_id == id)
            .ok_or_else(|| LabError::format(path, format!("caption of item {id} before its image")))?;
        let rec = line.to_record(path)?;
        if rec.role == Role::HardNegative {
            item.negatives.push(rec);
        } else {
            item.positives.push(rec);
        }
    }
    if items.is_empty() {
        return Err(LabError::format(path, "empty suite"));
    }
    Ok(items)
}
