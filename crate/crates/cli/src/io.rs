//! File ingestion and result export.
//!
//! Formats, all UTF-8:
//!
//! * items — CSV with an `id,stem[,answer_key]` header, or JSON lines
//!   (`.jsonl`/`.ndjson`) with the same keys;
//! * exemplars — CSV with `Text,Category` columns (case-sensitive names);
//! * reference/prediction paths — CSV with `id` plus `Category1..CategoryN`
//!   columns, a path ending at its first empty cell (extra columns such as
//!   `text` or `failure` are ignored, so result files re-parse);
//! * results — CSV `id,text,Category1..CategoryN,failure` plus a
//!   `<output>.decisions.jsonl` sidecar holding each record with its raw
//!   backend outputs.
//!
//! Result files are written atomically (temp file in the target directory,
//! then rename).

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use bpmap_core::blueprint::CategoryPath;
use bpmap_core::classify::Exemplar;
use bpmap_core::metrics::ReferenceEntry;
use bpmap_core::pipeline::{ClassificationRecord, Item};
use bpmap_core::sim::PoolEntry;

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("ndjson")
    )
}

#[derive(Debug, Deserialize)]
struct RawItem {
    id: String,
    stem: String,
    #[serde(default)]
    answer_key: Option<String>,
}

fn build_item(raw: RawItem, row: usize, seen: &mut HashSet<String>) -> Result<Item> {
    if raw.id.trim().is_empty() {
        bail!("row {row}: empty id");
    }
    if !seen.insert(raw.id.clone()) {
        bail!("row {row}: duplicate id {:?}", raw.id);
    }
    if raw.stem.trim().is_empty() {
        bail!("row {row}: empty stem");
    }
    let answer_key = raw.answer_key.filter(|k| !k.trim().is_empty());
    Ok(Item::new(raw.id, raw.stem, answer_key)?)
}

/// Loads items from CSV or JSON lines, preserving row order. Row numbers
/// in errors are 1-based data rows.
pub fn load_items(path: &Path) -> Result<Vec<Item>> {
    let mut seen = HashSet::new();
    if is_jsonl(path) {
        let content = std::fs::read_to_string(path)
            .with_context(|| format!("reading items from {}", path.display()))?;
        let mut items = Vec::new();
        for (index, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawItem = serde_json::from_str(line)
                .with_context(|| format!("row {}: invalid item JSON", index + 1))?;
            items.push(build_item(raw, index + 1, &mut seen)?);
        }
        return Ok(items);
    }

    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading items from {}", path.display()))?;
    let headers = reader.headers()?.clone();
    for required in ["id", "stem"] {
        if !headers.iter().any(|h| h == required) {
            bail!("items file {} is missing required column {required:?}", path.display());
        }
    }
    let mut items = Vec::new();
    for (index, row) in reader.deserialize::<RawItem>().enumerate() {
        let raw = row.with_context(|| format!("row {}: invalid item row", index + 1))?;
        items.push(build_item(raw, index + 1, &mut seen)?);
    }
    Ok(items)
}

/// Loads a few-shot training table: CSV with `Text` and `Category`
/// columns.
pub fn load_exemplars(path: &Path) -> Result<Vec<Exemplar>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading exemplars from {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let text_at = headers.iter().position(|h| h == "Text");
    let category_at = headers.iter().position(|h| h == "Category");
    let (text_at, category_at) = match (text_at, category_at) {
        (Some(t), Some(c)) => (t, c),
        _ => bail!(
            "exemplars file {} must have Text and Category columns (case-sensitive)",
            path.display()
        ),
    };
    let mut exemplars = Vec::new();
    for (index, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("row {}: invalid exemplar row", index + 1))?;
        let text = row.get(text_at).unwrap_or("");
        let category = row.get(category_at).unwrap_or("");
        if text.trim().is_empty() {
            bail!("row {}: empty Text cell", index + 1);
        }
        if category.trim().is_empty() {
            bail!("row {}: empty Category cell", index + 1);
        }
        exemplars.push(Exemplar::new(text, category));
    }
    Ok(exemplars)
}

/// Category columns of a header, in level order: `Category1..CategoryN`.
fn category_columns(headers: &csv::StringRecord) -> Result<Vec<(usize, usize)>> {
    let mut columns: Vec<(usize, usize)> = Vec::new();
    for (index, name) in headers.iter().enumerate() {
        if let Some(suffix) = name.strip_prefix("Category") {
            if let Ok(level) = suffix.parse::<usize>() {
                if level >= 1 {
                    columns.push((level, index));
                }
            }
        }
    }
    if columns.is_empty() {
        bail!("no Category1..CategoryN columns found");
    }
    columns.sort_unstable();
    for (position, (level, _)) in columns.iter().enumerate() {
        if *level != position + 1 {
            bail!("category columns must be contiguous from Category1, found Category{level}");
        }
    }
    Ok(columns)
}

/// Loads `id -> path` rows from a CSV with `id` and `Category1..N`
/// columns. A path ends at its first empty category cell.
pub fn load_reference_paths(path: &Path) -> Result<Vec<ReferenceEntry>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading paths from {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let id_at = headers
        .iter()
        .position(|h| h == "id")
        .with_context(|| format!("paths file {} is missing an id column", path.display()))?;
    let columns = category_columns(&headers)
        .with_context(|| format!("paths file {}", path.display()))?;

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (index, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("row {}: invalid path row", index + 1))?;
        let id = row.get(id_at).unwrap_or("").to_string();
        if id.trim().is_empty() {
            bail!("row {}: empty id", index + 1);
        }
        if !seen.insert(id.clone()) {
            bail!("row {}: duplicate id {id:?}", index + 1);
        }
        let mut labels = Vec::new();
        for (_, column) in &columns {
            match row.get(*column).map(str::trim) {
                Some("") | None => break,
                Some(label) => labels.push(label.to_string()),
            }
        }
        entries.push(ReferenceEntry::new(id, CategoryPath::new(labels)));
    }
    Ok(entries)
}

/// Loads a simulation pool: CSV with `word` and `Category1..N` columns.
pub fn load_pool(path: &Path) -> Result<Vec<PoolEntry>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading pool from {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let word_at = headers
        .iter()
        .position(|h| h == "word")
        .with_context(|| format!("pool file {} is missing a word column", path.display()))?;
    let columns = category_columns(&headers)
        .with_context(|| format!("pool file {}", path.display()))?;
    let mut pool = Vec::new();
    for (index, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("row {}: invalid pool row", index + 1))?;
        let word = row.get(word_at).unwrap_or("");
        if word.trim().is_empty() {
            bail!("row {}: empty word", index + 1);
        }
        let mut labels = Vec::new();
        for (_, column) in &columns {
            match row.get(*column).map(str::trim) {
                Some("") | None => break,
                Some(label) => labels.push(label.to_string()),
            }
        }
        pool.push(PoolEntry::new(word, CategoryPath::new(labels)));
    }
    Ok(pool)
}

/// Loads a multi-label truth table: CSV with `id` and `labels` columns,
/// labels separated by `|`.
pub fn load_multi_truth(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading labels from {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let id_at = headers.iter().position(|h| h == "id");
    let labels_at = headers.iter().position(|h| h == "labels");
    let (id_at, labels_at) = match (id_at, labels_at) {
        (Some(i), Some(l)) => (i, l),
        _ => bail!("labels file {} must have id and labels columns", path.display()),
    };
    let mut rows = Vec::new();
    for (index, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("row {}: invalid labels row", index + 1))?;
        let id = row.get(id_at).unwrap_or("").to_string();
        if id.trim().is_empty() {
            bail!("row {}: empty id", index + 1);
        }
        let labels: Vec<String> = row
            .get(labels_at)
            .unwrap_or("")
            .split('|')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        rows.push((id, labels));
    }
    Ok(rows)
}

/// Writes `bytes` to `path` atomically: temp file in the same directory,
/// flushed, then renamed over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => parent,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".bpmap-tmp")
        .tempfile_in(dir)
        .with_context(|| format!("creating temp file next to {}", path.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Where the decisions sidecar for an output file lives.
pub fn sidecar_path(output: &Path) -> PathBuf {
    output.with_extension("decisions.jsonl")
}

/// Writes the results table (`id,text,Category1..N,failure`) plus the
/// JSON-lines audit sidecar. `records` must be aligned with `items`;
/// `depth` fixes the number of category columns.
pub fn write_results(
    records: &[ClassificationRecord],
    items: &[Item],
    depth: usize,
    output: &Path,
) -> Result<PathBuf> {
    if records.len() != items.len() {
        bail!("records ({}) and items ({}) differ in length", records.len(), items.len());
    }
    for (record, item) in records.iter().zip(items) {
        if record.item_id != item.id {
            bail!("record id {:?} does not match item id {:?}", record.item_id, item.id);
        }
    }

    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "text".to_string()];
    header.extend((1..=depth).map(|level| format!("Category{level}")));
    header.push("failure".to_string());
    writer.write_record(&header)?;

    for (record, item) in records.iter().zip(items) {
        let mut row = vec![item.id.clone(), item.combined_text().to_string()];
        for level in 1..=depth {
            row.push(record.path.label_at_level(level).unwrap_or("").to_string());
        }
        row.push(match &record.failure {
            Some(failure) => format!("level {}: {}", failure.level, failure.reason),
            None => String::new(),
        });
        writer.write_record(&row)?;
    }
    write_atomic(output, &writer.into_inner()?)?;

    let mut sidecar = String::new();
    for record in records {
        sidecar.push_str(&serde_json::to_string(record)?);
        sidecar.push('\n');
    }
    let sidecar_file = sidecar_path(output);
    write_atomic(&sidecar_file, sidecar.as_bytes())?;
    Ok(sidecar_file)
}

/// Builds a text-keyed truth map for the mock backend by joining items
/// with reference paths on item id. Items without a reference simply stay
/// unknown to the mock and fail at level 1.
pub fn truth_by_text(
    items: &[Item],
    references: &[ReferenceEntry],
) -> HashMap<String, CategoryPath> {
    let by_id: HashMap<&str, &CategoryPath> =
        references.iter().map(|r| (r.item_id.as_str(), &r.path)).collect();
    items
        .iter()
        .filter_map(|item| {
            by_id
                .get(item.id.as_str())
                .map(|path| (item.combined_text().to_string(), (*path).clone()))
        })
        .collect()
}
