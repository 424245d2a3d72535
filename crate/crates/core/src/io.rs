//! JSON and JSON-lines persistence for datasets, checkpoints and reports.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::{Dataset, ImageRecord, Split, WorldConfig};
use crate::types::ClassTriplet;

pub const WORLD_FILE: &str = "world.json";
pub const REGISTRY_FILE: &str = "registry.json";

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Blank lines are skipped; a malformed line is a data error naming it.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

/// Writes the world manifest, the training triplet registry and one
/// JSON-lines file per split.
pub fn save_dataset(dir: &Path, splits: &[&Dataset]) -> Result<()> {
    let first = splits
        .first()
        .ok_or_else(|| Error::data("no splits to save"))?;
    write_json(&dir.join(WORLD_FILE), &first.world)?;
    write_json(&dir.join(REGISTRY_FILE), &first.train_triplet_registry)?;
    for d in splits {
        write_jsonl(&dir.join(split_file(d.split)), &d.images)?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let world: WorldConfig = read_json(&dir.join(WORLD_FILE))?;
    world.validate()?;
    let registry: BTreeSet<ClassTriplet> = read_json(&dir.join(REGISTRY_FILE))?;
    let images: Vec<ImageRecord> = read_jsonl(&dir.join(split_file(split)))?;
    for img in &images {
        if img.objects.len() != img.graph.entities.len() {
            return Err(Error::data(format!(
                "image {} has mismatched objects and entities",
                img.image_id
            )));
        }
        if img
            .pairs
            .iter()
            .any(|p| p.subject_idx >= img.objects.len() || p.object_idx >= img.objects.len())
        {
            return Err(Error::data(format!(
                "image {} has a pair outside its objects",
                img.image_id
            )));
        }
    }
    Ok(Dataset {
        split,
        world,
        images,
        train_triplet_registry: registry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    #[test]
    fn dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = WorldConfig::default();
        let (tr, va, te) = generate_dataset(&cfg, 6, 2, 3).unwrap();
        save_dataset(dir.path(), &[&tr, &va, &te]).unwrap();
        assert_eq!(load_split(dir.path(), Split::Train).unwrap(), tr);
        assert_eq!(load_split(dir.path(), Split::Test).unwrap(), te);
    }

    #[test]
    fn malformed_line_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "[1,2]\n\n{oops\n").unwrap();
        let err = read_jsonl::<Vec<u32>>(&p).unwrap_err();
        assert!(
            matches!(err, Error::Data(ref m) if m.contains("line 3")),
            "{err}"
        );
        assert!(matches!(
            read_jsonl::<u32>(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
