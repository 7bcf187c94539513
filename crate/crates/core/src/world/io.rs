use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::corpus::{corpus_from_text, corpus_to_text};
use super::types::{FactTriple, FactWorld, Relation, Template};
use crate::error::{Error, Result};

pub const RELATIONS_FILE: &str = "relations.jsonl";
pub const TRIPLES_FILE: &str = "triples.jsonl";
pub const TEMPLATES_FILE: &str = "templates.jsonl";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn single_token(path: &Path, line: usize, what: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.split_whitespace().count() != 1 || value.trim() != value {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("{what} {value:?} is not a single token"),
        });
    }
    Ok(())
}

pub fn load_relations(path: &Path) -> Result<Vec<Relation>> {
    let rels: Vec<Relation> = read_jsonl(path)?;
    for (i, r) in rels.iter().enumerate() {
        for o in &r.objects {
            single_token(path, i + 1, "object", o)?;
        }
    }
    Ok(rels)
}

pub fn load_triples(path: &Path) -> Result<Vec<FactTriple>> {
    let triples: Vec<FactTriple> = read_jsonl(path)?;
    for (i, t) in triples.iter().enumerate() {
        single_token(path, i + 1, "subject", &t.subject)?;
        single_token(path, i + 1, "object", &t.object)?;
    }
    Ok(triples)
}

pub fn load_templates(path: &Path) -> Result<Vec<Template>> {
    let templates: Vec<Template> = read_jsonl(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for (i, t) in templates.iter().enumerate() {
        t.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !seen.insert(t.template_id.as_str()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("duplicate template_id {}", t.template_id),
            });
        }
    }
    Ok(templates)
}

pub fn save_world(world: &FactWorld, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(RELATIONS_FILE), &world.relations)?;
    write_jsonl(&dir.join(TRIPLES_FILE), &world.triples)?;
    write_jsonl(&dir.join(TEMPLATES_FILE), &world.templates)?;
    Ok(())
}

pub fn load_world(dir: &Path) -> Result<FactWorld> {
    FactWorld::new(
        load_relations(&dir.join(RELATIONS_FILE))?,
        load_triples(&dir.join(TRIPLES_FILE))?,
        load_templates(&dir.join(TEMPLATES_FILE))?,
    )
}

pub fn save_corpus(corpus: &[Vec<String>], path: &Path) -> Result<()> {
    write_atomic(path, corpus_to_text(corpus).as_bytes())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(corpus_from_text(&std::fs::read_to_string(path)?))
}
