use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::world::FactWorld;

/// Template embeddings supplied from outside, keyed by template id.
pub type Embeddings = BTreeMap<String, Vec<f64>>;

/// Reads a JSON object `{template_id: [f64, ...]}`.
pub fn load_embeddings(path: &Path) -> Result<Embeddings> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::metric(
            "cosine",
            "vectors differ in length or are empty",
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::metric("cosine", "zero vector"));
    }
    Ok(dot / (na * nb))
}

/// Mean cosine similarity between each paraphrase and its relation's base
/// template, per relation. Templates without an embedding are skipped.
pub fn base_similarity(
    world: &FactWorld,
    embeddings: &Embeddings,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for rel in &world.relations {
        let Some(base) = world.base_template(&rel.relation_id) else {
            continue;
        };
        let Some(eb) = embeddings.get(&base.template_id) else {
            continue;
        };
        let mut sims = Vec::new();
        for t in world.templates_of(&rel.relation_id) {
            if t.template_id == base.template_id {
                continue;
            }
            if let Some(et) = embeddings.get(&t.template_id) {
                sims.push(cosine(eb, et)?);
            }
        }
        if !sims.is_empty() {
            out.insert(
                rel.relation_id.clone(),
                sims.iter().sum::<f64>() / sims.len() as f64,
            );
        }
    }
    Ok(out)
}
