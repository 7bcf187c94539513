use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::generate::{sample_index, zipf_weights, WorldConfig, FILLER_SUBJECT};
use super::types::{FactWorld, Template, OBJECT_SLOT, SUBJECT_SLOT};
use crate::error::Result;

/// Substitutes subject and object into a template's slots.
pub fn render_sentence(template: &Template, subject: &str, object: &str) -> Vec<String> {
    template
        .tokens()
        .into_iter()
        .map(|t| match t {
            SUBJECT_SLOT => subject.to_string(),
            OBJECT_SLOT => object.to_string(),
            other => other.to_string(),
        })
        .collect()
}

/// Zipf prior over a relation's templates: the base template has rank 1,
/// paraphrase ranks follow a seeded shuffle.
pub fn template_prior<'w>(
    world: &'w FactWorld,
    relation_id: &str,
    skew: f64,
    seed: u64,
) -> Vec<(&'w Template, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_str(relation_id));
    let mut ordered: Vec<&Template> = Vec::new();
    if let Some(base) = world.base_template(relation_id) {
        ordered.push(base);
    }
    let mut rest: Vec<&Template> = world
        .templates_of(relation_id)
        .filter(|t| {
            ordered
                .first()
                .is_none_or(|b| b.template_id != t.template_id)
        })
        .collect();
    rest.shuffle(&mut rng);
    ordered.extend(rest);
    let weights = zipf_weights(ordered.len(), skew);
    ordered.into_iter().zip(weights).collect()
}

/// Zipf marginal over a relation's objects, ranked by gold frequency
/// (ties broken by vocabulary order).
pub fn object_marginal(world: &FactWorld, relation_id: &str, skew: f64) -> Vec<(String, f64)> {
    let Some(rel) = world.relation(relation_id) else {
        return Vec::new();
    };
    let mut counted: Vec<(usize, &String)> = rel
        .objects
        .iter()
        .map(|o| {
            (
                world
                    .triples_of(relation_id)
                    .filter(|t| &t.object == o)
                    .count(),
                o,
            )
        })
        .collect();
    counted.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    let weights = zipf_weights(counted.len(), skew);
    counted
        .into_iter()
        .zip(weights)
        .map(|((_, o), w)| (o.clone(), w))
        .collect()
}

fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Renders `corpus_repeats` sentences per triple through the skewed template
/// prior, plus `distractors_per_relation` filler-subject sentences per
/// relation whose objects follow the skewed marginal. Output is shuffled.
pub fn render_pretraining_corpus(world: &FactWorld, cfg: &WorldConfig) -> Result<Vec<Vec<String>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut corpus = Vec::new();
    for rel in &world.relations {
        let prior = template_prior(world, &rel.relation_id, cfg.template_prior_skew, cfg.seed);
        if prior.is_empty() {
            continue;
        }
        let weights: Vec<f64> = prior.iter().map(|p| p.1).collect();
        for triple in world.triples_of(&rel.relation_id) {
            for _ in 0..cfg.corpus_repeats {
                let t = prior[sample_index(&mut rng, &weights)].0;
                corpus.push(render_sentence(t, &triple.subject, &triple.object));
            }
        }
        let marginal = object_marginal(world, &rel.relation_id, cfg.object_marginal_skew);
        let object_weights: Vec<f64> = marginal.iter().map(|m| m.1).collect();
        for _ in 0..cfg.distractors_per_relation {
            let t = prior[sample_index(&mut rng, &weights)].0;
            let o = &marginal[sample_index(&mut rng, &object_weights)].0;
            corpus.push(render_sentence(t, FILLER_SUBJECT, o));
        }
    }
    corpus.shuffle(&mut rng);
    Ok(corpus)
}

/// `corpus.txt`: one whitespace-joined sentence per line.
pub fn corpus_to_text(corpus: &[Vec<String>]) -> String {
    let mut s = String::new();
    for line in corpus {
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn corpus_from_text(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}
