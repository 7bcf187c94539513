use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{Cardinality, FactTriple, FactWorld, LengthClass, Relation, Split, Template};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_relations: usize,
    pub subjects_per_relation: usize,
    pub objects_per_relation: usize,
    /// Paraphrases per relation, in addition to the base template.
    pub paraphrases_per_relation: usize,
    pub short_paraphrases: usize,
    pub long_paraphrases: usize,
    /// Zipf exponent of the template prior in the pretraining corpus.
    pub template_prior_skew: f64,
    /// Zipf exponent of the object marginal (gold assignments and distractors).
    pub object_marginal_skew: f64,
    pub corpus_repeats: usize,
    /// Subject-free sentences per relation that implant the object prior.
    pub distractors_per_relation: usize,
    /// The last `n_nm_relations` relations are generated as N-M.
    #[serde(default)]
    pub n_nm_relations: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_relations: 6,
            subjects_per_relation: 40,
            objects_per_relation: 10,
            paraphrases_per_relation: 12,
            short_paraphrases: 3,
            long_paraphrases: 3,
            template_prior_skew: 1.0,
            object_marginal_skew: 1.0,
            corpus_repeats: 12,
            distractors_per_relation: 80,
            n_nm_relations: 0,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_relations", self.n_relations),
            ("subjects_per_relation", self.subjects_per_relation),
            ("objects_per_relation", self.objects_per_relation),
            ("paraphrases_per_relation", self.paraphrases_per_relation),
            ("corpus_repeats", self.corpus_repeats),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.short_paraphrases + self.long_paraphrases > self.paraphrases_per_relation {
            return Err(Error::Config(
                "short + long paraphrases exceed paraphrases_per_relation".into(),
            ));
        }
        if self.n_nm_relations > self.n_relations {
            return Err(Error::Config("n_nm_relations exceeds n_relations".into()));
        }
        if self.n_nm_relations > 0 && self.objects_per_relation < 2 {
            return Err(Error::Config(
                "N-M relations need at least 2 objects".into(),
            ));
        }
        if !(self.template_prior_skew >= 0.0 && self.object_marginal_skew >= 0.0) {
            return Err(Error::Config("skew exponents must be nonnegative".into()));
        }
        if self.n_relations > RELATION_HEADS.len() {
            return Err(Error::Config(format!(
                "at most {} relations are supported",
                RELATION_HEADS.len()
            )));
        }
        Ok(())
    }

    pub fn normal_paraphrases(&self) -> usize {
        self.paraphrases_per_relation - self.short_paraphrases - self.long_paraphrases
    }
}

/// Token standing in for the subject in distractor sentences.
pub const FILLER_SUBJECT: &str = "something";

/// Generic filler tokens removed from max-entropy candidate sets.
pub const DEFAULT_STOPWORDS: [&str; 6] = ["the", "a", "of", "is", "and", "it"];

const RELATION_HEADS: &[&str] = &[
    "capital",
    "birthplace",
    "language",
    "employer",
    "genre",
    "founder",
    "citizenship",
    "headquarters",
    "instrument",
    "religion",
    "continent",
    "owner",
    "author",
    "league",
    "manufacturer",
    "currency",
    "anthem",
    "occupation",
    "sport",
    "position",
    "label",
    "network",
    "developer",
    "publisher",
    "school",
    "party",
    "river",
    "mountain",
    "island",
    "county",
    "province",
    "district",
    "region",
    "harbor",
    "border",
    "climate",
    "cuisine",
    "festival",
    "dialect",
    "script",
    "dynasty",
    "treaty",
    "award",
    "museum",
    "stadium",
    "airline",
    "railway",
    "orchestra",
];

const RELATION_WORDS: &[&str] = &[
    "seat",
    "home",
    "center",
    "origin",
    "hub",
    "base",
    "root",
    "source",
    "core",
    "heart",
    "domain",
    "realm",
    "field",
    "sphere",
    "zone",
    "area",
    "range",
    "scope",
    "line",
    "path",
    "tongue",
    "speech",
    "voice",
    "word",
    "name",
    "title",
    "mark",
    "sign",
    "badge",
    "crest",
    "maker",
    "builder",
    "creator",
    "keeper",
    "holder",
    "bearer",
    "leader",
    "chief",
    "head",
    "master",
    "owner",
    "patron",
    "sponsor",
    "backer",
    "partner",
    "ally",
    "member",
    "fellow",
    "guild",
    "club",
    "union",
    "circle",
    "league",
    "order",
    "house",
    "hall",
    "court",
    "tower",
    "gate",
    "bridge",
    "port",
    "dock",
    "yard",
    "market",
    "square",
    "street",
    "road",
    "route",
    "trail",
    "track",
    "lane",
    "way",
    "style",
    "form",
    "mode",
    "kind",
    "type",
    "sort",
    "class",
    "rank",
    "grade",
    "level",
    "tier",
    "stage",
    "phase",
    "step",
    "craft",
    "trade",
    "art",
    "skill",
    "work",
    "labor",
    "duty",
    "task",
    "role",
    "post",
    "office",
    "desk",
    "chair",
    "seal",
    "stamp",
    "brand",
    "crown",
    "throne",
    "banner",
    "flag",
    "emblem",
    "symbol",
    "token",
    "charter",
    "deed",
    "record",
    "ledger",
    "archive",
    "chronicle",
    "annal",
    "register",
    "roster",
    "census",
];

const FILLER_PHRASES: &[&str] = &[
    "according to the old records",
    "as most people would agree",
    "in nearly all of the known sources",
    "without any serious doubt",
    "as noted in the public archive",
    "for all practical purposes",
    "as far as anyone can tell",
    "in the eyes of many observers",
    "as written in several reports",
    "by common account",
    "to the best of our knowledge",
    "as the records clearly show",
    "in most standard references",
    "as was confirmed many times",
    "in the usual sense of the word",
    "as is widely understood",
];

// {X}/{Y} are the slots, {r} and {q} relation words, {h} the relation head.
const SHORT_PATTERNS: &[&str] = &[
    "[X] {r} [Y] .",
    "[X] 's {h} : [Y] .",
    "{h} of [X] : [Y] .",
    "[X] has {r} [Y] .",
    "[Y] is [X] 's {h} .",
    "[X] , {h} [Y] .",
    "[X] {h} is [Y] .",
    "[Y] , {r} of [X] .",
];

const NORMAL_PATTERNS: &[&str] = &[
    "the {h} of [X] is known to be [Y] .",
    "[X] has [Y] as its {h} and {r} .",
    "[Y] is the {r} {h} of [X] .",
    "[X] is said to have [Y] as {h} .",
    "the {r} of [X] , its {h} , is [Y] .",
    "[X] counts [Y] as the main {h} .",
    "in the {r} of [X] the {h} is [Y] .",
    "[Y] serves as the {h} for [X] .",
    "[X] is tied to [Y] by {h} and {q} .",
    "the {q} {h} that [X] has is [Y] .",
    "[Y] is what [X] has as {r} {h} .",
    "we know that the {h} of [X] is [Y] .",
];

/// Deterministically builds a fact world from `cfg`.
pub fn generate_world(cfg: &WorldConfig) -> Result<FactWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut word_pool: Vec<&str> = RELATION_WORDS.to_vec();
    word_pool.shuffle(&mut rng);
    let words_per_relation = (word_pool.len() / cfg.n_relations).clamp(2, 6);

    let mut relations = Vec::with_capacity(cfg.n_relations);
    let mut triples = Vec::new();
    let mut templates = Vec::new();
    let mut next_subject = 0usize;
    let mut next_object = 0usize;

    for r in 0..cfg.n_relations {
        let relation_id = format!("R{r}");
        let head = RELATION_HEADS[r];
        let words: Vec<&str> =
            word_pool[r * words_per_relation..(r + 1) * words_per_relation].to_vec();
        let cardinality = if r >= cfg.n_relations - cfg.n_nm_relations {
            Cardinality::ManyToMany
        } else if cfg.objects_per_relation >= cfg.subjects_per_relation {
            Cardinality::OneToOne
        } else {
            Cardinality::ManyToOne
        };

        let objects: Vec<String> = (0..cfg.objects_per_relation)
            .map(|j| format!("o{}", next_object + j))
            .collect();
        next_object += cfg.objects_per_relation;

        // Zipf ranks are assigned to objects in a random order, so token ids
        // carry no information about frequency.
        let mut by_rank = objects.clone();
        by_rank.shuffle(&mut rng);
        let weights = zipf_weights(by_rank.len(), cfg.object_marginal_skew);

        let mut subjects: Vec<String> = (0..cfg.subjects_per_relation)
            .map(|i| format!("s{}", next_subject + i))
            .collect();
        next_subject += cfg.subjects_per_relation;
        subjects.shuffle(&mut rng);

        let one_to_one: Vec<String> = {
            let mut o = by_rank.clone();
            o.shuffle(&mut rng);
            o
        };
        for (i, s) in subjects.iter().enumerate() {
            let golds: Vec<String> = match cardinality {
                Cardinality::OneToOne => vec![one_to_one[i].clone()],
                Cardinality::ManyToOne => vec![by_rank[sample_index(&mut rng, &weights)].clone()],
                Cardinality::ManyToMany => {
                    let a = sample_index(&mut rng, &weights);
                    let mut b = sample_index(&mut rng, &weights);
                    while b == a {
                        b = sample_index(&mut rng, &weights);
                    }
                    vec![by_rank[a].clone(), by_rank[b].clone()]
                }
            };
            for o in golds {
                triples.push(FactTriple {
                    relation_id: relation_id.clone(),
                    subject: s.clone(),
                    object: o,
                });
            }
        }

        relations.push(Relation {
            relation_id: relation_id.clone(),
            description: format!("{head} ({})", words.join(", ")),
            cardinality,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            objects,
        });

        templates.extend(relation_templates(
            &mut rng,
            cfg,
            &relation_id,
            head,
            &words,
        )?);
    }

    FactWorld::new(relations, triples, templates)
}

fn relation_templates(
    rng: &mut ChaCha8Rng,
    cfg: &WorldConfig,
    relation_id: &str,
    head: &str,
    words: &[&str],
) -> Result<Vec<Template>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let base = format!("[X] is the {head} of [Y] .");
    seen.insert(base.clone());
    out.push(Template {
        relation_id: relation_id.into(),
        template_id: format!("{relation_id}-base"),
        template: base,
        split: Split::Train,
        length_class: LengthClass::Normal,
        base: true,
    });

    let n_normal = cfg.normal_paraphrases();
    let mut normal_splits: Vec<Split> = (0..n_normal)
        .map(|i| {
            if i < n_normal / 2 {
                Split::Train
            } else {
                Split::Test
            }
        })
        .collect();
    normal_splits.shuffle(rng);

    let plan = std::iter::repeat_n(LengthClass::Short, cfg.short_paraphrases)
        .chain(std::iter::repeat_n(LengthClass::Long, cfg.long_paraphrases))
        .chain(std::iter::repeat_n(LengthClass::Normal, n_normal));
    let mut normal_idx = 0;
    for (k, class) in plan.enumerate() {
        let text = unique_template(rng, class, head, words, &mut seen).ok_or_else(|| {
            Error::Config(format!(
                "could not generate {} distinct {class:?} paraphrases for {relation_id}",
                cfg.paraphrases_per_relation
            ))
        })?;
        let split = match class {
            LengthClass::Normal => {
                normal_idx += 1;
                normal_splits[normal_idx - 1]
            }
            _ => Split::Test,
        };
        out.push(Template {
            relation_id: relation_id.into(),
            template_id: format!("{relation_id}-p{k}"),
            template: text,
            split,
            length_class: class,
            base: false,
        });
    }
    Ok(out)
}

fn unique_template(
    rng: &mut ChaCha8Rng,
    class: LengthClass,
    head: &str,
    words: &[&str],
    seen: &mut BTreeSet<String>,
) -> Option<String> {
    for _ in 0..500 {
        let text = match class {
            LengthClass::Short => fill(SHORT_PATTERNS.choose(rng)?, head, words, rng),
            LengthClass::Normal => fill(NORMAL_PATTERNS.choose(rng)?, head, words, rng),
            LengthClass::Long => {
                let core = fill(NORMAL_PATTERNS.choose(rng)?, head, words, rng);
                let core = core.trim_end_matches(" .");
                let a = FILLER_PHRASES.choose(rng)?;
                let mut b = FILLER_PHRASES.choose(rng)?;
                while b == a {
                    b = FILLER_PHRASES.choose(rng)?;
                }
                match rng.gen_range(0..3) {
                    0 => format!("{a} , {core} , {b} ."),
                    1 => format!("{a} and {b} , {core} ."),
                    _ => format!("{core} , {a} and {b} ."),
                }
            }
        };
        if seen.insert(text.clone()) {
            return Some(text);
        }
    }
    None
}

fn fill(pattern: &str, head: &str, words: &[&str], rng: &mut ChaCha8Rng) -> String {
    let r = words.choose(rng).copied().unwrap_or(head);
    let mut q = words.choose(rng).copied().unwrap_or(head);
    if words.len() > 1 {
        while q == r {
            q = words.choose(rng).copied().unwrap_or(head);
        }
    }
    pattern
        .replace("{h}", head)
        .replace("{r}", r)
        .replace("{q}", q)
}

/// `w_k ∝ 1 / k^s` for ranks `k = 1..n`, normalized.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

pub(crate) fn sample_index(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
