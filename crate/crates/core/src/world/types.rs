use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBJECT_SLOT: &str = "[X]";
pub const OBJECT_SLOT: &str = "[Y]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cardinality {
    #[serde(rename = "1-1")]
    OneToOne,
    #[serde(rename = "N-1")]
    ManyToOne,
    #[serde(rename = "N-M")]
    ManyToMany,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub relation_id: String,
    pub description: String,
    pub cardinality: Cardinality,
    #[serde(default)]
    pub stopwords: Vec<String>,
    /// Closed object vocabulary. Derived from the triples when a file omits it.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriple {
    pub relation_id: String,
    pub subject: String,
    pub object: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    Short,
    Normal,
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub relation_id: String,
    pub template_id: String,
    pub template: String,
    pub split: Split,
    pub length_class: LengthClass,
    /// Marks the single seen (tuning) template of a relation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub base: bool,
}

impl Template {
    /// Checks the placeholder rule: exactly one `[X]` and one `[Y]` token.
    pub fn validate(&self) -> Result<()> {
        let tokens: Vec<&str> = self.template.split_whitespace().collect();
        let count = |slot: &str| tokens.iter().filter(|t| **t == slot).count();
        let (x, y) = (count(SUBJECT_SLOT), count(OBJECT_SLOT));
        if x != 1 || y != 1 {
            return Err(Error::Template {
                template_id: self.template_id.clone(),
                reason: format!("expected one [X] and one [Y] token, found {x} and {y}"),
            });
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.template.split_whitespace().collect()
    }
}

/// Relations, gold triples and paraphrase template sets.
#[derive(Clone, Debug, PartialEq)]
pub struct FactWorld {
    pub relations: Vec<Relation>,
    pub triples: Vec<FactTriple>,
    pub templates: Vec<Template>,
}

impl FactWorld {
    /// Cross-file validation; fills in missing object vocabularies.
    pub fn new(
        mut relations: Vec<Relation>,
        triples: Vec<FactTriple>,
        templates: Vec<Template>,
    ) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for r in &relations {
            if !ids.insert(r.relation_id.clone()) {
                return Err(Error::Config(format!(
                    "duplicate relation {}",
                    r.relation_id
                )));
            }
        }
        let mut derived: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for t in &triples {
            if !ids.contains(&t.relation_id) {
                return Err(Error::Config(format!(
                    "triple references unknown relation {}",
                    t.relation_id
                )));
            }
            derived
                .entry(t.relation_id.as_str())
                .or_default()
                .insert(t.object.as_str());
        }
        for r in &mut relations {
            if r.objects.is_empty() {
                r.objects = derived
                    .get(r.relation_id.as_str())
                    .map(|s| s.iter().map(|o| o.to_string()).collect())
                    .unwrap_or_default();
            }
        }
        for t in &triples {
            let r = relations
                .iter()
                .find(|r| r.relation_id == t.relation_id)
                .expect("checked above");
            if !r.objects.contains(&t.object) {
                return Err(Error::Config(format!(
                    "object {} is not in the vocabulary of {}",
                    t.object, t.relation_id
                )));
            }
        }
        let mut template_ids = BTreeSet::new();
        for t in &templates {
            t.validate()?;
            if !ids.contains(&t.relation_id) {
                return Err(Error::Config(format!(
                    "template {} references unknown relation {}",
                    t.template_id, t.relation_id
                )));
            }
            if !template_ids.insert(t.template_id.clone()) {
                return Err(Error::Template {
                    template_id: t.template_id.clone(),
                    reason: "duplicate template_id".into(),
                });
            }
        }
        Ok(FactWorld {
            relations,
            triples,
            templates,
        })
    }

    pub fn relation(&self, id: &str) -> Option<&Relation> {
        self.relations.iter().find(|r| r.relation_id == id)
    }

    pub fn triples_of(&self, relation_id: &str) -> impl Iterator<Item = &FactTriple> + '_ {
        let id = relation_id.to_owned();
        self.triples.iter().filter(move |t| t.relation_id == id)
    }

    pub fn templates_of(&self, relation_id: &str) -> impl Iterator<Item = &Template> + '_ {
        let id = relation_id.to_owned();
        self.templates.iter().filter(move |t| t.relation_id == id)
    }

    pub fn template(&self, template_id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.template_id == template_id)
    }

    /// The seen template of a relation: the one flagged `base`, else the
    /// first `train` template in file order.
    pub fn base_template(&self, relation_id: &str) -> Option<&Template> {
        self.templates_of(relation_id).find(|t| t.base).or_else(|| {
            self.templates_of(relation_id)
                .find(|t| t.split == Split::Train)
        })
    }

    /// Splits a relation's triples by subject, in order of first appearance:
    /// the first `ceil(n · fraction)` subjects are for tuning, the rest for
    /// evaluation.
    pub fn triple_split(
        &self,
        relation_id: &str,
        tune_fraction: f64,
    ) -> (Vec<&FactTriple>, Vec<&FactTriple>) {
        let mut subjects: Vec<&str> = Vec::new();
        for t in self.triples_of(relation_id) {
            if !subjects.contains(&t.subject.as_str()) {
                subjects.push(&t.subject);
            }
        }
        let n_tune = (subjects.len() as f64 * tune_fraction).ceil() as usize;
        let tune_subjects: BTreeSet<&str> = subjects[..n_tune.min(subjects.len())]
            .iter()
            .copied()
            .collect();
        self.triples_of(relation_id)
            .partition(|t| tune_subjects.contains(t.subject.as_str()))
    }
}
