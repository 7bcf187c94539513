use std::collections::BTreeSet;

use super::types::{Cardinality, FactWorld, LengthClass, Split, Template};
use crate::error::{Error, Result};

/// Template partition: the seen base template, in-domain paraphrases and
/// out-of-domain paraphrases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemplateSplit {
    pub tune_set: Vec<Template>,
    pub id_test_set: Vec<Template>,
    pub ood_test_set: Vec<Template>,
}

impl TemplateSplit {
    pub fn tune_template(&self, relation_id: &str) -> Option<&Template> {
        self.tune_set.iter().find(|t| t.relation_id == relation_id)
    }

    pub fn id_of<'s>(&'s self, relation_id: &'s str) -> impl Iterator<Item = &'s Template> + 's {
        self.id_test_set
            .iter()
            .filter(move |t| t.relation_id == relation_id)
    }

    pub fn ood_of<'s>(&'s self, relation_id: &'s str) -> impl Iterator<Item = &'s Template> + 's {
        self.ood_test_set
            .iter()
            .filter(move |t| t.relation_id == relation_id)
    }
}

/// Base template to `tune_set`; `train` normal paraphrases to `id_test_set`;
/// all short/long paraphrases and `test` normal paraphrases to `ood_test_set`.
pub fn split_templates(world: &FactWorld) -> Result<TemplateSplit> {
    let mut out = TemplateSplit::default();
    for rel in &world.relations {
        let base = world.base_template(&rel.relation_id).ok_or_else(|| {
            Error::Config(format!("relation {} has no base template", rel.relation_id))
        })?;
        if base.split != Split::Train {
            return Err(Error::Template {
                template_id: base.template_id.clone(),
                reason: "base template must be in the train split".into(),
            });
        }
        let paraphrases: Vec<&Template> = world
            .templates_of(&rel.relation_id)
            .filter(|t| t.template_id != base.template_id)
            .collect();
        if paraphrases.is_empty() {
            return Err(Error::Config(format!(
                "relation {} has no paraphrases",
                rel.relation_id
            )));
        }
        out.tune_set.push(base.clone());
        for t in paraphrases {
            match (t.length_class, t.split) {
                (LengthClass::Normal, Split::Train) => out.id_test_set.push(t.clone()),
                _ => out.ood_test_set.push(t.clone()),
            }
        }
    }
    Ok(out)
}

/// Drops N-M relations and every relation named in `exclusion_list`.
pub fn filter_nm_relations(world: &FactWorld, exclusion_list: &[String]) -> Result<Vec<String>> {
    let known: BTreeSet<&str> = world
        .relations
        .iter()
        .map(|r| r.relation_id.as_str())
        .collect();
    for id in exclusion_list {
        if !known.contains(id.as_str()) {
            return Err(Error::Config(format!(
                "unknown relation {id} in exclusion list"
            )));
        }
    }
    Ok(world
        .relations
        .iter()
        .filter(|r| r.cardinality != Cardinality::ManyToMany)
        .filter(|r| !exclusion_list.contains(&r.relation_id))
        .map(|r| r.relation_id.clone())
        .collect())
}
