//! Synthetic fact worlds: relations, gold triples, paraphrase templates,
//! the biased pretraining corpus and the closed vocabulary.

mod corpus;
mod generate;
mod io;
mod split;
mod types;
mod vocab;

pub use corpus::{
    corpus_from_text, corpus_to_text, object_marginal, render_pretraining_corpus, render_sentence,
    template_prior,
};
pub use generate::{generate_world, zipf_weights, WorldConfig, DEFAULT_STOPWORDS, FILLER_SUBJECT};
pub use io::{
    load_corpus, load_relations, load_templates, load_triples, load_world, read_jsonl, save_corpus,
    save_world, write_atomic, write_jsonl, CORPUS_FILE, RELATIONS_FILE, TEMPLATES_FILE,
    TRIPLES_FILE, VOCAB_FILE,
};
pub use split::{filter_nm_relations, split_templates, TemplateSplit};
pub use types::{
    Cardinality, FactTriple, FactWorld, LengthClass, Relation, Split, Template, OBJECT_SLOT,
    SUBJECT_SLOT,
};
pub use vocab::{
    lowercase_first, Vocab, FALSE_PREFIX, MASK_ID, MASK_TOKEN, PAD_ID, PAD_TOKEN, TRUE_PREFIX,
};
