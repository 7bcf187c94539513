use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::generate::{DEFAULT_STOPWORDS, FILLER_SUBJECT};
use super::types::{FactWorld, OBJECT_SLOT, SUBJECT_SLOT};
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;

/// Default prefixes of the true/false self-augmented prompts.
pub const TRUE_PREFIX: &str = "It is true that";
pub const FALSE_PREFIX: &str = "It is false that";

/// Closed whitespace vocabulary: `[PAD]`, `[MASK]`, then sorted tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(MASK_TOKEN)
        {
            return Err(Error::Config(
                "vocabulary must start with [PAD] and [MASK]".into(),
            ));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Every token a world can produce: template words, subjects, objects,
    /// stopwords, the filler subject and the augmentation prefixes.
    pub fn from_world(world: &FactWorld) -> Self {
        let mut set: BTreeSet<String> = BTreeSet::new();
        for t in &world.templates {
            for tok in t.tokens() {
                if tok != SUBJECT_SLOT && tok != OBJECT_SLOT {
                    set.insert(tok.to_string());
                    set.insert(lowercase_first(tok));
                }
            }
        }
        for t in &world.triples {
            set.insert(t.subject.clone());
            set.insert(t.object.clone());
        }
        for r in &world.relations {
            set.extend(r.objects.iter().cloned());
            set.extend(r.stopwords.iter().cloned());
        }
        set.extend(DEFAULT_STOPWORDS.iter().map(|s| s.to_string()));
        for prefix in [TRUE_PREFIX, FALSE_PREFIX] {
            set.extend(prefix.split_whitespace().map(str::to_string));
        }
        set.insert(FILLER_SUBJECT.to_string());
        set.remove(PAD_TOKEN);
        set.remove(MASK_TOKEN);
        let mut tokens = vec![PAD_TOKEN.to_string(), MASK_TOKEN.to_string()];
        tokens.extend(set);
        Vocab::from_tokens(tokens).expect("tokens are unique by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Vocab::from_tokens(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }
}

/// Lowercases the first character, as when a sentence gets a prefix.
pub fn lowercase_first(token: &str) -> String {
    let mut chars = token.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}
