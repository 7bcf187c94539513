//! Prompt construction, true/false self-augmentation, inference and
//! candidate filtering.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numeric::kernels;
use crate::world::{
    lowercase_first, read_jsonl, write_jsonl, FactTriple, Relation, Template, Vocab, FALSE_PREFIX,
    MASK_ID, MASK_TOKEN, OBJECT_SLOT, SUBJECT_SLOT, TRUE_PREFIX,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    SubjectMasked,
    BothMasked,
    TruePrefix,
    FalsePrefix,
}

impl Variant {
    fn masks_subject(self) -> bool {
        matches!(self, Variant::SubjectMasked | Variant::BothMasked)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub token_ids: Vec<usize>,
    pub object_mask_position: usize,
    /// Set when the subject slot holds the mask token.
    pub subject_mask_position: Option<usize>,
    /// Index of the `[X]` slot, masked or not.
    pub subject_position: usize,
    pub variant: Variant,
    pub template_id: String,
    pub triple: FactTriple,
}

impl Prompt {
    /// Positions holding the mask token that carry a prediction.
    pub fn mask_positions(&self) -> Vec<usize> {
        match (self.variant, self.subject_mask_position) {
            (Variant::BothMasked, Some(s)) => vec![self.object_mask_position, s],
            _ => vec![self.object_mask_position],
        }
    }
}

/// How the three augmented distributions are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// `softmax(Σ_j w_j P_j)`, a softmax over weighted probabilities.
    Probability,
    /// `softmax(Σ_j w_j log P_j)`.
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub w_raw: f64,
    pub w_true: f64,
    pub w_false: f64,
    pub true_prefix_text: String,
    pub false_prefix_text: String,
    pub combine: Combine,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            w_raw: 1.0,
            w_true: -1.0,
            w_false: 1.0,
            true_prefix_text: TRUE_PREFIX.into(),
            false_prefix_text: FALSE_PREFIX.into(),
            combine: Combine::Probability,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let sum = self.w_raw + self.w_true + self.w_false;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "augmentation weights sum to {sum}, not 1"
            )));
        }
        if (self.w_true + self.w_false).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "w_true ({}) must equal -w_false ({})",
                self.w_true, self.w_false
            )));
        }
        Ok(())
    }

    /// True when the prefixed prompts carry no weight.
    pub fn is_disabled(&self) -> bool {
        self.w_true == 0.0 && self.w_false == 0.0
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.w_raw, self.w_true, self.w_false]
    }
}

/// Renders `template` for `triple`: `[X]` becomes the subject (or the mask
/// for subject-masked variants), `[Y]` becomes the mask.
pub fn build_prompt(
    template: &Template,
    triple: &FactTriple,
    variant: Variant,
    vocab: &Vocab,
) -> Result<Prompt> {
    if template.relation_id != triple.relation_id {
        return Err(Error::Template {
            template_id: template.template_id.clone(),
            reason: format!(
                "relation {} does not match triple relation {}",
                template.relation_id, triple.relation_id
            ),
        });
    }
    template.validate()?;
    let tokens = template.tokens();
    let mut ids = Vec::with_capacity(tokens.len());
    let (mut object_pos, mut subject_pos) = (0, 0);
    for (i, tok) in tokens.iter().enumerate() {
        let id = match *tok {
            SUBJECT_SLOT => {
                subject_pos = i;
                if variant.masks_subject() {
                    MASK_ID
                } else {
                    vocab.id(&triple.subject)?
                }
            }
            OBJECT_SLOT => {
                object_pos = i;
                MASK_ID
            }
            other => vocab.id(other)?,
        };
        ids.push(id);
    }
    let prompt = Prompt {
        token_ids: ids,
        object_mask_position: object_pos,
        subject_mask_position: variant.masks_subject().then_some(subject_pos),
        subject_position: subject_pos,
        variant: Variant::Original,
        template_id: template.template_id.clone(),
        triple: triple.clone(),
    };
    match variant {
        Variant::TruePrefix | Variant::FalsePrefix => {
            let [_, t, f] =
                augment_prompts(&prompt, &AugmentationConfig::default(), vocab, usize::MAX)?;
            Ok(if variant == Variant::TruePrefix { t } else { f })
        }
        v => Ok(Prompt {
            variant: v,
            ..prompt
        }),
    }
}

fn prefixed(prompt: &Prompt, prefix: &[usize], first: usize, variant: Variant) -> Prompt {
    let shift = prefix.len();
    let mut ids = prefix.to_vec();
    ids.extend_from_slice(&prompt.token_ids);
    ids[shift] = first;
    Prompt {
        token_ids: ids,
        object_mask_position: prompt.object_mask_position + shift,
        subject_mask_position: prompt.subject_mask_position.map(|p| p + shift),
        subject_position: prompt.subject_position + shift,
        variant,
        template_id: prompt.template_id.clone(),
        triple: prompt.triple.clone(),
    }
}

/// `[raw, true-prefixed, false-prefixed]`. The template's first word is
/// lowercased behind the prefix.
pub fn augment_prompts(
    prompt: &Prompt,
    cfg: &AugmentationConfig,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<[Prompt; 3]> {
    if prompt.variant != Variant::Original {
        return Err(Error::Model(format!(
            "only original prompts can be augmented, got {:?}",
            prompt.variant
        )));
    }
    let true_ids = vocab.encode(&cfg.true_prefix_text)?;
    let false_ids = vocab.encode(&cfg.false_prefix_text)?;
    let len = prompt.token_ids.len() + true_ids.len().max(false_ids.len());
    if len > max_seq_len {
        return Err(Error::OutOfRange {
            what: "augmented prompt length",
            index: len,
            len: max_seq_len,
        });
    }
    let first = prompt.token_ids[0];
    let first_is_slot = prompt.object_mask_position == 0 || prompt.subject_position == 0;
    let lowered = match (first_is_slot, vocab.token(first)) {
        (false, Some(tok)) => vocab.id(&lowercase_first(tok))?,
        _ => first,
    };
    Ok([
        prompt.clone(),
        prefixed(prompt, &true_ids, lowered, Variant::TruePrefix),
        prefixed(prompt, &false_ids, lowered, Variant::FalsePrefix),
    ])
}

/// Vocabulary distributions at each of `positions`.
pub fn predict_at(
    state: &ModelState,
    token_ids: &[usize],
    positions: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let logits = state.forward_mlm(token_ids, positions)?;
    let out: Vec<Vec<f64>> = (0..positions.len())
        .map(|r| kernels::softmax(logits.row(r)))
        .collect();
    if out.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("predicted distribution"));
    }
    Ok(out)
}

/// Distribution over the vocabulary at the object mask.
pub fn predict_distribution(state: &ModelState, prompt: &Prompt) -> Result<Vec<f64>> {
    Ok(
        predict_at(state, &prompt.token_ids, &[prompt.object_mask_position])?
            .pop()
            .expect("one position"),
    )
}

/// Combines raw, true-prefixed and false-prefixed distributions.
pub fn aggregate_augmented(dists: [&[f64]; 3], cfg: &AugmentationConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = dists[0].len();
    if dists.iter().any(|d| d.len() != n) || n == 0 {
        return Err(Error::shape(
            "aggregate_augmented",
            "distributions differ in length",
        ));
    }
    let w = cfg.weights();
    let combined: Vec<f64> = (0..n)
        .map(|i| {
            (0..3)
                .map(|j| match cfg.combine {
                    Combine::Probability => w[j] * dists[j][i],
                    Combine::Logit => w[j] * dists[j][i].max(1e-12).ln(),
                })
                .sum()
        })
        .collect();
    Ok(kernels::softmax(&combined))
}

/// Whether stopwords are removed before or after taking the top k.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOrder {
    Before,
    #[default]
    After,
}

/// Indices sorted by descending probability, ties to the lower index.
pub fn ranked_indices(dist: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx
}

/// Top-`k` candidates with stopwords removed (before or after the cut).
pub fn topk_filtered(
    dist: &[f64],
    k: usize,
    stopwords: &BTreeSet<usize>,
    order: FilterOrder,
) -> Vec<usize> {
    let ranked = ranked_indices(dist);
    match order {
        FilterOrder::After => ranked
            .into_iter()
            .take(k)
            .filter(|i| !stopwords.contains(i))
            .collect(),
        FilterOrder::Before => ranked
            .into_iter()
            .filter(|i| !stopwords.contains(i))
            .take(k)
            .collect(),
    }
}

/// 1-based rank of `gold`, ties broken by token id.
pub fn gold_rank(dist: &[f64], gold: usize) -> usize {
    let pg = dist[gold];
    1 + dist
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > pg || (p == pg && i < gold))
        .count()
}

/// Token ids a relation excludes from candidate sets: its stopwords and the
/// special tokens.
pub fn stopword_ids(relation: &Relation, vocab: &Vocab) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = relation
        .stopwords
        .iter()
        .filter_map(|w| vocab.id(w).ok())
        .collect();
    set.insert(crate::world::PAD_ID);
    if let Ok(m) = vocab.id(MASK_TOKEN) {
        set.insert(m);
    }
    set
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub relation_id: String,
    pub template_id: String,
    pub sample_id: String,
    pub variant: Variant,
    pub topk: Vec<(String, f64)>,
    pub argmax: String,
    pub gold: String,
    pub gold_rank: usize,
    /// Full distribution, kept only where downstream metrics need it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn new(
        prompt: &Prompt,
        variant: Variant,
        dist: &[f64],
        vocab: &Vocab,
        top_k: usize,
        keep_probs: bool,
    ) -> Result<Self> {
        let gold = vocab.id(&prompt.triple.object)?;
        let ranked = ranked_indices(dist);
        let name = |i: usize| vocab.token(i).unwrap_or("[UNK]").to_string();
        Ok(PredictionRecord {
            relation_id: prompt.triple.relation_id.clone(),
            template_id: prompt.template_id.clone(),
            sample_id: prompt.triple.subject.clone(),
            variant,
            topk: ranked
                .iter()
                .take(top_k)
                .map(|&i| (name(i), dist[i]))
                .collect(),
            argmax: name(ranked[0]),
            gold: prompt.triple.object.clone(),
            gold_rank: gold_rank(dist, gold),
            probs: keep_probs.then(|| dist.to_vec()),
        })
    }

    pub fn hit1(&self) -> bool {
        self.gold_rank == 1
    }
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path)
}
