//! Tuning losses: masked-LM cross-entropy over the augmented distribution,
//! the max-entropy debiasing term and the paraphrase KL term.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, Params};
use crate::numeric::{kernels, Graph, Var};
use crate::probing::{
    augment_prompts, build_prompt, topk_filtered, AugmentationConfig, Combine, FilterOrder, Prompt,
    Variant,
};
use crate::world::{FactTriple, Template, Vocab};

/// Probability floor under every logarithm of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Sign applied to the entropy term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `−λ·H`: minimizing the total raises the entropy.
    #[default]
    Maximize,
    /// `+λ·H`, the term exactly as written.
    LiteralEq7,
}

/// Which masked prompts receive the entropy term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeTarget {
    /// Object distribution of the subject-masked prompt.
    SubjectMasked,
    /// Subject distribution of the both-masked prompt.
    ObjectMasked,
    #[default]
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    PlainMlm,
    Uniark,
    UniarkPara,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_me: f64,
    pub lambda_kld: f64,
    pub top_k: usize,
    pub entropy_sign_mode: EntropySign,
    pub apply_me_to: MeTarget,
    #[serde(default)]
    pub filter_order: FilterOrder,
    pub augmentation: AugmentationConfig,
    /// Paraphrases sampled per example in `uniark_para`.
    pub paraphrases_per_example: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_me: 0.2,
            lambda_kld: 0.2,
            top_k: 50,
            entropy_sign_mode: EntropySign::Maximize,
            apply_me_to: MeTarget::Both,
            filter_order: FilterOrder::After,
            augmentation: AugmentationConfig::default(),
            paraphrases_per_example: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_me >= 0.0 && self.lambda_kld >= 0.0) {
            return Err(Error::Config("lambda values must be nonnegative".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        self.augmentation.validate()
    }

    /// `top_k` clamped to a quarter of the vocabulary.
    pub fn effective_top_k(&self, vocab_size: usize) -> usize {
        self.top_k.min(vocab_size / 4).max(1)
    }

    fn entropy_weight(&self) -> f64 {
        match self.entropy_sign_mode {
            EntropySign::Maximize => -self.lambda_me,
            EntropySign::LiteralEq7 => self.lambda_me,
        }
    }
}

/// `−ln p_gold` with the probability floored; the flag reports a clamp.
pub fn mlm_loss(dist: &[f64], gold: usize) -> Result<(f64, bool)> {
    let p = *dist.get(gold).ok_or(Error::OutOfRange {
        what: "gold token",
        index: gold,
        len: dist.len(),
    })?;
    Ok((-p.max(PROB_FLOOR).ln(), p < PROB_FLOOR))
}

/// Entropy in bits of `dist` restricted to `candidates` and renormalized.
pub fn retained_entropy_bits(dist: &[f64], candidates: &[usize]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Model("empty candidate set after filtering".into()));
    }
    let z: f64 = candidates.iter().map(|&i| dist[i]).sum();
    if z <= 0.0 {
        return Err(Error::NonFinite("candidate mass"));
    }
    Ok(candidates
        .iter()
        .map(|&i| dist[i] / z)
        .filter(|&p| p > 0.0)
        .map(|p| -p * kernels::log2(p))
        .sum())
}

/// The signed, weighted entropy contribution for one distribution.
pub fn max_entropy_loss(
    dist: &[f64],
    stopwords: &BTreeSet<usize>,
    cfg: &LossConfig,
) -> Result<f64> {
    let k = cfg.effective_top_k(dist.len());
    let candidates = topk_filtered(dist, k, stopwords, cfg.filter_order);
    Ok(cfg.entropy_weight() * retained_entropy_bits(dist, &candidates)?)
}

/// `λ · KL(base ‖ paraphrase)` in nats, with floored logarithms.
pub fn para_kld_loss(base: &[f64], paraphrase: &[f64], lambda_kld: f64) -> Result<f64> {
    if base.len() != paraphrase.len() {
        return Err(Error::shape(
            "para_kld_loss",
            "distributions differ in length",
        ));
    }
    let kl: f64 = base
        .iter()
        .zip(paraphrase)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln()))
        .sum();
    Ok(lambda_kld * kl.max(0.0))
}

/// Gradient descent on the entropy term alone, applied to free logits over a
/// fixed candidate set: the top-k of the starting distribution minus
/// `stopwords`. Returns the retained-candidate entropy in bits before each
/// step and after the last one (`steps + 1` values).
pub fn max_entropy_trajectory(
    logits: &[f64],
    stopwords: &BTreeSet<usize>,
    cfg: &LossConfig,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let start = kernels::softmax(logits);
    let k = cfg.effective_top_k(start.len());
    let candidates = topk_filtered(&start, k, stopwords, cfg.filter_order);
    if candidates.is_empty() {
        return Err(Error::Model("empty candidate set after filtering".into()));
    }
    let mut z = crate::numeric::Tensor::vector(logits.to_vec());
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let zv = g.param_ref(&z);
        let p = g.softmax(zv)?;
        let sub = g.gather(p, &candidates)?;
        let q = g.normalize(sub)?;
        let h = g.entropy_bits_all(q)?;
        out.push(g.scalar(h));
        if step == steps {
            break;
        }
        let loss = g.scale(h, cfg.entropy_weight());
        g.backward(loss)?;
        let grad = g.take_grad(zv).unwrap_or_default();
        drop(g);
        for (x, d) in z.data_mut().iter_mut().zip(grad) {
            *x -= learning_rate * d;
        }
    }
    Ok(out)
}

/// Prompts for one tuning triple.
#[derive(Clone, Debug)]
pub struct TuneExample {
    pub original: Prompt,
    /// `[raw, true, false]`.
    pub augmented: [Prompt; 3],
    /// Subject and object both masked; read at the object slot for the
    /// subject-masked entropy and at the subject slot for the object-masked one.
    pub masked: Prompt,
    pub paraphrases: Vec<Prompt>,
    pub gold: usize,
    pub stopwords: BTreeSet<usize>,
}

impl TuneExample {
    pub fn new(
        template: &Template,
        triple: &FactTriple,
        paraphrases: &[&Template],
        vocab: &Vocab,
        stopwords: BTreeSet<usize>,
        aug: &AugmentationConfig,
        max_seq_len: usize,
    ) -> Result<Self> {
        let original = build_prompt(template, triple, Variant::Original, vocab)?;
        let augmented = augment_prompts(&original, aug, vocab, max_seq_len)?;
        let masked = build_prompt(template, triple, Variant::BothMasked, vocab)?;
        let paraphrases = paraphrases
            .iter()
            .map(|t| build_prompt(t, triple, Variant::Original, vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(TuneExample {
            gold: vocab.id(&triple.object)?,
            original,
            augmented,
            masked,
            paraphrases,
            stopwords,
        })
    }
}

/// Scalar summaries of one loss evaluation, for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub mlm: f64,
    pub entropy_bits_subject_masked: Option<f64>,
    pub entropy_bits_object_masked: Option<f64>,
    pub kld: Option<f64>,
    pub floor_clamps: usize,
}

/// `−ln P(gold)` of the base prompt, augmented when enabled. Returns the
/// loss node and the distribution node it was read from.
fn object_loss(
    g: &mut Graph<'_>,
    params: &Params<Var>,
    model: &ModelConfig,
    ex: &TuneExample,
    cfg: &LossConfig,
    augment: bool,
    clamps: &mut usize,
) -> Result<(Var, Var)> {
    if !augment {
        let logits = forward(
            g,
            params,
            model,
            &ex.original.token_ids,
            &[ex.original.object_mask_position],
        )?;
        let lp = g.log_softmax(logits)?;
        let loss = g.nll(lp, &[ex.gold])?;
        let p = g.softmax(logits)?;
        return Ok((loss, p));
    }
    let w = cfg.augmentation.weights();
    let mut terms = Vec::with_capacity(3);
    for (prompt, wj) in ex.augmented.iter().zip(w) {
        let logits = forward(
            g,
            params,
            model,
            &prompt.token_ids,
            &[prompt.object_mask_position],
        )?;
        let t = match cfg.augmentation.combine {
            Combine::Probability => g.softmax(logits)?,
            Combine::Logit => {
                let p = g.softmax(logits)?;
                g.ln_floor(p, PROB_FLOOR)
            }
        };
        terms.push((t, wj));
    }
    let combined = g.weighted_sum(&terms)?;
    let p = g.softmax(combined)?;
    let pg = g.gather(p, &[ex.gold])?;
    if g.value(pg)[0] < PROB_FLOOR {
        *clamps += 1;
    }
    let lp = g.ln_floor(pg, PROB_FLOOR);
    let loss = g.scale(lp, -1.0);
    Ok((loss, p))
}

fn entropy_node(g: &mut Graph<'_>, p: Var, ex: &TuneExample, cfg: &LossConfig) -> Result<Var> {
    let dist = g.value(p).to_vec();
    let k = cfg.effective_top_k(dist.len());
    let candidates = topk_filtered(&dist, k, &ex.stopwords, cfg.filter_order);
    if candidates.is_empty() {
        return Err(Error::Model("empty candidate set after filtering".into()));
    }
    let sub = g.gather(p, &candidates)?;
    let q = g.normalize(sub)?;
    g.entropy_bits_all(q)
}

/// Builds the batch-mean loss in `g` and returns its node with summaries.
///
/// `plain_mlm` uses the raw prompt only. `uniark` uses the augmented
/// distribution (the raw one when both prefix weights are zero) plus the
/// entropy terms; `uniark_para` adds the paraphrase KL term.
pub fn total_loss(
    g: &mut Graph<'_>,
    params: &Params<Var>,
    model: &ModelConfig,
    batch: &[&TuneExample],
    cfg: &LossConfig,
    mode: LossMode,
) -> Result<(Var, LossTerms)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Model("empty batch".into()));
    }
    let uniark = mode != LossMode::PlainMlm;
    let augment = uniark && !cfg.augmentation.is_disabled();
    let use_me = uniark && cfg.lambda_me > 0.0;
    let use_kld = mode == LossMode::UniarkPara && cfg.lambda_kld > 0.0;

    let mut terms = LossTerms::default();
    let mut per_example = Vec::with_capacity(batch.len());
    let (mut h_s, mut h_o, mut kld_sum, mut mlm_sum) = (0.0, 0.0, 0.0, 0.0);
    for ex in batch {
        let (mlm, p_base) =
            object_loss(g, params, model, ex, cfg, augment, &mut terms.floor_clamps)?;
        mlm_sum += g.scalar(mlm);
        let mut parts = vec![(mlm, 1.0)];

        if use_me {
            let m = &ex.masked;
            let s_pos = m.subject_mask_position.expect("masked prompt");
            let logits = forward(
                g,
                params,
                model,
                &m.token_ids,
                &[m.object_mask_position, s_pos],
            )?;
            let probs = g.softmax(logits)?;
            let w = cfg.entropy_weight();
            if matches!(cfg.apply_me_to, MeTarget::SubjectMasked | MeTarget::Both) {
                let row = g.select_rows(probs, &[0])?;
                let h = entropy_node(g, row, ex, cfg)?;
                h_s += g.scalar(h);
                parts.push((h, w));
            }
            if matches!(cfg.apply_me_to, MeTarget::ObjectMasked | MeTarget::Both) {
                let row = g.select_rows(probs, &[1])?;
                let h = entropy_node(g, row, ex, cfg)?;
                h_o += g.scalar(h);
                parts.push((h, w));
            }
        }

        if use_kld {
            for para in ex.paraphrases.iter().take(cfg.paraphrases_per_example) {
                let logits = forward(
                    g,
                    params,
                    model,
                    &para.token_ids,
                    &[para.object_mask_position],
                )?;
                let q = g.softmax(logits)?;
                let lp = g.ln_floor(p_base, PROB_FLOOR);
                let lq = g.ln_floor(q, PROB_FLOOR);
                let diff = g.sub(lp, lq)?;
                let prod = g.mul(p_base, diff)?;
                let kl = g.sum(prod);
                kld_sum += cfg.lambda_kld * g.scalar(kl);
                parts.push((kl, cfg.lambda_kld));
            }
        }
        per_example.push(g.weighted_sum(&parts)?);
    }
    let n = batch.len() as f64;
    let weighted: Vec<(Var, f64)> = per_example.into_iter().map(|v| (v, 1.0 / n)).collect();
    let total = g.weighted_sum(&weighted)?;
    terms.total = g.scalar(total);
    terms.mlm = mlm_sum / n;
    if use_me {
        if matches!(cfg.apply_me_to, MeTarget::SubjectMasked | MeTarget::Both) {
            terms.entropy_bits_subject_masked = Some(h_s / n);
        }
        if matches!(cfg.apply_me_to, MeTarget::ObjectMasked | MeTarget::Both) {
            terms.entropy_bits_object_masked = Some(h_o / n);
        }
    }
    if use_kld {
        terms.kld = Some(kld_sum / n);
    }
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    Ok((total, terms))
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: usize,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_id: Option<String>,
    pub loss_total: f64,
    pub loss_mlm: f64,
    pub entropy_bits_subject_masked: Option<f64>,
    pub entropy_bits_object_masked: Option<f64>,
    pub loss_kld: Option<f64>,
    #[serde(default)]
    pub floor_clamps: usize,
}
