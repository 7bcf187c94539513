use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels;
use crate::probing::PredictionRecord;

/// Fraction of records whose argmax equals the gold token.
pub fn hit_at_1(records: &[&PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::metric("hit@1", "no records"));
    }
    Ok(records.iter().filter(|r| r.argmax == r.gold).count() as f64 / records.len() as f64)
}

/// Hit rate of subject-masked records; same computation as [`hit_at_1`].
pub fn ct_hit1(records: &[&PredictionRecord]) -> Result<f64> {
    hit_at_1(records).map_err(|_| Error::metric("ct_hit1", "no subject-masked records"))
}

/// Macro-averaged F1 over every label that occurs as gold or as prediction.
pub fn macro_f1(records: &[&PredictionRecord]) -> Result<f64> {
    let pairs: Vec<(&str, &str)> = records
        .iter()
        .map(|r| (r.gold.as_str(), r.argmax.as_str()))
        .collect();
    macro_f1_labels(&pairs)
}

/// Macro F1 from `(gold, predicted)` label pairs.
pub fn macro_f1_labels(pairs: &[(&str, &str)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::metric("macro_f1", "empty class set"));
    }
    let mut classes: BTreeSet<&str> = BTreeSet::new();
    for (g, p) in pairs {
        classes.insert(g);
        classes.insert(p);
    }
    let mut total = 0.0;
    for c in &classes {
        let tp = pairs.iter().filter(|(g, p)| g == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|(g, p)| g != c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|(g, p)| g == c && p != c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(total / classes.len() as f64)
}

/// Direction of the subject-masked KL divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldDirection {
    /// `KL(masked ‖ original)`.
    #[default]
    MaskedToOriginal,
    OriginalToMasked,
}

/// `KL(p ‖ q)` in bits with 1e-12 floors.
pub fn kl_bits(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::metric("kld", "distributions differ in length"));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (kernels::log2(pi.max(1e-12)) - kernels::log2(qi.max(1e-12))))
        .sum();
    Ok(kl.max(0.0))
}

pub fn kld_subject_masked(
    masked: &[f64],
    original: &[f64],
    direction: KldDirection,
) -> Result<f64> {
    match direction {
        KldDirection::MaskedToOriginal => kl_bits(masked, original),
        KldDirection::OriginalToMasked => kl_bits(original, masked),
    }
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::metric("pearson", "need at least 2 pairs"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation of gold ranks between original and subject-masked prompts,
/// over all pairs and over pairs whose original prediction is wrong.
/// `r_wrong` is `None` with fewer than 2 wrong pairs.
pub fn pearson_r_ranks(pairs: &[(usize, usize)]) -> Result<(f64, Option<f64>)> {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
    let all = pearson(&xs, &ys)?;
    let wrong: Vec<&(usize, usize)> = pairs.iter().filter(|p| p.0 != 1).collect();
    let r_wrong = if wrong.len() >= 2 {
        let xs: Vec<f64> = wrong.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = wrong.iter().map(|p| p.1 as f64).collect();
        Some(pearson(&xs, &ys)?)
    } else {
        None
    };
    Ok((all, r_wrong))
}

/// Fraction of unordered template pairs with equal predictions.
pub fn consistency_all<S: AsRef<str>>(predictions: &[S]) -> Result<f64> {
    pair_fraction(predictions, |a, b| a == b)
}

/// Fraction of unordered pairs where both predictions equal `gold`.
pub fn consistency_acc<S: AsRef<str>>(predictions: &[S], gold: &str) -> Result<f64> {
    pair_fraction(predictions, |a, b| a == gold && b == gold)
}

fn pair_fraction<S: AsRef<str>>(
    predictions: &[S],
    hit: impl Fn(&str, &str) -> bool,
) -> Result<f64> {
    let n = predictions.len();
    if n < 2 {
        return Err(Error::metric("consistency", "need at least 2 templates"));
    }
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if hit(predictions[i].as_ref(), predictions[j].as_ref()) {
                count += 1;
            }
        }
    }
    Ok(count as f64 / (n * (n - 1) / 2) as f64)
}

/// Fraction of paraphrase predictions equal to the base-template one.
pub fn consistency_raw<S: AsRef<str>>(raw: &str, paraphrases: &[S]) -> Result<f64> {
    if paraphrases.is_empty() {
        return Err(Error::metric("raw_cst", "no paraphrases"));
    }
    Ok(paraphrases.iter().filter(|p| p.as_ref() == raw).count() as f64 / paraphrases.len() as f64)
}

/// Groups records by sample id, keeping the argmax per template.
pub fn predictions_by_sample<'r>(
    records: impl IntoIterator<Item = &'r PredictionRecord>,
) -> BTreeMap<(&'r str, &'r str), BTreeMap<&'r str, &'r PredictionRecord>> {
    let mut out: BTreeMap<(&str, &str), BTreeMap<&str, &PredictionRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.sample_id.as_str(), r.gold.as_str()))
            .or_default()
            .insert(r.template_id.as_str(), r);
    }
    out
}
