use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bleu::pairwise_bleu;
use super::metrics::{
    consistency_acc, consistency_all, consistency_raw, ct_hit1, hit_at_1, kld_subject_masked,
    macro_f1, pearson_r_ranks, predictions_by_sample, KldDirection,
};
use super::stats::{paired_t_test, wilcoxon_signed_rank, Significance, MIN_PAIRS};
use crate::error::{Error, Result};
use crate::probing::{PredictionRecord, Variant};
use crate::world::{filter_nm_relations, FactWorld, TemplateSplit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub kld_direction: KldDirection,
    /// Relations dropped from consistency metrics besides N-M ones.
    #[serde(default)]
    pub exclude_relations: Vec<String>,
    pub bleu_max_n: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            kld_direction: KldDirection::MaskedToOriginal,
            exclude_relations: Vec::new(),
            bleu_max_n: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub mode: String,
    /// Training and loss settings in effect.
    #[serde(default)]
    pub settings: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationMetrics {
    pub relation_id: String,
    pub n_samples: usize,
    pub hit1: f64,
    pub macro_f1: f64,
    pub id_hit1: Option<f64>,
    pub id_f1: Option<f64>,
    pub ood_hit1: Option<f64>,
    pub ood_f1: Option<f64>,
    pub ct_hit1: f64,
    pub kld_bits: f64,
    pub pearson_r_all: f64,
    pub pearson_r_wrong: Option<f64>,
    pub raw_cst: Option<f64>,
    pub all_cst: Option<f64>,
    pub acc_cst: Option<f64>,
    pub pairwise_bleu: Vec<f64>,
}

/// Metric names accepted by [`RelationMetrics::get`].
pub const METRIC_NAMES: [&str; 14] = [
    "hit1",
    "macro_f1",
    "id_hit1",
    "id_f1",
    "ood_hit1",
    "ood_f1",
    "ct_hit1",
    "kld_bits",
    "pearson_r_all",
    "pearson_r_wrong",
    "raw_cst",
    "all_cst",
    "acc_cst",
    "bleu4",
];

impl RelationMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "hit1" => Some(self.hit1),
            "macro_f1" => Some(self.macro_f1),
            "id_hit1" => self.id_hit1,
            "id_f1" => self.id_f1,
            "ood_hit1" => self.ood_hit1,
            "ood_f1" => self.ood_f1,
            "ct_hit1" => Some(self.ct_hit1),
            "kld_bits" => Some(self.kld_bits),
            "pearson_r_all" => Some(self.pearson_r_all),
            "pearson_r_wrong" => self.pearson_r_wrong,
            "raw_cst" => self.raw_cst,
            "all_cst" => self.all_cst,
            "acc_cst" => self.acc_cst,
            "bleu4" => self.pairwise_bleu.get(3).copied(),
            _ => None,
        }
    }

    fn mean_of(id: &str, rows: &[&RelationMetrics]) -> RelationMetrics {
        let req = |f: fn(&RelationMetrics) -> f64| {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        let opt = |f: fn(&RelationMetrics) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let bleu_len = rows
            .iter()
            .map(|r| r.pairwise_bleu.len())
            .max()
            .unwrap_or(0);
        RelationMetrics {
            relation_id: id.to_string(),
            n_samples: rows.iter().map(|r| r.n_samples).sum(),
            hit1: req(|r| r.hit1),
            macro_f1: req(|r| r.macro_f1),
            id_hit1: opt(|r| r.id_hit1),
            id_f1: opt(|r| r.id_f1),
            ood_hit1: opt(|r| r.ood_hit1),
            ood_f1: opt(|r| r.ood_f1),
            ct_hit1: req(|r| r.ct_hit1),
            kld_bits: req(|r| r.kld_bits),
            pearson_r_all: req(|r| r.pearson_r_all),
            pearson_r_wrong: opt(|r| r.pearson_r_wrong),
            raw_cst: opt(|r| r.raw_cst),
            all_cst: opt(|r| r.all_cst),
            acc_cst: opt(|r| r.acc_cst),
            pairwise_bleu: (0..bleu_len)
                .map(|i| {
                    rows.iter()
                        .filter_map(|r| r.pairwise_bleu.get(i))
                        .sum::<f64>()
                        / rows.len() as f64
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Provenance,
    /// How each metric was computed.
    pub conventions: Vec<String>,
    pub relations: Vec<RelationMetrics>,
    pub aggregate: RelationMetrics,
    #[serde(default)]
    pub significance: Vec<Significance>,
}

fn conventions(opts: &EvalOptions) -> Vec<String> {
    vec![
        "hit1/macro_f1: base template; id_*: in-domain paraphrases; ood_*: short, long and held-out normal paraphrases".into(),
        "macro_f1: per-label F1 over every label seen as gold or prediction, macro-averaged, then averaged over relations".into(),
        format!(
            "kld_bits: {} in bits on the base template, floors 1e-12, mean over samples then relations",
            match opts.kld_direction {
                KldDirection::MaskedToOriginal => "KL(subject-masked || original)",
                KldDirection::OriginalToMasked => "KL(original || subject-masked)",
            }
        ),
        "consistency: over all paraphrase templates of non-N-M relations, mean over samples then relations; raw_cst against the base template".into(),
        "pearson: gold ranks of original vs subject-masked base prompts; zero variance gives 0".into(),
        "pairwise_bleu: cumulative BLEU-1..4 over ordered template pairs, lowercased, add-one smoothing above unigrams".into(),
    ]
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn relation_metrics(
    relation_id: &str,
    records: &[&PredictionRecord],
    world: &FactWorld,
    split: &TemplateSplit,
    consistency: bool,
    opts: &EvalOptions,
) -> Result<RelationMetrics> {
    let gap = |what: &str| Error::metric("report", format!("relation {relation_id}: {what}"));
    let base = split
        .tune_template(relation_id)
        .ok_or_else(|| gap("no base template"))?
        .template_id
        .as_str();
    let of = |variant: Variant, ids: &BTreeSet<&str>| -> Vec<&PredictionRecord> {
        records
            .iter()
            .copied()
            .filter(|r| r.variant == variant && ids.contains(r.template_id.as_str()))
            .collect()
    };
    let base_set: BTreeSet<&str> = [base].into();
    let id_set: BTreeSet<&str> = split
        .id_of(relation_id)
        .map(|t| t.template_id.as_str())
        .collect();
    let ood_set: BTreeSet<&str> = split
        .ood_of(relation_id)
        .map(|t| t.template_id.as_str())
        .collect();
    let para_set: BTreeSet<&str> = id_set.union(&ood_set).copied().collect();

    let original = of(Variant::Original, &base_set);
    let masked = of(Variant::SubjectMasked, &base_set);
    if original.is_empty() {
        return Err(gap("no original base-template records"));
    }
    if masked.is_empty() {
        return Err(gap("no subject-masked records"));
    }
    let id = of(Variant::Original, &id_set);
    let ood = of(Variant::Original, &ood_set);

    let by_sample = predictions_by_sample(original.iter().copied());
    let masked_by_sample = predictions_by_sample(masked.iter().copied());
    let mut klds = Vec::new();
    let mut rank_pairs = Vec::new();
    for (key, templates) in &by_sample {
        let o = templates[base];
        let m = masked_by_sample
            .get(key)
            .and_then(|t| t.get(base))
            .ok_or_else(|| gap("original record without subject-masked counterpart"))?;
        let (po, pm) = match (&o.probs, &m.probs) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(gap("base-template records lack full distributions")),
        };
        klds.push(kld_subject_masked(pm, po, opts.kld_direction)?);
        rank_pairs.push((o.gold_rank, m.gold_rank));
    }
    let (r_all, r_wrong) = pearson_r_ranks(&rank_pairs)?;

    let (mut raw, mut all, mut acc) = (Vec::new(), Vec::new(), Vec::new());
    if consistency && !para_set.is_empty() {
        let paras = of(Variant::Original, &para_set);
        let para_by_sample = predictions_by_sample(paras.iter().copied());
        for (key, templates) in &para_by_sample {
            let preds: Vec<&str> = templates.values().map(|r| r.argmax.as_str()).collect();
            if preds.len() >= 2 {
                all.push(consistency_all(&preds)?);
                acc.push(consistency_acc(&preds, key.1)?);
            }
            if let Some(b) = by_sample.get(key).and_then(|t| t.get(base)) {
                raw.push(consistency_raw(&b.argmax, &preds)?);
            }
        }
    }

    let texts: Vec<&str> = world
        .templates_of(relation_id)
        .map(|t| t.template.as_str())
        .collect();
    Ok(RelationMetrics {
        relation_id: relation_id.to_string(),
        n_samples: original.len(),
        hit1: hit_at_1(&original)?,
        macro_f1: macro_f1(&original)?,
        id_hit1: if id.is_empty() {
            None
        } else {
            Some(hit_at_1(&id)?)
        },
        id_f1: if id.is_empty() {
            None
        } else {
            Some(macro_f1(&id)?)
        },
        ood_hit1: if ood.is_empty() {
            None
        } else {
            Some(hit_at_1(&ood)?)
        },
        ood_f1: if ood.is_empty() {
            None
        } else {
            Some(macro_f1(&ood)?)
        },
        ct_hit1: ct_hit1(&masked)?,
        kld_bits: mean(&klds).ok_or_else(|| gap("no KLD pairs"))?,
        pearson_r_all: r_all,
        pearson_r_wrong: r_wrong,
        raw_cst: mean(&raw),
        all_cst: mean(&all),
        acc_cst: mean(&acc),
        pairwise_bleu: pairwise_bleu(&texts, opts.bleu_max_n),
    })
}

/// Computes every metric per relation (ascending id) and their means.
pub fn build_report(
    records: &[PredictionRecord],
    world: &FactWorld,
    split: &TemplateSplit,
    opts: &EvalOptions,
    provenance: Provenance,
) -> Result<MetricsReport> {
    let consistent: BTreeSet<String> = filter_nm_relations(world, &opts.exclude_relations)?
        .into_iter()
        .collect();
    let mut ids: Vec<&str> = world
        .relations
        .iter()
        .map(|r| r.relation_id.as_str())
        .collect();
    ids.sort_unstable();
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    for id in ids {
        let recs: Vec<&PredictionRecord> = records.iter().filter(|r| r.relation_id == id).collect();
        match relation_metrics(id, &recs, world, split, consistent.contains(id), opts) {
            Ok(m) => rows.push(m),
            Err(e) => gaps.push(e.to_string()),
        }
    }
    if !gaps.is_empty() {
        return Err(Error::metric(
            "report",
            format!("missing metrics: {}", gaps.join("; ")),
        ));
    }
    let refs: Vec<&RelationMetrics> = rows.iter().collect();
    let aggregate = RelationMetrics::mean_of("mean", &refs);
    Ok(MetricsReport {
        provenance,
        conventions: conventions(opts),
        relations: rows,
        aggregate,
        significance: Vec::new(),
    })
}

/// Per-relation means over several runs (for example, seeds).
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::metric("report", "nothing to average"))?;
    let mut rows = Vec::new();
    for r in &first.relations {
        let same: Vec<&RelationMetrics> = reports
            .iter()
            .map(|rep| {
                rep.relations
                    .iter()
                    .find(|x| x.relation_id == r.relation_id)
                    .ok_or_else(|| {
                        Error::metric("report", format!("relation {} missing", r.relation_id))
                    })
            })
            .collect::<Result<_>>()?;
        let mut m = RelationMetrics::mean_of(&r.relation_id, &same);
        m.n_samples = r.n_samples;
        rows.push(m);
    }
    let refs: Vec<&RelationMetrics> = rows.iter().collect();
    let mut provenance = first.provenance.clone();
    provenance.seeds = reports
        .iter()
        .flat_map(|r| r.provenance.seeds.clone())
        .collect();
    Ok(MetricsReport {
        provenance,
        conventions: first.conventions.clone(),
        aggregate: RelationMetrics::mean_of("mean", &refs),
        relations: rows,
        significance: Vec::new(),
    })
}

/// Paired tests across relations for every metric both reports define on
/// at least [`MIN_PAIRS`] common relations.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Result<Vec<Significance>> {
    let mut out = Vec::new();
    for metric in METRIC_NAMES {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for ra in &a.relations {
            if let Some(rb) = b.relations.iter().find(|r| r.relation_id == ra.relation_id) {
                if let (Some(x), Some(y)) = (ra.get(metric), rb.get(metric)) {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        if xs.len() < MIN_PAIRS {
            continue;
        }
        out.push(Significance {
            metric: metric.to_string(),
            mean_a: xs.iter().sum::<f64>() / xs.len() as f64,
            mean_b: ys.iter().sum::<f64>() / ys.len() as f64,
            t_test_p: paired_t_test(&xs, &ys)?,
            wilcoxon_p: wilcoxon_signed_rank(&xs, &ys)?,
        });
    }
    if out.is_empty() {
        return Err(Error::metric(
            "compare",
            format!("reports share fewer than {MIN_PAIRS} relations"),
        ));
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let p = &self.provenance;
        let _ = writeln!(s, "# Metrics report\n");
        let _ = writeln!(s, "- mode: {}", p.mode);
        let _ = writeln!(s, "- config hash: {}", p.config_hash);
        let seeds: Vec<String> = p.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "- seeds: {}", seeds.join(", "));
        for c in &self.conventions {
            let _ = writeln!(s, "- {c}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "| relation | hit1 | F1 | ID hit1 | OOD hit1 | OOD F1 | CT_hit1 | KLD | R all | R wrong | raw_cst | all_cst | acc_cst | BLEU-4 |"
        );
        let _ = writeln!(s, "|{}", "---|".repeat(14));
        for r in self
            .relations
            .iter()
            .chain(std::iter::once(&self.aggregate))
        {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.relation_id,
                cell(Some(r.hit1)),
                cell(Some(r.macro_f1)),
                cell(r.id_hit1),
                cell(r.ood_hit1),
                cell(r.ood_f1),
                cell(Some(r.ct_hit1)),
                cell(Some(r.kld_bits)),
                cell(Some(r.pearson_r_all)),
                cell(r.pearson_r_wrong),
                cell(r.raw_cst),
                cell(r.all_cst),
                cell(r.acc_cst),
                cell(r.pairwise_bleu.get(3).copied()),
            );
        }
        if !self.significance.is_empty() {
            let _ = writeln!(
                s,
                "\n| metric | mean A | mean B | t-test p | Wilcoxon p |\n|---|---|---|---|---|"
            );
            for g in &self.significance {
                let _ = writeln!(
                    s,
                    "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    g.metric, g.mean_a, g.mean_b, g.t_test_p, g.wilcoxon_p
                );
            }
        }
        s
    }
}

/// Markdown table of metric deltas with significance.
pub fn comparison_markdown(a: &MetricsReport, b: &MetricsReport, tests: &[Significance]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# Comparison: {} (A) vs {} (B)\n",
        a.provenance.mode, b.provenance.mode
    );
    let _ = writeln!(
        s,
        "| metric | mean A | mean B | B - A | t-test p | Wilcoxon p |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for t in tests {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:+.4} | {:.4} | {:.4} |",
            t.metric,
            t.mean_a,
            t.mean_b,
            t.mean_b - t.mean_a,
            t.t_test_p,
            t.wilcoxon_p
        );
    }
    s
}
