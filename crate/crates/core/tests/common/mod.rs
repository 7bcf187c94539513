//! Brute-force metric oracles and random evaluation instances shared by the
//! evaluation and acceptance tests. Everything here is written from the
//! metric definitions without calling the library's metric code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniark::evaluation::RelationMetrics;
use uniark::probing::{PredictionRecord, Variant};
use uniark::world::{
    split_templates, Cardinality, FactTriple, FactWorld, LengthClass, Relation, Split, Template,
    TemplateSplit,
};

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

fn counts<'a>(labels: &[&'a str]) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        *m.entry(*l).or_insert(0) += 1;
    }
    m
}

/// Agreeing pairs counted through label multiplicities.
pub fn all_cst(preds: &[&str]) -> f64 {
    counts(preds).values().map(|&c| choose2(c)).sum::<f64>() / choose2(preds.len())
}

pub fn acc_cst(preds: &[&str], gold: &str) -> f64 {
    choose2(counts(preds).get(gold).copied().unwrap_or(0)) / choose2(preds.len())
}

pub fn raw_cst(raw: &str, preds: &[&str]) -> f64 {
    counts(preds).get(raw).copied().unwrap_or(0) as f64 / preds.len() as f64
}

/// Per-class precision and recall from a confusion table, F1 as their
/// harmonic mean, averaged over every label seen as gold or prediction.
pub fn macro_f1(pairs: &[(&str, &str)]) -> f64 {
    let mut confusion: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut labels = Vec::new();
    for &(g, p) in pairs {
        *confusion.entry((g, p)).or_insert(0) += 1;
        labels.push(g);
        labels.push(p);
    }
    labels.sort_unstable();
    labels.dedup();
    let mut sum = 0.0;
    for &c in &labels {
        let tp = confusion.get(&(c, c)).copied().unwrap_or(0) as f64;
        let predicted: usize = confusion
            .iter()
            .filter(|((_, p), _)| *p == c)
            .map(|(_, n)| n)
            .sum();
        let actual: usize = confusion
            .iter()
            .filter(|((g, _), _)| *g == c)
            .map(|(_, n)| n)
            .sum();
        let precision = if predicted == 0 {
            0.0
        } else {
            tp / predicted as f64
        };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        sum += if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    sum / labels.len() as f64
}

pub fn kl_bits(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a > 0.0 {
            s += a * (a.max(1e-12) / b.max(1e-12)).ln() / std::f64::consts::LN_2;
        }
    }
    s.max(0.0)
}

/// Raw-moment form of the correlation; zero variance gives 0.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (sx, sy): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 1e-12 || vy <= 1e-12 {
        return 0.0;
    }
    (n * sxy - sx * sy) / (vx * vy).sqrt()
}

fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n)
        .map(|i| tokens[i..i + n].to_vec())
        .collect()
}

/// Sentence BLEU with clipped counts found by linear search.
pub fn bleu(candidate: &str, reference: &str, n_max: usize) -> f64 {
    let lower = |s: &str| {
        s.split_whitespace()
            .map(|t| t.to_lowercase())
            .collect::<Vec<_>>()
    };
    let (c, r) = (lower(candidate), lower(reference));
    let mut logp = 0.0;
    for n in 1..=n_max {
        let cg = grams(&c, n);
        let mut pool = grams(&r, n);
        let mut matched = 0usize;
        for g in &cg {
            if let Some(i) = pool.iter().position(|x| x == g) {
                pool.swap_remove(i);
                matched += 1;
            }
        }
        let add = if n == 1 { 0.0 } else { 1.0 };
        let p = (matched as f64 + add) / (cg.len() as f64 + add);
        if p == 0.0 {
            return 0.0;
        }
        logp += p.ln() / n_max as f64;
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * logp.exp()
}

pub fn pairwise_bleu(texts: &[&str], n_max: usize) -> Vec<f64> {
    (1..=n_max)
        .map(|n| {
            let mut pairs = Vec::new();
            for (i, a) in texts.iter().enumerate() {
                for (j, b) in texts.iter().enumerate() {
                    if i != j {
                        pairs.push(bleu(a, b, n));
                    }
                }
            }
            pairs.iter().sum::<f64>() / pairs.len() as f64
        })
        .collect()
}

/// Exact two-sided signed-rank p-value by enumerating every sign pattern.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|x| *x != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            ranks[order[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let observed: f64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| ranks[k]).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n)
            .filter(|k| mask >> k & 1 == 1)
            .map(|k| ranks[k])
            .sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * le.min(ge) as f64 / total).min(1.0)
}

/// Two-sided p-value of the paired t statistic for five pairs, using the
/// closed-form Student t CDF with four degrees of freedom.
pub fn t_test_five(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), 5);
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / 5.0;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
    let t = (mean / (var / 5.0).sqrt()).abs();
    let u = 1.0 + t * t / 4.0;
    let cdf = 0.5 + 0.375 * (t / u.sqrt()) * (1.0 - t * t / (12.0 * u));
    2.0 * (1.0 - cdf)
}

/// A random world with one or two relations, up to five templates and up
/// to twenty subjects per relation, and predictions for every prompt.
pub struct Instance {
    pub world: FactWorld,
    pub split: TemplateSplit,
    pub records: Vec<PredictionRecord>,
    pub vocab_size: usize,
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.01..1.0)
            }
        })
        .collect();
    let s: f64 = v.iter().sum::<f64>() + 1e-3;
    v.iter().map(|x| (x + 1e-3 / n as f64) / s).collect()
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = ["o1", "o2", "o3", "o4"];
    let words = [
        "is", "the", "home", "of", "capital", "seat", "a", "in", "city",
    ];
    let n_rel = rng.gen_range(1..=2);
    let (mut relations, mut triples, mut templates) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..n_rel {
        let rid = format!("R{r}");
        relations.push(Relation {
            relation_id: rid.clone(),
            description: rid.clone(),
            cardinality: Cardinality::ManyToOne,
            stopwords: Vec::new(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
        });
        for s in 0..rng.gen_range(3..=20) {
            triples.push(FactTriple {
                relation_id: rid.clone(),
                subject: format!("s{r}x{s}"),
                object: objects.choose(&mut rng).unwrap().to_string(),
            });
        }
        let n_templates = rng.gen_range(3..=5);
        for t in 0..n_templates {
            let mut body: Vec<&str> = (0..rng.gen_range(1..5))
                .map(|_| *words.choose(&mut rng).unwrap())
                .collect();
            body.insert(0, "[X]");
            body.push("[Y]");
            if rng.gen_bool(0.5) {
                body.swap(0, 1);
            }
            let (split, class) = match t {
                0 => (Split::Train, LengthClass::Normal),
                1 => (Split::Train, LengthClass::Normal),
                2 => (Split::Test, LengthClass::Short),
                _ => (
                    Split::Test,
                    if rng.gen_bool(0.5) {
                        LengthClass::Long
                    } else {
                        LengthClass::Normal
                    },
                ),
            };
            templates.push(Template {
                relation_id: rid.clone(),
                template_id: format!("{rid}-t{t}"),
                template: body.join(" "),
                split,
                length_class: class,
                base: t == 0,
            });
        }
    }
    let world = FactWorld::new(relations, triples, templates).unwrap();
    let split = split_templates(&world).unwrap();
    let vocab_size = 8;
    let mut records = Vec::new();
    for t in &world.templates {
        for tr in world
            .triples
            .iter()
            .filter(|x| x.relation_id == t.relation_id)
        {
            let variants: &[Variant] = if t.base {
                &[Variant::Original, Variant::SubjectMasked]
            } else {
                &[Variant::Original]
            };
            for &v in variants {
                let argmax = if rng.gen_bool(0.4) {
                    tr.object.clone()
                } else {
                    objects.choose(&mut rng).unwrap().to_string()
                };
                let gold_rank = if argmax == tr.object {
                    1
                } else {
                    rng.gen_range(2..=vocab_size)
                };
                records.push(PredictionRecord {
                    relation_id: tr.relation_id.clone(),
                    template_id: t.template_id.clone(),
                    sample_id: tr.subject.clone(),
                    variant: v,
                    topk: vec![(argmax.clone(), 0.5)],
                    argmax,
                    gold: tr.object.clone(),
                    gold_rank,
                    probs: t.base.then(|| random_dist(&mut rng, vocab_size)),
                });
            }
        }
    }
    Instance {
        world,
        split,
        records,
        vocab_size,
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Every metric of one relation recomputed from the raw records.
pub fn oracle_relation(inst: &Instance, relation_id: &str) -> RelationMetrics {
    let recs: Vec<&PredictionRecord> = inst
        .records
        .iter()
        .filter(|r| r.relation_id == relation_id)
        .collect();
    let base = inst
        .split
        .tune_template(relation_id)
        .unwrap()
        .template_id
        .clone();
    let id: Vec<String> = inst
        .split
        .id_of(relation_id)
        .map(|t| t.template_id.clone())
        .collect();
    let ood: Vec<String> = inst
        .split
        .ood_of(relation_id)
        .map(|t| t.template_id.clone())
        .collect();
    let pick = |v: Variant, ids: &[String]| -> Vec<&PredictionRecord> {
        recs.iter()
            .copied()
            .filter(|r| r.variant == v && ids.contains(&r.template_id))
            .collect()
    };
    let hit = |rs: &[&PredictionRecord]| {
        rs.iter().filter(|r| r.argmax == r.gold).count() as f64 / rs.len() as f64
    };
    let f1 = |rs: &[&PredictionRecord]| {
        let pairs: Vec<(&str, &str)> = rs
            .iter()
            .map(|r| (r.gold.as_str(), r.argmax.as_str()))
            .collect();
        macro_f1(&pairs)
    };
    let base_ids = [base.clone()];
    let orig = pick(Variant::Original, &base_ids);
    let masked = pick(Variant::SubjectMasked, &base_ids);
    let (mut klds, mut xs, mut ys, mut wx, mut wy) = (vec![], vec![], vec![], vec![], vec![]);
    for o in &orig {
        let m = masked.iter().find(|m| m.sample_id == o.sample_id).unwrap();
        klds.push(kl_bits(
            m.probs.as_ref().unwrap(),
            o.probs.as_ref().unwrap(),
        ));
        xs.push(o.gold_rank as f64);
        ys.push(m.gold_rank as f64);
        if o.gold_rank != 1 {
            wx.push(o.gold_rank as f64);
            wy.push(m.gold_rank as f64);
        }
    }
    let paras: Vec<String> = id.iter().chain(&ood).cloned().collect();
    let (mut raw, mut all, mut acc) = (vec![], vec![], vec![]);
    for o in &orig {
        let preds: Vec<&str> = recs
            .iter()
            .filter(|r| {
                r.variant == Variant::Original
                    && r.sample_id == o.sample_id
                    && paras.contains(&r.template_id)
            })
            .map(|r| r.argmax.as_str())
            .collect();
        if preds.len() >= 2 {
            all.push(all_cst(&preds));
            acc.push(acc_cst(&preds, &o.gold));
        }
        if !preds.is_empty() {
            raw.push(raw_cst(&o.argmax, &preds));
        }
    }
    let texts: Vec<&str> = inst
        .world
        .templates
        .iter()
        .filter(|t| t.relation_id == relation_id)
        .map(|t| t.template.as_str())
        .collect();
    let id_recs = pick(Variant::Original, &id);
    let ood_recs = pick(Variant::Original, &ood);
    RelationMetrics {
        relation_id: relation_id.to_string(),
        n_samples: orig.len(),
        hit1: hit(&orig),
        macro_f1: f1(&orig),
        id_hit1: (!id_recs.is_empty()).then(|| hit(&id_recs)),
        id_f1: (!id_recs.is_empty()).then(|| f1(&id_recs)),
        ood_hit1: (!ood_recs.is_empty()).then(|| hit(&ood_recs)),
        ood_f1: (!ood_recs.is_empty()).then(|| f1(&ood_recs)),
        ct_hit1: hit(&masked),
        kld_bits: mean(&klds).unwrap(),
        pearson_r_all: pearson(&xs, &ys),
        pearson_r_wrong: (wx.len() >= 2).then(|| pearson(&wx, &wy)),
        raw_cst: mean(&raw),
        all_cst: mean(&all),
        acc_cst: mean(&acc),
        pairwise_bleu: pairwise_bleu(&texts, 4),
    }
}

/// Largest absolute difference across every shared metric.
pub fn max_metric_gap(a: &RelationMetrics, b: &RelationMetrics) -> f64 {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let mut gaps = vec![
        (a.hit1 - b.hit1).abs(),
        (a.macro_f1 - b.macro_f1).abs(),
        opt(a.id_hit1, b.id_hit1),
        opt(a.id_f1, b.id_f1),
        opt(a.ood_hit1, b.ood_hit1),
        opt(a.ood_f1, b.ood_f1),
        (a.ct_hit1 - b.ct_hit1).abs(),
        (a.kld_bits - b.kld_bits).abs(),
        (a.pearson_r_all - b.pearson_r_all).abs(),
        opt(a.pearson_r_wrong, b.pearson_r_wrong),
        opt(a.raw_cst, b.raw_cst),
        opt(a.all_cst, b.all_cst),
        opt(a.acc_cst, b.acc_cst),
    ];
    if a.pairwise_bleu.len() != b.pairwise_bleu.len() || a.n_samples != b.n_samples {
        gaps.push(f64::INFINITY);
    }
    gaps.extend(
        a.pairwise_bleu
            .iter()
            .zip(&b.pairwise_bleu)
            .map(|(x, y)| (x - y).abs()),
    );
    gaps.into_iter().fold(0.0, f64::max)
}
