use std::collections::BTreeMap;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Cumulative BLEU-`n_max` of `candidate` against one `reference`, with
/// add-one smoothing on precisions of order above 1.
pub fn sentence_bleu(candidate: &str, reference: &str, n_max: usize) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || n_max == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let cand = ngrams(&c, n);
        let refs = ngrams(&r, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let smooth = if n > 1 { 1.0 } else { 0.0 };
        let p = (matched as f64 + smooth) / (total as f64 + smooth);
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * (log_sum / n_max as f64).exp()
}

/// Mean BLEU-1..`n_max` over all ordered pairs of distinct templates.
pub fn pairwise_bleu<S: AsRef<str>>(templates: &[S], n_max: usize) -> Vec<f64> {
    let k = templates.len();
    let mut out = vec![0.0; n_max];
    if k < 2 {
        return out;
    }
    for (n, slot) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += sentence_bleu(templates[i].as_ref(), templates[j].as_ref(), n + 1);
                }
            }
        }
        *slot = s / (k * (k - 1)) as f64;
    }
    out
}
