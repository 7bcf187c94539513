//! A small post-LayerNorm transformer encoder with an MLM head and optional
//! bottleneck adapters after the attention and feed-forward sub-layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    Attn,
    Ffn,
    Both,
}

impl AdapterPlacement {
    pub fn sublayers(self) -> usize {
        match self {
            AdapterPlacement::Both => 2,
            _ => 1,
        }
    }

    fn attn(self) -> bool {
        matches!(self, AdapterPlacement::Attn | AdapterPlacement::Both)
    }

    fn ffn(self) -> bool {
        matches!(self, AdapterPlacement::Ffn | AdapterPlacement::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    /// Adapter bottleneck width; 0 means no adapters.
    pub adapter_dim: usize,
    pub adapter_placement: AdapterPlacement,
    pub tie_embeddings: bool,
    pub mask_token_id: usize,
    pub pad_token_id: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 || self.max_seq_len == 0 || self.d_model == 0 {
            return fail("vocab_size, max_seq_len and d_model must be positive".into());
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.ffn_width == 0 {
            return fail("n_layers, n_heads and ffn_width must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.adapter_dim >= self.d_model {
            return fail(format!(
                "adapter_dim {} must be smaller than d_model {}",
                self.adapter_dim, self.d_model
            ));
        }
        if self.mask_token_id >= self.vocab_size || self.pad_token_id >= self.vocab_size {
            return fail("special token ids out of vocabulary".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which parameters are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    None,
    Finetune,
    Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter<T> {
    pub down: T,
    pub up: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_in: T,
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub attn_adapter: Option<Adapter<T>>,
    pub ffn_adapter: Option<Adapter<T>>,
}

/// The full parameter set, generic so the same layout can hold tensors,
/// graph handles, gradients or optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub emb_ln_gain: T,
    pub emb_ln_bias: T,
    pub layers: Vec<Layer<T>>,
    /// Absent when the output projection is tied to `tok_emb`.
    pub head_weight: Option<T>,
    pub head_bias: T,
}

impl<T> Params<T> {
    /// Visits every parameter in canonical order.
    pub fn visit<'s>(&'s self, mut f: impl FnMut(&str, ParamGroup, &'s T)) {
        use ParamGroup::*;
        f("embeddings.token", Base, &self.tok_emb);
        f("embeddings.position", Base, &self.pos_emb);
        f("embeddings.ln.gain", Base, &self.emb_ln_gain);
        f("embeddings.ln.bias", Base, &self.emb_ln_bias);
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            f(&n("attn.q.weight"), Base, &l.wq);
            f(&n("attn.q.bias"), Base, &l.bq);
            f(&n("attn.k.weight"), Base, &l.wk);
            f(&n("attn.k.bias"), Base, &l.bk);
            f(&n("attn.v.weight"), Base, &l.wv);
            f(&n("attn.v.bias"), Base, &l.bv);
            f(&n("attn.out.weight"), Base, &l.wo);
            f(&n("attn.out.bias"), Base, &l.bo);
            f(&n("ln1.gain"), Base, &l.ln1_gain);
            f(&n("ln1.bias"), Base, &l.ln1_bias);
            f(&n("ffn.in.weight"), Base, &l.w_in);
            f(&n("ffn.in.bias"), Base, &l.b_in);
            f(&n("ffn.out.weight"), Base, &l.w_out);
            f(&n("ffn.out.bias"), Base, &l.b_out);
            f(&n("ln2.gain"), Base, &l.ln2_gain);
            f(&n("ln2.bias"), Base, &l.ln2_bias);
            if let Some(a) = &l.attn_adapter {
                f(&n("adapter_attn.down"), Adapter, &a.down);
                f(&n("adapter_attn.up"), Adapter, &a.up);
            }
            if let Some(a) = &l.ffn_adapter {
                f(&n("adapter_ffn.down"), Adapter, &a.down);
                f(&n("adapter_ffn.up"), Adapter, &a.up);
            }
        }
        if let Some(w) = &self.head_weight {
            f("head.weight", Base, w);
        }
        f("head.bias", Base, &self.head_bias);
    }

    /// Rebuilds the same layout with new leaf values, in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, ParamGroup, &T) -> U) -> Params<U> {
        let mut out: Vec<U> = Vec::new();
        self.visit(|name, group, t| out.push(f(name, group, t)));
        self.rebuild(out)
    }

    /// Places values (in canonical order) into this layout.
    pub fn rebuild<U>(&self, values: Vec<U>) -> Params<U> {
        let mut it = values.into_iter();
        let mut next = || it.next().expect("value count matches layout");
        let tok_emb = next();
        let pos_emb = next();
        let emb_ln_gain = next();
        let emb_ln_bias = next();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut layer = Layer {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                w_in: next(),
                b_in: next(),
                w_out: next(),
                b_out: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                attn_adapter: None,
                ffn_adapter: None,
            };
            if l.attn_adapter.is_some() {
                layer.attn_adapter = Some(Adapter {
                    down: next(),
                    up: next(),
                });
            }
            if l.ffn_adapter.is_some() {
                layer.ffn_adapter = Some(Adapter {
                    down: next(),
                    up: next(),
                });
            }
            layers.push(layer);
        }
        let head_weight = self.head_weight.as_ref().map(|_| next());
        let head_bias = next();
        Params {
            tok_emb,
            pos_emb,
            emb_ln_gain,
            emb_ln_bias,
            layers,
            head_weight,
            head_bias,
        }
    }

    pub fn into_values(self) -> Vec<T> {
        let mut out = Vec::new();
        let Params {
            tok_emb,
            pos_emb,
            emb_ln_gain,
            emb_ln_bias,
            layers,
            head_weight,
            head_bias,
        } = self;
        out.extend([tok_emb, pos_emb, emb_ln_gain, emb_ln_bias]);
        for l in layers {
            out.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_gain, l.ln1_bias, l.w_in,
                l.b_in, l.w_out, l.b_out, l.ln2_gain, l.ln2_bias,
            ]);
            if let Some(a) = l.attn_adapter {
                out.extend([a.down, a.up]);
            }
            if let Some(a) = l.ffn_adapter {
                out.extend([a.down, a.up]);
            }
        }
        out.extend(head_weight);
        out.push(head_bias);
        out
    }

    pub fn has_adapters(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.attn_adapter.is_some() || l.ffn_adapter.is_some())
    }
}

impl Params<Tensor> {
    pub fn values_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_gain,
            &mut self.emb_ln_bias,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_in,
                &mut l.b_in,
                &mut l.w_out,
                &mut l.b_out,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
            if let Some(a) = &mut l.attn_adapter {
                out.extend([&mut a.down, &mut a.up]);
            }
            if let Some(a) = &mut l.ffn_adapter {
                out.extend([&mut a.down, &mut a.up]);
            }
        }
        if let Some(w) = &mut self.head_weight {
            out.push(w);
        }
        out.push(&mut self.head_bias);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
    pub seed: u64,
}

const LN_EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("nonzero shape")
}

fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

fn new_adapter(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Adapter<Tensor> {
    Adapter {
        down: linear(rng, d, k),
        up: Tensor::zeros(&[k, d]),
    }
}

/// Deterministic initialization: scaled uniform weights, zero biases, unit
/// LayerNorm gains. Adapters (when `adapter_dim > 0`) start with `up = 0`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let f = config.ffn_width;
    let v = config.vocab_size;
    let tok_emb = uniform(&mut rng, &[v, d], 0.1);
    let pos_emb = uniform(&mut rng, &[config.max_seq_len, d], 0.1);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(Layer {
            wq: linear(&mut rng, d, d),
            bq: Tensor::zeros(&[d]),
            wk: linear(&mut rng, d, d),
            bk: Tensor::zeros(&[d]),
            wv: linear(&mut rng, d, d),
            bv: Tensor::zeros(&[d]),
            wo: linear(&mut rng, d, d),
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w_in: linear(&mut rng, d, f),
            b_in: Tensor::zeros(&[f]),
            w_out: linear(&mut rng, f, d),
            b_out: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            attn_adapter: None,
            ffn_adapter: None,
        });
    }
    let head_weight = (!config.tie_embeddings).then(|| linear(&mut rng, d, v));
    let mut state = ModelState {
        config: ModelConfig {
            adapter_dim: 0,
            ..config.clone()
        },
        params: Params {
            tok_emb,
            pos_emb,
            emb_ln_gain: Tensor::full(&[d], 1.0),
            emb_ln_bias: Tensor::zeros(&[d]),
            layers,
            head_weight,
            head_bias: Tensor::zeros(&[v]),
        },
        seed,
    };
    if config.adapter_dim > 0 {
        state = insert_adapters(state, config.adapter_dim, seed.wrapping_add(1))?;
    }
    Ok(state)
}

/// Adds adapters to every layer with zero-initialized up-projections, so the
/// model output is unchanged until the adapters are trained.
pub fn insert_adapters(mut state: ModelState, adapter_dim: usize, seed: u64) -> Result<ModelState> {
    if adapter_dim == 0 {
        return Err(Error::Model("adapter_dim must be positive".into()));
    }
    if state.params.has_adapters() {
        return Err(Error::Model("adapters already present".into()));
    }
    let d = state.config.d_model;
    if adapter_dim >= d {
        return Err(Error::Config(format!(
            "adapter_dim {adapter_dim} must be smaller than d_model {d}"
        )));
    }
    let placement = state.config.adapter_placement;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut state.params.layers {
        if placement.attn() {
            layer.attn_adapter = Some(new_adapter(&mut rng, d, adapter_dim));
        }
        if placement.ffn() {
            layer.ffn_adapter = Some(new_adapter(&mut rng, d, adapter_dim));
        }
    }
    state.config.adapter_dim = adapter_dim;
    Ok(state)
}

impl ModelState {
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.params.visit(|_, _, t| n += t.numel());
        n
    }

    pub fn named_parameters(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        self.params
            .visit(|name, group, t| out.push((name.to_string(), group, t)));
        out
    }

    /// Per-parameter trainability under `set`, in canonical order.
    pub fn trainable_mask(&self, set: TrainableSet) -> Result<Vec<bool>> {
        if set == TrainableSet::Adapter && !self.params.has_adapters() {
            return Err(Error::Model(
                "adapter tuning requested but the model has no adapters".into(),
            ));
        }
        let mut mask = Vec::new();
        self.params.visit(|_, group, _| {
            mask.push(match set {
                TrainableSet::None => false,
                TrainableSet::Finetune => true,
                TrainableSet::Adapter => group == ParamGroup::Adapter,
            })
        });
        Ok(mask)
    }

    /// Binds parameters into `g`; only members of `set` require grad.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, set: TrainableSet) -> Result<Params<Var>> {
        let mask = self.trainable_mask(set)?;
        let mut vars = Vec::with_capacity(mask.len());
        self.params
            .visit(|_, _, t| vars.push(g.leaf_ref(t, mask[vars.len()])));
        Ok(self.params.rebuild(vars))
    }

    /// Logits (`[positions.len(), vocab]`) at the requested positions.
    pub fn forward_mlm(&self, token_ids: &[usize], mask_positions: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, TrainableSet::None)?;
        let logits = forward(&mut g, &p, &self.config, token_ids, mask_positions)?;
        Ok(g.tensor(logits))
    }
}

/// Names of the parameters that `mode` trains.
pub fn trainable_parameters(state: &ModelState, set: TrainableSet) -> Result<Vec<String>> {
    let mask = state.trainable_mask(set)?;
    Ok(state
        .named_parameters()
        .into_iter()
        .zip(mask)
        .filter(|(_, m)| *m)
        .map(|((name, _, _), _)| name)
        .collect())
}

/// `GELU(h · W_d) · W_u + h`, row-wise over `h`.
pub fn adapter_forward(g: &mut Graph<'_>, h: Var, down: Var, up: Var) -> Result<Var> {
    let z = g.matmul(h, down)?;
    let z = g.gelu(z);
    let z = g.matmul(z, up)?;
    if g.shape(z) != g.shape(h) {
        return Err(Error::shape(
            "adapter",
            format!("{:?} vs {:?}", g.shape(z), g.shape(h)),
        ));
    }
    g.add(z, h)
}

fn attention(
    g: &mut Graph<'_>,
    x: Var,
    l: &Layer<Var>,
    cfg: &ModelConfig,
    key_mask: Option<Var>,
) -> Result<Var> {
    let q = g.matmul(x, l.wq)?;
    let q = g.add_row(q, l.bq)?;
    let k = g.matmul(x, l.wk)?;
    let k = g.add_row(k, l.bk)?;
    let v = g.matmul(x, l.wv)?;
    let v = g.add_row(v, l.bv)?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let s = g.matmul_bt(qh, kh)?;
        let mut s = g.scale(s, scale);
        if let Some(m) = key_mask {
            s = g.add(s, m)?;
        }
        let p = g.softmax(s)?;
        heads.push(g.matmul(p, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let o = g.matmul(cat, l.wo)?;
    g.add_row(o, l.bo)
}

/// Builds the encoder forward pass in `g`, returning logits at `positions`.
pub fn forward(
    g: &mut Graph<'_>,
    p: &Params<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
    positions: &[usize],
) -> Result<Var> {
    let n = tokens.len();
    if n == 0 || n > cfg.max_seq_len {
        return Err(Error::OutOfRange {
            what: "sequence length",
            index: n,
            len: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = positions.iter().find(|&&pos| pos >= n) {
        return Err(Error::OutOfRange {
            what: "mask position",
            index: bad,
            len: n,
        });
    }
    let pos_ids: Vec<usize> = (0..n).collect();
    let te = g.embedding(p.tok_emb, tokens)?;
    let pe = g.embedding(p.pos_emb, &pos_ids)?;
    let x = g.add(te, pe)?;
    let mut x = g.layer_norm(x, p.emb_ln_gain, p.emb_ln_bias, LN_EPS)?;

    let key_mask = if tokens.contains(&cfg.pad_token_id) {
        let mut m = vec![0.0; n * n];
        for row in m.chunks_mut(n) {
            for (j, &t) in tokens.iter().enumerate() {
                if t == cfg.pad_token_id {
                    row[j] = f64::NEG_INFINITY;
                }
            }
        }
        Some(g.constant(Tensor::matrix(n, n, m)?))
    } else {
        None
    };

    for l in &p.layers {
        let mut a = attention(g, x, l, cfg, key_mask)?;
        if let Some(ad) = &l.attn_adapter {
            a = adapter_forward(g, a, ad.down, ad.up)?;
        }
        let r = g.add(x, a)?;
        x = g.layer_norm(r, l.ln1_gain, l.ln1_bias, LN_EPS)?;

        let h = g.matmul(x, l.w_in)?;
        let h = g.add_row(h, l.b_in)?;
        let h = g.gelu(h);
        let h = g.matmul(h, l.w_out)?;
        let mut h = g.add_row(h, l.b_out)?;
        if let Some(ad) = &l.ffn_adapter {
            h = adapter_forward(g, h, ad.down, ad.up)?;
        }
        let r = g.add(x, h)?;
        x = g.layer_norm(r, l.ln2_gain, l.ln2_bias, LN_EPS)?;
    }

    let sel = g.select_rows(x, positions)?;
    let logits = match p.head_weight {
        Some(w) => g.matmul(sel, w)?,
        None => g.matmul_bt(sel, p.tok_emb)?,
    };
    g.add_row(logits, p.head_bias)
}
