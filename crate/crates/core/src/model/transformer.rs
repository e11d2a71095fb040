use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{NritError, Result};
use crate::mask::GradientMask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::tokenizer::{TokenId, EOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// FFN hidden width, i.e. neurons per layer.
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Six layers of width 64 with 128 FFN neurons each.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 256,
            vocab_size,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(NritError::Config(format!("model.{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(NritError::Config(format!(
                "model.d_model={} is not divisible by model.n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head: ParamId,
}

/// Names of the three tensors owning FFN neurons in a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FfnNames {
    /// `d_model x d_ff`; neuron `j` owns column `j`.
    pub w1: String,
    /// `d_ff`; neuron `j` owns entry `j`.
    pub b1: String,
    /// `d_ff x d_model`; neuron `j` owns row `j`.
    pub w2: String,
}

/// Captures, and optionally replaces, the FFN hidden vector of one layer at
/// one position. `position: None` means the last position of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProbe {
    pub layer: usize,
    pub position: Option<usize>,
    pub captured: Option<Tensor>,
    pub override_value: Option<Tensor>,
}

impl ActivationProbe {
    pub fn capture(layer: usize) -> Self {
        ActivationProbe {
            layer,
            position: None,
            captured: None,
            override_value: None,
        }
    }

    pub fn with_override(layer: usize, value: Tensor) -> Self {
        ActivationProbe {
            override_value: Some(value),
            ..Self::capture(layer)
        }
    }

    pub fn at(mut self, position: usize) -> Self {
        self.position = Some(position);
        self
    }
}

/// Which rows of the final hidden state get projected to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
    Range(usize, usize),
}

/// Where parameter leaves come from, and whether they collect gradients.
#[derive(Clone, Copy)]
pub(crate) struct Src<'a> {
    store: &'a ParamStore,
    trainable: bool,
    /// Per-parameter override of `trainable`, in store order.
    only: Option<&'a [bool]>,
}

impl<'a> Src<'a> {
    fn node(self, g: &mut Graph<'a>, id: ParamId) -> NodeId {
        if self.trainable && self.only.is_none_or(|o| o[id.0]) {
            g.param(self.store, id)
        } else {
            g.frozen_param(self.store, id)
        }
    }
}

/// Resolved probe: layer, row within the current input, override node.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProbeSlot {
    pub layer: usize,
    pub row: usize,
    pub override_node: Option<NodeId>,
}

pub(crate) struct LayerNodes {
    pub k: NodeId,
    pub v: NodeId,
    pub mid: NodeId,
    pub hidden: NodeId,
}

pub(crate) struct RunOut {
    pub logits: NodeId,
    pub layers: Vec<LayerNodes>,
}

/// Keys and values of already-processed positions, per layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&mut self, k: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        for (layer, (nk, nv)) in k.into_iter().zip(v).enumerate() {
            self.k[layer] = stack_rows(&self.k[layer], &nk)?;
            self.v[layer] = stack_rows(&self.v[layer], &nv)?;
        }
        Ok(())
    }
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Everything needed to replay the forward pass from one layer's FFN at the
/// final position of a fixed prompt.
///
/// Because attention is causal, replacing the FFN hidden vector of the last
/// position only changes that position's residual stream in later layers;
/// the keys and values of earlier positions stay as cached here.
#[derive(Debug, Clone)]
pub struct ProbeContext {
    pub len: usize,
    /// Keys and values of positions `0..len-1` per layer (`None` for a one-token prompt).
    prefix: Vec<Option<(Tensor, Tensor)>>,
    /// Residual stream after attention at the last position, per layer.
    mid: Vec<Tensor>,
    /// FFN hidden vector at the last position, per layer.
    pub hidden: Vec<Tensor>,
    pub last_logits: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub selected: usize,
    pub fraction: f64,
}

impl ParamCount {
    pub fn from_totals(selected: usize, total: usize) -> Self {
        ParamCount {
            total,
            selected,
            fraction: if total == 0 { 0.0 } else { selected as f64 / total as f64 },
        }
    }
}

/// Probability target over the output distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChoiceScope {
    /// Softmax over the whole vocabulary.
    Vocabulary,
    /// Softmax renormalised over the listed tokens only.
    Restricted(Vec<TokenId>),
}

#[derive(Debug, Clone)]
pub struct MicroTransformer {
    config: ModelConfig,
    store: ParamStore,
    ids: ModelIds,
}

impl MicroTransformer {
    /// A freshly initialised model: weights and embeddings ~ N(0, 0.02),
    /// biases zero, layer-norm gains one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut store = ParamStore::new();
        let mut weight = |store: &mut ParamStore, name: String, shape: &[usize]| -> Result<ParamId> {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            store.insert(name, Tensor::new(shape.to_vec(), data)?)
        };
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let tok_emb = weight(&mut store, "tok_emb".into(), &[v, d])?;
        let pos_emb = weight(&mut store, "pos_emb".into(), &[config.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let ln1_g = store.insert(p("ln1.gamma"), Tensor::filled(&[d], 1.0))?;
            let ln1_b = store.insert(p("ln1.beta"), Tensor::zeros(&[d]))?;
            let wq = weight(&mut store, p("attn.wq"), &[d, d])?;
            let bq = store.insert(p("attn.bq"), Tensor::zeros(&[d]))?;
            let wk = weight(&mut store, p("attn.wk"), &[d, d])?;
            let bk = store.insert(p("attn.bk"), Tensor::zeros(&[d]))?;
            let wv = weight(&mut store, p("attn.wv"), &[d, d])?;
            let bv = store.insert(p("attn.bv"), Tensor::zeros(&[d]))?;
            let wo = weight(&mut store, p("attn.wo"), &[d, d])?;
            let bo = store.insert(p("attn.bo"), Tensor::zeros(&[d]))?;
            let ln2_g = store.insert(p("ln2.gamma"), Tensor::filled(&[d], 1.0))?;
            let ln2_b = store.insert(p("ln2.beta"), Tensor::zeros(&[d]))?;
            let w1 = weight(&mut store, p("ffn.w1"), &[d, f])?;
            let b1 = store.insert(p("ffn.b1"), Tensor::zeros(&[f]))?;
            let w2 = weight(&mut store, p("ffn.w2"), &[f, d])?;
            let b2 = store.insert(p("ffn.b2"), Tensor::zeros(&[d]))?;
            blocks.push(BlockIds {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_g = store.insert("ln_f.gamma", Tensor::filled(&[d], 1.0))?;
        let lnf_b = store.insert("ln_f.beta", Tensor::zeros(&[d]))?;
        let head = weight(&mut store, "lm_head".into(), &[d, v])?;
        Ok(MicroTransformer {
            config,
            store,
            ids: ModelIds {
                tok_emb,
                pos_emb,
                blocks,
                lnf_g,
                lnf_b,
                head,
            },
        })
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.store.load_values(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn ffn_names(&self, layer: usize) -> Result<FfnNames> {
        self.check_layer(layer)?;
        Ok(FfnNames {
            w1: format!("layers.{layer}.ffn.w1"),
            b1: format!("layers.{layer}.ffn.b1"),
            w2: format!("layers.{layer}.ffn.w2"),
        })
    }

    /// Every parameter belonging to transformer block `layer`.
    pub fn block_param_names(&self, layer: usize) -> Result<Vec<String>> {
        self.check_layer(layer)?;
        let prefix = format!("layers.{layer}.");
        Ok(self
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with(&prefix))
            .map(|(_, p)| p.name.clone())
            .collect())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(NritError::Index(format!(
                "layer {layer} of {}",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId], start: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(NritError::Contract("empty token sequence".into()));
        }
        let end = start + tokens.len();
        if end > self.config.max_seq_len {
            return Err(NritError::Length {
                len: end,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(NritError::Token(format!("id {t}")));
        }
        Ok(())
    }

    fn src(&self, trainable: bool) -> Src<'_> {
        Src {
            store: &self.store,
            trainable,
            only: None,
        }
    }

    fn linear<'a>(&self, g: &mut Graph<'a>, src: Src<'a>, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let wn = src.node(g, w);
        let bn = src.node(g, b);
        let z = g.matmul(x, wn)?;
        g.add_row(z, bn)
    }

    fn norm<'a>(&self, g: &mut Graph<'a>, src: Src<'a>, x: NodeId, gamma: ParamId, beta: ParamId) -> Result<NodeId> {
        let gn = src.node(g, gamma);
        let bn = src.node(g, beta);
        g.layer_norm(x, gn, bn)
    }

    /// Attention half of a block: returns (residual after attention, k, v).
    fn attention_half<'a>(
        &self,
        g: &mut Graph<'a>,
        src: Src<'a>,
        layer: usize,
        x: NodeId,
        past: Option<(&'a Tensor, &'a Tensor)>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let b = &self.ids.blocks[layer];
        let a = self.norm(g, src, x, b.ln1_g, b.ln1_b)?;
        let q = self.linear(g, src, a, b.wq, b.bq)?;
        let k = self.linear(g, src, a, b.wk, b.bk)?;
        let v = self.linear(g, src, a, b.wv, b.bv)?;
        let (k_all, v_all) = match past {
            Some((pk, pv)) => {
                let pk = g.constant_ref(pk);
                let pv = g.constant_ref(pv);
                (g.concat_rows(pk, k)?, g.concat_rows(pv, v)?)
            }
            None => (k, v),
        };
        let att = g.attention(q, k_all, v_all, self.config.n_heads)?;
        let o = self.linear(g, src, att, b.wo, b.bo)?;
        Ok((g.add(x, o)?, k, v))
    }

    /// FFN half of a block up to the hidden activation: `gelu(LN(x) W1 + b1)`.
    fn ffn_hidden<'a>(&self, g: &mut Graph<'a>, src: Src<'a>, layer: usize, mid: NodeId) -> Result<NodeId> {
        let b = &self.ids.blocks[layer];
        let n = self.norm(g, src, mid, b.ln2_g, b.ln2_b)?;
        let pre = self.linear(g, src, n, b.w1, b.b1)?;
        Ok(g.gelu(pre))
    }

    /// Rest of the FFN half: `mid + hidden W2 + b2`.
    fn ffn_out<'a>(&self, g: &mut Graph<'a>, src: Src<'a>, layer: usize, mid: NodeId, hidden: NodeId) -> Result<NodeId> {
        let b = &self.ids.blocks[layer];
        let y = self.linear(g, src, hidden, b.w2, b.b2)?;
        g.add(mid, y)
    }

    fn head<'a>(&self, g: &mut Graph<'a>, src: Src<'a>, x: NodeId) -> Result<NodeId> {
        let n = self.norm(g, src, x, self.ids.lnf_g, self.ids.lnf_b)?;
        let h = src.node(g, self.ids.head);
        g.matmul(n, h)
    }

    /// Records a forward pass over `tokens`, which occupy positions
    /// `start..start + len` after the cached positions in `past`.
    pub(crate) fn run<'a>(
        &self,
        g: &mut Graph<'a>,
        src: Src<'a>,
        tokens: &[TokenId],
        past: Option<&'a KvCache>,
        probes: &[ProbeSlot],
        rows: LogitRows,
    ) -> Result<RunOut> {
        let start = past.map_or(0, KvCache::len);
        self.check_tokens(tokens, start)?;
        let n = tokens.len();
        for p in probes {
            self.check_layer(p.layer)?;
            if p.row >= n {
                return Err(NritError::Index(format!("probe position {} of {n}", p.row)));
            }
        }
        let positions: Vec<usize> = (start..start + n).collect();
        let te = src.node(g, self.ids.tok_emb);
        let pe = src.node(g, self.ids.pos_emb);
        let te = g.embedding(te, tokens)?;
        let pe = g.embedding(pe, &positions)?;
        let mut x = g.add(te, pe)?;
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let past_l = past.map(|c| (&c.k[l], &c.v[l]));
            let (mid, k, v) = self.attention_half(g, src, l, x, past_l)?;
            let hidden = self.ffn_hidden(g, src, l, mid)?;
            let mut h = hidden;
            for p in probes.iter().filter(|p| p.layer == l) {
                if let Some(o) = p.override_node {
                    h = g.override_row(h, p.row, o)?;
                }
            }
            x = self.ffn_out(g, src, l, mid, h)?;
            layers.push(LayerNodes { k, v, mid, hidden });
        }
        let (s, e) = match rows {
            LogitRows::All => (0, n),
            LogitRows::Last => (n - 1, n),
            LogitRows::Range(s, e) => (s, e),
        };
        let xs = if (s, e) == (0, n) { x } else { g.slice_rows(x, s, e)? };
        let logits = self.head(g, src, xs)?;
        Ok(RunOut { logits, layers })
    }

    fn resolve_probes(&self, g: &mut Graph<'_>, probes: &[ActivationProbe], n: usize) -> Result<Vec<ProbeSlot>> {
        probes
            .iter()
            .map(|p| {
                let row = p.position.unwrap_or(n.saturating_sub(1));
                let override_node = match &p.override_value {
                    Some(v) => {
                        if v.len() != self.config.d_ff {
                            return Err(NritError::Shape(format!(
                                "override of length {} for d_ff {}",
                                v.len(),
                                self.config.d_ff
                            )));
                        }
                        Some(g.input(v.clone()))
                    }
                    None => None,
                };
                Ok(ProbeSlot {
                    layer: p.layer,
                    row,
                    override_node,
                })
            })
            .collect()
    }

    /// Logits for every position (`len x vocab_size`), filling each probe's
    /// `captured` with the FFN hidden vector it observed before any override.
    pub fn forward(&self, tokens: &[TokenId], probes: &mut [ActivationProbe]) -> Result<Tensor> {
        let mut g = Graph::new();
        let slots = self.resolve_probes(&mut g, probes, tokens.len())?;
        let out = self.run(&mut g, self.src(false), tokens, None, &slots, LogitRows::All)?;
        for (p, s) in probes.iter_mut().zip(&slots) {
            let hidden = g.value(out.layers[s.layer].hidden);
            p.captured = Some(Tensor::vector(hidden.row(s.row).to_vec()));
        }
        Ok(g.value(out.logits).clone())
    }

    /// Records a frozen forward with layer `layer`'s FFN hidden vector at the
    /// last position replaced by a graph input holding `value`. Returns the
    /// last-position logits node and that input node.
    pub fn probed_last_logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &[TokenId],
        layer: usize,
        value: Tensor,
    ) -> Result<(NodeId, NodeId)> {
        let probe = ActivationProbe::with_override(layer, value);
        let slots = self.resolve_probes(g, std::slice::from_ref(&probe), tokens.len())?;
        let out = self.run(g, self.src(false), tokens, None, &slots, LogitRows::Last)?;
        Ok((out.logits, slots[0].override_node.expect("override set")))
    }

    /// Probability node for `choice` given a `1 x vocab` logits row node.
    pub fn choice_probability_node(
        &self,
        g: &mut Graph<'_>,
        logits_row: NodeId,
        choice: TokenId,
        scope: &ChoiceScope,
    ) -> Result<NodeId> {
        if choice >= self.config.vocab_size {
            return Err(NritError::Token(format!("id {choice}")));
        }
        match scope {
            ChoiceScope::Vocabulary => {
                let p = g.softmax(logits_row);
                g.gather_cols(p, &[choice])
            }
            ChoiceScope::Restricted(options) => {
                let at = options
                    .iter()
                    .position(|&o| o == choice)
                    .ok_or_else(|| NritError::Token(format!("id {choice} is not among the choices")))?;
                if let Some(&o) = options.iter().find(|&&o| o >= self.config.vocab_size) {
                    return Err(NritError::Token(format!("id {o}")));
                }
                let z = g.gather_cols(logits_row, options)?;
                let p = g.softmax(z);
                g.gather_cols(p, &[at])
            }
        }
    }

    /// Probability of `choice` as the next token after position `answer_position`.
    pub fn choice_probability(
        &self,
        tokens: &[TokenId],
        answer_position: usize,
        choice: TokenId,
        scope: &ChoiceScope,
    ) -> Result<f64> {
        if answer_position >= tokens.len() {
            return Err(NritError::Index(format!(
                "answer position {answer_position} of {}",
                tokens.len()
            )));
        }
        let mut g = Graph::new();
        let out = self.run(&mut g, self.src(false), &tokens[..=answer_position], None, &[], LogitRows::Last)?;
        let p = self.choice_probability_node(&mut g, out.logits, choice, scope)?;
        Ok(g.value(p).item())
    }

    /// Frozen forward over `tokens`, caching what [`Self::suffix_logits`] needs.
    pub fn probe_context(&self, tokens: &[TokenId]) -> Result<ProbeContext> {
        let mut g = Graph::new();
        let out = self.run(&mut g, self.src(false), tokens, None, &[], LogitRows::Last)?;
        let n = tokens.len();
        let last = |id: NodeId, g: &Graph<'_>| g.value(id).row(n - 1).to_vec();
        let mut prefix = Vec::with_capacity(self.config.n_layers);
        let mut mid = Vec::with_capacity(self.config.n_layers);
        let mut hidden = Vec::with_capacity(self.config.n_layers);
        for ln in &out.layers {
            prefix.push(if n > 1 {
                let d = self.config.d_model;
                let k = Tensor::new(vec![n - 1, d], g.value(ln.k).data()[..(n - 1) * d].to_vec())?;
                let v = Tensor::new(vec![n - 1, d], g.value(ln.v).data()[..(n - 1) * d].to_vec())?;
                Some((k, v))
            } else {
                None
            });
            mid.push(Tensor::new(vec![1, self.config.d_model], last(ln.mid, &g))?);
            hidden.push(Tensor::vector(last(ln.hidden, &g)));
        }
        Ok(ProbeContext {
            len: n,
            prefix,
            mid,
            hidden,
            last_logits: g.value(out.logits).clone(),
        })
    }

    /// Final-position logits (`1 x vocab`) of the prompt cached in `ctx`,
    /// with layer `layer`'s FFN hidden vector at that position replaced by
    /// `hidden`. Parameters enter as constants.
    pub fn suffix_logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        ctx: &'a ProbeContext,
        layer: usize,
        hidden: NodeId,
    ) -> Result<NodeId> {
        self.check_layer(layer)?;
        if g.value(hidden).len() != self.config.d_ff {
            return Err(NritError::Shape(format!(
                "override of length {} for d_ff {}",
                g.value(hidden).len(),
                self.config.d_ff
            )));
        }
        let src = self.src(false);
        let mid = g.constant_ref(&ctx.mid[layer]);
        let mut x = self.ffn_out(g, src, layer, mid, hidden)?;
        for l in layer + 1..self.config.n_layers {
            let past = ctx.prefix[l].as_ref().map(|(k, v)| (k, v));
            let (m, _, _) = self.attention_half(g, src, l, x, past)?;
            let h = self.ffn_hidden(g, src, l, m)?;
            x = self.ffn_out(g, src, l, m, h)?;
        }
        self.head(g, src, x)
    }

    /// Mean next-token cross-entropy over targets `tokens[loss_from..]`,
    /// recorded with trainable parameters. Earlier positions only provide context.
    pub fn sequence_loss<'a>(&'a self, g: &mut Graph<'a>, tokens: &[TokenId], loss_from: usize) -> Result<NodeId> {
        self.sequence_loss_in(g, &self.store, tokens, loss_from)
    }

    /// [`Self::sequence_loss`] with parameter values taken from `store`,
    /// which must have this model's layout (e.g. a perturbed clone).
    pub fn sequence_loss_in<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        tokens: &[TokenId],
        loss_from: usize,
    ) -> Result<NodeId> {
        self.loss_impl(g, Src { store, trainable: true, only: None }, tokens, loss_from)
    }

    /// [`Self::sequence_loss`] where only parameters flagged in `trainable`
    /// (store order) are recorded as gradient leaves; the rest are constants.
    pub fn sequence_loss_selected<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &[TokenId],
        loss_from: usize,
        trainable: &'a [bool],
    ) -> Result<NodeId> {
        if trainable.len() != self.store.len() {
            return Err(NritError::Contract("trainable flags do not match the model layout".into()));
        }
        let src = Src {
            store: &self.store,
            trainable: true,
            only: Some(trainable),
        };
        self.loss_impl(g, src, tokens, loss_from)
    }

    fn loss_impl<'a>(&self, g: &mut Graph<'a>, src: Src<'a>, tokens: &[TokenId], loss_from: usize) -> Result<NodeId> {
        if src.store.len() != self.store.len() {
            return Err(NritError::Contract("parameter store does not match the model layout".into()));
        }
        let n = tokens.len();
        if loss_from == 0 || loss_from >= n {
            return Err(NritError::Contract(format!("loss_from {loss_from} for length {n}")));
        }
        let out = self.run(
            g,
            src,
            &tokens[..n - 1],
            None,
            &[],
            LogitRows::Range(loss_from - 1, n - 1),
        )?;
        g.cross_entropy(out.logits, &tokens[loss_from..])
    }

    /// Greedy decoding; see [`Self::generate_greedy_with`].
    pub fn generate_greedy(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.generate_greedy_with(prompt, max_new, &mut |_, _| {})
    }

    /// Greedy decoding until EOT or `max_new` tokens. `hook` may edit each
    /// step's logits before the argmax; ties go to the lowest token id. The
    /// EOT token is not included in the output.
    pub fn generate_greedy_with(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        hook: &mut dyn FnMut(usize, &mut [f64]),
    ) -> Result<Vec<TokenId>> {
        if prompt.len() + max_new > self.config.max_seq_len || prompt.len() >= self.config.max_seq_len {
            return Err(NritError::Length {
                len: prompt.len() + max_new.max(1),
                max: self.config.max_seq_len,
            });
        }
        let mut out = Vec::new();
        let mut cache: Option<KvCache> = None;
        let mut pending: Vec<TokenId> = prompt.to_vec();
        for step in 0..max_new {
            let (mut logits, k, v) = {
                let mut g = Graph::new();
                let run = self.run(&mut g, self.src(false), &pending, cache.as_ref(), &[], LogitRows::Last)?;
                let k: Vec<Tensor> = run.layers.iter().map(|l| g.value(l.k).clone()).collect();
                let v: Vec<Tensor> = run.layers.iter().map(|l| g.value(l.v).clone()).collect();
                (g.value(run.logits).data().to_vec(), k, v)
            };
            match &mut cache {
                Some(c) => c.append(k, v)?,
                None => cache = Some(KvCache { k, v }),
            }
            hook(step, &mut logits);
            let next = argmax(&logits);
            if next == EOT {
                break;
            }
            out.push(next);
            pending = vec![next];
        }
        Ok(out)
    }

    /// Exact parameter counts; `fraction = selected / total`.
    pub fn count_parameters(&self, mask: Option<&GradientMask>) -> Result<ParamCount> {
        let total = self.store.total_scalars();
        let selected = match mask {
            None => total,
            Some(m) => {
                m.validate(&self.store)?;
                m.count()
            }
        };
        Ok(ParamCount::from_totals(selected, total))
    }
}

/// Index of the largest value; the first index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
