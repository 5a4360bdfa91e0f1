//! Post-layernorm transformer encoder with a pluggable attention variant and an MLM head.
//!
//! Parameter names are stable and double as the checkpoint keys:
//!
//! | name | shape |
//! |------|-------|
//! | `embed.word` | `V×D` |
//! | `embed.position` | `r_a×D` (absolute encoding only) |
//! | `embed.ln.gain`, `embed.ln.bias` | `D` |
//! | `layer{l}.attn.{query,key,value,output}.weight` | `D×D` |
//! | `layer{l}.attn.{query,value,output}.bias` | `D` |
//! | `layer{l}.attn.ln.{gain,bias}` | `D` |
//! | `layer{l}.ffn.inner.weight` / `.bias` | `D×4D` / `4D` |
//! | `layer{l}.ffn.outer.weight` / `.bias` | `4D×D` / `D` |
//! | `layer{l}.ffn.ln.{gain,bias}` | `D` |
//! | `rel.g{k}.{part}` | relative parameters of sharing group `k` |
//! | `layer{l}.rel.g{k}.{part}` | the same, when allocated per layer |
//! | `mlm.transform.weight` / `.bias` | `D×D` / `D` |
//! | `mlm.ln.{gain,bias}` | `D` |
//! | `mlm.decoder.weight` | `D×V` (only without weight tying) |
//! | `mlm.decoder.bias` | `V` |
//!
//! `{part}` is one of the names from [`group_param_shapes`].

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relpos::{
    absolute_position_shape, attention_ddrp, attention_deberta, attention_plain, attention_shaw, attention_tupe,
    ddrp_table, group_param_shapes, EncodingKind, RelPosIndexer,
};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Initial values are redrawn until they fall within this many standard deviations.
pub const INIT_TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub r_s: usize,
    pub r_a: usize,
    pub encoding: EncodingKind,
    pub group_count: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub per_layer_relative: bool,
    pub init_std: f64,
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 4] = ["tiny", "small", "gradcheck", "base"];

    pub fn preset(name: &str) -> Result<Self> {
        let base = ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 32,
            vocab_size: 128,
            max_len: 32,
            r_s: 16,
            r_a: 32,
            encoding: EncodingKind::Ddrp,
            group_count: 1,
            dropout: 0.1,
            tie_embeddings: true,
            per_layer_relative: false,
            init_std: 0.02,
        };
        let cfg = match name {
            "tiny" => base,
            "small" => ModelConfig { layers: 4, heads: 4, hidden: 128, vocab_size: 4096, max_len: 64, r_s: 64, r_a: 64, ..base },
            "gradcheck" => ModelConfig { hidden: 16, vocab_size: 23, max_len: 8, r_s: 4, r_a: 8, ..base },
            "base" => ModelConfig {
                layers: 12,
                heads: 12,
                hidden: 768,
                vocab_size: 30522,
                max_len: 512,
                r_s: 64,
                r_a: 512,
                ..base
            },
            other => return Err(Error::Config(format!("unknown model preset '{other}'"))),
        };
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }

    pub fn heads_per_group(&self) -> usize {
        self.heads / self.group_count.max(1)
    }

    /// Sharing group of head `h` (contiguous blocks of heads).
    pub fn group_of_head(&self, h: usize) -> usize {
        h / self.heads_per_group()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return bad("layers, heads, hidden, vocab_size and max_len must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if !(1..=2).contains(&self.group_count) || !self.heads.is_multiple_of(self.group_count) {
            return bad(format!("group_count {} must be 1 or 2 and divide {} heads", self.group_count, self.heads));
        }
        if self.r_s == 0 {
            return bad("r_s must be positive".into());
        }
        if matches!(self.encoding, EncodingKind::Absolute | EncodingKind::Tupe) && self.max_len > self.r_a {
            return bad(format!("max_len {} exceeds r_a {}", self.max_len, self.r_a));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    fn rel_name(&self, layer: usize, group: usize, part: &str) -> String {
        if self.per_layer_relative {
            format!("layer{layer}.rel.g{group}.{part}")
        } else {
            format!("rel.g{group}.{part}")
        }
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (dm, f, v) = (self.hidden, self.ffn_dim(), self.vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = vec![("embed.word".into(), vec![v, dm])];
        if self.encoding == EncodingKind::Absolute {
            out.push(("embed.position".into(), absolute_position_shape(self.r_a, dm)));
        }
        out.push(("embed.ln.gain".into(), vec![dm]));
        out.push(("embed.ln.bias".into(), vec![dm]));
        let rel_parts = group_param_shapes(self.encoding, self.head_dim(), dm, self.r_s, self.r_a);
        let rel_layers = if self.per_layer_relative { self.layers } else { 1 };
        for l in 0..self.layers {
            let p = format!("layer{l}");
            for proj in ["query", "key", "value", "output"] {
                out.push((format!("{p}.attn.{proj}.weight"), vec![dm, dm]));
                if proj != "key" {
                    out.push((format!("{p}.attn.{proj}.bias"), vec![dm]));
                }
            }
            out.push((format!("{p}.attn.ln.gain"), vec![dm]));
            out.push((format!("{p}.attn.ln.bias"), vec![dm]));
            out.push((format!("{p}.ffn.inner.weight"), vec![dm, f]));
            out.push((format!("{p}.ffn.inner.bias"), vec![f]));
            out.push((format!("{p}.ffn.outer.weight"), vec![f, dm]));
            out.push((format!("{p}.ffn.outer.bias"), vec![dm]));
            out.push((format!("{p}.ffn.ln.gain"), vec![dm]));
            out.push((format!("{p}.ffn.ln.bias"), vec![dm]));
            if l < rel_layers {
                for grp in 0..self.group_count {
                    for (part, shape) in &rel_parts {
                        out.push((self.rel_name(l, grp, part), shape.clone()));
                    }
                }
            }
        }
        out.push(("mlm.transform.weight".into(), vec![dm, dm]));
        out.push(("mlm.transform.bias".into(), vec![dm]));
        out.push(("mlm.ln.gain".into(), vec![dm]));
        out.push(("mlm.ln.bias".into(), vec![dm]));
        if !self.tie_embeddings {
            out.push(("mlm.decoder.weight".into(), vec![dm, v]));
        }
        out.push(("mlm.decoder.bias".into(), vec![v]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Whether weight decay skips this parameter (biases and layernorm gains).
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain")
}

/// Named parameter arrays in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let (mut names, mut tensors) = (Vec::new(), Vec::new());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate parameter '{name}'")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ParamStore { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks names and shapes against a configuration.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", expected.len(), self.len())));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(self.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!("parameter {have} {:?} does not match {name} {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters placed on a graph, aligned with [`ParamStore`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Graph handles produced by one forward pass over a single sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `S×V`.
    pub logits: Var,
    /// `S×D`.
    pub last_hidden: Var,
    /// `[layer][head]`, pre-softmax `S×S`.
    pub attn_weights: Vec<Vec<Var>>,
    /// `[layer][head]`, post-softmax `S×S`.
    pub attn_probs: Vec<Vec<Var>>,
}

/// Values of a [`ForwardTrace`] detached from their graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceValues {
    pub logits: Tensor,
    pub last_hidden: Tensor,
    pub attn_weights: Vec<Vec<Tensor>>,
    pub attn_probs: Vec<Vec<Tensor>>,
}

impl ForwardTrace {
    pub fn values(&self, g: &Graph) -> TraceValues {
        let grab = |vs: &Vec<Vec<Var>>| vs.iter().map(|l| l.iter().map(|&v| g.value(v).clone()).collect()).collect();
        TraceValues {
            logits: g.value(self.logits).clone(),
            last_hidden: g.value(self.last_hidden).clone(),
            attn_weights: grab(&self.attn_weights),
            attn_probs: grab(&self.attn_probs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Draws from `N(0, std²)` truncated to `±INIT_TRUNCATION·std` by rejection.
fn truncated_normal<R: Rng + ?Sized>(normal: &Normal<f64>, bound: f64, rng: &mut R) -> f64 {
    loop {
        let x = normal.sample(rng);
        if x.abs() <= bound {
            return x;
        }
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let bound = INIT_TRUNCATION * config.init_std;
    let entries = config
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") && !name.contains(".rel.") && !name.starts_with("rel.") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| truncated_normal(&normal, bound, &mut rng)).collect()
            };
            Tensor::new(shape, data).map(|t| (name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    ParamStore::new(entries)
}

impl Model {
    pub fn new(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Places every parameter on the graph, as gradient-tracking leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .and_then(|i| bound.vars.get(i).copied())
            .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
    }

    fn linear(&self, g: &mut Graph, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(bound, &format!("{prefix}.weight"))?;
        let b = self.var(bound, &format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn layer_norm(&self, g: &mut Graph, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.var(bound, &format!("{prefix}.gain"))?;
        let bias = self.var(bound, &format!("{prefix}.bias"))?;
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    fn dropout<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let p = self.config.dropout;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..g.value(x).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        g.mul_const(x, mask)
    }

    pub fn check_input(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Input(format!("sequence length {} exceeds max_len {}", ids.len(), self.config.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        ids: &[u32],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        self.check_input(ids)?;
        let cfg = &self.config;
        let (s, d) = (ids.len(), cfg.head_dim());
        let idx = RelPosIndexer::new(cfg.r_s)?;

        let word = self.var(bound, "embed.word")?;
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let mut x = g.gather_rows(word, &rows)?;
        if cfg.encoding == EncodingKind::Absolute {
            let pos = self.var(bound, "embed.position")?;
            let p = g.gather_rows(pos, &(0..s).collect::<Vec<_>>())?;
            x = g.add(x, p)?;
        }
        x = self.layer_norm(g, bound, x, "embed.ln")?;
        x = self.dropout(g, x, mode, rng)?;

        let mut ddrp_tables: HashMap<String, Var> = HashMap::new();
        let mut attn_weights = Vec::with_capacity(cfg.layers);
        let mut attn_probs = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("layer{l}");
            let q = self.linear(g, bound, x, &format!("{p}.attn.query"))?;
            let k = g.matmul(x, self.var(bound, &format!("{p}.attn.key.weight"))?)?;
            let v = self.linear(g, bound, x, &format!("{p}.attn.value"))?;
            let rel_layer = if cfg.per_layer_relative { l } else { 0 };
            let (mut outs, mut ws, mut ps) = (Vec::new(), Vec::new(), Vec::new());
            for h in 0..cfg.heads {
                let qh = g.slice_cols(q, h * d, d)?;
                let kh = g.slice_cols(k, h * d, d)?;
                let vh = g.slice_cols(v, h * d, d)?;
                let grp = cfg.group_of_head(h);
                let rel = |part: &str| self.var(bound, &cfg.rel_name(rel_layer, grp, part));
                let out = match cfg.encoding {
                    EncodingKind::Absolute => attention_plain(g, qh, kh, vh, 1)?,
                    EncodingKind::Shaw => attention_shaw(g, qh, kh, vh, rel("key_rel")?, &idx)?,
                    EncodingKind::Tupe => attention_tupe(
                        g,
                        qh,
                        kh,
                        vh,
                        rel("position")?,
                        rel("pos_query")?,
                        rel("pos_key")?,
                        rel("rel_bias")?,
                        &idx,
                    )?,
                    EncodingKind::Deberta => attention_deberta(g, qh, kh, vh, rel("key_rel")?, rel("query_rel")?, &idx)?,
                    EncodingKind::Ddrp => {
                        let key = cfg.rel_name(rel_layer, grp, "table");
                        let table = match ddrp_tables.get(&key) {
                            Some(&t) => t,
                            None => {
                                let t = ddrp_table(g, rel("direction")?, rel("distance")?, rel("rel_proj")?)?;
                                ddrp_tables.insert(key, t);
                                t
                            }
                        };
                        attention_ddrp(g, qh, kh, vh, table, &idx)?
                    }
                };
                outs.push(out.output);
                ws.push(out.weights);
                ps.push(out.probs);
            }
            attn_weights.push(ws);
            attn_probs.push(ps);

            let z = g.concat_cols(&outs)?;
            let a = self.linear(g, bound, z, &format!("{p}.attn.output"))?;
            let a = self.dropout(g, a, mode, rng)?;
            let res = g.add(x, a)?;
            x = self.layer_norm(g, bound, res, &format!("{p}.attn.ln"))?;

            let inner = self.linear(g, bound, x, &format!("{p}.ffn.inner"))?;
            let act = g.gelu(inner);
            let f = self.linear(g, bound, act, &format!("{p}.ffn.outer"))?;
            let f = self.dropout(g, f, mode, rng)?;
            let res = g.add(x, f)?;
            x = self.layer_norm(g, bound, res, &format!("{p}.ffn.ln"))?;
        }

        let last_hidden = x;
        let t = self.linear(g, bound, x, "mlm.transform")?;
        let t = g.gelu(t);
        let t = self.layer_norm(g, bound, t, "mlm.ln")?;
        let logits = if cfg.tie_embeddings { g.matmul_bt(t, word)? } else { g.matmul(t, self.var(bound, "mlm.decoder.weight")?)? };
        let logits = g.add_row(logits, self.var(bound, "mlm.decoder.bias")?)?;
        Ok(ForwardTrace { logits, last_hidden, attn_weights, attn_probs })
    }

    /// Eval-mode forward on a fresh graph.
    pub fn trace(&self, ids: &[u32]) -> Result<TraceValues> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = self.forward(&mut g, &bound, ids, Mode::Eval, &mut rng)?;
        Ok(tr.values(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relpos::{delta_rho, extra_param_count, sigma_index};
    use crate::tensor::{gelu, grad_check_fd_multi};

    fn cfg(kind: EncodingKind) -> ModelConfig {
        ModelConfig { encoding: kind, ..ModelConfig::preset("gradcheck").unwrap() }
    }

    #[test]
    fn presets_validate() {
        for name in ModelConfig::PRESETS {
            for kind in EncodingKind::ALL {
                let c = ModelConfig { encoding: kind, ..ModelConfig::preset(name).unwrap() };
                c.validate().unwrap();
            }
        }
        assert!(ModelConfig::preset("huge").is_err());
        let bad = ModelConfig { heads: 3, ..ModelConfig::preset("tiny").unwrap() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { encoding: EncodingKind::Tupe, r_a: 8, ..ModelConfig::preset("tiny").unwrap() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let c = cfg(EncodingKind::Ddrp);
        let a = init_params(&c, 3).unwrap();
        assert_eq!(a, init_params(&c, 3).unwrap());
        assert_ne!(a, init_params(&c, 4).unwrap());
        a.check_against(&c).unwrap();
        assert!(a.get("layer1.ffn.ln.gain").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get("layer0.attn.value.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("rel.g0.distance").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_stddev_matches_target() {
        let c = ModelConfig { vocab_size: 100_000 / 16, ..cfg(EncodingKind::Absolute) };
        let p = init_params(&c, 11).unwrap();
        let w = p.get("embed.word").unwrap().data();
        assert!(w.len() >= 100_000 - 16);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.002, "{}", var.sqrt());
        assert!(w.iter().all(|v| v.abs() <= 0.06));
    }

    #[test]
    fn param_count_difference_is_the_relative_bookkeeping() {
        for groups in [1, 2] {
            let c = ModelConfig { group_count: groups, ..ModelConfig::preset("tiny").unwrap() };
            let ddrp = ModelConfig { encoding: EncodingKind::Ddrp, ..c.clone() };
            let shaw = ModelConfig { encoding: EncodingKind::Shaw, ..c.clone() };
            let (d, r_s, r_a, h) = (c.head_dim(), c.r_s, c.r_a, c.hidden);
            let per_group = extra_param_count(EncodingKind::Ddrp, d, r_s, r_a, h) as i64
                - extra_param_count(EncodingKind::Shaw, d, r_s, r_a, h) as i64;
            assert_eq!(ddrp.param_count() as i64 - shaw.param_count() as i64, per_group * groups as i64);
        }
        let c = ModelConfig { per_layer_relative: true, ..ModelConfig::preset("tiny").unwrap() };
        let shared = ModelConfig { per_layer_relative: false, ..c.clone() };
        let rel = extra_param_count(EncodingKind::Ddrp, c.head_dim(), c.r_s, c.r_a, c.hidden);
        assert_eq!(c.param_count() - shared.param_count(), rel * (c.layers - 1));
    }

    #[test]
    fn input_errors() {
        let m = Model::init(cfg(EncodingKind::Shaw), 0).unwrap();
        assert!(matches!(m.trace(&[23]), Err(Error::Input(_))));
        assert!(matches!(m.trace(&[5; 9]), Err(Error::Input(_))));
        assert!(matches!(m.trace(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn eval_forward_is_bit_identical_and_row_stochastic() {
        for kind in EncodingKind::ALL {
            let m = Model::init(cfg(kind), 1).unwrap();
            let ids = [3, 7, 22, 0, 5, 5, 9];
            let a = m.trace(&ids).unwrap();
            assert_eq!(a, m.trace(&ids).unwrap());
            assert_eq!(a.logits.shape(), [7, 23]);
            assert_eq!(a.last_hidden.shape(), [7, 16]);
            for p in a.attn_probs.iter().flatten() {
                for i in 0..7 {
                    assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let m = Model::init(ModelConfig { dropout: 0.5, ..cfg(EncodingKind::Ddrp) }, 2).unwrap();
        let ids = [1, 2, 3, 4];
        let run = |mode, seed| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = m.forward(&mut g, &b, &ids, mode, &mut rng).unwrap();
            g.value(t.logits).clone()
        };
        assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
        assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
        assert_eq!(run(Mode::Train, 7), run(Mode::Train, 7));
    }

    #[test]
    fn identity_value_path_averages_value_rows() {
        let c = ModelConfig { layers: 1, heads: 1, hidden: 4, max_len: 5, dropout: 0.0, ..cfg(EncodingKind::Absolute) };
        let mut m = Model::init(c, 0).unwrap();
        for name in ["embed.position", "layer0.attn.query.weight", "layer0.attn.key.weight", "layer0.ffn.inner.weight"] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        for name in ["layer0.attn.value.weight", "layer0.attn.output.weight"] {
            *m.params.get_mut(name).unwrap() = Tensor::identity(4);
        }
        let ids = [2, 9, 4, 17, 11];
        let t = m.trace(&ids).unwrap();
        assert!(t.attn_probs[0][0].data().iter().all(|&p| (p - 0.2).abs() < 1e-15));

        let norm = |r: &[f64]| -> Vec<f64> {
            let mu = r.iter().sum::<f64>() / 4.0;
            let sd = (r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0 + LAYER_NORM_EPS).sqrt();
            r.iter().map(|v| (v - mu) / sd).collect()
        };
        let word = m.params.get("embed.word").unwrap();
        let v: Vec<Vec<f64>> = ids.iter().map(|&i| norm(word.row(i as usize))).collect();
        let z: Vec<f64> = (0..4).map(|c| v.iter().map(|r| r[c]).sum::<f64>() / 5.0).collect();
        for (i, row) in v.iter().enumerate() {
            let res: Vec<f64> = row.iter().zip(&z).map(|(a, b)| a + b).collect();
            let expect = norm(&norm(&res));
            for (a, b) in t.last_hidden.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    /// Straight-line reference forward over plain vectors, written independently of the graph.
    mod reference {
        use super::*;

        pub type Mat = Vec<Vec<f64>>;

        pub fn mat(t: &Tensor) -> Mat {
            (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
        }

        fn mm(a: &Mat, b: &Mat) -> Mat {
            let (n, k, m) = (a.len(), b.len(), b[0].len());
            let mut out = vec![vec![0.0; m]; n];
            for i in 0..n {
                for j in 0..m {
                    let mut s = 0.0;
                    for t in 0..k {
                        s += a[i][t] * b[t][j];
                    }
                    out[i][j] = s;
                }
            }
            out
        }

        fn dot(a: &[f64], b: &[f64]) -> f64 {
            a.iter().zip(b).map(|(x, y)| x * y).sum()
        }

        fn linear(x: &Mat, p: &ParamStore, prefix: &str) -> Mat {
            let w = mat(p.get(&format!("{prefix}.weight")).unwrap());
            let b = p.get(&format!("{prefix}.bias")).unwrap().data().to_vec();
            mm(x, &w).into_iter().map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect()).collect()
        }

        fn ln(x: &Mat, p: &ParamStore, prefix: &str) -> Mat {
            let gain = p.get(&format!("{prefix}.gain")).unwrap().data();
            let bias = p.get(&format!("{prefix}.bias")).unwrap().data();
            x.iter()
                .map(|r| {
                    let n = r.len() as f64;
                    let mu = r.iter().sum::<f64>() / n;
                    let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let sd = (var + LAYER_NORM_EPS).sqrt();
                    r.iter().enumerate().map(|(c, v)| (v - mu) / sd * gain[c] + bias[c]).collect()
                })
                .collect()
        }

        fn add(a: &Mat, b: &Mat) -> Mat {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
        }

        fn cols(x: &Mat, start: usize, len: usize) -> Mat {
            x.iter().map(|r| r[start..start + len].to_vec()).collect()
        }

        fn rel(c: &ModelConfig, p: &ParamStore, grp: usize, part: &str) -> Tensor {
            p.get(&c.rel_name(0, grp, part)).unwrap().clone()
        }

        fn scores(c: &ModelConfig, p: &ParamStore, grp: usize, q: &Mat, k: &Mat) -> Mat {
            let (s, d) = (q.len(), q[0].len());
            let r_s = c.r_s;
            let mut a = vec![vec![0.0; s]; s];
            for i in 0..s {
                for j in 0..s {
                    let qk = dot(&q[i], &k[j]);
                    a[i][j] = match c.encoding {
                        EncodingKind::Absolute => qk / (d as f64).sqrt(),
                        EncodingKind::Shaw => {
                            let kr = rel(c, p, grp, "key_rel");
                            (qk + dot(&q[i], kr.row(sigma_index(i, j, r_s).unwrap()))) / (d as f64).sqrt()
                        }
                        EncodingKind::Tupe => {
                            let pos = rel(c, p, grp, "position");
                            let wq = mat(&rel(c, p, grp, "pos_query"));
                            let wk = mat(&rel(c, p, grp, "pos_key"));
                            let qp = mm(&vec![pos.row(i).to_vec()], &wq);
                            let kp = mm(&vec![pos.row(j).to_vec()], &wk);
                            let b = rel(c, p, grp, "rel_bias").data()[sigma_index(i, j, r_s).unwrap()];
                            (qk + dot(&qp[0], &kp[0])) / ((2 * d) as f64).sqrt() + b
                        }
                        EncodingKind::Deberta => {
                            let kr = rel(c, p, grp, "key_rel");
                            let qr = rel(c, p, grp, "query_rel");
                            let c2p = dot(&q[i], kr.row(sigma_index(i, j, r_s).unwrap()));
                            let p2c = dot(&k[j], qr.row(sigma_index(j, i, r_s).unwrap()));
                            (qk + c2p + p2c) / ((3 * d) as f64).sqrt()
                        }
                        EncodingKind::Ddrp => {
                            let (delta, rho) = delta_rho(i, j, r_s).unwrap();
                            let dir = rel(c, p, grp, "direction");
                            let dist = rel(c, p, grp, "distance");
                            let w = mat(&rel(c, p, grp, "rel_proj"));
                            let h: Vec<f64> = (0..d).map(|t| dir.at(rho, t) * dist.at(delta, t)).collect();
                            let kd = mm(&vec![h], &w);
                            (qk + dot(&q[i], &kd[0])) / (d as f64).sqrt()
                        }
                    };
                }
            }
            a
        }

        pub fn forward(m: &Model, ids: &[u32]) -> (Mat, Mat) {
            let (c, p) = (&m.config, &m.params);
            let word = p.get("embed.word").unwrap();
            let mut x: Mat = ids.iter().map(|&t| word.row(t as usize).to_vec()).collect();
            if c.encoding == EncodingKind::Absolute {
                let pos = p.get("embed.position").unwrap();
                for (i, r) in x.iter_mut().enumerate() {
                    for (v, q) in r.iter_mut().zip(pos.row(i)) {
                        *v += q;
                    }
                }
            }
            x = ln(&x, p, "embed.ln");
            let d = c.head_dim();
            for l in 0..c.layers {
                let pre = format!("layer{l}");
                let q = linear(&x, p, &format!("{pre}.attn.query"));
                let k = mm(&x, &mat(p.get(&format!("{pre}.attn.key.weight")).unwrap()));
                let v = linear(&x, p, &format!("{pre}.attn.value"));
                let mut z = vec![Vec::new(); x.len()];
                for h in 0..c.heads {
                    let (qh, kh, vh) = (cols(&q, h * d, d), cols(&k, h * d, d), cols(&v, h * d, d));
                    let a = scores(c, p, c.group_of_head(h), &qh, &kh);
                    let probs: Mat = a
                        .iter()
                        .map(|r| {
                            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
                            let s: f64 = e.iter().sum();
                            e.iter().map(|v| v / s).collect()
                        })
                        .collect();
                    for (zi, row) in z.iter_mut().zip(mm(&probs, &vh)) {
                        zi.extend(row);
                    }
                }
                let a = linear(&z, p, &format!("{pre}.attn.output"));
                x = ln(&add(&x, &a), p, &format!("{pre}.attn.ln"));
                let inner = linear(&x, p, &format!("{pre}.ffn.inner"));
                let act: Mat = inner.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
                let f = linear(&act, p, &format!("{pre}.ffn.outer"));
                x = ln(&add(&x, &f), p, &format!("{pre}.ffn.ln"));
            }
            let t = linear(&x, p, "mlm.transform");
            let t: Mat = t.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
            let t = ln(&t, p, "mlm.ln");
            let bias = p.get("mlm.decoder.bias").unwrap().data();
            let logits = t
                .iter()
                .map(|r| (0..c.vocab_size).map(|v| dot(r, word.row(v)) + bias[v]).collect())
                .collect();
            (logits, x)
        }
    }

    fn max_diff(t: &Tensor, m: &reference::Mat) -> f64 {
        let flat: Vec<f64> = m.concat();
        t.data().iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        for kind in EncodingKind::ALL {
            let c = ModelConfig {
                layers: 2,
                heads: 4,
                hidden: 64,
                vocab_size: 101,
                max_len: 32,
                r_s: 8,
                r_a: 32,
                encoding: kind,
                group_count: 2,
                init_std: 0.2,
                ..ModelConfig::preset("tiny").unwrap()
            };
            let m = Model::init(c, 5).unwrap();
            let ids: Vec<u32> = (0..32).map(|i| (i * 37 % 101) as u32).collect();
            let got = m.trace(&ids).unwrap();
            let (logits, hidden) = reference::forward(&m, &ids);
            assert!(max_diff(&got.logits, &logits) < 1e-10, "{kind}: {}", max_diff(&got.logits, &logits));
            assert!(max_diff(&got.last_hidden, &hidden) < 1e-10, "{kind}");
        }
    }

    #[test]
    fn identical_groups_reproduce_single_group() {
        for kind in EncodingKind::ALL {
            let one = Model::init(ModelConfig { group_count: 1, ..cfg(kind) }, 8).unwrap();
            let two_cfg = ModelConfig { group_count: 2, ..cfg(kind) };
            let entries = two_cfg
                .param_shapes()
                .into_iter()
                .map(|(name, _)| {
                    let src = name.replace("rel.g1.", "rel.g0.");
                    (name, one.params.get(&src).unwrap().clone())
                })
                .collect();
            let two = Model::new(two_cfg, ParamStore::new(entries).unwrap()).unwrap();
            let ids = [4, 8, 15, 16, 0, 22];
            assert_eq!(one.trace(&ids).unwrap(), two.trace(&ids).unwrap(), "{kind}");
        }
    }

    #[test]
    fn zeroed_positional_parameters_leave_only_the_content_scale() {
        let ids = [1, 5, 9, 13, 17, 21, 2];
        let traces: Vec<(EncodingKind, TraceValues)> = EncodingKind::ALL
            .iter()
            .map(|&kind| {
                let mut m = Model::init(cfg(kind), 4).unwrap();
                // Use one shared set of content weights across kinds.
                let shared = init_params(&cfg(EncodingKind::Shaw), 4).unwrap();
                for (name, t) in m.params.names().to_vec().into_iter().zip(m.params.tensors_mut()) {
                    match shared.get(&name) {
                        Some(src) if !name.contains("rel.") => *t = src.clone(),
                        _ => t.data_mut().fill(0.0),
                    }
                }
                if kind == EncodingKind::Ddrp {
                    // A zero direction table already zeroes every relative vector.
                    *m.params.get_mut("rel.g0.rel_proj").unwrap() = Tensor::identity(8);
                }
                (kind, m.trace(&ids).unwrap())
            })
            .collect();
        let by = |k: EncodingKind| &traces.iter().find(|(kk, _)| *kk == k).unwrap().1;
        let base = by(EncodingKind::Shaw);
        assert_eq!(by(EncodingKind::Absolute), base);
        assert_eq!(by(EncodingKind::Ddrp), base);
        for (kind, c) in [(EncodingKind::Tupe, 2.0f64), (EncodingKind::Deberta, 3.0)] {
            let t = by(kind);
            for (a, b) in t.attn_weights[0].iter().zip(&base.attn_weights[0]) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x * c.sqrt() - y).abs() < 1e-12, "{kind}");
                }
            }
        }
    }

    fn fd_error(kind: EncodingKind, with_aux: bool) -> f64 {
        use crate::objectives::{hcd_loss, mlm_loss, mth_combine, tcd_loss, MaskAction, MaskingPlan, ObjectiveWarnings};
        let c = ModelConfig { dropout: 0.0, init_std: 0.3, ..cfg(kind) };
        let m = Model::init(c.clone(), 21).unwrap();
        let ids = [5u32, 11, 2, 2, 19, 7, 13, 22];
        let plan = MaskingPlan {
            positions: vec![2, 3, 6],
            actions: vec![MaskAction::Mask; 3],
            inputs: vec![2; 3],
            targets: vec![8, 17, 13],
        };
        let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let bound = Bound { vars: vars.to_vec() };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let tr = m.forward(g, &bound, &ids, Mode::Eval, &mut rng)?;
            let mut w = ObjectiveWarnings::default();
            let mlm = mlm_loss(g, tr.logits, &plan, &mut w)?;
            if !with_aux {
                return Ok(mlm);
            }
            let tcd = tcd_loss(g, tr.last_hidden, &[0, 3, 4, 7], &mut w)?;
            let hcd = hcd_loss(g, &tr.attn_weights, &[vec![0, 1], vec![0, 1]], &mut w)?;
            mth_combine(g, mlm, tcd, hcd, 1.0, 0.5, 0.7)
        };
        grad_check_fd_multi(f, m.params.tensors(), 1e-4).unwrap()
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for kind in EncodingKind::ALL {
            for aux in [false, true] {
                let err = fd_error(kind, aux);
                assert!(err < 1e-4, "{kind} aux={aux}: {err}");
            }
        }
    }
}
