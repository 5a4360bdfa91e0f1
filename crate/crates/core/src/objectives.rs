//! Pre-training objectives: whole-word masked language modeling, the token
//! and head cosine-differentiation losses (TCD, HCD), and their combination
//! with a linearly decaying weight (MTH).

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_N_PRIME: usize = 50;
pub const DEFAULT_M_PRIME: usize = 2;
pub const DEFAULT_ALPHA1: f64 = 1.0;
pub const DEFAULT_ALPHA2: f64 = 0.01;
pub const DEFAULT_MASK_RATIO: f64 = 0.15;

/// Which attention map HCD and f(H) compare.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpace {
    #[default]
    PreSoftmax,
    PostSoftmax,
}

impl WeightSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightSpace::PreSoftmax => "pre_softmax",
            WeightSpace::PostSoftmax => "post_softmax",
        }
    }
}

impl std::str::FromStr for WeightSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_softmax" => Ok(WeightSpace::PreSoftmax),
            "post_softmax" => Ok(WeightSpace::PostSoftmax),
            other => Err(Error::Config(format!("unknown weight space '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    /// Replaced by the mask token.
    Mask,
    /// Replaced by a uniformly drawn regular token.
    Random,
    /// Left unchanged but still predicted.
    Keep,
}

/// Token ids the masking procedure needs to know about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskVocab {
    pub pad_id: u32,
    pub mask_id: u32,
    /// Smallest id of a regular (non-reserved) token; random replacements are drawn from
    /// `first_regular..vocab_size`.
    pub first_regular: u32,
    pub vocab_size: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskingPlan {
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    /// Token fed to the model at each masked position.
    pub inputs: Vec<u32>,
    /// Original token at each masked position (the prediction target).
    pub targets: Vec<u32>,
}

impl MaskingPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// The model input with masking applied.
    pub fn apply(&self, tokens: &[u32]) -> Vec<u32> {
        let mut out = tokens.to_vec();
        for (&p, &t) in self.positions.iter().zip(&self.inputs) {
            out[p] = t;
        }
        out
    }
}

/// Counters for degenerate loss evaluations that are defined as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveWarnings {
    pub empty_mlm: u64,
    pub short_tcd: u64,
    pub short_hcd: u64,
}

/// Whole-word masking.
///
/// `word_starts` lists the first token of every word in ascending order,
/// starting at 0. Words are visited in random order and selected while the
/// covered token count stays within `round(mask_ratio · tokens)` (at least one
/// word when the ratio is positive). Each selected position is replaced by the
/// mask token with probability 0.8, a random token with 0.1, and kept with 0.1.
pub fn apply_whole_word_masking<R: Rng + ?Sized>(
    tokens: &[u32],
    word_starts: &[usize],
    mask_ratio: f64,
    vocab: &MaskVocab,
    rng: &mut R,
) -> Result<MaskingPlan> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    if !word_starts.is_empty() && (word_starts[0] != 0 || word_starts.windows(2).any(|w| w[0] >= w[1]))
        || word_starts.last().is_some_and(|&s| s >= tokens.len())
    {
        return Err(Error::Input("word boundaries must be strictly increasing from 0".into()));
    }
    let spans: Vec<(usize, usize)> = word_starts
        .iter()
        .enumerate()
        .map(|(w, &start)| (start, word_starts.get(w + 1).copied().unwrap_or(tokens.len())))
        .filter(|&(a, b)| tokens[a..b].iter().all(|&t| t != vocab.pad_id))
        .collect();
    let maskable: usize = spans.iter().map(|(a, b)| b - a).sum();
    if mask_ratio == 0.0 || maskable == 0 {
        return Ok(MaskingPlan::default());
    }
    let target = ((maskable as f64 * mask_ratio).round() as usize).clamp(1, maskable);

    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.shuffle(rng);
    let mut chosen = Vec::new();
    let mut covered = 0;
    for w in order {
        if covered >= target {
            break;
        }
        let (a, b) = spans[w];
        if covered > 0 && covered + (b - a) > target {
            continue;
        }
        covered += b - a;
        chosen.extend(a..b);
    }
    chosen.sort_unstable();

    let mut plan = MaskingPlan::default();
    for p in chosen {
        let u: f64 = rng.random();
        let (action, input) = if u < 0.8 {
            (MaskAction::Mask, vocab.mask_id)
        } else if u < 0.9 {
            (MaskAction::Random, rng.random_range(vocab.first_regular..vocab.vocab_size))
        } else {
            (MaskAction::Keep, tokens[p])
        };
        plan.positions.push(p);
        plan.actions.push(action);
        plan.inputs.push(input);
        plan.targets.push(tokens[p]);
    }
    Ok(plan)
}

/// Summed negative log-likelihood of the plan's targets under `logits` (`S×V`),
/// plus the number of terms. `None` for an empty plan.
pub fn mlm_nll_sum(g: &mut Graph, logits: Var, plan: &MaskingPlan) -> Result<Option<(Var, usize)>> {
    if plan.is_empty() {
        return Ok(None);
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension("mlm logits must be S×V".into()));
    }
    let (s, v) = (shape[0], shape[1]);
    if let Some(&p) = plan.positions.iter().find(|&&p| p >= s) {
        return Err(Error::Input(format!("masked position {p} beyond sequence length {s}")));
    }
    if let Some(&t) = plan.targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Input(format!("target id {t} outside vocabulary of {v}")));
    }
    let logp = g.log_softmax_rows(logits);
    let picks = plan.positions.iter().zip(&plan.targets).map(|(&p, &t)| p * v + t as usize).collect();
    let picked = g.gather(logp, picks, &[plan.len()])?;
    let total = g.sum(picked);
    Ok(Some((g.scale(total, -1.0), plan.len())))
}

/// Mean cross-entropy over masked positions; an empty plan yields 0 and bumps a counter.
pub fn mlm_loss(g: &mut Graph, logits: Var, plan: &MaskingPlan, warnings: &mut ObjectiveWarnings) -> Result<Var> {
    match mlm_nll_sum(g, logits, plan)? {
        Some((sum, n)) => Ok(g.scale(sum, 1.0 / n as f64)),
        None => {
            warnings.empty_mlm += 1;
            Ok(g.constant(Tensor::scalar(0.0)))
        }
    }
}

/// `n_prime` distinct positions out of `0..n`, drawn uniformly and returned ascending.
pub fn sample_tokens<R: Rng + ?Sized>(n: usize, n_prime: usize, rng: &mut R) -> Vec<usize> {
    if n_prime >= n {
        return (0..n).collect();
    }
    let mut picked = index::sample(rng, n, n_prime).into_vec();
    picked.sort_unstable();
    picked
}

/// Evenly spaced positions, the alternative reading of "uniformly in sequence order".
pub fn strided_tokens(n: usize, n_prime: usize) -> Vec<usize> {
    if n_prime >= n {
        return (0..n).collect();
    }
    (0..n_prime).map(|k| k * n / n_prime).collect()
}

/// Mean pairwise cosine of the selected rows of the last hidden states.
pub fn tcd_loss(g: &mut Graph, last_hidden: Var, indices: &[usize], warnings: &mut ObjectiveWarnings) -> Result<Var> {
    if indices.len() < 2 {
        warnings.short_tcd += 1;
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let rows = g.gather_rows(last_hidden, indices)?;
    g.mean_pairwise_cosine(rows)
}

/// Independent without-replacement draws of `m_prime` heads (ascending) for each of `layers` layers.
pub fn sample_heads<R: Rng + ?Sized>(m: usize, m_prime: usize, layers: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..layers).map(|_| sample_tokens(m, m_prime, rng)).collect()
}

/// Mean pairwise cosine between the flattened weight maps of the sampled heads,
/// averaged over layers. `maps[l][h]` is head `h` of layer `l`.
pub fn hcd_loss(g: &mut Graph, maps: &[Vec<Var>], sampled: &[Vec<usize>], warnings: &mut ObjectiveWarnings) -> Result<Var> {
    if maps.len() != sampled.len() {
        return Err(Error::Dimension(format!("{} layers of maps but {} head samples", maps.len(), sampled.len())));
    }
    if maps.is_empty() || sampled.iter().any(|s| s.len() < 2) {
        warnings.short_hcd += 1;
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut per_layer = Vec::with_capacity(maps.len());
    for (heads, picks) in maps.iter().zip(sampled) {
        let mut flat = Vec::with_capacity(picks.len());
        for &h in picks {
            let map = *heads.get(h).ok_or_else(|| Error::Input(format!("head {h} not present")))?;
            let n = g.value(map).len();
            flat.push(g.reshape(map, &[1, n])?);
        }
        let stacked = g.concat_rows(&flat)?;
        per_layer.push(g.mean_pairwise_cosine(stacked)?);
    }
    let stacked = g.concat_rows(&per_layer)?;
    Ok(g.mean(stacked))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub tcd: f64,
    pub hcd: f64,
    #[serde(rename = "T")]
    pub decay: f64,
    pub total: f64,
}

/// `T = 1 − step_cur/step_max`, clamped to `[0, 1]`.
pub fn decay_factor(step_cur: u64, step_max: u64) -> Result<f64> {
    if step_max == 0 {
        return Err(Error::Config("step_max must be positive".into()));
    }
    Ok((1.0 - step_cur as f64 / step_max as f64).clamp(0.0, 1.0))
}

/// Combined objective value `mlm + α₁·T·tcd + α₂·T·hcd`.
pub fn mth_loss(mlm: f64, tcd: f64, hcd: f64, alpha1: f64, alpha2: f64, step_cur: u64, step_max: u64) -> Result<LossBreakdown> {
    let decay = decay_factor(step_cur, step_max)?;
    Ok(LossBreakdown { mlm, tcd, hcd, decay, total: combine(mlm, tcd, hcd, alpha1, alpha2, decay) })
}

pub fn combine(mlm: f64, tcd: f64, hcd: f64, alpha1: f64, alpha2: f64, decay: f64) -> f64 {
    mlm + alpha1 * decay * tcd + alpha2 * decay * hcd
}

/// Graph form of [`combine`]; auxiliary terms with zero weight are left out entirely.
pub fn mth_combine(g: &mut Graph, mlm: Var, tcd: Var, hcd: Var, alpha1: f64, alpha2: f64, decay: f64) -> Result<Var> {
    let mut total = mlm;
    for (term, w) in [(tcd, alpha1 * decay), (hcd, alpha2 * decay)] {
        if w != 0.0 {
            let scaled = g.scale(term, w);
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}
