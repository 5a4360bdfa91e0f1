//! Representation and attention diagnostics: token and head self-similarity,
//! grouped attention maps and the up-down triangle count.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TraceValues};
use crate::objectives::WeightSpace;
use crate::tensor::{mean_pairwise_cosine, Tensor};

pub const DEFAULT_MS: usize = 64;
pub const DEFAULT_TRIANGLE_T: f64 = 0.5;
pub const DEFAULT_SIMILARITY_SAMPLE: usize = 5000;

/// f(S): mean pairwise cosine between the rows of the last hidden states. `None` below two rows.
pub fn token_self_similarity(last_hidden: &Tensor) -> Option<f64> {
    let rows: Vec<&[f64]> = (0..last_hidden.rows()).map(|i| last_hidden.row(i)).collect();
    mean_pairwise_cosine(&rows)
}

/// f(H): mean pairwise cosine between flattened head maps within each layer, averaged over
/// layers. `maps[l][h]`; `None` when a layer has fewer than two heads.
pub fn head_self_similarity(maps: &[Vec<Tensor>]) -> Option<f64> {
    if maps.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for layer in maps {
        let flat: Vec<&[f64]> = layer.iter().map(Tensor::data).collect();
        total += mean_pairwise_cosine(&flat)?;
    }
    Some(total / maps.len() as f64)
}

fn weights_of(trace: &TraceValues, space: WeightSpace) -> &[Vec<Tensor>] {
    match space {
        WeightSpace::PreSoftmax => &trace.attn_weights,
        WeightSpace::PostSoftmax => &trace.attn_probs,
    }
}

/// One sentence's post-softmax map for `group`, averaged over the group's heads and over
/// all layers (or only `layer`).
pub fn sentence_group_map(trace: &TraceValues, config: &ModelConfig, group: usize, layer: Option<usize>) -> Result<Tensor> {
    if group >= config.group_count {
        return Err(Error::Config(format!("group {group} requested from a model with {} groups", config.group_count)));
    }
    let layers: Vec<usize> = match layer {
        Some(l) if l >= trace.attn_probs.len() => return Err(Error::Config(format!("layer {l} out of range"))),
        Some(l) => vec![l],
        None => (0..trace.attn_probs.len()).collect(),
    };
    let s = trace.last_hidden.rows();
    let mut acc = vec![0.0; s * s];
    let mut count = 0usize;
    for &l in &layers {
        for (h, map) in trace.attn_probs[l].iter().enumerate() {
            if config.group_of_head(h) == group {
                acc.iter_mut().zip(map.data()).for_each(|(a, v)| *a += v);
                count += 1;
            }
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Tensor::matrix(s, s, acc)
}

/// Group map averaged over a batch of sentences, each zero-padded or cropped to `ms×ms`.
pub fn group_attention_map(
    traces: &[TraceValues],
    config: &ModelConfig,
    group: usize,
    ms: usize,
    layer: Option<usize>,
) -> Result<Tensor> {
    if config.group_count != 2 {
        return Err(Error::Config("grouped attention maps need group_count = 2".into()));
    }
    if traces.is_empty() {
        return Err(Error::Input("no sentences to average".into()));
    }
    let mut acc = Tensor::zeros(&[ms, ms]);
    for tr in traces {
        let m = sentence_group_map(tr, config, group, layer)?;
        let n = m.rows().min(ms);
        for i in 0..n {
            for j in 0..n {
                acc.data_mut()[i * ms + j] += m.at(i, j);
            }
        }
    }
    let k = traces.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= k);
    Ok(acc)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriangleNorm {
    /// Divide triangle sums by `min(len, ms)`.
    #[default]
    EffectiveLength,
    /// Divide by `ms` regardless of sentence length.
    MaxLength,
}

/// Strict upper and strict lower triangle sums of the top-left `min(len, ms)` block, normalized.
pub fn triangle_sums(map: &Tensor, ms: usize, norm: TriangleNorm) -> (f64, f64) {
    let n = map.rows().min(ms);
    let (mut up, mut down) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                up += map.at(i, j);
            } else if j < i {
                down += map.at(i, j);
            }
        }
    }
    let den = match norm {
        TriangleNorm::EffectiveLength => n.max(1),
        TriangleNorm::MaxLength => ms,
    } as f64;
    (up / den, down / den)
}

/// The two group maps of one sentence, indexed by model group.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceMaps {
    pub groups: [Tensor; 2],
}

pub fn sentence_maps(model: &Model, ids: &[u32], layer: Option<usize>) -> Result<SentenceMaps> {
    if model.config.group_count != 2 {
        return Err(Error::Config("triangle analysis needs a model with group_count = 2".into()));
    }
    let tr = model.trace(ids)?;
    Ok(SentenceMaps {
        groups: [sentence_group_map(&tr, &model.config, 0, layer)?, sentence_group_map(&tr, &model.config, 1, layer)?],
    })
}

/// Model group with the larger mean strict-upper mass; reported as group 1.
pub fn upper_group(maps: &[SentenceMaps], ms: usize, norm: TriangleNorm) -> usize {
    let mut mass = [0.0; 2];
    for m in maps {
        for (g, slot) in mass.iter_mut().enumerate() {
            *slot += triangle_sums(&m.groups[g], ms, norm).0;
        }
    }
    usize::from(mass[1] > mass[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleReport {
    pub sentences: usize,
    pub matched: usize,
    /// `100 · matched / sentences`.
    pub percentage: f64,
    pub t: f64,
    pub ms: usize,
    pub normalization: TriangleNorm,
    /// Model group reported as group 1 (the upper-triangle group).
    pub upper_group: usize,
}

/// Counts sentences whose group-1 map has strict-upper mass ≥ `t` and whose group-2 map has
/// strict-lower mass ≥ `t`.
pub fn triangle_from_maps(maps: &[SentenceMaps], t: f64, ms: usize, norm: TriangleNorm) -> Result<TriangleReport> {
    if maps.is_empty() {
        return Err(Error::Input("triangle count over an empty dataset".into()));
    }
    if ms == 0 {
        return Err(Error::Config("ms must be positive".into()));
    }
    let g1 = upper_group(maps, ms, norm);
    let matched = maps
        .iter()
        .filter(|m| {
            let up = triangle_sums(&m.groups[g1], ms, norm).0;
            let down = triangle_sums(&m.groups[1 - g1], ms, norm).1;
            up >= t && down >= t
        })
        .count();
    Ok(TriangleReport {
        sentences: maps.len(),
        matched,
        percentage: 100.0 * matched as f64 / maps.len() as f64,
        t,
        ms,
        normalization: norm,
        upper_group: g1,
    })
}

pub fn triangle_percentage(
    model: &Model,
    sentences: &[Vec<u32>],
    t: f64,
    ms: usize,
    norm: TriangleNorm,
    layer: Option<usize>,
) -> Result<TriangleReport> {
    if model.config.group_count != 2 {
        return Err(Error::Config("triangle analysis needs a model with group_count = 2".into()));
    }
    if sentences.is_empty() {
        return Err(Error::Input("triangle count over an empty dataset".into()));
    }
    let maps = sentences.iter().map(|s| sentence_maps(model, s, layer)).collect::<Result<Vec<_>>>()?;
    triangle_from_maps(&maps, t, ms, norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub step: u64,
    /// Mean f(S) over sentences with at least two tokens.
    pub mean_fs: Option<f64>,
    /// Mean f(H) over sentences.
    pub mean_fh: Option<f64>,
    pub sentences: usize,
    pub weight_space: WeightSpace,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn similarity_report(model: &Model, step: u64, sentences: &[&[u32]], space: WeightSpace) -> Result<SimilarityReport> {
    let (mut fs, mut fh) = (Vec::new(), Vec::new());
    for s in sentences {
        let tr = model.trace(s)?;
        fs.extend(token_self_similarity(&tr.last_hidden));
        fh.extend(head_self_similarity(weights_of(&tr, space)));
    }
    Ok(SimilarityReport { step, mean_fs: mean(&fs), mean_fh: mean(&fh), sentences: sentences.len(), weight_space: space })
}

/// Seeded choice of `min(sample, available)` sentence indices, ascending.
pub fn sample_sentences(available: usize, sample: usize, seed: u64) -> Vec<usize> {
    if sample >= available {
        return (0..available).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, available, sample).into_vec();
    picked.sort_unstable();
    picked
}

/// f(S) and f(H) for each `(step, model)` over one seeded sentence sample.
pub fn similarity_curve(
    checkpoints: &[(u64, Model)],
    sentences: &[Vec<u32>],
    sample: Option<usize>,
    seed: u64,
    space: WeightSpace,
) -> Result<Vec<SimilarityReport>> {
    if let Some((_, first)) = checkpoints.first() {
        if let Some((step, _)) = checkpoints.iter().find(|(_, m)| m.config != first.config) {
            return Err(Error::Config(format!("checkpoint at step {step} has a different model configuration")));
        }
    }
    let picks = sample_sentences(sentences.len(), sample.unwrap_or(DEFAULT_SIMILARITY_SAMPLE), seed);
    let chosen: Vec<&[u32]> = picks.iter().map(|&i| sentences[i].as_slice()).collect();
    checkpoints.iter().map(|(step, m)| similarity_report(m, *step, &chosen, space)).collect()
}

/// One JSON object per line.
pub fn to_json_lines<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Whitespace-separated numeric grid, one matrix row per line.
pub fn map_grid(map: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..map.rows() {
        for (j, v) in map.row(i).iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.6e}");
        }
        out.push('\n');
    }
    out
}
