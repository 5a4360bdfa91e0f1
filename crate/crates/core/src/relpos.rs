//! Position encodings for self-attention: absolute (BERT), Shaw relative
//! (BERT-R), TUPE, DeBERTa, and the decoupled directional encoding (DDRP).
//!
//! All attention functions take per-head `Q`, `K`, `V` of shape `S×d` and
//! return the pre-softmax logits, the row-softmax probabilities, and
//! `softmax(A)·V`. Relative parameters are plain graph variables so the same
//! code serves training, gradient checking and diagnostics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    Absolute,
    Shaw,
    Tupe,
    Deberta,
    Ddrp,
}

impl EncodingKind {
    pub const ALL: [EncodingKind; 5] =
        [EncodingKind::Absolute, EncodingKind::Shaw, EncodingKind::Tupe, EncodingKind::Deberta, EncodingKind::Ddrp];

    pub fn as_str(self) -> &'static str {
        match self {
            EncodingKind::Absolute => "absolute",
            EncodingKind::Shaw => "shaw",
            EncodingKind::Tupe => "tupe",
            EncodingKind::Deberta => "deberta",
            EncodingKind::Ddrp => "ddrp",
        }
    }

    /// Multiplier `c` in the content-logit scale `1/√(c·d)`.
    pub fn scale_terms(self) -> usize {
        match self {
            EncodingKind::Tupe => 2,
            EncodingKind::Deberta => 3,
            _ => 1,
        }
    }

    /// Whether the kind owns parameters inside attention (shared per head group).
    pub fn is_relative(self) -> bool {
        !matches!(self, EncodingKind::Absolute)
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "absolute" | "bert" => Ok(EncodingKind::Absolute),
            "shaw" | "bert-r" | "bert_r" => Ok(EncodingKind::Shaw),
            "tupe" => Ok(EncodingKind::Tupe),
            "deberta" => Ok(EncodingKind::Deberta),
            "ddrp" => Ok(EncodingKind::Ddrp),
            other => Err(Error::Config(format!("unknown encoding kind '{other}'"))),
        }
    }
}

/// Relative-position index functions with maximum relative distance `r_s`.
///
/// Two clip ranges are in use. The signed index `σ` clips `i−j` into
/// `[−r_s, r_s−1]` so it addresses a `2r_s`-row table. The distance index `δ`
/// clips into `[−(r_s−1), r_s−1]` before taking the absolute value so it
/// addresses an `r_s`-row table. They differ only at the negative extreme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelPosIndexer {
    r_s: usize,
}

impl RelPosIndexer {
    pub fn new(r_s: usize) -> Result<Self> {
        if r_s == 0 {
            return Err(Error::Config("r_s must be positive".into()));
        }
        Ok(Self { r_s })
    }

    pub fn r_s(&self) -> usize {
        self.r_s
    }

    pub fn clip(&self, x: i64) -> i64 {
        let r = self.r_s as i64;
        x.clamp(-r, r - 1)
    }

    pub fn clip_symmetric(&self, x: i64) -> i64 {
        let r = self.r_s as i64;
        x.clamp(-(r - 1), r - 1)
    }

    pub fn sigma(&self, i: usize, j: usize) -> usize {
        (self.clip(i as i64 - j as i64) + self.r_s as i64) as usize
    }

    pub fn delta(&self, i: usize, j: usize) -> usize {
        self.clip_symmetric(i as i64 - j as i64).unsigned_abs() as usize
    }

    /// 0 on the diagonal, 1 when `i < j`, 2 when `i > j`.
    pub fn rho(&self, i: usize, j: usize) -> usize {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Less => 1,
            std::cmp::Ordering::Greater => 2,
        }
    }

    pub fn delta_rho(&self, i: usize, j: usize) -> (usize, usize) {
        (self.delta(i, j), self.rho(i, j))
    }

    /// Row of the materialized DDRP table for pair `(i, j)`; rows are laid out as `δ·3 + ρ`.
    pub fn ddrp_row(&self, i: usize, j: usize) -> usize {
        let (d, r) = self.delta_rho(i, j);
        d * 3 + r
    }

    /// `σ(i,j)` for every pair of an `s`-token sequence, row-major.
    pub fn sigma_matrix(&self, s: usize) -> Vec<usize> {
        (0..s).flat_map(|i| (0..s).map(move |j| (i, j))).map(|(i, j)| self.sigma(i, j)).collect()
    }

    pub fn ddrp_row_matrix(&self, s: usize) -> Vec<usize> {
        (0..s).flat_map(|i| (0..s).map(move |j| (i, j))).map(|(i, j)| self.ddrp_row(i, j)).collect()
    }
}

pub fn sigma_index(i: usize, j: usize, r_s: usize) -> Result<usize> {
    Ok(RelPosIndexer::new(r_s)?.sigma(i, j))
}

pub fn delta_rho(i: usize, j: usize, r_s: usize) -> Result<(usize, usize)> {
    Ok(RelPosIndexer::new(r_s)?.delta_rho(i, j))
}

/// Shapes of the attention-side parameters owned by one sharing group, by name.
///
/// `d` is the per-head dimension and `hidden` the model dimension. The
/// absolute kind owns no attention-side parameters; its position table is an
/// input embedding (see [`absolute_position_shape`]).
pub fn group_param_shapes(kind: EncodingKind, d: usize, hidden: usize, r_s: usize, r_a: usize) -> Vec<(&'static str, Vec<usize>)> {
    match kind {
        EncodingKind::Absolute => vec![],
        EncodingKind::Shaw => vec![("key_rel", vec![2 * r_s, d])],
        EncodingKind::Tupe => vec![
            ("position", vec![r_a, hidden]),
            ("pos_query", vec![hidden, d]),
            ("pos_key", vec![hidden, d]),
            ("rel_bias", vec![2 * r_s]),
        ],
        EncodingKind::Deberta => vec![("key_rel", vec![2 * r_s, d]), ("query_rel", vec![2 * r_s, d])],
        EncodingKind::Ddrp => vec![("direction", vec![3, d]), ("distance", vec![r_s, d]), ("rel_proj", vec![d, d])],
    }
}

pub fn absolute_position_shape(r_a: usize, hidden: usize) -> Vec<usize> {
    vec![r_a, hidden]
}

/// Parameters a kind adds over a position-free encoder, per sharing group.
pub fn extra_param_count(kind: EncodingKind, d: usize, r_s: usize, r_a: usize, hidden: usize) -> usize {
    match kind {
        EncodingKind::Ddrp => 3 * d + r_s * d + d * d,
        EncodingKind::Shaw => 2 * r_s * d,
        EncodingKind::Deberta => 2 * (2 * r_s * d),
        EncodingKind::Tupe => r_a * hidden + 2 * hidden * d + 2 * r_s,
        EncodingKind::Absolute => r_a * hidden,
    }
}

/// Number of stored relative position vectors (table rows) the kind keeps.
pub fn relative_vector_count(kind: EncodingKind, r_s: usize) -> usize {
    match kind {
        EncodingKind::Ddrp => r_s + 3,
        EncodingKind::Shaw => 2 * r_s,
        EncodingKind::Deberta => 4 * r_s,
        EncodingKind::Tupe | EncodingKind::Absolute => 0,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Pre-softmax logits `A`, `S×S`.
    pub weights: Var,
    /// `softmax(A)` row-wise.
    pub probs: Var,
    /// `softmax(A)·V`, `S×d`.
    pub output: Var,
}

fn head_dims(g: &Graph, q: Var, k: Var, v: Var) -> Result<(usize, usize)> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 2 || g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(Error::Dimension(format!(
            "attention expects equal S×d Q, K, V; got {:?}, {:?}, {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    Ok((qs[0], qs[1]))
}

fn finish(g: &mut Graph, weights: Var, v: Var) -> Result<AttentionOutput> {
    let probs = g.softmax_rows(weights);
    let output = g.matmul(probs, v)?;
    Ok(AttentionOutput { weights, probs, output })
}

fn check_table(g: &Graph, table: Var, rows: usize, d: usize, what: &str) -> Result<()> {
    if g.shape(table) != [rows, d] {
        return Err(Error::Dimension(format!("{what}: expected {rows}×{d}, got {:?}", g.shape(table))));
    }
    Ok(())
}

/// `out[i,j] = x_i · table[index[i,j]]` for `x ∈ S×d`, computed on the rows the
/// index actually touches.
fn relative_scores(g: &mut Graph, x: Var, table: Var, index: &[usize], s: usize) -> Result<Var> {
    let mut used: Vec<usize> = index.to_vec();
    used.sort_unstable();
    used.dedup();
    let mut remap = vec![usize::MAX; used.last().map_or(0, |&m| m + 1)];
    for (pos, &row) in used.iter().enumerate() {
        remap[row] = pos;
    }
    let sub = g.gather_rows(table, &used)?;
    let scores = g.matmul_bt(x, sub)?;
    let width = used.len();
    let flat = index.iter().enumerate().map(|(k, &row)| (k / s) * width + remap[row]).collect();
    g.gather(scores, flat, &[s, s])
}

/// Vanilla scaled dot-product attention with logits `QKᵀ/√(c·d)`.
pub fn attention_plain(g: &mut Graph, q: Var, k: Var, v: Var, scale_terms: usize) -> Result<AttentionOutput> {
    let (_, d) = head_dims(g, q, k, v)?;
    let qk = g.matmul_bt(q, k)?;
    let a = g.scale(qk, 1.0 / ((scale_terms * d) as f64).sqrt());
    finish(g, a, v)
}

/// `A[i,j] = Q_i·(K_j + K^r[σ(i,j)])ᵀ / √d`.
pub fn attention_shaw(g: &mut Graph, q: Var, k: Var, v: Var, key_rel: Var, idx: &RelPosIndexer) -> Result<AttentionOutput> {
    let (s, d) = head_dims(g, q, k, v)?;
    check_table(g, key_rel, 2 * idx.r_s(), d, "shaw key_rel")?;
    let content = g.matmul_bt(q, k)?;
    let rel = relative_scores(g, q, key_rel, &idx.sigma_matrix(s), s)?;
    let sum = g.add(content, rel)?;
    let a = g.scale(sum, 1.0 / (d as f64).sqrt());
    finish(g, a, v)
}

/// `A[i,j] = (Q_i K_jᵀ + Q_{P,i} K_{P,j}ᵀ)/√(2d) + b[σ(i,j)]` with `Q_P = P W_P^Q`, `K_P = P W_P^K`.
#[allow(clippy::too_many_arguments)]
pub fn attention_tupe(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    position: Var,
    pos_query: Var,
    pos_key: Var,
    rel_bias: Var,
    idx: &RelPosIndexer,
) -> Result<AttentionOutput> {
    let (s, d) = head_dims(g, q, k, v)?;
    let pshape = g.shape(position).to_vec();
    if pshape.len() != 2 {
        return Err(Error::Dimension("tupe position table must be r_a×D".into()));
    }
    if s > pshape[0] {
        return Err(Error::Config(format!("sequence length {s} exceeds r_a = {}", pshape[0])));
    }
    if g.shape(pos_query) != [pshape[1], d] || g.shape(pos_key) != [pshape[1], d] {
        return Err(Error::Dimension("tupe position projections must be D×d".into()));
    }
    if g.value(rel_bias).len() != 2 * idx.r_s() {
        return Err(Error::Dimension("tupe relative bias must have 2·r_s entries".into()));
    }
    let rows: Vec<usize> = (0..s).collect();
    let p = g.gather_rows(position, &rows)?;
    let qp = g.matmul(p, pos_query)?;
    let kp = g.matmul(p, pos_key)?;
    let content = g.matmul_bt(q, k)?;
    let positional = g.matmul_bt(qp, kp)?;
    let sum = g.add(content, positional)?;
    let scaled = g.scale(sum, 1.0 / ((2 * d) as f64).sqrt());
    let bias = g.gather(rel_bias, idx.sigma_matrix(s), &[s, s])?;
    let a = g.add(scaled, bias)?;
    finish(g, a, v)
}

/// `A[i,j] = (Q_i K_jᵀ + Q_i K^r[σ(i,j)]ᵀ + K_j Q^r[σ(j,i)]ᵀ)/√(3d)`.
pub fn attention_deberta(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    key_rel: Var,
    query_rel: Var,
    idx: &RelPosIndexer,
) -> Result<AttentionOutput> {
    let (s, d) = head_dims(g, q, k, v)?;
    check_table(g, key_rel, 2 * idx.r_s(), d, "deberta key_rel")?;
    check_table(g, query_rel, 2 * idx.r_s(), d, "deberta query_rel")?;
    let sigma = idx.sigma_matrix(s);
    let content = g.matmul_bt(q, k)?;
    let c2p = relative_scores(g, q, key_rel, &sigma, s)?;
    // p2c[j,i] = K_j · Q^r[σ(j,i)]; transposing gives the [i,j] term.
    let p2c_t = relative_scores(g, k, query_rel, &sigma, s)?;
    let p2c = g.transpose(p2c_t)?;
    let sum = g.add(content, c2p)?;
    let sum = g.add(sum, p2c)?;
    let a = g.scale(sum, 1.0 / ((3 * d) as f64).sqrt());
    finish(g, a, v)
}

/// Materializes `K^d[δ,ρ] = (D[ρ] ⊙ K^rd[δ]) · W` for all `r_s × 3` pairs, as rows `δ·3+ρ`.
pub fn ddrp_table(g: &mut Graph, direction: Var, distance: Var, rel_proj: Var) -> Result<Var> {
    let ds = g.shape(direction).to_vec();
    let ks = g.shape(distance).to_vec();
    if ds.len() != 2 || ds[0] != 3 || ks.len() != 2 || ks[1] != ds[1] || g.shape(rel_proj) != [ds[1], ds[1]] {
        return Err(Error::Dimension(format!(
            "ddrp table: direction {ds:?}, distance {ks:?}, projection {:?}",
            g.shape(rel_proj)
        )));
    }
    let r_s = ks[0];
    let dir_rows: Vec<usize> = (0..r_s).flat_map(|_| 0..3).collect();
    let dist_rows: Vec<usize> = (0..r_s).flat_map(|dl| [dl; 3]).collect();
    let dirs = g.gather_rows(direction, &dir_rows)?;
    let dists = g.gather_rows(distance, &dist_rows)?;
    let prod = g.mul(dirs, dists)?;
    g.matmul(prod, rel_proj)
}

/// `A[i,j] = Q_i·(K_j + K^d[δ(i,j), ρ(i,j)])ᵀ / √d` over a table from [`ddrp_table`].
pub fn attention_ddrp(g: &mut Graph, q: Var, k: Var, v: Var, table: Var, idx: &RelPosIndexer) -> Result<AttentionOutput> {
    let (s, d) = head_dims(g, q, k, v)?;
    check_table(g, table, 3 * idx.r_s(), d, "ddrp table")?;
    let content = g.matmul_bt(q, k)?;
    let rel = relative_scores(g, q, table, &idx.ddrp_row_matrix(s), s)?;
    let sum = g.add(content, rel)?;
    let a = g.scale(sum, 1.0 / (d as f64).sqrt());
    finish(g, a, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softmax_rows, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_index(5, 3, 64).unwrap(), 66);
        assert_eq!(sigma_index(0, 200, 64).unwrap(), 0);
        assert_eq!(sigma_index(200, 0, 64).unwrap(), 127);
        assert!(sigma_index(0, 0, 0).is_err());
    }

    #[test]
    fn delta_rho_examples() {
        assert_eq!(delta_rho(3, 3, 64).unwrap(), (0, 0));
        assert_eq!(delta_rho(2, 7, 64).unwrap(), (5, 1));
        assert_eq!(delta_rho(200, 0, 64).unwrap(), (63, 2));
        // Negative saturation stays inside the r_s-row distance table.
        assert_eq!(delta_rho(0, 200, 64).unwrap(), (63, 1));
    }

    #[test]
    fn param_counts() {
        assert_eq!(extra_param_count(EncodingKind::Ddrp, 64, 64, 512, 768), 8384);
        assert_eq!(extra_param_count(EncodingKind::Shaw, 64, 64, 512, 768), 8192);
        assert_eq!(relative_vector_count(EncodingKind::Ddrp, 64), 67);
        for kind in EncodingKind::ALL {
            let from_shapes: usize = match kind {
                EncodingKind::Absolute => absolute_position_shape(512, 768).iter().product(),
                _ => group_param_shapes(kind, 64, 768, 64, 512).iter().map(|(_, s)| s.iter().product::<usize>()).sum(),
            };
            assert_eq!(from_shapes, extra_param_count(kind, 64, 64, 512, 768), "{kind}");
        }
    }

    #[test]
    fn kind_parsing() {
        for kind in EncodingKind::ALL {
            assert_eq!(kind.as_str().parse::<EncodingKind>().unwrap(), kind);
        }
        assert!(matches!("rope".parse::<EncodingKind>(), Err(Error::Config(_))));
    }

    // --- scalar-loop oracles -------------------------------------------------

    fn oracle_shaw(q: &Tensor, k: &Tensor, kr: &Tensor, idx: &RelPosIndexer) -> Tensor {
        let (s, d) = (q.rows(), q.cols());
        Tensor::from_fn(s, s, |i, j| {
            let mut acc = 0.0;
            for c in 0..d {
                acc += q.at(i, c) * (k.at(j, c) + kr.at(idx.sigma(i, j), c));
            }
            acc / (d as f64).sqrt()
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn oracle_tupe(q: &Tensor, k: &Tensor, p: &Tensor, wq: &Tensor, wk: &Tensor, b: &Tensor, idx: &RelPosIndexer) -> Tensor {
        let (s, d) = (q.rows(), q.cols());
        let hidden = p.cols();
        let proj = |w: &Tensor, i: usize, c: usize| (0..hidden).map(|h| p.at(i, h) * w.at(h, c)).sum::<f64>();
        Tensor::from_fn(s, s, |i, j| {
            let mut content = 0.0;
            let mut pos = 0.0;
            for c in 0..d {
                content += q.at(i, c) * k.at(j, c);
                pos += proj(wq, i, c) * proj(wk, j, c);
            }
            (content + pos) / ((2 * d) as f64).sqrt() + b.data()[idx.sigma(i, j)]
        })
    }

    fn oracle_deberta(q: &Tensor, k: &Tensor, kr: &Tensor, qr: &Tensor, idx: &RelPosIndexer, swap: bool) -> Tensor {
        let (s, d) = (q.rows(), q.cols());
        Tensor::from_fn(s, s, |i, j| {
            let third = if swap { idx.sigma(i, j) } else { idx.sigma(j, i) };
            let mut acc = 0.0;
            for c in 0..d {
                acc += q.at(i, c) * k.at(j, c) + q.at(i, c) * kr.at(idx.sigma(i, j), c) + k.at(j, c) * qr.at(third, c);
            }
            acc / ((3 * d) as f64).sqrt()
        })
    }

    fn oracle_ddrp_vector(dir: &Tensor, dist: &Tensor, w: &Tensor, idx: &RelPosIndexer, i: usize, j: usize) -> Vec<f64> {
        let d = dir.cols();
        let (dl, r) = idx.delta_rho(i, j);
        (0..d)
            .map(|c| (0..d).map(|e| dir.at(r, e) * dist.at(dl, e) * w.at(e, c)).sum())
            .collect()
    }

    fn oracle_ddrp(q: &Tensor, k: &Tensor, dir: &Tensor, dist: &Tensor, w: &Tensor, idx: &RelPosIndexer) -> Tensor {
        let (s, d) = (q.rows(), q.cols());
        Tensor::from_fn(s, s, |i, j| {
            let kd = oracle_ddrp_vector(dir, dist, w, idx, i, j);
            (0..d).map(|c| q.at(i, c) * (k.at(j, c) + kd[c])).sum::<f64>() / (d as f64).sqrt()
        })
    }

    struct Draw {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        kr: Tensor,
        qr: Tensor,
        p: Tensor,
        wq: Tensor,
        wk: Tensor,
        b: Tensor,
        dir: Tensor,
        dist: Tensor,
        w: Tensor,
    }

    fn draw(s: usize, d: usize, hidden: usize, r_s: usize, r_a: usize, rng: &mut ChaCha8Rng) -> Draw {
        Draw {
            q: random(s, d, rng),
            k: random(s, d, rng),
            v: random(s, d, rng),
            kr: random(2 * r_s, d, rng),
            qr: random(2 * r_s, d, rng),
            p: random(r_a, hidden, rng),
            wq: random(hidden, d, rng),
            wk: random(hidden, d, rng),
            b: Tensor::vector((0..2 * r_s).map(|_| rng.random_range(-1.0..1.0)).collect()),
            dir: random(3, d, rng),
            dist: random(r_s, d, rng),
            w: random(d, d, rng),
        }
    }

    fn run_kind(kind: EncodingKind, x: &Draw, idx: &RelPosIndexer) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(x.q.clone()), g.constant(x.k.clone()), g.constant(x.v.clone()));
        let out = match kind {
            EncodingKind::Absolute => attention_plain(&mut g, q, k, v, 1),
            EncodingKind::Shaw => {
                let kr = g.constant(x.kr.clone());
                attention_shaw(&mut g, q, k, v, kr, idx)
            }
            EncodingKind::Tupe => {
                let (p, wq, wk, b) = (
                    g.constant(x.p.clone()),
                    g.constant(x.wq.clone()),
                    g.constant(x.wk.clone()),
                    g.constant(x.b.clone()),
                );
                attention_tupe(&mut g, q, k, v, p, wq, wk, b, idx)
            }
            EncodingKind::Deberta => {
                let (kr, qr) = (g.constant(x.kr.clone()), g.constant(x.qr.clone()));
                attention_deberta(&mut g, q, k, v, kr, qr, idx)
            }
            EncodingKind::Ddrp => {
                let (dir, dist, w) = (g.constant(x.dir.clone()), g.constant(x.dist.clone()), g.constant(x.w.clone()));
                let table = ddrp_table(&mut g, dir, dist, w).unwrap();
                attention_ddrp(&mut g, q, k, v, table, idx)
            }
        }
        .unwrap();
        (g.value(out.weights).clone(), g.value(out.probs).clone())
    }

    fn oracle(kind: EncodingKind, x: &Draw, idx: &RelPosIndexer) -> Tensor {
        match kind {
            EncodingKind::Absolute => {
                let zero = Tensor::zeros(&[2 * idx.r_s(), x.q.cols()]);
                oracle_shaw(&x.q, &x.k, &zero, idx)
            }
            EncodingKind::Shaw => oracle_shaw(&x.q, &x.k, &x.kr, idx),
            EncodingKind::Tupe => oracle_tupe(&x.q, &x.k, &x.p, &x.wq, &x.wk, &x.b, idx),
            EncodingKind::Deberta => oracle_deberta(&x.q, &x.k, &x.kr, &x.qr, idx, false),
            EncodingKind::Ddrp => oracle_ddrp(&x.q, &x.k, &x.dir, &x.dist, &x.w, idx),
        }
    }

    #[test]
    fn every_variant_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(s, r_s) in &[(3, 64), (4, 2), (6, 3), (8, 4)] {
            let idx = RelPosIndexer::new(r_s).unwrap();
            let x = draw(s, 4, 8, r_s, 8, &mut rng);
            for kind in EncodingKind::ALL {
                let (a, probs) = run_kind(kind, &x, &idx);
                let diff = a.max_abs_diff(&oracle(kind, &x, &idx));
                assert!(diff < 1e-12, "{kind} S={s} r_s={r_s}: {diff}");
                for i in 0..s {
                    assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_relative_parameters_reduce_to_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let idx = RelPosIndexer::new(4).unwrap();
        let mut x = draw(5, 4, 8, 4, 8, &mut rng);
        x.kr = Tensor::zeros(&[8, 4]);
        x.qr = Tensor::zeros(&[8, 4]);
        x.p = Tensor::zeros(&[8, 8]);
        x.b = Tensor::zeros(&[8]);
        x.dist = Tensor::zeros(&[4, 4]);
        let plain = |c: usize| {
            let mut g = Graph::new();
            let (q, k, v) = (g.constant(x.q.clone()), g.constant(x.k.clone()), g.constant(x.v.clone()));
            let out = attention_plain(&mut g, q, k, v, c).unwrap();
            g.value(out.weights).clone()
        };
        for kind in EncodingKind::ALL {
            let (a, _) = run_kind(kind, &x, &idx);
            assert!(a.max_abs_diff(&plain(kind.scale_terms())) < 1e-15, "{kind}");
        }
        // Scales differ exactly by √c.
        let (p1, p2, p3) = (plain(1), plain(2), plain(3));
        for i in 0..p1.len() {
            assert!((p1.data()[i] - p2.data()[i] * 2f64.sqrt()).abs() < 1e-13);
            assert!((p1.data()[i] - p3.data()[i] * 3f64.sqrt()).abs() < 1e-13);
        }
    }

    #[test]
    fn tupe_constant_bias_leaves_probs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let idx = RelPosIndexer::new(4).unwrap();
        let mut x = draw(5, 4, 8, 4, 8, &mut rng);
        x.p = Tensor::zeros(&[8, 8]);
        x.b = Tensor::zeros(&[8]);
        let (a0, p0) = run_kind(EncodingKind::Tupe, &x, &idx);
        x.b = Tensor::filled(&[8], 2.5);
        let (a1, p1) = run_kind(EncodingKind::Tupe, &x, &idx);
        for (u, v) in a0.data().iter().zip(a1.data()) {
            assert!((v - u - 2.5).abs() < 1e-14);
        }
        assert!(p0.max_abs_diff(&p1) < 1e-15);
    }

    #[test]
    fn tupe_rejects_overlong_sequence() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[5, 2]));
        let p = g.constant(Tensor::zeros(&[4, 3]));
        let w = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::zeros(&[8]));
        let idx = RelPosIndexer::new(4).unwrap();
        let r = attention_tupe(&mut g, q, q, q, p, w, w, b, &idx);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn empty_sequence_gives_empty_output() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[0, 4]));
        let kr = g.constant(Tensor::zeros(&[8, 4]));
        let idx = RelPosIndexer::new(4).unwrap();
        let out = attention_shaw(&mut g, q, q, q, kr, &idx).unwrap();
        assert_eq!(g.shape(out.output), &[0, 4]);
    }

    #[test]
    fn deberta_third_term_index_order_is_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let idx = RelPosIndexer::new(4).unwrap();
        let x = draw(4, 3, 6, 4, 6, &mut rng);
        let (a, _) = run_kind(EncodingKind::Deberta, &x, &idx);
        let right = oracle_deberta(&x.q, &x.k, &x.kr, &x.qr, &idx, false);
        let swapped = oracle_deberta(&x.q, &x.k, &x.kr, &x.qr, &idx, true);
        assert!(a.max_abs_diff(&right) < 1e-12);
        assert!(a.max_abs_diff(&swapped) > 1e-3);
    }

    #[test]
    fn ddrp_table_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let idx = RelPosIndexer::new(5).unwrap();
        let (dir, dist, w) = (random(3, 4, &mut rng), random(5, 4, &mut rng), random(4, 4, &mut rng));
        let mut g = Graph::new();
        let (dv, kv, wv) = (g.constant(dir.clone()), g.constant(dist.clone()), g.constant(w.clone()));
        let table = ddrp_table(&mut g, dv, kv, wv).unwrap();
        let table = g.value(table).clone();
        let s = 6;
        for i in 0..s {
            for j in 0..s {
                let direct = oracle_ddrp_vector(&dir, &dist, &w, &idx, i, j);
                let row = table.row(idx.ddrp_row(i, j));
                for c in 0..4 {
                    assert!((row[c] - direct[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ddrp_identity_reduction_is_direction_blind() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let dist = random(4, 3, &mut rng);
        let mut g = Graph::new();
        let dir = g.constant(Tensor::filled(&[3, 3], 1.0));
        let kv = g.constant(dist.clone());
        let w = g.constant(Tensor::identity(3));
        let table = ddrp_table(&mut g, dir, kv, w).unwrap();
        let table = g.value(table);
        for dl in 0..4 {
            for r in 0..3 {
                assert_eq!(table.row(dl * 3 + r), dist.row(dl));
            }
        }
    }

    #[test]
    fn ddrp_equals_shaw_under_symmetric_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (r_s, d, s) = (6, 4, 5);
        let idx = RelPosIndexer::new(r_s).unwrap();
        let mut x = draw(s, d, 8, r_s, 8, &mut rng);
        x.dir = Tensor::filled(&[3, d], 1.0);
        x.w = Tensor::identity(d);
        // K^r[r_s + off] = K^rd[|off|] for every offset the sequence reaches.
        let mut kr = Tensor::zeros(&[2 * r_s, d]);
        for off in -(r_s as i64 - 1)..(r_s as i64) {
            let row = (off + r_s as i64) as usize;
            let src = off.unsigned_abs() as usize;
            kr.data_mut()[row * d..(row + 1) * d].copy_from_slice(x.dist.row(src));
        }
        x.kr = kr;
        let (shaw, _) = run_kind(EncodingKind::Shaw, &x, &idx);
        let (ddrp, _) = run_kind(EncodingKind::Ddrp, &x, &idx);
        assert_eq!(shaw.data(), ddrp.data());
    }

    #[test]
    fn attention_output_is_probs_times_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let idx = RelPosIndexer::new(3).unwrap();
        let x = draw(4, 3, 6, 3, 6, &mut rng);
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(x.q.clone()), g.constant(x.k.clone()), g.constant(x.v.clone()));
        let kr = g.constant(x.kr.clone());
        let out = attention_shaw(&mut g, q, k, v, kr, &idx).unwrap();
        let probs = softmax_rows(&oracle_shaw(&x.q, &x.k, &x.kr, &idx));
        let z = g.value(out.output);
        for i in 0..4 {
            for c in 0..3 {
                let expect: f64 = (0..4).map(|j| probs.at(i, j) * x.v.at(j, c)).sum();
                assert!((z.at(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_attention_layers_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (s, d, r_s) = (5, 3, 3);
        let idx = RelPosIndexer::new(r_s).unwrap();
        let x = draw(s, d, 6, r_s, 6, &mut rng);
        let weights = random(s, d, &mut rng);
        for kind in EncodingKind::ALL {
            let inputs = vec![
                x.q.clone(), x.k.clone(), x.v.clone(), x.kr.clone(), x.qr.clone(),
                x.p.clone(), x.wq.clone(), x.wk.clone(), x.b.clone(), x.dir.clone(), x.dist.clone(), x.w.clone(),
            ];
            let weights = weights.clone();
            let err = crate::tensor::grad_check_fd_multi(
                |g, v| {
                    let out = match kind {
                        EncodingKind::Absolute => attention_plain(g, v[0], v[1], v[2], 1)?,
                        EncodingKind::Shaw => attention_shaw(g, v[0], v[1], v[2], v[3], &idx)?,
                        EncodingKind::Tupe => attention_tupe(g, v[0], v[1], v[2], v[5], v[6], v[7], v[8], &idx)?,
                        EncodingKind::Deberta => attention_deberta(g, v[0], v[1], v[2], v[3], v[4], &idx)?,
                        EncodingKind::Ddrp => {
                            let t = ddrp_table(g, v[9], v[10], v[11])?;
                            attention_ddrp(g, v[0], v[1], v[2], t, &idx)?
                        }
                    };
                    let w = g.constant(weights.clone());
                    let m = g.mul(out.output, w)?;
                    Ok(g.sum(m))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{kind}: {err}");
        }
    }

    proptest! {
        #[test]
        fn index_functions_respect_ranges(i in 0usize..300, j in 0usize..300, r_s in 1usize..80) {
            let idx = RelPosIndexer::new(r_s).unwrap();
            let x = i as i64 - j as i64;
            prop_assert!((-(r_s as i64)..=r_s as i64 - 1).contains(&idx.clip(x)));
            prop_assert!(idx.sigma(i, j) < 2 * r_s);
            let (dl, r) = idx.delta_rho(i, j);
            prop_assert!(dl < r_s && r < 3);
            prop_assert_eq!(r == 0, i == j);
            prop_assert_eq!(r == 1, i < j);
            prop_assert_eq!(idx.delta(i, j), idx.delta(j, i));
            if i != j {
                prop_assert_eq!(idx.rho(i, j) + idx.rho(j, i), 3);
            }
            if i.abs_diff(j) < r_s {
                prop_assert_eq!(idx.sigma(i, j) + idx.sigma(j, i), 2 * r_s);
            }
        }

        #[test]
        fn ddrp_is_smaller_than_deberta_below_bound(d in 1usize..200, r_s in 2usize..200) {
            let ddrp = extra_param_count(EncodingKind::Ddrp, d, r_s, 1, 1);
            let deberta = extra_param_count(EncodingKind::Deberta, d, r_s, 1, 1);
            prop_assert_eq!(ddrp < deberta, d + 3 < 3 * r_s);
        }
    }
}
