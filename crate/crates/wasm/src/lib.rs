//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string. The same computations are available natively
//! through the `*_json` functions.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use ddrp_core::objectives::decay_factor;
use ddrp_core::optim::LinearSchedule;
use ddrp_core::relpos::{
    attention_deberta, attention_ddrp, attention_plain, attention_shaw, attention_tupe, ddrp_table, EncodingKind,
    RelPosIndexer,
};
use ddrp_core::{Error, Graph, Result, Tensor};

const MAX_LEN: usize = 128;

fn grid(t: &Tensor) -> Value {
    json!((0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>())
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn check_len(seq_len: usize) -> Result<()> {
    if seq_len == 0 || seq_len > MAX_LEN {
        return Err(Error::Config(format!("sequence length must be in 1..={MAX_LEN}")));
    }
    Ok(())
}

/// One attention head of `kind` over random parameters drawn from `seed`.
///
/// With `content = false` the queries are all ones and the keys zero, so the map shows only
/// what the positional parameters contribute.
pub fn attention_map_json(kind: &str, seq_len: usize, r_s: usize, head_dim: usize, seed: u64, content: bool) -> Result<String> {
    check_len(seq_len)?;
    let kind: EncodingKind = kind.parse()?;
    let (s, d) = (seq_len, head_dim.max(1));
    let idx = RelPosIndexer::new(r_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, k) = if content {
        (normal(s, d, &mut rng), normal(s, d, &mut rng))
    } else {
        (Tensor::filled(&[s, d], 1.0), Tensor::zeros(&[s, d]))
    };
    let v = normal(s, d, &mut rng);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let out = match kind {
        EncodingKind::Absolute => attention_plain(&mut g, qv, kv, vv, 1)?,
        EncodingKind::Shaw => {
            let t = g.constant(normal(2 * r_s, d, &mut rng));
            attention_shaw(&mut g, qv, kv, vv, t, &idx)?
        }
        EncodingKind::Tupe => {
            let p = g.constant(normal(s, d, &mut rng));
            let uq = g.constant(normal(d, d, &mut rng));
            let uk = g.constant(normal(d, d, &mut rng));
            let b = g.constant(Tensor::vector((0..2 * r_s).map(|_| StandardNormal.sample(&mut rng)).collect()));
            attention_tupe(&mut g, qv, kv, vv, p, uq, uk, b, &idx)?
        }
        EncodingKind::Deberta => {
            let kr = g.constant(normal(2 * r_s, d, &mut rng));
            let qr = g.constant(normal(2 * r_s, d, &mut rng));
            attention_deberta(&mut g, qv, kv, vv, kr, qr, &idx)?
        }
        EncodingKind::Ddrp => {
            let dir = g.constant(normal(3, d, &mut rng));
            let dist = g.constant(normal(r_s, d, &mut rng));
            let w = g.constant(normal(d, d, &mut rng));
            let t = ddrp_table(&mut g, dir, dist, w)?;
            attention_ddrp(&mut g, qv, kv, vv, t, &idx)?
        }
    };
    Ok(json!({
        "kind": kind.as_str(),
        "weights": grid(g.value(out.weights)),
        "probs": grid(g.value(out.probs)),
    })
    .to_string())
}

/// `σ(i,j)`, `δ(i,j)` and `ρ(i,j)` for every pair.
pub fn index_maps_json(seq_len: usize, r_s: usize) -> Result<String> {
    check_len(seq_len)?;
    let idx = RelPosIndexer::new(r_s)?;
    let table = |f: &dyn Fn(usize, usize) -> usize| (0..seq_len).map(|i| (0..seq_len).map(|j| f(i, j)).collect()).collect::<Vec<Vec<usize>>>();
    Ok(json!({
        "sigma": table(&|i, j| idx.sigma(i, j)),
        "delta": table(&|i, j| idx.delta(i, j)),
        "rho": table(&|i, j| idx.rho(i, j)),
    })
    .to_string())
}

/// Learning rate and the decayed auxiliary weights `α₁T`, `α₂T` at `points` evenly spaced steps.
pub fn schedule_json(step_max: u64, alpha1: f64, alpha2: f64, peak_lr: f64, warmup_ratio: f64, points: usize) -> Result<String> {
    if step_max == 0 || points < 2 {
        return Err(Error::Config("need step_max > 0 and at least two points".into()));
    }
    let sched = LinearSchedule::new(peak_lr, warmup_ratio, step_max);
    let steps: Vec<u64> = (0..points).map(|p| (p as u64 * step_max) / (points as u64 - 1)).collect();
    let decay = steps.iter().map(|&s| decay_factor(s, step_max)).collect::<Result<Vec<f64>>>()?;
    Ok(json!({
        "step": steps,
        "T": decay,
        "tcd_weight": decay.iter().map(|t| alpha1 * t).collect::<Vec<_>>(),
        "hcd_weight": decay.iter().map(|t| alpha2 * t).collect::<Vec<_>>(),
        "lr": steps.iter().map(|&s| sched.lr(s)).collect::<Vec<_>>(),
    })
    .to_string())
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn attention_map(kind: &str, seq_len: usize, r_s: usize, head_dim: usize, seed: u64, content: bool) -> std::result::Result<String, JsError> {
    js(attention_map_json(kind, seq_len, r_s, head_dim, seed, content))
}

#[wasm_bindgen]
pub fn index_maps(seq_len: usize, r_s: usize) -> std::result::Result<String, JsError> {
    js(index_maps_json(seq_len, r_s))
}

#[wasm_bindgen]
pub fn schedule(step_max: u64, alpha1: f64, alpha2: f64, peak_lr: f64, warmup_ratio: f64, points: usize) -> std::result::Result<String, JsError> {
    js(schedule_json(step_max, alpha1, alpha2, peak_lr, warmup_ratio, points))
}
