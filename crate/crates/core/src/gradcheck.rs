//! Finite-difference gradient checks for whole models and single attention layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Objective;
use crate::error::Result;
use crate::model::{Bound, Mode, Model, ModelConfig};
use crate::objectives::{hcd_loss, mlm_loss, mth_combine, tcd_loss, MaskAction, MaskingPlan, ObjectiveWarnings};
use crate::relpos::{
    attention_deberta, attention_ddrp, attention_plain, attention_shaw, attention_tupe, ddrp_table, EncodingKind,
    RelPosIndexer,
};
use crate::tensor::{grad_check_fd_multi, Graph, Tensor, Var};

/// Central-difference step used for full models.
pub const MODEL_STEP: f64 = 1e-4;
/// Central-difference step used for isolated attention layers.
pub const ATTENTION_STEP: f64 = 1e-5;

/// Model configuration the checks run on: the `gradcheck` preset without dropout and with a wider init.
pub fn check_config(kind: EncodingKind) -> ModelConfig {
    let base = ModelConfig::preset("gradcheck").expect("built-in preset");
    ModelConfig { encoding: kind, dropout: 0.0, init_std: 0.3, ..base }
}

/// Maximum relative error between backprop and central differences over every model parameter.
///
/// The loss is MLM on a random masked sequence, plus TCD and HCD terms for [`Objective::Mth`].
pub fn model_fd_error(kind: EncodingKind, objective: Objective, seed: u64) -> Result<f64> {
    let c = check_config(kind);
    let m = Model::init(c.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = c.max_len;
    let ids: Vec<u32> = (0..s).map(|_| rng.random_range(0..c.vocab_size as u32)).collect();
    let mut positions: Vec<usize> = (0..s).filter(|_| rng.random_bool(0.4)).collect();
    if positions.is_empty() {
        positions.push(0);
    }
    let n = positions.len();
    let plan = MaskingPlan {
        targets: positions.iter().map(|&p| ids[p]).collect(),
        inputs: vec![2; n],
        actions: vec![MaskAction::Mask; n],
        positions,
    };
    let input = plan.apply(&ids);
    let tokens: Vec<usize> = (0..s).step_by(2).collect();
    let heads: Vec<Vec<usize>> = vec![(0..c.heads).collect(); c.layers];
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let bound = Bound { vars: vars.to_vec() };
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let tr = m.forward(g, &bound, &input, Mode::Eval, &mut unused)?;
        let mut w = ObjectiveWarnings::default();
        let mlm = mlm_loss(g, tr.logits, &plan, &mut w)?;
        if objective == Objective::Mlm {
            return Ok(mlm);
        }
        let tcd = tcd_loss(g, tr.last_hidden, &tokens, &mut w)?;
        let hcd = hcd_loss(g, &tr.attn_weights, &heads, &mut w)?;
        mth_combine(g, mlm, tcd, hcd, 1.0, 0.5, 0.7)
    };
    grad_check_fd_multi(f, m.params.tensors(), MODEL_STEP)
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Maximum relative error for one attention layer of `kind` with every input (Q, K, V and the
/// positional parameters) treated as a variable. The output is reduced against random weights.
pub fn attention_fd_error(kind: EncodingKind, seed: u64) -> Result<f64> {
    let (s, d, r_s, r_a) = (5, 3, 3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = RelPosIndexer::new(r_s)?;
    let mut inputs = vec![normal(s, d, &mut rng), normal(s, d, &mut rng), normal(s, d, &mut rng)];
    inputs.extend(match kind {
        EncodingKind::Absolute => vec![],
        EncodingKind::Shaw => vec![normal(2 * r_s, d, &mut rng)],
        EncodingKind::Deberta => vec![normal(2 * r_s, d, &mut rng), normal(2 * r_s, d, &mut rng)],
        EncodingKind::Tupe => vec![
            normal(r_a, d, &mut rng),
            normal(d, d, &mut rng),
            normal(d, d, &mut rng),
            Tensor::vector((0..2 * r_s).map(|_| StandardNormal.sample(&mut rng)).collect()),
        ],
        EncodingKind::Ddrp => vec![normal(3, d, &mut rng), normal(r_s, d, &mut rng), normal(d, d, &mut rng)],
    });
    let weights = normal(s, d, &mut rng);
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let out = match kind {
            EncodingKind::Absolute => attention_plain(g, v[0], v[1], v[2], 1)?,
            EncodingKind::Shaw => attention_shaw(g, v[0], v[1], v[2], v[3], &idx)?,
            EncodingKind::Deberta => attention_deberta(g, v[0], v[1], v[2], v[3], v[4], &idx)?,
            EncodingKind::Tupe => attention_tupe(g, v[0], v[1], v[2], v[3], v[4], v[5], v[6], &idx)?,
            EncodingKind::Ddrp => {
                let t = ddrp_table(g, v[3], v[4], v[5])?;
                attention_ddrp(g, v[0], v[1], v[2], t, &idx)?
            }
        };
        let w = g.constant(weights.clone());
        let m = g.mul(out.output, w)?;
        Ok(g.sum(m))
    };
    grad_check_fd_multi(f, &inputs, ATTENTION_STEP)
}
