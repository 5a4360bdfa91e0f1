//! Data loading and the deterministic pre-training loop.

use std::fs::{self, File, OpenOptions};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState, TrainState};
use crate::config::{TokenSampling, TrainConfig};
use crate::corpus::{build_corpus, synth_directional_corpus, Corpus, Document};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::objectives::{
    apply_whole_word_masking, combine, decay_factor, hcd_loss, mlm_nll_sum, mth_combine, sample_heads, sample_tokens,
    strided_tokens, tcd_loss, MaskVocab, ObjectiveWarnings, WeightSpace,
};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, LinearSchedule};
use crate::tensor::{Graph, Tensor};

const DATA_STREAM: u64 = 2;
const AUX_STREAM: u64 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Model-sized training sequences plus what masking needs to know about the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub sequences: Vec<Document>,
    pub mask_vocab: MaskVocab,
    pub vocab_size: usize,
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus, max_len: usize) -> Result<Self> {
        let sequences = corpus.sequences(max_len);
        if sequences.is_empty() {
            return Err(Error::Input("corpus has no usable sequences".into()));
        }
        Ok(TrainData { sequences, mask_vocab: corpus.vocab.mask_vocab(), vocab_size: corpus.vocab.len() })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = DefaultHasher::new();
        self.sequences.iter().for_each(|d| (&d.ids, &d.word_starts).hash(&mut h));
        self.vocab_size.hash(&mut h);
        format!("{:016x}", h.finish())
    }

    pub fn token_ids(&self) -> Vec<Vec<u32>> {
        self.sequences.iter().map(|d| d.ids.clone()).collect()
    }
}

/// The corpus a configuration points at: a text file or a synthetic preset.
pub fn load_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    match (&cfg.corpus, cfg.synthetic) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)?;
            build_corpus(&text, cfg.vocab_cap, cfg.min_doc_len, cfg.seed)
        }
        (None, Some(preset)) => Ok(synth_directional_corpus(preset, cfg.synthetic_size, cfg.seed).corpus),
        (None, None) => Err(Error::Config("no corpus: set corpus or synthetic".into())),
        (Some(_), Some(_)) => Err(Error::Config("set at most one of corpus and synthetic".into())),
    }
}

/// Sentences for diagnostics. Synthetic corpora get a held-out draw (next seed, same vocabulary);
/// text corpora reuse their training sequences.
pub fn evaluation_sequences(cfg: &TrainConfig) -> Result<Vec<Vec<u32>>> {
    let corpus = match (cfg.synthetic, &cfg.corpus) {
        (Some(preset), None) => synth_directional_corpus(preset, cfg.synthetic_size, cfg.seed.wrapping_add(1)).corpus,
        _ => load_corpus(cfg)?,
    };
    Ok(TrainData::from_corpus(&corpus, cfg.model.max_len)?.token_ids())
}

/// Loads the configured corpus and sizes the model vocabulary to it.
pub fn prepare(cfg: &TrainConfig) -> Result<(TrainConfig, TrainData)> {
    let corpus = load_corpus(cfg)?;
    let data = TrainData::from_corpus(&corpus, cfg.model.max_len)?;
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = data.vocab_size;
    cfg.model.validate()?;
    Ok((cfg, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub mlm: f64,
    pub tcd: f64,
    pub hcd: f64,
    #[serde(rename = "T")]
    pub decay: f64,
    pub total: f64,
    pub wall_ms: u64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub data: TrainData,
    pub optimizer: AdamW,
    pub step: u64,
    pub warnings: ObjectiveWarnings,
    schedule: LinearSchedule,
    data_rng: ChaCha8Rng,
    aux_rng: ChaCha8Rng,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl Trainer {
    /// Fresh model initialized from `config.seed`. `config.model.vocab_size` must match the data.
    pub fn new(config: TrainConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        if config.model.vocab_size != data.vocab_size {
            return Err(Error::Config(format!(
                "model vocabulary {} differs from the data vocabulary {}",
                config.model.vocab_size, data.vocab_size
            )));
        }
        let model = Model::init(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(adam_config(&config), &model.params);
        Ok(Trainer {
            schedule: LinearSchedule::new(config.lr, config.warmup_ratio, config.step_max),
            data_rng: stream(config.seed, DATA_STREAM),
            aux_rng: stream(config.seed, AUX_STREAM),
            config,
            model,
            data,
            optimizer,
            step: 0,
            warnings: ObjectiveWarnings::default(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint, data: TrainData) -> Result<Self> {
        let state = ck.train.ok_or_else(|| Error::Config("checkpoint has no training state".into()))?;
        let (m, v) = ck.moments.ok_or_else(|| Error::Config("checkpoint has no optimizer moments".into()))?;
        if state.data_fingerprint != data.fingerprint() {
            return Err(Error::Config("checkpoint was trained on different data".into()));
        }
        let config = state.config;
        let optimizer = AdamW { config: adam_config(&config), t: state.adam_t, m, v };
        Ok(Trainer {
            schedule: LinearSchedule::new(config.lr, config.warmup_ratio, config.step_max),
            data_rng: state.data_rng.restore()?,
            aux_rng: state.aux_rng.restore()?,
            config,
            model: ck.model,
            data,
            optimizer,
            step: state.step,
            warnings: state.warnings,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: Some(TrainState {
                step: self.step,
                step_max: self.config.step_max,
                config: self.config.clone(),
                data_rng: RngState::capture(&self.data_rng),
                aux_rng: RngState::capture(&self.aux_rng),
                adam_t: self.optimizer.t,
                warnings: self.warnings,
                data_fingerprint: self.data.fingerprint(),
            }),
            moments: Some((self.optimizer.m.clone(), self.optimizer.v.clone())),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.step_max
    }

    /// One optimizer update. Loss terms are evaluated before the update.
    pub fn step_once(&mut self) -> Result<MetricsRecord> {
        let cfg = &self.config;
        let k = self.step + 1;
        let lr = self.schedule.lr(k);
        let decay = decay_factor(self.step, cfg.step_max)?;
        let (a1, a2) = cfg.effective_alphas();
        let (heads, layers) = (cfg.model.heads, cfg.model.layers);

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let n = self.data.sequences.len();
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| self.data_rng.random_range(0..n)).collect();
        let (mut nll, mut count, mut tcds, mut hcds) = (Vec::new(), 0usize, Vec::new(), Vec::new());
        for i in batch {
            let doc = &self.data.sequences[i];
            let plan = apply_whole_word_masking(&doc.ids, &doc.word_starts, cfg.mask_ratio, &self.data.mask_vocab, &mut self.data_rng)?;
            let input = plan.apply(&doc.ids);
            let tr = self.model.forward(&mut g, &bound, &input, Mode::Train, &mut self.data_rng)?;
            if let Some((sum, c)) = mlm_nll_sum(&mut g, tr.logits, &plan)? {
                nll.push(sum);
                count += c;
            }
            let picks = match cfg.tcd_sampling {
                TokenSampling::Uniform => sample_tokens(doc.len(), cfg.n_prime, &mut self.aux_rng),
                TokenSampling::Strided => strided_tokens(doc.len(), cfg.n_prime),
            };
            tcds.push(tcd_loss(&mut g, tr.last_hidden, &picks, &mut self.warnings)?);
            let sampled = sample_heads(heads, cfg.m_prime, layers, &mut self.aux_rng);
            let maps = match cfg.hcd_weight_space {
                WeightSpace::PreSoftmax => &tr.attn_weights,
                WeightSpace::PostSoftmax => &tr.attn_probs,
            };
            hcds.push(hcd_loss(&mut g, maps, &sampled, &mut self.warnings)?);
        }
        let mlm = if count == 0 {
            self.warnings.empty_mlm += 1;
            g.constant(Tensor::scalar(0.0))
        } else {
            let all = g.concat_rows(&nll)?;
            let s = g.sum(all);
            g.scale(s, 1.0 / count as f64)
        };
        let tcd = g.concat_rows(&tcds)?;
        let tcd = g.mean(tcd);
        let hcd = g.concat_rows(&hcds)?;
        let hcd = g.mean(hcd);
        let total = mth_combine(&mut g, mlm, tcd, hcd, a1, a2, decay)?;
        let (mv, tv, hv) = (g.value(mlm).item(), g.value(tcd).item(), g.value(hcd).item());
        let tot = g.value(total).item();
        if !tot.is_finite() || !mv.is_finite() || !tv.is_finite() || !hv.is_finite() {
            return Err(Error::Divergence { step: k, detail: format!("loss is not finite (mlm {mv}, tcd {tv}, hcd {hv})") });
        }
        g.backward(total)?;
        let mut grads: Vec<Vec<f64>> = bound
            .vars
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Divergence { step: k, detail: "gradient is not finite".into() });
        }
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step = k;
        Ok(MetricsRecord { step: k, lr, mlm: mv, tcd: tv, hcd: hv, decay, total: combine(mv, tv, hv, a1, a2, decay), wall_ms: 0 })
    }

    /// Trains to `step_max`, logging and checkpointing into `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<MetricsRecord>> {
        let start = Instant::now();
        let mut metrics = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(open_metrics(&dir.join(METRICS_FILE), self.step)?)
            }
            None => None,
        };
        let every = self.config.checkpoint_every();
        let mut records = Vec::new();
        while !self.is_done() {
            let mut rec = self.step_once()?;
            if self.config.log_wall_time {
                rec.wall_ms = start.elapsed().as_millis() as u64;
            }
            let k = rec.step;
            if k % self.config.log_interval == 0 || k == self.config.step_max {
                if let Some(f) = metrics.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                }
                records.push(rec);
            }
            if let Some(dir) = out_dir {
                if k % every == 0 || k == self.config.step_max {
                    self.checkpoint().save(&checkpoint_path(dir, k))?;
                }
            }
        }
        if let Some(mut f) = metrics {
            f.flush()?;
        }
        Ok(records)
    }
}

fn adam_config(c: &TrainConfig) -> AdamWConfig {
    AdamWConfig { beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps, weight_decay: c.weight_decay }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.ddrp"))
}

/// Opens the metrics log, keeping only records up to `resume_step` from an earlier run.
fn open_metrics(path: &Path, resume_step: u64) -> Result<File> {
    let kept: Vec<String> = if resume_step > 0 && path.exists() {
        BufReader::new(File::open(path)?)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|l| serde_json::from_str::<MetricsRecord>(l).is_ok_and(|r| r.step <= resume_step))
            .collect()
    } else {
        Vec::new()
    };
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

/// Trains from scratch with the configured corpus and writes everything to `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<(Model, Vec<MetricsRecord>)> {
    let (cfg, data) = prepare(cfg)?;
    let mut t = Trainer::new(cfg, data)?;
    let recs = t.run(Some(out_dir))?;
    Ok((t.model, recs))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
