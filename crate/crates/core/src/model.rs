//! Encoder-decoder architecture: BPE embeddings feed a stacked BiLSTM
//! encoder; a max-pool over encoder outputs plus a projection of the top
//! layer's final states drive a language-conditioned LSTM decoder over UPOS
//! tags.
//!
//! The encoder is language-agnostic: no language context enters it, so the
//! pooled vector of a sentence depends only on its BPE ids and the weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{self, BpeModel};
use crate::corpus::{LanguageId, UposTag};
use crate::error::{CoreError, Result};
use crate::nncore::{
    bilstm_layer_backward, bilstm_layer_forward, dropout_backward, dropout_forward,
    embedding_backward, embedding_forward, linear_backward, linear_forward, lstm_cell_backward,
    lstm_cell_forward, masked_temporal_max_pool, max_pool_backward, softmax_cross_entropy,
    BilstmCache, BilstmWeights, FinalStates, LstmCellCache, LstmWeights, MaxPoolCache, ParamId,
    ParamSet, Tensor,
};

/// Architecture hyperparameters. `table1` gives the reference defaults:
/// embedding dims 100/100/20, a 2-layer 128+128 encoder, a single 512-wide
/// decoder layer, dropout 0.2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub bpe_vocab_size: usize,
    pub bpe_emb_dim: usize,
    pub upos_emb_dim: usize,
    pub lang_emb_dim: usize,
    pub enc_layers: usize,
    pub enc_fwd_hidden: usize,
    pub enc_bwd_hidden: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    pub num_langs: usize,
    pub upos_tagset_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Reference configuration for a given vocabulary and language count.
    pub fn table1(bpe_vocab_size: usize, num_langs: usize) -> Self {
        Self {
            bpe_vocab_size,
            bpe_emb_dim: 100,
            upos_emb_dim: 100,
            lang_emb_dim: 20,
            enc_layers: 2,
            enc_fwd_hidden: 128,
            enc_bwd_hidden: 128,
            dec_layers: 1,
            dec_hidden: 512,
            num_langs,
            upos_tagset_size: UposTag::COUNT,
            dropout: 0.2,
        }
    }

    /// Small configuration for tests and demos.
    pub fn toy(bpe_vocab_size: usize, num_langs: usize) -> Self {
        Self {
            bpe_emb_dim: 16,
            upos_emb_dim: 12,
            lang_emb_dim: 4,
            enc_fwd_hidden: 16,
            enc_bwd_hidden: 16,
            dec_hidden: 32,
            dropout: 0.2,
            ..Self::table1(bpe_vocab_size, num_langs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bpe_vocab_size", self.bpe_vocab_size),
            ("bpe_emb_dim", self.bpe_emb_dim),
            ("upos_emb_dim", self.upos_emb_dim),
            ("lang_emb_dim", self.lang_emb_dim),
            ("enc_layers", self.enc_layers),
            ("enc_fwd_hidden", self.enc_fwd_hidden),
            ("enc_bwd_hidden", self.enc_bwd_hidden),
            ("dec_layers", self.dec_layers),
            ("dec_hidden", self.dec_hidden),
            ("num_langs", self.num_langs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::invalid(format!("{name} must be positive")));
            }
        }
        if self.upos_tagset_size != UposTag::COUNT {
            return Err(CoreError::invalid(format!(
                "upos_tagset_size must be {}, got {}",
                UposTag::COUNT,
                self.upos_tagset_size
            )));
        }
        if self.dec_layers != 1 {
            return Err(CoreError::invalid("only a single decoder layer is supported"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Width of encoder outputs and of the pooled sentence embedding.
    pub fn pooled_dim(&self) -> usize {
        self.enc_fwd_hidden + self.enc_bwd_hidden
    }

    /// Width of the concatenated final states feeding the init projections.
    pub fn init_concat_dim(&self) -> usize {
        2 * self.pooled_dim()
    }

    /// Decoder input: previous-tag embedding, language embedding, pooled
    /// encoder context.
    pub fn dec_input_dim(&self) -> usize {
        self.upos_emb_dim + self.lang_emb_dim + self.pooled_dim()
    }

    fn enc_layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.bpe_emb_dim
        } else {
            self.pooled_dim()
        }
    }

    /// Closed-form scalar parameter count implied by this configuration.
    pub fn scalar_param_count(&self) -> usize {
        let lstm = |input: usize, hidden: usize| 4 * hidden * (input + hidden) + 4 * hidden;
        let mut total = self.bpe_vocab_size * self.bpe_emb_dim;
        for layer in 0..self.enc_layers {
            let input = self.enc_layer_input(layer);
            total += lstm(input, self.enc_fwd_hidden) + lstm(input, self.enc_bwd_hidden);
        }
        total += 2 * self.dec_hidden * self.init_concat_dim();
        total += self.num_langs * self.lang_emb_dim;
        total += self.upos_tagset_size * self.upos_emb_dim;
        total += lstm(self.dec_input_dim(), self.dec_hidden);
        total += self.upos_tagset_size * self.dec_hidden + self.upos_tagset_size;
        total
    }
}

const EMB_INIT_BOUND: f64 = 0.1;

#[derive(Debug, Clone)]
struct Handles {
    bpe_emb: ParamId,
    enc_layers: Vec<BilstmWeights>,
    w_h: ParamId,
    w_c: ParamId,
    lang_emb: ParamId,
    upos_emb: ParamId,
    dec: LstmWeights,
    out_w: ParamId,
    out_b: ParamId,
}

/// A fixed-size vector for one sentence, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub lang: LanguageId,
    pub text: String,
}

/// One training batch; sequences are unpadded, padding happens inside the
/// forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src_ids: Vec<Vec<u32>>,
    pub tgt_langs: Vec<u32>,
    pub tgt_tags: Vec<Vec<UposTag>>,
}

impl Batch {
    fn validate(&self) -> Result<()> {
        let b = self.src_ids.len();
        if b == 0 {
            return Err(CoreError::invalid("empty batch"));
        }
        if self.tgt_langs.len() != b || self.tgt_tags.len() != b {
            return Err(CoreError::invalid("batch field lengths disagree"));
        }
        for (i, ids) in self.src_ids.iter().enumerate() {
            if ids.is_empty() {
                return Err(CoreError::invalid(format!(
                    "zero-length source sequence at batch item {i}"
                )));
            }
        }
        for (i, tags) in self.tgt_tags.iter().enumerate() {
            if tags.is_empty() {
                return Err(CoreError::invalid(format!(
                    "empty target tag sequence at batch item {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Encoder outputs for a batch.
pub struct EncodeResult {
    pub enc_outputs: Tensor,
    pub pooled: Tensor,
    pub init_h: Tensor,
    pub init_c: Tensor,
}

struct EncodeCache {
    ids_flat: Vec<usize>,
    emb_mask: Option<Tensor>,
    layer_caches: Vec<BilstmCache>,
    /// Dropout masks between layer l and l+1.
    inter_masks: Vec<Option<Tensor>>,
    pool_cache: MaxPoolCache,
    concat: Tensor,
}

struct DecStepCache {
    prev_ids: Vec<usize>,
    lang_ids: Vec<usize>,
    cell: LstmCellCache,
    h_out: Tensor,
    dlogits: Tensor,
}

/// Everything needed to run the backward pass of one `forward_loss` call.
pub struct ForwardTape {
    enc: EncodeCache,
    steps: Vec<DecStepCache>,
    batch_size: usize,
}

/// The full encoder-decoder with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    handles: Handles,
}

impl Model {
    /// Builds a freshly initialized model. Embedding tables are uniform in
    /// ±0.1, linear maps uniform in ±1/sqrt(fan-in), LSTMs per
    /// [`LstmWeights::create`].
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let bpe_emb = params.add_uniform(
            "encoder.embedding",
            &[config.bpe_vocab_size, config.bpe_emb_dim],
            EMB_INIT_BOUND,
            rng,
        );
        let mut enc_layers = Vec::new();
        for layer in 0..config.enc_layers {
            enc_layers.push(BilstmWeights::create(
                &mut params,
                &format!("encoder.layer{layer}"),
                config.enc_layer_input(layer),
                config.enc_fwd_hidden,
                config.enc_bwd_hidden,
                rng,
            ));
        }
        let init_bound = 1.0 / (config.init_concat_dim() as f64).sqrt();
        let w_h = params.add_uniform(
            "init.w_h",
            &[config.dec_hidden, config.init_concat_dim()],
            init_bound,
            rng,
        );
        let w_c = params.add_uniform(
            "init.w_c",
            &[config.dec_hidden, config.init_concat_dim()],
            init_bound,
            rng,
        );
        let lang_emb = params.add_uniform(
            "decoder.lang_embedding",
            &[config.num_langs, config.lang_emb_dim],
            EMB_INIT_BOUND,
            rng,
        );
        let upos_emb = params.add_uniform(
            "decoder.upos_embedding",
            &[config.upos_tagset_size, config.upos_emb_dim],
            EMB_INIT_BOUND,
            rng,
        );
        let dec = LstmWeights::create(
            &mut params,
            "decoder",
            config.dec_input_dim(),
            config.dec_hidden,
            rng,
        );
        let out_bound = 1.0 / (config.dec_hidden as f64).sqrt();
        let out_w = params.add_uniform(
            "output.w",
            &[config.upos_tagset_size, config.dec_hidden],
            out_bound,
            rng,
        );
        let out_b = params.add("output.b", Tensor::zeros(&[config.upos_tagset_size]));
        Ok(Self {
            config,
            params,
            handles: Handles {
                bpe_emb,
                enc_layers,
                w_h,
                w_c,
                lang_emb,
                upos_emb,
                dec,
                out_w,
                out_b,
            },
        })
    }

    /// Reattaches handles to a parameter set restored from a checkpoint.
    /// Fails if any expected parameter is missing or misshapen.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let want = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| CoreError::invalid(format!("missing parameter '{name}'")))?;
            let got = params.value(id).shape();
            if got != shape {
                return Err(CoreError::invalid(format!(
                    "parameter '{name}' has shape {got:?}, config implies {shape:?}"
                )));
            }
            Ok(id)
        };
        let lstm = |prefix: &str, input: usize, hidden: usize| -> Result<LstmWeights> {
            Ok(LstmWeights {
                w_ih: want(&format!("{prefix}.w_ih"), &[4 * hidden, input])?,
                w_hh: want(&format!("{prefix}.w_hh"), &[4 * hidden, hidden])?,
                b: want(&format!("{prefix}.b"), &[4 * hidden])?,
            })
        };
        let bpe_emb = want(
            "encoder.embedding",
            &[config.bpe_vocab_size, config.bpe_emb_dim],
        )?;
        let mut enc_layers = Vec::new();
        for layer in 0..config.enc_layers {
            let input = config.enc_layer_input(layer);
            enc_layers.push(BilstmWeights {
                fwd: lstm(
                    &format!("encoder.layer{layer}.fwd"),
                    input,
                    config.enc_fwd_hidden,
                )?,
                bwd: lstm(
                    &format!("encoder.layer{layer}.bwd"),
                    input,
                    config.enc_bwd_hidden,
                )?,
            });
        }
        let handles = Handles {
            bpe_emb,
            enc_layers,
            w_h: want("init.w_h", &[config.dec_hidden, config.init_concat_dim()])?,
            w_c: want("init.w_c", &[config.dec_hidden, config.init_concat_dim()])?,
            lang_emb: want(
                "decoder.lang_embedding",
                &[config.num_langs, config.lang_emb_dim],
            )?,
            upos_emb: want(
                "decoder.upos_embedding",
                &[config.upos_tagset_size, config.upos_emb_dim],
            )?,
            dec: lstm("decoder", config.dec_input_dim(), config.dec_hidden)?,
            out_w: want("output.w", &[config.upos_tagset_size, config.dec_hidden])?,
            out_b: want("output.b", &[config.upos_tagset_size])?,
        };
        Ok(Self {
            config,
            params,
            handles,
        })
    }

    /// Appends language-embedding rows so the registry can grow; new rows
    /// are initialized like fresh embeddings, existing rows are untouched.
    pub fn grow_lang_embeddings<R: Rng>(&mut self, new_num_langs: usize, rng: &mut R) {
        let old = self.config.num_langs;
        if new_num_langs <= old {
            return;
        }
        let dim = self.config.lang_emb_dim;
        let id = self.handles.lang_emb;
        let mut value = Tensor::zeros(&[new_num_langs, dim]);
        let mut m = Tensor::zeros(&[new_num_langs, dim]);
        let mut v = Tensor::zeros(&[new_num_langs, dim]);
        let old_param = self.params.get(id);
        value.data_mut()[..old * dim].copy_from_slice(old_param.value.data());
        m.data_mut()[..old * dim].copy_from_slice(old_param.adam_m.data());
        v.data_mut()[..old * dim].copy_from_slice(old_param.adam_v.data());
        for x in value.data_mut()[old * dim..].iter_mut() {
            *x = rng.gen_range(-EMB_INIT_BOUND..=EMB_INIT_BOUND);
        }
        self.params.replace(id, value, m, v);
        self.config.num_langs = new_num_langs;
    }

    fn pad_ids(&self, src_ids: &[Vec<u32>]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
        let batch = src_ids.len();
        let lengths: Vec<usize> = src_ids.iter().map(|s| s.len()).collect();
        let steps = *lengths.iter().max().unwrap_or(&0);
        if steps == 0 {
            return Err(CoreError::invalid("zero-length source sequence"));
        }
        let mut flat = vec![bpe::PAD as usize; steps * batch];
        for (b, ids) in src_ids.iter().enumerate() {
            if ids.is_empty() {
                return Err(CoreError::invalid(format!(
                    "zero-length source sequence at batch item {b}"
                )));
            }
            for (t, &id) in ids.iter().enumerate() {
                flat[t * batch + b] = id as usize;
            }
        }
        Ok((flat, lengths, steps))
    }

    fn encode_internal<R: Rng>(
        &self,
        src_ids: &[Vec<u32>],
        training: bool,
        rng: &mut R,
    ) -> Result<(EncodeResult, EncodeCache)> {
        let batch = src_ids.len();
        let (ids_flat, lengths, steps) = self.pad_ids(src_ids)?;

        let emb = embedding_forward(self.params.value(self.handles.bpe_emb), &ids_flat)?;
        let emb3 = Tensor::from_vec(
            &[steps, batch, self.config.bpe_emb_dim],
            emb.data().to_vec(),
        );
        let (mut x, emb_mask) = dropout_forward(&emb3, self.config.dropout, training, rng);

        let mut layer_caches = Vec::new();
        let mut inter_masks = Vec::new();
        let mut finals: Option<FinalStates> = None;
        let mut top_out: Option<Tensor> = None;
        for (l, weights) in self.handles.enc_layers.iter().enumerate() {
            let (out, cache, f) = bilstm_layer_forward(&self.params, weights, &x, &lengths)?;
            layer_caches.push(cache);
            if l + 1 == self.handles.enc_layers.len() {
                finals = Some(f);
                top_out = Some(out);
            } else {
                let (dropped, mask) = dropout_forward(&out, self.config.dropout, training, rng);
                inter_masks.push(mask);
                x = dropped;
            }
        }
        let enc_outputs = top_out.expect("at least one encoder layer");
        let finals = finals.expect("at least one encoder layer");

        let (pooled, pool_cache) = masked_temporal_max_pool(&enc_outputs, &lengths)?;

        // [h_fwd; h_bwd; c_fwd; c_bwd] per batch row.
        let (fh, bh) = (self.config.enc_fwd_hidden, self.config.enc_bwd_hidden);
        let width = self.config.init_concat_dim();
        let mut concat = Tensor::zeros(&[batch, width]);
        for b in 0..batch {
            let row = concat.row_mut(b);
            row[..fh].copy_from_slice(finals.h_fwd.row(b));
            row[fh..fh + bh].copy_from_slice(finals.h_bwd.row(b));
            row[fh + bh..fh + bh + fh].copy_from_slice(finals.c_fwd.row(b));
            row[fh + bh + fh..].copy_from_slice(finals.c_bwd.row(b));
        }
        let init_h = linear_forward(&concat, self.params.value(self.handles.w_h), None);
        let init_c = linear_forward(&concat, self.params.value(self.handles.w_c), None);

        Ok((
            EncodeResult {
                enc_outputs,
                pooled,
                init_h,
                init_c,
            },
            EncodeCache {
                ids_flat,
                emb_mask,
                layer_caches,
                inter_masks,
                pool_cache,
                concat,
            },
        ))
    }

    /// Encodes a padded batch: per-step encoder features, the pooled
    /// sentence embeddings, and the projected decoder init states.
    pub fn encode_batch<R: Rng>(
        &self,
        src_ids: &[Vec<u32>],
        training: bool,
        rng: &mut R,
    ) -> Result<EncodeResult> {
        Ok(self.encode_internal(src_ids, training, rng)?.0)
    }

    /// One decoder step for a batch of previous tags and language
    /// contexts. Returns logits over the tagset and the next states.
    pub fn decode_step(
        &self,
        prev_tags: &[usize],
        tgt_langs: &[usize],
        pooled: &Tensor,
        h: &Tensor,
        c: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (input, _) = self.decode_input(prev_tags, tgt_langs, pooled)?;
        let (h_new, c_new, _) = lstm_cell_forward(
            &input,
            h,
            c,
            self.params.value(self.handles.dec.w_ih),
            self.params.value(self.handles.dec.w_hh),
            self.params.value(self.handles.dec.b),
        )?;
        let logits = linear_forward(
            &h_new,
            self.params.value(self.handles.out_w),
            Some(self.params.value(self.handles.out_b)),
        );
        Ok((logits, h_new, c_new))
    }

    fn decode_input(
        &self,
        prev_tags: &[usize],
        tgt_langs: &[usize],
        pooled: &Tensor,
    ) -> Result<(Tensor, ())> {
        let batch = prev_tags.len();
        for &lang in tgt_langs {
            if lang >= self.config.num_langs {
                return Err(CoreError::invalid(format!(
                    "unknown language index {lang} (registry has {})",
                    self.config.num_langs
                )));
            }
        }
        let upos = embedding_forward(self.params.value(self.handles.upos_emb), prev_tags)?;
        let lang = embedding_forward(self.params.value(self.handles.lang_emb), tgt_langs)?;
        let (u, l, p) = (
            self.config.upos_emb_dim,
            self.config.lang_emb_dim,
            self.config.pooled_dim(),
        );
        let mut input = Tensor::zeros(&[batch, u + l + p]);
        for b in 0..batch {
            let row = input.row_mut(b);
            row[..u].copy_from_slice(upos.row(b));
            row[u..u + l].copy_from_slice(lang.row(b));
            row[u + l..].copy_from_slice(pooled.row(b));
        }
        Ok((input, ()))
    }

    /// Teacher-forced loss over a batch: decoder inputs are BOS followed by
    /// the gold tags, targets are the gold tags followed by EOS, padding is
    /// ignored. Returns (mean cross-entropy, per-tag accuracy, tape).
    pub fn forward_loss<R: Rng>(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<(f64, f64, ForwardTape)> {
        batch.validate()?;
        let b = batch.src_ids.len();
        let (enc, enc_cache) = self.encode_internal(&batch.src_ids, training, rng)?;

        let max_tags = batch.tgt_tags.iter().map(|t| t.len()).max().unwrap();
        let steps = max_tags + 1;
        let (bos, eos, pad) = (
            UposTag::BOS.id(),
            UposTag::EOS.id(),
            UposTag::PAD.id(),
        );
        let lang_ids: Vec<usize> = batch.tgt_langs.iter().map(|&l| l as usize).collect();

        let mut h = enc.init_h.clone();
        let mut c = enc.init_c.clone();
        let classes = self.config.upos_tagset_size;
        let mut step_caches: Vec<(Vec<usize>, LstmCellCache, Tensor)> = Vec::with_capacity(steps);
        let mut all_logits = Tensor::zeros(&[steps * b, classes]);
        let mut all_targets = vec![pad; steps * b];
        for s in 0..steps {
            let prev_ids: Vec<usize> = (0..b)
                .map(|bi| {
                    if s == 0 {
                        bos
                    } else if s - 1 < batch.tgt_tags[bi].len() {
                        batch.tgt_tags[bi][s - 1].id()
                    } else {
                        pad
                    }
                })
                .collect();
            let (input, _) = self.decode_input(&prev_ids, &lang_ids, &enc.pooled)?;
            let (h_new, c_new, cell) = lstm_cell_forward(
                &input,
                &h,
                &c,
                self.params.value(self.handles.dec.w_ih),
                self.params.value(self.handles.dec.w_hh),
                self.params.value(self.handles.dec.b),
            )?;
            let logits = linear_forward(
                &h_new,
                self.params.value(self.handles.out_w),
                Some(self.params.value(self.handles.out_b)),
            );
            for bi in 0..b {
                all_logits
                    .row_mut(s * b + bi)
                    .copy_from_slice(logits.row(bi));
                let tags = &batch.tgt_tags[bi];
                all_targets[s * b + bi] = if s < tags.len() {
                    tags[s].id()
                } else if s == tags.len() {
                    eos
                } else {
                    pad
                };
            }
            step_caches.push((prev_ids, cell, h_new.clone()));
            h = h_new;
            c = c_new;
        }

        let (loss, dlogits) = softmax_cross_entropy(&all_logits, &all_targets, pad)?;

        let mut correct = 0usize;
        let mut counted = 0usize;
        for (row, &target) in all_targets.iter().enumerate() {
            if target == pad {
                continue;
            }
            let logits_row = all_logits.row(row);
            let argmax = logits_row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            counted += 1;
            if argmax == target {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / counted as f64;

        let tape_steps = step_caches
            .into_iter()
            .enumerate()
            .map(|(s, (prev_ids, cell, h_out))| {
                let mut dl = Tensor::zeros(&[b, classes]);
                for bi in 0..b {
                    dl.row_mut(bi).copy_from_slice(dlogits.row(s * b + bi));
                }
                DecStepCache {
                    prev_ids,
                    lang_ids: lang_ids.clone(),
                    cell,
                    h_out,
                    dlogits: dl,
                }
            })
            .collect();

        Ok((
            loss,
            accuracy,
            ForwardTape {
                enc: enc_cache,
                steps: tape_steps,
                batch_size: b,
            },
        ))
    }

    /// Accumulates gradients for the forward pass recorded in `tape`.
    pub fn backward(&mut self, tape: &ForwardTape) {
        let b = tape.batch_size;
        let cfg = &self.config;
        let (u, l, p) = (cfg.upos_emb_dim, cfg.lang_emb_dim, cfg.pooled_dim());

        let mut dh_next = Tensor::zeros(&[b, cfg.dec_hidden]);
        let mut dc_next = Tensor::zeros(&[b, cfg.dec_hidden]);
        let mut d_pooled = Tensor::zeros(&[b, p]);

        let mut d_out_w = Tensor::zeros(self.params.value(self.handles.out_w).shape());
        let mut d_out_b = Tensor::zeros(self.params.value(self.handles.out_b).shape());
        let mut d_dec_ih = Tensor::zeros(self.params.value(self.handles.dec.w_ih).shape());
        let mut d_dec_hh = Tensor::zeros(self.params.value(self.handles.dec.w_hh).shape());
        let mut d_dec_b = Tensor::zeros(self.params.value(self.handles.dec.b).shape());
        let mut d_upos = Tensor::zeros(self.params.value(self.handles.upos_emb).shape());
        let mut d_lang = Tensor::zeros(self.params.value(self.handles.lang_emb).shape());

        for step in tape.steps.iter().rev() {
            let (dh_out, dw_out, db_out) = linear_backward(
                &step.dlogits,
                &step.h_out,
                self.params.value(self.handles.out_w),
            );
            d_out_w.add_assign(&dw_out);
            d_out_b.add_assign(&db_out);

            let mut dh = dh_out;
            dh.add_assign(&dh_next);
            let grads = lstm_cell_backward(
                &step.cell,
                &dh,
                &dc_next,
                self.params.value(self.handles.dec.w_ih),
                self.params.value(self.handles.dec.w_hh),
            );
            d_dec_ih.add_assign(&grads.dw_ih);
            d_dec_hh.add_assign(&grads.dw_hh);
            d_dec_b.add_assign(&grads.db);
            dh_next = grads.dh_prev;
            dc_next = grads.dc_prev;

            // Split the input gradient into its three segments.
            let mut d_upos_rows = Tensor::zeros(&[b, u]);
            let mut d_lang_rows = Tensor::zeros(&[b, l]);
            for bi in 0..b {
                let src = grads.dx.row(bi);
                d_upos_rows.row_mut(bi).copy_from_slice(&src[..u]);
                d_lang_rows.row_mut(bi).copy_from_slice(&src[u..u + l]);
                for (dst, &g) in d_pooled.row_mut(bi).iter_mut().zip(src[u + l..].iter()) {
                    *dst += g;
                }
            }
            embedding_backward(&d_upos_rows, &step.prev_ids, &mut d_upos);
            embedding_backward(&d_lang_rows, &step.lang_ids, &mut d_lang);
        }

        // Decoder init projections; dh_next/dc_next now hold gradients on
        // init_h/init_c.
        let (d_concat_h, dw_h, _) = linear_backward(
            &dh_next,
            &tape.enc.concat,
            self.params.value(self.handles.w_h),
        );
        let (d_concat_c, dw_c, _) = linear_backward(
            &dc_next,
            &tape.enc.concat,
            self.params.value(self.handles.w_c),
        );
        let mut d_concat = d_concat_h;
        d_concat.add_assign(&d_concat_c);

        let (fh, bh) = (cfg.enc_fwd_hidden, cfg.enc_bwd_hidden);
        let mut d_finals = FinalStates {
            h_fwd: Tensor::zeros(&[b, fh]),
            c_fwd: Tensor::zeros(&[b, fh]),
            h_bwd: Tensor::zeros(&[b, bh]),
            c_bwd: Tensor::zeros(&[b, bh]),
        };
        for bi in 0..b {
            let row = d_concat.row(bi);
            d_finals.h_fwd.row_mut(bi).copy_from_slice(&row[..fh]);
            d_finals.h_bwd.row_mut(bi).copy_from_slice(&row[fh..fh + bh]);
            d_finals
                .c_fwd
                .row_mut(bi)
                .copy_from_slice(&row[fh + bh..fh + bh + fh]);
            d_finals.c_bwd.row_mut(bi).copy_from_slice(&row[fh + bh + fh..]);
        }

        // Pooled context feeds every decoder step; route it to the argmax
        // encoder positions.
        let mut d_top = max_pool_backward(&d_pooled, &tape.enc.pool_cache);

        // Walk encoder layers top-down.
        let mut d_final_opt = Some(d_finals);
        let layers = self.handles.enc_layers.clone();
        let mut dx = Tensor::zeros(&[1]);
        for (l, weights) in layers.iter().enumerate().rev() {
            dx = bilstm_layer_backward(
                &mut self.params,
                weights,
                &tape.enc.layer_caches[l],
                &d_top,
                d_final_opt.as_ref(),
            );
            d_final_opt = None;
            if l > 0 {
                d_top = dropout_backward(&dx, tape.enc.inter_masks[l - 1].as_ref());
            }
        }
        let d_emb3 = dropout_backward(&dx, tape.enc.emb_mask.as_ref());
        let d_emb = Tensor::from_vec(
            &[d_emb3.shape()[0] * d_emb3.shape()[1], cfg.bpe_emb_dim],
            d_emb3.data().to_vec(),
        );
        let mut d_table = Tensor::zeros(self.params.value(self.handles.bpe_emb).shape());
        embedding_backward(&d_emb, &tape.enc.ids_flat, &mut d_table);

        self.params.grad_add(self.handles.bpe_emb, &d_table);
        self.params.grad_add(self.handles.out_w, &d_out_w);
        self.params.grad_add(self.handles.out_b, &d_out_b);
        self.params.grad_add(self.handles.dec.w_ih, &d_dec_ih);
        self.params.grad_add(self.handles.dec.w_hh, &d_dec_hh);
        self.params.grad_add(self.handles.dec.b, &d_dec_b);
        self.params.grad_add(self.handles.upos_emb, &d_upos);
        self.params.grad_add(self.handles.lang_emb, &d_lang);
        self.params.grad_add(self.handles.w_h, &dw_h);
        self.params.grad_add(self.handles.w_c, &dw_c);
    }

    /// Greedy decoding: argmax tag per step, feeding predictions back,
    /// stopping at EOS or `max_len`. Specials never appear in the output.
    pub fn greedy_decode(
        &self,
        src_ids: &[u32],
        tgt_lang: usize,
        max_len: usize,
    ) -> Result<Vec<UposTag>> {
        if max_len == 0 {
            return Err(CoreError::invalid("max_len must be at least 1"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let enc = self.encode_batch(&[src_ids.to_vec()], false, &mut rng)?;
        let mut h = enc.init_h;
        let mut c = enc.init_c;
        let mut prev = UposTag::BOS.id();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (logits, h_new, c_new) =
                self.decode_step(&[prev], &[tgt_lang], &enc.pooled, &h, &c)?;
            let argmax = logits
                .row(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == UposTag::EOS.id() {
                break;
            }
            let tag = UposTag::from_id(argmax).expect("argmax within tagset");
            if !tag.is_special() {
                out.push(tag);
            }
            prev = argmax;
            h = h_new;
            c = c_new;
        }
        Ok(out)
    }

    /// Pooled encoder outputs for a list of sentences; inference mode, no
    /// dropout. The declared language is provenance only.
    pub fn embed_sentences(
        &self,
        bpe_model: &BpeModel,
        sentences: &[(String, LanguageId)],
    ) -> Result<Vec<SentenceEmbedding>> {
        if bpe_model.vocab_size() != self.config.bpe_vocab_size {
            return Err(CoreError::invalid(format!(
                "BPE vocab has {} entries but the model expects {}",
                bpe_model.vocab_size(),
                self.config.bpe_vocab_size
            )));
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(64) {
            let mut ids = Vec::with_capacity(chunk.len());
            for (text, _) in chunk {
                let encoded = bpe::encode(bpe_model, text);
                if encoded.is_empty() {
                    return Err(CoreError::invalid(format!(
                        "sentence encodes to zero BPE pieces: '{text}'"
                    )));
                }
                ids.push(encoded);
            }
            let enc = self.encode_batch(&ids, false, &mut rng)?;
            for (bi, (text, lang)) in chunk.iter().enumerate() {
                out.push(SentenceEmbedding {
                    vector: enc.pooled.row(bi).to_vec(),
                    lang: *lang,
                    text: text.clone(),
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(ModelConfig::toy(40, 3), &mut rng).unwrap()
    }

    fn toy_batch() -> Batch {
        use UposTag::*;
        Batch {
            src_ids: vec![vec![5, 6, 7], vec![8, 9]],
            tgt_langs: vec![1, 2],
            tgt_tags: vec![vec![PRON, VERB, PUNCT], vec![NOUN, VERB]],
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let model = toy_model(0);
        assert_eq!(
            model.params.scalar_count(),
            model.config.scalar_param_count()
        );
    }

    #[test]
    fn table1_shapes_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = ModelConfig::table1(40_000, 6);
        let model = Model::new(config.clone(), &mut rng).unwrap();
        let shape = |name: &str| {
            model
                .params
                .value(model.params.id(name).unwrap())
                .shape()
                .to_vec()
        };
        assert_eq!(shape("encoder.embedding"), vec![40_000, 100]);
        assert_eq!(shape("encoder.layer0.fwd.w_ih"), vec![512, 100]);
        assert_eq!(shape("encoder.layer0.bwd.w_hh"), vec![512, 128]);
        assert_eq!(shape("encoder.layer1.fwd.w_ih"), vec![512, 256]);
        assert_eq!(shape("init.w_h"), vec![512, 512]);
        assert_eq!(shape("init.w_c"), vec![512, 512]);
        assert_eq!(shape("decoder.lang_embedding"), vec![6, 20]);
        assert_eq!(shape("decoder.upos_embedding"), vec![20, 100]);
        assert_eq!(shape("decoder.w_ih"), vec![2048, 376]);
        assert_eq!(shape("decoder.w_hh"), vec![2048, 512]);
        assert_eq!(shape("output.w"), vec![20, 512]);
        assert_eq!(config.pooled_dim(), 256);
        assert_eq!(config.dec_input_dim(), 376);
    }

    #[test]
    fn encode_single_step_pools_that_step() {
        let model = toy_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = model.encode_batch(&[vec![4]], false, &mut rng).unwrap();
        assert_eq!(enc.pooled.shape(), &[1, model.config.pooled_dim()]);
        assert_eq!(enc.pooled.data(), enc.enc_outputs.frame(0));
    }

    #[test]
    fn identical_sentences_in_a_batch_embed_identically() {
        let model = toy_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = model
            .encode_batch(&[vec![4, 5, 6], vec![9, 9], vec![4, 5, 6]], false, &mut rng)
            .unwrap();
        assert_eq!(enc.pooled.row(0), enc.pooled.row(2));
    }

    #[test]
    fn batch_invariance_of_pooled_embeddings() {
        let model = toy_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let solo = model.encode_batch(&[vec![7, 8, 9, 10]], false, &mut rng).unwrap();
        let batched = model
            .encode_batch(
                &[
                    vec![7, 8, 9, 10],
                    vec![3],
                    vec![11, 12],
                    vec![5, 6, 7],
                    vec![20, 21, 22, 23],
                    vec![2, 3],
                    vec![30],
                    vec![14, 15, 16],
                ],
                false,
                &mut rng,
            )
            .unwrap();
        assert_eq!(solo.pooled.row(0), batched.pooled.row(0));
        assert_eq!(solo.init_h.row(0), batched.init_h.row(0));
        assert_eq!(solo.init_c.row(0), batched.init_c.row(0));
    }

    #[test]
    fn decode_step_is_deterministic_and_language_sensitive() {
        let model = toy_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = model.encode_batch(&[vec![4, 5]], false, &mut rng).unwrap();
        let (a, _, _) = model
            .decode_step(&[UposTag::BOS.id()], &[0], &enc.pooled, &enc.init_h, &enc.init_c)
            .unwrap();
        let (b, _, _) = model
            .decode_step(&[UposTag::BOS.id()], &[0], &enc.pooled, &enc.init_h, &enc.init_c)
            .unwrap();
        assert_eq!(a, b);
        let (c, _, _) = model
            .decode_step(&[UposTag::BOS.id()], &[1], &enc.pooled, &enc.init_h, &enc.init_c)
            .unwrap();
        assert_ne!(a, c);
        assert!(model
            .decode_step(&[UposTag::BOS.id()], &[99], &enc.pooled, &enc.init_h, &enc.init_c)
            .is_err());
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        use UposTag::*;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Model::new(ModelConfig::toy(60, 2), &mut rng).unwrap();
        let mut data_rng = ChaCha8Rng::seed_from_u64(12);
        use rand::Rng as _;
        let tags = [NOUN, VERB, PRON, DET, ADJ, PUNCT];
        let batch = Batch {
            src_ids: (0..64)
                .map(|_| {
                    (0..data_rng.gen_range(2..7))
                        .map(|_| data_rng.gen_range(4..60) as u32)
                        .collect()
                })
                .collect(),
            tgt_langs: (0..64).map(|_| data_rng.gen_range(0..2)).collect(),
            tgt_tags: (0..64)
                .map(|_| {
                    (0..data_rng.gen_range(2..6))
                        .map(|_| tags[data_rng.gen_range(0..tags.len())])
                        .collect()
                })
                .collect(),
        };
        let (loss, _, _) = model.forward_loss(&batch, false, &mut rng).unwrap();
        let ln20 = (20.0f64).ln();
        assert!((loss - ln20).abs() < 0.3, "loss {loss} vs ln20 {ln20}");
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let model = toy_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = toy_batch();
        let (loss, acc, _) = model.forward_loss(&batch, false, &mut rng).unwrap();
        let doubled = Batch {
            src_ids: [batch.src_ids.clone(), batch.src_ids.clone()].concat(),
            tgt_langs: [batch.tgt_langs.clone(), batch.tgt_langs.clone()].concat(),
            tgt_tags: [batch.tgt_tags.clone(), batch.tgt_tags.clone()].concat(),
        };
        let (loss2, acc2, _) = model.forward_loss(&doubled, false, &mut rng).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
        assert!((acc - acc2).abs() < 1e-12);
    }

    #[test]
    fn embeddings_ignore_declared_language() {
        let model = toy_model(7);
        let corpus = vec!["aa bb", "bb aa aa"];
        let bpe_model = crate::bpe::learn_bpe(corpus, 40).unwrap();
        // Pad the vocab difference: build a model sized to the BPE vocab.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::new(
            ModelConfig {
                bpe_vocab_size: bpe_model.vocab_size(),
                ..model.config.clone()
            },
            &mut rng,
        )
        .unwrap();
        let a = model
            .embed_sentences(&bpe_model, &[("aa bb".to_string(), LanguageId(0))])
            .unwrap();
        let b = model
            .embed_sentences(&bpe_model, &[("aa bb".to_string(), LanguageId(2))])
            .unwrap();
        assert_eq!(a[0].vector, b[0].vector);
        assert_eq!(a[0].vector.len(), model.config.pooled_dim());
        // Empty sentence is rejected, naming the text.
        let err = model
            .embed_sentences(&bpe_model, &[("".to_string(), LanguageId(0))])
            .unwrap_err();
        assert!(err.to_string().contains("''"));
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let model = toy_model(8);
        let a = model.greedy_decode(&[4, 5, 6], 1, 10).unwrap();
        let b = model.greedy_decode(&[4, 5, 6], 1, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 10);
        assert!(a.iter().all(|t| !t.is_special()));
    }

    #[test]
    fn grow_lang_embeddings_preserves_existing_rows() {
        let mut model = toy_model(9);
        let before = model
            .params
            .value(model.handles.lang_emb)
            .data()
            .to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        model.grow_lang_embeddings(5, &mut rng);
        assert_eq!(model.config.num_langs, 5);
        let after = model.params.value(model.handles.lang_emb);
        assert_eq!(after.shape(), &[5, model.config.lang_emb_dim]);
        assert_eq!(&after.data()[..before.len()], &before[..]);
    }

    #[test]
    fn checkpoint_reattachment_validates_shapes() {
        let model = toy_model(10);
        let params = model.params.clone();
        let restored = Model::from_parts(model.config.clone(), params.clone()).unwrap();
        assert_eq!(restored.params.scalar_count(), model.params.scalar_count());
        let wrong = ModelConfig {
            dec_hidden: model.config.dec_hidden + 1,
            ..model.config.clone()
        };
        assert!(Model::from_parts(wrong, params).is_err());
    }
}
