//! Training loop, fine-tuning, and checkpointing.
//!
//! All randomness derives from one seed through fixed ChaCha streams:
//! stream 0 initializes parameters and drives dropout (its state is
//! persisted in checkpoints), stream `1 + epoch` orders each epoch's
//! batches, and a reserved stream picks the validation holdout. Resuming
//! from a checkpoint therefore replays the exact batch sequence an
//! uninterrupted run would have seen.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{self, BpeModel};
use crate::corpus::{LanguageRegistry, ParallelExample};
use crate::error::{CoreError, Result};
use crate::model::{Batch, Model, ModelConfig};
use crate::nncore::{adam_step_filtered, clip_global_norm, AdamConfig, ParamSet, Tensor};

const SPLIT_STREAM: u64 = u64::MAX;

/// Knobs for one training run. `max_steps` counts steps to run in this
/// call; the session keeps the global step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub clip_norm: f64,
    pub shuffle: bool,
    /// Source-length bucket width in BPE pieces; 0 disables bucketing.
    pub bucket_width: usize,
    /// Fraction held out for validation when `eval_every > 0`.
    pub holdout_frac: f64,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            max_steps: 1000,
            eval_every: 0,
            seed: 42,
            clip_norm: 5.0,
            shuffle: true,
            bucket_width: 4,
            holdout_frac: 0.05,
            freeze_encoder: false,
        }
    }
}

/// One progress line, emitted once per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

/// Receives progress records during training.
pub trait ProgressSink {
    fn emit(&mut self, record: &ProgressRecord);
}

/// Discards progress.
pub struct NullSink;

impl ProgressSink for NullSink {
    fn emit(&mut self, _: &ProgressRecord) {}
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> ProgressSink for JsonlSink<W> {
    fn emit(&mut self, record: &ProgressRecord) {
        if let Ok(line) = serde_json::to_string(record) {
            let _ = writeln!(self.0, "{line}");
        }
    }
}

impl<F: FnMut(&ProgressRecord)> ProgressSink for F {
    fn emit(&mut self, record: &ProgressRecord) {
        self(record)
    }
}

/// Outcome of a training call.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_loss: Option<f64>,
    pub final_acc: Option<f64>,
    pub final_val_acc: Option<f64>,
    /// Per-step training losses, in step order.
    pub losses: Vec<f64>,
}

/// A model plus everything needed to continue training it exactly where it
/// stopped: optimizer state, the persisted RNG, the language registry, and
/// the identity of the BPE vocabulary it was built against.
#[derive(Debug)]
pub struct Session {
    pub model: Model,
    pub adam: AdamConfig,
    pub model_rng: ChaCha8Rng,
    pub registry: LanguageRegistry,
    pub bpe_sha256: String,
    pub step: u64,
}

impl Session {
    /// Fresh session: parameters initialized from stream 0 of `seed`.
    pub fn new(
        config: ModelConfig,
        registry: LanguageRegistry,
        bpe_model: &BpeModel,
        seed: u64,
    ) -> Result<Self> {
        if config.bpe_vocab_size != bpe_model.vocab_size() {
            return Err(CoreError::invalid(format!(
                "config expects a BPE vocab of {}, model file has {}",
                config.bpe_vocab_size,
                bpe_model.vocab_size()
            )));
        }
        if config.num_langs != registry.len() {
            return Err(CoreError::invalid(format!(
                "config expects {} languages, registry has {}",
                config.num_langs,
                registry.len()
            )));
        }
        let mut model_rng = ChaCha8Rng::seed_from_u64(seed);
        model_rng.set_stream(0);
        let model = Model::new(config, &mut model_rng)?;
        Ok(Self {
            model,
            adam: AdamConfig::default(),
            model_rng,
            registry,
            bpe_sha256: bpe_model.content_hash(),
            step: 0,
        })
    }
}

fn encode_sources(bpe_model: &BpeModel, dataset: &[ParallelExample]) -> Vec<Vec<u32>> {
    let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
    dataset
        .iter()
        .map(|ex| {
            cache
                .entry(ex.src_text.as_str())
                .or_insert_with(|| bpe::encode(bpe_model, &ex.src_text))
                .clone()
        })
        .collect()
}

/// Epoch batch order: bucket indices by source length, shuffle within
/// buckets, then shuffle the batch list itself.
fn epoch_batches(
    train_idx: &[usize],
    lengths: &[usize],
    cfg: &TrainConfig,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + epoch);
    if cfg.shuffle {
        if cfg.bucket_width > 0 {
            let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for &i in train_idx {
                buckets
                    .entry(lengths[i] / cfg.bucket_width)
                    .or_default()
                    .push(i);
            }
            order.clear();
            for bucket in buckets.values_mut() {
                bucket.shuffle(&mut rng);
                order.extend_from_slice(bucket);
            }
        } else {
            order.shuffle(&mut rng);
        }
    }
    let mut batches: Vec<Vec<usize>> =
        order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
    if cfg.shuffle {
        batches.shuffle(&mut rng);
    }
    batches
}

fn make_batch(dataset: &[ParallelExample], encoded: &[Vec<u32>], idx: &[usize]) -> Batch {
    Batch {
        src_ids: idx.iter().map(|&i| encoded[i].clone()).collect(),
        tgt_langs: idx.iter().map(|&i| dataset[i].tgt_lang.0).collect(),
        tgt_tags: idx.iter().map(|&i| dataset[i].tgt_upos.clone()).collect(),
    }
}

fn validation_accuracy(
    session: &mut Session,
    dataset: &[ParallelExample],
    encoded: &[Vec<u32>],
    val_idx: &[usize],
    batch_size: usize,
) -> Result<Option<f64>> {
    if val_idx.is_empty() {
        return Ok(None);
    }
    let mut weighted = 0.0;
    let mut total = 0usize;
    for chunk in val_idx.chunks(batch_size) {
        let batch = make_batch(dataset, encoded, chunk);
        let (_, acc, _) = session
            .model
            .forward_loss(&batch, false, &mut session.model_rng)?;
        weighted += acc * chunk.len() as f64;
        total += chunk.len();
    }
    Ok(Some(weighted / total as f64))
}

/// Runs `cfg.max_steps` optimization steps over shuffled, length-bucketed
/// mini-batches. Aborts with a diagnostic if the loss turns non-finite.
pub fn train(
    session: &mut Session,
    bpe_model: &BpeModel,
    dataset: &[ParallelExample],
    cfg: &TrainConfig,
    sink: &mut dyn ProgressSink,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(CoreError::invalid("training dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::invalid("batch_size must be at least 1"));
    }
    if bpe_model.content_hash() != session.bpe_sha256 {
        return Err(CoreError::invalid(
            "BPE model hash does not match the session's vocabulary",
        ));
    }
    for (i, ex) in dataset.iter().enumerate() {
        if ex.tgt_lang.index() >= session.model.config.num_langs {
            return Err(CoreError::invalid(format!(
                "example {i}: target language index {} is not registered with the model",
                ex.tgt_lang.index()
            )));
        }
    }
    session.adam.lr = cfg.lr;

    let encoded = encode_sources(bpe_model, dataset);
    let lengths: Vec<usize> = encoded.iter().map(|e| e.len()).collect();

    // Validation holdout, stable across runs of the same seed and data.
    let mut all_idx: Vec<usize> = (0..dataset.len()).collect();
    let (train_idx, val_idx) = if cfg.eval_every > 0 && cfg.holdout_frac > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SPLIT_STREAM);
        all_idx.shuffle(&mut rng);
        let val_n = ((dataset.len() as f64) * cfg.holdout_frac).floor() as usize;
        let val_n = val_n.min(dataset.len() - 1);
        let (val, train) = all_idx.split_at(val_n);
        (train.to_vec(), val.to_vec())
    } else {
        (all_idx, Vec::new())
    };

    let batches_per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let started = Instant::now();
    let mut losses = Vec::new();
    let mut final_acc = None;
    let mut final_val = None;
    let mut steps_run = 0u64;

    'outer: loop {
        if steps_run >= cfg.max_steps {
            break;
        }
        let epoch = session.step / batches_per_epoch;
        let offset = (session.step % batches_per_epoch) as usize;
        let batches = epoch_batches(&train_idx, &lengths, cfg, epoch);
        for batch_idx in batches.into_iter().skip(offset) {
            if steps_run >= cfg.max_steps {
                break 'outer;
            }
            let batch = make_batch(dataset, &encoded, &batch_idx);
            let (loss, acc, tape) = session
                .model
                .forward_loss(&batch, true, &mut session.model_rng)
                .map_err(|e| {
                    CoreError::numeric(format!(
                        "step {}: {e} (batch examples {batch_idx:?})",
                        session.step + 1
                    ))
                })?;
            if !loss.is_finite() {
                return Err(CoreError::numeric(format!(
                    "non-finite loss at step {} (batch examples {batch_idx:?})",
                    session.step + 1
                )));
            }
            session.model.backward(&tape);
            clip_global_norm(&mut session.model.params, cfg.clip_norm);
            let freeze = cfg.freeze_encoder;
            adam_step_filtered(&mut session.model.params, &mut session.adam, |name| {
                !(freeze && name.starts_with("encoder."))
            })?;
            session.step += 1;
            steps_run += 1;
            losses.push(loss);
            final_acc = Some(acc);

            let mut record = ProgressRecord {
                step: session.step,
                loss,
                acc,
                wall_ms: started.elapsed().as_millis() as u64,
                val_acc: None,
            };
            if cfg.eval_every > 0 && session.step % cfg.eval_every == 0 {
                let val =
                    validation_accuracy(session, dataset, &encoded, &val_idx, cfg.batch_size)?;
                record.val_acc = val;
                final_val = val;
            }
            sink.emit(&record);
        }
    }

    Ok(TrainReport {
        steps_run,
        final_loss: losses.last().copied(),
        final_acc,
        final_val_acc: final_val,
        losses,
    })
}

/// Continues training a checkpointed session on new pairs only. Target
/// languages must already exist in the session; new source languages are
/// fine (the encoder is language-agnostic) and get fresh embedding rows so
/// registry indices stay aligned.
pub fn finetune(
    session: &mut Session,
    bpe_model: &BpeModel,
    new_pairs: &[ParallelExample],
    cfg: &TrainConfig,
    sink: &mut dyn ProgressSink,
) -> Result<TrainReport> {
    let known = session.model.config.num_langs;
    for ex in new_pairs {
        if ex.tgt_lang.index() >= known {
            let iso = if ex.tgt_lang.index() < session.registry.len() {
                session.registry.iso(ex.tgt_lang).to_string()
            } else {
                format!("#{}", ex.tgt_lang.index())
            };
            return Err(CoreError::invalid(format!(
                "target language '{iso}' is not in the checkpoint registry; targets need \
                 a language embedding and tagged data"
            )));
        }
    }
    if session.registry.len() > known {
        let grow_to = session.registry.len();
        session
            .model
            .grow_lang_embeddings(grow_to, &mut session.model_rng);
    }
    if cfg.max_steps == 0 {
        return Ok(TrainReport {
            steps_run: 0,
            final_loss: None,
            final_acc: None,
            final_val_acc: None,
            losses: Vec::new(),
        });
    }
    train(session, bpe_model, new_pairs, cfg, sink)
}

const MAGIC: &[u8; 8] = b"SYNEMB01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    model_config: ModelConfig,
    registry: Vec<String>,
    step: u64,
    bpe_sha256: String,
    adam: AdamConfig,
    rng: RngState,
    /// Parameter registration order; float arrays are stored separately in
    /// sorted-name order.
    params: Vec<ParamMeta>,
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a session: magic bytes, a length-prefixed JSON metadata
/// block, then raw little-endian f64 arrays (value, Adam m, Adam v) in
/// sorted parameter-name order. Bit patterns round-trip exactly.
pub fn checkpoint_to_bytes(session: &Session) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        model_config: session.model.config.clone(),
        registry: session.registry.isos().to_vec(),
        step: session.step,
        bpe_sha256: session.bpe_sha256.clone(),
        adam: session.adam.clone(),
        rng: RngState {
            seed: hex::encode(session.model_rng.get_seed()),
            stream: session.model_rng.get_stream(),
            word_pos: session.model_rng.get_word_pos().to_string(),
        },
        params: session
            .model
            .params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| CoreError::invalid(format!("checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for name in session.model.params.sorted_names() {
        let id = session.model.params.id(&name).expect("own name");
        let p = session.model.params.get(id);
        tensor_bytes(&p.value, &mut out);
        tensor_bytes(&p.adam_m, &mut out);
        tensor_bytes(&p.adam_v, &mut out);
    }
    Ok(out)
}

pub fn save_checkpoint(session: &Session, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_to_bytes(session)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| CoreError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn read_f64s(bytes: &[u8], offset: &mut usize, n: usize, what: &str) -> Result<Vec<f64>> {
    let need = n * 8;
    if *offset + need > bytes.len() {
        return Err(CoreError::parse(format!(
            "checkpoint truncated while reading {what}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = *offset + i * 8;
        let arr: [u8; 8] = bytes[start..start + 8].try_into().unwrap();
        out.push(f64::from_le_bytes(arr));
    }
    *offset += need;
    Ok(out)
}

/// Restores a session. When `expected_bpe` is given, its content hash must
/// match the one recorded at save time.
pub fn checkpoint_from_bytes(bytes: &[u8], expected_bpe: Option<&BpeModel>) -> Result<Session> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CoreError::parse(
            "not a checkpoint: bad magic bytes (expected SYNEMB01)",
        ));
    }
    let len_arr: [u8; 8] = bytes[8..16].try_into().unwrap();
    let json_len = u64::from_le_bytes(len_arr) as usize;
    if 16 + json_len > bytes.len() {
        return Err(CoreError::parse("checkpoint truncated in metadata block"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| CoreError::parse(format!("checkpoint metadata: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(CoreError::parse(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    if let Some(bpe_model) = expected_bpe {
        let hash = bpe_model.content_hash();
        if hash != meta.bpe_sha256 {
            return Err(CoreError::invalid(format!(
                "BPE model hash {hash} does not match checkpoint hash {}",
                meta.bpe_sha256
            )));
        }
    }

    // Recreate parameters in recorded registration order, filling float
    // data from the sorted-order arrays.
    let mut params = ParamSet::new();
    for pm in &meta.params {
        params.add(pm.name.clone(), Tensor::zeros(&pm.shape));
    }
    let mut offset = 16 + json_len;
    for name in params.sorted_names() {
        let id = params.id(&name).expect("own name");
        let numel = params.value(id).numel();
        let value = read_f64s(bytes, &mut offset, numel, &name)?;
        let m = read_f64s(bytes, &mut offset, numel, &name)?;
        let v = read_f64s(bytes, &mut offset, numel, &name)?;
        let shape = params.value(id).shape().to_vec();
        params.replace(
            id,
            Tensor::from_vec(&shape, value),
            Tensor::from_vec(&shape, m),
            Tensor::from_vec(&shape, v),
        );
    }
    if offset != bytes.len() {
        return Err(CoreError::parse(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - offset
        )));
    }

    let seed_bytes =
        hex::decode(&meta.rng.seed).map_err(|e| CoreError::parse(format!("rng seed: {e}")))?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| CoreError::parse("rng seed must be 32 bytes"))?;
    let mut model_rng = ChaCha8Rng::from_seed(seed);
    model_rng.set_stream(meta.rng.stream);
    let word_pos: u128 = meta
        .rng
        .word_pos
        .parse()
        .map_err(|_| CoreError::parse("bad rng word position"))?;
    model_rng.set_word_pos(word_pos);

    let registry = LanguageRegistry::from_isos(&meta.registry)?;
    let model = Model::from_parts(meta.model_config, params)?;
    Ok(Session {
        model,
        adam: meta.adam,
        model_rng,
        registry,
        bpe_sha256: meta.bpe_sha256,
        step: meta.step,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected_bpe: Option<&BpeModel>) -> Result<Session> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes, expected_bpe)
        .map_err(|e| CoreError::parse(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UposTag;

    fn toy_setup() -> (BpeModel, LanguageRegistry, Vec<ParallelExample>) {
        use UposTag::*;
        let sentences = [
            "ka runa tasa .",
            "mo dorma .",
            "su venda pano .",
            "ka skriba libro .",
            "mo runa domo .",
            "su dorma .",
            "ka venda akvo .",
            "mo skriba tasa .",
            "su runa libro .",
            "ka dorma .",
        ];
        let bpe_model = bpe::learn_bpe(sentences.iter().copied(), 80).unwrap();
        let mut registry = LanguageRegistry::new();
        let xa = registry.register("xa").unwrap();
        let en = registry.register("en").unwrap();
        let tags: [&[UposTag]; 10] = [
            &[PRON, VERB, NOUN, PUNCT],
            &[PRON, VERB, PUNCT],
            &[PRON, VERB, NOUN, PUNCT],
            &[PRON, VERB, NOUN, PUNCT],
            &[PRON, VERB, NOUN, PUNCT],
            &[PRON, VERB, PUNCT],
            &[PRON, VERB, NOUN, PUNCT],
            &[PRON, VERB, NOUN, PUNCT],
            &[PRON, VERB, NOUN, PUNCT],
            &[PRON, VERB, PUNCT],
        ];
        let pairs = sentences
            .iter()
            .zip(tags.iter())
            .map(|(s, t)| ParallelExample::new(xa, en, *s, t.to_vec()).unwrap())
            .collect();
        (bpe_model, registry, pairs)
    }

    fn toy_session(bpe_model: &BpeModel, registry: &LanguageRegistry, seed: u64) -> Session {
        let config = ModelConfig::toy(bpe_model.vocab_size(), registry.len());
        Session::new(config, registry.clone(), bpe_model, seed).unwrap()
    }

    #[test]
    fn zero_steps_leaves_params_untouched() {
        let (bpe_model, registry, pairs) = toy_setup();
        let mut session = toy_session(&bpe_model, &registry, 1);
        let before = checkpoint_to_bytes(&session).unwrap();
        let cfg = TrainConfig {
            max_steps: 0,
            ..Default::default()
        };
        let report = train(&mut session, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();
        assert_eq!(report.steps_run, 0);
        assert!(report.final_loss.is_none());
        let after = checkpoint_to_bytes(&session).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn equal_seeds_give_bit_identical_training() {
        let (bpe_model, registry, pairs) = toy_setup();
        let cfg = TrainConfig {
            max_steps: 30,
            lr: 1e-3,
            seed: 5,
            ..Default::default()
        };
        let mut a = toy_session(&bpe_model, &registry, 5);
        let mut b = toy_session(&bpe_model, &registry, 5);
        let ra = train(&mut a, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();
        let rb = train(&mut b, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(
            checkpoint_to_bytes(&a).unwrap(),
            checkpoint_to_bytes(&b).unwrap()
        );
        // A different seed diverges.
        let mut c = toy_session(&bpe_model, &registry, 6);
        let cfg6 = TrainConfig { seed: 6, ..cfg };
        let rc = train(&mut c, &bpe_model, &pairs, &cfg6, &mut NullSink).unwrap();
        assert_ne!(ra.losses, rc.losses);
    }

    #[test]
    fn checkpoint_round_trip_is_exact_and_resumable() {
        let (bpe_model, registry, pairs) = toy_setup();
        let cfg = TrainConfig {
            max_steps: 20,
            lr: 1e-3,
            seed: 9,
            ..Default::default()
        };
        // Uninterrupted: 40 steps.
        let mut full = toy_session(&bpe_model, &registry, 9);
        train(&mut full, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();
        let full2 = train(&mut full, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();

        // Interrupted: 20 steps, checkpoint, restore, 20 more.
        let mut half = toy_session(&bpe_model, &registry, 9);
        train(&mut half, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();
        let bytes = checkpoint_to_bytes(&half).unwrap();
        let mut resumed = checkpoint_from_bytes(&bytes, Some(&bpe_model)).unwrap();
        assert_eq!(resumed.step, 20);
        let resumed2 = train(&mut resumed, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();

        assert_eq!(full2.losses, resumed2.losses);
        assert_eq!(
            checkpoint_to_bytes(&full).unwrap(),
            checkpoint_to_bytes(&resumed).unwrap()
        );
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let (bpe_model, registry, pairs) = toy_setup();
        let mut session = toy_session(&bpe_model, &registry, 3);
        let cfg = TrainConfig {
            max_steps: 5,
            ..Default::default()
        };
        train(&mut session, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();
        let first = checkpoint_to_bytes(&session).unwrap();
        let reloaded = checkpoint_from_bytes(&first, None).unwrap();
        let second = checkpoint_to_bytes(&reloaded).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (bpe_model, registry, _) = toy_setup();
        let session = toy_session(&bpe_model, &registry, 3);
        let bytes = checkpoint_to_bytes(&session).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[7] = b'9';
        assert!(checkpoint_from_bytes(&bad_magic, None).is_err());

        let truncated = &bytes[..bytes.len() - 9];
        assert!(checkpoint_from_bytes(truncated, None).is_err());

        // Wrong BPE model.
        let other = bpe::learn_bpe(vec!["zz zz zz"], 10).unwrap();
        let err = checkpoint_from_bytes(&bytes, Some(&other)).unwrap_err();
        assert!(err.to_string().contains("hash"));
    }

    #[test]
    fn progress_sink_receives_every_step() {
        let (bpe_model, registry, pairs) = toy_setup();
        let mut session = toy_session(&bpe_model, &registry, 4);
        let cfg = TrainConfig {
            max_steps: 7,
            ..Default::default()
        };
        let mut buf = Vec::new();
        {
            let mut sink = JsonlSink(&mut buf);
            train(&mut session, &bpe_model, &pairs, &cfg, &mut sink).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        let rec: ProgressRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(rec.step, 1);
        assert!(rec.loss.is_finite());
    }

    #[test]
    fn finetune_rejects_unknown_targets_and_grows_sources() {
        use UposTag::*;
        let (bpe_model, registry, pairs) = toy_setup();
        let mut session = toy_session(&bpe_model, &registry, 8);
        let cfg = TrainConfig {
            max_steps: 3,
            ..Default::default()
        };
        train(&mut session, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();

        // New source language xf: allowed, embedding table grows.
        let xf = session.registry.register("xf").unwrap();
        let en = session.registry.get("en").unwrap();
        let new_pairs = vec![
            ParallelExample::new(xf, en, "ka runa tasa .", vec![PRON, VERB, NOUN, PUNCT])
                .unwrap(),
            ParallelExample::new(xf, en, "mo dorma .", vec![PRON, VERB, PUNCT]).unwrap(),
        ];
        let before_langs = session.model.config.num_langs;
        finetune(&mut session, &bpe_model, &new_pairs, &cfg, &mut NullSink).unwrap();
        assert_eq!(session.model.config.num_langs, before_langs + 1);

        // New TARGET language: rejected.
        let xq = session.registry.register("xq").unwrap();
        let bad = vec![
            ParallelExample::new(en, xq, "something failed here .", vec![NOUN, PUNCT]).unwrap(),
        ];
        let err = finetune(&mut session, &bpe_model, &bad, &cfg, &mut NullSink).unwrap_err();
        assert!(err.to_string().contains("xq"));
    }

    #[test]
    fn finetune_zero_steps_is_passthrough() {
        let (bpe_model, registry, pairs) = toy_setup();
        let mut session = toy_session(&bpe_model, &registry, 2);
        let cfg = TrainConfig {
            max_steps: 0,
            ..Default::default()
        };
        let before = checkpoint_to_bytes(&session).unwrap();
        let report = finetune(&mut session, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();
        assert_eq!(report.steps_run, 0);
        assert_eq!(before, checkpoint_to_bytes(&session).unwrap());
    }

    #[test]
    fn freeze_encoder_keeps_encoder_weights_fixed() {
        let (bpe_model, registry, pairs) = toy_setup();
        let mut session = toy_session(&bpe_model, &registry, 12);
        let cfg = TrainConfig {
            max_steps: 5,
            freeze_encoder: true,
            ..Default::default()
        };
        let enc_id = session.model.params.id("encoder.layer0.fwd.w_ih").unwrap();
        let dec_id = session.model.params.id("decoder.w_ih").unwrap();
        let enc_before = session.model.params.value(enc_id).clone();
        let dec_before = session.model.params.value(dec_id).clone();
        train(&mut session, &bpe_model, &pairs, &cfg, &mut NullSink).unwrap();
        assert_eq!(session.model.params.value(enc_id), &enc_before);
        assert_ne!(session.model.params.value(dec_id), &dec_before);
    }
}
