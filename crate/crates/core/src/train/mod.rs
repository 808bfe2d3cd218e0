//! Optimization loop over mixed manifests: LoRA-only AdamW updates,
//! deterministic batching and condition dropout, per-step loss logging,
//! and exact-resume checkpointing.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::HashMap;
use std::io::Write;
use std::sync::Mutex;
use std::path::Path;

use crate::flow::{drop_condition, fm_loss, interpolate, FlowError};
use crate::imaging::{ImageBuf, ImagingError};
use crate::m3::{M3Error, Manifest, SampleRecord};
use crate::model::{forward, LatentGrid, ModelConfig, ModelError, ModelParams};
use crate::prompt::{
    assemble_sequence, build_attention_mask, AssembledSequence, AttnMask, PromptError, Vocab,
};
use crate::rng::{derive_seed, Rng, RngState};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("i/o: {0}")]
    Io(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint format version {found} unsupported")]
    VersionMismatch { found: u32 },
    #[error("checkpoint crc mismatch")]
    CrcMismatch,
    #[error("checkpoint dtype does not match the requested scalar type")]
    DtypeMismatch,
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint tensor {0} missing")]
    MissingTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    M3(#[from] M3Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 8,
            epochs: 2,
            cond_dropout: 0.01,
            seed: 0,
        }
    }
}

/// AdamW with decoupled (here zero) weight decay. Moments exist only for
/// tensors that track gradients.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: std::collections::BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: Default::default(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn state(&self) -> (u64, &std::collections::BTreeMap<String, (Vec<T>, Vec<T>)>) {
        (self.step, &self.moments)
    }

    pub(crate) fn restore(
        &mut self,
        step: u64,
        moments: std::collections::BTreeMap<String, (Vec<T>, Vec<T>)>,
    ) {
        self.step = step;
        self.moments = moments;
    }

    /// One update over every gradient-tracking tensor; gradients are read
    /// from the tensors' accumulators and zeroed afterwards.
    pub fn step(&mut self, params: &mut ModelParams<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let one = T::one();
        let lr = T::of_f64(self.lr);
        let eps = T::of_f64(self.eps);
        let wd = T::of_f64(self.weight_decay);
        let (ibc1, ibc2) = (T::of_f64(1.0 / bc1), T::of_f64(1.0 / bc2));

        let mut failed: Option<TrainError> = None;
        let moments = &mut self.moments;
        params.for_each_tensor_mut(|name, tensor| {
            if failed.is_some() || !tensor.requires_grad() {
                return;
            }
            let grad = tensor.grad().expect("trainable tensor has grad");
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            let mut data = tensor.data().to_vec();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] * ibc1;
                let v_hat = v[i] * ibc2;
                let update = m_hat / (v_hat.sqrt() + eps) + wd * data[i];
                data[i] = data[i] - lr * update;
            }
            if let Err(e) = tensor.assign(data) {
                failed = Some(e.into());
            }
            tensor.zero_grad();
        });
        match failed {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Everything the loop mutates: parameters, optimizer moments, the step
/// counter, and the training random stream.
pub struct TrainerState<T: Scalar> {
    pub params: ModelParams<T>,
    pub optimizer: AdamW<T>,
    pub train_config: TrainConfig,
    pub step: u64,
    pub rng: Rng,
}

impl<T: Scalar> TrainerState<T> {
    pub fn new(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(model_config, derive_seed(train_config.seed, "model-init"))?;
        Ok(TrainerState {
            params,
            optimizer: AdamW::new(train_config.lr),
            train_config: train_config.clone(),
            step: 0,
            rng: Rng::seed_from(derive_seed(train_config.seed, "train-stream")),
        })
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }
}

/// A manifest row decoded, encoded, tokenized, and masked — ready to train.
pub struct PreparedSample<T: Scalar> {
    pub id: String,
    pub seq: AssembledSequence,
    pub mask: AttnMask,
    pub cond: [LatentGrid<T>; 2],
    /// Clean target in latent space.
    pub clean: LatentGrid<T>,
    /// Patchified clean target, the regression reference.
    pub clean_tokens: Tensor<T>,
}

/// Prepares a sample from in-memory images.
pub fn prepare_from_images<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &str,
    img_a: &ImageBuf,
    img_b: &ImageBuf,
    target: &ImageBuf,
    id: &str,
) -> Result<PreparedSample<T>> {
    let cond_a = params.codec.encode(img_a)?;
    let cond_b = params.codec.encode(img_b)?;
    let clean = params.codec.encode(target)?;
    let p = params.config.patch;
    let tokens = Vocab::builtin().encode(prompt);
    let seq = assemble_sequence(
        &tokens,
        [cond_a.patch_count(p)?, cond_b.patch_count(p)?],
        clean.patch_count(p)?,
        Vocab::builtin(),
    )?;
    let mask = build_attention_mask(&seq.layout);
    let clean_tokens = clean.patchify(p)?;
    Ok(PreparedSample {
        id: id.to_string(),
        seq,
        mask,
        cond: [cond_a, cond_b],
        clean,
        clean_tokens,
    })
}

/// Prepares a manifest record, resolving paths against `data_root`.
pub fn prepare_sample<T: Scalar>(
    params: &ModelParams<T>,
    record: &SampleRecord,
    data_root: &Path,
) -> Result<PreparedSample<T>> {
    let img_a = ImageBuf::load_png(&data_root.join(&record.path_a))?;
    let img_b = ImageBuf::load_png(&data_root.join(&record.path_b))?;
    let target = ImageBuf::load_png(&data_root.join(&record.path_target))?;
    prepare_from_images(params, &record.prompt, &img_a, &img_b, &target, &record.id)
}

/// One training item: a prepared sample with its drawn noise, timestep,
/// and (possibly dropped) condition sequence.
pub struct FlowItem<'a, T: Scalar> {
    pub sample: &'a PreparedSample<T>,
    pub eps: LatentGrid<T>,
    pub t: T,
    pub seq: AssembledSequence,
}

pub struct FlowBatch<'a, T: Scalar> {
    pub items: Vec<FlowItem<'a, T>>,
}

/// Draws ε ~ N(0,1) and t per sample and applies condition dropout,
/// consuming the trainer stream in sample order. Timesteps are stratified
/// across the batch (slot i draws from [i/n, (i+1)/n)), which keeps the
/// marginal uniform on [0,1] while flattening step-to-step loss noise.
pub fn make_batch<'a, T: Scalar>(
    samples: &[&'a PreparedSample<T>],
    cond_dropout: f64,
    rng: &mut Rng,
) -> Result<FlowBatch<'a, T>> {
    let n = samples.len();
    let mut items = Vec::with_capacity(n);
    for (i, sample) in samples.iter().enumerate() {
        let eps = LatentGrid::randn(sample.clean.h, sample.clean.w, sample.clean.c, rng);
        let t = T::of_f64((i as f64 + rng.uniform()) / n as f64);
        let seq = drop_condition(&sample.seq, cond_dropout, rng)?;
        items.push(FlowItem {
            sample,
            eps,
            t,
            seq,
        });
    }
    Ok(FlowBatch { items })
}

/// Forward, flow-matching loss averaged over the batch, backward, AdamW.
/// Returns the batch loss.
pub fn train_step<T: Scalar>(state: &mut TrainerState<T>, batch: &FlowBatch<'_, T>) -> Result<f64> {
    train_step_jobs(state, batch, 1)
}

/// Gradients for one batch item, taken on a worker-private parameter view
/// so concurrent items never share accumulators.
fn item_grads<T: Scalar>(
    worker_params: &ModelParams<T>,
    item: &FlowItem<'_, T>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let sample = item.sample;
    let g: Graph<T> = Graph::new();
    let x_t = interpolate(&sample.clean, &item.eps, item.t)?;
    let v = forward(
        &g,
        worker_params,
        &item.seq,
        &sample.mask,
        [&sample.cond[0], &sample.cond[1]],
        &x_t,
        item.t,
    )?;
    let eps_tokens = item.eps.patchify(worker_params.config.patch)?;
    let loss = fm_loss(&g, &v, &sample.clean_tokens, &eps_tokens)?;
    let loss_value = loss.item().as_f64();
    g.backward(&loss)?;
    let mut grads = Vec::new();
    worker_params.for_each_tensor(|_, t| {
        if t.requires_grad() {
            grads.push(t.grad().expect("trainable"));
        }
    });
    Ok((loss_value, grads))
}

/// Like [`train_step`] but evaluates batch items on up to `jobs` threads,
/// one independent graph per item. Per-item gradients are reduced in item
/// order, so the result is bit-identical for every worker count.
pub fn train_step_jobs<T: Scalar>(
    state: &mut TrainerState<T>,
    batch: &FlowBatch<'_, T>,
    jobs: usize,
) -> Result<f64> {
    let n = batch.items.len();
    if n == 0 {
        return Err(TrainError::EmptyManifest);
    }
    let jobs = jobs.max(1).min(n);

    type ItemOut<T> = (f64, Vec<Vec<T>>);
    let results: Vec<Option<Result<ItemOut<T>>>> = if jobs == 1 {
        let mut local = state.params.clone();
        local.for_each_tensor_mut(|_, t| {
            if t.requires_grad() {
                *t = t.detach().with_grad();
            }
        });
        batch
            .items
            .iter()
            .map(|item| {
                let out = item_grads(&local, item);
                local.zero_grads();
                Some(out)
            })
            .collect()
    } else {
        let slots: Vec<Mutex<Option<Result<ItemOut<T>>>>> =
            (0..n).map(|_| Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let params = &state.params;
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| {
                    // private gradient accumulators for this worker
                    let mut local = params.clone();
                    local.for_each_tensor_mut(|_, t| {
                        if t.requires_grad() {
                            *t = t.detach().with_grad();
                        }
                    });
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= n {
                            return;
                        }
                        let out = item_grads(&local, &batch.items[i]);
                        local.zero_grads();
                        *slots[i].lock().unwrap() = Some(out);
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap())
            .collect()
    };

    // ordered reduction: Σ_i grad_i / n, then loss = Σ_i loss_i / n
    let inv_n = T::of_f64(1.0 / n as f64);
    let mut loss_sum = 0.0;
    let mut summed: Option<Vec<Vec<T>>> = None;
    for slot in results {
        let (loss_i, grads_i) = slot.expect("all items processed")?;
        loss_sum += loss_i;
        match &mut summed {
            None => summed = Some(grads_i),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads_i) {
                    for (av, gv) in a.iter_mut().zip(g) {
                        *av = *av + *gv;
                    }
                }
            }
        }
    }
    let loss_value = loss_sum / n as f64;
    if !loss_value.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: state.step });
    }

    let summed = summed.expect("non-empty batch");
    let mut k = 0;
    state.params.for_each_tensor(|_, t| {
        if t.requires_grad() {
            let scaled: Vec<T> = summed[k].iter().map(|&v| v * inv_n).collect();
            t.accumulate_grad(&scaled);
            k += 1;
        }
    });

    state.optimizer.step(&mut state.params)?;
    state.step += 1;
    Ok(loss_value)
}

/// (step, loss, lr) rows of the training log.
pub type LossLog = Vec<(u64, f64, f64)>;

/// Epochs × shuffled batches over the manifest. The per-epoch order is
/// derived from (seed, epoch), so a resumed run replays the identical
/// schedule; sample preparation is cached by id. Loss rows are appended to
/// `log` as `step,loss,lr` CSV when given.
pub fn run_training<T: Scalar>(
    state: &mut TrainerState<T>,
    manifest: &Manifest,
    data_root: &Path,
    mut log: Option<&mut dyn Write>,
) -> Result<LossLog> {
    run_training_jobs(state, manifest, data_root, log.take(), 1)
}

/// [`run_training`] with batch items spread over `jobs` threads. The loss
/// trajectory is identical for every worker count.
pub fn run_training_jobs<T: Scalar>(
    state: &mut TrainerState<T>,
    manifest: &Manifest,
    data_root: &Path,
    mut log: Option<&mut dyn Write>,
    jobs: usize,
) -> Result<LossLog> {
    if manifest.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    let n = manifest.len();
    let batch_size = state.train_config.batch.max(1);
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_steps = (state.train_config.epochs * batches_per_epoch) as u64;

    let mut cache: HashMap<String, PreparedSample<T>> = HashMap::new();
    let mut rows = Vec::new();
    if state.step == 0 {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "step,loss,lr").map_err(|e| TrainError::Io(e.to_string()))?;
        }
    }

    while state.step < total_steps {
        let epoch = (state.step / batches_per_epoch as u64) as usize;
        let batch_idx = (state.step % batches_per_epoch as u64) as usize;

        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = Rng::seed_from(derive_seed(
            state.train_config.seed,
            &format!("epoch/{epoch}"),
        ));
        order_rng.shuffle(&mut order);

        let lo = batch_idx * batch_size;
        let hi = (lo + batch_size).min(n);
        for &idx in &order[lo..hi] {
            let record = &manifest.records[idx];
            if !cache.contains_key(&record.id) {
                let prepared = prepare_sample(&state.params, record, data_root)?;
                cache.insert(record.id.clone(), prepared);
            }
        }
        let samples: Vec<&PreparedSample<T>> = order[lo..hi]
            .iter()
            .map(|&idx| &cache[&manifest.records[idx].id])
            .collect();

        let batch = {
            let mut rng = state.rng.clone();
            let b = make_batch(&samples, state.train_config.cond_dropout, &mut rng)?;
            state.rng = rng;
            b
        };
        let loss = train_step_jobs(state, &batch, jobs)?;
        let lr = state.optimizer.lr;
        rows.push((state.step, loss, lr));
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{},{loss},{lr}", state.step).map_err(|e| TrainError::Io(e.to_string()))?;
        }
    }
    Ok(rows)
}
