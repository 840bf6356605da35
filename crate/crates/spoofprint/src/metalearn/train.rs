//! The meta-training loop and few-shot adaptation.
//!
//! The loop is first-order: each task adapts a copy of the parameters with
//! plain SGD on its support loss, the query losses are evaluated at the
//! adapted copies, and the meta-gradient is the sum of those query-loss
//! gradients taken at the adapted parameters — the inner trajectory is not
//! differentiated through. The outer update is Adam; each epoch ends with
//! one ADMM step on the regularized subset.
//!
//! Per-episode gradients are summed in ascending task-id order, so permuting
//! a batch cannot change the result even at the bit level.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::admm::{admm_update, AdmmScope, AdmmState};
use super::{sample_episode, MetaConfig};
use crate::dataio::Registry;
use crate::embedder::{
    assemble_item, classify, embed, prototypes, proto_loss, proto_loss_grad, AssembledItem,
    Classifier, EncoderConfig, EncoderParams, FeatureMode, PostcorrEncoding, PrototypeSet,
};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::sigmodel::Label;
use crate::tensor::{adam_step, save_checkpoint, sgd_step, AdamState, ParamSet};
use crate::tracking::PostCorrField;

const INIT_SALT: u64 = 0x696e_6974;
const SAMPLE_SALT: u64 = 0x7361_6d70;
const ADAPT_SALT: u64 = 0x6164_6170;

/// A model family the meta-loop can train: it must price a parameter vector
/// on an episode's support or query set and give gradients.
pub trait TaskModel {
    type EpisodeData;

    fn support_loss(&self, params: &ParamSet, ep: &Self::EpisodeData) -> Result<f64>;
    fn support_loss_grad(&self, params: &ParamSet, ep: &Self::EpisodeData)
        -> Result<(f64, ParamSet)>;
    fn query_loss(&self, params: &ParamSet, ep: &Self::EpisodeData) -> Result<f64>;
    fn query_loss_grad(&self, params: &ParamSet, ep: &Self::EpisodeData)
        -> Result<(f64, ParamSet)>;
}

/// One episode of a batch, tagged with the id used for deterministic
/// gradient ordering.
pub struct EpisodeBatchItem<E> {
    pub task_id: u64,
    pub data: E,
}

fn sgd_over_set(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    for (t, g) in params.tensors_mut().iter_mut().zip(grads.tensors()) {
        sgd_step(&mut t.data, &g.data, lr)?;
    }
    Ok(())
}

/// Task adaptation: `steps` SGD steps on the support loss, starting from a
/// copy of `params`. The input snapshot is never touched.
pub fn inner_adapt<M: TaskModel>(
    model: &M,
    params: &ParamSet,
    ep: &M::EpisodeData,
    lr: f64,
    steps: usize,
) -> Result<ParamSet> {
    let mut adapted = params.clone();
    for step in 0..steps {
        let (_, grads) = model.support_loss_grad(&adapted, ep).map_err(|e| match e {
            Error::Numeric(m) => Error::numeric(format!("inner step {step}: {m}")),
            other => other,
        })?;
        sgd_over_set(&mut adapted, &grads, lr)?;
    }
    Ok(adapted)
}

/// First-order meta-gradient over a batch: adapt per episode, evaluate the
/// query loss at the adapted parameters, sum the query-loss gradients in
/// ascending task-id order. Returns the summed gradient and the mean query
/// loss.
pub fn meta_gradient<M: TaskModel>(
    model: &M,
    params: &ParamSet,
    batch: &[EpisodeBatchItem<M::EpisodeData>],
    inner_lr: f64,
    inner_steps: usize,
) -> Result<(ParamSet, f64)> {
    if batch.is_empty() {
        return Err(Error::validation("batch", "no episodes"));
    }
    let mut per_episode: Vec<(u64, f64, ParamSet)> = Vec::with_capacity(batch.len());
    for item in batch {
        let adapted = inner_adapt(model, params, &item.data, inner_lr, inner_steps)?;
        let (loss, grads) = model.query_loss_grad(&adapted, &item.data).map_err(|e| match e {
            Error::Numeric(m) => Error::numeric(format!("episode {}: {m}", item.task_id)),
            other => other,
        })?;
        per_episode.push((item.task_id, loss, grads));
    }
    per_episode.sort_by_key(|(id, _, _)| *id);

    let mut sum = per_episode[0].2.clone();
    for t in sum.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut loss_sum = 0.0;
    for (_, loss, grads) in &per_episode {
        loss_sum += loss;
        for (acc, g) in sum.tensors_mut().iter_mut().zip(grads.tensors()) {
            for (a, v) in acc.data.iter_mut().zip(&g.data) {
                *a += v;
            }
        }
    }
    Ok((sum, loss_sum / batch.len() as f64))
}

/// One outer step: meta-gradient then Adam. Returns the mean query loss.
pub fn meta_step<M: TaskModel>(
    model: &M,
    params: &mut ParamSet,
    batch: &[EpisodeBatchItem<M::EpisodeData>],
    cfg: &MetaConfig,
    adam: &mut AdamState,
) -> Result<f64> {
    let (grad_sum, mean_loss) = meta_gradient(model, params, batch, cfg.inner_lr, cfg.inner_steps)?;
    let mut flat = params.to_flat();
    adam_step(adam, &mut flat, &grad_sum.to_flat(), cfg.outer_lr)?;
    params.from_flat(&flat)?;
    Ok(mean_loss)
}

/// Everything one epoch exposes to an observer, for trace comparison and
/// checkpointing.
pub struct EpochTrace<'a> {
    pub epoch: usize,
    pub mean_query_loss: f64,
    pub params_after_meta: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub params_after_admm: &'a ParamSet,
}

/// Meta-trained parameters plus the per-epoch mean query losses.
pub struct TrainOutput {
    pub params: ParamSet,
    pub loss_history: Vec<f64>,
}

fn regularized_tensor_indices(params: &ParamSet, scope: AdmmScope) -> Vec<usize> {
    match scope {
        AdmmScope::FusionWeights => params.index_of("fusion.w").into_iter().collect(),
        AdmmScope::AllParams => (0..params.tensors().len()).collect(),
    }
}

fn gather(params: &ParamSet, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in idx {
        out.extend_from_slice(&params.tensors()[i].data);
    }
    out
}

fn scatter(params: &mut ParamSet, idx: &[usize], flat: &[f64]) {
    let mut off = 0;
    for &i in idx {
        let t = &mut params.tensors_mut()[i];
        let len = t.data.len();
        t.data.copy_from_slice(&flat[off..off + len]);
        off += len;
    }
}

/// The full training loop: per epoch, sample a batch, run [`meta_step`],
/// then one ADMM step on the regularized subset. After the final epoch the
/// thresholded copy z is installed into the returned parameters (unless
/// disabled), so the sparsity the l1 term produced is what callers get.
pub fn meta_train_loop<M, S>(
    model: &M,
    init: ParamSet,
    cfg: &MetaConfig,
    mut sampler: S,
    mut observer: Option<&mut dyn FnMut(&EpochTrace) -> Result<()>>,
) -> Result<TrainOutput>
where
    M: TaskModel,
    S: FnMut(usize) -> Result<Vec<EpisodeBatchItem<M::EpisodeData>>>,
{
    cfg.validate()?;
    let reg_idx = regularized_tensor_indices(&init, cfg.admm.scope);
    if reg_idx.is_empty() {
        return Err(Error::validation(
            "admm.scope",
            "no regularized tensors found for this scope",
        ));
    }
    let mut params = init;
    let mut admm_state = AdmmState::init(&gather(&params, &reg_idx), cfg.rho, cfg.lambda)?;
    let mut adam = AdamState::new(params.flat_len());
    let mut loss_history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let batch = sampler(epoch)?;
        let mean_loss = meta_step(model, &mut params, &batch, cfg, &mut adam)?;
        let after_meta = if observer.is_some() { params.to_flat() } else { Vec::new() };

        let mut theta = gather(&params, &reg_idx);
        admm_update(&mut theta, &mut admm_state, &cfg.admm)?;
        scatter(&mut params, &reg_idx, &theta);

        loss_history.push(mean_loss);
        if let Some(obs) = observer.as_deref_mut() {
            obs(&EpochTrace {
                epoch,
                mean_query_loss: mean_loss,
                params_after_meta: after_meta,
                z: admm_state.z.clone(),
                u: admm_state.u.clone(),
                params_after_admm: &params,
            })?;
        }
    }
    if cfg.admm.install_sparse_weights {
        scatter(&mut params, &reg_idx, &admm_state.z);
    }
    Ok(TrainOutput { params, loss_history })
}

/// An episode with inputs already assembled for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoEpisode {
    pub support: Vec<AssembledItem>,
    pub query: Vec<AssembledItem>,
}

/// The concrete model trained here: the dual-branch encoder under the
/// prototypical loss. Support adaptation evaluates the support set against
/// its own prototypes.
pub struct ProtoTaskModel {
    pub encoder_config: EncoderConfig,
}

impl ProtoTaskModel {
    fn wrap(&self, params: &ParamSet) -> EncoderParams {
        EncoderParams { config: self.encoder_config, params: params.clone() }
    }
}

impl TaskModel for ProtoTaskModel {
    type EpisodeData = ProtoEpisode;

    fn support_loss(&self, params: &ParamSet, ep: &ProtoEpisode) -> Result<f64> {
        proto_loss(&self.wrap(params), &ep.support, None)
    }

    fn support_loss_grad(&self, params: &ParamSet, ep: &ProtoEpisode) -> Result<(f64, ParamSet)> {
        proto_loss_grad(&self.wrap(params), &ep.support, None)
    }

    fn query_loss(&self, params: &ParamSet, ep: &ProtoEpisode) -> Result<f64> {
        proto_loss(&self.wrap(params), &ep.support, Some(&ep.query))
    }

    fn query_loss_grad(&self, params: &ParamSet, ep: &ProtoEpisode) -> Result<(f64, ParamSet)> {
        proto_loss_grad(&self.wrap(params), &ep.support, Some(&ep.query))
    }
}

/// Options for [`meta_train`] beyond the numeric hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub feature_mode: FeatureMode,
    pub postcorr_fields: Vec<PostCorrField>,
    pub embedding_dim: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            feature_mode: FeatureMode::PrePost,
            postcorr_fields: PostCorrField::ALL.to_vec(),
            embedding_dim: None,
            checkpoint_dir: None,
        }
    }
}

/// Derives the encoder geometry from a combination's datasets and builds the
/// per-item assembler pieces.
fn encoder_setup(
    registry: &Registry,
    combo: &[String],
    opts: &TrainOptions,
) -> Result<(EncoderConfig, Option<PostcorrEncoding>)> {
    if combo.is_empty() {
        return Err(Error::validation("combo", "no dataset tags"));
    }
    let first = registry.get(&combo[0])?;
    let (rows, cols) = (
        first.items[0].spectrogram.rows,
        first.items[0].spectrogram.cols,
    );
    let mut post_epochs = usize::MAX;
    for tag in combo {
        let set = registry.get(tag)?;
        let (r, c) = (set.items[0].spectrogram.rows, set.items[0].spectrogram.cols);
        if (r, c) != (rows, cols) {
            return Err(Error::validation(
                "combo",
                format!("{tag:?} spectrograms are {r}x{c}, expected {rows}x{cols}"),
            ));
        }
        post_epochs = post_epochs.min(set.postcorr_epochs);
    }
    let encoding = match opts.feature_mode {
        FeatureMode::PreOnly => None,
        FeatureMode::PrePost => {
            if post_epochs == 0 || post_epochs == usize::MAX {
                return Err(Error::validation(
                    "feature-mode",
                    "prepost requested but a dataset in the combo has no post-correlation features",
                ));
            }
            Some(PostcorrEncoding::new(opts.postcorr_fields.clone(), post_epochs)?)
        }
    };
    // the post branch keeps its input width even in pre-only mode; the
    // learned absent token feeds the fusion layer instead
    let post_dim = encoding.as_ref().map(|e| e.dim()).unwrap_or(8);
    let mut config = EncoderConfig::new(rows, cols, post_dim);
    if let Some(d) = opts.embedding_dim {
        config.embedding_dim = d;
    }
    config.validate()?;
    Ok((config, encoding))
}

/// Resolves an [`super::Episode`]'s registry indices into encoder-ready items.
pub fn assemble_episode(
    registry: &Registry,
    episode: &super::Episode,
    config: &EncoderConfig,
    encoding: Option<&PostcorrEncoding>,
) -> Result<ProtoEpisode> {
    let set = registry.get(&episode.source_tag)?;
    let build = |idx: &[usize]| -> Result<Vec<AssembledItem>> {
        idx.iter()
            .map(|&i| {
                let item = &set.items[i];
                let post = match encoding {
                    Some(enc) => {
                        let pc = item.postcorr.as_ref().ok_or_else(|| {
                            Error::validation(
                                "episode",
                                format!(
                                    "{}: item {i} has no post-correlation features",
                                    episode.source_tag
                                ),
                            )
                        })?;
                        Some((pc, enc))
                    }
                    None => None,
                };
                assemble_item(config, &item.spectrogram, post, item.label)
            })
            .collect()
    };
    Ok(ProtoEpisode { support: build(&episode.support_idx)?, query: build(&episode.query_idx)? })
}

/// Meta-trains the encoder on a dataset combination. Writes one checkpoint
/// per epoch when a checkpoint directory is configured.
pub fn meta_train(
    cfg: &MetaConfig,
    registry: &Registry,
    combo: &[String],
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let (config, encoding) = encoder_setup(registry, combo, opts)?;
    let init = EncoderParams::init(config, mix_seed(cfg.seed, INIT_SALT))?;
    let model = ProtoTaskModel { encoder_config: config };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SAMPLE_SALT));
    let mut next_task_id = 0u64;
    let sampler = |_epoch: usize| -> Result<Vec<EpisodeBatchItem<ProtoEpisode>>> {
        let mut batch = Vec::with_capacity(cfg.tasks_per_batch);
        for _ in 0..cfg.tasks_per_batch {
            let episode = sample_episode(
                registry,
                combo,
                cfg.shots_per_class,
                cfg.query_size,
                next_task_id,
                &mut rng,
            )?;
            batch.push(EpisodeBatchItem {
                task_id: next_task_id,
                data: assemble_episode(registry, &episode, &config, encoding.as_ref())?,
            });
            next_task_id += 1;
        }
        Ok(batch)
    };
    let mut checkpoint_writer = opts.checkpoint_dir.clone().map(|dir| {
        move |trace: &EpochTrace| -> Result<()> {
            let path = dir.join(format!("checkpoint_epoch_{:03}.spl", trace.epoch));
            save_checkpoint(&path, trace.params_after_admm)
        }
    });
    meta_train_loop(
        &model,
        init.params,
        cfg,
        sampler,
        checkpoint_writer
            .as_mut()
            .map(|w| w as &mut dyn FnMut(&EpochTrace) -> Result<()>),
    )
}

/// Cross-test outcome: confusion counts over the query items.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// confusion[actual][predicted], index 0 = Clean, 1 = Spoofed.
    pub confusion: [[usize; 2]; 2],
    pub accuracy: f64,
    pub mean_query_loss: f64,
    pub query_count: usize,
}

impl EvalOutcome {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Few-shot adaptation to an unseen dataset followed by nearest-prototype
/// classification of the query items. `query_limit` caps the evaluated
/// query set; `None` evaluates every remaining item.
#[allow(clippy::too_many_arguments)]
pub fn adapt_and_evaluate(
    cfg: &MetaConfig,
    registry: &Registry,
    trained: &ParamSet,
    encoder_config: EncoderConfig,
    opts: &TrainOptions,
    target_tag: &str,
    shots: usize,
    query_limit: Option<usize>,
) -> Result<EvalOutcome> {
    let set = registry.get(target_tag)?;
    let encoding = match opts.feature_mode {
        FeatureMode::PreOnly => None,
        FeatureMode::PrePost => {
            if set.postcorr_epochs == 0 {
                return Err(Error::validation(
                    "feature-mode",
                    format!("{target_tag:?} has no post-correlation features"),
                ));
            }
            Some(PostcorrEncoding::new(
                opts.postcorr_fields.clone(),
                set.postcorr_epochs,
            )?)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, ADAPT_SALT));
    let query_size = query_limit
        .unwrap_or(set.items.len().saturating_sub(2 * shots))
        .min(set.items.len().saturating_sub(2 * shots));
    if query_size == 0 {
        return Err(Error::validation(
            "query",
            format!("{target_tag:?}: nothing left to evaluate after support"),
        ));
    }
    let episode = sample_episode(
        registry,
        &[target_tag.to_string()],
        shots,
        query_size,
        0,
        &mut rng,
    )?;
    let assembled = assemble_episode(registry, &episode, &encoder_config, encoding.as_ref())?;
    let model = ProtoTaskModel { encoder_config };
    let adapted = inner_adapt(
        &model,
        trained,
        &assembled,
        cfg.inner_lr,
        cfg.inner_steps,
    )?;
    let mean_query_loss = model.query_loss(&adapted, &assembled)?;

    let adapted_params = EncoderParams { config: encoder_config, params: adapted };
    let mut support_embeddings = Vec::with_capacity(assembled.support.len());
    let mut support_labels = Vec::with_capacity(assembled.support.len());
    for item in &assembled.support {
        support_embeddings.push(embed(&adapted_params, item)?);
        support_labels.push(item.label);
    }
    let protos: PrototypeSet = prototypes(&support_embeddings, &support_labels)?;
    let mut confusion = [[0usize; 2]; 2];
    for item in &assembled.query {
        let e = embed(&adapted_params, item)?;
        let predicted = classify(&e, &Classifier::NearestPrototype(&protos))?;
        let a = match item.label {
            Label::Clean => 0,
            Label::Spoofed => 1,
        };
        let p = match predicted {
            Label::Clean => 0,
            Label::Spoofed => 1,
        };
        confusion[a][p] += 1;
    }
    let correct = confusion[0][0] + confusion[1][1];
    Ok(EvalOutcome {
        confusion,
        accuracy: correct as f64 / assembled.query.len() as f64,
        mean_query_loss,
        query_count: assembled.query.len(),
    })
}

/// Loads a checkpoint written by [`meta_train`] into encoder parameters,
/// rebuilding the geometry from the stored tensor shapes.
pub fn encoder_config_from_params(params: &ParamSet, spec_rows: usize, spec_cols: usize) -> Result<EncoderConfig> {
    let conv1 = params
        .get("conv1.k")
        .ok_or_else(|| Error::data("checkpoint is missing conv1.k"))?;
    let conv2 = params
        .get("conv2.k")
        .ok_or_else(|| Error::data("checkpoint is missing conv2.k"))?;
    let post1 = params
        .get("post1.w")
        .ok_or_else(|| Error::data("checkpoint is missing post1.w"))?;
    let fusion = params
        .get("fusion.w")
        .ok_or_else(|| Error::data("checkpoint is missing fusion.w"))?;
    let branch = params
        .get("spec_dense.b")
        .ok_or_else(|| Error::data("checkpoint is missing spec_dense.b"))?;
    let config = EncoderConfig {
        spec_rows,
        spec_cols,
        conv1_filters: conv1.shape[0],
        conv2_filters: conv2.shape[0],
        kernel: conv1.shape[2],
        branch_dim: branch.shape[0],
        post_input_dim: post1.shape[0],
        embedding_dim: fusion.shape[1],
    };
    config.validate()?;
    let paths_match = params
        .get("spec_dense.w")
        .map(|t| t.shape[0] == config.conv_flat_dim())
        .unwrap_or(false);
    if !paths_match {
        return Err(Error::data(format!(
            "checkpoint encoder does not fit {spec_rows}x{spec_cols} spectrograms",
        )));
    }
    Ok(config)
}

/// Re-derives the set of tensor names touched by the given scope; used by
/// reporting code to count sparsity where it was actually applied.
pub fn regularized_tensor_names(params: &ParamSet, scope: AdmmScope) -> Vec<String> {
    regularized_tensor_indices(params, scope)
        .into_iter()
        .map(|i| params.tensors()[i].name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{FeatureItem, FeatureSet};
    use crate::embedder::proto_loss_from_embeddings;
    use crate::metalearn::AdmmOptions;
    use crate::features::{Normalization, Spectrogram, StftConfig};
    use crate::tensor::{ParamTensor, Tape};
    use crate::tracking::PostCorrFeatures;
    use rand::Rng;

    /// One scalar parameter, support loss theta^2firstorder. Query loss mirrors it.
    struct Quadratic;

    impl TaskModel for Quadratic {
        type EpisodeData = ();

        fn support_loss(&self, params: &ParamSet, _: &()) -> Result<f64> {
            let t = params.tensors()[0].data[0];
            Ok(t * t)
        }
        fn support_loss_grad(&self, params: &ParamSet, _: &()) -> Result<(f64, ParamSet)> {
            let t = params.tensors()[0].data[0];
            let mut g = params.clone();
            g.tensors_mut()[0].data[0] = 2.0 * t;
            Ok((t * t, g))
        }
        fn query_loss(&self, params: &ParamSet, ep: &()) -> Result<f64> {
            self.support_loss(params, ep)
        }
        fn query_loss_grad(&self, params: &ParamSet, ep: &()) -> Result<(f64, ParamSet)> {
            self.support_loss_grad(params, ep)
        }
    }

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push(ParamTensor::new("w", vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn inner_adapt_textbook_step_and_identity() {
        let params = scalar_params(1.0);
        let one = inner_adapt(&Quadratic, &params, &(), 0.01, 1).unwrap();
        assert!((one.tensors()[0].data[0] - 0.98).abs() < 1e-15);

        let zero = inner_adapt(&Quadratic, &params, &(), 0.01, 0).unwrap();
        assert_eq!(zero, params);
    }

    #[test]
    fn inner_adapt_leaves_the_snapshot_alone() {
        let params = scalar_params(0.7);
        let before = params.content_hash();
        let _ = inner_adapt(&Quadratic, &params, &(), 0.05, 7).unwrap();
        assert_eq!(params.content_hash(), before);
    }

    /// Two-class Gaussian points through a learnable 2x2 linear map with the
    /// prototypical loss; small enough for dozens of meta-steps in tests.
    struct LinearProto;

    type ToyEpisode = (Vec<(Vec<f64>, Label)>, Vec<(Vec<f64>, Label)>);

    impl LinearProto {
        fn loss_tape(
            params: &ParamSet,
            support: &[(Vec<f64>, Label)],
            eval: &[(Vec<f64>, Label)],
        ) -> Result<(Tape, crate::tensor::Var, crate::tensor::Var)> {
            let mut tape = Tape::new();
            let w = tape.leaf(&params.tensors()[0].shape, params.tensors()[0].data.clone())?;
            let bias = tape.leaf(&[2], vec![0.0, 0.0])?;
            let embed = |tape: &mut Tape, x: &[f64]| -> Result<crate::tensor::Var> {
                let xv = tape.leaf(&[2], x.to_vec())?;
                tape.dense(xv, w, bias)
            };
            let mut sup = Vec::new();
            for (x, l) in support {
                sup.push((embed(&mut tape, x)?, *l));
            }
            let mut ev = Vec::new();
            for (x, l) in eval {
                ev.push((embed(&mut tape, x)?, *l));
            }
            let loss = proto_loss_from_embeddings(&mut tape, &sup, &ev)?;
            Ok((tape, loss, w))
        }

        fn eval(
            params: &ParamSet,
            support: &[(Vec<f64>, Label)],
            eval: &[(Vec<f64>, Label)],
            want_grad: bool,
        ) -> Result<(f64, Option<ParamSet>)> {
            let (mut tape, loss, w) = Self::loss_tape(params, support, eval)?;
            let value = tape.value(loss)[0];
            if !want_grad {
                return Ok((value, None));
            }
            tape.backward(loss)?;
            let mut g = params.clone();
            g.tensors_mut()[0].data.copy_from_slice(tape.grad(w)?);
            Ok((value, Some(g)))
        }
    }

    impl TaskModel for LinearProto {
        type EpisodeData = ToyEpisode;

        fn support_loss(&self, params: &ParamSet, ep: &ToyEpisode) -> Result<f64> {
            Ok(Self::eval(params, &ep.0, &ep.0, false)?.0)
        }
        fn support_loss_grad(&self, params: &ParamSet, ep: &ToyEpisode) -> Result<(f64, ParamSet)> {
            let (l, g) = Self::eval(params, &ep.0, &ep.0, true)?;
            Ok((l, g.unwrap()))
        }
        fn query_loss(&self, params: &ParamSet, ep: &ToyEpisode) -> Result<f64> {
            Ok(Self::eval(params, &ep.0, &ep.1, false)?.0)
        }
        fn query_loss_grad(&self, params: &ParamSet, ep: &ToyEpisode) -> Result<(f64, ParamSet)> {
            let (l, g) = Self::eval(params, &ep.0, &ep.1, true)?;
            Ok((l, g.unwrap()))
        }
    }

    fn gaussian_episode(rng: &mut ChaCha8Rng, sep: f64, noise: f64) -> ToyEpisode {
        let mut draw = |label: Label, n: usize| -> Vec<(Vec<f64>, Label)> {
            let center = match label {
                Label::Clean => [-sep, 0.3 * sep],
                Label::Spoofed => [sep, -0.3 * sep],
            };
            (0..n)
                .map(|_| {
                    (
                        vec![
                            center[0] + noise * rng.gen_range(-1.0..1.0),
                            center[1] + noise * rng.gen_range(-1.0..1.0),
                        ],
                        label,
                    )
                })
                .collect()
        };
        let mut support = draw(Label::Clean, 4);
        support.extend(draw(Label::Spoofed, 4));
        let mut query = draw(Label::Clean, 6);
        query.extend(draw(Label::Spoofed, 6));
        (support, query)
    }

    fn toy_matrix_params(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.push(
            ParamTensor::new("w", vec![2, 2], (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn adaptation_does_not_increase_support_loss() {
        let model = LinearProto;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ep = gaussian_episode(&mut rng, 1.0, 0.6);
            let params = toy_matrix_params(seed ^ 0xabc);
            let before = model.support_loss(&params, &ep).unwrap();
            let adapted = inner_adapt(&model, &params, &ep, 0.01, 5).unwrap();
            let after = model.support_loss(&adapted, &ep).unwrap();
            assert!(after <= before + 1e-12, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn identical_episodes_scale_the_meta_gradient() {
        let model = LinearProto;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = gaussian_episode(&mut rng, 1.0, 0.5);
        let params = toy_matrix_params(17);
        let (single, _) = meta_gradient(
            &model,
            &params,
            &[EpisodeBatchItem { task_id: 0, data: ep.clone() }],
            0.01,
            3,
        )
        .unwrap();
        let batch: Vec<_> = (0..4)
            .map(|i| EpisodeBatchItem { task_id: i, data: ep.clone() })
            .collect();
        let (summed, _) = meta_gradient(&model, &params, &batch, 0.01, 3).unwrap();
        for (s, g) in summed.tensors()[0].data.iter().zip(&single.tensors()[0].data) {
            assert!((s - 4.0 * g).abs() < 1e-9 * g.abs().max(1.0), "{s} vs 4*{g}");
        }
    }

    #[test]
    fn batch_permutation_is_bit_exact() {
        let model = LinearProto;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps: Vec<ToyEpisode> = (0..3).map(|_| gaussian_episode(&mut rng, 1.0, 0.5)).collect();
        let run = |order: [usize; 3]| -> Vec<u64> {
            let mut params = toy_matrix_params(5);
            let mut adam = AdamState::new(params.flat_len());
            let batch: Vec<_> = order
                .iter()
                .map(|&i| EpisodeBatchItem { task_id: i as u64, data: eps[i].clone() })
                .collect();
            meta_step(&model, &mut params, &batch, &MetaConfig::default(), &mut adam).unwrap();
            params.to_flat().iter().map(|v| v.to_bits()).collect()
        };
        let a = run([0, 1, 2]);
        let b = run([2, 0, 1]);
        let c = run([1, 2, 0]);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    /// Loss that ignores the parameters entirely: zero gradients everywhere.
    struct Flat;

    impl TaskModel for Flat {
        type EpisodeData = ();
        fn support_loss(&self, _: &ParamSet, _: &()) -> Result<f64> {
            Ok(1.0)
        }
        fn support_loss_grad(&self, params: &ParamSet, _: &()) -> Result<(f64, ParamSet)> {
            let mut g = params.clone();
            for t in g.tensors_mut() {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
            Ok((1.0, g))
        }
        fn query_loss(&self, p: &ParamSet, e: &()) -> Result<f64> {
            self.support_loss(p, e)
        }
        fn query_loss_grad(&self, p: &ParamSet, e: &()) -> Result<(f64, ParamSet)> {
            self.support_loss_grad(p, e)
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_in_place() {
        let mut params = toy_matrix_params(1);
        let before = params.to_flat();
        let mut adam = AdamState::new(params.flat_len());
        let batch: Vec<_> = (0..3).map(|i| EpisodeBatchItem { task_id: i, data: () }).collect();
        meta_step(&Flat, &mut params, &batch, &MetaConfig::default(), &mut adam).unwrap();
        let delta: f64 = params
            .to_flat()
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(delta < 1e-6, "theta moved by {delta}");
    }

    fn toy_loop_config(epochs: usize, lambda: f64, seed: u64) -> MetaConfig {
        MetaConfig {
            epochs,
            lambda,
            tasks_per_batch: 2,
            admm: AdmmOptions { scope: AdmmScope::AllParams, ..AdmmOptions::default() },
            seed,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn toy_meta_training_learns_and_reproduces() {
        let model = LinearProto;
        let run = |seed: u64| -> (Vec<f64>, Vec<u64>) {
            let mut cfg = toy_loop_config(30, 0.0, seed);
            cfg.tasks_per_batch = 8;
            cfg.outer_lr = 0.005;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampler = |_: usize| -> Result<Vec<EpisodeBatchItem<ToyEpisode>>> {
                Ok((0..8)
                    .map(|i| EpisodeBatchItem {
                        task_id: i,
                        data: gaussian_episode(&mut rng, 1.2, 0.35),
                    })
                    .collect())
            };
            let out = meta_train_loop(&model, toy_matrix_params(seed), &cfg, sampler, None).unwrap();
            (
                out.loss_history.clone(),
                out.params.to_flat().iter().map(|v| v.to_bits()).collect(),
            )
        };
        let (history, bits_a) = run(9);
        assert_eq!(history.len(), 30);
        // decreasing trend across 10-step windows
        for i in 0..history.len() - 10 {
            assert!(
                history[i + 10] < history[i],
                "window {i}: {} -> {}",
                history[i],
                history[i + 10]
            );
        }
        let (_, bits_b) = run(9);
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn heavy_lambda_zeroes_the_regularized_weights() {
        let model = LinearProto;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = toy_loop_config(10, 10.0, 77);
        let sampler = |_: usize| -> Result<Vec<EpisodeBatchItem<ToyEpisode>>> {
            Ok((0..2)
                .map(|i| EpisodeBatchItem { task_id: i, data: gaussian_episode(&mut rng, 1.2, 0.5) })
                .collect())
        };
        let out = meta_train_loop(&model, toy_matrix_params(4), &cfg, sampler, None).unwrap();
        assert!(out.params.to_flat().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let cfg = toy_loop_config(10, 0.0, 78);
        let sampler = |_: usize| -> Result<Vec<EpisodeBatchItem<ToyEpisode>>> {
            Ok((0..2)
                .map(|i| EpisodeBatchItem { task_id: i, data: gaussian_episode(&mut rng, 1.2, 0.5) })
                .collect())
        };
        let out = meta_train_loop(&model, toy_matrix_params(4), &cfg, sampler, None).unwrap();
        assert!(out.params.to_flat().iter().all(|&v| v != 0.0));
    }

    fn synthetic_registry(tag: &str, per_class: usize, sep: f64, seed: u64) -> Registry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (12usize, 10usize);
        let mut items = Vec::new();
        for label in [Label::Clean, Label::Spoofed] {
            let offset = match label {
                Label::Clean => 0.0,
                Label::Spoofed => sep,
            };
            for _ in 0..per_class {
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| offset + rng.gen_range(-0.5..0.5))
                    .collect();
                let mut pc = PostCorrFeatures::new();
                for _ in 0..2 {
                    pc.push_epoch(
                        10.0 + offset + rng.gen_range(-0.05..0.05),
                        offset * 0.01 + rng.gen_range(-0.01..0.01),
                        rng.gen_range(-5.0..5.0),
                        (0.95 - 0.2 * offset).clamp(-1.0, 1.0),
                        (0.95 - 0.2 * offset).clamp(-1.0, 1.0),
                    );
                }
                items.push(FeatureItem {
                    spectrogram: Spectrogram {
                        rows,
                        cols,
                        data,
                        config: StftConfig::default(),
                        normalization: Normalization::Raw,
                    },
                    postcorr: Some(pc),
                    label,
                });
            }
        }
        let mut reg = Registry::new();
        reg.register(FeatureSet {
            tag: tag.to_string(),
            stft: StftConfig::default(),
            normalization: Normalization::Raw,
            postcorr_epochs: 2,
            items,
        })
        .unwrap();
        reg
    }

    #[test]
    fn encoder_meta_train_runs_and_checkpoints() {
        let mut reg = synthetic_registry("fam_a", 20, 2.0, 1);
        let other = synthetic_registry("fam_b", 20, 2.0, 2);
        reg.register(other.get("fam_b").unwrap().clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = MetaConfig {
            epochs: 2,
            tasks_per_batch: 2,
            query_size: 8,
            shots_per_class: 2,
            inner_steps: 2,
            seed: 5,
            ..MetaConfig::default()
        };
        let combo = vec!["fam_a".to_string(), "fam_b".to_string()];
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let out = meta_train(&cfg, &reg, &combo, &opts).unwrap();
        assert_eq!(out.loss_history.len(), 2);
        assert!(dir.path().join("checkpoint_epoch_001.spl").exists());
        assert!(dir.path().join("checkpoint_epoch_002.spl").exists());

        let again = meta_train(&cfg, &reg, &combo, &opts).unwrap();
        assert_eq!(out.loss_history, again.loss_history);

        // well-separated synthetic classes: adaptation then memorization
        let eval = adapt_and_evaluate(
            &cfg,
            &reg,
            &out.params,
            encoder_config_from_params(&out.params, 12, 10).unwrap(),
            &opts,
            "fam_a",
            3,
            Some(12),
        )
        .unwrap();
        assert_eq!(eval.total(), eval.query_count);
        assert_eq!(eval.query_count, 12);
        assert!(eval.accuracy >= 0.9, "accuracy {}", eval.accuracy);
    }
}
