//! Dual-branch encoder and prototypical classification.
//!
//! The spectrogram branch is two conv/pool stages followed by a dense
//! projection; the post-correlation branch is a two-layer MLP. When the
//! post-correlation input is absent (pre-correlation-only ablation) a learned
//! constant token stands in for the branch output, so the fused embedding
//! always has the configured dimension. Episode training minimizes softmax
//! cross-entropy over negative squared distances to class prototypes;
//! inference is nearest-prototype or k-NN in the embedding space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::sigmodel::Label;
use crate::tensor::{ParamSet, ParamTensor, Tape, Var};
use crate::tracking::{PostCorrFeatures, PostCorrField};

/// Which receiver stages feed the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    PreOnly,
    PrePost,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pre" => Ok(FeatureMode::PreOnly),
            "prepost" | "pre+post" => Ok(FeatureMode::PrePost),
            other => Err(Error::validation(
                "feature-mode",
                format!("unknown mode {other:?} (pre|prepost)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureMode::PreOnly => "pre",
            FeatureMode::PrePost => "prepost",
        }
    }
}

/// Turns per-epoch observables into the post-branch input vector: for each
/// selected field, the epoch values centered on the segment mean and put on
/// a field-specific scale, followed by the scaled mean and spread. The
/// scales keep all entries O(1) so one inner-loop learning rate fits every
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PostcorrEncoding {
    pub fields: Vec<PostCorrField>,
    pub epochs: usize,
}

impl PostcorrEncoding {
    pub fn new(fields: Vec<PostCorrField>, epochs: usize) -> Result<Self> {
        if fields.is_empty() || epochs == 0 {
            return Err(Error::validation(
                "postcorr encoding",
                "needs at least one field and one epoch",
            ));
        }
        Ok(Self { fields, epochs })
    }

    pub fn all_fields(epochs: usize) -> Result<Self> {
        Self::new(PostCorrField::ALL.to_vec(), epochs)
    }

    /// (jitter scale, mean scale) per field.
    fn scales(field: PostCorrField) -> (f64, f64) {
        match field {
            PostCorrField::CodePhase => (0.2, 1023.0),
            PostCorrField::DllDiscr => (0.25, 0.5),
            PostCorrField::Doppler => (50.0, 500.0),
            PostCorrField::FllLock => (0.25, 1.0),
            PostCorrField::PllLock => (0.25, 1.0),
        }
    }

    /// Entries are clipped here so a wildly off-nominal segment cannot blow
    /// up the input scale the inner loop was tuned for.
    const CLIP: f64 = 4.0;

    pub fn dim(&self) -> usize {
        self.fields.len() * (self.epochs + 2)
    }

    pub fn encode(&self, feats: &PostCorrFeatures) -> Result<Vec<f64>> {
        if feats.epochs() != self.epochs {
            return Err(Error::validation(
                "postcorr encoding",
                format!("{} epochs, expected {}", feats.epochs(), self.epochs),
            ));
        }
        let mut out = Vec::with_capacity(self.dim());
        for &field in &self.fields {
            let vals = feats.field(field);
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let (jitter, mean_scale) = Self::scales(field);
            for v in vals {
                out.push(((v - mean) / jitter).clamp(-Self::CLIP, Self::CLIP));
            }
            out.push((mean / mean_scale).clamp(-Self::CLIP, Self::CLIP));
            out.push((var.sqrt() / jitter).clamp(-Self::CLIP, Self::CLIP));
        }
        Ok(out)
    }
}

/// Encoder geometry. All sizes are configurable; the defaults are the
/// lightweight two-stage CNN used throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub spec_rows: usize,
    pub spec_cols: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub branch_dim: usize,
    pub post_input_dim: usize,
    pub embedding_dim: usize,
}

impl EncoderConfig {
    pub fn new(spec_rows: usize, spec_cols: usize, post_input_dim: usize) -> Self {
        Self {
            spec_rows,
            spec_cols,
            conv1_filters: 8,
            conv2_filters: 16,
            kernel: 3,
            branch_dim: 32,
            post_input_dim,
            embedding_dim: 64,
        }
    }

    fn after_conv_pool(&self, n: usize) -> usize {
        (n - (self.kernel - 1)) / 2
    }

    /// Flattened size of the spectrogram branch after both conv/pool stages.
    pub fn conv_flat_dim(&self) -> usize {
        let h = self.after_conv_pool(self.after_conv_pool(self.spec_rows));
        let w = self.after_conv_pool(self.after_conv_pool(self.spec_cols));
        self.conv2_filters * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 || self.kernel % 2 == 0 {
            return Err(Error::validation("encoder.kernel", "must be odd and >= 1"));
        }
        let h1 = self.spec_rows.checked_sub(self.kernel - 1).unwrap_or(0) / 2;
        let w1 = self.spec_cols.checked_sub(self.kernel - 1).unwrap_or(0) / 2;
        if h1 < self.kernel || w1 < self.kernel || self.after_conv_pool(h1) == 0 || self.after_conv_pool(w1) == 0 {
            return Err(Error::validation(
                "encoder",
                format!(
                    "spectrogram {}x{} too small for two {}x{} conv/pool stages",
                    self.spec_rows, self.spec_cols, self.kernel, self.kernel
                ),
            ));
        }
        if self.post_input_dim == 0 || self.embedding_dim == 0 || self.branch_dim == 0 {
            return Err(Error::validation("encoder", "zero-sized layer"));
        }
        Ok(())
    }
}

/// Encoder weights plus their geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl EncoderParams {
    /// He-style normal initialization, deterministic in `seed`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let k = config.kernel;

        fn random(
            params: &mut ParamSet,
            rng: &mut ChaCha8Rng,
            name: &str,
            shape: Vec<usize>,
            fan_in: usize,
        ) -> Result<()> {
            let n: usize = shape.iter().product();
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
            params.push(ParamTensor::new(name, shape, data)?)
        }
        fn zeros(params: &mut ParamSet, name: &str, len: usize) -> Result<()> {
            params.push(ParamTensor::new(name, vec![len], vec![0.0; len])?)
        }

        random(&mut params, &mut rng, "conv1.k", vec![config.conv1_filters, 1, k, k], k * k)?;
        random(
            &mut params,
            &mut rng,
            "conv2.k",
            vec![config.conv2_filters, config.conv1_filters, k, k],
            config.conv1_filters * k * k,
        )?;
        let flat = config.conv_flat_dim();
        random(&mut params, &mut rng, "spec_dense.w", vec![flat, config.branch_dim], flat)?;
        zeros(&mut params, "spec_dense.b", config.branch_dim)?;
        random(
            &mut params,
            &mut rng,
            "post1.w",
            vec![config.post_input_dim, config.branch_dim],
            config.post_input_dim,
        )?;
        zeros(&mut params, "post1.b", config.branch_dim)?;
        random(
            &mut params,
            &mut rng,
            "post2.w",
            vec![config.branch_dim, config.branch_dim],
            config.branch_dim,
        )?;
        zeros(&mut params, "post2.b", config.branch_dim)?;
        random(&mut params, &mut rng, "absent.token", vec![config.branch_dim], config.branch_dim)?;
        random(
            &mut params,
            &mut rng,
            "fusion.w",
            vec![2 * config.branch_dim, config.embedding_dim],
            2 * config.branch_dim,
        )?;
        zeros(&mut params, "fusion.b", config.embedding_dim)?;
        Ok(Self { config, params })
    }
}

/// One example ready for the encoder: flattened spectrogram plus the
/// optional encoded post-correlation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledItem {
    pub spec: Vec<f64>,
    pub post: Option<Vec<f64>>,
    pub label: Label,
}

/// Builds [`AssembledItem`]s and validates dimensions as it goes.
pub fn assemble_item(
    cfg: &EncoderConfig,
    spectrogram: &Spectrogram,
    postcorr: Option<(&PostCorrFeatures, &PostcorrEncoding)>,
    label: Label,
) -> Result<AssembledItem> {
    if spectrogram.rows != cfg.spec_rows || spectrogram.cols != cfg.spec_cols {
        return Err(Error::validation(
            "spectrogram",
            format!(
                "{}x{} does not match encoder input {}x{}",
                spectrogram.rows, spectrogram.cols, cfg.spec_rows, cfg.spec_cols
            ),
        ));
    }
    let post = match postcorr {
        Some((feats, enc)) => {
            let v = enc.encode(feats)?;
            if v.len() != cfg.post_input_dim {
                return Err(Error::validation(
                    "postcorr",
                    format!("encoded dim {} != encoder input {}", v.len(), cfg.post_input_dim),
                ));
            }
            Some(v)
        }
        None => None,
    };
    Ok(AssembledItem { spec: spectrogram.data.clone(), post, label })
}

/// Leaf handles for every encoder tensor on one tape, aligned with the
/// ParamSet order.
pub struct EncoderVars {
    vars: Vec<Var>,
}

impl EncoderVars {
    pub fn register(tape: &mut Tape, params: &EncoderParams) -> Result<Self> {
        let mut vars = Vec::with_capacity(params.params.tensors().len());
        for t in params.params.tensors() {
            vars.push(tape.leaf(&t.shape, t.data.clone())?);
        }
        Ok(Self { vars })
    }

    fn get(&self, params: &EncoderParams, name: &str) -> Var {
        self.vars[params.params.index_of(name).expect("known tensor name")]
    }

    /// Gradients for every tensor, as a ParamSet shaped like the input.
    pub fn grads(&self, tape: &Tape, params: &EncoderParams) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (t, var) in params.params.tensors().iter().zip(&self.vars) {
            out.push(ParamTensor::new(
                t.name.clone(),
                t.shape.clone(),
                tape.grad(*var)?.to_vec(),
            )?)?;
        }
        Ok(out)
    }
}

/// Forward pass for one example; returns the embedding Var of length D.
pub fn embed_on_tape(
    tape: &mut Tape,
    params: &EncoderParams,
    vars: &EncoderVars,
    item: &AssembledItem,
) -> Result<Var> {
    let cfg = &params.config;
    let x = tape.leaf(&[1, cfg.spec_rows, cfg.spec_cols], item.spec.clone())?;
    let c1 = tape.conv2d(x, vars.get(params, "conv1.k"), 1)?;
    let c1 = tape.relu(c1)?;
    let p1 = tape.maxpool2(c1)?;
    let c2 = tape.conv2d(p1, vars.get(params, "conv2.k"), 1)?;
    let c2 = tape.relu(c2)?;
    let p2 = tape.maxpool2(c2)?;
    let flat = tape.reshape(p2, &[cfg.conv_flat_dim()])?;
    let spec_out = tape.dense(flat, vars.get(params, "spec_dense.w"), vars.get(params, "spec_dense.b"))?;

    let post_out = match &item.post {
        Some(v) => {
            if v.len() != cfg.post_input_dim {
                return Err(Error::validation(
                    "embed",
                    format!("post vector {} != configured {}", v.len(), cfg.post_input_dim),
                ));
            }
            let p = tape.leaf(&[cfg.post_input_dim], v.clone())?;
            let h = tape.dense(p, vars.get(params, "post1.w"), vars.get(params, "post1.b"))?;
            let h = tape.relu(h)?;
            tape.dense(h, vars.get(params, "post2.w"), vars.get(params, "post2.b"))?
        }
        None => vars.get(params, "absent.token"),
    };
    let fused = tape.concat(&[spec_out, post_out])?;
    tape.dense(fused, vars.get(params, "fusion.w"), vars.get(params, "fusion.b"))
}

/// Plain forward embedding (no gradients kept).
pub fn embed(params: &EncoderParams, item: &AssembledItem) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, params)?;
    let out = embed_on_tape(&mut tape, params, &vars, item)?;
    Ok(tape.value(out).to_vec())
}

fn label_index(label: Label) -> usize {
    match label {
        Label::Clean => 0,
        Label::Spoofed => 1,
    }
}

/// Per-class mean embeddings for nearest-prototype inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub clean: Vec<f64>,
    pub spoofed: Vec<f64>,
}

impl PrototypeSet {
    pub fn dim(&self) -> usize {
        self.clean.len()
    }
}

/// Arithmetic-mean prototypes; every class must have support.
pub fn prototypes(embeddings: &[Vec<f64>], labels: &[Label]) -> Result<PrototypeSet> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::validation(
            "prototypes",
            format!("{} embeddings vs {} labels", embeddings.len(), labels.len()),
        ));
    }
    let dim = embeddings[0].len();
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for (e, l) in embeddings.iter().zip(labels) {
        if e.len() != dim {
            return Err(Error::validation("prototypes", "ragged embedding dimensions"));
        }
        let c = label_index(*l);
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(e) {
            *s += v;
        }
    }
    for (c, label) in [(0usize, Label::Clean), (1usize, Label::Spoofed)] {
        if counts[c] == 0 {
            return Err(Error::validation(
                "prototypes",
                format!("no support examples for class {}", label.name()),
            ));
        }
        for s in sums[c].iter_mut() {
            *s /= counts[c] as f64;
        }
    }
    let [clean, spoofed] = sums;
    Ok(PrototypeSet { clean, spoofed })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Inference rule over a reference set.
pub enum Classifier<'a> {
    NearestPrototype(&'a PrototypeSet),
    Knn {
        support: &'a [Vec<f64>],
        labels: &'a [Label],
        k: usize,
    },
}

/// Classifies one query embedding. Ties break toward the smaller summed
/// distance, then toward Clean.
pub fn classify(query: &[f64], classifier: &Classifier) -> Result<Label> {
    match classifier {
        Classifier::NearestPrototype(protos) => {
            let dc = sq_dist(query, &protos.clean);
            let ds = sq_dist(query, &protos.spoofed);
            Ok(if dc <= ds { Label::Clean } else { Label::Spoofed })
        }
        Classifier::Knn { support, labels, k } => {
            if support.len() != labels.len() {
                return Err(Error::validation(
                    "classify",
                    format!("{} embeddings vs {} labels", support.len(), labels.len()),
                ));
            }
            if *k == 0 || *k > support.len() {
                return Err(Error::validation(
                    "classify",
                    format!("k = {k} outside 1..={}", support.len()),
                ));
            }
            let mut dists: Vec<(f64, usize)> = support
                .iter()
                .enumerate()
                .map(|(i, e)| (sq_dist(query, e), i))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let mut votes = [0usize; 2];
            let mut summed = [0.0f64; 2];
            for &(d, i) in dists.iter().take(*k) {
                let c = label_index(labels[i]);
                votes[c] += 1;
                summed[c] += d;
            }
            Ok(if votes[0] > votes[1] {
                Label::Clean
            } else if votes[1] > votes[0] {
                Label::Spoofed
            } else if summed[0] <= summed[1] {
                Label::Clean
            } else {
                Label::Spoofed
            })
        }
    }
}

/// Prototypical loss over already embedded vectors on the tape:
/// cross-entropy of softmax over negative squared prototype distances.
pub fn proto_loss_from_embeddings(
    tape: &mut Tape,
    support: &[(Var, Label)],
    eval: &[(Var, Label)],
) -> Result<Var> {
    if eval.is_empty() {
        return Err(Error::validation("proto_loss", "empty evaluation set"));
    }
    let dim = tape.shape(support.first().ok_or_else(|| {
        Error::validation("proto_loss", "empty support set")
    })?.0)[0];
    let mut class_protos = Vec::with_capacity(2);
    for label in [Label::Clean, Label::Spoofed] {
        let members: Vec<Var> = support
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(v, _)| *v)
            .collect();
        if members.is_empty() {
            return Err(Error::validation(
                "proto_loss",
                format!("no support examples for class {}", label.name()),
            ));
        }
        let stacked = tape.concat(&members)?;
        let stacked = tape.reshape(stacked, &[members.len(), dim])?;
        let avg_row = tape.leaf(&[1, members.len()], vec![1.0 / members.len() as f64; members.len()])?;
        let zero_bias = tape.leaf(&[dim], vec![0.0; dim])?;
        let proto = tape.dense(avg_row, stacked, zero_bias)?; // [1, dim]
        class_protos.push(tape.reshape(proto, &[dim])?);
    }
    let protos = tape.concat(&class_protos)?;
    let protos = tape.reshape(protos, &[2, dim])?;

    let eval_vars: Vec<Var> = eval.iter().map(|(v, _)| *v).collect();
    let stacked_eval = tape.concat(&eval_vars)?;
    let stacked_eval = tape.reshape(stacked_eval, &[eval.len(), dim])?;
    let dists = tape.sq_euclidean_rows(stacked_eval, protos)?;
    // per-dimension average keeps the logit scale independent of the
    // embedding width, which keeps the inner SGD stable at one learning rate
    let logits = tape.scale(dists, -1.0 / dim as f64)?;
    let labels: Vec<usize> = eval.iter().map(|(_, l)| label_index(*l)).collect();
    tape.softmax_cross_entropy(logits, &labels)
}

/// Embeds support and evaluation items and returns the prototypical loss Var
/// together with the registered parameter leaves. `eval = None` evaluates
/// the support set against its own prototypes, reusing the support
/// embeddings instead of recomputing them.
pub fn proto_loss_on_tape(
    tape: &mut Tape,
    params: &EncoderParams,
    support: &[AssembledItem],
    eval: Option<&[AssembledItem]>,
) -> Result<(Var, EncoderVars)> {
    let vars = EncoderVars::register(tape, params)?;
    let mut sup = Vec::with_capacity(support.len());
    for item in support {
        sup.push((embed_on_tape(tape, params, &vars, item)?, item.label));
    }
    let ev = match eval {
        Some(items) => {
            let mut ev = Vec::with_capacity(items.len());
            for item in items {
                ev.push((embed_on_tape(tape, params, &vars, item)?, item.label));
            }
            ev
        }
        None => sup.clone(),
    };
    let loss = proto_loss_from_embeddings(tape, &sup, &ev)?;
    Ok((loss, vars))
}

/// Loss value only. `eval = None` scores the support set against itself.
pub fn proto_loss(
    params: &EncoderParams,
    support: &[AssembledItem],
    eval: Option<&[AssembledItem]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = proto_loss_on_tape(&mut tape, params, support, eval)?;
    Ok(tape.value(loss)[0])
}

/// Loss and gradients w.r.t. every encoder tensor.
pub fn proto_loss_grad(
    params: &EncoderParams,
    support: &[AssembledItem],
    eval: Option<&[AssembledItem]>,
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let (loss, vars) = proto_loss_on_tape(&mut tape, params, support, eval)?;
    let value = tape.value(loss)[0];
    tape.backward(loss)?;
    Ok((value, vars.grads(&tape, params)?))
}
