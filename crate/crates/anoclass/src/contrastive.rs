//! Contrastive classifier: a convolutional embedding network over residual
//! maps trained with a softmax contrastive loss. Every query embedding is an
//! anchor scored against a pool of support embeddings; the positives are the
//! support items of the query's class. Fine-tuning builds its query/support
//! pools with the feature-sorting pair generation below; pretraining samples
//! pseudo-class episodes and stops once episode accuracy clears a threshold.

use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::io::TensorArchive;
use crate::nn::{Adam, ConvBlock, GlobalAvgPool, Linear, Param};
use crate::relation::{
    load_conv_block, load_linear, push_conv_block, push_linear, sample_distinct,
};

/// Architecture and temperature of the embedding network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    pub embed_dim: usize,
    pub temperature: f64,
    pub param_seed: u64,
}

impl EmbeddingConfig {
    pub fn new(feature_channels: usize, param_seed: u64) -> Self {
        EmbeddingConfig {
            in_channels: feature_channels,
            block_channels: vec![256, 128, 64, 64],
            embed_dim: 256,
            temperature: 1.0,
            param_seed,
        }
    }

    /// Narrow configuration for demos and tests.
    pub fn toy(feature_channels: usize, param_seed: u64) -> Self {
        EmbeddingConfig {
            in_channels: feature_channels,
            block_channels: vec![8, 8, 8, 8],
            embed_dim: 16,
            temperature: 1.0,
            param_seed,
        }
    }
}

/// Conv blocks, global average pooling, a linear projection, then L2
/// normalization: embeddings always land on the unit sphere.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    pub cfg: EmbeddingConfig,
    blocks: Vec<ConvBlock>,
    gap: GlobalAvgPool,
    fc: Linear,
    norm_cache: Option<NormCache>,
}

#[derive(Debug, Clone)]
struct NormCache {
    unit: Array2<f64>,
    norms: Vec<f64>,
}

const NORM_EPS: f64 = 1e-12;

impl EmbeddingNet {
    pub fn new(cfg: EmbeddingConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.param_seed);
        let mut blocks = Vec::new();
        let mut in_ch = cfg.in_channels;
        for &out_ch in &cfg.block_channels {
            blocks.push(ConvBlock::new(in_ch, out_ch, &mut rng));
            in_ch = out_ch;
        }
        let fc = Linear::new(in_ch, cfg.embed_dim, &mut rng);
        EmbeddingNet {
            cfg,
            blocks,
            gap: GlobalAvgPool::new(),
            fc,
            norm_cache: None,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        let mut clone = self.clone();
        clone.params_mut().iter().map(|p| p.len()).sum()
    }

    /// All parameters concatenated in visit order.
    pub fn flat_params(&mut self) -> Vec<f64> {
        self.params_mut()
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }

    /// All gradients concatenated in visit order.
    pub fn flat_grads(&mut self) -> Vec<f64> {
        self.params_mut()
            .iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for p in self.params_mut() {
            p.data.copy_from_slice(&flat[offset..offset + p.data.len()]);
            offset += p.data.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Training forward: batch of (C, H, W) inputs to unit-norm rows.
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let mut t = x.clone();
        for b in &mut self.blocks {
            t = b.forward_train(&t);
        }
        let pooled = self.gap.forward_train(&t);
        let raw = self.fc.forward_train(&pooled);
        let (unit, norms) = l2_normalize_rows(&raw);
        self.norm_cache = Some(NormCache {
            unit: unit.clone(),
            norms,
        });
        unit
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut t = x.clone();
        for b in &self.blocks {
            t = b.forward_eval(&t);
        }
        let pooled = self.gap.forward_eval(&t);
        let raw = self.fc.forward_eval(&pooled);
        l2_normalize_rows(&raw).0
    }

    /// Backward from d(loss)/d(embedding rows).
    pub fn backward(&mut self, grad_emb: &Array2<f64>) {
        let cache = self.norm_cache.take().expect("forward_train not called");
        let (n, d) = grad_emb.dim();
        let mut dr = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let dot: f64 = (0..d).map(|j| cache.unit[(i, j)] * grad_emb[(i, j)]).sum();
            for j in 0..d {
                dr[(i, j)] = (grad_emb[(i, j)] - cache.unit[(i, j)] * dot) / cache.norms[i];
            }
        }
        let g = self.fc.backward(&dr);
        let mut g4 = self.gap.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g4 = b.backward(&g4);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let descriptor = serde_json::json!({
            "kind": "embedding",
            "config": self.cfg,
        });
        let mut archive = TensorArchive::new(descriptor);
        let mut in_ch = self.cfg.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            let out_ch = self.cfg.block_channels[i];
            push_conv_block(&mut archive, &format!("block{i}"), b, in_ch, out_ch);
            in_ch = out_ch;
        }
        push_linear(&mut archive, "fc", &self.fc);
        archive.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = TensorArchive::read(path)?;
        if archive.descriptor["kind"] != "embedding" {
            return Err(Error::format(path, "checkpoint is not an embedding net"));
        }
        let cfg: EmbeddingConfig = serde_json::from_value(archive.descriptor["config"].clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut net = EmbeddingNet::new(cfg);
        for (i, b) in net.blocks.iter_mut().enumerate() {
            load_conv_block(&archive, &format!("block{i}"), b, path)?;
        }
        load_linear(&archive, "fc", &mut net.fc, path)?;
        Ok(net)
    }
}

fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let norm = x
            .row(i)
            .iter()
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(NORM_EPS);
        for j in 0..d {
            out[(i, j)] = x[(i, j)] / norm;
        }
        norms.push(norm);
    }
    (out, norms)
}

fn to_f64_batch(items: &[&Array3<f32>]) -> Array4<f64> {
    let (c, h, w) = items[0].dim();
    let mut out = Array4::<f64>::zeros((items.len(), c, h, w));
    for (i, item) in items.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(i, ch, y, x)] = item[(ch, y, x)] as f64;
                }
            }
        }
    }
    out
}

/// Embeds one feature tensor in eval mode; output is unit-norm.
pub fn embed(net: &EmbeddingNet, r: &Array3<f32>) -> Result<Vec<f64>> {
    let (c, _, _) = r.dim();
    if c != net.cfg.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, net expects {}",
            net.cfg.in_channels
        )));
    }
    let batch = to_f64_batch(&[r]);
    Ok(net.forward_eval(&batch).row(0).to_vec())
}

/// Softmax contrastive loss for one anchor: per positive `p`,
/// `-ln(exp(q . c_p / tau) / sum_j exp(q . c_j / tau))`, averaged over the
/// positives.
pub fn info_nce(
    query_emb: &[f64],
    candidates: &Array2<f64>,
    positive_positions: &[usize],
    tau: f64,
) -> Result<f64> {
    let (loss, _, _) = info_nce_with_grad(query_emb, candidates, positive_positions, tau)?;
    Ok(loss)
}

/// Loss plus gradients with respect to the query embedding and every
/// candidate embedding.
pub fn info_nce_with_grad(
    query_emb: &[f64],
    candidates: &Array2<f64>,
    positive_positions: &[usize],
    tau: f64,
) -> Result<(f64, Vec<f64>, Array2<f64>)> {
    let (k, d) = candidates.dim();
    if k == 0 {
        return Err(Error::Argument("candidate set is empty".into()));
    }
    if d != query_emb.len() {
        return Err(Error::Shape(format!(
            "query dim {} vs candidate dim {d}",
            query_emb.len()
        )));
    }
    if positive_positions.is_empty() {
        return Err(Error::Argument("no positive positions given".into()));
    }
    if positive_positions.iter().any(|&p| p >= k) {
        return Err(Error::Argument("positive position out of range".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("tau = {tau} must be positive")));
    }

    let logits: Vec<f64> = (0..k)
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..d {
                acc += query_emb[i] * candidates[(j, i)];
            }
            acc / tau
        })
        .collect();
    let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max_logit).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = z.ln() + max_logit;

    let p_count = positive_positions.len() as f64;
    let mut loss = 0.0;
    for &p in positive_positions {
        loss += log_z - logits[p];
    }
    loss /= p_count;

    // d(loss)/d(logit_j) = softmax_j - [j is positive] / |P|
    let mut dlogits = vec![0.0; k];
    for j in 0..k {
        dlogits[j] = exps[j] / z;
    }
    for &p in positive_positions {
        dlogits[p] -= 1.0 / p_count;
    }

    let mut dq = vec![0.0; d];
    let mut dc = Array2::<f64>::zeros((k, d));
    for j in 0..k {
        let g = dlogits[j] / tau;
        for i in 0..d {
            dq[i] += g * candidates[(j, i)];
            dc[(j, i)] = g * query_emb[i];
        }
    }
    Ok((loss, dq, dc))
}

/// One query with its support pool: indices into the episode's feature list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub query_index: usize,
    pub query_class: usize,
    pub support_indices: Vec<usize>,
    pub support_classes: Vec<usize>,
    pub positive_positions: Vec<usize>,
}

/// Feature sorting and query-support pair generation.
///
/// Features are sorted by (class, appearance order); each of the C*S features
/// serves once as query, and its support pool takes, for j = 1..S-1 and every
/// class, the j-th remaining feature of that class after removing the query.
/// Every support pool has (S-1)*C entries with each class appearing exactly
/// S-1 times.
pub fn make_pairs<T>(features: &[(T, usize)], shots: usize, classes: usize) -> Result<Vec<PairBatch>> {
    if shots < 2 {
        return Err(Error::DegenerateEpisode);
    }
    if features.len() != shots * classes {
        return Err(Error::Argument(format!(
            "expected {classes} classes x {shots} shots = {} features, got {}",
            shots * classes,
            features.len()
        )));
    }
    let mut per_class = vec![0usize; classes];
    for &(_, c) in features {
        if c >= classes {
            return Err(Error::Argument(format!(
                "class id {c} out of range 0..{classes}"
            )));
        }
        per_class[c] += 1;
    }
    if per_class.iter().any(|&c| c != shots) {
        return Err(Error::Argument(format!(
            "every class must have exactly {shots} features"
        )));
    }

    // sort by (class, appearance order)
    let mut sorted: Vec<usize> = Vec::with_capacity(features.len());
    for class in 0..classes {
        for (i, &(_, c)) in features.iter().enumerate() {
            if c == class {
                sorted.push(i);
            }
        }
    }

    let mut batches = Vec::with_capacity(sorted.len());
    for &q in &sorted {
        let query_class = features[q].1;
        // remaining features of each class, in sorted order, minus the query
        let remaining: Vec<Vec<usize>> = (0..classes)
            .map(|class| {
                sorted
                    .iter()
                    .copied()
                    .filter(|&i| features[i].1 == class && i != q)
                    .collect()
            })
            .collect();

        let mut support_indices = Vec::with_capacity((shots - 1) * classes);
        let mut support_classes = Vec::with_capacity((shots - 1) * classes);
        for j in 0..shots - 1 {
            for (class, rem) in remaining.iter().enumerate() {
                support_indices.push(rem[j]);
                support_classes.push(class);
            }
        }
        let positive_positions: Vec<usize> = support_classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == query_class)
            .map(|(pos, _)| pos)
            .collect();
        batches.push(PairBatch {
            query_index: q,
            query_class,
            support_indices,
            support_classes,
            positive_positions,
        });
    }
    Ok(batches)
}

#[derive(Debug, Clone)]
pub struct ContrastivePretrainConfig {
    pub lr: f64,
    pub episode_classes: usize,
    /// Support candidates per class per episode.
    pub episode_shots: usize,
    pub accuracy_threshold: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for ContrastivePretrainConfig {
    fn default() -> Self {
        ContrastivePretrainConfig {
            lr: 1e-4,
            episode_classes: 10,
            episode_shots: 2,
            accuracy_threshold: 0.4,
            max_iterations: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLog {
    pub episode_accuracies: Vec<f64>,
    pub stopped_early: bool,
}

fn group_by_class(source: &dyn FeatureSource) -> Result<Vec<Vec<usize>>> {
    if source.is_empty() {
        return Err(Error::Argument("no features given".into()));
    }
    let class_count = source.class_count();
    let mut by_class = vec![Vec::new(); class_count];
    for i in 0..source.len() {
        by_class[source.class_of(i)].push(i);
    }
    if by_class.iter().any(|v| v.is_empty()) {
        return Err(Error::Argument("class ids must be dense 0..C".into()));
    }
    Ok(by_class)
}

/// Pseudo-class pretraining. Each iteration samples `episode_classes`
/// classes, then per class `episode_shots` support candidates plus one query
/// (no intra-class overlap), takes one accumulated Adam step on the summed
/// per-query contrastive losses, records episode accuracy, and stops once
/// accuracy exceeds the threshold or the iteration guard is hit.
pub fn pretrain(
    net: &mut EmbeddingNet,
    source: &dyn FeatureSource,
    cfg: &ContrastivePretrainConfig,
) -> Result<PretrainLog> {
    let by_class = group_by_class(source)?;
    if by_class.len() < cfg.episode_classes {
        return Err(Error::Argument(format!(
            "pretraining needs at least {} classes, got {}",
            cfg.episode_classes,
            by_class.len()
        )));
    }
    let needed = cfg.episode_shots + 1;
    if by_class.iter().any(|items| items.len() < needed) {
        return Err(Error::Argument(format!(
            "every pseudo-class needs at least {needed} samples"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut log = PretrainLog {
        episode_accuracies: Vec::new(),
        stopped_early: false,
    };

    for _ in 0..cfg.max_iterations {
        let class_pick = sample_distinct(&mut rng, by_class.len(), cfg.episode_classes);
        // per class: episode_shots supports then 1 query, disjoint
        let mut supports: Vec<usize> = Vec::new();
        let mut support_classes: Vec<usize> = Vec::new();
        let mut queries: Vec<(usize, usize)> = Vec::new(); // (feature idx, episode class)
        for (epi_class, &cls) in class_pick.iter().enumerate() {
            let items = &by_class[cls];
            let picked = sample_distinct(&mut rng, items.len(), needed);
            for &pi in picked.iter().take(cfg.episode_shots) {
                supports.push(items[pi]);
                support_classes.push(epi_class);
            }
            queries.push((items[picked[cfg.episode_shots]], epi_class));
        }
        let support_tensors: Vec<Array3<f32>> = supports
            .iter()
            .map(|&s| source.tensor(s))
            .collect::<Result<_>>()?;

        net.zero_grad();
        let mut correct = 0usize;
        for &(q_idx, q_class) in &queries {
            let q_tensor = source.tensor(q_idx)?;
            let mut batch_refs: Vec<&Array3<f32>> = vec![&q_tensor];
            batch_refs.extend(support_tensors.iter());
            let batch = to_f64_batch(&batch_refs);
            let emb = net.forward_train(&batch);
            let q_emb: Vec<f64> = emb.row(0).to_vec();
            let cand = emb.slice(ndarray::s![1.., ..]).to_owned();
            let positives: Vec<usize> = support_classes
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == q_class)
                .map(|(i, _)| i)
                .collect();
            let (_, dq, dc) =
                info_nce_with_grad(&q_emb, &cand, &positives, net.cfg.temperature)?;
            let mut grad = Array2::<f64>::zeros(emb.dim());
            for (j, v) in dq.iter().enumerate() {
                grad[(0, j)] = *v;
            }
            for i in 0..cand.nrows() {
                for j in 0..cand.ncols() {
                    grad[(i + 1, j)] = dc[(i, j)];
                }
            }
            net.backward(&grad);

            // episode accuracy from the same forward pass
            let predicted = classify_rows(&q_emb, &cand, &support_classes);
            correct += usize::from(predicted == q_class);
        }
        opt.step(&mut net.params_mut());

        let accuracy = correct as f64 / queries.len() as f64;
        log.episode_accuracies.push(accuracy);
        if accuracy > cfg.accuracy_threshold {
            log.stopped_early = true;
            break;
        }
    }
    Ok(log)
}

/// Per-class mean similarity argmax over candidate rows.
fn classify_rows(q_emb: &[f64], candidates: &Array2<f64>, classes: &[usize]) -> usize {
    let class_count = classes.iter().max().map(|&c| c + 1).unwrap_or(0);
    let mut sums = vec![0.0f64; class_count];
    let mut counts = vec![0usize; class_count];
    for (i, &c) in classes.iter().enumerate() {
        let sim: f64 = q_emb
            .iter()
            .zip(candidates.row(i).iter())
            .map(|(a, b)| a * b)
            .sum();
        sums[c] += sim;
        counts[c] += 1;
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..class_count {
        let v = sums[c] / counts[c].max(1) as f64;
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub lr: f64,
    /// Overrides the shot-dependent epoch schedule when set.
    pub epochs_override: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-4,
            epochs_override: None,
        }
    }
}

/// Epoch schedule by shot count: 45 for two shots, 25 for three, 15 beyond.
pub fn finetune_epochs(shots: usize) -> usize {
    match shots {
        0 | 1 => 0,
        2 => 45,
        3 => 25,
        _ => 15,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub epochs: usize,
    pub iterations: usize,
    pub epoch_losses: Vec<f64>,
    pub skipped_one_shot: bool,
}

/// Fine-tunes on the real support features: every epoch runs all generated
/// pair batches once with one Adam step per batch. One-shot support skips
/// fine-tuning entirely (the pretrained net classifies directly).
pub fn finetune(
    net: &mut EmbeddingNet,
    features: &[(Array3<f32>, usize)],
    shots: usize,
    cfg: &FinetuneConfig,
) -> Result<FinetuneLog> {
    if shots == 1 {
        return Ok(FinetuneLog {
            epochs: 0,
            iterations: 0,
            epoch_losses: Vec::new(),
            skipped_one_shot: true,
        });
    }
    if features.is_empty() {
        return Err(Error::Argument("no features given".into()));
    }
    let classes = features.iter().map(|&(_, c)| c).max().unwrap() + 1;
    let batches = make_pairs(features, shots, classes)?;
    let epochs = cfg.epochs_override.unwrap_or_else(|| finetune_epochs(shots));

    let mut opt = Adam::new(cfg.lr);
    let mut log = FinetuneLog {
        epochs,
        iterations: 0,
        epoch_losses: Vec::with_capacity(epochs),
        skipped_one_shot: false,
    };

    for _ in 0..epochs {
        let mut epoch_loss = 0.0;
        for batch in &batches {
            net.zero_grad();
            let mut refs: Vec<&Array3<f32>> = vec![&features[batch.query_index].0];
            refs.extend(batch.support_indices.iter().map(|&i| &features[i].0));
            let input = to_f64_batch(&refs);
            let emb = net.forward_train(&input);
            let q_emb: Vec<f64> = emb.row(0).to_vec();
            let cand = emb.slice(ndarray::s![1.., ..]).to_owned();
            let (loss, dq, dc) = info_nce_with_grad(
                &q_emb,
                &cand,
                &batch.positive_positions,
                net.cfg.temperature,
            )?;
            let mut grad = Array2::<f64>::zeros(emb.dim());
            for (j, v) in dq.iter().enumerate() {
                grad[(0, j)] = *v;
            }
            for i in 0..cand.nrows() {
                for j in 0..cand.ncols() {
                    grad[(i + 1, j)] = dc[(i, j)];
                }
            }
            net.backward(&grad);
            opt.step(&mut net.params_mut());
            epoch_loss += loss;
            log.iterations += 1;
        }
        log.epoch_losses.push(epoch_loss / batches.len() as f64);
    }
    Ok(log)
}

/// Classifies a query by per-class mean cosine similarity between its
/// embedding and the support embeddings; ties go to the lowest class id.
pub fn classify(
    net: &EmbeddingNet,
    support: &[(Array3<f32>, usize)],
    query: &Array3<f32>,
) -> Result<usize> {
    if support.is_empty() {
        return Err(Error::Argument("support set is empty".into()));
    }
    let class_count = support.iter().map(|&(_, c)| c).max().unwrap() + 1;
    let mut counts = vec![0usize; class_count];
    for &(_, c) in support {
        counts[c] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Argument("support must cover every class".into()));
    }

    let q_emb = embed(net, query)?;
    let mut refs: Vec<&Array3<f32>> = Vec::with_capacity(support.len());
    for (s, _) in support {
        refs.push(s);
    }
    let emb = net.forward_eval(&to_f64_batch(&refs));
    let classes: Vec<usize> = support.iter().map(|&(_, c)| c).collect();
    Ok(classify_rows(&q_emb, &emb, &classes))
}

#[derive(Debug, Clone)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub episode_classes: usize,
    pub episode_shots: usize,
    pub accuracy_threshold: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            inner_lr: 1e-4,
            outer_lr: 1e-4,
            episode_classes: 10,
            episode_shots: 2,
            accuracy_threshold: 0.4,
            max_iterations: 2000,
            seed: 0,
        }
    }
}

/// First-order meta-training: each meta-iteration samples two disjoint
/// class batches, takes an inner Adam step on the first batch's episode
/// loss, then a second step on the second batch evaluated at the post-inner
/// parameters. No second-order gradients. Stop rule as in [`pretrain`].
pub fn maml_train(
    net: &mut EmbeddingNet,
    source: &dyn FeatureSource,
    cfg: &MamlConfig,
) -> Result<PretrainLog> {
    let by_class = group_by_class(source)?;
    if by_class.len() < 2 * cfg.episode_classes {
        return Err(Error::Argument(format!(
            "meta-training needs at least {} classes, got {}",
            2 * cfg.episode_classes,
            by_class.len()
        )));
    }
    let needed = cfg.episode_shots + 1;
    if by_class.iter().any(|items| items.len() < needed) {
        return Err(Error::Argument(format!(
            "every pseudo-class needs at least {needed} samples"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inner_opt = Adam::new(cfg.inner_lr);
    let mut outer_opt = Adam::new(cfg.outer_lr);
    let mut log = PretrainLog {
        episode_accuracies: Vec::new(),
        stopped_early: false,
    };

    for _ in 0..cfg.max_iterations {
        let both = sample_distinct(&mut rng, by_class.len(), 2 * cfg.episode_classes);
        let (batch_a, batch_b) = both.split_at(cfg.episode_classes);

        let run_episode = |net: &mut EmbeddingNet,
                               classes: &[usize],
                               rng: &mut ChaCha8Rng|
         -> Result<f64> {
            let mut supports = Vec::new();
            let mut support_classes = Vec::new();
            let mut queries = Vec::new();
            for (epi_class, &cls) in classes.iter().enumerate() {
                let items = &by_class[cls];
                let picked = sample_distinct(rng, items.len(), needed);
                for &pi in picked.iter().take(cfg.episode_shots) {
                    supports.push(items[pi]);
                    support_classes.push(epi_class);
                }
                queries.push((items[picked[cfg.episode_shots]], epi_class));
            }
            let support_tensors: Vec<Array3<f32>> = supports
                .iter()
                .map(|&s| source.tensor(s))
                .collect::<Result<_>>()?;
            net.zero_grad();
            let mut correct = 0usize;
            for &(q_idx, q_class) in &queries {
                let q_tensor = source.tensor(q_idx)?;
                let mut refs: Vec<&Array3<f32>> = vec![&q_tensor];
                refs.extend(support_tensors.iter());
                let input = to_f64_batch(&refs);
                let emb = net.forward_train(&input);
                let q_emb: Vec<f64> = emb.row(0).to_vec();
                let cand = emb.slice(ndarray::s![1.., ..]).to_owned();
                let positives: Vec<usize> = support_classes
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c == q_class)
                    .map(|(i, _)| i)
                    .collect();
                let (_, dq, dc) =
                    info_nce_with_grad(&q_emb, &cand, &positives, net.cfg.temperature)?;
                let mut grad = Array2::<f64>::zeros(emb.dim());
                for (j, v) in dq.iter().enumerate() {
                    grad[(0, j)] = *v;
                }
                for i in 0..cand.nrows() {
                    for j in 0..cand.ncols() {
                        grad[(i + 1, j)] = dc[(i, j)];
                    }
                }
                net.backward(&grad);
                correct += usize::from(classify_rows(&q_emb, &cand, &support_classes) == q_class);
            }
            Ok(correct as f64 / queries.len() as f64)
        };

        let _ = run_episode(net, batch_a, &mut rng)?;
        inner_opt.step(&mut net.params_mut());
        let accuracy_b = run_episode(net, batch_b, &mut rng)?;
        outer_opt.step(&mut net.params_mut());

        log.episode_accuracies.push(accuracy_b);
        if accuracy_b > cfg.accuracy_threshold {
            log.stopped_early = true;
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_feature(c: usize, h: usize, w: usize, offset: f32, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-0.1f32..0.1) + offset)
    }

    fn toy_net() -> EmbeddingNet {
        EmbeddingNet::new(EmbeddingConfig::toy(4, 3))
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let net = toy_net();
        for seed in 0..5 {
            let x = toy_feature(4, 16, 16, seed as f32, seed);
            let e = embed(&net, &x).unwrap();
            assert_eq!(e.len(), 16);
            let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        }
    }

    #[test]
    fn embed_is_deterministic() {
        let net = toy_net();
        let x = toy_feature(4, 16, 16, 0.3, 9);
        assert_eq!(embed(&net, &x).unwrap(), embed(&net, &x).unwrap());
    }

    #[test]
    fn embed_rejects_wrong_channels() {
        let net = toy_net();
        let x = toy_feature(5, 16, 16, 0.0, 1);
        assert!(matches!(embed(&net, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn info_nce_uniform_case_is_ln_k() {
        for k in [2usize, 3, 10] {
            // all candidates identical: every similarity equals the same value
            let q = vec![1.0, 0.0];
            let cand = Array2::from_shape_fn((k, 2), |(_, j)| if j == 0 { 0.6 } else { 0.8 });
            let loss = info_nce(&q, &cand, &[0], 1.0).unwrap();
            assert!(
                (loss - (k as f64).ln()).abs() < 1e-6,
                "K={k}: {loss} vs {}",
                (k as f64).ln()
            );
        }
    }

    #[test]
    fn info_nce_dominant_positive() {
        // similarities (10, 0, 0), tau 1, positive at 0:
        // loss = ln(1 + 2 e^-10)
        let q = vec![1.0];
        let cand = Array2::from_shape_vec((3, 1), vec![10.0, 0.0, 0.0]).unwrap();
        let loss = info_nce(&q, &cand, &[0], 1.0).unwrap();
        let want = (1.0f64 + 2.0 * (-10.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
        assert!((loss - 9.08e-5).abs() < 1e-6);
    }

    #[test]
    fn info_nce_rejects_bad_input() {
        let q = vec![1.0, 0.0];
        let cand = Array2::from_elem((3, 2), 0.5);
        assert!(info_nce(&q, &cand, &[], 1.0).is_err());
        assert!(info_nce(&q, &cand, &[5], 1.0).is_err());
        assert!(info_nce(&q, &cand, &[0], 0.0).is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(info_nce(&q, &empty, &[0], 1.0).is_err());
    }

    #[test]
    fn info_nce_loss_grads_match_finite_differences() {
        let q0 = vec![0.3, -0.5, 0.8];
        let cand0 = Array2::from_shape_vec(
            (4, 3),
            vec![0.2, 0.1, -0.3, 0.9, -0.2, 0.4, -0.6, 0.5, 0.1, 0.0, 0.7, -0.8],
        )
        .unwrap();
        let positives = [1usize, 3];
        let tau = 0.7;
        let (_, dq, dc) = info_nce_with_grad(&q0, &cand0, &positives, tau).unwrap();

        let h = 1e-6;
        for i in 0..q0.len() {
            let mut qp = q0.clone();
            qp[i] += h;
            let mut qm = q0.clone();
            qm[i] -= h;
            let num = (info_nce(&qp, &cand0, &positives, tau).unwrap()
                - info_nce(&qm, &cand0, &positives, tau).unwrap())
                / (2.0 * h);
            assert!((dq[i] - num).abs() < 1e-7, "dq[{i}]: {} vs {num}", dq[i]);
        }
        for r in 0..4 {
            for i in 0..3 {
                let mut cp = cand0.clone();
                cp[(r, i)] += h;
                let mut cm = cand0.clone();
                cm[(r, i)] -= h;
                let num = (info_nce(&q0, &cp, &positives, tau).unwrap()
                    - info_nce(&q0, &cm, &positives, tau).unwrap())
                    / (2.0 * h);
                assert!(
                    (dc[(r, i)] - num).abs() < 1e-7,
                    "dc[{r},{i}]: {} vs {num}",
                    dc[(r, i)]
                );
            }
        }
    }

    fn labeled<T: Clone>(item: T, class: usize, n: usize) -> Vec<(T, usize)> {
        (0..n).map(|_| (item.clone(), class)).collect()
    }

    #[test]
    fn make_pairs_c3_s2() {
        let mut features: Vec<((), usize)> = Vec::new();
        for c in 0..3 {
            features.extend(labeled((), c, 2));
        }
        let batches = make_pairs(&features, 2, 3).unwrap();
        assert_eq!(batches.len(), 6);
        for b in &batches {
            assert_eq!(b.support_indices.len(), 3);
            let mut class_counts = [0usize; 3];
            for &c in &b.support_classes {
                class_counts[c] += 1;
            }
            assert_eq!(class_counts, [1, 1, 1]);
            assert_eq!(b.positive_positions.len(), 1);
            assert!(!b.support_indices.contains(&b.query_index));
        }
    }

    #[test]
    fn make_pairs_c2_s3() {
        let mut features: Vec<((), usize)> = Vec::new();
        for c in 0..2 {
            features.extend(labeled((), c, 3));
        }
        let batches = make_pairs(&features, 3, 2).unwrap();
        assert_eq!(batches.len(), 6);
        for b in &batches {
            assert_eq!(b.support_indices.len(), 4);
            assert_eq!(b.positive_positions.len(), 2);
        }
    }

    #[test]
    fn make_pairs_rejects_single_shot() {
        let features: Vec<((), usize)> = vec![((), 0), ((), 1)];
        assert!(matches!(
            make_pairs(&features, 1, 2),
            Err(Error::DegenerateEpisode)
        ));
    }

    #[test]
    fn make_pairs_support_order_is_j_major() {
        // classes 0,1 with shots a0,a1 / b0,b1,b2? Use S=3, C=2 and check
        // the support pool ordering: (j=0: class0, class1), (j=1: ...)
        let features: Vec<(u32, usize)> = vec![
            (100, 0),
            (101, 0),
            (102, 0),
            (200, 1),
            (201, 1),
            (202, 1),
        ];
        let batches = make_pairs(&features, 3, 2).unwrap();
        // first query is feature 0 (class 0, first)
        let b = &batches[0];
        assert_eq!(b.query_index, 0);
        let vals: Vec<u32> = b.support_indices.iter().map(|&i| features[i].0).collect();
        assert_eq!(vals, vec![101, 200, 102, 201]);
    }

    #[test]
    fn pretrain_stops_when_accuracy_clears_threshold() {
        let mut features = Vec::new();
        for cls in 0..12usize {
            for i in 0..3 {
                features.push((
                    toy_feature(4, 16, 16, cls as f32 * 2.0, (cls * 31 + i) as u64),
                    cls,
                ));
            }
        }
        let mut net = toy_net();
        let log = pretrain(
            &mut net,
            &features,
            &ContrastivePretrainConfig {
                lr: 1e-3,
                max_iterations: 200,
                seed: 11,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!log.episode_accuracies.is_empty());
        if log.stopped_early {
            assert!(*log.episode_accuracies.last().unwrap() > 0.4);
        }
    }

    #[test]
    fn pretrain_same_seed_same_trajectory() {
        let mut features = Vec::new();
        for cls in 0..10usize {
            for i in 0..3 {
                features.push((
                    toy_feature(4, 16, 16, cls as f32, (cls * 7 + i) as u64),
                    cls,
                ));
            }
        }
        let cfg = ContrastivePretrainConfig {
            max_iterations: 5,
            accuracy_threshold: 2.0, // never stop early
            seed: 3,
            ..Default::default()
        };
        let mut n1 = toy_net();
        let mut n2 = toy_net();
        let l1 = pretrain(&mut n1, &features, &cfg).unwrap();
        let l2 = pretrain(&mut n2, &features, &cfg).unwrap();
        assert_eq!(l1.episode_accuracies, l2.episode_accuracies);
    }

    #[test]
    fn pretrain_rejects_too_few_classes() {
        let mut features = Vec::new();
        for cls in 0..4usize {
            for i in 0..3 {
                features.push((toy_feature(4, 16, 16, cls as f32, i as u64), cls));
            }
        }
        let mut net = toy_net();
        assert!(matches!(
            pretrain(&mut net, &features, &ContrastivePretrainConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn finetune_epoch_schedule() {
        assert_eq!(finetune_epochs(2), 45);
        assert_eq!(finetune_epochs(3), 25);
        assert_eq!(finetune_epochs(4), 15);
        assert_eq!(finetune_epochs(5), 15);
        assert_eq!(finetune_epochs(1), 0);
    }

    #[test]
    fn finetune_one_shot_is_identity() {
        let mut net = toy_net();
        let before = embed(&net, &toy_feature(4, 16, 16, 0.0, 1)).unwrap();
        let features = vec![
            (toy_feature(4, 16, 16, 0.0, 2), 0),
            (toy_feature(4, 16, 16, 1.0, 3), 1),
        ];
        let log = finetune(&mut net, &features, 1, &FinetuneConfig::default()).unwrap();
        assert!(log.skipped_one_shot);
        assert_eq!(log.iterations, 0);
        let after = embed(&net, &toy_feature(4, 16, 16, 0.0, 1)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn finetune_runs_schedule_and_improves_separable_toy() {
        let mut features = Vec::new();
        for i in 0..2 {
            features.push((toy_feature(4, 16, 16, 0.0, i), 0usize));
            features.push((toy_feature(4, 16, 16, 5.0, 100 + i), 1usize));
        }
        let mut net = toy_net();
        let log = finetune(
            &mut net,
            &features,
            2,
            &FinetuneConfig {
                lr: 1e-3,
                epochs_override: None,
            },
        )
        .unwrap();
        assert_eq!(log.epochs, 45);
        assert_eq!(log.iterations, 45 * 4); // C*S = 4 batches per epoch

        // queries from the same separable distribution classify correctly
        let support = features.clone();
        for i in 0..5 {
            let q0 = toy_feature(4, 16, 16, 0.0, 500 + i);
            let q1 = toy_feature(4, 16, 16, 5.0, 600 + i);
            assert_eq!(classify(&net, &support, &q0).unwrap(), 0);
            assert_eq!(classify(&net, &support, &q1).unwrap(), 1);
        }
    }

    #[test]
    fn classify_self_similarity_wins() {
        let net = toy_net();
        let item = toy_feature(4, 16, 16, 2.0, 42);
        let support = vec![
            (toy_feature(4, 16, 16, -2.0, 1), 0),
            (toy_feature(4, 16, 16, 0.0, 2), 1),
            (item.clone(), 2),
        ];
        assert_eq!(classify(&net, &support, &item).unwrap(), 2);
    }

    #[test]
    fn classify_matches_brute_force_mean_similarity() {
        let net = toy_net();
        let support = vec![
            (toy_feature(4, 16, 16, 0.0, 1), 0),
            (toy_feature(4, 16, 16, 0.5, 2), 0),
            (toy_feature(4, 16, 16, 3.0, 3), 1),
            (toy_feature(4, 16, 16, 3.5, 4), 1),
        ];
        let query = toy_feature(4, 16, 16, 0.2, 5);
        let got = classify(&net, &support, &query).unwrap();

        // oracle: embed everything independently, average cosine per class
        let qe = embed(&net, &query).unwrap();
        let mut best = (0usize, f64::NEG_INFINITY);
        for class in 0..2 {
            let mut acc = 0.0;
            let mut count = 0;
            for (s, c) in &support {
                if *c == class {
                    let se = embed(&net, s).unwrap();
                    acc += qe.iter().zip(se.iter()).map(|(a, b)| a * b).sum::<f64>();
                    count += 1;
                }
            }
            let mean = acc / count as f64;
            if mean > best.1 {
                best = (class, mean);
            }
        }
        assert_eq!(got, best.0);
    }

    #[test]
    fn maml_requires_disjoint_batches_worth_of_classes() {
        let mut features = Vec::new();
        for cls in 0..12usize {
            for i in 0..3 {
                features.push((toy_feature(4, 16, 16, cls as f32, i as u64), cls));
            }
        }
        let mut net = toy_net();
        assert!(matches!(
            maml_train(&mut net, &features, &MamlConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn maml_runs_and_changes_parameters() {
        let mut features = Vec::new();
        for cls in 0..20usize {
            for i in 0..3 {
                features.push((
                    toy_feature(4, 16, 16, cls as f32 * 1.5, (cls * 13 + i) as u64),
                    cls,
                ));
            }
        }
        let mut net = toy_net();
        let probe = toy_feature(4, 16, 16, 1.0, 999);
        let before = embed(&net, &probe).unwrap();
        let log = maml_train(
            &mut net,
            &features,
            &MamlConfig {
                max_iterations: 3,
                accuracy_threshold: 2.0,
                seed: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(log.episode_accuracies.len(), 3);
        let after = embed(&net, &probe).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.anoc");
        let net = toy_net();
        net.save(&path).unwrap();
        let loaded = EmbeddingNet::load(&path).unwrap();
        let x = toy_feature(4, 16, 16, 0.7, 12);
        let a = embed(&net, &x).unwrap();
        let b = embed(&loaded, &x).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-5);
        }
    }
}
