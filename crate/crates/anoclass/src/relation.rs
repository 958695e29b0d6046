//! Vanilla few-shot baseline: a convolutional scorer over stacked
//! (support, query) feature pairs, trained with class-weighted binary
//! cross-entropy. The positive term carries weight `C - 1` to offset the
//! one-positive-vs-many-negatives imbalance of episodic pair scoring.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::io::TensorArchive;
use crate::nn::{sigmoid, Adam, ConvBlock, GlobalAvgPool, Linear, Param};

pub const SCORE_EPS: f64 = 1e-7;

/// Architecture of the relation scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    /// Channels of one stacked input: twice the feature dim.
    pub in_channels: usize,
    /// Conv block widths, ending at the pooled descriptor size.
    pub block_channels: Vec<usize>,
    /// Hidden width of the scoring MLP.
    pub hidden: usize,
    pub param_seed: u64,
}

impl RelationConfig {
    pub fn new(feature_channels: usize, param_seed: u64) -> Self {
        RelationConfig {
            in_channels: 2 * feature_channels,
            block_channels: vec![128, 64],
            hidden: 8,
            param_seed,
        }
    }

    /// Narrow configuration for demos and tests.
    pub fn toy(feature_channels: usize, param_seed: u64) -> Self {
        RelationConfig {
            in_channels: 2 * feature_channels,
            block_channels: vec![8, 8],
            hidden: 8,
            param_seed,
        }
    }
}

/// Convolutional relation scorer: conv blocks, global average pooling, a
/// small MLP, sigmoid. Output is a same-class score strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct RelationHead {
    pub cfg: RelationConfig,
    blocks: Vec<ConvBlock>,
    gap: GlobalAvgPool,
    fc1: Linear,
    fc2: Linear,
    relu_mask: Option<Array2<f64>>,
    sigmoid_out: Option<Vec<f64>>,
}

impl RelationHead {
    pub fn new(cfg: RelationConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.param_seed);
        let mut blocks = Vec::new();
        let mut in_ch = cfg.in_channels;
        for &out_ch in &cfg.block_channels {
            blocks.push(ConvBlock::new(in_ch, out_ch, &mut rng));
            in_ch = out_ch;
        }
        let fc1 = Linear::new(in_ch, cfg.hidden, &mut rng);
        let fc2 = Linear::new(cfg.hidden, 1, &mut rng);
        RelationHead {
            cfg,
            blocks,
            gap: GlobalAvgPool::new(),
            fc1,
            fc2,
            relu_mask: None,
            sigmoid_out: None,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut clone = self.clone();
        for p in clone.params_mut() {
            n += p.len();
        }
        n
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Training forward over a batch of stacked pairs; returns one score per
    /// batch row.
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Vec<f64> {
        let mut t = x.clone();
        for b in &mut self.blocks {
            t = b.forward_train(&t);
        }
        let pooled = self.gap.forward_train(&t);
        let h = self.fc1.forward_train(&pooled);
        let mask = h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mut hr = h;
        hr.zip_mut_with(&mask, |v, &m| *v *= m);
        self.relu_mask = Some(mask);
        let z = self.fc2.forward_train(&hr);
        let scores: Vec<f64> = z.column(0).iter().map(|&v| sigmoid(v)).collect();
        self.sigmoid_out = Some(scores.clone());
        scores
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Vec<f64> {
        let mut t = x.clone();
        for b in &self.blocks {
            t = b.forward_eval(&t);
        }
        let pooled = self.gap.forward_eval(&t);
        let mut h = self.fc1.forward_eval(&pooled);
        h.mapv_inplace(|v| v.max(0.0));
        let z = self.fc2.forward_eval(&h);
        z.column(0).iter().map(|&v| sigmoid(v)).collect()
    }

    /// Backward from d(loss)/d(score). Gradients accumulate into the params.
    pub fn backward(&mut self, dscores: &[f64]) {
        let scores = self.sigmoid_out.take().expect("forward_train not called");
        let n = scores.len();
        let mut dz = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            dz[(i, 0)] = dscores[i] * scores[i] * (1.0 - scores[i]);
        }
        let mut g = self.fc2.backward(&dz);
        let mask = self.relu_mask.take().expect("forward_train not called");
        g.zip_mut_with(&mask, |v, &m| *v *= m);
        let g = self.fc1.backward(&g);
        let mut g4 = self.gap.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g4 = b.backward(&g4);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let descriptor = serde_json::json!({
            "kind": "relation",
            "config": self.cfg,
        });
        let mut archive = TensorArchive::new(descriptor);
        let mut in_ch = self.cfg.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            let out_ch = self.cfg.block_channels[i];
            push_conv_block(&mut archive, &format!("block{i}"), b, in_ch, out_ch);
            in_ch = out_ch;
        }
        push_linear(&mut archive, "fc1", &self.fc1);
        push_linear(&mut archive, "fc2", &self.fc2);
        archive.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = TensorArchive::read(path)?;
        if archive.descriptor["kind"] != "relation" {
            return Err(Error::format(path, "checkpoint is not a relation head"));
        }
        let cfg: RelationConfig = serde_json::from_value(archive.descriptor["config"].clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut head = RelationHead::new(cfg);
        for (i, b) in head.blocks.iter_mut().enumerate() {
            load_conv_block(&archive, &format!("block{i}"), b, path)?;
        }
        load_linear(&archive, "fc1", &mut head.fc1, path)?;
        load_linear(&archive, "fc2", &mut head.fc2, path)?;
        Ok(head)
    }
}

pub(crate) fn push_conv_block(
    archive: &mut TensorArchive,
    prefix: &str,
    b: &ConvBlock,
    in_ch: usize,
    out_ch: usize,
) {
    let f32v = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    archive.insert(
        format!("{prefix}.conv.weight"),
        vec![out_ch, in_ch, 3, 3],
        f32v(&b.conv.weight.data),
    );
    archive.insert(format!("{prefix}.conv.bias"), vec![out_ch], f32v(&b.conv.bias.data));
    archive.insert(format!("{prefix}.bn.weight"), vec![out_ch], f32v(&b.bn.gamma.data));
    archive.insert(format!("{prefix}.bn.bias"), vec![out_ch], f32v(&b.bn.beta.data));
    archive.insert(
        format!("{prefix}.bn.running_mean"),
        vec![out_ch],
        f32v(&b.bn.running_mean),
    );
    archive.insert(
        format!("{prefix}.bn.running_var"),
        vec![out_ch],
        f32v(&b.bn.running_var),
    );
}

pub(crate) fn push_linear(archive: &mut TensorArchive, prefix: &str, l: &Linear) {
    let f32v = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    archive.insert(
        format!("{prefix}.weight"),
        vec![l.out_dim, l.in_dim],
        f32v(&l.weight.data),
    );
    archive.insert(format!("{prefix}.bias"), vec![l.out_dim], f32v(&l.bias.data));
}

pub(crate) fn load_conv_block(
    archive: &TensorArchive,
    prefix: &str,
    b: &mut ConvBlock,
    path: &Path,
) -> Result<()> {
    let get = |name: String| -> Result<Vec<f64>> {
        archive
            .get(&name)
            .map(|t| t.data.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    b.conv.weight.data = get(format!("{prefix}.conv.weight"))?;
    b.conv.bias.data = get(format!("{prefix}.conv.bias"))?;
    b.bn.gamma.data = get(format!("{prefix}.bn.weight"))?;
    b.bn.beta.data = get(format!("{prefix}.bn.bias"))?;
    b.bn.running_mean = get(format!("{prefix}.bn.running_mean"))?;
    b.bn.running_var = get(format!("{prefix}.bn.running_var"))?;
    Ok(())
}

pub(crate) fn load_linear(
    archive: &TensorArchive,
    prefix: &str,
    l: &mut Linear,
    path: &Path,
) -> Result<()> {
    let get = |name: String| -> Result<Vec<f64>> {
        archive
            .get(&name)
            .map(|t| t.data.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    l.weight.data = get(format!("{prefix}.weight"))?;
    l.bias.data = get(format!("{prefix}.bias"))?;
    Ok(())
}

/// Stacks a support tensor over a query tensor along the channel axis
/// (support first), ready for the relation head.
pub fn stack_pair(support: &Array3<f32>, query: &Array3<f32>) -> Result<Array3<f64>> {
    if support.dim() != query.dim() {
        return Err(Error::Shape(format!(
            "support {:?} vs query {:?}",
            support.dim(),
            query.dim()
        )));
    }
    let (c, h, w) = support.dim();
    let mut out = Array3::<f64>::zeros((2 * c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch, y, x)] = support[(ch, y, x)] as f64;
                out[(c + ch, y, x)] = query[(ch, y, x)] as f64;
            }
        }
    }
    Ok(out)
}

fn batch_of(pairs: Vec<Array3<f64>>) -> Array4<f64> {
    let (c, h, w) = pairs[0].dim();
    let mut out = Array4::<f64>::zeros((pairs.len(), c, h, w));
    for (i, p) in pairs.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&p);
    }
    out
}

/// Relation score for one (support, query) pair, eval mode.
pub fn relation_forward(
    head: &RelationHead,
    support: &Array3<f32>,
    query: &Array3<f32>,
) -> Result<f64> {
    let stacked = stack_pair(support, query)?;
    let (c, _, _) = stacked.dim();
    if c != head.cfg.in_channels {
        return Err(Error::Shape(format!(
            "stacked input has {c} channels, head expects {}",
            head.cfg.in_channels
        )));
    }
    let batch = batch_of(vec![stacked]);
    Ok(head.forward_eval(&batch)[0])
}

/// Class-weighted binary cross-entropy: the positive term carries weight
/// `C - 1`. Scores exactly 0 or 1 are clamped to [eps, 1-eps].
pub fn weighted_bce(scores: &[f64], labels: &[u8], class_count: usize) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Argument("scores and labels must align".into()));
    }
    if class_count < 2 {
        return Err(Error::Argument("class count must be at least 2".into()));
    }
    let w = (class_count - 1) as f64;
    let n = scores.len() as f64;
    let mut acc = 0.0;
    for (&s, &y) in scores.iter().zip(labels.iter()) {
        let s = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        acc += if y == 1 {
            w * s.ln()
        } else {
            (1.0 - s).ln()
        };
    }
    Ok(-acc / n)
}

/// d(weighted_bce)/d(score) per element.
pub fn weighted_bce_grad(scores: &[f64], labels: &[u8], class_count: usize) -> Vec<f64> {
    let w = (class_count - 1) as f64;
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(labels.iter())
        .map(|(&s, &y)| {
            let s = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
            if y == 1 {
                -w / s / n
            } else {
                1.0 / (1.0 - s) / n
            }
        })
        .collect()
}

/// One record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub loss: f64,
    pub correct: bool,
}

/// Training log of the vanilla baseline.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterationRecord>,
    pub epoch_accuracies: Vec<f64>,
    pub pairs_per_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct VanillaTrainConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for VanillaTrainConfig {
    fn default() -> Self {
        VanillaTrainConfig {
            lr: 1e-4,
            epochs: 45,
        }
    }
}

fn validate_classes(features: &[(Array3<f32>, usize)]) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::Argument("no features given".into()));
    }
    let class_count = features.iter().map(|&(_, c)| c).max().unwrap() + 1;
    let mut counts = vec![0usize; class_count];
    for &(_, c) in features {
        counts[c] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Argument("class ids must be dense 0..C".into()));
    }
    Ok(class_count)
}

/// Sorts feature indices by (class, appearance order within class).
fn sorted_by_class(features: &[(Array3<f32>, usize)], class_count: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(features.len());
    for class in 0..class_count {
        for (i, &(_, c)) in features.iter().enumerate() {
            if c == class {
                order.push(i);
            }
        }
    }
    order
}

/// Fine-tunes the head on real support features: the support set is the
/// first feature of each class (fixed across epochs), every remaining
/// feature serves as query, and each query's C pair scores take one
/// weighted-BCE Adam step at lr 1e-4.
pub fn train_vanilla(
    head: &mut RelationHead,
    features: &[(Array3<f32>, usize)],
    cfg: &VanillaTrainConfig,
) -> Result<TrainLog> {
    let class_count = validate_classes(features)?;
    let mut counts = vec![0usize; class_count];
    for &(_, c) in features {
        counts[c] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c < 2) {
        return Err(Error::Protocol(format!(
            "class {class} has fewer than 2 samples; no query available"
        )));
    }

    let order = sorted_by_class(features, class_count);
    let mut support_idx = Vec::with_capacity(class_count);
    let mut query_idx = Vec::new();
    let mut seen = vec![false; class_count];
    for &i in &order {
        let class = features[i].1;
        if !seen[class] {
            seen[class] = true;
            support_idx.push(i);
        } else {
            query_idx.push(i);
        }
    }

    let mut opt = Adam::new(cfg.lr);
    let mut log = TrainLog {
        pairs_per_epoch: class_count * query_idx.len(),
        ..Default::default()
    };

    for epoch in 0..cfg.epochs {
        let mut correct = 0usize;
        for &q in &query_idx {
            let query_class = features[q].1;
            let pairs: Vec<Array3<f64>> = support_idx
                .iter()
                .map(|&s| stack_pair(&features[s].0, &features[q].0))
                .collect::<Result<_>>()?;
            let batch = batch_of(pairs);
            let labels: Vec<u8> = support_idx
                .iter()
                .map(|&s| u8::from(features[s].1 == query_class))
                .collect();

            head.zero_grad();
            let scores = head.forward_train(&batch);
            let loss = weighted_bce(&scores, &labels, class_count)?;
            let dscores = weighted_bce_grad(&scores, &labels, class_count);
            head.backward(&dscores);
            opt.step(&mut head.params_mut());

            let predicted = argmax_lowest(&scores);
            let is_correct = features[support_idx[predicted]].1 == query_class;
            correct += usize::from(is_correct);
            log.iterations.push(IterationRecord {
                epoch,
                loss,
                correct: is_correct,
            });
        }
        log.epoch_accuracies
            .push(correct as f64 / query_idx.len() as f64);
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub lr: f64,
    pub episode_classes: usize,
    pub accuracy_threshold: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-4,
            episode_classes: 10,
            accuracy_threshold: 0.4,
            max_iterations: 2000,
            seed: 0,
        }
    }
}

/// Draws `k` distinct indices from `0..n` by a seeded partial shuffle.
pub(crate) fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Outcome of a pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLog {
    pub episode_accuracies: Vec<f64>,
    pub stopped_early: bool,
}

/// Pseudo-class pretraining: every episode samples `episode_classes`
/// classes, one support and one query per class, takes one accumulated
/// weighted-BCE Adam step, and stops once episode accuracy exceeds the
/// threshold (or at the iteration guard).
pub fn pretrain_vanilla(
    head: &mut RelationHead,
    source: &dyn FeatureSource,
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    let by_class = group_by_class(source)?;
    if by_class.len() < cfg.episode_classes {
        return Err(Error::Argument(format!(
            "pretraining needs at least {} classes, got {}",
            cfg.episode_classes,
            by_class.len()
        )));
    }
    if by_class.iter().any(|items| items.len() < 2) {
        return Err(Error::Argument(
            "every pseudo-class needs at least 2 samples".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut log = PretrainLog {
        episode_accuracies: Vec::new(),
        stopped_early: false,
    };

    for _ in 0..cfg.max_iterations {
        let class_pick = sample_distinct(&mut rng, by_class.len(), cfg.episode_classes);
        let mut supports = Vec::with_capacity(cfg.episode_classes);
        let mut queries = Vec::with_capacity(cfg.episode_classes);
        for &cls in &class_pick {
            let items = &by_class[cls];
            let picked = sample_distinct(&mut rng, items.len(), 2);
            supports.push(items[picked[0]]);
            queries.push(items[picked[1]]);
        }
        let support_tensors: Vec<Array3<f32>> = supports
            .iter()
            .map(|&s| source.tensor(s))
            .collect::<Result<_>>()?;

        head.zero_grad();
        let mut correct = 0usize;
        for (qi, &q) in queries.iter().enumerate() {
            let q_tensor = source.tensor(q)?;
            let pairs: Vec<Array3<f64>> = support_tensors
                .iter()
                .map(|s| stack_pair(s, &q_tensor))
                .collect::<Result<_>>()?;
            let batch = batch_of(pairs);
            let labels: Vec<u8> = (0..cfg.episode_classes)
                .map(|si| u8::from(si == qi))
                .collect();
            let scores = head.forward_train(&batch);
            let dscores = weighted_bce_grad(&scores, &labels, cfg.episode_classes);
            head.backward(&dscores);
            correct += usize::from(argmax_lowest(&scores) == qi);
        }
        opt.step(&mut head.params_mut());

        let accuracy = correct as f64 / cfg.episode_classes as f64;
        log.episode_accuracies.push(accuracy);
        if accuracy > cfg.accuracy_threshold {
            log.stopped_early = true;
            break;
        }
    }
    Ok(log)
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

pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Classifies a query by the per-class mean relation score over the support
/// set; ties go to the lowest class id.
pub fn classify_vanilla(
    head: &RelationHead,
    support: &[(Array3<f32>, usize)],
    query: &Array3<f32>,
) -> Result<usize> {
    if support.is_empty() {
        return Err(Error::Argument("support set is empty".into()));
    }
    let class_count = support.iter().map(|&(_, c)| c).max().unwrap() + 1;
    let mut sums = vec![0.0f64; class_count];
    let mut counts = vec![0usize; class_count];
    for (s, c) in support {
        sums[*c] += relation_forward(head, s, query)?;
        counts[*c] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Argument("support must cover every class".into()));
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| s / c as f64)
        .collect();
    Ok(argmax_lowest(&means))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_feature(c: usize, h: usize, w: usize, offset: f32, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-0.1f32..0.1) + offset)
    }

    fn toy_head() -> RelationHead {
        RelationHead::new(RelationConfig::toy(4, 7))
    }

    #[test]
    fn scores_stay_in_open_unit_interval() {
        let head = toy_head();
        for seed in 0..5 {
            let s = toy_feature(4, 8, 8, 0.0, seed);
            let q = toy_feature(4, 8, 8, 1.0, seed + 100);
            let score = relation_forward(&head, &s, &q).unwrap();
            assert!(score > 0.0 && score < 1.0, "score {score}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let head = toy_head();
        let s = toy_feature(4, 8, 8, 0.0, 1);
        let q = toy_feature(4, 8, 8, 0.5, 2);
        let a = relation_forward(&head, &s, &q).unwrap();
        let b = relation_forward(&head, &s, &q).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stacked_shape_is_double_channels() {
        let s = toy_feature(1024, 28, 28, 0.0, 1);
        let q = toy_feature(1024, 28, 28, 0.0, 2);
        let stacked = stack_pair(&s, &q).unwrap();
        assert_eq!(stacked.dim(), (2048, 28, 28));
        // support occupies the first half of the channels
        assert_eq!(stacked[(0, 3, 4)], s[(0, 3, 4)] as f64);
        assert_eq!(stacked[(1024, 3, 4)], q[(0, 3, 4)] as f64);
    }

    #[test]
    fn stack_rejects_mismatched_dims() {
        let s = toy_feature(4, 8, 8, 0.0, 1);
        let q = toy_feature(4, 4, 4, 0.0, 2);
        assert!(matches!(stack_pair(&s, &q), Err(Error::Shape(_))));
    }

    #[test]
    fn weighted_bce_hand_values() {
        // C=5, one positive at 0.5: loss = 4 ln 2
        let l = weighted_bce(&[0.5], &[1], 5).unwrap();
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12, "{l}");

        // C=2: -(ln 0.8 + ln 0.7) / 2
        let l = weighted_bce(&[0.8, 0.3], &[1, 0], 2).unwrap();
        let want = -0.5 * (0.8f64.ln() + 0.7f64.ln());
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        assert!((l - 0.2899).abs() < 1e-4);
    }

    #[test]
    fn weighted_bce_perfect_predictions_vanish() {
        let l = weighted_bce(&[1.0 - 1e-9, 1e-9], &[1, 0], 3).unwrap();
        assert!(l >= 0.0 && l < 1e-6, "{l}");
    }

    #[test]
    fn weighted_bce_clamps_extremes() {
        let l = weighted_bce(&[1.0, 0.0], &[1, 0], 2).unwrap();
        assert!(l.is_finite());
        assert!(l >= 0.0);
    }

    #[test]
    fn weighted_bce_weight_is_class_count_minus_one() {
        // symmetric errors: positive at s, negative at 1-s. The positive term
        // must carry exactly (C-1) times the negative coefficient.
        let s = 0.3f64;
        for c in 2..=8 {
            let pos_only = weighted_bce(&[s], &[1], c).unwrap();
            let neg_only = weighted_bce(&[1.0 - s], &[0], c).unwrap();
            let ratio = pos_only / neg_only;
            assert!(
                (ratio - (c as f64 - 1.0)).abs() < 1e-9,
                "C={c}: ratio {ratio}"
            );
        }
    }

    #[test]
    fn bce_grad_matches_finite_differences() {
        let scores = [0.3, 0.7, 0.5, 0.9];
        let labels = [1u8, 0, 1, 0];
        let g = weighted_bce_grad(&scores, &labels, 4);
        let h = 1e-7;
        for i in 0..scores.len() {
            let mut sp = scores;
            sp[i] += h;
            let mut sm = scores;
            sm[i] -= h;
            let num = (weighted_bce(&sp, &labels, 4).unwrap()
                - weighted_bce(&sm, &labels, 4).unwrap())
                / (2.0 * h);
            assert!((g[i] - num).abs() < 1e-5, "{} vs {num}", g[i]);
        }
    }

    fn separable_features(per_class: usize) -> Vec<(Array3<f32>, usize)> {
        let mut out = Vec::new();
        for i in 0..per_class {
            out.push((toy_feature(4, 8, 8, 0.0, i as u64), 0));
            out.push((toy_feature(4, 8, 8, 4.0, 1000 + i as u64), 1));
            out.push((toy_feature(4, 8, 8, -4.0, 2000 + i as u64), 2));
        }
        out
    }

    #[test]
    fn algorithm_accounting_pairs_per_epoch() {
        // C=3, S=2: support 3 fixed items, 3 queries, 9 scored pairs per pass.
        let features = separable_features(2);
        let mut head = toy_head();
        let log = train_vanilla(
            &mut head,
            &features,
            &VanillaTrainConfig {
                lr: 1e-3,
                epochs: 2,
            },
        )
        .unwrap();
        assert_eq!(log.pairs_per_epoch, 9);
        assert_eq!(log.iterations.len(), 2 * 3); // one step per query per epoch
    }

    #[test]
    fn training_runs_configured_epochs() {
        let features = separable_features(2);
        let mut head = toy_head();
        let log = train_vanilla(
            &mut head,
            &features,
            &VanillaTrainConfig {
                lr: 1e-3,
                epochs: 45,
            },
        )
        .unwrap();
        assert_eq!(log.epoch_accuracies.len(), 45);
    }

    #[test]
    fn training_rejects_singleton_class() {
        let mut features = separable_features(2);
        features.push((toy_feature(4, 8, 8, 9.0, 77), 3));
        let mut head = toy_head();
        assert!(matches!(
            train_vanilla(&mut head, &features, &VanillaTrainConfig::default()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let features = separable_features(2);
        let mut h1 = toy_head();
        let mut h2 = toy_head();
        let cfg = VanillaTrainConfig {
            lr: 1e-3,
            epochs: 3,
        };
        let l1 = train_vanilla(&mut h1, &features, &cfg).unwrap();
        let l2 = train_vanilla(&mut h2, &features, &cfg).unwrap();
        let losses1: Vec<f64> = l1.iterations.iter().map(|r| r.loss).collect();
        let losses2: Vec<f64> = l2.iterations.iter().map(|r| r.loss).collect();
        assert_eq!(losses1, losses2);
    }

    #[test]
    fn classify_argmax_and_ties() {
        let head = toy_head();
        let support = vec![
            (toy_feature(4, 8, 8, 0.0, 1), 0),
            (toy_feature(4, 8, 8, 4.0, 2), 1),
        ];
        let q = toy_feature(4, 8, 8, 0.0, 3);
        let got = classify_vanilla(&head, &support, &q).unwrap();
        assert!(got < 2);

        // duplicate supports: identical mean scores per class, tie -> class 0
        let s = toy_feature(4, 8, 8, 1.0, 9);
        let support = vec![(s.clone(), 0), (s, 1)];
        assert_eq!(classify_vanilla(&head, &support, &q).unwrap(), 0);
    }

    #[test]
    fn classify_mean_over_shots() {
        // verify the mean rule itself on raw score vectors
        let means = [0.7, 0.6];
        assert_eq!(argmax_lowest(&means), 0);
        let means = [0.1, 0.9, 0.2];
        assert_eq!(argmax_lowest(&means), 1);
    }

    #[test]
    fn pretrain_stops_on_threshold() {
        // 12 separable pseudo-classes with clearly distinct offsets
        let mut features = Vec::new();
        for cls in 0..12usize {
            for i in 0..3 {
                features.push((
                    toy_feature(4, 8, 8, cls as f32 * 3.0, (cls * 10 + i) as u64),
                    cls,
                ));
            }
        }
        let mut head = toy_head();
        let log = pretrain_vanilla(
            &mut head,
            &features,
            &PretrainConfig {
                lr: 1e-3,
                max_iterations: 300,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let last = *log.episode_accuracies.last().unwrap();
        assert!(
            log.stopped_early || log.episode_accuracies.len() == 300,
            "either stops early or hits the guard"
        );
        if log.stopped_early {
            assert!(last > 0.4);
            // every earlier episode stayed at or below the threshold
            for &a in &log.episode_accuracies[..log.episode_accuracies.len() - 1] {
                assert!(a <= 0.4);
            }
        }
    }

    #[test]
    fn pretrain_needs_enough_classes() {
        let features = separable_features(3);
        let mut head = toy_head();
        assert!(matches!(
            pretrain_vanilla(&mut head, &features, &PretrainConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("relation.anoc");
        let mut head = toy_head();
        // train briefly so parameters move off their seeds
        let features = separable_features(2);
        train_vanilla(
            &mut head,
            &features,
            &VanillaTrainConfig {
                lr: 1e-3,
                epochs: 2,
            },
        )
        .unwrap();
        head.save(&path).unwrap();
        let loaded = RelationHead::load(&path).unwrap();

        let s = toy_feature(4, 8, 8, 0.5, 3);
        let q = toy_feature(4, 8, 8, 0.5, 4);
        let a = relation_forward(&head, &s, &q).unwrap();
        let b = relation_forward(&loaded, &s, &q).unwrap();
        // parameters round-trip through f32
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}
