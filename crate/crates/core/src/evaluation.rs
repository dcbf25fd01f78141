//! Zero-shot classification, dense zero-shot segmentation, retrieval,
//! linear probing and similarity heatmaps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Pattern, Sample, ShapeKind, Tokenizer, SEGMENTATION_CLASSES};
use crate::encoders::Inference;
use crate::error::{Error, Result};
use crate::tensor::{dot, normalized, Tensor};

/// Desk stand-ins for the prompt ensemble; every entry has one `{label}`.
pub const DEFAULT_TEMPLATES: [&str; 7] = [
    "a photo of a {label}",
    "a picture of a {label}",
    "an image of a {label}",
    "a {label}",
    "there is a {label}",
    "a photo of the {label}",
    "an image with a {label}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()).expect("valid defaults")
    }
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("prompt set is empty".into()));
        }
        for t in &templates {
            if t.matches("{label}").count() != 1 {
                return Err(Error::Config(format!("template {t:?} must contain {{label}} exactly once")));
            }
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn fill(&self, label: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replace("{label}", label)).collect()
    }
}

/// One class and the prompt strings that describe it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrompts {
    pub name: String,
    pub prompts: Vec<String>,
}

/// Shape classes prompted through `prompts`.
pub fn shape_classes(prompts: &PromptSet) -> Vec<ClassPrompts> {
    ShapeKind::ALL
        .iter()
        .map(|s| ClassPrompts {
            name: s.word().into(),
            prompts: prompts.fill(s.word()),
        })
        .collect()
}

/// The segmentation label set: background (described by its patterns)
/// followed by the four shapes, matching the corpus class ids.
pub fn segmentation_classes(prompts: &PromptSet) -> Vec<ClassPrompts> {
    let background = ClassPrompts {
        name: SEGMENTATION_CLASSES[0].into(),
        prompts: Pattern::ALL
            .iter()
            .map(|p| format!("a {} background", p.word()))
            .collect(),
    };
    std::iter::once(background).chain(shape_classes(prompts)).collect()
}

/// Class names with unit-norm text embeddings `[C, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingBank {
    pub names: Vec<String>,
    pub embeddings: Tensor,
}

impl LabelEmbeddingBank {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.embeddings.row(c)
    }
}

/// Embeds every prompt, averages per class and renormalizes.
pub fn build_label_embeddings(model: &Inference<'_>, classes: &[ClassPrompts]) -> Result<LabelEmbeddingBank> {
    if classes.is_empty() {
        return Err(Error::Config("no classes to embed".into()));
    }
    let tok = Tokenizer::new(model.cfg.text.context_length)?;
    let mut rows = Vec::with_capacity(classes.len());
    for c in classes {
        if c.prompts.is_empty() {
            return Err(Error::Config(format!("class {} has no prompts", c.name)));
        }
        let seqs: Vec<_> = c.prompts.iter().map(|p| tok.tokenize(p)).collect();
        let refs: Vec<_> = seqs.iter().collect();
        let e = model.text_embeddings(&refs)?;
        let d = e.last_dim();
        let mut mean = vec![0.0; d];
        for r in e.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        rows.push(normalized(&mean));
    }
    Ok(LabelEmbeddingBank {
        names: classes.iter().map(|c| c.name.clone()).collect(),
        embeddings: Tensor::from_rows(&rows)?,
    })
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Cosine scores of one unit embedding against every bank row.
pub fn bank_scores(e: &[f64], bank: &LabelEmbeddingBank) -> Vec<f64> {
    bank.embeddings.rows().map(|r| dot(e, r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub count: usize,
}

/// Nearest-label classification of unit image embeddings `[B, D]`.
pub fn zero_shot_classify(
    image_embeddings: &Tensor,
    bank: &LabelEmbeddingBank,
    labels: &[usize],
) -> Result<ClassificationReport> {
    let predictions: Vec<usize> = image_embeddings
        .rows()
        .map(|e| argmax(&bank_scores(e, bank)))
        .collect();
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(ClassificationReport {
        accuracy: accuracy(&predictions, labels),
        count: labels.len(),
        predictions,
    })
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// Per-image predicted class per patch.
    pub predictions: Vec<Vec<usize>>,
    /// IoU per class; `None` where the class appears in neither prediction
    /// nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU.
    pub miou: f64,
}

/// Assigns each patch its nearest label from unit patch embeddings
/// `[B, N, D]`.
pub fn dense_predict(patch_embeddings: &Tensor, bank: &LabelEmbeddingBank) -> Vec<Vec<usize>> {
    let s = patch_embeddings.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    (0..b)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let o = (i * n + j) * d;
                    argmax(&bank_scores(&patch_embeddings.data()[o..o + d], bank))
                })
                .collect()
        })
        .collect()
}

/// Dataset-level IoU per class (intersections and unions summed over all
/// images) and their mean.
pub fn mean_iou(pred: &[Vec<usize>], truth: &[Vec<usize>], num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::Data("prediction and ground-truth maps differ in size".into()));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            if a >= num_classes || b >= num_classes {
                return Err(Error::Data(format!("class id outside 0..{num_classes}")));
            }
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let ious: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok((ious, miou))
}

pub fn dense_zero_shot_segment(
    patch_embeddings: &Tensor,
    bank: &LabelEmbeddingBank,
    truth: &[Vec<usize>],
) -> Result<SegmentationReport> {
    let predictions = dense_predict(patch_embeddings, bank);
    let (per_class_iou, miou) = mean_iou(&predictions, truth, bank.len())?;
    Ok(SegmentationReport {
        predictions,
        per_class_iou,
        miou,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_text: RecallAtK,
    pub text_to_image: RecallAtK,
    pub count: usize,
}

/// 0-based rank of candidate `target` for a query with `scores`: the number
/// of candidates scoring higher, plus lower-indexed candidates scoring the same.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

fn recalls(ranks: &[usize]) -> RecallAtK {
    let n = ranks.len().max(1) as f64;
    let at = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n;
    RecallAtK {
        r1: at(1),
        r5: at(5),
        r10: at(10),
    }
}

/// Recall@{1,5,10} in both directions for paired unit embeddings.
pub fn retrieval_eval(image_embeddings: &Tensor, text_embeddings: &Tensor) -> Result<RetrievalReport> {
    let n = image_embeddings.shape()[0];
    if text_embeddings.shape()[0] != n {
        return Err(Error::Data(format!(
            "{} images but {} captions",
            n,
            text_embeddings.shape()[0]
        )));
    }
    let imgs: Vec<&[f64]> = image_embeddings.rows().collect();
    let txts: Vec<&[f64]> = text_embeddings.rows().collect();
    let sim: Vec<Vec<f64>> = imgs.iter().map(|i| txts.iter().map(|t| dot(i, t)).collect()).collect();
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(&sim[i], i)).collect();
    let t2i: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| sim[i][j]).collect();
            rank_of(&col, j)
        })
        .collect();
    Ok(RetrievalReport {
        image_to_text: recalls(&i2t),
        text_to_image: recalls(&t2i),
        count: n,
    })
}

/// Settings of the logistic-regression probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            tol: 1e-6,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub test_predictions: Vec<usize>,
}

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in x {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    }
}

/// Multinomial logistic regression fitted by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    /// `[D][C]`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl SoftmaxRegression {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (xi, w) in x.iter().zip(&self.weights) {
            for (zc, wc) in z.iter_mut().zip(w) {
                *zc += xi * wc;
            }
        }
        z
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Returns the model, iterations used and final gradient norm.
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> (Self, usize, f64) {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut model = SoftmaxRegression {
            weights: vec![vec![0.0; classes]; d],
            bias: vec![0.0; classes],
        };
        // Step size 1/L from the largest eigenvalue of XᵀX/n (power iteration),
        // a bound on the curvature of the softmax cross-entropy.
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lam = 1.0;
        for _ in 0..100 {
            let mut w = vec![0.0; d];
            for r in x {
                let p = dot(r, &v);
                for (wi, ri) in w.iter_mut().zip(r) {
                    *wi += p * ri / n;
                }
            }
            lam = dot(&w, &w).sqrt();
            if lam == 0.0 {
                break;
            }
            v = w.iter().map(|a| a / lam).collect();
        }
        let lr = 1.0 / (0.5 * (lam + 1.0) + cfg.l2);
        let mut grad_norm = f64::INFINITY;
        let mut iters = 0;
        while iters < cfg.max_iters {
            let mut gw = vec![vec![0.0; classes]; d];
            let mut gb = vec![0.0; classes];
            for (r, &label) in x.iter().zip(y) {
                let z = model.logits(r);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..classes {
                    let delta = (e[c] / s - f64::from(u8::from(c == label))) / n;
                    gb[c] += delta;
                    for (gwi, ri) in gw.iter_mut().zip(r) {
                        gwi[c] += delta * ri;
                    }
                }
            }
            for (gwi, wi) in gw.iter_mut().zip(&model.weights) {
                for (g, w) in gwi.iter_mut().zip(wi) {
                    *g += cfg.l2 * w;
                }
            }
            grad_norm = (gw.iter().flatten().map(|g| g * g).sum::<f64>() + gb.iter().map(|g| g * g).sum::<f64>()).sqrt();
            if grad_norm < cfg.tol {
                break;
            }
            for (wi, gwi) in model.weights.iter_mut().zip(&gw) {
                for (w, g) in wi.iter_mut().zip(gwi) {
                    *w -= lr * g;
                }
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
            iters += 1;
        }
        (model, iters, grad_norm)
    }
}

/// Standardizes with train-split statistics, fits a softmax regression on
/// the train split and scores both splits.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::Data("probe features and labels must be nonempty and paired".into()));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        train_y.iter().for_each(|&c| seen[c] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Data("linear probe needs at least two classes in the train split".into()));
    }
    let st = Standardizer::fit(train_x);
    let (xtr, xte) = (st.apply(train_x), st.apply(test_x));
    let (model, iterations, final_grad_norm) = SoftmaxRegression::fit(&xtr, train_y, classes, cfg);
    let train_pred: Vec<usize> = xtr.iter().map(|r| model.predict(r)).collect();
    let test_predictions: Vec<usize> = xte.iter().map(|r| model.predict(r)).collect();
    Ok(ProbeReport {
        train_accuracy: accuracy(&train_pred, train_y),
        test_accuracy: accuracy(&test_predictions, test_y),
        iterations,
        final_grad_norm,
        test_predictions,
    })
}

/// Rows of a `[B, W]` tensor as owned vectors.
pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

/// Cosine similarity between each unit patch embedding `[N, D]` and a unit
/// text embedding, in patch order.
pub fn similarity_grid(patch_embeddings: &[f64], dim: usize, text: &[f64]) -> Vec<f64> {
    patch_embeddings.chunks(dim).map(|p| dot(p, text)).collect()
}

/// CSV with `grid` rows of `grid` values.
pub fn heatmap_csv(values: &[f64], grid: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Min-max normalized grayscale PPM, each cell drawn as `scale`×`scale` pixels.
pub fn heatmap_ppm(values: &[f64], grid: usize, scale: usize) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let side = grid * scale;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = values[(y / scale) * grid + x / scale];
            let b = (((v - lo) / span) * 255.0).round() as u8;
            out.extend_from_slice(&[b, b, b]);
        }
    }
    out
}

pub fn write_heatmap(dir: &Path, stem: &str, values: &[f64], grid: usize, scale: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, heatmap_csv(values, grid)).map_err(|e| Error::io(&csv, e))?;
    let ppm = dir.join(format!("{stem}.ppm"));
    fs::write(&ppm, heatmap_ppm(values, grid, scale)).map_err(|e| Error::io(&ppm, e))
}

/// Mean similarity inside and outside the object patches of one image.
pub fn inside_outside(values: &[f64], labels: &[u8]) -> Option<(f64, f64)> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &l) in values.iter().zip(labels) {
        if l != 0 {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    (ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub evaluated: usize,
    pub hits: usize,
    pub fraction: f64,
    pub mean_gap: f64,
}

/// For each sample, whether its own caption is more similar to the
/// object's patches than to the rest of the image.
pub fn localization_probe(model: &Inference<'_>, samples: &[Sample]) -> Result<LocalizationReport> {
    let tok = Tokenizer::new(model.cfg.text.context_length)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let seqs: Vec<_> = samples.iter().map(|s| tok.tokenize(&s.caption.text)).collect();
    let refs: Vec<_> = seqs.iter().collect();
    let patches = model.patch_embeddings(&images)?;
    let texts = model.text_embeddings(&refs)?;
    let (n, d) = (patches.shape()[1], patches.shape()[2]);
    let (mut evaluated, mut hits, mut gap) = (0, 0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let grid = similarity_grid(&patches.data()[i * n * d..(i + 1) * n * d], d, texts.row(i));
        if let Some((inside, outside)) = inside_outside(&grid, &s.labels) {
            evaluated += 1;
            gap += inside - outside;
            if inside > outside {
                hits += 1;
            }
        }
    }
    Ok(LocalizationReport {
        evaluated,
        hits,
        fraction: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
        mean_gap: if evaluated == 0 { 0.0 } else { gap / evaluated as f64 },
    })
}

/// Shape class (0..4) of each single-object sample.
pub fn shape_labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.primary_shape() as usize).collect()
}

/// Ground-truth patch maps as class ids.
pub fn patch_truth(samples: &[Sample]) -> Vec<Vec<usize>> {
    samples.iter().map(|s| s.labels.iter().map(|&l| l as usize).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[Vec<f64>]) -> LabelEmbeddingBank {
        LabelEmbeddingBank {
            names: (0..rows.len()).map(|i| i.to_string()).collect(),
            embeddings: Tensor::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn templates_validated() {
        assert!(PromptSet::new(vec!["no slot".into()]).is_err());
        assert!(PromptSet::new(vec!["{label} {label}".into()]).is_err());
        assert!(PromptSet::new(vec![]).is_err());
        assert_eq!(PromptSet::default().templates().len(), 7);
    }

    #[test]
    fn single_class_bank_accuracy_is_frequency() {
        let b = bank(&[vec![1.0, 0.0]]);
        let e = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let r = zero_shot_classify(&e, &b, &[0, 1, 0]).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn miou_of_truth_is_one() {
        let t = vec![vec![0, 1, 2, 2], vec![1, 1, 0, 0]];
        let (ious, m) = mean_iou(&t, &t, 5).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(ious[3], None);
    }

    #[test]
    fn miou_hand_example() {
        // class 0: inter 1, union 3; class 1: inter 1, union 2
        let (ious, m) = mean_iou(&[vec![0, 0, 1]], &[vec![0, 1, 1]], 2).unwrap();
        assert_eq!(ious, vec![Some(0.5), Some(0.5)]);
        assert_eq!(m, 0.5);
        let (_, m) = mean_iou(&[vec![0, 0, 0]], &[vec![0, 1, 1]], 2).unwrap();
        assert!((m - (1.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn retrieval_ties_follow_index() {
        let e = Tensor::from_rows(&vec![vec![1.0, 0.0]; 12]).unwrap();
        let r = retrieval_eval(&e, &e).unwrap();
        assert_eq!(r.image_to_text.r1, 1.0 / 12.0);
        assert_eq!(r.image_to_text.r5, 5.0 / 12.0);
        assert_eq!(r.text_to_image.r10, 10.0 / 12.0);
    }

    #[test]
    fn aligned_pairs_are_perfect() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let e = Tensor::from_rows(&rows).unwrap();
        let r = retrieval_eval(&e, &e).unwrap();
        assert_eq!(r.image_to_text.r1, 1.0);
        assert_eq!(r.text_to_image.r1, 1.0);
    }

    #[test]
    fn probe_separable() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let r = linear_probe(&x, &y, &x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
        assert!(linear_probe(&x, &vec![0; 20], &x, &y, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn heatmap_files() {
        let v = [0.0, 0.5, 1.0, 0.25];
        assert_eq!(heatmap_csv(&v, 2).lines().count(), 2);
        let ppm = heatmap_ppm(&v, 2, 1);
        assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(&ppm[ppm.len() - 12..], &[0, 0, 0, 128, 128, 128, 255, 255, 255, 64, 64, 64]);
    }

    #[test]
    fn inside_outside_means() {
        assert_eq!(inside_outside(&[1.0, 0.0, 0.5], &[1, 0, 0]), Some((1.0, 0.25)));
        assert_eq!(inside_outside(&[1.0], &[1]), None);
    }
}
