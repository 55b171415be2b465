//! Recurrent motion classifier, classification accuracy, Fréchet feature
//! distance, and feature diversity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{generate_long, zero_velocity_baseline, GenConfig};
use crate::model::InterFormerModel;
use crate::numerics::{
    load_checkpoint, save_checkpoint, xavier_uniform, AdamConfig, AdamState, Checkpoint, Graph,
    ParamId, ParamStore, Tensor, Var,
};
use crate::skeleton::{InteractionSample, MotionSequence};
use crate::training::Schedule;

/// Which hidden state serves as the sequence feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Final-step hidden state of the top layer.
    #[default]
    Top,
    /// Final-step hidden states of all layers, concatenated.
    AllLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of each class held out to measure accuracy.
    pub holdout_fraction: f64,
    pub feature: FeatureTap,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig {
                alpha: 1e-3,
                ..AdamConfig::default()
            },
            holdout_fraction: 0.2,
            feature: FeatureTap::Top,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "classifier hidden, layers and batch_size must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.feature {
            FeatureTap::Top => self.hidden,
            FeatureTap::AllLayers => self.hidden * self.layers,
        }
    }
}

struct GruLayer {
    w: ParamId,
    u: ParamId,
    bx: ParamId,
    bh: ParamId,
}

/// Stacked gated recurrent classifier over flattened poses.
pub struct MotionClassifier {
    config: ClassifierConfig,
    input_dim: usize,
    classes: Vec<String>,
    params: ParamStore,
    layers: Vec<GruLayer>,
    head_w: ParamId,
    head_b: ParamId,
    /// Accuracy in percent on the held-out split, if any.
    pub holdout_accuracy: Option<f64>,
}

impl MotionClassifier {
    pub fn new(config: ClassifierConfig, input_dim: usize, classes: Vec<String>) -> Result<Self> {
        config.validate()?;
        if classes.len() < 2 {
            return Err(Error::Invalid(format!(
                "a classifier needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        if input_dim == 0 {
            return Err(Error::Invalid("input dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let inp = if l == 0 { input_dim } else { h };
            layers.push(GruLayer {
                w: params.add(
                    format!("gru.{l}.w"),
                    xavier_uniform(&[inp, 3 * h], inp, h, &mut rng),
                ),
                u: params.add(
                    format!("gru.{l}.u"),
                    xavier_uniform(&[h, 3 * h], h, h, &mut rng),
                ),
                bx: params.add(format!("gru.{l}.bx"), Tensor::zeros(&[3 * h])),
                bh: params.add(format!("gru.{l}.bh"), Tensor::zeros(&[3 * h])),
            });
        }
        let f = config.feature_dim();
        let c = classes.len();
        let head_w = params.add("head.w", xavier_uniform(&[f, c], f, c, &mut rng));
        let head_b = params.add("head.b", Tensor::zeros(&[c]));
        Ok(Self {
            config,
            input_dim,
            classes,
            params,
            layers,
            head_w,
            head_b,
            holdout_accuracy: None,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Features `[B, F]` of a batch of equal-length sequences.
    fn features_var<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        batch: &[&MotionSequence],
    ) -> Result<Var<'g>> {
        let t_len = batch[0].len();
        let b = batch.len();
        let h = self.config.hidden;
        let mut hidden: Vec<Var<'g>> = (0..self.layers.len())
            .map(|_| g.constant(&Tensor::zeros(&[b, h])))
            .collect();
        for t in 0..t_len {
            let mut x = Vec::with_capacity(b * self.input_dim);
            for s in batch {
                x.extend(s.frames[t].flatten());
            }
            let mut input = g.constant(&Tensor::new(&[b, self.input_dim], x)?);
            for (l, layer) in self.layers.iter().enumerate() {
                let gx = input.matmul(p[layer.w.0])?.add(p[layer.bx.0])?;
                let gh = hidden[l].matmul(p[layer.u.0])?.add(p[layer.bh.0])?;
                let z = gx.narrow(1, 0, h)?.add(gh.narrow(1, 0, h)?)?.sigmoid();
                let r = gx.narrow(1, h, h)?.add(gh.narrow(1, h, h)?)?.sigmoid();
                let n = gx
                    .narrow(1, 2 * h, h)?
                    .add(r.mul(gh.narrow(1, 2 * h, h)?)?)?
                    .tanh();
                // h' = (1 - z) n + z h
                hidden[l] = n.add(z.mul(hidden[l].sub(n)?)?)?;
                input = hidden[l];
            }
        }
        Ok(match self.config.feature {
            FeatureTap::Top => *hidden.last().expect("at least one layer"),
            FeatureTap::AllLayers => Var::concat(&hidden, 1)?,
        })
    }

    fn logits<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        batch: &[&MotionSequence],
    ) -> Result<Var<'g>> {
        let f = self.features_var(g, p, batch)?;
        Ok(f.matmul(p[self.head_w.0])?.add(p[self.head_b.0])?)
    }

    fn check(&self, seqs: &[&MotionSequence]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Invalid("no sequences given".into()));
        }
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() || 3 * s.joint_count() != self.input_dim {
                return Err(Error::JointCount(format!(
                    "sequence {i} has {} joints and {} frames; classifier expects {} joints",
                    s.joint_count(),
                    s.len(),
                    self.input_dim / 3
                )));
            }
        }
        Ok(())
    }

    /// Runs `f` on each same-length group, returning results in input order.
    fn batched<T: Clone>(
        &self,
        seqs: &[&MotionSequence],
        mut f: impl FnMut(&[&MotionSequence]) -> Result<Vec<T>>,
    ) -> Result<Vec<T>> {
        self.check(seqs)?;
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in seqs.iter().enumerate() {
            by_len.entry(s.len()).or_default().push(i);
        }
        let mut out: Vec<Option<T>> = vec![None; seqs.len()];
        for idx in by_len.values() {
            for chunk in idx.chunks(64) {
                let batch: Vec<&MotionSequence> = chunk.iter().map(|&i| seqs[i]).collect();
                for (&i, v) in chunk.iter().zip(f(&batch)?) {
                    out[i] = Some(v);
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|v| v.expect("every index visited"))
            .collect())
    }

    /// `[b, F]` feature matrix, one row per sequence.
    pub fn features(&self, seqs: &[&MotionSequence]) -> Result<Tensor> {
        let f = self.feature_dim();
        let rows = self.batched(seqs, |batch| {
            let g = Graph::new();
            let p = g.bind_params(&self.params, false);
            let v = self.features_var(&g, &p, batch)?.value();
            Ok((0..batch.len()).map(|r| v.row(r).to_vec()).collect())
        })?;
        Ok(Tensor::new(&[seqs.len(), f], rows.concat())?)
    }

    /// Predicted class index per sequence.
    pub fn predict(&self, seqs: &[&MotionSequence]) -> Result<Vec<usize>> {
        let c = self.classes.len();
        self.batched(seqs, |batch| {
            let g = Graph::new();
            let p = g.bind_params(&self.params, false);
            let v = self.logits(&g, &p, batch)?.value();
            Ok((0..batch.len())
                .map(|r| {
                    let row = &v.data()[r * c..(r + 1) * c];
                    (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect())
        })
    }

    /// Predicted class names.
    pub fn predict_labels(&self, seqs: &[&MotionSequence]) -> Result<Vec<String>> {
        Ok(self
            .predict(seqs)?
            .into_iter()
            .map(|i| self.classes[i].clone())
            .collect())
    }

    /// Percentage of sequences whose predicted label equals the given one.
    pub fn accuracy(&self, seqs: &[&MotionSequence], labels: &[String]) -> Result<f64> {
        if seqs.len() != labels.len() {
            return Err(Error::Invalid("one label per sequence required".into()));
        }
        let pred = self.predict_labels(seqs)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(100.0 * hits as f64 / seqs.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        ck.meta.insert(
            "classifier_config".into(),
            serde_json::to_value(&self.config).expect("config serialises"),
        );
        ck.meta
            .insert("input_dim".into(), serde_json::json!(self.input_dim));
        ck.meta
            .insert("classes".into(), serde_json::json!(self.classes));
        ck.meta.insert(
            "holdout_accuracy".into(),
            serde_json::json!(self.holdout_accuracy),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |name: &str| {
            ck.meta.get(name).cloned().ok_or_else(|| Error::Parse {
                context: "classifier checkpoint".into(),
                message: format!("missing `{name}` in manifest"),
            })
        };
        let parse = |e: serde_json::Error| Error::Parse {
            context: "classifier checkpoint".into(),
            message: e.to_string(),
        };
        let config: ClassifierConfig =
            serde_json::from_value(field("classifier_config")?).map_err(parse)?;
        let input_dim: usize = serde_json::from_value(field("input_dim")?).map_err(parse)?;
        let classes: Vec<String> = serde_json::from_value(field("classes")?).map_err(parse)?;
        let mut c = Self::new(config, input_dim, classes)?;
        ck.restore_into(&mut c.params)?;
        c.holdout_accuracy = ck
            .meta
            .get("holdout_accuracy")
            .and_then(serde_json::Value::as_f64);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.to_checkpoint())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// Reactions and labels of interaction samples.
pub fn reactions(samples: &[InteractionSample]) -> Vec<(MotionSequence, String)> {
    samples
        .iter()
        .map(|s| (s.reaction.clone(), s.label.clone()))
        .collect()
}

/// Trains a classifier with cross-entropy and Adam. A stratified
/// `holdout_fraction` of each class is kept out of training and used to set
/// [`MotionClassifier::holdout_accuracy`].
pub fn train_classifier(
    data: &[(MotionSequence, String)],
    config: &ClassifierConfig,
) -> Result<MotionClassifier> {
    config.validate()?;
    let classes: Vec<String> = data
        .iter()
        .map(|(_, l)| l.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::Invalid(format!(
            "training a classifier needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let input_dim = 3 * data[0].0.joint_count();
    let mut clf = MotionClassifier::new(config.clone(), input_dim, classes.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train_idx, mut held_idx) = (Vec::new(), Vec::new());
    for class in &classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| &data[i].1 == class).collect();
        idx.shuffle(&mut rng);
        let n_held = if idx.len() > 1 {
            ((idx.len() as f64) * config.holdout_fraction).round() as usize
        } else {
            0
        };
        held_idx.extend_from_slice(&idx[..n_held]);
        train_idx.extend_from_slice(&idx[n_held..]);
    }
    let targets: Vec<usize> = data
        .iter()
        .map(|(_, l)| {
            classes
                .iter()
                .position(|c| c == l)
                .expect("label collected")
        })
        .collect();
    let train_seqs: Vec<&MotionSequence> = train_idx.iter().map(|&i| &data[i].0).collect();
    clf.check(&train_seqs)?;

    let lengths: Vec<usize> = train_seqs.iter().map(|s| s.len()).collect();
    let schedule = Schedule::from_lengths(&lengths, config.batch_size, config.seed)?;
    let mut adam = AdamState::new(config.adam, &clf.params);
    for epoch in 0..config.epochs {
        for batch in schedule.epoch(epoch) {
            let seqs: Vec<&MotionSequence> = batch.iter().map(|&i| train_seqs[i]).collect();
            let y: Vec<usize> = batch.iter().map(|&i| targets[train_idx[i]]).collect();
            let g = Graph::new();
            let p = g.bind_params(&clf.params, true);
            let loss = clf.logits(&g, &p, &seqs)?.cross_entropy(&y)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    what: "classifier loss".into(),
                });
            }
            loss.backward()?;
            clf.params.zero_grad();
            g.accumulate_into(&p, &mut clf.params, 1.0)?;
            adam.step(&mut clf.params)?;
        }
    }
    if !held_idx.is_empty() {
        let seqs: Vec<&MotionSequence> = held_idx.iter().map(|&i| &data[i].0).collect();
        let labels: Vec<String> = held_idx.iter().map(|&i| data[i].1.clone()).collect();
        clf.holdout_accuracy = Some(clf.accuracy(&seqs, &labels)?);
    }
    Ok(clf)
}

/// Final-step features of each sequence, `[b, F]`.
pub fn extract_features(classifier: &MotionClassifier, seqs: &[&MotionSequence]) -> Result<Tensor> {
    classifier.features(seqs)
}

fn to_matrix(features: &Tensor, what: &str) -> Result<DMatrix<f64>> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!(
            "{what}: expected a [b, H] feature matrix, got {s:?}"
        )));
    }
    Ok(DMatrix::from_row_slice(s[0], s[1], features.data()))
}

fn mean_and_covariance(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let b = m.nrows();
    let mean = m.row_mean().transpose();
    let mut centred = m.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (b - 1) as f64;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^(1/2))`.
///
/// `tr (C_a C_b)^(1/2)` is the sum of singular values of
/// `C_a^(1/2) C_b^(1/2)`, which avoids squaring small eigenvalues when the
/// covariances are rank deficient.
pub fn fvd(features_a: &Tensor, features_b: &Tensor) -> Result<f64> {
    let a = to_matrix(features_a, "fvd")?;
    let b = to_matrix(features_b, "fvd")?;
    if a.ncols() != b.ncols() {
        return Err(Error::Invalid(format!(
            "fvd feature widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Invalid(
            "fvd needs at least 2 feature rows per set".into(),
        ));
    }
    let (mu_a, c_a) = mean_and_covariance(&a);
    let (mu_b, c_b) = mean_and_covariance(&b);
    let cross: f64 = (psd_sqrt(&c_a) * psd_sqrt(&c_b)).singular_values().sum();
    let value = (mu_a - mu_b).norm_squared() + c_a.trace() + c_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean Euclidean distance over ordered pairs of feature rows,
/// `1/(b(b-1)) sum_i sum_j |f_i - f_j|`.
pub fn diversity(features: &Tensor) -> Result<f64> {
    let m = to_matrix(features, "diversity")?;
    let b = m.nrows();
    if b < 2 {
        return Err(Error::Invalid(format!(
            "diversity needs at least 2 rows, got {b}"
        )));
    }
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            total += (m.row(i) - m.row(j)).norm();
        }
    }
    Ok(total / (b * (b - 1)) as f64)
}

/// `100 |div_gt - div_gen| / div_gt`.
pub fn diversity_score(div_gt: f64, div_gen: f64) -> Result<f64> {
    if !(div_gt > 0.0) {
        return Err(Error::Invalid(format!(
            "diversity score needs a positive reference diversity, got {div_gt}"
        )));
    }
    Ok(100.0 * (div_gt - div_gen).abs() / div_gt)
}

/// Scores of one set of reactions against the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    /// Accuracy in percent per class, in [`EvalReport::classes`] order.
    pub per_class_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub fvd: f64,
    pub diversity: f64,
    pub diversity_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub ground_truth: MethodScores,
    pub generated: MethodScores,
    pub zero_velocity: MethodScores,
    /// Fraction of generated reactions within 2 frames of the action length.
    pub length_match_rate: f64,
    pub eos_mismatches: usize,
    pub samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Two aligned tables: accuracy per class plus the average, then FVD and
    /// diversity score.
    pub fn to_table(&self) -> String {
        let methods = [&self.ground_truth, &self.generated, &self.zero_velocity];
        let width = self
            .classes
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max("Diversity score".len());
        let mut out = String::new();
        let header = |out: &mut String, first: &str| {
            let _ = write!(out, "{first:<width$}");
            for m in &methods {
                let _ = write!(out, "  {:>12}", m.method);
            }
            out.push('\n');
            out.push_str(&"-".repeat(width + 14 * methods.len()));
            out.push('\n');
        };
        header(&mut out, "Accuracy (%)");
        for (c, class) in self.classes.iter().enumerate() {
            let _ = write!(out, "{class:<width$}");
            for m in &methods {
                let _ = write!(out, "  {:>12.1}", m.per_class_accuracy[c]);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<width$}", "Average");
        for m in &methods {
            let _ = write!(out, "  {:>12.1}", m.average_accuracy);
        }
        out.push_str("\n\n");
        header(&mut out, "Metric");
        for (name, get) in [
            (
                "FVD",
                (|m: &MethodScores| m.fvd) as fn(&MethodScores) -> f64,
            ),
            ("Diversity score", |m| m.diversity_score),
        ] {
            let _ = write!(out, "{name:<width$}");
            for m in &methods {
                let _ = write!(out, "  {:>12.3}", get(m));
            }
            out.push('\n');
        }
        out
    }
}

fn score(
    method: &str,
    classifier: &MotionClassifier,
    classes: &[String],
    labels: &[String],
    seqs: &[&MotionSequence],
    gt_features: &Tensor,
    div_gt: f64,
) -> Result<MethodScores> {
    let pred = classifier.predict_labels(seqs)?;
    let per_class_accuracy: Vec<f64> = classes
        .iter()
        .map(|c| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| &labels[i] == c).collect();
            100.0 * idx.iter().filter(|&&i| &pred[i] == c).count() as f64 / idx.len() as f64
        })
        .collect();
    let average_accuracy = per_class_accuracy.iter().sum::<f64>() / classes.len() as f64;
    let features = classifier.features(seqs)?;
    let div = diversity(&features)?;
    Ok(MethodScores {
        method: method.into(),
        per_class_accuracy,
        average_accuracy,
        fvd: fvd(gt_features, &features)?,
        diversity: div,
        diversity_score: diversity_score(div_gt, div)?,
    })
}

/// Generates a reaction for every test action, seeded with the ground-truth
/// first reaction frame, and scores it next to the ground truth itself and
/// the zero-velocity baseline.
pub fn evaluate(
    model: &InterFormerModel,
    test: &[InteractionSample],
    classifier: &MotionClassifier,
    gen: &GenConfig,
) -> Result<EvalReport> {
    if test.len() < 2 {
        return Err(Error::Invalid(
            "evaluation needs at least 2 test samples".into(),
        ));
    }
    let classes: Vec<String> = test
        .iter()
        .map(|s| s.label.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels: Vec<String> = test.iter().map(|s| s.label.clone()).collect();
    let mut generated = Vec::with_capacity(test.len());
    let mut baseline = Vec::with_capacity(test.len());
    let (mut matched, mut mismatches) = (0, 0);
    for s in test {
        let first = &s.reaction.frames[0];
        let out = generate_long(model, &s.action, first, gen)?;
        if out.sequence.len().abs_diff(s.action.len()) <= 2 {
            matched += 1;
        }
        mismatches += usize::from(out.eos_mismatch);
        generated.push(out.sequence);
        baseline.push(zero_velocity_baseline(
            first,
            s.action.len(),
            s.action.frame_rate,
        )?);
    }
    let gt: Vec<&MotionSequence> = test.iter().map(|s| &s.reaction).collect();
    let gt_features = classifier.features(&gt)?;
    let div_gt = diversity(&gt_features)?;
    fn refs(v: &[MotionSequence]) -> Vec<&MotionSequence> {
        v.iter().collect()
    }
    Ok(EvalReport {
        ground_truth: score(
            "Ground truth",
            classifier,
            &classes,
            &labels,
            &gt,
            &gt_features,
            div_gt,
        )?,
        generated: score(
            "Generated",
            classifier,
            &classes,
            &labels,
            &refs(&generated),
            &gt_features,
            div_gt,
        )?,
        zero_velocity: score(
            "ZeroV",
            classifier,
            &classes,
            &labels,
            &refs(&baseline),
            &gt_features,
            div_gt,
        )?,
        length_match_rate: matched as f64 / test.len() as f64,
        eos_mismatches: mismatches,
        samples: test.len(),
        classes,
    })
}
