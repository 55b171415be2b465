//! Losses, length-grouped batching, the optimisation loop, and resumable
//! training checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InterFormerModel;
use crate::numerics::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, Checkpoint, Graph, Tensor, Var,
};
use crate::skeleton::InteractionSample;

fn rows_and_joints(y: &Var<'_>) -> Result<(usize, usize)> {
    let s = y.shape();
    if s.len() != 2 || !s[1].is_multiple_of(3) {
        return Err(Error::Invalid(format!(
            "expected a [T, 3k] sequence, got {s:?}"
        )));
    }
    Ok((s[0], s[1] / 3))
}

/// Mean over frames and joints of the squared joint displacement:
/// `1/(T k) * sum_t sum_i |J_i(t) - Ĵ_i(t)|^2`.
pub fn sequence_loss<'g>(y_hat: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let (t, k) = rows_and_joints(&y_hat)?;
    if y.shape() != y_hat.shape() {
        return Err(Error::Invalid(format!(
            "sequence_loss shapes differ: {:?} vs {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    Ok(y.sub(y_hat)?.square().sum().scale(1.0 / (t * k) as f64))
}

/// Squared mismatch between the real and generated motion over the first
/// two frames: `1/k * sum_i |(J_i(2) - J_i(1)) - (Ĵ_i(2) - Ĵ_i(1))|^2`.
pub fn first_frame_loss<'g>(y_hat: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let (t, k) = rows_and_joints(&y_hat)?;
    if t < 2 || y.shape()[0] < 2 {
        return Err(Error::Length(format!(
            "first_frame_loss needs at least 2 frames, got {t}"
        )));
    }
    if y.shape()[1..] != y_hat.shape()[1..] {
        return Err(Error::Invalid(format!(
            "first_frame_loss shapes differ: {:?} vs {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    let delta = |m: Var<'g>| -> Result<Var<'g>> { Ok(m.narrow(0, 1, 1)?.sub(m.narrow(0, 0, 1)?)?) };
    Ok(delta(y)?
        .sub(delta(y_hat)?)?
        .square()
        .sum()
        .scale(1.0 / k as f64))
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub lambda_ff: f64,
    pub seed: u64,
    /// Write a training checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Standard deviation of Gaussian noise added to the teacher-forced
    /// decoder inputs after the start frame; 0 disables.
    pub input_noise_sd: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 1000,
            adam: AdamConfig::default(),
            lambda_ff: 1.0,
            seed: 0,
            checkpoint_every: 0,
            input_noise_sd: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.input_noise_sd >= 0.0) || !self.input_noise_sd.is_finite() {
            return Err(Error::Config(format!(
                "input_noise_sd must be non-negative, got {}",
                self.input_noise_sd
            )));
        }
        if !(self.lambda_ff >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_ff must be non-negative, got {}",
                self.lambda_ff
            )));
        }
        Ok(())
    }
}

/// One optimisation step's batch-mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub l_s: f64,
    pub l_ff: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "L_s", "L_ff", "total", "seconds"])
            .expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.l_s.to_string(),
                r.l_ff.to_string(),
                r.total.to_string(),
                format!("{:.3}", r.seconds),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Deterministic batch order: samples are grouped by length, and epoch `e`
/// shuffles each group and the batch order with a generator seeded by
/// `(seed, e)`. Any step's batch can be recomputed without replaying the
/// previous ones.
#[derive(Debug, Clone)]
pub struct Schedule {
    groups: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
    per_epoch: usize,
}

impl Schedule {
    pub fn new(data: &[InteractionSample], batch_size: usize, seed: u64) -> Result<Self> {
        let lengths: Vec<usize> = data.iter().map(InteractionSample::len).collect();
        Self::from_lengths(&lengths, batch_size, seed)
    }

    /// Schedule over items whose sequence lengths are `lengths`.
    pub fn from_lengths(lengths: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &len) in lengths.iter().enumerate() {
            by_len.entry(len).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = by_len.into_values().collect();
        let per_epoch = groups.iter().map(|g| g.len().div_ceil(batch_size)).sum();
        Ok(Self {
            groups,
            batch_size,
            seed,
            per_epoch,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut batches = Vec::with_capacity(self.per_epoch);
        for g in &self.groups {
            let mut g = g.clone();
            g.shuffle(&mut rng);
            batches.extend(g.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        batches
    }

    /// Sample indices used at zero-based `step`.
    pub fn batch(&self, step: usize) -> Vec<usize> {
        self.epoch(step / self.per_epoch)
            .swap_remove(step % self.per_epoch)
    }
}

/// Losses of one teacher-forced pass on a single sample.
pub struct SampleLoss<'g> {
    pub l_s: Var<'g>,
    pub l_ff: Option<Var<'g>>,
    pub total: Var<'g>,
}

/// `L_s` over the full `T + 1` target (EOS included) plus `lambda_ff * L_ff`
/// over the first two reaction frames (skipped when `T < 2`).
///
/// `input_noise`, if given, is added to decoder input rows `1..`.
pub fn sample_loss<'g>(
    model: &InterFormerModel,
    g: &'g Graph,
    p: &[Var<'g>],
    sample: &InteractionSample,
    lambda_ff: f64,
    input_noise: Option<&[f64]>,
) -> Result<SampleLoss<'g>> {
    let mut tf = model.teacher_forcing(sample)?;
    if let Some(noise) = input_noise {
        let d = model.config().d();
        let rows = tf.decoder_input.data_mut();
        if noise.len() != rows.len() - d {
            return Err(Error::Invalid(
                "input noise does not match the decoder input".into(),
            ));
        }
        for (x, n) in rows[d..].iter_mut().zip(noise) {
            *x += n;
        }
    }
    let z = model.encode(g, p, &tf.action, None)?;
    let y_hat = model.decode(g, p, &tf.decoder_input, z, &tf.action)?;
    let target = g.constant(&tf.target);
    let l_s = sequence_loss(y_hat, target)?;
    let l_ff = if sample.len() >= 2 {
        Some(first_frame_loss(y_hat, target)?)
    } else {
        None
    };
    let total = match l_ff {
        Some(f) if lambda_ff > 0.0 => l_s.add(f.scale(lambda_ff))?,
        _ => l_s,
    };
    Ok(SampleLoss { l_s, l_ff, total })
}

/// Mutable training state: model, optimiser, and position in the schedule.
pub struct Trainer<'a> {
    model: InterFormerModel,
    adam: AdamState,
    config: TrainConfig,
    data: &'a [InteractionSample],
    schedule: Schedule,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: InterFormerModel,
        data: &'a [InteractionSample],
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let k = model.config().k;
        if let Some((i, _)) = data
            .iter()
            .enumerate()
            .find(|(_, s)| s.action.joint_count() != k)
        {
            return Err(Error::JointCount(format!(
                "sample {i} does not have {k} joints"
            )));
        }
        let schedule = Schedule::new(data, config.batch_size, config.seed)?;
        let adam = AdamState::new(config.adam, model.params());
        Ok(Self {
            model,
            adam,
            config,
            data,
            schedule,
            step: 0,
        })
    }

    /// Restores model, optimiser moments, and step from a training
    /// checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, data: &'a [InteractionSample], config: TrainConfig) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let model = InterFormerModel::from_checkpoint(&ck)?;
        let mut t = Self::new(model, data, config)?;
        let step = ck
            .meta
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Parse {
                context: path.display().to_string(),
                message: "missing training step".into(),
            })?;
        let moments = |kind: &str| -> Result<Vec<Vec<f64>>> {
            t.model
                .params()
                .names()
                .map(|n| {
                    ck.get(&format!("adam.{kind}.{n}"))
                        .map(|x| x.data().to_vec())
                        .ok_or_else(|| Error::Parse {
                            context: path.display().to_string(),
                            message: format!("missing optimiser moment adam.{kind}.{n}"),
                        })
                })
                .collect()
        };
        let (m, v) = (moments("m")?, moments("v")?);
        t.adam = AdamState::from_parts(t.config.adam, step, m, v);
        t.step = step as usize;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &InterFormerModel {
        &self.model
    }

    pub fn into_model(self) -> InterFormerModel {
        self.model
    }

    /// Model parameters plus Adam moments and the step counter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let names: Vec<String> = self.model.params().names().map(str::to_string).collect();
        for (kind, buffers) in [
            ("m", self.adam.first_moments()),
            ("v", self.adam.second_moments()),
        ] {
            for ((name, buf), t) in names.iter().zip(buffers).zip(self.model.params().tensors()) {
                let tensor = Tensor::new(t.shape(), buf.clone()).expect("moment shape");
                ck.push(format!("adam.{kind}.{name}"), tensor);
            }
        }
        ck.meta.insert("step".into(), serde_json::json!(self.step));
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.to_checkpoint())?)
    }

    /// Runs one optimisation step on the scheduled batch.
    pub fn train_step(&mut self) -> Result<TrainRecord> {
        let start = Instant::now();
        let batch = self.schedule.batch(self.step);
        let scale = 1.0 / batch.len() as f64;
        self.model.params_mut().zero_grad();
        let (mut l_s, mut l_ff, mut total) = (0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x005e_ed0f_1e55);
        rng.set_stream(self.step as u64);
        let d = self.model.config().d();
        for &i in &batch {
            let g = Graph::new();
            let p = self.model.bind(&g, true);
            let noise: Option<Vec<f64>> = (self.config.input_noise_sd > 0.0).then(|| {
                let normal = Normal::new(0.0, self.config.input_noise_sd).expect("validated sd");
                (0..self.data[i].len() * d)
                    .map(|_| normal.sample(&mut rng))
                    .collect()
            });
            let loss = sample_loss(
                &self.model,
                &g,
                &p,
                &self.data[i],
                self.config.lambda_ff,
                noise.as_deref(),
            )?;
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    what: format!("loss on sample {i}"),
                });
            }
            l_s += loss.l_s.item() * scale;
            l_ff += loss.l_ff.map_or(0.0, |v| v.item()) * scale;
            total += value * scale;
            loss.total.backward()?;
            g.accumulate_into(&p, self.model.params_mut(), scale)?;
        }
        if !self.model.params().grads_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                what: "gradient".into(),
            });
        }
        self.adam.step(self.model.params_mut())?;
        self.step += 1;
        Ok(TrainRecord {
            step: self.step,
            l_s,
            l_ff,
            total,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `config.steps` total steps, writing a checkpoint to
    /// `checkpoint` every `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        checkpoint: Option<&Path>,
        mut on_step: impl FnMut(&TrainRecord),
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let every = self.config.checkpoint_every;
        while self.step < self.config.steps {
            let rec = self.train_step()?;
            on_step(&rec);
            log.records.push(rec);
            if let Some(path) = checkpoint {
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == self.config.steps
                {
                    self.save(path)?;
                }
            }
        }
        Ok(log)
    }
}

/// Trains `model` for `config.steps` steps from scratch.
pub fn train(
    model: InterFormerModel,
    data: &[InteractionSample],
    config: &TrainConfig,
) -> Result<(InterFormerModel, TrainLog)> {
    let mut trainer = Trainer::new(model, data, config.clone())?;
    let log = trainer.run(None, |_| {})?;
    Ok((trainer.into_model(), log))
}

/// Mean teacher-forced `L_s` over `data`, without input noise.
pub fn dataset_loss(model: &InterFormerModel, data: &[InteractionSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    let mut total = 0.0;
    for s in data {
        let g = Graph::new();
        let p = model.bind(&g, false);
        total += sample_loss(model, &g, &p, s, 0.0, None)?.l_s.item();
    }
    Ok(total / data.len() as f64)
}
