//! Encoder/decoder stacks, teacher forcing, and model checkpoints.
//!
//! Encoder layer, for hidden state `H` (`[T, d]`):
//!
//! ```text
//! S = H + LN(spatial(LN(H)))     per frame over joints, adjacency-masked
//! U = H + LN(temporal(LN(H)))    over frames
//! C = (S + U) / 2                (C = U when spatial attention is off)
//! out = C + FFN(LN(C))
//! ```
//!
//! A decoder layer applies the same pattern twice (self attention with a
//! causal temporal path, then interaction attention with keys and values
//! from the encoding) before its feed-forward block. A final linear map
//! turns the last decoder state into poses.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    positional_encoding, row_softmax, AttentionConfig, AttentionKind, AttentionModule, MaskMode,
};
use crate::error::{Error, Result};
use crate::numerics::{
    load_checkpoint, save_checkpoint, xavier_uniform, Checkpoint, Graph, ParamId, ParamStore,
    Tensor, Var,
};
use crate::skeleton::{
    interaction_distance, AdjacencyHops, AdjacencyMasks, InteractionSample, MotionSequence, Pose,
    SkeletonTopology,
};

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub k: usize,
    pub n_layers: usize,
    pub temporal_heads: usize,
    /// 3 gives one width-1 head per coordinate; 1 gives a single width-3 head.
    pub spatial_heads: usize,
    /// Feed-forward hidden width; `None` means `4d`.
    pub ffn_hidden: Option<usize>,
    pub use_spatial: bool,
    pub use_adjacency: bool,
    pub use_distance: bool,
    pub mask_mode: MaskMode,
    pub adjacency_hops: AdjacencyHops,
    pub eos_sentinel: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_layers: 6,
            temporal_heads: 3,
            spatial_heads: 3,
            ffn_hidden: None,
            use_spatial: true,
            use_adjacency: true,
            use_distance: true,
            mask_mode: MaskMode::PostSoftmax,
            adjacency_hops: AdjacencyHops::One,
            eos_sentinel: 5.0,
        }
    }
}

/// Ablation ladder: plain transformer, then spatial attention, adjacency
/// mask, and distance bias added one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setup {
    S1,
    S2,
    S3,
    S4,
}

impl Setup {
    pub const ALL: [Setup; 4] = [Setup::S1, Setup::S2, Setup::S3, Setup::S4];

    pub fn name(self) -> &'static str {
        match self {
            Setup::S1 => "S1",
            Setup::S2 => "S2",
            Setup::S3 => "S3",
            Setup::S4 => "S4",
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        3 * self.k
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d())
    }

    pub fn with_setup(mut self, setup: Setup) -> Self {
        let (s, a, d) = match setup {
            Setup::S1 => (false, false, false),
            Setup::S2 => (true, false, false),
            Setup::S3 => (true, true, false),
            Setup::S4 => (true, true, true),
        };
        self.use_spatial = s;
        self.use_adjacency = a;
        self.use_distance = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.temporal_heads == 0 || !self.d().is_multiple_of(self.temporal_heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by temporal_heads = {}",
                self.d(),
                self.temporal_heads
            )));
        }
        if self.spatial_heads != 1 && self.spatial_heads != 3 {
            return Err(Error::Config(format!(
                "spatial_heads must be 1 or 3, got {}",
                self.spatial_heads
            )));
        }
        if self.ffn_hidden == Some(0) {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        if !self.eos_sentinel.is_finite() || self.eos_sentinel == 0.0 {
            return Err(Error::Config(
                "eos_sentinel must be finite and non-zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn apply<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        Ok(x.layer_norm(p[self.gain.0], p[self.bias.0], 1)?)
    }
}

/// `x + LN_out(attn(LN_in(x), kv, kv))`, with `kv = LN_in(x)` for self
/// attention.
#[derive(Debug, Clone)]
struct Sublayer {
    pre: Norm,
    post: Norm,
    attn: AttentionModule,
}

impl Sublayer {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        kind: AttentionKind,
        d: usize,
        config: AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let features = match kind {
            AttentionKind::Spatial => 3,
            AttentionKind::Temporal => d,
        };
        Ok(Self {
            pre: Norm::init(store, &format!("{prefix}.norm_in"), d),
            attn: AttentionModule::init(
                store,
                &format!("{prefix}.attn"),
                kind,
                features,
                config,
                rng,
            )?,
            post: Norm::init(store, &format!("{prefix}.norm_out"), d),
        })
    }

    fn forward<'g>(
        &self,
        p: &[Var<'g>],
        x: Var<'g>,
        kv: Option<Var<'g>>,
        mask: Option<&[bool]>,
        bias: Option<&Tensor>,
    ) -> Result<Var<'g>> {
        let q = self.pre.apply(p, x)?;
        let kv = kv.unwrap_or(q);
        let y = self.attn.forward(p, q, kv, kv, mask, bias)?;
        Ok(x.add(self.post.apply(p, y)?)?)
    }
}

/// Combines the spatial and temporal paths of a block. Each path already
/// includes the residual input, so averaging keeps its weight at one.
fn parallel<'g>(spatial: Var<'g>, temporal: Var<'g>) -> Result<Var<'g>> {
    Ok(spatial.add(temporal)?.scale(0.5))
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: Norm,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm: Norm::init(store, &format!("{prefix}.norm"), d),
            w1: store.add(
                format!("{prefix}.w1"),
                xavier_uniform(&[d, hidden], d, hidden, rng),
            ),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(
                format!("{prefix}.w2"),
                xavier_uniform(&[hidden, d], hidden, d, rng),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
        }
    }

    fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        let h = self
            .norm
            .apply(p, x)?
            .matmul(p[self.w1.0])?
            .add(p[self.b1.0])?
            .relu();
        let y = h.matmul(p[self.w2.0])?.add(p[self.b2.0])?;
        Ok(x.add(y)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    spatial: Sublayer,
    temporal: Sublayer,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_spatial: Sublayer,
    self_temporal: Sublayer,
    inter_spatial: Sublayer,
    inter_temporal: Sublayer,
    ffn: FeedForward,
}

/// Inputs and target for one teacher-forced pass.
///
/// The decoder input is the first reaction frame followed by all `T`
/// reaction frames; the target is the `T` reaction frames followed by one
/// EOS frame. Both have `T + 1` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForcing {
    pub action: Tensor,
    pub decoder_input: Tensor,
    pub target: Tensor,
}

/// The interaction transformer with its parameters.
#[derive(Debug, Clone)]
pub struct InterFormerModel {
    config: ModelConfig,
    topology: SkeletonTopology,
    masks: AdjacencyMasks,
    params: ParamStore,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

impl InterFormerModel {
    pub fn new(config: ModelConfig, topology: SkeletonTopology, seed: u64) -> Result<Self> {
        config.validate()?;
        if topology.joint_count() != config.k {
            return Err(Error::JointCount(format!(
                "model expects k = {} joints, topology has {}",
                config.k,
                topology.joint_count()
            )));
        }
        let d = config.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spatial = |mask: bool, bias: bool| AttentionConfig {
            heads: config.spatial_heads,
            use_adjacency_mask: mask,
            use_distance_bias: bias,
            causal: false,
            mask_mode: config.mask_mode,
        };
        let temporal = |causal: bool| AttentionConfig {
            heads: config.temporal_heads,
            use_adjacency_mask: false,
            use_distance_bias: false,
            causal,
            mask_mode: config.mask_mode,
        };
        let (spat, temp) = (AttentionKind::Spatial, AttentionKind::Temporal);

        let mut encoder = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("enc.{l}");
            let s = &mut store;
            let r = &mut rng;
            encoder.push(EncoderLayer {
                spatial: Sublayer::init(
                    s,
                    &format!("{pre}.spatial"),
                    spat,
                    d,
                    spatial(config.use_adjacency, false),
                    r,
                )?,
                temporal: Sublayer::init(
                    s,
                    &format!("{pre}.temporal"),
                    temp,
                    d,
                    temporal(false),
                    r,
                )?,
                ffn: FeedForward::init(s, &format!("{pre}.ffn"), d, config.ffn_hidden(), r),
            });
        }
        let mut decoder = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("dec.{l}");
            let s = &mut store;
            let r = &mut rng;
            decoder.push(DecoderLayer {
                self_spatial: Sublayer::init(
                    s,
                    &format!("{pre}.self_spatial"),
                    spat,
                    d,
                    spatial(config.use_adjacency, false),
                    r,
                )?,
                self_temporal: Sublayer::init(
                    s,
                    &format!("{pre}.self_temporal"),
                    temp,
                    d,
                    temporal(true),
                    r,
                )?,
                inter_spatial: Sublayer::init(
                    s,
                    &format!("{pre}.inter_spatial"),
                    spat,
                    d,
                    spatial(false, config.use_distance),
                    r,
                )?,
                inter_temporal: Sublayer::init(
                    s,
                    &format!("{pre}.inter_temporal"),
                    temp,
                    d,
                    temporal(false),
                    r,
                )?,
                ffn: FeedForward::init(s, &format!("{pre}.ffn"), d, config.ffn_hidden(), r),
            });
        }
        let out_w = store.add("out.w", xavier_uniform(&[d, d], d, d, &mut rng));
        let out_b = store.add("out.b", Tensor::zeros(&[d]));
        let masks = AdjacencyMasks::build(&topology, config.adjacency_hops);
        Ok(Self {
            config,
            topology,
            masks,
            params: store,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn masks(&self) -> &AdjacencyMasks {
        &self.masks
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Binds every parameter into `g`, tracked for gradients if `track`.
    pub fn bind<'g>(&self, g: &'g Graph, track: bool) -> Vec<Var<'g>> {
        g.bind_params(&self.params, track)
    }

    /// The EOS frame as a flat `d`-vector.
    pub fn eos_frame(&self) -> Vec<f64> {
        vec![self.config.eos_sentinel; self.config.d()]
    }

    fn check_frames(&self, m: &Tensor, what: &str) -> Result<()> {
        let d = self.config.d();
        if m.shape().len() != 2 || m.shape()[1] != d {
            return Err(Error::JointCount(format!(
                "{what} has shape {:?}, expected [T, {d}]",
                m.shape()
            )));
        }
        if !m.is_finite() {
            let frame = m.data().iter().position(|x| !x.is_finite()).unwrap() / d;
            return Err(Error::Invalid(format!(
                "{what} has a non-finite value at frame {frame}"
            )));
        }
        Ok(())
    }

    fn positional(&self, len: usize) -> Result<Tensor> {
        let d = self.config.d();
        let pe = positional_encoding(len, d + d % 2)?;
        if d.is_multiple_of(2) {
            return Ok(pe);
        }
        let data = (0..len).flat_map(|t| pe.row(t)[..d].to_vec()).collect();
        Ok(Tensor::new(&[len, d], data)?)
    }

    /// Encodes an action given as a `[T, d]` matrix. `noise`, if present, is
    /// added to the first layer's state right before its feed-forward block.
    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        action: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<Var<'g>> {
        self.check_frames(action, "action")?;
        let t = action.shape()[0];
        let mut h = g.constant(action).add(g.constant(&self.positional(t)?))?;
        let mask = self.masks.mask_flat();
        for (l, layer) in self.encoder.iter().enumerate() {
            let mut c = layer.temporal.forward(p, h, None, None, None)?;
            if self.config.use_spatial {
                let s = layer.spatial.forward(p, h, None, Some(mask), None)?;
                c = parallel(s, c)?;
            }
            if l == 0 {
                if let Some(n) = noise {
                    c = c.add(g.constant(n))?;
                }
            }
            h = layer.ffn.forward(p, c)?;
        }
        Ok(h)
    }

    /// Per-frame softmaxed interaction distance, `[T', k, k]`, with rows
    /// indexed by reaction joints and columns by action joints.
    fn distance_bias(
        &self,
        decoder_input: &Tensor,
        action: &Tensor,
        align: &[usize],
    ) -> Result<Tensor> {
        let k = self.config.k;
        let mut data = Vec::with_capacity(align.len() * k * k);
        for (p, &a) in align.iter().enumerate() {
            let reaction = Pose::from_flat(decoder_input.row(p))?;
            let act = Pose::from_flat(action.row(a))?;
            data.extend_from_slice(row_softmax(&interaction_distance(&reaction, &act)?).data());
        }
        Ok(Tensor::new(&[align.len(), k, k], data)?)
    }

    /// Decodes `decoder_input` (`[T', d]`, `T' <= T + 1`) against the
    /// encoding `z` of `action` (`[T, d]`). Decoder position `p` is paired
    /// with action frame `min(p, T - 1)` for spatial interaction attention.
    pub fn decode<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        decoder_input: &Tensor,
        z: Var<'g>,
        action: &Tensor,
    ) -> Result<Var<'g>> {
        self.check_frames(decoder_input, "decoder input")?;
        self.check_frames(action, "action")?;
        let (tq, t) = (decoder_input.shape()[0], action.shape()[0]);
        if tq > t + 1 {
            return Err(Error::Length(format!(
                "decoder input has {tq} frames but the action only {t}; at most {} allowed",
                t + 1
            )));
        }
        if z.shape() != [t, self.config.d()] {
            return Err(Error::Length(format!(
                "encoding shape {:?} does not match action [{t}, d]",
                z.shape()
            )));
        }
        let align: Vec<usize> = (0..tq).map(|i| i.min(t - 1)).collect();
        let spatial = self.config.use_spatial;
        let z_aligned = if spatial {
            Some(z.index_select(&align)?)
        } else {
            None
        };
        let bias = if spatial && self.config.use_distance {
            Some(self.distance_bias(decoder_input, action, &align)?)
        } else {
            None
        };
        let mask = self.masks.mask_flat();

        let mut h = g
            .constant(decoder_input)
            .add(g.constant(&self.positional(tq)?))?;
        for layer in &self.decoder {
            let mut a = layer.self_temporal.forward(p, h, None, None, None)?;
            if spatial {
                a = parallel(layer.self_spatial.forward(p, h, None, Some(mask), None)?, a)?;
            }
            let mut b = layer.inter_temporal.forward(p, a, Some(z), None, None)?;
            if let Some(za) = z_aligned {
                b = parallel(
                    layer
                        .inter_spatial
                        .forward(p, a, Some(za), None, bias.as_ref())?,
                    b,
                )?;
            }
            h = layer.ffn.forward(p, b)?;
        }
        Ok(h.matmul(p[self.out_w.0])?.add(p[self.out_b.0])?)
    }

    pub fn teacher_forcing(&self, sample: &InteractionSample) -> Result<TeacherForcing> {
        if sample.action.len() != sample.reaction.len() {
            return Err(Error::Length(format!(
                "action has {} frames, reaction {}",
                sample.action.len(),
                sample.reaction.len()
            )));
        }
        let d = self.config.d();
        let action = sample.action.to_matrix();
        let reaction = sample.reaction.to_matrix();
        let t = reaction.shape()[0];
        let mut input = reaction.row(0).to_vec();
        input.extend_from_slice(reaction.data());
        let mut target = reaction.data().to_vec();
        target.extend(self.eos_frame());
        Ok(TeacherForcing {
            action,
            decoder_input: Tensor::new(&[t + 1, d], input)?,
            target: Tensor::new(&[t + 1, d], target)?,
        })
    }

    /// Returns the `[T + 1, d]` prediction and the matching target.
    pub fn forward_teacher_forced<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        sample: &InteractionSample,
    ) -> Result<(Var<'g>, Tensor)> {
        let tf = self.teacher_forcing(sample)?;
        let z = self.encode(g, p, &tf.action, None)?;
        let y = self.decode(g, p, &tf.decoder_input, z, &tf.action)?;
        Ok((y, tf.target))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        ck.meta.insert(
            "model_config".into(),
            serde_json::to_value(&self.config).expect("config serialises"),
        );
        ck.meta.insert(
            "topology".into(),
            serde_json::to_value(&self.topology).expect("topology serialises"),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |name: &str| {
            ck.meta.get(name).cloned().ok_or_else(|| Error::Parse {
                context: "checkpoint".into(),
                message: format!("missing `{name}` in manifest"),
            })
        };
        let parse = |e: serde_json::Error| Error::Parse {
            context: "checkpoint".into(),
            message: e.to_string(),
        };
        let config: ModelConfig = serde_json::from_value(field("model_config")?).map_err(parse)?;
        let topology: SkeletonTopology =
            serde_json::from_value(field("topology")?).map_err(parse)?;
        let mut model = Self::new(config, topology, 0)?;
        ck.restore_into(&mut model.params)?;
        Ok(model)
    }

    /// Path of the JSON sidecar written next to a checkpoint.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the binary checkpoint and a JSON sidecar with the config.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())?;
        let sidecar = serde_json::json!({ "model_config": self.config, "topology": self.topology });
        let side = Self::sidecar_path(path);
        std::fs::write(
            &side,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serialises"),
        )
        .map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// `[T, d]` matrix of a sequence, checked against `k`.
pub fn sequence_matrix(seq: &MotionSequence, k: usize) -> Result<Tensor> {
    if seq.joint_count() != k {
        return Err(Error::JointCount(format!(
            "expected {k} joints, sequence has {}",
            seq.joint_count()
        )));
    }
    Ok(seq.to_matrix())
}
