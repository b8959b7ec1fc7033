//! Two-branch translation model: per-branch encoder-decoder generators,
//! projection heads, PatchGAN discriminators, and a scale-attention head
//! that fuses the branches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::contrastive::{self, hdce, ContrastiveBatch, ContrastiveConfig, ContrastiveError, Negatives};
use crate::graph::{Graph, Var};
use crate::multiscale::{fuse, plan_crops, stitch, CropMode, CropSpec, MultiscaleError, ScaleAttention, ScaleMap};
use crate::nn::{Adam, AdamConfig, Bound, Conv2d, Linear, NnError, ParamStore};
use crate::rsmi::{ts_loss, EmbeddingBatch, LayerPairSet, RsmiConfig, RsmiError};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {found:?}: {reason}")]
    Input { found: Vec<usize>, reason: String },
    #[error("training diverged at step {step}: {term} = {value}")]
    Divergence { step: u64, term: String, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Rsmi(#[from] RsmiError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Multiscale(#[from] MultiscaleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channel widths of the stride-2 encoder blocks.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub embed_dim: usize,
    pub disc_width: usize,
    pub attention_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            res_blocks: 2,
            embed_dim: 64,
            disc_width: 16,
            attention_hidden: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gan: f64,
    pub hdce: f64,
    pub ts: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gan: 1.0,
            hdce: 1.0,
            ts: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropConfig {
    pub global_h: usize,
    pub global_w: usize,
    pub local_h: usize,
    pub local_w: usize,
    pub infer_stride: usize,
    pub global_min_fraction: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            global_h: 32,
            global_w: 32,
            local_h: 32,
            local_w: 32,
            infer_stride: 16,
            global_min_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub rsmi: RsmiConfig,
    /// Patches sampled per encoder layer (capped by the layer's extent).
    pub patch_count: usize,
    pub crop: CropConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            rsmi: RsmiConfig::default(),
            patch_count: 256,
            crop: CropConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.model.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        let m = &self.model;
        if m.widths.is_empty() || m.widths.contains(&0) || m.embed_dim == 0 || m.disc_width == 0 || m.attention_hidden == 0
        {
            return bad(format!("widths and dimensions must be positive: {m:?}"));
        }
        let f = self.downsample_factor();
        let c = &self.crop;
        for (name, v) in [
            ("global_h", c.global_h),
            ("global_w", c.global_w),
            ("local_h", c.local_h),
            ("local_w", c.local_w),
        ] {
            if v == 0 || v % f != 0 {
                return bad(format!("{name} = {v} must be a positive multiple of {f}"));
            }
        }
        if c.infer_stride == 0 || c.infer_stride > c.local_h.min(c.local_w) {
            return bad(format!("infer_stride = {} must lie in 1..={}", c.infer_stride, c.local_h.min(c.local_w)));
        }
        if !(c.global_min_fraction > 0.0 && c.global_min_fraction <= 1.0) {
            return bad(format!("global_min_fraction = {} outside (0, 1]", c.global_min_fraction));
        }
        if self.patch_count == 0 {
            return bad("patch_count must be positive".into());
        }
        let w = &self.weights;
        if [w.gan, w.hdce, w.ts].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad(format!("loss weights must be finite and >= 0: {w:?}"));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad(format!("invalid optimizer settings: {:?}", self.adam));
        }
        self.contrastive.validate()?;
        self.rsmi.validate()?;
        Ok(())
    }

    /// Smallest image side that fits both the local crop and a global rect.
    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let c = &self.crop;
        let min_h = (c.global_min_fraction * h as f64).ceil() as usize;
        let min_w = (c.global_min_fraction * w as f64).ceil() as usize;
        if min_h < c.local_h || min_w < c.local_w {
            return Err(ModelError::Config(format!(
                "a {h}x{w} image with global fraction {} can yield global rects smaller than the {}x{} local crop",
                c.global_min_fraction, c.local_h, c.local_w
            )));
        }
        Ok(())
    }
}

/// Encoder-decoder generator. The decoder predicts a residual in `atanh`
/// space with a zero-initialized last layer, so a fresh generator returns
/// its input.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub down: Vec<Conv2d>,
    pub res: Vec<(Conv2d, Conv2d)>,
    pub up: Vec<Conv2d>,
}

pub struct GeneratorOutput {
    pub image: Var,
    /// `[input, block 1, .., block L]`.
    pub features: Vec<Var>,
}

/// Inputs are shrunk by this factor before `atanh` so that `±1` stays finite.
const PASSTHROUGH_SCALE: f64 = 1.0 - 1e-4;

impl Generator {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let w = &cfg.widths;
        let mut down = Vec::new();
        let mut prev = 3;
        for (i, &c) in w.iter().enumerate() {
            down.push(Conv2d::new(store, &format!("{name}.down{i}"), prev, c, 3, 2, 1, rng)?);
            prev = c;
        }
        let deep = *w.last().unwrap();
        let mut res = Vec::new();
        for i in 0..cfg.res_blocks {
            res.push((
                Conv2d::new(store, &format!("{name}.res{i}a"), deep, deep, 3, 1, 1, rng)?,
                Conv2d::new(store, &format!("{name}.res{i}b"), deep, deep, 3, 1, 1, rng)?,
            ));
        }
        let mut up = Vec::new();
        for i in (0..w.len()).rev() {
            let out = if i == 0 { 3 } else { w[i - 1] };
            let layer = if i == 0 {
                Conv2d::zeroed(store, &format!("{name}.up{i}"), w[i], out, 3, 1, 1)?
            } else {
                Conv2d::new(store, &format!("{name}.up{i}"), w[i], out, 3, 1, 1, rng)?
            };
            up.push(layer);
        }
        Ok(Self { down, res, up })
    }

    pub fn layer_count(&self) -> usize {
        self.down.len() + 1
    }

    fn check_input<S: Scalar>(&self, graph: &Graph<S>, x: Var) -> Result<(usize, usize)> {
        let s = graph.shape(x);
        let f = 1 << self.down.len();
        if s.len() != 4 || s[1] != 3 || s[2] % f != 0 || s[3] % f != 0 || s[2] == 0 || s[3] == 0 {
            return Err(ModelError::Input {
                found: s.to_vec(),
                reason: format!("expected [N, 3, H, W] with H, W positive multiples of {f}"),
            });
        }
        Ok((s[2], s[3]))
    }

    /// Encoder feature maps `[x, h_1, .., h_L]`.
    pub fn encode<S: Scalar>(&self, graph: &mut Graph<S>, params: &Bound, x: Var) -> Result<Vec<Var>> {
        self.check_input(graph, x)?;
        let mut feats = vec![x];
        let mut h = x;
        for conv in &self.down {
            let y = conv.forward(graph, params, h)?;
            h = graph.relu(y);
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn forward<S: Scalar>(&self, graph: &mut Graph<S>, params: &Bound, x: Var) -> Result<GeneratorOutput> {
        let features = self.encode(graph, params, x)?;
        let mut h = *features.last().unwrap();
        for (a, b) in &self.res {
            let y = a.forward(graph, params, h)?;
            let y = graph.relu(y);
            let y = b.forward(graph, params, y)?;
            h = graph.add(h, y)?;
        }
        let last = self.up.len() - 1;
        for (i, conv) in self.up.iter().enumerate() {
            let s = graph.shape(h).to_vec();
            let up = graph.resize_bilinear(h, s[2] * 2, s[3] * 2)?;
            let y = conv.forward(graph, params, up)?;
            h = if i == last { y } else { graph.relu(y) };
        }
        let base = graph.value(x).map(|v| {
            let v = v * S::lit(PASSTHROUGH_SCALE);
            S::lit(0.5) * ((S::one() + v) / (S::one() - v)).ln()
        });
        let base = graph.constant(base);
        let pre = graph.add(base, h)?;
        Ok(GeneratorOutput {
            image: graph.tanh(pre),
            features,
        })
    }
}

/// Per-layer two-layer MLPs applied to both input-side and output-side
/// patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    pub layers: Vec<(Linear, Linear)>,
}

impl ProjectionHeads {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let mut layers = Vec::new();
        for (l, c) in std::iter::once(3).chain(cfg.widths.iter().copied()).enumerate() {
            layers.push((
                Linear::new(store, &format!("{name}.l{l}a"), c, d, rng)?,
                Linear::new(store, &format!("{name}.l{l}b"), d, d, rng)?,
            ));
        }
        Ok(Self { layers })
    }

    /// Unit-normalized embeddings `[count, d]` at `locations` of `features`.
    pub fn embed<S: Scalar>(
        &self,
        graph: &mut Graph<S>,
        params: &Bound,
        layer: usize,
        features: Var,
        locations: &[usize],
    ) -> Result<EmbeddingBatch> {
        let (a, b) = self.layers[layer];
        Ok(contrastive::embed_patches(graph, features, locations, layer, |g, x| {
            let h = a.forward(g, params, x).map_err(nn_to_contrastive)?;
            let h = g.relu(h);
            b.forward(g, params, h).map_err(nn_to_contrastive)
        })?)
    }
}

fn nn_to_contrastive(e: NnError) -> ContrastiveError {
    match e {
        NnError::Tensor(t) => ContrastiveError::Tensor(t),
        other => ContrastiveError::InvalidConfig(other.to_string()),
    }
}

/// PatchGAN: two stride-2 4x4 convolutions with leaky ReLU, then a 3x3
/// convolution to one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub convs: [Conv2d; 3],
}

const LEAK: f64 = 0.2;

impl Discriminator {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::new(store, &format!("{name}.c0"), 3, width, 4, 2, 1, rng)?,
                Conv2d::new(store, &format!("{name}.c1"), width, 2 * width, 4, 2, 1, rng)?,
                Conv2d::new(store, &format!("{name}.c2"), 2 * width, 1, 3, 1, 1, rng)?,
            ],
        })
    }

    pub fn forward<S: Scalar>(&self, graph: &mut Graph<S>, params: &Bound, x: Var) -> Result<Var> {
        let h = self.convs[0].forward(graph, params, x)?;
        let h = graph.leaky_relu(h, S::lit(LEAK));
        let h = self.convs[1].forward(graph, params, h)?;
        let h = graph.leaky_relu(h, S::lit(LEAK));
        Ok(self.convs[2].forward(graph, params, h)?)
    }
}

fn half_mean_sq_dist<S: Scalar>(graph: &mut Graph<S>, scores: Var, target: f64) -> Var {
    let d = graph.add_scalar(scores, S::lit(-target));
    let sq = graph.square(d);
    let m = graph.mean(sq);
    graph.scale(m, S::lit(0.5))
}

/// Least-squares GAN discriminator loss on score maps.
pub fn lsgan_d_loss<S: Scalar>(graph: &mut Graph<S>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let a = half_mean_sq_dist(graph, real_scores, 1.0);
    let b = half_mean_sq_dist(graph, fake_scores, 0.0);
    Ok(graph.add(a, b)?)
}

/// Least-squares GAN generator loss on the fake score map.
pub fn lsgan_g_loss<S: Scalar>(graph: &mut Graph<S>, fake_scores: Var) -> Var {
    half_mean_sq_dist(graph, fake_scores, 1.0)
}

/// `(loss_D, loss_G)`; the fake batch is detached for `loss_D`.
pub fn adversarial_losses<S: Scalar>(
    graph: &mut Graph<S>,
    disc: &Discriminator,
    params: &Bound,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let real_scores = disc.forward(graph, params, real)?;
    let detached = graph.detach(fake);
    let fake_scores_d = disc.forward(graph, params, detached)?;
    let loss_d = lsgan_d_loss(graph, real_scores, fake_scores_d)?;
    let fake_scores = disc.forward(graph, params, fake)?;
    Ok((loss_d, lsgan_g_loss(graph, fake_scores)))
}

/// Everything one branch owns.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<S: Scalar = f64> {
    pub generator: Generator,
    pub heads: ProjectionHeads,
    pub gen_params: ParamStore<S>,
    pub gen_opt: Adam<S>,
    pub disc: Discriminator,
    pub disc_params: ParamStore<S>,
    pub disc_opt: Adam<S>,
}

impl<S: Scalar> Branch<S> {
    fn new<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(&mut gen_params, "gen", &cfg.model, rng)?;
        let heads = ProjectionHeads::new(&mut gen_params, "head", &cfg.model, rng)?;
        let mut disc_params = ParamStore::new();
        let disc = Discriminator::new(&mut disc_params, "disc", cfg.model.disc_width, rng)?;
        Ok(Self {
            gen_opt: Adam::new(cfg.adam, &gen_params),
            disc_opt: Adam::new(cfg.adam, &disc_params),
            generator,
            heads,
            gen_params,
            disc,
            disc_params,
        })
    }

    fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        self.gen_params.save_into(ckpt, &format!("{prefix}/param/"))?;
        self.gen_opt.save_into(&self.gen_params, ckpt, &format!("{prefix}/adam/"))?;
        self.disc_params.save_into(ckpt, &format!("{prefix}/param/"))?;
        self.disc_opt.save_into(&self.disc_params, ckpt, &format!("{prefix}/adam/"))?;
        Ok(())
    }

    fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.gen_params.load_from(ckpt, &format!("{prefix}/param/"))?;
        self.gen_opt.load_from(&self.gen_params, ckpt, &format!("{prefix}/adam/"))?;
        self.disc_params.load_from(ckpt, &format!("{prefix}/param/"))?;
        self.disc_opt.load_from(&self.disc_params, ckpt, &format!("{prefix}/adam/"))?;
        Ok(())
    }
}

/// Per-branch loss values of one step. Terms that were switched off are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BranchLosses {
    pub disc: f64,
    pub gan: f64,
    pub hdce: f64,
    pub ts: f64,
    /// Weighted generator objective.
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub global: BranchLosses,
    pub local: BranchLosses,
    pub attention: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 12] = [
        "step",
        "d_global",
        "gan_global",
        "hdce_global",
        "ts_global",
        "d_local",
        "gan_local",
        "hdce_local",
        "ts_local",
        "attention",
        "total_g",
        "total_d",
    ];

    pub fn total_generator(&self) -> f64 {
        self.global.total + self.local.total
    }

    pub fn values(&self) -> [f64; 12] {
        let (g, l) = (self.global, self.local);
        [
            self.step as f64,
            g.disc,
            g.gan,
            g.hdce,
            g.ts,
            l.disc,
            l.gan,
            l.hdce,
            l.ts,
            self.attention,
            self.total_generator(),
            g.disc + l.disc,
        ]
    }
}

/// Which branches a step updates. The attention head trains only when
/// both run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchMask {
    pub global: bool,
    pub local: bool,
}

impl BranchMask {
    pub const BOTH: Self = Self {
        global: true,
        local: true,
    };
}

/// Random-stream identifiers; every step draws from
/// `ChaCha8(seed)` at stream `step * STREAMS + id`.
pub mod stream {
    pub const CROP: u64 = 0;
    pub const GLOBAL: u64 = 1;
    pub const LOCAL: u64 = 2;
    pub const DATA: u64 = 3;
    pub const INIT: u64 = 4;
    pub const STREAMS: u64 = 8;
}

pub fn step_rng(seed: u64, step: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(stream::STREAMS).wrapping_add(id));
    rng
}

/// Crops chosen for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCrops {
    pub source_global: CropSpec,
    /// Inside `source_global`.
    pub source_local: CropSpec,
    pub target_global: CropSpec,
    pub target_local: CropSpec,
}

/// Full training state: both branches, the attention head, and the step
/// counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S: Scalar = f64> {
    pub config: TrainConfig,
    pub seed: u64,
    pub step: u64,
    pub global: Branch<S>,
    pub local: Branch<S>,
    pub attention: ScaleAttention,
    pub att_params: ParamStore<S>,
    pub att_opt: Adam<S>,
}

struct BranchOutcome<S: Scalar> {
    losses: BranchLosses,
    fake: Tensor<S>,
    deep: Tensor<S>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = step_rng(seed, 0, stream::INIT);
        let global = Branch::new(&config, &mut rng)?;
        let local = Branch::new(&config, &mut rng)?;
        let mut att_params = ParamStore::new();
        let deep = *config.model.widths.last().unwrap();
        let attention = ScaleAttention::new(&mut att_params, "att", deep, config.model.attention_hidden, &mut rng)?;
        Ok(Self {
            att_opt: Adam::new(config.adam, &att_params),
            config,
            seed,
            step: 0,
            global,
            local,
            attention,
            att_params,
        })
    }

    pub fn plan_step_crops(&self, source_hw: (usize, usize), target_hw: (usize, usize)) -> Result<StepCrops> {
        let c = &self.config.crop;
        self.config.check_image(source_hw.0, source_hw.1)?;
        self.config.check_image(target_hw.0, target_hw.1)?;
        let mut rng = step_rng(self.seed, self.step, stream::CROP);
        let global_mode = CropMode::Global {
            min_fraction: c.global_min_fraction,
        };
        let pick = |h: usize, w: usize, rng: &mut ChaCha8Rng| -> Result<(CropSpec, CropSpec)> {
            let g = plan_crops(h, w, c.global_h, c.global_w, global_mode, rng)?[0];
            let l = plan_crops(g.height(), g.width(), c.local_h, c.local_w, CropMode::Local, rng)?[0];
            let l = CropSpec::identity(g.top + l.top, g.left + l.left, c.local_h, c.local_w)?;
            Ok((g, l))
        };
        let (source_global, source_local) = pick(source_hw.0, source_hw.1, &mut rng)?;
        let (target_global, target_local) = pick(target_hw.0, target_hw.1, &mut rng)?;
        Ok(StepCrops {
            source_global,
            source_local,
            target_global,
            target_local,
        })
    }

    /// One alternating update of discriminators, generators with heads, and
    /// the attention head. `source` and `target` are `[1, 3, H, W]` in
    /// `[-1, 1]`.
    pub fn training_step(&mut self, source: &Tensor<S>, target: &Tensor<S>, mask: BranchMask) -> Result<LossReport> {
        let (sh, sw) = image_hw(source)?;
        let (th, tw) = image_hw(target)?;
        let crops = self.plan_step_crops((sh, sw), (th, tw))?;
        let step = self.step;
        let cfg = self.config.clone();
        let cut = |img: &Tensor<S>, spec: &CropSpec| crop_resize(img, spec);

        let mut report = LossReport {
            step,
            ..Default::default()
        };
        let mut global_out = None;
        let mut local_out = None;
        if mask.global {
            let mut rng = step_rng(self.seed, step, stream::GLOBAL);
            let out = branch_step(
                &mut self.global,
                &cfg,
                &cut(source, &crops.source_global)?,
                &cut(target, &crops.target_global)?,
                &mut rng,
                step,
                "global",
            )?;
            report.global = out.losses;
            global_out = Some(out);
        }
        if mask.local {
            let mut rng = step_rng(self.seed, step, stream::LOCAL);
            let out = branch_step(
                &mut self.local,
                &cfg,
                &cut(source, &crops.source_local)?,
                &cut(target, &crops.target_local)?,
                &mut rng,
                step,
                "local",
            )?;
            report.local = out.losses;
            local_out = Some(out);
        }
        if let (Some(g), Some(l)) = (global_out, local_out) {
            report.attention = self.attention_step(&g, &l, &crops)?;
        }
        self.step += 1;
        Ok(report)
    }

    fn attention_step(&mut self, global: &BranchOutcome<S>, local: &BranchOutcome<S>, crops: &StepCrops) -> Result<f64> {
        let g_rect = crops.source_global;
        let l_rect = crops.source_local;
        let (top, left) = (l_rect.top - g_rect.top, l_rect.left - g_rect.left);
        let (lh, lw) = (l_rect.height(), l_rect.width());
        let mut graph = Graph::new();
        let params = self.att_params.bind(&mut graph);
        let deep = graph.constant(global.deep.clone());
        let map = self.attention.forward(&mut graph, &params, deep, g_rect.height(), g_rect.width())?;
        let mask = graph.crop2d(map.mask, top, left, lh, lw)?;
        let aligned = global.fake.resize_bilinear(g_rect.height(), g_rect.width())?;
        let aligned = graph.constant(aligned);
        let aligned = graph.crop2d(aligned, top, left, lh, lw)?;
        let fine = graph.constant(local.fake.clone());
        let map = ScaleMap::new(&graph, mask)?;
        let fused = fuse(&mut graph, fine, aligned, map)?;
        let disc = self.local.disc_params.bind_constants(&mut graph);
        let scores = self.local.disc.forward(&mut graph, &disc, fused)?;
        let loss = lsgan_g_loss(&mut graph, scores);
        let value = graph.value(loss).item().as_f64();
        finite(self.step, "attention", value)?;
        let grads = graph.backward(loss)?;
        let ids = self.att_params.ids_vec();
        self.att_opt.step(&mut self.att_params, &grads, &params, &ids);
        Ok(value)
    }

    /// Translates a whole `[1, 3, H, W]` image: one resized pass through the
    /// global branch, overlapping tiles through the local branch, fused by
    /// the scale map.
    pub fn full_image_inference(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let (h, w) = image_hw(image)?;
        let c = &self.config.crop;
        let mut graph = Graph::new();
        let gp = self.global.gen_params.bind_constants(&mut graph);
        let small = graph.constant(image.resize_bilinear(c.global_h, c.global_w)?);
        let out = self.global.generator.forward(&mut graph, &gp, small)?;
        let global_full = graph.resize_bilinear(out.image, h, w)?;
        let ap = self.att_params.bind_constants(&mut graph);
        let deep = *out.features.last().unwrap();
        let map = self.attention.forward(&mut graph, &ap, deep, h, w)?;

        let plan = plan_crops(h, w, c.local_h, c.local_w, CropMode::Tiling { stride: c.infer_stride }, &mut step_rng(0, 0, 0))?;
        let mut preds = Vec::with_capacity(plan.len());
        for spec in &plan {
            let mut tile_graph = Graph::new();
            let lp = self.local.gen_params.bind_constants(&mut tile_graph);
            let x = tile_graph.constant(crop_resize(image, spec)?);
            let y = self.local.generator.forward(&mut tile_graph, &lp, x)?;
            preds.push((*spec, tile_graph.value(y.image).clone()));
        }
        let local = stitch(&preds, h, w)?.reshape(&[1, 3, h, w])?;
        let local = graph.constant(local);
        let fused = fuse(&mut graph, local, global_full, map)?;
        Ok(graph.value(fused).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("state/step", Tensor::scalar(self.step as f64))?;
        // split to stay exact beyond 2^53
        ckpt.insert(
            "state/seed",
            Tensor::from_vec(vec![(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64]),
        )?;
        self.global.save_into(&mut ckpt, "global")?;
        self.local.save_into(&mut ckpt, "local")?;
        self.att_params.save_into(&mut ckpt, "attention/param/")?;
        self.att_opt.save_into(&self.att_params, &mut ckpt, "attention/adam/")?;
        Ok(ckpt)
    }

    /// Rebuilds a state for `config` and overwrites it from `ckpt`.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let seed = ckpt.require("state/seed")?.data();
        if seed.len() != 2 {
            return Err(ModelError::Config("checkpoint seed record has the wrong length".into()));
        }
        let seed = ((seed[0] as u64) << 32) | seed[1] as u64;
        let mut state = Self::new(config, seed)?;
        state.step = ckpt.require("state/step")?.item() as u64;
        state.global.load_from(ckpt, "global")?;
        state.local.load_from(ckpt, "local")?;
        state.att_params.load_from(ckpt, "attention/param/")?;
        state.att_opt.load_from(&state.att_params, ckpt, "attention/adam/")?;
        Ok(state)
    }
}

fn image_hw<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [1, 3, h, w] => Ok((*h, *w)),
        s => Err(ModelError::Input {
            found: s.to_vec(),
            reason: "expected a [1, 3, H, W] image".into(),
        }),
    }
}

/// Cuts `spec`'s rect out of a `[1, C, H, W]` image and resizes it to the
/// spec's target extents.
pub fn crop_resize<S: Scalar>(image: &Tensor<S>, spec: &CropSpec) -> Result<Tensor<S>> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || !spec.fits(s[2], s[3]) {
        return Err(ModelError::Input {
            found: s.to_vec(),
            reason: format!("cannot crop {spec:?}"),
        });
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let (ch, cw) = (spec.height(), spec.width());
    let mut data = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in spec.top..spec.bottom {
            let row = (k * h + y) * w;
            data.extend_from_slice(&image.data()[row + spec.left..row + spec.right]);
        }
    }
    let cut = Tensor::new(vec![1, c, ch, cw], data)?;
    if (ch, cw) == (spec.target_h, spec.target_w) {
        Ok(cut)
    } else {
        Ok(cut.resize_bilinear(spec.target_h, spec.target_w)?)
    }
}

fn finite(step: u64, term: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Divergence {
            step,
            term: term.to_string(),
            value,
        })
    }
}

/// True when every row of a rank-2 tensor is identical.
fn rows_identical<S: Scalar>(t: &Tensor<S>) -> bool {
    let n = t.shape()[0];
    (1..n).all(|r| t.row(r) == t.row(0))
}

/// Contrastive and dependence losses of one branch, given input-side and
/// output-side encoder features.
pub struct SemanticLosses {
    pub hdce: Option<Var>,
    pub ts: Option<Var>,
}

/// Samples shared patch locations per layer, embeds both sides with the
/// same heads, and builds the requested losses. Layers whose embeddings
/// are all identical on one side carry no dependence information and are
/// left out of the TS term.
#[allow(clippy::too_many_arguments)]
pub fn semantic_losses<S: Scalar, R: Rng + ?Sized>(
    graph: &mut Graph<S>,
    params: &Bound,
    heads: &ProjectionHeads,
    input_features: &[Var],
    output_features: &[Var],
    cfg: &TrainConfig,
    want_hdce: bool,
    want_ts: bool,
    rng: &mut R,
) -> Result<SemanticLosses> {
    let mut hdce_terms = Vec::new();
    let mut set = LayerPairSet::new();
    for (layer, (&fin, &fout)) in input_features.iter().zip(output_features).enumerate() {
        let s = graph.shape(fin).to_vec();
        let (h, w) = (s[2], s[3]);
        let count = cfg.patch_count.min(h * w);
        if count < 2 {
            continue;
        }
        let locs = contrastive::sample_locations(h, w, count, rng)?;
        let z = heads.embed(graph, params, layer, fin, &locs)?;
        let wv = heads.embed(graph, params, layer, fout, &locs)?;
        if want_hdce {
            let batch = ContrastiveBatch::new(graph, wv.vectors, z.vectors, Negatives::Internal, cfg.contrastive)?;
            hdce_terms.push(hdce(graph, &batch)?);
        }
        if want_ts && !rows_identical(graph.value(z.vectors)) && !rows_identical(graph.value(wv.vectors)) {
            set.push(graph, z, wv)?;
        }
    }
    let hdce_loss = if want_hdce && !hdce_terms.is_empty() {
        let mut acc = hdce_terms[0];
        for &t in &hdce_terms[1..] {
            acc = graph.add(acc, t)?;
        }
        Some(graph.scale(acc, S::lit(1.0 / hdce_terms.len() as f64)))
    } else {
        None
    };
    let ts = if want_ts && !set.is_empty() {
        Some(ts_loss(graph, &set, &cfg.rsmi, rng)?)
    } else {
        None
    };
    Ok(SemanticLosses { hdce: hdce_loss, ts })
}

fn branch_step<S: Scalar>(
    branch: &mut Branch<S>,
    cfg: &TrainConfig,
    input: &Tensor<S>,
    real: &Tensor<S>,
    rng: &mut ChaCha8Rng,
    step: u64,
    name: &str,
) -> Result<BranchOutcome<S>> {
    let weights = cfg.weights;
    let mut graph = Graph::new();
    let params = branch.gen_params.bind(&mut graph);
    let x = graph.constant(input.clone());
    let out = branch.generator.forward(&mut graph, &params, x)?;
    let fake = graph.value(out.image).clone();

    // discriminator update on the detached fake
    let disc_loss = {
        let mut dg = Graph::new();
        let dp = branch.disc_params.bind(&mut dg);
        let r = dg.constant(real.clone());
        let f = dg.constant(fake.clone());
        let rs = branch.disc.forward(&mut dg, &dp, r)?;
        let fs = branch.disc.forward(&mut dg, &dp, f)?;
        let loss = lsgan_d_loss(&mut dg, rs, fs)?;
        let value = dg.value(loss).item().as_f64();
        finite(step, &format!("d_{name}"), value)?;
        let grads = dg.backward(loss)?;
        let ids = branch.disc_params.ids_vec();
        branch.disc_opt.step(&mut branch.disc_params, &grads, &dp, &ids);
        value
    };

    let dp = branch.disc_params.bind_constants(&mut graph);
    let scores = branch.disc.forward(&mut graph, &dp, out.image)?;
    let gan = lsgan_g_loss(&mut graph, scores);
    let mut total = graph.scale(gan, S::lit(weights.gan));

    let want_hdce = weights.hdce > 0.0;
    let want_ts = weights.ts > 0.0;
    let mut losses = BranchLosses {
        disc: disc_loss,
        gan: graph.value(gan).item().as_f64(),
        ..Default::default()
    };
    if want_hdce || want_ts {
        let out_feats = branch.generator.encode(&mut graph, &params, out.image)?;
        let sem = semantic_losses(
            &mut graph,
            &params,
            &branch.heads,
            &out.features,
            &out_feats,
            cfg,
            want_hdce,
            want_ts,
            rng,
        )?;
        if let Some(h) = sem.hdce {
            losses.hdce = graph.value(h).item().as_f64();
            let term = graph.scale(h, S::lit(weights.hdce));
            total = graph.add(total, term)?;
        }
        if let Some(t) = sem.ts {
            losses.ts = graph.value(t).item().as_f64();
            let term = graph.scale(t, S::lit(weights.ts));
            total = graph.add(total, term)?;
        }
    }
    losses.total = graph.value(total).item().as_f64();
    for (term, v) in [("gan", losses.gan), ("hdce", losses.hdce), ("ts", losses.ts), ("total", losses.total)] {
        finite(step, &format!("{term}_{name}"), v)?;
    }
    let grads = graph.backward(total)?;
    let ids = branch.gen_params.ids_vec();
    branch.gen_opt.step(&mut branch.gen_params, &grads, &params, &ids);
    let deep = graph.value(*out.features.last().unwrap()).clone();
    Ok(BranchOutcome { losses, fake, deep })
}
