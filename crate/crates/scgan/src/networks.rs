//! Network assemblies: generator, discriminator, dual encoders, and the
//! fixed feature network used by the perceptual losses and metrics.
//!
//! The generator is decoder #1 (instance norm), a stack of stylization
//! residual blocks whose AdaIN parameters come from an MLP on the style
//! code, decoder #2 (batch norm), and a conv-tanh output head. Content
//! enters through decoder #1's seed projection; style enters *only*
//! through the AdaIN sites, so everything before the first residual block
//! is independent of the style code by construction.
//!
//! Downsampling networks express "stride-2 convolution" as a stride-1
//! 3x3 convolution followed by 2x2 average pooling, which keeps the
//! convolution contract (odd kernel, exact output division) at every
//! even spatial size.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::layers::{AdaInParams, BatchNorm, Conv2d, InstanceNorm, Linear, ResidualBlock};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Number of fully-connected layers in the style MLP.
pub const MLP_LAYERS: usize = 5;

/// Seed resolution of the generator before any doubling stage.
pub const SEED_SIZE: usize = 4;

/// Number of spatial doublings implied by an image size of `4 * 2^t`.
pub fn doubling_stages(image_size: usize) -> Result<usize> {
    let mut s = image_size;
    let mut t = 0;
    while s > SEED_SIZE && s.is_multiple_of(2) {
        s /= 2;
        t += 1;
    }
    if s != SEED_SIZE || t < 1 {
        return Err(Error::config(format!(
            "image size {image_size} is not 4*2^t for integer t >= 1"
        )));
    }
    Ok(t)
}

/// Generator hyper-parameters.
///
/// `split = (i, j, k)`: decoder #1 owns `i` conv stages (the first runs at
/// the 4x4 seed resolution, every later one doubles), the stylization
/// stack owns `j` residual blocks, decoder #2 owns `k` doubling stages.
/// `(i - 1) + k` must equal the number of doublings for `image_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub split: (usize, usize, usize),
    pub mlp_hidden: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 32,
            base_channels: 64,
            content_dim: 64,
            style_dim: 8,
            split: (3, 4, 1),
            mlp_hidden: 256,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let t = doubling_stages(self.image_size)?;
        let (i, j, k) = self.split;
        if i < 1 || j < 1 || k < 1 {
            return Err(Error::config(format!(
                "split {:?}: all three counts must be >= 1",
                self.split
            )));
        }
        if (i - 1) + k != t {
            return Err(Error::config(format!(
                "split {:?} performs {} doublings but image size {} needs {t}",
                self.split,
                (i - 1) + k,
                self.image_size
            )));
        }
        for (what, v) in [
            ("base_channels", self.base_channels),
            ("content_dim", self.content_dim),
            ("style_dim", self.style_dim),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{what} must be positive")));
            }
        }
        Ok(())
    }

    /// Total AdaIN sites: two per residual block.
    pub fn adain_sites(&self) -> usize {
        2 * self.split.1
    }

    /// Length of the MLP output: one (scale, shift) pair of `base_channels`
    /// values per site.
    pub fn mlp_output_dim(&self) -> usize {
        2 * self.adain_sites() * self.base_channels
    }
}

/// One latent draw, split into its content and style halves.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub content: Tensor,
    pub style: Tensor,
}

impl LatentCode {
    pub fn new(content: Tensor, style: Tensor) -> Result<Self> {
        if content.shape().len() != 1 || style.shape().len() != 1 {
            return Err(Error::shape("latent code halves must be rank-1 tensors"));
        }
        Ok(LatentCode { content, style })
    }

    /// Draw `z_c ~ N(0, I)`, `z_s ~ N(0, I)`.
    pub fn sample(content_dim: usize, style_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        LatentCode::new(
            Tensor::randn(&[content_dim], 1.0, rng)?,
            Tensor::randn(&[style_dim], 1.0, rng)?,
        )
    }

    pub fn matches(&self, config: &GeneratorConfig) -> Result<()> {
        if self.content.numel() != config.content_dim || self.style.numel() != config.style_dim {
            return Err(Error::shape(format!(
                "latent code dims ({}, {}) do not match config ({}, {})",
                self.content.numel(),
                self.style.numel(),
                config.content_dim,
                config.style_dim
            )));
        }
        Ok(())
    }
}

/// Stack codes into `[N, content_dim]` and `[N, style_dim]` constants.
pub fn stack_codes(
    tape: &mut Tape,
    codes: &[LatentCode],
    config: &GeneratorConfig,
) -> Result<(Var, Var)> {
    if codes.is_empty() {
        return Err(Error::shape("empty code batch"));
    }
    let mut zc = Vec::with_capacity(codes.len() * config.content_dim);
    let mut zs = Vec::with_capacity(codes.len() * config.style_dim);
    for code in codes {
        code.matches(config)?;
        zc.extend_from_slice(code.content.data());
        zs.extend_from_slice(code.style.data());
    }
    let zc = Tensor::new(vec![codes.len(), config.content_dim], zc)?;
    let zs = Tensor::new(vec![codes.len(), config.style_dim], zs)?;
    Ok((tape.constant(&zc), tape.constant(&zs)))
}

#[derive(Debug, Clone)]
struct Dec1Stage {
    conv: Conv2d,
    norm: InstanceNorm,
}

#[derive(Debug, Clone)]
struct Dec2Stage {
    conv: Conv2d,
    bn: BatchNorm,
}

/// The style MLP: five fully-connected layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(MLP_LAYERS);
        let mut d = in_dim;
        for _ in 0..MLP_LAYERS - 1 {
            layers.push(Linear::new(d, hidden, rng)?);
            d = hidden;
        }
        layers.push(Linear::new(d, out_dim, rng)?);
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Decoder #1 output and the final image from one traced forward pass.
pub struct GeneratorTrace {
    /// Activations after decoder #1, before the first AdaIN site.
    pub pre_stylization: Var,
    pub image: Var,
}

/// The generator. See the module docs for the dataflow; `forward` (batch
/// size 1) normalizes decoder #2 with running statistics, while the
/// `forward_batch*` variants use batch statistics and need N >= 2.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    seed: Linear,
    dec1: Vec<Dec1Stage>,
    pub mlp: Mlp,
    blocks: Vec<ResidualBlock>,
    dec2: Vec<Dec2Stage>,
    to_rgb: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (i, j, k) = config.split;
        let c = config.base_channels;
        let seed = Linear::new(config.content_dim, c * SEED_SIZE * SEED_SIZE, rng)?;
        let mut dec1 = Vec::with_capacity(i);
        for _ in 0..i {
            dec1.push(Dec1Stage {
                conv: Conv2d::new(c, c, 3, 1, 1, rng)?,
                norm: InstanceNorm::new(c)?,
            });
        }
        let mut mlp = Mlp::new(config.style_dim, config.mlp_hidden, config.mlp_output_dim(), rng)?;
        // Start every AdaIN site at identity (scale 1, shift 0) so early
        // training sees a well-conditioned stylization path.
        {
            let bias = mlp.layers.last_mut().expect("five layers").bias.data_mut();
            for site in 0..config.adain_sites() {
                for ch in 0..c {
                    bias[site * 2 * c + ch] = 1.0;
                }
            }
        }
        let mut blocks = Vec::with_capacity(j);
        for _ in 0..j {
            blocks.push(ResidualBlock::new(c, rng)?);
        }
        let mut dec2 = Vec::with_capacity(k);
        for _ in 0..k {
            dec2.push(Dec2Stage {
                conv: Conv2d::new(c, c, 3, 1, 1, rng)?,
                bn: BatchNorm::new(c)?,
            });
        }
        let to_rgb = Conv2d::new(c, 3, 3, 1, 1, rng)?;
        Ok(Generator {
            config,
            seed,
            dec1,
            mlp,
            blocks,
            dec2,
            to_rgb,
        })
    }

    /// AdaIN parameters for a batch of style codes: one `([N,C], [N,C])`
    /// scale/shift pair per site. Site order: residual blocks in network
    /// order, first then second site within each block; within the MLP
    /// output vector each site occupies `2*C` columns, scale before shift.
    pub fn mlp_style_params(&self, tape: &mut Tape, zs: Var) -> Result<Vec<(Var, Var)>> {
        let shape = tape.shape(zs).to_vec();
        if shape.len() != 2 || shape[1] != self.config.style_dim {
            return Err(Error::shape(format!(
                "style batch wants [N, {}], got {shape:?}",
                self.config.style_dim
            )));
        }
        let out = self.mlp.forward(tape, zs)?;
        let c = self.config.base_channels;
        let mut params = Vec::with_capacity(self.config.adain_sites());
        for site in 0..self.config.adain_sites() {
            let scale = tape.narrow_cols(out, site * 2 * c, c)?;
            let shift = tape.narrow_cols(out, site * 2 * c + c, c)?;
            params.push((scale, shift));
        }
        Ok(params)
    }

    /// Spec-level convenience: AdaIN parameters of one style code as plain
    /// tensors.
    pub fn style_params(&self, style: &Tensor) -> Result<Vec<AdaInParams>> {
        if style.numel() != self.config.style_dim {
            return Err(Error::shape(format!(
                "style code length {} != {}",
                style.numel(),
                self.config.style_dim
            )));
        }
        let mut tape = Tape::inference();
        let zs_t = Tensor::new(vec![1, self.config.style_dim], style.data().to_vec())?;
        let zs = tape.constant(&zs_t);
        let sites = self.mlp_style_params(&mut tape, zs)?;
        sites
            .into_iter()
            .map(|(s, b)| {
                AdaInParams::new(
                    Tensor::new(vec![self.config.base_channels], tape.value(s).to_vec())?,
                    Tensor::new(vec![self.config.base_channels], tape.value(b).to_vec())?,
                )
            })
            .collect()
    }

    /// Decoder #1 and the stylization stack; shared by all forward modes.
    fn front(&self, tape: &mut Tape, zc: Var, zs: Var) -> Result<(Var, Var)> {
        let n = tape.shape(zc)[0];
        let c = self.config.base_channels;
        let mut x = self.seed.forward(tape, zc)?;
        x = tape.reshape(x, &[n, c, SEED_SIZE, SEED_SIZE])?;
        for (idx, stage) in self.dec1.iter().enumerate() {
            if idx > 0 {
                x = tape.upsample_nearest(x, 2)?;
            }
            x = stage.conv.forward(tape, x)?;
            x = stage.norm.forward(tape, x)?;
            x = tape.relu(x)?;
        }
        let pre_stylization = x;
        let params = self.mlp_style_params(tape, zs)?;
        for (b, block) in self.blocks.iter().enumerate() {
            x = block.forward_nc(tape, x, params[2 * b], params[2 * b + 1])?;
        }
        Ok((pre_stylization, x))
    }

    fn tail_stage(
        tape: &mut Tape,
        conv: &Conv2d,
        x: Var,
    ) -> Result<Var> {
        let up = tape.upsample_nearest(x, 2)?;
        conv.forward(tape, up)
    }

    fn finish(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.to_rgb.forward(tape, x)?;
        tape.tanh(y)
    }

    /// Single-code forward; decoder #2 normalizes with running statistics.
    pub fn forward(&self, tape: &mut Tape, code: &LatentCode) -> Result<Var> {
        Ok(self.forward_traced(tape, code)?.image)
    }

    /// Single-code forward that also exposes decoder #1's output.
    pub fn forward_traced(&self, tape: &mut Tape, code: &LatentCode) -> Result<GeneratorTrace> {
        let (zc, zs) = stack_codes(tape, std::slice::from_ref(code), &self.config)?;
        let (pre_stylization, mut x) = self.front(tape, zc, zs)?;
        for stage in &self.dec2 {
            x = Self::tail_stage(tape, &stage.conv, x)?;
            x = stage.bn.forward_infer(tape, x)?;
            x = tape.relu(x)?;
        }
        let image = self.finish(tape, x)?;
        Ok(GeneratorTrace { pre_stylization, image })
    }

    /// Batched forward with batch-statistics normalization in decoder #2;
    /// running statistics are left untouched. Needs at least two codes.
    pub fn forward_batch(&self, tape: &mut Tape, codes: &[LatentCode]) -> Result<Var> {
        let (zc, zs) = stack_codes(tape, codes, &self.config)?;
        let (_, mut x) = self.front(tape, zc, zs)?;
        for stage in &self.dec2 {
            x = Self::tail_stage(tape, &stage.conv, x)?;
            x = stage.bn.forward_batch(tape, x)?.0;
            x = tape.relu(x)?;
        }
        self.finish(tape, x)
    }

    /// Batched forward with running-statistics normalization in decoder #2,
    /// as used outside training. Accepts any batch size.
    pub fn forward_batch_infer(&self, tape: &mut Tape, codes: &[LatentCode]) -> Result<Var> {
        let (zc, zs) = stack_codes(tape, codes, &self.config)?;
        let (_, mut x) = self.front(tape, zc, zs)?;
        for stage in &self.dec2 {
            x = Self::tail_stage(tape, &stage.conv, x)?;
            x = stage.bn.forward_infer(tape, x)?;
            x = tape.relu(x)?;
        }
        self.finish(tape, x)
    }

    /// Render a batch of codes to an `[N,3,S,S]` tensor on a private
    /// inference tape, normalizing with running statistics.
    pub fn render_batch(&self, codes: &[LatentCode]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let image = self.forward_batch_infer(&mut tape, codes)?;
        tape.to_tensor(image)
    }

    /// Batched training forward: like [`Generator::forward_batch`] but also
    /// folds the batch statistics into the running estimates.
    pub fn forward_batch_train(&mut self, tape: &mut Tape, codes: &[LatentCode]) -> Result<Var> {
        let (zc, zs) = stack_codes(tape, codes, &self.config)?;
        let (_, mut x) = self.front(tape, zc, zs)?;
        for stage in &mut self.dec2 {
            x = Self::tail_stage(tape, &stage.conv, x)?;
            x = stage.bn.forward_train(tape, x)?;
            x = tape.relu(x)?;
        }
        self.finish(tape, x)
    }

    /// Render one code to a `[1,3,S,S]` tensor on a private inference tape.
    pub fn render(&self, code: &LatentCode) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let image = self.forward(&mut tape, code)?;
        tape.to_tensor(image)
    }

    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.seed.state() {
            out.push((format!("seed.{n}"), t));
        }
        for (i, st) in self.dec1.iter().enumerate() {
            for (n, t) in st.conv.state() {
                out.push((format!("dec1.{i}.conv.{n}"), t));
            }
            for (n, t) in st.norm.state() {
                out.push((format!("dec1.{i}.norm.{n}"), t));
            }
        }
        for (l, layer) in self.mlp.layers.iter().enumerate() {
            for (n, t) in layer.state() {
                out.push((format!("mlp.{l}.{n}"), t));
            }
        }
        for (b, block) in self.blocks.iter().enumerate() {
            for (n, t) in block.state() {
                out.push((format!("block.{b}.{n}"), t));
            }
        }
        for (i, st) in self.dec2.iter().enumerate() {
            for (n, t) in st.conv.state() {
                out.push((format!("dec2.{i}.conv.{n}"), t));
            }
            for (n, t) in st.bn.state() {
                out.push((format!("dec2.{i}.bn.{n}"), t));
            }
        }
        for (n, t) in self.to_rgb.state() {
            out.push((format!("to_rgb.{n}"), t));
        }
        out
    }

    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.seed.state_mut() {
            out.push((format!("seed.{n}"), t));
        }
        for (i, st) in self.dec1.iter_mut().enumerate() {
            for (n, t) in st.conv.state_mut() {
                out.push((format!("dec1.{i}.conv.{n}"), t));
            }
            for (n, t) in st.norm.state_mut() {
                out.push((format!("dec1.{i}.norm.{n}"), t));
            }
        }
        for (l, layer) in self.mlp.layers.iter_mut().enumerate() {
            for (n, t) in layer.state_mut() {
                out.push((format!("mlp.{l}.{n}"), t));
            }
        }
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (n, t) in block.state_mut() {
                out.push((format!("block.{b}.{n}"), t));
            }
        }
        for (i, st) in self.dec2.iter_mut().enumerate() {
            for (n, t) in st.conv.state_mut() {
                out.push((format!("dec2.{i}.conv.{n}"), t));
            }
            for (n, t) in st.bn.state_mut() {
                out.push((format!("dec2.{i}.bn.{n}"), t));
            }
        }
        for (n, t) in self.to_rgb.state_mut() {
            out.push((format!("to_rgb.{n}"), t));
        }
        out
    }
}

/// LSGAN critic: downsampling conv stack with doubling widths, leaky ReLU
/// (slope 0.2), no normalization on the first stage, instance norm on the
/// rest, then a linear head to one raw score per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub image_size: usize,
    pub base_channels: usize,
    stages: Vec<DownStage>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct DownStage {
    conv: Conv2d,
    norm: Option<InstanceNorm>,
}

/// Leaky-ReLU slope used throughout the discriminator.
pub const DISC_LEAK: f64 = 0.2;

impl Discriminator {
    pub fn new(image_size: usize, base_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let t = doubling_stages(image_size)?;
        if base_channels == 0 {
            return Err(Error::config("discriminator base_channels must be positive"));
        }
        let n_stages = t + 1; // down to 2x2
        let mut stages = Vec::with_capacity(n_stages);
        let mut in_ch = 3;
        for s in 0..n_stages {
            let out_ch = base_channels << s;
            stages.push(DownStage {
                conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng)?,
                norm: if s == 0 { None } else { Some(InstanceNorm::new(out_ch)?) },
            });
            in_ch = out_ch;
        }
        let head = Linear::new(in_ch * 2 * 2, 1, rng)?;
        Ok(Discriminator {
            image_size,
            base_channels,
            stages,
            head,
        })
    }

    /// Raw scores, `[N,3,S,S] -> [N,1]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.image_size || shape[3] != self.image_size
        {
            return Err(Error::shape(format!(
                "discriminator wants [N,3,{s},{s}], got {shape:?}",
                s = self.image_size
            )));
        }
        let mut h = x;
        for stage in &self.stages {
            h = stage.conv.forward(tape, h)?;
            if let Some(norm) = &stage.norm {
                h = norm.forward(tape, h)?;
            }
            h = tape.leaky_relu(h, DISC_LEAK)?;
            h = tape.avgpool2(h)?;
        }
        let hs = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[hs[0], hs[1] * hs[2] * hs[3]])?;
        self.head.forward(tape, flat)
    }

    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            for (n, t) in st.conv.state() {
                out.push((format!("stage.{i}.conv.{n}"), t));
            }
            if let Some(norm) = &st.norm {
                for (n, t) in norm.state() {
                    out.push((format!("stage.{i}.norm.{n}"), t));
                }
            }
        }
        for (n, t) in self.head.state() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter_mut().enumerate() {
            for (n, t) in st.conv.state_mut() {
                out.push((format!("stage.{i}.conv.{n}"), t));
            }
            if let Some(norm) = &mut st.norm {
                for (n, t) in norm.state_mut() {
                    out.push((format!("stage.{i}.norm.{n}"), t));
                }
            }
        }
        for (n, t) in self.head.state_mut() {
            out.push((format!("head.{n}"), t));
        }
        out
    }
}

/// Image-to-code encoder. The content variant applies instance norm after
/// every convolution (discarding style statistics); the style variant uses
/// no normalization at all. Plain ReLU activations, global average pool,
/// linear head.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub image_size: usize,
    pub base_channels: usize,
    pub out_dim: usize,
    pub with_instance_norm: bool,
    stages: Vec<DownStage>,
    head: Linear,
}

impl Encoder {
    fn build(
        image_size: usize,
        base_channels: usize,
        out_dim: usize,
        with_instance_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let t = doubling_stages(image_size)?;
        if base_channels == 0 || out_dim == 0 {
            return Err(Error::config("encoder dims must be positive"));
        }
        let n_stages = t + 1;
        let mut stages = Vec::with_capacity(n_stages);
        let mut in_ch = 3;
        for s in 0..n_stages {
            let out_ch = base_channels << s;
            stages.push(DownStage {
                conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng)?,
                norm: with_instance_norm.then(|| InstanceNorm::new(out_ch)).transpose()?,
            });
            in_ch = out_ch;
        }
        let head = Linear::new(in_ch, out_dim, rng)?;
        Ok(Encoder {
            image_size,
            base_channels,
            out_dim,
            with_instance_norm,
            stages,
            head,
        })
    }

    /// Content encoder `E_c` (instance norm everywhere).
    pub fn content(
        image_size: usize,
        base_channels: usize,
        content_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(image_size, base_channels, content_dim, true, rng)
    }

    /// Style encoder `E_s` (no normalization).
    pub fn style(
        image_size: usize,
        base_channels: usize,
        style_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(image_size, base_channels, style_dim, false, rng)
    }

    /// Codes for a batch of images, `[N,3,S,S] -> [N,out_dim]`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.image_size || shape[3] != self.image_size
        {
            return Err(Error::shape(format!(
                "encoder wants [N,3,{s},{s}], got {shape:?}",
                s = self.image_size
            )));
        }
        let mut h = x;
        for stage in &self.stages {
            h = stage.conv.forward(tape, h)?;
            if let Some(norm) = &stage.norm {
                h = norm.forward(tape, h)?;
            }
            h = tape.relu(h)?;
            h = tape.avgpool2(h)?;
        }
        let pooled = tape.spatial_mean(h)?;
        self.head.forward(tape, pooled)
    }

    /// Encode a single `[1,3,S,S]` image on a private tape.
    pub fn encode_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(image);
        let code = self.encode(&mut tape, x)?;
        let flat = tape.value(code).to_vec();
        Tensor::new(vec![self.out_dim], flat)
    }

    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            for (n, t) in st.conv.state() {
                out.push((format!("stage.{i}.conv.{n}"), t));
            }
            if let Some(norm) = &st.norm {
                for (n, t) in norm.state() {
                    out.push((format!("stage.{i}.norm.{n}"), t));
                }
            }
        }
        for (n, t) in self.head.state() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter_mut().enumerate() {
            for (n, t) in st.conv.state_mut() {
                out.push((format!("stage.{i}.conv.{n}"), t));
            }
            if let Some(norm) = &mut st.norm {
                for (n, t) in norm.state_mut() {
                    out.push((format!("stage.{i}.norm.{n}"), t));
                }
            }
        }
        for (n, t) in self.head.state_mut() {
            out.push((format!("head.{n}"), t));
        }
        out
    }
}

/// Channel widths of the fixed feature network's four stages.
pub const FEATURE_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Seed for the fixed feature weights; independent of any run seed so the
/// feature space is identical across all runs and machines.
const FEATURE_SEED: u64 = 0xF1ED_5EED;

/// Fixed feature network standing in for a pretrained perceptual backbone:
/// four stages of conv3x3 -> ReLU -> 2x2 average pool with widths
/// 16/32/64/128, weights drawn once from a seeded scaled-Gaussian init
/// (gain sqrt 2) and never trained. Stage `l` output has spatial size
/// `S / 2^l`, so requesting stage `l` requires `S` divisible by `2^l`.
#[derive(Debug, Clone)]
pub struct LossNetwork {
    stages: Vec<Conv2d>,
}

impl LossNetwork {
    /// The canonical frozen instance. Both calls in the same process and
    /// calls in different processes produce bitwise identical weights.
    pub fn fixed() -> Self {
        let mut rng: ChaCha8Rng = crate::rng::stream(FEATURE_SEED, crate::rng::Purpose::Init, 0);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for &w in &FEATURE_WIDTHS {
            let mut conv = Conv2d::new(in_ch, w, 3, 1, 1, &mut rng).expect("static shapes");
            conv.weight.set_requires_grad(false);
            conv.bias.set_requires_grad(false);
            stages.push(conv);
            in_ch = w;
        }
        LossNetwork { stages }
    }

    /// Build from externally supplied weights (e.g. exported pretrained
    /// filters), keyed `stage{1..4}.weight` / `stage{1..4}.bias` with the
    /// exact canonical shapes.
    pub fn from_tensors(
        mut tensors: std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut net = LossNetwork::fixed();
        for (i, stage) in net.stages.iter_mut().enumerate() {
            for (field, tensor) in [("weight", &mut stage.weight), ("bias", &mut stage.bias)] {
                let key = format!("stage{}.{field}", i + 1);
                let src = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::format(format!("feature weights missing {key}")))?;
                if src.shape() != tensor.shape() {
                    return Err(Error::format(format!(
                        "feature weights {key}: shape {:?}, want {:?}",
                        src.shape(),
                        tensor.shape()
                    )));
                }
                *tensor = src;
                tensor.set_requires_grad(false);
            }
        }
        if let Some((key, _)) = tensors.into_iter().next() {
            return Err(Error::format(format!("feature weights: unexpected entry {key}")));
        }
        Ok(net)
    }

    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (n, t) in stage.state() {
                out.push((format!("stage{}.{n}", i + 1), t));
            }
        }
        out
    }

    /// Post-pool activations of the requested stages (1-based, ascending
    /// result order regardless of input order). Gradients flow to `x` but
    /// never to the fixed weights.
    pub fn features(&self, tape: &mut Tape, x: Var, stages: &[usize]) -> Result<Vec<Var>> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!(
                "feature network wants [N,3,H,W], got {shape:?}"
            )));
        }
        if stages.is_empty() {
            return Err(Error::config("no feature stages requested"));
        }
        let mut want = stages.to_vec();
        want.sort_unstable();
        want.dedup();
        if want.len() != stages.len() {
            return Err(Error::config(format!("duplicate feature stages in {stages:?}")));
        }
        let &max_stage = want.last().expect("non-empty");
        if want[0] < 1 || max_stage > 4 {
            return Err(Error::config(format!(
                "feature stages must lie in 1..=4, got {stages:?}"
            )));
        }
        for &(mut s) in &[shape[2], shape[3]] {
            for stage in 1..=max_stage {
                if s % 2 != 0 {
                    return Err(Error::shape(format!(
                        "input {}x{} too small for feature stage {stage}",
                        shape[2], shape[3]
                    )));
                }
                s /= 2;
            }
        }
        let mut h = x;
        let mut out = Vec::with_capacity(want.len());
        for (i, conv) in self.stages.iter().take(max_stage).enumerate() {
            h = conv.forward(tape, h)?;
            h = tape.relu(h)?;
            h = tape.avgpool2(h)?;
            if want.contains(&(i + 1)) {
                out.push(h);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 8,
            base_channels: 4,
            content_dim: 6,
            style_dim: 3,
            split: (1, 1, 1),
            mlp_hidden: 8,
        }
    }

    fn rngp(i: u64) -> rand_chacha::ChaCha8Rng {
        stream(42, Purpose::Init, i)
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let bad_size = GeneratorConfig { image_size: 20, ..Default::default() };
        assert!(bad_size.validate().is_err());
        let bad_split = GeneratorConfig { split: (2, 4, 1), ..Default::default() };
        assert!(bad_split.validate().is_err());
        let no_blocks = GeneratorConfig { split: (3, 0, 1), ..Default::default() };
        assert!(no_blocks.validate().is_err());
        for split in [(3, 4, 1), (2, 4, 2), (1, 4, 3)] {
            let cfg = GeneratorConfig { split, ..Default::default() };
            assert!(cfg.validate().is_ok(), "{split:?}");
        }
    }

    #[test]
    fn mlp_param_vector_layout() {
        let cfg = small_config();
        let g = Generator::new(cfg.clone(), &mut rngp(0)).unwrap();
        assert_eq!(cfg.mlp_output_dim(), 2 * 2 * 4);
        let style = Tensor::randn(&[3], 1.0, &mut rngp(1)).unwrap();
        let params = g.style_params(&style).unwrap();
        assert_eq!(params.len(), cfg.adain_sites());
        for p in &params {
            assert_eq!(p.scale.numel(), 4);
            assert_eq!(p.shift.numel(), 4);
        }
    }

    #[test]
    fn distinct_styles_give_distinct_params() {
        let g = Generator::new(small_config(), &mut rngp(2)).unwrap();
        let mut rng = rngp(3);
        for _ in 0..100 {
            let a = Tensor::randn(&[3], 1.0, &mut rng).unwrap();
            let b = Tensor::randn(&[3], 1.0, &mut rng).unwrap();
            let pa = g.style_params(&a).unwrap();
            let pb = g.style_params(&b).unwrap();
            let linf = pa
                .iter()
                .zip(&pb)
                .flat_map(|(x, y)| {
                    x.scale
                        .data()
                        .iter()
                        .zip(y.scale.data())
                        .chain(x.shift.data().iter().zip(y.shift.data()))
                        .map(|(u, v)| (u - v).abs())
                })
                .fold(0.0f64, f64::max);
            assert!(linf > 0.0);
        }
    }

    #[test]
    fn zero_mlp_gives_zero_params() {
        let mut g = Generator::new(small_config(), &mut rngp(4)).unwrap();
        for layer in &mut g.mlp.layers {
            layer.weight.data_mut().fill(0.0);
            layer.bias.data_mut().fill(0.0);
        }
        let style = Tensor::randn(&[3], 1.0, &mut rngp(5)).unwrap();
        for p in g.style_params(&style).unwrap() {
            assert!(p.scale.data().iter().all(|&v| v == 0.0));
            assert!(p.shift.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fresh_generator_starts_at_identity_adain() {
        // Zero hidden-layer output would still leave bias: scale 1, shift 0.
        let cfg = small_config();
        let mut g = Generator::new(cfg, &mut rngp(6)).unwrap();
        for layer in &mut g.mlp.layers {
            layer.weight.data_mut().fill(0.0);
        }
        for l in 0..4 {
            g.mlp.layers[l].bias.data_mut().fill(0.0);
        }
        let style = Tensor::randn(&[3], 1.0, &mut rngp(7)).unwrap();
        for p in g.style_params(&style).unwrap() {
            assert!(p.scale.data().iter().all(|&v| v == 1.0));
            assert!(p.shift.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn generator_output_shape_and_range() {
        let cfg = GeneratorConfig {
            image_size: 16,
            base_channels: 6,
            content_dim: 8,
            style_dim: 4,
            split: (2, 2, 1),
            mlp_hidden: 16,
        };
        let g = Generator::new(cfg, &mut rngp(8)).unwrap();
        let code = LatentCode::sample(8, 4, &mut rngp(9)).unwrap();
        let img = g.render(&code).unwrap();
        assert_eq!(img.shape(), &[1, 3, 16, 16]);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // Determinism.
        let again = g.render(&code).unwrap();
        assert_eq!(img.data(), again.data());
    }

    #[test]
    fn decoder1_is_bitwise_independent_of_style() {
        let g = Generator::new(small_config(), &mut rngp(10)).unwrap();
        let mut rng = rngp(11);
        let content = Tensor::randn(&[6], 1.0, &mut rng).unwrap();
        let reference = {
            let code = LatentCode::new(content.clone(), Tensor::randn(&[3], 1.0, &mut rng).unwrap())
                .unwrap();
            let mut tape = Tape::inference();
            let trace = g.forward_traced(&mut tape, &code).unwrap();
            tape.value(trace.pre_stylization).to_vec()
        };
        for _ in 0..10 {
            let code = LatentCode::new(content.clone(), Tensor::randn(&[3], 1.0, &mut rng).unwrap())
                .unwrap();
            let mut tape = Tape::inference();
            let trace = g.forward_traced(&mut tape, &code).unwrap();
            assert_eq!(tape.value(trace.pre_stylization), &reference[..]);
        }
    }

    #[test]
    fn discriminator_shape_determinism_sensitivity() {
        let d = Discriminator::new(16, 4, &mut rngp(12)).unwrap();
        let x = Tensor::randn(&[2, 3, 16, 16], 0.5, &mut rngp(13)).unwrap();
        let run = |input: &Tensor| {
            let mut tape = Tape::inference();
            let xv = tape.constant(input);
            let s = d.forward(&mut tape, xv).unwrap();
            assert_eq!(tape.shape(s), &[2, 1]);
            tape.value(s).to_vec()
        };
        let s1 = run(&x);
        assert_eq!(s1, run(&x));
        let mut bumped = x.clone();
        bumped.data_mut()[40] += 1e-2;
        let s2 = run(&bumped);
        assert!((s1[0] - s2[0]).abs() > 0.0);
        // Wrong spatial size is rejected.
        let small = Tensor::zeros(&[1, 3, 8, 8]).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.constant(&small);
        assert!(d.forward(&mut tape, xv).is_err());
    }

    #[test]
    fn style_encoder_sees_constant_shifts() {
        let e = Encoder::style(16, 4, 3, &mut rngp(14)).unwrap();
        let x = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rngp(15)).unwrap();
        let a = e.encode_tensor(&x).unwrap();
        assert_eq!(a.numel(), 3);
        let shifted = Tensor::new(
            vec![1, 3, 16, 16],
            x.data().iter().map(|v| v + 0.2).collect(),
        )
        .unwrap();
        let b = e.encode_tensor(&shifted).unwrap();
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(u, v)| (u - v).abs())
            .sum();
        assert!(diff > 1e-6, "style code must react to global shifts");
    }

    #[test]
    fn content_encoder_ignores_global_affine_restyle() {
        let e = Encoder::content(16, 4, 5, &mut rngp(16)).unwrap();
        let x = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rngp(17)).unwrap();
        let a = e.encode_tensor(&x).unwrap();
        assert_eq!(a.numel(), 5);
        let restyled = Tensor::new(
            vec![1, 3, 16, 16],
            x.data().iter().map(|v| 1.4 * v).collect(),
        )
        .unwrap();
        let b = e.encode_tensor(&restyled).unwrap();
        let rel = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt()
            / a.data().iter().map(|u| u * u).sum::<f64>().sqrt();
        assert!(rel < 1e-2, "relative change {rel}");
    }

    #[test]
    fn feature_network_is_fixed_and_shaped() {
        let phi1 = LossNetwork::fixed();
        let phi2 = LossNetwork::fixed();
        for ((_, a), (_, b)) in phi1.named_state().iter().zip(phi2.named_state().iter()) {
            assert_eq!(a.data(), b.data());
        }
        let x = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut rngp(18)).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.constant(&x);
        let feats = phi1.features(&mut tape, xv, &[1, 2, 3, 4]).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|f| tape.shape(*f).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 16, 16, 16],
                vec![1, 32, 8, 8],
                vec![1, 64, 4, 4],
                vec![1, 128, 2, 2],
            ]
        );
        // Identical input gives identical features.
        let xv2 = tape.constant(&x);
        let feats2 = phi1.features(&mut tape, xv2, &[1, 2, 3, 4]).unwrap();
        for (a, b) in feats.iter().zip(&feats2) {
            assert_eq!(tape.value(*a), tape.value(*b));
        }
    }

    #[test]
    fn feature_network_stage_validation() {
        let phi = LossNetwork::fixed();
        let x8 = Tensor::zeros(&[1, 3, 8, 8]).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.constant(&x8);
        assert!(phi.features(&mut tape, xv, &[1, 2, 3]).is_ok());
        assert!(phi.features(&mut tape, xv, &[4]).is_err());
        assert!(phi.features(&mut tape, xv, &[0]).is_err());
        assert!(phi.features(&mut tape, xv, &[5]).is_err());
        assert!(phi.features(&mut tape, xv, &[]).is_err());
        assert!(phi.features(&mut tape, xv, &[2, 2]).is_err());
    }

    #[test]
    fn feature_network_collects_no_own_gradients() {
        let phi = LossNetwork::fixed();
        let x = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rngp(19)).unwrap().with_requires_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let feats = phi.features(&mut tape, xv, &[1, 2]).unwrap();
        let sq = tape.mul(feats[1], feats[1]).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.grads_by_source();
        assert!(grads.contains_key(&x.id()), "input gradient must exist");
        for (_, t) in phi.named_state() {
            assert!(!grads.contains_key(&t.id()), "fixed weights must not train");
        }
    }

    #[test]
    fn feature_gradient_wrt_input_verifies() {
        use crate::tensor::check::{check_gradients, GradCheck};
        let phi = LossNetwork::fixed();
        let x = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rngp(20)).unwrap();
        let case: GradCheck = Box::new(|tape, vs| {
            let feats = phi.features(tape, vs[0], &[1, 2])?;
            let sq = tape.mul(feats[1], feats[1])?;
            tape.sum_all(sq)
        });
        let worst = check_gradients(&[&x], &case).unwrap();
        assert!(worst < 1e-4, "feature grad rel error {worst}");
    }

    #[test]
    fn generator_parameter_count_matches_hand_count() {
        let g = Generator::new(small_config(), &mut rngp(21)).unwrap();
        // seed 6->64: 384 + 64;           dec1: conv 4x4x9 + 4 = 148, IN 8
        // mlp: (3->8) 32, (8->8) 72 x3, (8->16) 144;  block: 2 x 148
        // dec2: conv 148, bn gamma/beta 8 (+ running stats 8, not trainable)
        // to_rgb 4->3: 108 + 3
        let trainable: usize = g
            .named_state()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum();
        let expected = (384 + 64)
            + (144 + 4 + 8)
            + (32 + 72 + 72 + 72 + 144)
            + 2 * (144 + 4)
            + (144 + 4 + 8)
            + (108 + 3);
        assert_eq!(trainable, expected);
        let total: usize = g.named_state().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(total, expected + 8, "running stats are state but not trainable");
    }

    #[test]
    fn generator_gradients_verify_end_to_end() {
        use crate::tensor::check::check_model_gradients;
        let mut g = Generator::new(small_config(), &mut rngp(22)).unwrap();
        let codes = vec![
            LatentCode::sample(6, 3, &mut rngp(23)).unwrap(),
            LatentCode::sample(6, 3, &mut rngp(24)).unwrap(),
        ];
        // Objective: mean of squared pixels of the batched forward.
        let eval = |g: &Generator| -> Result<f64> {
            let mut tape = Tape::inference();
            let img = g.forward_batch(&mut tape, &codes)?;
            let sq = tape.mul(img, img)?;
            let m = tape.mean_all(sq)?;
            tape.item(m)
        };
        let grads = {
            let mut tape = Tape::new();
            let img = g.forward_batch(&mut tape, &codes).unwrap();
            let sq = tape.mul(img, img).unwrap();
            let m = tape.mean_all(sq).unwrap();
            tape.backward(m).unwrap();
            tape.grads_by_source()
        };
        let worst = check_model_gradients(
            &mut g,
            &Generator::named_state_mut,
            &eval,
            &grads,
            &[
                ("seed.weight", 12),
                ("dec1.0.conv.weight", 12),
                ("dec1.0.norm.gamma", 4),
                ("mlp.0.weight", 8),
                ("mlp.4.bias", 8),
                ("block.0.conv1.weight", 12),
                ("block.0.conv2.bias", 4),
                ("dec2.0.conv.weight", 12),
                ("dec2.0.bn.gamma", 4),
                ("dec2.0.bn.beta", 4),
                ("to_rgb.weight", 12),
                ("to_rgb.bias", 3),
            ],
        )
        .unwrap();
        assert!(worst < 1e-4, "generator rel error {worst}");
    }
}
