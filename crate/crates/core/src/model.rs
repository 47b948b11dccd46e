//! The convolution and attention mixer network.
//!
//! ```text
//! patch [N,3,s,s]
//!   -> stem: 3 x (3x3 conv + bias, GELU)            [N,C,s,s]
//!   -> blocks: (PCAM -> GFFN) x N
//!        PCAM = LayerNorm_c(shift_conv(x) + patch_attention(x))
//!        GFFN = W0(GELU(W1 x) * (DW3(W2 x) + DW5(W2 x))) + x
//!   -> flatten -> linear -> 2 logits
//! ```
//!
//! Parameter containers are generic over the leaf type so the same layout
//! holds owned tensors (`CAMixer<Tensor>`) or tape handles (`CAMixer<Var>`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preclassify::Preclassifier;
use crate::tensor::{Tape, Tensor, Var, GATHER_ZERO};

/// Number of channel groups in the shift operation.
pub const SHIFT_GROUPS: usize = 5;
/// Attention token side in pixels.
pub const TOKEN_SIDE: usize = 3;
/// GFFN hidden expansion.
pub const GFFN_EXPANSION: usize = 2;

const MODEL_MAGIC: &[u8; 4] = b"CAMX";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPcam,
    NoGffn,
    /// Stem and head only.
    Basic,
    /// Full network, plain FCM preclassification.
    FcmPrecls,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Basic, Variant::NoPcam, Variant::NoGffn, Variant::FcmPrecls, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPcam => "no_pcam",
            Variant::NoGffn => "no_gffn",
            Variant::Basic => "basic",
            Variant::FcmPrecls => "fcm_precls",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn uses_pcam(self) -> bool {
        matches!(self, Variant::Full | Variant::NoGffn | Variant::FcmPrecls)
    }

    pub fn uses_gffn(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPcam | Variant::FcmPrecls)
    }

    pub fn preclassifier(self) -> Preclassifier {
        match self {
            Variant::FcmPrecls => Preclassifier::Fcm,
            _ => Preclassifier::Hierarchical,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub channels: usize,
    /// Mixing blocks actually instantiated.
    pub blocks: usize,
    /// Shift-convolution expansion ratio.
    pub beta: usize,
    pub patch_radius: usize,
    pub pcam: bool,
    pub gffn: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            channels: 10,
            blocks: 3,
            beta: 2,
            patch_radius: 3,
            pcam: true,
            gffn: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(mut self, variant: Variant) -> Self {
        self.pcam = variant.uses_pcam();
        self.gffn = variant.uses_gffn();
        if variant == Variant::Basic {
            self.blocks = 0;
        }
        self
    }

    pub fn side(&self) -> usize {
        2 * self.patch_radius + 1
    }

    /// Side after zero padding up to a multiple of the token side.
    pub fn padded_side(&self) -> usize {
        self.side().div_ceil(TOKEN_SIDE) * TOKEN_SIDE
    }

    pub fn token_dim(&self) -> usize {
        TOKEN_SIDE * TOKEN_SIDE * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.beta == 0 {
            return Err(Error::Config("channel counts and beta must be positive".into()));
        }
        if self.blocks > 0 && self.pcam && !(self.beta * self.channels).is_multiple_of(SHIFT_GROUPS) {
            return Err(Error::Config(format!(
                "beta * channels = {} must be divisible by {SHIFT_GROUPS} shift groups",
                self.beta * self.channels
            )));
        }
        if self.blocks > 0 && !self.pcam && !self.gffn {
            return Err(Error::Config("a mixing block needs PCAM, GFFN or both".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

/// `w1`: `[βC, C, 1, 1]`, `w2`: `[C, βC, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftConvParams<P = Tensor> {
    pub w1: P,
    pub w2: P,
}

/// Token projections, each `[D, D]` with `D = 9C`. Tokens are row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P = Tensor> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<P = Tensor> {
    pub gamma: P,
    pub beta: P,
}

/// `w1`, `w2`: `[2C, C, 1, 1]`; `wd3`: `[2C, 1, 3, 3]`; `wd5`: `[2C, 1, 5, 5]`;
/// `w0`: `[C, 2C, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GffnParams<P = Tensor> {
    pub w1: P,
    pub w2: P,
    pub wd3: P,
    pub wd5: P,
    pub w0: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcamParams<P = Tensor> {
    pub shift: ShiftConvParams<P>,
    pub attention: AttentionParams<P>,
    pub norm: NormParams<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixingBlock<P = Tensor> {
    pub pcam: Option<PcamParams<P>>,
    pub gffn: Option<GffnParams<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CAMixer<P = Tensor> {
    pub config: ModelConfig,
    pub stem: Vec<ConvLayer<P>>,
    pub blocks: Vec<MixingBlock<P>>,
    /// `[C·s·s, 2]` weight and `[2]` bias.
    pub head: ConvLayer<P>,
}

pub type CAMixerModel = CAMixer<Tensor>;

impl<P> CAMixer<P> {
    /// Parameters in declaration order: stem, blocks (shift, attention, norm,
    /// gffn), head.
    pub fn params(&self) -> Vec<&P> {
        let mut out = Vec::new();
        for l in &self.stem {
            out.extend([&l.weight, &l.bias]);
        }
        for b in &self.blocks {
            if let Some(p) = &b.pcam {
                out.extend([&p.shift.w1, &p.shift.w2]);
                out.extend([&p.attention.wq, &p.attention.wk, &p.attention.wv]);
                out.extend([&p.norm.gamma, &p.norm.beta]);
            }
            if let Some(g) = &b.gffn {
                out.extend([&g.w1, &g.w2, &g.wd3, &g.wd5, &g.w0]);
            }
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        for l in &mut self.stem {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        for b in &mut self.blocks {
            if let Some(p) = &mut b.pcam {
                out.extend([&mut p.shift.w1, &mut p.shift.w2]);
                out.extend([&mut p.attention.wq, &mut p.attention.wk, &mut p.attention.wv]);
                out.extend([&mut p.norm.gamma, &mut p.norm.beta]);
            }
            if let Some(g) = &mut b.gffn {
                out.extend([&mut g.w1, &mut g.w2, &mut g.wd3, &mut g.wd5, &mut g.w0]);
            }
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Builds a same-layout container by visiting parameters in declaration order.
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> CAMixer<Q> {
        let stem = self.stem.iter().map(|l| ConvLayer { weight: f(&l.weight), bias: f(&l.bias) }).collect();
        let blocks = self
            .blocks
            .iter()
            .map(|b| MixingBlock {
                pcam: b.pcam.as_ref().map(|p| PcamParams {
                    shift: ShiftConvParams { w1: f(&p.shift.w1), w2: f(&p.shift.w2) },
                    attention: AttentionParams {
                        wq: f(&p.attention.wq),
                        wk: f(&p.attention.wk),
                        wv: f(&p.attention.wv),
                    },
                    norm: NormParams { gamma: f(&p.norm.gamma), beta: f(&p.norm.beta) },
                }),
                gffn: b.gffn.as_ref().map(|g| GffnParams {
                    w1: f(&g.w1),
                    w2: f(&g.w2),
                    wd3: f(&g.wd3),
                    wd5: f(&g.wd5),
                    w0: f(&g.w0),
                }),
            })
            .collect();
        let head = ConvLayer { weight: f(&self.head.weight), bias: f(&self.head.bias) };
        CAMixer { config: self.config.clone(), stem, blocks, head }
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy)]
enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    He(usize),
    Zeros,
    Ones,
}

/// Parameter shapes and initializers in declaration order.
fn layout(cfg: &ModelConfig) -> CAMixer<(Vec<usize>, Init)> {
    let c = cfg.channels;
    let s = cfg.side();
    let d = cfg.token_dim();
    let hidden = GFFN_EXPANSION * c;
    let bc = cfg.beta * c;
    let conv = |cout: usize, cin: usize, k: usize| (vec![cout, cin, k, k], Init::He(cin * k * k));
    let vector = |n: usize, init: Init| (vec![n], init);
    let stem = (0..3)
        .map(|i| {
            let cin = if i == 0 { cfg.in_channels } else { c };
            ConvLayer { weight: conv(c, cin, 3), bias: vector(c, Init::Zeros) }
        })
        .collect();
    let blocks = (0..cfg.blocks)
        .map(|_| MixingBlock {
            pcam: cfg.pcam.then(|| PcamParams {
                shift: ShiftConvParams { w1: conv(bc, c, 1), w2: conv(c, bc, 1) },
                attention: AttentionParams {
                    wq: (vec![d, d], Init::He(d)),
                    wk: (vec![d, d], Init::He(d)),
                    wv: (vec![d, d], Init::He(d)),
                },
                norm: NormParams { gamma: vector(c, Init::Ones), beta: vector(c, Init::Zeros) },
            }),
            gffn: cfg.gffn.then(|| GffnParams {
                w1: conv(hidden, c, 1),
                w2: conv(hidden, c, 1),
                wd3: conv(hidden, 1, 3),
                wd5: conv(hidden, 1, 5),
                // residual branch starts closed
                w0: (vec![c, hidden, 1, 1], Init::Zeros),
            }),
        })
        .collect();
    CAMixer {
        config: cfg.clone(),
        stem,
        blocks,
        head: ConvLayer { weight: (vec![c * s * s, 2], Init::He(c * s * s)), bias: vector(2, Init::Zeros) },
    }
}

impl CAMixerModel {
    /// Seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(layout(&config).map(|(shape, init)| {
            let n: usize = shape.iter().product();
            let data = match *init {
                Init::He(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Tensor::new(shape, data).expect("layout shapes are consistent")
        }))
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> CAMixer<Var> {
        self.map(|t| {
            let mut leaf = t.clone();
            leaf.requires_grad = requires_grad;
            tape.leaf(&leaf)
        })
    }

    /// Inference-only forward pass returning `[N, 2]` logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.leaf(batch);
        let logits = params.forward(&mut tape, x)?;
        Ok(tape.tensor(logits))
    }

    /// Serializes as `CAMX`, format version (u32 LE), config JSON length
    /// (u32 LE), config JSON, then every parameter as LE f64 in declaration order.
    pub fn save(&self) -> Vec<u8> {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(12 + json.len() + self.param_count() * 8);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        for p in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::corrupt("model file shorter than its header"));
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Format("not a CAMX model file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {version}, expected {MODEL_FORMAT_VERSION}"
            )));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json =
            bytes.get(12..12 + json_len).ok_or_else(|| Error::corrupt("model config block is truncated"))?;
        let config: ModelConfig =
            serde_json::from_slice(json).map_err(|e| Error::corrupt(format!("model config: {e}")))?;
        config.validate()?;
        let shapes = layout(&config);
        let expected: usize = shapes.params().iter().map(|(s, _)| s.iter().product::<usize>()).sum();
        let body = &bytes[12 + json_len..];
        if body.len() != expected * 8 {
            return Err(Error::corrupt(format!(
                "model parameters have {} bytes, expected {}",
                body.len(),
                expected * 8
            )));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        Ok(shapes.map(|(shape, _)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            Tensor::new(shape, data).expect("length checked above")
        }))
    }
}

impl CAMixer<Var> {
    /// Forward pass on `[N, in_channels, s, s]` patches, giving `[N, 2]` logits.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_with_features(tape, x, &mut |_, _| {})
    }

    /// Like [`forward`](Self::forward), calling `hook(block, var)` on each
    /// PCAM output.
    pub fn forward_with_features(
        &self,
        tape: &mut Tape,
        x: Var,
        hook: &mut dyn FnMut(usize, Var),
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = cfg.side();
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != s || shape[3] != s {
            return Err(Error::Shape {
                op: "forward (patch batch)",
                lhs: shape,
                rhs: vec![0, cfg.in_channels, s, s],
            });
        }
        let n = shape[0];
        let mut h = x;
        for layer in &self.stem {
            h = tape.conv2d(h, layer.weight, 1, 1)?;
            h = tape.bias_add(h, layer.bias, 1)?;
            h = tape.gelu(h);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(p) = &block.pcam {
                h = pcam(tape, h, p)?;
                hook(i, h);
            }
            if let Some(g) = &block.gffn {
                h = gffn(tape, h, g)?;
            }
        }
        let flat = tape.reshape(h, &[n, cfg.channels * s * s])?;
        let logits = tape.matmul(flat, self.head.weight)?;
        tape.bias_add(logits, self.head.bias, 1)
    }
}

/// Parameter-free shift of five equal channel groups: left, right, up, down,
/// identity. Vacated border pixels are zero.
pub fn shift(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || !shape[1].is_multiple_of(SHIFT_GROUPS) || shape[1] == 0 {
        return Err(Error::invalid(format!(
            "shift needs NCHW input with channels divisible by {SHIFT_GROUPS}, got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let group = c / SHIFT_GROUPS;
    let mut map = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            // source offset (dy, dx) for out[y][x] = in[y + dy][x + dx]
            let (dy, dx): (isize, isize) = match ch / group {
                0 => (0, 1),
                1 => (0, -1),
                2 => (1, 0),
                3 => (-1, 0),
                _ => (0, 0),
            };
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx = xx as isize + dx;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        map.push(GATHER_ZERO);
                    } else {
                        map.push(base + sy as usize * w + sx as usize);
                    }
                }
            }
        }
    }
    tape.gather(x, &shape, map)
}

/// `W2(shift(W1(x)))` with 1x1 convolutions.
pub fn shift_conv(tape: &mut Tape, x: Var, p: &ShiftConvParams<Var>) -> Result<Var> {
    let cin = tape.shape(x).get(1).copied().unwrap_or(0);
    let w1 = tape.shape(p.w1).to_vec();
    let w2 = tape.shape(p.w2).to_vec();
    if w1.len() != 4 || w2.len() != 4 || w1[1] != cin || w2[1] != w1[0] || w2[0] != cin {
        return Err(Error::shape("shift_conv", tape.shape(x), &w1));
    }
    let y = tape.conv2d(x, p.w1, 1, 0)?;
    let y = shift(tape, y)?;
    tape.conv2d(y, p.w2, 1, 0)
}

/// Gather maps between an NCHW image and `[N, T, 9C]` tokens of its
/// zero-padded 3x3 patches. Token features are ordered (channel, dy, dx).
struct TokenGrid {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    rows: usize,
    cols: usize,
}

impl TokenGrid {
    fn new(shape: &[usize]) -> Self {
        let (h, w) = (shape[2], shape[3]);
        let ph = (TOKEN_SIDE - h % TOKEN_SIDE) % TOKEN_SIDE;
        let pw = (TOKEN_SIDE - w % TOKEN_SIDE) % TOKEN_SIDE;
        TokenGrid {
            n: shape[0],
            c: shape[1],
            h,
            w,
            top: ph / 2,
            left: pw / 2,
            rows: (h + ph) / TOKEN_SIDE,
            cols: (w + pw) / TOKEN_SIDE,
        }
    }

    fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    fn dim(&self) -> usize {
        self.c * TOKEN_SIDE * TOKEN_SIDE
    }

    /// Image position covered by (token, feature), if not padding.
    fn pixel(&self, t: usize, f: usize) -> Option<(usize, usize, usize)> {
        let ch = f / (TOKEN_SIDE * TOKEN_SIDE);
        let dy = (f / TOKEN_SIDE) % TOKEN_SIDE;
        let dx = f % TOKEN_SIDE;
        let y = (t / self.cols * TOKEN_SIDE + dy).checked_sub(self.top)?;
        let x = (t % self.cols * TOKEN_SIDE + dx).checked_sub(self.left)?;
        (y < self.h && x < self.w).then_some((ch, y, x))
    }

    fn tokenize(&self) -> Vec<usize> {
        let (t, d) = (self.tokens(), self.dim());
        let mut map = Vec::with_capacity(self.n * t * d);
        for b in 0..self.n {
            for tok in 0..t {
                for f in 0..d {
                    map.push(match self.pixel(tok, f) {
                        Some((ch, y, x)) => ((b * self.c + ch) * self.h + y) * self.w + x,
                        None => GATHER_ZERO,
                    });
                }
            }
        }
        map
    }

    fn untokenize(&self) -> Vec<usize> {
        let (t, d) = (self.tokens(), self.dim());
        let mut map = vec![GATHER_ZERO; self.n * self.c * self.h * self.w];
        for b in 0..self.n {
            for tok in 0..t {
                for f in 0..d {
                    if let Some((ch, y, x)) = self.pixel(tok, f) {
                        map[((b * self.c + ch) * self.h + y) * self.w + x] = (b * t + tok) * d + f;
                    }
                }
            }
        }
        map
    }
}

/// Single-head attention over non-overlapping 3x3 patch tokens.
/// Returns the output image and the `[N, T, T]` attention weights.
pub fn patch_attention_with_weights(tape: &mut Tape, x: Var, p: &AttentionParams<Var>) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("patch_attention", &shape, tape.shape(p.wq)));
    }
    let grid = TokenGrid::new(&shape);
    let d = grid.dim();
    for w in [p.wq, p.wk, p.wv] {
        if tape.shape(w).len() != 2 || tape.shape(w)[0] != d {
            return Err(Error::shape("patch_attention", &shape, tape.shape(w)));
        }
    }
    if tape.shape(p.wv)[1] != d {
        return Err(Error::shape("patch_attention (value dim)", &shape, tape.shape(p.wv)));
    }
    if tape.shape(p.wq)[1] != tape.shape(p.wk)[1] {
        return Err(Error::shape("patch_attention (qk dims)", tape.shape(p.wq), tape.shape(p.wk)));
    }
    let qk_dim = tape.shape(p.wq)[1];
    let tokens = tape.gather(x, &[grid.n, grid.tokens(), d], grid.tokenize())?;
    let q = tape.matmul(tokens, p.wq)?;
    let k = tape.matmul(tokens, p.wk)?;
    let v = tape.matmul(tokens, p.wv)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (qk_dim as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    let mixed = tape.matmul(weights, v)?;
    let out = tape.gather(mixed, &shape, grid.untokenize())?;
    Ok((out, weights))
}

pub fn patch_attention(tape: &mut Tape, x: Var, p: &AttentionParams<Var>) -> Result<Var> {
    Ok(patch_attention_with_weights(tape, x, p)?.0)
}

/// Parallel shift convolution and attention, summed and layer-normalized
/// over channels per pixel.
pub fn pcam(tape: &mut Tape, x: Var, p: &PcamParams<Var>) -> Result<Var> {
    let local = shift_conv(tape, x, &p.shift)?;
    let global = patch_attention(tape, x, &p.attention)?;
    let fused = tape.add(local, global)?;
    tape.layer_norm(fused, p.norm.gamma, p.norm.beta, 1)
}

/// Gated feed-forward network with a residual connection.
pub fn gffn(tape: &mut Tape, x: Var, p: &GffnParams<Var>) -> Result<Var> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    let hidden = tape.shape(p.w2).first().copied().unwrap_or(0);
    if tape.shape(p.w1)[0] != hidden || tape.shape(p.w0)[1] != hidden || tape.shape(p.w0)[0] != c {
        return Err(Error::shape("gffn", tape.shape(x), tape.shape(p.w0)));
    }
    let expanded = tape.conv2d(x, p.w2, 1, 0)?;
    let local3 = tape.conv2d(expanded, p.wd3, hidden, 1)?;
    let local5 = tape.conv2d(expanded, p.wd5, hidden, 2)?;
    let phi = tape.add(local3, local5)?;
    let gate = tape.conv2d(x, p.w1, 1, 0)?;
    let gate = tape.gelu(gate);
    let gated = tape.mul(gate, phi)?;
    let y = tape.conv2d(gated, p.w0, 1, 0)?;
    tape.add(y, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn small_config(blocks: usize) -> ModelConfig {
        ModelConfig { channels: 5, blocks, beta: 2, patch_radius: 3, ..ModelConfig::default() }
    }

    #[test]
    fn shift_groups() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn(&[1, 5, 4, 4], |_| 1.0));
        let y = shift(&mut tape, x).unwrap();
        let out = tape.value(y);
        let ch = |c: usize| &out[c * 16..(c + 1) * 16];
        // left: last column vacated
        for r in 0..4 {
            assert_eq!(&ch(0)[r * 4..r * 4 + 4], &[1.0, 1.0, 1.0, 0.0]);
            assert_eq!(&ch(1)[r * 4..r * 4 + 4], &[0.0, 1.0, 1.0, 1.0]);
        }
        assert_eq!(&ch(2)[12..], &[0.0; 4]);
        assert_eq!(&ch(3)[..4], &[0.0; 4]);
        assert_eq!(ch(4), &[1.0; 16]);

        let r = random(&[2, 10, 5, 6], 3);
        let mut tape = Tape::new();
        let x = tape.leaf(&r);
        let y = shift(&mut tape, x).unwrap();
        for b in 0..2 {
            for c in 8..10 {
                let off = (b * 10 + c) * 30;
                assert_eq!(&tape.value(y)[off..off + 30], &r.data()[off..off + 30]);
            }
        }
    }

    #[test]
    fn shift_rejects_bad_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 6, 3, 3]));
        assert!(shift(&mut tape, x).is_err());
    }

    #[test]
    fn shift_then_opposite_is_identity_inside() {
        let r = random(&[1, 5, 6, 6], 11);
        let mut tape = Tape::new();
        let x = tape.leaf(&r);
        let once = shift(&mut tape, x).unwrap();
        // opposite shift: swap left/right and up/down groups
        let swap: Vec<usize> = (0..180)
            .map(|i| {
                let (c, rest) = (i / 36, i % 36);
                let partner = match c {
                    0 => 1,
                    1 => 0,
                    2 => 3,
                    3 => 2,
                    c => c,
                };
                partner * 36 + rest
            })
            .collect();
        let swapped = tape.gather(once, &[1, 5, 6, 6], swap.clone()).unwrap();
        let twice = shift(&mut tape, swapped).unwrap();
        let back = tape.gather(twice, &[1, 5, 6, 6], swap).unwrap();
        for c in 0..5 {
            for y in 1..5 {
                for xx in 1..5 {
                    let i = c * 36 + y * 6 + xx;
                    assert_eq!(tape.value(back)[i], r.data()[i]);
                }
            }
        }
    }

    #[test]
    fn shift_conv_identity_and_zero() {
        let r = random(&[2, 5, 4, 4], 5);
        let mut eye = Tensor::zeros(&[5, 5, 1, 1]);
        for c in 0..5 {
            eye.data_mut()[c * 5 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(&r);
        let p = ShiftConvParams { w1: tape.leaf(&eye), w2: tape.leaf(&eye) };
        let y = shift_conv(&mut tape, x, &p).unwrap();
        let expect = shift(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), tape.value(expect));

        let p = ShiftConvParams {
            w1: tape.leaf(&random(&[10, 5, 1, 1], 1)),
            w2: tape.leaf(&Tensor::zeros(&[5, 10, 1, 1])),
        };
        let y = shift_conv(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let bad = ShiftConvParams {
            w1: tape.leaf(&Tensor::zeros(&[10, 4, 1, 1])),
            w2: tape.leaf(&Tensor::zeros(&[5, 10, 1, 1])),
        };
        assert!(shift_conv(&mut tape, x, &bad).is_err());
    }

    fn attn_params(tape: &mut Tape, d: usize, seed: u64) -> AttentionParams<Var> {
        AttentionParams {
            wq: tape.leaf(&random(&[d, d], seed)),
            wk: tape.leaf(&random(&[d, d], seed + 1)),
            wv: tape.leaf(&random(&[d, d], seed + 2)),
        }
    }

    #[test]
    fn single_token_attention_returns_values() {
        let r = random(&[2, 4, 3, 3], 8);
        let mut tape = Tape::new();
        let x = tape.leaf(&r);
        let p = attn_params(&mut tape, 36, 20);
        let (y, weights) = patch_attention_with_weights(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(weights), &[1.0, 1.0]);
        // V = token · Wv, token features ordered (c, dy, dx) = NCHW order here
        let wv = tape.tensor(p.wv);
        for b in 0..2 {
            let tok = &r.data()[b * 36..(b + 1) * 36];
            for f in 0..36 {
                let v: f64 = (0..36).map(|k| tok[k] * wv.data()[k * 36 + f]).sum();
                assert!((tape.value(y)[b * 36 + f] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let r = random(&[1, 2, 7, 7], 9);
        let mut tape = Tape::new();
        let x = tape.leaf(&r);
        let mut p = attn_params(&mut tape, 18, 30);
        p.wq = tape.leaf(&Tensor::zeros(&[18, 18]));
        let (y, weights) = patch_attention_with_weights(&mut tape, x, &p).unwrap();
        assert!(tape.value(weights).iter().all(|&w| (w - 1.0 / 9.0).abs() < 1e-15));

        // every token's output is the mean of the V rows
        let grid = TokenGrid::new(&[1, 2, 7, 7]);
        let tokens = tape.gather(x, &[1, 9, 18], grid.tokenize()).unwrap();
        let v = tape.matmul(tokens, p.wv).unwrap();
        let vals = tape.value(v).to_vec();
        let mean: Vec<f64> = (0..18).map(|f| (0..9).map(|t| vals[t * 18 + f]).sum::<f64>() / 9.0).collect();
        for c in 0..2 {
            for yy in 0..7 {
                for xx in 0..7 {
                    // pixel (yy, xx) sits at padded position (yy + 1, xx + 1)
                    let f = c * 9 + ((yy + 1) % 3) * 3 + (xx + 1) % 3;
                    let got = tape.value(y)[c * 49 + yy * 7 + xx];
                    assert!((got - mean[f]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let r = random(&[3, 3, 7, 7], 10);
        let mut tape = Tape::new();
        let x = tape.leaf(&r);
        let p = attn_params(&mut tape, 27, 40);
        let (_, weights) = patch_attention_with_weights(&mut tape, x, &p).unwrap();
        for row in tape.value(weights).chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    fn gffn_params(tape: &mut Tape, c: usize, f: impl Fn(&[usize], u64) -> Tensor) -> GffnParams<Var> {
        let h = 2 * c;
        GffnParams {
            w1: tape.leaf(&f(&[h, c, 1, 1], 1)),
            w2: tape.leaf(&f(&[h, c, 1, 1], 2)),
            wd3: tape.leaf(&f(&[h, 1, 3, 3], 3)),
            wd5: tape.leaf(&f(&[h, 1, 5, 5], 4)),
            w0: tape.leaf(&f(&[c, h, 1, 1], 5)),
        }
    }

    #[test]
    fn gffn_residual_identities() {
        let r = random(&[2, 4, 6, 6], 12);
        let mut tape = Tape::new();
        let x = tape.leaf(&r);
        let p = gffn_params(&mut tape, 4, |s, _| Tensor::zeros(s));
        let y = gffn(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), r.data());

        let mut p = gffn_params(&mut tape, 4, random);
        p.wd3 = tape.leaf(&Tensor::zeros(&[8, 1, 3, 3]));
        p.wd5 = tape.leaf(&Tensor::zeros(&[8, 1, 5, 5]));
        let y = gffn(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), r.data());
    }

    #[test]
    fn pcam_with_dead_branches() {
        let r = random(&[1, 5, 7, 7], 13);
        let mut tape = Tape::new();
        let x = tape.leaf(&r);
        let norm = NormParams {
            gamma: tape.leaf(&Tensor::from_fn(&[5], |_| 1.0)),
            beta: tape.leaf(&Tensor::zeros(&[5])),
        };
        let mut attention = attn_params(&mut tape, 45, 50);
        attention.wv = tape.leaf(&Tensor::zeros(&[45, 45]));
        let shift_p = ShiftConvParams {
            w1: tape.leaf(&random(&[10, 5, 1, 1], 51)),
            w2: tape.leaf(&random(&[5, 10, 1, 1], 52)),
        };
        let p = PcamParams { shift: shift_p.clone(), attention: attention.clone(), norm: norm.clone() };
        let y = pcam(&mut tape, x, &p).unwrap();
        let local = shift_conv(&mut tape, x, &shift_p).unwrap();
        let expect = tape.layer_norm(local, norm.gamma, norm.beta, 1).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(expect)) {
            assert!((a - b).abs() < 1e-12);
        }

        let p = PcamParams {
            shift: ShiftConvParams { w1: shift_p.w1, w2: tape.leaf(&Tensor::zeros(&[5, 10, 1, 1])) },
            attention,
            norm,
        };
        let y = pcam(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn basic_network_has_no_blocks() {
        let cfg = small_config(3).for_variant(Variant::Basic);
        let m = CAMixerModel::new(cfg).unwrap();
        assert!(m.blocks.is_empty());
        assert_eq!(m.params().len(), 8);
        let logits = m.forward(&random(&[4, 3, 7, 7], 1)).unwrap();
        assert_eq!(logits.shape(), &[4, 2]);
    }

    #[test]
    fn ablation_block_contents() {
        let no_pcam = CAMixerModel::new(small_config(2).for_variant(Variant::NoPcam)).unwrap();
        assert!(no_pcam.blocks.iter().all(|b| b.pcam.is_none() && b.gffn.is_some()));
        let no_gffn = CAMixerModel::new(small_config(2).for_variant(Variant::NoGffn)).unwrap();
        assert!(no_gffn.blocks.iter().all(|b| b.pcam.is_some() && b.gffn.is_none()));
        for m in [no_pcam, no_gffn] {
            assert_eq!(m.forward(&random(&[2, 3, 7, 7], 2)).unwrap().shape(), &[2, 2]);
        }
    }

    #[test]
    fn forward_rejects_wrong_patch_size() {
        let m = CAMixerModel::new(small_config(1)).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 3, 5, 5])), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(1);
        cfg.channels = 4;
        cfg.beta = 1;
        assert!(CAMixerModel::new(cfg.clone()).is_err());
        cfg.pcam = false;
        assert!(CAMixerModel::new(cfg).is_ok());
        assert!(Variant::parse("nope").is_err());
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn logits_finite_over_seeds() {
        for seed in 0..100u64 {
            let mut cfg = small_config(1);
            cfg.seed = seed;
            let m = CAMixerModel::new(cfg).unwrap();
            let out = m.forward(&random(&[2, 3, 7, 7], 1000 + seed)).unwrap();
            assert_eq!(out.shape(), &[2, 2]);
            assert!(out.data().iter().all(|v| v.is_finite()), "seed {seed}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let mut cfg = small_config(2);
        cfg.seed = 77;
        let m = CAMixerModel::new(cfg).unwrap();
        let bytes = m.save();
        let back = CAMixerModel::load(&bytes).unwrap();
        assert_eq!(back.save(), bytes);
        assert_eq!(back, m);
        let input = random(&[3, 3, 7, 7], 4);
        assert_eq!(back.forward(&input).unwrap(), m.forward(&input).unwrap());

        assert!(matches!(CAMixerModel::load(&bytes[..bytes.len() - 5]), Err(Error::Corrupt(_))));
        assert!(matches!(CAMixerModel::load(&bytes[..7]), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CAMixerModel::load(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(CAMixerModel::load(&bad), Err(Error::Format(_))));
    }
}
