//! Multi-scale adaptive attention decoding: per step the decoder predicts a
//! grid window around the current reference point, bilinearly samples all
//! pyramid levels inside it, attends over the sampled tokens and emits a
//! character class plus the coordinate shift to the next reference point.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_logits, grid_sample, smooth_l1, Embedding, LayerNorm, Linear, Module, ParamSet,
    Session, Tensor,
};
use crate::scalar::Scalar;
use crate::splm::StartPoint;

/// Character inventory plus the special tokens. Class ids order the
/// characters first, then `[EOS]`; `[SOS]` and `[PAD]` exist only as
/// embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Alphabet {
    pub fn new(chars: &str) -> Self {
        Alphabet {
            chars: chars.chars().collect(),
        }
    }

    /// 36-symbol case-folded alphanumeric alphabet.
    pub fn alphanumeric() -> Self {
        Alphabet::new("abcdefghijklmnopqrstuvwxyz0123456789")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.chars.len()
    }

    pub fn sos(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.chars.len() + 2
    }

    /// Classifier outputs: characters plus `[EOS]`.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn num_embeddings(&self) -> usize {
        self.chars.len() + 3
    }

    /// Case-folded encoding; `None` if any character is missing.
    pub fn encode(&self, text: &str) -> Option<Vec<usize>> {
        text.chars()
            .map(|c| {
                let folded = c.to_ascii_lowercase();
                self.chars.iter().position(|&a| a == folded)
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Decoder layers.
    pub layers: usize,
    /// Model width d.
    pub model_dim: usize,
    /// Attention (query/key) width d_e.
    pub attn_dim: usize,
    /// Feed-forward width.
    pub ff_dim: usize,
    /// Grid side length g; the local window holds g*g points per level.
    pub grid_size: usize,
    /// Maximum decode length (characters per instance).
    pub max_len: usize,
    /// Learn per-step grid sizes; `false` fixes every size at 0.5.
    pub adaptive_scale: bool,
    /// Ablation: attend over every pyramid token instead of the local grid.
    pub dense_attention: bool,
    /// Characters of the alphabet (case-folded).
    pub alphabet: String,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            model_dim: 128,
            attn_dim: 128,
            ff_dim: 256,
            grid_size: 5,
            max_len: 32,
            adaptive_scale: true,
            dense_attention: false,
            alphabet: "abcdefghijklmnopqrstuvwxyz0123456789".into(),
        }
    }
}

impl DecoderConfig {
    pub fn alphabet(&self) -> Alphabet {
        Alphabet::new(&self.alphabet)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::contract("grid_size must be >= 2"));
        }
        if self.max_len < 1 {
            return Err(Error::contract("max_len must be >= 1"));
        }
        Ok(())
    }
}

/// Per-step grid description: per-level normalized (h, w) window sizes and
/// the g*g sample points per level (row-major).
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub sizes: Vec<(f64, f64)>,
    pub points: Vec<Vec<(f64, f64)>>,
}

/// Grid point lattice of one level: point (row i, col j) sits at
/// `p + (-w/2 + w*j/(g-1), -h/2 + h*i/(g-1))`, so the corners land at
/// `p ± (w/2, h/2)` and the center (odd g) at `p`. No clamping here.
pub fn grid_points(size: (f64, f64), p: (f64, f64), g: usize) -> Vec<(f64, f64)> {
    assert!(g >= 2, "grid needs at least 2 points per side");
    let (h, w) = size;
    let mut out = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            out.push((
                p.0 - w / 2.0 + w * j as f64 / (g - 1) as f64,
                p.1 - h / 2.0 + h * i as f64 / (g - 1) as f64,
            ));
        }
    }
    out
}

/// Constant per-cell offsets in units of the window size: row-major
/// `(j/(g-1) - 1/2, i/(g-1) - 1/2)` pairs multiplying (w, h).
fn grid_offsets<T: Scalar>(g: usize) -> ArrayD<T> {
    let mut out = ArrayD::<T>::zeros(IxDyn(&[g * g, 2]));
    for i in 0..g {
        for j in 0..g {
            let k = i * g + j;
            out[[k, 0]] = T::from_f64(j as f64 / (g - 1) as f64 - 0.5);
            out[[k, 1]] = T::from_f64(i as f64 / (g - 1) as f64 - 0.5);
        }
    }
    out
}

/// Sine-cosine encoding of normalized 2D points into `dim` features.
pub fn positional_encoding<T: Scalar>(points: &ArrayD<T>, dim: usize) -> ArrayD<T> {
    assert_eq!(points.shape().last(), Some(&2));
    assert_eq!(dim % 4, 0, "positional dim must be divisible by 4");
    let quarter = dim / 4;
    let mut shape = points.shape().to_vec();
    shape.pop();
    shape.push(dim);
    let mut out = ArrayD::<T>::zeros(IxDyn(&shape));
    let n: usize = points.len() / 2;
    let flat_p = points.view().into_shape_with_order((n, 2)).unwrap();
    let mut flat_o = out.view_mut().into_shape_with_order((n, dim)).unwrap();
    for r in 0..n {
        let x = flat_p[[r, 0]].to_f64();
        let y = flat_p[[r, 1]].to_f64();
        for q in 0..quarter {
            // geometric frequencies from one cycle across the image to fine detail
            let freq = 2.0 * std::f64::consts::PI * 64f64.powf(q as f64 / quarter.max(2) as f64);
            flat_o[[r, 4 * q]] = T::from_f64((x * freq).sin());
            flat_o[[r, 4 * q + 1]] = T::from_f64((x * freq).cos());
            flat_o[[r, 4 * q + 2]] = T::from_f64((y * freq).sin());
            flat_o[[r, 4 * q + 3]] = T::from_f64((y * freq).cos());
        }
    }
    out
}

struct SelfAttention<T: Scalar> {
    wq: Linear<T>,
    wk: Linear<T>,
    wv: Linear<T>,
    wo: Linear<T>,
    attn_dim: usize,
}

impl<T: Scalar> SelfAttention<T> {
    fn new<R: Rng>(d: usize, d_e: usize, rng: &mut R) -> Self {
        SelfAttention {
            wq: Linear::new(d, d_e, rng),
            wk: Linear::new(d, d_e, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            attn_dim: d_e,
        }
    }

    /// `x: [N,S,d]`, `mask: [N,S,S]` additive (0 or -inf-ish).
    fn forward(&self, sess: &Session<T>, x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
        let (n, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let flat = x.reshape(&[n * s, d]);
        let de = self.attn_dim;
        let q = self.wq.forward(sess, &flat).reshape(&[n, s, de]);
        let k = self.wk.forward(sess, &flat).reshape(&[n, s, de]);
        let v = self.wv.forward(sess, &flat).reshape(&[n, s, d]);
        let scale = T::one() / T::from_f64((de as f64).sqrt());
        let scores = q.bmm(&k.permute(&[0, 2, 1])).scale(scale).add(mask);
        let attn = scores.softmax_last();
        let ctx = attn.bmm(&v).reshape(&[n * s, d]);
        self.wo.forward(sess, &ctx).reshape(&[n, s, d])
    }
}

impl<T: Scalar> Module<T> for SelfAttention<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
    }
}

struct CrossAttention<T: Scalar> {
    wq: Linear<T>,
    wk: Linear<T>,
    wv: Linear<T>,
    wo: Linear<T>,
    attn_dim: usize,
}

impl<T: Scalar> CrossAttention<T> {
    fn new<R: Rng>(d: usize, d_e: usize, d_v: usize, rng: &mut R) -> Self {
        CrossAttention {
            wq: Linear::new(d, d_e, rng),
            wk: Linear::new(d_v, d_e, rng),
            wv: Linear::new(d_v, d, rng),
            wo: Linear::new(d, d, rng),
            attn_dim: d_e,
        }
    }

    /// Queries `[N,1,d]` against per-step visual tokens `[N,P,d_v]`.
    fn forward(&self, sess: &Session<T>, query: &Tensor<T>, tokens: &Tensor<T>) -> Tensor<T> {
        let (n, p, dv) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        let d = query.shape()[2];
        let de = self.attn_dim;
        let q = self.wq.forward(sess, &query.reshape(&[n, d])).reshape(&[n, 1, de]);
        let flat = tokens.reshape(&[n * p, dv]);
        let k = self.wk.forward(sess, &flat).reshape(&[n, p, de]);
        let v = self.wv.forward(sess, &flat).reshape(&[n, p, d]);
        let scale = T::one() / T::from_f64((de as f64).sqrt());
        let scores = q.bmm(&k.permute(&[0, 2, 1])).scale(scale);
        let attn = scores.softmax_last();
        let ctx = attn.bmm(&v).reshape(&[n, d]);
        self.wo.forward(sess, &ctx).reshape(&[n, 1, d])
    }

    /// Same attention with keys/values projected once for all steps
    /// (dense-attention ablation path).
    fn forward_cached(
        &self,
        sess: &Session<T>,
        query: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Tensor<T> {
        let (n, d) = (query.shape()[0], query.shape()[2]);
        let de = self.attn_dim;
        let q = self.wq.forward(sess, &query.reshape(&[n, d])).reshape(&[n, 1, de]);
        let scale = T::one() / T::from_f64((de as f64).sqrt());
        let attn = q.bmm(&k.permute(&[0, 2, 1])).scale(scale).softmax_last();
        let ctx = attn.bmm(v).reshape(&[n, d]);
        self.wo.forward(sess, &ctx).reshape(&[n, 1, d])
    }
}

impl<T: Scalar> Module<T> for CrossAttention<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
    }
}

struct DecoderLayer<T: Scalar> {
    self_attn: SelfAttention<T>,
    cross_attn: CrossAttention<T>,
    ff1: Linear<T>,
    ff2: Linear<T>,
    ln1: LayerNorm<T>,
    ln2: LayerNorm<T>,
    ln3: LayerNorm<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    fn new<R: Rng>(cfg: &DecoderConfig, d_v: usize, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        DecoderLayer {
            self_attn: SelfAttention::new(d, cfg.attn_dim, rng),
            cross_attn: CrossAttention::new(d, cfg.attn_dim, d_v, rng),
            ff1: Linear::new(d, cfg.ff_dim, rng),
            ff2: Linear::new(cfg.ff_dim, d, rng),
            ln1: LayerNorm::new(d),
            ln2: LayerNorm::new(d),
            ln3: LayerNorm::new(d),
        }
    }
}

impl<T: Scalar> Module<T> for DecoderLayer<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.ff1.collect(&format!("{prefix}.ff1"), out);
        self.ff2.collect(&format!("{prefix}.ff2"), out);
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ln3.collect(&format!("{prefix}.ln3"), out);
    }
}

/// The autoregressive decoder.
pub struct Decoder<T: Scalar> {
    pub config: DecoderConfig,
    pub alphabet: Alphabet,
    embedding: Embedding<T>,
    layers: Vec<DecoderLayer<T>>,
    grid_head: Linear<T>,
    cls_head: Linear<T>,
    reg_head: Linear<T>,
    feat_dim: usize,
}

/// Decoder outputs for a teacher-forced batch of instances.
pub struct TeacherForcedOutput<T: Scalar> {
    /// `[N, S, num_classes]` character logits.
    pub char_logits: Tensor<T>,
    /// `[N, S, 2]` absolute next-point predictions (input point + shift).
    pub pred_points: Tensor<T>,
    /// `[N, S, 4, 2]` predicted grid sizes (w, h) per level.
    pub grid_sizes: Tensor<T>,
    /// Real (non-pad) step mask.
    pub step_mask: Vec<Vec<bool>>,
}

/// Targets for the decoder loss, built from ground-truth tracks.
pub struct DecoderTargets<T: Scalar> {
    /// `[N][S]` class ids (chars then terminal EOS); only real steps used.
    pub char_targets: Vec<Vec<usize>>,
    /// `[N, S, 2]` absolute next-point targets (undisturbed).
    pub pos_targets: ArrayD<T>,
    /// `[N][S]` steps carrying a position term (real steps minus the EOS step).
    pub pos_mask: Vec<Vec<bool>>,
}

/// One teacher-forced instance: input tokens/points plus targets.
pub struct TeacherSequence<T: Scalar> {
    /// Input token ids, starting with SOS; length S = m + 1.
    pub input_ids: Vec<usize>,
    /// Input reference points (normalized), possibly disturbed; length S.
    pub input_points: Vec<(T, T)>,
    /// Char targets per step (chars then EOS); length S.
    pub char_targets: Vec<usize>,
    /// Absolute next-point targets per step (undisturbed); length S, the
    /// final (EOS) entry unused.
    pub pos_targets: Vec<(T, T)>,
    /// Which image of the batch this instance belongs to.
    pub batch_index: usize,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng>(config: DecoderConfig, feat_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let alphabet = config.alphabet();
        let d = config.model_dim;
        let layers = (0..config.layers)
            .map(|_| DecoderLayer::new(&config, feat_dim, rng))
            .collect();
        Ok(Decoder {
            embedding: Embedding::new(alphabet.num_embeddings(), d, rng),
            layers,
            // zero init: every grid size starts at sigmoid(0) = 0.5
            grid_head: Linear::zeros(d, NUM_LEVELS * 2),
            cls_head: Linear::new(d, alphabet.num_classes(), rng),
            reg_head: Linear::new(d, 2, rng),
            alphabet,
            config,
            feat_dim,
        })
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    /// Grid sizes from a step embedding batch `[N, d]`: sigmoid of a linear
    /// map, reshaped to `[N, 4, 2]` (w, h) pairs in normalized units.
    pub fn predict_grid_size(&self, sess: &Session<T>, e_s: &Tensor<T>) -> Tensor<T> {
        let n = e_s.shape()[0];
        if self.config.adaptive_scale {
            self.grid_head
                .forward(sess, e_s)
                .sigmoid()
                .reshape(&[n, NUM_LEVELS, 2])
        } else {
            Tensor::constant(ArrayD::from_elem(
                IxDyn(&[n, NUM_LEVELS, 2]),
                T::from_f64(0.5),
            ))
        }
    }

    /// Samples the per-level grids around `centers: [N,1,2]` and
    /// concatenates level-major to `[N, 4*g^2, d_v]` visual tokens.
    fn gather_local_context(
        &self,
        pyramid: &FeaturePyramid<T>,
        sizes: &Tensor<T>, // [N, 4, 2]
        centers: &Tensor<T>, // [N, 1, 2]
        batch_idx: &[usize],
    ) -> Tensor<T> {
        let g = self.config.grid_size;
        let n = batch_idx.len();
        let offsets = Tensor::constant(
            grid_offsets::<T>(g)
                .into_shape_with_order(IxDyn(&[1, g * g, 2]))
                .unwrap(),
        );
        let mut level_tokens = Vec::with_capacity(NUM_LEVELS);
        for (l, level) in pyramid.levels.iter().enumerate() {
            let size_l = sizes.narrow(1, l, 1); // [N,1,2]
            let pts = centers.add(&size_l.mul(&offsets)); // [N, g*g, 2]
            level_tokens.push(grid_sample(level, &pts, batch_idx));
        }
        let _ = n;
        Tensor::concat(1, &level_tokens)
    }

    /// Flattens the whole pyramid into per-instance token sets (dense
    /// attention ablation): `[N, sum(h*w), d_v]`.
    fn dense_context(&self, pyramid: &FeaturePyramid<T>, batch_idx: &[usize]) -> Tensor<T> {
        let mut per_level = Vec::with_capacity(NUM_LEVELS);
        for level in &pyramid.levels {
            let s = level.shape().to_vec();
            // [B,C,H,W] -> [B, H*W, C]
            per_level.push(
                level
                    .reshape(&[s[0], s[1], s[2] * s[3]])
                    .permute(&[0, 2, 1]),
            );
        }
        let all = Tensor::concat(1, &per_level); // [B, tokens, C]
        // select instance rows
        let parts: Vec<Tensor<T>> = batch_idx.iter().map(|&b| all.narrow(0, b, 1)).collect();
        Tensor::concat(0, &parts)
    }

    /// Runs the decoder over teacher-forced sequences. All instances of a
    /// batch decode together (padded to the longest sequence).
    pub fn teacher_forward(
        &self,
        sess: &Session<T>,
        pyramid: &FeaturePyramid<T>,
        seqs: &[TeacherSequence<T>],
    ) -> (TeacherForcedOutput<T>, DecoderTargets<T>) {
        assert!(!seqs.is_empty());
        let n = seqs.len();
        let s_max = seqs.iter().map(|q| q.input_ids.len()).max().unwrap();
        let d = self.config.model_dim;
        let pad = self.alphabet.pad();

        let mut ids = vec![pad; n * s_max];
        let mut points = ArrayD::<T>::zeros(IxDyn(&[n, s_max, 2]));
        let mut char_targets = vec![vec![usize::MAX; s_max]; n];
        let mut pos_targets = ArrayD::<T>::zeros(IxDyn(&[n, s_max, 2]));
        let mut step_mask = vec![vec![false; s_max]; n];
        let mut pos_mask = vec![vec![false; s_max]; n];
        let batch_idx: Vec<usize> = seqs.iter().map(|q| q.batch_index).collect();
        for (i, q) in seqs.iter().enumerate() {
            let s = q.input_ids.len();
            for t in 0..s {
                ids[i * s_max + t] = q.input_ids[t];
                points[[i, t, 0]] = q.input_points[t].0;
                points[[i, t, 1]] = q.input_points[t].1;
                char_targets[i][t] = q.char_targets[t];
                pos_targets[[i, t, 0]] = q.pos_targets[t].0;
                pos_targets[[i, t, 1]] = q.pos_targets[t].1;
                step_mask[i][t] = true;
                pos_mask[i][t] = t + 1 < s; // no position term on the EOS step
            }
        }

        let (logits, pred_points, grid_sizes) =
            self.run(sess, pyramid, &ids, &points, n, s_max, &batch_idx);
        (
            TeacherForcedOutput {
                char_logits: logits,
                pred_points,
                grid_sizes,
                step_mask,
            },
            DecoderTargets {
                char_targets,
                pos_targets,
                pos_mask,
            },
        )
    }

    /// Shared decoder body: embeddings, self-attention stack, per-step grid
    /// sampled cross-attention, heads. Returns char logits `[N,S,K]`,
    /// absolute point predictions `[N,S,2]` and grid sizes `[N,S,4,2]`.
    fn run(
        &self,
        sess: &Session<T>,
        pyramid: &FeaturePyramid<T>,
        ids: &[usize],
        points: &ArrayD<T>, // [N,S,2]
        n: usize,
        s: usize,
        batch_idx: &[usize],
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let d = self.config.model_dim;
        let emb = self.embedding.forward(sess, ids).reshape(&[n, s, d]);
        let pos = Tensor::constant(positional_encoding(points, d));
        let mut x = emb.add(&pos);

        // causal + padding mask, additive
        let pad = self.alphabet.pad();
        let neg = T::from_f64(-1e9);
        let mut mask = ArrayD::<T>::zeros(IxDyn(&[n, s, s]));
        for i in 0..n {
            for qt in 0..s {
                for kt in 0..s {
                    if kt > qt || ids[i * s + kt] == pad {
                        mask[[i, qt, kt]] = neg;
                    }
                }
            }
        }
        let mask = Tensor::constant(mask);
        let centers = Tensor::constant(points.clone());

        // dense ablation: project K/V once per layer from the full pyramid
        let dense_tokens = self
            .config
            .dense_attention
            .then(|| self.dense_context(pyramid, batch_idx));

        let mut grid_sizes: Option<Tensor<T>> = None; // [N,S,4,2]
        let mut step_tokens: Vec<Tensor<T>> = Vec::new(); // per-step [N,P,d_v]
        for (li, layer) in self.layers.iter().enumerate() {
            let sa = layer.self_attn.forward(sess, &x, &mask);
            x = layer.ln1.forward(sess, &x.add(&sa));

            if li == 0 {
                // grid estimation from the first self-attention output
                let flat = x.reshape(&[n * s, d]);
                let sizes = self
                    .predict_grid_size(sess, &flat)
                    .reshape(&[n, s, NUM_LEVELS, 2]);
                if !self.config.dense_attention {
                    for t in 0..s {
                        let size_t = sizes.narrow(1, t, 1).reshape(&[n, NUM_LEVELS, 2]);
                        let center_t = centers.narrow(1, t, 1);
                        step_tokens.push(self.gather_local_context(
                            pyramid, &size_t, &center_t, batch_idx,
                        ));
                    }
                }
                grid_sizes = Some(sizes);
            }

            let ctx = if let Some(dense) = &dense_tokens {
                let (nn, p, dv) = (dense.shape()[0], dense.shape()[1], dense.shape()[2]);
                let flat = dense.reshape(&[nn * p, dv]);
                let k = layer
                    .cross_attn
                    .wk
                    .forward(sess, &flat)
                    .reshape(&[nn, p, layer.cross_attn.attn_dim]);
                let v = layer.cross_attn.wv.forward(sess, &flat).reshape(&[nn, p, d]);
                let per_step: Vec<Tensor<T>> = (0..s)
                    .map(|t| {
                        let q = x.narrow(1, t, 1);
                        layer.cross_attn.forward_cached(sess, &q, &k, &v)
                    })
                    .collect();
                Tensor::concat(1, &per_step)
            } else {
                let per_step: Vec<Tensor<T>> = (0..s)
                    .map(|t| {
                        let q = x.narrow(1, t, 1);
                        layer.cross_attn.forward(sess, &q, &step_tokens[t])
                    })
                    .collect();
                Tensor::concat(1, &per_step)
            };
            x = layer.ln2.forward(sess, &x.add(&ctx));

            let ff = layer
                .ff2
                .forward(sess, &layer.ff1.forward(sess, &x.reshape(&[n * s, d])).relu())
                .reshape(&[n, s, d]);
            x = layer.ln3.forward(sess, &x.add(&ff));
        }

        let flat = x.reshape(&[n * s, d]);
        let logits = self
            .cls_head
            .forward(sess, &flat)
            .reshape(&[n, s, self.alphabet.num_classes()]);
        // shifts bounded to half the image per axis
        let shift = self
            .reg_head
            .forward(sess, &flat)
            .tanh_t()
            .scale(T::from_f64(0.5))
            .reshape(&[n, s, 2]);
        let pred_points = centers.add(&shift);
        (logits, pred_points, grid_sizes.unwrap())
    }

    /// Greedy decode of one instance from a start point. Returns `None` when
    /// the very first prediction is `[EOS]` (filtered false positive).
    pub fn decode_instance(
        &self,
        pyramid: &FeaturePyramid<T>,
        batch_index: usize,
        start: &StartPoint,
    ) -> Option<SpotResult> {
        let sess = Session::eval();
        let mut ids = vec![self.alphabet.sos()];
        let mut pts: Vec<(f64, f64)> = vec![(start.x, start.y)];
        let mut char_ids: Vec<usize> = Vec::new();
        let mut char_probs: Vec<f64> = Vec::new();
        let mut truncated = false;
        loop {
            let s = ids.len();
            let mut points = ArrayD::<T>::zeros(IxDyn(&[1, s, 2]));
            for (t, &(x, y)) in pts.iter().enumerate() {
                points[[0, t, 0]] = T::from_f64(x);
                points[[0, t, 1]] = T::from_f64(y);
            }
            let (logits, pred_points, _) =
                self.run(&sess, pyramid, &ids, &points, 1, s, &[batch_index]);
            let t = s - 1;
            let k = self.alphabet.num_classes();
            let mut row = Vec::with_capacity(k);
            for c in 0..k {
                row.push(logits.data()[[0, t, c]].to_f64());
            }
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
            let probs: Vec<f64> = row.iter().map(|v| (v - maxv).exp() / denom).collect();
            let (best, best_p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, &p)| (i, p))
                .unwrap();

            if best == self.alphabet.eos() {
                break;
            }
            char_ids.push(best);
            char_probs.push(best_p);
            let nx = pred_points.data()[[0, t, 0]].to_f64().clamp(0.0, 1.0);
            let ny = pred_points.data()[[0, t, 1]].to_f64().clamp(0.0, 1.0);
            ids.push(best);
            pts.push((nx, ny));
            if char_ids.len() >= self.config.max_len {
                truncated = true;
                break;
            }
        }
        if char_ids.is_empty() {
            return None;
        }
        let m = char_ids.len();
        let geo_mean = (char_probs.iter().map(|p| p.ln()).sum::<f64>() / m as f64).exp();
        Some(SpotResult {
            start: *start,
            // character t was read at the point its step sampled from
            char_points: pts[..m].to_vec(),
            transcription: self.alphabet.decode(&char_ids),
            score: start.confidence * geo_mean,
            truncated,
        })
    }

    /// Grid spec actually used for each decode step of an instance (for
    /// visualization): recomputes the forward pass and extracts sizes.
    pub fn grid_specs_for(
        &self,
        pyramid: &FeaturePyramid<T>,
        batch_index: usize,
        result: &SpotResult,
    ) -> Vec<GridSpec> {
        let sess = Session::eval();
        let mut ids = vec![self.alphabet.sos()];
        for c in result.transcription.chars() {
            ids.push(self.alphabet.encode(&c.to_string()).unwrap()[0]);
        }
        ids.pop();
        let s = ids.len();
        let mut points = ArrayD::<T>::zeros(IxDyn(&[1, s, 2]));
        for (t, &(x, y)) in result.char_points.iter().take(s).enumerate() {
            points[[0, t, 0]] = T::from_f64(x);
            points[[0, t, 1]] = T::from_f64(y);
        }
        let (_, _, sizes) = self.run(&sess, pyramid, &ids, &points, 1, s, &[batch_index]);
        (0..s)
            .map(|t| {
                let mut per_level = Vec::with_capacity(NUM_LEVELS);
                let mut pts_l = Vec::with_capacity(NUM_LEVELS);
                for l in 0..NUM_LEVELS {
                    let w = sizes.data()[[0, t, l, 0]].to_f64();
                    let h = sizes.data()[[0, t, l, 1]].to_f64();
                    per_level.push((h, w));
                    pts_l.push(grid_points(
                        (h, w),
                        result.char_points[t.min(result.char_points.len() - 1)],
                        self.config.grid_size,
                    ));
                }
                GridSpec {
                    sizes: per_level,
                    points: pts_l,
                }
            })
            .collect()
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.embedding.collect(&format!("{prefix}.embedding"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.layer{i}"), out);
        }
        self.grid_head.collect(&format!("{prefix}.grid_head"), out);
        self.cls_head.collect(&format!("{prefix}.cls_head"), out);
        self.reg_head.collect(&format!("{prefix}.reg_head"), out);
    }
}

/// One spotted instance: start point, per-character points (normalized),
/// transcription and combined score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpotResult {
    pub start: StartPoint,
    pub char_points: Vec<(f64, f64)>,
    pub transcription: String,
    pub score: f64,
    #[serde(default)]
    pub truncated: bool,
}

/// Decoder loss components; graph scalars.
pub struct DecoderLoss<T: Scalar> {
    pub total: Tensor<T>,
    pub char_ce: Tensor<T>,
    pub pos_smooth_l1: Tensor<T>,
}

/// Cross-entropy over characters (terminal EOS step included) plus
/// Smooth-L1 between predicted and target absolute points; each term is
/// mean-reduced over its own step count, the position term skips the EOS
/// step.
pub fn decoder_loss<T: Scalar>(
    out: &TeacherForcedOutput<T>,
    targets: &DecoderTargets<T>,
) -> Result<DecoderLoss<T>> {
    let shape = out.char_logits.shape().to_vec();
    let (n, s, k) = (shape[0], shape[1], shape[2]);
    if targets.char_targets.len() != n || targets.pos_targets.shape() != [n, s, 2] {
        return Err(Error::contract("decoder loss shape mismatch"));
    }
    let mut flat_targets = Vec::with_capacity(n * s);
    let mut char_steps = 0usize;
    for i in 0..n {
        for t in 0..s {
            let tgt = if out.step_mask[i][t] {
                char_steps += 1;
                targets.char_targets[i][t]
            } else {
                usize::MAX
            };
            flat_targets.push(tgt);
        }
    }
    if char_steps == 0 {
        return Err(Error::contract("decoder loss on empty batch"));
    }
    let ce = cross_entropy_logits(&out.char_logits.reshape(&[n * s, k]), &flat_targets)
        .sum_all()
        .scale(T::one() / T::from_usize(char_steps));

    let mut pos_mask = ArrayD::<T>::zeros(IxDyn(&[n, s, 1]));
    let mut pos_steps = 0usize;
    for i in 0..n {
        for t in 0..s {
            if targets.pos_mask[i][t] {
                pos_mask[[i, t, 0]] = T::one();
                pos_steps += 1;
            }
        }
    }
    let sl1 = if pos_steps == 0 {
        Tensor::constant(ArrayD::zeros(IxDyn(&[])))
    } else {
        smooth_l1(&out.pred_points, &targets.pos_targets)
            .mul(&Tensor::constant(pos_mask))
            .sum_all()
            .scale(T::one() / T::from_usize(pos_steps))
    };
    let total = ce.add(&sl1);
    Ok(DecoderLoss {
        total,
        char_ce: ce,
        pos_smooth_l1: sl1,
    })
}

/// Attention cost model: per-step visual token count and a
/// multiply-accumulate estimate, for the grid path and the dense ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionCost {
    pub tokens_per_step: usize,
    pub macs_per_step: f64,
}

/// Estimates per-step attention cost for a pyramid of the given level
/// dimensions `(h, w)`. The grid path samples and projects its 4*g^2 tokens
/// fresh every step; the dense path projects all pyramid tokens once per
/// instance (amortized over `seq_len` steps) and attends over all of them
/// every step.
pub fn attention_cost(
    cfg: &DecoderConfig,
    level_dims: &[(usize, usize)],
    feat_dim: usize,
    seq_len: usize,
) -> (AttentionCost, AttentionCost) {
    let d = cfg.model_dim as f64;
    let de = cfg.attn_dim as f64;
    let dv = feat_dim as f64;
    let layers = cfg.layers as f64;
    let g2 = (cfg.grid_size * cfg.grid_size) as f64;

    let grid_tokens = NUM_LEVELS as f64 * g2;
    // bilinear sampling: 4 fused multiply-adds per channel per point
    let sampling = grid_tokens * dv * 4.0;
    let grid_macs = layers * (grid_tokens * dv * (de + d) + grid_tokens * (de + d) + d * de)
        + sampling;

    let dense_tokens: usize = level_dims.iter().map(|&(h, w)| h * w).sum();
    let dt = dense_tokens as f64;
    let kv_amortized = dt * dv * (de + d) / seq_len.max(1) as f64;
    let dense_macs = layers * (kv_amortized + dt * (de + d) + d * de);

    (
        AttentionCost {
            tokens_per_step: (grid_tokens) as usize,
            macs_per_step: grid_macs,
        },
        AttentionCost {
            tokens_per_step: dense_tokens,
            macs_per_step: dense_macs,
        },
    )
}
