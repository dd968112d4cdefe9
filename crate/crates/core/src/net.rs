//! Compact residual CNN with two heads: a 128-d metric embedding and class
//! logits, both branching from a shared 128-d feature. Gradients are
//! hand-written reverse mode, verified by central finite differences, and
//! parameters update with RMSProp.
//!
//! Layout: stem conv (3->16) -> residual block (16->32, stride 2) ->
//! residual block (32->64, stride 2) -> global average pool -> linear 64->128
//! -> ReLU (shared feature) -> [embedding: 128->128->128, classifier:
//! 128->num_labels]. No batch norm; everything is f64 and deterministic.

use crate::encode::SignalImage;
use crate::metric::{
    self, cross_entropy_with_grad, mine_with_mode, triplet_margin_loss_with_grad,
};
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub type EmbeddingVec = Vec<f64>;

pub const EMBED_DIM: usize = 128;
pub const FEATURE_DIM: usize = 128;
const STEM_C: usize = 16;
const B1_C: usize = 32;
const B2_C: usize = 64;
/// Two stride-2 stages need this many columns to keep a non-empty map.
const MIN_WIDTH: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("ShapeMismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("ImageTooSmall: width {width} is below the minimum of 8 columns")]
    ImageTooSmall { width: usize },
    #[error("NonFiniteGradient: tensor {name} contains a non-finite value")]
    NonFiniteGradient { name: String },
    #[error(transparent)]
    Metric(#[from] metric::MetricError),
}

pub type Result<T> = std::result::Result<T, NetError>;

// ── Parameters ───────────────────────────────────────────────────────────────

/// All learnable tensors. Conv weights are [out, in, kh, kw]; linear weights
/// are [in, out] with y = xW + b.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub b1_conv1_w: Tensor,
    pub b1_conv1_b: Tensor,
    pub b1_conv2_w: Tensor,
    pub b1_conv2_b: Tensor,
    pub b1_proj_w: Tensor,
    pub b1_proj_b: Tensor,
    pub b2_conv1_w: Tensor,
    pub b2_conv1_b: Tensor,
    pub b2_conv2_w: Tensor,
    pub b2_conv2_b: Tensor,
    pub b2_proj_w: Tensor,
    pub b2_proj_b: Tensor,
    pub trunk_w: Tensor,
    pub trunk_b: Tensor,
    pub embed1_w: Tensor,
    pub embed1_b: Tensor,
    pub embed2_w: Tensor,
    pub embed2_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

pub fn expected_shapes(num_labels: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("stem.w", vec![STEM_C, 3, 3, 3]),
        ("stem.b", vec![STEM_C]),
        ("block1.conv1.w", vec![B1_C, STEM_C, 3, 3]),
        ("block1.conv1.b", vec![B1_C]),
        ("block1.conv2.w", vec![B1_C, B1_C, 3, 3]),
        ("block1.conv2.b", vec![B1_C]),
        ("block1.proj.w", vec![B1_C, STEM_C, 1, 1]),
        ("block1.proj.b", vec![B1_C]),
        ("block2.conv1.w", vec![B2_C, B1_C, 3, 3]),
        ("block2.conv1.b", vec![B2_C]),
        ("block2.conv2.w", vec![B2_C, B2_C, 3, 3]),
        ("block2.conv2.b", vec![B2_C]),
        ("block2.proj.w", vec![B2_C, B1_C, 1, 1]),
        ("block2.proj.b", vec![B2_C]),
        ("trunk.w", vec![B2_C, FEATURE_DIM]),
        ("trunk.b", vec![FEATURE_DIM]),
        ("embed.fc1.w", vec![FEATURE_DIM, EMBED_DIM]),
        ("embed.fc1.b", vec![EMBED_DIM]),
        ("embed.fc2.w", vec![EMBED_DIM, EMBED_DIM]),
        ("embed.fc2.b", vec![EMBED_DIM]),
        ("classifier.w", vec![FEATURE_DIM, num_labels]),
        ("classifier.b", vec![num_labels]),
    ]
}

impl ModelParams {
    pub fn zeros(num_labels: usize) -> Self {
        let mut shapes = expected_shapes(num_labels).into_iter();
        let mut next = || Tensor::zeros(&shapes.next().unwrap().1);
        ModelParams {
            stem_w: next(),
            stem_b: next(),
            b1_conv1_w: next(),
            b1_conv1_b: next(),
            b1_conv2_w: next(),
            b1_conv2_b: next(),
            b1_proj_w: next(),
            b1_proj_b: next(),
            b2_conv1_w: next(),
            b2_conv1_b: next(),
            b2_conv2_w: next(),
            b2_conv2_b: next(),
            b2_proj_w: next(),
            b2_proj_b: next(),
            trunk_w: next(),
            trunk_b: next(),
            embed1_w: next(),
            embed1_b: next(),
            embed2_w: next(),
            embed2_b: next(),
            cls_w: next(),
            cls_b: next(),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.cls_w.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.num_labels())
    }

    /// Tensors in canonical order; this order fixes checkpoint layout and
    /// flat-coordinate numbering.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("stem.w", &self.stem_w),
            ("stem.b", &self.stem_b),
            ("block1.conv1.w", &self.b1_conv1_w),
            ("block1.conv1.b", &self.b1_conv1_b),
            ("block1.conv2.w", &self.b1_conv2_w),
            ("block1.conv2.b", &self.b1_conv2_b),
            ("block1.proj.w", &self.b1_proj_w),
            ("block1.proj.b", &self.b1_proj_b),
            ("block2.conv1.w", &self.b2_conv1_w),
            ("block2.conv1.b", &self.b2_conv1_b),
            ("block2.conv2.w", &self.b2_conv2_w),
            ("block2.conv2.b", &self.b2_conv2_b),
            ("block2.proj.w", &self.b2_proj_w),
            ("block2.proj.b", &self.b2_proj_b),
            ("trunk.w", &self.trunk_w),
            ("trunk.b", &self.trunk_b),
            ("embed.fc1.w", &self.embed1_w),
            ("embed.fc1.b", &self.embed1_b),
            ("embed.fc2.w", &self.embed2_w),
            ("embed.fc2.b", &self.embed2_b),
            ("classifier.w", &self.cls_w),
            ("classifier.b", &self.cls_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("stem.w", &mut self.stem_w),
            ("stem.b", &mut self.stem_b),
            ("block1.conv1.w", &mut self.b1_conv1_w),
            ("block1.conv1.b", &mut self.b1_conv1_b),
            ("block1.conv2.w", &mut self.b1_conv2_w),
            ("block1.conv2.b", &mut self.b1_conv2_b),
            ("block1.proj.w", &mut self.b1_proj_w),
            ("block1.proj.b", &mut self.b1_proj_b),
            ("block2.conv1.w", &mut self.b2_conv1_w),
            ("block2.conv1.b", &mut self.b2_conv1_b),
            ("block2.conv2.w", &mut self.b2_conv2_w),
            ("block2.conv2.b", &mut self.b2_conv2_b),
            ("block2.proj.w", &mut self.b2_proj_w),
            ("block2.proj.b", &mut self.b2_proj_b),
            ("trunk.w", &mut self.trunk_w),
            ("trunk.b", &mut self.trunk_b),
            ("embed.fc1.w", &mut self.embed1_w),
            ("embed.fc1.b", &mut self.embed1_b),
            ("embed.fc2.w", &mut self.embed2_w),
            ("embed.fc2.b", &mut self.embed2_b),
            ("classifier.w", &mut self.cls_w),
            ("classifier.b", &mut self.cls_b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Reads coordinate `i` of the flattened parameter vector (canonical
    /// tensor order, row-major within each tensor).
    pub fn get_flat(&self, mut i: usize) -> f64 {
        for (_, t) in self.named() {
            if i < t.len() {
                return t.data()[i];
            }
            i -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for (_, t) in self.named_mut() {
            if i < t.len() {
                t.data_mut()[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    fn check_shapes(&self) -> Result<()> {
        for ((name, t), (_, want)) in self
            .named()
            .iter()
            .zip(expected_shapes(self.num_labels()))
        {
            if t.shape() != want.as_slice() {
                return Err(NetError::ShapeMismatch {
                    context: format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                });
            }
        }
        Ok(())
    }
}

/// He-style initialization: zero-mean normal with std sqrt(2/fan_in) for
/// weights, zero biases. Fully determined by the seed.
pub fn init_params(seed: u64, num_labels: usize) -> ModelParams {
    assert!(num_labels >= 2, "need at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(num_labels);
    for (name, t) in p.named_mut() {
        if name.ends_with(".b") {
            continue;
        }
        let shape = t.shape().to_vec();
        let fan_in = if shape.len() == 4 {
            shape[1] * shape[2] * shape[3]
        } else {
            shape[0]
        };
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        for v in t.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    p
}

// ── Convolution and linear primitives ────────────────────────────────────────

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Direct convolution over a [ic, ih, iw] input with weight [oc, ic, kh, kw].
fn conv2d(
    input: &[f64],
    (ic, ih, iw): (usize, usize, usize),
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oc = w.shape()[0];
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    debug_assert_eq!(w.shape()[1], ic);
    let oh = conv_out(ih, kh, stride, pad);
    let ow = conv_out(iw, kw, stride, pad);
    let wd = w.data();
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let bias = b.data()[o];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for i in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let in_row = (i * ih + iy as usize) * iw;
                        let w_row = ((o * ic + i) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            acc += wd[w_row + kx] * input[in_row + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Reverse-mode pass for `conv2d`: accumulates dW and db in place, returns
/// the gradient with respect to the input.
fn conv2d_backward(
    input: &[f64],
    (ic, ih, iw): (usize, usize, usize),
    w: &Tensor,
    stride: usize,
    pad: usize,
    dout: &[f64],
    (oh, ow): (usize, usize),
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let oc = w.shape()[0];
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let wd = w.data();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    let mut dinput = vec![0.0; ic * ih * iw];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(o * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                dbd[o] += g;
                for i in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let in_row = (i * ih + iy as usize) * iw;
                        let w_row = ((o * ic + i) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            dwd[w_row + kx] += g * input[in_row + ix as usize];
                            dinput[in_row + ix as usize] += g * wd[w_row + kx];
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// y = xW + b with W stored [in, out].
fn linear_forward(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), n_in);
    let wd = w.data();
    let mut y = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = i * n_out;
        for j in 0..n_out {
            y[j] += xi * wd[row + j];
        }
    }
    y
}

fn linear_backward(
    x: &[f64],
    w: &Tensor,
    dy: &[f64],
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for (j, &g) in dy.iter().enumerate() {
        dbd[j] += g;
    }
    let mut dx = vec![0.0; n_in];
    for i in 0..n_in {
        let row = i * n_out;
        let mut acc = 0.0;
        for j in 0..n_out {
            dwd[row + j] += x[i] * dy[j];
            acc += wd[row + j] * dy[j];
        }
        dx[i] = acc;
    }
    dx
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries where the activation was clamped; the kink at
/// exactly zero uses subgradient 0.
fn relu_mask(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

// ── Forward pass ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Dims {
    h0: usize,
    w0: usize,
    h1: usize,
    w1: usize,
    h2: usize,
    w2: usize,
}

struct SampleCache {
    img: Vec<f64>,
    stem: Vec<f64>,
    b1_t1: Vec<f64>,
    b1_out: Vec<f64>,
    b2_t1: Vec<f64>,
    b2_out: Vec<f64>,
    gap: Vec<f64>,
    feature: Vec<f64>,
    emb_h1: Vec<f64>,
}

/// Outputs of one forward pass plus the cached activations backward needs.
pub struct ForwardPass {
    pub embeddings: Vec<EmbeddingVec>,
    pub logits: Vec<Vec<f64>>,
    caches: Vec<SampleCache>,
    dims: Dims,
}

impl std::fmt::Debug for ForwardPass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardPass")
            .field("batch", &self.embeddings.len())
            .field("dims", &self.dims)
            .finish_non_exhaustive()
    }
}

struct BlockRef<'a> {
    c1w: &'a Tensor,
    c1b: &'a Tensor,
    c2w: &'a Tensor,
    c2b: &'a Tensor,
    pw: &'a Tensor,
    pb: &'a Tensor,
}

/// conv(s2) -> ReLU -> conv(s1) joined with a 1x1 stride-2 projection of the
/// input, ReLU after the sum. Returns (post-ReLU inner activation, output).
fn block_forward(
    x: &[f64],
    shape: (usize, usize, usize),
    bp: &BlockRef<'_>,
) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let (mut t1, oh, ow) = conv2d(x, shape, bp.c1w, bp.c1b, 2, 1);
    relu_inplace(&mut t1);
    let oc = bp.c1w.shape()[0];
    let (t2, _, _) = conv2d(&t1, (oc, oh, ow), bp.c2w, bp.c2b, 1, 1);
    let (sc, sh, sw) = conv2d(x, shape, bp.pw, bp.pb, 2, 0);
    debug_assert_eq!((sh, sw), (oh, ow));
    let mut y: Vec<f64> = t2.iter().zip(&sc).map(|(a, b)| a + b).collect();
    relu_inplace(&mut y);
    (t1, y, oh, ow)
}

struct BlockGrads<'a> {
    c1w: &'a mut Tensor,
    c1b: &'a mut Tensor,
    c2w: &'a mut Tensor,
    c2b: &'a mut Tensor,
    pw: &'a mut Tensor,
    pb: &'a mut Tensor,
}

fn block_backward(
    x: &[f64],
    shape: (usize, usize, usize),
    t1: &[f64],
    y: &[f64],
    dy: &[f64],
    (oh, ow): (usize, usize),
    bp: &BlockRef<'_>,
    g: &mut BlockGrads<'_>,
) -> Vec<f64> {
    let oc = bp.c1w.shape()[0];
    let mut dz = dy.to_vec();
    relu_mask(y, &mut dz);
    let mut dt1 = conv2d_backward(t1, (oc, oh, ow), bp.c2w, 1, 1, &dz, (oh, ow), g.c2w, g.c2b);
    relu_mask(t1, &mut dt1);
    let dx_main = conv2d_backward(x, shape, bp.c1w, 2, 1, &dt1, (oh, ow), g.c1w, g.c1b);
    let dx_proj = conv2d_backward(x, shape, bp.pw, 2, 0, &dz, (oh, ow), g.pw, g.pb);
    dx_main.iter().zip(&dx_proj).map(|(a, b)| a + b).collect()
}

/// Runs the network over a batch. All images must share one height and
/// width; `train_mode` is reserved (the net has no mode-dependent layers).
pub fn forward(p: &ModelParams, images: &[&SignalImage], train_mode: bool) -> Result<ForwardPass> {
    let _ = train_mode;
    assert!(!images.is_empty(), "forward needs at least one image");
    p.check_shapes()?;
    let (h0, w0) = (images[0].height(), images[0].width());
    for img in images {
        if (img.height(), img.width()) != (h0, w0) {
            return Err(NetError::ShapeMismatch {
                context: format!(
                    "batch mixes image sizes {}x{} and {}x{}",
                    h0,
                    w0,
                    img.height(),
                    img.width()
                ),
            });
        }
    }
    if w0 < MIN_WIDTH {
        return Err(NetError::ImageTooSmall { width: w0 });
    }

    let dims = Dims {
        h0,
        w0,
        h1: conv_out(h0, 3, 2, 1),
        w1: conv_out(w0, 3, 2, 1),
        h2: conv_out(conv_out(h0, 3, 2, 1), 3, 2, 1),
        w2: conv_out(conv_out(w0, 3, 2, 1), 3, 2, 1),
    };
    let block1 = BlockRef {
        c1w: &p.b1_conv1_w,
        c1b: &p.b1_conv1_b,
        c2w: &p.b1_conv2_w,
        c2b: &p.b1_conv2_b,
        pw: &p.b1_proj_w,
        pb: &p.b1_proj_b,
    };
    let block2 = BlockRef {
        c1w: &p.b2_conv1_w,
        c1b: &p.b2_conv1_b,
        c2w: &p.b2_conv2_w,
        c2b: &p.b2_conv2_b,
        pw: &p.b2_proj_w,
        pb: &p.b2_proj_b,
    };

    let mut embeddings = Vec::with_capacity(images.len());
    let mut logits = Vec::with_capacity(images.len());
    let mut caches = Vec::with_capacity(images.len());
    for img in images {
        let chw = img.to_chw_tensor();
        let x = chw.data().to_vec();
        let (mut stem, _, _) = conv2d(&x, (3, h0, w0), &p.stem_w, &p.stem_b, 1, 1);
        relu_inplace(&mut stem);
        let (b1_t1, b1_out, h1, w1) = block_forward(&stem, (STEM_C, h0, w0), &block1);
        let (b2_t1, b2_out, h2, w2) = block_forward(&b1_out, (B1_C, h1, w1), &block2);

        let area = (h2 * w2) as f64;
        let gap: Vec<f64> = (0..B2_C)
            .map(|c| b2_out[c * h2 * w2..(c + 1) * h2 * w2].iter().sum::<f64>() / area)
            .collect();
        let mut feature = linear_forward(&gap, &p.trunk_w, &p.trunk_b);
        relu_inplace(&mut feature);
        let mut emb_h1 = linear_forward(&feature, &p.embed1_w, &p.embed1_b);
        relu_inplace(&mut emb_h1);
        let embedding = linear_forward(&emb_h1, &p.embed2_w, &p.embed2_b);
        let class_logits = linear_forward(&feature, &p.cls_w, &p.cls_b);

        embeddings.push(embedding);
        logits.push(class_logits);
        caches.push(SampleCache {
            img: x,
            stem,
            b1_t1,
            b1_out,
            b2_t1,
            b2_out,
            gap,
            feature,
            emb_h1,
        });
    }
    Ok(ForwardPass {
        embeddings,
        logits,
        caches,
        dims,
    })
}

fn backward(
    p: &ModelParams,
    pass: &ForwardPass,
    demb: &[Vec<f64>],
    dlogits: &[Vec<f64>],
) -> ModelParams {
    let mut g = p.zeros_like();
    let d = pass.dims;
    let block1 = BlockRef {
        c1w: &p.b1_conv1_w,
        c1b: &p.b1_conv1_b,
        c2w: &p.b1_conv2_w,
        c2b: &p.b1_conv2_b,
        pw: &p.b1_proj_w,
        pb: &p.b1_proj_b,
    };
    let block2 = BlockRef {
        c1w: &p.b2_conv1_w,
        c1b: &p.b2_conv1_b,
        c2w: &p.b2_conv2_w,
        c2b: &p.b2_conv2_b,
        pw: &p.b2_proj_w,
        pb: &p.b2_proj_b,
    };

    for (i, cache) in pass.caches.iter().enumerate() {
        let mut dfeature = linear_backward(
            &cache.feature,
            &p.cls_w,
            &dlogits[i],
            &mut g.cls_w,
            &mut g.cls_b,
        );
        let mut demb_h1 = linear_backward(
            &cache.emb_h1,
            &p.embed2_w,
            &demb[i],
            &mut g.embed2_w,
            &mut g.embed2_b,
        );
        relu_mask(&cache.emb_h1, &mut demb_h1);
        let dfeat_embed = linear_backward(
            &cache.feature,
            &p.embed1_w,
            &demb_h1,
            &mut g.embed1_w,
            &mut g.embed1_b,
        );
        for (a, b) in dfeature.iter_mut().zip(&dfeat_embed) {
            *a += b;
        }
        relu_mask(&cache.feature, &mut dfeature);
        let dgap = linear_backward(
            &cache.gap,
            &p.trunk_w,
            &dfeature,
            &mut g.trunk_w,
            &mut g.trunk_b,
        );

        let area = (d.h2 * d.w2) as f64;
        let mut db2_out = vec![0.0; B2_C * d.h2 * d.w2];
        for c in 0..B2_C {
            let per_cell = dgap[c] / area;
            for v in &mut db2_out[c * d.h2 * d.w2..(c + 1) * d.h2 * d.w2] {
                *v = per_cell;
            }
        }

        let mut bg2 = BlockGrads {
            c1w: &mut g.b2_conv1_w,
            c1b: &mut g.b2_conv1_b,
            c2w: &mut g.b2_conv2_w,
            c2b: &mut g.b2_conv2_b,
            pw: &mut g.b2_proj_w,
            pb: &mut g.b2_proj_b,
        };
        let db1_out = block_backward(
            &cache.b1_out,
            (B1_C, d.h1, d.w1),
            &cache.b2_t1,
            &cache.b2_out,
            &db2_out,
            (d.h2, d.w2),
            &block2,
            &mut bg2,
        );
        let mut bg1 = BlockGrads {
            c1w: &mut g.b1_conv1_w,
            c1b: &mut g.b1_conv1_b,
            c2w: &mut g.b1_conv2_w,
            c2b: &mut g.b1_conv2_b,
            pw: &mut g.b1_proj_w,
            pb: &mut g.b1_proj_b,
        };
        let mut dstem = block_backward(
            &cache.stem,
            (STEM_C, d.h0, d.w0),
            &cache.b1_t1,
            &cache.b1_out,
            &db1_out,
            (d.h1, d.w1),
            &block1,
            &mut bg1,
        );
        relu_mask(&cache.stem, &mut dstem);
        conv2d_backward(
            &cache.img,
            (3, d.h0, d.w0),
            &p.stem_w,
            1,
            1,
            &dstem,
            (d.h0, d.w0),
            &mut g.stem_w,
            &mut g.stem_b,
        );
    }
    g
}

// ── Loss plumbing ────────────────────────────────────────────────────────────

/// Per-batch loss terms and miner statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub ce: f64,
    pub pos_pairs: usize,
    pub neg_pairs: usize,
}

fn batch_losses(
    p: &ModelParams,
    images: &[&SignalImage],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ForwardPass, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    assert!(images.len() >= 2, "loss needs a batch of at least two");
    assert_eq!(images.len(), labels.len(), "one label per image");
    let pass = forward(p, images, true)?;
    let w = &cfg.weights;

    let mined = mine_with_mode(&pass.embeddings, labels, w.epsilon_mine, cfg.miner_mode);
    let (lt, mut demb) = triplet_margin_loss_with_grad(&pass.embeddings, &mined, w.delta);
    let (lc, mut dlogits) = cross_entropy_with_grad(&pass.logits, labels)?;
    for row in &mut demb {
        for v in row {
            *v *= w.alpha;
        }
    }
    for row in &mut dlogits {
        for v in row {
            *v *= w.beta;
        }
    }
    let breakdown = LossBreakdown {
        total: metric::total_loss(lt, lc, w),
        triplet: lt,
        ce: lc,
        pos_pairs: mined.positives.len(),
        neg_pairs: mined.negatives.len(),
    };
    Ok((breakdown, pass, demb, dlogits))
}

/// Loss terms only, no backward pass; used by finite-difference checking.
pub fn batch_loss(
    p: &ModelParams,
    images: &[&SignalImage],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    batch_losses(p, images, labels, cfg).map(|(b, ..)| b)
}

/// Combined weighted loss over one batch and its exact gradient with respect
/// to every parameter.
pub fn loss_and_grads(
    p: &ModelParams,
    images: &[&SignalImage],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    let (breakdown, pass, demb, dlogits) = batch_losses(p, images, labels, cfg)?;
    let grads = backward(p, &pass, &demb, &dlogits);
    Ok((breakdown, grads))
}

// ── Gradient checking ────────────────────────────────────────────────────────

/// Compares analytic gradients against central finite differences on
/// `n_samples` uniformly sampled coordinates; returns the worst
/// |analytic - numeric| / max(|numeric|, 1e-8).
fn max_sampled_grad_error<S>(
    state: &mut S,
    dim: usize,
    get: impl Fn(&S, usize) -> f64,
    set: impl Fn(&mut S, usize, f64),
    mut loss: impl FnMut(&mut S) -> f64,
    analytic: impl Fn(usize) -> f64,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> f64 {
    assert!(n_samples >= 1, "need at least one sampled coordinate");
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coord = Uniform::new(0, dim);
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let i = coord.sample(&mut rng);
        let orig = get(state, i);
        set(state, i, orig + h);
        let up = loss(state);
        set(state, i, orig - h);
        let down = loss(state);
        set(state, i, orig);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic(i) - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Finite-difference check of `loss_and_grads` on sampled parameter
/// coordinates; the sample sequence is seeded from `cfg.seed`.
pub fn grad_check(
    p: &ModelParams,
    images: &[&SignalImage],
    labels: &[usize],
    cfg: &TrainConfig,
    n_samples: usize,
    h: f64,
) -> Result<f64> {
    let (_, grads) = loss_and_grads(p, images, labels, cfg)?;
    let mut theta = p.clone();
    let dim = theta.param_count();
    Ok(max_sampled_grad_error(
        &mut theta,
        dim,
        ModelParams::get_flat,
        ModelParams::set_flat,
        |q| batch_loss(q, images, labels, cfg).expect("loss evaluation inside grad_check").total,
        |i| grads.get_flat(i),
        n_samples,
        h,
        cfg.seed,
    ))
}

// ── RMSProp ──────────────────────────────────────────────────────────────────

/// Per-coordinate squared-gradient accumulators plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    v: ModelParams,
    pub rho: f64,
    pub epsilon: f64,
    pub step: u64,
}

impl OptState {
    pub fn new(p: &ModelParams) -> Self {
        OptState::with_hyper(p, 0.9, 1e-8)
    }

    pub fn with_hyper(p: &ModelParams, rho: f64, epsilon: f64) -> Self {
        OptState {
            v: p.zeros_like(),
            rho,
            epsilon,
            step: 0,
        }
    }

    pub fn accumulators(&self) -> &ModelParams {
        &self.v
    }
}

/// One RMSProp update: v <- rho*v + (1-rho)*g^2, theta <- theta -
/// lr*g/(sqrt(v) + epsilon). Returns the new parameters and state.
pub fn rmsprop_step(
    p: &ModelParams,
    grads: &ModelParams,
    state: &OptState,
    lr: f64,
) -> Result<(ModelParams, OptState)> {
    assert!(lr > 0.0, "learning rate must be positive");
    for ((name, g), (_, t)) in grads.named().iter().zip(p.named()) {
        if g.shape() != t.shape() {
            return Err(NetError::ShapeMismatch {
                context: format!(
                    "gradient {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    t.shape()
                ),
            });
        }
        if !g.all_finite() {
            return Err(NetError::NonFiniteGradient {
                name: name.to_string(),
            });
        }
    }
    let mut new_p = p.clone();
    let mut new_state = state.clone();
    let (rho, eps) = (state.rho, state.epsilon);
    for (((_, t), (_, g)), (_, v)) in new_p
        .named_mut()
        .into_iter()
        .zip(grads.named())
        .zip(new_state.v.named_mut())
    {
        for ((tv, &gv), vv) in t.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = rho * *vv + (1.0 - rho) * gv * gv;
            *tv -= lr * gv / (vv.sqrt() + eps);
        }
    }
    new_state.step += 1;
    Ok((new_p, new_state))
}
