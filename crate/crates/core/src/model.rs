//! The dual-branch patch network.
//!
//! Two convolutional trunks with identical layer shapes but independent
//! weights digest the RGB and LWIR patches. Each trunk ends in a 256-D
//! feature vector (per spatial column when the patch is wider than 36).
//! The features are fused twice — elementwise product and concatenation —
//! and each fusion feeds its own fully-connected head ending in two logits
//! (match / non-match). Softmax stays out of this module; logits cross the
//! boundary.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{
    conv2d_backward, conv2d_forward, fully_connected_backward, fully_connected_forward,
    relu_backward, relu_forward,
};
use crate::tensor::{LayerSpec, Scalar, Tensor};

/// Patch side length expected by the trunks.
pub const PATCH_SIZE: usize = 36;
/// Input channels: color (or replicated thermal) plus the binary mask.
pub const INPUT_CHANNELS: usize = 4;
/// Width of each trunk's feature vector.
pub const FEATURE_DIM: usize = 256;
/// First four bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"4DMS";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which spectral trunk to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Rgb,
    Lwir,
}

/// Convolution chain shared (in shape only) by both trunks.
pub fn conv_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(5, 4, 32).unwrap(),
        LayerSpec::conv(5, 32, 64).unwrap(),
        LayerSpec::conv(5, 64, 64).unwrap(),
        LayerSpec::conv(5, 64, 64).unwrap(),
        LayerSpec::conv(5, 64, 128).unwrap(),
        LayerSpec::conv(5, 128, 128).unwrap(),
        LayerSpec::conv(5, 128, 256).unwrap(),
        LayerSpec::conv(5, 256, 256).unwrap(),
        LayerSpec::conv(4, 256, 256).unwrap(),
    ]
}

/// Fully-connected chain for one head. The product-fusion head takes a 256-D
/// input, the concatenation head 512-D; both narrow to 128, 64, then 2 logits.
pub fn head_specs(in_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::fully_connected(in_dim, 128),
        LayerSpec::fully_connected(128, 64),
        LayerSpec::fully_connected(64, 2),
    ]
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar = f32> {
    pub weights: Tensor<T>, // [kh, kw, cin, cout]
    pub bias: Tensor<T>,    // [cout]
}

#[derive(Debug, Clone)]
pub struct FcLayer<T: Scalar = f32> {
    pub weights: Tensor<T>, // [din, dout]
    pub bias: Tensor<T>,    // [dout]
}

/// All weights of both trunks and both heads.
///
/// The two trunks have identical layer shapes but independent storage, as do
/// the two heads. Serialization walks tensors in the fixed order produced by
/// [`ModelParams::for_each_tensor`].
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar = f32> {
    pub rgb_trunk: Vec<ConvLayer<T>>,
    pub lwir_trunk: Vec<ConvLayer<T>>,
    pub corr_head: Vec<FcLayer<T>>,
    pub concat_head: Vec<FcLayer<T>>,
}

fn init_conv_layers<T: Scalar>(rng: &mut ChaCha12Rng) -> Vec<ConvLayer<T>> {
    conv_specs()
        .iter()
        .map(|spec| match *spec {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => {
                let fan_in = (kernel_h * kernel_w * in_channels) as f64;
                let bound = (6.0 / fan_in).sqrt();
                ConvLayer {
                    weights: Tensor::from_fn(
                        &[kernel_h, kernel_w, in_channels, out_channels],
                        |_| T::cast(rng.gen_range(-bound..bound)),
                    ),
                    bias: Tensor::zeros(&[out_channels]),
                }
            }
            _ => unreachable!("conv_specs yields conv layers only"),
        })
        .collect()
}

fn init_fc_layers<T: Scalar>(rng: &mut ChaCha12Rng, in_dim: usize) -> Vec<FcLayer<T>> {
    head_specs(in_dim)
        .iter()
        .map(|spec| match *spec {
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                let bound = (6.0 / in_dim as f64).sqrt();
                FcLayer {
                    weights: Tensor::from_fn(&[in_dim, out_dim], |_| {
                        T::cast(rng.gen_range(-bound..bound))
                    }),
                    bias: Tensor::zeros(&[out_dim]),
                }
            }
            _ => unreachable!("head_specs yields fc layers only"),
        })
        .collect()
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: fan-in-scaled uniform weights, zero biases.
    /// Sampling order is the serialization order, so a seed pins every value.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ModelParams {
            rgb_trunk: init_conv_layers(&mut rng),
            lwir_trunk: init_conv_layers(&mut rng),
            corr_head: init_fc_layers(&mut rng, FEATURE_DIM),
            concat_head: init_fc_layers(&mut rng, 2 * FEATURE_DIM),
        }
    }

    fn trunk(&self, branch: Branch) -> &[ConvLayer<T>] {
        match branch {
            Branch::Rgb => &self.rgb_trunk,
            Branch::Lwir => &self.lwir_trunk,
        }
    }

    /// Visit every parameter tensor as `(name, tensor)` in the fixed
    /// serialization order: RGB trunk, LWIR trunk, product head,
    /// concatenation head; weights before bias within a layer.
    pub fn for_each_tensor(&self, mut f: impl FnMut(String, &Tensor<T>)) {
        for (prefix, trunk) in [("rgb", &self.rgb_trunk), ("lwir", &self.lwir_trunk)] {
            for (i, layer) in trunk.iter().enumerate() {
                f(format!("{prefix}.conv{}.weight", i + 1), &layer.weights);
                f(format!("{prefix}.conv{}.bias", i + 1), &layer.bias);
            }
        }
        for (prefix, head) in [("corr", &self.corr_head), ("concat", &self.concat_head)] {
            for (i, layer) in head.iter().enumerate() {
                f(format!("{prefix}.fc{}.weight", i + 1), &layer.weights);
                f(format!("{prefix}.fc{}.bias", i + 1), &layer.bias);
            }
        }
    }

    /// Mutable variant of [`Self::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        for trunk in [&mut self.rgb_trunk, &mut self.lwir_trunk] {
            for layer in trunk.iter_mut() {
                f(&mut layer.weights);
                f(&mut layer.bias);
            }
        }
        for head in [&mut self.corr_head, &mut self.concat_head] {
            for layer in head.iter_mut() {
                f(&mut layer.weights);
                f(&mut layer.bias);
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn zero_grads(&mut self) {
        self.for_each_tensor_mut(|t| t.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            rgb_trunk: self
                .rgb_trunk
                .iter()
                .map(|l| ConvLayer {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            lwir_trunk: self
                .lwir_trunk
                .iter()
                .map(|l| ConvLayer {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            corr_head: self
                .corr_head
                .iter()
                .map(|l| FcLayer {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            concat_head: self
                .concat_head
                .iter()
                .map(|l| FcLayer {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

/// Per-layer activations retained by a cached trunk pass.
pub struct TrunkCache<T: Scalar> {
    /// Input to each conv layer (the patch, then post-activation maps).
    pub layer_inputs: Vec<Tensor<T>>,
    /// Conv outputs before the activation, one per layer.
    pub preacts: Vec<Tensor<T>>,
}

/// Per-layer activations retained by a cached head pass.
pub struct HeadCache<T: Scalar> {
    pub layer_inputs: Vec<Tensor<T>>,
    pub preacts: Vec<Tensor<T>>,
}

/// Everything needed to backpropagate one patch pair.
pub struct PairCache<T: Scalar> {
    pub rgb: TrunkCache<T>,
    pub lwir: TrunkCache<T>,
    pub f_rgb: Tensor<T>,
    pub f_lwir: Tensor<T>,
    pub corr: HeadCache<T>,
    pub concat: HeadCache<T>,
}

/// Both fusion vectors and both heads' logits for one patch pair.
pub struct FusionOutputs<T: Scalar = f32> {
    pub f_corr: Tensor<T>,   // [1, 256]
    pub f_concat: Tensor<T>, // [1, 512]
    pub y_corr: Tensor<T>,   // [1, 2]
    pub y_concat: Tensor<T>, // [1, 2]
}

/// Trunk features for a patch pair during inference: one RGB column and
/// one LWIR column per disparity candidate.
pub struct FeaturePair<T: Scalar = f32> {
    pub f_rgb: Tensor<T>,  // [1, 1, 256]
    pub f_lwir: Tensor<T>, // [1, K, 256]
}

fn check_patch<T: Scalar>(op: &'static str, patch: &Tensor<T>) -> Result<()> {
    let d = patch.dims();
    if d.len() != 3 || d[0] != PATCH_SIZE || d[1] < PATCH_SIZE || d[2] != INPUT_CHANNELS {
        return Err(Error::shape(
            op,
            format!("[{PATCH_SIZE}, >= {PATCH_SIZE}, {INPUT_CHANNELS}]"),
            format!("{:?}", d),
        ));
    }
    Ok(())
}

fn trunk_forward<T: Scalar>(layers: &[ConvLayer<T>], patch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut x = conv2d_forward(patch, &layers[0].weights, &layers[0].bias)?;
    x = relu_forward(&x);
    for layer in &layers[1..] {
        x = conv2d_forward(&x, &layer.weights, &layer.bias)?;
        x = relu_forward(&x);
    }
    Ok(x)
}

fn trunk_forward_cached<T: Scalar>(
    layers: &[ConvLayer<T>],
    patch: &Tensor<T>,
) -> Result<(Tensor<T>, TrunkCache<T>)> {
    let mut cache = TrunkCache {
        layer_inputs: Vec::with_capacity(layers.len()),
        preacts: Vec::with_capacity(layers.len()),
    };
    let mut x = patch.clone();
    for layer in layers {
        let pre = conv2d_forward(&x, &layer.weights, &layer.bias)?;
        cache.layer_inputs.push(x);
        x = relu_forward(&pre);
        cache.preacts.push(pre);
    }
    Ok((x, cache))
}

fn head_forward<T: Scalar>(layers: &[FcLayer<T>], input: &Tensor<T>) -> Result<Tensor<T>> {
    let n = layers.len();
    let mut x = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        x = fully_connected_forward(&x, &layer.weights, &layer.bias)?;
        if i + 1 < n {
            x = relu_forward(&x);
        }
    }
    Ok(x)
}

fn head_forward_cached<T: Scalar>(
    layers: &[FcLayer<T>],
    input: &Tensor<T>,
) -> Result<(Tensor<T>, HeadCache<T>)> {
    let n = layers.len();
    let mut cache = HeadCache {
        layer_inputs: Vec::with_capacity(n),
        preacts: Vec::with_capacity(n),
    };
    let mut x = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        let pre = fully_connected_forward(&x, &layer.weights, &layer.bias)?;
        cache.layer_inputs.push(x);
        x = if i + 1 < n { relu_forward(&pre) } else { pre.clone() };
        cache.preacts.push(pre);
    }
    Ok((x, cache))
}

/// Run one trunk over a patch. A 36-wide patch yields `[1, 1, 256]`; a
/// `36+D`-wide patch yields one 256-D column per 36-wide window, `[1, D+1, 256]`.
pub fn extract_features<T: Scalar>(
    params: &ModelParams<T>,
    patch: &Tensor<T>,
    branch: Branch,
) -> Result<Tensor<T>> {
    check_patch("extract_features", patch)?;
    trunk_forward(params.trunk(branch), patch)
}

/// One 256-D column of a feature map produced by [`extract_features`].
pub fn feature_column<T: Scalar>(features: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let d = features.dims();
    if d.len() != 3 || d[0] != 1 || d[2] != FEATURE_DIM || k >= d[1] {
        return Err(Error::shape(
            "feature_column",
            format!("[1, > {k}, {FEATURE_DIM}]"),
            format!("{:?}", d),
        ));
    }
    let col = features.data()[k * FEATURE_DIM..(k + 1) * FEATURE_DIM].to_vec();
    Tensor::new(vec![1, FEATURE_DIM], col)
}

/// Elementwise-product fusion of two 256-D feature vectors.
pub fn fuse_correlation<T: Scalar>(f_rgb: &Tensor<T>, f_lwir: &Tensor<T>) -> Result<Tensor<T>> {
    check_feature_len("fuse_correlation", f_rgb, f_lwir)?;
    let data = f_rgb
        .data()
        .iter()
        .zip(f_lwir.data())
        .map(|(&a, &b)| a * b)
        .collect();
    Tensor::new(vec![1, FEATURE_DIM], data)
}

/// Concatenation fusion: RGB features in positions 0..256, LWIR in 256..512.
/// The order is fixed; checkpoints depend on it.
pub fn fuse_concatenation<T: Scalar>(f_rgb: &Tensor<T>, f_lwir: &Tensor<T>) -> Result<Tensor<T>> {
    check_feature_len("fuse_concatenation", f_rgb, f_lwir)?;
    let mut data = Vec::with_capacity(2 * FEATURE_DIM);
    data.extend_from_slice(f_rgb.data());
    data.extend_from_slice(f_lwir.data());
    Tensor::new(vec![1, 2 * FEATURE_DIM], data)
}

fn check_feature_len<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.len() != FEATURE_DIM || b.len() != FEATURE_DIM {
        return Err(Error::shape(
            op,
            format!("two {FEATURE_DIM}-vectors"),
            format!("{} and {}", a.len(), b.len()),
        ));
    }
    Ok(())
}

fn flat_feature<T: Scalar>(trunk_out: &Tensor<T>) -> Result<Tensor<T>> {
    feature_column(trunk_out, 0)
}

/// Fuse a feature pair and run both heads.
pub fn fuse_and_classify<T: Scalar>(
    params: &ModelParams<T>,
    f_rgb: &Tensor<T>,
    f_lwir: &Tensor<T>,
) -> Result<FusionOutputs<T>> {
    let f_corr = fuse_correlation(f_rgb, f_lwir)?;
    let f_concat = fuse_concatenation(f_rgb, f_lwir)?;
    let y_corr = head_forward(&params.corr_head, &f_corr)?;
    let y_concat = head_forward(&params.concat_head, &f_concat)?;
    Ok(FusionOutputs {
        f_corr,
        f_concat,
        y_corr,
        y_concat,
    })
}

/// Full forward pass for one 36x36 patch pair.
pub fn forward_pair<T: Scalar>(
    params: &ModelParams<T>,
    p_rgb: &Tensor<T>,
    p_lwir: &Tensor<T>,
) -> Result<FusionOutputs<T>> {
    check_patch("forward_pair", p_rgb)?;
    check_patch("forward_pair", p_lwir)?;
    let f_rgb = flat_feature(&trunk_forward(&params.rgb_trunk, p_rgb)?)?;
    let f_lwir = flat_feature(&trunk_forward(&params.lwir_trunk, p_lwir)?)?;
    fuse_and_classify(params, &f_rgb, &f_lwir)
}

/// Forward pass that retains the activations needed by [`backward_pair`].
pub fn forward_pair_cached<T: Scalar>(
    params: &ModelParams<T>,
    p_rgb: &Tensor<T>,
    p_lwir: &Tensor<T>,
) -> Result<(FusionOutputs<T>, PairCache<T>)> {
    check_patch("forward_pair", p_rgb)?;
    check_patch("forward_pair", p_lwir)?;
    let (rgb_out, rgb_cache) = trunk_forward_cached(&params.rgb_trunk, p_rgb)?;
    let (lwir_out, lwir_cache) = trunk_forward_cached(&params.lwir_trunk, p_lwir)?;
    let f_rgb = flat_feature(&rgb_out)?;
    let f_lwir = flat_feature(&lwir_out)?;

    let f_corr = fuse_correlation(&f_rgb, &f_lwir)?;
    let f_concat = fuse_concatenation(&f_rgb, &f_lwir)?;
    let (y_corr, corr_cache) = head_forward_cached(&params.corr_head, &f_corr)?;
    let (y_concat, concat_cache) = head_forward_cached(&params.concat_head, &f_concat)?;

    Ok((
        FusionOutputs {
            f_corr,
            f_concat,
            y_corr,
            y_concat,
        },
        PairCache {
            rgb: rgb_cache,
            lwir: lwir_cache,
            f_rgb,
            f_lwir,
            corr: corr_cache,
            concat: concat_cache,
        },
    ))
}

/// Accumulator for parameter gradients, shaped like the parameter list.
/// Kept separate from the parameters so per-chunk partial sums can be reduced
/// in a fixed order regardless of thread scheduling.
pub struct GradBuffers<T: Scalar> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> GradBuffers<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        let mut grads = Vec::new();
        params.for_each_tensor(|_, t| grads.push(vec![T::zero(); t.len()]));
        GradBuffers { grads }
    }

    pub fn add_assign(&mut self, other: &GradBuffers<T>) {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Move the accumulated gradients into the parameter tensors' grad slots.
    pub fn store_into(&self, params: &mut ModelParams<T>) {
        let mut idx = 0;
        params.for_each_tensor_mut(|t| {
            t.add_grad(&self.grads[idx]);
            idx += 1;
        });
    }
}

fn head_backward<T: Scalar>(
    layers: &[FcLayer<T>],
    cache: &HeadCache<T>,
    grad_logits: &Tensor<T>,
    grad_out: &mut [Vec<T>],
) -> Result<Tensor<T>> {
    let n = layers.len();
    let mut g = grad_logits.clone();
    for i in (0..n).rev() {
        if i + 1 < n {
            g = relu_backward(&g, &cache.preacts[i])?;
        }
        let grads = fully_connected_backward(&g, &cache.layer_inputs[i], &layers[i].weights)?;
        for (acc, src) in grad_out[2 * i].iter_mut().zip(grads.weights.data()) {
            *acc += *src;
        }
        for (acc, src) in grad_out[2 * i + 1].iter_mut().zip(grads.bias.data()) {
            *acc += *src;
        }
        g = grads.input;
    }
    Ok(g)
}

fn trunk_backward<T: Scalar>(
    layers: &[ConvLayer<T>],
    cache: &TrunkCache<T>,
    grad_feature: &Tensor<T>,
    grad_out: &mut [Vec<T>],
) -> Result<()> {
    let n = layers.len();
    let mut g = Tensor::new(cache.preacts[n - 1].dims().to_vec(), grad_feature.data().to_vec())?;
    for i in (0..n).rev() {
        g = relu_backward(&g, &cache.preacts[i])?;
        let grads = conv2d_backward(&g, &cache.layer_inputs[i], &layers[i].weights)?;
        for (acc, src) in grad_out[2 * i].iter_mut().zip(grads.weights.data()) {
            *acc += *src;
        }
        for (acc, src) in grad_out[2 * i + 1].iter_mut().zip(grads.bias.data()) {
            *acc += *src;
        }
        g = grads.input;
    }
    Ok(())
}

/// Backpropagate logit gradients from both heads through the fusions and both
/// trunks, accumulating parameter gradients into `buffers`.
///
/// Trunk gradients combine both heads' contributions: the product fusion
/// routes each side's gradient through the other side's features, and the
/// concatenation routes its first half to RGB and second half to LWIR.
pub fn backward_pair<T: Scalar>(
    params: &ModelParams<T>,
    cache: &PairCache<T>,
    grad_y_corr: &Tensor<T>,
    grad_y_concat: &Tensor<T>,
    buffers: &mut GradBuffers<T>,
) -> Result<()> {
    let n_trunk = 2 * params.rgb_trunk.len();
    let (trunk_bufs, head_bufs) = buffers.grads.split_at_mut(2 * n_trunk);
    let (rgb_bufs, lwir_bufs) = trunk_bufs.split_at_mut(n_trunk);
    let (corr_bufs, concat_bufs) = head_bufs.split_at_mut(2 * params.corr_head.len());

    let grad_f_corr = head_backward(&params.corr_head, &cache.corr, grad_y_corr, corr_bufs)?;
    let grad_f_concat =
        head_backward(&params.concat_head, &cache.concat, grad_y_concat, concat_bufs)?;

    let mut grad_f_rgb = Tensor::zeros(&[1, FEATURE_DIM]);
    let mut grad_f_lwir = Tensor::zeros(&[1, FEATURE_DIM]);
    {
        let gr = grad_f_rgb.data_mut();
        let gl = grad_f_lwir.data_mut();
        let gc = grad_f_corr.data();
        let gcat = grad_f_concat.data();
        let fr = cache.f_rgb.data();
        let fl = cache.f_lwir.data();
        for i in 0..FEATURE_DIM {
            gr[i] = gc[i] * fl[i] + gcat[i];
            gl[i] = gc[i] * fr[i] + gcat[FEATURE_DIM + i];
        }
    }

    trunk_backward(&params.rgb_trunk, &cache.rgb, &grad_f_rgb, rgb_bufs)?;
    trunk_backward(&params.lwir_trunk, &cache.lwir, &grad_f_lwir, lwir_bufs)?;
    Ok(())
}

/// Write parameters to the checkpoint format: magic `4DMS`, a little-endian
/// u32 version, then every named tensor in serialization order as
/// `u32 name_len, name, u32 rank, u32 dims…, f32 data (little-endian)`.
pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    params.for_each_tensor(|name, t| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    });
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], validating the magic,
/// the version, and that tensor names and shapes match the architecture in
/// order.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                path.display(),
                cursor
            )));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let take_u32 = |cursor: &mut usize| -> Result<u32> {
        let s = take(cursor, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };

    if take(&mut cursor, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let version = take_u32(&mut cursor)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }

    // Read tensors against the expected schema, in order.
    let reference = ModelParams::<f32>::init(0);
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    reference.for_each_tensor(|name, t| expected.push((name, t.dims().to_vec())));

    let mut tensors: Vec<Tensor<f32>> = Vec::with_capacity(expected.len());
    for (name, dims) in &expected {
        let name_len = take_u32(&mut cursor)? as usize;
        let got_name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF8 tensor name", path.display())))?;
        if got_name != *name {
            return Err(Error::Checkpoint(format!(
                "{}: expected tensor '{name}', found '{got_name}'",
                path.display()
            )));
        }
        let rank = take_u32(&mut cursor)? as usize;
        let mut got_dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            got_dims.push(take_u32(&mut cursor)? as usize);
        }
        if got_dims != *dims {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' has dims {:?}, expected {:?}",
                path.display(),
                got_dims,
                dims
            )));
        }
        let len: usize = dims.iter().product();
        let raw = take(&mut cursor, 4 * len)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(dims.clone(), data)?);
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - cursor
        )));
    }

    let mut iter = tensors.into_iter();
    let mut next = || iter.next().expect("tensor count checked above");
    let take_conv = |next: &mut dyn FnMut() -> Tensor<f32>| -> Vec<ConvLayer<f32>> {
        (0..9)
            .map(|_| ConvLayer {
                weights: next(),
                bias: next(),
            })
            .collect()
    };
    let rgb_trunk = take_conv(&mut next);
    let lwir_trunk = take_conv(&mut next);
    let mut take_fc = || -> Vec<FcLayer<f32>> {
        (0..3)
            .map(|_| FcLayer {
                weights: next(),
                bias: next(),
            })
            .collect()
    };
    let corr_head = take_fc();
    let concat_head = take_fc();

    Ok(ModelParams {
        rgb_trunk,
        lwir_trunk,
        corr_head,
        concat_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_patch(seed: u64, width: usize) -> Tensor<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::from_fn(&[PATCH_SIZE, width, INPUT_CHANNELS], |_| {
            rng.gen_range(0.0..1.0)
        })
    }

    #[test]
    fn architecture_shape_chain() {
        // 36x36x4 through the trunk: the output-size chain of the layer table.
        let expected = [
            (32, 32, 32),
            (28, 28, 64),
            (24, 24, 64),
            (20, 20, 64),
            (16, 16, 128),
            (12, 12, 128),
            (8, 8, 256),
            (4, 4, 256),
            (1, 1, 256),
        ];
        let params = ModelParams::<f32>::init(1);
        let patch = random_patch(0, PATCH_SIZE);
        let (_, cache) = trunk_forward_cached(&params.rgb_trunk, &patch).unwrap();
        for (pre, &(h, w, c)) in cache.preacts.iter().zip(&expected) {
            assert_eq!(pre.dims(), [h, w, c]);
        }
    }

    #[test]
    fn parameter_count_is_fixed_by_architecture() {
        let trunk: usize = conv_specs().iter().map(|s| s.parameter_count()).sum();
        let corr: usize = head_specs(256).iter().map(|s| s.parameter_count()).sum();
        let concat: usize = head_specs(512).iter().map(|s| s.parameter_count()).sum();
        assert_eq!(trunk, 4_381_024);
        let total = 2 * trunk + corr + concat;
        assert_eq!(total, 8_877_380);
        assert_eq!(ModelParams::<f32>::init(3).num_parameters(), total);
    }

    #[test]
    fn wide_patch_yields_one_column_per_window() {
        let params = ModelParams::<f32>::init(5);
        let patch = random_patch(2, 100);
        let features = extract_features(&params, &patch, Branch::Lwir).unwrap();
        assert_eq!(features.dims(), [1, 65, FEATURE_DIM]);

        let narrow = random_patch(3, PATCH_SIZE);
        let f = extract_features(&params, &narrow, Branch::Rgb).unwrap();
        assert_eq!(f.dims(), [1, 1, FEATURE_DIM]);
    }

    #[test]
    fn narrow_patch_is_rejected() {
        let params = ModelParams::<f32>::init(5);
        let patch = random_patch(2, PATCH_SIZE - 1);
        assert!(extract_features(&params, &patch, Branch::Rgb).is_err());
    }

    #[test]
    fn branches_do_not_share_weights() {
        let params = ModelParams::<f32>::init(7);
        let patch = random_patch(11, PATCH_SIZE);
        let rgb = extract_features(&params, &patch, Branch::Rgb).unwrap();
        let lwir = extract_features(&params, &patch, Branch::Lwir).unwrap();
        assert_ne!(rgb.data(), lwir.data());
    }

    #[test]
    fn swapping_patches_changes_outputs() {
        let params = ModelParams::<f32>::init(7);
        let a = random_patch(21, PATCH_SIZE);
        let b = random_patch(22, PATCH_SIZE);
        let ab = forward_pair(&params, &a, &b).unwrap();
        let ba = forward_pair(&params, &b, &a).unwrap();
        assert_ne!(ab.y_corr.data(), ba.y_corr.data());
        assert_ne!(ab.y_concat.data(), ba.y_concat.data());
    }

    #[test]
    fn identical_patches_are_not_forced_to_match() {
        // Nothing ties the two trunks together at init; the same patch through
        // both branches classifies arbitrarily.
        let params = ModelParams::<f32>::init(13);
        let a = random_patch(31, PATCH_SIZE);
        let out = forward_pair(&params, &a, &a).unwrap();
        assert!(out.y_corr.data().iter().all(|v| v.is_finite()));
        assert!(out.y_concat.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fusion_identities() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let v = Tensor::<f32>::from_fn(&[1, FEATURE_DIM], |_| rng.gen_range(-1.0..1.0));
        let u = Tensor::<f32>::from_fn(&[1, FEATURE_DIM], |_| rng.gen_range(-1.0..1.0));
        let ones = Tensor::<f32>::filled(&[1, FEATURE_DIM], 1.0);
        let zeros = Tensor::<f32>::zeros(&[1, FEATURE_DIM]);

        assert_eq!(fuse_correlation(&ones, &v).unwrap().data(), v.data());
        assert!(fuse_correlation(&zeros, &v)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        assert_eq!(
            fuse_correlation(&u, &v).unwrap().data(),
            fuse_correlation(&v, &u).unwrap().data()
        );

        let cat = fuse_concatenation(&u, &v).unwrap();
        assert_eq!(cat.len(), 2 * FEATURE_DIM);
        assert_eq!(&cat.data()[..FEATURE_DIM], u.data());
        assert_eq!(&cat.data()[FEATURE_DIM..], v.data());
        assert_ne!(
            cat.data(),
            fuse_concatenation(&v, &u).unwrap().data(),
            "concatenation is order sensitive"
        );

        let zcat = fuse_concatenation(&zeros, &zeros).unwrap();
        assert!(zcat.data().iter().all(|&x| x == 0.0));

        let short = Tensor::<f32>::zeros(&[1, 128]);
        assert!(fuse_correlation(&short, &v).is_err());
        assert!(fuse_concatenation(&v, &short).is_err());
    }

    #[test]
    fn rgb_weights_do_not_leak_into_lwir_features() {
        let mut params = ModelParams::<f32>::init(17);
        let patch = random_patch(23, PATCH_SIZE);
        let before = extract_features(&params, &patch, Branch::Lwir).unwrap();
        params.rgb_trunk[4].weights.data_mut()[100] += 0.5;
        let after = extract_features(&params, &patch, Branch::Lwir).unwrap();
        assert_eq!(before.data(), after.data());

        let before_rgb = extract_features(&params, &patch, Branch::Rgb).unwrap();
        params.lwir_trunk[2].weights.data_mut()[7] += 0.5;
        let after_rgb = extract_features(&params, &patch, Branch::Rgb).unwrap();
        assert_eq!(before_rgb.data(), after_rgb.data());
    }

    #[test]
    fn heads_are_independent() {
        let mut params = ModelParams::<f32>::init(19);
        let a = random_patch(41, PATCH_SIZE);
        let b = random_patch(42, PATCH_SIZE);
        let before = forward_pair(&params, &a, &b).unwrap();
        params.corr_head[0].weights.data_mut()[0] += 1.0;
        let after = forward_pair(&params, &a, &b).unwrap();
        assert_eq!(before.y_concat.data(), after.y_concat.data());
        assert_ne!(before.y_corr.data(), after.y_corr.data());

        params.concat_head[1].weights.data_mut()[5] += 1.0;
        let after2 = forward_pair(&params, &a, &b).unwrap();
        assert_eq!(after.y_corr.data(), after2.y_corr.data());
        assert_ne!(after.y_concat.data(), after2.y_concat.data());
    }

    #[test]
    fn wide_columns_equal_subpatch_features() {
        // Fully-convolutional evaluation: column k of the wide pass equals the
        // trunk applied to the 36-wide window starting at column k.
        let params = ModelParams::<f32>::init(23);
        let d = 6;
        let wide = random_patch(51, PATCH_SIZE + d);
        let features = extract_features(&params, &wide, Branch::Lwir).unwrap();
        assert_eq!(features.dims()[1], d + 1);
        for k in 0..=d {
            let mut window = Tensor::<f32>::zeros(&[PATCH_SIZE, PATCH_SIZE, INPUT_CHANNELS]);
            for y in 0..PATCH_SIZE {
                for x in 0..PATCH_SIZE {
                    for c in 0..INPUT_CHANNELS {
                        let src = (y * (PATCH_SIZE + d) + (x + k)) * INPUT_CHANNELS + c;
                        window.data_mut()[(y * PATCH_SIZE + x) * INPUT_CHANNELS + c] =
                            wide.data()[src];
                    }
                }
            }
            let col = feature_column(&features, k).unwrap();
            let direct = extract_features(&params, &window, Branch::Lwir).unwrap();
            for (a, b) in col.data().iter().zip(direct.data()) {
                assert!(
                    (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0),
                    "column {k}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParams::<f32>::init(29);
        let a = random_patch(61, PATCH_SIZE);
        let b = random_patch(62, PATCH_SIZE);
        let o1 = forward_pair(&params, &a, &b).unwrap();
        let o2 = forward_pair(&params, &a, &b).unwrap();
        assert_eq!(o1.y_corr.data(), o2.y_corr.data());
        assert_eq!(o1.y_concat.data(), o2.y_concat.data());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::<f32>::init(31);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(&b1[0..4], b"4DMS");
        assert_eq!(
            u32::from_le_bytes([b1[4], b1[5], b1[6], b1[7]]),
            CHECKPOINT_VERSION
        );

        let mut expected = Vec::new();
        params.for_each_tensor(|_, t| expected.extend_from_slice(t.data()));
        let mut got = Vec::new();
        loaded.for_each_tensor(|_, t| got.extend_from_slice(t.data()));
        assert_eq!(expected, got);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
