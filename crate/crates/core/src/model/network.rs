//! Layer layout, initialization and forward passes.
//!
//! Parameter names follow the layer they belong to, with `.w`/`.b` suffixes:
//!
//! * `enc.g{j}.conv{i}`, `enc.g{j}.res.a`, `enc.g{j}.res.b`, `enc.g{j}.planar`:
//!   encoder group `j`; `enc.fuse` is the one-off slice fusion layer.
//! * `head.s{j}`: 1×1 supervision head on encoder scale `j`.
//! * `glob.s{s}.conv{i}`, `glob.down`, `glob.head.f`, `glob.head.fp`: global branch.
//! * `dec.s{s}.up`, `dec.s{s}.conv0`, `dec.s{s}.conv1`, `dec.out`: decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::model::params::{BoundParams, Param, ParamStore};
use crate::model::{FusionMode, GgpfnConfig};
use crate::ops::{
    add, bilinear_sample, center_crop, center_depth_slice, concat_channels, conv2d, conv2d_stride2, conv3d_dvalid,
    max_pool, relu, reshape, sigmoid, transposed_conv2d,
};
use crate::tensor::{Scalar, Tensor};

/// Number of 3×3 convolutions in each global-branch stage; with the final
/// stride-2 convolution the branch has 13.
pub const GLOBAL_STAGE_CONVS: [usize; 5] = [2, 2, 3, 3, 2];

/// Shape and initialization fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Zero for biases, which start at zero.
    pub fan_in: usize,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    c_in: usize,
    c_out: usize,
    /// Depth taps: 3 shrinks depth by two, 1 is planar.
    kd: usize,
}

#[derive(Clone, Debug)]
enum EncStep {
    Conv(ConvLayer),
    /// Two convolutions whose sum with the depth-cropped input passes a relu.
    Residual(ConvLayer, ConvLayer),
}

/// Per-group encoder steps. A group with `n ≥ 3` depth convolutions holds
/// `n − 2` plain ones followed by a residual block; a group with `n = 0`
/// holds one planar convolution.
fn encoder_plan(cfg: &GgpfnConfig) -> Vec<Vec<EncStep>> {
    let kd = match cfg.fusion_mode {
        FusionMode::Progressive => 3,
        FusionMode::OneOff => 1,
    };
    let mut c_in = match cfg.fusion_mode {
        FusionMode::Progressive => 1,
        FusionMode::OneOff => cfg.channels[0],
    };
    let mut plan = Vec::with_capacity(4);
    for (j, &n) in cfg.group_convs.iter().enumerate() {
        let c = cfg.channels[j];
        let conv = |name: String, c_in: usize, kd: usize| ConvLayer { name, c_in, c_out: c, kd };
        let mut steps = Vec::new();
        if n == 0 {
            steps.push(EncStep::Conv(conv(format!("enc.g{j}.planar"), c_in, 1)));
        } else {
            let plain = if n >= 3 { n - 2 } else { n };
            for i in 0..plain {
                let cin = if i == 0 { c_in } else { c };
                steps.push(EncStep::Conv(conv(format!("enc.g{j}.conv{i}"), cin, kd)));
            }
            if n >= 3 {
                steps.push(EncStep::Residual(
                    conv(format!("enc.g{j}.res.a"), c, kd),
                    conv(format!("enc.g{j}.res.b"), c, kd),
                ));
            }
        }
        plan.push(steps);
        c_in = c;
    }
    plan
}

/// Every learnable tensor of the network, in store order.
pub fn param_specs(cfg: &GgpfnConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push = |name: &str, w: Vec<usize>, fan_in: usize| {
        let k = if name.ends_with(".up") { w[1] } else { w[0] };
        specs.push(ParamSpec { name: format!("{name}.w"), shape: w, fan_in });
        specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![k], fan_in: 0 });
    };
    let c = cfg.channels;
    if cfg.fusion_mode == FusionMode::OneOff {
        let d = cfg.required_depth();
        push("enc.fuse", vec![c[0], d, 1, 3, 3], d * 9);
    }
    for steps in encoder_plan(cfg) {
        for step in steps {
            let layers = match step {
                EncStep::Conv(l) => vec![l],
                EncStep::Residual(a, b) => vec![a, b],
            };
            for l in layers {
                push(&l.name, vec![l.c_out, l.c_in, l.kd, 3, 3], l.c_in * l.kd * 9);
            }
        }
    }
    for (j, &cj) in c.iter().enumerate() {
        push(&format!("head.s{j}"), vec![1, cj, 1, 1], cj);
    }

    let g = cfg.global_channels;
    let mut cin = 1;
    for (s, &n) in GLOBAL_STAGE_CONVS.iter().enumerate() {
        for i in 0..n {
            push(&format!("glob.s{s}.conv{i}"), vec![g[s], cin, 3, 3], cin * 9);
            cin = g[s];
        }
    }
    push("glob.down", vec![g[4], g[4], 3, 3], g[4] * 9);
    push("glob.head.f", vec![1, g[4], 1, 1], g[4]);
    push("glob.head.fp", vec![1, g[4], 1, 1], g[4]);

    let dec = cfg.decoder_channels;
    let mut cin = c[3] + if cfg.global_enabled { g[4] } else { 0 };
    for s in (0..3).rev() {
        push(&format!("dec.s{s}.up"), vec![cin, dec[s], 2, 2], cin);
        push(&format!("dec.s{s}.conv0"), vec![dec[s], dec[s] + c[s], 3, 3], (dec[s] + c[s]) * 9);
        push(&format!("dec.s{s}.conv1"), vec![dec[s], dec[s], 3, 3], dec[s] * 9);
        cin = dec[s];
    }
    push("dec.out", vec![1, dec[0], 1, 1], dec[0]);
    specs
}

/// Fresh parameters: kernels uniform in `±sqrt(6 / fan_in)`, biases zero.
/// Deterministic in `seed`.
pub fn build_model<T: Scalar>(cfg: &GgpfnConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let value = if spec.fan_in == 0 {
            Tensor::zeros(spec.shape)
        } else {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            Tensor::from_fn(spec.shape, |_| T::of(rng.random_range(-bound..bound)))
        };
        store.insert(spec.name, Param::new(value))?;
    }
    Ok(store)
}

/// Encoder feature maps after each of the four groups, `[C_j, D_j, H/2^j, W/2^j]`.
pub struct EncoderPyramid<'t, T: Scalar> {
    pub scales: [Var<'t, T>; 4],
}

impl<'t, T: Scalar> EncoderPyramid<'t, T> {
    pub fn depths(&self) -> [usize; 4] {
        self.scales.each_ref().map(|v| v.shape()[1])
    }

    /// Central depth slice of scale `j`, as passed along skip connections.
    pub fn skip(&self, j: usize) -> Result<Var<'t, T>> {
        center_depth_slice(self.scales[j])
    }

    /// The single-slice bottleneck map `E_k` as `[C_4, H/8, W/8]`.
    pub fn ek(&self) -> Result<Var<'t, T>> {
        self.skip(3)
    }
}

/// Global-branch outputs: `f` at `/32` and `f_prime` at `/16`.
pub struct GlobalFeatures<'t, T: Scalar> {
    pub f: Var<'t, T>,
    pub f_prime: Var<'t, T>,
}

/// A patch window in slice pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchWindow {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchWindow {
    pub fn whole(h: usize, w: usize) -> Self {
        Self { y0: 0, x0: 0, h, w }
    }
}

fn conv3<'t, T: Scalar>(p: &BoundParams<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    conv3d_dvalid(x, p.weight(name)?, p.bias(name)?)
}

fn conv2<'t, T: Scalar>(p: &BoundParams<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    conv2d(x, p.weight(name)?, p.bias(name)?)
}

fn check_patch<T: Scalar>(x: &Var<'_, T>, depth: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    let [1, d, h, w] = shape[..] else {
        return shape_err(format!("encoder input must be [1, D, H, W], got {shape:?}"));
    };
    if d != depth {
        return Err(Error::Depth { expected: depth, got: d });
    }
    if h % 8 != 0 || w % 8 != 0 {
        return shape_err(format!("encoder input {h}x{w} must be divisible by 8"));
    }
    Ok((h, w))
}

fn run_groups<'t, T: Scalar>(
    mut x: Var<'t, T>,
    params: &BoundParams<'t, T>,
    cfg: &GgpfnConfig,
) -> Result<EncoderPyramid<'t, T>> {
    let mut outs = Vec::with_capacity(4);
    for (j, steps) in encoder_plan(cfg).into_iter().enumerate() {
        if j > 0 {
            x = max_pool(x, &[1, 2, 2])?;
        }
        for step in steps {
            x = match step {
                EncStep::Conv(l) => relu(conv3(params, &l.name, x)?),
                EncStep::Residual(a, b) => {
                    let inner = relu(conv3(params, &a.name, x)?);
                    let inner = conv3(params, &b.name, inner)?;
                    let identity = center_crop(x, &inner.shape()[1..])?;
                    relu(add(inner, identity)?)
                }
            };
        }
        outs.push(x);
    }
    let scales: [Var<'t, T>; 4] = outs.try_into().map_err(|_| Error::Shape("encoder needs 4 groups".into()))?;
    Ok(EncoderPyramid { scales })
}

/// Progressive fusion encoder on a `[1, 2T + 1, H, W]` slab.
pub fn encoder_forward<'t, T: Scalar>(
    patch: Var<'t, T>,
    params: &BoundParams<'t, T>,
    cfg: &GgpfnConfig,
) -> Result<EncoderPyramid<'t, T>> {
    if cfg.fusion_mode != FusionMode::Progressive {
        return Err(Error::Config("encoder_forward needs fusion_mode = progressive".into()));
    }
    check_patch(&patch, cfg.required_depth())?;
    run_groups(patch, params, cfg)
}

/// One-off fusion encoder: the `2T + 1` slices become channels of a single
/// convolution, followed by a planar four-group encoder.
pub fn one_off_encoder_forward<'t, T: Scalar>(
    patch: Var<'t, T>,
    params: &BoundParams<'t, T>,
    cfg: &GgpfnConfig,
) -> Result<EncoderPyramid<'t, T>> {
    if cfg.fusion_mode != FusionMode::OneOff {
        return Err(Error::Config("one_off_encoder_forward needs fusion_mode = one_off".into()));
    }
    let (h, w) = check_patch(&patch, cfg.required_depth())?;
    let stacked = reshape(patch, &[cfg.required_depth(), 1, h, w])?;
    let fused = relu(conv3(params, "enc.fuse", stacked)?);
    run_groups(fused, params, cfg)
}

/// Dispatches on the configured fusion mode.
pub fn encode<'t, T: Scalar>(
    patch: Var<'t, T>,
    params: &BoundParams<'t, T>,
    cfg: &GgpfnConfig,
) -> Result<EncoderPyramid<'t, T>> {
    match cfg.fusion_mode {
        FusionMode::Progressive => encoder_forward(patch, params, cfg),
        FusionMode::OneOff => one_off_encoder_forward(patch, params, cfg),
    }
}

/// Global branch on a downsampled `[1, hg, wg]` slice: twelve 3×3
/// convolutions in five stages separated by four 2×2 max-pools, then a
/// stride-2 convolution.
pub fn global_forward<'t, T: Scalar>(
    slice_g: Var<'t, T>,
    params: &BoundParams<'t, T>,
    cfg: &GgpfnConfig,
) -> Result<GlobalFeatures<'t, T>> {
    let shape = slice_g.shape();
    let [1, h, w] = shape[..] else {
        return shape_err(format!("global input must be [1, hg, wg], got {shape:?}"));
    };
    if h % 32 != 0 || w % 32 != 0 {
        return shape_err(format!("global input {h}x{w} must be divisible by 32"));
    }
    let _ = cfg;
    let mut x = slice_g;
    for (s, &n) in GLOBAL_STAGE_CONVS.iter().enumerate() {
        if s > 0 {
            x = max_pool(x, &[2, 2])?;
        }
        for i in 0..n {
            x = relu(conv2(params, &format!("glob.s{s}.conv{i}"), x)?);
        }
    }
    let f_prime = x;
    let f = relu(conv2d_stride2(f_prime, params.weight("glob.down")?, params.bias("glob.down")?)?);
    Ok(GlobalFeatures { f, f_prime })
}

/// Normalized sampling coordinates of every `E_k` pixel center of `window`
/// within a slice of extents `slice_hw`.
pub fn subpixel_coords(
    window: PatchWindow,
    slice_hw: (usize, usize),
    ek_hw: (usize, usize),
) -> Result<Vec<(f64, f64)>> {
    let (h, w) = slice_hw;
    let (eh, ew) = ek_hw;
    if window.h == 0 || window.w == 0 || window.y0 + window.h > h || window.x0 + window.w > w || eh == 0 || ew == 0 {
        return shape_err(format!("patch window {window:?} is outside a {h}x{w} slice"));
    }
    let (sy, sx) = (window.h as f64 / eh as f64, window.w as f64 / ew as f64);
    let mut coords = Vec::with_capacity(eh * ew);
    for i in 0..eh {
        let u = (window.y0 as f64 + (i as f64 + 0.5) * sy) / h as f64;
        for j in 0..ew {
            let v = (window.x0 as f64 + (j as f64 + 0.5) * sx) / w as f64;
            coords.push((u, v));
        }
    }
    Ok(coords)
}

/// Bilinearly samples `f: [Cg, hf, wf]` at each `E_k` pixel center of
/// `window`, giving `[Cg, eh, ew]`.
pub fn subpixel_gather<'t, T: Scalar>(
    f: Var<'t, T>,
    window: PatchWindow,
    slice_hw: (usize, usize),
    ek_hw: (usize, usize),
) -> Result<Var<'t, T>> {
    let coords = subpixel_coords(window, slice_hw, ek_hw)?;
    let sampled = bilinear_sample(f, &coords)?;
    let cg = sampled.shape()[0];
    reshape(sampled, &[cg, ek_hw.0, ek_hw.1])
}

/// 2D decoder: `E_k` (optionally concatenated with the gathered global map)
/// upsampled three times with center-slice skips, then a 1×1 sigmoid head.
/// Returns `[1, H, W]` probabilities.
pub fn decoder_forward<'t, T: Scalar>(
    pyramid: &EncoderPyramid<'t, T>,
    fk: Option<Var<'t, T>>,
    params: &BoundParams<'t, T>,
    cfg: &GgpfnConfig,
) -> Result<Var<'t, T>> {
    let mut x = pyramid.ek()?;
    match (cfg.global_enabled, fk) {
        (true, Some(fk)) => x = concat_channels(x, fk)?,
        (false, None) => {}
        (true, None) => return Err(Error::Usage("global guidance enabled but no global map given".into())),
        (false, Some(_)) => return Err(Error::Usage("global guidance disabled but a global map was given".into())),
    }
    for s in (0..3).rev() {
        let up = format!("dec.s{s}.up");
        x = transposed_conv2d(x, params.weight(&up)?, params.bias(&up)?)?;
        x = concat_channels(x, pyramid.skip(s)?)?;
        x = relu(conv2(params, &format!("dec.s{s}.conv0"), x)?);
        x = relu(conv2(params, &format!("dec.s{s}.conv1"), x)?);
    }
    Ok(sigmoid(conv2(params, "dec.out", x)?))
}

/// Per-scale probability maps `P^(1..4)` from the central slice of each
/// encoder scale.
pub fn multiscale_heads<'t, T: Scalar>(
    pyramid: &EncoderPyramid<'t, T>,
    params: &BoundParams<'t, T>,
) -> Result<[Var<'t, T>; 4]> {
    let mut out = Vec::with_capacity(4);
    for j in 0..4 {
        out.push(sigmoid(conv2(params, &format!("head.s{j}"), pyramid.skip(j)?)?));
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
}

/// Probability maps `(P^f, P^f')` from the global features.
pub fn global_heads<'t, T: Scalar>(
    gf: &GlobalFeatures<'t, T>,
    params: &BoundParams<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((sigmoid(conv2(params, "glob.head.f", gf.f)?), sigmoid(conv2(params, "glob.head.fp", gf.f_prime)?)))
}

/// Outputs of one patch forward pass.
pub struct PatchOutputs<'t, T: Scalar> {
    /// `P_k`, `[1, H, W]`.
    pub prob: Var<'t, T>,
    /// `P^(1..4)` when requested.
    pub heads: Option<[Var<'t, T>; 4]>,
}

/// Encoder, optional global gather and decoder for one `[1, 2T + 1, ph, pw]`
/// slab located at `window` within a slice of extents `slice_hw`.
pub fn forward_patch<'t, T: Scalar>(
    slab: Var<'t, T>,
    window: PatchWindow,
    slice_hw: (usize, usize),
    global: Option<&GlobalFeatures<'t, T>>,
    params: &BoundParams<'t, T>,
    cfg: &GgpfnConfig,
    with_heads: bool,
) -> Result<PatchOutputs<'t, T>> {
    let pyramid = encode(slab, params, cfg)?;
    let fk = match (cfg.global_enabled, global) {
        (true, Some(gf)) => {
            let ek_shape = pyramid.scales[3].shape();
            Some(subpixel_gather(gf.f, window, slice_hw, (ek_shape[2], ek_shape[3]))?)
        }
        (true, None) => return Err(Error::Usage("global guidance enabled but no global features given".into())),
        (false, _) => None,
    };
    let prob = decoder_forward(&pyramid, fk, params, cfg)?;
    let heads = if with_heads { Some(multiscale_heads(&pyramid, params)?) } else { None };
    Ok(PatchOutputs { prob, heads })
}
