use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::ViewPlane;

/// How the `2T + 1` input slices are fused into one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `T` depth-valid 3×3×3 convolutions, each dropping the two outermost slices.
    Progressive,
    /// One convolution treating every slice as an input channel, then a 2D encoder.
    OneOff,
}

/// Architecture hyperparameters for one view's network.
///
/// Defaults follow the full-size setup: `T = 15` split over four groups as
/// `(4, 2, 3, 6)`, 256×256 training patches, a 224×224 global input and
/// axial/sagittal/coronal fusion weights `(0.8, 0.1, 0.1)`. `alpha`/`beta` are
/// the loss weights of the joint fine-tuning stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GgpfnConfig {
    /// `T`: number of depth-shrinking convolutions and the slice half-width.
    pub slice_halfwidth: usize,
    /// Depth-shrinking convolutions per encoder group. Must sum to `T`.
    pub group_convs: [usize; 4],
    pub channels: [usize; 4],
    /// Decoder widths at scales 1..3 (full, /2, /4).
    pub decoder_channels: [usize; 3],
    /// Global branch widths for its five resolution stages.
    pub global_channels: [usize; 5],
    pub patch_h: usize,
    pub patch_w: usize,
    /// Overlap between neighbouring inference windows, in pixels.
    pub overlap: usize,
    /// Inference window; `None` segments each slice as a single window.
    pub infer_patch: Option<[usize; 2]>,
    pub hg: usize,
    pub wg: usize,
    pub alpha: f64,
    pub beta: f64,
    pub view_weights: [f64; 3],
    pub fusion_mode: FusionMode,
    pub global_enabled: bool,
    /// The viewing plane this network segments.
    pub view: ViewPlane,
}

impl Default for GgpfnConfig {
    fn default() -> Self {
        Self {
            slice_halfwidth: 15,
            group_convs: [4, 2, 3, 6],
            channels: [16, 32, 64, 128],
            decoder_channels: [16, 32, 64],
            global_channels: [16, 32, 64, 64, 128],
            patch_h: 256,
            patch_w: 256,
            overlap: 64,
            infer_patch: None,
            hg: 224,
            wg: 224,
            alpha: 0.01,
            beta: 0.0,
            view_weights: [0.8, 0.1, 0.1],
            fusion_mode: FusionMode::Progressive,
            global_enabled: true,
            view: ViewPlane::Axial,
        }
    }
}

impl GgpfnConfig {
    /// A desk-scale network: `T = 2`, groups `(1, 1, 0, 0)`, widths
    /// `(4, 8, 8, 8)`, 32×32 patches and a 32×32 global input.
    pub fn tiny() -> Self {
        Self {
            slice_halfwidth: 2,
            group_convs: [1, 1, 0, 0],
            channels: [4, 8, 8, 8],
            decoder_channels: [4, 8, 8],
            global_channels: [4, 4, 8, 8, 8],
            patch_h: 32,
            patch_w: 32,
            overlap: 8,
            hg: 32,
            wg: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let total: usize = self.group_convs.iter().sum();
        if total != self.slice_halfwidth {
            return bad(format!(
                "group_convs {:?} sum to {total}, expected slice_halfwidth = {}",
                self.group_convs, self.slice_halfwidth
            ));
        }
        let widths = self.channels.iter().chain(&self.decoder_channels).chain(&self.global_channels);
        if widths.clone().any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        if self.patch_h == 0 || self.patch_w == 0 || !self.patch_h.is_multiple_of(8) || !self.patch_w.is_multiple_of(8)
        {
            return bad(format!("patch {}x{} must be positive multiples of 8", self.patch_h, self.patch_w));
        }
        // Overlap only applies to tiled inference.
        if let Some([ih, iw]) = self.infer_patch {
            if ih == 0 || iw == 0 || ih % 8 != 0 || iw % 8 != 0 || self.overlap >= ih.min(iw) {
                return bad(format!("infer_patch {ih}x{iw} must be multiples of 8 larger than overlap"));
            }
        }
        if self.hg == 0 || self.wg == 0 || !self.hg.is_multiple_of(32) || !self.wg.is_multiple_of(32) {
            return bad(format!("global input {}x{} must be positive multiples of 32", self.hg, self.wg));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("alpha {} and beta {} must be finite and non-negative", self.alpha, self.beta));
        }
        if self.view_weights.iter().any(|&w| !(w >= 0.0)) {
            return bad(format!("view_weights {:?} must be non-negative", self.view_weights));
        }
        let wsum: f64 = self.view_weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-6 {
            return bad(format!("view_weights {:?} sum to {wsum}, expected 1", self.view_weights));
        }
        Ok(())
    }

    /// Input slab depth, `2T + 1`.
    pub fn required_depth(&self) -> usize {
        required_depth(self.slice_halfwidth)
    }

    pub fn receptive_field(&self) -> (usize, usize) {
        let rf = receptive_field(&self.group_convs);
        (rf, rf)
    }

    /// Receptive field of one output probability along H or W: the encoder's,
    /// plus the one-off fusion convolution, plus each decoder scale's two 3×3
    /// convolutions and 2×2 upsampling window (at scales /4, /2 and /1).
    pub fn network_receptive_field(&self) -> usize {
        let fuse = match self.fusion_mode {
            FusionMode::Progressive => 0,
            FusionMode::OneOff => 2,
        };
        receptive_field(&self.group_convs) + fuse + (2 * 2 + 1) * (4 + 2 + 1)
    }

    /// Distance from a window edge beyond which a pixel's probability does
    /// not see the window's zero padding: `⌈network_receptive_field / 2⌉`.
    pub fn tile_margin(&self) -> usize {
        self.network_receptive_field().div_ceil(2)
    }

    /// Extents of the final encoder map for a window of `ph × pw`.
    pub fn bottleneck_extents(ph: usize, pw: usize) -> (usize, usize) {
        (ph / 8, pw / 8)
    }

    /// Encoder map depth after each group, following the depth bookkeeping.
    pub fn group_depths(&self) -> [usize; 4] {
        let mut depth = self.required_depth();
        let mut out = [0; 4];
        for (j, &n) in self.group_convs.iter().enumerate() {
            if self.fusion_mode == FusionMode::Progressive {
                depth -= 2 * n;
            } else {
                depth = 1;
            }
            out[j] = depth;
        }
        out
    }
}

/// `2T + 1`.
pub fn required_depth(slice_halfwidth: usize) -> usize {
    2 * slice_halfwidth + 1
}

/// One layer of the receptive-field recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfLayer {
    /// Stride-1 convolution with a `k`-tap kernel.
    Conv(usize),
    /// Non-overlapping pooling with window `k` (the jump multiplies by `k`).
    Pool(usize),
}

/// Receptive field by the recurrence `rf += (k − 1)·jump`, starting from a
/// single pixel.
pub fn receptive_field_of(layers: &[RfLayer]) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for layer in layers {
        match *layer {
            RfLayer::Conv(k) => rf += (k - 1) * jump,
            RfLayer::Pool(k) => {
                rf += (k - 1) * jump;
                jump *= k;
            }
        }
    }
    rf
}

/// Encoder receptive field along H or W: 3×3 convolutions with 2×2 pooling
/// between groups. A group without depth-shrinking convolutions holds one
/// planar 3×3 convolution.
pub fn receptive_field(group_convs: &[usize; 4]) -> usize {
    let mut layers = Vec::new();
    for (j, &n) in group_convs.iter().enumerate() {
        if j > 0 {
            layers.push(RfLayer::Pool(2));
        }
        layers.extend(std::iter::repeat_n(RfLayer::Conv(3), n.max(1)));
    }
    receptive_field_of(&layers)
}
