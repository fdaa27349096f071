use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::layers::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool_backward, maxpool_forward,
    relu_backward, relu_forward, softmax_cross_entropy,
};
use crate::net::tensor::Tensor;

/// Where the RGB and texture-mapped streams meet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// RGB stream alone (3 input channels).
    #[serde(rename = "rgb_only")]
    RgbOnly,
    /// Mapped-image stream alone (3 input channels).
    #[serde(rename = "tex_only")]
    TexOnly,
    /// Channel concatenation at the input: RGB + 3-channel mapped (6).
    #[serde(rename = "early_6ch")]
    Early6ch,
    /// RGB + single collapsed mapped channel (4).
    #[serde(rename = "early_4ch")]
    Early4ch,
    /// Two parallel 3-channel towers joined by concatenating their
    /// penultimate FC activations in front of the classifier.
    #[serde(rename = "late")]
    Late,
}

impl FusionMode {
    /// Channel count of the assembled input batch.
    pub fn input_channels(&self) -> usize {
        match self {
            FusionMode::RgbOnly | FusionMode::TexOnly => 3,
            FusionMode::Early6ch => 6,
            FusionMode::Early4ch => 4,
            FusionMode::Late => 6,
        }
    }

    /// Whether assembling inputs requires the mapped stream.
    pub fn needs_mapped(&self) -> bool {
        !matches!(self, FusionMode::RgbOnly)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::RgbOnly => "rgb_only",
            FusionMode::TexOnly => "tex_only",
            FusionMode::Early6ch => "early_6ch",
            FusionMode::Early4ch => "early_4ch",
            FusionMode::Late => "late",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "rgb_only" => FusionMode::RgbOnly,
            "tex_only" => FusionMode::TexOnly,
            "early_6ch" => FusionMode::Early6ch,
            "early_4ch" => FusionMode::Early4ch,
            "late" => FusionMode::Late,
            other => {
                return Err(Error::config(format!(
                    "unknown fusion mode {other:?} (rgb_only, tex_only, early_6ch, early_4ch, late)"
                )))
            }
        })
    }
}

/// One convolution stage: `filters` output channels with a square odd
/// `kernel`, symmetric zero padding kernel/2, stride, ReLU, then
/// non-overlapping max pooling of width `pool` (1 = no pooling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionNetSpec {
    pub mode: FusionMode,
    pub input_side: usize,
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub fc_dims: Vec<usize>,
    pub class_count: usize,
}

impl FusionNetSpec {
    /// Desk-scale default: three 3x3 blocks of 16/32/64 filters with 2x2
    /// pooling, one 128-wide FC, on 32x32 inputs.
    pub fn desk_scale(mode: FusionMode, class_count: usize) -> FusionNetSpec {
        FusionNetSpec {
            mode,
            input_side: 32,
            conv_blocks: [16, 32, 64]
                .iter()
                .map(|&filters| ConvBlockSpec {
                    filters,
                    kernel: 3,
                    stride: 1,
                    pool: 2,
                })
                .collect(),
            fc_dims: vec![128],
            class_count,
        }
    }

    /// Input channels per tower (late mode runs two 3-channel towers).
    pub fn tower_channels(&self) -> usize {
        match self.mode {
            FusionMode::Late => 3,
            m => m.input_channels(),
        }
    }

    /// Width of the activation vector feeding the classifier.
    pub fn penultimate_width(&self) -> usize {
        let per_tower = *self.fc_dims.last().unwrap_or(&0);
        match self.mode {
            FusionMode::Late => 2 * per_tower,
            _ => per_tower,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config(format!(
                "class_count = {} must be at least 2",
                self.class_count
            )));
        }
        if self.input_side == 0 {
            return Err(Error::config("input_side must be positive"));
        }
        if self.fc_dims.is_empty() {
            return Err(Error::config(
                "fc_dims must hold at least one layer (the penultimate features)",
            ));
        }
        if self.fc_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("fc_dims entries must be positive"));
        }
        for (i, cb) in self.conv_blocks.iter().enumerate() {
            if cb.filters == 0 || cb.stride == 0 || cb.pool == 0 {
                return Err(Error::config(format!(
                    "conv block {i}: filters, stride and pool must be positive"
                )));
            }
            if cb.kernel == 0 || cb.kernel % 2 == 0 {
                return Err(Error::config(format!(
                    "conv block {i}: kernel {} must be odd for symmetric padding",
                    cb.kernel
                )));
            }
        }
        self.tower_flat_dim()?;
        Ok(())
    }

    /// Spatial walk down one tower; returns the flattened feature count
    /// in front of the first FC layer.
    pub fn tower_flat_dim(&self) -> Result<usize> {
        let mut side = self.input_side;
        let mut channels = self.tower_channels();
        for (i, cb) in self.conv_blocks.iter().enumerate() {
            let pad = cb.kernel / 2;
            if side + 2 * pad < cb.kernel {
                return Err(Error::config(format!(
                    "conv block {i}: kernel {} exceeds input side {side}",
                    cb.kernel
                )));
            }
            side = (side + 2 * pad - cb.kernel) / cb.stride + 1;
            side /= cb.pool;
            if side == 0 {
                return Err(Error::config(format!(
                    "conv block {i}: spatial size collapsed to zero"
                )));
            }
            channels = cb.filters;
        }
        Ok(channels * side * side)
    }

    /// Parameter blocks in declaration order: per tower, conv{i}.w/.b then
    /// fc{j}.w/.b; late mode lists the rgb tower, the tex tower, then the
    /// shared classifier head.w/.b.
    pub fn param_blocks(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut blocks = Vec::new();
        let prefixes: &[&str] = match self.mode {
            FusionMode::Late => &["rgb.", "tex."],
            _ => &[""],
        };
        for prefix in prefixes {
            let mut channels = self.tower_channels();
            for (i, cb) in self.conv_blocks.iter().enumerate() {
                blocks.push((
                    format!("{prefix}conv{i}.w"),
                    vec![cb.filters, channels, cb.kernel, cb.kernel],
                ));
                blocks.push((format!("{prefix}conv{i}.b"), vec![cb.filters]));
                channels = cb.filters;
            }
            let mut width = self.tower_flat_dim()?;
            for (j, &d) in self.fc_dims.iter().enumerate() {
                blocks.push((format!("{prefix}fc{j}.w"), vec![d, width]));
                blocks.push((format!("{prefix}fc{j}.b"), vec![d]));
                width = d;
            }
        }
        blocks.push((
            "head.w".to_string(),
            vec![self.class_count, self.penultimate_width()],
        ));
        blocks.push(("head.b".to_string(), vec![self.class_count]));
        Ok(blocks)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub tensor: Tensor,
}

/// Network parameters (or gradients / velocities, which share the block
/// structure) in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub blocks: Vec<ParamBlock>,
}

impl Params {
    /// He-style scaled uniform initialization: weights uniform in
    /// [-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero, drawn in
    /// declaration order from a seeded generator.
    pub fn init(spec: &FusionNetSpec, seed: u64) -> Result<Params> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        for (name, shape) in spec.param_blocks()? {
            let len: usize = shape.iter().product();
            let tensor = if name.ends_with(".w") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..len)
                    .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
                    .collect();
                Tensor::from_vec(&shape, data)?
            } else {
                Tensor::zeros(&shape)
            };
            blocks.push(ParamBlock { name, tensor });
        }
        Ok(Params { blocks })
    }

    pub fn zeros_like(spec: &FusionNetSpec) -> Result<Params> {
        let blocks = spec
            .param_blocks()?
            .into_iter()
            .map(|(name, shape)| ParamBlock {
                name,
                tensor: Tensor::zeros(&shape),
            })
            .collect();
        Ok(Params { blocks })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &b.tensor)
            .ok_or_else(|| Error::config(format!("missing parameter block {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.blocks
            .iter_mut()
            .find(|b| b.name == name)
            .map(|b| &mut b.tensor)
            .ok_or_else(|| Error::config(format!("missing parameter block {name:?}")))
    }

    /// Check block names and shapes against what the network declares.
    pub fn validate_for(&self, spec: &FusionNetSpec) -> Result<()> {
        let expected = spec.param_blocks()?;
        if expected.len() != self.blocks.len() {
            return Err(Error::config(format!(
                "parameter set holds {} blocks, the network declares {}",
                self.blocks.len(),
                expected.len()
            )));
        }
        for ((name, shape), block) in expected.iter().zip(&self.blocks) {
            if &block.name != name {
                return Err(Error::config(format!(
                    "parameter block {:?} where {name:?} was expected",
                    block.name
                )));
            }
            if block.tensor.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter block {name:?} has shape {:?}, expected {shape:?}",
                    block.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Activations feeding the classifier (for late fusion, the two
    /// towers' features concatenated rgb-then-tex).
    pub penultimate: Tensor,
}

struct ConvCache {
    input: Tensor,
    pre_relu: Tensor,
    argmax: Vec<usize>,
}

struct FcCache {
    input: Tensor,
    pre_relu: Tensor,
}

struct TowerCache {
    conv: Vec<ConvCache>,
    flat_shape: Vec<usize>,
    fcs: Vec<FcCache>,
}

pub(crate) struct NetCache {
    towers: Vec<TowerCache>,
    pub(crate) penultimate: Tensor,
    pub(crate) logits: Tensor,
}

fn tower_forward(
    spec: &FusionNetSpec,
    params: &Params,
    prefix: &str,
    input: Tensor,
) -> Result<(Tensor, TowerCache)> {
    let mut cur = input;
    let mut conv_caches = Vec::with_capacity(spec.conv_blocks.len());
    for (i, cb) in spec.conv_blocks.iter().enumerate() {
        let w = params.get(&format!("{prefix}conv{i}.w"))?;
        let b = params.get(&format!("{prefix}conv{i}.b"))?;
        let pre = conv2d_forward(&cur, w, b, cb.stride, cb.kernel / 2)?;
        let post = relu_forward(&pre);
        let (pooled, argmax) = maxpool_forward(&post, cb.pool)?;
        conv_caches.push(ConvCache {
            input: cur,
            pre_relu: pre,
            argmax,
        });
        cur = pooled;
    }
    let flat_shape = cur.shape().to_vec();
    let n = flat_shape[0];
    let feat: usize = flat_shape[1..].iter().product();
    let mut flat = cur.reshaped(&[n, feat])?;
    let mut fc_caches = Vec::with_capacity(spec.fc_dims.len());
    for j in 0..spec.fc_dims.len() {
        let w = params.get(&format!("{prefix}fc{j}.w"))?;
        let b = params.get(&format!("{prefix}fc{j}.b"))?;
        let pre = fc_forward(&flat, w, b)?;
        let post = relu_forward(&pre);
        fc_caches.push(FcCache {
            input: flat,
            pre_relu: pre,
        });
        flat = post;
    }
    Ok((
        flat,
        TowerCache {
            conv: conv_caches,
            flat_shape,
            fcs: fc_caches,
        },
    ))
}

/// Accumulate this tower's parameter gradients into `grads` and return
/// nothing else; the gradient w.r.t. the tower's input is discarded since
/// inputs are data.
fn tower_backward(
    spec: &FusionNetSpec,
    params: &Params,
    prefix: &str,
    cache: &TowerCache,
    grad_penult: Tensor,
    grads: &mut Params,
) -> Result<()> {
    let mut g = grad_penult;
    for j in (0..spec.fc_dims.len()).rev() {
        let fc = &cache.fcs[j];
        g = relu_backward(&fc.pre_relu, &g)?;
        let w = params.get(&format!("{prefix}fc{j}.w"))?;
        let (gx, gw, gb) = fc_backward(&fc.input, w, &g)?;
        *grads.get_mut(&format!("{prefix}fc{j}.w"))? = gw;
        *grads.get_mut(&format!("{prefix}fc{j}.b"))? = gb;
        g = gx;
    }
    g = g.reshaped(&cache.flat_shape)?;
    for i in (0..spec.conv_blocks.len()).rev() {
        let cb = &spec.conv_blocks[i];
        let cc = &cache.conv[i];
        g = maxpool_backward(cc.pre_relu.shape(), &cc.argmax, &g)?;
        g = relu_backward(&cc.pre_relu, &g)?;
        let w = params.get(&format!("{prefix}conv{i}.w"))?;
        let (gx, gw, gb) = conv2d_backward(&cc.input, w, cb.stride, cb.kernel / 2, &g)?;
        *grads.get_mut(&format!("{prefix}conv{i}.w"))? = gw;
        *grads.get_mut(&format!("{prefix}conv{i}.b"))? = gb;
        g = gx;
    }
    Ok(())
}

/// Slice a channel range out of an NCHW batch.
fn split_channels(batch: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (n, c, h, w) = match batch.shape() {
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(Error::config(format!("expected NCHW batch, got {s:?}"))),
    };
    debug_assert!(from < to && to <= c);
    let span = to - from;
    let mut out = Tensor::zeros(&[n, span, h, w]);
    let od = out.data_mut();
    let bd = batch.data();
    for ni in 0..n {
        let src = (ni * c + from) * h * w;
        let dst = ni * span * h * w;
        od[dst..dst + span * h * w].copy_from_slice(&bd[src..src + span * h * w]);
    }
    Ok(out)
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, wa) = match a.shape() {
        &[n, w] => (n, w),
        s => return Err(Error::config(format!("expected matrix, got {s:?}"))),
    };
    let (nb, wb) = match b.shape() {
        &[n, w] => (n, w),
        s => return Err(Error::config(format!("expected matrix, got {s:?}"))),
    };
    if nb != n {
        return Err(Error::config("row-count mismatch in concatenation"));
    }
    let mut out = Tensor::zeros(&[n, wa + wb]);
    let od = out.data_mut();
    for ni in 0..n {
        od[ni * (wa + wb)..ni * (wa + wb) + wa].copy_from_slice(&a.data()[ni * wa..(ni + 1) * wa]);
        od[ni * (wa + wb) + wa..(ni + 1) * (wa + wb)]
            .copy_from_slice(&b.data()[ni * wb..(ni + 1) * wb]);
    }
    Ok(out)
}

fn split_cols(m: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let (n, w) = match m.shape() {
        &[n, w] => (n, w),
        s => return Err(Error::config(format!("expected matrix, got {s:?}"))),
    };
    let mut a = Tensor::zeros(&[n, at]);
    let mut b = Tensor::zeros(&[n, w - at]);
    for ni in 0..n {
        a.data_mut()[ni * at..(ni + 1) * at].copy_from_slice(&m.data()[ni * w..ni * w + at]);
        b.data_mut()[ni * (w - at)..(ni + 1) * (w - at)]
            .copy_from_slice(&m.data()[ni * w + at..(ni + 1) * w]);
    }
    Ok((a, b))
}

fn check_batch(spec: &FusionNetSpec, batch: &Tensor) -> Result<usize> {
    let expect_c = spec.mode.input_channels();
    let s = spec.input_side;
    match batch.shape() {
        &[n, c, h, w] if c == expect_c && h == s && w == s && n > 0 => Ok(n),
        other => Err(Error::config(format!(
            "batch shape mismatch for {} fusion: expected Nx{expect_c}x{s}x{s}, got {other:?}",
            spec.mode.as_str()
        ))),
    }
}

pub(crate) fn forward_cached(
    spec: &FusionNetSpec,
    params: &Params,
    batch: &Tensor,
) -> Result<NetCache> {
    params.validate_for(spec)?;
    check_batch(spec, batch)?;
    let (penult, towers) = match spec.mode {
        FusionMode::Late => {
            let rgb = split_channels(batch, 0, 3)?;
            let tex = split_channels(batch, 3, 6)?;
            let (p_rgb, c_rgb) = tower_forward(spec, params, "rgb.", rgb)?;
            let (p_tex, c_tex) = tower_forward(spec, params, "tex.", tex)?;
            (concat_cols(&p_rgb, &p_tex)?, vec![c_rgb, c_tex])
        }
        _ => {
            let (p, c) = tower_forward(spec, params, "", batch.clone())?;
            (p, vec![c])
        }
    };
    let logits = fc_forward(&penult, params.get("head.w")?, params.get("head.b")?)?;
    Ok(NetCache {
        towers,
        penultimate: penult,
        logits,
    })
}

/// Run the network. Output logits have shape (batch, class_count); the
/// penultimate activations are the classifier's input features.
pub fn forward(spec: &FusionNetSpec, params: &Params, batch: &Tensor) -> Result<ForwardOutput> {
    let cache = forward_cached(spec, params, batch)?;
    Ok(ForwardOutput {
        logits: cache.logits,
        penultimate: cache.penultimate,
    })
}

/// Mean cross-entropy loss and its gradient w.r.t. every parameter block.
/// Weight decay is not folded in here; `sgd_step` applies it as part of
/// the update rule.
pub fn backward(
    spec: &FusionNetSpec,
    params: &Params,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, Params)> {
    let cache = forward_cached(spec, params, batch)?;
    let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels)?;
    let mut grads = Params::zeros_like(spec)?;
    let (d_penult, gw, gb) = fc_backward(&cache.penultimate, params.get("head.w")?, &dlogits)?;
    *grads.get_mut("head.w")? = gw;
    *grads.get_mut("head.b")? = gb;
    match spec.mode {
        FusionMode::Late => {
            let per_tower = *spec.fc_dims.last().unwrap();
            let (d_rgb, d_tex) = split_cols(&d_penult, per_tower)?;
            tower_backward(spec, params, "rgb.", &cache.towers[0], d_rgb, &mut grads)?;
            tower_backward(spec, params, "tex.", &cache.towers[1], d_tex, &mut grads)?;
        }
        _ => {
            tower_backward(spec, params, "", &cache.towers[0], d_penult, &mut grads)?;
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(mode: FusionMode) -> FusionNetSpec {
        FusionNetSpec {
            mode,
            input_side: 8,
            conv_blocks: vec![ConvBlockSpec {
                filters: 2,
                kernel: 3,
                stride: 1,
                pool: 2,
            }],
            fc_dims: vec![5],
            class_count: 2,
        }
    }

    fn rand_batch(seed: u64, n: usize, c: usize, s: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = n * c * s * s;
        Tensor::from_vec(&[n, c, s, s], (0..len).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(FusionNetSpec::desk_scale(FusionMode::Late, 4).validate().is_ok());
        let mut s = tiny_spec(FusionMode::RgbOnly);
        s.class_count = 1;
        assert!(s.validate().is_err());
        let mut s = tiny_spec(FusionMode::RgbOnly);
        s.fc_dims.clear();
        assert!(s.validate().is_err());
        let mut s = tiny_spec(FusionMode::RgbOnly);
        s.conv_blocks[0].kernel = 4;
        assert!(s.validate().is_err());
        let mut s = tiny_spec(FusionMode::RgbOnly);
        s.conv_blocks[0].pool = 20;
        assert!(s.validate().is_err());
    }

    #[test]
    fn desk_scale_shapes() {
        let spec = FusionNetSpec::desk_scale(FusionMode::Early6ch, 4);
        assert_eq!(spec.tower_flat_dim().unwrap(), 64 * 4 * 4);
        assert_eq!(spec.penultimate_width(), 128);
        let late = FusionNetSpec::desk_scale(FusionMode::Late, 4);
        assert_eq!(late.penultimate_width(), 256);
        let blocks = late.param_blocks().unwrap();
        assert_eq!(blocks.first().unwrap().0, "rgb.conv0.w");
        assert!(blocks.iter().any(|(n, _)| n == "tex.fc0.w"));
        assert_eq!(blocks.last().unwrap().0, "head.b");
        assert_eq!(
            blocks.iter().find(|(n, _)| n == "head.w").unwrap().1,
            vec![4, 256]
        );
    }

    #[test]
    fn forward_shape_contracts() {
        for (mode, channels) in [
            (FusionMode::RgbOnly, 3usize),
            (FusionMode::TexOnly, 3),
            (FusionMode::Early6ch, 6),
            (FusionMode::Early4ch, 4),
            (FusionMode::Late, 6),
        ] {
            let spec = tiny_spec(mode);
            let params = Params::init(&spec, 1).unwrap();
            let batch = rand_batch(7, 2, channels, 8);
            let out = forward(&spec, &params, &batch).unwrap();
            assert_eq!(out.logits.shape(), &[2, 2], "{mode:?}");
            assert_eq!(
                out.penultimate.shape(),
                &[2, spec.penultimate_width()],
                "{mode:?}"
            );
            // every wrong channel count is rejected with a naming error
            for wrong in [3usize, 4, 6, 7] {
                if wrong == channels {
                    continue;
                }
                let bad = rand_batch(8, 2, wrong, 8);
                let err = forward(&spec, &params, &bad).unwrap_err().to_string();
                assert!(err.contains("expected"), "{mode:?}: {err}");
                assert!(err.contains(&format!("x{channels}x")), "{mode:?}: {err}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = tiny_spec(FusionMode::Late);
        let params = Params::init(&spec, 3).unwrap();
        let batch = rand_batch(9, 2, 6, 8);
        let a = forward(&spec, &params, &batch).unwrap();
        let b = forward(&spec, &params, &batch).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = tiny_spec(FusionMode::RgbOnly);
        let a = Params::init(&spec, 5).unwrap();
        let b = Params::init(&spec, 5).unwrap();
        let c = Params::init(&spec, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.get("conv0.w").unwrap();
        let bound = (6.0f64 / (3.0 * 9.0)).sqrt();
        assert!(w.data().iter().all(|&v| v.abs() <= bound));
        assert!(a.get("conv0.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn late_fusion_decomposes_to_rgb_tower() {
        let late_spec = tiny_spec(FusionMode::Late);
        let mut late_params = Params::init(&late_spec, 11).unwrap();
        // silence the texture tower at its FC join
        late_params
            .get_mut("tex.fc0.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        late_params
            .get_mut("tex.fc0.b")
            .unwrap()
            .data_mut()
            .fill(0.0);

        // build the equivalent rgb_only net from the late parameters:
        // rgb tower verbatim, head truncated to the rgb half of the concat
        let rgb_spec = tiny_spec(FusionMode::RgbOnly);
        let mut rgb_params = Params::zeros_like(&rgb_spec).unwrap();
        for name in ["conv0.w", "conv0.b", "fc0.w", "fc0.b"] {
            let src = late_params.get(&format!("rgb.{name}")).unwrap().clone();
            *rgb_params.get_mut(name).unwrap() = src;
        }
        let head_w = late_params.get("head.w").unwrap();
        let per_tower = 5usize;
        let full = head_w.shape()[1];
        let mut truncated = Tensor::zeros(&[2, per_tower]);
        for row in 0..2 {
            truncated.data_mut()[row * per_tower..(row + 1) * per_tower]
                .copy_from_slice(&head_w.data()[row * full..row * full + per_tower]);
        }
        *rgb_params.get_mut("head.w").unwrap() = truncated;
        *rgb_params.get_mut("head.b").unwrap() = late_params.get("head.b").unwrap().clone();

        let batch6 = rand_batch(13, 3, 6, 8);
        let rgb_batch = split_channels(&batch6, 0, 3).unwrap();
        let late_out = forward(&late_spec, &late_params, &batch6).unwrap();
        let rgb_out = forward(&rgb_spec, &rgb_params, &rgb_batch).unwrap();
        assert_eq!(late_out.logits.data(), rgb_out.logits.data());
    }

    #[test]
    fn backward_rejects_bad_labels() {
        let spec = tiny_spec(FusionMode::RgbOnly);
        let params = Params::init(&spec, 1).unwrap();
        let batch = rand_batch(2, 2, 3, 8);
        assert!(backward(&spec, &params, &batch, &[0, 2]).is_err());
        assert!(backward(&spec, &params, &batch, &[0]).is_err());
        assert!(backward(&spec, &params, &batch, &[0, 1]).is_ok());
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let spec = tiny_spec(FusionMode::Early4ch);
        let params = Params::init(&spec, 21).unwrap();
        let batch = rand_batch(31, 2, 4, 8);
        let labels = [0usize, 1];
        let (_, g1) = backward(&spec, &params, &batch, &labels).unwrap();
        // duplicate every example
        let mut doubled = Tensor::zeros(&[4, 4, 8, 8]);
        let one = 4 * 8 * 8;
        for i in 0..2 {
            doubled.data_mut()[(2 * i) * one..(2 * i + 1) * one]
                .copy_from_slice(&batch.data()[i * one..(i + 1) * one]);
            doubled.data_mut()[(2 * i + 1) * one..(2 * i + 2) * one]
                .copy_from_slice(&batch.data()[i * one..(i + 1) * one]);
        }
        let (_, g2) = backward(&spec, &params, &doubled, &[0, 0, 1, 1]).unwrap();
        for (a, b) in g1.blocks.iter().zip(&g2.blocks) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((x - y).abs() < 1e-12, "block {}", a.name);
            }
        }
    }

    /// Full-network finite-difference check on every parameter of every
    /// fusion mode, using the small high-precision configuration.
    #[test]
    fn gradients_match_finite_differences_all_modes() {
        for mode in [
            FusionMode::RgbOnly,
            FusionMode::TexOnly,
            FusionMode::Early6ch,
            FusionMode::Early4ch,
            FusionMode::Late,
        ] {
            let spec = tiny_spec(mode);
            let params = Params::init(&spec, 17).unwrap();
            let batch = rand_batch(18, 2, mode.input_channels(), 8);
            let labels = [0usize, 1];
            let (_, grads) = backward(&spec, &params, &batch, &labels).unwrap();
            let h = 1e-5;
            let mut worst = 0.0f64;
            for bi in 0..params.blocks.len() {
                let len = params.blocks[bi].tensor.len();
                // probe a spread of indices in big blocks, all of small ones
                let step = (len / 25).max(1);
                for idx in (0..len).step_by(step) {
                    let mut p_plus = params.clone();
                    p_plus.blocks[bi].tensor.data_mut()[idx] += h;
                    let mut p_minus = params.clone();
                    p_minus.blocks[bi].tensor.data_mut()[idx] -= h;
                    let (lp, _) = backward(&spec, &p_plus, &batch, &labels).unwrap();
                    let (lm, _) = backward(&spec, &p_minus, &batch, &labels).unwrap();
                    let numeric = (lp - lm) / (2.0 * h);
                    let analytic = grads.blocks[bi].tensor.data()[idx];
                    let rel = (analytic - numeric).abs()
                        / (analytic.abs() + numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                    assert!(
                        rel < 1e-4,
                        "{mode:?} {} [{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel})",
                        params.blocks[bi].name
                    );
                }
            }
            assert!(worst < 1e-4);
        }
    }
}
