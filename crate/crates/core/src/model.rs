//! The counting network: a VGG-style feature extractor tapped at four
//! scales, a density decoder and an optional attention decoder.
//!
//! Both decoders share one layout. The deepest tap is upsampled and fused
//! with the next shallower tap by two transfer blocks
//! (concat → 1×1 → 3×3 → ×2 upsample) and a head block
//! (concat → 1×1 → 3×3 → 3×3). Every conv inside these blocks is followed
//! by batch norm and ReLU. The density decoder ends in a 1×1 conv to one
//! channel; the attention decoder ends in a 1×1 conv and a sigmoid, and the
//! resulting map gates the density features before the final conv.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize};

use crate::autodiff::{BatchNormConfig, Gradients, Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel counts of the five extractor blocks at width 1.
pub const FME_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
/// Convs per extractor block.
pub const FME_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
/// Decoder channels at width 1: first transfer block, second transfer
/// block, head 1×1/3×3, head last 3×3.
pub const DECODER_CHANNELS: [usize; 4] = [256, 128, 64, 32];

/// Inputs must be a multiple of this on both sides.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Scales every channel count; accepts a number or a `"p/q"` string.
    #[serde(deserialize_with = "de_ratio")]
    pub width_multiplier: f64,
    /// `false` builds the density-only ablation without an attention path.
    pub amp_enabled: bool,
    pub upsample: UpsampleMode,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_seed: u64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            amp_enabled: true,
            upsample: UpsampleMode::Nearest,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_seed: 0,
            init_std: 0.01,
        }
    }
}

/// Parses `0.125`, `"0.125"` or `"1/8"`.
pub fn parse_ratio(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((p, q)) => {
            let p: f64 = p.trim().parse().ok()?;
            let q: f64 = q.trim().parse().ok()?;
            (q != 0.0).then(|| p / q)
        }
        None => s.trim().parse().ok(),
    }
}

fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Str(s) => parse_ratio(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid ratio `{s}`"))),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "width_multiplier must be in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::InvalidArgument("bn_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument(
                "bn_momentum must be in [0, 1]".into(),
            ));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::InvalidArgument("init_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Scaled channel count: nearest integer, at least 1.
    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Running statistics of one batch norm layer, named by layer prefix.
#[derive(Clone, Debug)]
pub struct NamedStats<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBnRelu {
    conv: Conv,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct Decoder {
    t1: [ConvBnRelu; 2],
    t2: [ConvBnRelu; 2],
    head: [ConvBnRelu; 3],
    out: Conv,
}

/// Tensors produced by one forward pass, as tape handles.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Density map `[N,1,H/2,W/2]`.
    pub density: Var,
    /// Attention map `[N,1,H/2,W/2]` in (0,1); a constant map of ones when
    /// the attention path is disabled.
    pub attention: Var,
    /// Pre-sigmoid attention, absent without the attention path.
    pub attention_logits: Option<Var>,
    /// Density-path head features.
    pub density_features: Var,
    /// Density features gated by the attention map.
    pub refined: Var,
    /// Taps after conv2_2, conv3_3, conv4_3 and conv5_3.
    pub pyramid: [Var; 4],
    /// Tape handle of every model parameter, index-aligned with
    /// [`Model::parameters`].
    pub params: Vec<Var>,
}

/// Forward outputs as owned tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub density: Tensor<T>,
    pub attention: Tensor<T>,
    pub refined_features: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    stats: Vec<NamedStats<T>>,
    fme: Vec<Vec<ConvBnRelu>>,
    dmp: Decoder,
    amp: Option<Decoder>,
}

struct Builder<'a, T> {
    params: &'a mut Vec<Parameter<T>>,
    stats: &'a mut Vec<NamedStats<T>>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<T: Scalar> Builder<'_, T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let weight = Tensor::from_fn([cout, cin, k, k], |_| {
            T::of(self.normal.sample(&mut self.rng))
        });
        Conv {
            weight: self.param(format!("{name}.weight"), weight),
            bias: self.param(format!("{name}.bias"), Tensor::zeros([cout])),
        }
    }

    fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvBnRelu {
        let conv = self.conv(name, cin, cout, k);
        let gamma = self.param(format!("{name}.bn.gamma"), Tensor::ones([cout]));
        let beta = self.param(format!("{name}.bn.beta"), Tensor::zeros([cout]));
        self.stats.push(NamedStats {
            name: format!("{name}.bn"),
            stats: RunningStats::new(cout),
        });
        ConvBnRelu {
            conv,
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn decoder(&mut self, path: &str, cfg: &ModelConfig) -> Decoder {
        let c = |b| cfg.channels(b);
        let [d1, d2, d3, d4] = DECODER_CHANNELS.map(c);
        let t1_in = c(FME_CHANNELS[4]) + c(FME_CHANNELS[3]);
        let t2_in = d1 + c(FME_CHANNELS[2]);
        let head_in = d2 + c(FME_CHANNELS[1]);
        Decoder {
            t1: [
                self.conv_bn_relu(&format!("{path}.t1.conv1x1"), t1_in, d1, 1),
                self.conv_bn_relu(&format!("{path}.t1.conv3x3"), d1, d1, 3),
            ],
            t2: [
                self.conv_bn_relu(&format!("{path}.t2.conv1x1"), t2_in, d2, 1),
                self.conv_bn_relu(&format!("{path}.t2.conv3x3"), d2, d2, 3),
            ],
            head: [
                self.conv_bn_relu(&format!("{path}.head.conv1x1"), head_in, d3, 1),
                self.conv_bn_relu(&format!("{path}.head.conv3x3_1"), d3, d3, 3),
                self.conv_bn_relu(&format!("{path}.head.conv3x3_2"), d3, d4, 3),
            ],
            out: self.conv(&format!("{path}.out"), d4, 1, 1),
        }
    }
}

/// Per-forward context: the tape plus parameter handles.
struct Ctx<'g, T> {
    g: &'g mut Graph<T>,
    vars: &'g [Var],
    bn: BatchNormConfig<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut b = Builder {
            params: &mut params,
            stats: &mut stats,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            normal: Normal::new(0.0, config.init_std)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?,
        };
        let mut fme = Vec::new();
        let mut cin = 3;
        for (block, (&base, &depth)) in FME_CHANNELS.iter().zip(&FME_DEPTHS).enumerate() {
            let cout = config.channels(base);
            let layers = (0..depth)
                .map(|i| {
                    let l = b.conv_bn_relu(
                        &format!("fme.conv{}_{}", block + 1, i + 1),
                        cin,
                        cout,
                        3,
                    );
                    cin = cout;
                    l
                })
                .collect();
            fme.push(layers);
        }
        let dmp = b.decoder("dmp", &config);
        let amp = config.amp_enabled.then(|| b.decoder("amp", &config));
        Ok(Self {
            config,
            params,
            stats,
            fme,
            dmp,
            amp,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn batch_norm_stats(&self) -> &[NamedStats<T>] {
        &self.stats
    }

    pub fn batch_norm_stats_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.stats
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of a backward pass into each parameter's `grad`.
    /// Parameters the loss does not reach keep `grad == None`.
    pub fn accumulate_grads(&mut self, grads: &mut Gradients<T>, pass: &ForwardPass) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&pass.params) {
            if let Some(g) = grads.take(v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Records a forward pass on `g`. In train mode parameters are recorded
    /// as gradient-taking leaves and batch norm running statistics are
    /// updated; in eval mode parameters are constants.
    pub fn forward(&mut self, g: &mut Graph<T>, images: Var, mode: Mode) -> Result<ForwardPass> {
        let dims = g.value(images).dims4()?;
        let [n, c, h, w] = dims;
        if c != 3 || h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: dims.to_vec(),
                reason: format!(
                    "expected [N,3,H,W] with H and W positive multiples of {INPUT_MULTIPLE}"
                ),
            });
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| match mode {
                Mode::Train => g.variable(p.value.clone()),
                Mode::Eval => g.constant(p.value.clone()),
            })
            .collect();
        let mut ctx = Ctx {
            g,
            vars: &vars,
            bn: BatchNormConfig {
                mode,
                eps: T::of(self.config.bn_eps),
                momentum: T::of(self.config.bn_momentum),
            },
        };

        let mut x = images;
        let mut taps = Vec::with_capacity(4);
        for (block, layers) in self.fme.iter().enumerate() {
            if block > 0 {
                x = ctx.g.maxpool2x2(x)?;
            }
            for layer in layers {
                x = ctx.conv_bn_relu(layer, &mut self.stats, x)?;
            }
            if block > 0 {
                taps.push(x);
            }
        }
        let pyramid: [Var; 4] = taps.try_into().expect("four taps");

        let density_features = ctx.decode(&self.dmp, &mut self.stats, &pyramid)?;
        let (attention, attention_logits, refined) = match &self.amp {
            Some(amp) => {
                let f_att = ctx.decode(amp, &mut self.stats, &pyramid)?;
                let logits = ctx.conv(&amp.out, f_att)?;
                let attention = ctx.g.sigmoid(logits);
                let refined = ctx.g.mul_broadcast_channel(density_features, attention)?;
                (attention, Some(logits), refined)
            }
            None => {
                let ones = ctx.g.constant(Tensor::ones([n, 1, h / 2, w / 2]));
                (ones, None, density_features)
            }
        };
        let density = ctx.conv(&self.dmp.out, refined)?;
        Ok(ForwardPass {
            density,
            attention,
            attention_logits,
            density_features,
            refined,
            pyramid,
            params: vars,
        })
    }

    /// Runs a forward pass on a fresh tape and returns owned outputs.
    pub fn predict(&mut self, images: &Tensor<T>, mode: Mode) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let pass = self.forward(&mut g, x, mode)?;
        Ok(ModelOutput {
            density: g.value(pass.density).clone(),
            attention: g.value(pass.attention).clone(),
            refined_features: g.value(pass.refined).clone(),
        })
    }
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&mut self, conv: &Conv, x: Var) -> Result<Var> {
        self.g
            .conv2d(x, self.vars[conv.weight], Some(self.vars[conv.bias]))
    }

    fn conv_bn_relu(
        &mut self,
        layer: &ConvBnRelu,
        stats: &mut [NamedStats<T>],
        x: Var,
    ) -> Result<Var> {
        let y = self.conv(&layer.conv, x)?;
        let named = &mut stats[layer.stats];
        let y = self
            .g
            .batchnorm(
                y,
                self.vars[layer.gamma],
                self.vars[layer.beta],
                &mut named.stats,
                self.bn,
            )
            .map_err(|e| match e {
                Error::UninitializedStats(_) => Error::UninitializedStats(named.name.clone()),
                other => other,
            })?;
        Ok(self.g.relu(y))
    }

    fn decode(
        &mut self,
        dec: &Decoder,
        stats: &mut [NamedStats<T>],
        pyramid: &[Var; 4],
    ) -> Result<Var> {
        let [c22, c33, c43, c53] = *pyramid;
        let mut x = self.g.upsample2x(c53)?;
        x = self.g.concat_channels(x, c43)?;
        for l in &dec.t1 {
            x = self.conv_bn_relu(l, stats, x)?;
        }
        x = self.g.upsample2x(x)?;
        x = self.g.concat_channels(x, c33)?;
        for l in &dec.t2 {
            x = self.conv_bn_relu(l, stats, x)?;
        }
        x = self.g.upsample2x(x)?;
        x = self.g.concat_channels(x, c22)?;
        for l in &dec.head {
            x = self.conv_bn_relu(l, stats, x)?;
        }
        Ok(x)
    }
}
