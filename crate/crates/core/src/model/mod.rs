//! The three-stage denoiser: dynamic convolution block (DCB), two wavelet
//! enhancement blocks (WEB) and the residual reconstruction block (RB).
//!
//! ```text
//! noisy ─ DCB ─ WEB ─ WEB ─┬─ RDB ─ ReLU ─┬─ RDB ─ ReLU ─┐
//!                          │              │              │
//!                          └──────────────┴──── + ───────┘
//!                                               │
//!                       noisy − conv(ReLU(conv(·)))  →  clean estimate
//! ```

mod accounting;
mod checkpoint;

pub use accounting::{conv_cost, dcb_stack, layer_audit, model_cost, six_conv_stack, Cost, LayerCost};
pub use checkpoint::{
    load_checkpoint, peek_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError,
    CheckpointHeader, ManifestEntry, OptimizerMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, ModelConfig};
use crate::layers::{Conv2d, DynamicConv, Init, ParamSet, ResidualDenseBlock};
use crate::tensor::{Element, Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConvBlock {
    pub conv_in: Conv2d,
    pub dynamic: DynamicConv,
    pub conv_out: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBlock {
    pub fe: ResidualDenseBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub rdb1: ResidualDenseBlock,
    pub rdb2: ResidualDenseBlock,
    pub refine: Conv2d,
    pub out: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mwdcnn<T: Element> {
    config: ModelConfig,
    params: ParamSet<T>,
    pub dcb: DynamicConvBlock,
    pub webs: [WaveletBlock; 2],
    pub rb: ResidualBlock,
}

impl<T: Element> Mwdcnn<T> {
    /// Builds the network with freshly initialised parameters drawn from
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::default();
        let (c_in, base, k) = (config.in_channels, config.base_channels, config.kernel_size);
        let growth = config.growth();

        let dcb = DynamicConvBlock {
            conv_in: Conv2d::new(&mut ps, "dcb.conv_in", c_in, base, k, Init::Linear, &mut rng),
            dynamic: DynamicConv::new(
                &mut ps,
                "dcb.dynamic",
                base,
                base,
                k,
                config.dyn_kernels,
                config.temperature,
                &mut rng,
            ),
            conv_out: Conv2d::new(&mut ps, "dcb.conv_out", base, base, k, Init::KaimingRelu, &mut rng),
        };
        let webs = [1, 2].map(|i| WaveletBlock {
            fe: ResidualDenseBlock::new(&mut ps, &format!("web{i}.fe"), 4 * base, growth, k, &mut rng),
        });
        let rb = ResidualBlock {
            rdb1: ResidualDenseBlock::new(&mut ps, "rb.rdb1", base, growth, k, &mut rng),
            rdb2: ResidualDenseBlock::new(&mut ps, "rb.rdb2", base, growth, k, &mut rng),
            refine: Conv2d::new(&mut ps, "rb.refine", base, base, k, Init::KaimingRelu, &mut rng),
            // small start keeps the initial noise estimate near zero, so the
            // untrained network begins close to the identity
            out: Conv2d::new(&mut ps, "rb.out", base, c_in, k, Init::Scaled(0.1), &mut rng),
        };
        Ok(Self { config, params: ps, dcb, webs, rb })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Number of weight layers: 5 (DCB) + 4 + 4 (WEB feature enhancement) + 10 (RB).
    pub fn layer_count(&self) -> usize {
        let dcb = 2 + 2 + 1; // two plain convs, two generator layers, one dynamic conv
        let rdb_layers = |r: &ResidualDenseBlock| r.convs.len() + 1;
        let webs: usize = self.webs.iter().map(|w| rdb_layers(&w.fe)).sum();
        let rb = rdb_layers(&self.rb.rdb1) + rdb_layers(&self.rb.rdb2) + 2;
        dcb + webs + rb
    }

    /// Zeroes the noise-map convolution so the network returns its input.
    pub fn zero_final_conv(&mut self) {
        let (w, b) = (self.rb.out.weight, self.rb.out.bias);
        self.params.get_mut(w).data_mut().fill(T::zero());
        self.params.get_mut(b).data_mut().fill(T::zero());
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let [n, c, h, w] = g.value(x).dims4("mwdcnn")?;
        if c != self.config.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "mwdcnn",
                expected: vec![n, self.config.in_channels, h, w],
                got: vec![n, c, h, w],
            });
        }
        Ok(())
    }

    /// conv -> dynamic conv -> ReLU -> conv -> ReLU.
    pub fn dcb_forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let first = self.dcb.conv_in.forward(g, p, x)?;
        let mut y = self.dcb.dynamic.forward(g, p, first)?;
        if self.config.additive_fusion {
            y = g.add(y, first)?;
        }
        let y = g.relu(y);
        let y = self.dcb.conv_out.forward(g, p, y)?;
        Ok(g.relu(y))
    }

    /// DWT -> feature enhancement on 4C channels -> IDWT. `stage` is 1 or 2.
    pub fn web_forward(&self, g: &mut Graph<T>, p: &[Var], stage: usize, x: Var) -> Result<Var> {
        let block = match stage {
            1 | 2 => &self.webs[stage - 1],
            _ => return Err(TensorError::Invalid(format!("wavelet block stage must be 1 or 2, got {stage}"))),
        };
        let bands = g.dwt2d(x)?;
        let enhanced = block.fe.forward(g, p, bands)?;
        g.release(bands);
        let out = g.idwt2d(enhanced)?;
        g.release(enhanced);
        Ok(out)
    }

    /// Fuses two RDB stages with the wavelet features, predicts the noise map
    /// and subtracts it from the noisy input.
    pub fn rb_forward(&self, g: &mut Graph<T>, p: &[Var], web_out: Var, noisy: Var) -> Result<Var> {
        let s1 = self.rb.rdb1.forward(g, p, web_out)?;
        let s1 = g.relu(s1);
        let s2 = self.rb.rdb2.forward(g, p, s1)?;
        let s2 = g.relu(s2);
        let fused = g.add_n(&[web_out, s1, s2])?;
        for v in [web_out, s1, s2] {
            g.release(v);
        }
        let refined = self.rb.refine.forward(g, p, fused)?;
        let refined = g.relu(refined);
        let noise = self.rb.out.forward(g, p, refined)?;
        g.release(refined);
        g.sub(noisy, noise)
    }

    /// Full pipeline. Input N x C x H x W with H, W even and at least 8.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], noisy: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(noisy).dims4("mwdcnn")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatial { op: "mwdcnn", h, w });
        }
        if h < 8 || w < 8 {
            return Err(TensorError::Invalid(format!("mwdcnn: input {h}x{w} is smaller than 8x8")));
        }
        let x = self.dcb_forward(g, p, noisy)?;
        let y = self.web_forward(g, p, 1, x)?;
        g.release(x);
        let z = self.web_forward(g, p, 2, y)?;
        g.release(y);
        self.rb_forward(g, p, z, noisy)
    }

    /// Gradient-free forward pass.
    pub fn denoise(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(noisy.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    /// [`denoise`](Self::denoise) for any spatial size: odd heights or widths
    /// are reflect-padded by one row/column and the result is cropped back.
    pub fn denoise_any(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = noisy.dims4("denoise")?;
        if h % 2 == 0 && w % 2 == 0 {
            return self.denoise(noisy);
        }
        let (ph, pw) = (h + h % 2, w + w % 2);
        // index `len` mirrors to `len - 2`
        let reflect = |i: usize, len: usize| if i < len { i } else { len.saturating_sub(2) };
        let src = noisy.data();
        let padded = Tensor::from_fn([n, c, ph, pw], |i| {
            let (x, y, plane) = (i % pw, i / pw % ph, i / (pw * ph));
            src[(plane * h + reflect(y, h)) * w + reflect(x, w)]
        });
        let out = self.denoise(&padded)?;
        let od = out.data();
        Tensor::new(
            [n, c, h, w],
            (0..n * c * h * w)
                .map(|i| {
                    let (x, y, plane) = (i % w, i / w % h, i / (w * h));
                    od[(plane * ph + y) * pw + x]
                })
                .collect(),
        )
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ConfigError> {
        let mut model = Self::new(config)?;
        model.params = params;
        Ok(model)
    }
}
