//! Analytic parameter and FLOP counts.
//!
//! FLOPs are reported as 2 x multiply-accumulates. A dynamic convolution is
//! charged for the kernel aggregation, the weight generator and one
//! convolution with the aggregated kernel.

use std::fmt;

use crate::config::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub layers: Vec<LayerCost>,
}

impl Cost {
    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn macs(&self) -> usize {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn flops(&self) -> usize {
        2 * self.macs()
    }

    fn push(&mut self, l: LayerCost) {
        self.layers.push(l);
    }

    fn extend(&mut self, other: Cost) {
        self.layers.extend(other.layers);
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(f, "{:<24} {:>10} params {:>14} MACs", l.name, l.params, l.macs)?;
        }
        write!(f, "total: {:.3}M params, {:.3}G FLOPs", self.params() as f64 / 1e6, self.flops() as f64 / 1e9)
    }
}

/// Stride-1 same-padded convolution with bias on an h x w map.
pub fn conv_cost(name: &str, cin: usize, cout: usize, k: usize, h: usize, w: usize) -> LayerCost {
    LayerCost { name: name.to_string(), params: cout * (cin * k * k + 1), macs: cout * cin * k * k * h * w }
}

fn dynamic_conv_cost(name: &str, c: usize, k: usize, kernels: usize, h: usize, w: usize) -> Cost {
    let mut cost = Cost::default();
    let mut fc1 = conv_cost(&format!("{name}.wg.fc1"), c, kernels, 1, 1, 1);
    fc1.macs += c * h * w; // average pooling
    cost.push(fc1);
    cost.push(conv_cost(&format!("{name}.wg.fc2"), kernels, kernels, 1, 1, 1));
    let single = conv_cost(name, c, c, k, h, w);
    cost.push(LayerCost {
        name: name.to_string(),
        params: kernels * single.params,
        macs: single.macs + kernels * single.params,
    });
    cost
}

fn rdb_cost(name: &str, c: usize, growth: usize, k: usize, h: usize, w: usize) -> Cost {
    let mut cost = Cost::default();
    for i in 0..3 {
        cost.push(conv_cost(&format!("{name}.conv{}", i + 1), c + i * growth, growth, k, h, w));
    }
    cost.push(conv_cost(&format!("{name}.fuse"), c + 3 * growth, c, 1, h, w));
    cost
}

/// Whole-network cost for an `in_channels x h x w` input (h, w even).
pub fn model_cost(config: &ModelConfig, h: usize, w: usize) -> Cost {
    let (cin, c, k, g) = (config.in_channels, config.base_channels, config.kernel_size, config.growth());
    let mut cost = Cost::default();
    cost.push(conv_cost("dcb.conv_in", cin, c, k, h, w));
    cost.extend(dynamic_conv_cost("dcb.dynamic", c, k, config.dyn_kernels, h, w));
    cost.push(conv_cost("dcb.conv_out", c, c, k, h, w));
    for i in 1..=2 {
        cost.extend(rdb_cost(&format!("web{i}.fe"), 4 * c, g, k, h / 2, w / 2));
    }
    cost.extend(rdb_cost("rb.rdb1", c, g, k, h, w));
    cost.extend(rdb_cost("rb.rdb2", c, g, k, h, w));
    cost.push(conv_cost("rb.refine", c, c, k, h, w));
    cost.push(conv_cost("rb.out", c, cin, k, h, w));
    cost
}

/// Weight-layer count of the network described by `config`.
pub fn layer_audit(config: &ModelConfig) -> usize {
    // every conv (including 1x1 generator and fusion layers) is one layer,
    // and the dynamic convolution is one more
    model_cost(config, 2, 2).layers.len()
}

/// Dynamic-convolution stack: in -> 64 (5x5), dynamic 64 -> 64 with four
/// 5x5 kernels and its weight generator, 64 -> 64 (5x5).
pub fn dcb_stack(in_channels: usize, h: usize, w: usize) -> Cost {
    let mut cost = Cost::default();
    cost.push(conv_cost("conv1", in_channels, 64, 5, h, w));
    cost.extend(dynamic_conv_cost("dynamic", 64, 5, 4, h, w));
    cost.push(conv_cost("conv2", 64, 64, 5, h, w));
    cost
}

/// Six plain 64 -> 64 3x3 convolutions.
pub fn six_conv_stack(h: usize, w: usize) -> Cost {
    let mut cost = Cost::default();
    for i in 1..=6 {
        cost.push(conv_cost(&format!("conv{i}"), 64, 64, 3, h, w));
    }
    cost
}
