//! Parameterised building blocks: plain convolution, the attention weight
//! generator, dynamic convolution and the residual dense block.

use rand::Rng;

use crate::tensor::{Element, Graph, Result, Tensor, TensorError, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Element> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g` as a leaf; the returned vector is indexed
    /// by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(T::zero());
        }
    }
}

/// Weight initialisation rule. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// std = sqrt(2 / fan_in), for convolutions followed by ReLU.
    KaimingRelu,
    /// std = sqrt(1 / fan_in).
    Linear,
    /// std = gain * sqrt(1 / fan_in).
    Scaled(f64),
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        let base = (1.0 / fan_in as f64).sqrt();
        match self {
            Init::KaimingRelu => base * 2f64.sqrt(),
            Init::Linear => base,
            Init::Scaled(gain) => base * gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let std = init.std(in_channels * kernel * kernel);
        let weight =
            params.push(format!("{name}.weight"), Tensor::randn([out_channels, in_channels, kernel, kernel], std, rng));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight.0], p[self.bias.0], (self.kernel - 1) / 2)
    }
}

fn expect_channels<T: Element>(g: &Graph<T>, op: &'static str, x: Var, channels: usize) -> Result<()> {
    let [n, c, h, w] = g.value(x).dims4(op)?;
    if c != channels {
        return Err(TensorError::ShapeMismatch { op, expected: vec![n, channels, h, w], got: vec![n, c, h, w] });
    }
    Ok(())
}

/// Pool -> 1x1 conv + ReLU -> 1x1 conv -> softmax: one attention weight per
/// parallel kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGenerator {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub kernels: usize,
    pub temperature: f64,
}

impl WeightGenerator {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        kernels: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv2d::new(params, &format!("{name}.fc1"), in_channels, kernels, 1, Init::KaimingRelu, rng),
            conv2: Conv2d::new(params, &format!("{name}.fc2"), kernels, kernels, 1, Init::Linear, rng),
            kernels,
            temperature,
        }
    }

    /// N x Cin x H x W -> N x K, each row on the probability simplex.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        expect_channels(g, "weight_generator", x, self.conv1.in_channels)?;
        let n = g.shape(x)[0];
        let pooled = g.global_avg_pool(x)?;
        let pooled = g.reshape(pooled, &[n, self.conv1.in_channels, 1, 1])?;
        let h = self.conv1.forward(g, p, pooled)?;
        let h = g.relu(h);
        let logits = self.conv2.forward(g, p, h)?;
        let logits = g.reshape(logits, &[n, self.kernels])?;
        let logits = if self.temperature == 1.0 { logits } else { g.scale(logits, T::lit(1.0 / self.temperature)) };
        g.softmax(logits)
    }
}

/// K parallel kernels mixed per sample by a [`WeightGenerator`], then applied
/// as one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConv {
    /// K x Cout x Cin x k x k
    pub kernels: ParamId,
    /// K x Cout
    pub biases: ParamId,
    pub wg: WeightGenerator,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl DynamicConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        num_kernels: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Self {
        let wg = WeightGenerator::new(params, &format!("{name}.wg"), in_channels, num_kernels, temperature, rng);
        let std = Init::KaimingRelu.std(in_channels * kernel * kernel);
        let kernels = params.push(
            format!("{name}.kernels"),
            Tensor::randn([num_kernels, out_channels, in_channels, kernel, kernel], std, rng),
        );
        let biases = params.push(format!("{name}.biases"), Tensor::zeros([num_kernels, out_channels]));
        Self { kernels, biases, wg, in_channels, out_channels, kernel }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        expect_channels(g, "dynamic_conv", x, self.in_channels)?;
        let k = g.shape(p[self.kernels.0])[0];
        if k != self.wg.kernels {
            return Err(TensorError::Invalid(format!(
                "dynamic_conv: weight generator yields {} weights for {k} kernels",
                self.wg.kernels
            )));
        }
        let attn = self.wg.forward(g, p, x)?;
        g.dynamic_conv2d(x, attn, p[self.kernels.0], p[self.biases.0], (self.kernel - 1) / 2)
    }
}

/// Three densely connected Conv+ReLU layers, a 1x1 fusion back to the input
/// width, and a local residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualDenseBlock {
    pub convs: [Conv2d; 3],
    pub fuse: Conv2d,
    pub channels: usize,
    pub growth: usize,
}

impl ResidualDenseBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        growth: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let convs = [0, 1, 2].map(|i| {
            Conv2d::new(
                params,
                &format!("{name}.conv{}", i + 1),
                channels + i * growth,
                growth,
                kernel,
                Init::KaimingRelu,
                rng,
            )
        });
        let fuse = Conv2d::new(params, &format!("{name}.fuse"), channels + 3 * growth, channels, 1, Init::Linear, rng);
        Self { convs, fuse, channels, growth }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        expect_channels(g, "residual_dense_block", x, self.channels)?;
        let mut feats = vec![x];
        for conv in &self.convs {
            let stacked = if feats.len() == 1 { x } else { g.concat_channels(&feats)? };
            let y = conv.forward(g, p, stacked)?;
            if stacked != x {
                g.release(stacked);
            }
            let y = g.relu(y);
            feats.push(y);
        }
        let all = g.concat_channels(&feats)?;
        for &f in &feats[1..] {
            g.release(f);
        }
        let fused = self.fuse.forward(g, p, all)?;
        g.release(all);
        g.add(x, fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_generator_uniform_on_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::<f64>::default();
        let wg = WeightGenerator::new(&mut ps, "wg", 64, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([2, 64, 3, 3]));
        let a = wg.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(a), &[2, 4]);
        assert!(g.value(a).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn zero_rdb_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::<f32>::default();
        let rdb = ResidualDenseBlock::new(&mut ps, "rdb", 6, 4, 5, &mut rng);
        ps.zero_all();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let input = Tensor::randn([2, 6, 8, 8], 1.0, &mut rng);
        let x = g.constant(input.clone());
        let y = rdb.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f32>::default();
        let rdb = ResidualDenseBlock::new(&mut ps, "rdb", 6, 4, 3, &mut rng);
        let dc = DynamicConv::new(&mut ps, "dc", 6, 6, 3, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 5, 4, 4]));
        assert!(matches!(rdb.forward(&mut g, &p, x), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(dc.forward(&mut g, &p, x), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(dc.wg.forward(&mut g, &p, x), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn param_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::<f32>::default();
        let c = Conv2d::new(&mut ps, "c", 64, 64, 5, Init::Linear, &mut rng);
        assert_eq!(c.param_count(), 102_464);
        assert_eq!(ps.count(), 102_464);
    }
}
