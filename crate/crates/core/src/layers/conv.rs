use rand::Rng;

use super::init_bound;
use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Same-padded convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel_size % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel_size * kernel_size;
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::uniform(
                [out_channels, in_channels, kernel_size, kernel_size],
                init_bound(fan_in),
                rng,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Conv2d {
            kernel,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            stride,
        }
    }

    /// Output spatial extent along one axis: `⌊(n−1)/stride⌋ + 1`.
    pub fn out_extent(&self, n: usize) -> usize {
        (n - 1) / self.stride + 1
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(g.param(self.kernel), g.param(self.bias), self.stride)
    }
}

/// Two 3×3 convolutions with a skip connection:
/// `relu(conv_b(relu(conv_a(x))) + shortcut(x))`. The shortcut is the
/// identity when channels and resolution are unchanged, otherwise a strided
/// 1×1 projection.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub projection: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv_a = Conv2d::new(store, &format!("{name}.a"), in_channels, out_channels, 3, stride, rng);
        let conv_b = Conv2d::new(store, &format!("{name}.b"), out_channels, out_channels, 3, 1, rng);
        let projection = (in_channels != out_channels || stride != 1).then(|| {
            Conv2d::new(store, &format!("{name}.proj"), in_channels, out_channels, 1, stride, rng)
        });
        ResidualBlock {
            conv_a,
            conv_b,
            projection,
        }
    }

    pub fn uses_identity(&self) -> bool {
        self.projection.is_none()
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.conv_a.forward(g, x)?.relu();
        let y = self.conv_b.forward(g, y)?;
        let skip = match &self.projection {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        Ok(y.add(skip)?.relu())
    }
}

/// `B×C×H×W → B×C` spatial mean.
pub fn global_avg_pool<'g>(x: Var<'g>) -> Result<Var<'g>> {
    x.global_avg_pool()
}
