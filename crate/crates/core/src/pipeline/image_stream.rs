use rand::Rng;

use super::params::{uniform_init, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Two 3×3 convolutions (the second with stride 2) per block, plus one 1×1
/// projection per block feeding the full-resolution map `F_U`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStream {
    pub blocks: Vec<[ParamId; 4]>,
    pub projections: Vec<[ParamId; 2]>,
    pub channels: [usize; 4],
    pub fu_channels: usize,
}

#[derive(Clone, Debug)]
pub struct ImageFeatures {
    /// `F_1..F_4`, at strides 2, 4, 8 and 16.
    pub blocks: [Var; 4],
    /// `4·fu_channels × H × W`.
    pub fu: Var,
}

impl ImageStream {
    pub fn build(store: &mut ParamStore, channels: [usize; 4], fu_channels: usize, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(4);
        let mut projections = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            let k1 = store.push(format!("image.block{i}.conv1.weight"), uniform_init(&[c, cin, 3, 3], cin * 9, 1.0, rng));
            let b1 = store.push(format!("image.block{i}.conv1.bias"), Tensor::zeros(&[c]));
            let k2 = store.push(format!("image.block{i}.conv2.weight"), uniform_init(&[c, c, 3, 3], c * 9, 1.0, rng));
            let b2 = store.push(format!("image.block{i}.conv2.bias"), Tensor::zeros(&[c]));
            blocks.push([k1, b1, k2, b2]);
            cin = c;
        }
        for (i, &c) in channels.iter().enumerate() {
            let k = store.push(format!("image.up{i}.weight"), uniform_init(&[fu_channels, c, 1, 1], c, 1.0, rng));
            let b = store.push(format!("image.up{i}.bias"), Tensor::zeros(&[fu_channels]));
            projections.push([k, b]);
        }
        Self { blocks, projections, channels, fu_channels }
    }

    pub fn fu_width(&self) -> usize {
        4 * self.fu_channels
    }

    /// `image: 3×H×W` with `H` and `W` divisible by 16.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<ImageFeatures> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 || !shape[1].is_multiple_of(16) || !shape[2].is_multiple_of(16) || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Contract(format!("image stream needs 3×H×W with H, W divisible by 16, got {shape:?}")));
        }
        let mut x = image;
        let mut feats = Vec::with_capacity(4);
        for [k1, b1, k2, b2] in &self.blocks {
            let a = g.conv2d(x, p[*k1], Some(p[*b1]), 1, 1)?;
            let a = g.relu(a);
            let b = g.conv2d(a, p[*k2], Some(p[*b2]), 2, 1)?;
            x = g.relu(b);
            feats.push(x);
        }
        let mut ups = Vec::with_capacity(4);
        for (i, [k, b]) in self.projections.iter().enumerate() {
            let proj = g.conv2d(feats[i], p[*k], Some(p[*b]), 1, 0)?;
            ups.push(g.upsample_nearest(proj, 2 << i)?);
        }
        let fu = g.concat_axis0(&ups)?;
        Ok(ImageFeatures { blocks: [feats[0], feats[1], feats[2], feats[3]], fu })
    }
}
