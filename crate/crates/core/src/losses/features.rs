use crate::error::{arg_err, Result};
use crate::model::{ModelParams, ParamScope};
use crate::tensor::{ConvSpec, Graph, Real, Tensor, Var};

/// A fixed image-to-features map used by the perceptual and style terms.
pub trait FeatureExtractor<T: Real> {
    /// Feature maps at decreasing resolution for a (n, 3, h, w) batch.
    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>>;

    /// Pooled per-image embedding used for set-level statistics.
    fn embed(&self, image: &Tensor<T>) -> Result<Vec<Vec<f64>>>;
}

/// The image itself as a single feature level.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, _g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        Ok(vec![image])
    }

    fn embed(&self, image: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        Ok(global_pool(image))
    }
}

pub const EXTRACTOR_CHANNELS: [usize; 5] = [16, 32, 64, 128, 128];
pub const EXTRACTOR_SEED: u64 = 0x5eed_fea7;

/// Frozen random convolution stack: 3×3 stride-2 convs with ReLU.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor<T> {
    params: ModelParams<T>,
    channels: Vec<usize>,
    embed_level: usize,
}

impl<T: Real> Default for RandomConvExtractor<T> {
    fn default() -> Self {
        Self::new(&EXTRACTOR_CHANNELS, EXTRACTOR_SEED).expect("default layout is valid")
    }
}

impl<T: Real> RandomConvExtractor<T> {
    pub fn new(channels: &[usize], seed: u64) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(arg_err("feature extractor", format!("invalid channel layout {channels:?}")));
        }
        let mut params = ModelParams::new();
        let mut in_c = 3;
        for (i, &oc) in channels.iter().enumerate() {
            let name = format!("fx.conv{i}.weight");
            let w = crate::model::he_normal([oc, in_c, 3, 3], std::f64::consts::SQRT_2, seed, &name);
            params.insert(name, w);
            params.insert(format!("fx.conv{i}.bias"), Tensor::zeros([1, oc, 1, 1]));
            in_c = oc;
        }
        let embed_level = channels.iter().rposition(|&c| c <= 64).unwrap_or(0);
        Ok(RandomConvExtractor { params, channels: channels.to_vec(), embed_level })
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Index of the level pooled by [`FeatureExtractor::embed`].
    pub fn embed_level(&self) -> usize {
        self.embed_level
    }

    pub fn embed_dim(&self) -> usize {
        self.channels[self.embed_level]
    }

    fn run(&self, g: &mut Graph<T>, image: Var, upto: usize) -> Result<Vec<Var>> {
        let shape = g.shape(image);
        if shape[1] != 3 {
            return Err(arg_err("feature extractor", format!("expected 3 channels, got {shape:?}")));
        }
        let mut scope = ParamScope::frozen(&self.params);
        let mut h = image;
        let mut out = Vec::with_capacity(upto);
        for (i, &oc) in self.channels.iter().enumerate().take(upto) {
            let w = scope.var(g, &format!("fx.conv{i}.weight"))?;
            let b = scope.var(g, &format!("fx.conv{i}.bias"))?;
            h = g.conv2d(h, w, Some(b), ConvSpec::new(oc, 3).stride(2).padding(1))?;
            h = g.relu(h)?;
            out.push(h);
        }
        Ok(out)
    }
}

impl<T: Real> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        self.run(g, image, self.channels.len())
    }

    fn embed(&self, image: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone())?;
        let feats = self.run(&mut g, x, self.embed_level + 1)?;
        Ok(global_pool(g.value(*feats.last().expect("at least one level"))))
    }
}

/// Channel means per sample.
pub fn global_pool<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let [n, c, h, w] = t.shape();
    let area = (h * w) as f64;
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let start = (i * c + ch) * h * w;
                    t.data()[start..start + h * w].iter().map(|v| v.as_f64()).sum::<f64>() / area
                })
                .collect()
        })
        .collect()
}
