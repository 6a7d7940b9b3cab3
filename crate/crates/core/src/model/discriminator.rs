use super::config::DiscriminatorConfig;
use super::params::{conv, ModelParams, ParamInit, ParamScope};
use crate::error::{shape_err, Result};
use crate::tensor::{ConvSpec, Graph, Real, Var};

const LEAK: f64 = 0.2;

fn layers(base: usize) -> [(usize, usize); 5] {
    [(base, 2), (2 * base, 2), (4 * base, 2), (8 * base, 1), (1, 1)]
}

fn spec(oc: usize, stride: usize) -> ConvSpec {
    ConvSpec::new(oc, 4).stride(stride).padding(1)
}

/// Patch discriminator parameters for 3-channel images.
pub fn build_discriminator<T: Real>(cfg: &DiscriminatorConfig, seed: u64) -> Result<ModelParams<T>> {
    if cfg.base_channels == 0 {
        return Err(crate::error::arg_err("discriminator config", "base_channels must be positive"));
    }
    let mut p = ParamInit::<T>::new(seed);
    let mut in_c = 3;
    for (i, (oc, stride)) in layers(cfg.base_channels).into_iter().enumerate() {
        p.conv(&format!("disc.conv{i}"), in_c, &spec(oc, stride));
        in_c = oc;
    }
    Ok(p.params)
}

/// Per-patch realness logits, (n, 1, h', w').
pub fn discriminator_forward<T: Real>(
    g: &mut Graph<T>,
    scope: &mut ParamScope<'_, T>,
    cfg: &DiscriminatorConfig,
    image: Var,
) -> Result<Var> {
    let shape = g.shape(image);
    if shape[1] != 3 {
        return Err(shape_err("discriminator", format!("expected 3 channels, got {shape:?}")));
    }
    let all = layers(cfg.base_channels);
    let mut h = image;
    for (i, (oc, stride)) in all.into_iter().enumerate() {
        h = conv(g, scope, &format!("disc.conv{i}"), h, spec(oc, stride))?;
        if i + 1 < all.len() {
            h = g.leaky_relu(h, T::from_f64_lossy(LEAK))?;
        }
    }
    Ok(h)
}
