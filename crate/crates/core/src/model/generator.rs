use super::attention::attention_forward;
use super::config::GeneratorConfig;
use super::params::{conv, norm, ModelParams, ParamInit, ParamScope};
use crate::error::{shape_err, Result};
use crate::tensor::{ConvSpec, Graph, Real, Tensor, Var};

/// Channel count of the concatenated generator input: image, gradient
/// maps, edges and mask.
pub const INPUT_CHANNELS: usize = 3 + 6 + 1 + 1;

/// Negative slope of the encoder and decoder activations.
pub const LEAK: f64 = 0.2;
/// Initial scale of the output convolution relative to He init.
pub const OUTPUT_INIT_GAIN: f64 = 0.1;

/// Graph handles for one generator forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    /// Predicted image in [0, 1], (n, 3, S, S).
    pub i_pred: Var,
    /// Predicted gradient maps ordered coarse to fine.
    pub c_pred: Vec<Var>,
}

/// Materialized generator predictions.
#[derive(Clone, Debug)]
pub struct GeneratorOutput<T> {
    pub i_pred: Tensor<T>,
    pub c_pred: Vec<Tensor<T>>,
}

/// Masked-input tensors fed to the generator.
#[derive(Clone, Debug)]
pub struct GeneratorInput<T> {
    pub image: Tensor<T>,
    pub grads: Tensor<T>,
    pub edges: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> GeneratorInput<T> {
    pub fn batch(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<[Var; 4]> {
        Ok([
            g.constant(self.image.clone())?,
            g.constant(self.grads.clone())?,
            g.constant(self.edges.clone())?,
            g.constant(self.mask.clone())?,
        ])
    }
}

fn k7() -> ConvSpec {
    ConvSpec::new(0, 7).padding(3)
}

fn down(oc: usize) -> ConvSpec {
    ConvSpec::new(oc, 4).stride(2).padding(1)
}

fn k3(oc: usize, dilation: usize) -> ConvSpec {
    ConvSpec::new(oc, 3).dilation(dilation).padding(dilation)
}

fn with_oc(mut s: ConvSpec, oc: usize) -> ConvSpec {
    s.out_channels = oc;
    s
}

fn head_spec() -> ConvSpec {
    ConvSpec::new(6, 1)
}

/// Channel width of the decoder feature map at a scale index.
fn decoder_channels(base: usize, scale: usize) -> usize {
    base * (4 >> scale)
}

fn init_resblock<T: Real>(p: &mut ParamInit<T>, prefix: &str, c: usize, dilation: usize) {
    p.conv(&format!("{prefix}.conv0"), c, &k3(c, dilation));
    p.norm(&format!("{prefix}.norm0"), c);
    p.conv(&format!("{prefix}.conv1"), c, &k3(c, 1));
    // Zero gain: every block starts as the identity.
    p.norm_with_gain(&format!("{prefix}.norm1"), c, 0.0);
}

fn act<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.leaky_relu(x, T::from_f64_lossy(LEAK))
}

fn resblock<T: Real>(
    g: &mut Graph<T>,
    s: &mut ParamScope<'_, T>,
    prefix: &str,
    x: Var,
    dilation: usize,
) -> Result<Var> {
    let c = g.shape(x)[1];
    let h = conv(g, s, &format!("{prefix}.conv0"), x, k3(c, dilation))?;
    let h = norm(g, s, &format!("{prefix}.norm0"), h)?;
    let h = g.relu(h)?;
    let h = conv(g, s, &format!("{prefix}.conv1"), h, k3(c, 1))?;
    let h = norm(g, s, &format!("{prefix}.norm1"), h)?;
    g.add(x, h)
}

/// Creates freshly initialized generator parameters.
pub fn build_generator<T: Real>(cfg: &GeneratorConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let mut p = ParamInit::<T>::new(seed);
    p.conv("enc0.conv", INPUT_CHANNELS, &with_oc(k7(), b));
    p.conv("enc1.conv", b, &down(2 * b));
    p.conv("enc2.conv", 2 * b, &down(4 * b));
    for i in 0..cfg.residual_blocks {
        init_resblock(&mut p, &format!("res{i}"), 4 * b, 2);
    }
    if cfg.toggles.attention {
        p.params.insert("att.gamma", Tensor::zeros([1, 1, 1, 1]));
    }
    let scales = cfg.structure_scales();
    for scale in 0..3 {
        let c = decoder_channels(b, scale);
        if scales.contains(&scale) {
            if cfg.toggles.structure_embedding {
                init_resblock(&mut p, &format!("struct{scale}.res"), c, 1);
            }
            p.conv(&format!("struct{scale}.head"), c, &head_spec());
        }
        let merged = if cfg.toggles.structure_embedding && scales.contains(&scale) { 2 * c } else { c };
        if scale < 2 {
            let name = format!("dec{}", scale + 1);
            p.conv(&format!("{name}.conv"), merged, &k3(c / 2, 1));
        } else {
            p.conv("out.conv", merged, &with_oc(k7(), 3));
            p.scale("out.conv.weight", OUTPUT_INIT_GAIN);
        }
    }
    Ok(p.params)
}

fn check_input<T: Real>(g: &Graph<T>, cfg: &GeneratorConfig, inputs: &[Var; 4]) -> Result<()> {
    let s = cfg.image_size;
    let n = g.shape(inputs[0])[0];
    let names = ["image", "gradient maps", "edges", "mask"];
    for ((v, c), name) in inputs.iter().zip([3, 6, 1, 1]).zip(names) {
        let shape = g.shape(*v);
        if shape != [n, c, s, s] {
            return Err(shape_err(
                "generator",
                format!("{name} must have shape {:?}, got {shape:?}", [n, c, s, s]),
            ));
        }
    }
    Ok(())
}

/// Structure branch at one decoder scale. With `embed`, a residual block
/// produces structure features that feed the 6-channel linear head and are
/// concatenated back onto `features`; otherwise the head reads `features`
/// directly and they pass through unchanged.
pub fn structure_embedding_forward<T: Real>(
    g: &mut Graph<T>,
    scope: &mut ParamScope<'_, T>,
    prefix: &str,
    features: Var,
    embed: bool,
) -> Result<(Var, Var)> {
    if embed {
        let sfeat = resblock(g, scope, &format!("{prefix}.res"), features, 1)?;
        let pred = conv(g, scope, &format!("{prefix}.head"), sfeat, head_spec())?;
        Ok((g.concat_channels(&[features, sfeat])?, pred))
    } else {
        let pred = conv(g, scope, &format!("{prefix}.head"), features, head_spec())?;
        Ok((features, pred))
    }
}

/// Runs the generator on bound inputs `[image, grads, edges, mask]`.
pub fn generator_forward<T: Real>(
    g: &mut Graph<T>,
    scope: &mut ParamScope<'_, T>,
    cfg: &GeneratorConfig,
    inputs: [Var; 4],
) -> Result<GeneratorVars> {
    cfg.validate()?;
    check_input(g, cfg, &inputs)?;
    let b = cfg.base_channels;
    let x = g.concat_channels(&inputs)?;
    let mut h = conv(g, scope, "enc0.conv", x, with_oc(k7(), b))?;
    h = act(g, h)?;
    for (i, oc) in [(1, 2 * b), (2, 4 * b)] {
        h = conv(g, scope, &format!("enc{i}.conv"), h, down(oc))?;
        h = act(g, h)?;
    }
    for i in 0..cfg.residual_blocks {
        h = resblock(g, scope, &format!("res{i}"), h, 2)?;
    }
    if cfg.toggles.attention {
        let gamma = scope.var(g, "att.gamma")?;
        h = attention_forward(g, h, cfg.attention.patch, cfg.attention.stride, gamma)?;
    }
    let scales = cfg.structure_scales();
    let mut c_pred = Vec::new();
    let mut i_pred = None;
    for scale in 0..3 {
        let c = decoder_channels(b, scale);
        if scales.contains(&scale) {
            let (merged, pred) =
                structure_embedding_forward(g, scope, &format!("struct{scale}"), h, cfg.toggles.structure_embedding)?;
            h = merged;
            c_pred.push(pred);
        }
        if scale < 2 {
            let name = format!("dec{}", scale + 1);
            h = g.upsample_nearest(h, 2)?;
            h = conv(g, scope, &format!("{name}.conv"), h, k3(c / 2, 1))?;
            h = act(g, h)?;
        } else {
            let o = conv(g, scope, "out.conv", h, with_oc(k7(), 3))?;
            let o = g.tanh(o)?;
            i_pred = Some(g.affine(o, T::from_f64_lossy(0.5), T::from_f64_lossy(0.5))?);
        }
    }
    Ok(GeneratorVars { i_pred: i_pred.expect("final scale always runs"), c_pred })
}

/// Inference-only forward pass with frozen parameters.
pub fn generate<T: Real>(
    params: &ModelParams<T>,
    cfg: &GeneratorConfig,
    input: &GeneratorInput<T>,
) -> Result<GeneratorOutput<T>> {
    let mut g = Graph::new();
    let mut scope = ParamScope::frozen(params);
    let vars = input.bind(&mut g)?;
    let out = generator_forward(&mut g, &mut scope, cfg, vars)?;
    Ok(GeneratorOutput {
        i_pred: g.value(out.i_pred).clone(),
        c_pred: out.c_pred.iter().map(|v| g.value(*v).clone()).collect(),
    })
}
