//! Finite-difference verification suites shared by the test targets and the
//! command line.

use crate::error::{arg_err, Result};
use crate::gradcheck::{rel_err, CheckResult, GradCheck};
use crate::losses::{
    discriminator_loss, edge_weight_maps, generator_adv_loss, perceptual_loss, rec_loss, structure_loss, style_loss,
    total_loss, FeatureExtractor, LossParts, LossWeights, RandomConvExtractor,
};
use crate::model::{
    attention_forward, build_discriminator, build_generator, discriminator_forward, generator_forward,
    DiscriminatorConfig, GeneratorConfig, GeneratorInput, ModelParams, ParamScope,
};
use crate::tensor::{Axis, ConvSpec, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Operator and loss checks run at 64-bit against this bound.
pub const OPERATOR_TOL: f64 = 1e-6;
/// 32-bit analytic gradients of the full objective against 64-bit differences.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Tensor,
    Losses,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Tensor, Suite::Losses, Suite::Model];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::Losses => "losses",
            Suite::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Result<Vec<Suite>> {
        match s {
            "all" => Ok(Suite::ALL.to_vec()),
            "tensor" => Ok(vec![Suite::Tensor]),
            "losses" => Ok(vec![Suite::Losses]),
            "model" => Ok(vec![Suite::Model]),
            other => Err(arg_err("gradcheck", format!("unknown module {other:?}; expected all, tensor, losses or model"))),
        }
    }
}

/// Suite options. With `fault`, every analytic gradient is scaled by 1.01
/// before comparison, so every check should fail. `seed` picks the checked
/// coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    pub fault: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn unit(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| 0.5 * (v + 1.0))
}

fn away_from_zero(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

fn binary(shape: [usize; 4], seed: u64, p: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).expect("shape matches")
}

/// `base` moved by 0.1..0.5 with random sign per element.
fn offset_from(base: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = base.clone();
    for v in out.data_mut() {
        let m = rng.gen_range(0.1..0.5);
        *v += if rng.gen_bool(0.5) { m } else { -m };
    }
    out
}

fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(x), seed))?;
    let y = g.mul(x, w)?;
    g.sum(y)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn case(name: impl Into<String>, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name: name.into(), inputs, build: Box::new(build) }
}

fn unary(name: &str, x: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static) -> Case {
    case(name, vec![x], move |g, v| {
        let y = f(g, v[0])?;
        project(g, y, 1)
    })
}

fn fault_hook(fault: bool) -> impl FnOnce(&mut [Tensor<f64>]) {
    move |grads: &mut [Tensor<f64>]| {
        if fault {
            for t in grads {
                *t = t.map(|v| v * 1.01);
            }
        }
    }
}

fn run_cases(cases: Vec<Case>, opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    let check = GradCheck { seed: opts.seed, ..GradCheck::default() };
    cases
        .into_iter()
        .map(|c| check.check_with_hook(&c.name, &c.inputs, OPERATOR_TOL, &c.build, fault_hook(opts.fault)))
        .collect()
}

fn tensor_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    for (k, spec, label) in [
        (3, ConvSpec::new(3, 3).padding(1), "conv2d 3x3"),
        (3, ConvSpec::new(2, 3).stride(2).padding(1), "conv2d 3x3 stride 2"),
        (3, ConvSpec::new(2, 3).dilation(2).padding(2), "conv2d 3x3 dilation 2"),
        (4, ConvSpec::new(2, 4).stride(2).padding(1), "conv2d 4x4 stride 2"),
        (7, ConvSpec::new(2, 7).padding(3), "conv2d 7x7"),
        (1, ConvSpec::new(3, 1), "conv2d 1x1"),
    ] {
        let oc = spec.out_channels;
        let inputs = vec![random([2, 2, 6, 6], 1), random([oc, 2, k, k], 2), random([1, oc, 1, 1], 3)];
        cases.push(case(label, inputs, move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
            project(g, y, 9)
        }));
    }
    cases.push(unary("upsample_nearest", random([2, 2, 3, 2], 4), |g, x| g.upsample_nearest(x, 2)));
    for (axis, label) in [(Axis::Channel, "softmax channel"), (Axis::Height, "softmax height"), (Axis::Width, "softmax width")] {
        cases.push(unary(label, random([2, 3, 4, 5], 6).map(|v| 2.0 * v), move |g, x| g.softmax(x, axis)));
    }
    for (axis, label) in [
        (Axis::Channel, "l2_normalize channel"),
        (Axis::Height, "l2_normalize height"),
        (Axis::Width, "l2_normalize width"),
    ] {
        cases.push(unary(label, random([2, 3, 4, 5], 8), move |g, x| g.l2_normalize(x, axis, 1e-8)));
    }
    let a = away_from_zero([2, 3, 2, 2], 10);
    let b = away_from_zero([2, 3, 2, 2], 11);
    let bcast = away_from_zero([2, 1, 2, 2], 12);
    let scalar = away_from_zero([1, 1, 1, 1], 13);
    let chan = away_from_zero([1, 3, 1, 1], 14);
    let binary_op = |name: &str, x: &Tensor<f64>, y: &Tensor<f64>, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>| {
        case(name, vec![x.clone(), y.clone()], move |g, v| {
            let z = op(g, v[0], v[1])?;
            project(g, z, 1)
        })
    };
    cases.push(binary_op("add", &a, &b, |g, x, y| g.add(x, y)));
    cases.push(binary_op("add broadcast", &a, &chan, |g, x, y| g.add(x, y)));
    cases.push(binary_op("sub", &a, &b, |g, x, y| g.sub(x, y)));
    cases.push(binary_op("sub broadcast", &a, &bcast, |g, x, y| g.sub(x, y)));
    cases.push(binary_op("mul", &a, &b, |g, x, y| g.mul(x, y)));
    cases.push(binary_op("mul broadcast", &a, &bcast, |g, x, y| g.mul(x, y)));
    cases.push(binary_op("mul scalar", &a, &scalar, |g, x, y| g.mul(x, y)));
    cases.push(unary("affine", a.clone(), |g, x| g.affine(x, -1.5, 0.25)));
    cases.push(unary("scale", a.clone(), |g, x| g.scale(x, 0.7)));
    cases.push(unary("relu", a.clone(), |g, x| g.relu(x)));
    cases.push(unary("leaky_relu", a.clone(), |g, x| g.leaky_relu(x, 0.2)));
    cases.push(unary("tanh", a.clone(), |g, x| g.tanh(x)));
    cases.push(unary("sigmoid", a.clone(), |g, x| g.sigmoid(x)));
    cases.push(unary("abs", a.clone(), |g, x| g.abs(x)));
    cases.push(unary("ln", a.map(|v| v.abs() + 0.5), |g, x| g.ln(x)));
    cases.push(unary("clamp", a.clone(), |g, x| g.clamp(x, -0.5, 0.5)));
    cases.push(unary("reshape", a.clone(), |g, x| g.reshape(x, [1, 1, 6, 4])));
    cases.push(case(
        "instance_norm",
        vec![random([2, 3, 3, 4], 20), random([1, 3, 1, 1], 21), random([1, 3, 1, 1], 22)],
        |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 23)
        },
    ));
    cases.push(case("concat_channels", vec![random([2, 1, 3, 3], 24), random([2, 2, 3, 3], 25)], |g, v| {
        let y = g.concat_channels(&[v[0], v[1]])?;
        project(g, y, 26)
    }));
    let x = random([2, 2, 3, 3], 27);
    cases.push(unary("sum", x.clone(), |g, x| {
        let p = g.mul(x, x)?;
        g.sum(p)
    }));
    cases.push(unary("mean", x.clone(), |g, x| {
        let p = g.mul(x, x)?;
        g.mean(p)
    }));
    cases.push(case("mean_abs_diff", vec![x.clone(), offset_from(&x, 28)], |g, v| g.mean_abs_diff(v[0], v[1])));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random([2, 1, 4, 3], 30) } else { random([2, 1, 3, 4], 30) };
        let b = if tb { random([2, 1, 5, 4], 31) } else { random([2, 1, 4, 5], 31) };
        cases.push(case(format!("matmul ta={ta} tb={tb}"), vec![a, b], move |g, v| {
            let y = g.matmul(v[0], v[1], ta, tb)?;
            project(g, y, 32)
        }));
    }
    cases.push(unary("unfold", random([2, 2, 4, 5], 33), |g, x| g.unfold(x, 3, 1, 1)));
    cases.push(unary("unfold stride 2", random([2, 2, 5, 5], 34), |g, x| g.unfold(x, 3, 2, 0)));
    cases.push(unary("fold", random([2, 1, 18, 20], 35), |g, x| g.fold(x, (2, 4, 5), 3, 1, 1)));
    cases
}

/// Two-level extractor with positive weights, so positive pixel offsets keep
/// every feature difference away from zero.
struct PositiveLinear {
    w0: Tensor<f64>,
    w1: Tensor<f64>,
}

impl FeatureExtractor<f64> for PositiveLinear {
    fn features(&self, g: &mut Graph<f64>, image: Var) -> Result<Vec<Var>> {
        let w0 = g.constant(self.w0.clone())?;
        let w1 = g.constant(self.w1.clone())?;
        let a = g.conv2d(image, w0, None, ConvSpec::new(4, 1))?;
        let b = g.conv2d(a, w1, None, ConvSpec::new(5, 3).stride(2).padding(1))?;
        Ok(vec![a, b])
    }

    fn embed(&self, image: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        Ok(crate::losses::global_pool(image))
    }
}

fn loss_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let sizes = [4usize, 8];
    let gt: Vec<Tensor<f64>> = sizes.iter().map(|&s| random([2, 6, s, s], 40 + s as u64)).collect();
    let pred: Vec<Tensor<f64>> = gt.iter().enumerate().map(|(i, t)| offset_from(t, 50 + i as u64)).collect();
    let weights = sizes
        .iter()
        .map(|&s| edge_weight_maps(&binary([2, 1, s, s], 60 + s as u64, 0.2)))
        .collect::<Result<Vec<_>>>()?;
    cases.push(case("structure", pred, move |g, v| {
        let t = gt.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let m = weights.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        Ok(structure_loss(g, v, &t, &m, 100.0)?.total)
    }));
    let img = unit([1, 3, 6, 6], 70);
    let target = img.clone();
    cases.push(case("rec", vec![offset_from(&img, 71)], move |g, v| {
        let t = g.constant(target.clone())?;
        rec_loss(g, v[0], t)
    }));
    let positive = |t: Tensor<f64>| t.map(|v| v.abs() + 0.1);
    let gt = unit([1, 3, 8, 8], 72);
    let lift = unit([1, 3, 8, 8], 73);
    let mut lifted = gt.clone();
    for (p, l) in lifted.data_mut().iter_mut().zip(lift.data()) {
        *p += 0.1 + 0.4 * l;
    }
    for style in [false, true] {
        let fx = PositiveLinear { w0: positive(random([4, 3, 1, 1], 74)), w1: positive(random([5, 4, 3, 3], 75)) };
        let t = gt.clone();
        let name = if style { "style" } else { "perceptual" };
        cases.push(case(name, vec![lifted.clone()], move |g, v| {
            let t = g.constant(t.clone())?;
            if style {
                style_loss(g, &fx, v[0], t)
            } else {
                perceptual_loss(g, &fx, v[0], t)
            }
        }));
    }
    let real = random([2, 1, 3, 3], 76).map(|v| 3.0 * v);
    let fake = random([2, 1, 3, 3], 77).map(|v| 3.0 * v);
    cases.push(case("adv_d", vec![real, fake.clone()], |g, v| discriminator_loss(g, v[0], v[1])));
    cases.push(case("adv_g", vec![fake.clone()], |g, v| generator_adv_loss(g, v[0], false)));
    cases.push(case("adv_g non-saturating", vec![fake], |g, v| generator_adv_loss(g, v[0], true)));
    let parts: Vec<Tensor<f64>> = (0..5).map(|i| Tensor::scalar(0.3 + i as f64)).collect();
    cases.push(case("total", parts, |g, v| {
        let lp = LossParts { rec: v[0], perceptual: v[1], style: v[2], adversarial: v[3], structure: Some(v[4]) };
        total_loss(g, &lp, &LossWeights::default())
    }));
    Ok(cases)
}

/// Small full-model setup used by the composite check.
pub struct CompositeFixture {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub g_params: ModelParams<f64>,
    pub d_params: ModelParams<f64>,
    pub input: GeneratorInput<f64>,
    pub truth: Tensor<f64>,
    pub pyramid: Vec<(Tensor<f64>, Tensor<f64>)>,
    pub weights: LossWeights,
}

impl CompositeFixture {
    pub fn new(seed: u64) -> Result<CompositeFixture> {
        let generator =
            GeneratorConfig { image_size: 32, base_channels: 2, residual_blocks: 1, ..GeneratorConfig::default() };
        let discriminator = DiscriminatorConfig { base_channels: 2 };
        // Parameters are rounded through f32 so both precisions see the same point.
        let g_params = build_generator::<f32>(&generator, seed)?.cast::<f64>();
        let d_params = build_discriminator::<f32>(&discriminator, seed + 1)?.cast::<f64>();
        let (n, s) = (2, generator.image_size);
        let truth = unit([n, 3, s, s], seed + 2).cast::<f32>().cast::<f64>();
        let mask = binary([n, 1, s, s], seed + 3, 0.3);
        let keep = mask.map(|m| 1.0 - m);
        let masked = |t: &Tensor<f64>| {
            let c = t.shape()[1];
            let mut out = t.clone();
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            out.set(i, ch, y, x, t.get(i, ch, y, x) * keep.get(i, 0, y, x));
                        }
                    }
                }
            }
            out
        };
        let grads = random([n, 6, s, s], seed + 4).map(|v| 2.0 * v).cast::<f32>().cast::<f64>();
        let edges = binary([n, 1, s, s], seed + 5, 0.15);
        let input = GeneratorInput { image: masked(&truth), grads: masked(&grads), edges: masked(&edges), mask };
        let pyramid = generator
            .structure_scales()
            .into_iter()
            .enumerate()
            .map(|(k, scale)| {
                let side = s / GeneratorConfig::scale_factor(scale);
                let c = random([n, 6, side, side], seed + 10 + k as u64).map(|v| 2.0 * v).cast::<f32>().cast::<f64>();
                let e = edge_weight_maps(&binary([n, 1, side, side], seed + 20 + k as u64, 0.15))?;
                Ok((c, e.cast::<f32>().cast::<f64>()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CompositeFixture {
            generator,
            discriminator,
            g_params,
            d_params,
            input,
            truth,
            pyramid,
            weights: LossWeights::default(),
        })
    }

    /// Full generator objective with trainable generator parameters and a
    /// frozen discriminator.
    pub fn objective<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ModelParams<T>,
        d_params: &ModelParams<T>,
        trainable: bool,
    ) -> Result<Var> {
        let fx = RandomConvExtractor::<T>::default();
        let mut gs = if trainable { ParamScope::trainable(params) } else { ParamScope::frozen(params) };
        let input = GeneratorInput {
            image: self.input.image.cast(),
            grads: self.input.grads.cast(),
            edges: self.input.edges.cast(),
            mask: self.input.mask.cast(),
        };
        let vars = input.bind(g)?;
        let out = generator_forward(g, &mut gs, &self.generator, vars)?;
        let hole = g.mul(out.i_pred, vars[3])?;
        let comp = g.add(vars[0], hole)?;
        let truth = g.constant(self.truth.cast())?;
        let mut ds = ParamScope::frozen(d_params);
        let logits = discriminator_forward(g, &mut ds, &self.discriminator, comp)?;
        let adv = generator_adv_loss(g, logits, false)?;
        let rec = rec_loss(g, out.i_pred, truth)?;
        let perc = perceptual_loss(g, &fx, out.i_pred, truth)?;
        let style = style_loss(g, &fx, out.i_pred, truth)?;
        let mut gt = Vec::new();
        let mut ew = Vec::new();
        for (c, e) in &self.pyramid {
            gt.push(g.constant(c.cast())?);
            ew.push(g.constant(e.cast())?);
        }
        let st = structure_loss(g, &out.c_pred, &gt, &ew, self.weights.beta)?;
        let parts = LossParts { rec, perceptual: perc, style, adversarial: adv, structure: Some(st.total) };
        total_loss(g, &parts, &self.weights)
    }
}

/// 32-bit analytic gradients of the full objective with respect to every
/// generator tensor, against 64-bit central differences.
pub fn composite_check(coords_per_tensor: usize, opts: SuiteOptions) -> Result<CheckResult> {
    let fx = CompositeFixture::new(5)?;
    let p32 = fx.g_params.cast::<f32>();
    let d32 = fx.d_params.cast::<f32>();
    let mut g = Graph::<f32>::new();
    let loss = fx.objective(&mut g, &p32, &d32, true)?;
    g.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = fx
        .g_params
        .iter()
        .map(|(name, t)| g.param_grads().get(name).map(|a| a.cast::<f64>()).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    fault_hook(opts.fault)(&mut analytic);
    let names: Vec<String> = fx.g_params.names().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = fx.g_params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 17);
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = t.numel();
            (0..coords_per_tensor.min(n)).map(|_| (i, rng.gen_range(0..n))).collect::<Vec<_>>()
        })
        .collect();
    let check = GradCheck { step: 1e-5, richardson: false, ..GradCheck::default() };
    let numeric = check.numeric(&inputs, &coords, |xs| {
        let params = ModelParams::from_map(names.iter().cloned().zip(xs.iter().cloned()).collect());
        let mut g = Graph::<f64>::new();
        let loss = fx.objective(&mut g, &params, &fx.d_params, false)?;
        Ok(g.value(loss).item())
    })?;
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-4 * scale;
    let max = coords
        .iter()
        .zip(&numeric)
        .map(|(&(i, c), &n)| rel_err(analytic[i].data()[c], n, floor))
        .fold(0.0, f64::max);
    Ok(CheckResult::new("generator + total objective (f32 vs f64)", max, COMPOSITE_TOL, coords.len()))
}

fn model_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (k, stride, shape) in [(1, 1, [1, 2, 2, 3]), (3, 1, [2, 3, 4, 4]), (3, 2, [1, 2, 5, 5])] {
        let x = random(shape, 80 + k as u64);
        let gamma = Tensor::scalar(0.7);
        cases.push(case(format!("attention k={k} stride={stride}"), vec![x, gamma], move |g, v| {
            let y = attention_forward(g, v[0], k, stride, v[1])?;
            project(g, y, 81)
        }));
    }
    let cfg = DiscriminatorConfig { base_channels: 2 };
    let params = build_discriminator::<f64>(&cfg, 4)?;
    let real = unit([1, 3, 32, 32], 82);
    let fake = unit([1, 3, 32, 32], 83);
    cases.push(case("discriminator loss wrt images", vec![real, fake], move |g, v| {
        let mut scope = ParamScope::frozen(&params);
        let r = discriminator_forward(g, &mut scope, &cfg, v[0])?;
        let f = discriminator_forward(g, &mut scope, &cfg, v[1])?;
        discriminator_loss(g, r, f)
    }));
    Ok(cases)
}

pub fn run_suite(suite: Suite, opts: SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let results = match suite {
        Suite::Tensor => run_cases(tensor_cases(), opts)?,
        Suite::Losses => run_cases(loss_cases()?, opts)?,
        Suite::Model => {
            let mut r = run_cases(model_cases()?, opts)?;
            r.push(composite_check(2, opts)?);
            r
        }
    };
    Ok(SuiteReport { suite, results, seconds: start.elapsed().as_secs_f64() })
}
