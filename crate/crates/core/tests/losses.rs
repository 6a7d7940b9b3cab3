use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structinpaint::gradcheck::GradCheck;
use structinpaint::losses::*;
use structinpaint::model::{build_discriminator, discriminator_forward, DiscriminatorConfig, ParamScope};
use structinpaint::tensor::{ConvSpec, Graph, Tensor, Var};

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn unit(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| 0.5 * (v + 1.0))
}

fn binary(shape: [usize; 4], seed: u64, p: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// `base` plus an offset of magnitude 0.1..0.5 with random sign, so that
/// |pred − gt| stays away from zero.
fn offset_from(base: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = base
        .data()
        .iter()
        .map(|v| {
            let m = rng.gen_range(0.1..0.5);
            if rng.gen_bool(0.5) {
                v + m
            } else {
                v - m
            }
        })
        .collect();
    Tensor::from_vec(base.shape(), data).unwrap()
}

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

struct Pyramid {
    pred: Vec<Tensor<f64>>,
    gt: Vec<Tensor<f64>>,
    weights: Vec<Tensor<f64>>,
}

fn pyramid(sizes: &[usize], seed: u64) -> Pyramid {
    let gt: Vec<_> = sizes.iter().map(|&s| random([2, 6, s, s], seed + s as u64)).collect();
    let pred = gt.iter().enumerate().map(|(i, t)| offset_from(t, seed + 100 + i as u64)).collect();
    let weights = sizes
        .iter()
        .map(|&s| edge_weight_maps(&binary([2, 1, s, s], seed + 200 + s as u64, 0.2)).unwrap())
        .collect();
    Pyramid { pred, gt, weights }
}

fn structure_value(p: &Pyramid, beta: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let bind = |g: &mut Graph<f64>, ts: &[Tensor<f64>]| ts.iter().map(|t| g.constant(t.clone()).unwrap()).collect::<Vec<_>>();
    let (a, b, m) = (bind(&mut g, &p.pred), bind(&mut g, &p.gt), bind(&mut g, &p.weights));
    let terms = structure_loss(&mut g, &a, &b, &m, beta).unwrap();
    (
        value(&g, terms.total),
        terms.l1.iter().map(|&v| value(&g, v)).collect(),
        terms.edge.iter().map(|&v| value(&g, v)).collect(),
    )
}

// ---- structure loss ---------------------------------------------------------

#[test]
fn structure_loss_is_zero_at_ground_truth_for_every_scale_set() {
    let all = [4usize, 8, 16];
    for mask in 1u32..8 {
        let sizes: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).map(|i| all[i]).collect();
        let mut p = pyramid(&sizes, mask as u64);
        p.pred = p.gt.clone();
        let (total, l1, edge) = structure_value(&p, 100.0);
        assert_eq!(total, 0.0);
        assert!(l1.iter().chain(&edge).all(|&v| v == 0.0));
    }
}

#[test]
fn structure_loss_without_edges_is_pyramid_l1() {
    let mut p = pyramid(&[4, 8, 16], 3);
    for w in &mut p.weights {
        *w = Tensor::zeros(w.shape());
    }
    let (total, l1, edge) = structure_value(&p, 100.0);
    let direct: f64 = p
        .pred
        .iter()
        .zip(&p.gt)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64)
        .sum();
    assert!((total - direct).abs() < 1e-12);
    assert!(edge.iter().all(|&e| e == 0.0));
    assert!((l1.iter().sum::<f64>() - direct).abs() < 1e-12);
}

#[test]
fn structure_loss_delta_configuration() {
    let (h, w) = (16, 16);
    let beta = 100.0;
    let d = -0.37;
    let gt = Tensor::zeros([1, 6, h, w]);
    let mut pred = Tensor::zeros([1, 6, h, w]);
    pred.set(0, 2, 8, 8, d);
    let mut edges = Tensor::zeros([1, 1, h, w]);
    edges.set(0, 0, 8, 8, 1.0);
    let p = Pyramid { pred: vec![pred], gt: vec![gt], weights: vec![edge_weight_maps(&edges).unwrap()] };
    let (total, _, _) = structure_value(&p, beta);
    // Peak of a normalized 10×10 σ=1 Gaussian sampled at half-integer offsets.
    let z: f64 = (0..10).map(|i| (-(i as f64 - 4.5).powi(2) / 2.0).exp()).sum();
    let g_peak = (-(0.25f64 + 0.25) / 2.0).exp() / (z * z);
    let n = (6 * h * w) as f64;
    let want = d.abs() / n + beta * d.abs() * g_peak / n;
    assert!((total - want).abs() < 1e-9, "{total} vs {want}");
}

#[test]
fn structure_loss_is_scale_additive() {
    let p = pyramid(&[4, 8, 16], 9);
    let (total, _, _) = structure_value(&p, 100.0);
    let mut acc = 0.0;
    for i in 0..3 {
        let single = Pyramid {
            pred: vec![p.pred[i].clone()],
            gt: vec![p.gt[i].clone()],
            weights: vec![p.weights[i].clone()],
        };
        acc += structure_value(&single, 100.0).0;
    }
    assert_eq!(total, acc);
}

#[test]
fn structure_loss_rejects_mismatches() {
    let p = pyramid(&[4, 8], 1);
    let mut g = Graph::new();
    let a: Vec<_> = p.pred.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let b: Vec<_> = p.gt.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let m: Vec<_> = p.weights.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    assert!(structure_loss(&mut g, &a, &b[..1], &m, 1.0).is_err());
    assert!(structure_loss(&mut g, &a, &[b[1], b[0]], &m, 1.0).is_err());
    assert!(structure_loss(&mut g, &[], &[], &[], 1.0).is_err());
}

// ---- image losses --------------------------------------------------------------

#[test]
fn rec_loss_examples() {
    let a = unit([2, 3, 8, 8], 1);
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()).unwrap(), g.constant(a.map(|v| v + 0.5)).unwrap());
    let same = rec_loss(&mut g, x, x).unwrap();
    let off = rec_loss(&mut g, x, y).unwrap();
    assert_eq!(value(&g, same), 0.0);
    assert!((value(&g, off) - 0.5).abs() < 1e-12);
    let z = g.constant(Tensor::zeros([2, 3, 4, 4])).unwrap();
    assert!(rec_loss(&mut g, x, z).is_err());
}

#[test]
fn rec_loss_gradient_is_sign_over_n() {
    let gt = unit([1, 3, 4, 4], 2);
    let pred = offset_from(&gt, 3);
    let mut g = Graph::new();
    let p = g.leaf(pred.clone(), true).unwrap();
    let t = g.constant(gt.clone()).unwrap();
    let l = rec_loss(&mut g, p, t).unwrap();
    g.backward(l).unwrap();
    let n = pred.numel() as f64;
    for ((gr, a), b) in g.grad(p).unwrap().data().iter().zip(pred.data()).zip(gt.data()) {
        assert_eq!(*gr, (a - b).signum() / n);
    }
}

/// Two-level linear extractor: fixed 1×1 mix, then a stride-2 3×3 conv.
struct LinearExtractor {
    w0: Tensor<f64>,
    w1: Tensor<f64>,
}

impl LinearExtractor {
    fn new() -> Self {
        LinearExtractor { w0: random([4, 3, 1, 1], 50), w1: random([5, 4, 3, 3], 51) }
    }

    /// Positive weights: a positive pixel offset moves every feature up.
    fn positive() -> Self {
        let f = |t: Tensor<f64>| t.map(|v| v.abs() + 0.1);
        LinearExtractor { w0: f(random([4, 3, 1, 1], 52)), w1: f(random([5, 4, 3, 3], 53)) }
    }
}

impl FeatureExtractor<f64> for LinearExtractor {
    fn features(&self, g: &mut Graph<f64>, image: Var) -> structinpaint::Result<Vec<Var>> {
        let w0 = g.constant(self.w0.clone())?;
        let w1 = g.constant(self.w1.clone())?;
        let a = g.conv2d(image, w0, None, ConvSpec::new(4, 1))?;
        let b = g.conv2d(a, w1, None, ConvSpec::new(5, 3).stride(2).padding(1))?;
        Ok(vec![a, b])
    }

    fn embed(&self, image: &Tensor<f64>) -> structinpaint::Result<Vec<Vec<f64>>> {
        Ok(global_pool(image))
    }
}

fn image_term(
    fx: &dyn FeatureExtractor<f64>,
    pred: &Tensor<f64>,
    gt: &Tensor<f64>,
    style: bool,
) -> f64 {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()).unwrap(), g.constant(gt.clone()).unwrap());
    let l = if style { style_loss(&mut g, fx, p, t) } else { perceptual_loss(&mut g, fx, p, t) }.unwrap();
    value(&g, l)
}

#[test]
fn perceptual_and_style_vanish_on_identical_images() {
    let fx = RandomConvExtractor::<f64>::default();
    let a = unit([2, 3, 32, 32], 4);
    assert_eq!(image_term(&fx, &a, &a, false), 0.0);
    assert_eq!(image_term(&fx, &a, &a, true), 0.0);
    let b = unit([2, 3, 32, 32], 5);
    assert!(image_term(&fx, &a, &b, false) > 0.0);
    assert!(image_term(&fx, &a, &b, true) > 0.0);
}

#[test]
fn perceptual_with_identity_extractor_equals_rec() {
    let a = unit([2, 3, 8, 8], 6);
    let b = unit([2, 3, 8, 8], 7);
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let rec = rec_loss(&mut g, x, y).unwrap();
    assert_eq!(image_term(&IdentityExtractor, &a, &b, false), value(&g, rec));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perceptual_is_monotone_in_perturbation_amplitude(seed in any::<u64>(), a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let fx = LinearExtractor::new();
        let base = unit([1, 3, 8, 8], seed);
        let dir = random([1, 3, 8, 8], seed ^ 1);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let at = |s: f64| {
            let mut p = base.clone();
            for (v, d) in p.data_mut().iter_mut().zip(dir.data()) {
                *v += s * d;
            }
            image_term(&fx, &p, &base, false)
        };
        prop_assert!(at(lo) <= at(hi) + 1e-12);
    }

    #[test]
    fn image_terms_are_non_negative(seed in any::<u64>()) {
        let fx = RandomConvExtractor::<f64>::new(&[4, 6, 8], 3).unwrap();
        let a = unit([1, 3, 16, 16], seed);
        let b = unit([1, 3, 16, 16], seed ^ 7);
        prop_assert!(image_term(&fx, &a, &b, false) >= 0.0);
        prop_assert!(image_term(&fx, &a, &b, true) >= 0.0);
        let mut p = pyramid(&[4, 8], seed);
        prop_assert!(structure_value(&p, 100.0).0 >= 0.0);
        p.pred = p.gt.clone();
        prop_assert_eq!(structure_value(&p, 100.0).0, 0.0);
    }
}

#[test]
fn gram_of_constant_plane() {
    for c in [0.3, -1.7, 2.0] {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full([1, 1, 2, 2], c)).unwrap();
        let gm = gram(&mut g, f).unwrap();
        assert_eq!(g.shape(gm), [1, 1, 1, 1]);
        assert!((value(&g, gm) - c * c).abs() < 1e-12);
    }
}

#[test]
fn gram_is_symmetric() {
    let mut g = Graph::new();
    let f = g.constant(random([2, 5, 3, 4], 8)).unwrap();
    let gm = gram(&mut g, f).unwrap();
    let t = g.value(gm);
    for n in 0..2 {
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(t.get(n, 0, a, b), t.get(n, 0, b, a));
            }
        }
    }
    // Direct normalized sum.
    let x = random([2, 5, 3, 4], 8);
    let want: f64 = (0..3).flat_map(|h| (0..4).map(move |w| (h, w))).map(|(h, w)| x.get(1, 1, h, w) * x.get(1, 3, h, w)).sum::<f64>() / 60.0;
    assert!((t.get(1, 0, 1, 3) - want).abs() < 1e-12);
}

#[test]
fn extractor_is_deterministic_with_decreasing_resolution() {
    let fx = RandomConvExtractor::<f64>::default();
    assert!(fx.levels() >= 3);
    let img = unit([1, 3, 64, 64], 9);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(img.clone()).unwrap();
        let f = fx.features(&mut g, x).unwrap();
        f.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let sizes: Vec<usize> = a.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
    assert_eq!(fx.embed_dim(), 64);
    let e = fx.embed(&img).unwrap();
    assert_eq!(e.len(), 1);
    assert_eq!(e[0].len(), 64);
}

// ---- adversarial ------------------------------------------------------------------

fn adv(real: Tensor<f64>, fake: Tensor<f64>) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let (r, f) = (g.constant(real).unwrap(), g.constant(fake).unwrap());
    let d = discriminator_loss(&mut g, r, f).unwrap();
    let lg = generator_adv_loss(&mut g, f, false).unwrap();
    let ns = generator_adv_loss(&mut g, f, true).unwrap();
    (value(&g, d), value(&g, lg), value(&g, ns))
}

#[test]
fn adversarial_at_symmetric_point() {
    let (d, lg, ns) = adv(Tensor::zeros([2, 1, 6, 6]), Tensor::zeros([2, 1, 6, 6]));
    assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((lg - 0.5f64.ln()).abs() < 1e-12);
    assert!((ns - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn adversarial_perfect_discriminator() {
    let (d, lg, _) = adv(Tensor::full([1, 1, 4, 4], 60.0), Tensor::full([1, 1, 4, 4], -60.0));
    assert!(d >= 0.0 && d < 1e-6, "{d}");
    assert!(lg.is_finite());
    let (d, lg, _) = adv(Tensor::full([1, 1, 4, 4], -60.0), Tensor::full([1, 1, 4, 4], 60.0));
    assert!(d.is_finite() && d > 30.0);
    assert!((lg - 1e-7f64.ln()).abs() < 1e-6);
}

#[test]
fn generator_adversarial_gradient_through_discriminator() {
    let cfg = DiscriminatorConfig { base_channels: 2 };
    let params = build_discriminator::<f64>(&cfg, 4).unwrap();
    let comp = unit([1, 3, 32, 32], 10);
    for ns in [false, true] {
        let res = GradCheck { max_coords: 32, ..Default::default() }
            .check("adv_g", &[comp.clone()], 1e-3, |g, v| {
                let mut scope = ParamScope::frozen(&params);
                let z = discriminator_forward(g, &mut scope, &cfg, v[0])?;
                generator_adv_loss(g, z, ns)
            })
            .unwrap();
        assert!(res.passed, "{res}");
    }
}

#[test]
fn non_finite_scores_are_rejected() {
    let mut g = Graph::<f64>::new();
    assert!(g.constant(Tensor::full([1, 1, 2, 2], f64::NAN)).is_err());
    let r = g.constant(Tensor::full([1, 1, 2, 2], 1e308)).unwrap();
    let big = g.scale(r, 10.0);
    assert!(big.is_err());
}

// ---- total ---------------------------------------------------------------------

fn total_graph(parts: [f64; 5], w: &LossWeights, with_structure: bool) -> structinpaint::Result<f64> {
    let mut g = Graph::new();
    let v: Vec<Var> = parts.iter().map(|&p| g.constant(Tensor::scalar(p)).unwrap()).collect();
    let lp = LossParts {
        rec: v[0],
        perceptual: v[1],
        style: v[2],
        adversarial: v[3],
        structure: with_structure.then_some(v[4]),
    };
    let t = total_loss(&mut g, &lp, w)?;
    Ok(value(&g, t))
}

#[test]
fn total_loss_arithmetic() {
    let w = LossWeights { perceptual: 1.0, style: 1.0, adversarial: 1.0, alpha: 0.1, beta: 100.0 };
    assert!((total_graph([1.0; 5], &w, true).unwrap() - 4.1).abs() < 1e-12);
    let parts = LossParts { rec: 1.0, perceptual: 1.0, style: 1.0, adversarial: 1.0, structure: Some(1.0) };
    assert!((total_value(&parts, &w).unwrap() - 4.1).abs() < 1e-12);
    let no_alpha = LossWeights { alpha: 0.0, ..w };
    assert_eq!(total_graph([1.0; 5], &no_alpha, true).unwrap(), total_graph([1.0; 5], &w, false).unwrap());
    assert!((total_graph([1.0; 5], &w, false).unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn default_weights() {
    let w = LossWeights::default();
    assert_eq!((w.perceptual, w.style, w.adversarial, w.alpha, w.beta), (0.1, 250.0, 0.1, 0.1, 100.0));
}

#[test]
fn negative_weights_rejected() {
    for w in [
        LossWeights { style: -1.0, ..Default::default() },
        LossWeights { beta: -1e-3, ..Default::default() },
        LossWeights { alpha: f64::NAN, ..Default::default() },
    ] {
        assert!(w.validate().is_err());
        assert!(total_graph([1.0; 5], &w, true).is_err());
    }
}

#[test]
fn total_is_linear_in_each_weight() {
    let parts = [0.7, 1.3, 0.011, -0.4, 2.2];
    let base = LossWeights::default();
    let bump = |k: usize, w: &LossWeights, d: f64| {
        let mut w = *w;
        match k {
            1 => w.perceptual += d,
            2 => w.style += d,
            3 => w.adversarial += d,
            4 => w.alpha += d,
            _ => unreachable!(),
        }
        w
    };
    for k in 1..=4 {
        let lo = total_graph(parts, &base, true).unwrap();
        let hi = total_graph(parts, &bump(k, &base, 0.5), true).unwrap();
        assert!(((hi - lo) / 0.5 - parts[k]).abs() < 1e-9, "weight {k}");
    }
}

#[test]
fn report_recombines_and_round_trips() {
    let mut r = LossReport::new(12);
    for (k, v) in [
        ("structure_s0", 0.2),
        ("edge_s0", 0.001),
        ("structure_s1", 0.3),
        ("edge_s1", 0.002),
        ("rec", 0.1),
        ("perc", 1.5),
        ("style", 0.0004),
        ("adv_g", -0.69),
        ("adv_d", 1.38),
    ] {
        r.set(k, v);
    }
    let w = LossWeights::default();
    let want = 0.1 + 0.1 * 1.5 + 250.0 * 0.0004 + 0.1 * -0.69 + 0.1 * (0.2 + 100.0 * 0.001 + 0.3 + 100.0 * 0.002);
    assert!((r.recombine(&w).unwrap() - want).abs() < 1e-12);
    let line = r.to_json_line();
    assert!(line.starts_with("{\"step\":12,"));
    let back: LossReport = serde_json::from_str(&line).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.first_non_finite(), None);
    r.set("style", f64::INFINITY);
    assert_eq!(r.first_non_finite(), Some("style"));
}

// ---- finite-difference checks -----------------------------------------------------

fn fd_check(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> structinpaint::Result<Var>) {
    let res = GradCheck::default().check(name, inputs, 1e-6, build).unwrap();
    assert!(res.passed, "{res}");
}

#[test]
fn structure_loss_gradients() {
    let p = pyramid(&[4, 8], 21);
    let gt = p.gt.clone();
    let weights = p.weights.clone();
    fd_check("structure", &p.pred, |g, v| {
        let t: Vec<_> = gt.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
        let m: Vec<_> = weights.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
        Ok(structure_loss(g, v, &t, &m, 100.0)?.total)
    });
}

#[test]
fn rec_loss_gradients() {
    let gt = unit([1, 3, 6, 6], 22);
    fd_check("rec", &[offset_from(&gt, 23)], |g, v| {
        let t = g.constant(gt.clone())?;
        rec_loss(g, v[0], t)
    });
}

#[test]
fn perceptual_and_style_gradients() {
    let fx = LinearExtractor::positive();
    let gt = unit([1, 3, 8, 8], 24);
    let lift = unit([1, 3, 8, 8], 25);
    let mut pred = gt.clone();
    for (p, l) in pred.data_mut().iter_mut().zip(lift.data()) {
        *p += 0.1 + 0.4 * l;
    }
    fd_check("style", &[pred.clone()], |g, v| {
        let t = g.constant(gt.clone())?;
        style_loss(g, &fx, v[0], t)
    });
    fd_check("perceptual", &[pred], |g, v| {
        let t = g.constant(gt.clone())?;
        perceptual_loss(g, &fx, v[0], t)
    });
}

#[test]
fn adversarial_gradients_wrt_logits() {
    let real = random([2, 1, 3, 3], 26).map(|v| 3.0 * v);
    let fake = random([2, 1, 3, 3], 27).map(|v| 3.0 * v);
    fd_check("adv_d", &[real, fake.clone()], |g, v| discriminator_loss(g, v[0], v[1]));
    fd_check("adv_g", &[fake.clone()], |g, v| generator_adv_loss(g, v[0], false));
    fd_check("adv_g_ns", &[fake], |g, v| generator_adv_loss(g, v[0], true));
}

#[test]
fn total_loss_gradients() {
    let w = LossWeights::default();
    let parts: Vec<Tensor<f64>> = (0..5).map(|i| Tensor::scalar(0.3 + i as f64)).collect();
    fd_check("total", &parts, |g, v| {
        let lp = LossParts { rec: v[0], perceptual: v[1], style: v[2], adversarial: v[3], structure: Some(v[4]) };
        total_loss(g, &lp, &w)
    });
}

#[test]
fn edge_weight_maps_match_kernel_stamps() {
    let e = binary([2, 1, 12, 12], 30, 0.1);
    let m = edge_weight_maps(&e).unwrap();
    let k = edge_kernel();
    let r = (k.size / 2) as isize;
    for n in 0..2 {
        for y in 0..12isize {
            for x in 0..12isize {
                let mut want = 0.0;
                for ey in 0..12isize {
                    for ex in 0..12isize {
                        if e.get(n, 0, ey as usize, ex as usize) == 1.0 {
                            let (i, j) = (y - ey + r, x - ex + r);
                            if i >= 0 && j >= 0 && (i as usize) < k.size && (j as usize) < k.size {
                                want += k.at(i as usize, j as usize);
                            }
                        }
                    }
                }
                assert!((m.get(n, 0, y as usize, x as usize) - want).abs() < 1e-12);
            }
        }
    }
}
