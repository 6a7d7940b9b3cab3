//! Adversarial multi-task training, checkpointing and ablation runs.

mod ablation;
mod data;
mod inference;

pub use ablation::{ablation_configs, run_ablation, AblationReport, AblationRow, STRUCTURE_COLUMNS};
pub use data::{
    assemble_batch, images_digest, load_images, make_batch, synth_dataset, Batch, DataSource, Dataset, Sample,
    ScaleTargets, SynthSpec,
};
pub use inference::{evaluate_holdout, holdout_masks, inpaint, inpaint_batch, mean_fill, HoldoutEval, Inpainted};

use crate::error::{arg_err, Error, Result};
use crate::imageops::CannyParams;
use crate::losses::{
    discriminator_loss, generator_adv_loss, perceptual_loss, rec_loss, structure_loss, style_loss, total_loss,
    FeatureExtractor, LossParts, LossReport, LossWeights, RandomConvExtractor,
};
use crate::maskgen::MaskSpec;
use crate::model::{
    build_discriminator, build_generator, discriminator_forward, generator_forward, DiscriminatorConfig,
    GeneratorConfig, ModelParams, ParamScope, Toggles,
};
use crate::tensor::npy::{load_named, save_named};
use crate::tensor::{Graph, Real, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

const DATA_SALT: u64 = 0xda7a_5eed;
const BATCH_SALT: u64 = 0xba7c_4e55;
const D_SALT: u64 = 0xd15c;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Discriminator learning rate as a fraction of `lr`.
    pub d_lr_ratio: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8, d_lr_ratio: 0.1 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.d_lr_ratio.is_finite()
            && self.d_lr_ratio >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub data: DataSource,
    /// Images taken from the end of the data set for evaluation.
    pub holdout: usize,
    pub mask: MaskSpec,
    pub weights: LossWeights,
    pub non_saturating: bool,
    pub canny: CannyParams,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 5000,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            data: DataSource::default(),
            holdout: 100,
            mask: MaskSpec::default(),
            weights: LossWeights::default(),
            non_saturating: false,
            canny: CannyParams::default(),
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.generator.validate()?;
        if self.discriminator.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be positive".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        let s = self.generator.image_size;
        self.mask.validate((s, s))?;
        if let DataSource::Synthetic(spec) = &self.data {
            if spec.size != s {
                return Err(Error::Config(format!("synthetic size {} differs from image_size {s}", spec.size)));
            }
        }
        Ok(())
    }

    pub fn toggles(&self) -> Toggles {
        self.generator.toggles
    }

    pub fn with_toggles(&self, toggles: Toggles) -> TrainConfig {
        let mut c = self.clone();
        c.generator.toggles = toggles;
        c
    }

    /// Downscale factors of the supervised structure scales, coarse to fine.
    pub fn pyramid_factors(&self) -> Vec<usize> {
        self.generator.structure_scales().into_iter().map(GeneratorConfig::scale_factor).collect()
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub t: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            ModelParams::from_map(params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect())
        };
        AdamState { t: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).ok_or_else(|| arg_err("adam", format!("no moments for {name}")))?;
            let v = self.v.get_mut(name).expect("moments share names");
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(arg_err("adam", format!("gradient shape {:?} for {name} {:?}", g.shape(), p.shape())));
                }
            }
            let gd = g.map(|g| g.data());
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd.map_or(0.0, |g| g[i].as_f64());
                let mi = cfg.beta1 * md[i].as_f64() + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * vd[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                md[i] = T::from_f64_lossy(mi);
                vd[i] = T::from_f64_lossy(vi);
                if upd != 0.0 {
                    pd[i] = T::from_f64_lossy(pd[i].as_f64() - upd);
                }
            }
        }
        Ok(())
    }

    fn digest_into(&self, h: &mut Sha256) {
        h.update(self.t.to_le_bytes());
        h.update(self.m.digest());
        h.update(self.v.digest());
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub generator: ModelParams<f32>,
    pub discriminator: ModelParams<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: u64,
    adam_g_t: u64,
    adam_d_t: u64,
    rng: ChaCha8Rng,
}

/// Model description stored next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub seed: u64,
    pub step: u64,
    /// Edge detector used to build the structure inputs.
    #[serde(default)]
    pub canny: CannyParams,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        let generator = build_generator(&cfg.generator, cfg.seed)?;
        let discriminator = build_discriminator(&cfg.discriminator, cfg.seed ^ D_SALT)?;
        Ok(TrainState {
            step: 0,
            adam_g: AdamState::new(&generator),
            adam_d: AdamState::new(&discriminator),
            generator,
            discriminator,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_SALT),
        })
    }

    /// SHA-256 over step, parameters, optimizer moments and rng state.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.step.to_le_bytes());
        h.update(self.generator.digest());
        h.update(self.discriminator.digest());
        self.adam_g.digest_into(&mut h);
        self.adam_d.digest_into(&mut h);
        h.update(serde_json::to_vec(&self.rng).expect("rng serializes"));
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_named(&dir.join("g"), self.generator.as_map(), self.step)?;
        save_named(&dir.join("d"), self.discriminator.as_map(), self.step)?;
        save_named(&dir.join("adam_g_m"), self.adam_g.m.as_map(), self.step)?;
        save_named(&dir.join("adam_g_v"), self.adam_g.v.as_map(), self.step)?;
        save_named(&dir.join("adam_d_m"), self.adam_d.m.as_map(), self.step)?;
        save_named(&dir.join("adam_d_v"), self.adam_d.v.as_map(), self.step)?;
        let state = StateFile { step: self.step, adam_g_t: self.adam_g.t, adam_d_t: self.adam_d.t, rng: self.rng.clone() };
        write_json(&dir.join("state.json"), &state)?;
        let model = ModelFile {
            generator: cfg.generator.clone(),
            discriminator: cfg.discriminator.clone(),
            seed: cfg.seed,
            step: self.step,
            canny: cfg.canny,
        };
        write_json(&dir.join("model.json"), &model)
    }

    pub fn load(dir: &Path) -> Result<TrainState> {
        let state: StateFile = read_json(&dir.join("state.json"))?;
        let params = |sub: &str| -> Result<ModelParams<f32>> { Ok(ModelParams::from_map(load_named(&dir.join(sub))?.0)) };
        Ok(TrainState {
            step: state.step,
            generator: params("g")?,
            discriminator: params("d")?,
            adam_g: AdamState { t: state.adam_g_t, m: params("adam_g_m")?, v: params("adam_g_v")? },
            adam_d: AdamState { t: state.adam_d_t, m: params("adam_d_m")?, v: params("adam_d_v")? },
            rng: state.rng,
        })
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })
}

/// Reads the generator parameters and configuration of a checkpoint.
pub fn load_generator(dir: &Path) -> Result<(ModelParams<f32>, ModelFile)> {
    let model: ModelFile = read_json(&dir.join("model.json"))?;
    let (map, _) = load_named(&dir.join("g"))?;
    Ok((ModelParams::from_map(map), model))
}

/// Feature lists computed once per image and reused by several losses.
struct CachedFeatures(Vec<(Var, Vec<Var>)>);

impl<T: Real> FeatureExtractor<T> for CachedFeatures {
    fn features(&self, _g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        self.0
            .iter()
            .find(|(v, _)| *v == image)
            .map(|(_, f)| f.clone())
            .ok_or_else(|| arg_err("features", "image was not precomputed"))
    }

    fn embed(&self, _image: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        Err(arg_err("features", "cached features cannot embed"))
    }
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

fn check_report(report: &LossReport) -> Result<()> {
    match report.first_non_finite() {
        Some(term) => Err(Error::NonFinite(format!("loss term {term} at step {}", report.step))),
        None => Ok(()),
    }
}

/// Reusable pieces of a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    fx: RandomConvExtractor<f32>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        Ok(Trainer { cfg, fx: RandomConvExtractor::default() })
    }

    /// One discriminator update on (I, detached I_comp), then one generator
    /// update through the updated discriminator.
    pub fn step(&self, state: &mut TrainState, batch: &Batch<f32>) -> Result<LossReport> {
        let cfg = &self.cfg;
        let mut report = LossReport::new(state.step);
        let mut g = Graph::<f32>::new();
        let new_g = {
            let mut gs = ParamScope::trainable(&state.generator);
            let inputs = batch.input.bind(&mut g)?;
            let out = generator_forward(&mut g, &mut gs, &cfg.generator, inputs)?;
            if !g.value(out.i_pred).is_finite() {
                return Err(Error::NonFinite(format!("generator output at step {}", state.step)));
            }
            let [hat_i, _, _, mask] = inputs;
            let hole = g.mul(out.i_pred, mask)?;
            let i_comp = g.add(hat_i, hole)?;

            let d_loss = self.discriminator_update(
                &mut state.discriminator,
                &mut state.adam_d,
                state.step,
                &batch.image,
                g.value(i_comp),
            )?;
            report.set("adv_d", d_loss);

            let truth = g.constant(batch.image.clone())?;
            let mut ds = ParamScope::frozen(&state.discriminator);
            let fake = discriminator_forward(&mut g, &mut ds, &cfg.discriminator, i_comp)?;
            let adv = generator_adv_loss(&mut g, fake, cfg.non_saturating)?;
            let rec = rec_loss(&mut g, out.i_pred, truth)?;
            let fp = self.fx.features(&mut g, out.i_pred)?;
            let ft = self.fx.features(&mut g, truth)?;
            let cache = CachedFeatures(vec![(out.i_pred, fp), (truth, ft)]);
            let perc = perceptual_loss(&mut g, &cache, out.i_pred, truth)?;
            let style = style_loss(&mut g, &cache, out.i_pred, truth)?;
            let structure = if out.c_pred.is_empty() {
                None
            } else {
                let mut gt = Vec::new();
                let mut ew = Vec::new();
                for s in &batch.pyramid {
                    gt.push(g.constant(s.grads.clone())?);
                    ew.push(g.constant(s.edge_weights.clone())?);
                }
                let terms = structure_loss(&mut g, &out.c_pred, &gt, &ew, cfg.weights.beta)?;
                for (i, (a, e)) in terms.l1.iter().zip(&terms.edge).enumerate() {
                    report.set(format!("structure_s{i}"), scalar(&g, *a));
                    report.set(format!("edge_s{i}"), scalar(&g, *e));
                }
                Some(terms.total)
            };
            report.set("rec", scalar(&g, rec));
            report.set("perc", scalar(&g, perc));
            report.set("style", scalar(&g, style));
            report.set("adv_g", scalar(&g, adv));
            let parts = LossParts { rec, perceptual: perc, style, adversarial: adv, structure };
            let total = total_loss(&mut g, &parts, &cfg.weights)?;
            report.set("total", scalar(&g, total));
            check_report(&report)?;
            g.backward(total)?;
            g.param_grads()
        };
        let lr = cfg.optimizer.lr;
        state.adam_g.step(&mut state.generator, &new_g, lr, &cfg.optimizer)?;
        if !state.generator.all_finite() || !state.discriminator.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", state.step)));
        }
        state.step += 1;
        Ok(report)
    }

    fn discriminator_update(
        &self,
        params: &mut ModelParams<f32>,
        adam: &mut AdamState<f32>,
        step: u64,
        real: &Tensor<f32>,
        fake: &Tensor<f32>,
    ) -> Result<f64> {
        let cfg = &self.cfg;
        let mut g = Graph::<f32>::new();
        let (loss, grads) = {
            let mut ds = ParamScope::trainable(params);
            let r = g.constant(real.clone())?;
            let f = g.constant(fake.clone())?;
            let rl = discriminator_forward(&mut g, &mut ds, &cfg.discriminator, r)?;
            let fl = discriminator_forward(&mut g, &mut ds, &cfg.discriminator, f)?;
            let loss = discriminator_loss(&mut g, rl, fl)?;
            let v = scalar(&g, loss);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term adv_d at step {step}")));
            }
            g.backward(loss)?;
            (v, g.param_grads())
        };
        let lr = cfg.optimizer.lr * cfg.optimizer.d_lr_ratio;
        adam.step(params, &grads, lr, &cfg.optimizer)?;
        Ok(loss)
    }

    pub fn batch(&self, state: &mut TrainState, data: &Dataset) -> Result<Batch<f32>> {
        make_batch(data, &self.cfg.mask, self.cfg.batch_size, &self.cfg.pyramid_factors(), &mut state.rng)
    }

    /// Runs until `state.step == cfg.steps`, checkpointing and logging into
    /// `out` when given. Returns the reports of every step taken.
    pub fn run(&self, state: &mut TrainState, data: &Dataset, out: Option<&Path>) -> Result<Vec<LossReport>> {
        let cfg = &self.cfg;
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join("config.json"), cfg)?;
                let path = dir.join("log.jsonl");
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, file))
            }
            None => None,
        };
        let mut reports = Vec::new();
        while state.step < cfg.steps {
            let batch = self.batch(state, data)?;
            let report = self.step(state, &batch)?;
            let logged = cfg.log_every > 0 && (report.step % cfg.log_every == 0 || state.step == cfg.steps);
            if let (true, Some((path, file))) = (logged, log.as_mut()) {
                writeln!(file, "{}", report.to_json_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if logged {
                log::info!("step {} total {:.5}", report.step, report.get("total").unwrap_or(f64::NAN));
            }
            reports.push(report);
            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
                    state.save(&checkpoint_dir(dir, state.step), cfg)?;
                }
            }
        }
        if let Some(dir) = out {
            state.save(&dir.join("final"), cfg)?;
        }
        Ok(reports)
    }
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

/// Loads the configured images and splits off the holdout set.
pub fn prepare_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let images = load_images(&cfg.data, cfg.seed ^ DATA_SALT, cfg.canny)?;
    let s = cfg.generator.image_size;
    if let Some(img) = images.iter().find(|i| i.height() != s || i.width() != s || i.channels() != 3) {
        return Err(Error::Config(format!("data image shape {:?} does not match image_size {s}", img.shape())));
    }
    let data = Dataset::new(images, cfg.canny)?;
    if cfg.holdout == 0 {
        let empty = Dataset { samples: Vec::new(), digest: data.digest.clone() };
        return Ok((data, empty));
    }
    data.split_tail(cfg.holdout)
}

/// Result of a complete training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<LossReport>,
    pub holdout: Dataset,
    pub data_digest: String,
}

/// Trains from scratch on the configured data.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg.clone())?;
    let (data, holdout) = prepare_data(cfg)?;
    let mut state = TrainState::new(cfg)?;
    let reports = trainer.run(&mut state, &data, out)?;
    Ok(TrainOutcome { state, reports, data_digest: data.digest.clone(), holdout })
}

/// Continues a run from a checkpoint directory up to `cfg.steps`.
pub fn resume(cfg: &TrainConfig, checkpoint: &Path, out: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg.clone())?;
    let (data, holdout) = prepare_data(cfg)?;
    let mut state = TrainState::load(checkpoint)?;
    if state.step > cfg.steps {
        return Err(Error::Config(format!("checkpoint step {} exceeds steps {}", state.step, cfg.steps)));
    }
    let reports = trainer.run(&mut state, &data, out)?;
    Ok(TrainOutcome { state, reports, data_digest: data.digest.clone(), holdout })
}
