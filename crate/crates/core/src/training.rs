//! Rate-distortion loss, progressive four-stage training and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contextual_codec::DistortionMetric;
use crate::entropy_model::{bits_of, laplace_likelihood, EntropyMode};
use crate::error::{Error, Result};
use crate::metrics::{ms_ssim_tensor, mse_tensor, tensor_scalar};
use crate::model::{CodecModel, ForwardPlan, ModelConfig, TrainOutputs};
use crate::nn::ParamStore;
use crate::quant::round_canonical;
use crate::video_io::{FrameSequence, FrameTensor};

pub const CHECKPOINT_FORMAT: &str = "ctxvc-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";
pub const MSE_LAMBDAS: [f64; 4] = [256.0, 512.0, 1024.0, 2048.0];
pub const MS_SSIM_LAMBDAS: [f64; 4] = [8.0, 16.0, 32.0, 64.0];

/// Parameter name prefixes of the MV generation part (flow, MV codec and its entropy model).
pub const MV_GROUP: [&str; 3] = ["flow.", "mv_codec.", "mv_entropy."];
pub const INTRA_GROUP: &str = "intra.";

/// Named parameter group of a model parameter.
pub fn param_group(name: &str) -> &'static str {
    if MV_GROUP.iter().any(|p| name.starts_with(p)) {
        "mv_generation"
    } else if name.starts_with(INTRA_GROUP) {
        "intra"
    } else if name.starts_with("feature_extraction.") || name.starts_with("context_refine.") {
        "context"
    } else if name.starts_with("contextual_encoder.") || name.starts_with("contextual_decoder.") {
        "contextual_codec"
    } else {
        "entropy"
    }
}

/// Groups frozen at `stage`.
pub fn frozen_groups(stage: u8) -> &'static [&'static str] {
    match stage {
        2 | 3 => &["mv_generation", "intra"],
        _ => &["intra"],
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage: u8,
    /// MSE or `1 - MS-SSIM`.
    pub distortion: f64,
    /// Rates in bits per pixel; zero when not part of the stage loss.
    pub r_y: f64,
    pub r_z: f64,
    pub r_g: f64,
    pub r_s: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn rate(&self) -> f64 {
        self.r_y + self.r_z + self.r_g + self.r_s
    }

    pub fn recomputed_total(&self) -> f64 {
        self.lambda * self.distortion + self.rate()
    }
}

fn need<'a>(t: &'a Option<Tensor>, what: &str, stage: u8) -> Result<&'a Tensor> {
    t.as_ref().ok_or_else(|| Error::Contract(format!("stage {stage} loss needs {what}")))
}

pub fn distortion(x: &Tensor, x_rec: &Tensor, metric: DistortionMetric) -> Result<Tensor> {
    match metric {
        DistortionMetric::Mse => mse_tensor(x, x_rec),
        DistortionMetric::MsSsim => Ok((ms_ssim_tensor(x, x_rec)?.neg()? + 1.0)?),
    }
}

/// Stage loss and its components. Rates are bits over `N * H * W` of `x`.
pub fn compute_loss(
    stage: u8,
    x: &Tensor,
    out: &TrainOutputs,
    lambda: f64,
    metric: DistortionMetric,
) -> Result<(Tensor, LossBreakdown)> {
    if !(1..=4).contains(&stage) {
        return Err(Error::Argument(format!("stage must be 1 to 4, got {stage}")));
    }
    let (n, _, h, w) = x.dims4()?;
    let pixels = (n * h * w) as f64;
    let recon = if stage == 1 { need(&out.x_tilde, "the warped frame", stage)? } else { need(&out.x_hat, "the reconstruction", stage)? };
    let d = distortion(x, recon, metric)?;
    let mut total = (&d * lambda)?;
    let mut b = LossBreakdown { stage, distortion: tensor_scalar(&d)?, lambda, ..Default::default() };
    let mut add = |t: &Option<Tensor>, what: &str, slot: &mut f64| -> Result<()> {
        let r = (need(t, what, stage)? / pixels)?;
        *slot = tensor_scalar(&r)?;
        total = (&total + r)?;
        Ok(())
    };
    if stage >= 3 {
        add(&out.bits_y, "the latent rate", &mut b.r_y)?;
        add(&out.bits_z, "the hyper-latent rate", &mut b.r_z)?;
    }
    if stage == 1 || stage == 4 {
        add(&out.bits_g, "the motion latent rate", &mut b.r_g)?;
        add(&out.bits_s, "the motion hyper-latent rate", &mut b.r_s)?;
    }
    b.total = tensor_scalar(&total)?;
    Ok((total, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Steps of stages 1 to 4.
    pub steps: [usize; 4],
    pub learning_rate: f64,
    pub fine_tune_lr: f64,
    /// Global step at which the learning rate drops to `fine_tune_lr`.
    pub lr_drop_step: Option<usize>,
    pub batch_size: usize,
    /// Side of the square training crop (multiple of 64).
    pub crop: usize,
    pub lambda: f64,
    pub distortion: DistortionMetric,
    pub entropy_mode: EntropyMode,
    pub seed: u64,
    /// Evaluate the fixed-seed loss every this many steps (0 disables).
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        let steps = [20_000, 20_000, 40_000, 120_000];
        Self {
            steps,
            learning_rate: 1e-4,
            fine_tune_lr: 1e-5,
            lr_drop_step: Some(steps[..3].iter().sum::<usize>() + steps[3] / 2),
            batch_size: 4,
            crop: 256,
            lambda: 1024.0,
            distortion: DistortionMetric::Mse,
            entropy_mode: EntropyMode::HyperSpatialTemporal,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainSchedule {
    /// Step counts scaled down 100x.
    pub fn desk() -> Self {
        let steps = [200, 200, 400, 1200];
        Self { steps, lr_drop_step: Some(steps[..3].iter().sum::<usize>() + steps[3] / 2), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = match self.distortion {
            DistortionMetric::Mse => MSE_LAMBDAS,
            DistortionMetric::MsSsim => MS_SSIM_LAMBDAS,
        };
        if !allowed.contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} is not one of {allowed:?} for {}", self.lambda, self.distortion)));
        }
        if self.crop == 0 || self.crop % 64 != 0 || self.batch_size == 0 {
            return Err(Error::Config("crop must be a positive multiple of 64 and batch size positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.fine_tune_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_start(&self, stage: u8) -> usize {
        self.steps[..(stage - 1) as usize].iter().sum()
    }

    pub fn lr_at(&self, global_step: usize) -> f64 {
        match self.lr_drop_step {
            Some(s) if global_step >= s => self.fine_tune_lr,
            _ => self.learning_rate,
        }
    }
}

/// Where training stands; stored in checkpoints for resuming.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: u8,
    /// Steps already done within `stage`.
    pub step_in_stage: usize,
}

/// Clips of at least two frames. Batches pair a frame with its previous
/// original frame as the reference.
pub struct TrainingData {
    clips: Vec<FrameSequence>,
}

impl TrainingData {
    pub fn new(clips: Vec<FrameSequence>) -> Result<Self> {
        if clips.is_empty() || clips.iter().any(|c| c.len() < 2) {
            return Err(Error::EmptyInput("training needs clips of at least two frames".into()));
        }
        Ok(Self { clips })
    }

    fn pair(&self, clip: usize, t: usize, x0: usize, y0: usize, crop: usize) -> Result<(FrameTensor, FrameTensor)> {
        let c = &self.clips[clip];
        let prep = |f: &FrameTensor| -> Result<FrameTensor> {
            let f = if f.width() < crop || f.height() < crop { f.pad_to_multiple(crop) } else { f.clone() };
            f.crop_at(x0.min(f.width() - crop), y0.min(f.height() - crop), crop, crop)
        };
        Ok((prep(&c.frames()[t])?, prep(&c.frames()[t - 1])?))
    }

    fn stack(pairs: &[(FrameTensor, FrameTensor)], dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
        let xs = pairs.iter().map(|p| p.0.to_tensor(dtype, dev)).collect::<Result<Vec<_>>>()?;
        let rs = pairs.iter().map(|p| p.1.to_tensor(dtype, dev)).collect::<Result<Vec<_>>>()?;
        Ok((Tensor::cat(&xs, 0)?, Tensor::cat(&rs, 0)?))
    }

    /// Random crops of random consecutive pairs.
    pub fn sample(&self, batch: usize, crop: usize, dtype: DType, dev: &Device, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
        let pairs = (0..batch)
            .map(|_| {
                let ci = rng.random_range(0..self.clips.len());
                let c = &self.clips[ci];
                let t = rng.random_range(1..c.len());
                let x0 = rng.random_range(0..=c.width().saturating_sub(crop));
                let y0 = rng.random_range(0..=c.height().saturating_sub(crop));
                self.pair(ci, t, x0, y0, crop)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::stack(&pairs, dtype, dev)
    }

    /// Every consecutive pair of the first clip, cropped at the origin.
    pub fn eval_batch(&self, crop: usize, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
        let pairs = (1..self.clips[0].len()).map(|t| self.pair(0, t, 0, 0, crop)).collect::<Result<Vec<_>>>()?;
        Self::stack(&pairs, dtype, dev)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub losses: Vec<f64>,
    /// `(step within stage, fixed-seed eval loss)`.
    pub evals: Vec<(usize, LossBreakdown)>,
    /// Frozen parameters compared equal before and after the stage.
    pub frozen_checked: usize,
}

/// Loss on fixed inputs with fixed noise.
pub fn eval_loss(model: &CodecModel, x: &Tensor, reference: &Tensor, stage: u8, schedule: &TrainSchedule) -> Result<LossBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5eed);
    let out = model.forward_train(x, reference, ForwardPlan::for_stage(stage), schedule.entropy_mode, &mut rng)?;
    Ok(compute_loss(stage, x, &out, schedule.lambda, schedule.distortion)?.1)
}

fn trainable(store: &ParamStore, stage: u8) -> Vec<(String, Var)> {
    let frozen = frozen_groups(stage);
    store.all_vars().into_iter().filter(|(n, _)| !frozen.contains(&param_group(n))).collect()
}

fn frozen_snapshot(store: &ParamStore, stage: u8) -> Result<Vec<(String, Vec<u8>)>> {
    let frozen = frozen_groups(stage);
    store
        .all_vars()
        .into_iter()
        .filter(|(n, _)| frozen.contains(&param_group(n)))
        .map(|(n, v)| Ok((n, tensor_bytes(v.as_tensor())?)))
        .collect()
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect())
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?)
}

/// Runs the stages from `resume` (or stage 1) to 4, writing one JSON line
/// per step to `log` and a checkpoint after each stage if configured.
pub fn train_progressive(
    model: &mut CodecModel,
    data: &TrainingData,
    schedule: &TrainSchedule,
    resume: Option<TrainState>,
    only_stage: Option<u8>,
    log: &mut dyn Write,
) -> Result<Vec<StageReport>> {
    schedule.validate()?;
    let start = resume.unwrap_or(TrainState { stage: 1, step_in_stage: 0 });
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let (dtype, dev) = (model.dtype(), model.device().clone());
    let (ex, er) = data.eval_batch(schedule.crop, dtype, &dev)?;
    let mut reports = Vec::new();
    for stage in start.stage..=4 {
        if only_stage.is_some_and(|s| s != stage) {
            continue;
        }
        let skip = if stage == start.stage { start.step_in_stage } else { 0 };
        let before = frozen_snapshot(&model.store, stage)?;
        let vars: Vec<Var> = trainable(&model.store, stage).into_iter().map(|(_, v)| v).collect();
        let mut opt = adam(vars, schedule.lr_at(schedule.stage_start(stage) + skip))?;
        let mut report = StageReport { stage, steps: schedule.steps[stage as usize - 1], ..Default::default() };
        let plan = ForwardPlan::for_stage(stage);
        for step in skip..report.steps {
            let global = schedule.stage_start(stage) + step;
            opt.set_learning_rate(schedule.lr_at(global));
            let (x, r) = data.sample(schedule.batch_size, schedule.crop, dtype, &dev, &mut rng)?;
            let out = model.forward_train(&x, &r, plan, schedule.entropy_mode, &mut rng)?;
            let (loss, parts) = compute_loss(stage, &x, &out, schedule.lambda, schedule.distortion)?;
            if !parts.total.is_finite() {
                let snapshot = nan_snapshot(model, schedule, TrainState { stage, step_in_stage: step })?;
                return Err(Error::NanLoss { step: global, stage, snapshot });
            }
            opt.backward_step(&loss)?;
            let line = StepLog { step: global, stage, lr: opt.learning_rate(), loss: parts };
            serde_json::to_writer(&mut *log, &line)?;
            writeln!(log).map_err(|e| Error::io("<training log>", e))?;
            report.losses.push(parts.total);
            let done = step + 1;
            if schedule.eval_every > 0 && (done % schedule.eval_every == 0 || done == report.steps) {
                report.evals.push((done, eval_loss(model, &ex, &er, stage, schedule)?));
            }
        }
        let after = frozen_snapshot(&model.store, stage)?;
        if before != after {
            return Err(Error::Contract(format!("frozen parameters changed during stage {stage}")));
        }
        report.frozen_checked = before.len();
        if let Some(dir) = &schedule.checkpoint_dir {
            let next = TrainState { stage: stage + 1, step_in_stage: 0 };
            save_checkpoint(&dir.join(format!("stage{stage}.safetensors")), model, Some((schedule, next)))?;
        }
        reports.push(report);
    }
    Ok(reports)
}

fn nan_snapshot(model: &CodecModel, schedule: &TrainSchedule, state: TrainState) -> Result<String> {
    match &schedule.checkpoint_dir {
        Some(dir) => {
            let p = dir.join("nan_snapshot.safetensors");
            save_checkpoint(&p, model, Some((schedule, state)))?;
            Ok(p.display().to_string())
        }
        None => Ok(format!("{} parameters, no checkpoint directory configured", model.store.len())),
    }
}

/// Fits the fusion head of each of `modes` on a frozen backbone by the
/// discrete likelihood of rounded latents. Returns the final bits per
/// pixel of each head on the fitted batch.
pub fn fit_entropy_heads(
    model: &CodecModel,
    data: &TrainingData,
    modes: &[EntropyMode],
    steps: usize,
    lr: f64,
    crop: usize,
) -> Result<Vec<(EntropyMode, f64)>> {
    let (dtype, dev) = (model.dtype(), model.device().clone());
    let (x, r) = data.eval_batch(crop, dtype, &dev)?;
    let (n, _, h, w) = x.dims4()?;
    let pixels = (n * h * w) as f64;
    // Frozen features: everything upstream of the heads.
    let flow = model.flow.estimate(&r, &x)?;
    let mv_hat = model.mv.synthesis(&round_canonical(&model.mv.analysis(&flow)?)?)?;
    let cond = model.condition(&r, &mv_hat)?;
    let y = model.encoder.forward(&crate::contextual_codec::encoder_input(&x, &cond, model.codec().condition_mode)?)?;
    let y_hat = round_canonical(&y)?.detach();
    let hyper = model.entropy.hyper_decode(&round_canonical(&model.entropy.hyper_encode(&y)?)?)?.detach();
    let temporal = model.entropy.temporal_prior(&cond)?.detach();
    let spatial = model.entropy.spatial_prior(&y_hat)?.detach();
    let mut out = Vec::new();
    for &mode in modes {
        let prefix = format!("prior_fusion.{}.", mode.as_str());
        let vars: Vec<Var> = model.store.vars_with_prefix(&[&prefix]).into_iter().map(|(_, v)| v).collect();
        if vars.is_empty() {
            return Err(Error::Config(format!("model has no fusion head for {mode}")));
        }
        let mut opt = adam(vars, lr)?;
        let rate = || -> Result<Tensor> {
            let (mu, sigma) = model.entropy.fuse_priors(&hyper, Some(&spatial), Some(&temporal), mode)?;
            Ok((bits_of(&laplace_likelihood(&y_hat, &mu, &sigma)?)? / pixels)?)
        };
        for _ in 0..steps {
            opt.backward_step(&rate()?)?;
        }
        out.push((mode, tensor_scalar(&rate()?)?));
    }
    Ok(out)
}

/// Trains the learned intra codec alone on single frames.
pub fn train_intra(model: &CodecModel, data: &TrainingData, steps: usize, lr: f64, lambda: f64, crop: usize, seed: u64) -> Result<f64> {
    let intra = model.intra.as_ref().ok_or_else(|| Error::Config("model has no learned intra codec".into()))?;
    let vars: Vec<Var> = model.store.vars_with_prefix(&[INTRA_GROUP]).into_iter().map(|(_, v)| v).collect();
    let mut opt = adam(vars, lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = f64::NAN;
    for _ in 0..steps {
        let (x, _) = data.sample(1, crop, model.dtype(), model.device(), &mut rng)?;
        let (x_hat, by, bz) = intra.forward_train(&x, &mut rng)?;
        let (n, _, h, w) = x.dims4()?;
        let loss = ((mse_tensor(&x, &x_hat)? * lambda)? + ((by + bz)? / (n * h * w) as f64)?)?;
        last = tensor_scalar(&loss)?;
        if !last.is_finite() {
            return Err(Error::NanLoss { step: 0, stage: 0, snapshot: "intra training".into() });
        }
        opt.backward_step(&loss)?;
    }
    Ok(last)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    schedule: Option<TrainSchedule>,
    state: Option<TrainState>,
}

/// Single-file checkpoint: all parameters plus config and schedule state.
pub fn save_checkpoint(path: &Path, model: &CodecModel, training: Option<(&TrainSchedule, TrainState)>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        schedule: training.map(|t| t.0.clone()),
        state: training.map(|t| t.1),
    };
    let mut md = HashMap::new();
    md.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    md.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    md.insert("meta".to_string(), serde_json::to_string(&meta)?);
    let tensors = model.store.snapshot()?;
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.clone(), v)), Some(md), path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub struct LoadedCheckpoint {
    pub model: CodecModel,
    pub schedule: Option<TrainSchedule>,
    pub state: Option<TrainState>,
}

pub fn load_checkpoint(path: &Path, dtype: DType, device: &Device) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::MalformedInput(format!("{}: {e}", path.display())))?;
    let md = header.metadata().clone().unwrap_or_default();
    if md.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Config(format!("{} is not a model checkpoint", path.display())));
    }
    if md.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION) {
        return Err(Error::Config(format!("{}: unsupported checkpoint version", path.display())));
    }
    let meta: CheckpointMeta =
        serde_json::from_str(md.get("meta").ok_or_else(|| Error::Config("checkpoint has no config".into()))?)?;
    let model = CodecModel::new(meta.config, dtype, device)?;
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, device)?.into_iter().collect();
    model.store.load_from(&tensors)?;
    Ok(LoadedCheckpoint { model, schedule: meta.schedule, state: meta.state })
}

/// Copies external flow weights into the flow network. `manifest` maps
/// external tensor names to internal ones (`flow.levelN.convK.weight`/`.bias`).
pub fn import_flow_weights(model: &CodecModel, weights: &Path, manifest: &BTreeMap<String, String>) -> Result<usize> {
    let ext = candle_core::safetensors::load(weights, model.device())?;
    let mut mapped = BTreeMap::new();
    for (src, dst) in manifest {
        if !dst.starts_with(MV_GROUP[0]) {
            return Err(Error::Config(format!("{dst} is not a flow parameter")));
        }
        let t = ext.get(src).ok_or_else(|| Error::Config(format!("{} lacks tensor {src}", weights.display())))?;
        let var = model.store.get(dst).ok_or_else(|| Error::Config(format!("unknown flow parameter {dst}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Config(format!("{src} has shape {:?}, {dst} expects {:?}", t.dims(), var.dims())));
        }
        mapped.insert(dst.clone(), (var.clone(), t.to_dtype(model.dtype())?));
    }
    for (var, t) in mapped.values() {
        var.set(t)?;
    }
    Ok(mapped.len())
}
