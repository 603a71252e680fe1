//! Adam, the staged training schedule and best-model selection.
//!
//! The schedule runs three stages back to back: the global branch alone,
//! the fusion network alone (global branch frozen), then everything jointly.
//! Epochs are numbered across the whole schedule, and every epoch draws from
//! its own random stream, so a resumed run replays exactly what an
//! uninterrupted one would have done.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentParams};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::infer::{dsc, global_input, segment_volume_view, threshold_mask};
use crate::model::{
    forward_patch, global_forward, global_heads, global_loss, patch_loss, total_loss, Checkpoint, GgpfnConfig,
    GlobalTargets, Param, ParamGroup, ParamStore, PatchTargets,
};
use crate::patch::{sample_training_patches, slab_tensor, TrainingPatch, ViewData};
use crate::tensor::{Scalar, Tensor};
use crate::volume::VolumeGrid;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `param` with gradient `grad`.
pub fn adam_step<T: Scalar>(param: &mut Param<T>, grad: &Tensor<T>, adam: &AdamParams) -> Result<()> {
    if grad.shape() != param.value.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match parameter {:?}",
            grad.shape(),
            param.value.shape()
        )));
    }
    param.step += 1;
    let t = param.step as i32;
    let (b1, b2) = (T::of(adam.beta1), T::of(adam.beta2));
    let c1 = T::one() - T::of(adam.beta1.powi(t));
    let c2 = T::one() - T::of(adam.beta2.powi(t));
    let (lr, eps) = (T::of(adam.lr), T::of(adam.eps));
    let (value, m, v) = (param.value.data_mut(), param.m.data_mut(), param.v.data_mut());
    // Moments and values live in separate tensors; walk them in lockstep.
    for (i, &g) in grad.data().iter().enumerate() {
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Which parameters a stage updates and which loss terms it uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Global branch only, global loss terms only.
    Global,
    /// Fusion network only, patch loss terms only.
    Pfn,
    /// All parameters, full loss.
    Joint,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [StageKind::Global, StageKind::Pfn, StageKind::Joint];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Global => "global",
            StageKind::Pfn => "pfn",
            StageKind::Joint => "joint",
        }
    }

    pub fn trains(self, param_name: &str) -> bool {
        match self {
            StageKind::Global => ParamGroup::of(param_name) == ParamGroup::Global,
            StageKind::Pfn => ParamGroup::of(param_name) == ParamGroup::Pfn,
            StageKind::Joint => true,
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown stage '{s}' (expected global, pfn or joint)")))
    }
}

/// Per-stage settings as written in a configuration file. Unset loss
/// weights fall back to the model's `alpha`/`beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

/// A stage with resolved loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStage {
    pub kind: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// Optimization and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub global: StageSpec,
    pub pfn: StageSpec,
    pub joint: StageSpec,
    /// Validate every this many epochs (and after the last one).
    pub val_interval: usize,
    pub augment: bool,
    pub augmentation: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            global: StageSpec { epochs: 200, batch_size: 32, alpha: Some(0.5), beta: Some(0.5) },
            pfn: StageSpec { epochs: 200, batch_size: 4, alpha: Some(0.0), beta: Some(0.0) },
            joint: StageSpec { epochs: 100, batch_size: 4, alpha: None, beta: None },
            val_interval: 10,
            augment: true,
            augmentation: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamParams {
        AdamParams { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn spec(&self, kind: StageKind) -> &StageSpec {
        match kind {
            StageKind::Global => &self.global,
            StageKind::Pfn => &self.pfn,
            StageKind::Joint => &self.joint,
        }
    }

    pub fn stage(&self, kind: StageKind, model: &GgpfnConfig) -> TrainStage {
        let s = self.spec(kind);
        TrainStage {
            kind,
            epochs: s.epochs,
            batch_size: s.batch_size,
            alpha: s.alpha.unwrap_or(model.alpha),
            beta: s.beta.unwrap_or(model.beta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        for kind in StageKind::ALL {
            let s = self.spec(kind);
            if s.batch_size == 0 {
                return Err(Error::Config(format!("{kind}.batch_size must be positive")));
            }
            for w in [s.alpha, s.beta].into_iter().flatten() {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::Config(format!("{kind} loss weights must be non-negative")));
                }
            }
        }
        if self.val_interval == 0 {
            return Err(Error::Config("val_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Training volumes seen through the model's view.
pub struct TrainData {
    pub views: Vec<ViewData>,
}

impl TrainData {
    pub fn new(volumes: &[VolumeGrid], cfg: &GgpfnConfig) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::EmptyData("no training volumes".into()));
        }
        let views =
            volumes.iter().map(|v| ViewData::new(v, cfg.view, (cfg.patch_h, cfg.patch_w))).collect::<Result<_>>()?;
        Ok(Self { views })
    }
}

/// Random stream of one absolute epoch.
fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// The samples of one epoch: two patches per volume, shuffled and
/// optionally augmented. Returns `(volume index, patch)` pairs.
pub fn epoch_samples(data: &TrainData, cfg: &GgpfnConfig, tc: &TrainConfig, epoch: u64) -> Vec<(usize, TrainingPatch)> {
    let mut rng = epoch_rng(tc.seed, epoch);
    let mut samples: Vec<(usize, TrainingPatch)> = data
        .views
        .iter()
        .enumerate()
        .flat_map(|(i, view)| {
            sample_training_patches(view, cfg.slice_halfwidth, (cfg.patch_h, cfg.patch_w), &mut rng).map(|p| (i, p))
        })
        .collect();
    samples.shuffle(&mut rng);
    if tc.augment {
        for (_, p) in &mut samples {
            let (slab, target) = augment(&p.slab, &p.target, &mut rng, &tc.augmentation);
            p.slab = slab;
            p.target = target;
        }
    }
    samples
}

/// Loss terms of one sample, split so callers can report either.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLoss {
    /// The stage objective that was differentiated.
    pub total: f64,
    /// `C(P_k, G_k) + ¼ Σ_j C(P^(j), G^(j))`, when the stage computes it.
    pub patch: Option<f64>,
}

/// Loss and gradients (for the stage's trainable parameters, in store
/// order) of one sample.
pub fn sample_gradients<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &GgpfnConfig,
    stage: &TrainStage,
    view: &ViewData,
    patch: &TrainingPatch,
) -> Result<(SampleLoss, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let p = params.bind(&tape, |n| stage.kind.trains(n));
    let wants_patch = stage.kind != StageKind::Global;
    let wants_global = stage.alpha != 0.0 || stage.beta != 0.0;

    let gf = if cfg.global_enabled {
        let g = global_input(&view.slices[patch.slice], cfg.hg, cfg.wg)?;
        Some(global_forward(tape.constant(g.to_tensor()), &p, cfg)?)
    } else {
        None
    };
    let global_term = match &gf {
        Some(gf) if wants_global => {
            let (pf, pfp) = global_heads(gf, &p)?;
            let targets = GlobalTargets::from_mask(&view.masks[patch.slice], cfg.hg, cfg.wg)?;
            global_loss(pf, pfp, &targets, stage.alpha, stage.beta)?
        }
        _ => None,
    };
    let mut patch_terms = Vec::new();
    if wants_patch {
        let slab = tape.constant(slab_tensor(&patch.slab)?);
        let out = forward_patch(slab, patch.window, view.slice_hw(), gf.as_ref(), &p, cfg, true)?;
        let heads = out.heads.expect("heads requested");
        patch_terms.push(patch_loss(out.prob, &heads, &PatchTargets::from_mask(&patch.target))?);
    }
    let patch_value = patch_terms.first().map(|v| v.item().as_f64());
    let loss = total_loss(&patch_terms, global_term)?;
    let value = loss.item().as_f64();
    if !loss.tracked() {
        return Err(Error::Usage(format!("stage {} has nothing to train", stage.kind)));
    }
    let grads = loss.backward()?;
    let out = p.tracked().map(|(_, var)| grads.get_or_zeros(&var)).collect();
    Ok((SampleLoss { total: value, patch: patch_value }, out))
}

/// Runs one epoch of `stage`; returns the mean per-sample loss.
pub fn train_epoch(
    params: &mut ParamStore<f32>,
    cfg: &GgpfnConfig,
    tc: &TrainConfig,
    stage: &TrainStage,
    data: &TrainData,
    epoch: u64,
) -> Result<f64> {
    let samples = epoch_samples(data, cfg, tc, epoch);
    let adam = tc.adam();
    let names: Vec<String> = params.names().filter(|n| stage.kind.trains(n)).map(str::to_string).collect();
    let mut total = 0.0;
    for batch in samples.chunks(stage.batch_size) {
        let store = &*params;
        let results = batch
            .par_iter()
            .map(|(i, p)| sample_gradients(store, cfg, stage, &data.views[*i], p))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f32;
        let mut sum: Vec<Tensor<f32>> = Vec::new();
        for (loss, grads) in results {
            total += loss.total;
            if sum.is_empty() {
                sum = grads;
            } else {
                for (acc, g) in sum.iter_mut().zip(&grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
        }
        for (name, g) in names.iter().zip(&sum) {
            let g = g.map(|v| v * scale);
            adam_step(params.get_mut(name).expect("trainable name from store"), &g, &adam)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Runs `stage.epochs` epochs numbered from `first_epoch`; returns each
/// epoch's mean loss.
pub fn run_stage(
    params: &mut ParamStore<f32>,
    cfg: &GgpfnConfig,
    tc: &TrainConfig,
    stage: &TrainStage,
    data: &TrainData,
    first_epoch: u64,
) -> Result<Vec<f64>> {
    if data.views.is_empty() {
        return Err(Error::EmptyData("no training volumes".into()));
    }
    (0..stage.epochs as u64).map(|e| train_epoch(params, cfg, tc, stage, data, first_epoch + e)).collect()
}

/// Mean patch loss over a fixed, unaugmented set of samples drawn from
/// stream `u64::MAX` of `seed`.
pub fn evaluation_loss(
    params: &ParamStore<f32>,
    cfg: &GgpfnConfig,
    data: &TrainData,
    seed: u64,
    rounds: usize,
) -> Result<f64> {
    let tc = TrainConfig { seed, augment: false, ..TrainConfig::default() };
    let mut total = 0.0;
    let mut n = 0;
    for r in 0..rounds as u64 {
        for (i, p) in epoch_samples(data, cfg, &tc, u64::MAX - r) {
            let tape = Tape::new();
            let bp = params.bind(&tape, |_| false);
            let gf = if cfg.global_enabled {
                let g = global_input(&data.views[i].slices[p.slice], cfg.hg, cfg.wg)?;
                Some(global_forward(tape.constant(g.to_tensor()), &bp, cfg)?)
            } else {
                None
            };
            let slab = tape.constant(slab_tensor(&p.slab)?);
            let out = forward_patch(slab, p.window, data.views[i].slice_hw(), gf.as_ref(), &bp, cfg, true)?;
            let heads = out.heads.expect("heads requested");
            total += patch_loss(out.prob, &heads, &PatchTargets::from_mask(&p.target))?.item() as f64;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Mean DSC at threshold 0.5 over labelled volumes, segmented in the
/// model's view.
pub fn mean_dsc(params: &ParamStore<f32>, cfg: &GgpfnConfig, volumes: &[VolumeGrid]) -> Result<f64> {
    if volumes.is_empty() {
        return Err(Error::EmptyData("no validation volumes".into()));
    }
    let mut total = 0.0;
    for v in volumes {
        let labels = v.labels.as_ref().ok_or_else(|| Error::EmptyData("validation volume has no labels".into()))?;
        let probs = segment_volume_view(v, cfg.view, params, cfg)?;
        total += dsc(&threshold_mask(&probs, 0.5), labels)?;
    }
    Ok(total / volumes.len() as f64)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    /// `None` for the validation taken before the first epoch of a run.
    pub stage: Option<StageKind>,
    pub epoch: u64,
    pub loss: Option<f64>,
    pub val_dsc: Option<f64>,
}

impl fmt::Display for TrainRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={} epoch={}", self.stage.map_or("init", StageKind::name), self.epoch)?;
        if let Some(l) = self.loss {
            write!(f, " loss={l:.6}")?;
        }
        if let Some(d) = self.val_dsc {
            write!(f, " val_dsc={d:.6}")?;
        }
        Ok(())
    }
}

impl FromStr for TrainRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut rec = TrainRecord { stage: None, epoch: 0, loss: None, val_dsc: None };
        let bad = || Error::Parse(format!("malformed training log line '{line}'"));
        for field in line.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(bad)?;
            match key {
                "stage" => rec.stage = if value == "init" { None } else { Some(value.parse()?) },
                "epoch" => rec.epoch = value.parse().map_err(|_| bad())?,
                "loss" => rec.loss = Some(value.parse().map_err(|_| bad())?),
                "val_dsc" => rec.val_dsc = Some(value.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        Ok(rec)
    }
}

/// Result of a scheduled run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the highest validation DSC (earliest on ties).
    pub best: Checkpoint,
    pub best_dsc: f64,
    pub best_epoch: u64,
    /// Parameters after the last epoch.
    pub last: Checkpoint,
    pub records: Vec<TrainRecord>,
}

/// Absolute epoch range `(first, last]` of each stage.
pub fn stage_ranges(tc: &TrainConfig) -> [(StageKind, u64, u64); 3] {
    let mut start = 0;
    StageKind::ALL.map(|k| {
        let end = start + tc.spec(k).epochs as u64;
        let r = (k, start, end);
        start = end;
        r
    })
}

/// Runs the selected stages of the schedule, validating before the first
/// epoch, every `val_interval` epochs and after the last epoch.
///
/// A fresh run initializes from `tc.seed`. With `resume`, training continues after the checkpoint's epoch with its
/// parameters and optimizer state. `on_record` sees every log line as it is
/// produced. The global stage is skipped when global guidance is disabled.
pub fn train_full_schedule(
    cfg: &GgpfnConfig,
    tc: &TrainConfig,
    train: &[VolumeGrid],
    val: &[VolumeGrid],
    stages: &[StageKind],
    resume: Option<Checkpoint>,
    on_record: &mut dyn FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyData("training and validation sets must be non-empty".into()));
    }
    if val.iter().any(|v| train.contains(v)) {
        return Err(Error::Usage("training and validation volumes overlap".into()));
    }
    let data = TrainData::new(train, cfg)?;
    let (mut params, mut done) = match resume {
        Some(ck) => {
            if ck.config != *cfg {
                return Err(Error::Config("checkpoint configuration differs from the requested model".into()));
            }
            (ck.params, ck.epoch)
        }
        None => (crate::model::build_model::<f32>(cfg, tc.seed)?, 0),
    };

    let mut records = Vec::new();
    let mut emit = |r: TrainRecord, records: &mut Vec<TrainRecord>| {
        on_record(&r);
        records.push(r);
    };
    let dsc0 = mean_dsc(&params, cfg, val)?;
    emit(TrainRecord { stage: None, epoch: done, loss: None, val_dsc: Some(dsc0) }, &mut records);
    let mut best = (dsc0, done, params.clone());

    let ranges = stage_ranges(tc);
    let last_epoch = ranges
        .iter()
        .filter(|(k, s, e)| stages.contains(k) && e > s && !(*k == StageKind::Global && !cfg.global_enabled))
        .map(|r| r.2)
        .max()
        .unwrap_or(0);
    for (kind, start, end) in ranges {
        if !stages.contains(&kind) || (kind == StageKind::Global && !cfg.global_enabled) {
            continue;
        }
        let stage = tc.stage(kind, cfg);
        for epoch in (start + 1).max(done + 1)..=end {
            let loss = train_epoch(&mut params, cfg, tc, &stage, &data, epoch)?;
            done = epoch;
            let validate = epoch % tc.val_interval as u64 == 0 || epoch == last_epoch;
            let val_dsc = if validate { Some(mean_dsc(&params, cfg, val)?) } else { None };
            emit(TrainRecord { stage: Some(kind), epoch, loss: Some(loss), val_dsc }, &mut records);
            if let Some(d) = val_dsc {
                if d > best.0 {
                    best = (d, epoch, params.clone());
                }
            }
        }
    }
    Ok(TrainOutcome {
        best: Checkpoint { config: cfg.clone(), epoch: best.1, params: best.2 },
        best_dsc: best.0,
        best_epoch: best.1,
        last: Checkpoint { config: cfg.clone(), epoch: done, params },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::volume::make_phantom;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Param::new(Tensor::<f64>::zeros(vec![3]));
        adam_step(&mut p, &Tensor::full(vec![3], 1.0), &AdamParams::default()).unwrap();
        for &v in p.value.data() {
            assert!((v + 1e-4).abs() < 1e-12);
        }
        assert_eq!(p.step, 1);
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let mut p = Param::new(Tensor::<f64>::full(vec![2], 0.5));
        p.m = Tensor::full(vec![2], 0.2);
        p.v = Tensor::full(vec![2], 0.04);
        p.step = 3;
        let before = p.value.clone();
        adam_step(&mut p, &Tensor::zeros(vec![2]), &AdamParams { lr: 0.0, ..AdamParams::default() }).unwrap();
        assert_eq!(p.value, before);
        assert!((p.m.data()[0] - 0.18).abs() < 1e-15);
        assert!((p.v.data()[0] - 0.04 * 0.999).abs() < 1e-15);
    }

    /// Reference recurrence written out longhand.
    #[test]
    fn adam_matches_reference_over_many_steps() {
        let adam = AdamParams { lr: 1e-2, ..AdamParams::default() };
        let mut p = Param::new(Tensor::<f64>::full(vec![1], 0.3));
        let (mut theta, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = (t as f64 * 0.7).sin() + theta;
            adam_step(&mut p, &Tensor::full(vec![1], g), &adam).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            let got = p.value.data()[0];
            assert!((got - theta).abs() <= 1e-7 * theta.abs().max(1e-12), "step {t}: {got} vs {theta}");
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Param::new(Tensor::<f32>::zeros(vec![2]));
        assert!(adam_step(&mut p, &Tensor::zeros(vec![3]), &AdamParams::default()).is_err());
    }

    #[test]
    fn stage_parsing_and_filters() {
        assert_eq!("pfn".parse::<StageKind>().unwrap(), StageKind::Pfn);
        assert!("both".parse::<StageKind>().is_err());
        assert!(StageKind::Global.trains("glob.s0.conv0.w"));
        assert!(!StageKind::Global.trains("dec.out.w"));
        assert!(StageKind::Pfn.trains("enc.g0.conv0.w"));
        assert!(StageKind::Joint.trains("glob.down.b"));
    }

    #[test]
    fn log_lines_round_trip() {
        for rec in [
            TrainRecord { stage: None, epoch: 0, loss: None, val_dsc: Some(0.25) },
            TrainRecord { stage: Some(StageKind::Joint), epoch: 41, loss: Some(0.125), val_dsc: None },
        ] {
            let line = rec.to_string();
            assert_eq!(line.parse::<TrainRecord>().unwrap(), rec);
        }
        assert_eq!(
            TrainRecord { stage: Some(StageKind::Pfn), epoch: 3, loss: Some(0.5), val_dsc: Some(1.0) }.to_string(),
            "stage=pfn epoch=3 loss=0.500000 val_dsc=1.000000"
        );
        assert!("stage=pfn epoch=x".parse::<TrainRecord>().is_err());
    }

    fn tiny_setup() -> (GgpfnConfig, TrainConfig, Vec<VolumeGrid>) {
        let cfg = GgpfnConfig { patch_h: 16, patch_w: 16, ..GgpfnConfig::tiny() };
        let tc = TrainConfig {
            lr: 1e-3,
            global: StageSpec { epochs: 2, batch_size: 4, alpha: Some(0.5), beta: Some(0.5) },
            pfn: StageSpec { epochs: 2, batch_size: 2, alpha: Some(0.0), beta: Some(0.0) },
            joint: StageSpec { epochs: 1, batch_size: 2, alpha: None, beta: None },
            val_interval: 2,
            ..TrainConfig::default()
        };
        let vols = (0..2).map(|s| make_phantom(s, [16, 32, 32], 1).unwrap()).collect();
        (cfg, tc, vols)
    }

    #[test]
    fn stages_freeze_the_other_group() {
        let (cfg, tc, vols) = tiny_setup();
        let data = TrainData::new(&vols, &cfg).unwrap();
        for kind in [StageKind::Global, StageKind::Pfn] {
            let mut params: ParamStore<f32> = build_model(&cfg, 1).unwrap();
            let before = params.clone();
            let stage = tc.stage(kind, &cfg);
            let log = run_stage(&mut params, &cfg, &tc, &stage, &data, 1).unwrap();
            assert_eq!(log.len(), stage.epochs);
            for ((name, a), (_, b)) in before.iter().zip(params.iter()) {
                if kind.trains(name) {
                    assert_ne!(a.value, b.value, "{name} should move in stage {kind}");
                } else {
                    assert_eq!(a, b, "{name} must stay frozen in stage {kind}");
                }
            }
        }
    }

    #[test]
    fn schedule_is_reproducible_and_keeps_best() {
        let (cfg, tc, vols) = tiny_setup();
        let val = vec![make_phantom(9, [16, 32, 32], 1).unwrap()];
        let run = || {
            let mut lines = Vec::new();
            let out =
                train_full_schedule(&cfg, &tc, &vols, &val, &StageKind::ALL, None, &mut |r| lines.push(r.to_string()))
                    .unwrap();
            (out, lines)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a.best, b.best);
        assert_eq!(a.last.epoch, 5);
        assert_eq!(la.len(), 6);
        let final_dsc = a.records.last().unwrap().val_dsc.unwrap();
        assert!(a.best_dsc >= final_dsc);
        let max = a.records.iter().filter_map(|r| r.val_dsc).fold(f64::MIN, f64::max);
        assert_eq!(a.best_dsc, max);
    }

    #[test]
    fn zero_epoch_schedule_returns_initialization() {
        let (cfg, mut tc, vols) = tiny_setup();
        for k in StageKind::ALL {
            match k {
                StageKind::Global => tc.global.epochs = 0,
                StageKind::Pfn => tc.pfn.epochs = 0,
                StageKind::Joint => tc.joint.epochs = 0,
            }
        }
        let val = vec![make_phantom(9, [16, 32, 32], 1).unwrap()];
        let out = train_full_schedule(&cfg, &tc, &vols, &val, &StageKind::ALL, None, &mut |_| {}).unwrap();
        assert_eq!(out.best.params, build_model::<f32>(&cfg, tc.seed).unwrap());
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, tc, vols) = tiny_setup();
        let val = vec![make_phantom(9, [16, 32, 32], 1).unwrap()];
        let full = train_full_schedule(&cfg, &tc, &vols, &val, &StageKind::ALL, None, &mut |_| {}).unwrap();
        let first = train_full_schedule(&cfg, &tc, &vols, &val, &[StageKind::Global], None, &mut |_| {}).unwrap();
        assert_eq!(first.last.epoch, 2);
        let rest = train_full_schedule(&cfg, &tc, &vols, &val, &StageKind::ALL, Some(first.last), &mut |_| {}).unwrap();
        assert_eq!(rest.last, full.last);
        assert_eq!(rest.records.first().unwrap().epoch, 2);
    }

    #[test]
    fn rejects_overlapping_or_empty_splits() {
        let (cfg, tc, vols) = tiny_setup();
        assert!(matches!(
            train_full_schedule(&cfg, &tc, &vols, &vols[..1], &StageKind::ALL, None, &mut |_| {}),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            train_full_schedule(&cfg, &tc, &[], &vols, &StageKind::ALL, None, &mut |_| {}),
            Err(Error::EmptyData(_))
        ));
    }
}
