use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, AdamW, AdamWConfig, TrainConfig, TrainError, TrainFlags};
use crate::autodiff::{Grads, Scalar, Tape, Var};
use crate::dataset::{prepare_scene, SceneInput, TokenizeOptions, Vocabularies};
use crate::model::{
    motion_decode, motion_targets, road_encode, road_ntp_logits, write_checkpoint, CheckpointHeader, Model, ModelConfig,
    MotionGraph,
};
use crate::scenario::Scenario;
use crate::seed::{derive_seed, rng_for};

/// Loss components in nats per token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub motion_nats: f64,
    pub road_nats: f64,
    /// `motion_nats + road_loss_weight · road_nats`.
    pub total: f64,
    pub motion_tokens: usize,
    pub road_tokens: usize,
}

impl LossBreakdown {
    fn combine(motion_nats: f64, road_nats: f64, weight: f64, motion_tokens: usize, road_tokens: usize) -> Self {
        LossBreakdown { motion_nats, road_nats, total: motion_nats + weight * road_nats, motion_tokens, road_tokens }
    }

    fn is_finite(&self) -> bool {
        self.motion_nats.is_finite() && self.road_nats.is_finite() && self.total.is_finite()
    }
}

/// Builds the scene's loss on `t`: mean motion cross-entropy plus, when
/// road prediction is on, `road_weight` times the mean road cross-entropy.
/// Returns `None` when the scene has no motion targets.
pub fn scene_loss<S: Scalar>(
    t: &mut Tape<'_, S>,
    cfg: &ModelConfig,
    scene: &SceneInput,
    road_prediction: bool,
    road_weight: f64,
) -> Result<Option<(Var, LossBreakdown)>, TrainError> {
    let graph = MotionGraph::build(&scene.agents, &scene.road.poses, cfg.agent_neighbor_radius);
    let targets = motion_targets(cfg, &scene.agents, &graph);
    if targets.is_empty() {
        return Ok(None);
    }
    let road = road_encode(t, cfg, &scene.road, false)?;
    let logits = motion_decode(t, cfg, &scene.agents, &graph, road)?;
    let rows = t.gather_rows(logits, targets.iter().map(|x| x.0).collect())?;
    let ce = t.cross_entropy(rows, targets.iter().map(|x| x.1).collect(), targets.iter().map(|x| x.2).collect())?;
    let n_motion = targets.len();
    let motion = t.scale(ce, 1.0 / n_motion as f64)?;
    let motion_nats = t.value(motion).data[0].to_f64();

    let (mut total, mut road_nats, mut n_road) = (motion, 0.0, 0);
    if road_prediction {
        let (logits, road_targets, _) = road_ntp_logits(t, cfg, &scene.road)?;
        match logits {
            Some(l) => {
                n_road = road_targets.len();
                let ranges = vec![(0, cfg.road_vocab_size); n_road];
                let ce = t.cross_entropy(l, road_targets, ranges)?;
                let mean = t.scale(ce, 1.0 / n_road as f64)?;
                road_nats = t.value(mean).data[0].to_f64();
                let weighted = t.scale(mean, road_weight)?;
                total = t.add(total, weighted)?;
            }
            None => log::warn!("no road sequences with two or more tokens; road loss is zero"),
        }
    }
    Ok(Some((total, LossBreakdown::combine(motion_nats, road_nats, road_weight, n_motion, n_road))))
}

/// Token-weighted loss over `scenes` with dropout off.
pub fn evaluate_loss<S: Scalar>(
    model: &Model<S>,
    scenes: &[SceneInput],
    road_prediction: bool,
    road_weight: f64,
) -> Result<LossBreakdown, TrainError> {
    let (mut m, mut r, mut nm, mut nr) = (0.0, 0.0, 0usize, 0usize);
    for scene in scenes {
        let mut t = Tape::new(&model.params, false, 0.0, 0);
        if let Some((_, b)) = scene_loss(&mut t, &model.config, scene, road_prediction, road_weight)? {
            m += b.motion_nats * b.motion_tokens as f64;
            r += b.road_nats * b.road_tokens as f64;
            nm += b.motion_tokens;
            nr += b.road_tokens;
        }
    }
    if nm == 0 {
        return Err(TrainError::NoTargets);
    }
    let road = if nr == 0 { 0.0 } else { r / nr as f64 };
    Ok(LossBreakdown::combine(m / nm as f64, road, road_weight, nm, nr))
}

/// Optimizer state plus the model and the data it is trained on.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub vocabs: &'d Vocabularies,
    optimizer: AdamW,
    scenarios: &'d [Scenario],
    clean: Vec<Option<SceneInput>>,
    step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, vocabs: &'d Vocabularies, scenarios: &'d [Scenario]) -> Result<Self, TrainError> {
        config.validate()?;
        if scenarios.is_empty() {
            return Err(TrainError::NoData);
        }
        let mut model_config = config.model_config()?;
        vocabs.configure(&mut model_config);
        let model = Model::new(model_config, derive_seed(config.seed, &[0x1417]))?;
        let optimizer = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..Default::default() }, &model.params);
        Ok(Trainer { config, model, vocabs, optimizer, scenarios, clean: vec![None; scenarios.len()], step: 0 })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn flags(&self) -> TrainFlags {
        self.config.flags
    }

    /// Scenario indices of the batch at the current step.
    pub fn batch_indices(&self) -> Vec<usize> {
        let n = self.scenarios.len();
        let k = self.config.batch_size;
        let mut rng = rng_for(self.config.seed, &[0xBA7C, self.step as u64]);
        if k <= n {
            sample(&mut rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        }
    }

    /// Tokenized scene for training: cached when no noise is injected,
    /// otherwise re-tokenized with a seed unique to (step, batch slot).
    fn training_scene(&mut self, index: usize, slot: usize) -> Result<SceneInput, TrainError> {
        let flags = self.flags();
        if !flags.motion_noise && !flags.road_noise {
            if self.clean[index].is_none() {
                let opts = TokenizeOptions::clean(self.config.seed);
                self.clean[index] = Some(prepare_scene(&self.scenarios[index], self.vocabs, &opts)?);
            }
            return Ok(self.clean[index].clone().expect("cached above"));
        }
        let seed = derive_seed(self.config.seed, &[0x7015E, self.step as u64, slot as u64]);
        Ok(prepare_scene(&self.scenarios[index], self.vocabs, &flags.tokenize_options(seed))?)
    }

    /// One optimizer update on the current step's batch. The batch loss is
    /// the mean of per-scene losses; gradients accumulate in batch order.
    pub fn train_step(&mut self) -> Result<LossBreakdown, TrainError> {
        let batch = self.batch_indices();
        let mut scenes = Vec::with_capacity(batch.len());
        for (slot, &i) in batch.iter().enumerate() {
            scenes.push(self.training_scene(i, slot)?);
        }
        let step = self.step;
        let cfg = &self.config;
        let mut grads = Grads::zeros_like(&self.model.params);
        let mut parts = Vec::new();
        for (slot, scene) in scenes.iter().enumerate() {
            let dropout_seed = derive_seed(cfg.seed, &[0xD809, step as u64, slot as u64]);
            let mut t = Tape::new(&self.model.params, true, cfg.dropout, dropout_seed);
            let Some((loss, b)) = scene_loss(&mut t, &self.model.config, scene, cfg.flags.road_prediction, cfg.road_loss_weight)? else {
                continue;
            };
            if !b.is_finite() {
                return Err(TrainError::NonFinite { step, motion: b.motion_nats, road: b.road_nats });
            }
            parts.push((loss, b, t));
        }
        if parts.is_empty() {
            return Err(TrainError::NoTargets);
        }
        let inv = 1.0 / parts.len() as f64;
        let mut sum = LossBreakdown::default();
        for (loss, b, mut t) in parts {
            let scaled = t.scale(loss, inv)?;
            grads.add_assign(&t.backward(scaled)?);
            sum.motion_nats += b.motion_nats * inv;
            sum.road_nats += b.road_nats * inv;
            sum.motion_tokens += b.motion_tokens;
            sum.road_tokens += b.road_tokens;
        }
        let breakdown = LossBreakdown::combine(sum.motion_nats, sum.road_nats, cfg.road_loss_weight, sum.motion_tokens, sum.road_tokens);
        if grads.tensors.iter().any(|g| !g.all_finite()) {
            return Err(TrainError::NonFinite { step, motion: breakdown.motion_nats, road: breakdown.road_nats });
        }
        let lr = cosine_lr(cfg.lr_start, step, cfg.max_steps);
        self.optimizer.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(breakdown)
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader::new(self.model.config.clone(), self.vocabs.hashes(), self.step as u64)
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous row.
    pub train_nats: f64,
    pub val_nats: Option<f64>,
}

/// Outcome of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Training loss of every step.
    pub steps: Vec<LossBreakdown>,
    pub curve: Vec<CurvePoint>,
    pub final_val: Option<LossBreakdown>,
    pub model: Model<f32>,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,train_nats,val_nats\n");
        for p in &self.curve {
            let val = p.val_nats.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", p.step, p.train_nats, val);
        }
        s
    }
}

/// File names written by [`train`] into its output directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CURVE_FILE: &str = "loss_curve.csv";

/// Runs `config.max_steps` updates on `train_set`, validating on `val_set`
/// every `eval_every` steps and at the end. When `out_dir` is given, writes
/// the checkpoint and the loss curve there.
pub fn train(
    config: &TrainConfig,
    vocabs: &Vocabularies,
    train_set: &[Scenario],
    val_set: &[Scenario],
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    let mut trainer = Trainer::new(config.clone(), vocabs, train_set)?;
    let val_scenes = val_set
        .iter()
        .map(|s| prepare_scene(s, vocabs, &TokenizeOptions::clean(config.seed)))
        .collect::<Result<Vec<_>, _>>()?;
    let validate = |model: &Model<f32>| -> Result<Option<LossBreakdown>, TrainError> {
        if val_scenes.is_empty() {
            return Ok(None);
        }
        evaluate_loss(model, &val_scenes, config.flags.road_prediction, config.road_loss_weight).map(Some)
    };
    let mut steps = Vec::with_capacity(config.max_steps);
    let mut curve = Vec::new();
    let mut window = 0usize;
    let mut final_val = None;
    for step in 0..config.max_steps {
        let b = trainer.train_step()?;
        steps.push(b);
        window += 1;
        let done = step + 1 == config.max_steps;
        if (step + 1) % config.eval_every == 0 || done {
            let train_nats = steps[steps.len() - window..].iter().map(|b| b.total).sum::<f64>() / window as f64;
            let val = validate(&trainer.model)?;
            log::info!("step {} train {:.4} val {:?}", step + 1, train_nats, val.map(|v| v.total));
            curve.push(CurvePoint { step: step + 1, train_nats, val_nats: val.map(|v| v.total) });
            window = 0;
            if done {
                final_val = val;
            }
        }
    }
    let report = TrainReport { steps, curve, final_val, model: trainer.model.clone() };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &trainer.checkpoint_header(), &trainer.model.params)?;
        let path = dir.join(CURVE_FILE);
        std::fs::write(&path, report.curve_csv()).map_err(|e| crate::Error::io(&path, e))?;
    }
    Ok(report)
}
