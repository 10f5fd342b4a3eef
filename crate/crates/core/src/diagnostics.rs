//! Self-contained property probes over the autodiff engine and the model:
//! finite-difference gradient checks, causality, permutation equivariance,
//! rigid-transform invariance and cached-decode equivalence. Each probe
//! builds its own small synthetic fixture and returns a measured value.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{grad_check, AdError, GradCheckOptions, ParamId, ParamStore, Tape, Tensor, Var};
use crate::dataset::{prepare_scene, SceneInput, TokenizeOptions, Vocabularies};
use crate::geom::Pose2;
use crate::model::{init_params, AgentSeq, Model, ModelConfig, MotionGraph, RoadInput};
use crate::rollout::incremental_equivalence_check;
use crate::scenario::Scenario;
use crate::seed::rng_for;
use crate::synth::{generate_map, generate_scenario, MapKind, MapSpec, TrafficSpec};
use crate::training::scene_loss;
use crate::Error;

/// Largest accepted relative error of a finite-difference gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Largest accepted logit change under a global rigid transform.
pub const RIGID_TOLERANCE: f64 = 1e-4;
/// Largest accepted logit difference between cached and full decoding.
pub const CACHE_TOLERANCE: f64 = 1e-5;

/// Outcome of one probe.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl PropertyResult {
    fn at_most(name: &'static str, value: f64, threshold: f64) -> Self {
        PropertyResult { name, passed: value <= threshold, value, threshold }
    }

    fn below(name: &'static str, value: f64, threshold: f64) -> Self {
        PropertyResult { name, passed: value < threshold, value, threshold }
    }

    /// `PASS name (value …, threshold …)` or `FAIL …`.
    pub fn line(&self) -> String {
        format!(
            "{} {} (value {:.3e}, threshold {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold
        )
    }
}

fn randn(rng: &mut impl Rng, rows: usize, cols: usize, sd: f64) -> Tensor<f64> {
    let d = Normal::new(0.0, sd).expect("positive deviation");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| d.sample(rng)).collect())
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.add(n, t).expect("distinct names");
    }
    s
}

/// Reduces a matrix to a scalar with fixed random weights so every element
/// receives a distinct upstream gradient.
fn weighted_sum(t: &mut Tape<'_, f64>, x: Var, seed: u64) -> Result<Var, AdError> {
    let (r, c) = t.value(x).shape();
    let w = t.constant(randn(&mut rng_for(seed, &[]), c, 1, 1.0))?;
    let y = t.matmul(x, w)?;
    let ones = t.constant(Tensor::from_vec(1, r, vec![1.0; r]))?;
    let s = t.matmul(ones, y)?;
    t.sum(s)
}

type OpFn = fn(&mut Tape<'_, f64>) -> Result<Var, AdError>;

/// Worst relative error of finite-difference checks over every tape op,
/// each on small random inputs in 64-bit precision with step 1e-5.
pub fn op_gradient_check() -> Result<f64, AdError> {
    let mut rng = rng_for(0x6AD, &[]);
    let cases: Vec<(ParamStore<f64>, bool, OpFn)> = vec![
        (
            store(vec![("x", randn(&mut rng, 3, 4, 1.0)), ("w", randn(&mut rng, 4, 5, 1.0)), ("b", randn(&mut rng, 1, 5, 1.0))]),
            false,
            |t| {
                let (x, w, b) = (t.param_by_name("x")?, t.param_by_name("w")?, t.param_by_name("b")?);
                let y = t.linear(x, w, b)?;
                weighted_sum(t, y, 1)
            },
        ),
        (store(vec![("a", randn(&mut rng, 3, 4, 1.0)), ("b", randn(&mut rng, 3, 4, 1.0))]), false, |t| {
            let (a, b) = (t.param_by_name("a")?, t.param_by_name("b")?);
            let s = t.add(a, b)?;
            let s = t.scale(s, -1.7)?;
            let s = t.add(s, a)?;
            weighted_sum(t, s, 2)
        }),
        (store(vec![("x", randn(&mut rng, 4, 5, 2.0))]), false, |t| {
            let x = t.param_by_name("x")?;
            let y = t.gelu(x)?;
            weighted_sum(t, y, 3)
        }),
        (
            store(vec![("x", randn(&mut rng, 4, 6, 2.0)), ("g", randn(&mut rng, 1, 6, 1.0)), ("b", randn(&mut rng, 1, 6, 1.0))]),
            false,
            |t| {
                let (x, g, b) = (t.param_by_name("x")?, t.param_by_name("g")?, t.param_by_name("b")?);
                let y = t.layer_norm(x, g, b)?;
                weighted_sum(t, y, 4)
            },
        ),
        (store(vec![("e", randn(&mut rng, 5, 3, 1.0)), ("f", randn(&mut rng, 2, 3, 1.0))]), false, |t| {
            let (e, f) = (t.param_by_name("e")?, t.param_by_name("f")?);
            let g = t.gather_rows(e, vec![4, 0, 4, 2])?;
            let c = t.concat_rows(vec![g, f, e])?;
            weighted_sum(t, c, 5)
        }),
        (
            store(vec![("q", randn(&mut rng, 3, 6, 1.0)), ("k", randn(&mut rng, 7, 6, 1.0)), ("v", randn(&mut rng, 7, 6, 1.0))]),
            false,
            |t| {
                let (q, k, v) = (t.param_by_name("q")?, t.param_by_name("k")?, t.param_by_name("v")?);
                let y = t.attention(q, k, v, vec![0, 3, 3, 7], 3)?;
                weighted_sum(t, y, 6)
            },
        ),
        (store(vec![("x", randn(&mut rng, 5, 5, 1.0))]), true, |t| {
            let x = t.param_by_name("x")?;
            let y = t.dropout(x)?;
            weighted_sum(t, y, 7)
        }),
        (store(vec![("z", randn(&mut rng, 3, 9, 2.0))]), false, |t| {
            let z = t.param_by_name("z")?;
            t.cross_entropy(z, vec![2, 0, 3], vec![(0, 5), (5, 4), (0, 9)])
        }),
    ];
    let mut worst: f64 = 0.0;
    for (params, train, f) in cases {
        let rep = grad_check(&params, GradCheckOptions { train, seed: 3, ..Default::default() }, f)?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(worst)
}

fn scenario(kind: MapKind, agents: usize, horizon: usize, seed: u64) -> Result<Scenario, Error> {
    let map = generate_map(&MapSpec::new(kind, 2, seed))?;
    let mut spec = TrafficSpec::new(agents, seed);
    spec.horizon_steps = horizon;
    Ok(generate_scenario(&map, &spec)?)
}

/// Smallest model configuration that exercises every layer kind.
fn micro_config(v: &Vocabularies) -> ModelConfig {
    let mut c = ModelConfig::smart_1m_tiny();
    c.agent_dim = 8;
    c.road_dim = 8;
    c.n_heads = 2;
    c.head_dim = 4;
    c.a2a_layers = 2;
    c.m2a_layers = 1;
    c.fusion_blocks = 2;
    v.configure(&mut c);
    c
}

/// Worst relative error of a finite-difference check of the full training
/// loss (motion plus road prediction, dropout active) with respect to every
/// parameter of a micro model on a short two-agent scene.
pub fn loss_gradient_check(seed: u64) -> Result<f64, Error> {
    let mut s = scenario(MapKind::Straight, 2, 20, seed)?;
    s.map.truncate(2);
    for tr in &mut s.agents {
        tr.states.truncate(26);
    }
    let v = Vocabularies::build(std::slice::from_ref(&s), 6, 5, 0)?;
    let mut scene = prepare_scene(&s, &v, &TokenizeOptions::clean(0))?;
    scene.map = scene.map.subset(|inst| inst.seq_index < 6);
    scene.road = RoadInput::new(&scene.map, 10);
    let cfg = micro_config(&v);
    let mut params = init_params::<f64>(&cfg, seed)?;
    // Larger weights than the default init make every path contribute.
    let mut rng = rng_for(seed, &[1]);
    for i in 0..params.len() {
        params.get_mut(ParamId(i)).data.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    let opts = GradCheckOptions { train: true, seed: 5, ..Default::default() };
    let rep = grad_check(&params, opts, |t| match scene_loss(t, &cfg, &scene, true, 1.0) {
        Ok(Some((loss, _))) => Ok(loss),
        Ok(None) => Err(AdError::Shape { op: "scene_loss", detail: "scene has no motion targets".into() }),
        Err(crate::training::TrainError::Model(crate::model::ModelError::Autodiff(e))) => Err(e),
        Err(e) => Err(AdError::Shape { op: "scene_loss", detail: e.to_string() }),
    })?;
    Ok(rep.max_rel_error)
}

/// A small model and clean scene over an `agents`-agent scenario.
pub fn probe_fixture(kind: MapKind, agents: usize, seed: u64) -> Result<(Scenario, Vocabularies, Model<f32>, SceneInput), Error> {
    let s = scenario(kind, agents, 20, seed)?;
    let v = Vocabularies::build(std::slice::from_ref(&s), 48, 24, 0)?;
    let mut cfg = ModelConfig::smart_1m_tiny();
    cfg.a2a_layers = 2;
    cfg.m2a_layers = 2;
    cfg.fusion_blocks = 2;
    v.configure(&mut cfg);
    let model = Model::new(cfg, seed)?;
    let scene = prepare_scene(&s, &v, &TokenizeOptions::clean(0))?;
    Ok((s, v, model, scene))
}

fn logits_by_agent_step(graph: &MotionGraph, logits: &Tensor<f32>, agents: &[AgentSeq]) -> Vec<Vec<Option<Vec<f32>>>> {
    let mut out: Vec<Vec<Option<Vec<f32>>>> = agents.iter().map(|a| vec![None; a.steps()]).collect();
    for (n, &(a, s)) in graph.nodes.iter().enumerate() {
        out[a][s] = Some(logits.row(n).to_vec());
    }
    out
}

/// Perturbs one agent's token and pose at several steps and counts logits
/// of strictly earlier steps (of any agent) that changed by any amount.
pub fn causality_violations(seed: u64) -> Result<usize, Error> {
    let (_, v, model, scene) = probe_fixture(MapKind::Straight, 4, seed)?;
    let (g, l) = model.motion_logits(&scene.agents, &scene.road)?;
    let base = logits_by_agent_step(&g, &l, &scene.agents);
    let class = scene.agents[1].class;
    let vsize = v.motion.sizes()[class.index()] as u32;
    let mut violations = 0;
    for t in [1usize, 3, 5] {
        let mut agents = scene.agents.clone();
        agents[1].tokens[t] = (agents[1].tokens[t] + 7) % vsize;
        agents[1].poses[t] = agents[1].poses[t].compose(&Pose2::new(0.8, 0.3, 0.1));
        let (g2, l2) = model.motion_logits(&agents, &scene.road)?;
        let pert = logits_by_agent_step(&g2, &l2, &agents);
        for a in 0..agents.len() {
            violations += pert[a][..t].iter().zip(&base[a][..t]).filter(|(x, y)| x != y).count();
        }
    }
    Ok(violations)
}

/// Reorders the agents of a scene and counts logit rows that are not the
/// bit-exact image of the original rows under the permutation.
pub fn permutation_mismatches(seed: u64) -> Result<usize, Error> {
    let (_, _, model, scene) = probe_fixture(MapKind::Straight, 5, seed)?;
    let (g, l) = model.motion_logits(&scene.agents, &scene.road)?;
    let base = logits_by_agent_step(&g, &l, &scene.agents);
    let n = scene.agents.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % n).collect();
    let agents: Vec<AgentSeq> = perm.iter().map(|&i| scene.agents[i].clone()).collect();
    let (g2, l2) = model.motion_logits(&agents, &scene.road)?;
    let out = logits_by_agent_step(&g2, &l2, &agents);
    Ok(perm.iter().enumerate().map(|(new_i, &old_i)| out[new_i].iter().zip(&base[old_i]).filter(|(x, y)| x != y).count()).sum())
}

/// Largest absolute logit change when the whole scene is moved by a
/// global rigid transform.
pub fn rigid_transform_deviation(seed: u64) -> Result<f64, Error> {
    let (s, v, model, scene) = probe_fixture(MapKind::Arc, 4, seed)?;
    let (_, l) = model.motion_logits(&scene.agents, &scene.road)?;
    let moved = s.transformed(&Pose2::new(310.0, -42.0, -1.3));
    let scene2 = prepare_scene(&moved, &v, &TokenizeOptions::clean(0))?;
    let (_, l2) = model.motion_logits(&scene2.agents, &scene2.road)?;
    if l.shape() != l2.shape() {
        return Ok(f64::INFINITY);
    }
    Ok(l.data.iter().zip(&l2.data).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max))
}

/// Largest absolute difference between cached incremental logits and a
/// full re-encode at every step after the first.
pub fn cache_deviation(seed: u64) -> Result<f64, Error> {
    let (_, _, model, scene) = probe_fixture(MapKind::Arc, 5, seed)?;
    let r = incremental_equivalence_check(&model, &scene.agents, &scene.road, 1).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(r.max_abs_diff)
}

/// Runs every probe with fixed seeds.
pub fn run_all() -> Result<Vec<PropertyResult>, Error> {
    Ok(vec![
        PropertyResult::below("op_gradients", op_gradient_check()?, GRAD_TOLERANCE),
        PropertyResult::below("loss_gradients", loss_gradient_check(8)?, GRAD_TOLERANCE),
        PropertyResult::at_most("causality", causality_violations(4)? as f64, 0.0),
        PropertyResult::at_most("agent_permutation", permutation_mismatches(5)? as f64, 0.0),
        PropertyResult::below("rigid_invariance", rigid_transform_deviation(6)?, RIGID_TOLERANCE),
        PropertyResult::at_most("cache_equivalence", cache_deviation(9)?, CACHE_TOLERANCE),
    ])
}
