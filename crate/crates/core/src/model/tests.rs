use super::net::{linear, norm, rpe_encode};
use super::*;
use crate::autodiff::{grad_check, GradCheckOptions, ParamId};
use crate::dataset::{prepare_scene, SceneInput, TokenizeOptions, Vocabularies};
use crate::geom::Pose2;
use crate::synth::{generate_map, generate_scenario, MapKind, MapSpec, TrafficSpec};
use crate::Scenario;

fn scenario(kind: MapKind, agents: usize, seed: u64) -> Scenario {
    let map = generate_map(&MapSpec::new(kind, 2, seed)).unwrap();
    let mut spec = TrafficSpec::new(agents, seed);
    spec.horizon_steps = 20;
    generate_scenario(&map, &spec).unwrap()
}

fn fixture(agents: usize, seed: u64) -> (Vocabularies, Scenario, SceneInput) {
    let s = scenario(MapKind::Straight, agents, seed);
    let v = Vocabularies::build(std::slice::from_ref(&s), 48, 24, 0).unwrap();
    let scene = prepare_scene(&s, &v, &TokenizeOptions::clean(0)).unwrap();
    (v, s, scene)
}

fn tiny_for(v: &Vocabularies) -> ModelConfig {
    let mut c = ModelConfig::smart_1m_tiny();
    c.a2a_layers = 2;
    c.m2a_layers = 2;
    c.fusion_blocks = 2;
    v.configure(&mut c);
    c
}

fn logits_by_agent_step(graph: &MotionGraph, logits: &Tensor<f32>, agents: &[AgentSeq]) -> Vec<Vec<Option<Vec<f32>>>> {
    let mut out: Vec<Vec<Option<Vec<f32>>>> = agents.iter().map(|a| vec![None; a.steps()]).collect();
    for (n, &(a, s)) in graph.nodes.iter().enumerate() {
        out[a][s] = Some(logits.row(n).to_vec());
    }
    out
}

#[test]
fn smart_1m_parameter_count_is_about_one_million() {
    let m = Model::<f32>::new(ModelConfig::smart_1m(), 0).unwrap();
    let n = m.param_count();
    assert!((800_000..=1_200_000).contains(&n), "{n}");
}

#[test]
fn init_is_deterministic_per_seed() {
    let c = ModelConfig::smart_1m_tiny();
    let a = init_params::<f32>(&c, 3).unwrap();
    assert_eq!(a, init_params::<f32>(&c, 3).unwrap());
    assert_ne!(a, init_params::<f32>(&c, 4).unwrap());
    // Biases start at zero, normalization gains at one.
    let b = a.get(a.id("head.motion.l1.b").unwrap());
    assert!(b.data.iter().all(|&v| v == 0.0));
    let g = a.get(a.id("motion.final_ln.g").unwrap());
    assert!(g.data.iter().all(|&v| v == 1.0));
    let w = a.get(a.id("motion.token_emb").unwrap());
    let std = (w.data.iter().map(|v| (v * v) as f64).sum::<f64>() / w.data.len() as f64).sqrt();
    assert!((std - 0.02).abs() < 0.002, "{std}");
}

#[test]
fn road_pathway_changes_parameter_count() {
    let mut c = ModelConfig::smart_1m_tiny();
    let with = Model::<f32>::new(c.clone(), 0).unwrap().param_count();
    c.road_vocab_tokens = false;
    let without = Model::<f32>::new(c, 0).unwrap().param_count();
    assert_ne!(with, without);
}

#[test]
fn single_token_map_attends_only_to_itself() {
    let (v, _, scene) = fixture(2, 1);
    let cfg = tiny_for(&v);
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let mut map = scene.map.clone();
    map.instances.truncate(1);
    map.instances[0].successors.clear();
    map.sequences = vec![vec![0]];
    let road = RoadInput::new(&map, 10);
    let out = model.road_embeddings(&road).unwrap();

    // Manual evaluation: with one source every attention weight is one.
    let mut t = Tape::new(&model.params, false, 0.0, 0);
    let table = t.param_by_name("road.token_emb").unwrap();
    let e = t.gather_rows(table, road.tokens.clone()).unwrap();
    let kinds = t.param_by_name("road.kind_emb").unwrap();
    let k = t.gather_rows(kinds, road.kinds.clone()).unwrap();
    let x = t.add(e, k).unwrap();
    let rpe = rpe_encode(&mut t, "road", road.full.feature_tensor()).unwrap();
    let xn = norm(&mut t, "road.layer0.ln1", x).unwrap();
    let v0 = linear(&mut t, "road.layer0.v", xn).unwrap();
    let rv = t.param_by_name("road.layer0.rv").unwrap();
    let vr = t.matmul(rpe, rv).unwrap();
    let vv = t.add(v0, vr).unwrap();
    let o = linear(&mut t, "road.layer0.o", vv).unwrap();
    let h = t.add(x, o).unwrap();
    let hn = norm(&mut t, "road.layer0.ln2", h).unwrap();
    let f = linear(&mut t, "road.layer0.ffn1", hn).unwrap();
    let f = t.gelu(f).unwrap();
    let f = linear(&mut t, "road.layer0.ffn2", f).unwrap();
    let y = t.add(h, f).unwrap();
    let y = norm(&mut t, "road.final_ln", y).unwrap();
    for (a, b) in out.data.iter().zip(&t.value(y).data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn road_encoding_is_permutation_equivariant_and_rigid_invariant() {
    let (v, s, scene) = fixture(2, 2);
    let model = Model::<f64>::new(tiny_for(&v), 2).unwrap();
    let base = model.road_embeddings(&scene.road).unwrap();

    // Reverse the instance order.
    let n = scene.map.instances.len();
    let perm: Vec<usize> = (0..n).rev().collect();
    let mut map = scene.map.clone();
    map.instances = perm.iter().map(|&i| scene.map.instances[i].clone()).collect();
    for inst in &mut map.instances {
        inst.successors = inst.successors.iter().map(|&s| n - 1 - s).collect();
    }
    let out = model.road_embeddings(&RoadInput::new(&map, 10)).unwrap();
    for (new_i, &old_i) in perm.iter().enumerate() {
        for (a, b) in out.row(new_i).iter().zip(base.row(old_i)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    let moved = s.transformed(&Pose2::new(-120.0, 75.0, 2.1));
    let scene2 = prepare_scene(&moved, &v, &TokenizeOptions::clean(0)).unwrap();
    let out = model.road_embeddings(&scene2.road).unwrap();
    let max = out.data.iter().zip(&base.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max < 1e-5, "{max}");
}

#[test]
fn zeroed_attention_outputs_isolate_each_token() {
    let (v, _, scene) = fixture(4, 3);
    let mut model = Model::<f32>::new(tiny_for(&v), 3).unwrap();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).filter(|n| n.contains(".o.")).collect();
    for n in names {
        let id = model.params.id(&n).unwrap();
        model.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
    let (g, full) = model.motion_logits(&scene.agents, &scene.road).unwrap();
    let full = logits_by_agent_step(&g, &full, &scene.agents);
    // Each agent alone, without a map, yields the same logits.
    let mut empty_map = scene.map.clone();
    empty_map.instances.clear();
    empty_map.sequences.clear();
    let no_road = RoadInput::new(&empty_map, 10);
    for (i, a) in scene.agents.iter().enumerate() {
        let (g1, l1) = model.motion_logits(std::slice::from_ref(a), &no_road).unwrap();
        let alone = logits_by_agent_step(&g1, &l1, std::slice::from_ref(a));
        assert_eq!(alone[0], full[i]);
    }
}

#[test]
fn perturbing_a_token_leaves_earlier_logits_bit_identical() {
    let (v, _, scene) = fixture(4, 4);
    let model = Model::<f32>::new(tiny_for(&v), 4).unwrap();
    let (g, l) = model.motion_logits(&scene.agents, &scene.road).unwrap();
    let base = logits_by_agent_step(&g, &l, &scene.agents);
    let vsize = v.motion.sizes()[0] as u32;
    for t in [1usize, 3, 5] {
        let mut agents = scene.agents.clone();
        agents[1].tokens[t] = (agents[1].tokens[t] + 7) % vsize;
        agents[1].poses[t] = agents[1].poses[t].compose(&Pose2::new(0.8, 0.3, 0.1));
        let (g2, l2) = model.motion_logits(&agents, &scene.road).unwrap();
        let pert = logits_by_agent_step(&g2, &l2, &agents);
        for a in 0..agents.len() {
            assert_eq!(pert[a][..t], base[a][..t], "agent {a} before step {t}");
        }
        assert_ne!(pert[1][t], base[1][t]);
    }
}

#[test]
fn permuting_agents_permutes_logits_exactly() {
    let (v, _, scene) = fixture(5, 5);
    let model = Model::<f32>::new(tiny_for(&v), 5).unwrap();
    let (g, l) = model.motion_logits(&scene.agents, &scene.road).unwrap();
    let base = logits_by_agent_step(&g, &l, &scene.agents);
    let perm = [3usize, 0, 4, 2, 1];
    let agents: Vec<AgentSeq> = perm.iter().map(|&i| scene.agents[i].clone()).collect();
    let (g2, l2) = model.motion_logits(&agents, &scene.road).unwrap();
    let out = logits_by_agent_step(&g2, &l2, &agents);
    for (new_i, &old_i) in perm.iter().enumerate() {
        assert_eq!(out[new_i], base[old_i]);
    }
}

#[test]
fn rigid_transform_of_scene_barely_changes_logits() {
    let (v, s, scene) = fixture(4, 6);
    let model = Model::<f32>::new(tiny_for(&v), 6).unwrap();
    let (_, l) = model.motion_logits(&scene.agents, &scene.road).unwrap();
    let moved = s.transformed(&Pose2::new(310.0, -42.0, -1.3));
    let scene2 = prepare_scene(&moved, &v, &TokenizeOptions::clean(0)).unwrap();
    assert_eq!(scene2.agents.iter().map(|a| &a.tokens).collect::<Vec<_>>(), scene.agents.iter().map(|a| &a.tokens).collect::<Vec<_>>());
    let (_, l2) = model.motion_logits(&scene2.agents, &scene2.road).unwrap();
    let max = l.data.iter().zip(&l2.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(max < 1e-4, "{max}");
}

#[test]
fn vocabulary_mismatch_is_an_error() {
    let (v, _, scene) = fixture(2, 7);
    let model = Model::<f32>::new(tiny_for(&v), 0).unwrap();
    let mut agents = scene.agents.clone();
    agents[0].tokens[0] = v.motion.sizes()[0] as u32;
    assert!(matches!(model.motion_logits(&agents, &scene.road), Err(ModelError::Vocab { .. })));
    let mut road = scene.road.clone();
    road.tokens[0] = v.road.size();
    assert!(matches!(model.road_embeddings(&road), Err(ModelError::Vocab { .. })));
}

fn chain(n: usize) -> crate::tokens::TokenizedMap {
    use crate::tokens::RoadTokenInstance;
    let instances = (0..n)
        .map(|i| RoadTokenInstance {
            pose: Pose2::new(5.0 * i as f64, 0.0, 0.0),
            index: (i % 4) as u32,
            label: (i % 4) as u32,
            noised: false,
            kind: crate::PolylineKind::Lane,
            polyline_id: 0,
            seq_index: i,
            length: 5.0,
            descriptor: [5.0, 0.0, 0.0],
            successors: if i + 1 < n { vec![i + 1] } else { vec![] },
        })
        .collect();
    crate::tokens::TokenizedMap { instances, sequences: vec![(0..n).collect()] }
}

fn road_cfg() -> ModelConfig {
    let mut c = ModelConfig::smart_1m_tiny();
    c.road_layers = 2;
    c.road_vocab_size = 6;
    c.motion_vocab_sizes = [8, 0, 0];
    c
}

#[test]
fn road_prediction_shapes_and_short_sequences() {
    let model = Model::<f32>::new(road_cfg(), 0).unwrap();
    let mut t = Tape::new(&model.params, false, 0.0, 0);
    let (l, targets, skipped) = road_ntp_logits(&mut t, &model.config, &RoadInput::new(&chain(2), 10)).unwrap();
    assert_eq!(targets.len(), 1);
    assert_eq!(skipped, 0);
    assert_eq!(t.value(l.unwrap()).shape(), (1, 6));

    let mut m = chain(7);
    m.sequences.push(vec![0, 1, 2]);
    m.sequences.push(vec![4]);
    let mut t = Tape::new(&model.params, false, 0.0, 0);
    let (l, targets, skipped) = road_ntp_logits(&mut t, &model.config, &RoadInput::new(&m, 10)).unwrap();
    assert_eq!(t.value(l.unwrap()).shape(), (6 + 2, 6));
    assert_eq!(targets.len(), 8);
    assert_eq!(skipped, 1);

    let mut t = Tape::new(&model.params, false, 0.0, 0);
    let (l, _, skipped) = road_ntp_logits(&mut t, &model.config, &RoadInput::new(&chain(1), 10)).unwrap();
    assert!(l.is_none());
    assert_eq!(skipped, 1);
}

#[test]
fn road_prediction_cannot_see_the_answer() {
    let model = Model::<f32>::new(road_cfg(), 1).unwrap();
    let base = chain(8);
    let run = |m: &crate::tokens::TokenizedMap| {
        let mut t = Tape::new(&model.params, false, 0.0, 0);
        let (l, _, _) = road_ntp_logits(&mut t, &model.config, &RoadInput::new(m, 10)).unwrap();
        t.value(l.unwrap()).clone()
    };
    let l0 = run(&base);
    for j in 0..7 {
        let mut m = base.clone();
        m.instances[j + 1].index = (m.instances[j + 1].index + 1) % 6;
        m.instances[j + 1].label = (m.instances[j + 1].label + 2) % 6;
        let l1 = run(&m);
        for r in 0..=j {
            assert_eq!(l0.row(r), l1.row(r), "position {r} changed when token {} changed", j + 1);
        }
    }
}

/// Smallest configuration exercising every layer kind.
fn micro_cfg(v: &Vocabularies) -> ModelConfig {
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

/// Summed motion and road losses of a scene, in training mode.
fn toy_loss(t: &mut Tape<'_, f64>, cfg: &ModelConfig, scene: &SceneInput) -> Result<crate::autodiff::Var, crate::autodiff::AdError> {
    let wrap = |e: ModelError| match e {
        ModelError::Autodiff(a) => a,
        other => panic!("{other}"),
    };
    let graph = MotionGraph::build(&scene.agents, &scene.road.poses, cfg.agent_neighbor_radius);
    let r = road_encode(t, cfg, &scene.road, false).map_err(wrap)?;
    let logits = motion_decode(t, cfg, &scene.agents, &graph, r).map_err(wrap)?;
    let targets = motion_targets(cfg, &scene.agents, &graph);
    let rows = t.gather_rows(logits, targets.iter().map(|x| x.0).collect())?;
    let motion = t.cross_entropy(rows, targets.iter().map(|x| x.1).collect(), targets.iter().map(|x| x.2).collect())?;
    let (rl, rt, _) = road_ntp_logits(t, cfg, &scene.road).map_err(wrap)?;
    let n = rt.len();
    let road = t.cross_entropy(rl.unwrap(), rt, vec![(0, cfg.road_vocab_size); n])?;
    t.add(motion, road)
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let s = scenario(MapKind::Straight, 2, 8);
    let mut s = s;
    s.map.truncate(2);
    for tr in &mut s.agents {
        tr.states.truncate(26);
    }
    let v = Vocabularies::build(std::slice::from_ref(&s), 6, 5, 0).unwrap();
    let scene = prepare_scene(&s, &v, &TokenizeOptions::clean(0)).unwrap();
    let mut scene = scene;
    // Keep a short stretch of road so the check stays fast.
    let keep: Vec<usize> = (0..scene.map.instances.len()).filter(|&i| scene.map.instances[i].seq_index < 6).collect();
    let mut map = scene.map.clone();
    map.instances = keep.iter().map(|&i| scene.map.instances[i].clone()).collect();
    for inst in &mut map.instances {
        inst.successors = inst.successors.iter().filter_map(|s| keep.iter().position(|k| k == s)).collect();
    }
    map.sequences = scene.map.sequences.iter().map(|q| q.iter().filter_map(|s| keep.iter().position(|k| k == s)).collect()).collect();
    scene.road = RoadInput::new(&map, 10);
    scene.map = map;
    let cfg = micro_cfg(&v);
    let params = init_params::<f64>(&cfg, 8).unwrap();
    // Larger weights than the default init make every path contribute.
    let mut params = params;
    let mut rng = crate::seed::rng_for(1, &[]);
    for i in 0..params.len() {
        use rand::Rng;
        let t = params.get_mut(ParamId(i));
        t.data.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    let opts = GradCheckOptions { train: true, seed: 5, ..Default::default() };
    let rep = grad_check(&params, opts, |t| toy_loss(t, &cfg, &scene)).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{} at {:?}", rep.max_rel_error, rep.worst);
    assert_eq!(rep.coords_checked, params.element_count());
}

#[test]
fn incremental_decode_matches_full_decode() {
    let (v, _, scene) = fixture(6, 9);
    let model = Model::<f32>::new(tiny_for(&v), 9).unwrap();
    let (g, full) = model.motion_logits(&scene.agents, &scene.road).unwrap();
    let mut cache = model.start_decode(&scene.agents, &scene.road).unwrap();
    let steps = scene.agents.iter().map(AgentSeq::steps).max().unwrap();
    let mut max = 0.0f32;
    for t in 0..steps {
        let step = model.decode_step(&mut cache, &scene.agents, &scene.road).unwrap();
        assert_eq!(step.step, t);
        for (r, &a) in step.agents.iter().enumerate() {
            let n = g.node_of[a][t].unwrap();
            for (x, y) in step.logits.row(r).iter().zip(full.row(n)) {
                max = max.max((x - y).abs());
            }
        }
    }
    assert_eq!(cache.map_encodes, 1);
    assert!(max <= 1e-5, "{max}");
}
