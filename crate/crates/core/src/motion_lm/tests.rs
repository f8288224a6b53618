use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::infer::sample_index;
use super::*;
use crate::corpus::build_lexicon;
use crate::text_codec::{normalize_text, Vocabulary, FIRST_TEXT_ID};

const K: usize = 512;

fn vocab() -> Vocabulary {
    Vocabulary::build(&build_lexicon(16).unwrap(), K)
}

fn tiny() -> TransformerConfig {
    TransformerConfig { layers: 2, heads: 2, model_dim: 32, context_length: 192, dropout: 0.0 }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..K)).collect()
}

const PROMPT: &str = "A bearded man looks intensely grinning while nodding.";

#[test]
fn m2l_instance_layout() {
    let v = vocab();
    let inst = m2l_instance(&v, &[3, 7], "what is the face doing", "a grin").unwrap();
    let q = v.encode_text("what is the face doing");
    let a = v.encode_text("a grin");
    let mut ids = vec![BOS, MOT_BEGIN, v.geometry_id(3).unwrap(), v.geometry_id(7).unwrap(), MOT_END, SEP];
    ids.extend(&q);
    ids.push(SEP);
    let answer_start = ids.len();
    ids.extend(&a);
    ids.push(EOS);
    assert_eq!(inst.inputs, ids[..ids.len() - 1]);
    assert_eq!(inst.targets, ids[1..]);
    let masked: Vec<usize> = (0..inst.mask.len()).filter(|&i| inst.mask[i]).map(|i| inst.targets[i]).collect();
    assert_eq!(masked.len(), ids.len() - answer_start);
    assert_eq!(*masked.last().unwrap(), EOS);
    assert_eq!(masked[..a.len()], a[..]);
}

#[test]
fn l2m_instance_uses_head_space_targets() {
    let v = vocab();
    let inst = l2m_instance(&v, "nodding", &[0, 511, 5]).unwrap();
    let masked: Vec<usize> = (0..inst.mask.len()).filter(|&i| inst.mask[i]).map(|i| inst.targets[i]).collect();
    assert_eq!(masked, vec![0, 511, 5, K]);
    assert_eq!(inst.inputs[..4], [BOS, v.word_id("nodding").unwrap(), SEP, MOT_BEGIN]);
}

#[test]
fn instance_errors() {
    let v = vocab();
    assert!(matches!(l2m_instance(&v, "  ...  ", &[1]), Err(Error::EmptyPrompt)));
    assert!(matches!(l2m_instance(&v, "nod", &vec![0; 151]), Err(Error::TooLong { len: 151, limit: 150 })));
    assert!(matches!(m2l_instance(&v, &[512], "what is the face doing", "a"), Err(Error::TokenOutOfRange { .. })));
    assert!(m2l_instance(&v, &[1], "what", "").is_err());
}

#[test]
fn config_validation_lists_every_problem() {
    let c = TransformerConfig { layers: 0, heads: 3, model_dim: 32, context_length: 100, dropout: 0.1 };
    assert_eq!(c.validate().len(), 4);
    assert!(TransformerConfig::default().validate().is_empty());
}

#[test]
fn initial_losses_match_uniform_prediction() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m2l = MotionLm::new(LmKind::M2l, tiny(), &v, 1).unwrap();
    let l2m = MotionLm::new(LmKind::L2m, tiny(), &v, 1).unwrap();
    let mi: Vec<Instance> =
        (0..8).map(|_| m2l_instance(&v, &random_tokens(&mut rng, 120), QUESTIONS[0], PROMPT).unwrap()).collect();
    let li: Vec<Instance> = (0..8).map(|_| l2m_instance(&v, PROMPT, &random_tokens(&mut rng, 120)).unwrap()).collect();
    let lm = m2l.loss(&mi.iter().collect::<Vec<_>>()).unwrap();
    let ll = l2m.loss(&li.iter().collect::<Vec<_>>()).unwrap();
    let (wm, wl) = ((v.size() as f64).ln(), ((K + 1) as f64).ln());
    assert!((lm - wm).abs() < 0.15 * wm, "m2l {lm} vs {wm}");
    assert!((ll - wl).abs() < 0.15 * wl, "l2m {ll} vs {wl}");
}

#[test]
fn cached_decoding_matches_graph_logits() {
    let v = vocab();
    let model = MotionLm::new(LmKind::L2m, tiny(), &v, 2).unwrap();
    let inst = l2m_instance(&v, PROMPT, &random_tokens(&mut ChaCha8Rng::seed_from_u64(3), 40)).unwrap();
    let full = model.logits(&inst.inputs).unwrap();
    let mut cache = model.new_cache();
    for (t, &id) in inst.inputs.iter().enumerate() {
        let row = model.step(&mut cache, id).unwrap();
        let want = &full[t * model.head_size..(t + 1) * model.head_size];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-4, "position {t}: {a} vs {b}");
        }
    }
    assert_eq!(cache.len(), inst.inputs.len());
}

#[test]
fn logits_ignore_future_positions() {
    let v = vocab();
    let model = MotionLm::new(LmKind::M2l, tiny(), &v, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = m2l_instance(&v, &random_tokens(&mut rng, 30), QUESTIONS[1], PROMPT).unwrap().inputs;
    let cut = 20;
    let mut b = a.clone();
    for id in &mut b[cut..] {
        *id = v.geometry_id(rng.random_range(0..K)).unwrap();
    }
    let (la, lb) = (model.logits(&a).unwrap(), model.logits(&b).unwrap());
    let w = model.head_size;
    for (x, y) in la[..cut * w].iter().zip(&lb[..cut * w]) {
        assert!((x - y).abs() <= 1e-6);
    }
    assert_ne!(la[cut * w..], lb[cut * w..]);
}

#[test]
fn zero_temperature_is_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = GenerationParams::greedy();
    for _ in 0..50 {
        let logits: Vec<f32> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert_eq!(sample_index(&logits, |_| true, &p, &mut rng), argmax(&logits));
    }
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
}

#[test]
fn sampling_respects_restriction_and_top_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits: Vec<f32> = (0..30).map(|i| i as f32 * 0.1).collect();
    let hot = GenerationParams { temperature: 5.0, ..GenerationParams::default() };
    for _ in 0..200 {
        assert!(sample_index(&logits, |i| i % 3 == 0, &hot, &mut rng) % 3 == 0);
    }
    let top1 = GenerationParams { temperature: 2.0, top_k: 1, ..GenerationParams::default() };
    assert!((0..50).all(|_| sample_index(&logits, |_| true, &top1, &mut rng) == 29));
    let top3 = GenerationParams { temperature: 2.0, top_k: 3, ..GenerationParams::default() };
    assert!((0..200).all(|_| sample_index(&logits, |_| true, &top3, &mut rng) >= 27));
}

#[test]
fn generation_is_seeded_and_stays_in_range() {
    let v = vocab();
    let model = MotionLm::new(LmKind::L2m, tiny(), &v, 8).unwrap();
    let p = GenerationParams { temperature: 1.0, top_k: 50, max_new_tokens: 150, seed: 9 };
    let a = model.generate_tokens(&v, PROMPT, &p, 5).unwrap();
    assert_eq!(a, model.generate_tokens(&v, PROMPT, &p, 5).unwrap());
    assert!(a.len() >= 5 && a.len() <= MAX_MOTION_TOKENS);
    assert!(a.iter().all(|&t| t < K));
    let g = model.generate_tokens(&v, PROMPT, &GenerationParams::greedy(), 5).unwrap();
    assert_eq!(g, model.generate_tokens(&v, PROMPT, &GenerationParams::greedy(), 5).unwrap());
    assert!(matches!(model.generate_tokens(&v, "?!", &p, 5), Err(Error::EmptyPrompt)));
}

#[test]
fn describe_emits_only_text() {
    let v = vocab();
    let model = MotionLm::new(LmKind::M2l, tiny(), &v, 10).unwrap();
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(11), 100);
    let p = GenerationParams { temperature: 1.5, max_new_tokens: 30, ..GenerationParams::default() };
    for seed in 0..5 {
        let ids = model.describe_ids(&v, &tokens, QUESTIONS[0], &GenerationParams { seed, ..p.clone() }).unwrap();
        assert!(ids.iter().all(|&i| i >= FIRST_TEXT_ID && i < v.text_size()));
    }
    let a = model.describe(&v, &tokens, QUESTIONS[0], &GenerationParams::greedy()).unwrap();
    assert_eq!(a, model.describe(&v, &tokens, QUESTIONS[0], &GenerationParams::greedy()).unwrap());
    assert!(!a.contains('<'));
    assert!(matches!(model.describe(&v, &vec![0; 151], QUESTIONS[0], &p), Err(Error::TooLong { .. })));
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let v = vocab();
    let model = MotionLm::new(LmKind::L2m, tiny(), &v, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let insts: Vec<Instance> = (0..30).map(|_| l2m_instance(&v, PROMPT, &random_tokens(&mut rng, 130)).unwrap()).collect();
    let acc = model.teacher_forced_accuracy(&insts).unwrap();
    assert!(acc <= 3.0 / (K + 1) as f64, "{acc}");
}

#[test]
fn accuracy_counts_matching_argmax() {
    let v = vocab();
    let model = MotionLm::new(LmKind::L2m, tiny(), &v, 14).unwrap();
    let mut inst = l2m_instance(&v, PROMPT, &random_tokens(&mut ChaCha8Rng::seed_from_u64(15), 49)).unwrap();
    let logits = model.logits(&inst.inputs).unwrap();
    let masked: Vec<usize> = (0..inst.mask.len()).filter(|&i| inst.mask[i]).collect();
    assert_eq!(masked.len(), 50);
    for (n, &i) in masked.iter().enumerate() {
        let best = argmax(&logits[i * model.head_size..(i + 1) * model.head_size]);
        inst.targets[i] = if n % 2 == 0 { best } else { (best + 1) % (K + 1) };
    }
    assert_eq!(model.teacher_forced_accuracy(&[inst]).unwrap(), 0.5);
}

fn overfit_config(epochs: usize) -> LmTrainConfig {
    LmTrainConfig { lr: 3e-3, batch_size: 1, epochs, lr_floor: 0.1, seed: 16 }
}

#[test]
fn l2m_overfits_one_clip() {
    let v = vocab();
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(17), 110);
    let pairs = vec![TextMotionPair { tokens: tokens.clone(), texts: vec![PROMPT.into()], label: String::new() }];
    let mut model = MotionLm::new(LmKind::L2m, tiny(), &v, 18).unwrap();
    let mut tr = LmTrainer::new(&model, overfit_config(150)).unwrap();
    let trace = train_l2m(&mut model, &mut tr, &v, &pairs, |_, _, _| {}).unwrap();
    assert_eq!(trace.len(), 150);
    let inst = l2m_instance(&v, PROMPT, &tokens).unwrap();
    let acc = model.teacher_forced_accuracy(&[inst]).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}, final loss {}", trace.last().unwrap());
}

#[test]
fn m2l_overfits_one_clip() {
    let v = vocab();
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(19), 120);
    let pairs = vec![TextMotionPair { tokens: tokens.clone(), texts: vec![PROMPT.into()], label: String::new() }];
    let mut model = MotionLm::new(LmKind::M2l, tiny(), &v, 20).unwrap();
    let mut tr = LmTrainer::new(&model, overfit_config(150)).unwrap();
    train_m2l(&mut model, &mut tr, &v, &pairs, |_, _, _| {}).unwrap();
    let out = model.describe(&v, &tokens, QUESTIONS[2], &GenerationParams::greedy()).unwrap();
    assert_eq!(out, normalize_text(PROMPT));
}

#[test]
fn training_traces_are_seeded() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pairs: Vec<TextMotionPair> = (0..6)
        .map(|_| TextMotionPair { tokens: random_tokens(&mut rng, 60), texts: vec![PROMPT.into(), "a frowning man".into()], label: String::new() })
        .collect();
    let run = || {
        let mut model = MotionLm::new(LmKind::M2l, tiny(), &v, 22).unwrap();
        let cfg = LmTrainConfig { batch_size: 4, epochs: 2, ..LmTrainConfig::default() };
        let mut tr = LmTrainer::new(&model, cfg).unwrap();
        train_m2l(&mut model, &mut tr, &v, &pairs, |_, _, _| {}).unwrap()
    };
    let a = run();
    assert_eq!(a.len(), 4);
    assert_eq!(a, run());
}

#[test]
fn wrong_kind_is_rejected() {
    let v = vocab();
    let mut model = MotionLm::new(LmKind::M2l, tiny(), &v, 23).unwrap();
    let mut tr = LmTrainer::new(&model, LmTrainConfig::default()).unwrap();
    let pairs = vec![TextMotionPair { tokens: vec![1, 2], texts: vec!["nod".into()], label: String::new() }];
    assert!(train_l2m(&mut model, &mut tr, &v, &pairs, |_, _, _| {}).is_err());
    assert!(model.generate_tokens(&v, PROMPT, &GenerationParams::greedy(), 1).is_err());
}

#[test]
fn rebuilt_model_gives_identical_logits() {
    let v = vocab();
    let model = MotionLm::new(LmKind::L2m, tiny(), &v, 24).unwrap();
    let copy = MotionLm::from_store(LmKind::L2m, tiny(), &v, &model.store).unwrap();
    let ids = l2m_prefix(&v, PROMPT).unwrap();
    assert_eq!(model.logits(&ids).unwrap(), copy.logits(&ids).unwrap());
    let other = MotionLm::new(LmKind::M2l, tiny(), &v, 24).unwrap();
    assert!(matches!(MotionLm::from_store(LmKind::L2m, tiny(), &v, &other.store), Err(Error::MissingTensor(_))));
}
