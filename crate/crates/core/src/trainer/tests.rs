use super::*;
use crate::layout::strip_queries;
use crate::storyworld::CorpusSizes;

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig { seed: 3, ..Default::default() };
    c.corpus = CorpusSizes { train: 12, val: 4, test: 4 };
    c.planner.d_model = 8;
    c.planner.n_heads = 2;
    c.planner.d_ff = 8;
    c.planner.n_layers = 1;
    c.generator.width = 8;
    c.generator.depth = 1;
    c.generator.d_ff = 8;
    for s in [&mut c.pretrain, &mut c.stage1, &mut c.stage2, &mut c.stage3] {
        s.steps = 4;
        s.batch = 2;
    }
    c.eval.stories = 2;
    c.eval.n_steps = 2;
    c
}

fn trained_through(stage: u8) -> (Trainer, Checkpoint) {
    let t = Trainer::new(&tiny_config()).unwrap();
    let mut ck = t.init_checkpoint();
    for s in 1..=stage {
        assert!(t.run_stage(&mut ck, s, PhaseOptions::default()).unwrap());
    }
    (t, ck)
}

#[test]
fn zero_steps_leave_parameters_at_init() {
    let mut cfg = tiny_config();
    cfg.stage1.steps = 0;
    cfg.pretrain.steps = 0;
    let t = Trainer::new(&cfg).unwrap();
    let init = t.init_checkpoint();
    let mut ck = init.clone();
    t.run_stage(&mut ck, 1, PhaseOptions::default()).unwrap();
    assert_eq!(ck.params.checksum(""), init.params.checksum(""));
    assert!(ck.has(Phase::Stage1));
}

#[test]
fn runs_are_deterministic() {
    let (_, a) = trained_through(3);
    let (_, b) = trained_through(3);
    assert_eq!(a.params.checksum(""), b.params.checksum(""));
    assert_eq!(a.losses, b.losses);
}

#[test]
fn missing_prerequisites_are_named() {
    let t = Trainer::new(&tiny_config()).unwrap();
    let mut ck = t.init_checkpoint();
    let err = t.run_stage(&mut ck, 2, PhaseOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite(ref m) if m.contains("stage1")), "{err}");
    let err = t.run_stage(&mut ck, 3, PhaseOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite(_)));
}

#[test]
fn interrupted_phase_resumes_exactly() {
    let (t, base) = trained_through(1);
    let mut whole = base.clone();
    t.run_phase(&mut whole, Phase::Stage2, PhaseOptions::default()).unwrap();

    let mut part = base;
    let done = t
        .run_phase(&mut part, Phase::Stage2, PhaseOptions { stop_after: Some(2), ..Default::default() })
        .unwrap();
    assert!(!done);
    let bytes = part.to_bytes().unwrap();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(t.run_phase(&mut resumed, Phase::Stage2, PhaseOptions::default()).unwrap());
    assert_eq!(resumed.losses, whole.losses);
    assert_eq!(resumed.params.checksum(""), whole.params.checksum(""));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (t, mut ck) = trained_through(2);
    t.run_phase(&mut ck, Phase::Stage3, PhaseOptions { stop_after: Some(1), ..Default::default() })
        .unwrap();
    let a = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&a).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), a);
    assert!(Checkpoint::from_bytes(&a[..a.len() - 1]).is_err());
    let mut bad = a.clone();
    bad[0] = 9;
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn later_stages_keep_text_outputs_bitwise() {
    let (t, s1) = trained_through(1);
    let (_, s3) = trained_through(3);
    assert_eq!(s1.params.checksum("planner."), s3.params.checksum("planner."));
    for story in &t.corpus.val {
        let layout = strip_queries(&t.planner.story_layout(story).unwrap());
        let (a, _) = t.planner.forward(&s1.params, &layout, &story.input).unwrap();
        let (b, _) = t.planner.forward(&s3.params, &layout, &story.input).unwrap();
        assert_eq!(a, b);
    }
    assert_ne!(s1.params.checksum("gen."), s3.params.checksum("gen."));
    assert_ne!(s1.params.checksum("queries."), s3.params.checksum("queries."));
}

#[test]
fn tampered_planner_is_rejected() {
    let (t, mut ck) = trained_through(1);
    ck.params.value_mut("planner.lm_head").unwrap().data_mut()[0] += 1.0;
    let err = t.run_phase(&mut ck, Phase::Stage2, PhaseOptions::default()).unwrap_err();
    assert!(matches!(err, Error::FrozenChanged(_)));
}

#[test]
fn rollout_shapes_and_shared_first_frame() {
    let (t, ck) = trained_through(3);
    let story = &t.corpus.test[0];
    let one = t.rollout(&ck, &story.input, 1, MemoryMode::SelfRollout, None, 5).unwrap();
    assert!(one.frames.len() <= 1);
    let a = t.rollout(&ck, &story.input, 4, MemoryMode::SelfRollout, Some(story), 5).unwrap();
    let b = t.rollout(&ck, &story.input, 4, MemoryMode::TeacherForced, Some(story), 5).unwrap();
    if let (Some(x), Some(y)) = (a.frames.first(), b.frames.first()) {
        assert_eq!(x, y);
    }
    assert!(t.rollout(&ck, &story.input, 2, MemoryMode::TeacherForced, None, 5).is_err());
}

#[test]
fn config_round_trips_through_checkpoint() {
    let (t, ck) = trained_through(1);
    assert_eq!(ck.config, t.config);
    assert_eq!(ck.vocab, t.world.vocab());
    assert_eq!(ck.vocab.len(), t.config.planner.vocab_size);
}
