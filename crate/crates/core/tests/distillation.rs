use attnreuse_core::checkpoint;
use attnreuse_core::distill::{
    total_loss, train, train_student, DistillConfig, LossVariant, Student, DECOMPOSITION_TOL,
};
use attnreuse_core::encoder::{Encoder, EncoderConfig};
use attnreuse_core::masking::sample_mask;
use attnreuse_core::reuse::parse_pattern;
use attnreuse_core::synth::{generate, Regime, SynthSpec};
use attnreuse_core::Rng;

fn data(seed: u64) -> SynthSpec {
    SynthSpec {
        n: 24,
        d_in: 4,
        regime: Regime::PiecewiseSegment,
        seed,
    }
}

fn teacher() -> Encoder {
    let cfg = EncoderConfig::toy(2, 8, 2, 16, 4);
    Encoder::init(&cfg, &parse_pattern("none", 2).unwrap(), &mut Rng::new(11)).unwrap()
}

fn student_config() -> EncoderConfig {
    let mut cfg = EncoderConfig::toy(2, 6, 2, 12, 4);
    cfg.teacher_width = 8;
    cfg
}

fn short_run(steps: usize) -> DistillConfig {
    let mut cfg = DistillConfig::new(2);
    cfg.steps = steps;
    cfg.batch = 2;
    cfg.seed = 5;
    cfg
}

#[test]
fn self_distillation_has_zero_unmasked_loss() {
    let t = teacher();
    let s = Student::from_teacher(&t);
    let x = generate(&data(1), 0, 1).unwrap().remove(0);
    let plan = sample_mask(24, 0.4, 5, &mut Rng::new(2)).unwrap();
    let b = total_loss(&x, &t, &s, &DistillConfig::new(2), &plan).unwrap();
    assert!(b.unmasked.iter().all(|&u| u == 0.0), "{b:?}");
    assert!(b.masked.iter().all(|&m| m > 0.0), "{b:?}");
}

#[test]
fn variants_differ_only_where_expected() {
    let t = teacher();
    let s = Student::init(
        &student_config(),
        &parse_pattern("[0, 1]", 2).unwrap(),
        &mut Rng::new(3),
    )
    .unwrap();
    let x = generate(&data(1), 0, 1).unwrap().remove(0);
    let plan = sample_mask(24, 0.4, 5, &mut Rng::new(2)).unwrap();
    let run = |v| {
        let mut cfg = DistillConfig::new(2);
        cfg.variant = v;
        total_loss(&x, &t, &s, &cfg, &plan).unwrap()
    };
    let full = run(LossVariant::Full);
    let masked_only = run(LossVariant::MaskedOnly);
    let clean = run(LossVariant::UnmaskedFromCleanInput);
    assert_eq!(full.masked, masked_only.masked);
    assert_eq!(full.masked, clean.masked);
    assert!(masked_only.unmasked.iter().all(|&u| u == 0.0));
    assert!(full.unmasked.iter().zip(&clean.unmasked).any(|(a, b)| a != b));
}

#[test]
fn training_keeps_teacher_fixed_and_decomposition_exact() {
    let t = teacher();
    let before = checkpoint::to_bytes(&t, None).unwrap();
    let out = train(
        &t,
        &student_config(),
        &parse_pattern("[0, 1]", 2).unwrap(),
        &short_run(6),
        &mut data(9),
        &mut Rng::new(4),
    )
    .unwrap();
    assert_eq!(checkpoint::to_bytes(&t, None).unwrap(), before);
    assert_eq!(out.log.len(), 6);
    for r in &out.log {
        let recombined: f64 = (0..2).map(|l| [0.1, 1.0][l] * (r.masked[l] + r.unmasked[l])).sum();
        assert!((r.total - recombined).abs() <= DECOMPOSITION_TOL, "{r:?}");
    }
}

#[test]
fn seeded_runs_are_bit_identical() {
    let t = teacher();
    let go = || {
        train(
            &t,
            &student_config(),
            &parse_pattern("none", 2).unwrap(),
            &short_run(4),
            &mut data(9),
            &mut Rng::new(4),
        )
        .unwrap()
    };
    let (a, b) = (go(), go());
    assert_eq!(a.log, b.log);
    assert_eq!(a.student.params, b.student.params);
}

#[test]
fn zero_steps_leave_the_student_untouched() {
    let t = teacher();
    let s = Student::init(&student_config(), &parse_pattern("none", 2).unwrap(), &mut Rng::new(8)).unwrap();
    let out = train_student(&t, s.clone(), &short_run(0), &mut data(1)).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.student.params, s.params);
}

#[test]
fn checkpoint_file_round_trip() {
    let s = Student::init(
        &student_config(),
        &parse_pattern("[0, 1]", 2).unwrap(),
        &mut Rng::new(8),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    checkpoint::save_student(&path, &s).unwrap();
    let back = checkpoint::load_student(&path).unwrap();
    assert_eq!(back.params, s.params);
    assert_eq!(back.pattern, s.pattern);
    let again = dir.path().join("again.ckpt");
    checkpoint::save_student(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
