use iclip_core::backbone::{
    lddino_loss, train_ld_student, train_teacher, Curriculum, FeatureStack, LdConfig, TeacherConfig,
};
use iclip_core::corpus::{generate_corpus, Split};
use iclip_core::diffusion::{train_codec, CodecConfig, NoiseSchedule};
use iclip_core::nn::Arch;
use iclip_numerics::{encode_checkpoint, RngStream, Tensor};

fn unit(i: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[n], |j| if j == i { 1.0 } else { 0.0 })
}

fn stack_of(final_feature: Tensor, inter: &[Tensor]) -> FeatureStack {
    FeatureStack {
        final_feature,
        intermediates: inter.to_vec(),
    }
}

fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

#[test]
fn distillation_loss_at_constructed_configurations() {
    let mut rng = RngStream::new(1, "ld-loss");
    let inter: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[16, 8])).collect();
    let f = random(&mut rng, &[8]);
    let same = stack_of(f.clone(), &inter);
    assert!(lddino_loss(&same, &same).unwrap().abs() <= 1e-6);

    let a = stack_of(unit(0, 8), &inter);
    let b = stack_of(unit(1, 8), &inter);
    assert!((lddino_loss(&a, &b).unwrap() - 1.0).abs() <= 1e-6);

    // Intermediates orthogonal: disjoint supports in every layer.
    let left: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[16, 8], |j| if j % 2 == 0 { 1.0 } else { 0.0 })).collect();
    let right: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[16, 8], |j| if j % 2 == 1 { 1.0 } else { 0.0 })).collect();
    let a = stack_of(unit(0, 8), &left);
    let b = stack_of(unit(1, 8), &right);
    assert!((lddino_loss(&a, &b).unwrap() - 2.0).abs() <= 1e-6);
}

#[test]
fn distillation_loss_is_order_sensitive_and_checks_depth() {
    let mut rng = RngStream::new(2, "ld-perm");
    let inter: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[16, 8])).collect();
    let f = random(&mut rng, &[8]);
    let teacher = stack_of(f.clone(), &inter);
    let mut permuted = inter.clone();
    permuted.swap(0, 2);
    let student = stack_of(f.clone(), &permuted);
    assert!(lddino_loss(&student, &teacher).unwrap() > 1e-3);
    let short = stack_of(f, &inter[..3]);
    assert!(lddino_loss(&short, &teacher).is_err());
}

#[test]
fn distillation_loss_bounds() {
    let mut rng = RngStream::new(3, "ld-bounds");
    for _ in 0..50 {
        let a = stack_of(random(&mut rng, &[8]), &(0..4).map(|_| random(&mut rng, &[16, 8])).collect::<Vec<_>>());
        let b = stack_of(random(&mut rng, &[8]), &(0..4).map(|_| random(&mut rng, &[16, 8])).collect::<Vec<_>>());
        let l = lddino_loss(&a, &b).unwrap();
        assert!((0.0..=4.0).contains(&l), "{l}");
    }
}

/// Independent restatement of the three-phase curriculum.
fn expected_bound(step: usize, steps: usize, t: usize) -> usize {
    let warm = steps / 10;
    let ramp = steps - 2 * warm;
    if step < warm {
        0
    } else if step >= warm + ramp {
        t
    } else {
        ((step - warm + 1) as f64 / ramp as f64 * t as f64 + 1e-9).floor() as usize
    }
}

#[test]
fn curriculum_matches_three_phase_profile() {
    for steps in [10, 100, 137, 1500] {
        let c = Curriculum { steps, t_max: 50 };
        let mut rng = RngStream::new(4, "curr");
        for s in 0..steps {
            assert_eq!(c.upper_bound(s), expected_bound(s, steps, 50), "steps {steps} step {s}");
            assert!(c.sample(s, &mut rng) <= c.upper_bound(s));
        }
        assert_eq!(c.upper_bound(steps - 1), 50);
    }
}

#[test]
fn small_teacher_and_student_train() {
    let corpus = generate_corpus(7, 160, 0.0).unwrap();
    let split = Split::new(160, 40).unwrap();
    let arch = Arch { width: 32, layers: 2 };
    let tcfg = TeacherConfig { seed: 7, steps: 150, batch: 16, lr: 2e-3, arch };
    let (teacher, rep) = train_teacher(&corpus, split, &tcfg).unwrap();
    // Chance for the background head is 1/8.
    assert!(rep.head_accuracy[0] > 0.3, "{rep:?}");
    assert_eq!(rep.head_accuracy.len(), 4);
    assert!(teacher.params().names().all(|n| n.starts_with("teacher.")));

    let imgs = [&corpus.samples[0].original, &corpus.samples[1].edited];
    assert_eq!(teacher.features(&imgs, None).unwrap(), teacher.features(&imgs, None).unwrap());

    let (codec, _) = train_codec(&corpus, split, &CodecConfig { seed: 7, steps: 200, batch: 8, lr: 3e-3, hidden: 32 }).unwrap();
    let schedule = NoiseSchedule::linear(50).unwrap();
    let before = encode_checkpoint(teacher.params());
    let lcfg = LdConfig { seed: 7, steps: 150, batch: 16, lr: 2e-3 };
    let (student, lrep) = train_ld_student(&teacher, &codec, &schedule, &corpus, split, &lcfg).unwrap();
    assert_eq!(encode_checkpoint(teacher.params()), before);
    assert!(student.params().names().all(|n| n.starts_with("ld.")));
    assert_eq!(lrep.trace.len(), 150);
    for (s, ub, k, _) in &lrep.trace {
        assert_eq!(*ub, expected_bound(*s, 150, 50));
        assert!(k <= ub);
    }
    assert!(lrep.holdout_loss_k0 < lrep.init_loss_k0, "{lrep:?}");
    assert!(teacher.features(&imgs, Some(&[0, 0])).is_err());
}
