use iclip_core::backbone::{BackboneSpec, FeatureBackbone, InputMode};
use iclip_core::corpus::{instruction_space, Tokens, BOS, EOS, PAD, VOCAB_SIZE};
use iclip_core::decoder::{
    argmax_allowed, decap_loss, decap_targets, decoder_logits, init_decoder, project_visual, train_decoder,
    DecoderConfig, SupportSet, STEPS,
};
use iclip_core::encoders::{init_iclip, IClip};
use iclip_core::nn::Arch;
use iclip_numerics::{fd_check, Graph, Objective, Real, Result, RngStream, Tensor, Var};

const TINY: Arch = Arch { width: 8, layers: 2 };

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

fn oracle(logits: &Tensor, target: &Tokens) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for j in 0..STEPS {
        let t = target.0[j + 1];
        if t == PAD {
            continue;
        }
        let row: Vec<f64> = logits.data()[j * VOCAB_SIZE..(j + 1) * VOCAB_SIZE].iter().map(|v| *v as f64).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[t];
        n += 1;
    }
    total / n as f64
}

#[test]
fn decap_loss_reference_values() {
    let space = instruction_space();
    let target = space[5];
    let uniform = Tensor::zeros(&[STEPS, VOCAB_SIZE]);
    assert!((decap_loss(&uniform, &target).unwrap() - (48f64).ln()).abs() <= 1e-6);
    assert!((decap_loss(&uniform, &target).unwrap() - 3.871201010907891).abs() <= 1e-6);

    let sharp = Tensor::from_fn(&[STEPS, VOCAB_SIZE], |i| {
        let (j, c) = (i / VOCAB_SIZE, i % VOCAB_SIZE);
        if target.0[j + 1] == c { 60.0 } else { 0.0 }
    });
    assert!(decap_loss(&sharp, &target).unwrap() < 1e-20);

    for seed in 0..20 {
        let mut rng = RngStream::new(seed, "decap");
        let logits = randn(&mut rng, &[STEPS, VOCAB_SIZE]).map(|v| v * 3.0);
        let t = space[rng.below(space.len())];
        assert!((decap_loss(&logits, &t).unwrap() - oracle(&logits, &t)).abs() <= 1e-6);
    }
    assert!(decap_loss(&Tensor::zeros(&[STEPS + 1, VOCAB_SIZE]), &target).is_err());
}

fn unit_support(rows: Vec<Tensor>) -> SupportSet {
    let space = instruction_space();
    let tokens = (0..rows.len()).map(|i| space[i]).collect();
    SupportSet { rows, tokens }
}

#[test]
fn projection_identities() {
    let e = |i: usize| Tensor::from_fn(&[5], |j| if i == j { 1.0 } else { 0.0 });
    let support = unit_support((0..5).map(e).collect());
    // A zero query is equally similar to every row.
    let w = support.weights(&Tensor::zeros(&[5]), 1.0).unwrap();
    assert!(w.iter().all(|x| (x - 0.2).abs() <= 1e-12));
    let p = project_visual(&Tensor::zeros(&[5]), &support, 1.0).unwrap();
    assert!(p.data().iter().all(|x| (x - 1.0 / 5f32.sqrt()).abs() <= 1e-6));

    let mut rng = RngStream::new(1, "proj");
    let rows: Vec<Tensor> = (0..12)
        .map(|_| {
            let r = randn(&mut rng, &[16]);
            let n = r.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            r.map(|v| v / n)
        })
        .collect();
    let support = unit_support(rows.clone());
    for _ in 0..50 {
        let z = randn(&mut rng, &[16]);
        let w = support.weights(&z, 1.0).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!(w.iter().all(|x| *x >= 0.0));
        let p = project_visual(&z, &support, 1.0).unwrap();
        let n = p.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-6);

        // Retrieval limit.
        let best = (0..12)
            .max_by(|&a, &b| {
                let ca = iclip_numerics::cosine(rows[a].data(), z.data());
                let cb = iclip_numerics::cosine(rows[b].data(), z.data());
                ca.total_cmp(&cb)
            })
            .unwrap();
        let p = project_visual(&z, &support, 1e-6).unwrap();
        assert!(p.max_abs_diff(&rows[best]) <= 1e-5);
    }
    assert!(support.weights(&Tensor::zeros(&[16]), 0.0).is_err());
    assert!(project_visual(&Tensor::zeros(&[16]), &SupportSet { rows: vec![], tokens: vec![] }, 1.0).is_err());
}

#[test]
fn greedy_tie_rule_and_masking() {
    let mut row = vec![0.0f32; VOCAB_SIZE];
    row[PAD] = 9.0;
    row[BOS] = 9.0;
    row[7] = 5.0;
    row[4] = 5.0;
    assert_eq!(argmax_allowed(&row), 4);
    assert_eq!(argmax_allowed(&vec![0.0; VOCAB_SIZE]), EOS);
}

fn tiny_iclip(seed: u64) -> IClip {
    let spec = BackboneSpec { mode: InputMode::Latent, arch: TINY, t_max: 50 };
    IClip::new(init_iclip(TINY, seed), FeatureBackbone::new(spec, spec.init(seed)).unwrap()).unwrap()
}

struct DecObjective {
    prefix: Tensor,
    tokens: Vec<Tokens>,
}

impl Objective for DecObjective {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let p = g.constant(self.prefix.cast());
        let logits = decoder_logits(g, p, &self.tokens)?;
        let (t, w) = decap_targets::<F>(&self.tokens);
        g.cross_entropy(logits, &t, &w)
    }
}

#[test]
fn decoder_gradients_pass_finite_differences() {
    let space = instruction_space();
    for seed in 0..5 {
        let mut rng = RngStream::new(seed, "dec-fd");
        let obj = DecObjective {
            prefix: randn(&mut rng, &[3, 8]),
            tokens: (0..3).map(|_| space[rng.below(space.len())]).collect(),
        };
        let rep = fd_check(&obj, &init_decoder(TINY, 8, seed), 1e-4, 6, seed).unwrap();
        assert!(rep.max() <= 1e-4, "seed {seed}: {:?}", rep.worst());
    }
}

#[test]
fn decoder_memorizes_instructions() {
    let iclip = tiny_iclip(3);
    let space = instruction_space();
    let cfg = DecoderConfig {
        seed: 3,
        steps: 300,
        batch: 32,
        lr: 3e-3,
        prefix_noise: 0.0,
        arch: Arch { width: 32, layers: 2 },
    };
    let (dec, support, rep) = train_decoder(&iclip, &space[..24], &cfg).unwrap();
    assert_eq!(support.len(), 24);
    assert!(support.rows.iter().all(|r| {
        let n = r.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        (n - 1.0).abs() <= 1e-6
    }));
    assert!(rep.exact_match >= 0.9, "{rep:?}");
    assert_eq!(SupportSet::from_params(&support.to_params()).unwrap(), support);

    let mut rng = RngStream::new(4, "dec-rand");
    let prefixes: Vec<Tensor> = (0..40).map(|_| randn(&mut rng, &[8])).collect();
    let a = dec.decode_greedy(&prefixes).unwrap();
    assert_eq!(a, dec.decode_greedy(&prefixes).unwrap());
    for t in &a {
        assert!(t.is_well_formed(), "{:?}", t.0);
        let eos = t.0.iter().position(|&x| x == EOS).unwrap();
        assert!(t.0[..eos].iter().all(|&x| x != PAD));
    }
}
