use iclip_core::backbone::{BackboneSpec, FeatureBackbone, FeatureStack, InputMode, StackVars};
use iclip_core::corpus::{generate_corpus, instruction_space, Split, Tokens};
use iclip_core::diffusion::{train_codec, CodecConfig, NoiseSchedule};
use iclip_core::encoders::{
    change_graph, contrastive_graph, contrastive_loss, in_batch_top1, init_iclip, text_graph, train_iclip, ChangeInput,
    IClip, IClipConfig, LOG_TAU, TAU_MAX, TAU_MIN,
};
use iclip_core::nn::Arch;
use iclip_numerics::{fd_check, Graph, Objective, ParamMap, Real, Result, RngStream, Tensor, Var};

const TINY: Arch = Arch { width: 8, layers: 2 };

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

/// Straight loops over the definition, double precision throughout.
fn oracle(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let n = v.len();
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb + 1e-8)
    };
    let s: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cos(&v[i], &t[j]) / tau).collect()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let row = (0..n).map(|j| s[i][j].exp()).sum::<f64>();
        let col = (0..n).map(|j| s[j][i].exp()).sum::<f64>();
        total += (s[i][i].exp() / row).ln() + (s[i][i].exp() / col).ln();
    }
    -total / n as f64
}

#[test]
fn contrastive_degenerate_batches() {
    let mut rng = RngStream::new(1, "c");
    let a = randn(&mut rng, &[16]);
    let b = randn(&mut rng, &[16]);
    assert!(contrastive_loss(&[a.clone()], &[b.clone()], 0.07).unwrap().abs() <= 1e-6);
    for n in [2usize, 4, 7] {
        let l = contrastive_loss(&vec![a.clone(); n], &vec![b.clone(); n], 0.07).unwrap();
        assert!((l - 2.0 * (n as f64).ln()).abs() <= 1e-6, "n={n}: {l}");
    }
    assert!((contrastive_loss(&vec![a.clone(); 4], &vec![b; 4], 0.07).unwrap() - 2.772588722239781).abs() < 1e-6);
    assert!(contrastive_loss(&[], &[], 0.07).is_err());
    assert!(contrastive_loss(&[a.clone()], &[a.clone(), a], 0.07).is_err());
}

#[test]
fn contrastive_matches_double_precision_oracle() {
    for seed in 0..20 {
        let mut rng = RngStream::new(seed, "c-oracle");
        let v: Vec<Tensor> = (0..8).map(|_| randn(&mut rng, &[16])).collect();
        let t: Vec<Tensor> = (0..8).map(|_| randn(&mut rng, &[16])).collect();
        let to64 = |xs: &[Tensor]| xs.iter().map(|x| x.data().iter().map(|v| *v as f64).collect()).collect::<Vec<Vec<f64>>>();
        let want = oracle(&to64(&v), &to64(&t), 0.07);
        let got = contrastive_loss(&v, &t, 0.07).unwrap();
        assert!((got - want).abs() <= 1e-6, "seed {seed}: {got} vs {want}");
        assert!(got >= 0.0);
    }
}

fn tiny_ld(seed: u64) -> FeatureBackbone {
    let spec = BackboneSpec { mode: InputMode::Latent, arch: TINY, t_max: 50 };
    FeatureBackbone::new(spec, spec.init(seed)).unwrap()
}

fn tiny_teacher(seed: u64) -> FeatureBackbone {
    let spec = BackboneSpec { mode: InputMode::Image, arch: TINY, t_max: 0 };
    FeatureBackbone::new(spec, spec.init(seed)).unwrap()
}

#[test]
fn identical_inputs_collapse_to_one_embedding() {
    let mut rng = RngStream::new(2, "collapse");
    let ld = IClip::new(init_iclip(TINY, 3), tiny_ld(4)).unwrap();
    let xs: Vec<Tensor> = (0..5).map(|_| randn(&mut rng, &[8, 8, 4])).collect();
    let o: Vec<ChangeInput> = xs.iter().enumerate().map(|(i, x)| ChangeInput::Latent(x, i * 10)).collect();
    let z = ld.encode_change(&o, &o).unwrap();
    assert!(z.windows(2).all(|w| w[0] == w[1]));

    let img = IClip::new(init_iclip(TINY, 3), tiny_teacher(5)).unwrap();
    let ims: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[32, 32, 3], |_| rng.uniform() as f32)).collect();
    let o: Vec<ChangeInput> = ims.iter().map(ChangeInput::Image).collect();
    let zi = img.encode_change(&o, &o).unwrap();
    assert!(zi.windows(2).all(|w| w[0] == w[1]));
    // Same trunk, different backbone, still the same constant: the backbone
    // output only enters through differences.
    assert_eq!(zi[0], z[0]);

    // Different inputs do move the embedding.
    let e: Vec<ChangeInput> = xs.iter().rev().map(|x| ChangeInput::Latent(x, 0)).collect();
    let o: Vec<ChangeInput> = xs.iter().map(|x| ChangeInput::Latent(x, 0)).collect();
    assert_ne!(ld.encode_change(&o, &e).unwrap()[0], z[0]);
}

#[test]
fn mixed_modes_are_rejected() {
    let mut rng = RngStream::new(6, "mixed");
    let ld = IClip::new(init_iclip(TINY, 3), tiny_ld(4)).unwrap();
    let lat = randn(&mut rng, &[8, 8, 4]);
    let im = Tensor::zeros(&[32, 32, 3]);
    let err = ld.encode_change(&[ChangeInput::Latent(&lat, 0)], &[ChangeInput::Image(&im)]);
    assert!(err.is_err());
}

#[test]
fn one_backbone_serves_both_images() {
    let mut rng = RngStream::new(7, "share");
    let x = randn(&mut rng, &[8, 8, 4]);
    let y = randn(&mut rng, &[8, 8, 4]);
    let base = IClip::new(init_iclip(TINY, 3), tiny_ld(4)).unwrap();
    let mut p = base.backbone.params().clone();
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v *= 1.5;
        }
    }
    let moved = IClip::new(init_iclip(TINY, 3), FeatureBackbone::new(base.backbone.spec, p).unwrap()).unwrap();
    let same = [ChangeInput::Latent(&x, 3)];
    // Perturbing the single weight set moves both paths together.
    assert_eq!(base.encode_change(&same, &same).unwrap(), moved.encode_change(&same, &same).unwrap());
    let diff = [ChangeInput::Latent(&y, 3)];
    assert_ne!(base.encode_change(&same, &diff).unwrap(), moved.encode_change(&same, &diff).unwrap());
}

#[test]
fn retrieval_argmax_ignores_embedding_scale() {
    let mut rng = RngStream::new(8, "scale");
    let space = instruction_space();
    let tokens: Vec<Tokens> = (0..10).map(|i| space[i * 3]).collect();
    let v: Vec<Tensor> = (0..10).map(|_| randn(&mut rng, &[16])).collect();
    let t: Vec<Tensor> = (0..10).map(|_| randn(&mut rng, &[16])).collect();
    let base = in_batch_top1(&v, &t, &tokens);
    for c in [1e-3f32, 0.5, 7.0, 1e3] {
        let vs: Vec<Tensor> = v.iter().map(|x| x.map(|a| a * c)).collect();
        let ts: Vec<Tensor> = t.iter().map(|x| x.map(|a| a * c * 2.0)).collect();
        assert_eq!(in_batch_top1(&vs, &ts, &tokens), base);
    }
    assert_eq!(in_batch_top1(&t, &t, &tokens), 1.0);
}

struct IClipObjective {
    original: Vec<FeatureStack>,
    edited: Vec<FeatureStack>,
    tokens: Vec<Tokens>,
}

impl Objective for IClipObjective {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let o = StackVars::constant(g, &self.original.iter().collect::<Vec<_>>());
        let e = StackVars::constant(g, &self.edited.iter().collect::<Vec<_>>());
        let zv = change_graph(g, &o, &e)?;
        let zt = text_graph(g, &self.tokens)?;
        let lt = g.param(LOG_TAU)?;
        contrastive_graph(g, zv, zt, lt)
    }
}

fn random_stack(rng: &mut RngStream) -> FeatureStack {
    FeatureStack {
        final_feature: randn(rng, &[TINY.width]),
        intermediates: (0..TINY.layers).map(|_| randn(rng, &[16, TINY.width])).collect(),
    }
}

#[test]
fn trunk_text_and_temperature_gradients_pass_finite_differences() {
    let space = instruction_space();
    for seed in 0..5 {
        let mut rng = RngStream::new(seed, "iclip-fd");
        let params: ParamMap = init_iclip(TINY, seed);
        let obj = IClipObjective {
            original: (0..4).map(|_| random_stack(&mut rng)).collect(),
            edited: (0..4).map(|_| random_stack(&mut rng)).collect(),
            tokens: (0..4).map(|_| space[rng.below(space.len())]).collect(),
        };
        let rep = fd_check(&obj, &params, 1e-4, 6, seed).unwrap();
        assert!(rep.max() <= 1e-4, "seed {seed}: {:?}", rep.worst());
        assert!(rep.per_param.contains_key(LOG_TAU));
        assert!(rep.per_param.contains_key("vis.block1.qkv.w"));
        assert!(rep.per_param.contains_key("txt.tok"));
    }
}

#[test]
fn small_training_run_learns_and_respects_the_temperature_clamp() {
    let corpus = generate_corpus(9, 200, 0.3).unwrap();
    let split = Split::new(200, 64).unwrap();
    let (codec, _) = train_codec(&corpus, split, &CodecConfig { seed: 9, steps: 200, batch: 8, lr: 3e-3, hidden: 32 }).unwrap();
    let schedule = NoiseSchedule::linear(50).unwrap();
    let ld = tiny_ld(9);
    let cfg = IClipConfig { seed: 9, steps: 120, batch: 16, lr: 3e-3 };
    let (iclip, rep) = train_iclip(&ld, &codec, &schedule, &corpus, split, &cfg).unwrap();
    assert!((TAU_MIN - 1e-6..=TAU_MAX + 1e-6).contains(&rep.tau), "{}", rep.tau);
    let head: f64 = rep.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = rep.losses[rep.losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
    // Chance for in-batch retrieval is about 1/16 (duplicates raise it a bit).
    assert!(rep.init_top1 < 0.35, "{rep:?}");

    let s = &corpus.samples[150];
    let lat = codec.encode(&[&s.original, &s.edited]).unwrap();
    let a = iclip.score(&[&lat[0]], &[&lat[1]], &[s.instruction]).unwrap();
    let b = iclip.score(&[&lat[0]], &[&lat[1]], &[s.instruction]).unwrap();
    assert_eq!(a, b);
    assert!((-1.0..=1.0).contains(&a[0]));
}
