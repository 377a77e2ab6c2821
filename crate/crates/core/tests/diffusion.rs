use iclip_core::corpus::{generate_corpus, render, SceneSpec, Split, IMG};
use iclip_core::diffusion::{fd, rd, rd_graph, train_codec, CodecConfig, LatentState, NoiseSchedule};
use iclip_numerics::{fd_check, Graph, Objective, ParamMap, Real, Result, RngStream, Tensor, Var};

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

#[test]
fn fd_at_zero_is_identity() {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(1, "t");
    let l = randn(&mut rng, &[8, 8, 4]);
    let n = randn(&mut rng, &[8, 8, 4]);
    assert_eq!(fd(&s, &l, &n, 0).unwrap().latent, l);
    assert!(fd(&s, &l, &n, 51).is_err());
}

#[test]
fn fd_preserves_variance_at_every_step() {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(2, "var");
    let draws = 1000;
    for k in 0..=50 {
        let l = randn(&mut rng, &[draws]);
        let n = randn(&mut rng, &[draws]);
        let x = fd(&s, &l, &n, k).unwrap().latent;
        let m = x.data().iter().map(|v| *v as f64).sum::<f64>() / draws as f64;
        let var = x.data().iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
        // The sample variance of 1000 unit normals has sd ~0.045.
        assert!((var - 1.0).abs() <= 0.15, "k={k} var={var}");
    }
}

#[test]
fn fd_variance_pooled_within_five_percent() {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(3, "var-pooled");
    for k in [1, 10, 25, 40, 50] {
        let mut acc = 0.0;
        let mut n_el = 0usize;
        for _ in 0..1000 {
            let l = randn(&mut rng, &[8, 8, 4]);
            let n = randn(&mut rng, &[8, 8, 4]);
            let x = fd(&s, &l, &n, k).unwrap().latent;
            acc += x.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
            n_el += x.numel();
        }
        let var = acc / n_el as f64;
        assert!((var - 1.0).abs() <= 0.05, "k={k} var={var}");
    }
}

#[test]
fn fully_noised_latent_forgets_the_signal() {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(4, "corr");
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let l = randn(&mut rng, &[1]);
        let n = randn(&mut rng, &[1]);
        let x = fd(&s, &l, &n, 50).unwrap().latent.data()[0] as f64;
        let y = l.data()[0] as f64;
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
    }
    let corr = sxy / (sxx * syy).sqrt();
    assert!(corr.abs() < 0.05, "corr {corr}");
}

fn telescope_error<F: Real>(seed: u64) -> f64 {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(seed, "tele");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let l: Tensor<F> = randn(&mut rng, &[8, 8, 4]).cast();
        let n: Tensor<F> = randn(&mut rng, &[8, 8, 4]).cast();
        for start in 1..=50 {
            let mut st = fd(&s, &l, &n, start).unwrap();
            while st.k > 0 {
                st = rd(&s, &st, &n).unwrap();
            }
            worst = worst.max(st.latent.max_abs_diff(&l).to_f64().unwrap());
        }
    }
    worst
}

#[test]
fn perfect_noise_prediction_telescopes_to_the_clean_latent() {
    let err = telescope_error::<f64>(5);
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn single_precision_telescoping_stays_close() {
    // Rounding in each stored f32 state is amplified by 1/sqrt(alpha_bar)
    // on the way back, so the bound is looser than in double precision.
    let err = telescope_error::<f32>(5);
    assert!(err <= 5e-4, "{err}");
}

#[test]
fn rd_inverts_one_fd_step() {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(6, "step");
    let l = randn(&mut rng, &[8, 8, 4]);
    let n = randn(&mut rng, &[8, 8, 4]);
    for k in 1..=50 {
        let back = rd(&s, &fd(&s, &l, &n, k).unwrap(), &n).unwrap();
        let want = fd(&s, &l, &n, k - 1).unwrap();
        assert_eq!(back.k, k - 1);
        assert!(back.latent.max_abs_diff(&want.latent) <= 1e-5, "k={k}");
    }
}

#[test]
fn graph_rd_matches_tensor_rd() {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(7, "graph");
    let x = randn(&mut rng, &[3, 4]);
    let e = randn(&mut rng, &[3, 4]);
    let ks = [1usize, 17, 50];
    let mut g: Graph<f32> = Graph::new();
    let xv = g.constant(x.clone());
    let ev = g.constant(e.clone());
    let out = rd_graph(&mut g, &s, xv, ev, &ks).unwrap();
    for (r, &k) in ks.iter().enumerate() {
        let row = |t: &Tensor| Tensor::new(vec![4], t.data()[r * 4..r * 4 + 4].to_vec()).unwrap();
        let st = LatentState { latent: row(&x), k, noise: None };
        let want = rd(&s, &st, &row(&e)).unwrap().latent;
        assert!(row(g.value(out)).max_abs_diff(&want) < 1e-4, "k={k}");
    }
    let mut g: Graph<f32> = Graph::new();
    let xv = g.constant(x);
    let ev = g.constant(e);
    assert!(rd_graph(&mut g, &s, xv, ev, &[0, 1, 2]).is_err());
}

struct RdObjective {
    schedule: NoiseSchedule,
    ks: Vec<usize>,
    proj: Vec<f32>,
}

impl Objective for RdObjective {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let x = g.param("latent")?;
        let e = g.param("noise")?;
        let y = rd_graph(g, &self.schedule, x, e, &self.ks)?;
        let y2 = g.mul(y, y)?;
        let r = g.constant(Tensor::new(vec![self.ks.len(), 6], self.proj.clone())?.cast());
        let z = g.mul(y2, r)?;
        g.sum(z)
    }
}

#[test]
fn rd_gradients_pass_finite_differences() {
    let schedule = NoiseSchedule::linear(50).unwrap();
    for seed in 0..20 {
        let mut rng = RngStream::new(seed, "rd-fd");
        let ks: Vec<usize> = (0..3).map(|_| 1 + rng.below(50)).collect();
        let mut p = ParamMap::new();
        p.insert("latent".into(), randn(&mut rng, &[3, 6]));
        p.insert("noise".into(), randn(&mut rng, &[3, 6]));
        let obj = RdObjective {
            schedule: schedule.clone(),
            ks,
            proj: (0..18).map(|_| rng.normal() as f32).collect(),
        };
        let rep = fd_check(&obj, &p, 1e-5, 64, seed).unwrap();
        assert!(rep.max() <= 1e-4, "seed {seed}: {:?}", rep.worst());
    }
}

#[test]
fn codec_on_constant_images_reconstructs_almost_exactly() {
    let mut corpus = generate_corpus(1, 40, 0.0).unwrap();
    let flat = render(&SceneSpec { background: 3, shapes: vec![] });
    for s in &mut corpus.samples {
        s.original = flat.clone();
        s.edited = flat.clone();
    }
    let cfg = CodecConfig { seed: 1, steps: 300, batch: 4, lr: 3e-3, hidden: 32 };
    let (codec, rep) = train_codec(&corpus, Split::new(40, 10).unwrap(), &cfg).unwrap();
    assert!(rep.holdout_mse < 1e-4, "{rep:?}");
    let a = codec.encode(&[&flat]).unwrap();
    let b = codec.encode(&[&flat]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].shape(), &[8, 8, 4]);
    assert_eq!(codec.decode(&[&a[0]]).unwrap()[0].shape(), &[IMG, IMG, 3]);
}
