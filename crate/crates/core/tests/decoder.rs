use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgqn::autograd::{Graph, Tensor, Var};
use tgqn::params::{init_rng, ParamBuilder, ParamStore, Session};
use tgqn::seq_decoder::{
    decode_sequence, init_state, render_step, reparameterize, Decoder, DecoderConfig, LatentNodes,
    Mode, NoiseStream, StateNodes,
};
use tgqn::TgqnError;

const B: usize = 2;

fn micro(cores: usize) -> (Decoder, ParamStore<f64>) {
    let cfg = DecoderConfig {
        image_size: 8,
        d: 16,
        cores,
        z_channels: 3,
        core_channels: 4,
        canvas_channels: 4,
        down_channels: 2,
        kernel: 3,
    };
    let mut store = ParamStore::new();
    let mut rng = init_rng(11);
    let dec = Decoder::new(cfg, &mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
    fill_latent_heads(&mut store, &mut rng);
    (dec, store)
}

/// Prior and posterior heads start at zero; give them values so the two
/// distributions differ.
fn fill_latent_heads(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id);
        if (name.contains(".prior.") || name.contains(".posterior.")) && name.ends_with(".w") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
}

struct Inputs {
    r_stars: Vec<Tensor<f64>>,
    poses: Vec<Tensor<f64>>,
    targets: Vec<Tensor<f64>>,
}

fn inputs(n: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize], lo: f64, hi: f64| {
        let len = shape.iter().product();
        Tensor::from_f64(
            shape,
            &(0..len)
                .map(|_| rng.random_range(lo..hi))
                .collect::<Vec<_>>(),
        )
    };
    Inputs {
        r_stars: (0..n).map(|_| t(&[B, 16], -2.0, 2.0)).collect(),
        poses: (0..n).map(|_| t(&[B, 7], -1.0, 1.0)).collect(),
        targets: (0..n).map(|_| t(&[B, 3, 8, 8], 0.0, 1.0)).collect(),
    }
}

struct Bound {
    r: Vec<Var>,
    p: Vec<Var>,
    t: Vec<Var>,
}

fn bind(s: &mut Session<'_, f64>, inp: &Inputs) -> Bound {
    Bound {
        r: inp.r_stars.iter().map(|x| s.input(x.clone())).collect(),
        p: inp.poses.iter().map(|x| s.input(x.clone())).collect(),
        t: inp.targets.iter().map(|x| s.input(x.clone())).collect(),
    }
}

#[test]
fn generation_is_deterministic_and_noise_sensitive() {
    let (dec, store) = micro(2);
    let inp = inputs(1, 0);
    let run = |seed: u64| {
        let mut s = Session::inference(&store);
        let b = bind(&mut s, &inp);
        let init = StateNodes::bind(&mut s.graph, &init_state(&dec.cfg, B));
        let step = render_step(
            &mut s,
            &dec,
            b.r[0],
            b.p[0],
            None,
            &init,
            Mode::Generation,
            &mut NoiseStream::new(seed),
        )
        .unwrap();
        s.value(step.predicted).clone()
    };
    assert!(run(5).bit_eq(&run(5)));
    assert!(!run(5).bit_eq(&run(6)));
}

#[test]
fn zero_log_variance_passes_noise_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = |rng: &mut ChaCha8Rng| {
        (0..24)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect::<Vec<f64>>()
    };
    let mut g = Graph::<f64>::new();
    let mean = g.constant(Tensor::from_f64(&[2, 3, 2, 2], &data(&mut rng)));
    let zero = g.constant(Tensor::zeros(&[2, 3, 2, 2]));
    let noise = g.constant(Tensor::from_f64(&[2, 3, 2, 2], &data(&mut rng)));
    let z = reparameterize(
        &mut g,
        LatentNodes {
            mean,
            log_variance: zero,
        },
        noise,
    );
    for ((zv, m), e) in g
        .value(z)
        .data()
        .iter()
        .zip(g.value(mean).data())
        .zip(g.value(noise).data())
    {
        // One rounding in the final addition.
        assert!((zv - m - e).abs() <= f64::EPSILON * zv.abs());
    }
    // With zero mean the sample is the noise itself.
    let z0 = reparameterize(
        &mut g,
        LatentNodes {
            mean: zero,
            log_variance: zero,
        },
        noise,
    );
    assert!(g.value(z0).bit_eq(g.value(noise)));
}

#[test]
fn canvas_delta_matches_naive_transposed_conv() {
    let (dec, store) = micro(2);
    let inp = inputs(1, 2);
    let mut s = Session::inference(&store);
    let b = bind(&mut s, &inp);
    let init = StateNodes::bind(&mut s.graph, &init_state(&dec.cfg, B));
    let step = render_step(
        &mut s,
        &dec,
        b.r[0],
        b.p[0],
        Some(b.t[0]),
        &init,
        Mode::Training,
        &mut NoiseStream::new(3),
    )
    .unwrap();
    for (m, micro) in step.micro.iter().enumerate() {
        let h = s.value(micro.state.gen[m].hidden);
        let w = store.get(store.id(&format!("core{m}.upsample.w")).unwrap());
        let bias = store.get(store.id(&format!("core{m}.upsample.b")).unwrap());
        let delta = s.value(micro.canvas_delta);
        let (c_in, c_out, g, k) = (w.dim(0), w.dim(1), h.dim(2), w.dim(2));
        for bb in 0..B {
            for co in 0..c_out {
                for y in 0..g * k {
                    for x in 0..g * k {
                        let mut acc = bias.data()[co];
                        for ci in 0..c_in {
                            let hv = h.data()[((bb * c_in + ci) * g + y / k) * g + x / k];
                            acc += hv * w.data()[((ci * c_out + co) * k + y % k) * k + x % k];
                        }
                        let got = delta.data()[((bb * c_out + co) * g * k + y) * g * k + x];
                        assert!((got - acc).abs() < 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn single_core_yields_one_latent_pair() {
    let (dec, store) = micro(1);
    let inp = inputs(1, 4);
    let mut s = Session::inference(&store);
    let b = bind(&mut s, &inp);
    let init = StateNodes::bind(&mut s.graph, &init_state(&dec.cfg, B));
    let step = render_step(
        &mut s,
        &dec,
        b.r[0],
        b.p[0],
        Some(b.t[0]),
        &init,
        Mode::Training,
        &mut NoiseStream::new(0),
    )
    .unwrap();
    assert_eq!((step.priors.len(), step.posteriors.len()), (1, 1));
    assert!(DecoderConfig {
        cores: 0,
        ..dec.cfg
    }
    .validate()
    .is_err());
}

#[test]
fn threaded_state_is_read_exactly() {
    let (dec, store) = micro(2);
    let inp = inputs(2, 5);
    for mode in [Mode::Training, Mode::Generation] {
        let targets = |b: &Bound, i: usize| (mode == Mode::Training).then(|| b.t[i]);
        // Chained run.
        let mut s = Session::inference(&store);
        let b = bind(&mut s, &inp);
        let init = StateNodes::bind(&mut s.graph, &init_state(&dec.cfg, B));
        let mut noise = NoiseStream::new(9);
        let first = render_step(
            &mut s,
            &dec,
            b.r[0],
            b.p[0],
            targets(&b, 0),
            &init,
            mode,
            &mut noise,
        )
        .unwrap();
        let second = render_step(
            &mut s,
            &dec,
            b.r[1],
            b.p[1],
            targets(&b, 1),
            &first.state_out,
            mode,
            &mut noise,
        )
        .unwrap();
        let out1 = first.state_out.read(&s.graph);
        let chained = second.read(&s.graph);

        // Same second step fed from a copy of the stored state.
        let mut s2 = Session::inference(&store);
        let b2 = bind(&mut s2, &inp);
        let mut noise2 = NoiseStream::new(9);
        let g = dec.cfg.grid();
        for _ in 0..dec.cfg.cores {
            noise2.sample::<f64>(&[B, dec.cfg.z_channels, g, g]);
        }
        let restored = StateNodes::bind(&mut s2.graph, &out1);
        let fresh = render_step(
            &mut s2,
            &dec,
            b2.r[1],
            b2.p[1],
            targets(&b2, 1),
            &restored,
            mode,
            &mut noise2,
        )
        .unwrap();
        let fresh = fresh.read(&s2.graph);
        assert!(chained.state_in.bit_eq(&out1));
        assert!(fresh.state_in.bit_eq(&out1));
        assert!(fresh.predicted.bit_eq(&chained.predicted));
        assert!(fresh.state_out.bit_eq(&chained.state_out));
        assert_eq!(fresh.priors, chained.priors);
    }
}

#[test]
fn latent_heads_start_at_the_standard_normal() {
    let (dec, _) = micro(2);
    let mut store = ParamStore::new();
    let mut rng = init_rng(11);
    let fresh = Decoder::new(dec.cfg, &mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
    let inp = inputs(1, 6);
    let mut s = Session::inference(&store);
    let b = bind(&mut s, &inp);
    let init = StateNodes::bind(&mut s.graph, &init_state(&fresh.cfg, B));
    let step = render_step(
        &mut s,
        &fresh,
        b.r[0],
        b.p[0],
        Some(b.t[0]),
        &init,
        Mode::Training,
        &mut NoiseStream::new(1),
    )
    .unwrap();
    let out = step.read(&s.graph);
    for (q, p) in out.posteriors.iter().zip(&out.priors) {
        assert_eq!(q, p);
        assert!(p.mean.data().iter().all(|&v| v == 0.0));
        assert!(p.log_variance.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn posterior_changes_the_training_frame() {
    let (dec, store) = micro(2);
    let inp = inputs(1, 6);
    let mut s = Session::inference(&store);
    let b = bind(&mut s, &inp);
    let init = StateNodes::bind(&mut s.graph, &init_state(&dec.cfg, B));
    let train = render_step(
        &mut s,
        &dec,
        b.r[0],
        b.p[0],
        Some(b.t[0]),
        &init,
        Mode::Training,
        &mut NoiseStream::new(1),
    )
    .unwrap();
    let gen = render_step(
        &mut s,
        &dec,
        b.r[0],
        b.p[0],
        None,
        &init,
        Mode::Generation,
        &mut NoiseStream::new(1),
    )
    .unwrap();
    let out = train.read(&s.graph);
    assert_ne!(out.priors[0], out.posteriors[0]);
    assert!(!s.value(train.predicted).bit_eq(s.value(gen.predicted)));
}

#[test]
fn one_step_sequence_equals_render_step() {
    let (dec, store) = micro(2);
    let inp = inputs(1, 7);
    for mode in [Mode::Training, Mode::Generation] {
        let mut s = Session::inference(&store);
        let b = bind(&mut s, &inp);
        let init = StateNodes::bind(&mut s.graph, &init_state(&dec.cfg, B));
        let targets = (mode == Mode::Training).then_some(&b.t[..]);
        let seq = decode_sequence(
            &mut s,
            &dec,
            &b.r,
            &b.p,
            targets,
            mode,
            &init,
            &mut NoiseStream::new(2),
        )
        .unwrap();
        let single = render_step(
            &mut s,
            &dec,
            b.r[0],
            b.p[0],
            targets.map(|t| t[0]),
            &init,
            mode,
            &mut NoiseStream::new(2),
        )
        .unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq[0].read(&s.graph), single.read(&s.graph));
    }
}

#[test]
fn three_step_sequence_counts_threading_and_ranges() {
    let (dec, store) = micro(2);
    for seed in 0..5 {
        let inp = inputs(3, 20 + seed);
        for mode in [Mode::Training, Mode::Generation] {
            let mut s = Session::inference(&store);
            let b = bind(&mut s, &inp);
            let init = StateNodes::bind(&mut s.graph, &init_state(&dec.cfg, B));
            let targets = (mode == Mode::Training).then_some(&b.t[..]);
            let steps = decode_sequence(
                &mut s,
                &dec,
                &b.r,
                &b.p,
                targets,
                mode,
                &init,
                &mut NoiseStream::new(seed),
            )
            .unwrap();
            let outs: Vec<_> = steps.iter().map(|st| st.read(&s.graph)).collect();
            assert_eq!(outs.len(), 3);
            let priors: usize = outs.iter().map(|o| o.priors.len()).sum();
            let posteriors: usize = outs.iter().map(|o| o.posteriors.len()).sum();
            assert_eq!(priors, 3 * dec.cfg.cores);
            assert_eq!(
                posteriors,
                if mode == Mode::Training {
                    3 * dec.cfg.cores
                } else {
                    0
                }
            );
            assert!(outs[0].state_in.bit_eq(&init_state(&dec.cfg, B)));
            for n in 1..3 {
                assert!(outs[n].state_in.bit_eq(&outs[n - 1].state_out));
            }
            for o in &outs {
                assert!(o.state_out.all_finite());
                assert!(o.predicted.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(o.frames().unwrap().len(), B);
            }
        }
    }
}

#[test]
fn mismatched_lengths_are_contract_violations() {
    let (dec, store) = micro(2);
    let inp = inputs(3, 8);
    let mut s = Session::inference(&store);
    let b = bind(&mut s, &inp);
    let init = StateNodes::bind(&mut s.graph, &init_state(&dec.cfg, B));
    let mut noise = NoiseStream::new(0);
    let err = decode_sequence(
        &mut s,
        &dec,
        &b.r,
        &b.p[..2],
        None,
        Mode::Generation,
        &init,
        &mut noise,
    )
    .unwrap_err();
    assert!(matches!(err, TgqnError::Contract(_)));
    let err = decode_sequence(
        &mut s,
        &dec,
        &b.r,
        &b.p,
        Some(&b.t[..2]),
        Mode::Training,
        &init,
        &mut noise,
    )
    .unwrap_err();
    assert!(matches!(err, TgqnError::Contract(_)));
    let err = decode_sequence(
        &mut s,
        &dec,
        &b.r,
        &b.p,
        None,
        Mode::Training,
        &init,
        &mut noise,
    )
    .unwrap_err();
    assert!(matches!(err, TgqnError::Contract(_)));
}
