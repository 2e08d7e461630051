use candle_core::{Device, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dccrn_vae::data::{mix_at_snr, measured_snr_db, split_counts, Corpus, MixtureBatches, SignalKind, Split, SynthConfig};
use dccrn_vae::data::BatchOptions;
use dccrn_vae::latent::{kl_between, kl_to_prior, ComplexDiagGaussian, GaussianTensors};
use dccrn_vae::losses::{recon_loss, si_sdr_loss};
use dccrn_vae::spectral::{apply_mask, istft, stft, Complex64, ComplexMask, ComplexSpectrogram, StftConfig, TimeSignal};

fn signal(seed: u64, len: usize) -> TimeSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TimeSignal::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn distribution(rng: &mut ChaCha8Rng, l: usize) -> ComplexDiagGaussian {
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    let mut delta = Vec::new();
    for _ in 0..l {
        let s = rng.gen_range(0.2..3.0);
        let r = s * rng.gen_range(0.0..0.9);
        let phase = rng.gen_range(-3.1..3.1);
        mu.push(Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
        sigma.push(s);
        delta.push(Complex64::from_polar(r, phase));
    }
    ComplexDiagGaussian::new(mu, sigma, delta).unwrap()
}

fn random_spec(rng: &mut ChaCha8Rng, cfg: StftConfig, frames: usize) -> ComplexSpectrogram {
    let data = (0..frames * cfg.num_bins())
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    ComplexSpectrogram::from_frames(cfg, frames, data, None).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, bins: usize, frames: usize) -> ComplexMask {
    let mut m = ComplexMask::constant(bins, frames, Complex64::new(0.0, 0.0));
    for v in &mut m.values {
        *v = Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stft_round_trip_interior(seed in any::<u64>(), extra in 0usize..2000, hop in prop::sample::select(vec![100usize, 200, 300])) {
        let cfg = StftConfig { hop, ..StftConfig::default() };
        let x = signal(seed, 3 * cfg.frame_length + extra);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        prop_assert_eq!(y.len(), x.len());
        let err = x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-6, "max error {}", err);
    }

    #[test]
    fn unit_mask_is_identity_and_masking_is_bilinear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = StftConfig::default();
        let y = random_spec(&mut rng, cfg, 3);
        let one = ComplexMask::constant(y.n_bins(), y.n_frames(), Complex64::new(1.0, 0.0));
        let masked = apply_mask(&y, &one).unwrap();
        prop_assert_eq!(masked.data(), y.data());

        let y2 = random_spec(&mut rng, cfg, 3);
        let (m1, m2) = (random_mask(&mut rng, y.n_bins(), 3), random_mask(&mut rng, y.n_bins(), 3));
        let mut m_comb = m1.clone();
        for (v, w) in m_comb.values.iter_mut().zip(&m2.values) {
            *v = *v * a + *w * b;
        }
        let lhs = apply_mask(&y, &m_comb).unwrap();
        let rhs = apply_mask(&y, &m1).unwrap().combine(a, &apply_mask(&y, &m2).unwrap(), b).unwrap();
        let lhs2 = apply_mask(&y.combine(a, &y2, b).unwrap(), &m1).unwrap();
        let rhs2 = apply_mask(&y, &m1).unwrap().combine(a, &apply_mask(&y2, &m1).unwrap(), b).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()).chain(lhs2.data().iter().zip(rhs2.data())) {
            prop_assert!((p - q).norm() <= 1e-12 * (1.0 + p.norm()));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_consistent(seed in any::<u64>(), l in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = distribution(&mut rng, l);
        let standard = ComplexDiagGaussian::standard(l);
        prop_assert!(kl_to_prior(&q) > 0.0);
        prop_assert!((kl_between(&q, &standard).unwrap() - kl_to_prior(&q)).abs() <= 1e-9 * (1.0 + kl_to_prior(&q)));
        let p = distribution(&mut rng, l);
        prop_assert!(kl_between(&q, &p).unwrap() >= -1e-12);
        prop_assert!(kl_between(&q, &q).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn si_sdr_loss_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let x = signal(seed, 256);
        let noise = signal(seed.wrapping_add(1), 256);
        let est = TimeSignal::new(x.samples().iter().zip(noise.samples()).map(|(a, b)| a + 0.3 * b).collect()).unwrap();
        let scaled = TimeSignal::new(est.samples().iter().map(|v| v * scale).collect()).unwrap();
        let a = si_sdr_loss(&est, &x, 1e-8).unwrap();
        let b = si_sdr_loss(&scaled, &x, 1e-8).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn recon_loss_is_finite_and_nonnegative(seed in any::<u64>(), frames in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = StftConfig::default();
        let (a, b) = (random_spec(&mut rng, cfg, frames), random_spec(&mut rng, cfg, frames));
        let l = recon_loss(&a, &b).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mixing_hits_requested_snr(seed in any::<u64>(), snr in -20.0f64..30.0) {
        let s = signal(seed, 4000);
        let v = signal(seed ^ 0xABCD, 4000);
        let (_, gain) = mix_at_snr(&s, &v, snr).unwrap();
        prop_assert!((measured_snr_db(&s, &v, gain) - snr).abs() <= 1e-6);
    }

    #[test]
    fn split_counts_match_fractions(n in 10usize..500, a in 0.1f64..0.8, b in 0.0f64..1.0) {
        let second = 0.1 + (0.8 - a) * b;
        let fractions = [a, second, 1.0 - a - second];
        let counts = split_counts(n, fractions);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, f) in counts.iter().zip(fractions) {
            prop_assert!((*c as f64 - f * n as f64).abs() <= 1.0, "{:?} for {} x {:?}", counts, n, fractions);
        }
    }
}

#[test]
fn kl_is_zero_at_the_standard_point() {
    for l in [1, 4, 8] {
        assert!(kl_to_prior(&ComplexDiagGaussian::standard(l)).abs() <= 1e-9);
    }
}

fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn params(d: &ComplexDiagGaussian) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend(d.mu().iter().map(|c| c.re));
    v.extend(d.mu().iter().map(|c| c.im));
    v.extend(d.sigma().iter().copied());
    v.extend(d.delta().iter().map(|c| c.re));
    v.extend(d.delta().iter().map(|c| c.im));
    v
}

fn tensors(v: &[Tensor]) -> GaussianTensors {
    GaussianTensors {
        mu_re: v[0].clone(),
        mu_im: v[1].clone(),
        sigma: v[2].clone(),
        delta_re: v[3].clone(),
        delta_im: v[4].clone(),
    }
}

fn kl_fn(x: &[f64], l: usize, other: Option<&GaussianTensors>) -> (f64, Vec<f64>) {
    let vars: Vec<Var> = x.chunks(l).map(|c| Var::new(c, &Device::Cpu).unwrap()).collect();
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let g = tensors(&ts);
    let kl = match other {
        Some(p) => g.kl_between(p).unwrap(),
        None => g.kl_to_prior().unwrap(),
    }
    .sum_all()
    .unwrap();
    let grads = kl.backward().unwrap();
    let grad = vars.iter().flat_map(|v| grads.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap()).collect();
    (kl.to_scalar::<f64>().unwrap(), grad)
}

#[test]
fn kl_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = 4;
    for _ in 0..100 {
        let q = params(&distribution(&mut rng, l));
        let p_params = params(&distribution(&mut rng, l));
        let p_ts: Vec<Tensor> = p_params.chunks(l).map(|c| Tensor::new(c, &Device::Cpu).unwrap()).collect();
        let p = tensors(&p_ts);
        for other in [None, Some(&p)] {
            let (_, analytic) = kl_fn(&q, l, other);
            let numeric = fd(&|x| kl_fn(x, l, other).0, &q, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() <= 1e-4 * a.abs().max(1.0), "{a} vs {n}");
            }
        }
    }
}

#[test]
fn batches_carry_exact_mixtures_at_recorded_snr() {
    let cfg = SynthConfig {
        speakers: 4,
        test_speakers: 2,
        utterances_per_speaker: 2,
        noise_sources: 4,
        test_noise_sources: 2,
        utterances_per_noise: 2,
        max_secs: 1.0,
        ..SynthConfig::default()
    };
    let corpus = Corpus::synthesize(&cfg, 9).unwrap();
    let stft_cfg = StftConfig::default();
    let opts = BatchOptions { batch_size: 3, ..BatchOptions::default() };
    let batches: Vec<_> = MixtureBatches::new(&corpus, Split::Pretrain, opts, stft_cfg, 4, 0)
        .unwrap()
        .map(|b| b.unwrap())
        .collect();
    assert!(!batches.is_empty());
    for item in batches.iter().flatten() {
        let clean = corpus.audio(&item.mix.speech_id).unwrap();
        assert!(clean.len() >= item.clean.len());
        let snr = 10.0 * (item.clean.power() / item.noise.power()).log10();
        assert!((snr - item.mix.snr_db).abs() <= 1e-6);
        let y = stft(&item.noisy, &stft_cfg).unwrap();
        for (a, b) in y.data().iter().zip(item.y.data()) {
            assert!((a - b).norm() <= 1e-6);
        }
        let sum: Vec<f64> = item.clean.samples().iter().zip(item.noise.samples()).map(|(s, v)| s + v).collect();
        for (a, b) in sum.iter().zip(item.noisy.samples()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    assert!(corpus.manifest.leaked_sources().is_empty());
    assert!(!corpus.ids(SignalKind::Noise, Split::Test).is_empty());
}
