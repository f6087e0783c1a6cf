use morphbench::msssim::{ms_ssim, MsSsimConfig};
use morphbench::nets::{match_score, Biometric, BiometricConfig, Encoder, EncoderConfig};
use morphbench::stylegen::{Generator, GeneratorConfig, LatentStack, Mapping};
use morphbench::{mten, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[32, 32, 3], |_| r.gen_range(0.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ms_ssim_in_unit_range(a in any::<u64>(), b in any::<u64>(), mix in 0.0f64..1.0) {
        let x = random_image(a);
        let y = random_image(b).zip_map(&x, |p, q| mix * p + (1.0 - mix) * q).unwrap();
        let cfg = MsSsimConfig::default();
        let v = ms_ssim(&x, &y, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&v), "{}", v);
        prop_assert!((ms_ssim(&x, &x, &cfg).unwrap() - 1.0).abs() <= 1e-6);
        if mix > 0.05 {
            prop_assert!(v < 1.0 - 1e-6);
        }
    }

    #[test]
    fn mten_roundtrip_any_values(data in prop::collection::vec(any::<f32>(), 1..200)) {
        let n = data.len();
        let t = Tensor::new(vec![n], data).unwrap();
        let back = mten::decode(&mten::encode(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (x, y) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn match_score_symmetric_bounded(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v: Vec<f32> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            Tensor::new(vec![32], v.iter().map(|x| x / n).collect()).unwrap()
        };
        let (u, v) = (unit(), unit());
        let s = match_score(&u, &v);
        prop_assert_eq!(s, match_score(&v, &u));
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((match_score(&u, &u) - 1.0).abs() < 1e-5);
    }
}

#[test]
fn synthesis_is_bit_deterministic_across_instances() {
    let gc = GeneratorConfig::default();
    let (g1, g2) = (Generator::init(9, gc).unwrap(), Generator::init(9, gc).unwrap());
    let m = Mapping::init(9, gc).unwrap();
    for k in 0..4 {
        let w = m.sample_identity(k).unwrap();
        assert_eq!(g1.synthesize(&w).unwrap(), g2.synthesize(&w).unwrap());
    }
}

#[test]
fn linear_path_has_no_spikes() {
    let gc = GeneratorConfig::default();
    let g = Generator::init(2, gc).unwrap();
    let m = Mapping::init(2, gc).unwrap();
    for pair in 0..5 {
        let (a, b) = (m.sample_identity(2 * pair).unwrap(), m.sample_identity(2 * pair + 1).unwrap());
        let frames: Vec<Tensor<f32>> = (0..=20)
            .map(|i| {
                let t = i as f32 * 0.05;
                let w = a.tensor().zip_map(b.tensor(), |x, y| (1.0 - t) * x + t * y).unwrap();
                g.synthesize(&LatentStack::new(w).unwrap()).unwrap()
            })
            .collect();
        let mut steps: Vec<f64> = frames.windows(2).map(|f| f[0].mse(&f[1]).unwrap()).collect();
        let max = steps.iter().cloned().fold(0.0, f64::max);
        steps.sort_by(f64::total_cmp);
        let median = steps[steps.len() / 2];
        assert!(max <= 10.0 * median, "pair {pair}: max step {max:e} vs median {median:e}");
    }
}

#[test]
fn embeddings_unit_norm_on_varied_images() {
    let bio = Biometric::init(4, BiometricConfig::default()).unwrap();
    for seed in 0..6 {
        let x = random_image(seed).cast::<f32>();
        let e = bio.embed(&x).unwrap();
        assert!((e.l2_norm() - 1.0).abs() <= 1e-5);
    }
    // Zero biases carry a black image to a zero activation, which cannot be
    // normalized.
    let black = bio.embed(&Tensor::full(&[32, 32, 3], 0.0)).unwrap_err();
    assert!(black.to_string().contains("zero-norm"), "{black}");
}

#[test]
fn net_bundles_roundtrip() {
    let gc = GeneratorConfig::default();
    let stats = Mapping::init(1, gc).unwrap().map_and_average(1000, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bio = Biometric::init(4, BiometricConfig::default()).unwrap();
    let enc = Encoder::init(4, EncoderConfig::default(), &stats).unwrap();
    bio.save(dir.path().join("b")).unwrap();
    enc.save(dir.path().join("e")).unwrap();
    let x = random_image(1).cast::<f32>();
    assert_eq!(Biometric::load(dir.path().join("b")).unwrap().embed(&x).unwrap(), bio.embed(&x).unwrap());
    assert_eq!(
        Encoder::load(dir.path().join("e")).unwrap().encode(&x).unwrap().tensor(),
        enc.encode(&x).unwrap().tensor()
    );
    assert!(Biometric::load(dir.path().join("e")).is_err());
}
