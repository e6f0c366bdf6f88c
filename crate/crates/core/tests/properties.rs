use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prefilter::adversary::{Discriminator, DiscriminatorConfig};
use prefilter::autograd::{Graph, Tensor};
use prefilter::codec::{Codec, JpegCodec};
use prefilter::config::DataConfig;
use prefilter::distortion::{filter_loss, ms_ssim, mse, FilterMode, LossTerms, LossWeights};
use prefilter::eval::{rate_savings_with, BdMethod, Metric, RdCurve, RdPoint};
use prefilter::filter::{Filter, FilterConfig};
use prefilter::image::Image;
use prefilter::nn::LrSchedule;
use prefilter::surrogate::{rate, QuantizationMode, Surrogate, SurrogateConfig};
use prefilter::synth;
use prefilter::trainer::{sample_training_crop, CropSampler};

fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _, _| rng.random::<f64>())
}

fn surrogate() -> Surrogate {
    Surrogate::new(SurrogateConfig { latent_channels: 4, hidden_channels: 4, ..SurrogateConfig::desk_scale(0.2) }, 0).unwrap()
}

fn tiny_filter(s: &Surrogate, zero_output: bool) -> Filter {
    let cfg = FilterConfig { upsample_channels: vec![4, 4, 16, 16], trunk_channels: 4, res_blocks: 1, zero_output, ..FilterConfig::default() };
    Filter::new(cfg, s, 1).unwrap()
}

/// A monotone RD curve from positive rate increments and quality gains.
fn monotone_curve(steps: &[(f64, f64)], filtered: bool) -> RdCurve {
    let (mut bpp, mut value) = (0.05, 20.0);
    let pts = steps
        .iter()
        .enumerate()
        .map(|(i, &(db, dv))| {
            bpp += db;
            value += dv;
            RdPoint { quality: i as i32, bpp, value }
        })
        .collect();
    RdCurve::new("p", "c", filtered, Metric::Psnr, pts).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn latent_and_entropy_shapes(h in 9usize..80, w in 9usize..80, seed in any::<u64>()) {
        let s = surrogate();
        let latent = s.encode(&noise(h, w, seed), QuantizationMode::Round, 0).unwrap();
        prop_assert_eq!(latent.values.shape(), &[1, 4, h.div_ceil(16), w.div_ceil(16)]);
        let e = s.entropy_estimate(&latent).unwrap();
        prop_assert_eq!(e.bits.shape(), latent.values.shape());
        prop_assert!(e.bits.data().iter().all(|&b| b >= 0.0));
        let (total, bpp) = rate(&e, (h, w));
        prop_assert!((total - e.bits.sum() - e.side_bits.iter().sum::<f64>()).abs() < 1e-9);
        prop_assert!((bpp - s.estimate_bpp(&noise(h, w, seed)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn filter_keeps_dims_and_zero_init_is_identity(bh in 1usize..5, bw in 1usize..5, seed in any::<u64>()) {
        let s = surrogate();
        let img = noise(16 * bh, 16 * bw, seed);
        let out = tiny_filter(&s, false).apply(&s, &img).unwrap();
        prop_assert_eq!((out.height(), out.width()), (img.height(), img.width()));
        prop_assert_eq!(tiny_filter(&s, true).apply(&s, &img).unwrap(), img);
    }

    #[test]
    fn discriminator_scores_are_probabilities(seed in any::<u64>(), scale in -20.0f64..20.0) {
        let d = Discriminator::new(DiscriminatorConfig { width: 4, blocks_per_stage: 1 }, seed).unwrap();
        let g = Graph::new();
        let p = d.bind(&g, false);
        let x = noise(24, 24, seed).to_tensor().scale(scale);
        let s = d.discriminate(&p, g.constant(x));
        prop_assert!(s.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn distortions_vanish_only_on_identical_inputs(seed in any::<u64>(), delta in 1e-3f64..0.5) {
        let a = noise(32, 32, seed);
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        let b = Image::from_fn(32, 32, |c, y, x| if (c, y, x) == (1, 5, 7) { (a.get(c, y, x) + delta) % 1.0 } else { a.get(c, y, x) });
        prop_assert!(mse(&a, &b).unwrap() > 0.0);
        prop_assert!(ms_ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn filter_loss_is_linear_in_each_component(
        terms in proptest::collection::vec(0.0f64..5.0, 6),
        bump in 0.1f64..2.0,
        which in 0usize..6,
    ) {
        let weights = LossWeights { gamma_gan: 5.0, gamma_vgg: 0.01, gamma_mse: 0.001, lambda_t: 100.0, lambda_task: 1.0 };
        let eval = |t: &[f64], mode: FilterMode| {
            let g = Graph::new();
            let v = |x: f64| Some(g.constant(Tensor::scalar(x)));
            let lt = LossTerms { rate_bpp: v(t[0]), ms_ssim: v(t[1]), gan: v(t[2]), perceptual: v(t[3]), mse: v(t[4]), cross_entropy: v(t[5]) };
            filter_loss(&lt, &weights, mode).unwrap().item()
        };
        let coeff = |mode: FilterMode| -> [f64; 6] {
            let msc = weights.gamma_mse * prefilter::distortion::MSE_SCALE;
            match mode {
                FilterMode::MsssimRetarget => [1.0, -weights.lambda_t, 0.0, 0.0, 0.0, 0.0],
                FilterMode::Gan => [1.0, 0.0, weights.gamma_gan, weights.gamma_vgg, msc, 0.0],
                FilterMode::Task => [1.0, 0.0, 0.0, 0.0, msc, weights.lambda_task],
            }
        };
        for mode in [FilterMode::MsssimRetarget, FilterMode::Gan, FilterMode::Task] {
            let mut bumped = terms.clone();
            bumped[which] += bump;
            let got = eval(&bumped, mode) - eval(&terms, mode);
            prop_assert!((got - coeff(mode)[which] * bump).abs() < 1e-9 * (1.0 + got.abs()));
        }
    }

    #[test]
    fn savings_are_antisymmetric_and_self_bd_is_zero(
        a in proptest::collection::vec((0.01f64..0.5, 0.1f64..4.0), 3..8),
        b in proptest::collection::vec((0.01f64..0.5, 0.1f64..4.0), 3..8),
        method in prop_oneof![Just(BdMethod::PiecewiseLinear), Just(BdMethod::Cubic)],
    ) {
        let (ca, cb) = (monotone_curve(&a, true), monotone_curve(&b, false));
        prop_assert_eq!(rate_savings_with(&ca, &ca, method).unwrap().bd_rate, 0.0);
        if let (Ok(ab), Ok(ba)) = (rate_savings_with(&ca, &cb, method), rate_savings_with(&cb, &ca, method)) {
            for (x, y) in ab.points.iter().zip(&ba.points) {
                prop_assert_eq!(x.value, y.value);
                prop_assert!((x.log_savings + y.log_savings).abs() < 1e-9);
            }
            prop_assert!(((1.0 + ab.bd_rate) * (1.0 + ba.bd_rate) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pruned_curves_are_strictly_monotone(
        pts in proptest::collection::vec((0.01f64..3.0, 0.0f64..1.0), 1..20),
        psnr in any::<bool>(),
    ) {
        let metric = if psnr { Metric::Psnr } else { Metric::Mse };
        let points = pts.iter().enumerate().map(|(i, &(bpp, value))| RdPoint { quality: i as i32, bpp, value }).collect();
        let c = RdCurve::new("p", "c", false, metric, points).unwrap();
        prop_assert!(!c.points.is_empty());
        for w in c.points.windows(2) {
            prop_assert!(w[1].bpp > w[0].bpp);
            if psnr { prop_assert!(w[1].value > w[0].value) } else { prop_assert!(w[1].value < w[0].value) }
        }
    }

    #[test]
    fn lr_switches_exactly_at_stage_boundaries(n1 in 1u64..1000, n2 in 1u64..1000) {
        let s = LrSchedule { stages: vec![(n1, 1e-4), (n2, 1e-5)] };
        prop_assert_eq!(s.lr_at(n1 - 1), 1e-4);
        prop_assert_eq!(s.lr_at(n1), 1e-5);
        prop_assert_eq!(s.total_iterations(), n1 + n2);
    }

    #[test]
    fn jpeg_is_deterministic_and_counts_whole_files(seed in any::<u64>(), q in 1i32..=100) {
        let img = synth::corpus(1, 24, 40, seed).remove(0);
        let (a, b) = (JpegCodec.encode_decode(&img, q).unwrap(), JpegCodec.encode_decode(&img, q).unwrap());
        prop_assert_eq!(&a.decoded, &b.decoded);
        prop_assert_eq!(a.compressed_size, JpegCodec.encode(&img, q).unwrap().len());
        prop_assert_eq!(a.bpp, 8.0 * a.compressed_size as f64 / (24.0 * 40.0));
    }

    #[test]
    fn crop_sampling_is_seeded(seed in any::<u64>(), crop in 8usize..40) {
        let corpus = synth::corpus(3, 48, 56, 0);
        let data = DataConfig { corpus: None, synthetic_count: 3, synthetic_size: 48, crop, resize_short_side: None, max_upscale: 2.0 };
        let draw = || CropSampler::new(&corpus, &data, seed).unwrap().next_batch(4);
        let (a, b) = (draw(), draw());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|im| (im.height(), im.width()) == (crop, crop)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let single = sample_training_crop(&corpus[0], crop, None, 2.0, &mut rng).unwrap();
        prop_assert_eq!((single.height(), single.width()), (crop, crop));
    }
}
