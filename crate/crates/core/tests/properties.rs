//! Property tests for the metrics, STPR and the compression proxies.

use amicable::dsp::WaveBuffer;
use amicable::metrics;
use amicable::perturb::{stpr, AdamConfig, AdamState, StprFloor};
use amicable::robustness::{compress, quantize, CompressionProxy};
use proptest::prelude::*;

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sdr_is_invariant_to_joint_scaling(r in signal(300), e in signal(300), a in 0.01f64..100.0, neg in any::<bool>()) {
        let a = if neg { -a } else { a };
        let base = metrics::sdr_samples(&r, &e).unwrap();
        let rs: Vec<f64> = r.iter().map(|v| a * v).collect();
        let es: Vec<f64> = e.iter().map(|v| a * v).collect();
        prop_assert!((metrics::sdr_samples(&rs, &es).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn di_sdr_decreases_as_nu_grows(x in signal(256), nu in signal(256)) {
        prop_assume!(nu.iter().any(|v| v.abs() > 1e-3));
        let mut last = f64::INFINITY;
        for scale in [1e-4, 1e-3, 1e-2, 1e-1] {
            let scaled: Vec<f64> = nu.iter().map(|v| scale * v).collect();
            let d = metrics::di_sdr_samples(&x, &scaled).unwrap();
            prop_assert!(d < last);
            last = d;
        }
    }

    #[test]
    fn stpr_is_one_homogeneous(x in signal(512), nu in signal(512), a in -10.0f64..10.0, l in 1usize..200) {
        let base = stpr(&nu, &x, l, StprFloor::Relative).unwrap();
        let scaled: Vec<f64> = nu.iter().map(|v| a * v).collect();
        let s = stpr(&scaled, &x, l, StprFloor::Relative).unwrap();
        prop_assert!((s - a.abs() * base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn adam_steps_are_bounded_by_lr(g in prop::collection::vec(-1e3f64..1e3, 8), steps in 1usize..20) {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(g.len());
        for _ in 0..steps {
            for d in s.step(&g, &cfg).unwrap() {
                prop_assert!(d.abs() <= cfg.lr * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn quantizer_error_is_within_half_a_step(x in signal(200), bits in 2u32..17) {
        let q = quantize(&x, bits);
        let step = 2f64.powi(1 - bits as i32);
        for (a, b) in x.iter().zip(&q) {
            prop_assert!(*b >= -1.0 && *b <= 1.0 - step);
            prop_assert!((a - b).abs() <= step / 2.0 + 1e-15 || *a > 1.0 - step);
            prop_assert!((b / step - (b / step).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn mdct_keeping_everything_is_lossless(x in signal(1000)) {
        let w = WaveBuffer::new(x, 8000).unwrap();
        let back = compress(&w, CompressionProxy::MdctTopK(1.0)).unwrap();
        for (a, b) in w.samples().iter().zip(back.samples()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
