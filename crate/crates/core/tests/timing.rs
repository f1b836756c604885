// Kept in its own binary with a single test so no other test thread
// competes for the CPU while steps are timed.

use smac_core::cell::MacVariant;
use smac_core::trainer::{measure_step_time, synthetic_batch, TimingConfig};

#[test]
fn step_timing_contract() {
    let config = TimingConfig {
        d: 16,
        p: 2,
        batch_size: 4,
        h: 3,
        w: 3,
        question_len: 6,
        warmup: 1,
        seed: 9,
    };

    let (a, b) = (synthetic_batch(&config).unwrap(), synthetic_batch(&config).unwrap());
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.grids.data(), b.grids.data());
    assert_eq!(a.tokens.len(), 4);
    assert!(a.tokens.iter().all(|t| t.len() == 6));

    for variant in MacVariant::ALL {
        assert!(measure_step_time(variant, &config, 29).is_err());
        let stats = measure_step_time(variant, &config, 30).unwrap();
        assert_eq!(stats.variant, variant);
        assert_eq!(stats.fingerprint, config.fingerprint());
        assert_eq!(stats.steps, 30);
        assert_eq!(stats.samples.len(), 30);
        assert!(stats.samples.iter().all(|&s| s > 0.0 && s.is_finite()));
        assert!(stats.min <= stats.median && stats.median <= stats.max);
        assert!(stats.min <= stats.mean && stats.mean <= stats.max);
        let mean = stats.samples.iter().sum::<f64>() / 30.0;
        assert!((stats.mean - mean).abs() < 1e-15);
        let below = stats.samples.iter().filter(|&&s| s <= stats.median).count();
        assert!(below >= 15);
    }

    let fp = TimingConfig::default().fingerprint();
    for part in ["d=512", "p=6", "batch=32"] {
        assert!(fp.contains(part), "{fp}");
    }
    assert_ne!(fp, config.fingerprint());
}
