//! Paired per-step wall-time measurement on identical synthetic batches.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_global_norm, Adam, TrainConfig};
use crate::cell::MacVariant;
use crate::error::{Error, Result};
use crate::microgen::{generate_scene, render_feature_grid, ConditionSpec, SceneConfig};
use crate::model::{question_vocabulary, Batch, EncodedSample, MacModel, ModelConfig};
use crate::tensor::Tape;

/// Fewest timed steps accepted.
pub const MIN_TIMED_STEPS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub d: usize,
    pub p: usize,
    pub batch_size: usize,
    pub h: usize,
    pub w: usize,
    pub question_len: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            d: 512,
            p: 6,
            batch_size: 32,
            h: 6,
            w: 6,
            question_len: 12,
            warmup: 3,
            seed: 0,
        }
    }
}

impl TimingConfig {
    pub fn fingerprint(&self) -> String {
        format!(
            "d={} p={} batch={} grid={}x{} len={} warmup={} seed={}",
            self.d, self.p, self.batch_size, self.h, self.w, self.question_len, self.warmup, self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub variant: MacVariant,
    pub fingerprint: String,
    pub steps: usize,
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub samples: Vec<f64>,
}

/// Batch that depends only on `config`, so both variants see the same
/// tokens and scenes.
pub fn synthetic_batch(config: &TimingConfig) -> Result<Batch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = question_vocabulary();
    let scene_config = SceneConfig {
        h: config.h,
        w: config.w,
        ..SceneConfig::default()
    };
    let samples = (0..config.batch_size)
        .map(|i| {
            let scene = generate_scene(&ConditionSpec::clevr(), &scene_config, config.seed.wrapping_add(i as u64))?;
            Ok(EncodedSample {
                id: format!("timing-{i}"),
                scene_id: scene.id.clone(),
                category: crate::microgen::Category::Exist,
                tokens: (0..config.question_len)
                    .map(|_| rng.gen_range(vocab.reserved()..vocab.len()))
                    .collect(),
                grid: render_feature_grid(&scene).data,
                label: rng.gen_range(0..2),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::from_samples(&samples.iter().collect::<Vec<_>>())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times `n_steps` full optimizer steps (forward, backward, clip, Adam)
/// after `config.warmup` untimed ones.
pub fn measure_step_time(variant: MacVariant, config: &TimingConfig, n_steps: usize) -> Result<TimingStats> {
    if n_steps < MIN_TIMED_STEPS {
        return Err(Error::contract(format!("need at least {MIN_TIMED_STEPS} timed steps, got {n_steps}")));
    }
    let batch = synthetic_batch(config)?;
    let model_config = ModelConfig::for_corpora(variant, config.d, config.p, config.h, config.w);
    let mut model = MacModel::<f64>::new(model_config, config.seed)?;
    let train = TrainConfig::default();
    let mut adam = Adam::new(train.lr, train.beta1, train.beta2, train.eps);
    let mut samples = Vec::with_capacity(n_steps);
    for step in 0..config.warmup + n_steps {
        let start = Instant::now();
        let mut tape = Tape::new();
        let (loss, _) = model.loss(&mut tape, &batch)?;
        model.params.zero_grad();
        tape.backward_into(loss, &mut model.params)?;
        drop(tape);
        clip_global_norm(&mut model.params, train.clip);
        adam.step(&mut model.params);
        if step >= config.warmup {
            samples.push(start.elapsed().as_secs_f64());
        }
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingStats {
        variant,
        fingerprint: config.fingerprint(),
        steps: n_steps,
        median: median(&sorted),
        mean: samples.iter().sum::<f64>() / n_steps as f64,
        min: sorted[0],
        max: sorted[n_steps - 1],
        samples,
    })
}
