//! The complete question-answering network: encoder, `p` reasoning steps
//! and the answer classifier, plus batching of generated samples.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{self, CellConfig, CellVars, ContextualWords, MacVariant, Reasoning, StepTrace};
use crate::encoder::{self, EncoderDims, EncoderVars, Vocabulary};
use crate::error::{Error, Result};
use crate::microgen::{answer_words, question_words, render_feature_grid, Category, QASample, Scene, FEATURE_WIDTH};
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: MacVariant,
    pub d: usize,
    pub p: usize,
    pub h: usize,
    pub w: usize,
    pub d_in: usize,
    pub vocab: usize,
    pub answers: usize,
}

impl ModelConfig {
    /// Sized for the generated grid-world corpora.
    pub fn for_corpora(variant: MacVariant, d: usize, p: usize, h: usize, w: usize) -> Self {
        Self {
            variant,
            d,
            p,
            h,
            w,
            d_in: FEATURE_WIDTH,
            vocab: question_vocabulary().len(),
            answers: answer_vocabulary().len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        CellConfig {
            d: self.d,
            p: self.p,
            h: self.h,
            w: self.w,
            s: 1,
        }
        .validate()?;
        if self.d_in == 0 || self.vocab == 0 || self.answers == 0 {
            return Err(Error::contract(format!("model sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            vocab: self.vocab,
            d: self.d,
            p: self.p,
            d_in: self.d_in,
            answers: self.answers,
        }
    }
}

/// Question vocabulary over the grammar's words, with pad/unknown reserved.
pub fn question_vocabulary() -> Vocabulary {
    Vocabulary::with_reserved(&question_words()).expect("grammar words are distinct")
}

pub fn answer_vocabulary() -> Vocabulary {
    Vocabulary::closed(&answer_words()).expect("answer words are distinct")
}

#[derive(Clone, Debug)]
pub struct MacModel<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub q: Var,
    pub words: ContextualWords,
    pub reasoning: Reasoning,
}

impl<T: Real> MacModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.encoder_dims();
        let mut params = ParamSet::new();
        encoder::init_input_params(dims, &mut rng, &mut params)?;
        encoder::init_position_params(dims, &mut rng, &mut params)?;
        cell::init_cell_params(config.variant, config.d, &mut rng, &mut params)?;
        encoder::init_output_params(dims, &mut rng, &mut params)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking that every expected tensor
    /// is present with the expected shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = Self::new(config, 0)?;
        for p in expected.params.iter() {
            let got = params.by_name(&p.name)?;
            if got.tensor.shape() != p.tensor.shape() {
                return Err(Error::dim("model parameter", got.tensor.shape(), p.tensor.shape()));
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, found {}",
                expected.params.len(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    /// Builds the graph for `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<Forward> {
        let c = &self.config;
        let enc = EncoderVars::bind(tape, &self.params, c.p)?;
        let cellv = CellVars::bind(tape, &self.params, c.variant)?;
        let (words, q) = encoder::encode_question(tape, &enc, &batch.tokens)?;
        let grid = tape.constant(batch.grids.clone());
        let kb = encoder::project_knowledge_base(tape, &enc, grid, c.h, c.w)?;
        let queries = (1..=c.p)
            .map(|i| encoder::position_project(tape, &enc, q, i))
            .collect::<Result<Vec<_>>>()?;
        let reasoning = cell::reason(tape, &cellv, &words, &queries, &kb)?;
        let logits = encoder::output_unit(tape, &enc, reasoning.memory.0, q)?;
        Ok(Forward {
            logits,
            q,
            words,
            reasoning,
        })
    }

    /// Mean cross-entropy of the batch, with the forward handles.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<(Var, Forward)> {
        let fwd = self.forward(tape, batch)?;
        let loss = tape.cross_entropy_logits(fwd.logits, &batch.labels)?;
        Ok((loss, fwd))
    }

    /// Arg-max answer indices; ties go to the lower index.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch)?;
        Ok(argmax_rows(tape.value(fwd.logits)))
    }

    /// Predictions together with per-sample attention traces.
    pub fn trace(&self, batch: &Batch<T>) -> Result<Vec<(usize, Vec<StepTrace>)>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch)?;
        let preds = argmax_rows(tape.value(fwd.logits));
        Ok(preds
            .into_iter()
            .enumerate()
            .map(|(i, p)| (p, cell::extract_traces(&tape, &fwd.reasoning, i, batch.tokens[i].len())))
            .collect())
    }
}

pub(crate) fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A sample in index form, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub scene_id: String,
    pub category: Category,
    pub tokens: Vec<usize>,
    /// Row-major `[H·W × FEATURE_WIDTH]` features.
    pub grid: Vec<f64>,
    pub label: usize,
}

/// Encodes samples against their scenes. Unknown question words are an
/// error; so are answers outside the answer vocabulary.
pub fn encode_samples(
    samples: &[QASample],
    scenes: &HashMap<&str, &Scene>,
    vocab: &Vocabulary,
    answers: &Vocabulary,
) -> Result<Vec<EncodedSample>> {
    let mut grids: HashMap<&str, Vec<f64>> = HashMap::new();
    samples
        .iter()
        .map(|s| {
            let scene = scenes
                .get(s.scene_id.as_str())
                .ok_or_else(|| Error::contract(format!("sample {} references unknown scene {}", s.id, s.scene_id)))?;
            let grid = grids
                .entry(scene.id.as_str())
                .or_insert_with(|| render_feature_grid(scene).data)
                .clone();
            let label = answers
                .get(&s.answer)
                .ok_or_else(|| Error::contract(format!("answer {:?} of {} not in answer vocabulary", s.answer, s.id)))?;
            Ok(EncodedSample {
                id: s.id.clone(),
                scene_id: s.scene_id.clone(),
                category: s.category,
                tokens: vocab.encode(&s.tokens, false)?,
                grid,
                label,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Batch<T: Real = f64> {
    pub tokens: Vec<Vec<usize>>,
    /// `[B × H·W × d_in]`.
    pub grids: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&EncodedSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
        let cells = first.grid.len() / FEATURE_WIDTH;
        let mut data = Vec::with_capacity(samples.len() * first.grid.len());
        for s in samples {
            if s.grid.len() != first.grid.len() {
                return Err(Error::dim("batch grid", &[s.grid.len()], &[first.grid.len()]));
            }
            data.extend(s.grid.iter().map(|&x| T::from_f64_lossy(x)));
        }
        Ok(Self {
            tokens: samples.iter().map(|s| s.tokens.clone()).collect(),
            grids: Tensor::new([samples.len(), cells, FEATURE_WIDTH], data)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Random two-sample batch for checks on tiny models: token lengths 3 and
/// 5, dense uniform grid features in `[-1, 1)`.
pub fn random_probe_batch<R: rand::Rng>(config: &ModelConfig, rng: &mut R) -> Batch<f64> {
    let reserved = crate::encoder::UNK + 1;
    let tokens: Vec<Vec<usize>> = [3usize, 5]
        .iter()
        .map(|&n| (0..n).map(|_| rng.gen_range(reserved..config.vocab.max(reserved + 1))).collect())
        .collect();
    let cells = config.h * config.w;
    let data = (0..2 * cells * config.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Batch {
        tokens,
        grids: Tensor::new([2, cells, config.d_in], data).expect("shape matches data"),
        labels: (0..2).map(|_| rng.gen_range(0..config.answers)).collect(),
    }
}

/// End-to-end central-difference check of the loss gradient on a tiny model
/// (`3×3` grid) with all parameters jittered away from their initial
/// zeros. `n_coords` coordinates are drawn uniformly over all parameters
/// after one coordinate from each tensor.
pub fn model_gradient_check(
    variant: MacVariant,
    d: usize,
    p: usize,
    n_coords: usize,
    seed: u64,
) -> Result<crate::tensor::FiniteDifference> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig::for_corpora(variant, d, p, 3, 3);
    let mut model = MacModel::<f64>::new(config, seed)?;
    for prm in model.params.iter_mut() {
        prm.tensor
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    let batch = random_probe_batch(&config, &mut rng);
    let mut tape = Tape::new();
    let (loss, _) = model.loss(&mut tape, &batch)?;
    model.params.zero_grad();
    tape.backward_into(loss, &mut model.params)?;
    drop(tape);

    let ids: Vec<_> = model.params.ids().collect();
    let mut coords: Vec<_> = ids.iter().map(|&id| (id, 0)).collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| model.params.get(id).tensor.numel()).collect();
    let total: usize = sizes.iter().sum();
    while coords.len() < n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        coords.push((ids[k], flat));
    }
    let cfg = model.config;
    crate::tensor::FiniteDifference::check(&mut model.params, &coords, 1e-5, |params| {
        let probe = MacModel {
            config: cfg,
            params: params.clone(),
        };
        let mut tape = Tape::new();
        let (loss, _) = probe.loss(&mut tape, &batch)?;
        tape.value(loss).item()
    })
}
