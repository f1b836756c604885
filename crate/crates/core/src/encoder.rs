//! Input and output units around the reasoning cell: the bidirectional LSTM
//! question encoder, the knowledge-base projection, the per-step question
//! projections and the answer classifier.

use std::collections::HashMap;

use rand::Rng;

use crate::cell::{ContextualWords, KnowledgeBase};
use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, ParamSet, Real, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token ↔ index map. Question vocabularies reserve index 0 for padding and
/// 1 for unknown tokens; answer vocabularies are closed and reserve nothing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    reserved: usize,
}

impl Vocabulary {
    pub fn with_reserved<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut all = vec!["<pad>".to_string(), "<unk>".to_string()];
        all.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::build(all, 2)
    }

    pub fn closed<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        Self::build(words.iter().map(|w| w.as_ref().to_string()).collect(), 0)
    }

    fn build(tokens: Vec<String>, reserved: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            reserved,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn reserved(&self) -> usize {
        self.reserved
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved entries, in index order.
    pub fn words(&self) -> &[String] {
        &self.tokens[self.reserved..]
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i >= self.reserved)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Maps tokens to indices. Unknown tokens become [`UNK`] when
    /// `allow_unknown` is set and the vocabulary reserves it, and are an
    /// error otherwise.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], allow_unknown: bool) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                match self.get(t) {
                    Some(i) => Ok(i),
                    None if allow_unknown && self.reserved > UNK => Ok(UNK),
                    None => Err(Error::contract(format!("token {t:?} not in vocabulary"))),
                }
            })
            .collect()
    }
}

/// Sizes of everything outside the cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub d: usize,
    pub p: usize,
    pub d_in: usize,
    pub answers: usize,
}

pub mod names {
    pub const EMBEDDING: &str = "input.embedding";
    pub const KB_W: &str = "input.kb.W";
    pub const KB_B: &str = "input.kb.b";
    pub const OUT_W1: &str = "output.W_1";
    pub const OUT_B1: &str = "output.b_1";
    pub const OUT_W2: &str = "output.W_2";
    pub const OUT_B2: &str = "output.b_2";

    pub fn lstm(direction: &str, part: &str) -> String {
        format!("input.lstm_{direction}.{part}")
    }

    pub fn pos_u(step: usize) -> String {
        format!("pos.U_{step}")
    }

    pub fn pos_b(step: usize) -> String {
        format!("pos.b_{step}")
    }
}

pub(crate) const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

/// Allocates the question encoder and knowledge-base projection.
pub fn init_input_params<T: Real, R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R, params: &mut ParamSet<T>) -> Result<()> {
    let d = dims.d;
    let h = d / 2;
    params.insert(names::EMBEDDING, xavier_uniform(rng, dims.vocab, d), false)?;
    for dir in DIRECTIONS {
        params.insert(names::lstm(dir, "W_ih"), xavier_uniform(rng, 4 * h, d), false)?;
        params.insert(names::lstm(dir, "W_hh"), xavier_uniform(rng, 4 * h, h), false)?;
        // Forget-gate bias starts at one.
        let mut b = vec![T::zero(); 4 * h];
        b[h..2 * h].iter_mut().for_each(|x| *x = T::one());
        params.insert(names::lstm(dir, "b"), Tensor::new([4 * h], b)?, false)?;
    }
    params.insert(names::KB_W, xavier_uniform(rng, dims.d_in, d), false)?;
    params.insert(names::KB_B, Tensor::zeros([d]), false)?;
    Ok(())
}

/// Allocates the position-aware projections `U_i`, `b_i` for `i = 1..=p`.
pub fn init_position_params<T: Real, R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R, params: &mut ParamSet<T>) -> Result<()> {
    for i in 1..=dims.p {
        params.insert(names::pos_u(i), xavier_uniform(rng, dims.d, 2 * dims.d), true)?;
        params.insert(names::pos_b(i), Tensor::zeros([dims.d]), true)?;
    }
    Ok(())
}

/// Allocates the two-layer answer classifier over `[m_p, q]`.
pub fn init_output_params<T: Real, R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R, params: &mut ParamSet<T>) -> Result<()> {
    let d = dims.d;
    params.insert(names::OUT_W1, xavier_uniform(rng, d, 3 * d), false)?;
    params.insert(names::OUT_B1, Tensor::zeros([d]), false)?;
    params.insert(names::OUT_W2, xavier_uniform(rng, dims.answers, d), false)?;
    params.insert(names::OUT_B2, Tensor::zeros([dims.answers]), false)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct LstmVars {
    w_ih: Var,
    w_hh: Var,
    b: Var,
}

/// Encoder, projection and classifier weights bound to a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub d: usize,
    embedding: Var,
    lstm: [LstmVars; 2],
    kb_w: Var,
    kb_b: Var,
    pos: Vec<(Var, Var)>,
    out_w1: Var,
    out_b1: Var,
    out_w2: Var,
    out_b2: Var,
}

impl EncoderVars {
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>, steps: usize) -> Result<Self> {
        let d = params.by_name(names::KB_B)?.tensor.numel();
        let mut bind = |name: &str| tape.param_by_name(params, name);
        let lstm_of = |dir: &str, bind: &mut dyn FnMut(&str) -> Result<Var>| -> Result<LstmVars> {
            Ok(LstmVars {
                w_ih: bind(&names::lstm(dir, "W_ih"))?,
                w_hh: bind(&names::lstm(dir, "W_hh"))?,
                b: bind(&names::lstm(dir, "b"))?,
            })
        };
        let embedding = bind(names::EMBEDDING)?;
        let fwd = lstm_of("fwd", &mut bind)?;
        let bwd = lstm_of("bwd", &mut bind)?;
        let kb_w = bind(names::KB_W)?;
        let kb_b = bind(names::KB_B)?;
        let pos = (1..=steps)
            .map(|i| Ok((bind(&names::pos_u(i))?, bind(&names::pos_b(i))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d,
            embedding,
            lstm: [fwd, bwd],
            kb_w,
            kb_b,
            pos,
            out_w1: bind(names::OUT_W1)?,
            out_b1: bind(names::OUT_B1)?,
            out_w2: bind(names::OUT_W2)?,
            out_b2: bind(names::OUT_B2)?,
        })
    }

    pub fn steps(&self) -> usize {
        self.pos.len()
    }
}

/// One LSTM step on `[B×e]` inputs; rows with `advance[r] == false` keep
/// their previous state.
#[allow(clippy::too_many_arguments)]
fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    lstm: &LstmVars,
    x_proj: Var,
    h: Var,
    c: Var,
    hidden: usize,
    advance: &[bool],
) -> Result<(Var, Var)> {
    let rec = tape.linear(h, lstm.w_hh, None)?;
    let gates = tape.add(x_proj, rec)?;
    let i = tape.slice_last(gates, 0, hidden)?;
    let f = tape.slice_last(gates, hidden, hidden)?;
    let g = tape.slice_last(gates, 2 * hidden, hidden)?;
    let o = tape.slice_last(gates, 3 * hidden, hidden)?;
    let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new);
    let h_new = tape.mul(o, squashed)?;
    if advance.iter().all(|&a| a) {
        return Ok((h_new, c_new));
    }
    Ok((tape.blend_rows(h_new, h, advance)?, tape.blend_rows(c_new, c, advance)?))
}

/// Bidirectional encoding of a batch of token sequences.
///
/// `cw_s = [h→_s, h←_s]` (`d` wide) and `q = [h→_T, h←_1, c→_T, c←_1]`, the final
/// hidden and cell states of both directions (`2d` wide).
pub fn encode_question<T: Real>(tape: &mut Tape<T>, enc: &EncoderVars, batch: &[Vec<usize>]) -> Result<(ContextualWords, Var)> {
    if batch.is_empty() {
        return Err(Error::contract("empty question batch"));
    }
    let vocab = tape.shape(enc.embedding)[0];
    let lengths: Vec<usize> = batch.iter().map(Vec::len).collect();
    if lengths.contains(&0) {
        return Err(Error::contract("empty question"));
    }
    if let Some(&bad) = batch.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::contract(format!("token index {bad} outside vocabulary of {vocab}")));
    }
    let b = batch.len();
    let s = *lengths.iter().max().unwrap();
    let hidden = enc.d / 2;

    // Time-major lookup so each step is a contiguous row block.
    let idx: Vec<usize> = (0..s)
        .flat_map(|t| batch.iter().map(move |q| q.get(t).copied().unwrap_or(PAD)))
        .collect();
    let embedded = tape.gather_rows(enc.embedding, &idx)?;

    let mut outputs: [Vec<Var>; 2] = [Vec::with_capacity(s), Vec::with_capacity(s)];
    let mut finals = Vec::with_capacity(4);
    for (dir, lstm) in enc.lstm.iter().enumerate() {
        let x_proj = tape.linear(embedded, lstm.w_ih, Some(lstm.b))?;
        let zeros = tape.constant(Tensor::zeros([b, hidden]));
        let (mut h, mut c) = (zeros, zeros);
        let order: Vec<usize> = if dir == 0 { (0..s).collect() } else { (0..s).rev().collect() };
        for t in order {
            let advance: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            let xt = tape.slice_rows(x_proj, t * b, b)?;
            (h, c) = lstm_step(tape, lstm, xt, h, c, hidden, &advance)?;
            outputs[dir].push(h);
        }
        if dir == 1 {
            outputs[dir].reverse();
        }
        finals.push((h, c));
    }
    let per_position = (0..s)
        .map(|t| tape.concat_last(outputs[0][t], outputs[1][t]))
        .collect::<Result<Vec<_>>>()?;
    let words = tape.stack(&per_position, 1)?;
    let hs = tape.concat_last(finals[0].0, finals[1].0)?;
    let cs = tape.concat_last(finals[0].1, finals[1].1)?;
    let q = tape.concat_last(hs, cs)?;
    Ok((ContextualWords { words, lengths }, q))
}

/// Per-position affine map of a `[B×(H·W)×d_in]` grid to `d` channels.
pub fn project_knowledge_base<T: Real>(
    tape: &mut Tape<T>,
    enc: &EncoderVars,
    grid: Var,
    h: usize,
    w: usize,
) -> Result<KnowledgeBase> {
    let shape = tape.shape(grid).to_vec();
    let d_in = tape.shape(enc.kb_w)[0];
    if shape.len() != 3 || shape[1] != h * w || shape[2] != d_in {
        return Err(Error::dim("project_knowledge_base", &shape, &[0, h * w, d_in]));
    }
    let rows = shape[0] * shape[1];
    let flat = tape.reshape(grid, [rows, d_in])?;
    let proj = tape.matmul(flat, enc.kb_w)?;
    let proj = tape.add(proj, enc.kb_b)?;
    let cells = tape.reshape(proj, [shape[0], shape[1], enc.d])?;
    Ok(KnowledgeBase { cells, h, w })
}

/// `q_i = U_i q + b_i` for step `i` in `1..=p`.
pub fn position_project<T: Real>(tape: &mut Tape<T>, enc: &EncoderVars, q: Var, step: usize) -> Result<Var> {
    if step == 0 || step > enc.pos.len() {
        return Err(Error::contract(format!("step index {step} outside 1..={}", enc.pos.len())));
    }
    let (u, b) = enc.pos[step - 1];
    tape.linear(q, u, Some(b))
}

/// Answer logits from `[m_p, q]` through affine → ELU → affine.
pub fn output_unit<T: Real>(tape: &mut Tape<T>, enc: &EncoderVars, memory: Var, q: Var) -> Result<Var> {
    let joint = tape.concat_last(memory, q)?;
    let hidden = tape.linear(joint, enc.out_w1, Some(enc.out_b1))?;
    let hidden = tape.elu(hidden);
    tape.linear(hidden, enc.out_w2, Some(enc.out_b2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_reserves_pad_and_unknown() {
        let v = Vocabulary::with_reserved(&["is", "there"]).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.get("is"), Some(2));
        assert_eq!(v.get("<pad>"), None);
        assert_eq!(v.encode(&["there", "zebra"], true).unwrap(), vec![3, UNK]);
        assert!(v.encode(&["zebra"], false).is_err());
        assert_eq!(v.words(), &["is".to_string(), "there".to_string()]);
    }

    #[test]
    fn closed_vocabulary_has_no_fallback() {
        let v = Vocabulary::closed(&["yes", "no"]).unwrap();
        assert_eq!(v.get("no"), Some(1));
        assert!(v.encode(&["maybe"], true).is_err());
        assert!(Vocabulary::closed(&["yes", "yes"]).is_err());
        assert!(Vocabulary::closed(&["two words"]).is_err());
    }
}
