//! The MAC recurrent reasoning cell in its original form and in the
//! simplified S-MAC form.
//!
//! All unit functions are batched: control and memory states are `[B×d]`,
//! contextual words `[B×S×d]`, and the knowledge base `[B×(H·W)×d]`.
//! A single sample is simply `B = 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MacVariant {
    Original,
    Simplified,
}

impl MacVariant {
    pub const ALL: [MacVariant; 2] = [MacVariant::Original, MacVariant::Simplified];

    pub fn tag(self) -> &'static str {
        match self {
            MacVariant::Original => "mac",
            MacVariant::Simplified => "smac",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            MacVariant::Original => "MAC",
            MacVariant::Simplified => "S-MAC",
        }
    }
}

impl fmt::Display for MacVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MacVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mac" | "original" => Ok(MacVariant::Original),
            "smac" | "s-mac" | "simplified" => Ok(MacVariant::Simplified),
            other => Err(Error::contract(format!("unknown variant {other:?}"))),
        }
    }
}

/// Dimensions shared by the cell and the units around it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellConfig {
    pub d: usize,
    pub p: usize,
    pub h: usize,
    pub w: usize,
    pub s: usize,
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p == 0 || self.h == 0 || self.w == 0 || self.s == 0 {
            return Err(Error::contract(format!("cell dimensions must be positive: {self:?}")));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::contract(format!("hidden size d={} must be even", self.d)));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Parameter names. The prefix before the first `.` is the unit a weight
/// belongs to for counting purposes.
pub mod names {
    pub const W_CQ: &str = "control.W_cq";
    pub const B_CQ: &str = "control.b_cq";
    pub const W_CA: &str = "control.W_ca";
    pub const B_CA: &str = "control.b_ca";
    pub const W_M: &str = "read.W_m";
    pub const B_M: &str = "read.b_m";
    pub const W_IP: &str = "read.W_I'";
    pub const B_IP: &str = "read.b_I'";
    pub const W_RA: &str = "read.W_ra";
    pub const B_RA: &str = "read.b_ra";
    pub const W_RM: &str = "write.W_rm";
    pub const B_RM: &str = "write.b_rm";
    /// Knowledge-base projection of the interaction term in the original
    /// read unit. It is step-independent, so it is grouped with the input
    /// side rather than the read unit.
    pub const W_K: &str = "kb.W_k";
    pub const B_K: &str = "kb.b_k";
    pub const C0: &str = "init.c0";
    pub const M0: &str = "init.m0";
}

/// Shapes of every cell weight, in allocation order.
pub fn cell_shapes(variant: MacVariant, d: usize) -> Vec<(&'static str, Vec<usize>)> {
    use names::*;
    match variant {
        MacVariant::Original => vec![
            (W_CQ, vec![d, 2 * d]),
            (B_CQ, vec![d]),
            (W_CA, vec![1, d]),
            (B_CA, vec![1]),
            (W_M, vec![d, d]),
            (B_M, vec![d]),
            (W_K, vec![d, d]),
            (B_K, vec![d]),
            (W_IP, vec![d, 2 * d]),
            (B_IP, vec![d]),
            (W_RA, vec![1, d]),
            (B_RA, vec![1]),
            (W_RM, vec![d, 2 * d]),
            (B_RM, vec![d]),
        ],
        MacVariant::Simplified => vec![
            (W_CQ, vec![d, d]),
            (B_CQ, vec![d]),
            (W_CA, vec![1, d]),
            (W_IP, vec![d, d]),
            (B_IP, vec![d]),
            (W_RA, vec![1, d]),
            (W_RM, vec![d, d]),
            (B_RM, vec![d]),
        ],
    }
}

/// Allocates the cell weights (Glorot-uniform matrices, zero biases) and the
/// zero-initialized learned initial states.
pub fn init_cell_params<T: Real, R: Rng + ?Sized>(
    variant: MacVariant,
    d: usize,
    rng: &mut R,
    params: &mut ParamSet<T>,
) -> Result<()> {
    for (name, shape) in cell_shapes(variant, d) {
        let t = if shape.len() == 2 {
            crate::tensor::xavier_uniform(rng, shape[0], shape[1])
        } else {
            Tensor::zeros(shape)
        };
        params.insert(name, t, false)?;
    }
    params.insert(names::C0, Tensor::zeros([d]), false)?;
    params.insert(names::M0, Tensor::zeros([d]), false)?;
    Ok(())
}

/// Position-independent parameter counts per unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitCounts {
    pub control: usize,
    pub read: usize,
    pub write: usize,
}

impl UnitCounts {
    pub fn total(&self) -> usize {
        self.control + self.read + self.write
    }
}

/// Closed-form position-independent counts. The knowledge-base projection,
/// the per-step question projections and the initial states are excluded.
pub fn count_parameters(variant: MacVariant, d: usize) -> UnitCounts {
    match variant {
        MacVariant::Original => UnitCounts {
            control: 2 * d * d + 2 * d + 1,
            read: 3 * d * d + 3 * d + 1,
            write: 2 * d * d + d,
        },
        MacVariant::Simplified => UnitCounts {
            control: d * d + 2 * d,
            read: d * d + 2 * d,
            write: d * d + d,
        },
    }
}

/// Counts by walking an allocated parameter set and summing by unit prefix.
pub fn count_allocated<T: Real>(params: &ParamSet<T>) -> UnitCounts {
    let mut counts = UnitCounts {
        control: 0,
        read: 0,
        write: 0,
    };
    for p in params.iter().filter(|p| !p.position_aware) {
        let n = p.tensor.numel();
        match p.name.split('.').next() {
            Some("control") => counts.control += n,
            Some("read") => counts.read += n,
            Some("write") => counts.write += n,
            _ => {}
        }
    }
    counts
}

/// Percentage reduction per unit, rounded to the nearest integer.
pub fn reduction_percent(from: UnitCounts, to: UnitCounts) -> UnitCounts {
    let pct = |a: usize, b: usize| ((1.0 - b as f64 / a as f64) * 100.0).round() as usize;
    UnitCounts {
        control: pct(from.control, to.control),
        read: pct(from.read, to.read),
        write: pct(from.write, to.write),
    }
}

/// Cell weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub variant: MacVariant,
    pub d: usize,
    w_cq: Var,
    b_cq: Var,
    w_ca: Var,
    b_ca: Option<Var>,
    w_m: Option<Var>,
    b_m: Option<Var>,
    w_k: Option<Var>,
    b_k: Option<Var>,
    w_ip: Var,
    b_ip: Var,
    w_ra: Var,
    b_ra: Option<Var>,
    w_rm: Var,
    b_rm: Var,
    c0: Var,
    m0: Var,
}

impl CellVars {
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>, variant: MacVariant) -> Result<Self> {
        use names::*;
        let d = params.by_name(B_CQ)?.tensor.numel();
        for (name, shape) in cell_shapes(variant, d) {
            let p = params.by_name(name)?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::dim("cell parameter", p.tensor.shape(), &shape));
            }
        }
        let original = variant == MacVariant::Original;
        let req = |tape: &mut Tape<T>, name: &str| tape.param_by_name(params, name);
        let opt = |tape: &mut Tape<T>, name: &str| -> Result<Option<Var>> {
            if original {
                tape.param_by_name(params, name).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            variant,
            d,
            w_cq: req(tape, W_CQ)?,
            b_cq: req(tape, B_CQ)?,
            w_ca: req(tape, W_CA)?,
            b_ca: opt(tape, B_CA)?,
            w_m: opt(tape, W_M)?,
            b_m: opt(tape, B_M)?,
            w_k: opt(tape, W_K)?,
            b_k: opt(tape, B_K)?,
            w_ip: req(tape, W_IP)?,
            b_ip: req(tape, B_IP)?,
            w_ra: req(tape, W_RA)?,
            b_ra: opt(tape, B_RA)?,
            w_rm: req(tape, W_RM)?,
            b_rm: req(tape, B_RM)?,
            c0: req(tape, C0)?,
            m0: req(tape, M0)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ControlState(pub Var);

#[derive(Clone, Copy, Debug)]
pub struct MemoryState(pub Var);

/// `[B×S×d]` encoder states with per-sample valid lengths.
#[derive(Clone, Debug)]
pub struct ContextualWords {
    pub words: Var,
    pub lengths: Vec<usize>,
}

/// `[B×(H·W)×d]` feature map, flattened row-major over `(h, w)`.
#[derive(Clone, Copy, Debug)]
pub struct KnowledgeBase {
    pub cells: Var,
    pub h: usize,
    pub w: usize,
}

fn expect_shape<T: Real>(tape: &Tape<T>, v: Var, want: &[usize], op: &'static str) -> Result<()> {
    if tape.shape(v) != want {
        return Err(Error::dim(op, tape.shape(v), want));
    }
    Ok(())
}

fn batch_of<T: Real>(tape: &Tape<T>, v: Var, d: usize, op: &'static str) -> Result<usize> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != d {
        return Err(Error::dim(op, s, &[0, d]));
    }
    Ok(s[0])
}

/// `c_i = Σ_s cv_is · cw_s`, with `cv` the masked softmax of the
/// word-attention logits.
pub fn control_unit<T: Real>(
    tape: &mut Tape<T>,
    cell: &CellVars,
    c_prev: ControlState,
    q_i: Var,
    cw: &ContextualWords,
) -> Result<(ControlState, Var)> {
    let d = cell.d;
    let batch = batch_of(tape, c_prev.0, d, "control_unit")?;
    expect_shape(tape, q_i, &[batch, d], "control_unit")?;
    let ws = tape.shape(cw.words).to_vec();
    if ws.len() != 3 || ws[0] != batch || ws[2] != d || cw.lengths.len() != batch {
        return Err(Error::dim("control_unit", &ws, &[batch, 0, d]));
    }
    if cw.lengths.contains(&0) {
        return Err(Error::contract("control_unit needs at least one contextual word"));
    }
    let s = ws[1];
    let cq = match cell.variant {
        MacVariant::Original => {
            let joint = tape.concat_last(c_prev.0, q_i)?;
            tape.linear(joint, cell.w_cq, Some(cell.b_cq))?
        }
        MacVariant::Simplified => {
            let proj = tape.linear(c_prev.0, cell.w_cq, Some(cell.b_cq))?;
            tape.add(proj, q_i)?
        }
    };
    let inter = tape.mul(cw.words, cq)?;
    let logits = tape.linear(inter, cell.w_ca, cell.b_ca)?;
    let logits = tape.reshape(logits, [batch, s])?;
    let cv = tape.masked_softmax(logits, &cw.lengths)?;
    let weights = tape.reshape(cv, [batch, 1, s])?;
    let c = tape.bmm(weights, cw.words)?;
    let c = tape.reshape(c, [batch, d])?;
    Ok((ControlState(c), cv))
}

/// Spatial attention over the knowledge base guided by the control state;
/// returns the read vector and the `[B×(H·W)]` attention map.
pub fn read_unit<T: Real>(
    tape: &mut Tape<T>,
    cell: &CellVars,
    m_prev: MemoryState,
    kb: &KnowledgeBase,
    c_i: ControlState,
) -> Result<(Var, Var)> {
    let d = cell.d;
    let batch = batch_of(tape, m_prev.0, d, "read_unit")?;
    expect_shape(tape, c_i.0, &[batch, d], "read_unit")?;
    let n = kb.h * kb.w;
    expect_shape(tape, kb.cells, &[batch, n, d], "read_unit")?;
    let k = kb.cells;
    let interaction = match cell.variant {
        MacVariant::Original => {
            let proj_m = tape.linear(m_prev.0, cell.w_m.unwrap(), cell.b_m)?;
            let proj_k = tape.linear(k, cell.w_k.unwrap(), cell.b_k)?;
            let inter = tape.mul(proj_k, proj_m)?;
            let joint = tape.concat_last(inter, k)?;
            tape.linear(joint, cell.w_ip, Some(cell.b_ip))?
        }
        MacVariant::Simplified => {
            let inter = tape.mul(k, m_prev.0)?;
            let proj = tape.linear(inter, cell.w_ip, Some(cell.b_ip))?;
            tape.add(proj, k)?
        }
    };
    let gated = tape.mul(interaction, c_i.0)?;
    let logits = tape.linear(gated, cell.w_ra, cell.b_ra)?;
    let logits = tape.reshape(logits, [batch, n])?;
    let rv = tape.softmax(logits, 1)?;
    let weights = tape.reshape(rv, [batch, 1, n])?;
    let r = tape.bmm(weights, k)?;
    let r = tape.reshape(r, [batch, d])?;
    Ok((r, rv))
}

/// New memory state. The simplified form ignores `m_prev`; it is accepted so
/// both variants share one signature.
pub fn write_unit<T: Real>(
    tape: &mut Tape<T>,
    cell: &CellVars,
    r: Var,
    m_prev: MemoryState,
) -> Result<MemoryState> {
    let d = cell.d;
    let batch = batch_of(tape, m_prev.0, d, "write_unit")?;
    expect_shape(tape, r, &[batch, d], "write_unit")?;
    let m = match cell.variant {
        MacVariant::Original => {
            let joint = tape.concat_last(r, m_prev.0)?;
            tape.linear(joint, cell.w_rm, Some(cell.b_rm))?
        }
        MacVariant::Simplified => tape.linear(r, cell.w_rm, Some(cell.b_rm))?,
    };
    Ok(MemoryState(m))
}

/// Tape handles for one reasoning step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub control: Var,
    pub memory: Var,
    pub word_attention: Var,
    pub spatial_attention: Var,
}

#[derive(Clone, Debug)]
pub struct Reasoning {
    pub memory: MemoryState,
    pub steps: Vec<StepVars>,
}

/// The learned initial states repeated over a batch.
pub fn initial_states<T: Real>(tape: &mut Tape<T>, cell: &CellVars, batch: usize) -> Result<(ControlState, MemoryState)> {
    let zeros = tape.constant(Tensor::zeros([batch, cell.d]));
    let c0 = tape.add(zeros, cell.c0)?;
    let m0 = tape.add(zeros, cell.m0)?;
    Ok((ControlState(c0), MemoryState(m0)))
}

/// Runs `queries.len()` control → read → write iterations. `queries[i]` is
/// the position-projected question for step `i + 1`.
pub fn reason<T: Real>(
    tape: &mut Tape<T>,
    cell: &CellVars,
    cw: &ContextualWords,
    queries: &[Var],
    kb: &KnowledgeBase,
) -> Result<Reasoning> {
    if queries.is_empty() {
        return Err(Error::contract("reasoning needs at least one step"));
    }
    let batch = cw.lengths.len();
    let (mut c, mut m) = initial_states(tape, cell, batch)?;
    let mut steps = Vec::with_capacity(queries.len());
    for &q_i in queries {
        let (c_next, cv) = control_unit(tape, cell, c, q_i, cw)?;
        let (r, rv) = read_unit(tape, cell, m, kb, c_next)?;
        let m_next = write_unit(tape, cell, r, m)?;
        c = c_next;
        m = m_next;
        steps.push(StepVars {
            control: c.0,
            memory: m.0,
            word_attention: cv,
            spatial_attention: rv,
        });
    }
    Ok(Reasoning { memory: m, steps })
}

/// Word and spatial attention for one sample at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Weights over the valid question tokens.
    pub cv: Vec<f64>,
    /// Row-major `H×W` spatial attention.
    pub rv: Vec<f64>,
    pub control: Vec<f64>,
    pub memory: Vec<f64>,
}

pub fn extract_traces<T: Real>(tape: &Tape<T>, reasoning: &Reasoning, sample: usize, length: usize) -> Vec<StepTrace> {
    let row = |v: Var| {
        let t = tape.value(v);
        let width = t.numel() / t.shape()[0];
        t.data()[sample * width..(sample + 1) * width]
            .iter()
            .map(|x| x.to_f64_lossy())
            .collect::<Vec<f64>>()
    };
    reasoning
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut cv = row(s.word_attention);
            cv.truncate(length);
            StepTrace {
                step: i + 1,
                cv,
                rv: row(s.spatial_attention),
                control: row(s.control),
                memory: row(s.memory),
            }
        })
        .collect()
}

/// Builds original-MAC weights that reproduce a simplified cell exactly.
///
/// Every weight outside the cell is copied unchanged. The result is laid out
/// in the same order a freshly initialized original model would be.
pub fn embed_smac_into_mac<T: Real>(smac: &ParamSet<T>) -> Result<ParamSet<T>> {
    use names::*;
    let d = smac.by_name(B_CQ)?.tensor.numel();
    for (name, shape) in cell_shapes(MacVariant::Simplified, d) {
        let p = smac.by_name(name)?;
        if p.tensor.shape() != shape.as_slice() {
            return Err(Error::dim("embed_smac_into_mac", p.tensor.shape(), &shape));
        }
    }
    if smac.id(B_CA).is_ok() || smac.id(W_M).is_ok() {
        return Err(Error::contract("parameter set already holds an original cell"));
    }
    let eye = Tensor::<T>::eye(d);
    let zeros = Tensor::<T>::zeros([d, d]);
    let mut out = ParamSet::new();
    for p in smac.iter() {
        let t = &p.tensor;
        match p.name.as_str() {
            W_CQ => {
                out.insert(W_CQ, hcat(t, &eye), false)?;
            }
            W_CA => {
                out.insert(W_CA, t.clone(), false)?;
                out.insert(B_CA, Tensor::zeros([1]), false)?;
            }
            W_IP => {
                out.insert(W_M, eye.clone(), false)?;
                out.insert(B_M, Tensor::zeros([d]), false)?;
                out.insert(W_K, eye.clone(), false)?;
                out.insert(B_K, Tensor::zeros([d]), false)?;
                out.insert(W_IP, hcat(t, &eye), false)?;
            }
            W_RA => {
                out.insert(W_RA, t.clone(), false)?;
                out.insert(B_RA, Tensor::zeros([1]), false)?;
            }
            W_RM => {
                out.insert(W_RM, hcat(t, &zeros), false)?;
            }
            _ => {
                let mut copy = t.clone();
                copy.clear_grad();
                out.insert(p.name.clone(), copy, p.position_aware)?;
            }
        }
    }
    Ok(out)
}

/// `[A | B]` for two `d×d` blocks.
fn hcat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (rows, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    Tensor::new([rows, ca + cb], data).expect("block shapes")
}
