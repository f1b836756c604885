//! Shared harnesses for the cell tests and the acceptance suite. Everything
//! here is computed with plain `Vec<f64>` loops, independent of the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smac_core::cell::{
    embed_smac_into_mac, extract_traces, init_cell_params, names, reason, CellVars, ContextualWords,
    KnowledgeBase, MacVariant, StepTrace,
};
use smac_core::tensor::{ParamSet, Tape, Tensor, Var};

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Cell weights with every entry, biases and initial states included, drawn
/// at random so that no term silently vanishes.
pub fn random_cell(variant: MacVariant, d: usize, seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    init_cell_params(variant, d, &mut rng, &mut set).unwrap();
    for p in set.iter_mut() {
        for x in p.tensor.data_mut() {
            *x = rng.gen_range(-0.6..0.6);
        }
    }
    set
}

#[derive(Clone, Debug)]
pub struct CellInputs {
    pub batch: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub s: usize,
    pub words: Tensor<f64>,
    pub lengths: Vec<usize>,
    pub queries: Vec<Tensor<f64>>,
    pub kb: Tensor<f64>,
}

impl CellInputs {
    pub fn random(rng: &mut ChaCha8Rng, d: usize, p: usize, h: usize, w: usize, lengths: &[usize]) -> Self {
        let batch = lengths.len();
        let s = *lengths.iter().max().unwrap();
        Self {
            batch,
            d,
            h,
            w,
            s,
            words: random_tensor(rng, &[batch, s, d], 1.0),
            lengths: lengths.to_vec(),
            queries: (0..p).map(|_| random_tensor(rng, &[batch, d], 1.0)).collect(),
            kb: random_tensor(rng, &[batch, h * w, d], 1.0),
        }
    }

    pub fn word(&self, b: usize, s: usize) -> &[f64] {
        let off = (b * self.s + s) * self.d;
        &self.words.data()[off..off + self.d]
    }

    pub fn query(&self, step: usize, b: usize) -> &[f64] {
        &self.queries[step].data()[b * self.d..(b + 1) * self.d]
    }

    pub fn cell(&self, b: usize, n: usize) -> &[f64] {
        let off = (b * self.h * self.w + n) * self.d;
        &self.kb.data()[off..off + self.d]
    }
}

pub struct Bound {
    pub tape: Tape<f64>,
    pub memory: Var,
    pub traces: Vec<Vec<StepTrace>>,
}

/// Runs the tape implementation over `inputs`.
pub fn run_cell(params: &ParamSet<f64>, variant: MacVariant, inputs: &CellInputs) -> Bound {
    let mut tape = Tape::new();
    let cell = CellVars::bind(&mut tape, params, variant).unwrap();
    let cw = ContextualWords {
        words: tape.constant(inputs.words.clone()),
        lengths: inputs.lengths.clone(),
    };
    let queries: Vec<Var> = inputs.queries.iter().map(|q| tape.constant(q.clone())).collect();
    let kb = KnowledgeBase {
        cells: tape.constant(inputs.kb.clone()),
        h: inputs.h,
        w: inputs.w,
    };
    let reasoning = reason(&mut tape, &cell, &cw, &queries, &kb).unwrap();
    let traces = (0..inputs.batch)
        .map(|b| extract_traces(&tape, &reasoning, b, inputs.lengths[b]))
        .collect();
    Bound {
        memory: reasoning.memory.0,
        tape,
        traces,
    }
}

/// Dense row-major matrix pulled out of a parameter set.
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn of(params: &ParamSet<f64>, name: &str) -> Self {
        let t = &params.by_name(name).unwrap().tensor;
        let (rows, cols) = if t.rank() == 2 { (t.shape()[0], t.shape()[1]) } else { (t.numel(), 1) };
        Mat {
            rows,
            cols,
            data: t.data().to_vec(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..self.cols {
                    acc += self.data[r * self.cols + c] * x[c];
                }
                acc
            })
            .collect()
    }
}

pub fn vec_of(params: &ParamSet<f64>, name: &str) -> Vec<f64> {
    params.by_name(name).unwrap().tensor.data().to_vec()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn weighted_sum(weights: &[f64], rows: &[&[f64]]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for (w, row) in weights.iter().zip(rows) {
        for j in 0..d {
            out[j] += w * row[j];
        }
    }
    out
}

/// Scalar re-implementation of the cell equations for one sample.
pub struct Oracle<'a> {
    pub params: &'a ParamSet<f64>,
    pub variant: MacVariant,
}

impl Oracle<'_> {
    fn original(&self) -> bool {
        self.variant == MacVariant::Original
    }

    /// Returns `(c_i, cv)` with `cv` over the valid words only.
    pub fn control(&self, c_prev: &[f64], q: &[f64], words: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
        let p = self.params;
        let w_cq = Mat::of(p, names::W_CQ);
        let cq = if self.original() {
            add(&w_cq.apply(&cat(c_prev, q)), &vec_of(p, names::B_CQ))
        } else {
            add(&add(&w_cq.apply(c_prev), &vec_of(p, names::B_CQ)), q)
        };
        let w_ca = vec_of(p, names::W_CA);
        let b_ca = if self.original() { vec_of(p, names::B_CA)[0] } else { 0.0 };
        let logits: Vec<f64> = words.iter().map(|cw| dot(&w_ca, &hadamard(cw, &cq)) + b_ca).collect();
        let cv = softmax(&logits);
        (weighted_sum(&cv, words), cv)
    }

    /// Returns `(r_i, rv)`.
    pub fn read(&self, m_prev: &[f64], kb: &[&[f64]], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.params;
        let w_ip = Mat::of(p, names::W_IP);
        let b_ip = vec_of(p, names::B_IP);
        let w_ra = vec_of(p, names::W_RA);
        let mut logits = Vec::with_capacity(kb.len());
        for k in kb {
            let i_prime = if self.original() {
                let pm = add(&Mat::of(p, names::W_M).apply(m_prev), &vec_of(p, names::B_M));
                let pk = add(&Mat::of(p, names::W_K).apply(k), &vec_of(p, names::B_K));
                add(&w_ip.apply(&cat(&hadamard(&pm, &pk), k)), &b_ip)
            } else {
                add(&add(&w_ip.apply(&hadamard(m_prev, k)), &b_ip), k)
            };
            let b_ra = if self.original() { vec_of(p, names::B_RA)[0] } else { 0.0 };
            logits.push(dot(&w_ra, &hadamard(&i_prime, c)) + b_ra);
        }
        let rv = softmax(&logits);
        (weighted_sum(&rv, kb), rv)
    }

    pub fn write(&self, r: &[f64], m_prev: &[f64]) -> Vec<f64> {
        let p = self.params;
        let w_rm = Mat::of(p, names::W_RM);
        let joint = if self.original() { cat(r, m_prev) } else { r.to_vec() };
        add(&w_rm.apply(&joint), &vec_of(p, names::B_RM))
    }

    /// Full `p`-step recurrence for sample `b`.
    pub fn run(&self, inputs: &CellInputs, b: usize) -> Vec<StepTrace> {
        let words: Vec<&[f64]> = (0..inputs.lengths[b]).map(|s| inputs.word(b, s)).collect();
        let kb: Vec<&[f64]> = (0..inputs.h * inputs.w).map(|n| inputs.cell(b, n)).collect();
        let mut c = vec_of(self.params, names::C0);
        let mut m = vec_of(self.params, names::M0);
        let mut out = Vec::new();
        for step in 0..inputs.queries.len() {
            let (c_next, cv) = self.control(&c, inputs.query(step, b), &words);
            let (r, rv) = self.read(&m, &kb, &c_next);
            let m_next = self.write(&r, &m);
            c = c_next;
            m = m_next;
            out.push(StepTrace {
                step: step + 1,
                cv,
                rv,
                control: c.clone(),
                memory: m.clone(),
            });
        }
        out
    }
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest elementwise difference across matching trace lists.
pub fn trace_gap(a: &[StepTrace], b: &[StepTrace]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            max_abs(&x.cv, &y.cv)
                .max(max_abs(&x.rv, &y.rv))
                .max(max_abs(&x.control, &y.control))
                .max(max_abs(&x.memory, &y.memory))
        })
        .fold(0.0, f64::max)
}

/// Random mix of lengths in `1..=s` with at least one full-length sample.
pub fn random_lengths(rng: &mut ChaCha8Rng, batch: usize, s: usize) -> Vec<usize> {
    let mut lengths: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=s)).collect();
    lengths[0] = s;
    lengths
}

/// Runs `params` and its embedded MAC counterpart on the same inputs and
/// returns the largest trace or final-memory difference.
pub fn embedding_forward_gap(seed: u64, d: usize, p: usize, h: usize, w: usize, s: usize) -> f64 {
    let smac = random_cell(MacVariant::Simplified, d, seed);
    let mac = embed_smac_into_mac(&smac).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE11B);
    let lengths = random_lengths(&mut rng, 2, s);
    let inputs = CellInputs::random(&mut rng, d, p, h, w, &lengths);
    let a = run_cell(&smac, MacVariant::Simplified, &inputs);
    let b = run_cell(&mac, MacVariant::Original, &inputs);
    let mut gap = max_abs(a.tape.value(a.memory).data(), b.tape.value(b.memory).data());
    for (x, y) in a.traces.iter().zip(&b.traces) {
        gap = gap.max(trace_gap(x, y));
    }
    gap
}

/// Gradient of the probe loss `Σ probe ⊙ m_p` into every cell weight.
fn probe_gradients(params: &mut ParamSet<f64>, variant: MacVariant, inputs: &CellInputs, probe: &Tensor<f64>) {
    params.zero_grad();
    let mut bound = run_cell(params, variant, inputs);
    let weights = bound.tape.constant(probe.clone());
    let prod = bound.tape.mul(bound.memory, weights).unwrap();
    let loss = bound.tape.sum(prod);
    bound.tape.backward_into(loss, params).unwrap();
}

fn left_block(t: &Tensor<f64>, cols: usize) -> Vec<f64> {
    let (rows, width) = (t.shape()[0], t.shape()[1]);
    (0..rows).flat_map(|r| t.data()[r * width..r * width + cols].to_vec()).collect()
}

fn grad_of(params: &ParamSet<f64>, name: &str) -> Vec<f64> {
    let p = params.by_name(name).unwrap();
    p.tensor.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.numel()])
}

/// Largest relative difference between the S-MAC gradient of each shared
/// weight and the gradient of the block of the embedded MAC weight that
/// carries it.
pub fn embedding_gradient_gap(seed: u64, d: usize, p: usize, h: usize, w: usize, s: usize) -> f64 {
    use smac_core::tensor::relative_error;
    let mut smac = random_cell(MacVariant::Simplified, d, seed);
    let mut mac = embed_smac_into_mac(&smac).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AAD);
    let lengths = random_lengths(&mut rng, 2, s);
    let inputs = CellInputs::random(&mut rng, d, p, h, w, &lengths);
    let probe = random_tensor(&mut rng, &[2, d], 1.0);
    probe_gradients(&mut smac, MacVariant::Simplified, &inputs, &probe);
    probe_gradients(&mut mac, MacVariant::Original, &inputs, &probe);

    let mut worst: f64 = 0.0;
    let mut compare = |a: &[f64], b: &[f64]| {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            worst = worst.max(relative_error(*x, *y));
        }
    };
    let blocked = [names::W_CQ, names::W_IP, names::W_RM];
    for (name, _) in smac_core::cell::cell_shapes(MacVariant::Simplified, d) {
        let g_s = grad_of(&smac, name);
        if blocked.contains(&name) {
            let mut full = mac.by_name(name).unwrap().tensor.clone();
            let g = grad_of(&mac, name);
            full.data_mut().copy_from_slice(&g);
            compare(&g_s, &left_block(&full, d));
        } else {
            compare(&g_s, &grad_of(&mac, name));
        }
    }
    for name in [names::C0, names::M0] {
        compare(&grad_of(&smac, name), &grad_of(&mac, name));
    }
    worst
}

/// Perturbs both attention-logit biases of a random original cell and
/// returns the largest resulting trace difference.
pub fn bias_shift_gap(seed: u64, d: usize, p: usize, h: usize, w: usize, s: usize) -> f64 {
    let base = random_cell(MacVariant::Original, d, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let lengths = random_lengths(&mut rng, 2, s);
    let inputs = CellInputs::random(&mut rng, d, p, h, w, &lengths);
    let mut shifted = base.clone();
    for name in [names::B_CA, names::B_RA] {
        let shift = rng.gen_range(-5.0..5.0);
        shifted.by_name_mut(name).unwrap().tensor.data_mut()[0] += shift;
    }
    let a = run_cell(&base, MacVariant::Original, &inputs);
    let b = run_cell(&shifted, MacVariant::Original, &inputs);
    a.traces
        .iter()
        .zip(&b.traces)
        .map(|(x, y)| trace_gap(x, y))
        .fold(0.0, f64::max)
}

pub mod grid {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use smac_core::microgen::{
        AttrKind, Color, CompareOp, Filter, Material, ObjectSpec, Program, Relation, Scene, Shape, Size,
    };

    /// The color-shape constraint table written out by hand: condition A
    /// forbids these colors on cylinders and the complementary four on cubes;
    /// condition B swaps the two lists. Spheres are unconstrained.
    pub fn violates(condition: &str, shape: Shape, color: Color) -> bool {
        let first_four = ["gray", "blue", "brown", "yellow"].contains(&color.word());
        match (condition, shape.word()) {
            ("cogent-a", "cylinder") | ("cogent-b", "cube") => first_four,
            ("cogent-a", "cube") | ("cogent-b", "cylinder") => !first_four,
            _ => false,
        }
    }

    /// Every object satisfying the attribute and spatial constraints, by
    /// direct enumeration. `None` when a relational anchor is not unique.
    fn select(scene: &Scene, f: &Filter) -> Option<Vec<usize>> {
        let anchor = match &f.relation {
            Some((rel, a)) => match select(scene, a)?.as_slice() {
                [i] => Some((*rel, *i)),
                _ => return None,
            },
            None => None,
        };
        let mut out = Vec::new();
        for (i, o) in scene.objects.iter().enumerate() {
            let mut ok = true;
            let wants = [
                (f.size.map(|x| x.word()), AttrKind::Size),
                (f.color.map(|x| x.word()), AttrKind::Color),
                (f.material.map(|x| x.word()), AttrKind::Material),
                (f.shape.map(|x| x.word()), AttrKind::Shape),
            ];
            for (want, attr) in wants {
                if let Some(w) = want {
                    ok &= o.attribute_word(attr) == w;
                }
            }
            if let Some((rel, j)) = anchor {
                let a = &scene.objects[j];
                ok &= i != j
                    && match rel {
                        Relation::LeftOf => o.col < a.col,
                        Relation::RightOf => o.col > a.col,
                        Relation::InFrontOf => o.row > a.row,
                        Relation::Behind => o.row < a.row,
                    };
            }
            if ok {
                out.push(i);
            }
        }
        Some(out)
    }

    fn single<'a>(scene: &'a Scene, f: &Filter) -> Option<&'a ObjectSpec> {
        match select(scene, f)?.as_slice() {
            [i] => Some(&scene.objects[*i]),
            _ => None,
        }
    }

    fn yes(b: bool) -> String {
        (if b { "yes" } else { "no" }).to_string()
    }

    /// Second, deliberately naive evaluator for question programs.
    pub fn brute_force_answer(scene: &Scene, program: &Program) -> Option<String> {
        Some(match program {
            Program::Exist(f) => yes(!select(scene, f)?.is_empty()),
            Program::Count(f) => select(scene, f)?.len().to_string(),
            Program::CompareInteger { op, left, right } => {
                let (l, r) = (select(scene, left)?.len(), select(scene, right)?.len());
                yes(match op {
                    CompareOp::More => l > r,
                    CompareOp::Fewer => l < r,
                    CompareOp::Same => l == r,
                })
            }
            Program::QueryAttribute { attr, referent } => single(scene, referent)?.attribute_word(*attr).to_string(),
            Program::CompareAttribute { attr, left, right } => {
                let (l, r) = (single(scene, left)?, single(scene, right)?);
                yes(l.attribute_word(*attr) == r.attribute_word(*attr))
            }
        })
    }

    fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
        xs[rng.gen_range(0..xs.len())]
    }

    /// Random filter over the full attribute space, often sparse enough to
    /// match several objects and sometimes carrying a spatial hop.
    pub fn random_filter(rng: &mut ChaCha8Rng, depth: usize) -> Filter {
        Filter {
            size: rng.gen_bool(0.4).then(|| pick(rng, Size::ALL)),
            color: rng.gen_bool(0.4).then(|| pick(rng, Color::ALL)),
            material: rng.gen_bool(0.4).then(|| pick(rng, Material::ALL)),
            shape: rng.gen_bool(0.5).then(|| pick(rng, Shape::ALL)),
            relation: (depth > 0 && rng.gen_bool(0.3))
                .then(|| (pick(rng, &Relation::ALL), Box::new(random_filter(rng, depth - 1)))),
        }
    }

    pub fn random_program(rng: &mut ChaCha8Rng) -> Program {
        let f = |rng: &mut ChaCha8Rng| random_filter(rng, 1);
        match rng.gen_range(0..5) {
            0 => Program::Exist(f(rng)),
            1 => Program::Count(f(rng)),
            2 => Program::CompareInteger {
                op: pick(rng, &[CompareOp::More, CompareOp::Fewer, CompareOp::Same]),
                left: f(rng),
                right: f(rng),
            },
            3 => Program::QueryAttribute {
                attr: pick(rng, &AttrKind::ALL),
                referent: f(rng),
            },
            _ => Program::CompareAttribute {
                attr: pick(rng, &AttrKind::ALL),
                left: f(rng),
                right: f(rng),
            },
        }
    }

    /// Scene with objects at random distinct cells and unconstrained
    /// attributes.
    pub fn random_scene(rng: &mut ChaCha8Rng, h: usize, w: usize, max_objects: usize) -> Scene {
        let n = rng.gen_range(0..=max_objects);
        let mut cells: Vec<usize> = (0..h * w).collect();
        let mut objects = Vec::new();
        for _ in 0..n {
            let cell = cells.swap_remove(rng.gen_range(0..cells.len()));
            objects.push(ObjectSpec {
                size: pick(rng, Size::ALL),
                shape: pick(rng, Shape::ALL),
                material: pick(rng, Material::ALL),
                color: pick(rng, Color::ALL),
                row: cell / w,
                col: cell % w,
            });
        }
        Scene {
            id: "random".into(),
            seed: 0,
            h,
            w,
            objects,
            condition: "clevr".into(),
        }
    }

    /// Oracle and brute force agree on `n` random pairs, counting an
    /// ambiguous referent as agreement only if both reject it. Returns the
    /// number of disagreements.
    pub fn oracle_disagreements(seed: u64, n: usize) -> usize {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bad = 0;
        for _ in 0..n {
            let scene = random_scene(&mut rng, 4, 4, 8);
            let program = random_program(&mut rng);
            let fast = smac_core::microgen::answer_oracle(&scene, &program).ok();
            if fast != brute_force_answer(&scene, &program) {
                bad += 1;
            }
        }
        bad
    }
}
