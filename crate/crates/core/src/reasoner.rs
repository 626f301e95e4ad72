//! Snapshot-sequence reasoner: relation-aware mean aggregation layers, a
//! gated recurrence across snapshots and an inner-product decoder.
//!
//! Entity states are evolved over a window of snapshots. Each snapshot runs
//! `L` aggregation layers
//!
//! ```text
//! h'_o = tanh( (1/c_o) Σ_{(s,r,o)} (h_s + r) W_nbr + h_o W_self )
//! ```
//!
//! with `c_o` the in-degree of `o` (1 when isolated), followed by the gate
//! `U = σ(H_prev W_g + b_g)`, `H = U ⊙ H_gcn + (1 - U) ⊙ H_prev`. The first
//! snapshot starts from the static entity table. A [`LayerHook`] may rewrite
//! every layer's output; this is where replay injection attaches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Snapshot, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub neighbor: Matrix,
    pub self_loop: Matrix,
}

/// Trainable reasoner state θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonerParams {
    /// `num_entities × d` static entity table.
    pub entity: Matrix,
    /// `2·num_relations × d`, inverse relations in the upper half.
    pub relation: Matrix,
    pub layers: Vec<LayerWeights>,
    pub gate_weight: Matrix,
    pub gate_bias: Matrix,
    /// `2d × d` affine combiner of subject and relation vectors.
    pub decoder_weight: Matrix,
    pub decoder_bias: Matrix,
    /// `L × 1` replay balance logits, one per evolution layer.
    pub alpha_logits: Matrix,
}

impl ReasonerParams {
    /// Xavier-initialized parameters sized to the global vocabulary.
    pub fn init<R: Rng + ?Sized>(vocab: Vocabulary, dim: usize, num_layers: usize, rng: &mut R) -> Self {
        let layers = (0..num_layers)
            .map(|_| LayerWeights {
                neighbor: Matrix::xavier(dim, dim, rng),
                self_loop: Matrix::xavier(dim, dim, rng),
            })
            .collect();
        Self {
            entity: Matrix::xavier(vocab.num_entities, dim, rng),
            relation: Matrix::xavier(2 * vocab.num_relations, dim, rng),
            layers,
            gate_weight: Matrix::xavier(dim, dim, rng),
            gate_bias: Matrix::zeros(1, dim),
            decoder_weight: Matrix::xavier(2 * dim, dim, rng),
            decoder_bias: Matrix::zeros(1, dim),
            alpha_logits: Matrix::zeros(num_layers, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.entity.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entity.rows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Current per-layer replay balance `σ(alpha_logit)`.
    pub fn alphas(&self) -> Vec<f64> {
        self.alpha_logits.data().iter().map(|&l| crate::tensor::sigmoid(l)).collect()
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("entity".to_string(), &self.entity),
            ("relation".to_string(), &self.relation),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.neighbor"), &l.neighbor));
            out.push((format!("layer{i}.self_loop"), &l.self_loop));
        }
        out.extend([
            ("gate.weight".to_string(), &self.gate_weight),
            ("gate.bias".to_string(), &self.gate_bias),
            ("decoder.weight".to_string(), &self.decoder_weight),
            ("decoder.bias".to_string(), &self.decoder_bias),
            ("alpha_logits".to_string(), &self.alpha_logits),
        ]);
        out
    }

    /// Mutable tensors in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.entity, &mut self.relation];
        for l in &mut self.layers {
            out.push(&mut l.neighbor);
            out.push(&mut l.self_loop);
        }
        out.extend([
            &mut self.gate_weight,
            &mut self.gate_bias,
            &mut self.decoder_weight,
            &mut self.decoder_bias,
            &mut self.alpha_logits,
        ]);
        out
    }

    /// Rebuilds parameters from named tensors, validating every shape
    /// against the vocabulary.
    pub fn from_named(
        vocab: Vocabulary,
        mut named: std::collections::BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        let mut take = |name: &str| {
            named
                .remove(name)
                .ok_or_else(|| Error::Contract(format!("missing tensor {name}")))
        };
        let entity = take("entity")?;
        let relation = take("relation")?;
        let alpha_logits = take("alpha_logits")?;
        let num_layers = alpha_logits.rows();
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            layers.push(LayerWeights {
                neighbor: take(&format!("layer{i}.neighbor"))?,
                self_loop: take(&format!("layer{i}.self_loop"))?,
            });
        }
        let params = Self {
            entity,
            relation,
            layers,
            gate_weight: take("gate.weight")?,
            gate_bias: take("gate.bias")?,
            decoder_weight: take("decoder.weight")?,
            decoder_bias: take("decoder.bias")?,
            alpha_logits,
        };
        params.validate(vocab)?;
        Ok(params)
    }

    pub fn validate(&self, vocab: Vocabulary) -> Result<()> {
        let d = self.dim();
        let mut expect = vec![
            ("entity", &self.entity, (vocab.num_entities, d)),
            ("relation", &self.relation, (2 * vocab.num_relations, d)),
            ("gate.weight", &self.gate_weight, (d, d)),
            ("gate.bias", &self.gate_bias, (1, d)),
            ("decoder.weight", &self.decoder_weight, (2 * d, d)),
            ("decoder.bias", &self.decoder_bias, (1, d)),
            ("alpha_logits", &self.alpha_logits, (self.layers.len(), 1)),
        ];
        for l in &self.layers {
            expect.push(("layer.neighbor", &l.neighbor, (d, d)));
            expect.push(("layer.self_loop", &l.self_loop, (d, d)));
        }
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Contract(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numeric(format!("tensor {name} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Binds every tensor onto `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundReasoner {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let entity = leaf(&self.entity);
        let relation = leaf(&self.relation);
        let layers = self
            .layers
            .iter()
            .map(|l| (leaf(&l.neighbor), leaf(&l.self_loop)))
            .collect();
        BoundReasoner {
            entity,
            relation,
            layers,
            gate_weight: leaf(&self.gate_weight),
            gate_bias: leaf(&self.gate_bias),
            decoder_weight: leaf(&self.decoder_weight),
            decoder_bias: leaf(&self.decoder_bias),
            alpha_logits: leaf(&self.alpha_logits),
        }
    }
}

/// [`ReasonerParams`] bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundReasoner {
    pub entity: Var,
    pub relation: Var,
    pub layers: Vec<(Var, Var)>,
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub decoder_weight: Var,
    pub decoder_bias: Var,
    pub alpha_logits: Var,
}

impl BoundReasoner {
    /// Vars in [`ReasonerParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.entity, self.relation];
        for &(a, b) in &self.layers {
            out.push(a);
            out.push(b);
        }
        out.extend([
            self.gate_weight,
            self.gate_bias,
            self.decoder_weight,
            self.decoder_bias,
            self.alpha_logits,
        ]);
        out
    }

    /// `σ(alpha_logit_l)` as a 1×1 node.
    pub fn alpha(&self, tape: &mut Tape, layer: usize) -> Var {
        let logit = tape.gather_rows(self.alpha_logits, vec![layer]);
        tape.sigmoid(logit)
    }
}

/// Edge lists of one snapshot with precomputed in-degree normalization.
#[derive(Clone, Debug)]
pub struct SnapshotGraph {
    pub timestamp: usize,
    pub num_entities: usize,
    src: Vec<usize>,
    rel: Vec<usize>,
    dst: Vec<usize>,
    inv_degree: Vec<f64>,
}

impl SnapshotGraph {
    pub fn new(snapshot: &Snapshot, num_entities: usize, num_relation_rows: usize) -> Result<Self> {
        let mut src = Vec::with_capacity(snapshot.len());
        let mut rel = Vec::with_capacity(snapshot.len());
        let mut dst = Vec::with_capacity(snapshot.len());
        let mut degree = vec![0usize; num_entities];
        for q in snapshot.facts() {
            if q.subject >= num_entities || q.object >= num_entities || q.relation >= num_relation_rows {
                return Err(Error::Domain(format!("fact {q:?} outside vocabulary")));
            }
            src.push(q.subject);
            rel.push(q.relation);
            dst.push(q.object);
            degree[q.object] += 1;
        }
        let inv_degree = degree.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        Ok(Self {
            timestamp: snapshot.timestamp(),
            num_entities,
            src,
            rel,
            dst,
            inv_degree,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

/// Per-layer transform applied after every aggregation layer.
pub trait LayerHook {
    /// Must return a node shaped like `h`.
    fn apply(&self, tape: &mut Tape, bound: &BoundReasoner, layer: usize, h: Var) -> Result<Var>;
}

/// Leaves every layer unchanged.
pub struct IdentityHook;

impl LayerHook for IdentityHook {
    fn apply(&self, _: &mut Tape, _: &BoundReasoner, _: usize, h: Var) -> Result<Var> {
        Ok(h)
    }
}

/// Tape nodes for the final snapshot's layer outputs and the final state.
#[derive(Clone, Debug)]
pub struct EvolvedVars {
    pub layers: Vec<Var>,
    pub final_state: Var,
}

/// Per-layer entity representations of the last snapshot plus `H_final`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationStack {
    pub layers: Vec<Matrix>,
    pub final_state: Matrix,
}

pub fn rgcn_layer_on_tape(
    tape: &mut Tape,
    h: Var,
    graph: &SnapshotGraph,
    weights: (Var, Var),
    relation: Var,
) -> Var {
    let (w_nbr, w_self) = weights;
    let self_term = tape.matmul(h, w_self);
    let pre = if graph.num_edges() == 0 {
        self_term
    } else {
        let hs = tape.gather_rows(h, graph.src.clone());
        let hr = tape.gather_rows(relation, graph.rel.clone());
        let msg = tape.add(hs, hr);
        let agg = tape.scatter_add_rows(msg, graph.dst.clone(), graph.num_entities);
        let agg = tape.row_scale(agg, graph.inv_degree.clone());
        let nbr = tape.matmul(agg, w_nbr);
        tape.add(nbr, self_term)
    };
    tape.tanh(pre)
}

/// Evolves entity states over `window` (chronological), invoking `hook`
/// after every layer of every snapshot.
pub fn evolve_on_tape(
    tape: &mut Tape,
    bound: &BoundReasoner,
    window: &[&SnapshotGraph],
    hook: Option<&dyn LayerHook>,
) -> Result<EvolvedVars> {
    if window.is_empty() {
        return Err(Error::Contract("evolve needs at least one snapshot".into()));
    }
    let mut state = bound.entity;
    let mut last_layers = Vec::new();
    for graph in window {
        let mut h = state;
        let mut layers = Vec::with_capacity(bound.layers.len());
        for (l, &weights) in bound.layers.iter().enumerate() {
            h = rgcn_layer_on_tape(tape, h, graph, weights, bound.relation);
            if let Some(hook) = hook {
                let shape = tape.shape(h);
                let out = hook.apply(tape, bound, l, h)?;
                if tape.shape(out) != shape {
                    return Err(Error::Contract(format!(
                        "hook at layer {l} returned shape {:?}, expected {shape:?}",
                        tape.shape(out)
                    )));
                }
                h = out;
            }
            layers.push(h);
        }
        let gate_pre = tape.matmul(state, bound.gate_weight);
        let gate_pre = tape.add_row(gate_pre, bound.gate_bias);
        let gate = tape.sigmoid(gate_pre);
        let delta = tape.sub(h, state);
        let gated = tape.mul(gate, delta);
        state = tape.add(state, gated);
        last_layers = layers;
    }
    Ok(EvolvedVars {
        layers: last_layers,
        final_state: state,
    })
}

/// Forward-only evolution.
pub fn evolve(
    params: &ReasonerParams,
    window: &[&SnapshotGraph],
    hook: Option<&dyn LayerHook>,
) -> Result<RepresentationStack> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = evolve_on_tape(&mut tape, &bound, window, hook)?;
    Ok(RepresentationStack {
        layers: out.layers.iter().map(|&v| tape.value(v).clone()).collect(),
        final_state: tape.value(out.final_state).clone(),
    })
}

/// One aggregation layer on plain matrices.
pub fn rgcn_layer(h: &Matrix, graph: &SnapshotGraph, weights: &LayerWeights, relation: &Matrix) -> Result<Matrix> {
    if h.rows() != graph.num_entities {
        return Err(Error::Contract(format!(
            "entity matrix has {} rows, graph has {} entities",
            h.rows(),
            graph.num_entities
        )));
    }
    let d = h.cols();
    if weights.neighbor.shape() != (d, d) || weights.self_loop.shape() != (d, d) || relation.cols() != d {
        return Err(Error::Contract("layer weight shapes do not match entity width".into()));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let wn = tape.constant(weights.neighbor.clone());
    let ws = tape.constant(weights.self_loop.clone());
    let rv = tape.constant(relation.clone());
    let out = rgcn_layer_on_tape(&mut tape, hv, graph, (wn, ws), rv);
    Ok(tape.value(out).clone())
}

fn check_queries(queries: &[(usize, usize)], num_entities: usize, num_relation_rows: usize) -> Result<()> {
    for &(s, r) in queries {
        if s >= num_entities || r >= num_relation_rows {
            return Err(Error::Domain(format!(
                "query ({s}, {r}) outside vocabulary ({num_entities} entities, {num_relation_rows} relation rows)"
            )));
        }
    }
    Ok(())
}

/// Query vectors `g(h_s, r) = [h_s, r] W_dec + b_dec` on the tape.
pub fn query_vectors_on_tape(
    tape: &mut Tape,
    bound: &BoundReasoner,
    h_final: Var,
    queries: &[(usize, usize)],
) -> Var {
    let hs = tape.gather_rows(h_final, queries.iter().map(|q| q.0).collect());
    let hr = tape.gather_rows(bound.relation, queries.iter().map(|q| q.1).collect());
    let cat = tape.concat_cols(hs, hr);
    let g = tape.matmul(cat, bound.decoder_weight);
    tape.add_row(g, bound.decoder_bias)
}

/// Logits `|queries| × num_entities`.
pub fn score_on_tape(
    tape: &mut Tape,
    bound: &BoundReasoner,
    h_final: Var,
    queries: &[(usize, usize)],
) -> Var {
    let g = query_vectors_on_tape(tape, bound, h_final, queries);
    tape.matmul_t(g, h_final)
}

/// Combiner output for a single `(subject, relation)` query.
pub fn query_vector(params: &ReasonerParams, h_final: &Matrix, subject: usize, relation: usize) -> Vec<f64> {
    let d = params.dim();
    let w = &params.decoder_weight;
    let mut g = params.decoder_bias.row(0).to_vec();
    let hs = h_final.row(subject);
    let hr = params.relation.row(relation);
    for (k, &x) in hs.iter().chain(hr).enumerate() {
        if x == 0.0 {
            continue;
        }
        for (gj, &wj) in g.iter_mut().zip(w.row(k)) {
            *gj += x * wj;
        }
    }
    debug_assert_eq!(g.len(), d);
    g
}

/// Unnormalized candidate logits for every query.
pub fn score(params: &ReasonerParams, h_final: &Matrix, queries: &[(usize, usize)]) -> Result<Matrix> {
    check_queries(queries, h_final.rows(), params.relation.rows())?;
    let mut out = Matrix::zeros(queries.len(), h_final.rows());
    for (i, &(s, r)) in queries.iter().enumerate() {
        let g = query_vector(params, h_final, s, r);
        for e in 0..h_final.rows() {
            out[(i, e)] = dot(&g, h_final.row(e));
        }
    }
    Ok(out)
}

/// Training-split graphs of every task, from which history windows are cut.
#[derive(Clone, Debug)]
pub struct TaskGraphs {
    graphs: Vec<SnapshotGraph>,
    empty: SnapshotGraph,
}

impl TaskGraphs {
    pub fn new(stream: &crate::data::TaskStream) -> Result<Self> {
        let n = stream.vocab.num_entities;
        let rel_rows = 2 * stream.vocab.num_relations;
        let graphs = (0..stream.len())
            .map(|t| SnapshotGraph::new(&stream.train_snapshot(t), n, rel_rows))
            .collect::<Result<_>>()?;
        Ok(Self {
            graphs,
            empty: SnapshotGraph::new(&Snapshot::empty(0), n, rel_rows)?,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn get(&self, t: usize) -> &SnapshotGraph {
        &self.graphs[t]
    }

    /// The up-to-`length` graphs strictly before task `t`, used to score
    /// queries at `t`. Task 0 has no history and gets a single empty graph.
    pub fn history(&self, t: usize, length: usize) -> Vec<&SnapshotGraph> {
        let start = t.saturating_sub(length.max(1));
        if start == t {
            return vec![&self.empty];
        }
        self.graphs[start..t].iter().collect()
    }
}
