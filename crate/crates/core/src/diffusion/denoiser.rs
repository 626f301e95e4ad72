//! Transformer denoiser over the three-token sequence `[S_0, R_0, X_n]`.
//!
//! Tokens receive a learned slot embedding and a learned timestep embedding,
//! pass through an input projection, a stack of pre-norm encoder layers with
//! single-head attention restricted to each three-token group, a final
//! normalization and an output projection. Row `2` of each group is the
//! clean-target prediction, row `0` the reconstructed subject.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const SLOT_SUBJECT: usize = 0;
pub const SLOT_RELATION: usize = 1;
pub const SLOT_TARGET: usize = 2;
pub const TOKENS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub attn_out: Matrix,
    pub ff_in: Matrix,
    pub ff_in_bias: Matrix,
    pub ff_out: Matrix,
    pub ff_out_bias: Matrix,
}

impl EncoderLayer {
    fn init<R: Rng + ?Sized>(dim: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            query: Matrix::xavier(dim, dim, rng),
            key: Matrix::xavier(dim, dim, rng),
            value: Matrix::xavier(dim, dim, rng),
            attn_out: Matrix::xavier(dim, dim, rng),
            ff_in: Matrix::xavier(dim, ff, rng),
            ff_in_bias: Matrix::zeros(1, ff),
            ff_out: Matrix::xavier(ff, dim, rng),
            ff_out_bias: Matrix::zeros(1, dim),
        }
    }

    const NAMES: [&'static str; 8] = [
        "query", "key", "value", "attn_out", "ff_in", "ff_in_bias", "ff_out", "ff_out_bias",
    ];

    fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.attn_out,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attn_out,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }
}

/// Denoiser weights φ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    /// `3 × d`
    pub slot: Matrix,
    /// `N × d`, row `n - 1` for step `n`.
    pub time: Matrix,
    pub input: Matrix,
    pub input_bias: Matrix,
    pub layers: Vec<EncoderLayer>,
    pub output: Matrix,
    pub output_bias: Matrix,
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, steps: usize, num_layers: usize, rng: &mut R) -> Self {
        let ff = 2 * dim;
        Self {
            slot: Matrix::gaussian(TOKENS, dim, 0.02, rng),
            time: Matrix::gaussian(steps, dim, 0.02, rng),
            input: Matrix::xavier(dim, dim, rng),
            input_bias: Matrix::zeros(1, dim),
            layers: (0..num_layers).map(|_| EncoderLayer::init(dim, ff, rng)).collect(),
            output: Matrix::xavier(dim, dim, rng),
            output_bias: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.slot.cols()
    }

    pub fn steps(&self) -> usize {
        self.time.rows()
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("slot".to_string(), &self.slot),
            ("time".to_string(), &self.time),
            ("input".to_string(), &self.input),
            ("input_bias".to_string(), &self.input_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in EncoderLayer::NAMES.iter().zip(l.tensors()) {
                out.push((format!("enc{i}.{name}"), m));
            }
        }
        out.push(("output".to_string(), &self.output));
        out.push(("output_bias".to_string(), &self.output_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.slot, &mut self.time, &mut self.input, &mut self.input_bias];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.output);
        out.push(&mut self.output_bias);
        out
    }

    pub fn from_named(mut named: BTreeMap<String, Matrix>) -> Result<Self> {
        let mut take = |name: &str| {
            named
                .remove(name)
                .ok_or_else(|| Error::Contract(format!("missing tensor {name}")))
        };
        let slot = take("slot")?;
        let time = take("time")?;
        let input = take("input")?;
        let input_bias = take("input_bias")?;
        let output = take("output")?;
        let output_bias = take("output_bias")?;
        let mut layers = Vec::new();
        while named.contains_key(&format!("enc{}.query", layers.len())) {
            let i = layers.len();
            let mut get = |n: &str| {
                named
                    .remove(&format!("enc{i}.{n}"))
                    .ok_or_else(|| Error::Contract(format!("missing tensor enc{i}.{n}")))
            };
            layers.push(EncoderLayer {
                query: get("query")?,
                key: get("key")?,
                value: get("value")?,
                attn_out: get("attn_out")?,
                ff_in: get("ff_in")?,
                ff_in_bias: get("ff_in_bias")?,
                ff_out: get("ff_out")?,
                ff_out_bias: get("ff_out_bias")?,
            });
        }
        let params = Self {
            slot,
            time,
            input,
            input_bias,
            layers,
            output,
            output_bias,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.slot.rows() != TOKENS {
            return Err(Error::Contract("slot table must have three rows".into()));
        }
        let mut expect = vec![
            ("time", &self.time, (self.steps(), d)),
            ("input", &self.input, (d, d)),
            ("input_bias", &self.input_bias, (1, d)),
            ("output", &self.output, (d, d)),
            ("output_bias", &self.output_bias, (1, d)),
        ];
        for l in &self.layers {
            let ff = l.ff_in.cols();
            expect.extend([
                ("query", &l.query, (d, d)),
                ("key", &l.key, (d, d)),
                ("value", &l.value, (d, d)),
                ("attn_out", &l.attn_out, (d, d)),
                ("ff_in", &l.ff_in, (d, ff)),
                ("ff_in_bias", &l.ff_in_bias, (1, ff)),
                ("ff_out", &l.ff_out, (ff, d)),
                ("ff_out_bias", &l.ff_out_bias, (1, d)),
            ]);
        }
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Contract(format!(
                    "denoiser tensor {name} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
        }
        if !self.tensors().iter().all(|(_, m)| m.is_finite()) {
            return Err(Error::Numeric("denoiser holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDenoiser {
        let vars = self
            .tensors()
            .into_iter()
            .map(|(_, m)| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        BoundDenoiser {
            vars,
            num_layers: self.layers.len(),
        }
    }
}

/// Tape handles in [`DenoiserParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundDenoiser {
    vars: Vec<Var>,
    num_layers: usize,
}

impl BoundDenoiser {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, i: usize) -> &[Var] {
        &self.vars[4 + 8 * i..4 + 8 * (i + 1)]
    }
}

/// Runs the denoiser over `tokens` (`3B × d`, groups of `[S, R, X]`) with
/// per-group diffusion steps `steps` (each in `1..=N`). Returns `3B × d`.
pub fn denoise_on_tape(tape: &mut Tape, bound: &BoundDenoiser, tokens: Var, steps: &[usize]) -> Var {
    let (rows, _) = tape.shape(tokens);
    assert_eq!(rows, TOKENS * steps.len(), "token rows must be three per step");
    let v = &bound.vars;
    let (slot, time, input, input_bias) = (v[0], v[1], v[2], v[3]);
    let slot_idx: Vec<usize> = (0..rows).map(|i| i % TOKENS).collect();
    let time_idx: Vec<usize> = steps.iter().flat_map(|&n| [n - 1; TOKENS]).collect();
    let slot_rows = tape.gather_rows(slot, slot_idx);
    let time_rows = tape.gather_rows(time, time_idx);
    let x = tape.add(tokens, slot_rows);
    let x = tape.add(x, time_rows);
    let x = tape.matmul(x, input);
    let mut x = tape.add_row(x, input_bias);
    for i in 0..bound.num_layers {
        let w = bound.layer(i);
        let a = tape.layer_norm(x);
        let q = tape.matmul(a, w[0]);
        let k = tape.matmul(a, w[1]);
        let val = tape.matmul(a, w[2]);
        let att = tape.group_attention(q, k, val, TOKENS);
        let att = tape.matmul(att, w[3]);
        x = tape.add(x, att);
        let f = tape.layer_norm(x);
        let f = tape.matmul(f, w[4]);
        let f = tape.add_row(f, w[5]);
        let f = tape.relu(f);
        let f = tape.matmul(f, w[6]);
        let f = tape.add_row(f, w[7]);
        x = tape.add(x, f);
    }
    let n = v.len();
    let x = tape.layer_norm(x);
    let x = tape.matmul(x, v[n - 2]);
    tape.add_row(x, v[n - 1])
}

/// Stacks `[S, R, X]` triples into a `3B × d` token matrix.
pub fn stack_tokens(triples: &[(&[f64], &[f64], &[f64])], dim: usize) -> Matrix {
    let mut m = Matrix::zeros(TOKENS * triples.len(), dim);
    for (b, (s, r, x)) in triples.iter().enumerate() {
        m.set_row(TOKENS * b + SLOT_SUBJECT, s);
        m.set_row(TOKENS * b + SLOT_RELATION, r);
        m.set_row(TOKENS * b + SLOT_TARGET, x);
    }
    m
}

/// Forward-only denoiser evaluation.
pub fn denoise(params: &DenoiserParams, tokens: &Matrix, steps: &[usize]) -> Matrix {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let t = tape.constant(tokens.clone());
    let out = denoise_on_tape(&mut tape, &bound, t, steps);
    tape.value(out).clone()
}
