//! Adaptive replay: generated representations are mixed into the current
//! entity states, after every aggregation layer or once at the end.

use std::collections::BTreeMap;

use crate::autodiff::{BlendWeight, Tape, Var};
use crate::error::{Error, Result};
use crate::reasoner::{BoundReasoner, LayerHook};
use crate::tensor::Matrix;

/// How replay rows are combined with current rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BalanceMode {
    /// `α·replay + (1-α)·current` with the layer's learned `α`.
    Learned,
    /// Same mixture with a pinned `α`.
    Fixed(f64),
    /// `replay + current`.
    DirectSum,
}

/// Replay vectors for a set of entities, stored row-aligned with `entities`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayInjection {
    entities: Vec<usize>,
    vectors: Matrix,
}

impl ReplayInjection {
    pub fn new(replay: &BTreeMap<usize, Vec<f64>>, dim: usize) -> Result<Self> {
        let mut vectors = Matrix::zeros(replay.len(), dim);
        for (i, (e, v)) in replay.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Contract(format!(
                    "replay vector for entity {e} has width {}, expected {dim}",
                    v.len()
                )));
            }
            vectors.set_row(i, v);
        }
        Ok(Self {
            entities: replay.keys().copied().collect(),
            vectors,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            entities: Vec::new(),
            vectors: Matrix::zeros(0, dim),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn entities(&self) -> &[usize] {
        &self.entities
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if let Some(&e) = self.entities.iter().find(|&&e| e >= rows) {
            return Err(Error::Domain(format!("replay entity {e} outside vocabulary of {rows}")));
        }
        if self.vectors.cols() != cols {
            return Err(Error::Contract(format!(
                "replay width {} differs from representation width {cols}",
                self.vectors.cols()
            )));
        }
        Ok(())
    }

    /// Tape version used during training.
    pub fn apply_on_tape(&self, tape: &mut Tape, h: Var, weight: BlendWeight) -> Result<Var> {
        let (rows, cols) = tape.shape(h);
        self.check(rows, cols)?;
        if self.is_empty() {
            return Ok(h);
        }
        Ok(tape.blend_rows(h, self.vectors.clone(), self.entities.clone(), weight))
    }

    fn apply(&self, h: &Matrix, weight: BlendWeight) -> Result<Matrix> {
        let mut tape = Tape::new();
        let v = tape.constant(h.clone());
        let out = self.apply_on_tape(&mut tape, v, weight)?;
        Ok(tape.value(out).clone())
    }
}

fn fixed_alpha(alpha: f64) -> Result<BlendWeight> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("balance {alpha} outside [0, 1]")));
    }
    Ok(BlendWeight::Fixed(alpha))
}

/// Mixes replay rows into one layer's output with that layer's `α`.
pub fn inject_layer(h: &Matrix, replay: &ReplayInjection, alpha: f64) -> Result<Matrix> {
    replay.apply(h, fixed_alpha(alpha)?)
}

/// Single injection at the final representation.
pub fn inject_final(h: &Matrix, replay: &ReplayInjection, mode: BalanceMode, alpha: f64) -> Result<Matrix> {
    let weight = match mode {
        BalanceMode::DirectSum => BlendWeight::DirectSum,
        BalanceMode::Fixed(a) => fixed_alpha(a)?,
        BalanceMode::Learned => fixed_alpha(alpha)?,
    };
    replay.apply(h, weight)
}

/// Reasoner hook injecting replay after every aggregation layer.
pub struct DarHook<'a> {
    pub replay: &'a ReplayInjection,
    pub mode: BalanceMode,
}

impl LayerHook for DarHook<'_> {
    fn apply(&self, tape: &mut Tape, bound: &BoundReasoner, layer: usize, h: Var) -> Result<Var> {
        let weight = match self.mode {
            BalanceMode::Learned => BlendWeight::Learned(bound.alpha(tape, layer)),
            BalanceMode::Fixed(a) => fixed_alpha(a)?,
            BalanceMode::DirectSum => BlendWeight::DirectSum,
        };
        self.replay.apply_on_tape(tape, h, weight)
    }
}
