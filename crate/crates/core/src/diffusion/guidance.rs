use crate::error::{Error, Result};
use crate::reasoner::{query_vector, ReasonerParams};
use crate::tensor::{dot, Matrix};

/// Differentiable probability of a query's target, as a function of the
/// target's representation.
pub trait GuidanceScorer: Sync {
    fn num_entities(&self) -> usize;

    /// `p(target | subject, relation)` with the target's row replaced by `x`,
    /// and its gradient with respect to `x`.
    fn target_probability(&self, subject: usize, relation: usize, target: usize, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Scores with a frozen reasoner decoder over fixed final entity states.
///
/// Logits are `⟨g(s, r), H_e⟩ / τ`; only the target's row is replaced by the
/// candidate vector, the query vector is computed from the stored states.
#[derive(Clone, Debug)]
pub struct DecoderScorer {
    params: ReasonerParams,
    states: Matrix,
    temperature: f64,
}

impl DecoderScorer {
    pub fn new(params: ReasonerParams, states: Matrix, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!("guidance temperature must be positive, got {temperature}")));
        }
        if states.cols() != params.dim() {
            return Err(Error::Contract("state width differs from reasoner width".into()));
        }
        Ok(Self {
            params,
            states,
            temperature,
        })
    }

    pub fn states(&self) -> &Matrix {
        &self.states
    }
}

impl GuidanceScorer for DecoderScorer {
    fn num_entities(&self) -> usize {
        self.states.rows()
    }

    fn target_probability(&self, subject: usize, relation: usize, target: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.states.rows();
        if subject >= n || target >= n || relation >= self.params.relation.rows() {
            return Err(Error::Domain(format!("guidance query ({subject}, {relation}, {target}) out of range")));
        }
        if x.len() != self.states.cols() {
            return Err(Error::Contract("guidance vector width mismatch".into()));
        }
        let g = query_vector(&self.params, &self.states, subject, relation);
        let tau = self.temperature;
        let mut logits: Vec<f64> = (0..n).map(|e| dot(&g, self.states.row(e)) / tau).collect();
        logits[target] = dot(&g, x) / tau;
        let lse = crate::tensor::log_sum_exp(&logits);
        let p = (logits[target] - lse).exp();
        let c = p * (1.0 - p) / tau;
        Ok((p, g.iter().map(|v| c * v).collect()))
    }
}

/// `γ ∇_x p`, checked for finiteness.
pub fn guidance_step(
    scorer: &dyn GuidanceScorer,
    query: (usize, usize, usize),
    x: &[f64],
    strength: f64,
) -> Result<Vec<f64>> {
    let (_, grad) = scorer.target_probability(query.0, query.1, query.2, x)?;
    let step: Vec<f64> = grad.iter().map(|g| strength * g).collect();
    if step.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite guidance gradient for query {query:?}")));
    }
    Ok(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;
    use crate::rng;

    fn scorer(tau: f64) -> DecoderScorer {
        let vocab = Vocabulary {
            num_entities: 5,
            num_relations: 2,
        };
        let p = ReasonerParams::init(vocab, 4, 1, &mut rng::stream(4, &[]));
        let states = Matrix::gaussian(5, 4, 1.0, &mut rng::stream(5, &[]));
        DecoderScorer::new(p, states, tau).unwrap()
    }

    #[test]
    fn gradient_matches_central_difference() {
        let s = scorer(0.5);
        let x = [0.3, -0.2, 0.9, 0.1];
        let (_, grad) = s.target_probability(1, 2, 3, &x).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut a = x;
            let mut b = x;
            a[j] += h;
            b[j] -= h;
            let fd = (s.target_probability(1, 2, 3, &a).unwrap().0 - s.target_probability(1, 2, 3, &b).unwrap().0) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-7, "{fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let s = scorer(0.5);
        let x = [f64::NAN, 0.0, 0.0, 0.0];
        assert!(matches!(guidance_step(&s, (0, 0, 1), &x, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn bad_temperature() {
        let vocab = Vocabulary {
            num_entities: 2,
            num_relations: 1,
        };
        let p = ReasonerParams::init(vocab, 2, 1, &mut rng::stream(0, &[]));
        assert!(DecoderScorer::new(p, Matrix::zeros(2, 2), 0.0).is_err());
    }
}
