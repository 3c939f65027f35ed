//! Closed-form scalar-case relational attention: exact forward value and
//! analytic gradients for the width-1 setting where every projection is a
//! scalar. Used as an exact reference for the autodiff engine.
//!
//! For a single query token x' the layer output is
//!
//! ```text
//! G(x') = sum_i s_i (x_i v + rv_i) w,
//! s_i   = exp(x' q (k x_i + rk_i)) / sum_j exp(x' q (k x_j + rk_j))
//! ```
//!
//! The gradients below are derived by differentiating this expression
//! directly (including both branches of ds_j/dx_i: the query token appears
//! among the keys, so perturbing it moves every logit). Before being trusted
//! as a reference, the whole set is validated against central finite
//! differences of `oracle_forward`; only then is it used to judge the tape.

use crate::error::{CoreError, Result};

/// A width-1 relational attention instance: token scalars, which token is
/// the query, the four scalar projections and the per-key relation offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarAttnCase {
    pub tokens: Vec<f64>,
    pub query_index: usize,
    pub query: f64,
    pub key: f64,
    pub value: f64,
    pub output: f64,
    pub rel_key: Vec<f64>,
    pub rel_value: Vec<f64>,
}

/// All seven gradient groups of `G` for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarAttnGradients {
    pub query: f64,
    pub key: f64,
    pub value: f64,
    pub output: f64,
    pub rel_key: Vec<f64>,
    pub rel_value: Vec<f64>,
    pub tokens: Vec<f64>,
}

impl ScalarAttnCase {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(CoreError::Usage("case needs at least one token".into()));
        }
        if self.query_index >= n {
            return Err(CoreError::Usage(format!(
                "query index {} out of range for {} tokens",
                self.query_index, n
            )));
        }
        if self.rel_key.len() != n || self.rel_value.len() != n {
            return Err(CoreError::Usage(
                "relation offsets must have one entry per token".into(),
            ));
        }
        Ok(())
    }

    fn n(&self) -> usize {
        self.tokens.len()
    }

    fn query_token(&self) -> f64 {
        self.tokens[self.query_index]
    }

    /// Softmax weights over the keys, computed with max-subtraction.
    pub fn weights(&self) -> Vec<f64> {
        let xq = self.query_token() * self.query;
        let logits: Vec<f64> = self
            .tokens
            .iter()
            .zip(&self.rel_key)
            .map(|(&x, &rk)| xq * (self.key * x + rk))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// Exact scalar-case forward value.
pub fn oracle_forward(case: &ScalarAttnCase) -> Result<f64> {
    case.validate()?;
    let s = case.weights();
    Ok(case
        .tokens
        .iter()
        .zip(&case.rel_value)
        .zip(&s)
        .map(|((&x, &rv), &si)| si * (x * case.value + rv))
        .sum::<f64>()
        * case.output)
}

/// Analytic gradients of `G` with respect to every input.
pub fn oracle_gradients(case: &ScalarAttnCase) -> Result<ScalarAttnGradients> {
    case.validate()?;
    let n = case.n();
    let (q, k, v, w) = (case.query, case.key, case.value, case.output);
    let xq = case.query_token();
    let s = case.weights();

    // Shared softmax moments.
    let mean_x: f64 = s.iter().zip(&case.tokens).map(|(&si, &x)| si * x).sum();
    let mean_logit_arg: f64 = s
        .iter()
        .zip(case.tokens.iter().zip(&case.rel_key))
        .map(|(&si, (&x, &rk))| si * (k * x + rk))
        .sum();
    // P = sum_i s_i (x_i v + rv_i); G = P w.
    let pooled: f64 = s
        .iter()
        .zip(case.tokens.iter().zip(&case.rel_value))
        .map(|(&si, (&x, &rv))| si * (x * v + rv))
        .sum();

    let d_value = w * mean_x;
    let d_output = pooled;

    let d_key = xq
        * q
        * w
        * s.iter()
            .zip(case.tokens.iter().zip(&case.rel_value))
            .map(|(&si, (&x, &rv))| (x * v + rv) * si * (x - mean_x))
            .sum::<f64>();

    let d_query = xq
        * w
        * s.iter()
            .zip(case.tokens.iter().zip(case.rel_key.iter().zip(&case.rel_value)))
            .map(|(&si, (&x, (&rk, &rv)))| (x * v + rv) * si * (k * x + rk - mean_logit_arg))
            .sum::<f64>();

    let d_rel_key: Vec<f64> = (0..n)
        .map(|i| {
            let vi = case.tokens[i] * v + case.rel_value[i];
            xq * q * w * s[i] * (vi - pooled)
        })
        .collect();

    let d_rel_value: Vec<f64> = s.iter().map(|&si| w * si).collect();

    let mut d_tokens = vec![0.0; n];
    for i in 0..n {
        let vi = case.tokens[i] * v + case.rel_value[i];
        if i != case.query_index {
            // Only logit i moves: ds_j/dx_i = s_j (delta_ij - s_i) x' q k.
            d_tokens[i] = v * w * s[i] + xq * q * k * w * s[i] * (vi - pooled);
        } else {
            // The query token feeds every logit (and its own key twice).
            // da_j/dx_i = q ((1 + delta_ij) k x_j + rk_j).
            let da: Vec<f64> = (0..n)
                .map(|j| {
                    let double = if j == i { 2.0 } else { 1.0 };
                    q * (double * k * case.tokens[j] + case.rel_key[j])
                })
                .collect();
            let mean_da: f64 = s.iter().zip(&da).map(|(&sj, &aj)| sj * aj).sum();
            let softmax_term: f64 = (0..n)
                .map(|j| {
                    let vj = case.tokens[j] * v + case.rel_value[j];
                    vj * s[j] * (da[j] - mean_da)
                })
                .sum();
            d_tokens[i] = v * w * s[i] + w * softmax_term;
        }
    }

    Ok(ScalarAttnGradients {
        query: d_query,
        key: d_key,
        value: d_value,
        output: d_output,
        rel_key: d_rel_key,
        rel_value: d_rel_value,
        tokens: d_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::central_diff;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_case(rng: &mut impl Rng, n: usize) -> ScalarAttnCase {
        ScalarAttnCase {
            tokens: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            query_index: rng.random_range(0..n),
            query: rng.random_range(-1.0..1.0),
            key: rng.random_range(-1.0..1.0),
            value: rng.random_range(-1.0..1.0),
            output: rng.random_range(-1.0..1.0),
            rel_key: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rel_value: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn single_token_ignores_query_and_key() {
        for (q, k) in [(0.0, 0.0), (3.0, -2.0), (100.0, 5.0)] {
            let case = ScalarAttnCase {
                tokens: vec![1.5],
                query_index: 0,
                query: q,
                key: k,
                value: 0.7,
                output: -1.2,
                rel_key: vec![0.4],
                rel_value: vec![0.9],
            };
            let want = (1.5 * 0.7 + 0.9) * -1.2;
            assert_abs_diff_eq!(oracle_forward(&case).unwrap(), want, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_query_means_uniform_mixing() {
        let case = ScalarAttnCase {
            tokens: vec![1.0, -2.0, 0.5, 3.0],
            query_index: 2,
            query: 0.0,
            key: 0.8,
            value: 0.6,
            output: 2.0,
            rel_key: vec![0.1, -0.4, 0.0, 0.9],
            rel_value: vec![0.2, 0.3, -0.1, 0.5],
        };
        let mean: f64 = case
            .tokens
            .iter()
            .zip(&case.rel_value)
            .map(|(&x, &rv)| x * 0.6 + rv)
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(oracle_forward(&case).unwrap(), 2.0 * mean, epsilon = 1e-15);

        // d G / d rel_value_i = w s_i = w / n under uniform weights.
        let grads = oracle_gradients(&case).unwrap();
        for g in &grads.rel_value {
            assert_abs_diff_eq!(g, &(2.0 / 4.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn value_gradient_with_equal_tokens() {
        let c = -1.3;
        let case = ScalarAttnCase {
            tokens: vec![c; 5],
            query_index: 1,
            query: 0.7,
            key: -0.2,
            value: 0.4,
            output: 1.9,
            rel_key: vec![0.0; 5],
            rel_value: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        };
        // d G / d v = w sum_i x_i s_i = w c because the weights sum to one.
        let grads = oracle_gradients(&case).unwrap();
        assert_abs_diff_eq!(grads.value, 1.9 * c, epsilon = 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(1..7);
            let case = random_case(&mut rng, n);
            let total: f64 = case.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(case.weights().iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Validates the closed forms before they are used as a reference:
        // every gradient group against central differences, 100 random cases.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for trial in 0..100 {
            let n = rng.random_range(2..6);
            let case = random_case(&mut rng, n);
            let grads = oracle_gradients(&case).unwrap();

            let rel = 1e-7;
            let abs = 1e-9;
            let check = |got: f64, want: f64, what: &str| {
                let tol = abs + rel * got.abs().max(want.abs());
                assert!(
                    (got - want).abs() <= tol,
                    "trial {trial}: {what}: analytic {got} vs fd {want}"
                );
            };

            let scalar_fields = [
                (grads.query, "query"),
                (grads.key, "key"),
                (grads.value, "value"),
                (grads.output, "output"),
            ];
            for (idx, (got, what)) in scalar_fields.into_iter().enumerate() {
                let fd = central_diff(
                    &[match idx {
                        0 => case.query,
                        1 => case.key,
                        2 => case.value,
                        _ => case.output,
                    }],
                    |p| {
                        let mut c = case.clone();
                        match idx {
                            0 => c.query = p[0],
                            1 => c.key = p[0],
                            2 => c.value = p[0],
                            _ => c.output = p[0],
                        }
                        oracle_forward(&c).unwrap()
                    },
                    1e-6,
                )[0];
                check(got, fd, what);
            }

            let fd_rel_key = central_diff(
                &case.rel_key,
                |p| {
                    let mut c = case.clone();
                    c.rel_key = p.to_vec();
                    oracle_forward(&c).unwrap()
                },
                1e-6,
            );
            for (got, want) in grads.rel_key.iter().zip(&fd_rel_key) {
                check(*got, *want, "rel_key");
            }

            let fd_rel_value = central_diff(
                &case.rel_value,
                |p| {
                    let mut c = case.clone();
                    c.rel_value = p.to_vec();
                    oracle_forward(&c).unwrap()
                },
                1e-6,
            );
            for (got, want) in grads.rel_value.iter().zip(&fd_rel_value) {
                check(*got, *want, "rel_value");
            }

            // Token gradients exercise both branches: the query token is
            // always among the keys.
            let fd_tokens = central_diff(
                &case.tokens,
                |p| {
                    let mut c = case.clone();
                    c.tokens = p.to_vec();
                    oracle_forward(&c).unwrap()
                },
                1e-6,
            );
            for (got, want) in grads.tokens.iter().zip(&fd_tokens) {
                check(*got, *want, "tokens");
            }
        }
    }

    #[test]
    fn saturated_softmax_stays_finite() {
        let case = ScalarAttnCase {
            tokens: vec![50.0, -50.0],
            query_index: 0,
            query: 2.0,
            key: 2.0,
            value: 0.5,
            output: 1.0,
            rel_key: vec![0.0, 0.0],
            rel_value: vec![0.0, 0.0],
        };
        let g = oracle_forward(&case).unwrap();
        assert!(g.is_finite());
        let grads = oracle_gradients(&case).unwrap();
        assert!(grads.tokens.iter().all(|v| v.is_finite()));
    }
}
