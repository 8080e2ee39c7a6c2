//! Inexact voting over redundant module outputs.
//!
//! Outputs are real-valued vectors; "agreement" between two outputs means
//! every component differs by at most epsilon (Chebyshev distance). The
//! majority and plurality voters cluster outputs by that relation; the
//! median and weighted-average voters combine outputs component-wise.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Voter {
    /// Largest epsilon-agreement cluster wins if it holds a strict
    /// majority of the outputs.
    FormalizedMajority,
    /// Component-wise median (mean of the middle pair for even counts).
    GeneralizedMedian,
    /// Largest epsilon-agreement cluster wins regardless of majority;
    /// ties between distinct clusters yield no consensus.
    FormalizedPlurality,
    /// Weighted arithmetic mean.
    WeightedAverage,
}

impl Voter {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "formalized_majority" | "majority" => Some(Voter::FormalizedMajority),
            "generalized_median" | "median" => Some(Voter::GeneralizedMedian),
            "formalized_plurality" | "plurality" => Some(Voter::FormalizedPlurality),
            "weighted_average" | "average" => Some(Voter::WeightedAverage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoteResult {
    /// The agreed output, plus the indices of inputs that disagree with
    /// it beyond epsilon (reported as faults by the shell).
    Value { value: Vec<f64>, dissenters: Vec<usize> },
    NoConsensus,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VoteError {
    #[error("voting requires at least one output")]
    Empty,
    #[error("output {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("weights must be positive and finite")]
    BadWeights,
}

fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_dims(outputs: &[(Vec<f64>, f64)]) -> Result<usize, VoteError> {
    let Some(first) = outputs.first() else {
        return Err(VoteError::Empty);
    };
    let dim = first.0.len();
    for (i, (v, w)) in outputs.iter().enumerate() {
        if v.len() != dim {
            return Err(VoteError::DimensionMismatch { index: i, expected: dim, got: v.len() });
        }
        if !w.is_finite() || *w <= 0.0 {
            return Err(VoteError::BadWeights);
        }
    }
    Ok(dim)
}

fn dissenters(outputs: &[(Vec<f64>, f64)], value: &[f64], epsilon: f64) -> Vec<usize> {
    outputs
        .iter()
        .enumerate()
        .filter(|(_, (v, _))| chebyshev(v, value) > epsilon)
        .map(|(i, _)| i)
        .collect()
}

/// Votes over weighted output vectors. `epsilon` is the agreement
/// tolerance for the clustering voters and the dissent threshold for all.
pub fn vote(
    voter: Voter,
    outputs: &[(Vec<f64>, f64)],
    epsilon: f64,
) -> Result<VoteResult, VoteError> {
    let dim = check_dims(outputs)?;
    let n = outputs.len();
    let value = match voter {
        Voter::FormalizedMajority | Voter::FormalizedPlurality => {
            // Membership set per candidate: who agrees with it within epsilon.
            let clusters: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| chebyshev(&outputs[i].0, &outputs[j].0) <= epsilon)
                        .collect()
                })
                .collect();
            let best = clusters.iter().map(Vec::len).max().unwrap_or(0);
            let winners: Vec<usize> =
                (0..n).filter(|&i| clusters[i].len() == best).collect();
            let distinct: Vec<&Vec<usize>> = {
                let mut seen: Vec<&Vec<usize>> = Vec::new();
                for &w in &winners {
                    if !seen.contains(&&clusters[w]) {
                        seen.push(&clusters[w]);
                    }
                }
                seen
            };
            match voter {
                Voter::FormalizedMajority => {
                    if best * 2 <= n {
                        return Ok(VoteResult::NoConsensus);
                    }
                }
                _ => {
                    if distinct.len() > 1 {
                        return Ok(VoteResult::NoConsensus); // tied clusters
                    }
                }
            }
            outputs[winners[0]].0.clone()
        }
        Voter::GeneralizedMedian => {
            let mut value = Vec::with_capacity(dim);
            for c in 0..dim {
                let mut col: Vec<f64> = outputs.iter().map(|(v, _)| v[c]).collect();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                value.push(if n % 2 == 1 {
                    col[n / 2]
                } else {
                    (col[n / 2 - 1] + col[n / 2]) / 2.0
                });
            }
            value
        }
        Voter::WeightedAverage => {
            let total: f64 = outputs.iter().map(|(_, w)| w).sum();
            let mut value = vec![0.0; dim];
            for (v, w) in outputs {
                for (acc, x) in value.iter_mut().zip(v) {
                    *acc += w * x;
                }
            }
            for acc in &mut value {
                *acc /= total;
            }
            value
        }
    };
    let dissenters = dissenters(outputs, &value, epsilon);
    Ok(VoteResult::Value { value, dissenters })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unweighted(values: &[f64]) -> Vec<(Vec<f64>, f64)> {
        values.iter().map(|&v| (vec![v], 1.0)).collect()
    }

    #[test]
    fn median_order_statistic() {
        let r = vote(Voter::GeneralizedMedian, &unweighted(&[1.0, 9.0, 4.0]), 0.1).unwrap();
        assert_eq!(r, VoteResult::Value { value: vec![4.0], dissenters: vec![0, 1] });
    }

    #[test]
    fn majority_cluster_wins_and_flags_dissenter() {
        let r = vote(Voter::FormalizedMajority, &unweighted(&[5.0, 5.0, 7.0]), 0.1).unwrap();
        assert_eq!(r, VoteResult::Value { value: vec![5.0], dissenters: vec![2] });
    }

    #[test]
    fn majority_of_singletons_has_no_consensus() {
        let r = vote(Voter::FormalizedMajority, &unweighted(&[1.0, 2.0, 3.0]), 0.1).unwrap();
        assert_eq!(r, VoteResult::NoConsensus);
    }

    #[test]
    fn weighted_average_equal_weights() {
        let r = vote(Voter::WeightedAverage, &unweighted(&[2.0, 4.0]), 10.0).unwrap();
        assert_eq!(r, VoteResult::Value { value: vec![3.0], dissenters: vec![] });
    }

    #[test]
    fn plurality_wins_without_majority_but_ties_fail() {
        // Cluster {1.0, 1.05} of size 2 vs singletons: plurality picks it.
        let r = vote(
            Voter::FormalizedPlurality,
            &unweighted(&[1.0, 1.05, 5.0, 9.0]),
            0.1,
        )
        .unwrap();
        assert!(matches!(r, VoteResult::Value { ref value, .. } if value == &vec![1.0]));
        // Two distinct two-member clusters: tie.
        let r = vote(
            Voter::FormalizedPlurality,
            &unweighted(&[1.0, 1.05, 5.0, 5.05]),
            0.1,
        )
        .unwrap();
        assert_eq!(r, VoteResult::NoConsensus);
    }

    #[test]
    fn median_stays_within_input_envelope() {
        let outputs = vec![
            (vec![1.0, -3.0], 1.0),
            (vec![2.0, 0.0], 1.0),
            (vec![10.0, -1.0], 1.0),
            (vec![4.0, 2.0], 1.0),
        ];
        let VoteResult::Value { value, .. } =
            vote(Voter::GeneralizedMedian, &outputs, 0.1).unwrap()
        else {
            panic!()
        };
        for c in 0..2 {
            let lo = outputs.iter().map(|(v, _)| v[c]).fold(f64::INFINITY, f64::min);
            let hi = outputs.iter().map(|(v, _)| v[c]).fold(f64::NEG_INFINITY, f64::max);
            assert!(value[c] >= lo && value[c] <= hi);
        }
    }

    #[test]
    fn input_validation() {
        assert_eq!(vote(Voter::GeneralizedMedian, &[], 0.1), Err(VoteError::Empty));
        let bad = vec![(vec![1.0], 1.0), (vec![1.0, 2.0], 1.0)];
        assert!(matches!(
            vote(Voter::GeneralizedMedian, &bad, 0.1),
            Err(VoteError::DimensionMismatch { .. })
        ));
        let badw = vec![(vec![1.0], 0.0)];
        assert_eq!(vote(Voter::WeightedAverage, &badw, 0.1), Err(VoteError::BadWeights));
    }
}
