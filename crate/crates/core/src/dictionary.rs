//! Monomial observable library and its analytic Jacobian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Monomials in `n_states` variables of total degree at most `max_degree`.
///
/// Exponents are kept in graded lexicographic order: total degree ascending and,
/// within a degree, lexicographically descending on the exponent vector. The
/// constant monomial is always entry 0 and the raw coordinates follow it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dictionary {
    n_states: usize,
    max_degree: usize,
    exponents: Vec<Vec<u32>>,
}

impl Dictionary {
    pub fn new(n_states: usize, max_degree: usize) -> Self {
        assert!(n_states >= 1, "dictionary needs at least one state");
        let mut exponents = Vec::with_capacity(binomial(n_states + max_degree, max_degree));
        let mut current = vec![0u32; n_states];
        for degree in 0..=max_degree {
            push_compositions(degree as u32, 0, &mut current, &mut exponents);
        }
        Self {
            n_states,
            max_degree,
            exponents,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Number of monomials `N`.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Index of the monomial with the given exponent vector, if present.
    pub fn index_of(&self, exponent: &[u32]) -> Option<usize> {
        self.exponents.iter().position(|e| e.as_slice() == exponent)
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_len("eval_dictionary", self.n_states, x.len())?;
        let powers = self.power_table(x);
        Ok(DVector::from_iterator(
            self.len(),
            self.exponents.iter().map(|e| {
                e.iter()
                    .enumerate()
                    .map(|(i, &p)| powers[i][p as usize])
                    .product::<f64>()
            }),
        ))
    }

    /// `N × n_states` matrix of partial derivatives.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_len("eval_jacobian", self.n_states, x.len())?;
        let powers = self.power_table(x);
        let mut jac = DMatrix::zeros(self.len(), self.n_states);
        for (j, e) in self.exponents.iter().enumerate() {
            for i in 0..self.n_states {
                if e[i] == 0 {
                    continue;
                }
                let mut d = e[i] as f64 * powers[i][e[i] as usize - 1];
                for (k, &p) in e.iter().enumerate() {
                    if k != i {
                        d *= powers[k][p as usize];
                    }
                }
                jac[(j, i)] = d;
            }
        }
        Ok(jac)
    }

    /// Evaluates the dictionary on every column of `xs`, one output column per sample.
    pub fn eval_columns(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("eval_dictionary", self.n_states, xs.nrows())?;
        let mut out = DMatrix::zeros(self.len(), xs.ncols());
        for (k, col) in xs.column_iter().enumerate() {
            let x: Vec<f64> = col.iter().cloned().collect();
            out.set_column(k, &self.eval(&x)?);
        }
        Ok(out)
    }

    /// Checks the stored exponents after deserialization.
    pub fn validate(&self) -> Result<()> {
        let expected = Dictionary::new(self.n_states.max(1), self.max_degree);
        if self.n_states == 0 || expected.exponents != self.exponents {
            return Err(Error::InvalidArtifact {
                path: "dictionary".into(),
                reason: "exponents are not the graded-lex monomial basis".into(),
            });
        }
        Ok(())
    }

    // powers[i][p] = x_i^p, with 0^0 = 1.
    fn power_table(&self, x: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|&xi| {
                let mut row = Vec::with_capacity(self.max_degree + 1);
                let mut acc = 1.0;
                for _ in 0..=self.max_degree {
                    row.push(acc);
                    acc *= xi;
                }
                row
            })
            .collect()
    }
}

fn push_compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let n = current.len();
    if pos == n - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for p in (0..=remaining).rev() {
        current[pos] = p;
        push_compositions(remaining - p, pos + 1, current, out);
    }
    current[pos] = 0;
}

pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Enumerates every exponent vector with entries <= degree and keeps those with
    // total degree <= degree.
    fn brute_force_count(n: usize, degree: usize) -> usize {
        let mut count = 0;
        let total = (degree + 1).pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let mut sum = 0;
            for _ in 0..n {
                sum += c % (degree + 1);
                c /= degree + 1;
            }
            if sum <= degree {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn sizes() {
        assert_eq!(Dictionary::new(2, 5).len(), 21);
        assert_eq!(Dictionary::new(2, 0).len(), 1);
        assert_eq!(Dictionary::new(3, 2).len(), brute_force_count(3, 2));
        assert_eq!(Dictionary::new(3, 2).len(), 10);
        for n in 1..4 {
            for d in 0..6 {
                assert_eq!(Dictionary::new(n, d).len(), brute_force_count(n, d));
                assert_eq!(Dictionary::new(n, d).len(), binomial(n + d, d));
            }
        }
    }

    #[test]
    fn ordering_is_graded_lex() {
        let d = Dictionary::new(2, 2);
        let expected: Vec<Vec<u32>> = vec![
            vec![0, 0],
            vec![1, 0],
            vec![0, 1],
            vec![2, 0],
            vec![1, 1],
            vec![0, 2],
        ];
        assert_eq!(d.exponents(), expected.as_slice());
        let d5 = Dictionary::new(2, 5);
        assert_eq!(d5.exponents().last().unwrap(), &vec![0, 5]);
    }

    #[test]
    fn no_duplicates() {
        let d = Dictionary::new(3, 4);
        let mut seen = std::collections::BTreeSet::new();
        for e in d.exponents() {
            assert!(seen.insert(e.clone()));
        }
    }

    #[test]
    fn eval_examples() {
        let d = Dictionary::new(2, 2);
        assert_eq!(d.eval(&[0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.eval(&[1.0, 1.0]).unwrap().as_slice(), &[1.0; 6]);
        assert_eq!(d.eval(&[2.0, 3.0]).unwrap().as_slice(), &[1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(Dictionary::new(2, 0).eval(&[5.0, -3.0]).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let d = Dictionary::new(2, 2);
        assert!(matches!(d.eval(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(d.jacobian(&[1.0, 2.0, 3.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn jacobian_examples() {
        let lin = Dictionary::new(2, 1);
        let j = lin.jacobian(&[0.7, -4.0]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));

        let quad = Dictionary::new(2, 2);
        let j = quad.jacobian(&[2.0, 3.0]).unwrap();
        let row = quad.index_of(&[1, 1]).unwrap();
        assert_eq!((j[(row, 0)], j[(row, 1)]), (3.0, 2.0));

        let j0 = quad.jacobian(&[0.0, 0.0]).unwrap();
        for (k, e) in quad.exponents().iter().enumerate() {
            let deg: u32 = e.iter().sum();
            let nonzero = j0.row(k).iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, deg == 1, "row {k}");
        }
    }

    #[test]
    fn serde_round_trip() {
        let d = Dictionary::new(2, 3);
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"n_states\":2"));
        let back: Dictionary = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back, d);
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(
            n in 1usize..4,
            degree in 0usize..6,
            raw in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let d = Dictionary::new(n, degree);
            let x = &raw[..n];
            let jac = d.jacobian(x).unwrap();
            let h = 1e-5;
            for i in 0..n {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                let fd = (d.eval(&xp).unwrap() - d.eval(&xm).unwrap()) / (2.0 * h);
                for j in 0..d.len() {
                    prop_assert!((fd[j] - jac[(j, i)]).abs() <= 1e-6, "entry ({j},{i})");
                }
            }
        }

        #[test]
        fn constant_first(n in 1usize..4, degree in 0usize..5, raw in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let d = Dictionary::new(n, degree);
            let v = d.eval(&raw[..n]).unwrap();
            prop_assert_eq!(v[0], 1.0);
            if degree >= 1 {
                for i in 0..n {
                    assert_relative_eq!(v[1 + i], raw[i]);
                }
            }
        }
    }
}
