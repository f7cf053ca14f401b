use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Control-affine plant `ẋ = F(x) + Σ_i u_i G_i(x)`.
#[derive(Clone)]
pub struct Plant {
    name: String,
    n: usize,
    drift: VectorField,
    control_fields: Vec<VectorField>,
}

impl fmt::Debug for Plant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plant")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.control_fields.len())
            .finish()
    }
}

impl Plant {
    pub fn control_affine(
        name: impl Into<String>,
        n: usize,
        drift: VectorField,
        control_fields: Vec<VectorField>,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            drift,
            control_fields,
        }
    }

    /// `ẋ1 = x2`, `ẋ2 = (1 − x1²) x2 − x1 + u`.
    pub fn van_der_pol() -> Self {
        Self::control_affine(
            "van_der_pol",
            2,
            Arc::new(|x| DVector::from_vec(vec![x[1], (1.0 - x[0] * x[0]) * x[1] - x[0]])),
            vec![unit_input(2, 1)],
        )
    }

    /// `ẋ1 = x2`, `ẋ2 = 0.01 x2 − sin x1 + u`, note the anti-damping sign.
    pub fn pendulum() -> Self {
        Self::control_affine(
            "pendulum",
            2,
            Arc::new(|x| DVector::from_vec(vec![x[1], 0.01 * x[1] - x[0].sin()])),
            vec![unit_input(2, 1)],
        )
    }

    /// `ẋ = A x + Σ_i u_i b_i`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let n = a.nrows();
        let drift_a = a.clone();
        let fields = (0..b.ncols())
            .map(|i| {
                let col: DVector<f64> = b.column(i).into_owned();
                Arc::new(move |_: &DVector<f64>| col.clone()) as VectorField
            })
            .collect();
        Self::control_affine("linear", n, Arc::new(move |x| &drift_a * x), fields)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.control_fields.len()
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn control_field(&self, channel: usize, x: &DVector<f64>) -> DVector<f64> {
        (self.control_fields[channel])(x)
    }

    /// `f(x, u) = F(x) + G(x) u`.
    pub fn rhs(&self, x: &DVector<f64>, u: &[f64]) -> DVector<f64> {
        let mut dx = self.drift(x);
        for (field, &ui) in self.control_fields.iter().zip(u) {
            if ui != 0.0 {
                dx.axpy(ui, &field(x), 1.0);
            }
        }
        dx
    }

    pub fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        check_len("plant state", self.n, x.len())
    }
}

fn unit_input(n: usize, index: usize) -> VectorField {
    Arc::new(move |_| {
        let mut g = DVector::zeros(n);
        g[index] = 1.0;
        g
    })
}

/// Serializable plant selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    VanDerPol,
    Pendulum,
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

impl PlantSpec {
    pub fn build(&self) -> Plant {
        match self {
            PlantSpec::VanDerPol => Plant::van_der_pol(),
            PlantSpec::Pendulum => Plant::pendulum(),
            PlantSpec::Linear { a, b } => {
                let a = crate::linalg::serde_matrix::from_rows(a).expect("validated matrix");
                let b = crate::linalg::serde_matrix::from_rows(b).expect("validated matrix");
                Plant::linear(a, b)
            }
        }
    }

    pub fn n(&self) -> usize {
        match self {
            PlantSpec::VanDerPol | PlantSpec::Pendulum => 2,
            PlantSpec::Linear { a, .. } => a.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_plants_vanish_at_origin() {
        for plant in [Plant::van_der_pol(), Plant::pendulum()] {
            let f0 = plant.drift(&DVector::zeros(2));
            assert_eq!(f0.norm(), 0.0, "{}", plant.name());
            assert_eq!(plant.control_field(0, &DVector::zeros(2)).as_slice(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn van_der_pol_rhs() {
        let p = Plant::van_der_pol();
        let dx = p.rhs(&DVector::from_vec(vec![2.0, 1.0]), &[0.5]);
        assert_eq!(dx.as_slice(), &[1.0, (1.0 - 4.0) * 1.0 - 2.0 + 0.5]);
    }

    #[test]
    fn pendulum_rhs_uses_published_sign() {
        let p = Plant::pendulum();
        let dx = p.rhs(&DVector::from_vec(vec![0.0, 1.0]), &[0.0]);
        assert_eq!(dx.as_slice(), &[1.0, 0.01]);
    }
}
