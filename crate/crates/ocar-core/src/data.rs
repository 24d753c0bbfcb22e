//! Shared example and batch types passed between streams, the replay buffer,
//! and the strategies.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

/// Supervised target: a class index or a regression vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

impl Target {
    pub fn class_id(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::Values(_) => None,
        }
    }
}

/// One (input, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Target,
}

impl Example {
    pub fn class(input: Vec<f64>, label: usize) -> Self {
        Example {
            input,
            target: Target::Class(label),
        }
    }

    pub fn regression(input: Vec<f64>, values: Vec<f64>) -> Self {
        Example {
            input,
            target: Target::Values(values),
        }
    }
}

/// Targets for a whole batch, matching the network head.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Matrix),
}

impl BatchTargets {
    pub fn len(&self) -> usize {
        match self {
            BatchTargets::Classes(c) => c.len(),
            BatchTargets::Values(m) => m.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stack examples into an input matrix and batch targets.
///
/// Panics on an empty slice or mixed target kinds; batches are assembled by
/// the stream and buffer code which never mixes them.
pub fn to_batch(examples: &[Example]) -> (Matrix, BatchTargets) {
    assert!(!examples.is_empty(), "cannot batch zero examples");
    let dim = examples[0].input.len();
    let mut inputs = Matrix::zeros(examples.len(), dim);
    for (i, ex) in examples.iter().enumerate() {
        assert_eq!(ex.input.len(), dim, "inconsistent input dims in batch");
        inputs.row_mut(i).copy_from_slice(&ex.input);
    }
    let targets = match &examples[0].target {
        Target::Class(_) => BatchTargets::Classes(
            examples
                .iter()
                .map(|e| match &e.target {
                    Target::Class(c) => *c,
                    Target::Values(_) => panic!("mixed target kinds in batch"),
                })
                .collect(),
        ),
        Target::Values(v) => {
            let k = v.len();
            let mut m = Matrix::zeros(examples.len(), k);
            for (i, ex) in examples.iter().enumerate() {
                match &ex.target {
                    Target::Values(vals) => m.row_mut(i).copy_from_slice(vals),
                    Target::Class(_) => panic!("mixed target kinds in batch"),
                }
            }
            BatchTargets::Values(m)
        }
    };
    (inputs, targets)
}
