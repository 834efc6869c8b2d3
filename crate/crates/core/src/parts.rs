use pirt_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::pose::Group;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartKind {
    Stripe,
    Patch,
    Pose,
}

/// An ordered set of part features `[N, C]` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PartTokenSet<T> {
    pub tokens: Tensor<T>,
    pub kind: PartKind,
    /// Always true for stripe and patch tokens.
    pub visible: Vec<bool>,
    /// Present for pose tokens only.
    pub groups: Option<Vec<Group>>,
}

impl<T: Real> PartTokenSet<T> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[T] {
        let c = self.dim();
        &self.tokens.data()[i * c..(i + 1) * c]
    }
}
