use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use stgan_tensor::{Float, Tensor};

use crate::error::{Error, Result};

/// Attribute values: binary labels for source/target vectors, or
/// {-1, 0, +1} (possibly scaled) for difference vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub Vec<f32>);

impl AttributeVector {
    pub fn binary(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect())
    }

    pub fn zeros(c: usize) -> Self {
        Self(vec![0.0; c])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i] != 0.0
    }

    pub fn with_flipped(&self, i: usize) -> Self {
        let mut v = self.clone();
        v.0[i] = 1.0 - v.0[i];
        v
    }

    pub fn scaled(&self, k: f32) -> Self {
        Self(self.0.iter().map(|v| v * k).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(length_mismatch(self.len(), other.len()));
        }
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

fn length_mismatch(a: usize, b: usize) -> Error {
    Error::Contract(format!("attribute vectors have lengths {a} and {b}"))
}

/// Difference attribute vector `att_t - att_s`.
pub fn diff_vector(target: &AttributeVector, source: &AttributeVector) -> Result<AttributeVector> {
    if target.len() != source.len() {
        return Err(length_mismatch(target.len(), source.len()));
    }
    if !target.is_binary() || !source.is_binary() {
        return Err(Error::Contract(
            "source and target attribute vectors must be binary".into(),
        ));
    }
    Ok(AttributeVector(
        target.0.iter().zip(&source.0).map(|(t, s)| t - s).collect(),
    ))
}

/// How training picks target attributes for a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    /// Shuffle the batch's own source vectors.
    #[default]
    Permutation,
    /// Flip exactly one random attribute of each source vector.
    SingleFlip,
}

pub fn sample_targets<R: Rng + ?Sized>(
    sources: &[AttributeVector],
    policy: TargetPolicy,
    rng: &mut R,
) -> Vec<AttributeVector> {
    match policy {
        TargetPolicy::Permutation => {
            let mut order: Vec<usize> = (0..sources.len()).collect();
            order.shuffle(rng);
            order.into_iter().map(|i| sources[i].clone()).collect()
        }
        TargetPolicy::SingleFlip => sources
            .iter()
            .map(|s| {
                if s.is_empty() {
                    return s.clone();
                }
                s.with_flipped(rng.random_range(0..s.len()))
            })
            .collect(),
    }
}

/// Stacks vectors into a (n, c) tensor.
pub fn stack<T: Float>(vectors: &[AttributeVector]) -> Result<Tensor<T>> {
    let c = vectors.first().map_or(0, |v| v.len());
    if vectors.iter().any(|v| v.len() != c) {
        return Err(Error::Contract("attribute vectors in a batch differ in length".into()));
    }
    let data = vectors
        .iter()
        .flat_map(|v| v.0.iter().map(|&x| T::of(x as f64)))
        .collect();
    Ok(Tensor::new(&[vectors.len(), c], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_vectors_have_zero_difference() {
        let a = AttributeVector::binary(&[1, 0, 1, 1]);
        assert!(diff_vector(&a, &a).unwrap().is_zero());
    }

    #[test]
    fn add_one_remove_another() {
        // index 0 plays eyeglasses, index 1 mouth open
        let s = AttributeVector::binary(&[0, 1, 0, 1]);
        let t = AttributeVector::binary(&[1, 0, 0, 1]);
        assert_eq!(diff_vector(&t, &s).unwrap().0, vec![1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn componentwise_arithmetic() {
        let s = AttributeVector::binary(&[1, 1, 0]);
        let t = AttributeVector::binary(&[1, 0, 1]);
        assert_eq!(diff_vector(&t, &s).unwrap().0, vec![0.0, -1.0, 1.0]);
    }

    #[test]
    fn length_mismatch_and_non_binary_rejected() {
        let a = AttributeVector::binary(&[1, 0]);
        let b = AttributeVector::binary(&[1, 0, 1]);
        assert!(diff_vector(&a, &b).is_err());
        assert!(diff_vector(&AttributeVector(vec![0.5, 0.0]), &a).is_err());
    }

    #[test]
    fn batch_of_one_permutes_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = vec![AttributeVector::binary(&[1, 0, 1])];
        assert_eq!(sample_targets(&s, TargetPolicy::Permutation, &mut rng), s);
    }

    proptest! {
        #[test]
        fn diff_plus_source_is_target(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..12)) {
            let s = AttributeVector::binary(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let t = AttributeVector::binary(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let d = diff_vector(&t, &s).unwrap();
            prop_assert_eq!(d.add(&s).unwrap(), t.clone());
            prop_assert_eq!(d.is_zero(), s == t);
        }

        #[test]
        fn permutation_preserves_multiset(rows in proptest::collection::vec(proptest::collection::vec(0u8..2, 4), 1..10), seed in 0u64..500) {
            let src: Vec<_> = rows.iter().map(|r| AttributeVector::binary(r)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tgt = sample_targets(&src, TargetPolicy::Permutation, &mut rng);
            let key = |v: &AttributeVector| v.0.iter().map(|&x| x as u8).collect::<Vec<_>>();
            let mut a: Vec<_> = src.iter().map(key).collect();
            let mut b: Vec<_> = tgt.iter().map(key).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn single_flip_changes_exactly_one(rows in proptest::collection::vec(proptest::collection::vec(0u8..2, 5), 1..10), seed in 0u64..500) {
            let src: Vec<_> = rows.iter().map(|r| AttributeVector::binary(r)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tgt = sample_targets(&src, TargetPolicy::SingleFlip, &mut rng);
            for (s, t) in src.iter().zip(&tgt) {
                prop_assert_eq!(s.hamming(t), 1);
            }
        }
    }
}
