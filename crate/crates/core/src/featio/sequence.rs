use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Lower bound on the per-vector standard deviation in [`zscore_normalize`].
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_index(i: u8) -> Option<Domain> {
        match i {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

/// One video: `frames` time-ordered feature vectors of width `dim`, stored
/// frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    /// `None` is the unlabeled sentinel.
    pub label: Option<usize>,
    pub domain: Domain,
}

impl FeatureSequence {
    pub fn new(
        frames: usize,
        dim: usize,
        values: Vec<f64>,
        label: Option<usize>,
        domain: Domain,
    ) -> Result<Self> {
        if values.len() != frames * dim {
            return Err(Error::Shape {
                op: "feature sequence",
                lhs: vec![frames, dim],
                rhs: vec![values.len()],
            });
        }
        Ok(FeatureSequence {
            frames,
            dim,
            values,
            label,
            domain,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }
}

/// Standardizes every frame vector of `x` to zero mean and unit population
/// variance. Constant frames map to all zeros.
pub fn zscore_normalize(x: &FeatureSequence) -> FeatureSequence {
    let mut out = x.clone();
    for frame in out.values.chunks_mut(x.dim) {
        let n = frame.len() as f64;
        let mean = frame.iter().sum::<f64>() / n;
        let var = frame.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sigma = var.sqrt().max(SIGMA_FLOOR);
        frame.iter_mut().for_each(|v| *v = (*v - mean) / sigma);
    }
    out
}

/// A set of equally shaped feature sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FeatureSequence>,
    pub num_classes: usize,
    pub frames: usize,
    pub dim: usize,
    pub provenance: String,
}

impl Dataset {
    /// Validates shapes and labels. An empty sample list is allowed.
    pub fn new(
        samples: Vec<FeatureSequence>,
        num_classes: usize,
        frames: usize,
        dim: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if frames < 2 {
            return Err(Error::config(format!("need at least 2 frames, got {frames}")));
        }
        if dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        for (index, s) in samples.iter().enumerate() {
            if s.frames != frames || s.dim != dim || s.values.len() != frames * dim {
                return Err(Error::Validation {
                    index,
                    msg: format!(
                        "shape {}x{} does not match dataset {frames}x{dim}",
                        s.frames, s.dim
                    ),
                });
            }
            if let Some(l) = s.label {
                if l >= num_classes {
                    return Err(Error::Validation {
                        index,
                        msg: format!("label {l} outside [0, {num_classes})"),
                    });
                }
            }
        }
        Ok(Dataset {
            samples,
            num_classes,
            frames,
            dim,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Applies [`zscore_normalize`] to every sample.
    pub fn normalized(&self) -> Dataset {
        Dataset {
            samples: self.samples.iter().map(zscore_normalize).collect(),
            provenance: format!("{} | zscore", self.provenance),
            ..self.clone()
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stacks the chosen samples into a `[n, frames * dim]` tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let width = self.frames * self.dim;
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].values);
        }
        Tensor::new(vec![indices.len(), width], data).expect("batch shape")
    }

    /// Copy with every label removed; used to enforce the unsupervised
    /// contract on target training data.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            samples: self.samples.iter().cloned().map(FeatureSequence::unlabeled).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(values: Vec<f64>, dim: usize) -> FeatureSequence {
        let frames = values.len() / dim;
        FeatureSequence::new(frames, dim, values, None, Domain::Source).unwrap()
    }

    #[test]
    fn two_entry_frame() {
        let out = zscore_normalize(&seq(vec![1.0, 3.0, 5.0, 5.0], 2));
        assert_eq!(out.values, vec![-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_frame_is_zero() {
        let out = zscore_normalize(&seq(vec![5.0, 5.0, 5.0, 1.0, 2.0, 3.0], 3));
        assert_eq!(&out.values[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn wide_random_frame_statistics() {
        let mut rng = crate::rng::seeded(11);
        let raw: Vec<f64> = (0..2048 * 2)
            .map(|_| 3.0 + 7.0 * crate::rng::normal(&mut rng))
            .collect();
        let out = zscore_normalize(&seq(raw, 2048));
        for t in 0..2 {
            let f = out.frame(t);
            let mean = f.iter().sum::<f64>() / 2048.0;
            let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2048.0;
            assert!(mean.abs() <= 1e-9, "{mean}");
            assert!((var - 1.0).abs() <= 1e-6, "{var}");
        }
    }

    #[test]
    fn label_out_of_range_names_index() {
        let good = FeatureSequence::new(2, 1, vec![0.0, 1.0], Some(0), Domain::Source).unwrap();
        let bad = FeatureSequence::new(2, 1, vec![0.0, 1.0], Some(3), Domain::Source).unwrap();
        let err = Dataset::new(vec![good, bad], 3, 2, 1, "t").unwrap_err();
        assert!(matches!(err, Error::Validation { index: 1, .. }), "{err}");
    }

    fn frame_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 3..40).prop_filter("non-constant", |v| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64 > 1e-4
        })
    }

    proptest! {
        #[test]
        fn idempotent(frame in frame_strategy()) {
            let d = frame.len();
            let once = zscore_normalize(&seq(frame, d));
            let twice = zscore_normalize(&once);
            for (a, b) in once.values.iter().zip(&twice.values) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn positive_affine_invariant(frame in frame_strategy(), a in 0.1f64..10.0, b in -100.0f64..100.0) {
            let d = frame.len();
            let shifted: Vec<f64> = frame.iter().map(|x| a * x + b).collect();
            let lhs = zscore_normalize(&seq(shifted, d));
            let rhs = zscore_normalize(&seq(frame, d));
            for (x, y) in lhs.values.iter().zip(&rhs.values) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
