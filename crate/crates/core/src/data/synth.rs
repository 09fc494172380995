use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Split, TrainTest};
use crate::tensor::Tensor;

/// Gaussian clusters in the unit cube. Each class owns `modes_per_class`
/// centres drawn uniformly from `[0.15, 0.85]^dims`; samples are isotropic
/// Gaussians of standard deviation `spread` around them, clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub dims: usize,
    pub spread: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub modes_per_class: usize,
}

fn one() -> usize {
    1
}

const CENTRE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

impl BlobSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.class_count == 0 || self.per_class == 0 || self.dims == 0 || self.modes_per_class == 0 {
            return Err(DataError::Invalid(format!("blob counts must be positive: {self:?}")));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(DataError::Invalid(format!("spread must be >= 0, got {}", self.spread)));
        }
        Ok(())
    }

    fn centres(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(CENTRE_STREAM);
        (0..self.class_count * self.modes_per_class)
            .map(|_| (0..self.dims).map(|_| rng.random_range(0.15..0.85)).collect())
            .collect()
    }

    fn draw(&self, centres: &[Vec<f64>], per_class: usize, stream: u64, split: Split) -> Result<Dataset, DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let n = self.class_count * per_class;
        let mut data = Vec::with_capacity(n * self.dims);
        let mut labels = Vec::with_capacity(n);
        for class in 0..self.class_count {
            for j in 0..per_class {
                let centre = &centres[class * self.modes_per_class + j % self.modes_per_class];
                for &c in centre {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((c + self.spread * z).clamp(0.0, 1.0) as f32);
                }
                labels.push(class);
            }
        }
        let images = Tensor::new(vec![n, self.dims, 1, 1], data).map_err(|e| DataError::Invalid(e.to_string()))?;
        Dataset::new(images, labels, self.class_count, split)
    }
}

/// Training split of the blob dataset described by `spec`, class-major order.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    spec.draw(&spec.centres(), spec.per_class, TRAIN_STREAM, Split::Train)
}

/// Training split plus a test split of `test_per_class` samples per class
/// drawn around the same centres.
pub fn synth_blobs_split(spec: &BlobSpec, test_per_class: usize) -> Result<TrainTest, DataError> {
    spec.validate()?;
    if test_per_class == 0 {
        return Err(DataError::Invalid("test_per_class must be positive".into()));
    }
    let centres = spec.centres();
    Ok(TrainTest {
        train: spec.draw(&centres, spec.per_class, TRAIN_STREAM, Split::Train)?,
        test: spec.draw(&centres, test_per_class, TEST_STREAM, Split::Test)?,
    })
}

/// Reassigns `round(rate * n)` randomly chosen samples to a uniformly chosen
/// different class.
pub fn with_label_noise(data: &Dataset, rate: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DataError::Invalid(format!("noise rate must be in [0, 1], got {rate}")));
    }
    let k = data.class_count();
    if k < 2 || rate == 0.0 {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flips = (rate * data.len() as f64).round() as usize;
    let mut labels = data.labels().to_vec();
    for i in rand::seq::index::sample(&mut rng, data.len(), flips).into_vec() {
        labels[i] = (labels[i] + 1 + rng.random_range(0..k - 1)) % k;
    }
    Dataset::new(data.images().clone(), labels, k, data.split())
}
