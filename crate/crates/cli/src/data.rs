use fedleak_core::ingest::synthetic::generate;
use fedleak_core::ingest::{compute_prior, load_dataset, Dataset, ImageShape, LoadOptions, PriorImage};

use crate::config::DataSource;
use crate::error::Result;

pub struct Data {
    pub pool: Dataset,
    /// Public split: the prior is its mean; warm starts train on it.
    pub public: Dataset,
    pub prior: PriorImage,
    pub test: Option<Dataset>,
}

impl Data {
    pub fn shape(&self) -> ImageShape {
        self.pool.shape
    }
}

pub fn load(source: &DataSource) -> Result<Data> {
    match source {
        DataSource::Synthetic(spec) => {
            let c = generate(spec)?;
            let prior = compute_prior(&c.prior, c.pool.shape, "synthetic")?;
            Ok(Data {
                pool: c.pool,
                public: c.prior,
                prior,
                test: (!c.test.is_empty()).then_some(c.test),
            })
        }
        DataSource::Files {
            root,
            manifest,
            prior_manifest,
            test_manifest,
            shape,
            class_names,
        } => {
            let opts = LoadOptions {
                shape: *shape,
                class_names: class_names.clone(),
            };
            let pool = load_dataset(root, manifest, &opts)?;
            // Pin class order so indices agree across the three splits.
            let opts = LoadOptions {
                shape: *shape,
                class_names: pool.class_names.clone(),
            };
            let public = load_dataset(root, prior_manifest, &opts)?;
            let prior = compute_prior(&public, *shape, &prior_manifest.display().to_string())?;
            let test = test_manifest
                .as_ref()
                .map(|t| load_dataset(root, t, &opts))
                .transpose()?;
            Ok(Data {
                pool,
                public,
                prior,
                test,
            })
        }
    }
}
