// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace how concepts become linearly decodable in a language model's hidden
//! states across training checkpoints, and steer generation with the
//! resulting directions.
//!
//! The crate is organized around [`ActivationDataset`], an `n × d` matrix of
//! last-token activations with binary labels, stored in the ACTV1 container:
//!
//! - [`actv`]: the container format and checkpoint × layer manifests.
//! - [`datasets`]: labeled corpora, case perturbation, balancing and splits.
//! - [`probes`]: logistic-regression probes and sweeps over a manifest.
//! - [`infotheory`]: HSIC dependence estimates, traces over checkpoints and
//!   fitting/compression phase detection.
//! - [`steering`]: mass-mean steering vectors and the additive intervention.
//! - [`toylm`]: a miniature transformer that provides checkpoints, captures,
//!   interventions and perplexity at desk scale.
//! - [`proxytune`]: decode-time logit arithmetic between three models.
//!
//! ```
//! use tracetrust::actv::{ActivationDataset, DatasetMeta, DimensionLabel};
//!
//! let meta = DatasetMeta::last_token("demo", DimensionLabel::Other, "step_000000", 0);
//! let ds = ActivationDataset::from_rows(&[[0.5f32, 1.0], [2.0, -1.0]], vec![0, 1], meta)?;
//! let bytes = ds.to_bytes()?;
//! assert_eq!(ActivationDataset::from_bytes(&bytes)?, ds);
//! # Ok::<(), tracetrust::Error>(())
//! ```

pub mod actv;
pub mod datasets;
mod error;
pub mod infotheory;
pub mod probes;
pub mod proxytune;
pub mod steering;
pub mod toylm;

pub use actv::{ActivationDataset, DatasetMeta, DimensionLabel, Manifest, ManifestEntry, SweepKey};
pub use error::{Error, Result};
pub use probes::{ProbeConfig, ProbeModel, ProbeReport};
pub use steering::{InterventionSpec, SteeringVector};
pub use toylm::{ToyLmCheckpoint, ToyLmConfig};

/// Every chapter of the guide in `book/` compiles and runs as a doc-test.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/activations.md")]
    mod activations {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/information.md")]
    mod information {}
    #[doc = include_str!("../../../book/src/steering.md")]
    mod steering {}
    #[doc = include_str!("../../../book/src/toy-model.md")]
    mod toy_model {}
    #[doc = include_str!("../../../book/src/proxy-tuning.md")]
    mod proxy_tuning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
