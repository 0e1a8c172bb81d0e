//! Interpretable case-based diagnosis with a Siamese U-Net.
//!
//! A shared-weight 3D U-Net maps each nodule patch to a latent code while
//! segmenting it; a learned elementwise alignment turns code pairs into a
//! distance. Training minimizes a contrastive loss on that distance plus a
//! Dice-CE segmentation loss. At inference a query is classified by
//! majority vote over its nearest support cases, flagged confident when its
//! nearest distance falls under a calibrated threshold, and explained with
//! attention maps back-propagated from the pair distance.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod inference;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
