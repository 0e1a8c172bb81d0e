//! Siamese pair sampling over centre-cropped patches.

use rand::{Rng, RngCore};

use super::augment::{augment, AugmentConfig};
use super::case::{crop_patch, Case, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A case reduced to its centre crop.
#[derive(Clone, Debug)]
pub struct PatchItem {
    pub id: String,
    pub label: Label,
    pub patch: Tensor,
    pub mask: Tensor,
}

impl PatchItem {
    pub fn from_case(case: &Case, size: [usize; 3]) -> Result<Self> {
        let (patch, mask) = crop_patch(case, size)?;
        Ok(PatchItem {
            id: case.id.clone(),
            label: case.label,
            patch,
            mask,
        })
    }
}

pub fn crop_all(cases: &[Case], size: [usize; 3]) -> Result<Vec<PatchItem>> {
    cases.iter().map(|c| PatchItem::from_case(c, size)).collect()
}

/// Indices and augmentation seeds of one pair, drawn before any heavy work
/// so the stream does not depend on how pairs are later processed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairPlan {
    pub first: usize,
    pub second: usize,
    pub same_class: bool,
    pub seeds: [u64; 2],
}

#[derive(Clone, Debug)]
pub struct PairSample {
    pub ids: [String; 2],
    pub patch1: Tensor,
    pub patch2: Tensor,
    pub mask1: Tensor,
    pub mask2: Tensor,
    /// Same benign/malignant class.
    pub y: bool,
}

/// Draws pairs with a balanced same/different-class split.
#[derive(Clone, Debug)]
pub struct PairSampler {
    by_class: [Vec<usize>; 2],
}

impl PairSampler {
    pub fn new(items: &[PatchItem]) -> Result<Self> {
        let mut by_class = [Vec::new(), Vec::new()];
        for (i, it) in items.iter().enumerate() {
            by_class[it.label.as_u8() as usize].push(i);
        }
        if by_class.iter().any(Vec::is_empty) {
            return Err(Error::Data("pair sampling needs both benign and malignant cases".into()));
        }
        if by_class.iter().all(|c| c.len() < 2) {
            return Err(Error::Data("same-class pairs need a class with at least two cases".into()));
        }
        Ok(PairSampler { by_class })
    }

    pub fn plan<R: RngCore>(&self, rng: &mut R) -> PairPlan {
        let same_class = rng.random_bool(0.5);
        let (first, second) = if same_class {
            let eligible: Vec<usize> = (0..2).filter(|&c| self.by_class[c].len() >= 2).collect();
            let sizes: usize = eligible.iter().map(|&c| self.by_class[c].len()).sum();
            let mut k = rng.random_range(0..sizes);
            let mut class = eligible[0];
            for &c in &eligible {
                if k < self.by_class[c].len() {
                    class = c;
                    break;
                }
                k -= self.by_class[c].len();
            }
            let members = &self.by_class[class];
            let j = rng.random_range(0..members.len() - 1);
            let j = if j >= k { j + 1 } else { j };
            (members[k], members[j])
        } else {
            let class = rng.random_range(0..2usize);
            let a = &self.by_class[class];
            let b = &self.by_class[1 - class];
            (a[rng.random_range(0..a.len())], b[rng.random_range(0..b.len())])
        };
        PairPlan {
            first,
            second,
            same_class,
            seeds: [rng.next_u64(), rng.next_u64()],
        }
    }
}

pub fn realize(items: &[PatchItem], plan: &PairPlan, config: &AugmentConfig) -> Result<PairSample> {
    let (a, b) = (&items[plan.first], &items[plan.second]);
    let (patch1, mask1) = augment(&a.patch, &a.mask, config, plan.seeds[0])?;
    let (patch2, mask2) = augment(&b.patch, &b.mask, config, plan.seeds[1])?;
    Ok(PairSample {
        ids: [a.id.clone(), b.id.clone()],
        patch1,
        patch2,
        mask1,
        mask2,
        y: a.label == b.label,
    })
}

/// One independently sampled, cropped and augmented pair.
pub fn sample_pair<R: RngCore>(items: &[PatchItem], config: &AugmentConfig, rng: &mut R) -> Result<PairSample> {
    let sampler = PairSampler::new(items)?;
    let plan = sampler.plan(rng);
    realize(items, &plan, config)
}
