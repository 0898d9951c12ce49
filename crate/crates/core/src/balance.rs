//! Hierarchical patch quotas.
//!
//! A global budget `k` is divided evenly down the brand, model, device and
//! image levels:
//!
//! ```text
//! k_b = [k / n_b]
//! k_m = [k / (n_m · n_b)]
//! k_d = [k / (n_d · n_m · n_b)]
//! k_i = [k / (n_i · n_d · n_m · n_b)]
//! ```
//!
//! where `[·]` rounds half up on the exact quotient, `n_m` is the model count
//! of the owning brand, `n_d` the device count of the owning model and `n_i`
//! the image count of the owning device.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::manifest::{Hierarchy, ImageRecord};
use crate::{Error, Result};

/// `[num / den]` rounded half up; `den` must be positive.
pub fn round_half_up(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceQuota {
    pub n_i: usize,
    pub k_d: u64,
    pub k_i: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelQuota {
    pub n_d: usize,
    pub k_m: u64,
    pub devices: BTreeMap<u32, DeviceQuota>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrandQuota {
    pub n_m: usize,
    pub k_b: u64,
    pub models: BTreeMap<String, ModelQuota>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub k: u64,
    pub n_b: usize,
    pub brands: BTreeMap<String, BrandQuota>,
    /// Per-image quota keyed by image path; filled by [`SamplingPlan::for_records`].
    #[serde(default)]
    pub images: BTreeMap<String, u64>,
}

impl SamplingPlan {
    pub fn device(&self, brand: &str, model: &str, device: u32) -> Option<&DeviceQuota> {
        self.brands.get(brand)?.models.get(model)?.devices.get(&device)
    }

    pub fn quota_for(&self, r: &ImageRecord) -> Option<u64> {
        self.device(&r.brand, &r.model, r.device_index).map(|d| d.k_i)
    }

    /// Plan over the hierarchy of `records`, with the per-image table filled.
    pub fn for_records(records: &[ImageRecord], k: u64) -> Result<Self> {
        let h = Hierarchy::from_records(records);
        let mut plan = plan_counts(&h, k)?;
        for r in records {
            if let Some(q) = plan.quota_for(r) {
                plan.images.insert(r.path.clone(), q);
            }
        }
        Ok(plan)
    }

    /// Sum of per-image quotas in the table.
    pub fn total_quota(&self) -> u64 {
        self.images.values().sum()
    }
}

/// Quota chain for every level of `h`.
pub fn plan_counts(h: &Hierarchy, k: u64) -> Result<SamplingPlan> {
    if k == 0 {
        return Err(Error::ZeroBudget);
    }
    let n_b = h.brands.len();
    if n_b == 0 {
        return Err(Error::EmptyLevel { level: "brand", at: None });
    }
    let kk = k as u128;
    let mut brands = BTreeMap::new();
    for (bname, b) in &h.brands {
        let n_m = b.models.len();
        if n_m == 0 {
            return Err(Error::EmptyLevel { level: "model", at: Some(bname.clone()) });
        }
        let mut models = BTreeMap::new();
        for (mname, m) in &b.models {
            let n_d = m.devices.len();
            if n_d == 0 {
                return Err(Error::EmptyLevel { level: "device", at: Some(alloc::format!("{bname}/{mname}")) });
            }
            let mut devices = BTreeMap::new();
            for (&d, &n_i) in &m.devices {
                if n_i == 0 {
                    return Err(Error::EmptyLevel { level: "image", at: Some(alloc::format!("{bname}/{mname}/{d}")) });
                }
                let k_d = round_half_up(kk, (n_d * n_m * n_b) as u128) as u64;
                let k_i = round_half_up(kk, (n_i * n_d * n_m * n_b) as u128) as u64;
                devices.insert(d, DeviceQuota { n_i, k_d, k_i });
            }
            let k_m = round_half_up(kk, (n_m * n_b) as u128) as u64;
            models.insert(mname.clone(), ModelQuota { n_d, k_m, devices });
        }
        let k_b = round_half_up(kk, n_b as u128) as u64;
        brands.insert(bname.clone(), BrandQuota { n_m, k_b, models });
    }
    Ok(SamplingPlan { k, n_b, brands, images: BTreeMap::new() })
}

/// Number of ranked patches available per image.
pub trait PatchAvailability {
    fn available(&self, image: &str) -> Option<usize>;
}

impl PatchAvailability for BTreeMap<String, usize> {
    fn available(&self, image: &str) -> Option<usize> {
        self.get(image).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealizedSample {
    /// Image path and the ranks of the patches drawn from it.
    pub entries: Vec<(String, Vec<usize>)>,
    /// Shortfall per image where fewer patches exist than the quota.
    pub deficits: BTreeMap<String, u64>,
}

impl RealizedSample {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.1.len()).sum()
    }
}

/// Takes the first `k_i` ranked patches of every planned image. Shortfalls
/// are recorded, not redistributed. `seed` is reserved for sampling
/// strategies that draw randomly; the current one does not.
pub fn realize_plan(plan: &SamplingPlan, cache: &impl PatchAvailability, _seed: u64) -> Result<RealizedSample> {
    let mut entries = Vec::with_capacity(plan.images.len());
    let mut deficits = BTreeMap::new();
    for (image, &quota) in &plan.images {
        let avail = cache.available(image).ok_or_else(|| Error::MissingFromCache(image.clone()))?;
        let take = (quota as usize).min(avail);
        if (take as u64) < quota {
            deficits.insert(image.clone(), quota - take as u64);
        }
        entries.push((image.clone(), (0..take).collect()));
    }
    Ok(RealizedSample { entries, deficits })
}
