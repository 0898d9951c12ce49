//! Brand → model → device → image hierarchy, dataset filtering rules and
//! leave-one-device-out fold planning.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    pub brand: String,
    pub model: String,
    #[serde(rename = "device")]
    pub device_index: u32,
    pub image_id: String,
    #[serde(rename = "w")]
    pub width: u32,
    #[serde(rename = "h")]
    pub height: u32,
}

impl ImageRecord {
    /// `Brand_Model`, the class name used throughout reports.
    pub fn model_key(&self) -> String {
        alloc::format!("{}_{}", self.brand, self.model)
    }

    pub fn device_key(&self) -> DeviceKey {
        DeviceKey { brand: self.brand.clone(), model: self.model.clone(), device: self.device_index }
    }

    fn identity(&self) -> (&str, &str, u32, &str) {
        (&self.brand, &self.model, self.device_index, &self.image_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceKey {
    pub brand: String,
    pub model: String,
    pub device: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelNode {
    /// Device index → image count.
    pub devices: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrandNode {
    pub models: BTreeMap<String, ModelNode>,
}

/// Nested counts: `n_b` brands, `n_m` models per brand, `n_d` devices per
/// model and `n_i` images per device.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub brands: BTreeMap<String, BrandNode>,
}

impl Hierarchy {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> Self {
        let mut h = Hierarchy::default();
        for r in records {
            *h.brands
                .entry(r.brand.clone())
                .or_default()
                .models
                .entry(r.model.clone())
                .or_default()
                .devices
                .entry(r.device_index)
                .or_default() += 1;
        }
        h
    }

    pub fn n_brands(&self) -> usize {
        self.brands.len()
    }

    pub fn n_models(&self) -> usize {
        self.brands.values().map(|b| b.models.len()).sum()
    }

    pub fn n_devices(&self) -> usize {
        self.brands.values().flat_map(|b| b.models.values()).map(|m| m.devices.len()).sum()
    }

    pub fn n_images(&self) -> usize {
        self.brands.values().flat_map(|b| b.models.values()).flat_map(|m| m.devices.values()).sum()
    }

    /// `(brand, [models])` in sorted order.
    pub fn brand_models(&self) -> Vec<(String, Vec<String>)> {
        self.brands.iter().map(|(b, n)| (b.clone(), n.models.keys().cloned().collect())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ManifestDoc", into = "ManifestDoc")]
pub struct Manifest {
    records: Vec<ImageRecord>,
    filters_applied: bool,
    hierarchy: Hierarchy,
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    records: Vec<ImageRecord>,
    filters_applied: bool,
}

impl From<ManifestDoc> for Manifest {
    fn from(d: ManifestDoc) -> Self {
        let mut m = Manifest::from_sorted(d.records, d.filters_applied);
        m.records.sort();
        m.hierarchy = Hierarchy::from_records(&m.records);
        m
    }
}

impl From<Manifest> for ManifestDoc {
    fn from(m: Manifest) -> Self {
        ManifestDoc { records: m.records, filters_applied: m.filters_applied }
    }
}

impl Manifest {
    fn from_sorted(records: Vec<ImageRecord>, filters_applied: bool) -> Self {
        let hierarchy = Hierarchy::from_records(&records);
        Self { records, filters_applied, hierarchy }
    }

    /// Records are kept in a canonical sorted order, so the input order never
    /// matters downstream.
    pub fn new(mut records: Vec<ImageRecord>) -> Result<Self> {
        records.sort();
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.identity()) {
                return Err(Error::DuplicateRecord(alloc::format!(
                    "{}/{}/{}/{}",
                    r.brand,
                    r.model,
                    r.device_index,
                    r.image_id
                )));
            }
        }
        Ok(Self::from_sorted(records, false))
    }

    pub fn empty() -> Self {
        Self::from_sorted(Vec::new(), false)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn filters_applied(&self) -> bool {
        self.filters_applied
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sub-manifest of records matching `keep`.
    pub fn subset(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> Manifest {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::from_sorted(records, self.filters_applied)
    }

    pub fn find(&self, path: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.path == path)
    }
}

/// Relabels one model of a brand as another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMerge {
    pub brand: String,
    pub from: String,
    pub into: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    pub merges: Vec<ModelMerge>,
    pub min_devices: usize,
}

impl Default for FilterRules {
    /// Dresden natural subset: D70s folded into D70, models need two devices.
    fn default() -> Self {
        Self {
            merges: alloc::vec![ModelMerge { brand: "Nikon".into(), from: "D70s".into(), into: "D70".into() }],
            min_devices: 2,
        }
    }
}

/// Applies merges (re-keying merged devices past the target model's highest
/// device index) and drops models with too few devices.
pub fn apply_filters(m: &Manifest, rules: &FilterRules) -> Manifest {
    let mut records = m.records.clone();
    for merge in &rules.merges {
        let offset = records
            .iter()
            .filter(|r| r.brand == merge.brand && r.model == merge.into)
            .map(|r| r.device_index + 1)
            .max()
            .unwrap_or(0);
        for r in records.iter_mut().filter(|r| r.brand == merge.brand && r.model == merge.from) {
            r.model = merge.into.clone();
            r.device_index += offset;
        }
    }
    let h = Hierarchy::from_records(&records);
    records.retain(|r| h.brands[&r.brand].models[&r.model].devices.len() >= rules.min_devices);
    records.sort();
    Manifest::from_sorted(records, true)
}

pub fn apply_paper_filters(m: &Manifest) -> Manifest {
    apply_filters(m, &FilterRules::default())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub brand: String,
    pub model: String,
    pub devices: usize,
    pub images: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyStats {
    pub models: Vec<ModelStats>,
    pub brands: usize,
    pub total_models: usize,
    pub total_devices: usize,
    pub total_images: usize,
}

impl HierarchyStats {
    pub fn model(&self, brand: &str, model: &str) -> Option<&ModelStats> {
        self.models.iter().find(|s| s.brand == brand && s.model == model)
    }
}

pub fn hierarchy_stats(m: &Manifest) -> HierarchyStats {
    let h = Hierarchy::from_records(&m.records);
    let models = h
        .brands
        .iter()
        .flat_map(|(b, bn)| {
            bn.models.iter().map(move |(mn, node)| ModelStats {
                brand: b.clone(),
                model: mn.clone(),
                devices: node.devices.len(),
                images: node.devices.values().sum(),
            })
        })
        .collect();
    HierarchyStats {
        models,
        brands: h.n_brands(),
        total_models: h.n_models(),
        total_devices: h.n_devices(),
        total_images: h.n_images(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// One held-out device per model.
    pub held_out: Vec<DeviceKey>,
    /// Image paths carved from the training devices for checkpoint selection.
    pub validation: Vec<String>,
}

impl Fold {
    pub fn is_held_out(&self, r: &ImageRecord) -> bool {
        self.held_out.iter().any(|k| k.brand == r.brand && k.model == r.model && k.device == r.device_index)
    }

    pub fn split<'m>(&self, m: &'m Manifest) -> Split<'m> {
        let val: BTreeSet<&str> = self.validation.iter().map(String::as_str).collect();
        let mut s = Split::default();
        for r in m.records() {
            if self.is_held_out(r) {
                s.test.push(r);
            } else if val.contains(r.path.as_str()) {
                s.validation.push(r);
            } else {
                s.train.push(r);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct Split<'m> {
    pub train: Vec<&'m ImageRecord>,
    pub validation: Vec<&'m ImageRecord>,
    pub test: Vec<&'m ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub folds: BTreeMap<usize, Fold>,
}

impl FoldPlan {
    pub fn fold(&self, i: usize) -> Result<&Fold> {
        self.folds.get(&i).ok_or(Error::MissingFold(i))
    }
}

/// Fold `f` holds out the device of rank `f mod n_d` in each model's sorted
/// device list; every model rotates independently. Validation images are a
/// seeded `val_fraction` of each model's remaining images.
pub fn make_folds(m: &Manifest, n_folds: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan> {
    if n_folds == 0 {
        return Err(Error::InvalidFolds("n_folds must be at least 1".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(Error::InvalidFolds(alloc::format!("val_fraction {val_fraction} outside (0, 0.5)")));
    }
    let h = m.hierarchy();
    for (b, bn) in &h.brands {
        for (mn, node) in &bn.models {
            if node.devices.len() < 2 {
                return Err(Error::SingleDeviceModel(alloc::format!("{b}_{mn}")));
            }
        }
    }
    let mut folds = BTreeMap::new();
    for f in 0..n_folds {
        let mut held_out = Vec::new();
        let mut validation = Vec::new();
        for (b, bn) in &h.brands {
            for (mn, node) in &bn.models {
                let devices: Vec<u32> = node.devices.keys().copied().collect();
                let out = devices[f % devices.len()];
                held_out.push(DeviceKey { brand: b.clone(), model: mn.clone(), device: out });
                let mut pool: Vec<&str> = m
                    .records()
                    .iter()
                    .filter(|r| &r.brand == b && &r.model == mn && r.device_index != out)
                    .map(|r| r.path.as_str())
                    .collect();
                pool.sort_unstable();
                let n_val = ((val_fraction * pool.len() as f64) + 0.5) as usize;
                let n_val = n_val.min(pool.len().saturating_sub(1));
                let mut rng = rng::rng_for(seed, &alloc::format!("fold{f}/{b}/{mn}"));
                pool.shuffle(&mut rng);
                validation.extend(pool[..n_val].iter().map(|s| String::from(*s)));
            }
        }
        validation.sort();
        folds.insert(f, Fold { held_out, validation });
    }
    Ok(FoldPlan { n_folds, val_fraction, seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn rec(brand: &str, model: &str, device: u32, id: usize) -> ImageRecord {
        ImageRecord {
            path: alloc::format!("{brand}_{model}_{device}_{id}.JPG"),
            brand: brand.into(),
            model: model.into(),
            device_index: device,
            image_id: alloc::format!("{id}"),
            width: 256,
            height: 256,
        }
    }

    #[test]
    fn single_device_model_is_removed() {
        let m = Manifest::new(vec![rec("A", "x", 0, 1), rec("A", "x", 0, 2)]).unwrap();
        let f = apply_paper_filters(&m);
        assert!(f.is_empty());
        assert!(f.filters_applied());
    }

    #[test]
    fn nikon_merge_rekeys_devices() {
        let mut recs = Vec::new();
        for d in 0..2 {
            recs.push(rec("Nikon", "D70", d, 10 + d as usize));
            recs.push(rec("Nikon", "D70s", d, 20 + d as usize));
        }
        let f = apply_paper_filters(&Manifest::new(recs).unwrap());
        let s = hierarchy_stats(&f);
        assert_eq!(s.total_models, 1);
        let d70 = s.model("Nikon", "D70").unwrap();
        assert_eq!(d70.devices, 4);
        let devs: BTreeSet<u32> = f.records().iter().map(|r| r.device_index).collect();
        assert_eq!(devs, [0, 1, 2, 3].into_iter().collect());
    }

    #[test]
    fn duplicate_records_rejected() {
        let r = rec("A", "x", 0, 1);
        assert!(matches!(Manifest::new(vec![r.clone(), r]), Err(Error::DuplicateRecord(_))));
    }

    #[test]
    fn empty_stats() {
        let s = hierarchy_stats(&Manifest::empty());
        assert_eq!((s.brands, s.total_models, s.total_devices, s.total_images), (0, 0, 0, 0));
    }

    #[test]
    fn rotation_per_model() {
        let mut recs = Vec::new();
        for d in 0..3 {
            for i in 0..4 {
                recs.push(rec("A", "x", d, i));
            }
        }
        let m = Manifest::new(recs).unwrap();
        let plan = make_folds(&m, 5, 0.15, 3).unwrap();
        let seq: Vec<u32> = (0..5).map(|f| plan.folds[&f].held_out[0].device).collect();
        assert_eq!(seq, vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn single_device_model_rejected_by_folds() {
        let m = Manifest::new(vec![rec("A", "x", 0, 1)]).unwrap();
        assert_eq!(make_folds(&m, 5, 0.15, 0), Err(Error::SingleDeviceModel("A_x".into())));
    }

    #[test]
    fn bad_val_fraction_rejected() {
        let m = Manifest::new(vec![rec("A", "x", 0, 1), rec("A", "x", 1, 1)]).unwrap();
        assert!(make_folds(&m, 2, 0.5, 0).is_err());
        assert!(make_folds(&m, 2, 0.0, 0).is_err());
        assert!(make_folds(&m, 0, 0.1, 0).is_err());
    }
}
