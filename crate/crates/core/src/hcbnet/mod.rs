//! Classifier-block-level hierarchical network.
//!
//! A shared four-block trunk produces the global feature map `X`. Every brand
//! owns a CBR module and a one-output linear layer; the `K` brand logits are
//! softmaxed jointly. Brands with more than one model additionally own one
//! CBR + linear branch per model, fed by that brand's feature map `X_b`, and
//! the model logits are softmaxed within the brand. The flat baseline replaces
//! the branches with three fully connected layers over all models.

mod spec;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::autograd::{BnMode, Graph, LossKind, NodeId, ParamId, ParamRole, ParamStore};
use crate::{rng, Error, Real, Result, Tensor};

pub use spec::{BlockSpec, BrandSpec, CbrSpec, HeadKind, NetworkSpec, DRESDEN_HIERARCHY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct Cbr {
    conv: Conv,
    bn: Bn,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ModelBranch {
    cbr: Cbr,
    fc: Linear,
}

#[derive(Debug, Clone)]
struct BrandBranch {
    cbr: Cbr,
    fc: Linear,
    /// Empty for single-model brands.
    models: Vec<ModelBranch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batchnorm statistics gathered during a training forward pass, to be folded
/// into the running estimates once the graph is released.
#[derive(Debug, Clone, Default)]
pub struct BnUpdates<T> {
    updates: Vec<(usize, crate::autograd::BatchStats<T>)>,
}

/// Graph nodes of one hierarchical forward pass.
#[derive(Debug, Clone)]
pub struct HierNodes {
    /// `N×K` brand logits.
    pub brand_logits: NodeId,
    /// Per brand, the `N×C_b×H×W` branch feature map.
    pub brand_features: Vec<NodeId>,
    /// Per brand, `N×N_brand` model logits for multi-model brands.
    pub model_logits: Vec<Option<NodeId>>,
}

/// Values of one hierarchical forward pass, keyed by brand name.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalOutput<T> {
    pub brand_logits: Tensor<T>,
    pub brand_probs: Tensor<T>,
    pub model_logits: BTreeMap<String, Tensor<T>>,
    pub model_probs: BTreeMap<String, Tensor<T>>,
    pub brand_features: BTreeMap<String, Tensor<T>>,
}

/// Ground truth for one sample: brand index and model index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct SampleLabel {
    pub brand: usize,
    pub model: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub brand: NodeId,
    pub model: Option<NodeId>,
}

/// What [`Network::add_branch`] adds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BranchTarget {
    /// A new brand with its first model.
    Brand { brand: String, model: String },
    /// A new model under an existing brand.
    Model { brand: String, model: String },
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    trunk: Vec<(Cbr, usize, usize)>,
    brands: Vec<BrandBranch>,
    flat: Vec<Linear>,
    seed: u64,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    running: &'a mut Vec<RunningStats<T>>,
    seed: u64,
}

impl<T: Real> Builder<'_, T> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let n: usize = shape.iter().product();
        let std = libm::sqrt(2.0 / fan_in as f64);
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut r = rng::rng_for(self.seed, &name);
        let values = (0..n).map(|_| T::from_f64(dist.sample(&mut r))).collect();
        self.params.add(name, ParamRole::Weight, Tensor::new(shape, values).expect("shape"))
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Conv {
        let w = self.he(alloc::format!("{prefix}.conv.weight"), &[cout, cin, k, k], cin * k * k);
        let b = self.params.add(alloc::format!("{prefix}.conv.bias"), ParamRole::Bias, Tensor::zeros(&[cout]));
        Conv { w, b, stride, padding }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Bn {
        let gamma = self.params.add(alloc::format!("{prefix}.bn.weight"), ParamRole::BnGamma, Tensor::full(&[c], T::one()));
        let beta = self.params.add(alloc::format!("{prefix}.bn.bias"), ParamRole::BnBeta, Tensor::zeros(&[c]));
        self.running.push(RunningStats {
            name: alloc::format!("{prefix}.bn"),
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Bn { gamma, beta, stats: self.running.len() - 1 }
    }

    fn cbr(&mut self, prefix: &str, cin: usize, cs: &CbrSpec) -> Cbr {
        Cbr { conv: self.conv(prefix, cin, cs.out_channels, cs.kernel, cs.stride, cs.padding), bn: self.bn(prefix, cs.out_channels) }
    }

    fn linear(&mut self, prefix: &str, d: usize, o: usize) -> Linear {
        let w = self.he(alloc::format!("{prefix}.weight"), &[o, d], d);
        let b = self.params.add(alloc::format!("{prefix}.bias"), ParamRole::Bias, Tensor::zeros(&[o]));
        Linear { w, b }
    }

    fn model_branch(&mut self, spec: &NetworkSpec, brand: &str, model: &str) -> Result<ModelBranch> {
        let (cb, h, w) = spec.branch_shape()?;
        let prefix = alloc::format!("brand.{brand}.model.{model}");
        Ok(ModelBranch {
            cbr: self.cbr(&alloc::format!("{prefix}.cbr"), cb, &spec.branch_block),
            fc: self.linear(&alloc::format!("{prefix}.fc"), cb * h * w, 1),
        })
    }

    fn brand_branch(&mut self, spec: &NetworkSpec, bs: &BrandSpec) -> Result<BrandBranch> {
        let (c, _, _) = spec.feature_shape()?;
        let (cb, h, w) = spec.branch_shape()?;
        let prefix = alloc::format!("brand.{}", bs.brand);
        let cbr = self.cbr(&alloc::format!("{prefix}.cbr"), c, &spec.branch_block);
        let fc = self.linear(&alloc::format!("{prefix}.fc"), cb * h * w, 1);
        let models = if bs.models.len() > 1 {
            bs.models.iter().map(|m| self.model_branch(spec, &bs.brand, m)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(BrandBranch { cbr, fc, models })
    }
}

/// Builds and initializes a network. Every parameter draws from its own
/// stream derived from `(seed, parameter name)`.
pub fn build_network<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let mut running = Vec::new();
    let mut b = Builder { params: &mut params, running: &mut running, seed };
    let mut trunk = Vec::new();
    let mut cin = spec.input[0];
    for (i, blk) in spec.feature_blocks.iter().enumerate() {
        let cs = CbrSpec { out_channels: blk.out_channels, kernel: blk.kernel, stride: blk.stride, padding: blk.padding };
        trunk.push((b.cbr(&alloc::format!("features.{i}"), cin, &cs), blk.pool_kernel, blk.pool_stride));
        cin = blk.out_channels;
    }
    let mut brands = Vec::new();
    let mut flat = Vec::new();
    match spec.head {
        HeadKind::Hierarchical => {
            for bs in &spec.hierarchy {
                brands.push(b.brand_branch(spec, bs)?);
            }
        }
        HeadKind::Flat => {
            let (c, h, w) = spec.feature_shape()?;
            let [d0, d1, d2] = spec.flat_fc_dims;
            flat.push(b.linear("flat.fc0", c * h * w, d0));
            flat.push(b.linear("flat.fc1", d0, d1));
            flat.push(b.linear("flat.fc2", d1, d2));
        }
    }
    Ok(Network { spec: spec.clone(), params, running, trunk, brands, flat, seed })
}

impl<T: Real> Network<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_brand_branches(&self) -> usize {
        self.brands.len()
    }

    /// Brands that carry model-level branches.
    pub fn n_model_heads(&self) -> usize {
        self.brands.iter().filter(|b| !b.models.is_empty()).count()
    }

    pub fn n_model_branches(&self) -> usize {
        self.brands.iter().map(|b| b.models.len()).sum()
    }

    fn cbr(&self, g: &mut Graph<'_, T>, x: NodeId, c: &Cbr, mode: Mode, upd: &mut BnUpdates<T>) -> Result<NodeId> {
        let (w, b) = (g.param(c.conv.w), g.param(c.conv.b));
        let y = g.conv2d(x, w, b, c.conv.stride, c.conv.padding)?;
        let (gamma, beta) = (g.param(c.bn.gamma), g.param(c.bn.beta));
        let rs = &self.running[c.bn.stats];
        let bn_mode = match mode {
            Mode::Train => BnMode::Train { eps: self.spec.bn_eps },
            Mode::Eval => BnMode::Eval { mean: &rs.mean, var: &rs.var, eps: self.spec.bn_eps },
        };
        let (y, stats) = g.batchnorm2d(y, gamma, beta, bn_mode)?;
        if let Some(s) = stats {
            upd.updates.push((c.bn.stats, s));
        }
        g.relu(y)
    }

    fn linear(&self, g: &mut Graph<'_, T>, a: NodeId, l: &Linear) -> Result<NodeId> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        g.linear(a, w, b)
    }

    fn check_input(&self, g: &Graph<'_, T>, x: NodeId) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.spec.input[..] {
            return Err(Error::ShapeMismatch {
                op: "network",
                detail: alloc::format!("input {:?}, expected N×{:?}", s, self.spec.input),
            });
        }
        Ok(())
    }

    /// Global feature map `X`.
    pub fn features(&self, g: &mut Graph<'_, T>, x: NodeId, mode: Mode, upd: &mut BnUpdates<T>) -> Result<NodeId> {
        self.check_input(g, x)?;
        let mut h = x;
        for (cbr, pk, ps) in &self.trunk {
            h = self.cbr(g, h, cbr, mode, upd)?;
            h = g.maxpool2d(h, *pk, *ps)?;
        }
        Ok(h)
    }

    pub fn forward_hierarchical(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        mode: Mode,
    ) -> Result<(HierNodes, BnUpdates<T>)> {
        if self.spec.head != HeadKind::Hierarchical {
            return Err(Error::InvalidSpec { field: "head".into(), reason: "network has a flat head".into() });
        }
        let mut upd = BnUpdates::default();
        let feat = self.features(g, x, mode, &mut upd)?;
        let mut brand_logit_cols = Vec::with_capacity(self.brands.len());
        let mut brand_features = Vec::with_capacity(self.brands.len());
        let mut model_logits = Vec::with_capacity(self.brands.len());
        for br in &self.brands {
            let xb = self.cbr(g, feat, &br.cbr, mode, &mut upd)?;
            let ab = g.flatten(xb)?;
            brand_logit_cols.push(self.linear(g, ab, &br.fc)?);
            brand_features.push(xb);
            if br.models.is_empty() {
                model_logits.push(None);
                continue;
            }
            let mut cols = Vec::with_capacity(br.models.len());
            for mb in &br.models {
                let xm = self.cbr(g, xb, &mb.cbr, mode, &mut upd)?;
                let am = g.flatten(xm)?;
                cols.push(self.linear(g, am, &mb.fc)?);
            }
            model_logits.push(Some(g.concat_cols(&cols)?));
        }
        let brand_logits = g.concat_cols(&brand_logit_cols)?;
        Ok((HierNodes { brand_logits, brand_features, model_logits }, upd))
    }

    /// `N×M` logits over every camera model.
    pub fn forward_flat(&self, g: &mut Graph<'_, T>, x: NodeId, mode: Mode) -> Result<(NodeId, BnUpdates<T>)> {
        if self.spec.head != HeadKind::Flat {
            return Err(Error::InvalidSpec { field: "head".into(), reason: "network has a hierarchical head".into() });
        }
        let mut upd = BnUpdates::default();
        let feat = self.features(g, x, mode, &mut upd)?;
        let mut h = g.flatten(feat)?;
        for (i, l) in self.flat.iter().enumerate() {
            h = self.linear(g, h, l)?;
            if i + 1 < self.flat.len() {
                h = g.relu(h)?;
            }
        }
        Ok((h, upd))
    }

    /// Combined objective `L_bc + α·L_mc`, averaged over the batch. The model
    /// term of each sample comes from its ground-truth brand's model branch;
    /// single-model brands contribute nothing to it.
    pub fn loss_total(
        &self,
        g: &mut Graph<'_, T>,
        out: &HierNodes,
        labels: &[SampleLabel],
        alpha: f64,
        kind: LossKind,
    ) -> Result<LossNodes> {
        self.check_labels(labels)?;
        let n = T::from_usize(labels.len().max(1));
        let p = g.softmax(out.brand_logits)?;
        let targets: Vec<Option<usize>> = labels.iter().map(|l| Some(l.brand)).collect();
        let brand = g.log_loss(p, &targets, T::one() / n, kind)?;
        if alpha == 0.0 {
            return Ok(LossNodes { total: brand, brand, model: None });
        }
        let mut model: Option<NodeId> = None;
        for (bi, logits) in out.model_logits.iter().enumerate() {
            let Some(logits) = *logits else { continue };
            let targets: Vec<Option<usize>> =
                labels.iter().map(|l| (l.brand == bi).then_some(l.model)).collect();
            if targets.iter().all(Option::is_none) {
                continue;
            }
            let pm = g.softmax(logits)?;
            let term = g.log_loss(pm, &targets, T::one() / n, kind)?;
            model = Some(match model {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let total = match model {
            Some(m) => {
                let a = g.input(Tensor::scalar(T::from_f64(alpha)))?;
                let scaled = g.mul(m, a)?;
                g.add(brand, scaled)?
            }
            None => brand,
        };
        Ok(LossNodes { total, brand, model })
    }

    /// Log-loss over all models for the flat head, averaged over the batch.
    pub fn loss_flat(&self, g: &mut Graph<'_, T>, logits: NodeId, labels: &[SampleLabel], kind: LossKind) -> Result<NodeId> {
        self.check_labels(labels)?;
        let n = T::from_usize(labels.len().max(1));
        let p = g.softmax(logits)?;
        let targets: Vec<Option<usize>> =
            labels.iter().map(|l| Some(self.spec.flat_index(l.brand, l.model))).collect();
        g.log_loss(p, &targets, T::one() / n, kind)
    }

    fn check_labels(&self, labels: &[SampleLabel]) -> Result<()> {
        let k = self.spec.hierarchy.len();
        for l in labels {
            let Some(b) = self.spec.hierarchy.get(l.brand) else {
                return Err(Error::LabelOutOfRange { label: l.brand, classes: k });
            };
            if b.models.len() > 1 && l.model >= b.models.len() {
                return Err(Error::LabelOutOfRange { label: l.model, classes: b.models.len() });
            }
        }
        Ok(())
    }

    pub fn apply_bn_updates(&mut self, upd: BnUpdates<T>) {
        let m = T::from_f64(self.spec.bn_momentum);
        let keep = T::one() - m;
        for (idx, s) in upd.updates {
            let rs = &mut self.running[idx];
            let unbias = if s.count > 1 {
                T::from_usize(s.count) / T::from_usize(s.count - 1)
            } else {
                T::one()
            };
            for (r, &v) in rs.mean.iter_mut().zip(&s.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in rs.var.iter_mut().zip(&s.var) {
                *r = keep * *r + m * v * unbias;
            }
        }
    }

    /// Eval-mode hierarchical pass returning plain values.
    pub fn infer_hierarchical(&self, x: Tensor<T>) -> Result<HierarchicalOutput<T>> {
        let mut g = Graph::new(&self.params);
        let xn = g.input(x)?;
        let (nodes, _) = self.forward_hierarchical(&mut g, xn, Mode::Eval)?;
        let bp = g.softmax(nodes.brand_logits)?;
        let mut out = HierarchicalOutput {
            brand_logits: g.value(nodes.brand_logits).clone(),
            brand_probs: g.value(bp).clone(),
            model_logits: BTreeMap::new(),
            model_probs: BTreeMap::new(),
            brand_features: BTreeMap::new(),
        };
        for (bi, bs) in self.spec.hierarchy.iter().enumerate() {
            out.brand_features.insert(bs.brand.clone(), g.value(nodes.brand_features[bi]).clone());
            if let Some(ml) = nodes.model_logits[bi] {
                let mp = g.softmax(ml)?;
                out.model_logits.insert(bs.brand.clone(), g.value(ml).clone());
                out.model_probs.insert(bs.brand.clone(), g.value(mp).clone());
            }
        }
        Ok(out)
    }

    /// Eval-mode flat pass: `(logits, probabilities)`.
    pub fn infer_flat(&self, x: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new(&self.params);
        let xn = g.input(x)?;
        let (logits, _) = self.forward_flat(&mut g, xn, Mode::Eval)?;
        let p = g.softmax(logits)?;
        Ok((g.value(logits).clone(), g.value(p).clone()))
    }

    /// Grows the hierarchy without touching existing parameters or running
    /// statistics. New parameters are drawn from `seed`.
    pub fn add_branch(&mut self, target: BranchTarget, seed: u64) -> Result<()> {
        if self.spec.head != HeadKind::Hierarchical {
            return Err(Error::InvalidSpec { field: "head".into(), reason: "branches need a hierarchical head".into() });
        }
        let mut spec = self.spec.clone();
        match &target {
            BranchTarget::Brand { brand, model } => {
                if spec.brand_index(brand).is_some() {
                    return Err(Error::DuplicateBranch(brand.clone()));
                }
                let bs = BrandSpec { brand: brand.clone(), models: vec![model.clone()] };
                spec.hierarchy.push(bs.clone());
                spec.flat_fc_dims[2] = spec.n_models();
                let mut b = Builder { params: &mut self.params, running: &mut self.running, seed };
                let branch = b.brand_branch(&spec, &bs)?;
                self.brands.push(branch);
            }
            BranchTarget::Model { brand, model } => {
                let bi = spec.brand_index(brand).ok_or_else(|| Error::UnknownBrand(brand.clone()))?;
                if spec.hierarchy[bi].models.contains(model) {
                    return Err(Error::DuplicateBranch(alloc::format!("{brand}_{model}")));
                }
                spec.hierarchy[bi].models.push(model.clone());
                spec.flat_fc_dims[2] = spec.n_models();
                let models = spec.hierarchy[bi].models.clone();
                let mut b = Builder { params: &mut self.params, running: &mut self.running, seed };
                if self.brands[bi].models.is_empty() {
                    // a second model turns the brand into a multi-model brand
                    let mut branches = Vec::with_capacity(models.len());
                    for m in &models {
                        branches.push(b.model_branch(&spec, brand, m)?);
                    }
                    self.brands[bi].models = branches;
                } else {
                    let mb = b.model_branch(&spec, brand, model)?;
                    self.brands[bi].models.push(mb);
                }
            }
        }
        self.spec = spec;
        Ok(())
    }

    /// Every stored array by name: parameters first, then batchnorm running
    /// means and variances.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.values()))
            .collect();
        for rs in &self.running {
            out.push((alloc::format!("{}.running_mean", rs.name), vec![rs.mean.len()], &rs.mean[..]));
            out.push((alloc::format!("{}.running_var", rs.name), vec![rs.var.len()], &rs.var[..]));
        }
        out
    }

    /// Overwrites stored arrays by name. Every array of the network must be
    /// present with a matching shape; extra names are rejected.
    pub fn load_named_arrays(&mut self, arrays: &BTreeMap<String, (Vec<usize>, Vec<T>)>) -> Result<()> {
        let expected = self.named_arrays().len();
        if arrays.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "load",
                detail: alloc::format!("{} arrays for a network with {expected}", arrays.len()),
            });
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let (s, v) = arrays
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch { op: "load", detail: alloc::format!("missing {name}") })?;
            if s.as_slice() != shape || v.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch { op: "load", detail: alloc::format!("{name}: {s:?} vs {shape:?}") });
            }
            Ok(v.clone())
        };
        for p in self.params.iter_mut() {
            let v = fetch(&p.name, p.tensor.shape())?;
            p.tensor.values_mut().copy_from_slice(&v);
        }
        for rs in &mut self.running {
            rs.mean = fetch(&alloc::format!("{}.running_mean", rs.name), &[rs.mean.len()])?;
            rs.var = fetch(&alloc::format!("{}.running_var", rs.name), &[rs.var.len()])?;
        }
        Ok(())
    }

    /// Copy with every value converted to another scalar type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.add(p.name.clone(), p.role, p.tensor.cast());
        }
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(Real::to_f64(*x))).collect();
        Network {
            spec: self.spec.clone(),
            params,
            running: self
                .running
                .iter()
                .map(|r| RunningStats { name: r.name.clone(), mean: conv(&r.mean), var: conv(&r.var) })
                .collect(),
            trunk: self.trunk.clone(),
            brands: self.brands.clone(),
            flat: self.flat.clone(),
            seed: self.seed,
        }
    }
}

/// Trainable scalar count.
pub fn count_params<T: Real>(net: &Network<T>) -> usize {
    net.params().numel()
}

/// Loss of a single sample from probability vectors, without a graph.
/// Returns `(L_bc, L_mc, L_bc + α·L_mc)`; `model_probs` is ignored for
/// single-model brands, signalled by `None`.
pub fn combined_loss(
    brand_probs: &[f64],
    model_probs: Option<&[f64]>,
    label: SampleLabel,
    alpha: f64,
    kind: LossKind,
) -> Result<(f64, f64, f64)> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let bp = g.input(Tensor::new(&[1, brand_probs.len()], brand_probs.to_vec())?)?;
    let lbc = g.log_loss(bp, &[Some(label.brand)], 1.0, kind)?;
    let lbc = g.value(lbc).item();
    let lmc = match model_probs {
        Some(mp) => {
            let mn = g.input(Tensor::new(&[1, mp.len()], mp.to_vec())?)?;
            let l = g.log_loss(mn, &[Some(label.model)], 1.0, kind)?;
            g.value(l).item()
        }
        None => 0.0,
    };
    let total = if alpha == 0.0 { lbc } else { lbc + alpha * lmc };
    Ok((lbc, lmc, total))
}
