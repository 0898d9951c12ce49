use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One feature-extraction block: conv → batchnorm → relu → max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

/// A conv → batchnorm → relu module without pooling, used by every branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbrSpec {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    pub padding: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrandSpec {
    pub brand: String,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Hierarchical,
    Flat,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input patch.
    pub input: [usize; 3],
    pub feature_blocks: Vec<BlockSpec>,
    pub branch_block: CbrSpec,
    pub hierarchy: Vec<BrandSpec>,
    pub head: HeadKind,
    /// Output widths of the three fully connected layers of the flat head;
    /// the last equals the number of camera models.
    pub flat_fc_dims: [usize; 3],
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidSpec { field: field.to_string(), reason: reason.into() }
}

fn conv_out(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 || k == 0 || k > len + 2 * p {
        return None;
    }
    Some((len + 2 * p - k) / s + 1)
}

fn pool_out(len: usize, k: usize, s: usize) -> Option<usize> {
    if s == 0 || k == 0 || k > len {
        return None;
    }
    Some((len - k) / s + 1)
}

fn cbr_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout + 2 * cout
}

fn fc_count(d: usize, o: usize) -> usize {
    d * o + o
}

/// Dresden models per brand, in Table-I order.
pub const DRESDEN_HIERARCHY: &[(&str, &[&str])] = &[
    ("Canon", &["Ixus70"]),
    ("Casio", &["EX-Z150"]),
    ("FujiFilm", &["FinePixJ50"]),
    ("Kodak", &["M1063"]),
    ("Nikon", &["CoolPixS710", "D200", "D70"]),
    ("Olympus", &["mju_1050SW"]),
    ("Panasonic", &["DMC-FZ50"]),
    ("Pentax", &["OptioA40"]),
    ("Praktica", &["DCZ5.9"]),
    ("Ricoh", &["GX100"]),
    ("Rollei", &["RCP-7325XS"]),
    ("Samsung", &["L74wide", "NV15"]),
    ("Sony", &["DSC-H50", "DSC-T77", "DSC-W170"]),
];

impl NetworkSpec {
    /// Full-size 128×128 network over the 13-brand / 18-model hierarchy.
    /// Channel widths and kernel sizes are a configuration choice, not a
    /// reproduction of any published figure.
    pub fn paper_default() -> Self {
        let block = |c, k| BlockSpec { out_channels: c, kernel: k, stride: 1, padding: k / 2, pool_kernel: 2, pool_stride: 2 };
        let hierarchy = DRESDEN_HIERARCHY
            .iter()
            .map(|(b, ms)| BrandSpec { brand: (*b).into(), models: ms.iter().map(|m| (*m).into()).collect() })
            .collect();
        Self {
            input: [3, 128, 128],
            feature_blocks: vec![block(32, 7), block(64, 5), block(128, 5), block(128, 3)],
            branch_block: CbrSpec { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
            hierarchy,
            head: HeadKind::Hierarchical,
            flat_fc_dims: [256, 128, 18],
            bn_eps: default_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    /// Small 128×128 network (channels 8, 8, 16, 16) for desk-scale runs.
    pub fn toy(hierarchy: Vec<BrandSpec>, head: HeadKind) -> Self {
        let n_models = hierarchy.iter().map(|b| b.models.len()).sum();
        Self {
            input: [3, 128, 128],
            feature_blocks: vec![
                BlockSpec { out_channels: 8, kernel: 5, stride: 2, padding: 2, pool_kernel: 2, pool_stride: 2 },
                BlockSpec { out_channels: 8, kernel: 5, stride: 1, padding: 2, pool_kernel: 2, pool_stride: 2 },
                BlockSpec { out_channels: 16, kernel: 5, stride: 1, padding: 2, pool_kernel: 2, pool_stride: 2 },
                BlockSpec { out_channels: 16, kernel: 3, stride: 1, padding: 1, pool_kernel: 2, pool_stride: 2 },
            ],
            branch_block: CbrSpec { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            hierarchy,
            head,
            flat_fc_dims: [64, 32, n_models],
            bn_eps: default_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn n_models(&self) -> usize {
        self.hierarchy.iter().map(|b| b.models.len()).sum()
    }

    pub fn brand_index(&self, brand: &str) -> Option<usize> {
        self.hierarchy.iter().position(|b| b.brand == brand)
    }

    /// `(brand index, model index within brand)` for a class name pair.
    pub fn label_of(&self, brand: &str, model: &str) -> Option<(usize, usize)> {
        let b = self.brand_index(brand)?;
        let m = self.hierarchy[b].models.iter().position(|x| x == model)?;
        Some((b, m))
    }

    /// Position of `(brand, model)` in the flattened model list.
    pub fn flat_index(&self, brand: usize, model: usize) -> usize {
        self.hierarchy[..brand].iter().map(|b| b.models.len()).sum::<usize>() + model
    }

    /// Inverse of [`NetworkSpec::flat_index`].
    pub fn unflatten(&self, mut flat: usize) -> (usize, usize) {
        for (b, bs) in self.hierarchy.iter().enumerate() {
            if flat < bs.models.len() {
                return (b, flat);
            }
            flat -= bs.models.len();
        }
        (self.hierarchy.len(), 0)
    }

    /// Shape `(C, H, W)` of the global feature map.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        if self.input[0] != 3 {
            return Err(invalid("input", "expected 3 channels"));
        }
        let (mut c, mut h, mut w) = (self.input[0], self.input[1], self.input[2]);
        for (i, b) in self.feature_blocks.iter().enumerate() {
            let field = alloc::format!("feature_blocks[{i}]");
            if b.out_channels == 0 {
                return Err(invalid(&field, "zero channels"));
            }
            h = conv_out(h, b.kernel, b.stride, b.padding).ok_or_else(|| invalid(&field, "conv does not fit"))?;
            w = conv_out(w, b.kernel, b.stride, b.padding).ok_or_else(|| invalid(&field, "conv does not fit"))?;
            h = pool_out(h, b.pool_kernel, b.pool_stride).ok_or_else(|| invalid(&field, "pool does not fit"))?;
            w = pool_out(w, b.pool_kernel, b.pool_stride).ok_or_else(|| invalid(&field, "pool does not fit"))?;
            c = b.out_channels;
        }
        Ok((c, h, w))
    }

    /// Shape of every branch feature map; spatial size equals the global map.
    pub fn branch_shape(&self) -> Result<(usize, usize, usize)> {
        let (_, h, w) = self.feature_shape()?;
        let b = &self.branch_block;
        let bh = conv_out(h, b.kernel, b.stride, b.padding);
        let bw = conv_out(w, b.kernel, b.stride, b.padding);
        if b.out_channels == 0 || bh != Some(h) || bw != Some(w) {
            return Err(invalid("branch_block", "branch CBR must preserve the feature map's spatial size"));
        }
        Ok((b.out_channels, h, w))
    }

    // negated comparisons so that NaN fails too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.feature_blocks.len() != 4 {
            return Err(invalid("feature_blocks", alloc::format!("expected 4 blocks, got {}", self.feature_blocks.len())));
        }
        self.branch_shape()?;
        if self.hierarchy.is_empty() {
            return Err(invalid("hierarchy", "no brands"));
        }
        for (i, b) in self.hierarchy.iter().enumerate() {
            if b.models.is_empty() {
                return Err(invalid(&alloc::format!("hierarchy[{i}]"), "brand without models"));
            }
            if self.hierarchy[..i].iter().any(|o| o.brand == b.brand) {
                return Err(invalid(&alloc::format!("hierarchy[{i}]"), alloc::format!("duplicate brand {}", b.brand)));
            }
            for (j, m) in b.models.iter().enumerate() {
                if b.models[..j].contains(m) {
                    return Err(invalid(&alloc::format!("hierarchy[{i}]"), alloc::format!("duplicate model {m}")));
                }
            }
        }
        if self.flat_fc_dims.contains(&0) {
            return Err(invalid("flat_fc_dims", "zero width"));
        }
        if self.head == HeadKind::Flat && self.flat_fc_dims[2] != self.n_models() {
            return Err(invalid(
                "flat_fc_dims",
                alloc::format!("last layer {} must equal model count {}", self.flat_fc_dims[2], self.n_models()),
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(invalid("bn_eps", "eps must be positive and momentum within [0, 1]"));
        }
        Ok(())
    }

    /// Trainable parameter count implied by the spec.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let mut cin = self.input[0];
        let mut n = 0;
        for b in &self.feature_blocks {
            n += cbr_count(cin, b.out_channels, b.kernel);
            cin = b.out_channels;
        }
        let (c, h, w) = self.feature_shape()?;
        match self.head {
            HeadKind::Hierarchical => {
                let (cb, _, _) = self.branch_shape()?;
                let k = self.branch_block.kernel;
                let branch = cbr_count(c, cb, k) + fc_count(cb * h * w, 1);
                let model_branch = cbr_count(cb, cb, k) + fc_count(cb * h * w, 1);
                for b in &self.hierarchy {
                    n += branch;
                    if b.models.len() > 1 {
                        n += b.models.len() * model_branch;
                    }
                }
            }
            HeadKind::Flat => {
                let [d0, d1, d2] = self.flat_fc_dims;
                n += fc_count(c * h * w, d0) + fc_count(d0, d1) + fc_count(d1, d2);
            }
        }
        Ok(n)
    }
}
