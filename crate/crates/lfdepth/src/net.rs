//! The oriented-relation patch network: two branches without weight sharing,
//! each built from two oriented relation modules, seven convolutional blocks
//! and a residual module, fused by a merging block into a single disparity
//! regression.
//!
//! The oriented relation module embeds the patch twice with 1x1 convolutions,
//! forms the pairwise relation matrix `F3 = E1 * E2^T` over all flattened
//! patch positions, keeps the relations between the center angular row and
//! every position, and concatenates that feature back onto the input patch.

use rand::Rng;

use crate::error::{LfError, Result};
use crate::lightfield::EpiPatch;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Element, Shape, Tensor};

/// Kernel pair of one `Conv-ReLU-Conv-BN-ReLU` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockKernels {
    pub k1: (usize, usize),
    pub k2: (usize, usize),
}

impl BlockKernels {
    pub fn shrink(&self) -> (usize, usize) {
        (self.k1.0 + self.k2.0 - 2, self.k1.1 + self.k2.1 - 2)
    }
}

/// Architecture of the two-branch network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    /// Oriented relation modules stacked at the branch input (0 disables).
    pub orm_count: usize,
    /// Output channels of each 1x1 relation embedding.
    pub orm_embed: usize,
    /// Biases on the relation embeddings (disabled in zero-propagation tests).
    pub orm_bias: bool,
    /// Channel width of every branch convolution.
    pub width: usize,
    pub conv_blocks: Vec<BlockKernels>,
    pub res_blocks: Vec<BlockKernels>,
    pub merge_block1: BlockKernels,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetConfig {
    /// The recommended schedule: 7 conv blocks of (2x2, 1x2) take 9x29 to
    /// 2x15, 6 residual blocks of (1x2, 1x2) take it to 2x3, and the merging
    /// block collapses to 1x1.
    pub fn with_width(width: usize) -> Self {
        NetConfig {
            patch_h: 9,
            patch_w: 29,
            channels: 3,
            orm_count: 2,
            orm_embed: 16,
            orm_bias: true,
            width,
            conv_blocks: vec![BlockKernels { k1: (2, 2), k2: (1, 2) }; 7],
            res_blocks: vec![BlockKernels { k1: (1, 2), k2: (1, 2) }; 6],
            merge_block1: BlockKernels { k1: (2, 2), k2: (1, 2) },
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    pub fn full() -> Self {
        Self::with_width(32)
    }

    /// Channel count after `n` stacked relation modules.
    pub fn channels_after_orms(&self) -> usize {
        self.channels + self.orm_count * self.patch_w
    }

    /// Spatial shape at the end of a branch.
    pub fn branch_output(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (self.patch_h, self.patch_w);
        for b in self.conv_blocks.iter().chain(&self.res_blocks) {
            let (dh, dw) = b.shrink();
            if dh >= h || dw >= w {
                return Err(LfError::Shape(format!(
                    "schedule exhausts the patch: {h}x{w} cannot shrink by {dh}x{dw}"
                )));
            }
            h -= dh;
            w -= dw;
        }
        Ok((h, w, self.width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_h % 2 == 0 || self.patch_w % 2 == 0 {
            return Err(LfError::Argument(format!(
                "patch must have odd extents, got {}x{}",
                self.patch_h, self.patch_w
            )));
        }
        if self.width == 0 || self.orm_embed == 0 {
            return Err(LfError::Argument("zero width".into()));
        }
        for b in &self.res_blocks {
            let (dh, dw) = b.shrink();
            if dh % 2 != 0 || dw % 2 != 0 {
                return Err(LfError::Shape(format!(
                    "residual block shrink ({dh}, {dw}) must be even for the centered skip"
                )));
            }
        }
        let (h, w, _) = self.branch_output()?;
        let (dh, dw) = self.merge_block1.shrink();
        if h.checked_sub(dh) != Some(1) || w.checked_sub(dw) != Some(1) {
            return Err(LfError::Shape(format!(
                "merge block must collapse {h}x{w} to 1x1, shrink is ({dh}, {dw})"
            )));
        }
        Ok(())
    }

    /// Canonical one-line description hashed into the architecture
    /// fingerprint stored in checkpoints.
    pub fn canonical_text(&self) -> String {
        let fmt_blocks = |blocks: &[BlockKernels]| {
            blocks
                .iter()
                .map(|b| format!("{}x{}+{}x{}", b.k1.0, b.k1.1, b.k2.0, b.k2.1))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "patch={}x{}x{} orm={}x{} bias={} width={} conv=[{}] res=[{}] merge=[{}] bn={},{}",
            self.patch_h,
            self.patch_w,
            self.channels,
            self.orm_count,
            self.orm_embed,
            self.orm_bias,
            self.width,
            fmt_blocks(&self.conv_blocks),
            fmt_blocks(&self.res_blocks),
            fmt_blocks(std::slice::from_ref(&self.merge_block1)),
            self.bn_eps,
            self.bn_momentum,
        )
    }

    pub fn fingerprint(&self) -> u64 {
        crate::config::fnv1a(self.canonical_text().as_bytes())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    kernel: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    updates: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    conv1: ConvIds,
    conv2: ConvIds,
    bn: BnIds,
}

#[derive(Debug, Clone, Copy)]
struct OrmIds {
    embed1: ConvIds,
    embed2: ConvIds,
}

#[derive(Debug, Clone)]
struct BranchIds {
    orms: Vec<OrmIds>,
    blocks: Vec<BlockIds>,
    res_blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
struct MergeIds {
    block1: BlockIds,
    conv1: ConvIds,
    conv2: ConvIds,
}

/// All weights of both branches and the merging block, stored as a flat,
/// deterministically ordered set of named tensors.
#[derive(Debug, Clone)]
pub struct NetworkParams<T> {
    pub config: NetConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    horizontal: BranchIds,
    vertical: BranchIds,
    merge: MergeIds,
}

struct Builder<'r, T, R: Rng> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    rng: &'r mut R,
}

impl<T: Element, R: Rng> Builder<'_, T, R> {
    fn add(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        self.tensors.len() - 1
    }

    /// He-initialized kernel, zero bias.
    fn conv(&mut self, name: &str, kh: usize, kw: usize, cin: usize, cout: usize, bias: bool) -> ConvIds {
        let fan_in = (kh * kw * cin) as f64;
        let kernel = Tensor::randn(Shape::d4(kh, kw, cin, cout), (2.0 / fan_in).sqrt(), self.rng);
        let kernel = self.add(format!("{name}.kernel"), kernel, true);
        let bias = bias.then(|| self.add(format!("{name}.bias"), Tensor::zeros(Shape::d1(cout)), true));
        ConvIds { kernel, bias }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIds {
        BnIds {
            gamma: self.add(format!("{name}.gamma"), Tensor::filled(Shape::d1(c), T::one()), true),
            beta: self.add(format!("{name}.beta"), Tensor::zeros(Shape::d1(c)), true),
            running_mean: self.add(format!("{name}.running_mean"), Tensor::zeros(Shape::d1(c)), false),
            running_var: self.add(format!("{name}.running_var"), Tensor::filled(Shape::d1(c), T::one()), false),
            updates: self.add(format!("{name}.updates"), Tensor::scalar(T::zero()), false),
        }
    }

    fn block(&mut self, name: &str, k: BlockKernels, cin: usize, width: usize) -> BlockIds {
        BlockIds {
            conv1: self.conv(&format!("{name}.conv1"), k.k1.0, k.k1.1, cin, width, true),
            conv2: self.conv(&format!("{name}.conv2"), k.k2.0, k.k2.1, width, width, true),
            bn: self.bn(&format!("{name}.bn"), width),
        }
    }

    fn branch(&mut self, prefix: &str, cfg: &NetConfig) -> BranchIds {
        let mut orms = Vec::new();
        let mut c = cfg.channels;
        for i in 0..cfg.orm_count {
            let name = format!("{prefix}.orm{i}");
            orms.push(OrmIds {
                embed1: self.conv(&format!("{name}.embed1"), 1, 1, c, cfg.orm_embed, cfg.orm_bias),
                embed2: self.conv(&format!("{name}.embed2"), 1, 1, c, cfg.orm_embed, cfg.orm_bias),
            });
            c += cfg.patch_w;
        }
        let mut blocks = Vec::new();
        for (i, k) in cfg.conv_blocks.iter().enumerate() {
            blocks.push(self.block(&format!("{prefix}.block{i}"), *k, c, cfg.width));
            c = cfg.width;
        }
        let mut res_blocks = Vec::new();
        for (i, k) in cfg.res_blocks.iter().enumerate() {
            res_blocks.push(self.block(&format!("{prefix}.res{i}"), *k, cfg.width, cfg.width));
        }
        BranchIds { orms, blocks, res_blocks }
    }
}

impl<T: Element> NetworkParams<T> {
    /// Fresh network: He-normal kernels, zero biases, identity batch norm.
    pub fn init(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new(), rng };
        let horizontal = b.branch("h", &config);
        let vertical = b.branch("v", &config);
        let merge = MergeIds {
            block1: b.block("merge.block1", config.merge_block1, 2 * config.width, config.width),
            conv1: b.conv("merge.conv1", 1, 1, config.width, config.width, true),
            conv2: b.conv("merge.conv2", 1, 1, config.width, 1, true),
        };
        Ok(NetworkParams {
            config,
            names: b.names,
            tensors: b.tensors,
            trainable: b.trainable,
            horizontal,
            vertical,
            merge,
        })
    }

    /// Rebuild a network from checkpointed tensors; every parameter must be
    /// present with the right shape.
    pub fn from_named_tensors(config: NetConfig, stored: &[(String, Tensor<T>)]) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = Self::init(config, &mut rng)?;
        let mut seen = vec![false; params.tensors.len()];
        for (name, tensor) in stored {
            match params.names.iter().position(|n| n == name) {
                Some(idx) => {
                    if params.tensors[idx].shape() != tensor.shape() {
                        return Err(LfError::Checkpoint(format!(
                            "tensor {name}: stored shape {} does not match architecture {}",
                            tensor.shape(),
                            params.tensors[idx].shape()
                        )));
                    }
                    params.tensors[idx] = tensor.clone();
                    seen[idx] = true;
                }
                None => {
                    return Err(LfError::Checkpoint(format!("unexpected tensor {name}")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(LfError::Checkpoint(format!(
                "checkpoint is missing tensor {}",
                params.names[missing]
            )));
        }
        Ok(params)
    }

    pub fn to_named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Indices of trainable tensors, in deterministic declaration order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.tensors.len()).filter(|&i| self.trainable[i]).collect()
    }

    pub fn trainable_shapes(&self) -> Vec<Shape> {
        self.trainable_indices().iter().map(|&i| self.tensors[i].shape()).collect()
    }

    /// Total trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.trainable_indices().iter().map(|&i| self.tensors[i].len()).sum()
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    /// Mutable references to the trainable tensors, in the same order as
    /// [`Self::trainable_indices`] (the optimizer slot order).
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors
            .iter_mut()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t)
            .collect()
    }

    /// True until the first training step has updated the running statistics.
    pub fn bn_uninitialized(&self) -> bool {
        self.names
            .iter()
            .zip(&self.tensors)
            .any(|(n, t)| n.ends_with(".updates") && t.item() == T::zero())
    }
}

/// Trainable-parameter count of a hypothetical EPINET-style variant built
/// from the same blocks but with four branches feeding the merge.
pub fn four_branch_parameter_count(cfg: &NetConfig) -> Result<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let two = NetworkParams::<f32>::init(cfg.clone(), &mut rng)?;
    let branch: usize = two
        .trainable_indices()
        .iter()
        .filter(|&&i| two.name(i).starts_with("h."))
        .map(|&i| two.tensor(i).len())
        .sum();
    let merge_two: usize = two
        .trainable_indices()
        .iter()
        .filter(|&&i| two.name(i).starts_with("merge."))
        .map(|&i| two.tensor(i).len())
        .sum();
    // the 4-branch merge consumes 4*width channels in its first conv
    let k = cfg.merge_block1.k1;
    let merge_four = merge_two + k.0 * k.1 * (2 * cfg.width) * cfg.width;
    Ok(4 * branch + merge_four)
}

/// Forward mode: training updates batch-norm running statistics, eval uses
/// them as constants (a pure function of inputs and parameters).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate handles of one oriented-relation application.
pub struct OrmTrace {
    pub embed1: Var,
    pub embed2: Var,
    /// The full relation matrix `(B, H*W, H*W)`.
    pub relation: Var,
    /// Center-row relations arranged as `(B, H, W, W)`, pre-activation.
    pub selected: Var,
    pub activated: Var,
    /// `(B, H, W, W + C_in)` concatenation of input and relation feature.
    pub output: Var,
}

/// One forward pass over a tape: binds parameters lazily and remembers which
/// tape variable each parameter landed on, so gradients can be harvested
/// after `backward`.
pub struct Runner<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    mode: Mode,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Element> Runner<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &NetworkParams<T>, mode: Mode) -> Self {
        Runner { tape, mode, bound: vec![None; params.len()] }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Tape variable a parameter was bound to during this pass, if used.
    pub fn bound_var(&self, idx: usize) -> Option<Var> {
        self.bound[idx]
    }

    /// Give up the tape borrow, keeping the parameter-to-variable map.
    pub fn into_bound(self) -> Vec<Option<Var>> {
        self.bound
    }

    fn bind(&mut self, params: &NetworkParams<T>, idx: usize) -> Var {
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.tape.leaf(params.tensors[idx].clone(), params.trainable[idx]);
        self.bound[idx] = Some(v);
        v
    }

    fn conv(&mut self, params: &NetworkParams<T>, ids: ConvIds, x: Var) -> Result<Var> {
        let k = self.bind(params, ids.kernel);
        let b = ids.bias.map(|bi| self.bind(params, bi));
        self.tape.conv2d_valid(x, k, b)
    }

    /// `Conv-ReLU-Conv-BN-ReLU`.
    fn conv_block(
        &mut self,
        params: &mut NetworkParams<T>,
        ids: BlockIds,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv(params, ids.conv1, x)?;
        let y = self.tape.relu(y)?;
        let y = self.conv(params, ids.conv2, y)?;
        let gamma = self.bind(params, ids.bn.gamma);
        let beta = self.bind(params, ids.bn.beta);
        let y = match self.mode {
            Mode::Train => {
                let eps = params.config.bn_eps;
                let momentum = params.config.bn_momentum;
                let (y, mean, var) = self.tape.batchnorm_train(y, gamma, beta, eps)?;
                let m = T::from_f64c(momentum);
                let one_m = T::from_f64c(1.0 - momentum);
                for (slot, batch) in [(ids.bn.running_mean, &mean), (ids.bn.running_var, &var)] {
                    let run = params.tensors[slot].data_mut();
                    for (r, &b) in run.iter_mut().zip(batch.data()) {
                        *r = m * *r + one_m * b;
                    }
                }
                let upd = params.tensors[ids.bn.updates].data_mut();
                upd[0] = upd[0] + T::one();
                y
            }
            Mode::Eval => {
                let rm = params.tensors[ids.bn.running_mean].clone();
                let rv = params.tensors[ids.bn.running_var].clone();
                self.tape.batchnorm_eval(y, gamma, beta, &rm, &rv, params.config.bn_eps)?
            }
        };
        self.tape.relu(y)
    }

    /// Oriented relation module, keeping intermediate handles for tests.
    pub fn orm_traced(
        &mut self,
        params: &NetworkParams<T>,
        branch: BranchSide,
        index: usize,
        x: Var,
    ) -> Result<OrmTrace> {
        let ids = side(params, branch).orms[index];
        let k1 = self.bind(params, ids.embed1.kernel);
        let b1 = ids.embed1.bias.map(|b| self.bind(params, b));
        let k2 = self.bind(params, ids.embed2.kernel);
        let b2 = ids.embed2.bias.map(|b| self.bind(params, b));
        orm_forward(self.tape, x, k1, b1, k2, b2)
    }

    /// One residual block: conv block plus a centered slice of the input.
    fn residual_block(
        &mut self,
        params: &mut NetworkParams<T>,
        ids: BlockIds,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv_block(params, ids, x)?;
        let ys = self.tape.shape(y);
        let xs = self.tape.shape(x);
        if ys.dim(3) != xs.dim(3) {
            return Err(LfError::Shape(format!(
                "residual block must preserve channels: {} vs {}",
                xs.dim(3),
                ys.dim(3)
            )));
        }
        let skip = self.tape.center_slice(x, ys.dim(1), ys.dim(2))?;
        self.tape.add(y, skip)
    }

    /// Full branch: stacked ORMs, conv blocks, residual module.
    pub fn branch(&mut self, params: &mut NetworkParams<T>, which: BranchSide, patch: Var) -> Result<Var> {
        let mut x = patch;
        for i in 0..side(params, which).orms.len() {
            x = self.orm_traced(params, which, i, x)?.output;
        }
        for i in 0..side(params, which).blocks.len() {
            let ids = side(params, which).blocks[i];
            x = self.conv_block(params, ids, x)?;
        }
        for i in 0..side(params, which).res_blocks.len() {
            let ids = side(params, which).res_blocks[i];
            x = self.residual_block(params, ids, x)?;
        }
        Ok(x)
    }

    /// Merging block: concatenation, one `Conv-ReLU-Conv-BN-ReLU` block, then
    /// `Conv-ReLU-Conv` down to one linear channel per sample.
    pub fn merge(&mut self, params: &mut NetworkParams<T>, feat_h: Var, feat_v: Var) -> Result<Var> {
        if self.tape.shape(feat_h) != self.tape.shape(feat_v) {
            return Err(LfError::Shape(format!(
                "merge inputs differ: {} vs {}",
                self.tape.shape(feat_h),
                self.tape.shape(feat_v)
            )));
        }
        let x = self.tape.concat_channels(feat_h, feat_v)?;
        let ids = params.merge.block1;
        let x = self.conv_block(params, ids, x)?;
        let conv1 = params.merge.conv1;
        let conv2 = params.merge.conv2;
        let x = self.conv(params, conv1, x)?;
        let x = self.tape.relu(x)?;
        let x = self.conv(params, conv2, x)?;
        let s = self.tape.shape(x);
        if s.dim(1) != 1 || s.dim(2) != 1 || s.dim(3) != 1 {
            return Err(LfError::Shape(format!("merge must end at 1x1x1 per sample, got {s}")));
        }
        self.tape.reshape(x, Shape::d1(s.dim(0)))
    }

    /// Whole network: a batch of horizontal/vertical patch pairs to a batch
    /// of disparities.
    pub fn network(&mut self, params: &mut NetworkParams<T>, patch_h: Var, patch_v: Var) -> Result<Var> {
        let fh = self.branch(params, BranchSide::Horizontal, patch_h)?;
        let fv = self.branch(params, BranchSide::Vertical, patch_v)?;
        self.merge(params, fh, fv)
    }
}

/// Which branch's weights to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSide {
    Horizontal,
    Vertical,
}

fn side<'p, T>(params: &'p NetworkParams<T>, which: BranchSide) -> &'p BranchIds {
    match which {
        BranchSide::Horizontal => &params.horizontal,
        BranchSide::Vertical => &params.vertical,
    }
}

/// Oriented relation module over explicit 1x1 embedding parameters.
///
/// Pipeline: two 1x1 convolutions embed the `(B, H, W, C)` patch into
/// `(B, H, W, K)`; flattening the spatial grid gives `(B, H*W, K)`; their
/// product forms the relation matrix `(B, H*W, H*W)`; the rows belonging to
/// the center angular row are kept, reshaped to `(B, H, W, W)`, activated,
/// and concatenated onto the input for a `(B, H, W, W + C)` output.
pub fn orm_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    embed1_kernel: Var,
    embed1_bias: Option<Var>,
    embed2_kernel: Var,
    embed2_bias: Option<Var>,
) -> Result<OrmTrace> {
    let s = tape.shape(x);
    if s.rank() != 4 {
        return Err(LfError::Shape(format!("orm wants a rank-4 patch, got {s}")));
    }
    let (b, h, w) = (s.dim(0), s.dim(1), s.dim(2));
    if h % 2 == 0 {
        return Err(LfError::Shape(format!("orm needs an odd angular height, got {h}")));
    }
    let k = tape.shape(embed1_kernel).dim(3);
    let e1 = tape.conv2d_valid(x, embed1_kernel, embed1_bias)?;
    let e2 = tape.conv2d_valid(x, embed2_kernel, embed2_bias)?;
    let f1 = tape.reshape(e1, Shape::d3(b, h * w, k))?;
    let f2 = tape.reshape(e2, Shape::d3(b, h * w, k))?;
    let relation = tape.bmm_nt(f1, f2)?;
    let selected = tape.center_relations(relation, h, w)?;
    let activated = tape.relu(selected)?;
    let output = tape.concat_channels(x, activated)?;
    Ok(OrmTrace { embed1: e1, embed2: e2, relation, selected, activated, output })
}

/// Finite-difference check of a miniature network with the full topology
/// (width 4), in double precision, over a random subset of trainable
/// coordinates. Returns the worst relative error.
pub fn end_to_end_gradcheck(seed: u64, min_coords: usize) -> Result<f64> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let cfg = NetConfig { orm_embed: 4, ..NetConfig::with_width(4) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = NetworkParams::<f64>::init(cfg, &mut rng)?;
    let ph = Tensor::<f64>::randn(Shape::d4(3, 9, 29, 3), 0.5, &mut rng);
    let pv = Tensor::<f64>::randn(Shape::d4(3, 9, 29, 3), 0.5, &mut rng);
    let target = Tensor::<f64>::from_vec(Shape::d1(3), vec![0.4, -0.6, 1.1])?;

    let forward = |p: &NetworkParams<f64>| -> Result<(f64, Tape<f64>, Vec<Option<Var>>, Var)> {
        let mut p = p.clone();
        let mut tape = Tape::new();
        let h = tape.constant(ph.clone());
        let v = tape.constant(pv.clone());
        let t = tape.constant(target.clone());
        let mut runner = Runner::new(&mut tape, &p, Mode::Train);
        let out = runner.network(&mut p, h, v)?;
        let loss = runner.tape.mae_loss(out, t)?;
        let bound = runner.into_bound();
        let value = tape.value(loss).item();
        Ok((value, tape, bound, loss))
    };

    let (_, tape, bound, loss) = forward(&params)?;
    let grads = tape.backward(loss)?;
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for idx in params.trainable_indices() {
        for j in 0..params.tensor(idx).len() {
            coords.push((idx, j));
        }
    }
    coords.shuffle(&mut rng);
    let h_step = 1e-5;
    let mut worst = 0.0f64;
    for &(idx, j) in coords.iter().take(min_coords.max(16)) {
        let mut plus = params.clone();
        plus.tensor_mut(idx).data_mut()[j] += h_step;
        let (fp, _, _, _) = forward(&plus)?;
        let mut minus = params.clone();
        minus.tensor_mut(idx).data_mut()[j] -= h_step;
        let (fm, _, _, _) = forward(&minus)?;
        let numeric = (fp - fm) / (2.0 * h_step);
        let analytic = bound[idx].and_then(|v| grads.get(v)).map(|g| g.data()[j]).unwrap_or(0.0);
        // gradients below 1e-4 are compared absolutely: central-difference
        // noise on a graph this size sits orders of magnitude lower
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Stack patches into a `(B, H, W, C)` tensor.
pub fn patches_to_tensor<T: Element>(patches: &[&EpiPatch]) -> Result<Tensor<T>> {
    if patches.is_empty() {
        return Err(LfError::Argument("empty patch batch".into()));
    }
    let (h, w, c) = (patches[0].height, patches[0].width, patches[0].channels);
    let mut data = Vec::with_capacity(patches.len() * h * w * c);
    for p in patches {
        if p.height != h || p.width != w || p.channels != c {
            return Err(LfError::Shape(format!(
                "patch {}x{}x{} in a {}x{}x{} batch",
                p.height, p.width, p.channels, h, w, c
            )));
        }
        data.extend(p.data.iter().map(|&v| T::from_f64c(v as f64)));
    }
    Tensor::from_vec(Shape::d4(patches.len(), h, w, c), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_config() -> NetConfig {
        NetConfig { width: 4, orm_embed: 4, ..NetConfig::with_width(4) }
    }

    #[test]
    fn default_schedule_validates_and_ends_at_1x1() {
        let cfg = NetConfig::full();
        cfg.validate().unwrap();
        assert_eq!(cfg.branch_output().unwrap(), (2, 3, 32));
        assert_eq!(cfg.channels_after_orms(), 61);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        let mut cfg = NetConfig::full();
        cfg.conv_blocks.push(BlockKernels { k1: (2, 2), k2: (1, 2) });
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::full();
        cfg.res_blocks[0] = BlockKernels { k1: (2, 2), k2: (1, 2) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn orm_shape_contract() {
        let k = 6;
        for (h, w, c) in [(9usize, 29usize, 3usize), (9, 17, 1), (5, 13, 3)] {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::randn(Shape::d4(2, h, w, c), 1.0, &mut rng(2)), false);
            let k1 = tape.leaf(Tensor::randn(Shape::d4(1, 1, c, k), 0.5, &mut rng(3)), true);
            let b1 = tape.leaf(Tensor::zeros(Shape::d1(k)), true);
            let k2 = tape.leaf(Tensor::randn(Shape::d4(1, 1, c, k), 0.5, &mut rng(4)), true);
            let b2 = tape.leaf(Tensor::zeros(Shape::d1(k)), true);
            let trace = orm_forward(&mut tape, x, k1, Some(b1), k2, Some(b2)).unwrap();
            assert_eq!(tape.shape(trace.relation).dims(), &[2, h * w, h * w]);
            assert_eq!(tape.shape(trace.output).dims(), &[2, h, w, w + c]);
        }
    }

    #[test]
    fn orm_zero_input_zero_output_without_bias() {
        let cfg = NetConfig { orm_bias: false, ..tiny_config() };
        let mut params = NetworkParams::<f64>::init(cfg, &mut rng(3)).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::d4(1, 9, 29, 3)), false);
        let mut runner = Runner::new(&mut tape, &params, Mode::Eval);
        let trace = runner.orm_traced(&mut params, BranchSide::Horizontal, 0, x).unwrap();
        assert!(tape.value(trace.relation).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(trace.output).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orm_selection_tracks_center_row() {
        // swapping two non-center angular rows permutes the relation feature
        // spatially but still selects the center-row relation indices
        let cfg = tiny_config();
        let mut params = NetworkParams::<f64>::init(cfg, &mut rng(5)).unwrap();
        let xt = Tensor::<f64>::randn(Shape::d4(1, 9, 29, 3), 1.0, &mut rng(6));
        let mut swapped = xt.clone();
        {
            let d = swapped.data_mut();
            let row = 29 * 3;
            for i in 0..row {
                d.swap(row + i, 7 * row + i); // angular rows 1 and 7
            }
        }
        let run = |input: Tensor<f64>, params: &mut NetworkParams<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(input, false);
            let mut runner = Runner::new(&mut tape, params, Mode::Eval);
            let trace = runner.orm_traced(params, BranchSide::Horizontal, 0, x).unwrap();
            tape.value(trace.activated).clone()
        };
        let base = run(xt, &mut params);
        let perm = run(swapped, &mut params);
        // F4 rows follow the permutation of the patch rows
        let plane = 29 * 29; // W spatial x W channels per angular row
        for i in 0..plane {
            assert_eq!(perm.data()[plane + i], base.data()[7 * plane + i]);
            assert_eq!(perm.data()[7 * plane + i], base.data()[plane + i]);
            assert_eq!(perm.data()[4 * plane + i], base.data()[4 * plane + i]);
        }
    }

    #[test]
    fn branch_output_shape_and_no_weight_sharing() {
        let cfg = tiny_config();
        let mut params = NetworkParams::<f64>::init(cfg, &mut rng(7)).unwrap();
        let patch = Tensor::<f64>::randn(Shape::d4(2, 9, 29, 3), 0.5, &mut rng(8));
        let mut tape = Tape::new();
        let x = tape.leaf(patch, false);
        let mut runner = Runner::new(&mut tape, &params, Mode::Eval);
        let fh = runner.branch(&mut params, BranchSide::Horizontal, x).unwrap();
        let fv = runner.branch(&mut params, BranchSide::Vertical, x).unwrap();
        assert_eq!(tape.shape(fh).dims(), &[2, 2, 3, 4]);
        // same input, different weights: outputs differ
        assert_ne!(tape.value(fh).data(), tape.value(fv).data());
    }

    #[test]
    fn residual_block_reduces_to_skip_when_conv_path_is_zeroed() {
        let cfg = tiny_config();
        let mut params = NetworkParams::<f64>::init(cfg, &mut rng(9)).unwrap();
        // zero the conv2 kernel and bias, set bn gamma to 0 and beta to 0 of res0
        for idx in 0..params.len() {
            let name = params.name(idx).to_string();
            if name.starts_with("h.res0") && (name.ends_with(".kernel") || name.ends_with(".gamma")) {
                let t = params.tensor_mut(idx);
                let zero = Tensor::zeros(t.shape());
                *t = zero;
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(Shape::d4(1, 2, 15, 4), 1.0, &mut rng(10)), false);
        let mut runner = Runner::new(&mut tape, &params, Mode::Eval);
        let ids = params.horizontal.res_blocks[0];
        let y = runner.residual_block(&mut params, ids, x).unwrap();
        let skip = tape.center_slice(x, 2, 13).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(skip).data());
    }

    #[test]
    fn six_residual_blocks_shrink_width_by_twelve() {
        let cfg = tiny_config();
        assert_eq!(cfg.branch_output().unwrap(), (2, 3, 4));
    }

    #[test]
    fn network_forward_is_finite_and_batch_consistent() {
        let cfg = tiny_config();
        let mut params = NetworkParams::<f64>::init(cfg, &mut rng(11)).unwrap();
        let ph = Tensor::<f64>::randn(Shape::d4(3, 9, 29, 3), 0.5, &mut rng(12));
        let pv = Tensor::<f64>::randn(Shape::d4(3, 9, 29, 3), 0.5, &mut rng(13));
        let run_batch = |params: &mut NetworkParams<f64>, ph: &Tensor<f64>, pv: &Tensor<f64>| {
            let mut tape = Tape::new();
            let h = tape.leaf(ph.clone(), false);
            let v = tape.leaf(pv.clone(), false);
            let mut runner = Runner::new(&mut tape, params, Mode::Eval);
            let out = runner.network(params, h, v).unwrap();
            tape.value(out).data().to_vec()
        };
        let batched = run_batch(&mut params, &ph, &pv);
        assert_eq!(batched.len(), 3);
        assert!(batched.iter().all(|v| v.is_finite()));
        // per-sample forward in eval mode matches the batched result bitwise
        for i in 0..3 {
            let slice = |t: &Tensor<f64>| {
                let n = 9 * 29 * 3;
                Tensor::from_vec(Shape::d4(1, 9, 29, 3), t.data()[i * n..(i + 1) * n].to_vec()).unwrap()
            };
            let single = run_batch(&mut params, &slice(&ph), &slice(&pv));
            assert_eq!(single[0].to_bits(), batched[i].to_bits());
        }
    }

    #[test]
    fn swapped_merge_inputs_change_output() {
        let cfg = tiny_config();
        let mut params = NetworkParams::<f64>::init(cfg, &mut rng(21)).unwrap();
        let a = Tensor::<f64>::randn(Shape::d4(1, 2, 3, 4), 1.0, &mut rng(22));
        let b = Tensor::<f64>::randn(Shape::d4(1, 2, 3, 4), 1.0, &mut rng(23));
        let run = |params: &mut NetworkParams<f64>, x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let yv = tape.leaf(y.clone(), false);
            let mut runner = Runner::new(&mut tape, params, Mode::Eval);
            let out = runner.merge(params, xv, yv).unwrap();
            tape.value(out).item()
        };
        let ab = run(&mut params, &a, &b);
        let ba = run(&mut params, &b, &a);
        assert_ne!(ab, ba);
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let cfg = tiny_config();
        let mut params = NetworkParams::<f64>::init(cfg, &mut rng(31)).unwrap();
        let mut tape = Tape::new();
        // odd batch so MAE sign gradients cannot cancel to an exact zero
        let h = tape.leaf(Tensor::randn(Shape::d4(3, 9, 29, 3), 0.5, &mut rng(32)), false);
        let v = tape.leaf(Tensor::randn(Shape::d4(3, 9, 29, 3), 0.5, &mut rng(33)), false);
        let mut runner = Runner::new(&mut tape, &params, Mode::Train);
        let out = runner.network(&mut params, h, v).unwrap();
        let target = runner.tape.constant(Tensor::from_vec(Shape::d1(3), vec![0.3, -0.7, 1.1]).unwrap());
        let loss = runner.tape.mae_loss(out, target).unwrap();
        let bound = runner.into_bound();
        let grads = tape.backward(loss).unwrap();
        for idx in params.trainable_indices() {
            let var = bound[idx].unwrap_or_else(|| panic!("{} unused", params.name(idx)));
            let g = grads
                .get(var)
                .unwrap_or_else(|| panic!("no gradient for {}", params.name(idx)));
            assert!(g.data().iter().any(|&v| v != 0.0), "all-zero grad for {}", params.name(idx));
        }
    }

    #[test]
    fn parameter_count_below_four_branch_variant() {
        let cfg = NetConfig::full();
        let params = NetworkParams::<f32>::init(cfg.clone(), &mut rng(41)).unwrap();
        let two = params.parameter_count();
        let four = four_branch_parameter_count(&cfg).unwrap();
        assert!(two < four, "two-branch {two} vs four-branch {four}");
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_identical_network() {
        let cfg = tiny_config();
        let params = NetworkParams::<f32>::init(cfg.clone(), &mut rng(51)).unwrap();
        let stored = params.to_named_tensors();
        let rebuilt = NetworkParams::<f32>::from_named_tensors(cfg, &stored).unwrap();
        for idx in 0..params.len() {
            assert_eq!(params.tensor(idx).data(), rebuilt.tensor(idx).data());
        }
        // a missing tensor is an error
        let cfg2 = tiny_config();
        assert!(NetworkParams::<f32>::from_named_tensors(cfg2, &stored[1..]).is_err());
    }
}
