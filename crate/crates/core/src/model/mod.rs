//! Model assembly and execution.
//!
//! A [`ModelGraph`] is a list of branches, each a layer stack fed by a column
//! slice of the input, followed by a shared head over the concatenated branch
//! outputs. The PMFFNN has one branch per column group (plus the optional full
//! pathway, always first); the baselines are the degenerate single-branch case.

mod config;

use std::sync::Arc;

use rayon::prelude::*;

pub use config::{
    auto_groups, ArchConfig, ColumnGroups, ConvSpec, GroupsConfig, HeadSpec, ModelKind, PathwaySpec, Task,
};

use crate::error::{Error, Result};
use crate::layers::{param_count, Activation, Init, Layer, LayerSpec, Mode, Param};
use crate::streams;
use crate::tensor::{Matrix, Rng};

/// Slices `x` into one matrix per group, in group order.
pub fn split_columns(x: &Matrix, groups: &ColumnGroups) -> Result<Vec<Matrix>> {
    groups.groups.iter().map(|g| x.select_columns(g)).collect()
}

/// BN → Dense+SELU → [BN → Dense → Dropout]×repeat → Dense+Sigmoid → BN.
pub fn build_micro_ffnn(input_dim: usize, spec: &PathwaySpec) -> Result<Vec<LayerSpec>> {
    if input_dim == 0 {
        return Err(Error::domain("build_micro_ffnn", "input_dim must be >= 1"));
    }
    let h = spec.hidden_dim;
    let mut layers = vec![
        LayerSpec::batch_norm(input_dim),
        LayerSpec::dense(input_dim, h),
        LayerSpec::activation(Activation::Selu, h),
    ];
    for _ in 0..spec.repeat_blocks {
        layers.push(LayerSpec::batch_norm(h));
        layers.push(LayerSpec::dense(h, h));
        layers.push(LayerSpec::dropout(h, spec.dropout_rate));
    }
    layers.push(LayerSpec::dense(h, spec.output_dim));
    layers.push(LayerSpec::activation(Activation::Sigmoid, spec.output_dim));
    layers.push(LayerSpec::batch_norm(spec.output_dim));
    for l in &layers {
        l.validate()?;
    }
    Ok(layers)
}

/// Dense(hidden) → Dropout → BN → Dense(n_outputs) → Softmax (classification only).
pub fn build_head(input_dim: usize, head: &HeadSpec, n_outputs: usize, task: Task) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::dense(input_dim, head.hidden_dim),
        LayerSpec::dropout(head.hidden_dim, head.dropout_rate),
        LayerSpec::batch_norm(head.hidden_dim),
        LayerSpec::dense(head.hidden_dim, n_outputs),
    ];
    if task == Task::Classification {
        layers.push(LayerSpec::activation(Activation::Softmax, n_outputs));
    }
    layers
}

/// BN → [Conv1D → ReLU]×blocks over the feature axis as a single channel.
pub fn build_conv_stack(n_features: usize, conv: &ConvSpec) -> Result<Vec<LayerSpec>> {
    let mut layers = vec![LayerSpec::batch_norm(n_features)];
    let mut channels = 1;
    let mut len = n_features;
    for _ in 0..conv.blocks {
        let spec = LayerSpec::conv1d(channels, len, conv.channels, conv.kernel_size);
        spec.validate()?;
        let out = spec.out_dim();
        layers.push(spec);
        layers.push(LayerSpec::activation(Activation::Relu, out));
        channels = conv.channels;
        len = len + 1 - conv.kernel_size;
    }
    Ok(layers)
}

/// A sequence of layers with its own dropout stream.
#[derive(Debug, Clone)]
pub struct Stack {
    layers: Vec<Layer>,
    rng: Rng,
}

impl Stack {
    pub fn new(specs: Vec<LayerSpec>, init: &mut Rng, dropout_rng: Rng) -> Result<Self> {
        for pair in specs.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Stack::new",
                    format!("{} feeds {}", pair[0].label(), pair[1].label()),
                ));
            }
        }
        let layers = specs
            .into_iter()
            .map(|s| Layer::new(s, Init::LecunNormal, init))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            rng: dropout_rng,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.spec().in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec().out_dim())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| param_count(l.spec())).sum()
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode, &mut self.rng)?;
        }
        Ok(h)
    }

    /// Backpropagates through all but the `skip_last` trailing layers.
    fn backward(&mut self, upstream: &Matrix, skip_last: usize) -> Result<Matrix> {
        let n = self.layers.len() - skip_last;
        let mut g = upstream.clone();
        for layer in self.layers[..n].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub name: String,
    /// `None` means the branch sees every input column.
    pub columns: Option<Vec<usize>>,
    pub stack: Stack,
}

impl Branch {
    fn input(&self, x: &Matrix) -> Result<Matrix> {
        match &self.columns {
            Some(cols) => x.select_columns(cols),
            None => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct BranchCount {
    pub name: String,
    pub input_dim: usize,
    pub params: usize,
    /// Trainable parameters of the first Dense (or Conv1D) layer.
    pub first_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParamBreakdown {
    pub branches: Vec<BranchCount>,
    pub head: usize,
    pub total: usize,
    /// Hidden width of the width-matched monolithic FFNN.
    pub monolithic_hidden: usize,
    pub monolithic_first_layer: usize,
    pub monolithic_total: usize,
}

impl ParamBreakdown {
    pub fn first_layer_total(&self) -> usize {
        self.branches.iter().map(|b| b.first_layer).sum()
    }

    pub fn reduction_ratio(&self) -> f64 {
        self.first_layer_total() as f64 / self.monolithic_first_layer as f64
    }
}

fn first_layer_count(specs: &[LayerSpec]) -> usize {
    specs
        .iter()
        .find(|s| matches!(s, LayerSpec::Dense { .. } | LayerSpec::Conv1D { .. }))
        .map_or(0, param_count)
}

/// Config of the monolithic FFNN whose hidden width equals the sum of the
/// branch hidden widths (and output width the sum of branch output widths).
pub fn width_matched_monolithic(cfg: &ArchConfig) -> Result<ArchConfig> {
    let branches = match cfg.kind {
        ModelKind::Pmffnn => {
            let groups = cfg.column_groups()?.expect("pmffnn has groups");
            groups.len() + usize::from(groups.include_full_pathway)
        }
        _ => 1,
    };
    let mut mono = cfg.with_kind(ModelKind::DeepFfnn);
    mono.groups = None;
    mono.include_full_pathway = false;
    mono.pathway.hidden_dim = cfg.pathway.hidden_dim * branches;
    mono.pathway.output_dim = cfg.pathway.output_dim * branches;
    Ok(mono)
}

/// Parameter accounting straight from the config, without allocating weights.
pub fn count_config_parameters(cfg: &ArchConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let (branch_specs, concat) = branch_layer_specs(cfg)?;
    let branches: Vec<BranchCount> = branch_specs
        .iter()
        .map(|(name, cols, specs)| BranchCount {
            name: name.clone(),
            input_dim: cols.as_ref().map_or(cfg.n_features, Vec::len),
            params: specs.iter().map(param_count).sum(),
            first_layer: first_layer_count(specs),
        })
        .collect();
    let head: usize = build_head(concat, &cfg.head, cfg.n_outputs, cfg.task)
        .iter()
        .map(param_count)
        .sum();
    let total = branches.iter().map(|b| b.params).sum::<usize>() + head;

    let mono = width_matched_monolithic(cfg)?;
    let mono_branch = build_micro_ffnn(mono.n_features, &mono.pathway)?;
    let mono_head: usize = build_head(mono.pathway.output_dim, &mono.head, mono.n_outputs, mono.task)
        .iter()
        .map(param_count)
        .sum();
    Ok(ParamBreakdown {
        branches,
        head,
        total,
        monolithic_hidden: mono.pathway.hidden_dim,
        monolithic_first_layer: first_layer_count(&mono_branch),
        monolithic_total: mono_branch.iter().map(param_count).sum::<usize>() + mono_head,
    })
}

type BranchSpecs = Vec<(String, Option<Vec<usize>>, Vec<LayerSpec>)>;

/// Branch layer recipes in concatenation order, plus the concatenated width.
fn branch_layer_specs(cfg: &ArchConfig) -> Result<(BranchSpecs, usize)> {
    let mut out: BranchSpecs = Vec::new();
    match cfg.kind {
        ModelKind::Pmffnn => {
            let groups = cfg.column_groups()?.expect("pmffnn has groups");
            if groups.include_full_pathway {
                out.push(("full".into(), None, build_micro_ffnn(cfg.n_features, &cfg.pathway)?));
            }
            for (i, g) in groups.groups.iter().enumerate() {
                out.push((
                    format!("subset{}", i + 1),
                    Some(g.clone()),
                    build_micro_ffnn(g.len(), &cfg.pathway)?,
                ));
            }
        }
        ModelKind::DeepFfnn => {
            out.push(("ffnn".into(), None, build_micro_ffnn(cfg.n_features, &cfg.pathway)?));
        }
        ModelKind::Cnn1d => {
            out.push(("conv".into(), None, build_conv_stack(cfg.n_features, &cfg.conv)?));
        }
    }
    let concat = out.iter().map(|(_, _, s)| s.last().map_or(0, LayerSpec::out_dim)).sum();
    Ok((out, concat))
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    config: ArchConfig,
    branches: Vec<Branch>,
    head: Stack,
    threads: usize,
    pool: Option<Arc<rayon::ThreadPool>>,
    ran_forward: bool,
}

impl ModelGraph {
    /// Builds the model described by `config`, drawing initial weights from
    /// the init stream of `seed`.
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, concat) = branch_layer_specs(config)?;
        let mut init = Rng::with_stream(seed, streams::INIT);
        let branches = specs
            .into_iter()
            .enumerate()
            .map(|(i, (name, columns, layers))| {
                let dropout = Rng::with_stream(seed, streams::branch_dropout(i));
                Ok(Branch {
                    name,
                    columns,
                    stack: Stack::new(layers, &mut init, dropout)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Stack::new(
            build_head(concat, &config.head, config.n_outputs, config.task),
            &mut init,
            Rng::with_stream(seed, streams::HEAD_DROPOUT),
        )?;
        Ok(Self {
            config: config.clone(),
            branches,
            head,
            threads: 1,
            pool: None,
            ran_forward: false,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features
    }

    pub fn n_outputs(&self) -> usize {
        self.config.n_outputs
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn head(&self) -> &Stack {
        &self.head
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Caps pathway parallelism. `1` runs pathways sequentially on the caller's thread.
    pub fn set_threads(&mut self, threads: usize) -> Result<()> {
        let threads = threads.max(1);
        self.pool = if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::State(format!("cannot start thread pool: {e}")))?;
            Some(Arc::new(pool))
        } else {
            None
        };
        self.threads = threads;
        Ok(())
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers().any(|l| matches!(l.spec(), LayerSpec::BatchNorm { .. }))
    }

    pub fn has_softmax_output(&self) -> bool {
        matches!(
            self.head.layers.last().map(Layer::spec),
            Some(LayerSpec::Activation {
                activation: Activation::Softmax,
                ..
            })
        )
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.branches
            .iter()
            .flat_map(|b| b.stack.layers.iter())
            .chain(self.head.layers.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.branches
            .iter_mut()
            .flat_map(|b| b.stack.layers.iter_mut())
            .chain(self.head.layers.iter_mut())
    }

    /// Trainable parameters in a fixed order (branches in concatenation order, then head).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers_mut().flat_map(|l| l.params_mut().iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers().flat_map(|l| l.params().iter())
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers_mut() {
            l.zero_grad();
        }
    }

    /// Every persisted tensor (parameters and running statistics) with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let stacks = self
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("branch{i}"), &b.stack))
            .chain(std::iter::once(("head".to_owned(), &self.head)));
        let mut out = Vec::new();
        for (prefix, stack) in stacks {
            for (j, layer) in stack.layers.iter().enumerate() {
                for p in layer.params().iter().chain(layer.buffers()) {
                    out.push((format!("{prefix}.{j}.{}", p.name), &p.value));
                }
            }
        }
        out
    }

    /// Overwrites the tensor called `name` (as listed by [`Self::named_tensors`]).
    pub fn set_tensor(&mut self, name: &str, value: Matrix) -> Result<()> {
        let unknown = || Error::ModelFormat(format!("unknown tensor `{name}`"));
        let mut parts = name.splitn(3, '.');
        let (Some(owner), Some(index), Some(param)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(unknown());
        };
        let index: usize = index.parse().map_err(|_| unknown())?;
        let stack = if owner == "head" {
            &mut self.head
        } else {
            let i: usize = owner
                .strip_prefix("branch")
                .and_then(|s| s.parse().ok())
                .ok_or_else(unknown)?;
            &mut self.branches.get_mut(i).ok_or_else(unknown)?.stack
        };
        stack.layers.get_mut(index).ok_or_else(unknown)?.set_param(param, value)
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        let mut breakdown = count_config_parameters(&self.config).expect("built from a valid config");
        // the live stacks are authoritative
        for (count, branch) in breakdown.branches.iter_mut().zip(&self.branches) {
            count.params = branch.stack.param_count();
        }
        breakdown.head = self.head.param_count();
        breakdown.total = breakdown.branches.iter().map(|b| b.params).sum::<usize>() + breakdown.head;
        breakdown
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        if x.cols() != self.config.n_features {
            return Err(Error::shape(
                "model_forward",
                format!("model expects {} features, got {}", self.config.n_features, x.cols()),
            ));
        }
        let outputs: Vec<Matrix> = match &self.pool {
            Some(pool) => pool.install(|| {
                self.branches
                    .par_iter_mut()
                    .map(|b| b.input(x).and_then(|input| b.stack.forward(&input, mode)))
                    .collect::<Result<_>>()
            })?,
            None => self
                .branches
                .iter_mut()
                .map(|b| b.input(x).and_then(|input| b.stack.forward(&input, mode)))
                .collect::<Result<_>>()?,
        };
        let merged = if outputs.len() == 1 {
            outputs.into_iter().next().expect("one branch")
        } else {
            Matrix::hconcat(&outputs)?
        };
        let y = self.head.forward(&merged, mode)?;
        self.ran_forward = true;
        Ok(y)
    }

    /// Backpropagates the gradient of the loss w.r.t. the model output,
    /// accumulating every parameter gradient. Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        self.backward_impl(upstream, 0)
    }

    /// Like [`Self::backward`] but `grad_logits` is taken w.r.t. the input of
    /// the trailing softmax (the fused softmax/cross-entropy gradient). For
    /// heads without a softmax this is the same as `backward`.
    pub fn backward_from_logits(&mut self, grad_logits: &Matrix) -> Result<Matrix> {
        let skip = usize::from(self.has_softmax_output());
        self.backward_impl(grad_logits, skip)
    }

    fn backward_impl(&mut self, upstream: &Matrix, skip_last: usize) -> Result<Matrix> {
        if !self.ran_forward {
            return Err(Error::State("model backward without a forward pass".into()));
        }
        let d_merged = self.head.backward(upstream, skip_last)?;
        let widths: Vec<usize> = self.branches.iter().map(|b| b.stack.out_dim()).collect();
        let parts = d_merged.hsplit(&widths)?;
        let input_grads: Vec<Matrix> = match &self.pool {
            Some(pool) => pool.install(|| {
                self.branches
                    .par_iter_mut()
                    .zip(parts.par_iter())
                    .map(|(b, g)| b.stack.backward(g, 0))
                    .collect::<Result<_>>()
            })?,
            None => self
                .branches
                .iter_mut()
                .zip(&parts)
                .map(|(b, g)| b.stack.backward(g, 0))
                .collect::<Result<_>>()?,
        };
        let rows = upstream.rows();
        let mut dx = Matrix::zeros(rows, self.config.n_features);
        for (branch, g) in self.branches.iter().zip(&input_grads) {
            match &branch.columns {
                Some(cols) => {
                    for r in 0..rows {
                        let src = g.row(r);
                        let dst = dx.row_mut(r);
                        for (k, &c) in cols.iter().enumerate() {
                            dst[c] += src[k];
                        }
                    }
                }
                None => dx.add_assign(g)?,
            }
        }
        Ok(dx)
    }

    /// Inference-mode forward pass.
    pub fn predict(&mut self, x: &Matrix) -> Result<Matrix> {
        self.forward(x, Mode::Inference)
    }
}
