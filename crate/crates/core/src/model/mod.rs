//! The Citrinet encoder: a prolog, three stride-2 mega-blocks of
//! SE-gated residual blocks built from time-channel separable
//! convolutions, an epilog, and a pointwise CTC head.

mod checkpoint;
mod config;
mod logprob;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::tensor::{BatchStats, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{output_frames, scale_kernel_layout, CitrinetConfig, KernelLayout, SeContext, MEGABLOCK_SIZES};
pub use logprob::LogProbMatrix;
pub(crate) use logprob::transpose_to_class_major;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Receives parameter declarations while the network is assembled, either
/// allocating them or only counting.
trait ParamSink {
    fn param(&mut self, name: String, shape: &[usize], decay: bool, init: Init) -> Result<ParamId>;
    fn running_stats(&mut self, name: String, channels: usize) -> usize;
}

struct Counter {
    next: usize,
    buffers: usize,
    by_section: BTreeMap<String, usize>,
}

impl ParamSink for Counter {
    fn param(&mut self, name: String, shape: &[usize], _decay: bool, _init: Init) -> Result<ParamId> {
        let section = name.split('.').next().unwrap_or_default().to_string();
        *self.by_section.entry(section).or_default() += shape.iter().product::<usize>();
        self.next += 1;
        Ok(ParamId(self.next - 1))
    }

    fn running_stats(&mut self, _name: String, _channels: usize) -> usize {
        self.buffers += 1;
        self.buffers - 1
    }
}

struct Allocator<'r, T, R: ?Sized> {
    store: ParamStore<T>,
    stats: Vec<RunningStats<T>>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng + ?Sized> ParamSink for Allocator<'_, T, R> {
    fn param(&mut self, name: String, shape: &[usize], decay: bool, init: Init) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect()
            }
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
        };
        self.store.add(name, Tensor::new(shape, data)?, decay)
    }

    fn running_stats(&mut self, name: String, channels: usize) -> usize {
        self.stats.push(RunningStats {
            name,
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        self.stats.len() - 1
    }
}

/// Running mean/variance of one batch norm, used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Depthwise conv (one filter per channel) followed by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    stats: usize,
}

#[derive(Clone, Debug)]
pub struct SubBlock {
    pub conv: SeparableConv,
    pub norm: Norm,
}

/// Channel gate `σ(W2·relu(W1·x̄ + b1) + b2) ⊙ x`, with `x̄` the mean over
/// the whole utterance or over each non-overlapping window.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub context: SeContext,
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub subs: Vec<SubBlock>,
    pub se: Option<SqueezeExcite>,
    pub skip: ParamId,
    pub skip_norm: Norm,
    pub stride: usize,
    pub megablock: usize,
}

#[derive(Clone, Debug)]
struct Layers {
    prolog: SubBlock,
    blocks: Vec<ResidualBlock>,
    epilog: SubBlock,
    head_weight: ParamId,
    head_bias: ParamId,
}

fn declare_norm(sink: &mut impl ParamSink, prefix: &str, channels: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: sink.param(format!("{prefix}.gamma"), &[channels], false, Init::Ones)?,
        beta: sink.param(format!("{prefix}.beta"), &[channels], false, Init::Zeros)?,
        stats: sink.running_stats(prefix.to_string(), channels),
    })
}

fn declare_sub_block(
    sink: &mut impl ParamSink,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
) -> Result<SubBlock> {
    let conv = SeparableConv {
        depthwise: sink.param(
            format!("{prefix}.depthwise.weight"),
            &[c_in, 1, kernel],
            true,
            Init::Uniform { fan_in: kernel },
        )?,
        pointwise: sink.param(
            format!("{prefix}.pointwise.weight"),
            &[c_out, c_in, 1],
            true,
            Init::Uniform { fan_in: c_in },
        )?,
        kernel,
        stride,
        in_channels: c_in,
    };
    let norm = declare_norm(sink, &format!("{prefix}.bn"), c_out)?;
    Ok(SubBlock { conv, norm })
}

fn assemble(cfg: &CitrinetConfig, sink: &mut impl ParamSink) -> Result<Layers> {
    cfg.validate()?;
    let layout = cfg.effective_layout()?;
    let c = cfg.channels;
    let prolog = declare_sub_block(sink, "prolog", cfg.feat_in, c, layout.prolog, 1)?;
    let mut blocks = Vec::new();
    for (m, kernels) in layout.megablocks().iter().enumerate() {
        for (b, &k) in kernels.iter().enumerate() {
            let prefix = format!("megablock{}.block{b}", m + 1);
            let stride = if b == 0 { 2 } else { 1 };
            let subs = (0..cfg.repeat)
                .map(|s| {
                    let sub_stride = if s == 0 { stride } else { 1 };
                    declare_sub_block(sink, &format!("{prefix}.sub{s}"), c, c, k, sub_stride)
                })
                .collect::<Result<Vec<_>>>()?;
            let se = if cfg.se_enabled {
                let h = cfg.se_hidden();
                Some(SqueezeExcite {
                    w1: sink.param(format!("{prefix}.se.w1"), &[h, c], true, Init::Uniform { fan_in: c })?,
                    b1: sink.param(format!("{prefix}.se.b1"), &[h], false, Init::Zeros)?,
                    w2: sink.param(format!("{prefix}.se.w2"), &[c, h], true, Init::Uniform { fan_in: h })?,
                    b2: sink.param(format!("{prefix}.se.b2"), &[c], false, Init::Zeros)?,
                    context: cfg.se_context,
                })
            } else {
                None
            };
            let skip = sink.param(
                format!("{prefix}.skip.pointwise.weight"),
                &[c, c, 1],
                true,
                Init::Uniform { fan_in: c },
            )?;
            let skip_norm = declare_norm(sink, &format!("{prefix}.skip.bn"), c)?;
            blocks.push(ResidualBlock {
                subs,
                se,
                skip,
                skip_norm,
                stride,
                megablock: m + 1,
            });
        }
    }
    let epilog = declare_sub_block(sink, "epilog", c, cfg.epilog_channels, layout.epilog, 1)?;
    let classes = cfg.num_classes();
    let head_weight = sink.param(
        "head.weight".into(),
        &[classes, cfg.epilog_channels, 1],
        true,
        Init::Uniform { fan_in: cfg.epilog_channels },
    )?;
    let head_bias = sink.param("head.bias".into(), &[classes], false, Init::Zeros)?;
    Ok(Layers {
        prolog,
        blocks,
        epilog,
        head_weight,
        head_bias,
    })
}

impl CitrinetConfig {
    /// Exact trainable scalar count, computed without allocating weights.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.parameter_breakdown()?.values().sum())
    }

    /// Parameter counts per top-level section (`prolog`, `megablock1`, ...,
    /// `epilog`, `head`).
    pub fn parameter_breakdown(&self) -> Result<BTreeMap<String, usize>> {
        let mut counter = Counter {
            next: 0,
            buffers: 0,
            by_section: BTreeMap::new(),
        };
        assemble(self, &mut counter)?;
        Ok(counter.by_section)
    }

    /// Input frames that can influence one output frame through the
    /// convolution stack. SE pooling is excluded; with SE enabled the true
    /// context is the whole utterance.
    pub fn receptive_field(&self) -> Result<usize> {
        let layout = self.effective_layout()?;
        let mut field = 1;
        let mut jump = 1;
        let mut conv = |kernel: usize, stride: usize| {
            field += (kernel - 1) * jump;
            jump *= stride;
        };
        conv(layout.prolog, 1);
        for kernels in layout.megablocks() {
            for (b, &k) in kernels.iter().enumerate() {
                for s in 0..self.repeat {
                    conv(k, if b == 0 && s == 0 { 2 } else { 1 });
                }
            }
        }
        conv(layout.epilog, 1);
        Ok(field)
    }
}

/// A built model: configuration, parameters and batch-norm running stats.
#[derive(Clone, Debug)]
pub struct Citrinet<T> {
    cfg: CitrinetConfig,
    store: ParamStore<T>,
    stats: Vec<RunningStats<T>>,
    layers: Layers,
}

/// Parameter leaves of one squeeze-and-excitation module on a graph.
struct SeVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    window: Option<usize>,
}

impl SqueezeExcite {
    fn load<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> SeVars {
        SeVars {
            w1: g.param(store, self.w1),
            b1: g.param(store, self.b1),
            w2: g.param(store, self.w2),
            b2: g.param(store, self.b2),
            window: self.context.window(),
        }
    }

    /// Gates `x` (`[C×T]`) channel-wise; each frame uses its own window's gate.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let vars = self.load(g, store);
        se_apply(g, &vars, x)
    }
}

fn se_apply<T: Scalar>(g: &mut Graph<T>, se: &SeVars, x: Var) -> Result<Var> {
    let frames = g.shape(x)[1];
    let pooled = g.mean_time(x, se.window)?;
    let hidden = g.conv1d(pooled, se.w1, Some(se.b1), 1, 1)?;
    let hidden = g.relu(hidden);
    let logits = g.conv1d(hidden, se.w2, Some(se.b2), 1, 1)?;
    let gate = g.sigmoid(logits);
    let gate = g.expand_time(gate, se.window, frames)?;
    g.mul(x, gate)
}

/// Mutable state threaded through one forward pass.
struct Pass<'a, T, R: ?Sized> {
    g: &'a mut Graph<T>,
    train: bool,
    dropout: f64,
    eps: f64,
    rng: &'a mut R,
    observed: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> Citrinet<T> {
    pub fn build<R: Rng + ?Sized>(cfg: CitrinetConfig, rng: &mut R) -> Result<Self> {
        let mut alloc = Allocator {
            store: ParamStore::new(),
            stats: Vec::new(),
            rng,
        };
        let layers = assemble(&cfg, &mut alloc)?;
        Ok(Self {
            cfg,
            store: alloc.store,
            stats: alloc.stats,
            layers,
        })
    }

    pub fn config(&self) -> &CitrinetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.layers.blocks
    }

    pub fn count_parameters(&self) -> usize {
        self.store.numel()
    }

    pub fn receptive_field(&self) -> usize {
        self.cfg.receptive_field().expect("config validated at build")
    }

    /// Records the forward pass for a batch of `[feat_in×T_i]` inputs and
    /// returns per-utterance log-probabilities `[classes×T_out_i]`.
    ///
    /// In train mode batch norm pools statistics over every frame of the
    /// batch and the running statistics are updated.
    pub fn forward_graph<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        inputs: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let (out, observed) = self.run(g, inputs, mode, rng)?;
        let momentum = T::lit(self.cfg.bn_momentum);
        for (idx, stats) in observed {
            let n = stats.count;
            let unbias = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
            let rs = &mut self.stats[idx];
            for ch in 0..rs.mean.len() {
                rs.mean[ch] = (T::one() - momentum) * rs.mean[ch] + momentum * stats.mean[ch];
                rs.var[ch] = (T::one() - momentum) * rs.var[ch] + momentum * stats.var[ch] * unbias;
            }
        }
        Ok(out)
    }

    /// Eval-mode forward on the graph; leaves the model untouched.
    pub fn forward_graph_eval(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Vec<Var>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(self.run(g, inputs, Mode::Eval, &mut rng)?.0)
    }

    /// Single-utterance inference in eval mode.
    pub fn infer(&self, features: &FeatureMatrix) -> Result<LogProbMatrix> {
        if features.frames() == 0 {
            return Err(Error::Empty("feature matrix has no frames"));
        }
        let mut g = Graph::new();
        let x = g.constant(features.to_tensor());
        let out = self.forward_graph_eval(&mut g, &[x])?;
        LogProbMatrix::from_class_major(g.shape(out[0])[0], g.shape(out[0])[1], g.value(out[0]))
    }

    /// Single-utterance forward in either mode.
    pub fn forward<R: Rng + ?Sized>(&mut self, features: &FeatureMatrix, mode: Mode, rng: &mut R) -> Result<LogProbMatrix> {
        if features.frames() == 0 {
            return Err(Error::Empty("feature matrix has no frames"));
        }
        let mut g = Graph::new();
        let x = g.constant(features.to_tensor());
        let out = self.forward_graph(&mut g, &[x], mode, rng)?;
        LogProbMatrix::from_class_major(g.shape(out[0])[0], g.shape(out[0])[1], g.value(out[0]))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<Var>, Vec<(usize, BatchStats<T>)>)> {
        if inputs.is_empty() {
            return Err(Error::Empty("forward on an empty batch"));
        }
        for &x in inputs {
            let shape = g.shape(x);
            if shape.len() != 2 || shape[0] != self.cfg.feat_in {
                return Err(Error::Shape(format!("expected [{}×T] input, got {shape:?}", self.cfg.feat_in)));
            }
            if shape[1] == 0 {
                return Err(Error::Empty("input has no frames"));
            }
        }
        let mut pass = Pass {
            g,
            train: mode == Mode::Train,
            dropout: self.cfg.dropout,
            eps: self.cfg.bn_eps,
            rng,
            observed: Vec::new(),
        };
        let l = &self.layers;
        let mut h = self.sub_block(&mut pass, &l.prolog, inputs.to_vec())?;
        h = self.activate(&mut pass, h)?;
        for block in &l.blocks {
            h = self.residual(&mut pass, block, h)?;
        }
        h = self.sub_block(&mut pass, &l.epilog, h)?;
        h = self.activate(&mut pass, h)?;

        let g = &mut *pass.g;
        let w = g.param(&self.store, l.head_weight);
        let b = g.param(&self.store, l.head_bias);
        let out = h
            .into_iter()
            .map(|x| {
                let logits = g.conv1d(x, w, Some(b), 1, 1)?;
                g.log_softmax(logits)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, pass.observed))
    }

    fn sub_block<R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, sub: &SubBlock, xs: Vec<Var>) -> Result<Vec<Var>> {
        let g = &mut *pass.g;
        let dw = g.param(&self.store, sub.conv.depthwise);
        let pw = g.param(&self.store, sub.conv.pointwise);
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let y = g.conv1d(x, dw, None, sub.conv.stride, sub.conv.in_channels)?;
            ys.push(g.conv1d(y, pw, None, 1, 1)?);
        }
        self.norm(pass, &sub.norm, ys)
    }

    fn norm<R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, norm: &Norm, xs: Vec<Var>) -> Result<Vec<Var>> {
        let g = &mut *pass.g;
        let gamma = g.param(&self.store, norm.gamma);
        let beta = g.param(&self.store, norm.beta);
        if !pass.train {
            let rs = &self.stats[norm.stats];
            return xs
                .into_iter()
                .map(|x| g.batch_norm_eval(x, gamma, beta, &rs.mean, &rs.var, pass.eps))
                .collect();
        }
        if xs.len() == 1 {
            let (y, stats) = g.batch_norm_train(xs[0], gamma, beta, pass.eps)?;
            pass.observed.push((norm.stats, stats));
            return Ok(vec![y]);
        }
        let lens: Vec<usize> = xs.iter().map(|&x| g.shape(x)[1]).collect();
        let joined = g.concat_time(&xs)?;
        let (y, stats) = g.batch_norm_train(joined, gamma, beta, pass.eps)?;
        pass.observed.push((norm.stats, stats));
        let mut start = 0;
        lens.into_iter()
            .map(|len| {
                let part = g.slice_time(y, start, len);
                start += len;
                part
            })
            .collect()
    }

    fn activate<R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, xs: Vec<Var>) -> Result<Vec<Var>> {
        xs.into_iter()
            .map(|x| {
                let r = pass.g.relu(x);
                pass.g.dropout(r, pass.dropout, pass.train, pass.rng)
            })
            .collect()
    }

    fn residual<R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, block: &ResidualBlock, xs: Vec<Var>) -> Result<Vec<Var>> {
        let mut h = xs.clone();
        let last = block.subs.len() - 1;
        for (i, sub) in block.subs.iter().enumerate() {
            h = self.sub_block(pass, sub, h)?;
            if i < last {
                h = self.activate(pass, h)?;
            }
        }
        if let Some(se) = &block.se {
            let vars = se.load(pass.g, &self.store);
            h = h.into_iter().map(|x| se_apply(pass.g, &vars, x)).collect::<Result<_>>()?;
        }
        let skip_w = pass.g.param(&self.store, block.skip);
        let skip = xs
            .into_iter()
            .map(|x| pass.g.conv1d(x, skip_w, None, block.stride, 1))
            .collect::<Result<Vec<_>>>()?;
        let skip = self.norm(pass, &block.skip_norm, skip)?;
        let summed = h
            .into_iter()
            .zip(skip)
            .map(|(a, b)| pass.g.add(a, b))
            .collect::<Result<Vec<_>>>()?;
        self.activate(pass, summed)
    }

    pub(crate) fn from_parts(cfg: CitrinetConfig, store: ParamStore<T>, stats: Vec<RunningStats<T>>) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let template = Self::build(cfg.clone(), &mut rng)?;
        if template.store.len() != store.len() || template.stats.len() != stats.len() {
            return Err(Error::format("checkpoint", "parameter set does not match configuration"));
        }
        for ((_, want), (_, have)) in template.store.iter().zip(store.iter()) {
            if want.name != have.name || want.tensor.shape() != have.tensor.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("parameter {} {:?} does not match {} {:?}", have.name, have.tensor.shape(), want.name, want.tensor.shape()),
                ));
            }
        }
        for (want, have) in template.stats.iter().zip(&stats) {
            if want.name != have.name || want.mean.len() != have.mean.len() || want.var.len() != have.var.len() {
                return Err(Error::format("checkpoint", format!("running stats {} do not match", have.name)));
            }
        }
        Ok(Self {
            cfg,
            store,
            stats,
            layers: template.layers,
        })
    }
}
