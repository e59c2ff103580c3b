//! Conditional 1-D U-Net noise/velocity predictor with hand-written
//! backpropagation in double precision.
//!
//! Layout, for `depth = D` and channel widths `c_i = base * 2^i`:
//!
//! ```text
//! in_conv   [x | emb]            -> c_0
//! enc_i     ResBlock(c_i), saved as skip_i, then max-pool /2
//! down_i    [pooled | emb]       -> c_{i+1}
//! mid       ResBlock(c_D)
//! up_i      nearest x2, conv     c_{i+1} -> c_i
//! fuse_i    [up | skip_i | emb]  -> c_i
//! dec_i     ResBlock(c_i)
//! out_conv  1x1                  c_0 -> 1
//! ```
//!
//! `emb` is the sinusoidal step encoding concatenated with the condition
//! MLP output, broadcast along the sequence axis. Every resolution level
//! receives it at its input.

mod embed;
mod layers;
mod tensor;

pub use embed::{time_embed, CondMlp};
pub use layers::{BatchNorm1d, BnBatchStats, Conv1d};
pub use tensor::Tensor3;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_paths::CONDITION_DIM;
use embed::MlpCache;
use layers::{
    concat_with_embedding, concat_with_embedding_backward, max_pool2, max_pool2_backward, relu,
    relu_backward, upsample2, upsample2_backward, BnCache,
};

pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub cond_hidden_dim: usize,
    pub input_length: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 2,
            time_embed_dim: 16,
            cond_embed_dim: 8,
            cond_hidden_dim: 32,
            input_length: 24,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if self.cond_hidden_dim == 0 || self.cond_embed_dim == 0 {
            return Err(Error::Config("condition MLP dimensions must be positive".into()));
        }
        let unit = 1usize << self.depth;
        if self.input_length == 0 || self.input_length % unit != 0 {
            return Err(Error::Config(format!(
                "input_length {} must be a positive multiple of 2^depth = {unit}",
                self.input_length
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.time_embed_dim + self.cond_embed_dim
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ResBlock {
    conv1: Conv1d,
    bn: BatchNorm1d,
    conv2: Conv1d,
}

#[derive(Debug, Clone, PartialEq)]
struct Architecture {
    cond: CondMlp,
    in_conv: Conv1d,
    enc: Vec<ResBlock>,
    down: Vec<Conv1d>,
    mid: ResBlock,
    up: Vec<Conv1d>,
    fuse: Vec<Conv1d>,
    dec: Vec<ResBlock>,
    out_conv: Conv1d,
    entries: Vec<ParamEntry>,
    buffer_entries: Vec<ParamEntry>,
    n_params: usize,
    n_buffers: usize,
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    buffer_entries: Vec<ParamEntry>,
    n: usize,
    n_buf: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        let off = self.n;
        self.n += shape.iter().product::<usize>();
        self.entries.push(ParamEntry {
            name,
            offset: off,
            shape,
        });
        off
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> Conv1d {
        Conv1d {
            weight: self.param(format!("{name}.weight"), vec![cout, cin, kernel]),
            bias: self.param(format!("{name}.bias"), vec![cout]),
            cin,
            cout,
            kernel,
        }
    }

    fn bn(&mut self, name: &str, ch: usize) -> BatchNorm1d {
        let gamma = self.param(format!("{name}.gamma"), vec![ch]);
        let beta = self.param(format!("{name}.beta"), vec![ch]);
        let running = self.n_buf;
        self.n_buf += 2 * ch;
        self.buffer_entries.push(ParamEntry {
            name: format!("{name}.running_mean"),
            offset: running,
            shape: vec![ch],
        });
        self.buffer_entries.push(ParamEntry {
            name: format!("{name}.running_var"),
            offset: running + ch,
            shape: vec![ch],
        });
        BatchNorm1d {
            gamma,
            beta,
            running,
            channels: ch,
        }
    }

    fn res(&mut self, name: &str, ch: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(&format!("{name}.conv1"), ch, ch, KERNEL_SIZE),
            bn: self.bn(&format!("{name}.bn"), ch),
            conv2: self.conv(&format!("{name}.conv2"), ch, ch, KERNEL_SIZE),
        }
    }
}

impl Architecture {
    fn new(cfg: &DenoiserConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let e = cfg.embed_dim();
        let (dc, dh, de) = (CONDITION_DIM, cfg.cond_hidden_dim, cfg.cond_embed_dim);
        let cond = CondMlp {
            w1: b.param("cond.w1".into(), vec![dh, dc]),
            b1: b.param("cond.b1".into(), vec![dh]),
            w2: b.param("cond.w2".into(), vec![de, dh]),
            b2: b.param("cond.b2".into(), vec![de]),
            input: dc,
            hidden: dh,
            output: de,
        };
        let in_conv = b.conv("in_conv", 1 + e, cfg.channels(0), KERNEL_SIZE);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..cfg.depth {
            enc.push(b.res(&format!("enc{i}"), cfg.channels(i)));
            down.push(b.conv(&format!("down{i}"), cfg.channels(i) + e, cfg.channels(i + 1), KERNEL_SIZE));
        }
        let mid = b.res("mid", cfg.channels(cfg.depth));
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut dec = Vec::new();
        for i in 0..cfg.depth {
            up.push(b.conv(&format!("up{i}"), cfg.channels(i + 1), cfg.channels(i), KERNEL_SIZE));
            fuse.push(b.conv(&format!("fuse{i}"), 2 * cfg.channels(i) + e, cfg.channels(i), KERNEL_SIZE));
            dec.push(b.res(&format!("dec{i}"), cfg.channels(i)));
        }
        let out_conv = b.conv("out_conv", cfg.channels(0), 1, 1);
        Self {
            cond,
            in_conv,
            enc,
            down,
            mid,
            up,
            fuse,
            dec,
            out_conv,
            entries: b.entries,
            buffer_entries: b.buffer_entries,
            n_params: b.n,
            n_buffers: b.n_buf,
        }
    }

    fn all_convs(&self) -> Vec<Conv1d> {
        let mut v = vec![self.in_conv];
        let blocks = self.enc.iter().chain(std::iter::once(&self.mid)).chain(&self.dec);
        for r in blocks {
            v.push(r.conv1);
            v.push(r.conv2);
        }
        v.extend(&self.down);
        v.extend(&self.up);
        v.extend(&self.fuse);
        v.push(self.out_conv);
        v
    }

    /// Normalisation layers in forward execution order; decoder levels run deepest first.
    fn all_bns(&self) -> Vec<BatchNorm1d> {
        self.enc
            .iter()
            .chain(std::iter::once(&self.mid))
            .chain(self.dec.iter().rev())
            .map(|r| r.bn)
            .collect()
    }
}

/// Whether batch normalisation uses batch statistics or frozen running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One batch of noisy inputs with their steps and condition features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    pub x: Tensor3,
    pub steps: Vec<usize>,
    pub cond: Vec<[f64; CONDITION_DIM]>,
}

impl DenoiserInput {
    pub fn batch(&self) -> usize {
        self.x.batch
    }
}

struct ResCache {
    x: Tensor3,
    r: Tensor3,
    bn: Option<BnCache>,
}

struct Cache {
    mlp: Vec<MlpCache>,
    in_input: Tensor3,
    enc: Vec<ResCache>,
    pool_arg: Vec<Vec<u8>>,
    down_input: Vec<Tensor3>,
    mid: ResCache,
    up_input: Vec<Option<Tensor3>>,
    fuse_input: Vec<Option<Tensor3>>,
    dec: Vec<Option<ResCache>>,
    out_input: Tensor3,
}

/// Result of a training-mode forward and backward pass.
#[derive(Debug, Clone)]
pub struct Gradient<R> {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Batch moments for every normalisation layer, in layer order.
    pub bn_stats: Vec<BnBatchStats>,
    pub extra: R,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    arch: Architecture,
    params: Vec<f64>,
    buffers: Vec<f64>,
}

impl Denoiser {
    /// Uniform fan-in initialisation; normalisation scales start at one.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        let mut params = vec![0.0; arch.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in arch.all_convs() {
            let bound = 1.0 / ((conv.cin * conv.kernel) as f64).sqrt();
            for v in &mut params[conv.weight..conv.weight + conv.weight_len()] {
                *v = rng.gen_range(-bound..bound);
            }
            for v in &mut params[conv.bias..conv.bias + conv.cout] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        let m = arch.cond;
        let b1 = 1.0 / (m.input as f64).sqrt();
        for v in &mut params[m.w1..m.b1 + m.hidden] {
            *v = rng.gen_range(-b1..b1);
        }
        let b2 = 1.0 / (m.hidden as f64).sqrt();
        for v in &mut params[m.w2..m.b2 + m.output] {
            *v = rng.gen_range(-b2..b2);
        }
        let mut buffers = vec![0.0; arch.n_buffers];
        for bn in arch.all_bns() {
            params[bn.gamma..bn.gamma + bn.channels].fill(1.0);
            buffers[bn.running + bn.channels..bn.running + 2 * bn.channels].fill(1.0);
        }
        Ok(Self {
            config,
            arch,
            params,
            buffers,
        })
    }

    pub fn from_parts(config: DenoiserConfig, params: Vec<f64>, buffers: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        if params.len() != arch.n_params {
            return Err(Error::shape(format!("{} parameters", arch.n_params), params.len()));
        }
        if buffers.len() != arch.n_buffers {
            return Err(Error::shape(format!("{} buffers", arch.n_buffers), buffers.len()));
        }
        if !params.iter().chain(&buffers).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            arch,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.arch.n_params
    }

    /// Stable index map of the flat parameter vector.
    pub fn param_entries(&self) -> &[ParamEntry] {
        &self.arch.entries
    }

    pub fn buffer_entries(&self) -> &[ParamEntry] {
        &self.arch.buffer_entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.arch.entries.iter().find(|e| e.name == name)
    }

    /// Fold training batch moments into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats], momentum: f64) {
        for (bn, s) in self.arch.all_bns().iter().zip(stats) {
            bn.update_running(&mut self.buffers, s, momentum);
        }
    }

    fn check_input(&self, input: &DenoiserInput) -> Result<()> {
        let (b, c, l) = input.x.shape();
        if c != 1 || l != self.config.input_length {
            return Err(Error::shape(
                format!("(batch, 1, {})", self.config.input_length),
                format!("({b}, {c}, {l})"),
            ));
        }
        if input.steps.len() != b || input.cond.len() != b {
            return Err(Error::shape(
                format!("{b} steps and conditions"),
                format!("{} steps, {} conditions", input.steps.len(), input.cond.len()),
            ));
        }
        if !input.x.all_finite() || input.cond.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite denoiser input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &DenoiserInput, mode: Mode) -> Result<Tensor3> {
        self.check_input(input)?;
        let mut stats = Vec::new();
        Ok(self.forward_cached(&self.params, input, mode, &mut stats)?.0)
    }

    /// Forward in training mode, hand the output to `loss_fn`, and
    /// backpropagate the returned output gradient to every parameter.
    pub fn gradient<R, F>(&self, input: &DenoiserInput, loss_fn: F) -> Result<Gradient<R>>
    where
        F: FnOnce(&Tensor3) -> Result<(f64, Tensor3, R)>,
    {
        self.gradient_at(&self.params, input, loss_fn)
    }

    /// As [`Denoiser::gradient`] but evaluated at an explicit parameter vector.
    pub fn gradient_at<R, F>(&self, params: &[f64], input: &DenoiserInput, loss_fn: F) -> Result<Gradient<R>>
    where
        F: FnOnce(&Tensor3) -> Result<(f64, Tensor3, R)>,
    {
        self.check_input(input)?;
        if params.len() != self.arch.n_params {
            return Err(Error::shape(self.arch.n_params, params.len()));
        }
        let mut bn_stats = Vec::new();
        let (out, cache) = self.forward_cached(params, input, Mode::Train, &mut bn_stats)?;
        let (loss, dout, extra) = loss_fn(&out)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss} (output finite: {})",
                out.all_finite()
            )));
        }
        if dout.shape() != out.shape() {
            return Err(Error::shape(format!("{:?}", out.shape()), format!("{:?}", dout.shape())));
        }
        let mut grad = vec![0.0; self.arch.n_params];
        self.backward(params, input, &cache, &dout, &mut grad);
        Ok(Gradient {
            loss,
            grad,
            bn_stats,
            extra,
        })
    }

    /// Per-sample embedding rows `[time | condition]` plus MLP caches.
    fn embeddings(&self, p: &[f64], input: &DenoiserInput) -> Result<(Vec<f64>, Vec<MlpCache>)> {
        let e = self.config.embed_dim();
        let mut emb = Vec::with_capacity(input.batch() * e);
        let mut caches = Vec::with_capacity(input.batch());
        for (t, c) in input.steps.iter().zip(&input.cond) {
            emb.extend(time_embed(*t as f64, self.config.time_embed_dim)?);
            let (ce, cache) = self.arch.cond.forward(p, c)?;
            emb.extend(ce);
            caches.push(cache);
        }
        Ok((emb, caches))
    }

    fn res_forward(
        &self,
        p: &[f64],
        block: &ResBlock,
        x: Tensor3,
        mode: Mode,
        stats: &mut Vec<BnBatchStats>,
    ) -> (Tensor3, ResCache) {
        let a = block.conv1.forward(p, &x);
        let (normed, bn) = match mode {
            Mode::Train => {
                let (y, cache, s) = block.bn.forward_train(p, &a);
                stats.push(s);
                (y, Some(cache))
            }
            Mode::Eval => (block.bn.forward_eval(p, &self.buffers, &a), None),
        };
        let r = relu(&normed);
        let mut y = block.conv2.forward(p, &r);
        y.add_assign(&x);
        (y, ResCache { x, r, bn })
    }

    fn res_backward(&self, p: &[f64], block: &ResBlock, cache: &ResCache, dy: &Tensor3, g: &mut [f64]) -> Tensor3 {
        let dr = block.conv2.backward(p, &cache.r, dy, g);
        let dnorm = relu_backward(&cache.r, &dr);
        let bn = cache.bn.as_ref().expect("backward requires a training-mode forward");
        let da = block.bn.backward(p, bn, &dnorm, g);
        let mut dx = block.conv1.backward(p, &cache.x, &da, g);
        dx.add_assign(dy);
        dx
    }

    fn forward_cached(
        &self,
        p: &[f64],
        input: &DenoiserInput,
        mode: Mode,
        stats: &mut Vec<BnBatchStats>,
    ) -> Result<(Tensor3, Cache)> {
        let a = &self.arch;
        let depth = self.config.depth;
        let e = self.config.embed_dim();
        let (emb, mlp) = self.embeddings(p, input)?;

        let in_input = concat_with_embedding(&[&input.x], &emb, e);
        let mut h = a.in_conv.forward(p, &in_input);
        let mut enc = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut pool_arg = Vec::with_capacity(depth);
        let mut down_input = Vec::with_capacity(depth);
        for i in 0..depth {
            let (y, rc) = self.res_forward(p, &a.enc[i], h, mode, stats);
            enc.push(rc);
            let (pooled, arg) = max_pool2(&y);
            skips.push(y);
            pool_arg.push(arg);
            let din = concat_with_embedding(&[&pooled], &emb, e);
            h = a.down[i].forward(p, &din);
            down_input.push(din);
        }
        let (y, mid) = self.res_forward(p, &a.mid, h, mode, stats);
        h = y;
        let mut up_input: Vec<Option<Tensor3>> = (0..depth).map(|_| None).collect();
        let mut fuse_input: Vec<Option<Tensor3>> = (0..depth).map(|_| None).collect();
        let mut dec: Vec<Option<ResCache>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let u = upsample2(&h);
            let hu = a.up[i].forward(p, &u);
            let fin = concat_with_embedding(&[&hu, &skips[i]], &emb, e);
            let hf = a.fuse[i].forward(p, &fin);
            let (y, rc) = self.res_forward(p, &a.dec[i], hf, mode, stats);
            h = y;
            up_input[i] = Some(u);
            fuse_input[i] = Some(fin);
            dec[i] = Some(rc);
        }
        let out = a.out_conv.forward(p, &h);
        Ok((
            out,
            Cache {
                mlp,
                in_input,
                enc,
                pool_arg,
                down_input,
                mid,
                up_input,
                fuse_input,
                dec,
                out_input: h,
            },
        ))
    }

    fn backward(&self, p: &[f64], input: &DenoiserInput, cache: &Cache, dout: &Tensor3, g: &mut [f64]) {
        let a = &self.arch;
        let depth = self.config.depth;
        let e = self.config.embed_dim();
        let mut demb = vec![0.0; input.batch() * e];

        let mut dh = a.out_conv.backward(p, &cache.out_input, dout, g);
        let mut dskips: Vec<Option<Tensor3>> = (0..depth).map(|_| None).collect();
        for i in 0..depth {
            let ch = self.config.channels(i);
            dh = self.res_backward(p, &a.dec[i], cache.dec[i].as_ref().expect("cached"), &dh, g);
            let fin = cache.fuse_input[i].as_ref().expect("cached");
            let dfin = a.fuse[i].backward(p, fin, &dh, g);
            let mut parts = concat_with_embedding_backward(&dfin, &[ch, ch], e, &mut demb);
            dskips[i] = parts.pop();
            let dhu = parts.pop().expect("two parts");
            let du = a.up[i].backward(p, cache.up_input[i].as_ref().expect("cached"), &dhu, g);
            dh = upsample2_backward(&du);
        }
        dh = self.res_backward(p, &a.mid, &cache.mid, &dh, g);
        for i in (0..depth).rev() {
            let ch = self.config.channels(i);
            let ddin = a.down[i].backward(p, &cache.down_input[i], &dh, g);
            let dpooled = concat_with_embedding_backward(&ddin, &[ch], e, &mut demb)
                .pop()
                .expect("one part");
            dh = max_pool2_backward(&cache.pool_arg[i], &dpooled);
            dh.add_assign(dskips[i].as_ref().expect("set in decoder pass"));
            dh = self.res_backward(p, &a.enc[i], &cache.enc[i], &dh, g);
        }
        let din = a.in_conv.backward(p, &cache.in_input, &dh, g);
        concat_with_embedding_backward(&din, &[1], e, &mut demb);

        let dt = self.config.time_embed_dim;
        for (b, mc) in cache.mlp.iter().enumerate() {
            a.cond.backward(p, mc, &demb[b * e + dt..(b + 1) * e], g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 2,
            depth: 1,
            time_embed_dim: 2,
            cond_embed_dim: 2,
            cond_hidden_dim: 3,
            input_length: 4,
        }
    }

    fn random_input(cfg: &DenoiserConfig, batch: usize, seed: u64) -> DenoiserInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..batch * cfg.input_length).map(|_| StandardNormal.sample(&mut rng)).collect();
        DenoiserInput {
            x: Tensor3::from_vec(batch, 1, cfg.input_length, x).unwrap(),
            steps: (0..batch).map(|_| rng.gen_range(1..=1000)).collect(),
            cond: (0..batch)
                .map(|_| [rng.gen_range(0.1..0.4), 0.02, 0.08, 0.09, 0.08])
                .collect(),
        }
    }

    /// Parameter count derived directly from the layer list.
    fn count_by_formula(c: &DenoiserConfig) -> usize {
        let e = c.embed_dim();
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
        let res = |ch: usize| 2 * conv(ch, ch, 3) + 2 * ch;
        let mut n = c.cond_hidden_dim * CONDITION_DIM + c.cond_hidden_dim + c.cond_embed_dim * c.cond_hidden_dim + c.cond_embed_dim;
        n += conv(1 + e, c.base_channels, 3);
        for i in 0..c.depth {
            let ch = c.base_channels << i;
            n += res(ch) + conv(ch + e, 2 * ch, 3);
            n += conv(2 * ch, ch, 3) + conv(2 * ch + e, ch, 3) + res(ch);
        }
        n += res(c.base_channels << c.depth);
        n + conv(c.base_channels, 1, 1)
    }

    #[test]
    fn parameter_count_matches_formula() {
        for cfg in [tiny(), DenoiserConfig::default(), DenoiserConfig { depth: 3, input_length: 16, ..DenoiserConfig::default() }] {
            let d = Denoiser::init(cfg, 0).unwrap();
            assert_eq!(d.num_params(), count_by_formula(&cfg));
            let total: usize = d.param_entries().iter().map(ParamEntry::len).sum();
            assert_eq!(total, d.num_params());
            // entries tile the vector without gaps
            let mut off = 0;
            for e in d.param_entries() {
                assert_eq!(e.offset, off);
                off += e.len();
            }
        }
        assert_eq!(Denoiser::init(tiny(), 0).unwrap().num_params(), 389);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_len = DenoiserConfig { input_length: 6, depth: 2, ..tiny() };
        assert!(matches!(Denoiser::init(bad_len, 0), Err(Error::Config(_))));
        let odd = DenoiserConfig { time_embed_dim: 3, ..tiny() };
        assert!(matches!(Denoiser::init(odd, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_matches_input() {
        for cfg in [tiny(), DenoiserConfig::default()] {
            let d = Denoiser::init(cfg, 1).unwrap();
            let input = random_input(&cfg, 3, 2);
            for mode in [Mode::Train, Mode::Eval] {
                assert_eq!(d.forward(&input, mode).unwrap().shape(), input.x.shape());
            }
        }
    }

    #[test]
    fn zero_output_head_gives_zero_output() {
        let cfg = DenoiserConfig::default();
        let mut d = Denoiser::init(cfg, 4).unwrap();
        let out = d.entry("out_conv.weight").unwrap().clone();
        let bias = d.entry("out_conv.bias").unwrap().clone();
        d.params_mut()[out.offset..out.offset + out.len()].fill(0.0);
        d.params_mut()[bias.offset..bias.offset + bias.len()].fill(0.0);
        let y = d.forward(&random_input(&cfg, 2, 5), Mode::Eval).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_conv_resblock_is_identity() {
        let cfg = tiny();
        let mut d = Denoiser::init(cfg, 4).unwrap();
        let block = d.arch.mid;
        for conv in [block.conv1, block.conv2] {
            d.params[conv.weight..conv.weight + conv.weight_len()].fill(0.0);
            d.params[conv.bias..conv.bias + conv.cout].fill(0.0);
        }
        let x = random_input(&DenoiserConfig { input_length: 8, ..cfg }, 2, 1).x;
        let x = Tensor3::from_vec(2, 4, 2, x.data[..16].to_vec()).unwrap();
        let mut stats = Vec::new();
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = d.res_forward(&d.params, &block, x.clone(), mode, &mut stats);
            assert_eq!(y, x);
        }
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let cfg = DenoiserConfig::default();
        let d = Denoiser::init(cfg, 8).unwrap();
        let one = random_input(&cfg, 1, 3);
        let mut two = one.clone();
        two.x = Tensor3::from_vec(2, 1, cfg.input_length, [one.x.data.clone(), one.x.data.clone()].concat()).unwrap();
        two.steps = vec![one.steps[0]; 2];
        two.cond = vec![one.cond[0]; 2];
        let y1 = d.forward(&one, Mode::Eval).unwrap();
        let y2 = d.forward(&two, Mode::Eval).unwrap();
        assert_eq!(y2.sample(0), y1.sample(0));
        assert_eq!(y2.sample(1), y1.sample(0));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = DenoiserConfig::default();
        let input = random_input(&cfg, 4, 6);
        let a = Denoiser::init(cfg, 12).unwrap().forward(&input, Mode::Eval).unwrap();
        let b = Denoiser::init(cfg, 12).unwrap().forward(&input, Mode::Eval).unwrap();
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn nan_input_rejected_at_entry() {
        let cfg = tiny();
        let d = Denoiser::init(cfg, 0).unwrap();
        let mut input = random_input(&cfg, 1, 0);
        input.x.data[2] = f64::NAN;
        assert!(matches!(d.forward(&input, Mode::Eval), Err(Error::Numeric(_))));
    }

    fn sum_of_squares(out: &Tensor3) -> Result<(f64, Tensor3, ())> {
        let loss = out.data.iter().map(|v| v * v).sum::<f64>();
        let mut d = out.clone();
        d.data.iter_mut().for_each(|v| *v *= 2.0);
        Ok((loss, d, ()))
    }

    #[test]
    fn backprop_matches_central_differences() {
        let cfg = tiny();
        let d = Denoiser::init(cfg, 21).unwrap();
        let input = random_input(&cfg, 2, 22);
        let g = d.gradient(&input, sum_of_squares).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..d.num_params() {
            let mut p = d.params().to_vec();
            p[i] += h;
            let up = d.gradient_at(&p, &input, sum_of_squares).unwrap().loss;
            p[i] -= 2.0 * h;
            let dn = d.gradient_at(&p, &input, sum_of_squares).unwrap().loss;
            let fd = (up - dn) / (2.0 * h);
            // biases feeding batch norm have an exact zero gradient; the floor keeps
            // finite-difference rounding noise on those from dominating
            let rel = (fd - g.grad[i]).abs() / fd.abs().max(g.grad[i].abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let cfg = tiny();
        let d = Denoiser::init(cfg, 2).unwrap();
        let input = random_input(&cfg, 2, 3);
        let g = d
            .gradient(&input, |out| Ok((0.0, Tensor3::zeros(out.batch, out.channels, out.len), ())))
            .unwrap();
        assert!(g.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let cfg = tiny();
        let d = Denoiser::init(cfg, 2).unwrap();
        let input = random_input(&cfg, 2, 3);
        let err = d
            .gradient(&input, |out| Ok((f64::NAN, out.clone(), ())))
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn running_stats_move_towards_batch_moments() {
        let cfg = tiny();
        let mut d = Denoiser::init(cfg, 2).unwrap();
        let input = random_input(&cfg, 4, 3);
        let g = d.gradient(&input, sum_of_squares).unwrap();
        let before = d.buffers().to_vec();
        d.update_running_stats(&g.bn_stats, 1.0);
        assert_ne!(before, d.buffers());
        assert_eq!(d.buffers()[0], g.bn_stats[0].mean[0]);
    }

    #[test]
    fn copied_batch_moments_make_eval_match_train_at_depth() {
        let cfg = DenoiserConfig {
            depth: 3,
            input_length: 8,
            ..tiny()
        };
        let mut d = Denoiser::init(cfg, 4).unwrap();
        let input = random_input(&cfg, 3, 5);
        let g = d.gradient(&input, |out| Ok((0.0, out.clone(), out.clone()))).unwrap();
        d.update_running_stats(&g.bn_stats, 1.0);
        let eval = d.forward(&input, Mode::Eval).unwrap();
        for (a, b) in eval.data.iter().zip(&g.extra.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
