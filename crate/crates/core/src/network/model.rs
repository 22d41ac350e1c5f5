use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{head_name, subsampled_len, HeadMode, ModelConfig, Pooling, MIN_FRAMES};
use crate::corpus::Tag;
use crate::error::{Error, Result};
use crate::frontend::{spec_augment, FeatureMatrix};
use crate::numerics::{Activation, Array, ConvMode, Float, Gradients, Graph, ParamStore, Var};

const NORM_EPS: f64 = 1e-5;

/// Per-task logits of one clip: `K × 2` (two-logit) or `K × 1` (one-logit).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLogits {
    pub tasks: Vec<Tag>,
    pub mode: HeadMode,
    pub values: Vec<f64>,
}

impl TaskLogits {
    pub fn new(tasks: Vec<Tag>, mode: HeadMode, values: Vec<f64>) -> Result<Self> {
        if values.len() != tasks.len() * mode.width() {
            return Err(Error::shape(
                "task_logits",
                format!("{} values for {} tasks x {}", values.len(), tasks.len(), mode.width()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("task_logits"));
        }
        Ok(Self { tasks, mode, values })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Logits of task `k` (one or two values).
    pub fn task(&self, k: usize) -> &[f64] {
        let w = self.mode.width();
        &self.values[k * w..(k + 1) * w]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.tasks.len(), self.mode.width()]
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    /// Xavier-uniform weights, zero biases, unit norm gains, LSTM forget
    /// bias 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.starts_with("lstm.") && name.ends_with(".bias") {
                let h = n / 4;
                (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let (fan_in, fan_out) = fans(&shape);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            };
            params.insert(name, Array::from_f64(&shape, &data)?);
        }
        Ok(Self { config, params })
    }

    /// Checks every parameter against the shapes the config implies.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::shape(
                "model",
                format!("config implies {} parameters, got {}", specs.len(), params.len()),
            ));
        }
        for (name, shape) in &specs {
            match params.get(name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(Error::shape(
                        "model",
                        format!("parameter '{name}' has shape {:?}, config implies {shape:?}", a.shape()),
                    ))
                }
                None => return Err(Error::shape("model", format!("missing parameter '{name}'"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Copies every parameter of `source` whose name and shape match.
    /// Returns the number copied.
    pub fn init_from<U: Float>(&mut self, source: &ParamStore<U>) -> usize {
        let mut copied = 0;
        for (name, value) in source.iter() {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() == value.shape() {
                    *dst = value.cast();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// One forward pass. `seed` drives dropout and SpecAugment and is
    /// ignored when not training.
    pub fn forward(&self, features: &FeatureMatrix, training: bool, seed: u64) -> Result<TaskLogits> {
        let mut s = Session::new(self, training, seed);
        let v = s.logits(features)?;
        s.task_logits(v)
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [i, o] => (i, o),
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        _ => (shape[0], shape[0]),
    }
}

/// A forward pass over one clip, recorded on its own graph.
pub struct Session<'m, T> {
    model: &'m Model<T>,
    graph: Graph<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'m, T: Float> Session<'m, T> {
    pub fn new(model: &'m Model<T>, training: bool, seed: u64) -> Self {
        Self {
            model,
            graph: Graph::new(),
            bound: vec![None; model.params.len()],
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Graph node of a parameter; registered on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .model
            .params
            .index_of(name)
            .ok_or_else(|| Error::shape("model", format!("missing parameter '{name}'")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.graph.leaf(self.model.params.value(i).clone(), true);
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Gradients for every parameter in storage order (zeros if unused).
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Array<T>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Array::zeros(self.model.params.value(i).shape()))
            })
            .collect()
    }

    /// Registers a constant input array.
    pub fn input(&mut self, a: Array<T>) -> Var {
        self.graph.constant(a)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout_p;
        self.graph.dropout(x, p, self.training, &mut self.rng)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.param(w)?, self.param(b)?);
        self.graph.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.graph.layer_norm(x, g, b, NORM_EPS)
    }

    /// Feature matrix as a `[T × bins]` input, with SpecAugment in training
    /// mode and optional per-utterance normalisation.
    pub fn features(&mut self, f: &FeatureMatrix) -> Result<Var> {
        let cfg = &self.model.config;
        if f.num_bins() != cfg.num_mel_bins {
            return Err(Error::shape(
                "features",
                format!("{} mel bins, model expects {}", f.num_bins(), cfg.num_mel_bins),
            ));
        }
        let augmented;
        let f = if self.training && cfg.spec_augment.enabled {
            augmented = spec_augment(f, &cfg.spec_augment, &mut self.rng);
            &augmented
        } else {
            f
        };
        let (t, b) = (f.num_frames(), f.num_bins());
        let mut data: Vec<f64> = f.data().iter().map(|&v| v as f64).collect();
        if cfg.input_norm {
            for bin in 0..b {
                let mean = (0..t).map(|i| data[i * b + bin]).sum::<f64>() / t as f64;
                let var = (0..t).map(|i| (data[i * b + bin] - mean).powi(2)).sum::<f64>() / t as f64;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                for i in 0..t {
                    data[i * b + bin] = (data[i * b + bin] - mean) * inv;
                }
            }
        }
        Ok(self.input(Array::from_f64(&[t, b], &data)?))
    }

    /// Two kernel-3 stride-2 conv2d layers with ReLU over (time × mel),
    /// flattened per frame and projected to `d_model`.
    pub fn conv_subsample(&mut self, x: Var) -> Result<Var> {
        let (t, b) = match *self.graph.shape(x) {
            [t, b] => (t, b),
            ref s => return Err(Error::shape("conv_subsample", format!("expected [T, bins], got {s:?}"))),
        };
        if t < MIN_FRAMES {
            return Err(Error::shape(
                "conv_subsample",
                format!("{t} frames; need at least {MIN_FRAMES}"),
            ));
        }
        let img = self.graph.reshape(x, vec![1, t, b])?;
        let (w1, b1) = (self.param("subsample.conv1.weight")?, self.param("subsample.conv1.bias")?);
        let h = self.graph.convolution(img, w1, Some(b1), ConvMode::Conv2d, 2, 0)?;
        let h = self.graph.activation(h, Activation::Relu)?;
        let (w2, b2) = (self.param("subsample.conv2.weight")?, self.param("subsample.conv2.bias")?);
        let h = self.graph.convolution(h, w2, Some(b2), ConvMode::Conv2d, 2, 0)?;
        let h = self.graph.activation(h, Activation::Relu)?;
        let frames = self.graph.channels_to_frames(h)?;
        debug_assert_eq!(self.graph.shape(frames)[0], subsampled_len(t));
        self.linear(frames, "subsample.out.weight", "subsample.out.bias")
    }

    /// Scales `[T × d]` by `sqrt(d)` and adds sinusoidal absolute position
    /// encodings.
    pub fn add_positional(&mut self, x: Var) -> Result<Var> {
        let (t, d) = (self.graph.shape(x)[0], self.graph.shape(x)[1]);
        let pe = Array::from_f64(&[t, d], &sinusoidal_positions(t, d))?;
        let pe = self.input(pe);
        let x = self.graph.scale(x, (d as f64).sqrt())?;
        self.graph.add(x, pe)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{prefix}.norm"))?;
        let h = self.linear(h, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.graph.activation(h, Activation::Swish)?;
        let h = self.dropout(h)?;
        let h = self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
        self.dropout(h)
    }

    /// Scaled dot-product self-attention over `[T × d]`. Returns the
    /// projected output and each head's `[T × T]` attention weights.
    pub fn multi_head_attention(&mut self, x: Var, prefix: &str) -> Result<(Var, Vec<Var>)> {
        let heads = self.model.config.attention_heads;
        let d = self.graph.shape(x)[1];
        if d % heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
        }
        let dk = d / heads;
        let q = self.linear(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outputs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.graph.slice_cols(q, h * dk, dk)?;
            let kh = self.graph.slice_cols(k, h * dk, dk)?;
            let vh = self.graph.slice_cols(v, h * dk, dk)?;
            let kt = self.graph.transpose(kh)?;
            let scores = self.graph.matmul(qh, kt)?;
            let scores = self.graph.scale(scores, scale)?;
            let attn = self.graph.activation(scores, Activation::Softmax)?;
            weights.push(attn);
            outputs.push(self.graph.matmul(attn, vh)?);
        }
        let cat = if heads == 1 { outputs[0] } else { self.graph.concat_cols(&outputs)? };
        let out = self.linear(cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        Ok((out, weights))
    }

    /// Pointwise → GLU → depthwise → norm → swish → pointwise.
    fn conv_module(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let k = self.model.config.conv_kernel;
        let h = self.norm(x, &format!("{prefix}.norm"))?;
        let (w, b) = (self.param(&format!("{prefix}.pw1.weight"))?, self.param(&format!("{prefix}.pw1.bias"))?);
        let h = self.graph.convolution(h, w, Some(b), ConvMode::Pointwise1d, 1, 0)?;
        let h = self.graph.activation(h, Activation::Glu)?;
        let (w, b) = (self.param(&format!("{prefix}.dw.weight"))?, self.param(&format!("{prefix}.dw.bias"))?);
        let h = self.graph.convolution(h, w, Some(b), ConvMode::Depthwise1d, 1, (k - 1) / 2)?;
        let h = self.norm(h, &format!("{prefix}.dw_norm"))?;
        let h = self.graph.activation(h, Activation::Swish)?;
        let (w, b) = (self.param(&format!("{prefix}.pw2.weight"))?, self.param(&format!("{prefix}.pw2.bias"))?);
        let h = self.graph.convolution(h, w, Some(b), ConvMode::Pointwise1d, 1, 0)?;
        self.dropout(h)
    }

    /// Macaron block: half-step FFN, self-attention, convolution, half-step
    /// FFN, each pre-normalised with a residual, then a final norm.
    pub fn conformer_block(&mut self, x: Var, index: usize) -> Result<Var> {
        let p = format!("blocks.{index}");
        let h = self.feed_forward(x, &format!("{p}.ffn1"))?;
        let h = self.graph.scale(h, 0.5)?;
        let x = self.graph.add(x, h)?;

        let n = self.norm(x, &format!("{p}.mhsa.norm"))?;
        let (h, _) = self.multi_head_attention(n, &format!("{p}.mhsa"))?;
        let h = self.dropout(h)?;
        let x = self.graph.add(x, h)?;

        let h = self.conv_module(x, &format!("{p}.conv"))?;
        let x = self.graph.add(x, h)?;

        let h = self.feed_forward(x, &format!("{p}.ffn2"))?;
        let h = self.graph.scale(h, 0.5)?;
        let x = self.graph.add(x, h)?;
        self.norm(x, &format!("{p}.final_norm"))
    }

    /// One LSTM direction over `[T × d_in]`, gates ordered (i, f, g, o).
    fn lstm_direction(&mut self, x: Var, prefix: &str, reverse: bool) -> Result<Var> {
        let w_ih = self.param(&format!("{prefix}.w_ih"))?;
        let w_hh = self.param(&format!("{prefix}.w_hh"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        let h_dim = self.graph.shape(w_hh)[0];
        if self.graph.shape(w_ih)[0] != self.graph.shape(x)[1] {
            return Err(Error::shape(
                "bilstm",
                format!(
                    "{prefix}: input width {} but input-gate weights expect {}",
                    self.graph.shape(x)[1],
                    self.graph.shape(w_ih)[0]
                ),
            ));
        }
        let t_len = self.graph.shape(x)[0];
        let xw = self.graph.linear(x, w_ih, bias)?;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outputs = vec![None; t_len];
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let mut gates = self.graph.row(xw, t)?;
            if let Some(h_prev) = h {
                let rec = self.graph.matmul(h_prev, w_hh)?;
                gates = self.graph.add(gates, rec)?;
            }
            let i = self.graph.slice_cols(gates, 0, h_dim)?;
            let i = self.graph.activation(i, Activation::Sigmoid)?;
            let g = self.graph.slice_cols(gates, 2 * h_dim, h_dim)?;
            let g = self.graph.activation(g, Activation::Tanh)?;
            let o = self.graph.slice_cols(gates, 3 * h_dim, h_dim)?;
            let o = self.graph.activation(o, Activation::Sigmoid)?;
            let ig = self.graph.mul(i, g)?;
            let c_new = match c {
                Some(c_prev) => {
                    let f = self.graph.slice_cols(gates, h_dim, h_dim)?;
                    let f = self.graph.activation(f, Activation::Sigmoid)?;
                    let fc = self.graph.mul(f, c_prev)?;
                    self.graph.add(fc, ig)?
                }
                None => ig,
            };
            let ct = self.graph.activation(c_new, Activation::Tanh)?;
            let h_new = self.graph.mul(o, ct)?;
            outputs[t] = Some(h_new);
            h = Some(h_new);
            c = Some(c_new);
        }
        let rows: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step ran")).collect();
        self.graph.concat_rows(&rows)
    }

    /// LSTM layer `index`; forward and backward outputs concatenated per
    /// frame when bidirectional.
    pub fn bilstm_layer(&mut self, x: Var, index: usize) -> Result<Var> {
        if self.graph.shape(x)[0] == 0 {
            return Err(Error::Contract("LSTM input has no frames".into()));
        }
        let fwd = self.lstm_direction(x, &format!("lstm.{index}.fwd"), false)?;
        if !self.model.config.bidirectional {
            return Ok(fwd);
        }
        let bwd = self.lstm_direction(x, &format!("lstm.{index}.bwd"), true)?;
        self.graph.concat_cols(&[fwd, bwd])
    }

    /// Temporal pooling followed by one linear head per task; returns
    /// `[K × width]`.
    pub fn pool_and_classify(&mut self, x: Var) -> Result<Var> {
        let t = self.graph.shape(x)[0];
        if t == 0 {
            return Err(Error::Contract("cannot pool an empty sequence".into()));
        }
        let pooled = match self.model.config.pooling {
            Pooling::Mean => self.graph.mean_rows(x)?,
            Pooling::Last => self.graph.row(x, t - 1)?,
        };
        let tasks = self.model.config.task_subset.clone();
        let mut rows = Vec::with_capacity(tasks.len());
        for tag in tasks {
            let n = head_name(tag);
            rows.push(self.linear(pooled, &format!("heads.{n}.weight"), &format!("heads.{n}.bias"))?);
        }
        self.graph.concat_rows(&rows)
    }

    /// Everything after positional encoding: Conformer blocks, LSTM layers
    /// and the projection. Returns `[T' × proj_dim]`.
    pub fn encode_sequence(&mut self, x: Var) -> Result<Var> {
        let mut x = x;
        for b in 0..self.model.config.num_blocks {
            x = self.conformer_block(x, b)?;
        }
        for l in 0..self.model.config.lstm_layers {
            x = self.bilstm_layer(x, l)?;
        }
        self.linear(x, "proj.weight", "proj.bias")
    }

    /// Full network on a feature matrix; returns the `[K × width]` logits node.
    pub fn logits(&mut self, f: &FeatureMatrix) -> Result<Var> {
        let x = self.features(f)?;
        let x = self.conv_subsample(x)?;
        let x = self.add_positional(x)?;
        let x = self.dropout(x)?;
        let x = self.encode_sequence(x)?;
        self.pool_and_classify(x)
    }

    pub fn task_logits(&self, v: Var) -> Result<TaskLogits> {
        let cfg = &self.model.config;
        TaskLogits::new(cfg.task_subset.clone(), cfg.head_mode, self.graph.value(v).to_f64_vec())
    }
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
