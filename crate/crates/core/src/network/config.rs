use serde::{Deserialize, Serialize};

use crate::corpus::Tag;
use crate::error::{Error, Result};
use crate::frontend::{AugmentPolicy, NUM_MEL_BINS};
use crate::numerics::conv_out_len;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Two logits per task; positive iff `logit[1] > logit[0]`.
    TwoLogit,
    /// One logit per task; positive iff `sigmoid(logit) > 0.5`.
    OneLogit,
}

impl HeadMode {
    pub fn width(self) -> usize {
        match self {
            HeadMode::TwoLogit => 2,
            HeadMode::OneLogit => 1,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub attention_heads: usize,
    pub ff_expansion: usize,
    /// Depthwise kernel of the convolution module; must be odd.
    pub conv_kernel: usize,
    pub dropout_p: f64,
    /// Channels of both subsampling conv2d layers.
    pub subsample_channels: usize,
    pub lstm_layers: usize,
    /// Hidden units per direction.
    pub lstm_hidden: usize,
    pub bidirectional: bool,
    pub proj_dim: usize,
    pub pooling: Pooling,
    pub head_mode: HeadMode,
    pub task_subset: Vec<Tag>,
    pub num_mel_bins: usize,
    /// Per-utterance mean/variance normalisation of each mel bin.
    pub input_norm: bool,
    /// Applied to features in training mode only.
    pub spec_augment: AugmentPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 12,
            d_model: 256,
            attention_heads: 4,
            ff_expansion: 4,
            conv_kernel: 15,
            dropout_p: 0.1,
            subsample_channels: 256,
            lstm_layers: 2,
            lstm_hidden: 256,
            bidirectional: true,
            proj_dim: 128,
            pooling: Pooling::Mean,
            head_mode: HeadMode::TwoLogit,
            task_subset: Tag::ALL.to_vec(),
            num_mel_bins: NUM_MEL_BINS,
            input_norm: true,
            spec_augment: AugmentPolicy::default(),
        }
    }
}

/// Fewest input frames that survive two kernel-3 stride-2 convolutions.
pub const MIN_FRAMES: usize = 7;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("attention_heads", self.attention_heads),
            ("ff_expansion", self.ff_expansion),
            ("subsample_channels", self.subsample_channels),
            ("proj_dim", self.proj_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} attention heads",
                self.d_model, self.attention_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.lstm_layers > 0 && self.lstm_hidden == 0 {
            return Err(Error::Config("lstm_hidden must be positive".into()));
        }
        if self.task_subset.is_empty() {
            return Err(Error::Config("task_subset is empty".into()));
        }
        let mut seen = [false; 5];
        for t in &self.task_subset {
            if std::mem::replace(&mut seen[t.index()], true) {
                return Err(Error::Config(format!("task {t} listed twice")));
            }
        }
        if self.num_mel_bins < MIN_FRAMES {
            return Err(Error::Config(format!("num_mel_bins {} too small to subsample", self.num_mel_bins)));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.task_subset.len()
    }

    /// Feature width after the two subsampling convolutions.
    pub fn subsampled_bins(&self) -> usize {
        subsampled_len(self.num_mel_bins)
    }

    pub fn lstm_output_dim(&self) -> usize {
        if self.lstm_layers == 0 {
            self.d_model
        } else if self.bidirectional {
            2 * self.lstm_hidden
        } else {
            self.lstm_hidden
        }
    }

    /// Every trainable array implied by the config, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| specs.push((name, shape));
        let (c, d) = (self.subsample_channels, self.d_model);
        add("subsample.conv1.weight".into(), vec![c, 1, 3, 3]);
        add("subsample.conv1.bias".into(), vec![c]);
        add("subsample.conv2.weight".into(), vec![c, c, 3, 3]);
        add("subsample.conv2.bias".into(), vec![c]);
        add("subsample.out.weight".into(), vec![c * self.subsampled_bins(), d]);
        add("subsample.out.bias".into(), vec![d]);
        let ff = d * self.ff_expansion;
        for b in 0..self.num_blocks {
            let p = format!("blocks.{b}");
            for ffn in ["ffn1", "ffn2"] {
                add(format!("{p}.{ffn}.norm.gamma"), vec![d]);
                add(format!("{p}.{ffn}.norm.beta"), vec![d]);
                add(format!("{p}.{ffn}.w1"), vec![d, ff]);
                add(format!("{p}.{ffn}.b1"), vec![ff]);
                add(format!("{p}.{ffn}.w2"), vec![ff, d]);
                add(format!("{p}.{ffn}.b2"), vec![d]);
            }
            add(format!("{p}.mhsa.norm.gamma"), vec![d]);
            add(format!("{p}.mhsa.norm.beta"), vec![d]);
            for proj in ["q", "k", "v", "o"] {
                add(format!("{p}.mhsa.w{proj}"), vec![d, d]);
                add(format!("{p}.mhsa.b{proj}"), vec![d]);
            }
            add(format!("{p}.conv.norm.gamma"), vec![d]);
            add(format!("{p}.conv.norm.beta"), vec![d]);
            add(format!("{p}.conv.pw1.weight"), vec![d, 2 * d]);
            add(format!("{p}.conv.pw1.bias"), vec![2 * d]);
            add(format!("{p}.conv.dw.weight"), vec![d, self.conv_kernel]);
            add(format!("{p}.conv.dw.bias"), vec![d]);
            add(format!("{p}.conv.dw_norm.gamma"), vec![d]);
            add(format!("{p}.conv.dw_norm.beta"), vec![d]);
            add(format!("{p}.conv.pw2.weight"), vec![d, d]);
            add(format!("{p}.conv.pw2.bias"), vec![d]);
            add(format!("{p}.final_norm.gamma"), vec![d]);
            add(format!("{p}.final_norm.beta"), vec![d]);
        }
        let h = self.lstm_hidden;
        let mut d_in = d;
        for l in 0..self.lstm_layers {
            let dirs: &[&str] = if self.bidirectional { &["fwd", "bwd"] } else { &["fwd"] };
            for dir in dirs {
                add(format!("lstm.{l}.{dir}.w_ih"), vec![d_in, 4 * h]);
                add(format!("lstm.{l}.{dir}.w_hh"), vec![h, 4 * h]);
                add(format!("lstm.{l}.{dir}.bias"), vec![4 * h]);
            }
            d_in = if self.bidirectional { 2 * h } else { h };
        }
        add("proj.weight".into(), vec![self.lstm_output_dim(), self.proj_dim]);
        add("proj.bias".into(), vec![self.proj_dim]);
        let width = self.head_mode.width();
        for t in &self.task_subset {
            add(format!("heads.{}.weight", head_name(*t)), vec![self.proj_dim, width]);
            add(format!("heads.{}.bias", head_name(*t)), vec![width]);
        }
        specs
    }
}

pub(crate) fn head_name(t: Tag) -> &'static str {
    match t {
        Tag::Prolongation => "p",
        Tag::Block => "b",
        Tag::SoundRepetition => "r",
        Tag::WordRepetition => "wr",
        Tag::Interjection => "i",
    }
}

/// Length after two kernel-3, stride-2, unpadded convolutions.
pub fn subsampled_len(len: usize) -> usize {
    if len < MIN_FRAMES {
        return 0;
    }
    conv_out_len(conv_out_len(len, 3, 2, 0), 3, 2, 0)
}

/// Exact count of trainable scalars implied by `config`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    config
        .param_specs()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Scalar counts grouped by the first component of each parameter name.
pub fn parameter_breakdown(config: &ModelConfig) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (name, shape) in config.param_specs() {
        let group = name.split('.').next().unwrap_or_default().to_string();
        let n: usize = shape.iter().product();
        match out.last_mut() {
            Some((g, total)) if *g == group => *total += n,
            _ => out.push((group, n)),
        }
    }
    out
}
