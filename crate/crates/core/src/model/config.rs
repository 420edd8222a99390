use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frontend::N_MELS;

/// Depthwise kernel widths for every block of the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelLayout {
    /// B0
    pub prolog: usize,
    /// B1-B6
    pub megablock1: Vec<usize>,
    /// B7-B13
    pub megablock2: Vec<usize>,
    /// B14-B21
    pub megablock3: Vec<usize>,
    /// B22
    pub epilog: usize,
}

pub const MEGABLOCK_SIZES: [usize; 3] = [6, 7, 8];

impl KernelLayout {
    pub fn k1() -> Self {
        Self::from_rows(5, &[3, 3, 3, 5, 5, 5], &[3, 3, 5, 5, 5, 5, 7], &[7, 7, 7, 7, 9, 9, 9, 9], 41)
    }

    pub fn k2() -> Self {
        Self::from_rows(5, &[5, 7, 7, 9, 9, 11], &[7, 7, 9, 9, 11, 11, 13], &[13, 13, 15, 15, 17, 17, 19, 19], 41)
    }

    pub fn k3() -> Self {
        Self::from_rows(5, &[9, 9, 11, 13, 15, 15], &[9, 11, 13, 15, 15, 17, 19], &[19, 21, 21, 23, 25, 27, 27, 29], 41)
    }

    /// The baseline layout.
    pub fn k4() -> Self {
        Self::from_rows(
            5,
            &[11, 13, 15, 17, 19, 21],
            &[13, 15, 17, 19, 21, 23, 25],
            &[25, 27, 29, 31, 33, 35, 37, 39],
            41,
        )
    }

    pub fn from_rows(prolog: usize, mb1: &[usize], mb2: &[usize], mb3: &[usize], epilog: usize) -> Self {
        Self {
            prolog,
            megablock1: mb1.to_vec(),
            megablock2: mb2.to_vec(),
            megablock3: mb3.to_vec(),
            epilog,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "K1" => Some(Self::k1()),
            "K2" => Some(Self::k2()),
            "K3" => Some(Self::k3()),
            "K4" => Some(Self::k4()),
            _ => None,
        }
    }

    pub fn megablocks(&self) -> [&[usize]; 3] {
        [&self.megablock1, &self.megablock2, &self.megablock3]
    }

    pub fn validate(&self) -> Result<()> {
        for (m, (row, &want)) in self.megablocks().iter().zip(&MEGABLOCK_SIZES).enumerate() {
            if row.len() != want {
                return Err(Error::InvalidArgument(format!(
                    "megablock {} needs {want} kernel widths, got {}",
                    m + 1,
                    row.len()
                )));
            }
        }
        let all = std::iter::once(&self.prolog)
            .chain(self.megablocks().into_iter().flatten())
            .chain(std::iter::once(&self.epilog));
        for &k in all {
            if k == 0 || k % 2 == 0 {
                return Err(Error::InvalidArgument(format!("kernel width {k} must be odd and positive")));
            }
        }
        Ok(())
    }

    /// Scales every residual-block kernel by `gamma`: `floor(k·γ)`, bumped
    /// to the next odd width when even. Prolog and epilog are unchanged.
    pub fn scaled(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("kernel scale {gamma} must be positive")));
        }
        let scale = |row: &[usize]| -> Vec<usize> {
            row.iter()
                .map(|&k| {
                    let s = (k as f64 * gamma).floor() as usize;
                    if s % 2 == 0 {
                        s + 1
                    } else {
                        s
                    }
                })
                .collect()
        };
        Ok(Self {
            prolog: self.prolog,
            megablock1: scale(&self.megablock1),
            megablock2: scale(&self.megablock2),
            megablock3: scale(&self.megablock3),
            epilog: self.epilog,
        })
    }
}

impl fmt::Display for KernelLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |r: &[usize]| r.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        write!(
            f,
            "{} | {} | {} | {} | {}",
            self.prolog,
            join(&self.megablock1),
            join(&self.megablock2),
            join(&self.megablock3),
            self.epilog
        )
    }
}

pub fn scale_kernel_layout(base: &KernelLayout, gamma: f64) -> Result<KernelLayout> {
    base.scaled(gamma)
}

/// Pooling context of the squeeze-and-excitation gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeContext {
    Global,
    /// Non-overlapping windows of this many frames.
    Window(usize),
}

impl SeContext {
    pub fn window(self) -> Option<usize> {
        match self {
            SeContext::Global => None,
            SeContext::Window(w) => Some(w),
        }
    }
}

impl fmt::Display for SeContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeContext::Global => f.write_str("global"),
            SeContext::Window(w) => write!(f, "{w}"),
        }
    }
}

impl FromStr for SeContext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(SeContext::Global);
        }
        match s.parse::<usize>() {
            Ok(w) if w > 0 => Ok(SeContext::Window(w)),
            _ => Err(Error::InvalidArgument(format!("SE context must be 'global' or a positive window, got {s:?}"))),
        }
    }
}

/// Full architectural description of a Citrinet encoder and CTC head.
#[derive(Clone, Debug, PartialEq)]
pub struct CitrinetConfig {
    /// Sub-blocks per residual block (R).
    pub repeat: usize,
    /// Channels of every convolution except the epilog (C).
    pub channels: usize,
    pub layout: KernelLayout,
    /// Kernel scale factor applied to `layout`, if any.
    pub gamma: Option<f64>,
    pub se_enabled: bool,
    pub se_context: SeContext,
    /// SE bottleneck width is `channels / se_reduction`.
    pub se_reduction: usize,
    pub epilog_channels: usize,
    /// Tokenizer vocabulary size; the head has one extra class for blank.
    pub vocab_size: usize,
    pub dropout: f64,
    pub feat_in: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for CitrinetConfig {
    fn default() -> Self {
        Self {
            repeat: 5,
            channels: 384,
            layout: KernelLayout::k4(),
            gamma: None,
            se_enabled: true,
            se_context: SeContext::Global,
            se_reduction: 8,
            epilog_channels: 640,
            vocab_size: 256,
            dropout: 0.1,
            feat_in: N_MELS,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl CitrinetConfig {
    pub fn effective_layout(&self) -> Result<KernelLayout> {
        match self.gamma {
            Some(g) => self.layout.scaled(g),
            None => Ok(self.layout.clone()),
        }
    }

    pub fn se_hidden(&self) -> usize {
        (self.channels / self.se_reduction.max(1)).max(1)
    }

    /// Blank is the last class.
    pub fn num_classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_layout()?.validate()?;
        let positive = [
            ("repeat", self.repeat),
            ("channels", self.channels),
            ("se_reduction", self.se_reduction),
            ("epilog_channels", self.epilog_channels),
            ("vocab_size", self.vocab_size),
            ("feat_in", self.feat_in),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if let SeContext::Window(0) = self.se_context {
            return Err(Error::InvalidArgument("SE window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Encoder output length: three stride-2 stages of `ceil(T/2)`.
pub fn output_frames(input_frames: usize) -> usize {
    input_frames.div_ceil(2).div_ceil(2).div_ceil(2)
}


fn parse_kv<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::format("config", format!("bad value {value:?} for {key}")))
}

impl KernelLayout {
    /// Parses `K1`..`K4` or an explicit `prolog|mb1|mb2|mb3|epilog` list such
    /// as `5|3,3,3,5,5,5|...|41`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(l) = Self::by_name(s.trim()) {
            return Ok(l);
        }
        let parts: Vec<&str> = s.split('|').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::format("config", format!("kernel layout {s:?} needs 5 '|'-separated groups")));
        }
        let row = |p: &str| -> Result<Vec<usize>> { p.split(',').map(|k| parse_kv("layout", k)).collect() };
        let layout = Self {
            prolog: parse_kv("layout", parts[0])?,
            megablock1: row(parts[1])?,
            megablock2: row(parts[2])?,
            megablock3: row(parts[3])?,
            epilog: parse_kv("layout", parts[4])?,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_compact(&self) -> String {
        self.to_string().replace(' ', "")
    }
}

impl CitrinetConfig {
    /// Key-value pairs understood by [`CitrinetConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("repeat", self.repeat.to_string()),
            ("channels", self.channels.to_string()),
            ("layout", self.layout.to_compact()),
            ("gamma", self.gamma.map_or("none".into(), |g| g.to_string())),
            ("se", self.se_enabled.to_string()),
            ("se_context", self.se_context.to_string()),
            ("se_reduction", self.se_reduction.to_string()),
            ("epilog_channels", self.epilog_channels.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("feat_in", self.feat_in.to_string()),
            ("bn_eps", self.bn_eps.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
        ]
    }

    /// Sets one field by key; returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "repeat" => self.repeat = parse_kv(key, value)?,
            "channels" => self.channels = parse_kv(key, value)?,
            "layout" => self.layout = KernelLayout::parse(value)?,
            "gamma" => {
                self.gamma = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse_kv(key, v)?),
                }
            }
            "se" => self.se_enabled = parse_kv(key, value)?,
            "se_context" => self.se_context = value.trim().parse()?,
            "se_reduction" => self.se_reduction = parse_kv(key, value)?,
            "epilog_channels" => self.epilog_channels = parse_kv(key, value)?,
            "vocab_size" => self.vocab_size = parse_kv(key, value)?,
            "dropout" => self.dropout = parse_kv(key, value)?,
            "feat_in" => self.feat_in = parse_kv(key, value)?,
            "bn_eps" => self.bn_eps = parse_kv(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_kv(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
