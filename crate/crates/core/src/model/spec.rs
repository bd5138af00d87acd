use std::fmt::Write as _;

use crate::capsule::Nonlinearity;
use crate::error::{Error, Result};
use crate::routing::{RoutingMode, Weighting};

/// One level: `blocks` parallel dense blocks of `dense_layers` layers with
/// growth `growth`, a stride on their first layer and `dim`-dimensional capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub blocks: usize,
    pub growth: usize,
    pub dim: usize,
    pub stride: usize,
    pub dense_layers: usize,
}

impl LevelSpec {
    pub const fn new(blocks: usize, growth: usize, dim: usize, stride: usize) -> Self {
        Self { blocks, growth, dim, stride, dense_layers: 6 }
    }
}

/// Decoder widths: the fully connected patch carries `patch_channels`, the
/// first transposed conv maps them to `mid_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderSpec {
    pub patch_channels: usize,
    pub mid_channels: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self { patch_channels: 32, mid_channels: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub init_channels: usize,
    pub levels: Vec<LevelSpec>,
    pub n_classes: usize,
    pub routing: RoutingMode,
    pub weighting: Weighting,
    pub nonlinearity: Nonlinearity,
    pub lambda_ws: f64,
    pub lambda_r: f64,
    pub lambda_wd: f64,
    pub decoder: DecoderSpec,
}

const REFERENCE_LEVELS: [LevelSpec; 4] = [
    LevelSpec::new(16, 8, 16, 2),
    LevelSpec::new(8, 8, 32, 1),
    LevelSpec::new(4, 8, 64, 2),
    LevelSpec::new(2, 8, 8, 1),
];

impl NetworkSpec {
    fn base(in_channels: usize, side: usize, levels: Vec<LevelSpec>, n_classes: usize) -> Self {
        Self {
            in_channels,
            height: side,
            width: side,
            init_channels: 24,
            levels,
            n_classes,
            routing: RoutingMode::WsPlusCe,
            weighting: Weighting::Softmax,
            nonlinearity: Nonlinearity::Tilt,
            lambda_ws: 0.2,
            lambda_r: 0.1,
            lambda_wd: 1e-4,
            decoder: DecoderSpec::default(),
        }
    }

    pub fn cifar10() -> Self {
        Self::base(3, 32, REFERENCE_LEVELS.to_vec(), 10)
    }

    pub fn cifar100() -> Self {
        let mut levels = REFERENCE_LEVELS.to_vec();
        levels[3].dim = 24;
        Self::base(3, 32, levels, 100)
    }

    pub fn svhn() -> Self {
        Self::cifar10()
    }

    pub fn mnist() -> Self {
        Self::base(1, 28, REFERENCE_LEVELS.to_vec(), 10)
    }

    /// Two-level MNIST network small enough to train on one CPU core.
    pub fn desk_mnist() -> Self {
        Self::base(1, 28, vec![LevelSpec::new(4, 4, 8, 2), LevelSpec::new(2, 4, 8, 2)], 10)
    }

    /// One level, two blocks, 8×8 input: the gradient-check network.
    pub fn micro() -> Self {
        let mut s = Self::base(1, 8, vec![LevelSpec { blocks: 2, growth: 2, dim: 4, stride: 1, dense_layers: 2 }], 3);
        s.init_channels = 4;
        s.decoder = DecoderSpec { patch_channels: 4, mid_channels: 4 };
        s
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "cifar10" => Some(Self::cifar10()),
            "cifar100" => Some(Self::cifar100()),
            "svhn" => Some(Self::svhn()),
            "mnist" => Some(Self::mnist()),
            "desk-mnist" => Some(Self::desk_mnist()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.levels.is_empty() {
            return bad("at least one level is required");
        }
        if self.in_channels == 0 || self.init_channels == 0 || self.n_classes == 0 {
            return bad("channel and class counts must be positive");
        }
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return bad("image extents must be positive multiples of 4 for the decoder");
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.blocks == 0 || l.growth == 0 || l.dim == 0 || l.stride == 0 || l.dense_layers == 0 {
                return Err(Error::InvalidSpec(format!("level {} has a zero field: {l:?}", i + 1)));
            }
        }
        if self.decoder.patch_channels == 0 || self.decoder.mid_channels == 0 {
            return bad("decoder widths must be positive");
        }
        for (name, v) in [("lambda_ws", self.lambda_ws), ("lambda_r", self.lambda_r), ("lambda_wd", self.lambda_wd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidSpec(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Spatial extent after each level.
    pub fn level_extents(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.levels
            .iter()
            .map(|l| {
                h = h.div_ceil(l.stride);
                w = w.div_ceil(l.stride);
                (h, w)
            })
            .collect()
    }

    /// Width of the prediction vector: classes plus one extra component.
    pub fn outputs(&self) -> usize {
        self.n_classes + 1
    }

    /// `key=value` lines, readable by [`NetworkSpec::set`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let levels: Vec<String> = self
            .levels
            .iter()
            .map(|l| format!("{}x{}x{}x{}x{}", l.blocks, l.growth, l.dim, l.stride, l.dense_layers))
            .collect();
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "init_channels={}", self.init_channels);
        let _ = writeln!(s, "levels={}", levels.join(","));
        let _ = writeln!(s, "n_classes={}", self.n_classes);
        let _ = writeln!(s, "routing={}", self.routing.name());
        let _ = writeln!(s, "weighting={}", self.weighting.name());
        let _ = writeln!(s, "nonlinearity={}", self.nonlinearity.name());
        let _ = writeln!(s, "lambda_ws={}", self.lambda_ws);
        let _ = writeln!(s, "lambda_r={}", self.lambda_r);
        let _ = writeln!(s, "lambda_wd={}", self.lambda_wd);
        let _ = writeln!(s, "decoder_patch_channels={}", self.decoder.patch_channels);
        let _ = writeln!(s, "decoder_mid_channels={}", self.decoder.mid_channels);
        s
    }

    pub const KEYS: [&'static str; 14] = [
        "in_channels",
        "height",
        "width",
        "init_channels",
        "levels",
        "n_classes",
        "routing",
        "weighting",
        "nonlinearity",
        "lambda_ws",
        "lambda_r",
        "lambda_wd",
        "decoder_patch_channels",
        "decoder_mid_channels",
    ];

    /// Applies one `key=value` pair. Returns `Ok(false)` for keys that are
    /// not network keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::InvalidSpec(format!("invalid value {value:?} for {key}"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "in_channels" => self.in_channels = int()?,
            "height" => self.height = int()?,
            "width" => self.width = int()?,
            "init_channels" => self.init_channels = int()?,
            "levels" => self.levels = parse_levels(value).ok_or_else(bad)?,
            "n_classes" => self.n_classes = int()?,
            "routing" => self.routing = RoutingMode::parse(value).ok_or_else(bad)?,
            "weighting" => self.weighting = Weighting::parse(value).ok_or_else(bad)?,
            "nonlinearity" => self.nonlinearity = Nonlinearity::parse(value).ok_or_else(bad)?,
            "lambda_ws" => self.lambda_ws = float()?,
            "lambda_r" => self.lambda_r = float()?,
            "lambda_wd" => self.lambda_wd = float()?,
            "decoder_patch_channels" => self.decoder.patch_channels = int()?,
            "decoder_mid_channels" => self.decoder.mid_channels = int()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = Self::cifar10();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::InvalidSpec(format!("expected key=value, got {line:?}")))?;
            if !spec.set(k.trim(), v.trim())? {
                return Err(Error::InvalidSpec(format!("unknown network key {k:?}")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// `N x g x k x stride [x layers]` entries separated by commas.
fn parse_levels(s: &str) -> Option<Vec<LevelSpec>> {
    s.split(',')
        .map(|item| {
            let f: Vec<usize> = item.trim().split('x').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
            match f.as_slice() {
                [n, g, k, st] => Some(LevelSpec::new(*n, *g, *k, *st)),
                [n, g, k, st, d] => Some(LevelSpec { blocks: *n, growth: *g, dim: *k, stride: *st, dense_layers: *d }),
                _ => None,
            }
        })
        .collect()
}
