//! Model and training configuration, read from `key = value` files.

use std::fmt;
use std::str::FromStr;

use crate::error::{HmtError, Result};

/// Sentence window for one multimodal branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Odd band width `w`: sentence `i` sees sentences `j` with `|i-j| <= w/2`.
    Size(usize),
    /// Fully connected.
    Full,
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Size(w) => write!(f, "{w}"),
            Window::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Window {
    type Err = HmtError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "full" {
            return Ok(Window::Full);
        }
        let w: usize = s
            .parse()
            .map_err(|_| HmtError::Config(format!("bad window {s:?}")))?;
        if w.is_multiple_of(2) {
            return Err(HmtError::Config(format!("window size {w} must be odd")));
        }
        Ok(Window::Size(w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Masked entries are left out of the softmax normalisation.
    #[default]
    Exclusive,
    /// Logits are multiplied by the binary mask before an unmasked softmax.
    Literal,
}

impl FromStr for MaskMode {
    type Err = HmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "exclusive" => Ok(MaskMode::Exclusive),
            "literal" => Ok(MaskMode::Literal),
            other => Err(HmtError::Config(format!("unknown mask_mode {other:?}"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Exclusive => "exclusive",
            MaskMode::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub h: usize,
    pub layers: usize,
    pub r: usize,
    pub l_max: usize,
    pub n_max: usize,
    pub m_max: usize,
    pub windows: Vec<Window>,
    pub eta: f64,
    pub classes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mask_mode: MaskMode,
    pub enable_mmt_images: bool,
    pub enable_dmmt: bool,
    pub enable_text_branch: bool,
    pub enable_dynamic_fusion: bool,
    pub enable_dmt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            h: 4,
            layers: 1,
            r: 16,
            l_max: 4,
            n_max: 20,
            m_max: 4,
            windows: vec![Window::Size(3), Window::Size(5), Window::Full],
            eta: 0.65,
            classes: 2,
            lr: 2e-5,
            weight_decay: 0.1,
            batch: 4,
            epochs: 30,
            patience: 5,
            seed: 0,
            mask_mode: MaskMode::Exclusive,
            enable_mmt_images: true,
            enable_dmmt: true,
            enable_text_branch: true,
            enable_dynamic_fusion: true,
            enable_dmt: true,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HmtError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(HmtError::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HmtError::Config(m));
        if self.d == 0 || self.h == 0 || !self.d.is_multiple_of(self.h) {
            return fail(format!("h = {} must divide d = {}", self.h, self.d));
        }
        if self.d < 4 {
            return fail(format!("d = {} too small for the fusion bottleneck", self.d));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.windows.is_empty() {
            return fail("windows must not be empty".into());
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return fail(format!("eta = {} must lie in (0, 1)", self.eta));
        }
        if self.classes < 2 {
            return fail(format!("classes = {} must be at least 2", self.classes));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr = {} invalid", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay = {} invalid", self.weight_decay));
        }
        if self.batch == 0 || self.patience == 0 {
            return fail("batch and patience must be at least 1".into());
        }
        if self.r == 0 || self.l_max == 0 || self.n_max == 0 || self.m_max == 0 {
            return fail("r, l_max, n_max and m_max must be positive".into());
        }
        Ok(())
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d" => self.d = parse_num(key, v)?,
            "h" => self.h = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "r" => self.r = parse_num(key, v)?,
            "l_max" => self.l_max = parse_num(key, v)?,
            "n_max" => self.n_max = parse_num(key, v)?,
            "m_max" => self.m_max = parse_num(key, v)?,
            "windows" => {
                self.windows = v
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "eta" => self.eta = parse_num(key, v)?,
            "classes" | "F" => self.classes = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "mask_mode" => self.mask_mode = v.parse()?,
            "enable_mmt_images" => self.enable_mmt_images = parse_bool(key, v)?,
            "enable_dmmt" => self.enable_dmmt = parse_bool(key, v)?,
            "enable_text_branch" => self.enable_text_branch = parse_bool(key, v)?,
            "enable_dynamic_fusion" => self.enable_dynamic_fusion = parse_bool(key, v)?,
            "enable_dmt" => self.enable_dmt = parse_bool(key, v)?,
            other => return Err(HmtError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HmtError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let windows: Vec<String> = self.windows.iter().map(ToString::to_string).collect();
        let lines = [
            format!("d = {}", self.d),
            format!("h = {}", self.h),
            format!("layers = {}", self.layers),
            format!("r = {}", self.r),
            format!("l_max = {}", self.l_max),
            format!("n_max = {}", self.n_max),
            format!("m_max = {}", self.m_max),
            format!("windows = {}", windows.join(",")),
            format!("eta = {:?}", self.eta),
            format!("classes = {}", self.classes),
            format!("lr = {:?}", self.lr),
            format!("weight_decay = {:?}", self.weight_decay),
            format!("batch = {}", self.batch),
            format!("epochs = {}", self.epochs),
            format!("patience = {}", self.patience),
            format!("seed = {}", self.seed),
            format!("mask_mode = {}", self.mask_mode),
            format!("enable_mmt_images = {}", self.enable_mmt_images),
            format!("enable_dmmt = {}", self.enable_dmmt),
            format!("enable_text_branch = {}", self.enable_text_branch),
            format!("enable_dynamic_fusion = {}", self.enable_dynamic_fusion),
            format!("enable_dmt = {}", self.enable_dmt),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Desk configuration used by the end-to-end gradient check.
    pub fn gradcheck_desk() -> Self {
        Self {
            l_max: 2,
            n_max: 6,
            m_max: 3,
            classes: 3,
            windows: vec![Window::Size(3), Window::Full],
            ..Self::default()
        }
    }

    /// Width of the allocated dynamic-weight matrix.
    pub fn wm_size(&self) -> usize {
        self.n_max + self.m_max + 1
    }
}
