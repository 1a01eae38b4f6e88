//! Architecture configuration and the width tables of the three size variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Medium,
    Large,
}

/// Channel widths and depths of one size variant, before any width divisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeSpec {
    pub detail: [usize; 3],
    /// Stem, S3, S4, S5.
    pub semantic: [usize; 4],
    pub blocks: [usize; 3],
    pub expansion: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub trunk: [usize; 2],
    pub seg_mid: usize,
    pub agg_channels: usize,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    pub fn spec(self) -> SizeSpec {
        match self {
            Size::Small => SizeSpec {
                detail: [32, 32, 64],
                semantic: [8, 16, 32, 64],
                blocks: [1, 1, 2],
                expansion: 4,
                embed_dim: 256,
                heads: 4,
                ffn_dim: 1024,
                trunk: [512, 256],
                seg_mid: 256,
                agg_channels: 64,
            },
            Size::Medium => SizeSpec {
                detail: [64, 64, 128],
                semantic: [16, 32, 64, 128],
                blocks: [2, 2, 4],
                expansion: 6,
                embed_dim: 512,
                heads: 8,
                ffn_dim: 2048,
                trunk: [1024, 512],
                seg_mid: 1024,
                agg_channels: 128,
            },
            Size::Large => SizeSpec {
                detail: [96, 96, 192],
                semantic: [24, 48, 96, 192],
                blocks: [3, 3, 6],
                expansion: 6,
                embed_dim: 768,
                heads: 12,
                ffn_dim: 3072,
                trunk: [1536, 768],
                seg_mid: 1536,
                agg_channels: 192,
            },
        }
    }
}

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Size::Small),
            "medium" => Ok(Size::Medium),
            "large" => Ok(Size::Large),
            _ => Err(Error::config(format!("unknown size {s:?} (small, medium, large)"))),
        }
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Size::Small => "small",
            Size::Medium => "medium",
            Size::Large => "large",
        })
    }
}

/// Depthwise kernel sizes of a UIB block; 0 skips that convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UibKernels {
    pub start: usize,
    pub mid: usize,
    pub end: usize,
}

impl UibKernels {
    pub const fn new(start: usize, mid: usize, end: usize) -> Self {
        UibKernels { start, mid, end }
    }

    /// The seven kernel configurations of the ablation grid.
    pub const GRID: [UibKernels; 7] = [
        UibKernels::new(0, 3, 0),
        UibKernels::new(1, 3, 0),
        UibKernels::new(0, 3, 1),
        UibKernels::new(1, 3, 1),
        UibKernels::new(5, 3, 0),
        UibKernels::new(0, 3, 5),
        UibKernels::new(5, 3, 5),
    ];

    pub fn validate(&self) -> Result<()> {
        let outer = [0, 1, 3, 5];
        if !outer.contains(&self.start) || !outer.contains(&self.end) || ![0, 3].contains(&self.mid) {
            return Err(Error::config(format!(
                "kernel config {self}: start/end must be in {{0,1,3,5}} and mid in {{0,3}}"
            )));
        }
        Ok(())
    }
}

impl Default for UibKernels {
    fn default() -> Self {
        UibKernels::new(0, 3, 0)
    }
}

impl fmt::Display for UibKernels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}m{}e{}", self.start, self.mid, self.end)
    }
}

impl FromStr for UibKernels {
    type Err = Error;

    /// Accepts `s0m3e0` and `S0-M3-E0`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("cannot parse kernel config {s:?}, expected e.g. s0m3e0"));
        let t: String = s.to_ascii_lowercase().chars().filter(|c| *c != '-').collect();
        let rest = t.strip_prefix('s').ok_or_else(bad)?;
        let (start, rest) = rest.split_once('m').ok_or_else(bad)?;
        let (mid, end) = rest.split_once('e').ok_or_else(bad)?;
        let k = UibKernels::new(
            start.parse().map_err(|_| bad())?,
            mid.parse().map_err(|_| bad())?,
            end.parse().map_err(|_| bad())?,
        );
        k.validate()?;
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Height,
    Week,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seg" | "segmentation" => Ok(Task::Seg),
            "height" => Ok(Task::Height),
            "week" => Ok(Task::Week),
            other => Err(Error::config(format!("unknown task {other:?} (seg, height, week)"))),
        }
    }
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Seg, Task::Height, Task::Week];

    pub fn name(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Height => "height",
            Task::Week => "week",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tasks {
    pub seg: bool,
    pub height: bool,
    pub week: bool,
}

impl Tasks {
    pub const ALL: Tasks = Tasks {
        seg: true,
        height: true,
        week: true,
    };

    pub fn only(task: Task) -> Tasks {
        Tasks {
            seg: task == Task::Seg,
            height: task == Task::Height,
            week: task == Task::Week,
        }
    }

    pub fn has(&self, task: Task) -> bool {
        match task {
            Task::Seg => self.seg,
            Task::Height => self.height,
            Task::Week => self.week,
        }
    }

    pub fn growth(&self) -> bool {
        self.height || self.week
    }
}

impl Default for Tasks {
    fn default() -> Self {
        Tasks::ALL
    }
}

impl FromStr for Tasks {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = Tasks {
            seg: false,
            height: false,
            week: false,
        };
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            match part.parse::<Task>()? {
                Task::Seg => t.seg = true,
                Task::Height => t.height = true,
                Task::Week => t.week = true,
            }
        }
        if !(t.seg || t.growth()) {
            return Err(Error::config("task list is empty"));
        }
        Ok(t)
    }
}

impl fmt::Display for Tasks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.seg, "seg"), (self.height, "height"), (self.week, "week")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

/// Complete description of one network. The default is the headline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub size: Size,
    pub kernels: UibKernels,
    pub use_se: bool,
    /// Width of the aggregated representation; `None` uses the size's default.
    pub agg_channels: Option<usize>,
    pub aux: bool,
    pub num_classes: usize,
    pub num_weeks: usize,
    pub tasks: Tasks,
    /// Divides every channel width; used for small test networks.
    pub width_divisor: usize,
    pub dropout: f64,
    /// Initial layer scale of residual blocks; blocks without a skip start at 1.
    pub layer_scale_init: f64,
    /// Fixed multiplier on the height head output, in cm per unit. The loss is still
    /// on raw centimetres; a larger value lets a short run reach the target range.
    pub height_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            size: Size::Medium,
            kernels: UibKernels::default(),
            use_se: true,
            agg_channels: None,
            aux: true,
            num_classes: 17,
            num_weeks: 11,
            tasks: Tasks::ALL,
            width_divisor: 1,
            dropout: 0.1,
            layer_scale_init: 1e-5,
            height_scale: 1.0,
        }
    }
}

/// Resolved widths of a configuration after applying the divisor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims {
    pub detail: [usize; 3],
    pub semantic: [usize; 4],
    pub blocks: [usize; 3],
    pub expansion: usize,
    pub agg: usize,
    pub seg_mid: usize,
    pub embed: usize,
    pub heads: usize,
    pub ffn: usize,
    pub trunk: [usize; 2],
    /// Hidden width of the auxiliary heads for upsampling factors 4, 8, 16, 32.
    pub aux_hidden: [usize; 4],
}

pub const AUX_FACTORS: [usize; 4] = [4, 8, 16, 32];
pub const SEG_UPSCALE: usize = 8;

impl ModelConfig {
    /// The configuration with the other tasks removed; aux heads only exist for segmentation.
    pub fn single_task(&self, task: Task) -> ModelConfig {
        ModelConfig {
            tasks: Tasks::only(task),
            aux: self.aux && task == Task::Seg,
            ..self.clone()
        }
    }

    pub fn aux_active(&self) -> bool {
        self.aux && self.tasks.seg
    }

    pub fn dims(&self) -> Result<Dims> {
        let s = self.size.spec();
        let d = self.width_divisor;
        if d == 0 {
            return Err(Error::config("width_divisor must be positive"));
        }
        let div = |what: &str, w: usize| -> Result<usize> {
            if w % d != 0 || w / d == 0 {
                return Err(Error::config(format!("{what} width {w} is not divisible by width_divisor {d}")));
            }
            Ok(w / d)
        };
        let map3 = |what: &str, a: [usize; 3]| -> Result<[usize; 3]> { Ok([div(what, a[0])?, div(what, a[1])?, div(what, a[2])?]) };
        let agg = self.agg_channels.unwrap_or(s.agg_channels);
        Ok(Dims {
            detail: map3("detail", s.detail)?,
            semantic: [
                div("stem", s.semantic[0])?,
                div("S3", s.semantic[1])?,
                div("S4", s.semantic[2])?,
                div("S5", s.semantic[3])?,
            ],
            blocks: s.blocks,
            expansion: s.expansion,
            agg: div("aggregation", agg)?,
            seg_mid: div("segmentation head", s.seg_mid)?,
            embed: div("embedding", s.embed_dim)?,
            heads: s.heads,
            ffn: div("ffn", s.ffn_dim)?,
            trunk: [div("trunk", s.trunk[0])?, div("trunk", s.trunk[1])?],
            aux_hidden: [
                div("aux", AUX_FACTORS[0] * AUX_FACTORS[0])?,
                div("aux", AUX_FACTORS[1] * AUX_FACTORS[1])?,
                div("aux", AUX_FACTORS[2] * AUX_FACTORS[2])?,
                div("aux", AUX_FACTORS[3] * AUX_FACTORS[3])?,
            ],
        })
    }

    /// Checks every structural constraint, reporting the first violation.
    pub fn validate(&self) -> Result<Dims> {
        self.kernels.validate()?;
        let dims = self.dims()?;
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.num_weeks < 2 {
            return Err(Error::config("num_weeks must be at least 2"));
        }
        if !(self.tasks.seg || self.tasks.growth()) {
            return Err(Error::config("no task enabled"));
        }
        if !(self.height_scale > 0.0 && self.height_scale.is_finite()) {
            return Err(Error::config(format!("height scale {} must be positive", self.height_scale)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.kernels.mid == 0 {
            return Err(Error::config(format!(
                "stage S3: first block has stride 2 but kernel config {} has no mid depthwise to carry it",
                self.kernels
            )));
        }
        if dims.semantic[0] < 2 {
            return Err(Error::config("stem width must be at least 2"));
        }
        if dims.detail[2] != dims.semantic[3] {
            return Err(Error::config(format!(
                "aggregation needs equal detail and semantic widths, got {} and {}",
                dims.detail[2], dims.semantic[3]
            )));
        }
        if self.use_se {
            let mut cin = dims.semantic[0];
            for (i, &c) in dims.semantic[1..].iter().enumerate() {
                for e in [cin * dims.expansion, c * dims.expansion] {
                    if e % 4 != 0 {
                        return Err(Error::config(format!("stage S{}: expanded width {e} not divisible by 4 for SE", i + 3)));
                    }
                }
                cin = c;
            }
        }
        if dims.embed % dims.heads != 0 {
            return Err(Error::config(format!("embedding {} not divisible by {} heads", dims.embed, dims.heads)));
        }
        Ok(dims)
    }

    /// Label of a configuration in ablation tables.
    pub fn label(&self) -> String {
        let agg = self.agg_channels.unwrap_or(self.size.spec().agg_channels);
        format!(
            "{}-{}-C{}-{}-{}",
            self.size,
            self.kernels,
            agg,
            if self.use_se { "SE" } else { "NoSE" },
            if self.aux { "aux" } else { "noaux" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_strings_round_trip() {
        for k in UibKernels::GRID {
            assert_eq!(k.to_string().parse::<UibKernels>().unwrap(), k);
        }
        assert_eq!("S5-M3-E5".parse::<UibKernels>().unwrap(), UibKernels::new(5, 3, 5));
        assert!("s2m3e0".parse::<UibKernels>().is_err());
        assert!("m3".parse::<UibKernels>().is_err());
    }

    #[test]
    fn default_is_headline_model() {
        let c = ModelConfig::default();
        let d = c.validate().unwrap();
        assert_eq!(d.detail, [64, 64, 128]);
        assert_eq!(d.semantic, [16, 32, 64, 128]);
        assert_eq!(d.blocks.iter().sum::<usize>(), 8);
        assert_eq!(d.agg, 128);
        assert_eq!((d.embed, d.heads, d.ffn, d.trunk), (512, 8, 2048, [1024, 512]));
    }

    #[test]
    fn missing_mid_kernel_names_the_stage() {
        let c = ModelConfig {
            kernels: UibKernels::new(3, 0, 3),
            ..ModelConfig::default()
        };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("S3"), "{e}");
    }

    #[test]
    fn tasks_parse() {
        let t: Tasks = "seg,week".parse().unwrap();
        assert!(t.seg && !t.height && t.week);
        assert_eq!(t.to_string(), "seg,week");
        assert!("".parse::<Tasks>().is_err());
        assert!("seg,colour".parse::<Tasks>().is_err());
    }

    #[test]
    fn divisor_shrinks_widths() {
        let c = ModelConfig {
            width_divisor: 8,
            ..ModelConfig::default()
        };
        let d = c.validate().unwrap();
        assert_eq!(d.semantic, [2, 4, 8, 16]);
        assert_eq!(d.aux_hidden, [2, 8, 32, 128]);
        let bad = ModelConfig {
            width_divisor: 7,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
