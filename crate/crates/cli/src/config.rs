//! Resolved run settings: defaults, then a `key=value` file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dil::dataio::{TARGET_HEIGHT, TARGET_WIDTH};
use dil::gradcam::{CamLayer, CamTarget};
use dil::masking::{MaskKind, MaskSpec, Range};
use dil::models::ModelKind;
use dil::training::{AdamConfig, TrainConfig};
use dil::{Error, Result};

/// Which part of the seeded split a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
            SplitName::All => "all",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val, test or all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub model: ModelKind,
    pub mask: MaskKind,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub jobs: usize,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub max_steps: Option<usize>,
    pub split: SplitName,
    pub index: u64,
    pub count: usize,
    pub depth_max: f64,
    pub line_count: Range,
    pub line_thickness: Range,
    pub square_count: Range,
    pub square_side: Range,
    pub cam_target: CamTarget,
    pub cam_layer: CamLayer,
    pub lpips_checkpoint: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let mask = MaskSpec::new(MaskKind::Line, 0);
        let train = TrainConfig::default();
        Settings {
            data: None,
            model: ModelKind::Baseline,
            mask: MaskKind::Line,
            seed: 0,
            lr: train.adam.lr,
            weight_decay: train.adam.weight_decay,
            epochs: train.epochs,
            batch: train.batch_size,
            jobs: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
            height: TARGET_HEIGHT,
            width: TARGET_WIDTH,
            val_fraction: train.fractions[1],
            test_fraction: train.fractions[2],
            max_steps: None,
            split: SplitName::Test,
            index: 0,
            count: 80,
            depth_max: 10.0,
            line_count: mask.line_count,
            line_thickness: mask.line_thickness,
            square_count: mask.square_count,
            square_side: mask.square_side,
            cam_target: CamTarget::default(),
            cam_layer: CamLayer::default(),
            lpips_checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Settings {
    /// Sets one key from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.data = opt_path(v),
            "model" => self.model = parse(key, v)?,
            "mask" => self.mask = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "max_steps" => self.max_steps = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "split" => self.split = parse(key, v)?,
            "index" => self.index = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "depth_max" => self.depth_max = parse(key, v)?,
            "line_count" => self.line_count = parse(key, v)?,
            "line_thickness" => self.line_thickness = parse(key, v)?,
            "square_count" => self.square_count = parse(key, v)?,
            "square_side" => self.square_side = parse(key, v)?,
            "cam_target" => self.cam_target = parse(key, v)?,
            "cam_layer" => self.cam_layer = parse(key, v)?,
            "lpips_checkpoint" => self.lpips_checkpoint = opt_path(v),
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies a file of `key=value` lines. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in a fixed order, in the same textual
    /// form [`Settings::set`] accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", show_path(&self.data)),
            ("model", self.model.to_string()),
            ("mask", self.mask.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("jobs", self.jobs.to_string()),
            ("out", self.out.display().to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("max_steps", self.max_steps.map(|s| s.to_string()).unwrap_or_default()),
            ("split", self.split.to_string()),
            ("index", self.index.to_string()),
            ("count", self.count.to_string()),
            ("depth_max", self.depth_max.to_string()),
            ("line_count", self.line_count.to_string()),
            ("line_thickness", self.line_thickness.to_string()),
            ("square_count", self.square_count.to_string()),
            ("square_side", self.square_side.to_string()),
            ("cam_target", self.cam_target.to_string()),
            ("cam_layer", self.cam_layer.to_string()),
            ("lpips_checkpoint", show_path(&self.lpips_checkpoint)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            line_count: self.line_count,
            line_thickness: self.line_thickness,
            square_count: self.square_count,
            square_side: self.square_side,
            ..MaskSpec::new(self.mask, self.seed)
        }
    }

    pub fn fractions(&self) -> [f64; 3] {
        [1.0 - self.val_fraction - self.test_fraction, self.val_fraction, self.test_fraction]
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            epochs: self.epochs,
            batch_size: self.batch,
            fractions: self.fractions(),
            seed: self.seed,
            mask: self.mask_spec(),
            max_steps: self.max_steps,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("--data is required".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("--checkpoint is required".into()))
    }

    /// Rejects values no command can run with.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!("image size {}x{} is empty", self.height, self.width));
        }
        let [train, val, test] = self.fractions();
        if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad(format!("split fractions {train}/{val}/{test} must lie in [0, 1]"));
        }
        if !(self.depth_max.is_finite() && self.depth_max > 0.0) {
            return bad(format!("depth_max must be positive, got {}", self.depth_max));
        }
        self.mask_spec().validate(self.height, self.width)
    }
}
