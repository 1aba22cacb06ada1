use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::poolcore::{ModelConfig, SlotRelaxation, DEFAULT_EPSILON};
use crate::training::{LossWeights, Schedule, TauSchedule, TrainConfig};

use super::CliError;

/// Everything a `train` or `ablate` run depends on, as flat `key=value` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Empty means "generate the default synthetic dataset from `synth_seed`".
    pub data: Option<PathBuf>,
    pub synth_seed: u64,
    pub val_fraction: f64,
    /// Taken from the dataset when unset.
    pub classes: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub input_depth: Option<usize>,
    pub slots: usize,
    pub prototypes: usize,
    pub depth: usize,
    pub epsilon: f64,
    pub gumbel: SlotRelaxation,
    pub orth: bool,
    pub focal: bool,
    pub addon: bool,
    pub seed: u64,
    /// Total epoch budget over all phases.
    pub epochs: Option<u32>,
    pub out: PathBuf,
    pub schedule: Schedule,
    pub weights: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            synth_seed: 7,
            val_fraction: 0.2,
            classes: None,
            height: None,
            width: None,
            input_depth: None,
            slots: 3,
            prototypes: 30,
            depth: 16,
            epsilon: DEFAULT_EPSILON,
            gumbel: SlotRelaxation::default(),
            orth: true,
            focal: true,
            addon: true,
            seed: 7,
            epochs: None,
            out: PathBuf::from("run"),
            schedule: Schedule::default(),
            weights: LossWeights::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse '{value}'"))
}

fn parse_switch(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("{key}: expected on or off, got '{value}'")),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, String> {
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn float(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let s = &mut self.schedule;
        let w = &mut self.weights;
        match key {
            "data" => self.data = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "synth_seed" => self.synth_seed = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "classes" => self.classes = parse_opt(key, value)?,
            "height" => self.height = parse_opt(key, value)?,
            "width" => self.width = parse_opt(key, value)?,
            "input_depth" => self.input_depth = parse_opt(key, value)?,
            "slots" => self.slots = parse(key, value)?,
            "prototypes" => self.prototypes = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "gumbel" => self.gumbel = value.parse()?,
            "orth" => self.orth = parse_switch(key, value)?,
            "focal" => self.focal = parse_switch(key, value)?,
            "addon" => self.addon = parse_switch(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse_opt(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "alpha" => s.alpha = parse(key, value)?,
            "tau_floor" => s.tau_floor = parse(key, value)?,
            "tau_switch_epoch" => s.tau_switch_epoch = parse(key, value)?,
            "tau_schedule" => s.tau_schedule = value.parse::<TauSchedule>()?,
            "warmup_epochs" => s.warmup_epochs = parse(key, value)?,
            "joint_epochs" => s.joint_epochs = parse(key, value)?,
            "early_stop_patience" => s.early_stop_patience = parse(key, value)?,
            "finetune_epochs" => s.finetune_epochs = parse(key, value)?,
            "lr_addon" => s.lr_addon = parse(key, value)?,
            "lr_pool" => s.lr_pool = parse(key, value)?,
            "lr_halving_every" => s.lr_halving_every = parse(key, value)?,
            "weight_decay" => s.weight_decay = parse(key, value)?,
            "lr_finetune" => s.lr_finetune = parse(key, value)?,
            "beta1" => s.beta1 = parse(key, value)?,
            "beta2" => s.beta2 = parse(key, value)?,
            "batch_size" => s.batch_size = parse(key, value)?,
            "addon_in_warmup" => s.addon_in_warmup = parse_switch(key, value)?,
            "w_entropy" => w.entropy = parse(key, value)?,
            "w_clst" => w.clst = parse(key, value)?,
            "w_sep" => w.sep = parse(key, value)?,
            "w_orth" => w.orth = parse(key, value)?,
            "w_l1" => w.l1 = parse(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Applies a `key=value` file. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.schedule;
        let w = &self.weights;
        vec![
            ("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("synth_seed", self.synth_seed.to_string()),
            ("val_fraction", float(self.val_fraction)),
            ("classes", show_opt(&self.classes, "auto")),
            ("height", show_opt(&self.height, "auto")),
            ("width", show_opt(&self.width, "auto")),
            ("input_depth", show_opt(&self.input_depth, "auto")),
            ("slots", self.slots.to_string()),
            ("prototypes", self.prototypes.to_string()),
            ("depth", self.depth.to_string()),
            ("epsilon", float(self.epsilon)),
            ("gumbel", self.gumbel.to_string()),
            ("orth", switch(self.orth).into()),
            ("focal", switch(self.focal).into()),
            ("addon", switch(self.addon).into()),
            ("seed", self.seed.to_string()),
            ("epochs", show_opt(&self.epochs, "none")),
            ("out", self.out.display().to_string()),
            ("alpha", float(s.alpha)),
            ("tau_floor", float(s.tau_floor)),
            ("tau_switch_epoch", s.tau_switch_epoch.to_string()),
            ("tau_schedule", s.tau_schedule.to_string()),
            ("warmup_epochs", s.warmup_epochs.to_string()),
            ("joint_epochs", s.joint_epochs.to_string()),
            ("early_stop_patience", s.early_stop_patience.to_string()),
            ("finetune_epochs", s.finetune_epochs.to_string()),
            ("lr_addon", float(s.lr_addon)),
            ("lr_pool", float(s.lr_pool)),
            ("lr_halving_every", s.lr_halving_every.to_string()),
            ("weight_decay", float(s.weight_decay)),
            ("lr_finetune", float(s.lr_finetune)),
            ("beta1", float(s.beta1)),
            ("beta2", float(s.beta2)),
            ("batch_size", s.batch_size.to_string()),
            ("addon_in_warmup", switch(s.addon_in_warmup).into()),
            ("w_entropy", float(w.entropy)),
            ("w_clst", float(w.clst)),
            ("w_sep", float(w.sep)),
            ("w_orth", float(w.orth)),
            ("w_l1", float(w.l1)),
        ]
    }

    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Fills the data-dependent fields, rejecting explicit values that disagree.
    pub fn resolve_dims(&mut self, classes: usize, dims: (usize, usize, usize)) -> Result<(), CliError> {
        let (h, w, d) = dims;
        for (name, slot, actual) in [
            ("height", &mut self.height, h),
            ("width", &mut self.width, w),
            ("input_depth", &mut self.input_depth, d),
        ] {
            match *slot {
                Some(v) if v != actual => {
                    return Err(CliError::Data(format!("{name} is {v} in the config but {actual} in the dataset")));
                }
                _ => *slot = Some(actual),
            }
        }
        match self.classes {
            Some(c) if c < classes => Err(CliError::Data(format!(
                "config has {c} classes but the dataset has labels up to {}",
                classes - 1
            ))),
            Some(_) => Ok(()),
            None => {
                self.classes = Some(classes);
                Ok(())
            }
        }
    }

    /// Requires [`RunConfig::resolve_dims`] to have run.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let (Some(classes), Some(input_depth)) = (self.classes, self.input_depth) else {
            return Err(CliError::Usage("classes and input depth are unresolved".into()));
        };
        let mut model = ModelConfig::new(classes, self.slots, self.prototypes, self.depth);
        model.input_depth = input_depth;
        model.epsilon = self.epsilon;
        model.relaxation = self.gumbel;
        model.focal = self.focal;
        model.addon = self.addon;
        let mut cfg = TrainConfig::new(model);
        cfg.schedule = self.schedule.clone();
        cfg.weights = self.weights;
        if !self.orth {
            cfg.weights.orth = 0.0;
        }
        cfg.seed = self.seed;
        cfg.epoch_budget = self.epochs;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CliError::Usage(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}
