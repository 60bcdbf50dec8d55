//! Run configuration as a flat text file of `key = value` lines.
//!
//! Blank lines and lines starting with `#` are skipped. Every key must be one
//! of [`RunConfig::KEYS`]; lists are comma separated. [`RunConfig::emit`]
//! writes every key with its effective value, so the output parses back to
//! the same configuration.

use std::fmt::Display;
use std::str::FromStr;

use busseg_core::dataset::SceneConfig;
use busseg_core::trainer::{Mode, TrainerConfig};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub source_count: usize,
    pub target_count: usize,
    pub data_seed: u64,
    pub trainer: TrainerConfig,
    /// Where `generate` writes and `train` reads the benchmark.
    pub archive_dir: String,
    /// Root for training and ablation outputs.
    pub out_dir: String,
    pub seeds: Vec<u64>,
    /// Training log row interval, in steps.
    pub log_every: usize,
    /// Worker threads for `ablate`; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            source_count: 200,
            target_count: 200,
            data_seed: 0,
            trainer: TrainerConfig::default(),
            archive_dir: "benchmark".into(),
            out_dir: "runs".into(),
            seeds: vec![0, 1, 2],
            log_every: 10,
            threads: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "scene.height",
        "scene.width",
        "scene.min_objects",
        "scene.max_objects",
        "scene.min_object_size",
        "scene.max_object_size",
        "scene.private_scene_rate",
        "scene.private_ids",
        "scene.allow_private_stuff",
        "scene.source.hue_rotation_deg",
        "scene.source.brightness",
        "scene.source.noise_sigma",
        "scene.target.hue_rotation_deg",
        "scene.target.brightness",
        "scene.target.noise_sigma",
        "data.source_count",
        "data.target_count",
        "data.seed",
        "trainer.mode",
        "trainer.tau_p",
        "trainer.tau_t",
        "trainer.alpha",
        "trainer.learning_rate",
        "trainer.momentum",
        "trainer.steps",
        "trainer.batch_size",
        "trainer.seed",
        "trainer.features",
        "trainer.unknown_heads",
        "trainer.tau_inf",
        "trainer.grad_clip",
        "trainer.weight_decay",
        "mix.resize_scale",
        "decon.temperature",
        "decon.weight",
        "morph.kernel_size",
        "morph.iterations",
        "morph.crop_size",
        "morph.max_crop_retries",
        "run.archive_dir",
        "run.out_dir",
        "run.seeds",
        "run.log_every",
        "run.threads",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let s = &mut self.scene;
        let t = &mut self.trainer;
        match key {
            "scene.height" => s.height = parse(key, v)?,
            "scene.width" => s.width = parse(key, v)?,
            "scene.min_objects" => s.min_objects = parse(key, v)?,
            "scene.max_objects" => s.max_objects = parse(key, v)?,
            "scene.min_object_size" => s.min_object_size = parse(key, v)?,
            "scene.max_object_size" => s.max_object_size = parse(key, v)?,
            "scene.private_scene_rate" => s.private_scene_rate = parse(key, v)?,
            "scene.private_ids" => s.private_ids = parse_list(key, v)?,
            "scene.allow_private_stuff" => s.allow_private_stuff = parse(key, v)?,
            "scene.source.hue_rotation_deg" => s.source.hue_rotation_deg = parse(key, v)?,
            "scene.source.brightness" => s.source.brightness = parse(key, v)?,
            "scene.source.noise_sigma" => s.source.noise_sigma = parse(key, v)?,
            "scene.target.hue_rotation_deg" => s.target.hue_rotation_deg = parse(key, v)?,
            "scene.target.brightness" => s.target.brightness = parse(key, v)?,
            "scene.target.noise_sigma" => s.target.noise_sigma = parse(key, v)?,
            "data.source_count" => self.source_count = parse(key, v)?,
            "data.target_count" => self.target_count = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "trainer.mode" => {
                t.mode = Mode::from_name(v).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    reason: format!(
                        "expected one of {}",
                        Mode::ALL.map(Mode::name).join(", ")
                    ),
                })?
            }
            "trainer.tau_p" => t.tau_p = parse(key, v)?,
            "trainer.tau_t" => t.tau_t = parse(key, v)?,
            "trainer.alpha" => t.alpha = parse(key, v)?,
            "trainer.learning_rate" => t.learning_rate = parse(key, v)?,
            "trainer.momentum" => t.momentum = parse(key, v)?,
            "trainer.steps" => t.steps = parse(key, v)?,
            "trainer.batch_size" => t.batch_size = parse(key, v)?,
            "trainer.seed" => t.seed = parse(key, v)?,
            "trainer.features" => t.features = parse(key, v)?,
            "trainer.unknown_heads" => t.unknown_heads = parse(key, v)?,
            "trainer.tau_inf" => t.tau_inf = parse(key, v)?,
            "trainer.grad_clip" => t.grad_clip = parse(key, v)?,
            "trainer.weight_decay" => t.weight_decay = parse(key, v)?,
            "mix.resize_scale" => t.resize_scale = parse(key, v)?,
            "decon.temperature" => t.decon.temperature = parse(key, v)?,
            "decon.weight" => t.decon.weight = parse(key, v)?,
            "morph.kernel_size" => t.decon.morph.kernel_size = parse(key, v)?,
            "morph.iterations" => t.decon.morph.iterations = parse(key, v)?,
            "morph.crop_size" => t.decon.morph.crop_size = parse(key, v)?,
            "morph.max_crop_retries" => t.decon.morph.max_crop_retries = parse(key, v)?,
            "run.archive_dir" => self.archive_dir = v.into(),
            "run.out_dir" => self.out_dir = v.into(),
            "run.seeds" => self.seeds = parse_list(key, v)?,
            "run.log_every" => self.log_every = parse(key, v)?,
            "run.threads" => self.threads = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Every key with its current value, in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.scene;
        let t = &self.trainer;
        let m = &t.decon.morph;
        let values = [
            s.height.to_string(),
            s.width.to_string(),
            s.min_objects.to_string(),
            s.max_objects.to_string(),
            s.min_object_size.to_string(),
            s.max_object_size.to_string(),
            s.private_scene_rate.to_string(),
            join(&s.private_ids),
            s.allow_private_stuff.to_string(),
            s.source.hue_rotation_deg.to_string(),
            s.source.brightness.to_string(),
            s.source.noise_sigma.to_string(),
            s.target.hue_rotation_deg.to_string(),
            s.target.brightness.to_string(),
            s.target.noise_sigma.to_string(),
            self.source_count.to_string(),
            self.target_count.to_string(),
            self.data_seed.to_string(),
            t.mode.name().to_string(),
            t.tau_p.to_string(),
            t.tau_t.to_string(),
            t.alpha.to_string(),
            t.learning_rate.to_string(),
            t.momentum.to_string(),
            t.steps.to_string(),
            t.batch_size.to_string(),
            t.seed.to_string(),
            t.features.to_string(),
            t.unknown_heads.to_string(),
            t.tau_inf.to_string(),
            t.grad_clip.to_string(),
            t.weight_decay.to_string(),
            t.resize_scale.to_string(),
            t.decon.temperature.to_string(),
            t.decon.weight.to_string(),
            m.kernel_size.to_string(),
            m.iterations.to_string(),
            m.crop_size.to_string(),
            m.max_crop_retries.to_string(),
            self.archive_dir.clone(),
            self.out_dir.clone(),
            join(&self.seeds),
            self.log_every.to_string(),
            self.threads.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    /// The effective configuration in the file format.
    pub fn emit(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            cfg.set(key, value)?;
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate(key.into()));
            }
        }
        Ok(cfg)
    }

    /// Applies one `key=value` command-line override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(spec.into()))?;
        self.set(key.trim(), value)
    }

    /// Range checks for everything the run will use.
    pub fn validate(&self) -> busseg_core::Result<()> {
        self.scene.validate()?;
        self.trainer.validate()?;
        if self.source_count == 0 || self.target_count == 0 {
            return Err(busseg_core::Error::InvalidParameter {
                name: "data counts",
                reason: "each split needs at least one scene".into(),
            });
        }
        if self.trainer.decon.morph.crop_size > self.scene.height.min(self.scene.width) {
            return Err(busseg_core::Error::InvalidParameter {
                name: "morph.crop_size",
                reason: "must fit inside the scene".into(),
            });
        }
        if self.log_every == 0 {
            return Err(busseg_core::Error::InvalidParameter {
                name: "run.log_every",
                reason: "must be at least 1".into(),
            });
        }
        if self.seeds.is_empty() {
            return Err(busseg_core::Error::InvalidParameter {
                name: "run.seeds",
                reason: "need at least one seed".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emitted_defaults_parse_back_identically() {
        let cfg = RunConfig::default();
        let text = cfg.emit();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable_from_its_emitted_value() {
        let cfg = RunConfig::default();
        for (key, value) in cfg.entries() {
            let mut c = RunConfig::default();
            c.set(key, &value).unwrap_or_else(|e| panic!("{key}: {e}"));
            assert_eq!(c, cfg, "{key}");
        }
    }

    #[test]
    fn non_default_values_round_trip() {
        let text = "\
# tiny run
scene.height = 24
scene.private_ids = 3,4
scene.allow_private_stuff = true
trainer.mode = head_expansion_remix
trainer.alpha = 0.999
trainer.learning_rate = 1e-3
decon.temperature = 0.07
run.seeds = 5, 9
run.out_dir = /tmp/some where
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.scene.height, 24);
        assert_eq!(cfg.scene.private_ids, vec![3, 4]);
        assert_eq!(cfg.trainer.mode, Mode::HeadExpansionRemix);
        assert_eq!(cfg.trainer.learning_rate, 1e-3);
        assert_eq!(cfg.seeds, vec![5, 9]);
        assert_eq!(cfg.out_dir, "/tmp/some where");
        assert_eq!(RunConfig::parse(&cfg.emit()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_duplicates_and_bad_values() {
        assert_eq!(
            RunConfig::parse("trainer.tau = 0.5"),
            Err(ConfigError::UnknownKey("trainer.tau".into()))
        );
        assert_eq!(
            RunConfig::parse("data.seed = 1\ndata.seed = 2"),
            Err(ConfigError::Duplicate("data.seed".into()))
        );
        assert_eq!(RunConfig::parse("\nnot a pair"), Err(ConfigError::Syntax { line: 2 }));
        assert!(matches!(
            RunConfig::parse("trainer.steps = -3"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            RunConfig::parse("trainer.mode = best"),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let mut cfg = RunConfig::parse("trainer.steps = 7").unwrap();
        cfg.apply_override("trainer.steps=9").unwrap();
        assert_eq!(cfg.trainer.steps, 9);
        assert_eq!(
            cfg.apply_override("trainer.steps"),
            Err(ConfigError::Override("trainer.steps".into()))
        );
        assert!(cfg.apply_override("nope=1").is_err());
    }

    #[test]
    fn validation_catches_out_of_range_thresholds() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            "trainer.tau_p=1.5",
            "trainer.unknown_heads=2",
            "scene.private_ids=0,1,2,3,4",
            "morph.crop_size=65",
        ] {
            let mut cfg = RunConfig::default();
            cfg.apply_override(bad).unwrap();
            assert!(cfg.validate().is_err(), "{bad}");
        }
    }
}
