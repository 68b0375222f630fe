//! The run configuration file: one TOML document drives every subcommand.
//!
//! ```toml
//! data_dir = "data"          # relative to --out
//!
//! [synth]
//! image_size = 64
//! train = 2000
//!
//! [train]
//! batch_size = 16
//! [train.model]
//! width = 0.25
//!
//! [judge]
//! epochs = 6
//!
//! [serve]
//! bind = "127.0.0.1:8080"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stgan_core::data::synth::SynthSpec;
use stgan_core::eval::JudgeConfig;
use stgan_core::train::TrainConfig;
use stgan_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    /// Largest accepted request body in bytes.
    pub max_body_bytes: usize,
    /// Largest accepted intensity magnitude.
    pub max_intensity: f32,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            max_body_bytes: 4 << 20,
            max_intensity: 2.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (manifest layout); relative paths resolve against `--out`.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub judge: JudgeConfig,
    pub serve: ServeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.synth.image_size != self.train.model.image_size {
            log::warn!(
                "synth.image_size {} differs from train.model.image_size {}",
                self.synth.image_size,
                self.train.model.image_size
            );
        }
        Ok(())
    }

    /// Applies the global `--seed` override to every seeded component.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.train.seed = s;
            self.judge.seed = s;
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_dir(&self, out: &Path) -> PathBuf {
        resolve(out, self.data_dir.as_deref().unwrap_or(Path::new("data")))
    }
}

/// `path` if absolute, else `out/path`.
pub fn resolve(out: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = RunConfig::from_toml("[trian]\nepochs = 1").unwrap_err();
        assert_eq!(e.kind(), "config");
        assert!(!e.to_string().contains('\n'));
    }

    #[test]
    fn seed_override_reaches_every_component() {
        let c = RunConfig::default().with_seed(Some(9));
        assert_eq!((c.synth.seed, c.train.seed, c.judge.seed), (9, 9, 9));
    }

    #[test]
    fn relative_paths_resolve_against_out() {
        let c = RunConfig::default();
        assert_eq!(c.data_dir(Path::new("/o")), Path::new("/o/data"));
        assert_eq!(resolve(Path::new("/o"), Path::new("/abs")), Path::new("/abs"));
    }
}
