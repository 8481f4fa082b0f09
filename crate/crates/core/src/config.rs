//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones. Lists are comma separated. Recognized keys and
//! their defaults are those printed by [`RunConfig::to_text`] on
//! `RunConfig::default()`.

use serde::Serialize;
use thiserror::Error;

use crate::backbone::Level;
use crate::cross_attention::Fusion;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::ModelConfig;
use crate::roi::SelectionConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub widths: [usize; 5],
    pub global_attention: bool,
    pub cross_depth: usize,
    pub cross_scaled: bool,
    pub fusion: Fusion,
    pub weak_level: Level,
    pub roi_level: Level,
    pub selection: SelectionConfig,
    pub train: TrainConfig,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self {
            widths: m.widths,
            global_attention: m.global_attention,
            cross_depth: m.cross_depth,
            cross_scaled: m.cross_scaled,
            fusion: m.fusion,
            weak_level: m.weak_level,
            roi_level: m.roi_level,
            selection: m.selection,
            train: TrainConfig::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("cannot parse list item {:?}", s.trim())))
        .collect()
}

fn scalar<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

fn level(v: &str) -> Result<Level, String> {
    Level::from_stride(scalar(v)?).ok_or_else(|| format!("stride must be 8, 16 or 32, got {v}"))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            widths: self.widths,
            global_attention: self.global_attention,
            cross_depth: self.cross_depth,
            cross_scaled: self.cross_scaled,
            fusion: self.fusion,
            weak_level: self.weak_level,
            roi_level: self.roi_level,
            selection: self.selection.clone(),
        }
    }

    /// Applies one assignment; the error carries only the reason.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Option<String>> {
        let v = value.trim();
        let t = &mut self.train;
        let r: Result<(), String> = match key {
            "widths" => list::<usize>(v).and_then(|w| {
                <[usize; 5]>::try_from(w)
                    .map(|w| self.widths = w)
                    .map_err(|_| "need five widths".to_string())
            }),
            "global_attention" => scalar(v).map(|x| self.global_attention = x),
            "cross_depth" => scalar(v).map(|x| self.cross_depth = x),
            "cross_scaled" => scalar(v).map(|x| self.cross_scaled = x),
            "fusion" => match v {
                "max" => {
                    self.fusion = Fusion::Max;
                    Ok(())
                }
                "sum" => {
                    self.fusion = Fusion::Sum;
                    Ok(())
                }
                _ => Err(format!("expected max or sum, got {v:?}")),
            },
            "weak_stride" => level(v).map(|x| self.weak_level = x),
            "roi_stride" => level(v).map(|x| self.roi_level = x),
            "k_s" => scalar(v).map(|x| self.selection.k_s = x),
            "k_e" => scalar(v).map(|x| self.selection.k_e = x),
            "k_r" => scalar(v).map(|x| self.selection.k_r = x),
            "zeta" => list(v).map(|x| self.selection.zeta = x),
            "pool_size" => scalar(v).map(|x| self.selection.pool_size = x),
            "epochs" => scalar(v).map(|x| t.epochs = x),
            "batch_size" => scalar(v).map(|x| t.batch_size = x),
            "lr0" => scalar(v).map(|x| t.lr0 = x),
            "lr_milestones" => list(v).map(|x| t.lr_milestones = x),
            "lr_decay" => scalar(v).map(|x| t.lr_decay = x),
            "momentum" => scalar(v).map(|x| t.momentum = x),
            "weight_decay" => scalar(v).map(|x| t.weight_decay = x),
            "grad_clip" => scalar(v).map(|x| t.grad_clip = x),
            "seed" => scalar(v).map(|x| t.seed = x),
            "loss_global" => scalar(v).map(|x| t.switches.global = x),
            "loss_weak" => scalar(v).map(|x| t.switches.weak = x),
            "loss_local" => scalar(v).map(|x| t.switches.local = x),
            "crop_scales" => list(v).map(|x| t.crop_scales = x),
            "augment" => scalar(v).map(|x| t.augment = x),
            "side" => scalar(v).map(|x| t.side = x),
            "threshold" => scalar(v).map(|x| self.threshold = x),
            _ => return Err(None),
        };
        r.map_err(Some)
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let Some((key, value)) = s.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: s.to_string(),
                });
            };
            let key = key.trim();
            self.set(key, value).map_err(|e| match e {
                None => ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                },
                Some(msg) => ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    msg,
                },
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// The effective configuration in the input syntax.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let fusion = match self.fusion {
            Fusion::Max => "max",
            Fusion::Sum => "sum",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("widths", join(&self.widths)),
            ("global_attention", self.global_attention.to_string()),
            ("cross_depth", self.cross_depth.to_string()),
            ("cross_scaled", self.cross_scaled.to_string()),
            ("fusion", fusion.to_string()),
            ("weak_stride", self.weak_level.stride().to_string()),
            ("roi_stride", self.roi_level.stride().to_string()),
            ("k_s", self.selection.k_s.to_string()),
            ("k_e", self.selection.k_e.to_string()),
            ("k_r", self.selection.k_r.to_string()),
            ("zeta", join(&self.selection.zeta)),
            ("pool_size", self.selection.pool_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr0", t.lr0.to_string()),
            ("lr_milestones", join(&t.lr_milestones)),
            ("lr_decay", t.lr_decay.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("seed", t.seed.to_string()),
            ("loss_global", t.switches.global.to_string()),
            ("loss_weak", t.switches.weak.to_string()),
            ("loss_local", t.switches.local.to_string()),
            ("crop_scales", join(&t.crop_scales)),
            ("augment", t.augment.to_string()),
            ("side", t.side.to_string()),
            ("threshold", self.threshold.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let mut d = c.clone();
        d.apply_text("fusion = sum\nzeta = 0.25, 0.75\nlr_milestones =\nweak_stride = 16").unwrap();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn comments_and_last_writer() {
        let c = RunConfig::parse("# header\n\nepochs = 3\n  epochs=7  \nk_s = 2").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.selection.k_s, 2);
    }

    #[test]
    fn errors_report_key_and_line() {
        assert_eq!(
            RunConfig::parse("epochs = 3\nepoch = 4").unwrap_err(),
            ConfigError::UnknownKey {
                line: 2,
                key: "epoch".into()
            }
        );
        match RunConfig::parse("\n\nlr0 = fast").unwrap_err() {
            ConfigError::BadValue { line, key, .. } => assert_eq!((line, key.as_str()), (3, "lr0")),
            e => panic!("{e:?}"),
        }
        assert!(matches!(RunConfig::parse("widths = 1,2,3"), Err(ConfigError::BadValue { line: 1, .. })));
        assert!(matches!(RunConfig::parse("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(RunConfig::parse("roi_stride = 12").is_err());
    }
}
