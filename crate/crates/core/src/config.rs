//! Run configuration as flat, dot-namespaced JSON keys such as
//! `"loss.lambda"` or `"gen.height"`. Missing keys take their defaults,
//! unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nets::{NetConfig, PoolConfig};
use crate::objective::LossConfig;
use crate::synthdata::GenConfig;
use crate::trainer::{LrDecay, TrainConfig};

/// Which objective terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Foreground cross-entropy only: `λ = 0`, no size barrier.
    FgOnly,
    /// Adds the background regularizer.
    FgBg,
    /// Adds the background regularizer and the size barrier.
    #[default]
    FgBgAsc,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::FgOnly, Ablation::FgBg, Ablation::FgBgAsc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::FgOnly => "fg_only",
            Ablation::FgBg => "fg_bg",
            Ablation::FgBgAsc => "fg_bg_asc",
        }
    }

    /// Switches terms off in `loss` according to the ablation.
    pub fn apply(&self, loss: &LossConfig) -> LossConfig {
        let mut l = *loss;
        match self {
            Ablation::FgOnly => {
                l.lambda = 0.0;
                l.size_barrier = false;
            }
            Ablation::FgBg => l.size_barrier = false,
            Ablation::FgBgAsc => l.size_barrier = true,
        }
        l
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (fg_only|fg_bg|fg_bg_asc)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    seed: u64,
    lr_decay: Vec<LrDecay>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossSection {
    lambda: f64,
    t_init: f64,
    t_factor: f64,
    t_max: f64,
    mode: crate::prob::RegMode,
    omega: f64,
    sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    ablation: Ablation,
    data_dir: PathBuf,
    out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sections {
    gen: GenConfig,
    train: TrainSection,
    loss: LossSection,
    pool: PoolConfig,
    net: NetConfig,
    run: RunSection,
}

/// Everything a command needs: dataset recipe, training and loss settings,
/// ablation and paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    /// Training settings as configured; see [`RunConfig::effective_train`].
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(p) = parts.next() {
        let obj = cur.as_object_mut().expect("objects along known paths");
        if parts.peek().is_none() {
            obj.insert(p.to_string(), v);
            return;
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

impl RunConfig {
    fn sections(&self) -> Sections {
        let t = &self.train;
        let l = &t.loss;
        Sections {
            gen: self.gen.clone(),
            train: TrainSection {
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr: t.lr,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                seed: t.seed,
                lr_decay: t.lr_decay.clone(),
            },
            loss: LossSection {
                lambda: l.lambda,
                t_init: l.t_init,
                t_factor: l.t_factor,
                t_max: l.t_max,
                mode: l.mode,
                omega: l.omega,
                sigma: l.sigma,
            },
            pool: t.pool,
            net: t.net.clone(),
            run: RunSection {
                ablation: self.ablation,
                data_dir: self.data_dir.clone(),
                out_dir: self.out_dir.clone(),
            },
        }
    }

    fn from_sections(s: Sections) -> RunConfig {
        RunConfig {
            gen: s.gen,
            train: TrainConfig {
                epochs: s.train.epochs,
                batch_size: s.train.batch_size,
                lr: s.train.lr,
                momentum: s.train.momentum,
                weight_decay: s.train.weight_decay,
                seed: s.train.seed,
                lr_decay: s.train.lr_decay,
                loss: LossConfig {
                    lambda: s.loss.lambda,
                    t_init: s.loss.t_init,
                    t_factor: s.loss.t_factor,
                    t_max: s.loss.t_max,
                    mode: s.loss.mode,
                    omega: s.loss.omega,
                    sigma: s.loss.sigma,
                    size_barrier: true,
                },
                pool: s.pool,
                net: s.net,
            },
            ablation: s.run.ablation,
            data_dir: s.run.data_dir,
            out_dir: s.run.out_dir,
        }
    }

    /// Flat key → value map of every setting.
    pub fn to_flat(&self) -> Map<String, Value> {
        let v = serde_json::to_value(self.sections()).expect("plain struct");
        let mut out = Map::new();
        flatten("", &v, &mut out);
        out
    }

    /// Pretty JSON of the flat map, keys sorted.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("plain map")
    }

    /// Overlays flat `overrides` on the defaults.
    pub fn from_flat(overrides: &Map<String, Value>) -> Result<RunConfig> {
        let defaults = RunConfig::default();
        let known = defaults.to_flat();
        let mut root = serde_json::to_value(defaults.sections()).expect("plain struct");
        for (k, v) in overrides {
            if !known.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            set_path(&mut root, k, v.clone());
        }
        let sections: Sections = serde_json::from_value(root).map_err(|e| {
            // serde names the field but not the section; report the caller's keys
            let keys: Vec<&str> = overrides.keys().map(String::as_str).collect();
            Error::Config(format!("invalid value among keys {keys:?}: {e}"))
        })?;
        let cfg = RunConfig::from_sections(sections);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let v: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        match v {
            Value::Object(m) => {
                // check each key alone first so the error names the culprit
                let known = RunConfig::default().to_flat();
                for (k, val) in &m {
                    if !known.contains_key(k) {
                        return Err(Error::Config(format!("unknown key `{k}`")));
                    }
                    let mut one = Map::new();
                    one.insert(k.clone(), val.clone());
                    RunConfig::from_flat_unchecked(&one)
                        .map_err(|e| Error::Config(format!("key `{k}`: {e}")))?;
                }
                RunConfig::from_flat(&m)
            }
            _ => Err(Error::Config("config must be a JSON object of flat keys".into())),
        }
    }

    fn from_flat_unchecked(one: &Map<String, Value>) -> std::result::Result<(), String> {
        let mut root = serde_json::to_value(RunConfig::default().sections()).expect("plain struct");
        for (k, v) in one {
            set_path(&mut root, k, v.clone());
        }
        serde_json::from_value::<Sections>(root)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        if self.train.net.classes != self.gen.classes {
            return Err(Error::Config(format!(
                "net.classes ({}) differs from gen.classes ({})",
                self.train.net.classes, self.gen.classes
            )));
        }
        Ok(())
    }

    /// Training settings with the ablation applied to the loss terms.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            loss: self.ablation.apply(&self.train.loss),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::RegMode;

    #[test]
    fn defaults_round_trip_through_flat_json() {
        let d = RunConfig::default();
        let text = d.to_json();
        assert!(text.contains("\"loss.lambda\": 1e-7"));
        assert!(text.contains("\"run.ablation\": \"fg_bg_asc\""));
        assert_eq!(RunConfig::from_json(&text).unwrap(), d);
        assert_eq!(RunConfig::from_json("{}").unwrap(), d);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_json(
            r#"{"loss.mode": "sem", "train.epochs": 3, "gen.blob_count": [1, 2], "run.ablation": "fg_only"}"#,
        )
        .unwrap();
        assert_eq!(c.train.loss.mode, RegMode::Sem);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.gen.blob_count, (1, 2));
        let eff = c.effective_train();
        assert_eq!(eff.loss.lambda, 0.0);
        assert!(!eff.loss.size_barrier);
        // the configured λ is still what is printed
        assert_eq!(c.to_flat()["loss.lambda"], serde_json::json!(1e-7));
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_json(r#"{"loss.lamda": 1}"#).unwrap_err().to_string();
        assert!(e.contains("loss.lamda"), "{e}");
        let e = RunConfig::from_json(r#"{"train.epochs": "many"}"#).unwrap_err().to_string();
        assert!(e.contains("train.epochs"), "{e}");
        let e = RunConfig::from_json(r#"{"loss.lambda": -1}"#).unwrap_err().to_string();
        assert!(e.contains("loss.lambda"), "{e}");
        assert!(RunConfig::from_json("[1]").is_err());
        assert!(RunConfig::from_json("{").is_err());
    }

    #[test]
    fn ablation_switches() {
        let base = LossConfig::default();
        let fg = Ablation::FgOnly.apply(&base);
        assert_eq!((fg.lambda, fg.size_barrier), (0.0, false));
        let bg = Ablation::FgBg.apply(&base);
        assert_eq!((bg.lambda, bg.size_barrier), (base.lambda, false));
        let asc = Ablation::FgBgAsc.apply(&base);
        assert_eq!((asc.lambda, asc.size_barrier), (base.lambda, true));
        assert_eq!("fg_bg".parse::<Ablation>().unwrap(), Ablation::FgBg);
        assert!("fg".parse::<Ablation>().is_err());
    }
}
