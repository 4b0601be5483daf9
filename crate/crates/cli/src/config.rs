use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use airseg_core::medsegnet::ArchConfig;
use airseg_core::phantom::PhantomSpec;
use airseg_core::prep::{HU_MAX, HU_MIN};
use airseg_core::train::TrainConfig;

/// Every tunable of the pipeline, one flat JSON object with snake_case keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,

    pub clip_min: f32,
    pub clip_max: f32,
    pub val_fraction: f64,
    pub threshold: f32,
    pub connectivity: u32,
    pub bd_min_fraction: f64,

    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,

    pub backbone_widths: [usize; 3],
    pub bifpn_width: usize,
    pub bifpn_repeats: usize,
    pub head_width: usize,
    pub fusion_eps: f64,

    /// Phantom geometry; phantom `i` of a batch uses seed `seed + i`.
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = ArchConfig::default();
        Self {
            lr0: t.lr0,
            lr_decay: t.lr_decay,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            crop_size: t.crop_size,
            seed: t.seed,
            clip_min: HU_MIN,
            clip_max: HU_MAX,
            val_fraction: 0.2,
            threshold: 0.5,
            connectivity: 26,
            bd_min_fraction: 0.0,
            data_dir: None,
            out_dir: None,
            backbone_widths: a.backbone_widths,
            bifpn_width: a.bifpn_width,
            bifpn_repeats: a.bifpn_repeats,
            head_width: a.head_width,
            fusion_eps: a.fusion_eps,
            phantom: PhantomSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            lr_decay: self.lr_decay,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            crop_size: self.crop_size,
            seed: self.seed,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            backbone_widths: self.backbone_widths,
            bifpn_width: self.bifpn_width,
            bifpn_repeats: self.bifpn_repeats,
            head_width: self.head_width,
            fusion_eps: self.fusion_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        self.arch().validate()?;
        if !(self.clip_min < self.clip_max) {
            bail!("clip_min {} must be below clip_max {}", self.clip_min, self.clip_max);
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            bail!("val_fraction must be in (0, 1), got {}", self.val_fraction);
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!("threshold must be in [0, 1], got {}", self.threshold);
        }
        if self.connectivity != 6 && self.connectivity != 26 {
            bail!("connectivity must be 6 or 26, got {}", self.connectivity);
        }
        if !(0.0..=1.0).contains(&self.bd_min_fraction) {
            bail!("bd_min_fraction must be in [0, 1], got {}", self.bd_min_fraction);
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir.as_deref().context("no output directory: pass --out-dir or set out_dir")
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir.as_deref().context("no data directory: pass --data-dir or set data_dir")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, then the JSON file, then explicit flags.
pub fn resolve(file: Option<&Path>, flags: Map<String, Value>) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !parsed.is_object() {
            bail!("config {} must hold a JSON object", path.display());
        }
        // Reject unknown keys before they are hidden by the merge.
        serde_json::from_value::<RunConfig>(parsed.clone())
            .with_context(|| format!("invalid config {}", path.display()))?;
        merge(&mut value, parsed);
    }
    merge(&mut value, Value::Object(flags));
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    cfg.phantom.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"epochs": 3, "threshold": 0.7, "phantom": {"depth": 2}}"#).unwrap();
        let mut flags = Map::new();
        flags.insert("epochs".into(), json!(5));
        let cfg = resolve(Some(&p), flags).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.threshold, 0.7);
        assert_eq!(cfg.phantom.depth, 2);
        assert_eq!(cfg.phantom.root_radius, PhantomSpec::default().root_radius);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"learning_rate": 1}"#).unwrap();
        assert!(resolve(Some(&p), Map::new()).is_err());
        std::fs::write(&p, r#"{"phantom": {"depthh": 1}}"#).unwrap();
        assert!(resolve(Some(&p), Map::new()).is_err());
    }

    #[test]
    fn range_checks() {
        let mut flags = Map::new();
        flags.insert("connectivity".into(), json!(18));
        assert!(resolve(None, flags).is_err());
        let mut flags = Map::new();
        flags.insert("clip_min".into(), json!(700.0));
        assert!(resolve(None, flags).is_err());
    }
}
