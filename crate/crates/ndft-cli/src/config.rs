//! Plain-text `key = value` configuration with `[sections]`.
//!
//! Every field of the data generator, architecture, trainer, and probe is
//! addressable. Unknown sections or keys are hard errors, so a typo can
//! never silently fall back to a default. The experiment seed is *not* a
//! config key: all randomness derives from the `--seed` flag.
//!
//! ```text
//! [data]
//! image_size = 32
//! classes = 4
//!
//! [nuisance.altitude]      # declaration order defines factor order
//! levels = low,mid,high
//! effect = scale
//! jitter = 0.7
//!
//! [train]
//! mode = ndft
//! gammas = 0.01,0.01,0.01
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndft_core::nn::SgdConfig;
use ndft_core::synth::{EffectKind, NuisanceSpec, RenderStyle};
use ndft_core::{ArchConfig, DataConfig, ProbeConfig, TrainConfig, TrainMode};

use anyhow::{anyhow, bail, Result};

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let arch = ArchConfig {
            image_size: data.image_size,
            classes: data.classes,
            levels: data.level_counts(),
            ..ArchConfig::default()
        };
        ExperimentConfig { data, arch, train: TrainConfig::default(), probe: ProbeConfig::default() }
    }
}

struct Section {
    name: String,
    line: usize,
    entries: BTreeMap<String, (String, usize)>,
}

fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if stripped.is_empty() {
            continue;
        }
        if let Some(name) = stripped.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            sections.push(Section { name: name.trim().to_string(), line, entries: BTreeMap::new() });
            continue;
        }
        let (key, value) = stripped
            .split_once('=')
            .ok_or_else(|| anyhow!("line {line}: expected 'key = value', got '{stripped}'"))?;
        let section = sections
            .last_mut()
            .ok_or_else(|| anyhow!("line {line}: key '{}' appears before any [section]", key.trim()))?;
        let prev = section
            .entries
            .insert(key.trim().to_string(), (value.trim().to_string(), line));
        if prev.is_some() {
            bail!("line {line}: duplicate key '{}' in [{}]", key.trim(), section.name);
        }
    }
    Ok(sections)
}

struct Taker {
    section: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl Taker {
    fn take<T: std::str::FromStr>(&mut self, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((value, line)) = self.entries.remove(key) {
            *into = value
                .parse()
                .map_err(|e| anyhow!("line {line}: [{}] {key} = '{value}': {e}", self.section))?;
        }
        Ok(())
    }

    fn take_with<T>(&mut self, key: &str, into: &mut T, f: impl Fn(&str) -> Result<T>) -> Result<()> {
        if let Some((value, line)) = self.entries.remove(key) {
            *into = f(&value).map_err(|e| {
                anyhow!("line {line}: [{}] {key} = '{value}': {e}", self.section)
            })?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.into_iter().next() {
            bail!("line {line}: unknown key '{key}' in [{}]", self.section);
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e| anyhow!("bad list element '{p}': {e}")))
        .collect()
}

fn parse_effect(s: &str) -> Result<EffectKind> {
    match s {
        "scale" => Ok(EffectKind::Scale),
        "rotation" => Ok(EffectKind::Rotation),
        "brightness" => Ok(EffectKind::Brightness),
        other => bail!("unknown effect '{other}' (scale|rotation|brightness)"),
    }
}

fn effect_name(e: EffectKind) -> &'static str {
    match e {
        EffectKind::Scale => "scale",
        EffectKind::Rotation => "rotation",
        EffectKind::Brightness => "brightness",
    }
}

impl ExperimentConfig {
    /// Parses overrides on top of the defaults. Nuisance sections, when
    /// present, replace the default factor set in declaration order.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let sections = parse_sections(text)?;
        let mut nuisances: Vec<NuisanceSpec> = Vec::new();
        let mut saw_nuisance = false;

        for section in sections {
            let mut taker = Taker { section: section.name.clone(), entries: section.entries };
            match section.name.as_str() {
                "data" => {
                    taker.take("image_size", &mut cfg.data.image_size)?;
                    taker.take("classes", &mut cfg.data.classes)?;
                    taker.take("holdout", &mut cfg.data.holdout)?;
                    taker.take("noise", &mut cfg.data.noise)?;
                    taker.take("clutter_blobs", &mut cfg.data.clutter_blobs)?;
                    taker.take("center_jitter", &mut cfg.data.center_jitter)?;
                    taker.take("center_offset_x", &mut cfg.data.center_offset.0)?;
                    taker.take("center_offset_y", &mut cfg.data.center_offset.1)?;
                    taker.take("scale_max", &mut cfg.data.scale_range.0)?;
                    taker.take("scale_min", &mut cfg.data.scale_range.1)?;
                    taker.take_with("style", &mut cfg.data.style, |s| match s {
                        "filled" => Ok(RenderStyle::Filled),
                        "hollow" => Ok(RenderStyle::Hollow),
                        other => bail!("unknown style '{other}' (filled|hollow)"),
                    })?;
                }
                name if name.starts_with("nuisance.") => {
                    saw_nuisance = true;
                    let nname = name.trim_start_matches("nuisance.").to_string();
                    if nname.is_empty() {
                        bail!("line {}: nuisance section needs a name", section.line);
                    }
                    let mut spec = NuisanceSpec {
                        name: nname,
                        levels: Vec::new(),
                        effect: EffectKind::Scale,
                        jitter: 0.0,
                    };
                    taker.take_with("levels", &mut spec.levels, |s| {
                        Ok(s.split(',').map(|p| p.trim().to_string()).collect())
                    })?;
                    taker.take_with("effect", &mut spec.effect, parse_effect)?;
                    taker.take("jitter", &mut spec.jitter)?;
                    if spec.levels.is_empty() {
                        bail!("line {}: [{}] needs 'levels'", section.line, section.name);
                    }
                    nuisances.push(spec);
                }
                "arch" => {
                    taker.take("in_channels", &mut cfg.arch.in_channels)?;
                    taker.take_with("trunk_channels", &mut cfg.arch.trunk_channels, parse_list)?;
                    taker.take("pooled_blocks", &mut cfg.arch.pooled_blocks)?;
                    taker.take("task_channels", &mut cfg.arch.task_channels)?;
                    taker.take("nuisance_hidden", &mut cfg.arch.nuisance_hidden)?;
                    taker.take("box_head_gain", &mut cfg.arch.box_head_gain)?;
                }
                "train" => {
                    taker.take_with("mode", &mut cfg.train.mode, |s| {
                        TrainMode::parse(s).map_err(|e| anyhow!("{e}"))
                    })?;
                    taker.take_with("gammas", &mut cfg.train.gammas, parse_list)?;
                    taker.take("batch_size", &mut cfg.train.batch_size)?;
                    taker.take("iterations", &mut cfg.train.iterations)?;
                    taker.take("pretrain_task_iters", &mut cfg.train.pretrain_task_iters)?;
                    taker.take("pretrain_head_cap", &mut cfg.train.pretrain_head_cap)?;
                    taker.take("tau", &mut cfg.train.tau)?;
                    taker.take("strengthen_cap", &mut cfg.train.strengthen_cap)?;
                    taker.take("restart_period", &mut cfg.train.restart_period)?;
                    taker.take("restart_retrain_cap", &mut cfg.train.restart_retrain_cap)?;
                    taker.take("destructive_restart", &mut cfg.train.destructive_restart)?;
                    taker.take("lr", &mut cfg.train.optimizer.lr)?;
                    taker.take("momentum", &mut cfg.train.optimizer.momentum)?;
                    taker.take_with("lr_decay_at", &mut cfg.train.optimizer.lr_decay_at, |s| {
                        if s == "none" {
                            Ok(None)
                        } else {
                            Ok(Some(s.parse().map_err(|e| anyhow!("bad iteration: {e}"))?))
                        }
                    })?;
                    taker.take("lr_decay_factor", &mut cfg.train.optimizer.lr_decay_factor)?;
                    taker.take("head_lr_scale", &mut cfg.train.head_lr_scale)?;
                    taker.take("head_momentum", &mut cfg.train.head_momentum)?;
                    taker.take("eval_interval", &mut cfg.train.eval_interval)?;
                    taker.take("eval_samples", &mut cfg.train.eval_samples)?;
                    taker.take("iou_threshold", &mut cfg.train.iou_threshold)?;
                }
                "probe" => {
                    taker.take("train_n", &mut cfg.probe.train_n)?;
                    taker.take("test_n", &mut cfg.probe.test_n)?;
                    taker.take("steps", &mut cfg.probe.steps)?;
                    taker.take("batch_size", &mut cfg.probe.batch_size)?;
                    taker.take("lr", &mut cfg.probe.lr)?;
                    taker.take("momentum", &mut cfg.probe.momentum)?;
                    taker.take("hidden", &mut cfg.probe.hidden)?;
                }
                other => bail!("line {}: unknown section [{other}]", section.line),
            }
            taker.finish()?;
        }

        if saw_nuisance {
            cfg.data.specs = nuisances;
        }
        // Fields shared between generator and architecture stay in [data].
        cfg.arch.image_size = cfg.data.image_size;
        cfg.arch.classes = cfg.data.classes;
        cfg.arch.levels = cfg.data.level_counts();
        if cfg.train.gammas.len() != cfg.arch.k() {
            if cfg.train.gammas.len() == 1 {
                // A single configured γ fans out across all factors.
                cfg.train.gammas = vec![cfg.train.gammas[0]; cfg.arch.k()];
            } else if cfg.train.gammas == TrainConfig::default().gammas {
                // The default γ vector follows the configured factor count.
                cfg.train.gammas = vec![0.01; cfg.arch.k()];
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| anyhow!("{e}"))?;
        self.train.validate(self.arch.k()).map_err(|e| anyhow!("{e}"))?;
        Ok(())
    }

    /// Full resolved dump; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "image_size = {}", self.data.image_size);
        let _ = writeln!(s, "classes = {}", self.data.classes);
        let _ = writeln!(s, "holdout = {}", self.data.holdout);
        let _ = writeln!(s, "noise = {}", self.data.noise);
        let _ = writeln!(s, "clutter_blobs = {}", self.data.clutter_blobs);
        let _ = writeln!(s, "center_jitter = {}", self.data.center_jitter);
        let _ = writeln!(s, "center_offset_x = {}", self.data.center_offset.0);
        let _ = writeln!(s, "center_offset_y = {}", self.data.center_offset.1);
        let _ = writeln!(s, "scale_max = {}", self.data.scale_range.0);
        let _ = writeln!(s, "scale_min = {}", self.data.scale_range.1);
        let _ = writeln!(
            s,
            "style = {}",
            match self.data.style {
                RenderStyle::Filled => "filled",
                RenderStyle::Hollow => "hollow",
            }
        );
        for spec in &self.data.specs {
            let _ = writeln!(s, "\n[nuisance.{}]", spec.name);
            let _ = writeln!(s, "levels = {}", spec.levels.join(","));
            let _ = writeln!(s, "effect = {}", effect_name(spec.effect));
            let _ = writeln!(s, "jitter = {}", spec.jitter);
        }
        let _ = writeln!(s, "\n[arch]");
        let _ = writeln!(s, "in_channels = {}", self.arch.in_channels);
        let _ = writeln!(
            s,
            "trunk_channels = {}",
            self.arch.trunk_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "pooled_blocks = {}", self.arch.pooled_blocks);
        let _ = writeln!(s, "task_channels = {}", self.arch.task_channels);
        let _ = writeln!(s, "nuisance_hidden = {}", self.arch.nuisance_hidden);
        let _ = writeln!(s, "box_head_gain = {}", self.arch.box_head_gain);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "mode = {}", self.train.mode.as_str());
        let _ = writeln!(
            s,
            "gammas = {}",
            self.train.gammas.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "iterations = {}", self.train.iterations);
        let _ = writeln!(s, "pretrain_task_iters = {}", self.train.pretrain_task_iters);
        let _ = writeln!(s, "pretrain_head_cap = {}", self.train.pretrain_head_cap);
        let _ = writeln!(s, "tau = {}", self.train.tau);
        let _ = writeln!(s, "strengthen_cap = {}", self.train.strengthen_cap);
        let _ = writeln!(s, "restart_period = {}", self.train.restart_period);
        let _ = writeln!(s, "restart_retrain_cap = {}", self.train.restart_retrain_cap);
        let _ = writeln!(s, "destructive_restart = {}", self.train.destructive_restart);
        let _ = writeln!(s, "lr = {}", self.train.optimizer.lr);
        let _ = writeln!(s, "momentum = {}", self.train.optimizer.momentum);
        let _ = writeln!(
            s,
            "lr_decay_at = {}",
            self.train.optimizer.lr_decay_at.map(|v| v.to_string()).unwrap_or("none".into())
        );
        let _ = writeln!(s, "lr_decay_factor = {}", self.train.optimizer.lr_decay_factor);
        let _ = writeln!(s, "head_lr_scale = {}", self.train.head_lr_scale);
        let _ = writeln!(s, "head_momentum = {}", self.train.head_momentum);
        let _ = writeln!(s, "eval_interval = {}", self.train.eval_interval);
        let _ = writeln!(s, "eval_samples = {}", self.train.eval_samples);
        let _ = writeln!(s, "iou_threshold = {}", self.train.iou_threshold);
        let _ = writeln!(s, "\n[probe]");
        let _ = writeln!(s, "train_n = {}", self.probe.train_n);
        let _ = writeln!(s, "test_n = {}", self.probe.test_n);
        let _ = writeln!(s, "steps = {}", self.probe.steps);
        let _ = writeln!(s, "batch_size = {}", self.probe.batch_size);
        let _ = writeln!(s, "lr = {}", self.probe.lr);
        let _ = writeln!(s, "momentum = {}", self.probe.momentum);
        let _ = writeln!(s, "hidden = {}", self.probe.hidden);
        s
    }

    /// Loads the config file if given, else the defaults; stamps the seed.
    pub fn load(path: Option<&std::path::Path>, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow!("cannot read config {}: {e}", p.display()))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        cfg.train.seed = seed;
        cfg.probe.seed = seed;
        Ok(cfg)
    }
}

/// SGD settings are embedded in [train]; exposed for tooling that wants the
/// optimizer alone.
pub fn optimizer_of(cfg: &ExperimentConfig) -> &SgdConfig {
    &cfg.train.optimizer
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_an_error_naming_it() {
        let err = ExperimentConfig::parse("[train]\nmoed = ndft\n").unwrap_err();
        assert!(err.to_string().contains("moed"), "{err}");
        let err = ExperimentConfig::parse("[trian]\nmode = ndft\n").unwrap_err();
        assert!(err.to_string().contains("trian"), "{err}");
    }

    #[test]
    fn nuisance_sections_replace_defaults_in_order() {
        let text = "\
[nuisance.tilt]
levels = a,b
effect = rotation
jitter = 5

[nuisance.glare]
levels = x,y,z
effect = brightness
jitter = 0.02
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.data.specs.len(), 2);
        assert_eq!(cfg.data.specs[0].name, "tilt");
        assert_eq!(cfg.arch.levels, vec![2, 3]);
        assert_eq!(cfg.train.gammas.len(), 2, "single default gamma fans out");
    }

    #[test]
    fn single_gamma_fans_out() {
        let cfg = ExperimentConfig::parse("[train]\ngammas = 0.03\n").unwrap();
        assert_eq!(cfg.train.gammas, vec![0.03, 0.03, 0.03]);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ExperimentConfig::parse("# top\n\n[train]\nbatch_size = 16  # trailing\n").unwrap();
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn bad_value_reports_line_and_key() {
        let err = ExperimentConfig::parse("[train]\nbatch_size = many\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("batch_size"), "{msg}");
    }
}
