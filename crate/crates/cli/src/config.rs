//! Line-oriented run configuration: `key = value` entries under
//! `[section]` headers, UTF-8, `#` comment lines.
//!
//! Sections: `[federation]` (schedule and optimizer), `[data]` (phantom
//! geometry and directories), `[clients]` (the roster), and optional
//! `[augment]` / `[superpixel]` overrides. Unknown sections or keys are
//! configuration errors so typos cannot silently change an experiment.

use std::path::PathBuf;

use fedseg_core::datastore::{ClientSpec, ModalityStyle, PhantomConfig};
use fedseg_core::episodes::AugmentRanges;
use fedseg_core::fedsim::{FedConfig, PipelineConfig};
use fedseg_core::superpixel::SuperpixelConfig;
use fedseg_core::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub fed: FedConfig,
    /// Phantom generation seed; falls back to the federation seed.
    pub data_seed: Option<u64>,
    pub phantom: PhantomConfig,
    /// Per-client `(scan count, style)`; seeds are derived.
    pub roster: Vec<(usize, ModalityStyle)>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub augment: AugmentRanges,
    pub superpixel: SuperpixelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fed: FedConfig::default(),
            data_seed: None,
            phantom: PhantomConfig::default(),
            roster: Vec::new(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            augment: AugmentRanges::default(),
            superpixel: SuperpixelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.fed.global_seed)
    }

    /// Roster with resolved per-client generation seeds.
    pub fn client_specs(&self) -> Vec<ClientSpec> {
        let base = self.data_seed();
        self.roster
            .iter()
            .enumerate()
            .map(|(i, &(count, style))| ClientSpec {
                count,
                style,
                seed: rng::mix(&[base, 0xDA7A, i as u64]),
            })
            .collect()
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            enc: Default::default(),
            proto: Default::default(),
            superpixel: self.superpixel,
            augment: self.augment,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let n = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(stripped) = line.strip_prefix('[') {
                let Some(name) = stripped.strip_suffix(']') else {
                    return Err(Error::Config(format!("line {n}: unterminated section header")));
                };
                let name = name.trim();
                if !matches!(name, "federation" | "data" | "clients" | "augment" | "superpixel")
                {
                    return Err(Error::Config(format!("line {n}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {n}: expected `key = value`")));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value)
                .map_err(|e| Error::Config(format!("line {n}: {e}")))?;
        }
        if cfg.roster.is_empty() {
            return Err(Error::Config(
                "no clients: add a [clients] section with `roster = count:STYLE, ...`".into(),
            ));
        }
        cfg.fed.validate()?;
        cfg.validate_data()?;
        Ok(cfg)
    }

    fn validate_data(&self) -> Result<()> {
        let p = &self.phantom;
        if p.slice_range.0 == 0 || p.slice_range.0 > p.slice_range.1 {
            return Err(Error::Config(format!("bad slice range {:?}", p.slice_range)));
        }
        if p.hw == 0 || p.hw % 4 != 0 {
            return Err(Error::Config(format!("hw {} must be a positive multiple of 4", p.hw)));
        }
        if !(1..=4).contains(&p.n_organs) {
            return Err(Error::Config(format!("organs {} outside 1..=4", p.n_organs)));
        }
        for &(count, _) in &self.roster {
            if count < 5 {
                return Err(Error::Config(format!(
                    "client scan count {count} < 5: the 4:1 split plus a support scan needs at least 5 scans"
                )));
            }
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse::<T>().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match (section, key) {
            ("federation", "rounds") => self.fed.rounds = num(key, value)?,
            ("federation", "local_epochs") => self.fed.local_epochs = num(key, value)?,
            ("federation", "iteration_cap") => {
                self.fed.iteration_cap =
                    if value == "none" { None } else { Some(num(key, value)?) }
            }
            ("federation", "base_lr") => self.fed.base_lr = num(key, value)?,
            ("federation", "lr_decay") => self.fed.lr_decay = num(key, value)?,
            ("federation", "batch_size") => self.fed.batch_size = num(key, value)?,
            ("federation", "seed") => self.fed.global_seed = num(key, value)?,
            ("federation", "baseline") => self.fed.baseline_mode = num::<bool>(key, value)?,
            ("data", "dir") => self.data_dir = PathBuf::from(value),
            ("data", "out") => self.out_dir = PathBuf::from(value),
            ("data", "data_seed") => self.data_seed = Some(num(key, value)?),
            ("data", "hw") => self.phantom.hw = num(key, value)?,
            ("data", "organs") => self.phantom.n_organs = num(key, value)?,
            ("data", "slices_min") => self.phantom.slice_range.0 = num(key, value)?,
            ("data", "slices_max") => self.phantom.slice_range.1 = num(key, value)?,
            ("clients", "roster") => {
                self.roster = parse_roster(value)?;
            }
            ("augment", "rot_max_deg") => self.augment.rot_max_deg = num(key, value)?,
            ("augment", "scale_lo") => self.augment.scale_lo = num(key, value)?,
            ("augment", "scale_hi") => self.augment.scale_hi = num(key, value)?,
            ("augment", "flip_prob") => self.augment.flip_prob = num(key, value)?,
            ("augment", "elastic_prob") => self.augment.elastic_prob = num(key, value)?,
            ("augment", "gamma_lo") => self.augment.gamma_lo = num(key, value)?,
            ("augment", "gamma_hi") => self.augment.gamma_hi = num(key, value)?,
            ("augment", "noise_max") => self.augment.noise_max = num(key, value)?,
            ("superpixel", "scale_k") => self.superpixel.scale_k = num(key, value)?,
            ("superpixel", "min_size") => self.superpixel.min_size = num(key, value)?,
            ("superpixel", "sigma") => self.superpixel.sigma = num(key, value)?,
            ("superpixel", "area_min_frac") => self.superpixel.area_min_frac = num(key, value)?,
            ("superpixel", "area_max_frac") => self.superpixel.area_max_frac = num(key, value)?,
            ("", k) => return Err(format!("key {k} before any [section] header")),
            (s, k) => return Err(format!("unknown key {k} in section [{s}]")),
        }
        Ok(())
    }

    /// Canonical serialization; `parse` of the output reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let f = &self.fed;
        s.push_str("[federation]\n");
        s.push_str(&format!("rounds = {}\n", f.rounds));
        s.push_str(&format!("local_epochs = {}\n", f.local_epochs));
        match f.iteration_cap {
            Some(c) => s.push_str(&format!("iteration_cap = {c}\n")),
            None => s.push_str("iteration_cap = none\n"),
        }
        s.push_str(&format!("base_lr = {}\n", f.base_lr));
        s.push_str(&format!("lr_decay = {}\n", f.lr_decay));
        s.push_str(&format!("batch_size = {}\n", f.batch_size));
        s.push_str(&format!("seed = {}\n", f.global_seed));
        s.push_str(&format!("baseline = {}\n", f.baseline_mode));

        s.push_str("\n[data]\n");
        s.push_str(&format!("dir = {}\n", self.data_dir.display()));
        s.push_str(&format!("out = {}\n", self.out_dir.display()));
        if let Some(ds) = self.data_seed {
            s.push_str(&format!("data_seed = {ds}\n"));
        }
        s.push_str(&format!("hw = {}\n", self.phantom.hw));
        s.push_str(&format!("organs = {}\n", self.phantom.n_organs));
        s.push_str(&format!("slices_min = {}\n", self.phantom.slice_range.0));
        s.push_str(&format!("slices_max = {}\n", self.phantom.slice_range.1));

        s.push_str("\n[clients]\nroster = ");
        let roster: Vec<String> = self
            .roster
            .iter()
            .map(|&(count, style)| format!("{count}:{style}"))
            .collect();
        s.push_str(&roster.join(", "));
        s.push('\n');

        let a = &self.augment;
        s.push_str("\n[augment]\n");
        s.push_str(&format!("rot_max_deg = {}\n", a.rot_max_deg));
        s.push_str(&format!("scale_lo = {}\n", a.scale_lo));
        s.push_str(&format!("scale_hi = {}\n", a.scale_hi));
        s.push_str(&format!("flip_prob = {}\n", a.flip_prob));
        s.push_str(&format!("elastic_prob = {}\n", a.elastic_prob));
        s.push_str(&format!("gamma_lo = {}\n", a.gamma_lo));
        s.push_str(&format!("gamma_hi = {}\n", a.gamma_hi));
        s.push_str(&format!("noise_max = {}\n", a.noise_max));

        let sp = &self.superpixel;
        s.push_str("\n[superpixel]\n");
        s.push_str(&format!("scale_k = {}\n", sp.scale_k));
        s.push_str(&format!("min_size = {}\n", sp.min_size));
        s.push_str(&format!("sigma = {}\n", sp.sigma));
        s.push_str(&format!("area_min_frac = {}\n", sp.area_min_frac));
        s.push_str(&format!("area_max_frac = {}\n", sp.area_max_frac));
        s
    }
}

fn parse_roster(value: &str) -> std::result::Result<Vec<(usize, ModalityStyle)>, String> {
    let mut roster = Vec::new();
    for entry in value.split(',') {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let Some((count, style)) = entry.split_once(':') else {
            return Err(format!("roster entry {entry:?}: expected count:STYLE"));
        };
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| format!("roster entry {entry:?}: bad count"))?;
        let style = ModalityStyle::parse(style.trim()).map_err(|e| e.to_string())?;
        roster.push((count, style));
    }
    if roster.is_empty() {
        return Err("empty roster".into());
    }
    Ok(roster)
}
