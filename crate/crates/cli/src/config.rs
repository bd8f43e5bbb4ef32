//! Flat `section.key = value` run configuration.
//!
//! Values start from the desk-scale presets, then the config file, then flags.
//! Blank lines and `#` comments are ignored. The resolved configuration renders
//! back to the same format, so a run directory's `config.cfg` reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adwpf::baseline::DfConfig;
use adwpf::presets;
use adwpf::synth::{GapRange, SynthConfig};
use adwpf::train::{AblationFlags, TrainConfig};
use adwpf::types::{AttentionSource, ModelConfig};
use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let k = k.trim();
            if k.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Adwpf,
    Df,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub split_ratios: [f64; 3],
    pub synth: SynthConfig,
    pub kind: ModelKind,
    pub train: TrainConfig,
    pub df: DfConfig,
}

/// Consumes keys from a [`KeyValues`], remembering which were used.
struct Reader<'a> {
    kv: &'a KeyValues,
    used: Vec<&'a str>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, key: &str) -> Option<&'a str> {
        let (k, v) = self.kv.entries.get_key_value(key)?;
        self.used.push(k.as_str());
        Some(v.as_str())
    }

    fn scalar<T: FromStr>(&mut self, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(key) {
            *into = v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str, into: &mut Vec<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(key) {
            *into = parse_list(key, v)?;
        }
        Ok(())
    }

    fn pair(&mut self, key: &str, into: &mut (f64, f64)) -> Result<()> {
        if let Some(v) = self.raw(key) {
            let xs: Vec<f64> = parse_list(key, v)?;
            if xs.len() != 2 {
                bail!("{key}: expected two comma-separated values");
            }
            *into = (xs[0], xs[1]);
        }
        Ok(())
    }

    fn path(&mut self, key: &str, into: &mut Option<PathBuf>) {
        if let Some(v) = self.raw(key) {
            *into = if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        }
    }
}

pub fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| anyhow!("{key}: cannot parse {s:?}: {e}")))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn defaults() -> Self {
        let train = presets::desk_train(0);
        Self {
            seed: 0,
            data: None,
            train_data: None,
            val_data: None,
            test_data: None,
            split_ratios: presets::DESK_SPLIT,
            synth: presets::desk_synth(),
            kind: ModelKind::Adwpf,
            df: DfConfig::standard(train.model.seq_len, train.model.class_count),
            train,
        }
    }

    pub fn resolve(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::defaults();
        let mut r = Reader { kv, used: vec![] };
        if let Some(p) = r.raw("preset") {
            match p {
                "desk" => {}
                "full" => {
                    c.train = presets::full_scale_train(c.train.model.class_count, 0);
                    c.synth.seq_len = c.train.model.seq_len;
                    c.df.seq_len = c.train.model.seq_len;
                }
                other => bail!("preset: unknown value {other:?} (desk or full)"),
            }
        }
        r.scalar("seed", &mut c.seed)?;

        r.path("data.path", &mut c.data);
        r.path("data.train", &mut c.train_data);
        r.path("data.val", &mut c.val_data);
        r.path("data.test", &mut c.test_data);
        if let Some(v) = r.raw("split.ratios") {
            let xs: Vec<f64> = parse_list("split.ratios", v)?;
            c.split_ratios = xs.try_into().map_err(|_| anyhow!("split.ratios: expected three values"))?;
        }

        let s = &mut c.synth;
        r.scalar("synth.classes", &mut s.class_count)?;
        r.scalar("synth.samples", &mut s.samples)?;
        r.scalar("synth.seq_len", &mut s.seq_len)?;
        r.list("synth.tabs_dist", &mut s.tab_distribution)?;
        r.scalar("synth.open_world", &mut s.open_world)?;
        r.scalar("synth.site_size", &mut s.profile.site_size)?;
        r.scalar("synth.jitter", &mut s.profile.jitter)?;
        if let Some(v) = r.raw("synth.gap") {
            let xs: Vec<f64> = parse_list("synth.gap", v)?;
            if xs.len() != 2 {
                bail!("synth.gap: expected lo,hi as fractions of the previous page");
            }
            s.gap_range = GapRange::Fraction { lo: xs[0], hi: xs[1] };
        }

        if let Some(v) = r.raw("model.kind") {
            c.kind = match v {
                "adwpf" => ModelKind::Adwpf,
                "df" => ModelKind::Df,
                other => bail!("model.kind: unknown value {other:?} (adwpf or df)"),
            };
        }
        let m = &mut c.train.model;
        r.scalar("model.seq_len", &mut m.seq_len)?;
        r.scalar("model.class_count", &mut m.class_count)?;
        r.list("model.filters", &mut m.filters)?;
        r.list("model.kernel_sizes", &mut m.kernel_sizes)?;
        r.list("model.pool_kernels", &mut m.pool_kernels)?;
        r.list("model.pool_strides", &mut m.pool_strides)?;
        r.scalar("model.attn_map_count", &mut m.attn_map_count)?;
        if let Some(v) = r.raw("model.attention_source") {
            m.attention_source = match v {
                "head" => AttentionSource::Head,
                "raw_channels" => AttentionSource::RawChannels,
                other => bail!("model.attention_source: unknown value {other:?} (head or raw_channels)"),
            };
        }
        r.scalar("model.encoder_layers", &mut m.encoder_layers)?;
        r.scalar("model.heads", &mut m.heads)?;
        r.scalar("model.ffn_multiplier", &mut m.ffn_multiplier)?;
        r.scalar("model.lambda", &mut m.lambda)?;
        r.scalar("model.leaky_slope", &mut m.leaky_slope)?;
        r.scalar("model.scale_by_head_dim", &mut m.scale_by_head_dim)?;

        let d = &mut c.df;
        r.list("df.filters", &mut d.filters)?;
        r.scalar("df.kernel", &mut d.kernel)?;
        r.scalar("df.pool_kernel", &mut d.pool_kernel)?;
        r.scalar("df.pool_stride", &mut d.pool_stride)?;
        r.scalar("df.dense", &mut d.dense)?;
        d.seq_len = c.train.model.seq_len;
        d.class_count = c.train.model.class_count;
        d.leaky_slope = c.train.model.leaky_slope;

        let t = &mut c.train;
        r.scalar("train.epochs", &mut t.epochs)?;
        r.scalar("train.batch_size", &mut t.batch_size)?;
        r.scalar("train.learning_rate", &mut t.learning_rate)?;
        r.pair("augment.crop_threshold_range", &mut t.augment.crop_threshold_range)?;
        r.pair("augment.mask_threshold_range", &mut t.augment.mask_threshold_range)?;
        r.scalar("augment.crop_dilation", &mut t.augment.crop_dilation)?;
        if let Some(v) = r.raw("ablation") {
            t.ablation = AblationFlags::parse(v)?;
        }
        r.scalar("ablation.use_crop", &mut t.ablation.use_crop)?;
        r.scalar("ablation.use_mask", &mut t.ablation.use_mask)?;
        r.scalar("ablation.use_random_aug", &mut t.ablation.use_random_aug)?;
        r.scalar("ablation.use_residual_attention", &mut t.ablation.use_residual_attention)?;
        t.seed = c.seed;

        let unknown: Vec<&str> = kv.entries.keys().map(String::as_str).filter(|k| !r.used.contains(k)).collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        c.train.ablation.validate()?;
        Ok(c)
    }

    /// Sets the data-dependent sizes from a loaded dataset.
    pub fn fit_to_data(&mut self, class_count: usize, seq_len: usize) {
        self.train.model.class_count = class_count;
        self.train.model.seq_len = seq_len;
        self.df.class_count = class_count;
        self.df.seq_len = seq_len;
    }

    pub fn render(&self) -> String {
        let mut o = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let s = &self.synth;
        let m = &self.train.model;
        let t = &self.train;
        let d = &self.df;
        let a = &t.ablation;
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data.path", opt(&self.data)),
            ("data.train", opt(&self.train_data)),
            ("data.val", opt(&self.val_data)),
            ("data.test", opt(&self.test_data)),
            ("split.ratios", join(&self.split_ratios)),
            ("synth.classes", s.class_count.to_string()),
            ("synth.samples", s.samples.to_string()),
            ("synth.seq_len", s.seq_len.to_string()),
            ("synth.tabs_dist", join(&s.tab_distribution)),
            ("synth.open_world", s.open_world.to_string()),
            ("synth.site_size", s.profile.site_size.to_string()),
            ("synth.jitter", s.profile.jitter.to_string()),
            (
                "synth.gap",
                match s.gap_range {
                    GapRange::Fraction { lo, hi } => format!("{lo},{hi}"),
                    GapRange::Cells { .. } => String::new(),
                },
            ),
            ("model.kind", if self.kind == ModelKind::Df { "df" } else { "adwpf" }.into()),
            ("model.seq_len", m.seq_len.to_string()),
            ("model.class_count", m.class_count.to_string()),
            ("model.filters", join(&m.filters)),
            ("model.kernel_sizes", join(&m.kernel_sizes)),
            ("model.pool_kernels", join(&m.pool_kernels)),
            ("model.pool_strides", join(&m.pool_strides)),
            ("model.attn_map_count", m.attn_map_count.to_string()),
            (
                "model.attention_source",
                match m.attention_source {
                    AttentionSource::Head => "head",
                    AttentionSource::RawChannels => "raw_channels",
                }
                .into(),
            ),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn_multiplier", m.ffn_multiplier.to_string()),
            ("model.lambda", m.lambda.to_string()),
            ("model.leaky_slope", m.leaky_slope.to_string()),
            ("model.scale_by_head_dim", m.scale_by_head_dim.to_string()),
            ("df.filters", join(&d.filters)),
            ("df.kernel", d.kernel.to_string()),
            ("df.pool_kernel", d.pool_kernel.to_string()),
            ("df.pool_stride", d.pool_stride.to_string()),
            ("df.dense", d.dense.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("augment.crop_threshold_range", format!("{},{}", t.augment.crop_threshold_range.0, t.augment.crop_threshold_range.1)),
            ("augment.mask_threshold_range", format!("{},{}", t.augment.mask_threshold_range.0, t.augment.mask_threshold_range.1)),
            ("augment.crop_dilation", t.augment.crop_dilation.to_string()),
            ("ablation.use_crop", a.use_crop.to_string()),
            ("ablation.use_mask", a.use_mask.to_string()),
            ("ablation.use_random_aug", a.use_random_aug.to_string()),
            ("ablation.use_residual_attention", a.use_residual_attention.to_string()),
        ];
        for (k, v) in lines {
            // A gap drawn in absolute cells has no flat form and falls back to the default.
            if k == "synth.gap" && v.is_empty() {
                continue;
            }
            let _ = writeln!(o, "{k} = {v}");
        }
        o
    }

    pub fn model_config(&self) -> ModelConfig {
        self.train.effective_model()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KeyValues::parse("# run\nseed = 7\nmodel.filters = 8, 16,16,32 # small\n\ntrain.epochs=2\nablation = ac+am\n").unwrap();
        let c = RunConfig::resolve(&kv).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.model.filters, vec![8, 16, 16, 32]);
        assert_eq!(c.train.epochs, 2);
        assert!(!c.train.ablation.use_residual_attention);
        assert_eq!(c.model_config().lambda, 0.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::resolve(&KeyValues::parse("model.filterz = 1").unwrap()).is_err());
        assert!(RunConfig::resolve(&KeyValues::parse("train.epochs = many").unwrap()).is_err());
        assert!(RunConfig::resolve(&KeyValues::parse("ablation = ra+ac").unwrap()).is_err());
        assert!(KeyValues::parse("no equals sign").is_err());
    }

    #[test]
    fn render_roundtrips() {
        let kv = KeyValues::parse("seed = 3\ndata.train = a.jsonl\naugment.crop_dilation = 55\nmodel.kind = df\npreset = full").unwrap();
        let c = RunConfig::resolve(&kv).unwrap();
        let back = RunConfig::resolve(&KeyValues::parse(&c.render()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.model.seq_len, 10_000);
    }
}
