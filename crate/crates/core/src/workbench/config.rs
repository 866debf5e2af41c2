//! Plain-text `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::Residual;
use crate::degradation::DegradationRanges;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, RoiBoxes};
use crate::model::{Arch, ModelConfig};
use crate::tensor::CropBox;

/// Adam learning rate with an optional linear warmup and one step decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub iters: usize,
    /// Iterations over which the rate ramps linearly up to `lr`.
    pub warmup: usize,
    /// Fraction of `iters` after which the rate is multiplied by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
}

impl Schedule {
    /// First iteration running at the decayed rate.
    pub fn decay_iter(&self) -> usize {
        (self.decay_at * self.iters as f64).round() as usize
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let ramp = if iter < self.warmup { (iter + 1) as f64 / self.warmup as f64 } else { 1.0 };
        let decay = if iter >= self.decay_iter() { self.decay_factor } else { 1.0 };
        self.lr * ramp * decay
    }

    fn validate(&self, key: &str) -> Result<()> {
        let ok = self.lr > 0.0 && self.iters > 0 && (0.0..=1.0).contains(&self.decay_at) && self.decay_factor > 0.0;
        if !ok {
            return Err(Error::invalid("config", format!("invalid {key} schedule {self:?}")));
        }
        Ok(())
    }
}

/// Everything both training stages, restoration and evaluation need.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub num_images: usize,
    pub weights: LossWeights,
    pub dict: Schedule,
    pub restore: Schedule,
    pub disc_width: usize,
    pub roi: RoiBoxes,
    pub roi_size: usize,
    pub degradation: DegradationRanges,
    /// Keep the codebook fixed during restoration training.
    pub freeze_dictionary: bool,
    /// Let the prior term pull codebook entries as well as the encoder.
    pub prior_to_codebook: bool,
    /// Every this many stage-1 iterations, entries unused since the last
    /// check are re-seeded from encoder outputs that share an entry. 0
    /// disables.
    pub code_restart_every: usize,
    /// Rescale adversarial terms by the ratio of reconstruction to
    /// adversarial gradient norms at the generator output.
    pub adaptive_adv: bool,
    /// Fraction of each stage's iterations before adversarial terms enter
    /// the generator objective. Discriminators train from the start.
    pub adv_start: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub stage1_checkpoint: PathBuf,
}

/// Every recognised key, in file order.
pub const KEYS: [&str; 47] = [
    "image_size",
    "channels",
    "blocks_per_level",
    "mid_blocks",
    "latent_channels",
    "codebook_size",
    "heads",
    "norm_groups",
    "residual",
    "batch_size",
    "seed",
    "num_images",
    "dict_lr",
    "dict_iters",
    "dict_decay_at",
    "dict_decay_factor",
    "dict_warmup",
    "restore_lr",
    "restore_iters",
    "restore_decay_at",
    "restore_decay_factor",
    "restore_warmup",
    "lambda_per",
    "lambda_p",
    "lambda_disc",
    "lambda_style",
    "lambda_adv",
    "lambda_id",
    "lambda_d",
    "lambda_c",
    "disc_width",
    "roi_size",
    "roi_left_eye",
    "roi_right_eye",
    "roi_mouth",
    "deg_sigma",
    "deg_r",
    "deg_delta",
    "deg_q",
    "freeze_dictionary",
    "prior_to_codebook",
    "code_restart_every",
    "adaptive_adv",
    "adv_start",
    "data_dir",
    "out_dir",
    "stage1_checkpoint",
];

impl Default for StageConfig {
    /// The 32-pixel desk configuration.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                image_size: 32,
                arch: Arch::standard([8, 16, 32, 32, 32], 32, 8),
                codebook_size: 64,
                heads: 4,
                residual: Residual::Prior,
            },
            batch_size: 4,
            seed: 0,
            num_images: 8,
            weights: LossWeights { style: 1.0, adv: 0.4, ..LossWeights::default() },
            dict: Schedule { lr: 1e-3, iters: 2000, warmup: 200, decay_at: 0.75, decay_factor: 0.1 },
            restore: Schedule { lr: 3e-4, iters: 2000, warmup: 200, decay_at: 0.75, decay_factor: 0.1 },
            disc_width: 8,
            roi: RoiBoxes::default(),
            roi_size: 16,
            degradation: DegradationRanges::default(),
            freeze_dictionary: true,
            prior_to_codebook: false,
            code_restart_every: 50,
            adaptive_adv: true,
            adv_start: 0.5,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            stage1_checkpoint: PathBuf::from("runs/stage1.ckpt"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(|s| parse_num::<f64>(s.trim())).collect()
}

fn parse_pair(v: &str) -> std::result::Result<(f64, f64), String> {
    match parse_list(v)?[..] {
        [lo, hi] if lo <= hi => Ok((lo, hi)),
        _ => Err(format!("expected `lo, hi` with lo <= hi, got {v:?}")),
    }
}

fn parse_box(v: &str) -> std::result::Result<CropBox, String> {
    match parse_list(v)?[..] {
        [x0, y0, x1, y1] => Ok([x0, y0, x1, y1]),
        _ => Err(format!("expected `x0, y0, x1, y1`, got {v:?}")),
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

impl StageConfig {
    /// Whether adversarial terms are active at `iter` of a stage running
    /// `iters` iterations.
    pub fn adversarial_on(&self, iter: usize, iters: usize) -> bool {
        iter as f64 >= self.adv_start * iters as f64
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// Applies every `key = value` line of `text` over the desk defaults.
    /// `#` starts a comment. Unknown and repeated keys are errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Config { path: origin.display().to_string(), line: i + 1, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.apply(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let w = &mut self.weights;
        match key {
            "image_size" => m.image_size = parse_num(v)?,
            "channels" => {
                let ch: Vec<usize> = v.split(',').map(|s| parse_num(s.trim())).collect::<std::result::Result<_, _>>()?;
                if ch.len() != 5 {
                    return Err(format!("channels needs 5 entries, got {}", ch.len()));
                }
                m.arch.channels = ch;
            }
            "blocks_per_level" => m.arch.blocks_per_level = parse_num(v)?,
            "mid_blocks" => m.arch.mid_blocks = parse_num(v)?,
            "latent_channels" => m.arch.latent = parse_num(v)?,
            "codebook_size" => m.codebook_size = parse_num(v)?,
            "heads" => m.heads = parse_num(v)?,
            "norm_groups" => m.arch.norm_groups = parse_num(v)?,
            "residual" => {
                m.residual = match v {
                    "prior" => Residual::Prior,
                    "degraded" => Residual::Degraded,
                    _ => return Err(format!("residual must be prior or degraded, got {v:?}")),
                }
            }
            "batch_size" => self.batch_size = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "num_images" => self.num_images = parse_num(v)?,
            "dict_lr" => self.dict.lr = parse_num(v)?,
            "dict_iters" => self.dict.iters = parse_num(v)?,
            "dict_decay_at" => self.dict.decay_at = parse_num(v)?,
            "dict_decay_factor" => self.dict.decay_factor = parse_num(v)?,
            "dict_warmup" => self.dict.warmup = parse_num(v)?,
            "restore_lr" => self.restore.lr = parse_num(v)?,
            "restore_iters" => self.restore.iters = parse_num(v)?,
            "restore_decay_at" => self.restore.decay_at = parse_num(v)?,
            "restore_decay_factor" => self.restore.decay_factor = parse_num(v)?,
            "restore_warmup" => self.restore.warmup = parse_num(v)?,
            "lambda_per" => w.per = parse_num(v)?,
            "lambda_p" => w.p = parse_num(v)?,
            "lambda_disc" => w.disc = parse_num(v)?,
            "lambda_style" => w.style = parse_num(v)?,
            "lambda_adv" => w.adv = parse_num(v)?,
            "lambda_id" => w.id = parse_num(v)?,
            "lambda_d" => w.d = parse_num(v)?,
            "lambda_c" => w.c = parse_num(v)?,
            "disc_width" => self.disc_width = parse_num(v)?,
            "roi_size" => self.roi_size = parse_num(v)?,
            "roi_left_eye" => self.roi.left_eye = parse_box(v)?,
            "roi_right_eye" => self.roi.right_eye = parse_box(v)?,
            "roi_mouth" => self.roi.mouth = parse_box(v)?,
            "deg_sigma" => self.degradation.sigma = parse_pair(v)?,
            "deg_r" => self.degradation.r = parse_pair(v)?,
            "deg_delta" => self.degradation.delta = parse_pair(v)?,
            "deg_q" => self.degradation.q = parse_pair(v)?,
            "freeze_dictionary" => self.freeze_dictionary = parse_bool(v)?,
            "prior_to_codebook" => self.prior_to_codebook = parse_bool(v)?,
            "code_restart_every" => self.code_restart_every = parse_num(v)?,
            "adaptive_adv" => self.adaptive_adv = parse_bool(v)?,
            "adv_start" => self.adv_start = parse_num(v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "stage1_checkpoint" => self.stage1_checkpoint = PathBuf::from(v),
            _ => return Err(format!("unhandled key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dict.validate("dict")?;
        self.restore.validate("restore")?;
        self.roi.validate()?;
        if !(0.0..=1.0).contains(&self.adv_start) {
            return Err(Error::invalid("config", format!("adv_start {} outside [0, 1]", self.adv_start)));
        }
        let positive = [self.batch_size, self.num_images, self.disc_width, self.roi_size];
        if positive.contains(&0) {
            return Err(Error::invalid("config", "batch_size, num_images, disc_width and roi_size must be positive"));
        }
        let d = &self.degradation;
        if d.sigma.0 < 0.0 || d.r.0 < 1.0 || d.delta.0 < 0.0 || d.q.0 < 1.0 || d.q.1 > 100.0 {
            return Err(Error::invalid("config", format!("degradation ranges out of bounds: {d:?}")));
        }
        Ok(())
    }

    /// The configuration in the file format, one line per key.
    pub fn to_conf_string(&self) -> String {
        let m = &self.model;
        let w = &self.weights;
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let pair = |p: (f64, f64)| list(&[p.0, p.1]);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("image_size", m.image_size.to_string());
        put("channels", m.arch.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", "));
        put("blocks_per_level", m.arch.blocks_per_level.to_string());
        put("mid_blocks", m.arch.mid_blocks.to_string());
        put("latent_channels", m.arch.latent.to_string());
        put("codebook_size", m.codebook_size.to_string());
        put("heads", m.heads.to_string());
        put("norm_groups", m.arch.norm_groups.to_string());
        let residual = match m.residual {
            Residual::Prior => "prior",
            Residual::Degraded => "degraded",
        };
        put("residual", residual.into());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("num_images", self.num_images.to_string());
        for (prefix, s) in [("dict", &self.dict), ("restore", &self.restore)] {
            put(&format!("{prefix}_lr"), s.lr.to_string());
            put(&format!("{prefix}_iters"), s.iters.to_string());
            put(&format!("{prefix}_decay_at"), s.decay_at.to_string());
            put(&format!("{prefix}_decay_factor"), s.decay_factor.to_string());
            put(&format!("{prefix}_warmup"), s.warmup.to_string());
        }
        for (k, v) in [
            ("per", w.per),
            ("p", w.p),
            ("disc", w.disc),
            ("style", w.style),
            ("adv", w.adv),
            ("id", w.id),
            ("d", w.d),
            ("c", w.c),
        ] {
            put(&format!("lambda_{k}"), v.to_string());
        }
        put("disc_width", self.disc_width.to_string());
        put("roi_size", self.roi_size.to_string());
        put("roi_left_eye", list(&self.roi.left_eye));
        put("roi_right_eye", list(&self.roi.right_eye));
        put("roi_mouth", list(&self.roi.mouth));
        put("deg_sigma", pair(self.degradation.sigma));
        put("deg_r", pair(self.degradation.r));
        put("deg_delta", pair(self.degradation.delta));
        put("deg_q", pair(self.degradation.q));
        put("freeze_dictionary", self.freeze_dictionary.to_string());
        put("prior_to_codebook", self.prior_to_codebook.to_string());
        put("code_restart_every", self.code_restart_every.to_string());
        put("adaptive_adv", self.adaptive_adv.to_string());
        put("adv_start", self.adv_start.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("stage1_checkpoint", self.stage1_checkpoint.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<StageConfig> {
        StageConfig::parse(text, Path::new("test.conf"))
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = StageConfig::default();
        cfg.validate().unwrap();
        assert_eq!(parse(&cfg.to_conf_string()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = parse("# desk\nimage_size = 64  # bigger\nlambda_style = 20\ndeg_r = 1, 4\nresidual = degraded\n").unwrap();
        assert_eq!(cfg.model.image_size, 64);
        assert_eq!(cfg.weights.style, 20.0);
        assert_eq!(cfg.degradation.r, (1.0, 4.0));
        assert_eq!(cfg.model.residual, Residual::Degraded);
    }

    #[test]
    fn bad_lines_report_their_position() {
        let e = parse("seed = 1\nlamda_per = 2\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
        assert!(parse("seed = 1\nseed = 2\n").is_err());
        assert!(parse("seed 1\n").is_err());
        assert!(parse("image_size = 48\n").is_err());
        assert!(parse("deg_q = 90, 60\n").is_err());
        assert!(parse("channels = 1, 2, 3\n").is_err());
    }

    #[test]
    fn schedule_decays_once() {
        let s = Schedule { lr: 7e-5, iters: 800_000, warmup: 0, decay_at: 0.75, decay_factor: 0.1 };
        assert_eq!(s.decay_iter(), 600_000);
        assert_eq!(s.lr_at(599_999), 7e-5);
        assert!((s.lr_at(600_000) - 7e-6).abs() < 1e-20);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let s = Schedule { lr: 1e-3, iters: 100, warmup: 4, decay_at: 0.5, decay_factor: 0.1 };
        let lrs: Vec<f64> = (0..5).map(|i| s.lr_at(i) / 1e-3).collect();
        assert_eq!(lrs, [0.25, 0.5, 0.75, 1.0, 1.0]);
        assert!((s.lr_at(50) - 1e-4).abs() < 1e-18);
    }
}
