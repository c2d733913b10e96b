//! Line-oriented "key = value" configuration files mirroring the training
//! configuration plus preprocessing and query knobs. Parsing is total:
//! any unknown key, malformed line, or bad value fails the whole file and
//! no partial state escapes. Command-line flags override file values.

use std::path::Path;

use gaff_core::error::{Error, Result};
use gaff_core::train::TrainConfig;

/// Everything a config file may set. Training fields mirror
/// [`TrainConfig`]; the rest parameterize preprocessing and querying.
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub k_min: usize,
    pub k_max: usize,
    pub tau_rel: f32,
    pub kappa: f32,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            train: TrainConfig::default(),
            k_min: 2,
            k_max: 32,
            tau_rel: gaff_core::query::DEFAULT_TAU_REL,
            kappa: gaff_core::query::DEFAULT_KAPPA,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::validation(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::validation(format!("{key}: cannot parse '{v}'")))
}

impl FileConfig {
    /// Apply one key/value pair. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse_num(key, value)?,
            "stage1_iters" => t.stage1_iters = parse_num(key, value)?,
            "stage2_iters" => t.stage2_iters = parse_num(key, value)?,
            "warmup_iters" => t.warmup_iters = parse_num(key, value)?,
            "pixels_per_iter" => t.pixels_per_iter = parse_num(key, value)?,
            "d" => t.d = parse_num(key, value)?,
            "d_h" => t.d_h = parse_num(key, value)?,
            "n_freq" => t.n_freq = parse_num(key, value)?,
            "field_hidden" => t.field_hidden = parse_num(key, value)?,
            "lambda_pho" => t.lambda_pho = parse_num(key, value)?,
            "lambda_ld" => t.lambda_ld = parse_num(key, value)?,
            "lambda_entropy" => t.lambda_entropy = parse_num(key, value)?,
            "lr_color" => t.lr_color = parse_num(key, value)?,
            "lr_opacity" => t.lr_opacity = parse_num(key, value)?,
            "lr_sem_opacity" => t.lr_sem_opacity = parse_num(key, value)?,
            "lr_field" => t.lr_field = parse_num(key, value)?,
            "lr_attention" => t.lr_attention = parse_num(key, value)?,
            "couple_semantic_opacity" => t.couple_semantic_opacity = parse_bool(key, value)?,
            "freeze_codebook" => t.freeze_codebook = parse_bool(key, value)?,
            "route_semantic_color_grads" => {
                t.route_semantic_color_grads = parse_bool(key, value)?
            }
            "k_min" => self.k_min = parse_num(key, value)?,
            "k_max" => self.k_max = parse_num(key, value)?,
            "tau_rel" => self.tau_rel = parse_num(key, value)?,
            "kappa" => self.kappa = parse_num(key, value)?,
            _ => return Err(Error::validation(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a whole file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = FileConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_apply_and_unknown_keys_reject() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\nseed = 7\nlambda_ld = 0.5\nfreeze_codebook = true\n")
            .unwrap();
        let cfg = FileConfig::from_file(&p).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.lambda_ld, 0.5);
        assert!(cfg.train.freeze_codebook);

        std::fs::write(&p, "not_a_key = 3\n").unwrap();
        let err = FileConfig::from_file(&p).unwrap_err();
        assert!(err.to_string().contains("unknown config key"));

        std::fs::write(&p, "seed 7\n").unwrap();
        assert!(FileConfig::from_file(&p).is_err());
    }
}
