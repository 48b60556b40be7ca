//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the field
//! names of [`PipelineConfig`]. Later sources override earlier ones: defaults,
//! then the file, then command-line flags.

use itosr_core::PipelineConfig;

/// Every accepted key, in documentation order.
pub const KEYS: [&str; 24] = [
    "iterations",
    "alpha",
    "k",
    "lambda",
    "lr_embedder",
    "lr_head",
    "epochs",
    "batch",
    "hidden",
    "latent_dim",
    "gan_epochs",
    "gan_batch",
    "n_critic",
    "gan_lr",
    "noise_dim",
    "gan_hidden",
    "clip_bound",
    "use_dual_space_sampling",
    "use_d2",
    "use_c2",
    "retrain_from",
    "head_init",
    "seed",
    "T",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

/// Sets one key. `T` is an alias of `iterations`.
pub fn set_key(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<(), String> {
    let v = value.trim();
    match key {
        "iterations" | "T" => cfg.iterations = parse(key, v)?,
        "alpha" => cfg.alpha = parse(key, v)?,
        "k" => cfg.k = parse(key, v)?,
        "lambda" => cfg.lambda = parse(key, v)?,
        "lr_embedder" => cfg.lr_embedder = parse(key, v)?,
        "lr_head" => cfg.lr_head = parse(key, v)?,
        "epochs" => cfg.epochs = parse(key, v)?,
        "batch" => cfg.batch = parse(key, v)?,
        "hidden" => cfg.hidden = parse(key, v)?,
        "latent_dim" => cfg.latent_dim = parse(key, v)?,
        "gan_epochs" => cfg.gan_epochs = parse(key, v)?,
        "gan_batch" => cfg.gan_batch = parse(key, v)?,
        "n_critic" => cfg.n_critic = parse(key, v)?,
        "gan_lr" => cfg.gan_lr = parse(key, v)?,
        "noise_dim" => cfg.noise_dim = parse(key, v)?,
        "gan_hidden" => cfg.gan_hidden = parse(key, v)?,
        "clip_bound" => cfg.clip_bound = parse(key, v)?,
        "use_dual_space_sampling" => cfg.use_dual_space_sampling = parse(key, v)?,
        "use_d2" => cfg.use_d2 = parse(key, v)?,
        "use_c2" => cfg.use_c2 = parse(key, v)?,
        "retrain_from" => cfg.retrain_from = parse(key, v)?,
        "head_init" => cfg.head_init = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        _ => {
            return Err(format!(
                "unknown config key {key:?}; expected one of {}",
                KEYS.join(", ")
            ))
        }
    }
    Ok(())
}

/// Applies a config file's text on top of `cfg`.
pub fn apply_text(cfg: &mut PipelineConfig, text: &str) -> Result<(), String> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", n + 1))?;
        set_key(cfg, key.trim(), value).map_err(|e| format!("line {}: {e}", n + 1))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults() {
        let mut cfg = PipelineConfig::default();
        apply_text(
            &mut cfg,
            "# comment\n\nalpha = 1.5\nT=3\nretrain_from=initial\nuse_d2=false\n",
        )
        .unwrap();
        assert_eq!(cfg.alpha, 1.5);
        assert_eq!(cfg.iterations, 3);
        assert!(!cfg.use_d2);
        assert_eq!(cfg.retrain_from.as_str(), "initial");
        assert_eq!(cfg.k, PipelineConfig::default().k);
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = PipelineConfig::default();
        let e = apply_text(&mut cfg, "alpha=1\nbogus=2\n").unwrap_err();
        assert!(e.starts_with("line 2"), "{e}");
        assert!(apply_text(&mut cfg, "alpha\n").is_err());
        assert!(apply_text(&mut cfg, "k=-1\n").is_err());
        assert!(apply_text(&mut cfg, "head_init=sideways\n").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "use_dual_space_sampling" | "use_d2" | "use_c2" => "false",
            "retrain_from" => "initial",
            "head_init" => "fine-tune",
            _ => "3",
        };
        for key in KEYS {
            let mut cfg = PipelineConfig::default();
            set_key(&mut cfg, key, sample(key)).unwrap();
            assert_ne!(cfg, PipelineConfig::default(), "{key}");
        }
    }
}
