//! `key = value` run configuration shared by the config file and the flags.

use std::fmt::Write as _;
use std::path::PathBuf;

use iclrec::augment::AugmentConfig;
use iclrec::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub five_core: bool,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub patience: usize,
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub temperature: f64,
    pub fnm: bool,
    pub dim: usize,
    pub max_seq_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub crop_ratio: f64,
    pub mask_ratio: f64,
    pub reorder_ratio: f64,
    pub kmeans_iters: usize,
    pub exclude_seen: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        // Mirror the library defaults so a bare run matches `TrainConfig::new`.
        let t = TrainConfig::new(1);
        RunConfig {
            data: None,
            five_core: false,
            seed: t.seed,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            epochs: t.max_epochs,
            patience: t.patience,
            k: t.k,
            lambda: t.lambda,
            beta: t.beta,
            temperature: t.temperature,
            fnm: t.fnm,
            dim: t.encoder.dim,
            max_seq_len: t.encoder.max_len,
            n_blocks: t.encoder.n_blocks,
            n_heads: t.encoder.n_heads,
            ffn_mult: t.encoder.ffn_mult,
            dropout: t.encoder.dropout,
            crop_ratio: t.augment.crop_ratio,
            mask_ratio: t.augment.mask_ratio,
            reorder_ratio: t.augment.reorder_ratio,
            kmeans_iters: t.kmeans_max_iter,
            exclude_seen: t.exclude_seen,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl RunConfig {
    /// Sets one field by key; `-` and `_` are interchangeable in keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "data" => self.data = Some(PathBuf::from(value)),
            "five_core" => self.five_core = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "beta1" => self.beta1 = parse(k, value)?,
            "beta2" => self.beta2 = parse(k, value)?,
            "eps" => self.eps = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "patience" => self.patience = parse(k, value)?,
            "k" => self.k = parse(k, value)?,
            "lambda" => self.lambda = parse(k, value)?,
            "beta" => self.beta = parse(k, value)?,
            "temperature" => self.temperature = parse(k, value)?,
            "fnm" => self.fnm = parse(k, value)?,
            "dim" => self.dim = parse(k, value)?,
            "max_seq_len" => self.max_seq_len = parse(k, value)?,
            "n_blocks" => self.n_blocks = parse(k, value)?,
            "n_heads" => self.n_heads = parse(k, value)?,
            "ffn_mult" => self.ffn_mult = parse(k, value)?,
            "dropout" => self.dropout = parse(k, value)?,
            "crop_ratio" => self.crop_ratio = parse(k, value)?,
            "mask_ratio" => self.mask_ratio = parse(k, value)?,
            "reorder_ratio" => self.reorder_ratio = parse(k, value)?,
            "kmeans_iters" => self.kmeans_iters = parse(k, value)?,
            "exclude_seen" => self.exclude_seen = parse(k, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected key = value", n + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("{origin}:{}: {e}", n + 1))?;
        }
        Ok(())
    }

    /// Every field as `key = value`, loadable by [`RunConfig::apply_text`].
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(d) = &self.data {
            writeln!(s, "data = {}", d.display()).unwrap();
        }
        let fields: [(&str, String); 25] = [
            ("five_core", self.five_core.to_string()),
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("k", self.k.to_string()),
            ("lambda", self.lambda.to_string()),
            ("beta", self.beta.to_string()),
            ("temperature", self.temperature.to_string()),
            ("fnm", self.fnm.to_string()),
            ("dim", self.dim.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("dropout", self.dropout.to_string()),
            ("crop_ratio", self.crop_ratio.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("reorder_ratio", self.reorder_ratio.to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("exclude_seen", self.exclude_seen.to_string()),
        ];
        for (k, v) in fields {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn train_config(&self, n_items: usize) -> TrainConfig {
        let mut t = TrainConfig::new(n_items);
        t.seed = self.seed;
        t.batch_size = self.batch_size;
        t.adam.lr = self.lr;
        t.adam.beta1 = self.beta1;
        t.adam.beta2 = self.beta2;
        t.adam.eps = self.eps;
        t.max_epochs = self.epochs;
        t.patience = self.patience;
        t.k = self.k;
        t.lambda = self.lambda;
        t.beta = self.beta;
        t.temperature = self.temperature;
        t.fnm = self.fnm;
        t.encoder.dim = self.dim;
        t.encoder.max_len = self.max_seq_len;
        t.encoder.n_blocks = self.n_blocks;
        t.encoder.n_heads = self.n_heads;
        t.encoder.ffn_mult = self.ffn_mult;
        t.encoder.dropout = self.dropout;
        t.augment = AugmentConfig {
            crop_ratio: self.crop_ratio,
            mask_ratio: self.mask_ratio,
            reorder_ratio: self.reorder_ratio,
            ..AugmentConfig::default()
        };
        t.kmeans_max_iter = self.kmeans_iters;
        t.exclude_seen = self.exclude_seen;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("lr", "0.0003").unwrap();
        c.set("batch-size", "64").unwrap();
        c.set("data", "/tmp/x.txt").unwrap();
        c.set("fnm", "false").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.render(), "echo").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("learning_rate = 0.1", "f").unwrap_err().contains("unknown config key"));
        assert!(c.apply_text("k = many", "f").unwrap_err().contains("f:1"));
        assert!(c.apply_text("\n# note\nk 4", "f").unwrap_err().contains("f:3"));
        c.apply_text("k = 4 # trailing\n\n", "f").unwrap();
        assert_eq!(c.k, 4);
    }

    #[test]
    fn defaults_match_library() {
        let c = RunConfig::default();
        assert_eq!(c.train_config(10), TrainConfig::new(10));
    }
}
