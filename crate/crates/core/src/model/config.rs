use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// Model family member. All six share the encoder/decoder backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    S2sa,
    FactBias,
    Speaker,
    Vae,
    Cvae,
    PaGenerator,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::S2sa,
        Variant::FactBias,
        Variant::Speaker,
        Variant::Vae,
        Variant::Cvae,
        Variant::PaGenerator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::S2sa => "S2SA",
            Variant::FactBias => "FACT_BIAS",
            Variant::Speaker => "SPEAKER",
            Variant::Vae => "VAE",
            Variant::Cvae => "CVAE",
            Variant::PaGenerator => "PAGENERATOR",
        }
    }

    pub fn is_latent(self) -> bool {
        matches!(self, Variant::Vae | Variant::Cvae | Variant::PaGenerator)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "S2SA" | "S2S" => Variant::S2sa,
            "FACT_BIAS" | "FACTBIAS" => Variant::FactBias,
            "SPEAKER" | "SPEAKER_MODEL" => Variant::Speaker,
            "VAE" => Variant::Vae,
            "CVAE" => Variant::Cvae,
            "PAGENERATOR" | "PAGEN" => Variant::PaGenerator,
            _ => return Err(ModelError::Config(format!("unknown variant `{s}`"))),
        })
    }
}

/// Architecture switches and hyperparameters for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub word_embed_dim: usize,
    pub user_embed_dim: usize,
    /// Per direction.
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub z_dim: usize,
    /// Feed the user embedding to every decoder step (PAGENERATOR only; the
    /// "w/o UE" ablation turns it off).
    pub decode_with_user: bool,
    pub use_attention: bool,
    pub use_r1: bool,
    pub use_r2: bool,
    pub gamma1: f64,
    pub gamma2: f64,
    pub anneal_batches: usize,
    pub bow_hidden: usize,
    pub fact_rank: usize,
    pub init_scale: f64,
    pub vocab_size: usize,
    /// Rows in the user table, the unspecified user included.
    pub num_users: usize,
}

impl ModelConfig {
    /// Full-size defaults.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            word_embed_dim: 300,
            user_embed_dim: 128,
            encoder_hidden: 256,
            decoder_hidden: 512,
            z_dim: 128,
            decode_with_user: true,
            use_attention: !variant.is_latent(),
            use_r1: true,
            use_r2: true,
            gamma1: 0.1,
            gamma2: 0.1,
            anneal_batches: 100_000,
            bow_hidden: 400,
            fact_rank: 32,
            init_scale: 0.08,
            vocab_size: 20_000,
            num_users: 1,
        }
    }

    /// Desk-scale profile.
    pub fn toy(variant: Variant) -> Self {
        Self {
            word_embed_dim: 32,
            user_embed_dim: 16,
            encoder_hidden: 32,
            decoder_hidden: 64,
            z_dim: 16,
            anneal_batches: 600,
            bow_hidden: 64,
            fact_rank: 8,
            vocab_size: 200,
            ..Self::new(variant)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            use_attention: !variant.is_latent(),
            ..self.clone()
        }
    }

    pub fn is_latent(&self) -> bool {
        self.variant.is_latent()
    }

    pub fn uses_user_embedding(&self) -> bool {
        !matches!(self.variant, Variant::S2sa | Variant::FactBias)
    }

    /// Whether e_u is concatenated to each decoder input.
    pub fn decoder_uses_user(&self) -> bool {
        match self.variant {
            Variant::Speaker => true,
            Variant::PaGenerator => self.decode_with_user,
            _ => false,
        }
    }

    /// User index fed to the prior and BOW networks; VAE always sees the
    /// unspecified user.
    pub fn prior_user(&self, user: usize) -> usize {
        if self.variant == Variant::Vae {
            0
        } else {
            user
        }
    }

    pub fn r1_active(&self) -> bool {
        self.variant == Variant::PaGenerator && self.use_r1
    }

    pub fn r2_active(&self) -> bool {
        self.variant == Variant::PaGenerator && self.use_r2
    }

    pub fn encoder_out(&self) -> usize {
        2 * self.encoder_hidden
    }

    pub fn decoder_input(&self) -> usize {
        let mut d = self.word_embed_dim;
        if self.is_latent() {
            d += self.z_dim;
        }
        if self.decoder_uses_user() {
            d += self.user_embed_dim;
        }
        d
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("word_embed_dim", self.word_embed_dim),
            ("user_embed_dim", self.user_embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("z_dim", self.z_dim),
            ("bow_hidden", self.bow_hidden),
            ("fact_rank", self.fact_rank),
            ("anneal_batches", self.anneal_batches),
            ("num_users", self.num_users),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return Err(ModelError::Config("vocab_size must exceed the reserved tokens".into()));
        }
        if self.variant == Variant::PaGenerator && !(self.gamma1 > 0.0 && self.gamma2 > 0.0) {
            return Err(ModelError::Config("PAGENERATOR needs gamma1 > 0 and gamma2 > 0".into()));
        }
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(ModelError::Config("gamma1 and gamma2 must be nonnegative".into()));
        }
        if self.use_attention && self.decoder_hidden != self.encoder_out() {
            return Err(ModelError::Config(format!(
                "dot attention needs decoder_hidden == 2 * encoder_hidden ({} vs {})",
                self.decoder_hidden,
                self.encoder_out()
            )));
        }
        if !(self.init_scale > 0.0) {
            return Err(ModelError::Config("init_scale must be positive".into()));
        }
        Ok(())
    }

    /// Key/value pairs in sorted key order.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("anneal_batches", self.anneal_batches.to_string());
        m.insert("bow_hidden", self.bow_hidden.to_string());
        m.insert("decode_with_user", self.decode_with_user.to_string());
        m.insert("decoder_hidden", self.decoder_hidden.to_string());
        m.insert("encoder_hidden", self.encoder_hidden.to_string());
        m.insert("fact_rank", self.fact_rank.to_string());
        m.insert("gamma1", fmt_f64(self.gamma1));
        m.insert("gamma2", fmt_f64(self.gamma2));
        m.insert("init_scale", fmt_f64(self.init_scale));
        m.insert("num_users", self.num_users.to_string());
        m.insert("use_attention", self.use_attention.to_string());
        m.insert("use_r1", self.use_r1.to_string());
        m.insert("use_r2", self.use_r2.to_string());
        m.insert("user_embed_dim", self.user_embed_dim.to_string());
        m.insert("variant", self.variant.name().to_string());
        m.insert("vocab_size", self.vocab_size.to_string());
        m.insert("word_embed_dim", self.word_embed_dim.to_string());
        m.insert("z_dim", self.z_dim.to_string());
        m
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies one key. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        let bad = |e: &dyn fmt::Display| ModelError::Config(format!("{key}={value}: {e}"));
        let uint = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
        let float = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
        let boolean = |v: &str| v.parse::<bool>().map_err(|e| bad(&e));
        match key {
            "variant" => {
                self.variant = value.parse()?;
            }
            "anneal_batches" => self.anneal_batches = uint(value)?,
            "bow_hidden" => self.bow_hidden = uint(value)?,
            "decode_with_user" => self.decode_with_user = boolean(value)?,
            "decoder_hidden" => self.decoder_hidden = uint(value)?,
            "encoder_hidden" => self.encoder_hidden = uint(value)?,
            "fact_rank" => self.fact_rank = uint(value)?,
            "gamma1" => self.gamma1 = float(value)?,
            "gamma2" => self.gamma2 = float(value)?,
            "init_scale" => self.init_scale = float(value)?,
            "num_users" => self.num_users = uint(value)?,
            "use_attention" => self.use_attention = boolean(value)?,
            "use_r1" => self.use_r1 = boolean(value)?,
            "use_r2" => self.use_r2 = boolean(value)?,
            "user_embed_dim" => self.user_embed_dim = uint(value)?,
            "vocab_size" => self.vocab_size = uint(value)?,
            "word_embed_dim" => self.word_embed_dim = uint(value)?,
            "z_dim" => self.z_dim = uint(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses the canonical text block. `use_attention` defaults by variant
    /// when absent.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let pairs = parse_pairs(text)?;
        let variant = match pairs.iter().find(|(k, _)| k == "variant") {
            Some((_, v)) => v.parse()?,
            None => return Err(ModelError::Config("missing `variant`".into())),
        };
        let mut cfg = ModelConfig::new(variant);
        for (k, v) in &pairs {
            if !cfg.set(k, v)? {
                return Err(ModelError::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(cfg)
    }
}

/// Shortest decimal that round-trips.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Parses flat `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ModelError::Config(format!("line {}: expected key=value", i + 1)));
        };
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}
