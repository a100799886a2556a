//! Flat `key=value` experiment configuration with named profiles.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use curl_core::agents::{DqnConfig, SacConfig, UpdateFlags};
use curl_core::envs::{EnvConfig, EnvId};
use curl_core::nn::{EncoderConfig, LATENT_DIM, NUM_CONV_LAYERS, NUM_FILTERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Sac,
    Dqn,
    StateSacOracle,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Sac => "sac",
            AgentKind::Dqn => "dqn",
            AgentKind::StateSacOracle => "state_sac_oracle",
        }
    }

    pub fn uses_pixels(self) -> bool {
        self != AgentKind::StateSacOracle
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sac" => Ok(AgentKind::Sac),
            "dqn" => Ok(AgentKind::Dqn),
            "state_sac_oracle" => Ok(AgentKind::StateSacOracle),
            _ => bail!("unknown agent kind `{s}` (expected sac, dqn or state_sac_oracle)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
    /// Reduced sizes used by the acceptance suite on a single CPU core.
    Quick,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
            Profile::Quick => "quick",
        }
    }
}

impl FromStr for Profile {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            "quick" => Ok(Profile::Quick),
            _ => bail!("unknown profile `{s}` (expected desk, paper or quick)"),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSection {
    pub id: EnvId,
    pub render_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    pub episode_length: usize,
    pub grid_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    /// Environment-step budget.
    pub env_steps: u64,
    /// Random-action interaction steps before updates start.
    pub initial_steps: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Minimum replay fill before sampling.
    pub min_replay: usize,
    pub crop_size: usize,
    pub updates_per_step: usize,
    /// Evaluation cadence in environment steps.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub strict: bool,
    pub record_wall_clock: bool,
    /// Directory for PGM frame dumps; empty disables.
    pub frame_dump: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSection {
    pub conv_layers: usize,
    pub filters: usize,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacSection {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub gamma: f64,
    pub tau_q: f64,
    pub tau_enc: f64,
    pub target_update_period: u64,
    pub actor_update_period: u64,
    pub init_temperature: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    /// `None` means `-dim(action)`.
    pub target_entropy: Option<f64>,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnSection {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub gamma: f64,
    pub n_step: usize,
    pub lr: f64,
    pub adam_eps: f64,
    pub target_update_period: u64,
    pub tau_enc: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub max_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub agent: AgentKind,
    pub env: EnvSection,
    pub train: TrainSection,
    pub encoder: EncoderSection,
    pub sac: SacSection,
    pub dqn: DqnSection,
    pub curl_weight: f64,
    pub ablation: UpdateFlags,
}

/// Textual form of one config value.
trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn format_value(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| anyhow!("{e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, f64, bool, String, EnvId, AgentKind, Profile);

impl Value for Option<f64> {
    fn parse_value(s: &str) -> Result<Self> {
        match s {
            "none" | "auto" => Ok(None),
            _ => Ok(Some(s.parse::<f64>()?)),
        }
    }

    fn format_value(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.to_string())
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl ExperimentConfig {
            /// Every recognised key, in serialization order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$($field).+ = Value::parse_value(value)
                            .with_context(|| format!("invalid value `{value}` for `{key}`"))?;
                    })*
                    _ => bail!("unknown config key `{key}`"),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.format_value()),)*
                    _ => None,
                }
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.format_value())),*]
            }
        }
    };
}

config_keys! {
    "experiment.profile" => profile,
    "experiment.seed" => seed,
    "experiment.agent" => agent,
    "env.id" => env.id,
    "env.render_size" => env.render_size,
    "env.frame_stack" => env.frame_stack,
    "env.action_repeat" => env.action_repeat,
    "env.episode_length" => env.episode_length,
    "env.grid_size" => env.grid_size,
    "train.env_steps" => train.env_steps,
    "train.initial_steps" => train.initial_steps,
    "train.batch_size" => train.batch_size,
    "train.replay_capacity" => train.replay_capacity,
    "train.min_replay" => train.min_replay,
    "train.crop_size" => train.crop_size,
    "train.updates_per_step" => train.updates_per_step,
    "train.eval_every" => train.eval_every,
    "train.eval_episodes" => train.eval_episodes,
    "train.strict" => train.strict,
    "train.record_wall_clock" => train.record_wall_clock,
    "train.frame_dump" => train.frame_dump,
    "encoder.conv_layers" => encoder.conv_layers,
    "encoder.filters" => encoder.filters,
    "encoder.latent_dim" => encoder.latent_dim,
    "sac.hidden" => sac.hidden,
    "sac.hidden_layers" => sac.hidden_layers,
    "sac.gamma" => sac.gamma,
    "sac.tau_q" => sac.tau_q,
    "sac.tau_enc" => sac.tau_enc,
    "sac.target_update_period" => sac.target_update_period,
    "sac.actor_update_period" => sac.actor_update_period,
    "sac.init_temperature" => sac.init_temperature,
    "sac.lr" => sac.lr,
    "sac.beta1" => sac.beta1,
    "sac.beta2" => sac.beta2,
    "sac.alpha_lr" => sac.alpha_lr,
    "sac.alpha_beta1" => sac.alpha_beta1,
    "sac.alpha_beta2" => sac.alpha_beta2,
    "sac.target_entropy" => sac.target_entropy,
    "sac.log_std_min" => sac.log_std_min,
    "sac.log_std_max" => sac.log_std_max,
    "dqn.hidden" => dqn.hidden,
    "dqn.hidden_layers" => dqn.hidden_layers,
    "dqn.gamma" => dqn.gamma,
    "dqn.n_step" => dqn.n_step,
    "dqn.lr" => dqn.lr,
    "dqn.adam_eps" => dqn.adam_eps,
    "dqn.target_update_period" => dqn.target_update_period,
    "dqn.tau_enc" => dqn.tau_enc,
    "dqn.eps_start" => dqn.eps_start,
    "dqn.eps_end" => dqn.eps_end,
    "dqn.eps_decay_steps" => dqn.eps_decay_steps,
    "dqn.max_grad_norm" => dqn.max_grad_norm,
    "curl.weight" => curl_weight,
    "ablation.no_curl" => ablation.no_curl,
    "ablation.detach_encoder" => ablation.detach_encoder,
    "ablation.first_frame_contrastive" => ablation.first_frame_contrastive,
    "ablation.no_aug_rl" => ablation.no_aug_rl,
}

impl ExperimentConfig {
    /// Defaults for `profile`, `env` and `agent`.
    pub fn profile(profile: Profile, env: EnvId, agent: AgentKind) -> Self {
        let discrete = env == EnvId::GridChase;
        let mut c = Self::paper(env, agent);
        match profile {
            Profile::Paper => {}
            Profile::Desk => {
                c.env.render_size = 50;
                c.train.crop_size = 42;
                c.train.batch_size = 128;
                c.train.replay_capacity = 20_000;
                c.sac.hidden = 256;
                c.dqn.hidden = 256;
                c.dqn.n_step = 3;
                c.train.env_steps = 30_000;
                c.train.eval_every = 2_500;
                c.env.episode_length = 50;
                if discrete {
                    c.env.action_repeat = 1;
                    c.dqn.target_update_period = 500;
                    c.dqn.eps_decay_steps = 10_000;
                }
            }
            Profile::Quick => {
                c.env.render_size = 25;
                c.train.crop_size = 21;
                c.train.batch_size = 64;
                c.train.replay_capacity = 20_000;
                c.sac.hidden = 128;
                c.dqn.hidden = 128;
                c.dqn.n_step = 3;
                c.train.env_steps = 30_000;
                c.train.eval_every = 5_000;
                c.train.eval_episodes = 5;
                c.train.initial_steps = 500;
                c.train.min_replay = 500;
                c.env.episode_length = 50;
                if discrete {
                    c.env.action_repeat = 1;
                    c.dqn.target_update_period = 500;
                    c.dqn.eps_decay_steps = 10_000;
                } else {
                    c.env.action_repeat = 8;
                }
            }
        }
        c.profile = profile;
        c
    }

    /// Full-scale defaults for continuous or discrete control.
    fn paper(env: EnvId, agent: AgentKind) -> Self {
        let discrete = env == EnvId::GridChase;
        Self {
            profile: Profile::Paper,
            seed: 0,
            agent,
            env: EnvSection {
                id: env,
                render_size: 100,
                frame_stack: if discrete { 4 } else { 3 },
                action_repeat: 4,
                episode_length: 250,
                grid_size: 5,
            },
            train: TrainSection {
                env_steps: if discrete { 400_000 } else { 500_000 },
                initial_steps: if discrete { 1600 } else { 1000 },
                batch_size: if discrete { 32 } else { 512 },
                replay_capacity: 100_000,
                min_replay: if discrete { 1600 } else { 1000 },
                crop_size: 84,
                updates_per_step: 1,
                eval_every: 10_000,
                eval_episodes: 10,
                strict: false,
                record_wall_clock: true,
                frame_dump: String::new(),
            },
            encoder: EncoderSection { conv_layers: NUM_CONV_LAYERS, filters: NUM_FILTERS, latent_dim: LATENT_DIM },
            sac: SacSection {
                hidden: 1024,
                hidden_layers: 2,
                gamma: 0.99,
                tau_q: 0.01,
                tau_enc: 0.05,
                target_update_period: 2,
                actor_update_period: 2,
                init_temperature: 0.1,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                alpha_lr: 1e-4,
                alpha_beta1: 0.5,
                alpha_beta2: 0.999,
                target_entropy: None,
                log_std_min: -10.0,
                log_std_max: 2.0,
            },
            dqn: DqnSection {
                hidden: 256,
                hidden_layers: 1,
                gamma: 0.99,
                n_step: 20,
                lr: 1e-4,
                adam_eps: 1.5e-5,
                target_update_period: 2000,
                tau_enc: 0.001,
                eps_start: 1.0,
                eps_end: 0.01,
                eps_decay_steps: 50_000,
                max_grad_norm: Some(10.0),
            },
            curl_weight: 1.0,
            ablation: UpdateFlags::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let base = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let profile: Profile = base("experiment.profile").map_or(Ok(Profile::Desk), str::parse)?;
        let env: EnvId = base("env.id").map_or(Ok(EnvId::PointMass), |s| s.parse().map_err(|e| anyhow!("{e}")))?;
        let agent: AgentKind = base("experiment.agent").map_or(Ok(AgentKind::Sac), str::parse)?;
        let mut c = Self::profile(profile, env, agent);
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.conv_layers != NUM_CONV_LAYERS || self.encoder.filters != NUM_FILTERS || self.encoder.latent_dim != LATENT_DIM {
            bail!(
                "encoder is fixed at {NUM_CONV_LAYERS} conv layers, {NUM_FILTERS} filters and latent {LATENT_DIM}; got {:?}",
                self.encoder
            );
        }
        self.ablation.validate().map_err(|e| anyhow!("{e}"))?;
        self.env_config().validate(self.train.crop_size).map_err(|e| anyhow!("{e}"))?;
        let discrete = self.env.id == EnvId::GridChase;
        match self.agent {
            AgentKind::Dqn if !discrete => bail!("dqn needs a discrete env, got {}", self.env.id),
            AgentKind::Sac | AgentKind::StateSacOracle if discrete => bail!("{} needs a continuous env", self.agent),
            _ => {}
        }
        if self.train.batch_size == 0 || self.train.updates_per_step == 0 || self.train.eval_episodes == 0 {
            bail!("batch size, updates per step and eval episodes must be >= 1");
        }
        if self.train.eval_every == 0 {
            bail!("train.eval_every must be positive");
        }
        if self.train.replay_capacity < self.train.batch_size {
            bail!("replay capacity {} below batch size {}", self.train.replay_capacity, self.train.batch_size);
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            id: self.env.id,
            render_size: self.env.render_size,
            frame_stack: self.env.frame_stack,
            action_repeat: self.env.action_repeat,
            episode_length: self.env.episode_length,
            grid_size: self.env.grid_size,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            frames: self.env.frame_stack,
            input_size: self.train.crop_size,
            single_frame_head: self.ablation.first_frame_contrastive,
        }
    }

    pub fn sac_config(&self) -> SacConfig {
        let action_dim = match self.env.id.action_space() {
            curl_core::envs::ActionSpace::Continuous { dim } => dim,
            curl_core::envs::ActionSpace::Discrete { .. } => 0,
        };
        let encoder = self.agent.uses_pixels().then(|| self.encoder_config());
        let s = &self.sac;
        SacConfig {
            hidden: s.hidden,
            hidden_layers: s.hidden_layers,
            gamma: s.gamma,
            tau_q: s.tau_q,
            tau_enc: s.tau_enc,
            target_update_period: s.target_update_period,
            actor_update_period: s.actor_update_period,
            init_temperature: s.init_temperature,
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            alpha_lr: s.alpha_lr,
            alpha_beta1: s.alpha_beta1,
            alpha_beta2: s.alpha_beta2,
            target_entropy: s.target_entropy.unwrap_or(-(action_dim as f64)),
            log_std_min: s.log_std_min,
            log_std_max: s.log_std_max,
            curl_weight: self.curl_weight,
            ..SacConfig::new(action_dim, encoder, self.env.id.state_dim())
        }
    }

    pub fn dqn_config(&self) -> DqnConfig {
        let n = match self.env.id.action_space() {
            curl_core::envs::ActionSpace::Discrete { n } => n,
            curl_core::envs::ActionSpace::Continuous { .. } => 0,
        };
        let d = &self.dqn;
        DqnConfig {
            hidden: d.hidden,
            hidden_layers: d.hidden_layers,
            gamma: d.gamma,
            n_step: d.n_step,
            lr: d.lr,
            adam_eps: d.adam_eps,
            target_update_period: d.target_update_period,
            tau_enc: d.tau_enc,
            curl_weight: self.curl_weight,
            max_grad_norm: d.max_grad_norm,
            ..DqnConfig::new(n, Some(self.encoder_config()), self.env.id.state_dim())
        }
    }

    /// Interaction-step budget.
    pub fn interaction_steps(&self) -> u64 {
        self.train.env_steps / self.env.action_repeat as u64
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key=value, got `{raw}`", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for profile in [Profile::Desk, Profile::Paper, Profile::Quick] {
            let c = ExperimentConfig::profile(profile, EnvId::PointMass, AgentKind::Sac);
            let back = ExperimentConfig::parse(&c.to_text()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_key_is_error() {
        let err = ExperimentConfig::parse("sac.learning_rate=0.1\n").unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key"));
    }

    #[test]
    fn comments_and_whitespace() {
        let c = ExperimentConfig::parse("# header\n experiment.seed = 7 # trailing\n\nenv.action_repeat=2\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.env.action_repeat, 2);
    }

    #[test]
    fn encoder_shape_is_fixed() {
        assert!(ExperimentConfig::parse("encoder.filters=64\n").is_err());
    }

    #[test]
    fn desk_profile_values() {
        let c = ExperimentConfig::profile(Profile::Desk, EnvId::PointMass, AgentKind::Sac);
        assert_eq!((c.env.render_size, c.train.crop_size, c.train.batch_size), (50, 42, 128));
        assert_eq!((c.train.replay_capacity, c.sac.hidden, c.train.env_steps), (20_000, 256, 30_000));
    }

    #[test]
    fn agent_env_mismatch() {
        assert!(ExperimentConfig::parse("env.id=gridchase\nexperiment.agent=sac\n").is_err());
        assert!(ExperimentConfig::parse("env.id=pointmass\nexperiment.agent=dqn\n").is_err());
        assert!(ExperimentConfig::parse("env.id=gridchase\nexperiment.agent=dqn\n").is_ok());
    }
}
