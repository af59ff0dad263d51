//! Argument and environment parsing for the `quine` executable.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use crate::env_vars;
use crate::error::{Error, Result};
use crate::guest::{HttpConfig, ProviderConfig};
use crate::host::{Host, HostConfig, DEFAULT_CONTEXT_WINDOW, DEFAULT_MAX_TURNS, DEFAULT_PRESSURE_THRESHOLD, EXIT_USAGE};
use crate::protocol::{ChannelSet, Mission, WisdomMap};
use crate::tools::{self, EnvMap};

pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

const ENV_HELP: &str = "\
Environment:
  QUINE_PROVIDER           mock | http (default: mock if QUINE_MOCK_SCRIPT is set, else http)
  QUINE_API_BASE           chat-completions base URL (default: https://api.openai.com/v1)
  QUINE_API_KEY            bearer token for the http provider
  QUINE_MODEL              model id for the http provider (required with http)
  QUINE_MAX_TURNS          Guest turns per generation before exit 70 (default: 32)
  QUINE_TRACE_DIR          directory for per-session .qtrace files
  QUINE_MOCK_SCRIPT        JSON script for the mock provider
  QUINE_GENERATION         exec generation counter (set by the runtime)
  QUINE_WISDOM_<key>       wisdom carried across exec (set by the runtime)
  QUINE_SESSION_ID         this process's session id (set by the runtime)
  QUINE_PARENT_SESSION     session id of the forking parent (set by the runtime)
  QUINE_CONTEXT_WINDOW     context window in tokens for the renewal advisory (default: 128000)
  QUINE_CONTEXT_THRESHOLD  fraction of the window that triggers the advisory (default: 0.8)

Flags take precedence over their environment equivalents.

Channels: argv = mission, stdin = material, stdout = deliverable,
stderr = diagnostics, exit status = outcome.

Reserved exit statuses: 64 usage error, 70 turn budget exhausted,
71 stream or host setup failure, 75 provider failure,
127 child spawn failure.";

#[derive(Debug, Clone, PartialEq, Eq, clap::ValueEnum)]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Parser)]
#[command(
    name = "quine",
    version,
    about = "Run an LLM agent as an ordinary POSIX process.",
    after_help = ENV_HELP
)]
pub struct Flags {
    /// Maximum Guest turns per generation.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    pub max_turns: Option<u32>,

    /// Directory that receives the session trace.
    #[arg(long, value_name = "DIR")]
    pub trace: Option<PathBuf>,

    /// Guest provider.
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,

    /// The mission; all words are joined with single spaces.
    #[arg(value_name = "MISSION", trailing_var_arg = true)]
    pub mission_words: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub mission_words: Vec<String>,
    pub flags: Flags,
    pub env_snapshot: EnvMap,
}

/// Outcome of parsing: a runnable launch, or text to print before exiting 0.
#[derive(Debug, Clone)]
pub enum Parsed {
    Launch(LaunchSpec),
    Info(String),
}

fn env_get(env: &EnvMap, key: &str) -> Option<String> {
    env.get(&OsString::from(key))
        .and_then(|v| v.to_str())
        .filter(|v| !v.is_empty())
        .map(str::to_string)
}

/// Separates flags from mission words. `argv[0]` is the program name.
pub fn parse_launch<I, T>(argv: I, env: EnvMap) -> Result<Parsed>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let flags = match Flags::try_parse_from(argv) {
        Ok(f) => f,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(Parsed::Info(e.render().to_string())),
                _ => Err(Error::Usage(e.render().to_string())),
            };
        }
    };
    if flags.mission_words.iter().all(|w| w.trim().is_empty()) {
        return Err(Error::Usage("a mission is required, e.g. quine \"summarize the log\"".into()));
    }
    Ok(Parsed::Launch(LaunchSpec {
        mission_words: flags.mission_words.clone(),
        flags,
        env_snapshot: env,
    }))
}

impl LaunchSpec {
    pub fn mission(&self) -> Result<Mission> {
        Mission::from_words(&self.mission_words).map_err(|e| Error::Usage(e.to_string()))
    }

    /// Wisdom and generation inherited through the environment.
    pub fn inherited_wisdom(&self) -> WisdomMap {
        WisdomMap::from_env(
            self.env_snapshot
                .iter()
                .filter_map(|(k, v)| Some((k.to_str()?, v.to_str()?))),
        )
    }

    pub fn max_turns(&self) -> Result<u32> {
        if let Some(n) = self.flags.max_turns {
            return Ok(n);
        }
        match env_get(&self.env_snapshot, env_vars::MAX_TURNS) {
            None => Ok(DEFAULT_MAX_TURNS),
            Some(s) => match s.parse::<u32>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(Error::Usage(format!("{}={s:?} is not a positive integer", env_vars::MAX_TURNS))),
            },
        }
    }

    pub fn trace_dir(&self) -> Option<PathBuf> {
        self.flags
            .trace
            .clone()
            .or_else(|| env_get(&self.env_snapshot, env_vars::TRACE_DIR).map(PathBuf::from))
    }

    pub fn provider(&self) -> Result<ProviderConfig> {
        let kind = match &self.flags.provider {
            Some(k) => k.clone(),
            None => match env_get(&self.env_snapshot, env_vars::PROVIDER).as_deref() {
                Some("mock") => ProviderKind::Mock,
                Some("http") => ProviderKind::Http,
                Some(other) => {
                    return Err(Error::Usage(format!(
                        "{}={other:?}: expected mock or http",
                        env_vars::PROVIDER
                    )))
                }
                None if env_get(&self.env_snapshot, env_vars::MOCK_SCRIPT).is_some() => ProviderKind::Mock,
                None => ProviderKind::Http,
            },
        };
        match kind {
            ProviderKind::Mock => {
                let script = env_get(&self.env_snapshot, env_vars::MOCK_SCRIPT).ok_or_else(|| {
                    Error::Usage(format!("the mock provider needs {}", env_vars::MOCK_SCRIPT))
                })?;
                Ok(ProviderConfig::Mock { script: script.into() })
            }
            ProviderKind::Http => {
                let model = env_get(&self.env_snapshot, env_vars::MODEL)
                    .ok_or_else(|| Error::Usage(format!("the http provider needs {}", env_vars::MODEL)))?;
                let base = env_get(&self.env_snapshot, env_vars::API_BASE).unwrap_or_else(|| DEFAULT_API_BASE.into());
                let mut cfg = HttpConfig::new(base, model);
                cfg.api_key = env_get(&self.env_snapshot, env_vars::API_KEY);
                Ok(ProviderConfig::Http(cfg))
            }
        }
    }

    fn env_number<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match env_get(&self.env_snapshot, key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Usage(format!("{key}={s:?} is not a valid number"))),
        }
    }

    pub fn host_config(&self) -> Result<HostConfig> {
        let mut cfg = HostConfig::new(self.provider()?);
        cfg.max_turns = self.max_turns()?;
        cfg.trace_dir = self.trace_dir();
        cfg.context_window_tokens = self.env_number(env_vars::CONTEXT_WINDOW, DEFAULT_CONTEXT_WINDOW)?;
        cfg.context_pressure_threshold = self.env_number(env_vars::CONTEXT_THRESHOLD, DEFAULT_PRESSURE_THRESHOLD)?;
        let t = cfg.context_pressure_threshold;
        if t.is_nan() || t <= 0.0 || t > 1.0 {
            return Err(Error::Usage(format!("{} must be in (0, 1]", env_vars::CONTEXT_THRESHOLD)));
        }
        Ok(cfg)
    }

    /// The environment handed to tools and children: the snapshot with flag
    /// values exported so descendants inherit them.
    pub fn runtime_env(&self, config: &HostConfig) -> EnvMap {
        let mut env = self.env_snapshot.clone();
        env.insert(env_vars::MAX_TURNS.into(), config.max_turns.to_string().into());
        if let Some(d) = &config.trace_dir {
            env.insert(env_vars::TRACE_DIR.into(), d.clone().into());
        }
        env.insert(
            env_vars::PROVIDER.into(),
            match config.provider {
                ProviderConfig::Mock { .. } => "mock",
                ProviderConfig::Http(_) => "http",
            }
            .into(),
        );
        env
    }
}

fn usage_exit(message: &str) -> i32 {
    let text = message.trim_end();
    let text = text.strip_prefix("error: ").unwrap_or(text);
    eprintln!("quine: {text}");
    eprintln!("Try 'quine --help' for more information.");
    EXIT_USAGE
}

/// Full program: parse, wire channels, run the loop. Returns the exit status.
pub fn main_with(argv: Vec<OsString>, env: EnvMap) -> i32 {
    let spec = match parse_launch(argv.clone(), env) {
        Ok(Parsed::Launch(s)) => s,
        Ok(Parsed::Info(text)) => {
            print!("{text}");
            return 0;
        }
        Err(Error::Usage(m)) => return usage_exit(&m),
        Err(e) => return usage_exit(&e.to_string()),
    };
    let prepared = spec.mission().and_then(|m| Ok((m, spec.host_config()?)));
    let (mission, config) = match prepared {
        Ok(v) => v,
        Err(Error::Usage(m)) => return usage_exit(&m),
        Err(e) => return usage_exit(&e.to_string()),
    };
    tools::reserve_low_fds();
    let channels = match ChannelSet::inherit() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("quine: cannot set up standard streams: {e}");
            return 71;
        }
    };
    let guest = match config.provider.build() {
        Ok(g) => g,
        Err(e) => {
            eprintln!("quine: {e}");
            return EXIT_USAGE;
        }
    };
    let env = spec.runtime_env(&config);
    match Host::new(config, mission, argv, env, channels, guest) {
        Ok(mut host) => host.run(),
        Err(e) => {
            eprintln!("quine: {e}");
            71
        }
    }
}
