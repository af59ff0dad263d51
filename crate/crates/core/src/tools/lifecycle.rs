use std::ffi::OsString;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::Command;

use super::{EnvMap, ExecCall, ExitCall, JobTable};
use crate::error::Error;
use crate::protocol::{ChannelSet, WisdomMap};

/// Everything needed to replace the process image.
#[derive(Debug, Clone)]
pub struct ExecPlan {
    pub self_image: PathBuf,
    /// Full original argv, including argv[0].
    pub argv: Vec<OsString>,
    pub env: EnvMap,
    pub wisdom: WisdomMap,
}

/// The environment of the next generation: `env` with the merged wisdom
/// written in and the generation counter advanced.
pub fn exec_environment(env: &EnvMap, current: &WisdomMap, call: &ExecCall) -> (EnvMap, WisdomMap) {
    let next = current.successor(&call.wisdom);
    let mut out = env.clone();
    for (k, v) in next.to_env() {
        out.insert(k.into(), v.into());
    }
    (out, next)
}

impl ExecPlan {
    pub fn new(self_image: &Path, argv: &[OsString], env: &EnvMap, current: &WisdomMap, call: &ExecCall) -> Self {
        let (env, wisdom) = exec_environment(env, current, call);
        ExecPlan {
            self_image: self_image.to_path_buf(),
            argv: argv.to_vec(),
            env,
            wisdom,
        }
    }

    fn command(&self) -> Command {
        let mut cmd = Command::new(&self.self_image);
        if let Some((arg0, rest)) = self.argv.split_first() {
            cmd.arg0(arg0).args(rest);
        }
        cmd.env_clear().envs(&self.env);
        cmd
    }
}

/// Replaces the process image with the same executable and argv. Only
/// returns if exec(2) fails; PID, parent, environment and fds 0/1/2 persist
/// otherwise while all process memory is discarded.
pub fn do_exec(plan: &ExecPlan) -> Error {
    let source = plan.command().exec();
    Error::ExecFailure {
        path: plan.self_image.clone(),
        source,
    }
}

/// Writes the optional message and terminates unwaited children. Returns the
/// status to exit with.
pub fn prepare_exit(call: &ExitCall, channels: &ChannelSet, jobs: &mut JobTable) -> i32 {
    if let Some(msg) = &call.message {
        channels.diagnose(msg);
    }
    let killed = jobs.terminate_all();
    if !killed.is_empty() {
        channels.diagnose(&format!("quine: terminated {} unwaited child(ren): {killed:?}", killed.len()));
    }
    call.status as i32
}

pub fn do_exit(call: &ExitCall, channels: &ChannelSet, jobs: &mut JobTable) -> ! {
    let status = prepare_exit(call, channels, jobs);
    std::process::exit(status)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn environment_advances_generation() {
        let mut env = EnvMap::new();
        env.insert("KEEP".into(), "1".into());
        env.insert("QUINE_WISDOM_old".into(), "o".into());
        let current = WisdomMap::from_entries([("old", "o")], 2).unwrap();
        let call = ExecCall {
            wisdom: WisdomMap::from_entries([("a", "1")], 0).unwrap(),
        };
        let (out, next) = exec_environment(&env, &current, &call);
        assert_eq!(next.generation(), 3);
        assert_eq!(out.get(&OsString::from("QUINE_GENERATION")), Some(&OsString::from("3")));
        assert_eq!(out.get(&OsString::from("QUINE_WISDOM_a")), Some(&OsString::from("1")));
        assert_eq!(out.get(&OsString::from("QUINE_WISDOM_old")), Some(&OsString::from("o")));
        assert_eq!(out.get(&OsString::from("KEEP")), Some(&OsString::from("1")));
        let decoded = WisdomMap::from_env(
            out.iter()
                .map(|(k, v)| (k.to_string_lossy().into_owned(), v.to_string_lossy().into_owned())),
        );
        assert_eq!(decoded, next);
    }

    #[test]
    fn exec_failure_returns() {
        let plan = ExecPlan {
            self_image: "/nonexistent/quine".into(),
            argv: vec!["quine".into(), "m".into()],
            env: EnvMap::new(),
            wisdom: WisdomMap::default(),
        };
        assert!(matches!(do_exec(&plan), Error::ExecFailure { .. }));
    }
}
