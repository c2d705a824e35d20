//! Child process supervision: every process runs in its own process group,
//! is asked to stop with SIGTERM and killed after a grace period.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::os::fd::AsRawFd;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, ExitStatus, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

/// How long killed stragglers get to disappear.
const STRAGGLER_WAIT: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum SuperviseError {
    #[error("cannot start {name} ({program}): {source}")]
    Spawn { name: String, program: String, source: io::Error },
    #[error("{name}: {source}")]
    Io { name: String, source: io::Error },
    #[error("{name} did not answer within {waited:?}")]
    Timeout { name: String, waited: Duration },
    #[error("{name} closed its output")]
    Closed { name: String },
}

#[derive(Debug, Clone, Default)]
pub struct Launch {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    /// Pipe stdin/stdout for a control channel; otherwise both are null.
    pub control: bool,
}

impl Launch {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Launch { program: program.into(), ..Default::default() }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }

    pub fn env(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.env.insert(k.into(), v.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExitReport {
    pub name: String,
    pub already_exited: bool,
    pub graceful: bool,
    pub hard_killed: bool,
    pub code: Option<i32>,
    pub signal: Option<i32>,
    /// Time between SIGTERM and SIGKILL.
    #[serde(serialize_with = "ser_ms")]
    pub kill_after: Option<Duration>,
    /// Other group members still alive after the leader exited.
    pub stragglers: bool,
}

fn ser_ms<S: serde::Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
    match d {
        Some(d) => s.serialize_some(&(d.as_secs_f64() * 1000.0)),
        None => s.serialize_none(),
    }
}

/// Reads newline-terminated lines from a pipe with a deadline.
pub struct LineReader {
    pipe: ChildStdout,
    buf: Vec<u8>,
}

impl LineReader {
    pub fn new(pipe: ChildStdout) -> Self {
        LineReader { pipe, buf: Vec::new() }
    }

    /// `Ok(None)` at end of stream.
    pub fn read_line(&mut self, timeout: Duration) -> io::Result<Option<String>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = self.buf.drain(..=pos).collect();
                return Ok(Some(String::from_utf8_lossy(&line[..pos]).into_owned()));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(io::ErrorKind::TimedOut.into());
            }
            let mut pfd = libc::pollfd { fd: self.pipe.as_raw_fd(), events: libc::POLLIN, revents: 0 };
            let ms = left.as_millis().clamp(1, i32::MAX as u128) as i32;
            // SAFETY: one valid pollfd.
            let r = unsafe { libc::poll(&mut pfd, 1, ms) };
            if r < 0 {
                let e = io::Error::last_os_error();
                if e.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(e);
            }
            if r == 0 {
                continue;
            }
            let mut chunk = [0u8; 8192];
            let n = self.pipe.read(&mut chunk)?;
            if n == 0 {
                return Ok(None);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }
}

pub struct Proc {
    name: String,
    child: Child,
    pgid: i32,
    stdin: Option<ChildStdin>,
    stdout: Option<LineReader>,
    exited: Option<ExitStatus>,
}

impl Proc {
    pub fn spawn(name: &str, launch: &Launch) -> Result<Proc, SuperviseError> {
        let mut cmd = Command::new(&launch.program);
        cmd.args(&launch.args).envs(&launch.env).process_group(0).stderr(Stdio::inherit());
        if launch.control {
            cmd.stdin(Stdio::piped()).stdout(Stdio::piped());
        } else {
            cmd.stdin(Stdio::null()).stdout(Stdio::null());
        }
        let mut child = cmd.spawn().map_err(|source| SuperviseError::Spawn {
            name: name.to_string(),
            program: launch.program.display().to_string(),
            source,
        })?;
        let pgid = child.id() as i32;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().map(LineReader::new);
        Ok(Proc { name: name.to_string(), child, pgid, stdin, stdout, exited: None })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn pgid(&self) -> i32 {
        self.pgid
    }

    pub fn alive(&mut self) -> bool {
        self.poll_exit().is_none()
    }

    fn poll_exit(&mut self) -> Option<ExitStatus> {
        if self.exited.is_none() {
            self.exited = self.child.try_wait().ok().flatten();
        }
        self.exited
    }

    fn io_err(&self, source: io::Error) -> SuperviseError {
        SuperviseError::Io { name: self.name.clone(), source }
    }

    pub fn send_line(&mut self, line: &str) -> Result<(), SuperviseError> {
        let Some(stdin) = self.stdin.as_mut() else {
            return Err(SuperviseError::Closed { name: self.name.clone() });
        };
        let res = stdin.write_all(line.as_bytes()).and_then(|_| stdin.write_all(b"\n")).and_then(|_| stdin.flush());
        res.map_err(|e| self.io_err(e))
    }

    pub fn read_line(&mut self, timeout: Duration) -> Result<String, SuperviseError> {
        let Some(out) = self.stdout.as_mut() else {
            return Err(SuperviseError::Closed { name: self.name.clone() });
        };
        match out.read_line(timeout) {
            Ok(Some(l)) => Ok(l),
            Ok(None) => Err(SuperviseError::Closed { name: self.name.clone() }),
            Err(e) if e.kind() == io::ErrorKind::TimedOut => {
                Err(SuperviseError::Timeout { name: self.name.clone(), waited: timeout })
            }
            Err(e) => Err(self.io_err(e)),
        }
    }

    /// True while any process of the group is still running. Zombies
    /// reparented to an init that never reaps them count as gone.
    pub fn group_alive(&self) -> bool {
        // SAFETY: signal 0 only checks for existence.
        if unsafe { libc::kill(-self.pgid, 0) } != 0 {
            return false;
        }
        running_in_group(self.pgid).is_none_or(|n| n > 0)
    }

    fn signal_group(&self, sig: libc::c_int) {
        // SAFETY: plain kill(2) on our own process group.
        unsafe {
            libc::kill(-self.pgid, sig);
        }
    }

    /// SIGTERM, then SIGKILL once `grace` has passed.
    pub fn stop(&mut self, grace: Duration) -> ExitReport {
        let mut report = ExitReport {
            name: self.name.clone(),
            already_exited: false,
            graceful: false,
            hard_killed: false,
            code: None,
            signal: None,
            kill_after: None,
            stragglers: false,
        };
        let status = if let Some(s) = self.poll_exit() {
            report.already_exited = true;
            s
        } else {
            self.signal_group(libc::SIGTERM);
            let term_at = Instant::now();
            let mut graceful = None;
            while term_at.elapsed() < grace {
                if let Some(s) = self.poll_exit() {
                    graceful = Some(s);
                    break;
                }
                sleep(Duration::from_millis(2));
            }
            match graceful {
                Some(s) => {
                    report.graceful = true;
                    s
                }
                None => {
                    self.signal_group(libc::SIGKILL);
                    report.kill_after = Some(term_at.elapsed());
                    report.hard_killed = true;
                    let s = self.child.wait().unwrap_or_else(|_| ExitStatus::from_raw(libc::SIGKILL));
                    self.exited = Some(s);
                    s
                }
            }
        };
        self.stdin = None;
        report.code = status.code();
        report.signal = status.signal();
        if self.group_alive() {
            report.stragglers = true;
            self.signal_group(libc::SIGKILL);
            let killed_at = Instant::now();
            while self.group_alive() && killed_at.elapsed() < STRAGGLER_WAIT {
                sleep(Duration::from_millis(2));
            }
        }
        report
    }
}

/// Non-zombie processes in group `pgid`, or `None` without a readable /proc.
pub fn running_in_group(pgid: i32) -> Option<usize> {
    let want = pgid.to_string();
    let mut n = 0;
    for e in std::fs::read_dir("/proc").ok()?.flatten() {
        let name = e.file_name();
        if !name.to_string_lossy().bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let Ok(stat) = std::fs::read_to_string(e.path().join("stat")) else { continue };
        // The command name may contain anything; fields after the last ')'
        // start with state, ppid, pgrp.
        let Some((_, rest)) = stat.rsplit_once(')') else { continue };
        let f: Vec<&str> = rest.split_whitespace().take(3).collect();
        if f.len() == 3 && f[2] == want && f[0] != "Z" {
            n += 1;
        }
    }
    Some(n)
}

impl Drop for Proc {
    fn drop(&mut self) {
        if self.poll_exit().is_none() {
            self.signal_group(libc::SIGKILL);
            let _ = self.child.wait();
        }
    }
}
