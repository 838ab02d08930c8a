//! Spawning one isolated child process with a wall-clock limit, an address-space
//! limit and a scratch working directory.

use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

use super::{Limits, SandboxError};

const OUTPUT_CAP: usize = 64 * 1024;

#[derive(Debug)]
pub(crate) struct ProcessOutput {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub elapsed: Duration,
}

fn read_capped(mut r: impl Read) -> String {
    let mut buf = Vec::new();
    let _ = r.by_ref().take(OUTPUT_CAP as u64).read_to_end(&mut buf);
    // Drain the rest so the child never blocks on a full pipe.
    let _ = std::io::copy(&mut r, &mut std::io::sink());
    String::from_utf8_lossy(&buf).into_owned()
}

/// Runs `argv` inside `scratch`, feeding `input` on stdin.
pub(crate) fn run_isolated(argv: &[String], scratch: &Path, input: &[u8], limits: &Limits) -> Result<ProcessOutput, SandboxError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| SandboxError::SandboxUnavailable("empty command".into()))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(scratch)
        .env_clear()
        .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()))
        .env("HOME", scratch)
        .env("TMPDIR", scratch)
        .env("LANG", "C.UTF-8")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if limits.no_network {
        // Unroutable proxy for clients that honour proxy variables.
        cmd.env("http_proxy", "http://127.0.0.1:9").env("https_proxy", "http://127.0.0.1:9");
    }
    let memory = limits.memory_mb.saturating_mul(1024 * 1024);
    // SAFETY: only async-signal-safe libc calls run between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            if memory > 0 {
                let lim = libc::rlimit {
                    rlim_cur: memory as libc::rlim_t,
                    rlim_max: memory as libc::rlim_t,
                };
                libc::setrlimit(libc::RLIMIT_AS, &lim);
            }
            Ok(())
        });
    }
    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|e| {
        SandboxError::SandboxUnavailable(format!("cannot spawn `{program}`: {e}"))
    })?;
    let pid = child.id() as libc::pid_t;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let input = input.to_vec();
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    let out_reader = thread::spawn(move || read_capped(stdout));
    let err_reader = thread::spawn(move || read_capped(stderr));

    let wall = Duration::from_secs_f64(limits.wall_seconds.max(0.0));
    let status = child
        .wait_timeout(wall)
        .map_err(|e| SandboxError::SandboxUnavailable(e.to_string()))?;
    let (exit_code, timed_out) = match status {
        Some(status) => (status.code(), false),
        None => {
            // SAFETY: pid is our own child's process group leader.
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            let _ = child.kill();
            let _ = child.wait();
            (None, true)
        }
    };
    let elapsed = start.elapsed();
    // Grandchildren may hold the pipes open; the group kill above closes them.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
    let _ = writer.join();
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    Ok(ProcessOutput {
        stdout,
        stderr,
        exit_code,
        timed_out,
        elapsed,
    })
}
