//! Scripted stand-in for the REPL, speaking the identical wire protocol.
//!
//! Behaviour is driven by directives embedded in the submitted source as
//! line comments, so the same text stays valid input for the real checker:
//!
//! | directive               | effect                                        |
//! |-------------------------|-----------------------------------------------|
//! | `-- @stub sleep <ms>`   | delay the response                            |
//! | `-- @stub hang`         | never respond                                 |
//! | `-- @stub crash`        | exit without responding                       |
//! | `-- @stub error <text>` | report an error at the directive's line       |
//! | `-- @stub when <s>: <d>`| apply `<d>` only if another line contains `<s>` |
//! | `-- @stub unless <s>: <d>`| apply `<d>` only if no other line contains `<s>` |
//!
//! Conditions chain, as in `-- @stub unless _neg: unless sorry: error no`.
//!
//! Without directives the stub reports a placeholder warning for every
//! `sorry` token and an error when the source ends in a dangling `:=`; any
//! other source elaborates cleanly.
//!
//! When `HERMES_STUB_LOG` names a file, the stub appends one event per line:
//! `start <pid>`, `begin <pid>`, `end <pid>`, `term <pid>` (SIGTERM received),
//! `crash <pid>` and `exit <pid>`. Appends are atomic, so replaying the file
//! in order reconstructs how many requests were in flight at any instant.

use std::fs::OpenOptions;
use std::io::{self, BufRead, Write};
use std::time::Duration;

use super::protocol::{Request, Response, WireMessage, WirePos};

pub const LOG_ENV: &str = "HERMES_STUB_LOG";

fn log_event(event: &str) {
    if let Some(path) = std::env::var_os(LOG_ENV) {
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
            let _ = f.write_all(format!("{event} {}\n", std::process::id()).as_bytes());
        }
    }
}

#[derive(Debug, Default, PartialEq)]
struct Directives {
    sleep_ms: u64,
    hang: bool,
    crash: bool,
    errors: Vec<(u32, String)>,
}

fn directives(source: &str) -> Directives {
    let mut d = Directives::default();
    let plain: Vec<&str> = source.lines().filter(|l| !l.contains("@stub")).collect();
    for (i, line) in source.lines().enumerate() {
        let Some(mut rest) = line.split_once("@stub").map(|(_, r)| r.trim()) else {
            continue;
        };
        // Conditions chain: `when a: unless b: hang`.
        let mut applies = true;
        while let Some((cond, want)) = [("when ", true), ("unless ", false)]
            .into_iter()
            .find_map(|(kw, want)| rest.strip_prefix(kw).map(|c| (c, want)))
        {
            let Some((needle, inner)) = cond.split_once(':') else {
                applies = false;
                break;
            };
            applies &= plain.iter().any(|l| l.contains(needle.trim())) == want;
            rest = inner.trim();
        }
        if !applies {
            continue;
        }
        let (word, arg) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
        match word {
            "sleep" => d.sleep_ms += arg.trim().parse::<u64>().unwrap_or(0),
            "hang" => d.hang = true,
            "crash" => d.crash = true,
            "error" => d.errors.push((i as u32 + 1, arg.trim().to_string())),
            _ => {}
        }
    }
    d
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\'' || c == '.'
}

/// Line/column (0-based column) of every standalone `sorry` token outside
/// line comments.
fn sorry_positions(source: &str) -> Vec<WirePos> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let code = line.split("--").next().unwrap_or("");
        let mut search = 0;
        while let Some(off) = code[search..].find("sorry") {
            let start = search + off;
            let end = start + "sorry".len();
            let before = code[..start].chars().next_back();
            let after = code[end..].chars().next();
            if !before.is_some_and(is_ident_char) && !after.is_some_and(is_ident_char) {
                out.push(WirePos {
                    line: i as u32 + 1,
                    column: code[..start].chars().count() as u32,
                });
            }
            search = end;
        }
    }
    out
}

/// The response the stub gives for `source`, ignoring timing directives.
pub fn respond(source: &str, env: u64) -> Response {
    let d = directives(source);
    let mut messages = Vec::new();
    let mut sorries = Vec::new();
    for pos in sorry_positions(source) {
        sorries.push(serde_json::json!({ "pos": { "line": pos.line, "column": pos.column } }));
        messages.push(WireMessage {
            severity: "warning".into(),
            pos: Some(pos),
            end_pos: None,
            data: "declaration uses 'sorry'".into(),
        });
    }
    let trimmed = source.trim_end();
    if trimmed.ends_with(":=") || trimmed.ends_with(":= by") {
        messages.push(WireMessage {
            severity: "error".into(),
            pos: Some(WirePos {
                line: source.lines().count().max(1) as u32,
                column: 0,
            }),
            end_pos: None,
            data: "unexpected end of input; expected term".into(),
        });
    }
    for (line, text) in d.errors {
        messages.push(WireMessage {
            severity: "error".into(),
            pos: Some(WirePos { line, column: 0 }),
            end_pos: None,
            data: if text.is_empty() { "tactic failed".into() } else { text },
        });
    }
    Response {
        env: Some(env),
        messages,
        sorries,
        message: None,
    }
}

/// Runs the stub on the process's standard streams until stdin closes.
pub fn run() -> io::Result<()> {
    log_event("start");
    let mut signals = signal_hook::iterator::Signals::new([signal_hook::consts::SIGTERM])?;
    std::thread::spawn(move || {
        if signals.forever().next().is_some() {
            log_event("term");
            std::process::exit(143);
        }
    });

    let stdin = io::stdin();
    let mut stdout = io::stdout();
    let mut env = 0u64;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                log_event("begin");
                let d = directives(&req.cmd);
                if d.crash {
                    log_event("crash");
                    std::process::exit(3);
                }
                if d.hang {
                    loop {
                        std::thread::sleep(Duration::from_secs(3600));
                    }
                }
                if d.sleep_ms > 0 {
                    std::thread::sleep(Duration::from_millis(d.sleep_ms));
                }
                let r = respond(&req.cmd, env);
                env += 1;
                log_event("end");
                r
            }
            Err(e) => Response {
                message: Some(format!("Could not parse JSON: {e}")),
                ..Default::default()
            },
        };
        writeln!(stdout, "{}", serde_json::to_string(&response)?)?;
        writeln!(stdout)?;
        stdout.flush()?;
    }
    log_event("exit");
    Ok(())
}
