//! Configuration files: one directive per line, `;` comments, quoted strings.

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::session::Timers;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Server,
    Client,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub mode: Mode,
    pub listen_port: u16,
    pub vault_path: PathBuf,
    pub server_addr: Option<String>,
    pub server_port: Option<u16>,
    pub user_pad: Option<u32>,
    pub rx_files_dir: Option<PathBuf>,
    pub have_mercy: bool,
    pub delete_turned_pages: bool,
    /// Loopback port for the control API; none disables it.
    pub control_port: Option<u16>,
    /// Lines run by `/b`, in order.
    pub batch: Vec<String>,
    pub timers: Timers,
}

impl Config {
    /// A client config with defaults, for tests and tooling.
    pub fn client(user_pad: u32, vault_path: impl Into<PathBuf>) -> Config {
        Config {
            mode: Mode::Client,
            listen_port: 49494,
            vault_path: vault_path.into(),
            server_addr: None,
            server_port: None,
            user_pad: Some(user_pad),
            rx_files_dir: None,
            have_mercy: false,
            delete_turned_pages: false,
            control_port: None,
            batch: Vec::new(),
            timers: Timers::default(),
        }
    }

    pub fn server(vault_path: impl Into<PathBuf>) -> Config {
        Config { mode: Mode::Server, user_pad: None, ..Config::client(0, vault_path) }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: unknown directive {name:?}")]
    UnknownDirective { line: usize, name: String },
    #[error("missing required directive {0}")]
    MissingRequired(&'static str),
    #[error("line {line}: bad value {value:?} for {directive}")]
    BadValue { line: usize, directive: &'static str, value: String },
    #[error("line {line}: unterminated string")]
    Unterminated { line: usize },
}

/// Split a line into tokens, honouring double quotes and `;` comments.
fn tokens(line: &str, no: usize) -> Result<Vec<String>, ConfigError> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == ';' {
            break;
        } else if c == '"' {
            chars.next();
            let mut s = String::new();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(ch) => s.push(ch),
                    None => return Err(ConfigError::Unterminated { line: no }),
                }
            }
            out.push(s);
        } else {
            let mut s = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() || ch == ';' {
                    break;
                }
                s.push(ch);
                chars.next();
            }
            out.push(s);
        }
    }
    Ok(out)
}

pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let mut server = false;
    let mut listen = None;
    let mut vault = None;
    let mut cfg = Config::client(0, "");
    cfg.user_pad = None;

    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let toks = tokens(raw, no)?;
        let Some((name, args)) = toks.split_first() else { continue };
        let one = |d: &'static str| -> Result<&String, ConfigError> {
            match args {
                [v] => Ok(v),
                _ => Err(ConfigError::BadValue { line: no, directive: d, value: args.join(" ") }),
            }
        };
        let num = |d: &'static str| -> Result<u64, ConfigError> {
            let v = one(d)?;
            v.parse().map_err(|_| ConfigError::BadValue { line: no, directive: d, value: v.clone() })
        };
        let port = |d: &'static str| -> Result<u16, ConfigError> {
            let v = num(d)?;
            u16::try_from(v)
                .ok()
                .filter(|p| *p != 0)
                .ok_or(ConfigError::BadValue { line: no, directive: d, value: v.to_string() })
        };
        let flag = |d: &'static str| -> Result<(), ConfigError> {
            if args.is_empty() {
                Ok(())
            } else {
                Err(ConfigError::BadValue { line: no, directive: d, value: args.join(" ") })
            }
        };
        match name.as_str() {
            "Server" => {
                flag("Server")?;
                server = true;
            }
            "ListenOn" => listen = Some(port("ListenOn")?),
            "Vault" => vault = Some(PathBuf::from(one("Vault")?)),
            "User" => {
                let v = num("User")?;
                cfg.user_pad = Some(u32::try_from(v).ok().filter(|p| *p > 0 && *p <= 99_999).ok_or(
                    ConfigError::BadValue { line: no, directive: "User", value: v.to_string() },
                )?);
            }
            "ServerAddr" => cfg.server_addr = Some(one("ServerAddr")?.clone()),
            "ServerPort" => cfg.server_port = Some(port("ServerPort")?),
            "RxFiles" => cfg.rx_files_dir = Some(PathBuf::from(one("RxFiles")?)),
            "HaveMercy" => {
                flag("HaveMercy")?;
                cfg.have_mercy = true;
            }
            "DeleteTurnedPages" => {
                flag("DeleteTurnedPages")?;
                cfg.delete_turned_pages = true;
            }
            "ControlPort" => cfg.control_port = Some(port("ControlPort")?),
            "Batch" => cfg.batch.push(one("Batch")?.clone()),
            "FirstRetryMs" => cfg.timers.first_retry = Duration::from_millis(num("FirstRetryMs")?),
            "RetryMs" => cfg.timers.later_retry = Duration::from_millis(num("RetryMs")?),
            other => return Err(ConfigError::UnknownDirective { line: no, name: other.to_string() }),
        }
    }

    cfg.mode = if server { Mode::Server } else { Mode::Client };
    cfg.listen_port = listen.ok_or(ConfigError::MissingRequired("ListenOn"))?;
    cfg.vault_path = vault.ok_or(ConfigError::MissingRequired("Vault"))?;
    if cfg.mode == Mode::Client {
        if cfg.user_pad.is_none() {
            return Err(ConfigError::MissingRequired("User"));
        }
        if cfg.server_addr.is_none() {
            return Err(ConfigError::MissingRequired("ServerAddr"));
        }
        if cfg.server_port.is_none() {
            return Err(ConfigError::MissingRequired("ServerPort"));
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SERVER: &str = r#"; hub node
Server                ; accept clients
ListenOn 49494        ; udp
Vault "/var/otp"      ; pads and pad.metadata
"#;

    const CLIENT: &str = r#"; laptop

User 3          ; pad shared with the hub
ListenOn 49494  ; udp

ServerAddr "hub.example.net" ; quoted host
ServerPort 49494 ; hub udp port

Vault "/var/otp" ; pads and pad.metadata
RxFiles "/tmp/rx" ; incoming files land here
"#;

    #[test]
    fn server_file() {
        let c = parse_config(SERVER).unwrap();
        assert_eq!(c.mode, Mode::Server);
        assert_eq!(c.listen_port, 49494);
        assert_eq!(c.vault_path, PathBuf::from("/var/otp"));
        assert_eq!(c.rx_files_dir, None);
    }

    #[test]
    fn client_file() {
        let c = parse_config(CLIENT).unwrap();
        assert_eq!(c.mode, Mode::Client);
        assert_eq!(c.user_pad, Some(3));
        assert_eq!(c.server_addr.as_deref(), Some("hub.example.net"));
        assert_eq!(c.server_port, Some(49494));
        assert_eq!(c.rx_files_dir, Some(PathBuf::from("/tmp/rx")));
        assert!(!c.have_mercy);
    }

    #[test]
    fn errors() {
        assert_eq!(
            parse_config(&CLIENT.replace("User 3", "")).unwrap_err(),
            ConfigError::MissingRequired("User")
        );
        assert!(matches!(
            parse_config(&format!("{SERVER}Colour blue\n")),
            Err(ConfigError::UnknownDirective { line: 5, .. })
        ));
        assert!(matches!(parse_config("ListenOn 0\n"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(parse_config("Vault \"/x\n"), Err(ConfigError::Unterminated { line: 1 })));
    }

    #[test]
    fn extensions() {
        let c = parse_config(&format!(
            "{SERVER}HaveMercy\nControlPort 49500\nBatch \"/1\"\nBatch \"/g65536 ; not a comment\"\nFirstRetryMs 100\n"
        ))
        .unwrap();
        assert!(c.have_mercy);
        assert_eq!(c.control_port, Some(49500));
        assert_eq!(c.batch, vec!["/1".to_string(), "/g65536 ; not a comment".to_string()]);
        assert_eq!(c.timers.first_retry, Duration::from_millis(100));
    }
}
