//! Operator input lines.

use thiserror::Error;

pub const HELP: &str = "\
/? help
/4 use session 4
/a abort /g or /s
/b execute the configured batch of commands
/c connect this session
/d disconnect this session
/f forget a missing ACK
/g20 send 20 bytes of ciphertext gibberish
/q quit program at both endpoints
/sFILE send FILE to remote system
/s/tmp list files in /tmp to remote system
/v vault information
/x1,2,4 give clients on pads 1 and 2 a new 4-page pad (hub only)
/Z crash deliberately (test builds only)
// include literal / in message";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Help,
    Select(u32),
    Abort,
    Batch,
    Connect,
    Disconnect,
    Forget,
    Gibberish(u64),
    Quit,
    Send(String),
    Vault,
    Crash,
    Distribute { a: u32, b: u32, pages: u32, pad: Option<u32> },
    Chat(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("unknown command {0:?}; /? lists commands")]
    UnknownCommand(String),
    #[error("bad argument for {cmd}: {arg:?}")]
    BadArgument { cmd: &'static str, arg: String },
}

pub fn parse_command(line: &str) -> Result<Option<Command>, ParseError> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.is_empty() {
        return Ok(None);
    }
    let Some(rest) = line.strip_prefix('/') else {
        return Ok(Some(Command::Chat(line.to_string())));
    };
    if rest.starts_with('/') {
        return Ok(Some(Command::Chat(rest.to_string())));
    }
    let unknown = || ParseError::UnknownCommand(line.to_string());
    let mut chars = rest.chars();
    let Some(c) = chars.next() else { return Err(unknown()) };
    let arg = chars.as_str();
    let bare = |cmd| if arg.trim().is_empty() { Ok(Some(cmd)) } else { Err(unknown()) };
    match c {
        '?' => bare(Command::Help),
        '0'..='9' => rest
            .trim()
            .parse()
            .map(|n| Some(Command::Select(n)))
            .map_err(|_| ParseError::BadArgument { cmd: "/N", arg: rest.to_string() }),
        'a' => bare(Command::Abort),
        'b' => bare(Command::Batch),
        'c' => bare(Command::Connect),
        'd' => bare(Command::Disconnect),
        'f' | 'F' => bare(Command::Forget),
        'g' => match arg.trim().parse::<u64>() {
            Ok(n) if n > 0 => Ok(Some(Command::Gibberish(n))),
            _ => Err(ParseError::BadArgument { cmd: "/g", arg: arg.to_string() }),
        },
        'q' => bare(Command::Quit),
        's' => {
            let path = arg.trim();
            if path.is_empty() {
                Err(ParseError::BadArgument { cmd: "/s", arg: arg.to_string() })
            } else {
                Ok(Some(Command::Send(path.to_string())))
            }
        }
        'v' => bare(Command::Vault),
        'Z' => bare(Command::Crash),
        'x' => {
            let bad = || ParseError::BadArgument { cmd: "/x", arg: arg.to_string() };
            let nums: Vec<u32> =
                arg.split(',').map(|s| s.trim().parse::<u32>()).collect::<Result<_, _>>().map_err(|_| bad())?;
            match nums[..] {
                [a, b, pages] => Ok(Some(Command::Distribute { a, b, pages, pad: None })),
                [a, b, pages, pad] => Ok(Some(Command::Distribute { a, b, pages, pad: Some(pad) })),
                _ => Err(bad()),
            }
        }
        _ => Err(unknown()),
    }
}
