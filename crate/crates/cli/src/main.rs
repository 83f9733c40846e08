use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand};
use otpad_core::app::daemon::{Daemon, Outcome};
use otpad_core::app::{
    parse_config, vault_report_text, AppError, NodeOptions, VaultRow, EXIT_CONFIG, EXIT_OK, EXIT_OTHER,
};
use otpad_core::hub::pair_count;
use otpad_core::hygiene::Scrubber;
use otpad_core::jamlab::{self, VictimConfig};
use otpad_core::transport::LinkModel;
use otpad_core::vault::{
    install_entropy, parse_metadata, recover_pad, tracer_bytes, verify_tracer, Destination, DirStore, FileSource,
    PadPlan, PageStore, Role,
};

#[derive(Parser)]
#[command(name = "otpad", version, about = "One-time-pad encrypted UDP sessions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a node from a config file.
    Run {
        config: PathBuf,
        /// Do not read commands from stdin.
        #[arg(long)]
        no_terminal: bool,
        /// Enable /Z, which kills the node without writing anything back.
        #[arg(long)]
        allow_crash: bool,
    },
    /// Carve pads out of an entropy file into one or two vaults.
    Install {
        #[arg(long)]
        source: PathBuf,
        /// Byte offset in the source to start from.
        #[arg(long, default_value_t = 0)]
        offset: u64,
        /// PAD:KB_PER_PAGE:PAGES, with an optional :reserve suffix. Repeatable.
        #[arg(long = "pad", required = true, value_parser = parse_plan)]
        plan: Vec<PadPlan>,
        /// Vault that transmits on page 0.
        #[arg(long)]
        a: PathBuf,
        /// Vault that transmits on page 1.
        #[arg(long)]
        b: Option<PathBuf>,
    },
    /// Write a tracer file: every 8-byte word holds its own offset.
    Tracer {
        out: PathBuf,
        #[arg(long)]
        bytes: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Check a vault installed from a tracer file.
    VerifyTracer {
        vault: PathBuf,
        #[arg(long = "pad", required = true, value_parser = parse_plan)]
        plan: Vec<PadPlan>,
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// After a crash: move one pad to fresh pages and clear the lock.
    /// Run at both ends with mirrored --tx/--rx.
    Recover {
        vault: PathBuf,
        #[arg(long)]
        pad: u32,
        #[arg(long)]
        tx: u32,
        #[arg(long)]
        rx: u32,
    },
    /// Print the metadata of a vault with the page-turn control column.
    VaultReport {
        vault: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Simulated jamming sweep.
    JamSweep {
        /// Jam packet length in bytes.
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long, value_delimiter = ',', default_values_t = jamlab::DEFAULT_FREQS)]
        freqs: Vec<f64>,
        /// Victim HMAC evaluations per virtual second.
        #[arg(long, default_value_t = jamlab::DEFAULT_BUDGET)]
        budget: f64,
        /// One-way link latency in milliseconds.
        #[arg(long, default_value_t = 15)]
        latency_ms: u64,
        #[arg(long)]
        json: bool,
    },
    /// Expose a node's control port to browsers over WebSocket.
    Bridge {
        #[arg(long)]
        control: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:8787")]
        listen: SocketAddr,
    },
    /// Pads needed to connect every pair of users directly.
    PairCount { users: u64 },
}

fn parse_plan(s: &str) -> Result<PadPlan, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let reserve = match parts.get(3) {
        None => false,
        Some(&"reserve") => true,
        Some(x) => return Err(format!("unexpected {x:?}, want \"reserve\"")),
    };
    if !(3..=4).contains(&parts.len()) {
        return Err("want PAD:KB_PER_PAGE:PAGES[:reserve]".into());
    }
    let n = |i: usize| parts[i].parse::<u32>().map_err(|e| format!("{}: {e}", parts[i]));
    Ok(PadPlan { pad_id: n(0)?, kb_per_page: n(1)?, pages: n(2)?, reserve })
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl From<AppError> for Failure {
    fn from(e: AppError) -> Self {
        Failure { code: e.exit_code() as u8, msg: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { code: EXIT_OTHER as u8, msg: e.to_string() }
    }
}

fn fail(msg: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_OTHER as u8, msg: msg.to_string() }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().cmd) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(f) => {
            eprintln!("otpad: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run { config, no_terminal, allow_crash } => run(&config, !no_terminal, allow_crash),
        Cmd::Install { source, offset, plan, a, b } => {
            if b.is_some() && plan.iter().any(|p| p.reserve) {
                return Err(fail("a reserve pad belongs to the hub alone; install it without --b"));
            }
            let mut src = FileSource::open(&source)?;
            let mut sa = DirStore::new(&a);
            let mut sb = b.as_ref().map(DirStore::new);
            let mut dests = vec![Destination { store: &mut sa as &mut dyn PageStore, role: Role::A }];
            if let Some(s) = sb.as_mut() {
                dests.push(Destination { store: s as &mut dyn PageStore, role: Role::B });
            }
            let r = install_entropy(&mut src, offset, &plan, &mut dests, &mut Scrubber::from_os()).map_err(fail)?;
            println!("installed {} pads, {} pages, {} bytes from offset {}", r.pads, r.pages, r.bytes, r.source_start);
            println!("next free source offset: {}", r.source_start + r.bytes);
            Ok(())
        }
        Cmd::Tracer { out, bytes, start } => {
            if start % 8 != 0 {
                return Err(fail("--start must be a multiple of 8"));
            }
            let mut f = io::BufWriter::new(std::fs::File::create(&out)?);
            let mut off = start;
            let end = start + bytes;
            while off < end {
                let n = (end - off).min(1 << 20) as usize;
                f.write_all(&tracer_bytes(off, n))?;
                off += n as u64;
            }
            f.flush()?;
            Ok(())
        }
        Cmd::VerifyTracer { vault, plan, start } => {
            let findings = verify_tracer(&DirStore::new(&vault), &plan, start)?;
            for f in &findings {
                println!("{f:?}");
            }
            if findings.is_empty() {
                println!("ok: every page holds its expected source interval");
                Ok(())
            } else {
                Err(fail(format!("{} findings", findings.len())))
            }
        }
        Cmd::Recover { vault, pad, tx, rx } => {
            let mut store = DirStore::new(&vault);
            let m = recover_pad(&mut store, pad, tx, rx, &mut Scrubber::from_os()).map_err(fail)?;
            println!("pad {:05}: tx page {}, rx page {}; lock cleared", m.pad_id, m.tx_pg, m.rx_pg);
            Ok(())
        }
        Cmd::VaultReport { vault, json } => {
            let store = DirStore::new(&vault);
            let text = store.read_metadata()?.ok_or_else(|| fail(format!("{} has no pad.metadata", vault.display())))?;
            let rows: Vec<VaultRow> = parse_metadata(&text)
                .map_err(|e| Failure { code: EXIT_CONFIG as u8, msg: e.to_string() })?
                .into_iter()
                .map(|meta| VaultRow { meta, controls_page_turns: meta.controls_page_turns() })
                .collect();
            if json {
                println!("{}", serde_json::to_string_pretty(&rows).map_err(fail)?);
            } else {
                print!("{}", vault_report_text(&rows));
            }
            Ok(())
        }
        Cmd::JamSweep { len, freqs, budget, latency_ms, json } => {
            let link = LinkModel::fixed(Duration::from_millis(latency_ms));
            let rows = jamlab::sweep(link, &VictimConfig::default(), len, &freqs, budget);
            if json {
                for r in &rows {
                    println!("{}", serde_json::to_string(r).map_err(fail)?);
                }
            } else {
                print!("{}", jamlab::render_table(&rows));
            }
            Ok(())
        }
        Cmd::Bridge { control, listen } => bridge(control, listen),
        Cmd::PairCount { users } => {
            println!("{}", pair_count(users));
            Ok(())
        }
    }
}

fn run(path: &Path, terminal: bool, allow_crash: bool) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)?;
    let config = parse_config(&text).map_err(|e| Failure::from(AppError::from(e)))?;
    let opts = NodeOptions { allow_crash, ..Default::default() };
    let mut daemon = Daemon::new(config, opts)?;
    let stop = daemon.stop_handle();
    ctrlc::set_handler(move || stop.stop()).map_err(fail)?;
    log::info!("listening on UDP {}", daemon.udp_addr()?);
    if let Some(a) = daemon.control_addr() {
        log::info!("control API on {a}");
    }
    if terminal {
        daemon.attach_terminal();
    }
    match daemon.run()? {
        Outcome::Clean => Ok(()),
        Outcome::Crashed => Err(fail("crashed on request; vault left locked")),
    }
}

/// One thread per browser: text frames go to the control port as lines,
/// lines from the control port go back as text frames.
fn bridge(control: SocketAddr, listen: SocketAddr) -> Result<(), Failure> {
    let listener = TcpListener::bind(listen)?;
    log::info!("bridging ws://{listen} to {control}");
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept: {e}");
                continue;
            }
        };
        thread::spawn(move || {
            if let Err(e) = bridge_one(stream, control) {
                log::info!("bridge connection closed: {e}");
            }
        });
    }
    Ok(())
}

fn bridge_one(stream: TcpStream, control: SocketAddr) -> Result<(), Box<dyn std::error::Error>> {
    let mut ws = tungstenite::accept(stream)?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut upstream = TcpStream::connect(control)?;
    let reader = BufReader::new(upstream.try_clone()?);
    let (tx, rx) = mpsc::channel::<String>();
    thread::spawn(move || {
        for line in reader.lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    loop {
        match ws.read() {
            Ok(tungstenite::Message::Text(t)) => {
                upstream.write_all(t.trim_end().as_bytes())?;
                upstream.write_all(b"\n")?;
            }
            Ok(tungstenite::Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
        loop {
            match rx.try_recv() {
                Ok(line) => ws.send(tungstenite::Message::Text(line))?,
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    ws.close(None)?;
                    return Ok(());
                }
            }
        }
    }
}
