//! `makesense` subcommands. Each prints a JSON summary on stdout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use makesense::analytics::{ComfortConfig, ComfortEngine, ComfortPreference};
use makesense::backend::{desk_of, Backend, BackendConfig};
use makesense::datastore::export::export_csv;
use makesense::datastore::{HistoricalStore, Query};
use makesense::eggsim::{fleet_keys, DeviceKind, FaultPlan, ScenarioSpec};
use makesense::fota::build_image;
use makesense::psk::{KeyTable, PskIdentity};
use makesense::reading::SensorReading;
use makesense::sim::quality::quality_run;
use makesense::sim::udp::{connect_device_socket, run_fleet, serve};
use makesense::sim::{build_devices, virtual_testbed};
use makesense::{Clock, SystemClock, Timestamp};

use crate::api::{self, ApiConfig, AppState, TOKEN_ENV};

#[derive(Parser, Debug)]
#[command(name = "makesense", version, about = "Indoor sensing testbed: backend, fleet simulator and tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Backend lifecycle.
    #[command(subcommand)]
    Server(ServerCmd),
    /// Fleet simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Runs co-located eggs side by side and reports outliers.
    QualityTest(QualityArgs),
    /// Writes stored readings as CSV or JSON lines.
    Export(ExportArgs),
    /// Participant diaries.
    #[command(subcommand)]
    Diary(DiaryCmd),
    /// Firmware images and pushes.
    #[command(subcommand)]
    Fota(FotaCmd),
    /// Replays a capture through storage and the comfort engine.
    Replay(ReplayArgs),
    /// Writes the PSK table for a scenario's fleet.
    Keys(KeysArgs),
}

#[derive(Subcommand, Debug)]
pub enum ServerCmd {
    Run(ServerArgs),
}

#[derive(Args, Debug)]
pub struct ServerArgs {
    #[arg(long, default_value = "0.0.0.0:5684")]
    pub coap: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub http: SocketAddr,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// PSK table: one `psk_id hex_key` per line.
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// Derive keys from this scenario's fleet.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Also run the scenario's fleet in-process against this server.
    #[arg(long, requires = "scenario")]
    pub fleet: bool,
    #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
    pub token: String,
    #[arg(long = "cors")]
    pub cors_origins: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum SimCmd {
    Run(SimArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClockKind {
    Virtual,
    Real,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    /// Scenario file, or one of `office`, `home`, `quality`.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, value_enum, default_value_t = ClockKind::Virtual)]
    pub clock: ClockKind,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the egg count of every site.
    #[arg(long)]
    pub eggs: Option<usize>,
    #[arg(long)]
    pub duration: Option<humantime::Duration>,
    #[arg(long)]
    pub faults: Option<PathBuf>,
    /// Backend data directory for virtual runs; a temporary one otherwise.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Server address for real-clock runs.
    #[arg(long, default_value = "127.0.0.1:5684")]
    pub server: SocketAddr,
    /// Writes every stored reading as JSON lines (virtual runs).
    #[arg(long)]
    pub capture: Option<PathBuf>,
    /// Real-clock runs fail when no device registers within this time.
    #[arg(long, default_value = "10s")]
    pub connect_timeout: humantime::Duration,
}

#[derive(Args, Debug)]
pub struct QualityArgs {
    #[arg(long, default_value_t = 8)]
    pub eggs: usize,
    #[arg(long, default_value = "24h")]
    pub window: humantime::Duration,
    /// `egg-N:sensor:delta`, e.g. `egg-3:temp:+2`.
    #[arg(long = "inject-bias")]
    pub bias: Vec<String>,
    /// `egg-N:sensor:fraction` silences that share of the window.
    #[arg(long = "inject-silence")]
    pub silence: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Writes the per-egg verdicts as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub site: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub object: Option<u16>,
    /// RFC 3339 or unix milliseconds.
    #[arg(long)]
    pub t0: Option<String>,
    #[arg(long)]
    pub t1: Option<String>,
    #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
    pub format: ExportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum DiaryCmd {
    Import(DiaryArgs),
}

#[derive(Args, Debug)]
pub struct DiaryArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Household id as known to the field team.
    #[arg(long)]
    pub site: String,
    #[arg(long)]
    pub file: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum FotaCmd {
    /// Wraps a payload into a signed-off image.
    Build(FotaBuildArgs),
    /// Uploads an image (optional) and starts a push through the API.
    Push(FotaPushArgs),
}

#[derive(Args, Debug)]
pub struct FotaBuildArgs {
    #[arg(long)]
    pub payload: PathBuf,
    #[arg(long)]
    pub version: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FotaPushArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub api: String,
    #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
    pub token: String,
    #[arg(long, required_unless_present = "version")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub version: Option<String>,
    /// Comma-separated endpoints; all registered devices when absent.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// JSON lines of readings, as written by `sim run --capture`.
    pub capture: PathBuf,
    /// JSON list of comfort preferences.
    #[arg(long)]
    pub prefs: Option<PathBuf>,
    /// Also append the readings to this store.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct KeysArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command; the error becomes exit code 1.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Server(ServerCmd::Run(a)) => server_run(a),
        Command::Sim(SimCmd::Run(a)) => sim_run(a),
        Command::QualityTest(a) => quality_test(a),
        Command::Export(a) => export(a),
        Command::Diary(DiaryCmd::Import(a)) => diary_import(a),
        Command::Fota(FotaCmd::Build(a)) => fota_build(a),
        Command::Fota(FotaCmd::Push(a)) => fota_push(a),
        Command::Replay(a) => replay(a),
        Command::Keys(a) => keys(a),
    }
}

fn print_summary(v: serde_json::Value) {
    let _ = writeln!(io::stdout().lock(), "{}", serde_json::to_string_pretty(&v).expect("json"));
}

pub fn load_scenario(name: &str, seed: Option<u64>) -> anyhow::Result<ScenarioSpec> {
    let seed_or = seed.unwrap_or(1);
    let mut spec = match name {
        "office" => ScenarioSpec::office(100, seed_or),
        "home" => ScenarioSpec::home(20, seed_or),
        "quality" => ScenarioSpec::quality(8, seed_or),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading scenario {path}"))?;
            ScenarioSpec::from_toml(&text)?
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn load_faults(path: Option<&Path>) -> anyhow::Result<FaultPlan> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(FaultPlan::from_toml(&text)?)
        }
        None => Ok(FaultPlan::default()),
    }
}

pub fn read_keys(path: &Path) -> anyhow::Result<KeyTable> {
    let mut t = KeyTable::new();
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, key) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| anyhow!("{}:{}: expected `psk_id hex_key`", path.display(), n + 1))?;
        t.insert(&PskIdentity::from_hex(id, key.trim())?);
    }
    Ok(t)
}

fn server_run(a: ServerArgs) -> anyhow::Result<()> {
    let mut spec = a.scenario.as_deref().map(|s| load_scenario(s, None)).transpose()?;
    let keys = match (&a.keys, &spec) {
        (Some(p), _) => read_keys(p)?,
        (None, Some(s)) => fleet_keys(s.seed, &s.devices()),
        (None, None) => bail!("either --keys or --scenario is required"),
    };
    let socket = UdpSocket::bind(a.coap).with_context(|| format!("binding {}", a.coap))?;
    let coap_addr = socket.local_addr()?;
    let mut cfg = BackendConfig::new(coap_addr, &a.data_dir, keys);
    if let Some(s) = &spec {
        cfg.collector.default_site = s.default_site().to_string();
        cfg.collector.default_period = s.sample_interval();
    }
    let backend = Arc::new(Mutex::new(Backend::open(cfg)?));
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let stop = Arc::new(AtomicBool::new(false));

    let udp = {
        let (backend, clock, stop) = (backend.clone(), clock.clone(), stop.clone());
        std::thread::spawn(move || serve(&*backend, &socket, &*clock, &stop))
    };
    let fleet = match (a.fleet, spec.as_mut()) {
        (true, Some(s)) => {
            s.start_ms = Some(clock.now().0);
            s.duration_s = f64::MAX / 4.0;
            let target = if coap_addr.ip().is_unspecified() {
                SocketAddr::new([127, 0, 0, 1].into(), coap_addr.port())
            } else {
                coap_addr
            };
            Some(spawn_fleet(s, &FaultPlan::default(), target, clock.clone(), stop.clone())?)
        }
        _ => None,
    };

    let rt = tokio::runtime::Runtime::new()?;
    let api_cfg = ApiConfig {
        bind: a.http,
        token: a.token.clone(),
        cors_origins: a.cors_origins.clone(),
    };
    let state = AppState::new(backend.clone(), clock.clone(), &a.token);
    eprintln!("coap on {coap_addr}, api on {}", a.http);
    rt.block_on(async {
        api::serve(&api_cfg, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    stop.store(true, Ordering::Relaxed);
    let _ = udp.join();
    if let Some(f) = fleet {
        let _ = f.join();
    }
    let mut b = backend.lock().unwrap_or_else(|e| e.into_inner());
    b.sync()?;
    print_summary(json!({"status": "stopped", "metrics": b.metrics()}));
    Ok(())
}

fn spawn_fleet(
    spec: &ScenarioSpec,
    faults: &FaultPlan,
    server: SocketAddr,
    clock: Arc<dyn Clock>,
    stop: Arc<AtomicBool>,
) -> anyhow::Result<std::thread::JoinHandle<()>> {
    let sockets: Vec<UdpSocket> = spec
        .devices()
        .iter()
        .map(|_| connect_device_socket(server))
        .collect::<io::Result<_>>()?;
    let addrs: Vec<SocketAddr> = sockets.iter().map(|s| s.local_addr()).collect::<io::Result<_>>()?;
    let mut devices = build_devices(spec, faults, server, |i| addrs[i]);
    let until = spec.end();
    Ok(std::thread::spawn(move || {
        run_fleet(&mut devices, &sockets, &*clock, until, &stop)
    }))
}

fn sim_run(a: SimArgs) -> anyhow::Result<()> {
    let mut spec = load_scenario(&a.scenario, a.seed)?;
    if let Some(n) = a.eggs {
        for s in &mut spec.sites {
            s.egg_count = Some(n);
        }
    }
    if let Some(d) = a.duration {
        spec.duration_s = d.as_secs_f64();
    }
    spec.validate()?;
    let faults = load_faults(a.faults.as_deref())?;
    match a.clock {
        ClockKind::Virtual => sim_virtual(&spec, &faults, &a),
        ClockKind::Real => sim_real(spec, &faults, &a),
    }
}

fn generated_by_device(devices: &[makesense::eggsim::DeviceNode]) -> u64 {
    devices
        .iter()
        .map(|d| d.stats().generated.values().sum::<u64>())
        .sum()
}

fn sim_virtual(spec: &ScenarioSpec, faults: &FaultPlan, a: &SimArgs) -> anyhow::Result<()> {
    let tmp;
    let dir = match &a.data_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile_dir()?;
            tmp.clone()
        }
    };
    let wall = std::time::Instant::now();
    let mut tb = virtual_testbed(spec, faults, &dir)?;
    tb.run_until(spec.end());
    tb.backend.sync()?;
    let generated = generated_by_device(&tb.devices);
    if let Some(path) = &a.capture {
        let mut out = io::BufWriter::new(fs::File::create(path)?);
        for r in tb.backend.store().all()? {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    let m = tb.backend.metrics();
    print_summary(json!({
        "clock": "virtual",
        "devices": tb.devices.len(),
        "registered": tb.devices.iter().filter(|d| d.is_registered()).count(),
        "duration_s": spec.duration_s,
        "generated": generated,
        "stored": m.stored,
        "stored_ratio": if generated == 0 { 0.0 } else { m.stored as f64 / generated as f64 },
        "digest": tb.digest(),
        "wall_s": wall.elapsed().as_secs_f64(),
        "metrics": m,
    }));
    if a.data_dir.is_none() {
        let _ = fs::remove_dir_all(&dir);
    }
    Ok(())
}

fn tempfile_dir() -> io::Result<PathBuf> {
    let base = std::env::temp_dir().join(format!("makesense-sim-{}", std::process::id()));
    fs::create_dir_all(&base)?;
    Ok(base)
}

fn sim_real(mut spec: ScenarioSpec, faults: &FaultPlan, a: &SimArgs) -> anyhow::Result<()> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    spec.start_ms = Some(clock.now().0);
    let sockets: Vec<UdpSocket> = spec
        .devices()
        .iter()
        .map(|_| connect_device_socket(a.server))
        .collect::<io::Result<_>>()?;
    let addrs: Vec<SocketAddr> = sockets.iter().map(|s| s.local_addr()).collect::<io::Result<_>>()?;
    let mut devices = build_devices(&spec, faults, a.server, |i| addrs[i]);
    let stop = AtomicBool::new(false);
    let deadline = spec.start() + Duration::from(a.connect_timeout);
    run_fleet(&mut devices, &sockets, &*clock, deadline.min(spec.end()), &stop);
    if !devices.iter().any(|d| d.is_registered()) {
        bail!("ServerUnreachable: no device registered with {} within {}", a.server, a.connect_timeout);
    }
    run_fleet(&mut devices, &sockets, &*clock, spec.end(), &stop);
    print_summary(json!({
        "clock": "real",
        "server": a.server.to_string(),
        "devices": devices.len(),
        "registered": devices.iter().filter(|d| d.is_registered()).count(),
        "duration_s": spec.duration_s,
        "generated": generated_by_device(&devices),
    }));
    Ok(())
}

pub fn sensor_id(name: &str) -> anyhow::Result<u16> {
    Ok(match name {
        "temp" | "temperature" => 3303,
        "humidity" | "hum" => 3304,
        "light" | "lux" => 3301,
        "loudness" | "noise" => 3324,
        "dust" => 3325,
        "proximity" | "distance" => 3330,
        "gesture" => 3348,
        n => n.parse().map_err(|_| anyhow!("unknown sensor {n:?}"))?,
    })
}

/// `egg-3` → `egg-003`, matching the simulator's office naming.
fn egg_name(s: &str) -> anyhow::Result<String> {
    let n: usize = s
        .strip_prefix("egg-")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| anyhow!("expected egg-N, got {s:?}"))?;
    Ok(format!("egg-{n:03}"))
}

fn split3(s: &str) -> anyhow::Result<(&str, &str, &str)> {
    let mut it = s.splitn(3, ':');
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), Some(c)) => Ok((a, b, c)),
        _ => bail!("expected egg:sensor:value, got {s:?}"),
    }
}

fn quality_test(a: QualityArgs) -> anyhow::Result<()> {
    if a.eggs < 3 {
        bail!("need at least 3 eggs to compare");
    }
    let spec = ScenarioSpec::quality(a.eggs, a.seed);
    let window: Duration = a.window.into();
    let mut plan = FaultPlan::default();
    for b in &a.bias {
        let (egg, sensor, delta) = split3(b)?;
        plan.bias.push(makesense::eggsim::scenario::BiasFault {
            egg: egg_name(egg)?,
            sensor: sensor_id(sensor)?,
            delta: delta.parse().map_err(|_| anyhow!("bad bias {delta:?}"))?,
        });
    }
    let warm = makesense::sim::quality::WARMUP.as_secs_f64();
    for s in &a.silence {
        let (egg, sensor, frac) = split3(s)?;
        let frac: f64 = frac.parse().map_err(|_| anyhow!("bad fraction {frac:?}"))?;
        plan.silent.push(makesense::eggsim::scenario::SilentFault {
            egg: egg_name(egg)?,
            sensor: sensor_id(sensor)?,
            from_s: warm,
            to_s: warm + frac.clamp(0.0, 1.0) * window.as_secs_f64(),
        });
    }
    let dir = tempfile_dir()?.join("quality");
    let _ = fs::remove_dir_all(&dir);
    let run = quality_run(&spec, &plan, window, &dir);
    let _ = fs::remove_dir_all(&dir);
    let run = run?;
    if let Some(p) = &a.csv {
        fs::write(p, run.report.to_csv())?;
    }
    let flagged = run.report.flagged();
    let devices: Vec<&str> = flagged
        .iter()
        .map(|e| e.split_once('-').map_or(e.as_str(), |(_, d)| d))
        .collect();
    print_summary(json!({
        "eggs": run.eggs.len(),
        "window_s": window.as_secs_f64(),
        "expected_per_sensor": run.expected,
        "flagged": flagged,
        "flagged_devices": devices,
        "rows": run.report.rows,
    }));
    Ok(())
}

fn parse_time(s: &str) -> anyhow::Result<Timestamp> {
    s.parse::<i64>()
        .map(Timestamp)
        .ok()
        .or_else(|| Timestamp::parse_rfc3339(s))
        .ok_or_else(|| anyhow!("bad time {s:?}"))
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let store = HistoricalStore::open(a.data_dir.join("store"), None)?;
    let q = Query {
        site: a.site,
        endpoint: a.endpoint,
        object_id: a.object,
        t0: a.t0.as_deref().map(parse_time).transpose()?.unwrap_or(Timestamp::ZERO),
        t1: a.t1.as_deref().map(parse_time).transpose()?.unwrap_or(Timestamp(i64::MAX)),
        limit: None,
        downsample: false,
    };
    let rows = store.query(&q)?.readings();
    let out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    match a.format {
        ExportFormat::Csv => {
            export_csv(&rows, out)?;
        }
        ExportFormat::Jsonl => {
            let mut out = out;
            for r in &rows {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    if a.out.is_some() {
        print_summary(json!({"exported": rows.len()}));
    }
    Ok(())
}

fn diary_import(a: DiaryArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let cfg = BackendConfig::new("127.0.0.1:0".parse()?, &a.data_dir, KeyTable::new());
    let mut b = Backend::open(cfg)?;
    let site = b.site_token(&a.site)?;
    let n = b.import_diary(&a.site, &text)?;
    print_summary(json!({"imported": n, "site": site}));
    Ok(())
}

fn fota_build(a: FotaBuildArgs) -> anyhow::Result<()> {
    let payload = fs::read(&a.payload).with_context(|| format!("reading {}", a.payload.display()))?;
    let img = build_image(&payload, &a.version)?;
    let bytes = img.to_bytes();
    fs::write(&a.out, &bytes)?;
    print_summary(json!({"version": a.version, "bytes": bytes.len(), "out": a.out}));
    Ok(())
}

fn api_call(
    agent: &ureq::Agent,
    req: ureq::RequestBuilder<ureq::typestate::WithBody>,
    body: Body,
) -> anyhow::Result<serde_json::Value> {
    let _ = agent;
    let resp = match body {
        Body::Json(v) => req.send_json(v),
        Body::Bytes(b) => req.header("content-type", "application/octet-stream").send(&b[..]),
    };
    let mut resp = resp.map_err(|e| anyhow!("api request failed: {e}"))?;
    let status = resp.status();
    let v: serde_json::Value = resp.body_mut().read_json()?;
    if !status.is_success() {
        bail!("api returned {status}: {}", v["error"]["message"]);
    }
    Ok(v["data"].clone())
}

enum Body {
    Json(serde_json::Value),
    Bytes(Vec<u8>),
}

fn fota_push(a: FotaPushArgs) -> anyhow::Result<()> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let auth = format!("Bearer {}", a.token);
    let base = a.api.trim_end_matches('/');
    let version = match (&a.image, &a.version) {
        (Some(p), _) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let req = agent.post(format!("{base}/api/fota/images")).header("authorization", &auth);
            let v = api_call(&agent, req, Body::Bytes(bytes))?;
            v["version"].as_str().unwrap_or_default().to_string()
        }
        (None, Some(v)) => v.clone(),
        (None, None) => bail!("--image or --version is required"),
    };
    let req = agent.post(format!("{base}/api/fota")).header("authorization", &auth);
    let data = api_call(
        &agent,
        req,
        Body::Json(json!({"version": version, "targets": a.targets})),
    )?;
    print_summary(data);
    Ok(())
}

fn replay(a: ReplayArgs) -> anyhow::Result<()> {
    let file = fs::File::open(&a.capture).with_context(|| format!("reading {}", a.capture.display()))?;
    let mut readings = Vec::new();
    for (n, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SensorReading = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", a.capture.display(), n + 1))?;
        readings.push(r);
    }
    let mut engine = ComfortEngine::new(ComfortConfig::default())?;
    let mut desks = BTreeMap::new();
    for r in &readings {
        if let Some(desk) = r.endpoint.split_once('-').and_then(|(_, d)| desk_of(d)) {
            desks.entry(desk).or_insert_with(|| r.endpoint.clone());
        }
    }
    for (desk, ep) in &desks {
        engine.assign_desk(desk, ep);
    }
    if let Some(p) = &a.prefs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let prefs: Vec<ComfortPreference> = serde_json::from_str(&text)?;
        for pref in prefs {
            engine.set_preference(pref)?;
        }
    }
    let mut events = Vec::new();
    for r in &readings {
        events.extend(engine.on_reading(r));
    }
    let (mut stored, mut deduped) = (0u64, 0u64);
    if let Some(d) = &a.data_dir {
        let mut store = HistoricalStore::open(d.join("store"), None)?;
        for r in &readings {
            if store.append(r)? {
                stored += 1;
            } else {
                deduped += 1;
            }
        }
        store.sync()?;
    }
    print_summary(json!({
        "readings": readings.len(),
        "stored": stored,
        "deduped": deduped,
        "comfort_events": events,
    }));
    Ok(())
}

fn keys(a: KeysArgs) -> anyhow::Result<()> {
    let spec = load_scenario(&a.scenario, a.seed)?;
    let mut out = String::new();
    for d in spec.devices() {
        let id = makesense::eggsim::device_identity(spec.seed, &d.endpoint);
        out.push_str(&format!("{} {}\n", id.psk_id, hex::encode(id.psk_key)));
    }
    fs::write(&a.out, out)?;
    let eggs = spec.devices().iter().filter(|d| d.kind == DeviceKind::Egg).count();
    print_summary(json!({"identities": spec.devices().len(), "eggs": eggs, "out": a.out}));
    Ok(())
}
