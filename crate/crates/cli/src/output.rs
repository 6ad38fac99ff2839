//! Output directories, run manifests and CLI failure classes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub const MANIFEST: &str = "manifest.json";

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config keys or values (exit 2).
    Usage(String),
    /// Would overwrite existing outputs (exit 3).
    Refusal(String),
    /// Anything that went wrong while doing the work (exit 4).
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Refusal(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Refusal(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<splatsurf::Error> for Failure {
    fn from(e: splatsurf::Error) -> Self {
        match e {
            splatsurf::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.is_file() {
        return Err(Failure::Refusal(format!("{} is a file, not a directory", dir.display())));
    }
    if !force && dir.read_dir().is_ok_and(|mut it| it.next().is_some()) {
        return Err(Failure::Refusal(format!("{} is not empty (use --force to write into it)", dir.display())));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Output directory of a single-file output. Refuses an existing file or a
/// directory that already holds another run's manifest unless `force`.
pub fn prepare_file(path: &Path, force: bool) -> CliResult<PathBuf> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !force && path.exists() {
        return Err(Failure::Refusal(format!("{} exists (use --force to overwrite)", path.display())));
    }
    if !force && dir.join(MANIFEST).exists() {
        return Err(Failure::Refusal(format!("{} already holds a run manifest (use --force to replace it)", dir.display())));
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

/// Everything needed to reproduce a command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub dataset: Option<String>,
    pub output: String,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub timings: Vec<Timing>,
    #[serde(skip)]
    dir: PathBuf,
    #[serde(skip)]
    clock: Option<(String, Instant)>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, dataset: Option<&Path>, dir: &Path, output: &Path, seed: u64) -> CliResult<Self> {
        let config = serde_json::to_value(config).map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(Self {
            command: command.into(),
            args: std::env::args().collect(),
            config,
            dataset: dataset.map(|p| p.display().to_string()),
            output: output.display().to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            threads: rayon::current_num_threads(),
            timings: Vec::new(),
            dir: dir.to_path_buf(),
            clock: None,
        })
    }

    /// Ends the running phase, if any, and starts `name`.
    pub fn phase(&mut self, name: &str) {
        self.stop();
        self.clock = Some((name.into(), Instant::now()));
    }

    fn stop(&mut self) {
        if let Some((phase, t0)) = self.clock.take() {
            self.timings.push(Timing { phase, seconds: t0.elapsed().as_secs_f64() });
        }
    }

    /// Writes (or rewrites) `manifest.json` atomically.
    pub fn write(&self) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Failure::Runtime(e.to_string()))?;
        let tmp = self.dir.join(".manifest.json.tmp");
        std::fs::write(&tmp, json + "\n")?;
        std::fs::rename(&tmp, self.dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn finish(&mut self) -> CliResult<()> {
        self.stop();
        self.write()
    }
}
