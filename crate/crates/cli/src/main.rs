use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use roxsim::server::{self, SimHandle};
use roxsim_core::playback::{load_sequence, run_playback, PlaybackOptions};
use roxsim_core::recorder::{convert_raw_file, validate_sequence};
use roxsim_core::render::Mode;
use roxsim_core::scene::Scene;
use roxsim_core::sim::{run_script, Script, SimConfig, SimState};

#[derive(Parser)]
#[command(name = "roxsim", version, about = "Headless robot scene simulator and ground-truth generator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the simulation in real time behind a WebSocket endpoint at /ws.
    Serve {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 30)]
        tick_hz: u32,
        /// Directory for sessions started with toggle_record.
        #[arg(long)]
        record_dir: Option<PathBuf>,
    },
    /// Run a command script headless and record every tick.
    Record {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long, default_value_t = 30)]
        tick_hz: u32,
        /// Start stamp written to the raw header.
        #[arg(long, default_value = "0")]
        start: String,
    },
    /// Turn a raw log into a sequence file.
    Convert {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render ground truth for a recorded sequence.
    Playback {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        skip: usize,
        #[arg(long)]
        keep: Option<usize>,
        /// Comma-separated subset of rgb,depth,mask,class_mask,normal,pointcloud,annotations.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
        /// Meters per depth unit in the 16-bit depth images.
        #[arg(long, default_value_t = 0.001)]
        depth_scale: f64,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn load_scene(path: &Path) -> Result<Scene> {
    Scene::load(path).with_context(|| format!("loading scene {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Serve { scene, port, host, tick_hz, record_dir } => {
            let scene = Arc::new(load_scene(&scene)?);
            if tick_hz == 0 {
                bail!("--tick-hz must be positive");
            }
            let sim = SimState::new(scene, SimConfig { tick_hz, record_dir, start_stamp: None });
            let handle = SimHandle::spawn(sim);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let (listener, addr) = server::bind(&host, port).await?;
                log::info!("listening on ws://{addr}/ws");
                server::serve(listener, &handle, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
            })?;
            let sim = handle.shutdown();
            log::info!("stopped after {} ticks", sim.tick_count());
        }
        Cmd::Record { scene, script, raw, tick_hz, start } => {
            let scene = Arc::new(load_scene(&scene)?);
            let script = Script::load(&script)?;
            let mut sim = SimState::new(scene, SimConfig { tick_hz, record_dir: None, start_stamp: Some(start) });
            let t0 = Instant::now();
            let run = run_script(&mut sim, &script, Some(&raw))?;
            let summary = run.summary.expect("recording was requested");
            for (tick, e) in &run.events {
                log::info!("tick {tick}: {e:?}");
            }
            log::info!(
                "{} frames written, {} dropped, {:.2}s",
                summary.frames_written,
                summary.frames_dropped,
                t0.elapsed().as_secs_f64()
            );
            if summary.frames_dropped > 0 {
                bail!("{} frames dropped while recording", summary.frames_dropped);
            }
        }
        Cmd::Convert { raw, scene, out } => {
            let scene = load_scene(&scene)?;
            let seq = convert_raw_file(&raw, &scene)?;
            let problems = validate_sequence(&seq);
            for v in &problems {
                log::warn!("{v}");
            }
            seq.save(&out)?;
            log::info!("{} frames -> {}", seq.frames.len(), out.display());
        }
        Cmd::Playback { scene, sequence, out, skip, keep, modes, depth_scale, workers } => {
            let scene = load_scene(&scene)?;
            let seq = load_sequence(&sequence, &scene)?;
            let mut opts = PlaybackOptions::new(out);
            opts.skip = skip;
            opts.keep = keep;
            opts.depth_scale = depth_scale;
            if let Some(m) = modes {
                opts.modes = m.into_iter().collect::<BTreeSet<_>>();
            }
            if let Some(w) = workers {
                opts.workers = w;
            }
            let t0 = Instant::now();
            let manifest = run_playback(&seq, &scene, &opts)?;
            log::info!(
                "{} frames, {} files in {:.2}s",
                manifest.frame_ids.len(),
                manifest.files.len(),
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
