use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sparseloco::codec::{
    ideal_compression_ratio, index_entropy_bound, measured_compression_ratio, serialize, ChunkPlan,
    ValueCoding,
};
use sparseloco::config::RunConfig;
use sparseloco::error::{Error, Result};
use sparseloco::optimizer::{compress_with_ef, ErrorFeedback};
use sparseloco::params::{Layout, ParamVector, PeerId, TensorSpec};
use sparseloco::rng::Stream;
use sparseloco::swarm::{
    encode_checkpoint, simulate_timing, timing_preset, RoundLog, Swarm, TimingModel,
};

use crate::summary::{self, Summary};
use crate::RunOverrides;

fn load_config(path: &str, overrides: &RunOverrides) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {path}: {e}")))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(seed) = overrides.seed {
        cfg.run.seed = seed;
    }
    if let Some(rounds) = overrides.rounds {
        cfg.run.rounds = rounds;
    }
    if let Some(workers) = overrides.workers {
        cfg.run.workers = workers;
    }
    if let Some(out) = &overrides.out {
        cfg.run.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_run(config_path: &str, overrides: &RunOverrides, print_effective: bool) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    if print_effective {
        print!("{}", cfg.to_toml());
        return Ok(());
    }

    let out_dir = PathBuf::from(&cfg.run.out);
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::write(out_dir.join("run-config.toml"), cfg.to_toml())?;

    let mut swarm = Swarm::new(cfg.clone())?;
    let mut rounds_file = std::io::BufWriter::new(fs::File::create(out_dir.join("rounds.jsonl"))?);
    let mut validator_file =
        std::io::BufWriter::new(fs::File::create(out_dir.join("validator.jsonl"))?);
    let mut logs: Vec<RoundLog> = Vec::with_capacity(cfg.run.rounds as usize);

    let result = (|| -> Result<()> {
        for r in 0..cfg.run.rounds {
            swarm.churn_step()?;
            let (log, record) = swarm.run_round()?;
            writeln!(rounds_file, "{}", serde_json::to_string(&log)?)?;
            writeln!(validator_file, "{}", serde_json::to_string(&record)?)?;
            logs.push(log);
            let completed = r + 1;
            if completed % cfg.run.checkpoint_interval == 0 {
                write_checkpoint(&out_dir, completed, &cfg, swarm.global_params())?;
            }
        }
        Ok(())
    })();

    // On mid-run failure, still land a checkpoint of the last good state.
    let completed = logs.len() as u64;
    write_checkpoint(&out_dir, completed, &cfg, swarm.global_params())?;
    fs::write(
        out_dir.join("checkpoints").join("final.ckpt"),
        encode_checkpoint(
            completed,
            digest32(&cfg.digest_hex()),
            swarm.global_params(),
        ),
    )?;
    result?;

    let summary = summary::from_logs(&logs, &cfg);
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "run complete: {} rounds, final loss {:.6}, mean active {:.2}, mean contributing {:.2}, \
         mean utilization {:.4}, measured compression {:.2}x",
        summary.rounds,
        summary.final_train_loss,
        summary.mean_active_peers,
        summary.mean_contributing_peers,
        summary.mean_utilization,
        summary.measured_compression_ratio
    );
    Ok(())
}

fn write_checkpoint(
    out_dir: &Path,
    round: u64,
    cfg: &RunConfig,
    params: &ParamVector,
) -> Result<()> {
    let path = out_dir
        .join("checkpoints")
        .join(format!("round-{round:06}.ckpt"));
    fs::write(
        path,
        encode_checkpoint(round, digest32(&cfg.digest_hex()), params),
    )?;
    Ok(())
}

fn digest32(hex: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap_or(0);
    }
    out
}

pub fn cmd_codec_bench(config_path: Option<&str>, elements: usize) -> Result<()> {
    let cfg = match config_path {
        Some(p) => load_config(p, &RunOverrides::default())?,
        None => RunConfig::default(),
    };
    if elements == 0 {
        return Err(Error::Config("elements: must be >= 1".into()));
    }
    let geometry = cfg.geometry.geometry()?;
    let coding = cfg.geometry.value_coding;
    let dense_bits = cfg.geometry.dense_bits;

    let layout = std::sync::Arc::new(Layout::new(vec![TensorSpec::new("bench", &[elements])?])?);
    let plan = ChunkPlan::new(&layout, geometry)?;
    let mut stream = Stream::new(cfg.run.seed, "codec-bench");
    let delta = ParamVector::new(
        (0..elements).map(|_| stream.next_gaussian()).collect(),
        layout.clone(),
    )?;
    let mut ef = ErrorFeedback::new(&delta, 0.0);
    let compressed = compress_with_ef(&delta, &mut ef, &plan, coding, 0, PeerId([0xBE; 16]))?;
    let bytes = serialize(&compressed.delta)?;

    let selected: usize = compressed
        .delta
        .chunks
        .iter()
        .map(|c| c.indices.len())
        .sum();
    let wire_bits = cfg.geometry.wire_bits_per_selected();
    let ideal = ideal_compression_ratio(&geometry, dense_bits, wire_bits);
    let measured = measured_compression_ratio(elements, dense_bits, bytes.len());
    let bits_per_value = bytes.len() as f64 * 8.0 / selected as f64;
    let entropy = index_entropy_bound(geometry.chunk_1d() as u64, geometry.k() as u64);
    // Ideal adjusted for the per-chunk scale bytes actually on the wire.
    let scale_bits_per_chunk: f64 = match coding {
        ValueCoding::TwoBit => 32.0,
        ValueCoding::Raw => 0.0,
    };
    let adjusted = (dense_bits as f64 * geometry.chunk_1d() as f64)
        / (geometry.k() as f64 * wire_bits as f64 + scale_bits_per_chunk);

    let report = serde_json::json!({
        "elements": elements,
        "chunks": compressed.delta.chunks.len(),
        "selected_values": selected,
        "serialized_bytes": bytes.len(),
        "wire_bits_per_selected_value": bits_per_value,
        "index_entropy_bound_bits": entropy,
        "ideal_compression_ratio": ideal,
        "overhead_adjusted_ratio": adjusted,
        "measured_compression_ratio": measured,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn cmd_timing(
    config_path: Option<&str>,
    preset: Option<&str>,
    rounds: u64,
    up_bytes: u64,
    down_bytes: u64,
) -> Result<()> {
    let (model, up, down): (TimingModel, f64, f64) = match preset {
        Some(name) => timing_preset(name)
            .ok_or_else(|| Error::Config(format!("preset: unknown name {name:?}")))?,
        None => {
            let cfg = match config_path {
                Some(p) => load_config(p, &RunOverrides::default())?,
                None => RunConfig::default(),
            };
            (
                TimingModel::from_section(&cfg.timing),
                up_bytes as f64,
                down_bytes as f64,
            )
        }
    };
    let (t_comm, utilization) = simulate_timing(up, down, &model);
    println!(
        "t_compute = {:.1} s, t_comm = {:.1} s, utilization = {:.2}%",
        model.t_compute_s,
        t_comm,
        utilization * 100.0
    );
    println!("round,start_s,compute_s,comm_s,utilization");
    let mut clock = 0.0;
    for r in 0..rounds {
        println!(
            "{r},{clock:.1},{:.1},{t_comm:.1},{utilization:.4}",
            model.t_compute_s
        );
        clock += model.t_compute_s + t_comm;
    }
    Ok(())
}

pub fn cmd_report(dir: &str) -> Result<()> {
    let dir = PathBuf::from(dir);
    let cfg_text = fs::read_to_string(dir.join("run-config.toml"))
        .map_err(|e| Error::Config(format!("cannot read run-config.toml: {e}")))?;
    let cfg = RunConfig::from_toml(&cfg_text)?;
    let logs_text = fs::read_to_string(dir.join("rounds.jsonl"))?;
    let logs: Vec<RoundLog> = logs_text
        .lines()
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let summary = summary::from_logs(&logs, &cfg);
    if let Ok(stored) = fs::read_to_string(dir.join("summary.json")) {
        let stored: Summary = serde_json::from_str(&stored)?;
        if stored.config_digest != summary.config_digest
            || stored.rounds != summary.rounds
            || (stored.final_train_loss - summary.final_train_loss).abs() > 1e-12
        {
            eprintln!("warning: stored summary.json disagrees with the logs");
        }
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
