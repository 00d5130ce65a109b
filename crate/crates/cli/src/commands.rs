//! The four subcommands: generate, train, evaluate, inspect.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fedseg_core::datastore::{
    generate_client_scans, read_volume, read_volume_header, write_volume, ClientDataset,
};
use fedseg_core::fedsim::{
    csv_header, csv_rows, max_class, round_json_lines, run_federation,
};
use fedseg_core::protoseg::EncoderConfig;
use fedseg_core::tensor::{read_fpm, write_fpm, ModelParams};
use fedseg_core::{eval, Error, Result};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

/// Generate every client's scans under `<data_dir>/<client_id>/<scan_id>.fpv`.
/// Deterministic per config, so re-running overwrites with identical bytes.
pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.data_dir)?;
    for (client_id, spec) in cfg.client_specs().iter().enumerate() {
        let dir = cfg.data_dir.join(client_id.to_string());
        fs::create_dir_all(&dir)?;
        let scans = generate_client_scans(spec, &cfg.phantom)?;
        for scan in &scans {
            write_volume(&dir.join(format!("{}.fpv", scan.scan_id)), scan)?;
        }
        println!(
            "client {client_id}: {} {} scans of {}x{}x[{}..{}] -> {}",
            spec.count,
            spec.style,
            cfg.phantom.hw,
            cfg.phantom.hw,
            cfg.phantom.slice_range.0,
            cfg.phantom.slice_range.1,
            dir.display()
        );
    }
    Ok(())
}

/// Load clients back from a generated data directory.
pub fn load_clients(data_dir: &Path) -> Result<Vec<ClientDataset>> {
    if !data_dir.is_dir() {
        return Err(Error::Data(format!(
            "data directory {} not found (run `fedseg generate` first)",
            data_dir.display()
        )));
    }
    let mut client_ids: Vec<usize> = Vec::new();
    for entry in fs::read_dir(data_dir)? {
        let entry = entry?;
        if let Some(id) = entry
            .file_name()
            .to_str()
            .and_then(|s| s.parse::<usize>().ok())
        {
            if entry.path().is_dir() {
                client_ids.push(id);
            }
        }
    }
    client_ids.sort_unstable();
    if client_ids.is_empty() {
        return Err(Error::Data(format!(
            "no client directories in {}",
            data_dir.display()
        )));
    }

    let mut clients = Vec::with_capacity(client_ids.len());
    for (position, &id) in client_ids.iter().enumerate() {
        if position != id {
            return Err(Error::Data(format!(
                "client directories must be contiguous from 0, found gap before {id}"
            )));
        }
        let dir = data_dir.join(id.to_string());
        let mut scan_ids: Vec<u32> = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(stem) = name.strip_suffix(".fpv") {
                if let Ok(sid) = stem.parse::<u32>() {
                    scan_ids.push(sid);
                }
            }
        }
        scan_ids.sort_unstable();
        let mut scans = Vec::with_capacity(scan_ids.len());
        for sid in scan_ids {
            let mut vol = read_volume(&dir.join(format!("{sid}.fpv")))?;
            vol.scan_id = sid;
            vol.validate()?;
            scans.push(vol);
        }
        clients.push(ClientDataset::partition(id, scans)?);
    }
    Ok(clients)
}

/// Train a federation and write the run directory: manifest.json,
/// metrics.jsonl, summary.csv and model.fpm.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let clients = load_clients(&cfg.data_dir)?;
    fs::create_dir_all(&cfg.out_dir)?;
    RunManifest::from_config(cfg).write(&cfg.out_dir.join("manifest.json"))?;

    let pipe = cfg.pipeline();
    let n_classes = max_class(&clients);
    let metrics = fs::File::create(cfg.out_dir.join("metrics.jsonl"))?;
    let mut metrics = std::io::BufWriter::new(metrics);
    let mut write_err: Option<std::io::Error> = None;
    let rounds = cfg.fed.rounds;

    let outcome = run_federation(&cfg.fed, &pipe, &clients, |report| {
        if write_err.is_some() {
            return;
        }
        for line in round_json_lines(report) {
            if let Err(e) = writeln!(metrics, "{line}") {
                write_err = Some(e);
                return;
            }
        }
        if let Err(e) = metrics.flush() {
            write_err = Some(e);
            return;
        }
        let mean_total: f64 = report
            .clients
            .iter()
            .map(|c| c.mean_loss.total)
            .sum::<f64>()
            / report.clients.len() as f64;
        println!(
            "round {}/{} lr {:.6e} mean total loss {:.4}",
            report.round + 1,
            rounds,
            report.lr,
            mean_total
        );
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }

    let mut csv = String::from(&csv_header(n_classes));
    csv.push('\n');
    for report in &outcome.reports {
        for row in csv_rows(report, n_classes) {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    fs::write(cfg.out_dir.join("summary.csv"), csv)?;
    write_fpm(&cfg.out_dir.join("model.fpm"), &outcome.final_model)?;
    println!("run complete: {}", cfg.out_dir.display());
    Ok(())
}

/// Check a loaded model against the encoder architecture.
fn validate_model(params: &ModelParams<f32>, enc: &EncoderConfig) -> Result<()> {
    let reference = fedseg_core::protoseg::init_params(enc, 0);
    if params.len() != reference.len() {
        return Err(Error::Data(format!(
            "model has {} tensors, architecture needs {}",
            params.len(),
            reference.len()
        )));
    }
    for (i, want) in reference.iter().enumerate() {
        let got = params.get(i);
        if got.value.shape() != want.value.shape() {
            return Err(Error::Data(format!(
                "model tensor {i} has shape {:?}, architecture needs {:?}",
                got.value.shape(),
                want.value.shape()
            )));
        }
    }
    Ok(())
}

/// Evaluate a model file on every client for the requested classes and
/// write a Table-style CSV: one row per client, one column per class.
pub fn cmd_evaluate(
    model_path: &Path,
    data_dir: &Path,
    class_ids: &[u8],
    out_dir: &Path,
) -> Result<()> {
    if class_ids.is_empty() {
        return Err(Error::Config("no class ids to evaluate".into()));
    }
    let params = read_fpm(model_path)?;
    let enc = EncoderConfig::default();
    validate_model(&params, &enc)?;
    let clients = load_clients(data_dir)?;
    let proto = Default::default();

    let mut csv = String::from("client");
    for c in class_ids {
        csv.push_str(&format!(",class_{c}"));
    }
    csv.push('\n');
    for client in &clients {
        csv.push_str(&client.client_id.to_string());
        for &class_id in class_ids {
            let report = eval::one_shot_validate(&params, &enc, &proto, client, class_id)?;
            match report.mean_percent {
                Some(d) => csv.push_str(&format!(",{d:.6}")),
                None => csv.push_str(",skipped"),
            }
        }
        csv.push('\n');
    }
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("dice.csv");
    fs::write(&path, &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

/// Dump the header of an FPV1 volume or FPM1 model container.
pub fn cmd_inspect(path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(path)?;
        f.read_exact(&mut magic).map_err(|_| {
            Error::Data(format!("{}: shorter than a magic number", path.display()))
        })?;
    }
    match &magic {
        b"FPV1" => {
            let hd = read_volume_header(path)?;
            println!("FPV1 volume {}", path.display());
            println!("  dims   = {}x{}x{} (DxHxW)", hd.d, hd.h, hd.w);
            println!("  labels = {}", if hd.has_labels { "present" } else { "absent" });
            println!("  style  = {}", hd.style);
        }
        b"FPM1" => {
            let params = read_fpm(path)?;
            println!("FPM1 model {}", path.display());
            println!("  tensors = {}", params.len());
            for p in params.iter() {
                println!("  {} {:?} ({} values)", p.name, p.value.shape(), p.value.len());
            }
            println!("  total scalars = {}", params.scalar_count());
        }
        other => {
            return Err(fedseg_core::ParseError::BadMagic {
                expected: "FPV1 or FPM1".into(),
                found: String::from_utf8_lossy(other).into_owned(),
            }
            .into());
        }
    }
    Ok(())
}

/// Parse `--classes 1,2,3`.
pub fn parse_class_ids(text: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let id: u8 = part
            .parse()
            .map_err(|_| Error::Config(format!("bad class id {part:?}")))?;
        out.push(id);
    }
    if out.is_empty() {
        return Err(Error::Config("no class ids given".into()));
    }
    Ok(out)
}

/// Read and parse a config file, then apply command-line overrides.
pub fn load_config(
    path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    baseline: bool,
    rounds: Option<usize>,
    cap: Option<usize>,
) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.fed.global_seed = seed;
    }
    if baseline {
        cfg.fed.baseline_mode = true;
    }
    if let Some(rounds) = rounds {
        cfg.fed.rounds = rounds;
    }
    if let Some(cap) = cap {
        cfg.fed.iteration_cap = Some(cap);
    }
    cfg.fed.validate()?;
    Ok(cfg)
}
